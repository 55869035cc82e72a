"""Sub-word token embedders and their stacking.

Three methods are implemented:

* character BiLSTM embeddings (trainable, fine-tuned with the tagger),
* hashed n-gram embeddings: a token is the mean of the hashed-bucket
  vectors of its boundary-wrapped character n-grams, plus an optional
  exact-word vector loaded from a text vector file,
* contextual character-LM embeddings: per-token hidden states of a
  forward and a backward character-level language model run over the
  whole sentence, optionally min-pooled against a per-word memory.

Only the character embedder is trainable; everything else stays frozen
during tagger training. A stack concatenates member outputs per token.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import DataError, kernels
from .autodiff import (
    Tape,
    Tensor,
    add,
    backward,
    concat,
    gather_rows,
    matmul,
    reshape,
    sgd_step,
    xavier_uniform,
)
from .ingest import Sentence, Token
from .nn import LSTMParams, bilstm_last_states, cross_entropy, lstm_run


FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
_MASK64 = 0xFFFFFFFFFFFFFFFF


def fnv1a_64(data: bytes) -> int:
    """FNV-1a over bytes; fixed here for cross-platform reproducible hashing."""
    h = FNV_OFFSET
    for byte in data:
        h ^= byte
        h = (h * FNV_PRIME) & _MASK64
    return h


@dataclass
class CharVocab:
    """Characters to indices; index 0 is the UNK entry."""

    chars: list[str]
    index: dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        if not self.index:
            self.index = {c: i + 1 for i, c in enumerate(self.chars)}

    @classmethod
    def build(cls, text: str) -> "CharVocab":
        return cls(sorted(set(text)))

    def __len__(self) -> int:
        return len(self.chars) + 1

    def encode(self, s: str) -> np.ndarray:
        idx = self.index
        return np.array([idx.get(c, 0) for c in s], dtype=np.int64)


# ---------------------------------------------------------------------------
# Character BiLSTM embedder


class CharEmbedder:
    """Token vector = concat(last forward, last backward) char-LSTM states."""

    trainable = True

    def __init__(self, vocab: CharVocab, table: Tensor, fwd: LSTMParams, bwd: LSTMParams):
        self.vocab = vocab
        self.table = table
        self.fwd = fwd
        self.bwd = bwd
        self.dim = fwd.hidden + bwd.hidden

    @classmethod
    def create(
        cls,
        rng: np.random.Generator,
        corpus_text: str,
        char_dim: int = 50,
        hidden: int = 25,
    ) -> "CharEmbedder":
        vocab = CharVocab.build(corpus_text)
        table = xavier_uniform(rng, (len(vocab), char_dim), len(vocab), char_dim)
        return cls(
            vocab,
            table,
            LSTMParams.create(rng, char_dim, hidden),
            LSTMParams.create(rng, char_dim, hidden),
        )

    def parameters(self) -> list[Tensor]:
        return [self.table, *self.fwd.tensors(), *self.bwd.tensors()]

    def embed_tokens(self, texts: list[str]) -> Tensor:
        """Batch all tokens into one padded char batch; returns (len(texts), dim)."""
        B = len(texts)
        lengths = np.array([max(len(t), 1) for t in texts], dtype=np.int64)
        T = int(lengths.max())
        idx = np.zeros((B, T), dtype=np.int64)
        for i, t in enumerate(texts):
            if t:
                idx[i, : len(t)] = self.vocab.encode(t)
        char_dim = self.table.shape[1]
        x = reshape(gather_rows(self.table, idx.ravel()), (B, T, char_dim))
        out = bilstm_last_states(x, lengths, self.fwd, self.bwd)
        empty = [i for i, t in enumerate(texts) if not t]
        if empty:
            out.data[empty] = 0.0
        return out

    def embed_token(self, token_text: str) -> Tensor:
        if not token_text:
            return Tensor(np.zeros(self.dim))
        return reshape(self.embed_tokens([token_text]), (self.dim,))

    def embed_sentence(self, sentence: Sentence, text: str) -> Tensor:
        return self.embed_tokens([t.text for t in sentence.tokens])

    def spec(self) -> dict:
        return {
            "kind": "char",
            "hidden": self.fwd.hidden,
            "char_dim": int(self.table.shape[1]),
            "vocab": self.vocab.chars,
        }

    def arrays(self) -> dict[str, np.ndarray]:
        return {
            "table": self.table.data,
            "f_w_ih": self.fwd.w_ih.data,
            "f_w_hh": self.fwd.w_hh.data,
            "f_b": self.fwd.b.data,
            "b_w_ih": self.bwd.w_ih.data,
            "b_w_hh": self.bwd.w_hh.data,
            "b_b": self.bwd.b.data,
        }


def char_embed(token_text: str, embedder: CharEmbedder) -> Tensor:
    return embedder.embed_token(token_text)


# ---------------------------------------------------------------------------
# Hashed n-gram embedder


class NGramEmbedder:
    """Mean of hashed n-gram bucket vectors plus an optional exact-word vector.

    The bucket table is frozen: hashed random projections already give each
    word a stable identity signature, which is what the tagger consumes.
    """

    trainable = False

    def __init__(
        self,
        table: np.ndarray,
        n_range: tuple[int, int] = (3, 6),
        word_table: dict[str, np.ndarray] | None = None,
    ):
        self.table = np.asarray(table, dtype=np.float64)
        self.n_min, self.n_max = n_range
        if self.n_min < 1 or self.n_max < self.n_min:
            raise ValueError(f"invalid n-gram range ({self.n_min},{self.n_max})")
        self.word_table = word_table or {}
        self.dim = int(self.table.shape[1])
        self._cache: dict[str, np.ndarray] = {}

    @classmethod
    def create(
        cls,
        rng: np.random.Generator,
        dim: int = 50,
        n_range: tuple[int, int] = (3, 6),
        bucket_count: int = 2**17,
        word_table: dict[str, np.ndarray] | None = None,
    ) -> "NGramEmbedder":
        return cls(rng.uniform(-1.0, 1.0, size=(bucket_count, dim)), n_range, word_table)

    def parameters(self) -> list[Tensor]:
        return []

    def ngrams(self, token_text: str) -> list[str]:
        wrapped = f"<{token_text}>"
        return [
            wrapped[i : i + n]
            for n in range(self.n_min, self.n_max + 1)
            for i in range(len(wrapped) - n + 1)
        ]

    def vector(self, token_text: str) -> np.ndarray:
        cached = self._cache.get(token_text)
        if cached is not None:
            return cached
        buckets = self.table.shape[0]
        rows = [self.table[fnv1a_64(g.encode("utf-8")) % buckets] for g in self.ngrams(token_text)]
        word_vec = self.word_table.get(token_text)
        if word_vec is not None:
            rows.append(word_vec)
        if not rows:
            rows = [self.table[0]]  # UNK bucket
        out = np.add.reduce(rows) / len(rows)
        self._cache[token_text] = out
        return out

    def embed_sentence(self, sentence: Sentence, text: str) -> Tensor:
        return Tensor(np.stack([self.vector(t.text) for t in sentence.tokens]))

    def spec(self) -> dict:
        return {
            "kind": "ngram",
            "n_min": self.n_min,
            "n_max": self.n_max,
            "buckets": int(self.table.shape[0]),
            "dim": self.dim,
            "words": sorted(self.word_table),
        }

    def arrays(self) -> dict[str, np.ndarray]:
        out = {"table": self.table}
        if self.word_table:
            out["word_vectors"] = np.stack([self.word_table[w] for w in sorted(self.word_table)])
        return out


def ngram_embed(token_text: str, embedder: NGramEmbedder) -> np.ndarray:
    return embedder.vector(token_text)


def load_text_vectors(path) -> dict[str, np.ndarray]:
    """Plain-text vectors: first line "count dim", then "word v1 .. vd"."""
    with open(path, encoding="utf-8") as f:
        header = f.readline().split()
        if len(header) != 2:
            raise DataError(f"{path}: expected header 'count dim'")
        count, dim = int(header[0]), int(header[1])
        table: dict[str, np.ndarray] = {}
        for lineno, line in enumerate(f, start=2):
            parts = line.rstrip("\n").split(" ")
            if len(parts) != dim + 1:
                raise DataError(f"{path}:{lineno}: expected {dim} values")
            table[parts[0]] = np.array([float(v) for v in parts[1:]])
    if len(table) != count:
        raise DataError(f"{path}: header promised {count} vectors, found {len(table)}")
    return table


def save_text_vectors(path, table: dict[str, np.ndarray]) -> None:
    words = sorted(table)
    dim = len(table[words[0]]) if words else 0
    with open(path, "w", encoding="utf-8") as f:
        f.write(f"{len(words)} {dim}\n")
        for w in words:
            f.write(w + " " + " ".join(repr(float(v)) for v in table[w]) + "\n")


# ---------------------------------------------------------------------------
# Character language model


@dataclass
class CharLM:
    """One direction of a next-character LSTM language model."""

    vocab: CharVocab
    emb: Tensor
    lstm: LSTMParams
    proj_w: Tensor
    proj_b: Tensor

    @classmethod
    def create(cls, rng: np.random.Generator, vocab: CharVocab, char_dim: int, hidden: int) -> "CharLM":
        v = len(vocab)
        return cls(
            vocab=vocab,
            emb=xavier_uniform(rng, (v, char_dim), v, char_dim),
            lstm=LSTMParams.create(rng, char_dim, hidden),
            proj_w=xavier_uniform(rng, (hidden, v), hidden, v),
            proj_b=Tensor(np.zeros(v), requires_grad=True),
        )

    def parameters(self) -> list[Tensor]:
        return [self.emb, *self.lstm.tensors(), self.proj_w, self.proj_b]

    def freeze(self) -> None:
        for p in self.parameters():
            p.requires_grad = False

    def hidden_states(self, idx: np.ndarray) -> np.ndarray:
        """Inference-only hidden states (T, H) for one index sequence."""
        x = self.emb.data[idx][None]
        h, _, _ = kernels.lstm_forward(
            x, np.array([len(idx)], dtype=np.int64), self.lstm.w_ih.data, self.lstm.w_hh.data, self.lstm.b.data
        )
        return h[0]

    def nll(self, idx: np.ndarray) -> float:
        """Mean next-character negative log-likelihood over one sequence."""
        if len(idx) < 2:
            raise DataError("sequence too short for next-character evaluation")
        h = self.hidden_states(idx[:-1])
        logits = h @ self.proj_w.data + self.proj_b.data
        m = logits.max(axis=1, keepdims=True)
        lse = m[:, 0] + np.log(np.exp(logits - m).sum(axis=1))
        return float(np.mean(lse - logits[np.arange(len(idx) - 1), idx[1:]]))


@dataclass
class CharLMTrainConfig:
    hidden: int = 128
    char_dim: int = 32
    window: int = 128
    batch_size: int = 16
    epochs: int = 3
    learning_rate: float = 0.5
    holdout_fraction: float = 0.1
    seed: int = 0


@dataclass
class CharLMPretrainResult:
    embedder: "CharLMEmbedder"
    history: dict[str, list[tuple[int, float, float]]]  # direction -> (epoch, train loss, holdout ppl)
    perplexity: dict[str, float]


def _lm_windows(idx: np.ndarray, window: int) -> list[np.ndarray]:
    # Non-overlapping windows of window+1 chars (input/target shifted by one).
    out = []
    for s in range(0, len(idx) - 1, window):
        chunk = idx[s : s + window + 1]
        if len(chunk) >= 2:
            out.append(chunk)
    return out


def _train_one_lm(
    rng: np.random.Generator, vocab: CharVocab, idx: np.ndarray, config: CharLMTrainConfig
) -> tuple[CharLM, list[tuple[int, float, float]]]:
    lm = CharLM.create(rng, vocab, config.char_dim, config.hidden)
    split = max(int(len(idx) * (1.0 - config.holdout_fraction)), config.window + 1)
    train_idx, held = idx[:split], idx[split:]
    windows = _lm_windows(train_idx, config.window)
    history = []
    for epoch in range(1, config.epochs + 1):
        losses = []
        for start in range(0, len(windows), config.batch_size):
            batch = windows[start : start + config.batch_size]
            T = max(len(w) for w in batch) - 1
            B = len(batch)
            xs = np.zeros((B, T), dtype=np.int64)
            ys = np.zeros((B, T), dtype=np.int64)
            lengths = np.empty(B, dtype=np.int64)
            for i, w in enumerate(batch):
                n = len(w) - 1
                xs[i, :n] = w[:-1]
                ys[i, :n] = w[1:]
                lengths[i] = n
            flat_keep = np.flatnonzero((np.arange(T)[None, :] < lengths[:, None]).ravel())
            with Tape():
                x = reshape(gather_rows(lm.emb, xs.ravel()), (B, T, config.char_dim))
                h = lstm_run(x, lengths, lm.lstm)
                states = gather_rows(reshape(h, (B * T, config.hidden)), flat_keep)
                logits = add(matmul(states, lm.proj_w), lm.proj_b)
                loss = cross_entropy(logits, ys.ravel()[flat_keep])
                backward(loss)
            sgd_step(lm.parameters(), config.learning_rate)
            losses.append(loss.item())
        ppl = float(np.exp(lm.nll(held))) if len(held) >= 2 else float("nan")
        history.append((epoch, float(np.mean(losses)), ppl))
    return lm, history


class CharLMEmbedder:
    """Contextual per-token features from frozen forward/backward char LMs.

    Forward feature: LM state at the token's last character. Backward
    feature: reversed-LM state at the token's first character.
    """

    trainable = False

    def __init__(self, forward_lm: CharLM, backward_lm: CharLM, cache: bool = True):
        self.forward_lm = forward_lm
        self.backward_lm = backward_lm
        self.hidden = forward_lm.lstm.hidden
        self.dim = 2 * self.hidden
        self._cache: dict[tuple, np.ndarray] | None = {} if cache else None

    def parameters(self) -> list[Tensor]:
        return []

    def _sentence_matrix(self, sentence: Sentence, text: str) -> np.ndarray:
        base = sentence.start
        s = text[base : sentence.end]
        key = (base, s) if self._cache is not None else None
        if key is not None:
            hit = self._cache.get(key)
            if hit is not None:
                return hit
        idx = self.forward_lm.vocab.encode(s)
        h_f = self.forward_lm.hidden_states(idx)
        h_b = self.backward_lm.hidden_states(self.backward_lm.vocab.encode(s[::-1]))
        n = len(s)
        rows = np.empty((len(sentence.tokens), self.dim))
        for i, tok in enumerate(sentence.tokens):
            rows[i, : self.hidden] = h_f[tok.end - base - 1]
            rows[i, self.hidden :] = h_b[n - 1 - (tok.start - base)]
        if key is not None:
            self._cache[key] = rows
        return rows

    def embed_sentence(self, sentence: Sentence, text: str) -> Tensor:
        return Tensor(self._sentence_matrix(sentence, text))

    def spec(self) -> dict:
        return {
            "kind": "charlm",
            "hidden": self.hidden,
            "char_dim": int(self.forward_lm.emb.shape[1]),
            "vocab": self.forward_lm.vocab.chars,
        }

    def arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for tag, lm in (("f", self.forward_lm), ("b", self.backward_lm)):
            out[f"{tag}_emb"] = lm.emb.data
            out[f"{tag}_w_ih"] = lm.lstm.w_ih.data
            out[f"{tag}_w_hh"] = lm.lstm.w_hh.data
            out[f"{tag}_lb"] = lm.lstm.b.data
            out[f"{tag}_proj_w"] = lm.proj_w.data
            out[f"{tag}_proj_b"] = lm.proj_b.data
        return out


def pretrain_charlm(corpus_text: str, config: CharLMTrainConfig | None = None) -> CharLMPretrainResult:
    """Train forward and backward character LMs on raw text.

    The backward model trains on the reversed character stream. Both come
    back frozen inside a :class:`CharLMEmbedder`.
    """
    config = config or CharLMTrainConfig()
    if len(corpus_text) < config.window + 1:
        raise DataError(
            f"corpus of {len(corpus_text)} chars is smaller than one window ({config.window + 1})"
        )
    vocab = CharVocab.build(corpus_text)
    rng = np.random.default_rng(config.seed)
    idx = vocab.encode(corpus_text)
    fwd, hist_f = _train_one_lm(rng, vocab, idx, config)
    bwd, hist_b = _train_one_lm(rng, vocab, idx[::-1], config)
    fwd.freeze()
    bwd.freeze()
    return CharLMPretrainResult(
        embedder=CharLMEmbedder(fwd, bwd),
        history={"forward": hist_f, "backward": hist_b},
        perplexity={"forward": hist_f[-1][2], "backward": hist_b[-1][2]},
    )


def charlm_embed(sentence: Sentence, embedder: CharLMEmbedder, text: str) -> np.ndarray:
    return embedder._sentence_matrix(sentence, text)


# ---------------------------------------------------------------------------
# Min-pooled contextual embeddings


class PooledMemory:
    """Per-word running elementwise minimum over all contextual vectors seen."""

    def __init__(self):
        self.vectors: dict[str, np.ndarray] = {}

    def update(self, word: str, vec: np.ndarray) -> np.ndarray:
        cur = self.vectors.get(word)
        self.vectors[word] = vec.copy() if cur is None else np.minimum(cur, vec)
        return self.vectors[word]

    def reset(self) -> None:
        self.vectors.clear()


def pooled_embed(token: Token, context_vector: np.ndarray, memory: PooledMemory) -> np.ndarray:
    """Update the word's min-memory and return concat(context, memory)."""
    mem = memory.update(token.text, context_vector)
    return np.concatenate([context_vector, mem])


class PooledCharLMEmbedder:
    """Char-LM embedder whose output is doubled with a min-pooled memory.

    The memory is mutable shared state; documents must be processed
    sequentially. By default it persists across a split and is reset at
    split boundaries via :meth:`reset_state`.
    """

    trainable = False

    def __init__(self, inner: CharLMEmbedder):
        self.inner = inner
        self.memory = PooledMemory()
        self.dim = 2 * inner.dim

    def parameters(self) -> list[Tensor]:
        return []

    def reset_state(self) -> None:
        self.memory.reset()

    def embed_sentence(self, sentence: Sentence, text: str) -> Tensor:
        ctx = self.inner._sentence_matrix(sentence, text)
        rows = np.empty((len(sentence.tokens), self.dim))
        for i, tok in enumerate(sentence.tokens):
            rows[i] = pooled_embed(tok, ctx[i], self.memory)
        return Tensor(rows)

    def spec(self) -> dict:
        return {"kind": "pooled", "inner": self.inner.spec()}

    def arrays(self) -> dict[str, np.ndarray]:
        return self.inner.arrays()


# ---------------------------------------------------------------------------
# Stacking


class EmbeddingStack:
    """Ordered embedders whose outputs concatenate into one token vector."""

    def __init__(self, members: list, expected_total: int | None = None):
        if not members:
            raise ValueError("embedding stack needs at least one member")
        self.members = list(members)
        self.total_dim = sum(m.dim for m in self.members)
        if expected_total is not None and expected_total != self.total_dim:
            raise ValueError(
                f"stack dimension mismatch: members sum to {self.total_dim}, expected {expected_total}"
            )

    def parameters(self) -> list[Tensor]:
        return [p for m in self.members for p in m.parameters()]

    def reset_state(self) -> None:
        for m in self.members:
            if hasattr(m, "reset_state"):
                m.reset_state()

    def embed(self, sentence: Sentence, text: str) -> Tensor:
        outs = []
        for m in self.members:
            out = m.embed_sentence(sentence, text)
            if out.shape != (len(sentence.tokens), m.dim):
                raise ValueError(
                    f"embedder {type(m).__name__} produced shape {out.shape}, declared dim {m.dim}"
                )
            outs.append(out)
        return outs[0] if len(outs) == 1 else concat(outs, axis=1)

    def embed_flat(self, items: list[tuple[Sentence, str]]) -> Tensor:
        """Token vectors for several sentences as one (sum of tokens, dim) matrix.

        Batching all tokens into one char-LSTM call is much cheaper than
        per-sentence calls; frozen members are concatenated as constants.
        Row order follows the sentences and their tokens.
        """
        outs = []
        for m in self.members:
            if isinstance(m, CharEmbedder):
                outs.append(m.embed_tokens([t.text for sent, _ in items for t in sent.tokens]))
            else:
                outs.append(
                    Tensor(np.concatenate([m.embed_sentence(s, text).data for s, text in items]))
                )
        return outs[0] if len(outs) == 1 else concat(outs, axis=1)


def stack_embed(sentence: Sentence, stack: EmbeddingStack, text: str) -> Tensor:
    return stack.embed(sentence, text)


def _lstm_from_arrays(arrays: dict, prefix: str, trainable: bool) -> LSTMParams:
    return LSTMParams(
        w_ih=Tensor(arrays[f"{prefix}_w_ih"], requires_grad=trainable),
        w_hh=Tensor(arrays[f"{prefix}_w_hh"], requires_grad=trainable),
        b=Tensor(arrays[f"{prefix}_b"], requires_grad=trainable),
        hidden=int(arrays[f"{prefix}_w_hh"].shape[1]),
    )


def _charlm_from_arrays(vocab: CharVocab, arrays: dict, tag: str) -> CharLM:
    lm = CharLM(
        vocab=vocab,
        emb=Tensor(arrays[f"{tag}_emb"]),
        lstm=LSTMParams(
            w_ih=Tensor(arrays[f"{tag}_w_ih"]),
            w_hh=Tensor(arrays[f"{tag}_w_hh"]),
            b=Tensor(arrays[f"{tag}_lb"]),
            hidden=int(arrays[f"{tag}_w_hh"].shape[1]),
        ),
        proj_w=Tensor(arrays[f"{tag}_proj_w"]),
        proj_b=Tensor(arrays[f"{tag}_proj_b"]),
    )
    return lm


def embedder_from_spec(spec: dict, arrays: dict[str, np.ndarray]):
    """Rebuild an embedder from its ``spec()``/``arrays()`` serialization."""
    kind = spec.get("kind")
    if kind == "char":
        return CharEmbedder(
            CharVocab(list(spec["vocab"])),
            Tensor(arrays["table"], requires_grad=True),
            _lstm_from_arrays(arrays, "f", trainable=True),
            _lstm_from_arrays(arrays, "b", trainable=True),
        )
    if kind == "ngram":
        words = list(spec["words"])
        word_table = (
            {w: arrays["word_vectors"][i] for i, w in enumerate(words)} if words else {}
        )
        return NGramEmbedder(arrays["table"], (int(spec["n_min"]), int(spec["n_max"])), word_table)
    if kind == "charlm":
        vocab = CharVocab(list(spec["vocab"]))
        return CharLMEmbedder(
            _charlm_from_arrays(vocab, arrays, "f"),
            _charlm_from_arrays(vocab, arrays, "b"),
        )
    if kind == "pooled":
        inner = embedder_from_spec(spec["inner"], arrays)
        return PooledCharLMEmbedder(inner)
    raise DataError(f"unknown embedder kind {kind!r} in checkpoint")


def save_charlm(path, embedder: CharLMEmbedder, extra_manifest: dict | None = None) -> None:
    from .serialize import save_archive

    manifest = {"format": "deidseq-charlm", "spec": embedder.spec()}
    manifest.update(extra_manifest or {})
    save_archive(path, manifest, embedder.arrays())


def load_charlm(path) -> CharLMEmbedder:
    from .serialize import load_archive

    manifest, arrays = load_archive(path)
    if manifest.get("format") != "deidseq-charlm":
        raise DataError(f"{path}: not a character-LM checkpoint")
    emb = embedder_from_spec(manifest["spec"], arrays)
    if not isinstance(emb, CharLMEmbedder):
        raise DataError(f"{path}: checkpoint does not contain a character LM")
    return emb

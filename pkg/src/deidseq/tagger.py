"""BiLSTM-CRF sequence labeler.

Embedding stack -> dropout -> BiLSTM (hidden 256) -> emission projection
-> linear-chain CRF with virtual START/END states. Training minimizes the
CRF negative log-likelihood (forward algorithm) with mini-batch SGD,
early-stopped on development-set strict span F1; decoding is Viterbi.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import DataError, NumericError, kernels
from .autodiff import (
    Tape,
    Tensor,
    accumulate_grad,
    add,
    backward,
    concat,
    matmul,
    mean,
    mul,
    record_node,
    reshape,
    sgd_step,
    sub,
    xavier_uniform,
)
from .embeddings import EmbeddingStack, embedder_from_spec
from .ingest import AnnotatedDocument, Sentence, decode_bio, encode_bio, sentences_of
from .nn import LSTMParams, bilstm_states, dropout_mask
from .serialize import load_archive, save_archive


@dataclass
class LabelInventory:
    """BIO labels over a PHI class set: O first, then B-X, I-X per class."""

    classes: list[str]
    labels: list[str] = field(default_factory=list)
    index: dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        if not self.labels:
            self.labels = ["O"]
            for c in self.classes:
                self.labels.append(f"B-{c}")
                self.labels.append(f"I-{c}")
        self.index = {lab: i for i, lab in enumerate(self.labels)}

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def start_index(self) -> int:
        return len(self.labels)

    @property
    def end_index(self) -> int:
        return len(self.labels) + 1

    def encode(self, labels: list[str]) -> np.ndarray:
        try:
            return np.array([self.index[lab] for lab in labels], dtype=np.int64)
        except KeyError as e:
            raise DataError(f"label {e.args[0]!r} not in inventory") from None


# ---------------------------------------------------------------------------
# CRF operations (tape-aware)


def _check_labels(emissions: Tensor, labels: np.ndarray) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    T, L = emissions.shape
    if labels.shape != (T,):
        raise ValueError(f"labels shape {labels.shape} does not match {T} tokens")
    if labels.min() < 0 or labels.max() >= L:
        raise ValueError(f"label index out of range [0,{L}): {labels}")
    return labels


def score_sequence(emissions: Tensor, transitions: Tensor, labels: np.ndarray) -> Tensor:
    """Path score: emissions along the sequence plus transitions incl. START/END."""
    labels = _check_labels(emissions, labels)
    T, L = emissions.shape
    start, end = L, L + 1
    em, tr = emissions.data, transitions.data
    value = em[np.arange(T), labels].sum() + tr[start, labels[0]] + tr[labels[-1], end]
    value += tr[labels[:-1], labels[1:]].sum()
    out = Tensor(np.float64(value), requires_grad=emissions.requires_grad or transitions.requires_grad)

    def bw(g):
        g = float(g)
        if emissions.requires_grad:
            d_em = np.zeros_like(em)
            d_em[np.arange(T), labels] = g
            accumulate_grad(emissions, d_em)
        if transitions.requires_grad:
            d_tr = np.zeros_like(tr)
            d_tr[start, labels[0]] += g
            d_tr[labels[-1], end] += g
            np.add.at(d_tr, (labels[:-1], labels[1:]), g)
            accumulate_grad(transitions, d_tr)

    return record_node(out, bw)


def crf_log_partition(emissions: Tensor, transitions: Tensor) -> Tensor:
    """log sum over all label sequences of exp(path score), via the forward algorithm."""
    if emissions.shape[0] < 1:
        raise ValueError("crf_log_partition: need at least one token")
    log_z, alpha = kernels.crf_forward(emissions.data, transitions.data)
    out = Tensor(np.float64(log_z), requires_grad=emissions.requires_grad or transitions.requires_grad)

    def bw(g):
        d_em, d_tr = kernels.crf_backward(emissions.data, transitions.data, alpha, log_z)
        g = float(g)
        if emissions.requires_grad:
            accumulate_grad(emissions, d_em * g)
        if transitions.requires_grad:
            accumulate_grad(transitions, d_tr * g)

    return record_node(out, bw)


def crf_nll(emissions: Tensor, transitions: Tensor, gold_labels: np.ndarray) -> Tensor:
    """Negative log-likelihood of the gold sequence; >= 0, differentiable."""
    return sub(crf_log_partition(emissions, transitions), score_sequence(emissions, transitions, gold_labels))


def viterbi_decode(emissions, transitions) -> tuple[list[int], float]:
    """Maximum-scoring label sequence; ties go to the lowest label index."""
    em = emissions.data if isinstance(emissions, Tensor) else np.asarray(emissions, dtype=np.float64)
    tr = transitions.data if isinstance(transitions, Tensor) else np.asarray(transitions, dtype=np.float64)
    if em.shape[0] < 1:
        raise ValueError("viterbi_decode: need at least one token")
    path, score = kernels.viterbi(em, tr)
    return [int(i) for i in path], float(score)


# ---------------------------------------------------------------------------
# Model


@dataclass
class TrainConfig:
    learning_rate: float = 0.1
    batch_size: int = 32
    dropout_p: float = 0.5
    max_epochs: int = 100
    patience: int = 5
    seed: int = 13

    def validate(self) -> None:
        if not (0.0 <= self.dropout_p < 1.0):
            raise ValueError(f"dropout_p must be in [0,1), got {self.dropout_p}")
        if self.batch_size < 1 or self.max_epochs < 1 or self.patience < 0:
            raise ValueError("batch_size and max_epochs must be >= 1, patience >= 0")
        if self.learning_rate <= 0:
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate}")


class TaggerModel:
    """Trained parameters plus the embedding stack and label inventory."""

    def __init__(
        self,
        inventory: LabelInventory,
        stack: EmbeddingStack,
        fwd: LSTMParams,
        bwd: LSTMParams,
        emission_w: Tensor,
        emission_b: Tensor,
        transitions: Tensor,
        meta: dict | None = None,
    ):
        self.inventory = inventory
        self.stack = stack
        self.fwd = fwd
        self.bwd = bwd
        self.emission_w = emission_w
        self.emission_b = emission_b
        self.transitions = transitions
        self.meta = meta or {}

    @classmethod
    def create(
        cls, rng: np.random.Generator, inventory: LabelInventory, stack: EmbeddingStack, hidden: int = 256
    ) -> "TaggerModel":
        L = len(inventory)
        d = stack.total_dim
        return cls(
            inventory=inventory,
            stack=stack,
            fwd=LSTMParams.create(rng, d, hidden),
            bwd=LSTMParams.create(rng, d, hidden),
            emission_w=xavier_uniform(rng, (2 * hidden, L), 2 * hidden, L),
            emission_b=Tensor(np.zeros(L), requires_grad=True),
            transitions=Tensor(np.zeros((L + 2, L + 2)), requires_grad=True),
        )

    @property
    def hidden(self) -> int:
        return self.fwd.hidden

    def parameters(self) -> list[Tensor]:
        return [
            *self.stack.parameters(),
            *self.fwd.tensors(),
            *self.bwd.tensors(),
            self.emission_w,
            self.emission_b,
            self.transitions,
        ]

    def emissions(
        self,
        sentence: Sentence,
        text: str,
        dropout_rng: np.random.Generator | None = None,
        dropout_p: float = 0.0,
    ) -> Tensor:
        return batched_emissions(self, [(sentence, text)], dropout_rng, dropout_p)[0]


def batched_emissions(
    model: TaggerModel,
    items: list[tuple[Sentence, str]],
    dropout_rng: np.random.Generator | None = None,
    dropout_p: float = 0.0,
) -> list[Tensor]:
    """Per-sentence emission matrices from one padded BiLSTM pass.

    Running the whole batch through the BiLSTM at once streams the
    recurrent weights once per timestep instead of once per sentence.
    """
    from .autodiff import gather_rows

    lengths = np.array([len(s.tokens) for s, _ in items], dtype=np.int64)
    n_rows = int(lengths.sum())
    B, t_max = len(items), int(lengths.max())
    feats = model.stack.embed_flat(items)  # (n_rows, D)
    if dropout_rng is not None and dropout_p > 0.0:
        feats = mul(feats, dropout_mask(dropout_rng, feats.shape, dropout_p))
    d = feats.shape[1]
    padded_src = concat([feats, Tensor(np.zeros((1, d)))], axis=0)  # final row = pad
    idx = np.full((B, t_max), n_rows, dtype=np.intp)
    row = 0
    for i, n in enumerate(lengths):
        idx[i, :n] = np.arange(row, row + n)
        row += int(n)
    x = reshape(gather_rows(padded_src, idx.ravel()), (B, t_max, d))
    h = bilstm_states(x, lengths, model.fwd, model.bwd)
    flat = reshape(h, (B * t_max, 2 * model.hidden))
    em_all = add(matmul(flat, model.emission_w), model.emission_b)
    return [
        gather_rows(em_all, np.arange(i * t_max, i * t_max + int(n))) for i, n in enumerate(lengths)
    ]


@dataclass
class TrainResult:
    model: TaggerModel
    log: list[tuple[int, float, float]]  # (epoch, mean train loss, dev strict micro F1)
    boundary_snaps: int


def _sentence_items(docs: list[AnnotatedDocument], inventory: LabelInventory, warnings: list[str]):
    items = []
    for doc in docs:
        for sent in sentences_of(doc.text):
            labels = encode_bio(sent, doc.spans, warnings)
            items.append((sent, doc.text, inventory.encode(labels)))
    return items


def train(
    train_docs: list[AnnotatedDocument],
    dev_docs: list[AnnotatedDocument],
    stack: EmbeddingStack,
    config: TrainConfig,
    hidden: int = 256,
    classes: list[str] | None = None,
) -> TrainResult:
    """Train a tagger with early stopping on dev strict micro span-F1."""
    from .evaluation import evaluate_ner

    config.validate()
    if not train_docs or not dev_docs:
        raise DataError("train and dev splits must both be non-empty")
    if classes is None:
        classes = sorted({s.label for d in [*train_docs, *dev_docs] for s in d.spans})
    if not classes:
        raise DataError("no PHI classes present in the gold data")
    inventory = LabelInventory(classes)
    rng = np.random.default_rng(config.seed)
    model = TaggerModel.create(rng, inventory, stack, hidden)

    warnings: list[str] = []
    items = _sentence_items(train_docs, inventory, warnings)
    params = model.parameters()

    log: list[tuple[int, float, float]] = []
    best_f1 = -1.0
    best_state: list[np.ndarray] | None = None
    best_epoch = 0
    epochs_since_best = 0

    for epoch in range(1, config.max_epochs + 1):
        stack.reset_state()
        order = rng.permutation(len(items))
        epoch_losses = []
        for b0 in range(0, len(order), config.batch_size):
            batch = [items[i] for i in order[b0 : b0 + config.batch_size]]
            with Tape():
                ems = batched_emissions(
                    model, [(s, t) for s, t, _ in batch], dropout_rng=rng, dropout_p=config.dropout_p
                )
                nlls = [
                    reshape(crf_nll(em, model.transitions, gold), (1,))
                    for em, (_, _, gold) in zip(ems, batch)
                ]
                loss = mean(concat(nlls, axis=0))
                if not np.isfinite(loss.data):
                    raise NumericError(
                        f"non-finite loss at epoch {epoch}, batch {b0 // config.batch_size}"
                    )
                backward(loss)
            sgd_step(params, config.learning_rate)
            epoch_losses.append(loss.item())

        preds = predict_documents(dev_docs, model)
        dev_f1 = evaluate_ner(dev_docs, preds).micro.f1
        log.append((epoch, float(np.mean(epoch_losses)), dev_f1))
        if dev_f1 > best_f1:
            best_f1 = dev_f1
            best_epoch = epoch
            best_state = [p.data.copy() for p in params]
            epochs_since_best = 0
        else:
            epochs_since_best += 1
        if epochs_since_best >= config.patience:
            break

    if best_state is not None:
        for p, saved in zip(params, best_state):
            p.data[:] = saved
    model.meta.update(
        {
            "seed": config.seed,
            "epochs_run": len(log),
            "best_epoch": best_epoch,
            "dev_f1": best_f1,
            "boundary_snaps": len(warnings),
            "kernels_backend": kernels.BACKEND,
        }
    )
    return TrainResult(model=model, log=log, boundary_snaps=len(warnings))


def predict(doc_text: str, model: TaggerModel, doc_id: str = "doc") -> AnnotatedDocument:
    """Tokenize, embed, decode: deterministic, dropout-free."""
    sentences = sentences_of(doc_text)
    spans = []
    if sentences:
        ems = batched_emissions(model, [(s, doc_text) for s in sentences])
        for sent, em in zip(sentences, ems):
            path, _ = viterbi_decode(em, model.transitions)
            labels = [model.inventory.labels[i] for i in path]
            spans.extend(decode_bio(sent, labels, doc_text))
    return AnnotatedDocument(doc_id=doc_id, text=doc_text, spans=sorted(spans))


def predict_documents(docs: list[AnnotatedDocument], model: TaggerModel) -> list[AnnotatedDocument]:
    """Predict a whole split sequentially; pooled memories reset at the boundary."""
    model.stack.reset_state()
    return [predict(d.text, model, doc_id=d.doc_id) for d in docs]


# ---------------------------------------------------------------------------
# Checkpointing


def save_model(model: TaggerModel, path) -> None:
    manifest = {
        "format": "deidseq-tagger",
        "classes": model.inventory.classes,
        "hidden": model.hidden,
        "stack": [m.spec() for m in model.stack.members],
        "meta": model.meta,
    }
    arrays: dict[str, np.ndarray] = {
        "bilstm.f_w_ih": model.fwd.w_ih.data,
        "bilstm.f_w_hh": model.fwd.w_hh.data,
        "bilstm.f_b": model.fwd.b.data,
        "bilstm.b_w_ih": model.bwd.w_ih.data,
        "bilstm.b_w_hh": model.bwd.w_hh.data,
        "bilstm.b_b": model.bwd.b.data,
        "emission.w": model.emission_w.data,
        "emission.b": model.emission_b.data,
        "transitions": model.transitions.data,
    }
    for i, member in enumerate(model.stack.members):
        for key, arr in member.arrays().items():
            arrays[f"stack{i}.{key}"] = arr
    save_archive(path, manifest, arrays)


def load_model(path) -> TaggerModel:
    manifest, arrays = load_archive(path)
    if manifest.get("format") != "deidseq-tagger":
        raise DataError(f"{path}: not a tagger checkpoint")
    inventory = LabelInventory(list(manifest["classes"]))
    members = []
    for i, spec in enumerate(manifest["stack"]):
        prefix = f"stack{i}."
        member_arrays = {k[len(prefix) :]: v for k, v in arrays.items() if k.startswith(prefix)}
        members.append(embedder_from_spec(spec, member_arrays))
    stack = EmbeddingStack(members)
    hidden = int(manifest["hidden"])

    def lstm(tag: str) -> LSTMParams:
        return LSTMParams(
            w_ih=Tensor(arrays[f"bilstm.{tag}_w_ih"], requires_grad=True),
            w_hh=Tensor(arrays[f"bilstm.{tag}_w_hh"], requires_grad=True),
            b=Tensor(arrays[f"bilstm.{tag}_b"], requires_grad=True),
            hidden=hidden,
        )

    L = len(inventory)
    expected = {
        "emission.w": (2 * hidden, L),
        "emission.b": (L,),
        "transitions": (L + 2, L + 2),
    }
    for key, shape in expected.items():
        if arrays[key].shape != shape:
            raise DataError(f"{path}: {key} has shape {arrays[key].shape}, expected {shape}")
    return TaggerModel(
        inventory=inventory,
        stack=stack,
        fwd=lstm("f"),
        bwd=lstm("b"),
        emission_w=Tensor(arrays["emission.w"], requires_grad=True),
        emission_b=Tensor(arrays["emission.b"], requires_grad=True),
        transitions=Tensor(arrays["transitions"], requires_grad=True),
        meta=dict(manifest.get("meta", {})),
    )

import math

import numpy as np
import pytest

from deidseq import DataError
from deidseq.autodiff import Tape, Tensor, backward, mean
from deidseq.embeddings import (
    CharEmbedder,
    CharLMTrainConfig,
    CharVocab,
    EmbeddingStack,
    NGramEmbedder,
    PooledCharLMEmbedder,
    PooledMemory,
    char_embed,
    charlm_embed,
    embedder_from_spec,
    fnv1a_64,
    load_charlm,
    load_text_vectors,
    ngram_embed,
    pooled_embed,
    pretrain_charlm,
    save_charlm,
    save_text_vectors,
    stack_embed,
)
from deidseq.ingest import Token, sentences_of


ALPHABET = "abcdefghijklmnopqrstuvwxyzáéíóúñ0123456789 "


class TestCharEmbedder:
    def test_output_dimension_contract(self):
        ce = CharEmbedder.create(np.random.default_rng(0), ALPHABET, hidden=25)
        assert ce.dim == 50
        assert char_embed("mayo", ce).shape == (50,)

    def test_all_zero_parameters_give_zero_vector(self):
        ce = CharEmbedder.create(np.random.default_rng(0), ALPHABET, hidden=4)
        for p in [*ce.fwd.tensors(), *ce.bwd.tensors()]:
            p.data[:] = 0.0
        assert np.all(char_embed("mayo", ce).data == 0.0)

    def test_empty_token_zero_vector(self):
        ce = CharEmbedder.create(np.random.default_rng(0), ALPHABET, hidden=3)
        v = char_embed("", ce)
        assert v.shape == (6,) and np.all(v.data == 0.0)

    def test_single_char_token_matches_hand_stepped_lstm(self):
        # one char, H=1: forward and backward direction see the same input
        ce = CharEmbedder.create(np.random.default_rng(1), "x", char_dim=1, hidden=1)
        ce.table.data[:] = np.array([[0.0], [2.0]])  # UNK, 'x'
        for params in (ce.fwd, ce.bwd):
            params.w_ih.data[:] = np.array([[0.5], [-0.3], [0.8], [0.2]])
            params.w_hh.data[:] = 1.0  # never used for length-1 input
            params.b.data[:] = np.array([0.05, -0.1, 0.2, 0.0])
        sig = lambda v: 1 / (1 + math.exp(-v))
        i, g, o = sig(0.5 * 2 + 0.05), math.tanh(0.8 * 2 + 0.2), sig(0.2 * 2 + 0.0)
        expected = o * math.tanh(i * g)
        np.testing.assert_allclose(char_embed("x", ce).data, [expected, expected], rtol=1e-12)

    def test_unknown_chars_map_to_unk_row(self):
        ce = CharEmbedder.create(np.random.default_rng(2), "ab", hidden=2)
        np.testing.assert_array_equal(char_embed("Ω", ce).data, char_embed("@", ce).data)

    def test_batched_equals_single(self):
        ce = CharEmbedder.create(np.random.default_rng(3), ALPHABET, hidden=5)
        words = ["mayo", "x", "consulta", "12"]
        batch = ce.embed_tokens(words)
        for k, w in enumerate(words):
            np.testing.assert_allclose(batch.data[k], char_embed(w, ce).data, atol=1e-12)

    def test_gradients_flow_to_table_and_lstm(self):
        ce = CharEmbedder.create(np.random.default_rng(4), ALPHABET, hidden=3)
        with Tape():
            backward(mean(ce.embed_tokens(["mayo", "sol"])))
        assert ce.table.grad is not None
        assert all(p.grad is not None for p in ce.fwd.tensors())


class TestNGramEmbedder:
    def test_ngrams_of_mayo(self):
        ng = NGramEmbedder.create(np.random.default_rng(0), dim=4, n_range=(3, 3), bucket_count=32)
        assert ng.ngrams("mayo") == ["<ma", "may", "ayo", "yo>"]

    def test_identical_rows_mean_identity(self):
        ng = NGramEmbedder.create(np.random.default_rng(0), dim=4, n_range=(3, 3), bucket_count=32)
        ng.table[:] = 7.25
        np.testing.assert_allclose(ngram_embed("mayo", ng), np.full(4, 7.25))

    def test_zero_table_zero_vector(self):
        ng = NGramEmbedder.create(np.random.default_rng(0), dim=4, bucket_count=32)
        ng.table[:] = 0.0
        ng._cache.clear()
        assert np.all(ngram_embed("mayo", ng) == 0.0)

    def test_matches_independent_hash_and_mean(self):
        # independent FNV-1a implementation, no shared code with the module
        def fnv(data: bytes) -> int:
            h = 14695981039346656037
            for byte in data:
                h = ((h ^ byte) * 1099511628211) % 2**64
            return h

        ng = NGramEmbedder.create(np.random.default_rng(5), dim=6, n_range=(3, 3), bucket_count=64)
        w = "mayo"
        grams = ["<ma", "may", "ayo", "yo>"]
        expected = np.mean([ng.table[fnv(g.encode()) % 64] for g in grams], axis=0)
        np.testing.assert_allclose(ngram_embed(w, ng), expected, atol=1e-15)

    def test_fnv_reference_value(self):
        # known FNV-1a test vector
        assert fnv1a_64(b"") == 0xCBF29CE484222325
        assert fnv1a_64(b"a") == 0xAF63DC4C8601EC8C

    def test_deterministic_pure_function(self):
        ng = NGramEmbedder.create(np.random.default_rng(6), dim=8)
        v1 = ngram_embed("consulta", ng).copy()
        v2 = ngram_embed("consulta", ng)
        np.testing.assert_array_equal(v1, v2)

    def test_short_token_falls_back_to_unk_bucket(self):
        ng = NGramEmbedder.create(np.random.default_rng(7), dim=4, n_range=(5, 6), bucket_count=16)
        np.testing.assert_array_equal(ngram_embed("ab", ng), ng.table[0])

    def test_short_token_uses_word_vector_when_present(self):
        wv = {"ab": np.array([1.0, 2.0, 3.0, 4.0])}
        ng = NGramEmbedder.create(np.random.default_rng(8), dim=4, n_range=(5, 6), bucket_count=16, word_table=wv)
        np.testing.assert_array_equal(ngram_embed("ab", ng), wv["ab"])

    def test_word_vector_included_in_mean(self):
        wv = {"ab": np.full(4, 10.0)}
        ng = NGramEmbedder.create(np.random.default_rng(9), dim=4, n_range=(3, 3), bucket_count=16, word_table=wv)
        ng.table[:] = 2.0
        ng._cache.clear()
        # "<ab>" has 3-grams: <ab, ab> -> (2 + 2 + 10) / 3
        np.testing.assert_allclose(ngram_embed("ab", ng), np.full(4, 14 / 3))

    def test_vector_file_round_trip(self, tmp_path):
        table = {"mayo": np.array([0.5, -1.25]), "sol": np.array([3.0, 4.5])}
        path = tmp_path / "vecs.txt"
        save_text_vectors(path, table)
        loaded = load_text_vectors(path)
        assert set(loaded) == {"mayo", "sol"}
        for w in table:
            np.testing.assert_array_equal(loaded[w], table[w])

    def test_vector_file_bad_header(self, tmp_path):
        path = tmp_path / "bad.txt"
        path.write_text("not a header\n")
        with pytest.raises(DataError, match="header"):
            load_text_vectors(path)


class TestCharLM:
    def test_near_deterministic_stream_reaches_low_perplexity(self):
        res = pretrain_charlm("ab" * 5000, CharLMTrainConfig(hidden=24, char_dim=12, epochs=3, seed=0))
        assert res.perplexity["forward"] < 1.5
        assert res.perplexity["backward"] < 1.5

    def test_training_loss_decreases(self):
        res = pretrain_charlm("ab" * 5000, CharLMTrainConfig(hidden=24, char_dim=12, epochs=3, seed=0))
        losses = [loss for _, loss, _ in res.history["forward"]]
        assert losses[0] > losses[1] > losses[2]

    def test_untrained_perplexity_near_vocab_size(self):
        from deidseq.embeddings import CharLM

        text = "abcd" * 800
        vocab = CharVocab.build(text)
        lm = CharLM.create(np.random.default_rng(0), vocab, char_dim=8, hidden=16)
        lm.proj_w.data[:] = 0.0  # uniform logits
        ppl = math.exp(lm.nll(vocab.encode(text)))
        assert ppl == pytest.approx(len(vocab), rel=0.01)

    def test_corpus_smaller_than_window_rejected(self):
        with pytest.raises(DataError, match="window"):
            pretrain_charlm("corto", CharLMTrainConfig(window=128))

    def test_embedding_shape_and_context_dependence(self):
        res = pretrain_charlm("el sol sale. la luna cae. " * 120, CharLMTrainConfig(hidden=16, char_dim=8, epochs=2, seed=1))
        emb = res.embedder
        assert emb.dim == 32
        t1 = "el sol sale hoy"
        t2 = "cae el sol rojo"
        s1, s2 = sentences_of(t1)[0], sentences_of(t2)[0]
        m1, m2 = charlm_embed(s1, emb, t1), charlm_embed(s2, emb, t2)
        assert m1.shape == (4, 32) and m2.shape == (4, 32)
        v1 = m1[1]  # "sol" in first context
        v2 = m2[2]  # "sol" in second context
        assert not np.allclose(v1, v2)

    def test_frozen_after_pretraining(self):
        res = pretrain_charlm("ab" * 600, CharLMTrainConfig(hidden=8, char_dim=4, epochs=1, window=64, seed=2))
        for lm in (res.embedder.forward_lm, res.embedder.backward_lm):
            assert all(not p.requires_grad for p in lm.parameters())

    def test_checkpoint_round_trip(self, tmp_path):
        res = pretrain_charlm("ab" * 600, CharLMTrainConfig(hidden=8, char_dim=4, epochs=1, window=64, seed=3))
        path = tmp_path / "lm.npz"
        save_charlm(path, res.embedder)
        loaded = load_charlm(path)
        text = "abab abba."
        s = sentences_of(text)[0]
        np.testing.assert_array_equal(charlm_embed(s, res.embedder, text), charlm_embed(s, loaded, text))

    def test_checkpoint_shape_mismatch_rejected(self, tmp_path):
        import json

        res = pretrain_charlm("ab" * 600, CharLMTrainConfig(hidden=8, char_dim=4, epochs=1, window=64, seed=4))
        path = tmp_path / "lm.npz"
        save_charlm(path, res.embedder)
        data = dict(np.load(path))
        data["f_emb"] = data["f_emb"][:, :2]  # truncate: shape no longer matches manifest
        np.savez_compressed(path, **data)
        with pytest.raises(DataError, match="shape"):
            load_charlm(path)


class TestPooled:
    def test_first_occurrence_doubles_vector(self):
        mem = PooledMemory()
        v = np.array([1.0, -2.0])
        out = pooled_embed(Token("sol", 0, 3), v, mem)
        np.testing.assert_array_equal(out, [1.0, -2.0, 1.0, -2.0])

    def test_larger_values_leave_memory_unchanged(self):
        mem = PooledMemory()
        pooled_embed(Token("sol", 0, 3), np.array([1.0, -2.0]), mem)
        out = pooled_embed(Token("sol", 4, 7), np.array([5.0, 0.0]), mem)
        np.testing.assert_array_equal(out, [5.0, 0.0, 1.0, -2.0])

    def test_memory_equals_brute_force_min_any_order(self):
        rng = np.random.default_rng(11)
        vectors = rng.normal(size=(12, 5))
        finals = []
        for perm in (np.arange(12), rng.permutation(12), rng.permutation(12)):
            mem = PooledMemory()
            for i in perm:
                pooled_embed(Token("w", 0, 1), vectors[i], mem)
            finals.append(mem.vectors["w"])
        expected = vectors.min(axis=0)
        for final in finals:
            np.testing.assert_allclose(final, expected)

    def test_reset(self):
        mem = PooledMemory()
        pooled_embed(Token("w", 0, 1), np.array([1.0]), mem)
        mem.reset()
        assert mem.vectors == {}


class TestStack:
    def test_s1_dimension_450_with_paper_dims(self):
        rng = np.random.default_rng(0)
        members = [
            CharEmbedder.create(rng, ALPHABET, char_dim=50, hidden=25),
            NGramEmbedder.create(rng, dim=300, bucket_count=64),
            NGramEmbedder.create(rng, dim=100, bucket_count=64),
        ]
        stack = EmbeddingStack(members, expected_total=450)
        assert stack.total_dim == 450

    def test_dimension_mismatch_rejected_at_construction(self):
        rng = np.random.default_rng(0)
        members = [NGramEmbedder.create(rng, dim=10, bucket_count=16)]
        with pytest.raises(ValueError, match="450"):
            EmbeddingStack(members, expected_total=450)

    def test_empty_stack_rejected(self):
        with pytest.raises(ValueError, match="one member"):
            EmbeddingStack([])

    def test_single_member_passthrough(self):
        rng = np.random.default_rng(1)
        ng = NGramEmbedder.create(rng, dim=8, bucket_count=16)
        stack = EmbeddingStack([ng])
        text = "mayo sol"
        sent = sentences_of(text)[0]
        np.testing.assert_array_equal(
            stack_embed(sent, stack, text).data, ng.embed_sentence(sent, text).data
        )

    def test_rows_equal_member_concatenation(self):
        rng = np.random.default_rng(2)
        ce = CharEmbedder.create(rng, ALPHABET, hidden=3)
        ng = NGramEmbedder.create(rng, dim=5, bucket_count=16)
        stack = EmbeddingStack([ce, ng])
        text = "mayo y sol"
        sent = sentences_of(text)[0]
        out = stack_embed(sent, stack, text).data
        for i, tok in enumerate(sent.tokens):
            np.testing.assert_allclose(out[i, :6], char_embed(tok.text, ce).data, atol=1e-12)
            np.testing.assert_allclose(out[i, 6:], ngram_embed(tok.text, ng), atol=1e-12)

    def test_embed_flat_matches_per_sentence(self):
        rng = np.random.default_rng(3)
        ce = CharEmbedder.create(rng, ALPHABET, hidden=3)
        ng = NGramEmbedder.create(rng, dim=5, bucket_count=16)
        stack = EmbeddingStack([ce, ng])
        texts = ["mayo y sol", "otro texto más largo"]
        items = [(sentences_of(t)[0], t) for t in texts]
        flat = stack.embed_flat(items).data
        per = np.concatenate([stack.embed(s, t).data for s, t in items])
        np.testing.assert_allclose(flat, per, atol=1e-12)

    def test_pooled_reset_state(self):
        res = pretrain_charlm("ab " * 400, CharLMTrainConfig(hidden=8, char_dim=4, epochs=1, window=64, seed=5))
        pooled = PooledCharLMEmbedder(res.embedder)
        stack = EmbeddingStack([pooled])
        text = "ab ab"
        sent = sentences_of(text)[0]
        first = stack.embed(sent, text).data.copy()
        stack.embed(sent, text)
        stack.reset_state()
        again = stack.embed(sent, text).data
        np.testing.assert_array_equal(first, again)

    def test_embedder_spec_round_trip(self):
        rng = np.random.default_rng(4)
        ce = CharEmbedder.create(rng, ALPHABET, hidden=4)
        rebuilt = embedder_from_spec(ce.spec(), ce.arrays())
        np.testing.assert_array_equal(char_embed("mayo", ce).data, char_embed("mayo", rebuilt).data)

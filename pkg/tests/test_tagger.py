import itertools
import math

import numpy as np
import pytest

from deidseq import DataError, NumericError
from deidseq.autodiff import Tape, Tensor, backward
from deidseq.embeddings import CharEmbedder, EmbeddingStack, NGramEmbedder
from deidseq.ingest import sentences_of
from deidseq.pipeline import PipelineConfig, build_stack
from deidseq.tagger import (
    LabelInventory,
    TaggerModel,
    TrainConfig,
    batched_emissions,
    crf_log_partition,
    crf_nll,
    load_model,
    predict,
    predict_documents,
    save_model,
    score_sequence,
    train,
    viterbi_decode,
)

from conftest import assert_close_rel, central_difference


class TestLabelInventory:
    def test_bio_construction(self):
        inv = LabelInventory(["FECHAS", "PAIS"])
        assert inv.labels == ["O", "B-FECHAS", "I-FECHAS", "B-PAIS", "I-PAIS"]
        assert len(inv) == 5
        assert inv.start_index == 5 and inv.end_index == 6

    def test_29_classes_give_59_labels(self):
        from deidseq.ingest import DEFAULT_PHI_CLASSES

        assert len(LabelInventory(list(DEFAULT_PHI_CLASSES))) == 59

    def test_unknown_label_rejected(self):
        with pytest.raises(DataError, match="B-OTRA"):
            LabelInventory(["FECHAS"]).encode(["O", "B-OTRA"])


class TestScoreSequence:
    def test_single_token_zero_transitions(self):
        em = Tensor([[1.5, -2.0, 0.25]])
        tr = Tensor(np.zeros((5, 5)))
        assert score_sequence(em, tr, [2]).item() == pytest.approx(0.25)

    def test_all_zero_inputs(self):
        assert score_sequence(Tensor(np.zeros((3, 2))), Tensor(np.zeros((4, 4))), [0, 1, 0]).item() == 0.0

    def test_random_instance_matches_resummation(self):
        rng = np.random.default_rng(0)
        em = rng.normal(size=(3, 4))
        tr = rng.normal(size=(6, 6))
        y = [2, 0, 3]
        expected = tr[4, 2] + em[0, 2] + tr[2, 0] + em[1, 0] + tr[0, 3] + em[2, 3] + tr[3, 5]
        got = score_sequence(Tensor(em), Tensor(tr), y).item()
        assert got == pytest.approx(expected, abs=1e-12)

    def test_out_of_range_label_rejected(self):
        with pytest.raises(ValueError, match="range"):
            score_sequence(Tensor(np.zeros((2, 3))), Tensor(np.zeros((5, 5))), [0, 3])

    def test_length_mismatch_rejected(self):
        with pytest.raises(ValueError, match="tokens"):
            score_sequence(Tensor(np.zeros((2, 3))), Tensor(np.zeros((5, 5))), [0])


class TestLogPartition:
    def test_single_token_is_lse_of_row(self):
        em = np.array([[0.5, 1.5, -0.75]])
        tr = np.zeros((5, 5))
        expected = np.logaddexp.reduce(em[0])
        assert crf_log_partition(Tensor(em), Tensor(tr)).item() == pytest.approx(expected, abs=1e-12)

    def test_all_zero_inputs_count_paths(self):
        for T, L in ((1, 4), (3, 2), (4, 5)):
            lz = crf_log_partition(Tensor(np.zeros((T, L))), Tensor(np.zeros((L + 2, L + 2)))).item()
            assert lz == pytest.approx(T * math.log(L), abs=1e-10)

    def test_brute_force_4x5(self):
        rng = np.random.default_rng(1)
        em = rng.normal(size=(4, 5)) * 2
        tr = rng.normal(size=(7, 7)) * 2
        scores = []
        for seq in itertools.product(range(5), repeat=4):
            s = tr[5, seq[0]] + em[0, seq[0]]
            for t in range(1, 4):
                s += tr[seq[t - 1], seq[t]] + em[t, seq[t]]
            scores.append(s + tr[seq[-1], 6])
        assert crf_log_partition(Tensor(em), Tensor(tr)).item() == pytest.approx(
            np.logaddexp.reduce(scores), abs=1e-8
        )


class TestNll:
    def test_single_label_inventory_loss_zero(self):
        em = Tensor(np.array([[1.7], [0.3], [-2.0]]))
        tr = Tensor(np.random.default_rng(0).normal(size=(3, 3)))
        assert crf_nll(em, tr, [0, 0, 0]).item() == pytest.approx(0.0, abs=1e-12)

    def test_loss_nonnegative(self):
        rng = np.random.default_rng(2)
        for _ in range(20):
            T, L = int(rng.integers(1, 5)), int(rng.integers(1, 5))
            em = Tensor(rng.normal(size=(T, L)) * 3)
            tr = Tensor(rng.normal(size=(L + 2, L + 2)) * 3)
            y = rng.integers(0, L, size=T)
            assert crf_nll(em, tr, y).item() >= -1e-12

    def test_loss_decreases_as_gold_margin_grows(self):
        rng = np.random.default_rng(3)
        em = rng.normal(size=(3, 4))
        y = list(np.argmax(em, axis=1))
        tr = Tensor(np.zeros((6, 6)))
        losses = [crf_nll(Tensor(em * s), tr, y).item() for s in (1, 10, 100, 1000)]
        assert losses[0] > losses[1] > losses[2]
        assert losses[-1] < 1e-4  # margin fully dominates at scale 1000

    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(4)
        em = rng.normal(size=(3, 4))
        tr = rng.normal(size=(6, 6))
        y = [1, 3, 0]

        def value():
            return crf_nll(Tensor(em), Tensor(tr), y).item()

        tem, ttr = Tensor(em, requires_grad=True), Tensor(tr, requires_grad=True)
        with Tape():
            backward(crf_nll(tem, ttr, y))
        n_em, n_tr = central_difference(value, [em, tr])
        assert_close_rel(tem.grad, n_em, rel=1e-4)
        used = np.ones_like(tr, dtype=bool)
        used[:, 4] = False
        used[5, :] = False
        assert_close_rel(ttr.grad[used], n_tr[used], rel=1e-4)

    def test_normalization_over_gold_choices(self):
        rng = np.random.default_rng(5)
        T, L = 3, 3
        em = Tensor(rng.normal(size=(T, L)))
        tr = Tensor(rng.normal(size=(L + 2, L + 2)))
        lz = crf_log_partition(em, tr).item()
        total = sum(
            math.exp(score_sequence(em, tr, list(seq)).item() - lz)
            for seq in itertools.product(range(L), repeat=T)
        )
        assert total == pytest.approx(1.0, abs=1e-8)


class TestViterbiDecode:
    def test_single_token_argmax_with_tie(self):
        em = np.array([[2.0, 5.0, 5.0]])
        path, score = viterbi_decode(Tensor(em), Tensor(np.zeros((5, 5))))
        assert path == [1] and score == pytest.approx(5.0)

    def test_all_zero_tie_break(self):
        path, score = viterbi_decode(np.zeros((3, 4)), np.zeros((6, 6)))
        assert path == [0, 0, 0] and score == 0.0

    def test_score_consistency_with_score_sequence(self):
        rng = np.random.default_rng(6)
        em = rng.normal(size=(4, 5))
        tr = rng.normal(size=(7, 7))
        path, score = viterbi_decode(em, tr)
        assert score == pytest.approx(score_sequence(Tensor(em), Tensor(tr), path).item(), abs=1e-10)

    def test_beats_every_other_sequence(self):
        rng = np.random.default_rng(7)
        em = rng.normal(size=(3, 4))
        tr = rng.normal(size=(6, 6))
        _, best = viterbi_decode(em, tr)
        for seq in itertools.product(range(4), repeat=3):
            assert best >= score_sequence(Tensor(em), Tensor(tr), list(seq)).item() - 1e-10


ALPHABET = "abcdefghijklmnopqrstuvwxyzáéíóúñABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789 .,:/@+-"


def _tiny_stack(seed=0):
    rng = np.random.default_rng(seed)
    return EmbeddingStack(
        [
            CharEmbedder.create(rng, ALPHABET, char_dim=8, hidden=4),
            NGramEmbedder.create(rng, dim=12, bucket_count=256),
        ]
    )


class TestTraining:
    def test_config_validation(self):
        with pytest.raises(ValueError, match="dropout"):
            TrainConfig(dropout_p=1.0).validate()
        with pytest.raises(ValueError, match="positive"):
            TrainConfig(learning_rate=0.0).validate()
        with pytest.raises(ValueError):
            TrainConfig(batch_size=0).validate()

    def test_patience_zero_runs_exactly_one_epoch(self, small_corpus):
        result = train(
            small_corpus.train[:4],
            small_corpus.dev[:2],
            _tiny_stack(),
            TrainConfig(seed=1, max_epochs=50, patience=0),
            hidden=8,
        )
        assert len(result.log) == 1

    def test_same_seed_identical_trajectories(self, small_corpus):
        runs = []
        for _ in range(2):
            result = train(
                small_corpus.train[:6],
                small_corpus.dev[:2],
                _tiny_stack(seed=5),
                TrainConfig(seed=9, max_epochs=3, patience=3),
                hidden=8,
            )
            runs.append(result.log)
        assert runs[0] == runs[1]

    def test_empty_split_rejected(self, small_corpus):
        with pytest.raises(DataError, match="non-empty"):
            train([], small_corpus.dev, _tiny_stack(), TrainConfig())

    def test_non_finite_loss_aborts_with_diagnostic(self, small_corpus, monkeypatch):
        from deidseq import tagger as tagger_mod

        def poisoned(em, tr, gold):
            return Tensor(np.float64("nan"))

        monkeypatch.setattr(tagger_mod, "crf_nll", poisoned)
        with pytest.raises(NumericError, match="epoch 1"):
            train(
                small_corpus.train[:4],
                small_corpus.dev[:2],
                _tiny_stack(),
                TrainConfig(seed=1, max_epochs=2, patience=2),
                hidden=8,
            )

    def test_frozen_members_bit_identical_after_training(self, small_corpus):
        stack = _tiny_stack(seed=3)
        ngram = stack.members[1]
        before = ngram.table.copy()
        train(
            small_corpus.train[:4],
            small_corpus.dev[:2],
            stack,
            TrainConfig(seed=2, max_epochs=2, patience=2),
            hidden=8,
        )
        np.testing.assert_array_equal(ngram.table, before)

    def test_trainable_members_change(self, small_corpus):
        stack = _tiny_stack(seed=4)
        char = stack.members[0]
        before = char.table.data.copy()
        train(
            small_corpus.train[:4],
            small_corpus.dev[:2],
            stack,
            TrainConfig(seed=2, max_epochs=2, patience=2),
            hidden=8,
        )
        assert not np.array_equal(char.table.data, before)

    def test_log_records_epoch_loss_f1(self, small_corpus):
        result = train(
            small_corpus.train[:4],
            small_corpus.dev[:2],
            _tiny_stack(),
            TrainConfig(seed=1, max_epochs=2, patience=2),
            hidden=8,
        )
        assert [e for e, _, _ in result.log] == [1, 2]
        assert all(np.isfinite(loss) and 0 <= f1 <= 1 for _, loss, f1 in result.log)


class TestPredict:
    @pytest.fixture(scope="class")
    def trained(self, request):
        from deidseq.corpusgen import GeneratorConfig, generate

        corpus = generate(GeneratorConfig(seed=77, documents=30))
        result = train(
            corpus.train,
            corpus.dev,
            _tiny_stack(seed=8),
            TrainConfig(seed=4, max_epochs=4, patience=4),
            hidden=16,
        )
        return corpus, result.model

    def test_empty_document_no_spans(self, trained):
        _, model = trained
        doc = predict("", model)
        assert doc.spans == []

    def test_deterministic(self, trained):
        corpus, model = trained
        text = corpus.test[0].text
        assert predict(text, model).spans == predict(text, model).spans

    def test_spans_in_bounds_and_non_overlapping(self, trained):
        corpus, model = trained
        for doc in corpus.test[:8]:
            pred = predict(doc.text, model)
            prev_end = 0
            for s in pred.spans:
                assert 0 <= s.start < s.end <= len(doc.text)
                assert s.start >= prev_end
                assert doc.text[s.start : s.end] == s.text
                prev_end = s.end

    def test_dropout_config_does_not_affect_inference(self, trained):
        corpus, model = trained
        sent = sentences_of(corpus.test[0].text)[0]
        a = model.emissions(sent, corpus.test[0].text).data
        b = model.emissions(sent, corpus.test[0].text, dropout_rng=None, dropout_p=0.9).data
        np.testing.assert_array_equal(a, b)

    def test_batched_emissions_match_single(self, trained):
        corpus, model = trained
        text = corpus.test[0].text
        sentences = sentences_of(text)[:3]
        batch = batched_emissions(model, [(s, text) for s in sentences])
        for s, em in zip(sentences, batch):
            single = model.emissions(s, text)
            np.testing.assert_allclose(em.data, single.data, atol=1e-9)

    def test_checkpoint_round_trip(self, trained, tmp_path):
        corpus, model = trained
        path = tmp_path / "model.npz"
        save_model(model, path)
        loaded = load_model(path)
        for doc in corpus.test[:4]:
            assert predict(doc.text, loaded).spans == predict(doc.text, model).spans
        assert loaded.meta["seed"] == model.meta["seed"]

    def test_checkpoint_shape_mismatch_rejected(self, trained, tmp_path):
        _, model = trained
        path = tmp_path / "model.npz"
        save_model(model, path)
        data = dict(np.load(path))
        data["transitions"] = data["transitions"][:-1, :-1]
        np.savez_compressed(path, **data)
        with pytest.raises(DataError, match="shape"):
            load_model(path)

    def test_predict_documents_resets_pooled_state(self, trained):
        corpus, model = trained
        preds1 = predict_documents(corpus.test[:3], model)
        preds2 = predict_documents(corpus.test[:3], model)
        assert [d.spans for d in preds1] == [d.spans for d in preds2]

"""Backend-parametrized checks of the LSTM and CRF kernels.

Both backends must produce the same numbers; correctness is pinned by
hand-stepped recurrences, brute-force enumeration and finite differences.
"""

import itertools
import math

import numpy as np
import pytest

from deidseq import kernels
from deidseq.autodiff import Tape, Tensor, backward, mean
from deidseq.nn import LSTMParams, lstm_run

from conftest import assert_close_rel, central_difference


def _sigmoid(x):
    return 1.0 / (1.0 + math.exp(-x))


class TestLSTM:
    def test_one_step_matches_hand_recurrence(self, backend):
        # H=1, I=1, one timestep: every gate written out by hand.
        w_ih = np.array([[0.5], [-0.3], [0.8], [0.2]])  # i, f, g, o rows
        w_hh = np.array([[0.1], [0.4], [-0.2], [0.3]])
        b = np.array([0.05, -0.1, 0.2, 0.0])
        x = np.array([[[1.5]]])
        h, c, g = backend.lstm_forward(x, np.array([1]), w_ih, w_hh, b)
        i = _sigmoid(0.5 * 1.5 + 0.05)
        f = _sigmoid(-0.3 * 1.5 - 0.1)
        gg = math.tanh(0.8 * 1.5 + 0.2)
        o = _sigmoid(0.2 * 1.5 + 0.0)
        c_exp = i * gg
        h_exp = o * math.tanh(c_exp)
        assert h[0, 0, 0] == pytest.approx(h_exp, rel=1e-12)
        assert c[0, 0, 0] == pytest.approx(c_exp, rel=1e-12)
        np.testing.assert_allclose(g[0, 0], [i, f, gg, o], rtol=1e-12)

    def test_two_steps_matches_hand_recurrence(self, backend):
        rng = np.random.default_rng(3)
        w_ih = rng.normal(size=(4, 1))
        w_hh = rng.normal(size=(4, 1))
        b = rng.normal(size=4)
        xs = [0.7, -1.2]
        h, c, _ = backend.lstm_forward(np.array(xs).reshape(1, 2, 1), np.array([2]), w_ih, w_hh, b)
        hp = cp = 0.0
        for t, xv in enumerate(xs):
            a = w_ih[:, 0] * xv + w_hh[:, 0] * hp + b
            i, f, gg, o = _sigmoid(a[0]), _sigmoid(a[1]), math.tanh(a[2]), _sigmoid(a[3])
            cp = f * cp + i * gg
            hp = o * math.tanh(cp)
            assert h[0, t, 0] == pytest.approx(hp, rel=1e-10)
            assert c[0, t, 0] == pytest.approx(cp, rel=1e-10)

    def test_padded_positions_are_zero_and_ignored(self, backend):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(2, 5, 3))
        lengths = np.array([5, 2])
        x[1, 2:] = 0.0
        w_ih = rng.normal(size=(8, 3)) * 0.5
        w_hh = rng.normal(size=(8, 2)) * 0.5
        b = rng.normal(size=8) * 0.1
        h, c, g = backend.lstm_forward(x, lengths, w_ih, w_hh, b)
        assert np.all(h[1, 2:] == 0) and np.all(c[1, 2:] == 0) and np.all(g[1, 2:] == 0)
        # garbage upstream gradient at padded steps must not leak anywhere
        dh = rng.normal(size=h.shape)
        dh_poisoned = dh.copy()
        dh_poisoned[1, 2:] = 1e6
        clean = backend.lstm_backward(x, lengths, w_ih, w_hh, h, c, g, dh)
        poisoned = backend.lstm_backward(x, lengths, w_ih, w_hh, h, c, g, dh_poisoned)
        for a, bb in zip(clean, poisoned):
            np.testing.assert_array_equal(a, bb)

    def test_full_sequence_gradients_match_finite_differences(self, backend):
        rng = np.random.default_rng(9)
        B, T, I, H = 2, 4, 3, 3
        lengths = np.array([4, 3])
        x = rng.uniform(-1, 1, size=(B, T, I))
        x[1, 3:] = 0
        w_ih = rng.uniform(-0.7, 0.7, size=(4 * H, I))
        w_hh = rng.uniform(-0.7, 0.7, size=(4 * H, H))
        b = rng.uniform(-0.3, 0.3, size=4 * H)
        mask = (np.arange(T)[None, :] < lengths[:, None])[:, :, None].astype(float)

        def value():
            h, _, _ = backend.lstm_forward(x, lengths, w_ih, w_hh, b)
            return float((h * mask).sum())

        h, c, g = backend.lstm_forward(x, lengths, w_ih, w_hh, b)
        grads = backend.lstm_backward(x, lengths, w_ih, w_hh, h, c, g, np.ones_like(h) * mask)
        numeric = central_difference(value, [x, w_ih, w_hh, b])
        names = ["dx", "dw_ih", "dw_hh", "db"]
        for name, analytic, num in zip(names, grads, numeric):
            if name == "dx":
                analytic = analytic * mask  # padded input positions are don't-care
                num = num * mask
            assert_close_rel(analytic, num, rel=1e-4)

    def test_backends_agree(self):
        mods = kernels.available_backends()
        if len(mods) < 2:
            pytest.skip("only one backend built")
        rng = np.random.default_rng(12)
        for _ in range(20):
            B = int(rng.integers(1, 5))
            T = int(rng.integers(1, 7))
            I = int(rng.integers(1, 6))
            H = int(rng.integers(1, 8))
            lengths = rng.integers(1, T + 1, size=B).astype(np.int64)
            lengths[0] = T
            x = rng.normal(size=(B, T, I))
            for bb in range(B):
                x[bb, lengths[bb] :] = 0
            w_ih = rng.normal(size=(4 * H, I)) * 0.5
            w_hh = rng.normal(size=(4 * H, H)) * 0.5
            b = rng.normal(size=4 * H) * 0.2
            dh = rng.normal(size=(B, T, H))
            for bb in range(B):
                dh[bb, lengths[bb] :] = 0
            outs = [m.lstm_forward(x, lengths, w_ih, w_hh, b) for m in mods.values()]
            for a, c in zip(outs[0], outs[1]):
                np.testing.assert_allclose(a, c, atol=1e-9)
            g1 = list(mods.values())[0].lstm_backward(x, lengths, w_ih, w_hh, *outs[0], dh)
            g2 = list(mods.values())[1].lstm_backward(x, lengths, w_ih, w_hh, *outs[1], dh)
            for a, c in zip(g1, g2):
                np.testing.assert_allclose(a, c, atol=1e-8)

    def test_deterministic_within_backend(self, backend):
        rng = np.random.default_rng(2)
        x = rng.normal(size=(3, 4, 2))
        lengths = np.array([4, 4, 4])
        w_ih = rng.normal(size=(12, 2))
        w_hh = rng.normal(size=(12, 3))
        b = rng.normal(size=12)
        a1 = backend.lstm_forward(x, lengths, w_ih, w_hh, b)
        a2 = backend.lstm_forward(x, lengths, w_ih, w_hh, b)
        for u, v in zip(a1, a2):
            np.testing.assert_array_equal(u, v)

    def test_lstm_run_records_gradients(self):
        rng = np.random.default_rng(4)
        params = LSTMParams.create(rng, 3, 2)
        x = Tensor(rng.normal(size=(1, 3, 3)), requires_grad=True)
        with Tape():
            h = lstm_run(x, np.array([3]), params)
            backward(mean(h))
        assert x.grad is not None
        for p in params.tensors():
            assert p.grad is not None


def _brute_force_logz(em, tr):
    T, L = em.shape
    scores = []
    for seq in itertools.product(range(L), repeat=T):
        s = tr[L, seq[0]] + em[0, seq[0]]
        for t in range(1, T):
            s += tr[seq[t - 1], seq[t]] + em[t, seq[t]]
        scores.append(s + tr[seq[-1], L + 1])
    return np.logaddexp.reduce(scores)


def _brute_force_best(em, tr):
    T, L = em.shape
    best_seq, best_score = None, -np.inf
    for seq in itertools.product(range(L), repeat=T):
        s = tr[L, seq[0]] + em[0, seq[0]]
        for t in range(1, T):
            s += tr[seq[t - 1], seq[t]] + em[t, seq[t]]
        s += tr[seq[-1], L + 1]
        if s > best_score:  # strict: first (lexicographically smallest) wins ties
            best_seq, best_score = seq, s
    return best_seq, best_score


class TestCRF:
    def test_log_partition_matches_brute_force(self, backend):
        rng = np.random.default_rng(21)
        for _ in range(25):
            T = int(rng.integers(1, 5))
            L = int(rng.integers(1, 6))
            em = rng.normal(size=(T, L)) * 2
            tr = rng.normal(size=(L + 2, L + 2)) * 2
            lz, alpha = backend.crf_forward(em, tr)
            assert lz == pytest.approx(_brute_force_logz(em, tr), abs=1e-8)
            assert alpha.shape == (T, L)

    def test_gradient_of_log_partition(self, backend):
        rng = np.random.default_rng(22)
        em = rng.normal(size=(4, 3))
        tr = rng.normal(size=(5, 5))

        def value():
            return backend.crf_forward(em, tr)[0]

        lz, alpha = backend.crf_forward(em, tr)
        d_em, d_tr = backend.crf_backward(em, tr, alpha, lz)
        n_em, n_tr = central_difference(value, [em, tr])
        assert_close_rel(d_em, n_em, rel=1e-5)
        # START column and END row are unused: analytic gradient must be zero there
        L = 3
        assert np.all(d_tr[:, L] == 0) and np.all(d_tr[L + 1, :] == 0)
        mask = np.ones_like(tr, dtype=bool)
        mask[:, L] = False
        mask[L + 1, :] = False
        assert_close_rel(d_tr[mask], n_tr[mask], rel=1e-5)

    def test_viterbi_matches_brute_force(self, backend):
        rng = np.random.default_rng(23)
        for _ in range(25):
            T = int(rng.integers(1, 5))
            L = int(rng.integers(1, 6))
            em = rng.normal(size=(T, L)) * 2
            tr = rng.normal(size=(L + 2, L + 2)) * 2
            path, score = backend.viterbi(em, tr)
            b_seq, b_score = _brute_force_best(em, tr)
            assert tuple(path) == b_seq
            assert score == pytest.approx(b_score, abs=1e-10)

    def test_viterbi_tie_break_lowest_index(self, backend):
        path, score = backend.viterbi(np.zeros((4, 5)), np.zeros((7, 7)))
        assert list(path) == [0, 0, 0, 0]
        assert score == 0.0

    def test_marginals_sum_to_one(self, backend):
        rng = np.random.default_rng(24)
        em = rng.normal(size=(3, 4))
        tr = rng.normal(size=(6, 6))
        lz, alpha = backend.crf_forward(em, tr)
        d_em, _ = backend.crf_backward(em, tr, alpha, lz)
        np.testing.assert_allclose(d_em.sum(axis=1), 1.0, atol=1e-10)

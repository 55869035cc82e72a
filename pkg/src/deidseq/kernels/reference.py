"""NumPy implementation of the sequence kernels.

This is the fallback backend: the Cython module ``deidseq.kernels._fast``
implements the same functions with typed loops and BLAS calls and is
preferred at import time when it built. Both backends must agree to
~1e-10; the cross-backend test enforces it.

Conventions shared by both backends:

* LSTM inputs are padded batches ``x`` of shape (B, T, I) with per-sequence
  ``lengths``; positions at or beyond a sequence's length are zero on input
  and zero in every output (states, gates, input gradients).
* Gate packing order along the 4H axis is i, f, g, o (input, forget, cell
  candidate, output), rows of ``w_ih``/``w_hh`` likewise.
* CRF transition matrices are (L+2, L+2) with virtual START at index L and
  END at index L+1; the START column and END row are never read.
"""

from __future__ import annotations

import numpy as np


def _sigmoid(x: np.ndarray) -> np.ndarray:
    p = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + p), p / (1.0 + p))


def lstm_forward(
    x: np.ndarray,
    lengths: np.ndarray,
    w_ih: np.ndarray,
    w_hh: np.ndarray,
    b: np.ndarray,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Run a unidirectional LSTM over a padded batch.

    Returns ``(h, c, gates)`` with shapes (B, T, H), (B, T, H), (B, T, 4H).
    ``gates`` stores post-activation i, f, g, o for the backward pass.
    """
    B, T, _ = x.shape
    H = w_hh.shape[1]
    h = np.zeros((B, T, H))
    c = np.zeros((B, T, H))
    gates = np.zeros((B, T, 4 * H))
    # Input projection for all timesteps in one GEMM.
    xw = x @ w_ih.T + b
    h_prev = np.zeros((B, H))
    c_prev = np.zeros((B, H))
    for t in range(T):
        a = xw[:, t, :] + h_prev @ w_hh.T
        i = _sigmoid(a[:, :H])
        f = _sigmoid(a[:, H : 2 * H])
        g = np.tanh(a[:, 2 * H : 3 * H])
        o = _sigmoid(a[:, 3 * H :])
        c_t = f * c_prev + i * g
        h_t = o * np.tanh(c_t)
        m = (lengths > t)[:, None].astype(np.float64)
        h[:, t] = h_t * m
        c[:, t] = c_t * m
        gates[:, t, :H] = i * m
        gates[:, t, H : 2 * H] = f * m
        gates[:, t, 2 * H : 3 * H] = g * m
        gates[:, t, 3 * H :] = o * m
        h_prev = h[:, t]
        c_prev = c[:, t]
    return h, c, gates


def lstm_backward(
    x: np.ndarray,
    lengths: np.ndarray,
    w_ih: np.ndarray,
    w_hh: np.ndarray,
    h: np.ndarray,
    c: np.ndarray,
    gates: np.ndarray,
    dh_out: np.ndarray,
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Backpropagate through :func:`lstm_forward`.

    ``dh_out`` is the upstream gradient on every emitted hidden state
    (padded positions are ignored). Returns ``(dx, dw_ih, dw_hh, db)``.
    """
    B, T, _ = x.shape
    H = w_hh.shape[1]
    da = np.zeros((B, T, 4 * H))
    dh_rec = np.zeros((B, H))
    dc_rec = np.zeros((B, H))
    for t in range(T - 1, -1, -1):
        m = (lengths > t)[:, None].astype(np.float64)
        dh = (dh_out[:, t] + dh_rec) * m
        dc = dc_rec * m
        i = gates[:, t, :H]
        f = gates[:, t, H : 2 * H]
        g = gates[:, t, 2 * H : 3 * H]
        o = gates[:, t, 3 * H :]
        tc = np.tanh(c[:, t])
        do = dh * tc
        dc = dc + dh * o * (1.0 - tc * tc)
        c_prev = c[:, t - 1] if t > 0 else np.zeros((B, H))
        di = dc * g
        df = dc * c_prev
        dg = dc * i
        da_t = np.concatenate(
            [di * i * (1.0 - i), df * f * (1.0 - f), dg * (1.0 - g * g), do * o * (1.0 - o)],
            axis=1,
        )
        da_t *= m
        da[:, t] = da_t
        dh_rec = da_t @ w_hh
        dc_rec = dc * f
    h_prev_all = np.concatenate([np.zeros((B, 1, H)), h[:, :-1]], axis=1)
    da_flat = da.reshape(B * T, 4 * H)
    dx = (da_flat @ w_ih).reshape(B, T, -1)
    dw_ih = da_flat.T @ x.reshape(B * T, -1)
    dw_hh = da_flat.T @ h_prev_all.reshape(B * T, H)
    db = da_flat.sum(axis=0)
    return dx, dw_ih, dw_hh, db


def _lse(v: np.ndarray, axis: int) -> np.ndarray:
    m = np.max(v, axis=axis, keepdims=True)
    return np.squeeze(m, axis=axis) + np.log(np.sum(np.exp(v - m), axis=axis))


def crf_forward(emissions: np.ndarray, transitions: np.ndarray) -> tuple[float, np.ndarray]:
    """Forward algorithm in log space.

    Returns ``(logZ, alpha)`` where ``alpha[t, j]`` is the log-sum of scores
    of all prefixes ending in label j at position t (emissions and the
    START transition included).
    """
    T, L = emissions.shape
    start, end = L, L + 1
    alpha = np.empty((T, L))
    alpha[0] = emissions[0] + transitions[start, :L]
    for t in range(1, T):
        scores = alpha[t - 1][:, None] + transitions[:L, :L]
        alpha[t] = emissions[t] + _lse(scores, axis=0)
    log_z = float(_lse(alpha[T - 1] + transitions[:L, end], axis=0))
    return log_z, alpha


def crf_backward(
    emissions: np.ndarray,
    transitions: np.ndarray,
    alpha: np.ndarray,
    log_z: float,
) -> tuple[np.ndarray, np.ndarray]:
    """Gradient of logZ: expected emission and transition counts."""
    T, L = emissions.shape
    start, end = L, L + 1
    beta = np.empty((T, L))
    beta[T - 1] = transitions[:L, end]
    for t in range(T - 2, -1, -1):
        scores = transitions[:L, :L] + (emissions[t + 1] + beta[t + 1])[None, :]
        beta[t] = _lse(scores, axis=1)
    marginal = np.exp(alpha + beta - log_z)
    d_em = marginal
    d_tr = np.zeros((L + 2, L + 2))
    for t in range(T - 1):
        d_tr[:L, :L] += np.exp(
            alpha[t][:, None] + transitions[:L, :L] + (emissions[t + 1] + beta[t + 1])[None, :] - log_z
        )
    d_tr[start, :L] = marginal[0]
    d_tr[:L, end] = marginal[T - 1]
    return d_em, d_tr


def viterbi(emissions: np.ndarray, transitions: np.ndarray) -> tuple[np.ndarray, float]:
    """Highest-scoring label sequence; ties resolved to the lowest index."""
    T, L = emissions.shape
    start, end = L, L + 1
    score = emissions[0] + transitions[start, :L]
    backptr = np.zeros((T, L), dtype=np.intp)
    for t in range(1, T):
        cand = score[:, None] + transitions[:L, :L]
        # argmax returns the first (lowest) index on ties
        backptr[t] = np.argmax(cand, axis=0)
        score = cand[backptr[t], np.arange(L)] + emissions[t]
    final = score + transitions[:L, end]
    last = int(np.argmax(final))
    path = np.empty(T, dtype=np.int64)
    path[T - 1] = last
    for t in range(T - 1, 0, -1):
        path[t - 1] = backptr[t, path[t]]
    return path, float(final[last])

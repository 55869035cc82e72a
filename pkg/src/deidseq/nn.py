"""Tape-aware network building blocks on top of the sequence kernels.

The LSTM runs as one fused tape node per direction: forward state via the
selected kernel backend, backward-through-time via the matching kernel.
Everything else (projections, dropout masks, cross-entropy) is composed
from autodiff primitives.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .autodiff import Tensor, accumulate_grad, record_node, xavier_uniform, zeros_param


@dataclass
class LSTMParams:
    """One direction of an LSTM: gate order i, f, g, o along the 4H axis."""

    w_ih: Tensor
    w_hh: Tensor
    b: Tensor
    hidden: int

    @classmethod
    def create(cls, rng: np.random.Generator, input_dim: int, hidden: int) -> "LSTMParams":
        return cls(
            w_ih=xavier_uniform(rng, (4 * hidden, input_dim), input_dim, hidden),
            w_hh=xavier_uniform(rng, (4 * hidden, hidden), hidden, hidden),
            b=zeros_param((4 * hidden,)),
            hidden=hidden,
        )

    def tensors(self) -> list[Tensor]:
        return [self.w_ih, self.w_hh, self.b]


def lstm_run(x: Tensor, lengths: np.ndarray, params: LSTMParams) -> Tensor:
    """Run an LSTM over a padded (B, T, I) batch; returns hidden states (B, T, H).

    Positions at or beyond a sequence's length come back as zeros and their
    upstream gradients are ignored.
    """
    lengths = np.asarray(lengths, dtype=np.int64)
    h, c, gates = kernels.lstm_forward(x.data, lengths, params.w_ih.data, params.w_hh.data, params.b.data)
    needs = x.requires_grad or any(p.requires_grad for p in params.tensors())
    out = Tensor(h, requires_grad=needs)

    def bw(g):
        dx, dw_ih, dw_hh, db = kernels.lstm_backward(
            x.data, lengths, params.w_ih.data, params.w_hh.data, h, c, gates, g
        )
        if x.requires_grad:
            accumulate_grad(x, dx)
        if params.w_ih.requires_grad:
            accumulate_grad(params.w_ih, dw_ih)
        if params.w_hh.requires_grad:
            accumulate_grad(params.w_hh, dw_hh)
        if params.b.requires_grad:
            accumulate_grad(params.b, db)

    return record_node(out, bw)


def reverse_padded(x: Tensor, lengths: np.ndarray) -> Tensor:
    """Reverse each sequence of a padded (B, T, I) batch in time."""
    from .autodiff import gather_rows, reshape

    B, T = x.shape[0], x.shape[1]
    lengths = np.asarray(lengths, dtype=np.int64)
    t_idx = np.arange(T)[None, :]
    src = np.where(t_idx < lengths[:, None], lengths[:, None] - 1 - t_idx, t_idx)
    flat_idx = (np.arange(B)[:, None] * T + src).ravel()
    flat = reshape(x, (B * T, x.shape[2]))
    return reshape(gather_rows(flat, flat_idx), x.shape)


def bilstm_last_states(x: Tensor, lengths: np.ndarray, fwd: LSTMParams, bwd: LSTMParams) -> Tensor:
    """Concatenated final forward and backward hidden states, shape (B, 2H).

    The backward direction runs over the time-reversed sequences, so its
    "last" state corresponds to the first input position.
    """
    from .autodiff import concat, gather_rows, reshape

    B, T = x.shape[0], x.shape[1]
    lengths = np.asarray(lengths, dtype=np.int64)
    h_f = lstm_run(x, lengths, fwd)
    h_b = lstm_run(reverse_padded(x, lengths), lengths, bwd)
    last = np.arange(B) * T + (lengths - 1)
    f_last = gather_rows(reshape(h_f, (B * T, fwd.hidden)), last)
    b_last = gather_rows(reshape(h_b, (B * T, bwd.hidden)), last)
    return concat([f_last, b_last], axis=1)


def bilstm_states(x: Tensor, lengths: np.ndarray, fwd: LSTMParams, bwd: LSTMParams) -> Tensor:
    """Per-position BiLSTM states over a padded (B, T, I) batch, shape (B, T, 2H)."""
    from .autodiff import concat

    h_f = lstm_run(x, lengths, fwd)
    h_b = reverse_padded(lstm_run(reverse_padded(x, lengths), lengths, bwd), lengths)
    return concat([h_f, h_b], axis=2)


def cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean softmax cross-entropy of (N, V) logits against integer targets."""
    t = np.asarray(targets, dtype=np.intp)
    if logits.data.ndim != 2 or t.ndim != 1 or t.shape[0] != logits.shape[0]:
        raise ValueError(f"cross_entropy: got logits {logits.shape} and targets {t.shape}")
    z = logits.data
    m = z.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(z - m).sum(axis=1))
    n = z.shape[0]
    value = float(np.mean(lse - z[np.arange(n), t]))
    out = Tensor(np.float64(value), requires_grad=logits.requires_grad)

    def bw(g):
        if logits.requires_grad:
            soft = np.exp(z - lse[:, None])
            soft[np.arange(n), t] -= 1.0
            accumulate_grad(logits, soft * (float(g) / n))

    return record_node(out, bw)


def dropout_mask(rng: np.random.Generator, shape: tuple[int, ...], p: float) -> Tensor:
    """Inverted dropout mask: zeros with probability p, survivors scaled by 1/(1-p)."""
    keep = (rng.random(shape) >= p).astype(np.float64)
    return Tensor(keep / (1.0 - p))

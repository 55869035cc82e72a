"""Dense float64 tensors with tape-based reverse-mode differentiation.

Deliberately small: exactly the primitives the sequence labelers in this
package need. Everything is 64-bit, shapes are checked eagerly, and
broadcasting is restricted to adding a bias vector over leading axes.
Operations record onto the active tape only while a ``Tape`` context is
open and some input requires gradients, so inference runs allocation-free
of bookkeeping.

Gradients accumulate into ``Tensor.grad`` across backward passes; callers
zero them between optimizer steps (``sgd_step`` does this itself). Running
``backward`` twice on the same tape is rejected: a tape is a single-use
record of one forward pass.
"""

from __future__ import annotations

import math

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "add",
    "sub",
    "mul",
    "scale",
    "matmul",
    "sigmoid",
    "tanh",
    "concat",
    "log_sum_exp",
    "mean",
    "gather_rows",
    "reshape",
    "backward",
    "sgd_step",
    "record_node",
    "xavier_uniform",
    "zeros_param",
]


class Tensor:
    """A float64 array plus an optional same-shape gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


class Tape:
    """Append-only record of one forward pass.

    Use as a context manager; ops executed inside the block are recorded
    in execution order, and ``backward`` replays them once in reverse.
    """

    def __init__(self):
        self._nodes: list[tuple[Tensor, object]] = []
        self._spent = False
        self._prev: Tape | None = None

    def __enter__(self) -> "Tape":
        global _ACTIVE
        self._prev = _ACTIVE
        _ACTIVE = self
        return self

    def __exit__(self, *exc) -> None:
        global _ACTIVE
        _ACTIVE = self._prev
        self._prev = None

    def __len__(self) -> int:
        return len(self._nodes)


_ACTIVE: Tape | None = None


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def record_node(out: Tensor, backward_fn) -> Tensor:
    """Attach a custom backward function to ``out`` on the active tape.

    ``backward_fn`` receives the upstream gradient (an ndarray shaped like
    ``out``) and is responsible for accumulating into its parents, e.g.
    via :func:`accumulate_grad`. No-op when no tape is active or ``out``
    does not require gradients.
    """
    if _ACTIVE is not None and out.requires_grad:
        _ACTIVE._nodes.append((out, backward_fn))
    return out


# Alias used by fused kernel ops in other modules.
accumulate_grad = _accumulate


def _unary(a: Tensor, value: np.ndarray, grad_fn) -> Tensor:
    out = Tensor(value, requires_grad=a.requires_grad)

    def bw(g):
        if a.requires_grad:
            _accumulate(a, grad_fn(g))

    return record_node(out, bw)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; ``b`` may be a bias broadcast over leading axes."""
    if a.shape == b.shape:
        squeeze = None
    elif b.data.ndim == a.data.ndim - 1 and a.shape[1:] == b.shape:
        squeeze = 0
    else:
        raise ValueError(f"add: incompatible shapes {a.shape} and {b.shape}")
    out = Tensor(a.data + b.data, requires_grad=a.requires_grad or b.requires_grad)

    def bw(g):
        if a.requires_grad:
            _accumulate(a, g)
        if b.requires_grad:
            _accumulate(b, g if squeeze is None else g.sum(axis=0))

    return record_node(out, bw)


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"sub: incompatible shapes {a.shape} and {b.shape}")
    out = Tensor(a.data - b.data, requires_grad=a.requires_grad or b.requires_grad)

    def bw(g):
        if a.requires_grad:
            _accumulate(a, g)
        if b.requires_grad:
            _accumulate(b, -g)

    return record_node(out, bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Hadamard product of equal-shape tensors."""
    if a.shape != b.shape:
        raise ValueError(f"mul: incompatible shapes {a.shape} and {b.shape}")
    out = Tensor(a.data * b.data, requires_grad=a.requires_grad or b.requires_grad)

    def bw(g):
        if a.requires_grad:
            _accumulate(a, g * b.data)
        if b.requires_grad:
            _accumulate(b, g * a.data)

    return record_node(out, bw)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _unary(a, a.data * c, lambda g: g * c)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ValueError(f"matmul: expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: inner dimensions differ, {a.shape} vs {b.shape}")
    out = Tensor(a.data @ b.data, requires_grad=a.requires_grad or b.requires_grad)

    def bw(g):
        if a.requires_grad:
            _accumulate(a, g @ b.data.T)
        if b.requires_grad:
            _accumulate(b, a.data.T @ g)

    return record_node(out, bw)


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    # Branch on sign to avoid overflow in exp for large |x|.
    s = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    return _unary(a, s, lambda g: g * s * (1.0 - s))


def tanh(a: Tensor) -> Tensor:
    t = np.tanh(a.data)
    return _unary(a, t, lambda g: g * (1.0 - t * t))


def concat(ts: list[Tensor], axis: int = 0) -> Tensor:
    if not ts:
        raise ValueError("concat: empty input list")
    out = Tensor(
        np.concatenate([t.data for t in ts], axis=axis),
        requires_grad=any(t.requires_grad for t in ts),
    )
    sizes = [t.shape[axis] for t in ts]
    offsets = np.cumsum([0] + sizes)

    def bw(g):
        for t, lo, hi in zip(ts, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                _accumulate(t, g[tuple(idx)])

    return record_node(out, bw)


def log_sum_exp(a: Tensor, axis: int | None = None) -> Tensor:
    """log(sum(exp(a))) along ``axis`` with the max-shift trick."""
    x = a.data
    m = np.max(x, axis=axis, keepdims=True)
    value = np.squeeze(m, axis=axis) if axis is not None else m.reshape(())
    value = value + np.log(np.sum(np.exp(x - m), axis=axis))
    softmax = np.exp(x - (value if axis is None else np.expand_dims(value, axis)))

    def grad_fn(g):
        return softmax * (g if axis is None else np.expand_dims(g, axis))

    return _unary(a, value, grad_fn)


def mean(a: Tensor) -> Tensor:
    n = a.data.size
    return _unary(a, np.mean(a.data), lambda g: np.full_like(a.data, g / n))


def gather_rows(table: Tensor, indices: np.ndarray) -> Tensor:
    """Row lookup ``table[indices]``; backward scatter-adds into the table."""
    idx = np.asarray(indices, dtype=np.intp)
    if table.data.ndim != 2 or idx.ndim != 1:
        raise ValueError(f"gather_rows: expects a 2-D table and 1-D indices, got {table.shape} and {idx.shape}")
    out = Tensor(table.data[idx], requires_grad=table.requires_grad)

    def bw(g):
        if table.requires_grad:
            if table.grad is None:
                table.grad = np.zeros_like(table.data)
            np.add.at(table.grad, idx, g)

    return record_node(out, bw)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    orig = a.shape
    return _unary(a, a.data.reshape(shape), lambda g: g.reshape(orig))


def backward(loss: Tensor, tape: Tape | None = None) -> None:
    """Populate gradients of everything reachable from a scalar ``loss``.

    Replays the tape once in reverse insertion order. The tape is consumed:
    a second call without re-recording raises.
    """
    tape = tape if tape is not None else _ACTIVE
    if tape is None or not tape._nodes:
        raise ValueError("backward: no recorded tape (run the forward pass inside a Tape context)")
    if tape._spent:
        raise RuntimeError("backward: tape already consumed; record a fresh forward pass")
    if loss.data.ndim != 0:
        raise ValueError(f"backward: loss must be scalar, got shape {loss.shape}")
    tape._spent = True
    loss.grad = np.ones_like(loss.data)
    for out, fn in reversed(tape._nodes):
        if out.grad is not None:
            fn(out.grad)


def sgd_step(params: list[Tensor], learning_rate: float) -> None:
    """In-place SGD update ``p -= lr * grad``; gradients are cleared after."""
    if learning_rate < 0:
        raise ValueError(f"sgd_step: negative learning rate {learning_rate}")
    for p in params:
        if p.grad is None:
            raise ValueError("sgd_step: parameter has no gradient (did backward run?)")
    for p in params:
        p.data -= learning_rate * p.grad
        p.grad = None


def xavier_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, fan_out: int) -> Tensor:
    """Weight init: uniform in +-sqrt(6 / (fan_in + fan_out))."""
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-limit, limit, size=shape), requires_grad=True)


def zeros_param(shape: tuple[int, ...]) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)

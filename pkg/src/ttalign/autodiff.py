"""Minimal reverse-mode automatic differentiation on float64 numpy arrays.

Every primitive records a pull-back closure on the active :class:`Tape`. Calling
:func:`backward` on a scalar loss walks the tape in reverse execution order (a valid
reverse-topological order, since an op can only consume already-built tensors) and
accumulates adjoints into the ``grad`` buffers of every tensor that requires grad.

Gradients accumulate across repeated ``backward`` calls; training loops are expected
to zero parameter grads between steps. All computation is float64 and bitwise
deterministic for a fixed sequence of operations.
"""

from __future__ import annotations

from contextlib import contextmanager
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, ShapeError

Array = np.ndarray


class Tensor:
    """A float64 array plus an optional gradient buffer."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: Array | None = np.zeros_like(self.data) if self.requires_grad else None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad[...] = 0.0

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:  # pragma: no cover
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # arithmetic sugar; all routing through the recorded primitives below
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, _as_tensor(other))

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


class Tape:
    """Ordered record of executed primitives for one logical execution stream.

    Each record is ``(out, inputs, pull)`` where ``pull(out_adjoint)`` returns one
    gradient contribution per input (or None for non-differentiable inputs).
    Clearing the tape frees cached activations; parameter tensors are unaffected.
    """

    def __init__(self):
        self._records: list[tuple[Tensor, tuple[Tensor, ...], Callable[[Array], Sequence[Array | None]]]] = []

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], pull) -> None:
        self._records.append((out, inputs, pull))

    def clear(self) -> None:
        self._records.clear()

    def __len__(self) -> int:
        return len(self._records)


_TAPE_STACK: list[Tape] = [Tape()]
_GRAD_ENABLED: list[bool] = [True]


def active_tape() -> Tape:
    return _TAPE_STACK[-1]


@contextmanager
def fresh_tape():
    """Run a block on its own tape (independent execution stream)."""
    t = Tape()
    _TAPE_STACK.append(t)
    try:
        yield t
    finally:
        _TAPE_STACK.pop()


@contextmanager
def no_grad():
    """Disable recording inside the block; forwards only."""
    _GRAD_ENABLED.append(False)
    try:
        yield
    finally:
        _GRAD_ENABLED.pop()


def _record(out: Tensor, inputs: tuple[Tensor, ...], pull) -> Tensor:
    if _GRAD_ENABLED[-1] and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.grad = np.zeros_like(out.data)
        active_tape().record(out, inputs, pull)
    return out


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(t) into ``t.grad`` for every recorded tensor.

    The loss must be scalar and the active tape non-empty. Repeated calls without
    zeroing add another full gradient (accumulate semantics).
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    tape = active_tape()
    if not tape._records:
        raise ContractError("backward called with an empty tape")
    adjoint: dict[int, Array] = {id(loss): np.ones_like(loss.data)}
    holders: dict[int, Tensor] = {id(loss): loss}
    for out, inputs, pull in reversed(tape._records):
        g = adjoint.get(id(out))
        if g is None:
            continue
        for t, contrib in zip(inputs, pull(g)):
            if contrib is None or not t.requires_grad:
                continue
            key = id(t)
            if key in adjoint:
                adjoint[key] = adjoint[key] + contrib
            else:
                adjoint[key] = contrib
                holders[key] = t
    for key, g in adjoint.items():
        t = holders[key]
        if t.requires_grad:
            t.grad += g


def _unbroadcast(grad: Array, shape: tuple[int, ...]) -> Array:
    """Sum ``grad`` down to ``shape`` (reverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _check_broadcast(name: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.data.shape, b.data.shape)
    except ValueError:
        raise ShapeError(f"{name}: shapes {a.data.shape} and {b.data.shape} do not broadcast") from None


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------

def add(a: Tensor, b) -> Tensor:
    b = _as_tensor(b)
    _check_broadcast("add", a, b)
    out = Tensor(a.data + b.data)

    def pull(g: Array):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _record(out, (a, b), pull)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast("sub", a, b)
    out = Tensor(a.data - b.data)

    def pull(g: Array):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    return _record(out, (a, b), pull)


def mul(a: Tensor, b) -> Tensor:
    b = _as_tensor(b)
    _check_broadcast("mul", a, b)
    out = Tensor(a.data * b.data)
    ad, bd = a.data, b.data

    def pull(g: Array):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _record(out, (a, b), pull)


def div(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast("div", a, b)
    out = Tensor(a.data / b.data)
    ad, bd = a.data, b.data

    def pull(g: Array):
        return _unbroadcast(g / bd, ad.shape), _unbroadcast(-g * ad / (bd * bd), bd.shape)

    return _record(out, (a, b), pull)


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    out = Tensor(a.data * s)

    def pull(g: Array):
        return (g * s,)

    return _record(out, (a,), pull)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul: shapes {a.data.shape} @ {b.data.shape} do not conform")
    out = Tensor(a.data @ b.data)
    ad, bd = a.data, b.data

    def pull(g: Array):
        return g @ bd.T, ad.T @ g

    return _record(out, (a, b), pull)


def relu(a: Tensor) -> Tensor:
    out = Tensor(np.maximum(a.data, 0.0))
    mask = a.data > 0.0

    def pull(g: Array):
        return (g * mask,)

    return _record(out, (a,), pull)


def mean(a: Tensor, axis: int | None = None) -> Tensor:
    out = Tensor(a.data.mean(axis=axis))
    shape = a.data.shape

    def pull(g: Array):
        if axis is None:
            return (np.full(shape, g / a.data.size),)
        n = shape[axis]
        return (np.broadcast_to(np.expand_dims(g, axis) / n, shape).copy(),)

    return _record(out, (a,), pull)


def sum_(a: Tensor, axis: int | None = None) -> Tensor:
    out = Tensor(a.data.sum(axis=axis))
    shape = a.data.shape

    def pull(g: Array):
        if axis is None:
            return (np.full(shape, g),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _record(out, (a,), pull)


def sqrt(a: Tensor) -> Tensor:
    root = np.sqrt(a.data)
    out = Tensor(root)

    def pull(g: Array):
        return (g * 0.5 / root,)

    return _record(out, (a,), pull)


def exp(a: Tensor) -> Tensor:
    e = np.exp(a.data)
    out = Tensor(e)

    def pull(g: Array):
        return (g * e,)

    return _record(out, (a,), pull)


def log(a: Tensor) -> Tensor:
    out = Tensor(np.log(a.data))
    ad = a.data

    def pull(g: Array):
        return (g / ad,)

    return _record(out, (a,), pull)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(p)

    def pull(g: Array):
        inner = (g * p).sum(axis=axis, keepdims=True)
        return (p * (g - inner),)

    return _record(out, (a,), pull)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = Tensor(shifted - lse)
    p = np.exp(shifted - lse)

    def pull(g: Array):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return _record(out, (a,), pull)


def take_per_row(a: Tensor, idx) -> Tensor:
    """out[i] = a[i, idx[i]] for a 2-D tensor and integer index vector."""
    idx = np.asarray(idx, dtype=np.int64)
    if a.data.ndim != 2 or idx.ndim != 1 or idx.shape[0] != a.data.shape[0]:
        raise ShapeError(f"take_per_row: tensor {a.data.shape} with index {idx.shape}")
    if idx.min(initial=0) < 0 or (idx.size and idx.max() >= a.data.shape[1]):
        raise ContractError("take_per_row: index out of range")
    rows = np.arange(a.data.shape[0])
    out = Tensor(a.data[rows, idx])
    shape = a.data.shape

    def pull(g: Array):
        full = np.zeros(shape)
        np.add.at(full, (rows, idx), g)
        return (full,)

    return _record(out, (a,), pull)


def unfold(a: Tensor, window: int, stride: int) -> Tensor:
    """Slice the last axis into windows: (..., T) -> (..., K, window).

    Requires window and stride to tile the axis exactly: (T - window) % stride == 0.
    """
    T = a.data.shape[-1]
    if window < 1 or stride < 1 or window > T or (T - window) % stride != 0:
        raise ShapeError(f"unfold: window={window} stride={stride} does not tile axis of length {T}")
    k = (T - window) // stride + 1
    windows = np.stack([a.data[..., i * stride: i * stride + window] for i in range(k)], axis=-2)
    out = Tensor(windows)
    shape = a.data.shape

    def pull(g: Array):
        full = np.zeros(shape)
        for i in range(k):
            full[..., i * stride: i * stride + window] += g[..., i, :]
        return (full,)

    return _record(out, (a,), pull)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ShapeError("concat: need at least one tensor")
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def pull(g: Array):
        return tuple(np.split(g, splits, axis=axis))

    return _record(out, tuple(tensors), pull)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    out = Tensor(a.data.reshape(shape))
    orig = a.data.shape

    def pull(g: Array):
        return (g.reshape(orig),)

    return _record(out, (a,), pull)


def transpose(a: Tensor, axes: tuple[int, ...]) -> Tensor:
    out = Tensor(np.transpose(a.data, axes))
    inv = np.argsort(axes)

    def pull(g: Array):
        return (np.transpose(g, inv),)

    return _record(out, (a,), pull)


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

def grad_check(
    fragment: Callable[[Tensor], Tensor],
    x: Tensor,
    params: Sequence[Tensor],
    epsilon: float = 1e-5,
) -> float:
    """Max relative error between analytic gradients and central finite differences.

    ``fragment(x)`` must build a scalar loss from the current values of ``params``.
    The fragment is evaluated twice up front; any bitwise difference means it is not
    deterministic and the check refuses to run. Relative error per parameter entry is
    |a - n| / max(|a|, |n|, 1e-12).
    """
    with no_grad():
        probe_a = fragment(x).data.copy()
        probe_b = fragment(x).data.copy()
    if probe_a.size != 1:
        raise ContractError(f"grad_check fragment must return a scalar, got shape {probe_a.shape}")
    if not np.array_equal(probe_a, probe_b):
        raise ContractError("grad_check fragment is not deterministic between evaluations")

    for p in params:
        p.zero_grad()
    with fresh_tape():
        loss = fragment(x)
        backward(loss)
        analytic = [p.grad.copy() for p in params]

    worst = 0.0
    with no_grad():
        for p, ga in zip(params, analytic):
            flat = p.data.reshape(-1)
            gflat = ga.reshape(-1)
            for i in range(flat.size):
                keep = flat[i]
                flat[i] = keep + epsilon
                up = fragment(x).item()
                flat[i] = keep - epsilon
                down = fragment(x).item()
                flat[i] = keep
                numeric = (up - down) / (2.0 * epsilon)
                denom = max(abs(gflat[i]), abs(numeric), 1e-12)
                worst = max(worst, abs(gflat[i] - numeric) / denom)
    return worst

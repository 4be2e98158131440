"""Dense float32 tensors with a reverse-mode gradient tape.

Ops record onto a single ambient tape (one tape per optimizer interval);
``backward`` replays it in reverse recording order, accumulates gradients
into ``.grad`` of every reachable gradient-tracked tensor, then frees the
tape. Shared (weight-tied) parameters used at several points of a graph
receive the sum of per-use gradients. ``detach``/``no_grad`` sever backward
edges without changing values, so a truncated unroll computes bitwise the
same forward result as a fully tracked one.

Values are float32 throughout and treated as immutable once created; only
the optimizer mutates parameter arrays, between tapes. Forward evaluation
with frozen parameters is therefore safe to run concurrently across
independent rollouts.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np

F32 = np.float32


class TensorError(Exception):
    pass


class ShapeError(TensorError):
    pass


class NonFiniteError(TensorError):
    pass


class TapeReuseError(TensorError):
    pass


class Tape:
    """Ordered record of operations for one backward pass."""

    __slots__ = ("entries", "consumed")

    def __init__(self):
        self.entries: list[_Op] = []
        self.consumed = False

    def __len__(self):
        return len(self.entries)


class _Op:
    __slots__ = ("inputs", "out", "bwd")

    def __init__(self, inputs, out, bwd):
        self.inputs = inputs
        self.out = out
        self.bwd = bwd


_grad_enabled: bool = True
_current_tape: Tape | None = None


def grad_enabled() -> bool:
    return _grad_enabled


def current_tape() -> Tape | None:
    return _current_tape


class no_grad:
    """Context manager that disables tape recording."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


class Tensor:
    """A float32 array, optionally participating in the gradient tape."""

    __slots__ = ("data", "requires_grad", "grad", "_tape")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=F32)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError("tensor created with non-finite values")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._tape: Tape | None = None

    @staticmethod
    def _wrap(arr: np.ndarray, requires_grad: bool) -> "Tensor":
        t = Tensor.__new__(Tensor)
        t.data = arr
        t.requires_grad = requires_grad
        t.grad = None
        t._tape = None
        return t

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data, False)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # Convenience arithmetic; the free functions do the real work.
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(inputs: Sequence[Tensor], out_data: np.ndarray,
            bwd: Callable[[np.ndarray], tuple]) -> Tensor:
    global _current_tape
    track = _grad_enabled and any(t.requires_grad for t in inputs)
    out = Tensor._wrap(out_data, track)
    if track:
        if _current_tape is None or _current_tape.consumed:
            _current_tape = Tape()
        out._tape = _current_tape
        _current_tape.entries.append(_Op(tuple(inputs), out, bwd))
    return out


def detach(x: Tensor) -> Tensor:
    """Value-identical tensor with no backward edges."""
    return x.detach()


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` of every gradient-tracked tensor reachable from
    ``loss``, then consume and free the tape."""
    global _current_tape
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    tape = loss._tape
    if tape is None:
        if not loss.requires_grad:
            raise TensorError("loss is not gradient-tracked")
        raise TensorError("loss has no recorded operations")
    if tape.consumed:
        raise TapeReuseError("backward called on a consumed tape")

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    holders: dict[int, Tensor] = {id(loss): loss}
    for op in reversed(tape.entries):
        g = grads.pop(id(op.out), None)
        if g is None:
            continue
        if op.out.grad is None:
            op.out.grad = g
        else:
            op.out.grad = op.out.grad + g
        for t, ig in zip(op.inputs, op.bwd(g)):
            if ig is None or not t.requires_grad:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + ig
            else:
                grads[key] = ig
                holders[key] = t
    for key, g in grads.items():  # leaves: no producing op on the tape
        t = holders[key]
        t.grad = g if t.grad is None else t.grad + g

    tape.consumed = True
    tape.entries = []
    if _current_tape is tape:
        _current_tape = None


def check_finite(x: Tensor, context: str = "") -> None:
    """Explicit NaN/Inf error path; used at iteration boundaries."""
    if not np.all(np.isfinite(x.data)):
        raise NonFiniteError(f"non-finite values in {context or 'tensor'}")


# ---------------------------------------------------------------------------
# elementwise / shape ops


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.astype(F32, copy=False)


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data + b.data

    def bwd(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _record((a, b), out, bwd)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data - b.data

    def bwd(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    return _record((a, b), out, bwd)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data * b.data

    def bwd(g):
        return (_unbroadcast(g * b.data, a.data.shape),
                _unbroadcast(g * a.data, b.data.shape))

    return _record((a, b), out, bwd)


def scale(a: Tensor, s: float) -> Tensor:
    s = F32(s)
    out = a.data * s

    def bwd(g):
        return (g * s,)

    return _record((a,), out, bwd)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.data.shape
    out = a.data.reshape(shape)

    def bwd(g):
        return (g.reshape(old),)

    return _record((a,), out, bwd)


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = np.ascontiguousarray(a.data.transpose(axes))

    def bwd(g):
        return (np.ascontiguousarray(g.transpose(inv)),)

    return _record((a,), out, bwd)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims, dtype=F32)

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g, a.data.shape).astype(F32),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, a.data.shape).astype(F32),)

    return _record((a,), out, bwd)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else a.data.shape[axis]
    return scale(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product for 2-d operands or identically stacked 3-d operands."""
    ad, bd = a.data, b.data
    if ad.ndim != bd.ndim or ad.ndim not in (2, 3):
        raise ShapeError(f"matmul wants matching 2-d or 3-d operands: "
                         f"{ad.shape} @ {bd.shape}")
    if ad.shape[-1] != bd.shape[-2]:
        raise ShapeError(f"matmul inner dims disagree: {ad.shape} @ {bd.shape}")
    if ad.ndim == 3 and ad.shape[0] != bd.shape[0]:
        raise ShapeError(f"matmul stack dims disagree: {ad.shape} @ {bd.shape}")
    out = ad @ bd

    def bwd(g):
        ga = g @ bd.swapaxes(-1, -2)
        gb = ad.swapaxes(-1, -2) @ g
        return ga, gb

    return _record((a, b), out, bwd)


# ---------------------------------------------------------------------------
# nonlinearities and normalization

_GELU_C = F32(math.sqrt(2.0 / math.pi))
_GELU_A = F32(0.044715)


def gelu(x: Tensor) -> Tensor:
    xd = x.data
    u = _GELU_C * (xd + _GELU_A * xd * xd * xd)
    th = np.tanh(u)
    out = F32(0.5) * xd * (1 + th)

    def bwd(g):
        sech2 = 1 - th * th
        du = _GELU_C * (1 + 3 * _GELU_A * xd * xd)
        return (g * (F32(0.5) * (1 + th) + F32(0.5) * xd * sech2 * du),)

    return _record((x,), out, bwd)


def rms_norm(x: Tensor, eps: float = 1e-6) -> Tensor:
    """Divide each slice along the last axis by sqrt(mean(x^2) + eps)."""
    xd = x.data
    d = xd.shape[-1]
    ms = np.mean(xd * xd, axis=-1, keepdims=True, dtype=F32)
    r = np.sqrt(ms + F32(eps))
    inv = 1.0 / r
    out = xd * inv

    def bwd(g):
        dot = np.sum(g * xd, axis=-1, keepdims=True, dtype=F32)
        return (g * inv - xd * (dot * (inv ** 3) / F32(d)),)

    return _record((x,), out, bwd)


def softmax(x: Tensor) -> Tensor:
    """Softmax along the last axis."""
    xd = x.data
    m = xd.max(axis=-1, keepdims=True)
    e = np.exp(xd - m)
    s = e / e.sum(axis=-1, keepdims=True, dtype=F32)

    def bwd(g):
        dot = np.sum(g * s, axis=-1, keepdims=True, dtype=F32)
        return (s * (g - dot),)

    return _record((x,), s, bwd)


def embedding_lookup(table: Tensor, ids: np.ndarray) -> Tensor:
    """Gather rows of ``table``; backward scatter-adds into used rows only."""
    ids = np.asarray(ids)
    if ids.min() < 0 or ids.max() >= table.data.shape[0]:
        raise IndexError(
            f"token id out of range [0, {table.data.shape[0]}): "
            f"[{ids.min()}, {ids.max()}]")
    out = table.data[ids]

    def bwd(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids, g)
        return (gt,)

    return _record((table,), out, bwd)


# ---------------------------------------------------------------------------
# losses


def softmax_cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean over positions of -log softmax(logits)[target].

    ``logits`` has shape (..., V); ``targets`` matches the leading shape.
    Stabilized by max-subtraction.
    """
    ld = logits.data
    v = ld.shape[-1]
    flat = ld.reshape(-1, v)
    tgt = np.asarray(targets).reshape(-1)
    if tgt.shape[0] != flat.shape[0]:
        raise ShapeError(f"targets shape {np.asarray(targets).shape} does not "
                         f"match logits {ld.shape}")
    if tgt.min() < 0 or tgt.max() >= v:
        raise IndexError(f"target out of range [0, {v})")
    n = flat.shape[0]
    m = flat.max(axis=-1, keepdims=True)
    shifted = flat - m
    lse = np.log(np.sum(np.exp(shifted), axis=-1, dtype=F32))
    picked = shifted[np.arange(n), tgt]
    out = np.asarray(np.mean(lse - picked, dtype=F32))

    def bwd(g):
        p = np.exp(shifted - lse[:, None])
        p[np.arange(n), tgt] -= 1
        return ((g * p / F32(n)).reshape(ld.shape),)

    return _record((logits,), out, bwd)


def bce_with_logit(q: Tensor, labels) -> Tensor:
    """Mean binary cross-entropy on logits: -y*log(sig(q)) - (1-y)*log(1-sig(q)),
    computed in the stable max(q,0) - q*y + log1p(exp(-|q|)) form."""
    qd = q.data
    y = np.asarray(labels, dtype=F32)
    per = np.maximum(qd, 0) - qd * y + np.log1p(np.exp(-np.abs(qd)))
    out = np.asarray(np.mean(per, dtype=F32))
    n = qd.size

    def bwd(g):
        sig = 1.0 / (1.0 + np.exp(-qd))
        return ((g * (sig - y) / F32(n)).astype(F32).reshape(qd.shape),)

    return _record((q,), out, bwd)

"""Reverse-mode automatic differentiation over float64 numpy arrays.

Operations executed while a :class:`Tape` is active are recorded when at
least one input requires a gradient. Outside a tape nothing is recorded,
which is how inference runs.

    with Tape() as tape:
        loss = mean(mul(x, x))
    tape.backward(loss)
"""

from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np

from . import _kernels
from .errors import DimensionError, ParameterError, UsageError
from .rng import Rng

_local = threading.local()


def _stack() -> list:
    s = getattr(_local, "tapes", None)
    if s is None:
        s = _local.tapes = []
    return s


class Tensor:
    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.ascontiguousarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = requires_grad
        t.grad = None
        return t

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Tape:
    """Ordered record of operations for a single backward pass."""

    def __init__(self):
        self.nodes: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, *exc):
        _stack().pop()
        return False

    def __len__(self):
        return len(self.nodes)

    def record(self, out: Tensor, inputs: tuple, backward: Callable):
        self.nodes.append((out, inputs, backward))

    def backward(self, loss: Tensor):
        if loss.data.size != 1 or loss.ndim > 1:
            raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")
        if not loss.requires_grad:
            raise UsageError("loss does not depend on any tensor requiring grad")
        loss.grad = np.ones_like(loss.data)
        for out, inputs, fn in reversed(self.nodes):
            g = out.grad
            if g is None:
                continue
            need = tuple(t.requires_grad for t in inputs)
            for t, gi in zip(inputs, fn(g, need)):
                if gi is None or not t.requires_grad:
                    continue
                t.grad = gi if t.grad is None else t.grad + gi


def backward(loss: Tensor, tape: Tape):
    tape.backward(loss)


def _emit(data: np.ndarray, inputs: tuple, fn: Callable) -> Tensor:
    s = _stack()
    tape = s[-1] if s else None
    track = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor._wrap(data, track)
    if track:
        tape.record(out, inputs, fn)
    return out


# ---------------------------------------------------------------------------
# elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; ``b`` may also be a bias vector along the last axis."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape == b.shape:
        return _emit(a.data + b.data, (a, b), lambda g, need: (g, g))
    if b.ndim == 1 and a.ndim >= 1 and a.shape[-1] == b.shape[0]:
        lead = tuple(range(a.ndim - 1))
        return _emit(a.data + b.data, (a, b), lambda g, need: (g, g.sum(axis=lead) if need[1] else None))
    raise DimensionError(f"add: incompatible shapes {a.shape} and {b.shape}")


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"sub: incompatible shapes {a.shape} and {b.shape}")
    return _emit(a.data - b.data, (a, b), lambda g, need: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"mul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    return _emit(ad * bd, (a, b), lambda g, need: (g * bd if need[0] else None, g * ad if need[1] else None))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _emit(a.data * c, (a,), lambda g, need: (g * c,))


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0
    return _emit(np.where(pos, x.data, 0.0), (x,), lambda g, need: (g * pos,))


def sigmoid(x: Tensor) -> Tensor:
    z = x.data
    e = np.exp(-np.abs(z))
    y = np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _emit(y, (x,), lambda g, need: (g * y * (1.0 - y),))


# ---------------------------------------------------------------------------
# reductions


def total(x: Tensor) -> Tensor:
    """Sum of all elements as a scalar."""
    shp = x.shape
    return _emit(np.asarray(x.data.sum()), (x,), lambda g, need: (np.full(shp, float(g)),))


def mean(x: Tensor, axis: int | None = None) -> Tensor:
    if axis is None:
        n = x.data.size
        shp = x.shape
        return _emit(np.asarray(x.data.mean()), (x,), lambda g, need: (np.full(shp, float(g) / n),))
    ax = axis % x.ndim
    n = x.shape[ax]
    shp = x.shape

    def bw(g, need):
        return (np.broadcast_to(np.expand_dims(g, ax) / n, shp).copy(),)

    return _emit(x.data.mean(axis=ax), (x,), bw)


# ---------------------------------------------------------------------------
# shape manipulation


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    old = x.shape
    try:
        y = x.data.reshape(shape)
    except ValueError as e:
        raise DimensionError(f"reshape: cannot view {old} as {tuple(shape)}") from e
    return _emit(np.ascontiguousarray(y), (x,), lambda g, need: (g.reshape(old),))


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    """Axis permutation; default swaps the last two axes."""
    if axes is None:
        axes = list(range(x.ndim))
        if x.ndim < 2:
            raise DimensionError(f"transpose needs >= 2 dims, got {x.shape}")
        axes[-1], axes[-2] = axes[-2], axes[-1]
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _emit(
        np.ascontiguousarray(x.data.transpose(axes)),
        (x,),
        lambda g, need: (np.ascontiguousarray(g.transpose(inv)),),
    )


def split(x: Tensor, parts: int, axis: int = -1) -> list[Tensor]:
    ax = axis % x.ndim
    if x.shape[ax] % parts:
        raise DimensionError(f"split: axis of size {x.shape[ax]} not divisible into {parts}")
    w = x.shape[ax] // parts
    out = []
    for i in range(parts):
        sl = [slice(None)] * x.ndim
        sl[ax] = slice(i * w, (i + 1) * w)
        sl = tuple(sl)

        def bw(g, need, sl=sl):
            full = np.zeros(x.shape)
            full[sl] = g
            return (full,)

        out.append(_emit(np.ascontiguousarray(x.data[sl]), (x,), bw))
    return out


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    xs = tuple(xs)
    ax = axis % xs[0].ndim
    bounds = np.cumsum([0] + [t.shape[ax] for t in xs])
    try:
        y = np.concatenate([t.data for t in xs], axis=ax)
    except ValueError as e:
        raise DimensionError(f"concat: incompatible shapes {[t.shape for t in xs]}") from e

    def bw(g, need):
        return tuple(
            np.ascontiguousarray(np.take(g, range(bounds[i], bounds[i + 1]), axis=ax)) if need[i] else None
            for i in range(len(xs))
        )

    return _emit(y, xs, bw)


# ---------------------------------------------------------------------------
# linear algebra and the transformer primitives


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a @ b`` with ``a`` of shape (..., m, k) and ``b`` (k, n) or (..., k, n)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2] or (b.ndim > 2 and a.shape[:-2] != b.shape[:-2]):
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data

    def bw(g, need):
        ga = gb = None
        if need[0]:
            ga = g @ np.swapaxes(bd, -1, -2)
        if need[1]:
            if bd.ndim == 2:
                k = ad.shape[-1]
                gb = ad.reshape(-1, k).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return _emit(ad @ bd, (a, b), bw)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    ax = axis % x.ndim
    moved = np.moveaxis(x.data, ax, -1)
    shp = moved.shape
    y2 = _kernels.softmax_fwd(np.ascontiguousarray(moved.reshape(-1, shp[-1])))
    y = np.ascontiguousarray(np.moveaxis(y2.reshape(shp), -1, ax))

    def bw(g, need):
        gm = np.ascontiguousarray(np.moveaxis(g, ax, -1).reshape(-1, shp[-1]))
        dx = _kernels.softmax_bwd(y2, gm)
        return (np.ascontiguousarray(np.moveaxis(dx.reshape(shp), -1, ax)),)

    return _emit(y, (x,), bw)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(f"layer_norm: last dim {d} vs gain {gain.shape}, bias {bias.shape}")
    shp = x.shape
    y, xhat, inv = _kernels.layer_norm_fwd(x.data.reshape(-1, d), gain.data, bias.data, float(eps))

    def bw(g, need):
        dx, dg, db = _kernels.layer_norm_bwd(np.ascontiguousarray(g.reshape(-1, d)), xhat, inv, gain.data)
        return dx.reshape(shp), dg, db

    return _emit(y.reshape(shp), (x, gain, bias), bw)


def dropout(x: Tensor, p: float, training: bool, rng: Rng | None) -> Tensor:
    if not 0.0 <= p < 1.0:
        raise ParameterError(f"dropout probability must be in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    keep = (rng.random(x.shape) >= p) * (1.0 / (1.0 - p))
    return _emit(x.data * keep, (x,), lambda g, need: (g * keep,))


def bce(p: Tensor, y, clamp: float = 1e-12) -> Tensor:
    """Mean binary cross-entropy of probabilities ``p`` against labels ``y``.

    Probabilities are clamped to [clamp, 1 - clamp]; the gradient is zero
    where clamping is active.
    """
    y = np.asarray(y, dtype=np.float64).reshape(p.shape)
    pc = np.clip(p.data, clamp, 1.0 - clamp)
    n = p.data.size
    val = -(y * np.log(pc) + (1.0 - y) * np.log1p(-pc)).mean()
    inside = (p.data >= clamp) & (p.data <= 1.0 - clamp)

    def bw(g, need):
        return (float(g) / n * (-y / pc + (1.0 - y) / (1.0 - pc)) * inside,)

    return _emit(np.asarray(val), (p,), bw)

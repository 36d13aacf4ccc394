"""Dense float64 tensors with tape-based reverse-mode automatic differentiation.

The engine is deliberately small: a ``Tensor`` wraps a contiguous float64
ndarray, every differentiable operation records a node on the active ``Tape``,
and ``backward`` sweeps the tape once in reverse to accumulate gradients into
the participating leaves. There is no broadcasting beyond scalars and an
explicit ``broadcast_to``; shape mismatches fail loudly.

Typical use::

    with Tape():
        loss = mean(square(matmul(x, w)))
        backward(loss)
    # w.grad is now populated

Outside an active tape all ops run forward-only, which is how inference and
finite-difference probes execute.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np
from scipy.special import erf

from .errors import ShapeError

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)

_TAPE_STACK: list["Tape"] = []


class Tensor:
    """Dense float64 array with an optional gradient buffer."""

    __slots__ = ("data", "requires_grad", "grad", "tape_id")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.ascontiguousarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.tape_id: int | None = None

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
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def numpy(self) -> np.ndarray:
        """The underlying buffer (not a copy); treat as read-only."""
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    # -- operator sugar -------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other) if isinstance(other, Tensor) else scale(self, other)

    def __rmul__(self, other):
        return scale(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], (tuple, list)) else shape)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


class Tape:
    """Ordered record of operations; parents always precede their outputs."""

    def __init__(self):
        self.nodes: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self.frozen = False

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPE_STACK.pop()


def active_tape() -> Tape | None:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def _record(out: Tensor, parents: tuple[Tensor, ...], vjp: Callable) -> Tensor:
    tape = active_tape()
    if tape is not None and not tape.frozen and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.tape_id = len(tape.nodes)
        tape.nodes.append((out, parents, vjp))
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def backward(loss: Tensor, tape: Tape | None = None) -> None:
    """Populate ``grad`` on every requires_grad tensor reachable from ``loss``.

    The tape is consumed: its nodes are cleared afterwards so the context can
    be reused for the next step. Leaves that took part in recorded ops but do
    not influence the loss receive an explicit zero gradient.
    """
    tape = tape or active_tape()
    if tape is None:
        raise RuntimeError("backward requires an active Tape")
    if tape.frozen:
        raise RuntimeError("tape is frozen")
    if loss.data.size != 1:
        raise ShapeError(f"backward expects a scalar loss, got shape {loss.shape}")
    loss.grad = np.ones_like(loss.data)
    for out, parents, vjp in reversed(tape.nodes):
        if out.grad is None:
            continue
        grads = vjp(out.grad)
        for p, g in zip(parents, grads):
            if g is not None and p.requires_grad:
                _accum(p, g)
    for _, parents, _ in tape.nodes:
        for p in parents:
            if p.requires_grad and p.grad is None and p.tape_id is None:
                p.grad = np.zeros_like(p.data)
    tape.nodes.clear()


# ---------------------------------------------------------------------------
# primitive ops
# ---------------------------------------------------------------------------


def _as_scalar(x) -> float | None:
    return float(x) if isinstance(x, (int, float, np.floating, np.integer)) else None


def _check_same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ (only equal-shape or scalar operands)")


def add(a: Tensor, b) -> Tensor:
    s = _as_scalar(b)
    if s is not None:
        out = Tensor(a.data + s)
        return _record(out, (a,), lambda g: (g,))
    _check_same_shape("add", a, b)
    out = Tensor(a.data + b.data)
    return _record(out, (a, b), lambda g: (g, g))


def sub(a: Tensor, b) -> Tensor:
    s = _as_scalar(b)
    if s is not None:
        out = Tensor(a.data - s)
        return _record(out, (a,), lambda g: (g,))
    _check_same_shape("sub", a, b)
    out = Tensor(a.data - b.data)
    return _record(out, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Hadamard product of equal-shape tensors."""
    _check_same_shape("mul", a, b)
    ad, bd = a.data, b.data
    out = Tensor(ad * bd)
    return _record(out, (a, b), lambda g: (g * bd, g * ad))


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    out = Tensor(a.data * s)
    return _record(out, (a,), lambda g: (g * s,))


def div(a: Tensor, b) -> Tensor:
    s = _as_scalar(b)
    if s is not None:
        return scale(a, 1.0 / s)
    _check_same_shape("div", a, b)
    ad, bd = a.data, b.data
    out = Tensor(ad / bd)
    return _record(out, (a, b), lambda g: (g / bd, -g * ad / (bd * bd)))


def gelu(a: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    x = a.data
    phi = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    out = Tensor(x * phi)

    def vjp(g):
        return (g * (phi + x * np.exp(-0.5 * x * x) * _INV_SQRT_2PI),)

    return _record(out, (a,), vjp)


def sqrt(a: Tensor) -> Tensor:
    y = np.sqrt(a.data)
    out = Tensor(y)
    return _record(out, (a,), lambda g: (g * (0.5 / y),))


def square(a: Tensor) -> Tensor:
    x = a.data
    out = Tensor(x * x)
    return _record(out, (a,), lambda g: (g * (2.0 * x),))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; batched when both operands share identical leading dims."""
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if ad.ndim != bd.ndim or ad.shape[:-2] != bd.shape[:-2] or ad.shape[-1] != bd.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    out = Tensor(ad @ bd)

    def vjp(g):
        ga = g @ bd.swapaxes(-1, -2) if a.requires_grad else None
        gb = ad.swapaxes(-1, -2) @ g if b.requires_grad else None
        return ga, gb

    return _record(out, (a, b), vjp)


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = Tensor(a.data.transpose(axes))
    return _record(out, (a,), lambda g: (np.ascontiguousarray(g.transpose(inv)),))


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    old = a.shape
    out = Tensor(a.data.reshape(shape))
    return _record(out, (a,), lambda g: (g.reshape(old),))


def broadcast_to(a: Tensor, shape) -> Tensor:
    """Explicit broadcast; the gradient sums over the expanded axes."""
    shape = tuple(int(s) for s in shape)
    src = a.shape
    if len(src) > len(shape):
        raise ShapeError(f"broadcast_to: cannot shrink rank {src} -> {shape}")
    aligned = (1,) * (len(shape) - len(src)) + src
    for d_src, d_dst in zip(aligned, shape):
        if d_src != d_dst and d_src != 1:
            raise ShapeError(f"broadcast_to: {src} is not expandable to {shape}")
    out = Tensor(np.broadcast_to(a.data.reshape(aligned), shape).copy())
    sum_axes = tuple(i for i in range(len(shape)) if aligned[i] == 1 and shape[i] != 1)

    def vjp(g):
        if sum_axes:
            g = g.sum(axis=sum_axes, keepdims=True)
        return (g.reshape(src),)

    return _record(out, (a,), vjp)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, offsets, axis=axis))

    return _record(out, tuple(tensors), vjp)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims))
    shape = a.shape

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, shape).copy(),)

    return _record(out, (a,), vjp)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = a.size if axis is None else a.shape[axis]
    return scale(tsum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable softmax along ``axis`` (max-subtraction)."""
    x = a.data
    m = x.max(axis=axis, keepdims=True)
    e = np.exp(x - m)
    y = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(y)

    def vjp(g):
        return ((g - (g * y).sum(axis=axis, keepdims=True)) * y,)

    return _record(out, (a,), vjp)


def layer_norm(a: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize over the last axis, then apply a per-channel affine."""
    c = a.shape[-1]
    if gain.shape != (c,) or bias.shape != (c,):
        raise ShapeError(f"layer_norm: affine shapes {gain.shape}/{bias.shape} do not match channels ({c},)")
    if eps <= 0:
        raise ShapeError(f"layer_norm: eps must be positive, got {eps}")
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = xc * inv
    out = Tensor(y * gain.data + bias.data)
    lead = tuple(range(a.ndim - 1))

    def vjp(g):
        dy = g * gain.data
        gx = inv * (dy - dy.mean(axis=-1, keepdims=True) - y * (dy * y).mean(axis=-1, keepdims=True))
        ggain = (g * y).sum(axis=lead) if lead else g * y
        gbias = g.sum(axis=lead) if lead else g
        return gx, ggain, gbias

    return _record(out, (a, gain, bias), vjp)


def min_over(a: Tensor, axis: int = -1) -> Tensor:
    """Hard minimum along ``axis``; ties resolve to the lowest index."""
    x = a.data
    idx = np.expand_dims(x.argmin(axis=axis), axis)
    vals = np.take_along_axis(x, idx, axis=axis).squeeze(axis)
    out = Tensor(vals)

    def vjp(g):
        gx = np.zeros_like(x)
        np.put_along_axis(gx, idx, np.expand_dims(g, axis), axis=axis)
        return (gx,)

    return _record(out, (a,), vjp)


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-5) -> float:
    """Max relative error between the tape gradient of ``f`` and central differences.

    ``f`` must be scalar-valued and deterministic. Relative error per
    coordinate is |ad - fd| / max(|ad|, |fd|, 1e-12).
    """
    if not (1e-7 <= h <= 1e-3):
        raise ValueError(f"grad_check: h={h} outside [1e-7, 1e-3]")
    probe = Tensor(x.data.copy(), requires_grad=True)
    with Tape() as tape:
        backward(f(probe), tape)
    ad = probe.grad.reshape(-1).copy() if probe.grad is not None else np.zeros(x.size)
    fd = np.empty_like(ad)
    flat = x.data.reshape(-1)
    for i in range(flat.size):
        bumped = flat.copy()
        bumped[i] = flat[i] + h
        hi = f(Tensor(bumped.reshape(x.shape))).item()
        bumped[i] = flat[i] - h
        lo = f(Tensor(bumped.reshape(x.shape))).item()
        fd[i] = (hi - lo) / (2.0 * h)
    denom = np.maximum(np.maximum(np.abs(ad), np.abs(fd)), 1e-12)
    return float(np.max(np.abs(ad - fd) / denom))

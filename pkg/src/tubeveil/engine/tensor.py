"""Dense tensors with reverse-mode automatic differentiation.

A Tensor wraps a numpy array (float32 by default, float64 for tight
numerical verification) and records a tape of backward closures as ops
are applied.  `backward` walks the tape once in reverse topological
order and accumulates gradients into the `grad` field of every leaf
that requires them.

Every primitive checks its output for NaN/Inf; a non-finite value is a
hard error, never silently propagated.
"""

from __future__ import annotations

from typing import Iterable, Sequence

import numpy as np
from scipy.special import erf

__all__ = [
    "Tensor",
    "EngineError",
    "ShapeError",
    "NonFiniteError",
    "TapeError",
    "as_tensor",
    "constant",
    "parameter",
    "set_finite_checks",
    "finite_checks_enabled",
    "backward",
    "zero_grads",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "matmul",
    "scale",
    "exp",
    "log",
    "sigmoid",
    "softplus",
    "gelu",
    "reshape",
    "transpose",
    "broadcast_to",
    "concat",
    "slice_axis",
    "reduce_sum",
    "reduce_mean",
    "masked_sum",
    "masked_mean",
    "softmax",
    "log_softmax",
    "layer_norm",
    "clip",
    "stop_gradient",
    "linear",
]


class EngineError(Exception):
    """Base class for tensor-engine failures."""


class ShapeError(EngineError):
    """Operand shapes are incompatible with the requested op."""


class NonFiniteError(EngineError):
    """An op produced NaN or Inf."""


class TapeError(EngineError):
    """Backward misuse: non-scalar loss or an already-consumed tape."""


_FINITE_CHECKS = True

_INV_SQRT2 = 0.7071067811865476
_INV_SQRT_2PI = 0.3989422804014327


def set_finite_checks(enabled: bool) -> bool:
    """Toggle per-op NaN/Inf checking. Returns the previous setting."""
    global _FINITE_CHECKS
    previous = _FINITE_CHECKS
    _FINITE_CHECKS = bool(enabled)
    return previous


def finite_checks_enabled() -> bool:
    return _FINITE_CHECKS


class Tensor:
    """A dense array plus the tape bookkeeping for reverse-mode autodiff."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "_consumed")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None
        self._consumed = False
        if _FINITE_CHECKS and not np.all(np.isfinite(arr)):
            raise NonFiniteError(f"tensor created with non-finite values (name={name!r})")

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = g.astype(self.data.dtype, copy=True)
        else:
            self.grad += g

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}, grad={self.requires_grad}{tag})"

    # operator sugar; scalars are wrapped as constants
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return neg(self)


def as_tensor(value, dtype=None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    arr = np.asarray(value, dtype=dtype if dtype is not None else None)
    if arr.dtype not in (np.float32, np.float64):
        arr = arr.astype(np.float32 if dtype is None else dtype)
    return Tensor(arr)


def constant(value, dtype=np.float32) -> Tensor:
    return Tensor(np.asarray(value, dtype=dtype))


def parameter(value, name: str | None = None) -> Tensor:
    """A leaf tensor that collects gradients."""
    return Tensor(np.asarray(value), requires_grad=True, name=name)


def _check_finite(arr: np.ndarray, op: str) -> None:
    if _FINITE_CHECKS and not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"op {op!r} produced NaN/Inf")


def _make(data: np.ndarray, parents: Sequence[Tensor], op: str) -> Tensor:
    _check_finite(data, op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out._backward = None
    out._consumed = False
    tracked = tuple(p for p in parents if p.requires_grad)
    out._parents = tracked
    out.requires_grad = bool(tracked)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a gradient back to the shape of a broadcast operand."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = _make(a.data + b.data, (a, b), "add")
    if out.requires_grad:
        def bwd(g):
            if a.requires_grad:
                a._accumulate(_unbroadcast(g, a.data.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(g, b.data.shape))
        out._backward = bwd
    return out


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = _make(a.data - b.data, (a, b), "sub")
    if out.requires_grad:
        def bwd(g):
            if a.requires_grad:
                a._accumulate(_unbroadcast(g, a.data.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(-g, b.data.shape))
        out._backward = bwd
    return out


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = _make(a.data * b.data, (a, b), "mul")
    if out.requires_grad:
        def bwd(g):
            if a.requires_grad:
                a._accumulate(_unbroadcast(g * b.data, a.data.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(g * a.data, b.data.shape))
        out._backward = bwd
    return out


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = _make(a.data / b.data, (a, b), "div")
    if out.requires_grad:
        def bwd(g):
            if a.requires_grad:
                a._accumulate(_unbroadcast(g / b.data, a.data.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))
        out._backward = bwd
    return out


def neg(a) -> Tensor:
    a = as_tensor(a)
    out = _make(-a.data, (a,), "neg")
    if out.requires_grad:
        def bwd(g):
            a._accumulate(-g)
        out._backward = bwd
    return out


def scale(a, s: float) -> Tensor:
    """Multiply by a python scalar (no broadcasting bookkeeping needed)."""
    a = as_tensor(a)
    s = float(s)
    out = _make(a.data * s, (a,), "scale")
    if out.requires_grad:
        def bwd(g):
            a._accumulate(g * s)
        out._backward = bwd
    return out


# ---------------------------------------------------------------------------
# matmul


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-d operands, got {a.shape} @ {b.shape}")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    out = _make(np.matmul(a.data, b.data), (a, b), "matmul")
    if out.requires_grad:
        def bwd(g):
            if a.requires_grad:
                ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
                a._accumulate(_unbroadcast(ga, a.data.shape))
            if b.requires_grad:
                gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
                b._accumulate(_unbroadcast(gb, b.data.shape))
        out._backward = bwd
    return out


def linear(x, w, b=None) -> Tensor:
    """x @ w + b with w laid out (in_features, out_features)."""
    y = matmul(x, w)
    if b is not None:
        y = add(y, b)
    return y


# ---------------------------------------------------------------------------
# pointwise nonlinearities


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = _make(np.exp(a.data), (a,), "exp")
    if out.requires_grad:
        y = out.data
        def bwd(g):
            a._accumulate(g * y)
        out._backward = bwd
    return out


def log(a) -> Tensor:
    a = as_tensor(a)
    out = _make(np.log(a.data), (a,), "log")
    if out.requires_grad:
        def bwd(g):
            a._accumulate(g / a.data)
        out._backward = bwd
    return out


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    y = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    y = y.astype(x.dtype)
    out = _make(y, (a,), "sigmoid")
    if out.requires_grad:
        def bwd(g):
            a._accumulate(g * y * (1.0 - y))
        out._backward = bwd
    return out


def softplus(a) -> Tensor:
    """log(1 + e^x), evaluated in overflow-safe form."""
    a = as_tensor(a)
    x = a.data
    y = (np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))).astype(x.dtype)
    out = _make(y, (a,), "softplus")
    if out.requires_grad:
        def bwd(g):
            s = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
            a._accumulate(g * s.astype(x.dtype))
        out._backward = bwd
    return out


def gelu(a) -> Tensor:
    """Exact (erf-based) GELU."""
    a = as_tensor(a)
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    out = _make((x * cdf).astype(x.dtype), (a,), "gelu")
    if out.requires_grad:
        def bwd(g):
            pdf = np.exp(-0.5 * x * x) * _INV_SQRT_2PI
            a._accumulate(g * (cdf + x * pdf).astype(x.dtype))
        out._backward = bwd
    return out


# ---------------------------------------------------------------------------
# shape manipulation


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    shape = tuple(int(s) for s in shape)
    out = _make(a.data.reshape(shape), (a,), "reshape")
    if out.requires_grad:
        def bwd(g):
            a._accumulate(g.reshape(a.data.shape))
        out._backward = bwd
    return out


def transpose(a, axes: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    axes = tuple(int(ax) for ax in axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"transpose axes {axes} invalid for ndim {a.ndim}")
    out = _make(np.transpose(a.data, axes), (a,), "transpose")
    if out.requires_grad:
        inverse = tuple(np.argsort(axes))
        def bwd(g):
            a._accumulate(np.transpose(g, inverse))
        out._backward = bwd
    return out


def broadcast_to(a, shape) -> Tensor:
    a = as_tensor(a)
    shape = tuple(int(s) for s in shape)
    out = _make(np.broadcast_to(a.data, shape).copy(), (a,), "broadcast_to")
    if out.requires_grad:
        def bwd(g):
            a._accumulate(_unbroadcast(g, a.data.shape))
        out._backward = bwd
    return out


def concat(tensors: Iterable, axis: int) -> Tensor:
    parts = [as_tensor(t) for t in tensors]
    if not parts:
        raise ShapeError("concat of zero tensors")
    out = _make(np.concatenate([p.data for p in parts], axis=axis), tuple(parts), "concat")
    if out.requires_grad:
        sizes = [p.data.shape[axis] for p in parts]
        offsets = np.cumsum([0] + sizes)
        def bwd(g):
            for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
                if p.requires_grad:
                    sl = [slice(None)] * g.ndim
                    sl[axis] = slice(int(lo), int(hi))
                    p._accumulate(g[tuple(sl)])
        out._backward = bwd
    return out


def slice_axis(a, axis: int, start: int, stop: int) -> Tensor:
    a = as_tensor(a)
    sl = [slice(None)] * a.ndim
    sl[axis] = slice(start, stop)
    sl = tuple(sl)
    out = _make(a.data[sl].copy(), (a,), "slice")
    if out.requires_grad:
        def bwd(g):
            full = np.zeros_like(a.data)
            full[sl] = g
            a._accumulate(full)
        out._backward = bwd
    return out


# ---------------------------------------------------------------------------
# reductions


def _norm_axis(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def reduce_sum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    out = _make(a.data.sum(axis=axes, keepdims=keepdims), (a,), "sum")
    if out.requires_grad:
        def bwd(g):
            if not keepdims:
                g = np.expand_dims(g, axes)
            a._accumulate(np.broadcast_to(g, a.data.shape).copy())
        out._backward = bwd
    return out


def reduce_mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    count = 1
    for ax in axes:
        count *= a.data.shape[ax]
    return scale(reduce_sum(a, axis=axes, keepdims=keepdims), 1.0 / count)


def _check_binary_mask(mask: Tensor) -> None:
    m = mask.data
    if _FINITE_CHECKS and not np.all((m == 0.0) | (m == 1.0)):
        raise ShapeError("mask is not binary")


def masked_sum(a, mask, axis, keepdims: bool = False) -> Tensor:
    """Sum of a over axis, counting only entries where mask == 1.

    The mask participates differentiably, so straight-through decision
    gradients flow through it.
    """
    a, mask = as_tensor(a), as_tensor(mask)
    _check_binary_mask(mask)
    return reduce_sum(mul(a, mask), axis=axis, keepdims=keepdims)


def masked_mean(a, mask, axis, keepdims: bool = False) -> Tensor:
    """Mean of a over the masked-in entries; a zero vector when none remain."""
    a, mask = as_tensor(a), as_tensor(mask)
    _check_binary_mask(mask)
    total = reduce_sum(mul(a, mask), axis=axis, keepdims=keepdims)
    count = reduce_sum(mask, axis=axis, keepdims=keepdims)
    # with an all-zero mask the numerator is already zero, so clipping the
    # denominator to 1 yields the required zero vector instead of 0/0
    return div(total, clip(count, 1.0, None))


# ---------------------------------------------------------------------------
# normalizations


def softmax(a) -> Tensor:
    """Softmax over the last axis, stabilized by per-row max subtraction."""
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = (e / e.sum(axis=-1, keepdims=True)).astype(a.data.dtype)
    out = _make(y, (a,), "softmax")
    if out.requires_grad:
        def bwd(g):
            dot = (g * y).sum(axis=-1, keepdims=True)
            a._accumulate((g - dot) * y)
        out._backward = bwd
    return out


def log_softmax(a) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    ls = (shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))).astype(a.data.dtype)
    out = _make(ls, (a,), "log_softmax")
    if out.requires_grad:
        sm = np.exp(ls)
        def bwd(g):
            a._accumulate(g - sm * g.sum(axis=-1, keepdims=True))
        out._backward = bwd
    return out


def layer_norm(a, gamma, beta, eps: float = 1e-5) -> Tensor:
    """LayerNorm over the last axis with affine parameters."""
    a, gamma, beta = as_tensor(a), as_tensor(gamma), as_tensor(beta)
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv_std
    y = (xhat * gamma.data + beta.data).astype(x.dtype)
    out = _make(y, (a, gamma, beta), "layer_norm")
    if out.requires_grad:
        def bwd(g):
            if gamma.requires_grad:
                gamma._accumulate(_unbroadcast(g * xhat, gamma.data.shape))
            if beta.requires_grad:
                beta._accumulate(_unbroadcast(g, beta.data.shape))
            if a.requires_grad:
                dxhat = g * gamma.data
                m1 = dxhat.mean(axis=-1, keepdims=True)
                m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
                a._accumulate(inv_std * (dxhat - m1 - xhat * m2))
        out._backward = bwd
    return out


def clip(a, lo: float | None, hi: float | None) -> Tensor:
    """Clamp values; the gradient passes only where the input is in range."""
    a = as_tensor(a)
    out = _make(np.clip(a.data, lo, hi), (a,), "clip")
    if out.requires_grad:
        inside = np.ones_like(a.data, dtype=bool)
        if lo is not None:
            inside &= a.data >= lo
        if hi is not None:
            inside &= a.data <= hi
        def bwd(g):
            a._accumulate(np.where(inside, g, 0.0).astype(a.data.dtype))
        out._backward = bwd
    return out


def stop_gradient(a) -> Tensor:
    a = as_tensor(a)
    return Tensor(a.data, requires_grad=False)


def straight_through(soft, hard: np.ndarray) -> Tensor:
    """Forward emits `hard` verbatim; the gradient flows to `soft` unchanged.

    Used for discretization steps where the forward value must be exact
    (e.g. binary decisions) while training still sees the relaxation.
    """
    soft = as_tensor(soft)
    hard = np.asarray(hard, dtype=soft.dtype)
    if hard.shape != soft.shape:
        raise ShapeError(f"straight_through shapes differ: {hard.shape} vs {soft.shape}")
    out = _make(hard, (soft,), "straight_through")
    if out.requires_grad:
        def bwd(g):
            soft._accumulate(g)
        out._backward = bwd
    return out


# ---------------------------------------------------------------------------
# backward


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, params: dict[str, Tensor] | None = None) -> dict[str, Tensor] | None:
    """Accumulate gradients of a scalar loss into every requires-grad leaf.

    When `params` is given, returns a name -> gradient map covering every
    entry; parameters off the tape get zero gradients.
    """
    if loss.data.size != 1:
        raise TapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._consumed:
        raise TapeError("tape already consumed: backward was called twice on this loss")
    loss._consumed = True
    if loss.requires_grad:
        order = _topo_order(loss)
        loss._accumulate(np.ones_like(loss.data))
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
            if node._parents:
                # intermediate grads are not needed once propagated
                node.grad = None if node is not loss else node.grad
    if params is None:
        return None
    out: dict[str, Tensor] = {}
    for name, p in params.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        out[name] = Tensor(np.array(g, copy=True))
    return out


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None

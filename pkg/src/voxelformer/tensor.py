"""Deterministic n-dimensional tensors with reverse-mode differentiation.

The engine is intentionally small: dense row-major float32/float64 buffers,
an implicit computation tape built as operations execute, and a backward pass
that replays recorded operations in exact reverse execution order.  Every
operation checks its output for NaN/Inf and raises :class:`NumericError`
immediately, so numerical blow-ups surface at the op that caused them rather
than three modules later.

Design rules enforced here:

* precision is an explicit tensor attribute; binary ops never promote
  silently (mixing float32 with float64 raises),
* ``permute`` materializes a contiguous copy, there are no lazy views with
  observable stride semantics,
* the tape backing an output is consumed by its first ``backward`` and a
  second replay raises :class:`TapeError`.
"""

from __future__ import annotations

import itertools
import math
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf as _erf

from ._conv import (
    conv3d_input_grad_raw,
    conv3d_kernel_grad_raw,
    conv3d_raw,
    conv_out_extent,
)

__all__ = [
    "Tensor",
    "TensorError",
    "ShapeError",
    "NumericError",
    "TapeError",
    "matmul",
    "concat",
    "softmax",
    "layernorm",
    "relu",
    "gelu",
    "conv3d",
    "conv3d_transpose",
    "finite_diff_check",
    "zero_grads",
]


class TensorError(Exception):
    """Base class for engine failures."""


class ShapeError(TensorError):
    """Operand shapes (or dtypes) violate an operation's contract."""


class NumericError(TensorError):
    """An operation produced NaN or Inf from finite inputs."""


class TapeError(TensorError):
    """Backward-pass misuse: non-scalar output or an already-consumed tape."""


_SUPPORTED = (np.float32, np.float64)
_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)

# Global execution counter; ordering ops by this id yields the tape order.
_op_counter = itertools.count()


def _check_finite(data: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(data)):
        raise NumericError(f"{op} produced non-finite values")


class Tensor:
    """A dense numeric array, optionally tracked for reverse-mode gradients."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_grad_fn", "_order")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.type not in _SUPPORTED:
            arr = arr.astype(np.float64)
        arr = np.ascontiguousarray(arr)
        _check_finite(arr, "Tensor()")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents: tuple = ()
        self._grad_fn = None
        self._order = -1

    # -- basic introspection -------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        """The underlying buffer; treat as read-only."""
        return self.data

    def detach(self) -> "Tensor":
        t = Tensor.__new__(Tensor)
        t.data = self.data
        t.requires_grad = False
        t.grad = None
        t._parents = ()
        t._grad_fn = None
        t._order = -1
        return t

    def astype(self, dtype) -> "Tensor":
        """Detached cast; precision changes never happen inside a graph."""
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{flag})"

    # -- autodiff ------------------------------------------------------------

    def backward(self) -> None:
        """Populate ``grad`` on every tracked leaf reachable from this scalar.

        Recorded operations are replayed in exact reverse execution order and
        the tape is consumed: a second backward over any part of the same
        graph raises :class:`TapeError`.
        """
        if self.data.size != 1:
            raise TapeError(f"backward requires a scalar output, got shape {self.shape}")
        if not self.requires_grad:
            raise TapeError("output does not require grad; nothing to differentiate")
        if self._grad_fn is None:
            if self._parents:
                raise TapeError("computation tape already consumed by a previous backward")
            self._accumulate(np.ones_like(self.data))
            return

        nodes = []
        seen = {id(self)}
        stack = [self]
        while stack:
            t = stack.pop()
            if t._grad_fn is None:
                if t._parents:
                    raise TapeError("computation tape already consumed by a previous backward")
                continue
            nodes.append(t)
            for p in t._parents:
                if p.requires_grad and id(p) not in seen:
                    seen.add(id(p))
                    stack.append(p)
        nodes.sort(key=lambda t: t._order)

        flows = {id(self): np.ones_like(self.data)}
        for t in reversed(nodes):
            g = flows.pop(id(t), None)
            if g is None:
                continue
            parent_grads = t._grad_fn(g)
            for p, pg in zip(t._parents, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                if p._grad_fn is None:
                    p._accumulate(pg)
                else:
                    acc = flows.get(id(p))
                    flows[id(p)] = pg if acc is None else acc + pg
        for t in nodes:
            t._grad_fn = None  # consume the tape

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    # -- operator sugar --------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, _coerce(other, self))

    def __rsub__(self, other):
        return sub(_coerce(other, self), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, _coerce(other, self))

    def __rtruediv__(self, other):
        return div(_coerce(other, self), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    # -- method forms ------------------------------------------------------

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def permute(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return permute(self, axes)

    def take(self, index: int):
        return take(self, index)


def _result(data, parents, grad_fn, op: str) -> Tensor:
    _check_finite(data, op)
    t = Tensor.__new__(Tensor)
    t.data = data
    t.grad = None
    t.requires_grad = any(p.requires_grad for p in parents)
    if t.requires_grad:
        t._parents = tuple(parents)
        t._grad_fn = grad_fn
        t._order = next(_op_counter)
    else:
        t._parents = ()
        t._grad_fn = None
        t._order = -1
    return t


def _coerce(x, like: Tensor) -> Tensor:
    """Python scalars adopt the partner's dtype; everything else must already match."""
    if isinstance(x, Tensor):
        return x
    if isinstance(x, (int, float)):
        return Tensor(np.asarray(x, dtype=like.dtype))
    return Tensor(x)


def _check_same_dtype(a: Tensor, b: Tensor, op: str) -> None:
    if a.dtype != b.dtype:
        raise ShapeError(f"{op}: dtype mismatch {a.dtype} vs {b.dtype}; cast explicitly")


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- elementwise arithmetic (numpy broadcasting, gradients reduced back) -----


def add(a: Tensor, b) -> Tensor:
    a = a if isinstance(a, Tensor) else _coerce(a, b)
    b = _coerce(b, a)
    _check_same_dtype(a, b, "add")
    data = a.data + b.data

    def grad_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(data, (a, b), grad_fn, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype(a, b, "sub")
    data = a.data - b.data

    def grad_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result(data, (a, b), grad_fn, "sub")


def mul(a: Tensor, b) -> Tensor:
    a = a if isinstance(a, Tensor) else _coerce(a, b)
    b = _coerce(b, a)
    _check_same_dtype(a, b, "mul")
    data = a.data * b.data
    ad, bd = a.data, b.data

    def grad_fn(g):
        return _unbroadcast(g * bd, a.shape), _unbroadcast(g * ad, b.shape)

    return _result(data, (a, b), grad_fn, "mul")


def div(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype(a, b, "div")
    data = a.data / b.data
    ad, bd = a.data, b.data

    def grad_fn(g):
        return _unbroadcast(g / bd, a.shape), _unbroadcast(-g * ad / (bd * bd), b.shape)

    return _result(data, (a, b), grad_fn, "div")


def neg(a: Tensor) -> Tensor:
    def grad_fn(g):
        return (-g,)

    return _result(-a.data, (a,), grad_fn, "neg")


def sqrt(a: Tensor) -> Tensor:
    data = np.sqrt(a.data)

    def grad_fn(g):
        return (g * (0.5 / data),)

    return _result(data, (a,), grad_fn, "sqrt")


# -- reductions ---------------------------------------------------------------


def _expand_reduced(g: np.ndarray, shape, axis, keepdims) -> np.ndarray:
    if axis is None:
        return np.broadcast_to(g.reshape((1,) * len(shape)), shape)
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    axes = tuple(a % len(shape) for a in axes)
    if not keepdims:
        for a in sorted(axes):
            g = np.expand_dims(g, a)
    return np.broadcast_to(g, shape)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = a.data.sum(axis=axis, keepdims=keepdims)
    shape = a.shape

    def grad_fn(g):
        return (np.ascontiguousarray(_expand_reduced(g, shape, axis, keepdims)),)

    return _result(np.asarray(data), (a,), grad_fn, "sum")


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = a.data.mean(axis=axis, keepdims=keepdims)
    shape = a.shape
    count = a.size if axis is None else int(
        np.prod([shape[ax % len(shape)] for ax in ((axis,) if isinstance(axis, int) else axis)])
    )

    def grad_fn(g):
        return (np.ascontiguousarray(_expand_reduced(g, shape, axis, keepdims)) / count,)

    return _result(np.asarray(data), (a,), grad_fn, "mean")


# -- structure ops ------------------------------------------------------------


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        data = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}") from exc
    old = a.shape

    def grad_fn(g):
        return (g.reshape(old),)

    return _result(data, (a,), grad_fn, "reshape")


def permute(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"permute: {axes} is not a permutation of {a.ndim} axes")
    data = np.ascontiguousarray(a.data.transpose(axes))
    inverse = tuple(np.argsort(axes))

    def grad_fn(g):
        return (np.ascontiguousarray(g.transpose(inverse)),)

    return _result(data, (a,), grad_fn, "permute")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("concat of zero tensors")
    for t in tensors[1:]:
        _check_same_dtype(tensors[0], t, "concat")
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum(sizes)[:-1]

    def grad_fn(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, offsets, axis=axis))

    return _result(data, tuple(tensors), grad_fn, "concat")


def take(a: Tensor, index: int) -> Tensor:
    """Select one slice along axis 0 (a copy, shape a.shape[1:])."""
    data = np.ascontiguousarray(a.data[index])
    shape = a.shape

    def grad_fn(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[index] = g
        return (full,)

    return _result(data, (a,), grad_fn, "take")


# -- nonlinearities -----------------------------------------------------------


def relu(a: Tensor) -> Tensor:
    data = np.maximum(a.data, 0)
    mask = a.data > 0

    def grad_fn(g):
        return (g * mask,)

    return _result(data, (a,), grad_fn, "relu")


def gelu(a: Tensor) -> Tensor:
    """Exact (erf-based) Gaussian error linear unit."""
    x = a.data
    cdf = 0.5 * (1.0 + _erf(x * _INV_SQRT2))
    data = x * cdf

    def grad_fn(g):
        pdf = np.exp(-0.5 * x * x) * _INV_SQRT2PI
        return (g * (cdf + x * pdf),)

    return _result(data, (a,), grad_fn, "gelu")


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Max-shifted softmax; slices along ``axis`` sum to one."""
    ax = axis % a.ndim if a.ndim else 0
    shifted = a.data - a.data.max(axis=ax, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=ax, keepdims=True)

    def grad_fn(g):
        dot = (g * data).sum(axis=ax, keepdims=True)
        return (data * (g - dot),)

    return _result(data, (a,), grad_fn, "softmax")


def layernorm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    k = x.shape[-1]
    if gamma.shape != (k,) or beta.shape != (k,):
        raise ShapeError(f"layernorm: gamma/beta must have shape ({k},)")
    _check_same_dtype(x, gamma, "layernorm")
    _check_same_dtype(x, beta, "layernorm")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    data = gamma.data * xhat + beta.data
    gd = gamma.data

    def grad_fn(g):
        gg = g * gd
        gx = inv * (gg - gg.mean(axis=-1, keepdims=True) - xhat * (gg * xhat).mean(axis=-1, keepdims=True))
        flatg = g.reshape(-1, k)
        dgamma = (flatg * xhat.reshape(-1, k)).sum(axis=0)
        dbeta = flatg.sum(axis=0)
        return gx, dgamma, dbeta

    return _result(data, (x, gamma, beta), grad_fn, "layernorm")


# -- contractions -------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; operands may carry identical leading batch axes."""
    _check_same_dtype(a, b, "matmul")
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner extents differ ({a.shape} x {b.shape})")
    if a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: leading axes differ ({a.shape} x {b.shape})")
    data = np.matmul(a.data, b.data)
    ad, bd = a.data, b.data

    def grad_fn(g):
        ga = np.matmul(g, bd.swapaxes(-1, -2))
        gb = np.matmul(ad.swapaxes(-1, -2), g)
        return ga, gb

    return _result(data, (a, b), grad_fn, "matmul")


# -- 3D convolution -----------------------------------------------------------


def _check_conv_args(x: Tensor, kernel: Tensor, stride: int, padding: int, op: str):
    if x.ndim != 4 or kernel.ndim != 5:
        raise ShapeError(f"{op}: expected input (C,h,w,d) and kernel (Co,Ci,k1,k2,k3), "
                         f"got {x.shape} and {kernel.shape}")
    if not isinstance(stride, int) or stride < 1:
        raise ShapeError(f"{op}: stride must be a positive int, got {stride!r}")
    if not isinstance(padding, int) or padding < 0:
        raise ShapeError(f"{op}: padding must be a non-negative int, got {padding!r}")
    _check_same_dtype(x, kernel, op)


def conv3d(x: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """3D cross-correlation of a (C_in,h,w,d) input with a (C_out,C_in,k,k,k) kernel."""
    _check_conv_args(x, kernel, stride, padding, "conv3d")
    if kernel.shape[1] != x.shape[0]:
        raise ShapeError(f"conv3d: kernel expects {kernel.shape[1]} input channels, "
                         f"input has {x.shape[0]}")
    for ext, k in zip(x.shape[1:], kernel.shape[2:]):
        if k > ext + 2 * padding:
            raise ShapeError(f"conv3d: kernel extent {k} exceeds padded input extent "
                             f"{ext + 2 * padding}")
    data = conv3d_raw(x.data, kernel.data, stride, padding)
    xd, kd = x.data, kernel.data
    x_spatial = x.shape[1:]
    kshape = kernel.shape
    need_x, need_k = x.requires_grad, kernel.requires_grad

    def grad_fn(g):
        gx = conv3d_input_grad_raw(g, kd, stride, padding, x_spatial) if need_x else None
        gk = conv3d_kernel_grad_raw(xd, g, stride, padding, kshape) if need_k else None
        return gx, gk

    return _result(data, (x, kernel), grad_fn, "conv3d")


def conv3d_transpose(x: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Adjoint of :func:`conv3d` with the same kernel/stride/padding.

    Maps a (C_out,h,w,d) input back to C_in channels; each spatial extent
    becomes ``(n-1)*stride + k - 2*padding``, so extents multiply by the
    stride exactly when the kernel extent equals the stride and padding is 0.
    """
    _check_conv_args(x, kernel, stride, padding, "conv3d_transpose")
    if kernel.shape[0] != x.shape[0]:
        raise ShapeError(f"conv3d_transpose: kernel expects {kernel.shape[0]} input channels, "
                         f"input has {x.shape[0]}")
    out_spatial = tuple(
        (ext - 1) * stride + k - 2 * padding for ext, k in zip(x.shape[1:], kernel.shape[2:])
    )
    if min(out_spatial) < 1:
        raise ShapeError(f"conv3d_transpose: output extents {out_spatial} collapse to nothing")
    data = conv3d_input_grad_raw(x.data, kernel.data, stride, padding, out_spatial)
    xd, kd = x.data, kernel.data
    kshape = kernel.shape
    need_x, need_k = x.requires_grad, kernel.requires_grad

    def grad_fn(g):
        gx = conv3d_raw(g, kd, stride, padding) if need_x else None
        gk = conv3d_kernel_grad_raw(g, xd, stride, padding, kshape) if need_k else None
        return gx, gk

    return _result(data, (x, kernel), grad_fn, "conv3d_transpose")


# -- verification -------------------------------------------------------------


def finite_diff_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    step: float = 1e-5,
    coords: int | None = None,
    rng: np.random.Generator | None = None,
    rel_floor: float = 1e-8,
) -> float:
    """Max relative disagreement between reverse-mode and central differences.

    ``f`` must map a tensor shaped like ``x`` to a scalar tensor and be
    deterministic.  For each checked coordinate the relative error is
    ``|analytic - numeric| / max(|analytic|, |numeric|, rel_floor)``; the
    maximum over coordinates is returned.  ``coords`` caps how many
    coordinates are probed (a seeded uniform sample without replacement);
    by default every coordinate is checked.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    base = Tensor(np.array(x.data, copy=True), requires_grad=True)
    out = f(base)
    if out.size != 1:
        raise TapeError("finite_diff_check: f must return a scalar")
    out.backward()
    if base.grad is None:
        raise TapeError("finite_diff_check: f does not depend on x")
    analytic = base.grad.ravel()

    n = base.size
    if coords is None or coords >= n:
        idxs = range(n)
    else:
        gen = rng if rng is not None else np.random.default_rng(0)
        idxs = gen.choice(n, size=coords, replace=False)

    flat = base.data.ravel()
    shape = base.shape
    worst = 0.0
    for i in idxs:
        hi = flat.copy()
        hi[i] += step
        lo = flat.copy()
        lo[i] -= step
        fp = f(Tensor(hi.reshape(shape))).item()
        fm = f(Tensor(lo.reshape(shape))).item()
        numeric = (fp - fm) / (2.0 * step)
        if math.isnan(numeric) or math.isnan(analytic[i]):
            raise NumericError("finite_diff_check: NaN encountered (non-differentiable point?)")
        denom = max(abs(analytic[i]), abs(numeric), rel_floor)
        worst = max(worst, abs(analytic[i] - numeric) / denom)
    return float(worst)


def zero_grads(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.grad = None

"""Minimal reverse-mode automatic differentiation over numpy arrays.

Complex quantities are real tensors whose trailing axis has size 2
(real, imaginary).  Every complex op defines its backward pass on that
real representation, so a real-valued loss can be differentiated through
the whole transmit/receive chain.

Usage::

    with Tape() as tape:
        x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
        loss = reduce_sum(x * x)
    grads = backprop(tape, loss)
    grads[x]   # array([2., 4., 6.])
"""

from __future__ import annotations

import contextlib
import itertools
import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "Gradients",
    "ShapeError",
    "SingularMatrixError",
    "GradientError",
    "record",
    "backprop",
    "finite_difference_check",
    "set_precision",
    "get_dtype",
    "precision",
]


class ShapeError(ValueError):
    pass


class SingularMatrixError(np.linalg.LinAlgError):
    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


class GradientError(FloatingPointError):
    def __init__(self, message, node_id=None):
        super().__init__(message)
        self.node_id = node_id


# ---------------------------------------------------------------------------
# precision policy

_precision = {"dtype": np.dtype(np.float64)}


def set_precision(dtype) -> None:
    """Set the global float type for new tensors (float32 or float64)."""
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported precision {dtype}")
    _precision["dtype"] = dtype


def get_dtype() -> np.dtype:
    return _precision["dtype"]


@contextlib.contextmanager
def precision(dtype):
    old = _precision["dtype"]
    set_precision(dtype)
    try:
        yield
    finally:
        _precision["dtype"] = old


def _complex_dtype(dtype):
    return np.complex64 if np.dtype(dtype) == np.float32 else np.complex128


# ---------------------------------------------------------------------------
# tensors and tapes

_ids = itertools.count()
_local = threading.local()


class Tensor:
    """A real array plus a flag saying whether gradients are wanted."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if arr.dtype.kind != "f":
            arr = arr.astype(get_dtype())
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name
        self.id = next(_ids)

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{tag}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return record("add", self, as_tensor(other))

    def __radd__(self, other):
        return record("add", as_tensor(other), self)

    def __sub__(self, other):
        return record("sub", self, as_tensor(other))

    def __rsub__(self, other):
        return record("sub", as_tensor(other), self)

    def __mul__(self, other):
        return record("mul", self, as_tensor(other))

    def __rmul__(self, other):
        return record("mul", as_tensor(other), self)

    def __neg__(self):
        return record("mul", self, as_tensor(-1.0))

    def __truediv__(self, other):
        return record("mul", self, reciprocal(as_tensor(other)))

    def __matmul__(self, other):
        return record("matmul", self, as_tensor(other))

    def __getitem__(self, index):
        return record("getitem", self, index=index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return record("reshape", self, shape=shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return record("transpose", self, axes=axes or None)

    def sum(self, axis=None, keepdims=False):
        return record("reduce_sum", self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return record("reduce_mean", self, axis=axis, keepdims=keepdims)


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x)
    if arr.dtype.kind != "f" or arr.dtype != get_dtype():
        arr = arr.astype(get_dtype())
    return Tensor(arr)


@dataclass
class Node:
    op: str
    inputs: tuple
    output: Tensor
    backward: Callable


@dataclass
class Tape:
    """Ordered record of differentiable ops.

    Entering the tape as a context manager makes it the active tape for the
    current thread; tapes on different threads are independent.
    """

    nodes: list = field(default_factory=list)

    def __enter__(self):
        stack = _tape_stack()
        stack.append(self)
        return self

    def __exit__(self, *exc):
        _tape_stack().pop()
        return False

    def __len__(self):
        return len(self.nodes)


def _tape_stack() -> list:
    if not hasattr(_local, "stack"):
        _local.stack = []
    return _local.stack


def active_tape() -> Tape | None:
    stack = _tape_stack()
    return stack[-1] if stack else None


class Gradients(dict):
    """Map from tensor id to gradient array; also indexable by Tensor."""

    def __getitem__(self, key):
        if isinstance(key, Tensor):
            key = key.id
        return super().__getitem__(key)

    def get(self, key, default=None):
        if isinstance(key, Tensor):
            key = key.id
        return super().get(key, default)

    def __contains__(self, key):
        if isinstance(key, Tensor):
            key = key.id
        return super().__contains__(key)


# ---------------------------------------------------------------------------
# op registry

_OPS: dict[str, Callable] = {}


def _op(name):
    def deco(fn):
        _OPS[name] = fn
        return fn

    return deco


def record(op_kind: str, *inputs: Tensor, **params) -> Tensor:
    """Evaluate ``op_kind`` on ``inputs`` and append it to the active tape."""
    try:
        forward = _OPS[op_kind]
    except KeyError:
        raise ValueError(f"unknown op {op_kind!r}") from None
    inputs = tuple(as_tensor(t) for t in inputs)
    out, backward = forward(*(t.data for t in inputs), **params)
    needs_grad = any(t.requires_grad for t in inputs)
    tape = active_tape()
    result = Tensor(out, requires_grad=needs_grad and tape is not None)
    if tape is not None and needs_grad:
        tape.nodes.append(Node(op_kind, inputs, result, backward))
    return result


def backprop(tape: Tape, loss: Tensor) -> Gradients:
    """Reverse sweep over ``tape`` from the scalar ``loss``.

    Gradients from several uses of one tensor are summed.  Returns
    gradients for every tensor on the tape that received one, including
    the requires_grad leaves.
    """
    if loss.size != 1:
        raise ShapeError(f"backprop: loss must be scalar, got shape {loss.shape}")
    grads = Gradients()
    grads[loss.id] = np.ones_like(loss.data)
    for node in reversed(tape.nodes):
        g = grads.get(node.output.id)
        if g is None:
            continue
        in_grads = node.backward(g)
        for t, gi in zip(node.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            if not np.all(np.isfinite(gi)):
                raise GradientError(
                    f"non-finite gradient from op {node.op!r} (output id {node.output.id})",
                    node_id=node.output.id,
                )
            if gi.shape != t.shape:
                raise ShapeError(f"{node.op}: gradient shape {gi.shape} != input shape {t.shape}")
            prev = grads.get(t.id)
            grads[t.id] = gi if prev is None else prev + gi
    return grads


# ---------------------------------------------------------------------------
# broadcasting helpers

def _binary_shape(op, a, b):
    """One-sided broadcasting: one operand must already have the output shape."""
    sa, sb = a.shape, b.shape
    if sa == sb:
        return sa
    try:
        out = np.broadcast_shapes(sa, sb)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {sa} and {sb}") from None
    if out != sa and out != sb:
        raise ShapeError(f"{op}: shapes {sa} and {sb} would both need expanding")
    return out


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise ops

@_op("add")
def _add(a, b):
    shape = _binary_shape("add", a, b)
    sa, sb = a.shape, b.shape
    return a + b, lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb))


@_op("sub")
def _sub(a, b):
    _binary_shape("sub", a, b)
    sa, sb = a.shape, b.shape
    return a - b, lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb))


@_op("mul")
def _mul(a, b):
    _binary_shape("mul", a, b)
    return a * b, lambda g: (_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape))


@_op("relu")
def _relu(a):
    mask = a > 0
    return a * mask, lambda g: (g * mask,)


@_op("sigmoid")
def _sigmoid(a):
    out = np.empty_like(a)
    pos = a >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
    ea = np.exp(a[~pos])
    out[~pos] = ea / (1.0 + ea)
    return out, lambda g: (g * out * (1.0 - out),)


@_op("softplus")
def _softplus(a):
    out = np.logaddexp(0.0, a).astype(a.dtype, copy=False)

    def backward(g):
        s = np.empty_like(a)
        pos = a >= 0
        s[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
        ea = np.exp(a[~pos])
        s[~pos] = ea / (1.0 + ea)
        return (g * s,)

    return out, backward


@_op("log")
def _log(a):
    return np.log(a), lambda g: (g / a,)


@_op("exp")
def _exp(a):
    out = np.exp(a)
    return out, lambda g: (g * out,)


@_op("reciprocal")
def _reciprocal(a):
    out = 1.0 / a
    return out, lambda g: (-g * out * out,)


@_op("sqrt")
def _sqrt(a):
    out = np.sqrt(a)
    return out, lambda g: (g * 0.5 / out,)


@_op("clip")
def _clip(a, low, high):
    out = np.clip(a, low, high)
    inside = (a >= low) & (a <= high)
    return out, lambda g: (g * inside,)


# ---------------------------------------------------------------------------
# shape ops

@_op("reshape")
def _reshape(a, shape):
    try:
        out = a.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {a.shape} to {tuple(shape)}") from None
    return out, lambda g: (g.reshape(a.shape),)


@_op("transpose")
def _transpose(a, axes=None):
    axes = tuple(range(a.ndim))[::-1] if axes is None else tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"transpose: axes {axes} invalid for shape {a.shape}")
    inv = np.argsort(axes)
    return a.transpose(axes), lambda g: (g.transpose(inv),)


@_op("expand")
def _expand(a, shape):
    shape = tuple(shape)
    try:
        out = np.broadcast_to(a, shape)
    except ValueError:
        raise ShapeError(f"expand: cannot expand {a.shape} to {shape}") from None
    return out, lambda g: (_unbroadcast(g, a.shape),)


@_op("getitem")
def _getitem(a, index):
    out = a[index]

    def backward(g):
        full = np.zeros_like(a)
        np.add.at(full, index, g)
        return (full,)

    return out, backward


@_op("concat")
def _concat(*arrays, axis=0):
    try:
        out = np.concatenate(arrays, axis=axis)
    except ValueError:
        shapes = [x.shape for x in arrays]
        raise ShapeError(f"concat: incompatible shapes {shapes} on axis {axis}") from None
    sizes = np.cumsum([x.shape[axis] for x in arrays])[:-1]
    return out, lambda g: tuple(np.split(g, sizes, axis=axis))


@_op("reduce_sum")
def _reduce_sum(a, axis=None, keepdims=False):
    out = a.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return np.asarray(out, dtype=a.dtype), backward


@_op("reduce_mean")
def _reduce_mean(a, axis=None, keepdims=False):
    out = a.mean(axis=axis, keepdims=keepdims)
    count = a.size // max(np.asarray(out).size, 1)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, a.shape).copy(),)

    return np.asarray(out, dtype=a.dtype), backward


# ---------------------------------------------------------------------------
# linear algebra

@_op("matmul")
def _matmul(a, b):
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not conform")
    try:
        out = np.matmul(a, b)
    except ValueError:
        raise ShapeError(f"matmul: batch shapes {a.shape} and {b.shape} do not conform") from None

    def backward(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(b, -1, -2)), a.shape)
        gb = _unbroadcast(np.matmul(np.swapaxes(a, -1, -2), g), b.shape)
        return ga, gb

    return out, backward


def _to_complex(a):
    if a.shape[-1:] != (2,):
        raise ShapeError(f"complex tensor needs trailing axis of size 2, got {a.shape}")
    out = np.empty(a.shape[:-1], dtype=_complex_dtype(a.dtype))
    out.real = a[..., 0]
    out.imag = a[..., 1]
    return out


def _to_real(z, dtype):
    out = np.empty(z.shape + (2,), dtype=dtype)
    out[..., 0] = z.real
    out[..., 1] = z.imag
    return out


def _herm(z):
    return np.conj(np.swapaxes(z, -1, -2))


# Backward rules below use G = dL/dRe + i dL/dIm, under which a holomorphic
# f(z) with cotangent G yields dL/dz = conj(f'(z)) * G.

@_op("complex_matmul")
def _complex_matmul(a, b):
    za, zb = _to_complex(a), _to_complex(b)
    if za.ndim < 2 or zb.ndim < 2 or za.shape[-1] != zb.shape[-2]:
        raise ShapeError(f"complex_matmul: shapes {a.shape} and {b.shape} do not conform")
    try:
        zc = np.matmul(za, zb)
    except ValueError:
        raise ShapeError(f"complex_matmul: batch shapes {a.shape} and {b.shape} do not conform") from None

    def backward(g):
        zg = _to_complex(g)
        ga = _unbroadcast(np.matmul(zg, _herm(zb)), za.shape)
        gb = _unbroadcast(np.matmul(_herm(za), zg), zb.shape)
        return _to_real(ga, a.dtype), _to_real(gb, b.dtype)

    return _to_real(zc, a.dtype), backward


@_op("complex_mul")
def _complex_mul(a, b):
    _binary_shape("complex_mul", a, b)
    za, zb = _to_complex(a), _to_complex(b)

    def backward(g):
        zg = _to_complex(g)
        ga = _unbroadcast(zg * np.conj(zb), za.shape)
        gb = _unbroadcast(zg * np.conj(za), zb.shape)
        return _to_real(ga, a.dtype), _to_real(gb, b.dtype)

    return _to_real(za * zb, a.dtype), backward


@_op("conj")
def _conj(a):
    _to_complex(a)
    sign = np.array([1.0, -1.0], dtype=a.dtype)
    return a * sign, lambda g: (g * sign,)


@_op("hermitian")
def _hermitian(a):
    if a.ndim < 3:
        raise ShapeError(f"hermitian: need (..., m, n, 2), got {a.shape}")
    sign = np.array([1.0, -1.0], dtype=a.dtype)
    out = np.swapaxes(a, -2, -3) * sign
    return out, lambda g: (np.swapaxes(g * sign, -2, -3),)


@_op("abs_squared")
def _abs_squared(a):
    _to_complex(a)
    out = a[..., 0] ** 2 + a[..., 1] ** 2
    return out, lambda g: (2.0 * a * g[..., None],)


INVERSE_DET_FLOOR = 1e-30


@_op("small_complex_inverse")
def _small_complex_inverse(m, ridge=0.0):
    zm = _to_complex(m)
    n = zm.shape[-1]
    if zm.ndim < 2 or zm.shape[-2] != n:
        raise ShapeError(f"small_complex_inverse: matrix must be square, got {m.shape}")
    if n > 4:
        raise ShapeError(f"small_complex_inverse: dimension {n} > 4")
    if ridge:
        zm = zm + ridge * np.eye(n, dtype=zm.dtype)
    det = np.abs(np.linalg.det(zm))
    bad = det < INVERSE_DET_FLOOR
    if np.any(bad):
        idx = tuple(int(i) for i in np.argwhere(bad)[0])
        raise SingularMatrixError(
            f"small_complex_inverse: |det| = {det[idx]:.3g} below {INVERSE_DET_FLOOR} at index {idx}",
            index=idx,
        )
    zinv = np.linalg.inv(zm)

    def backward(g):
        zg = _to_complex(g)
        zih = _herm(zinv)
        return (_to_real(-np.matmul(np.matmul(zih, zg), zih), m.dtype),)

    return _to_real(zinv, m.dtype), backward


# ---------------------------------------------------------------------------
# convolutions, channels-last (B, S, F, C)

def _check_conv_input(op, x, channels):
    if x.ndim != 4 or x.shape[-1] != channels:
        raise ShapeError(f"{op}: input {x.shape} does not match {channels} channels")


@_op("conv2d_depthwise")
def _conv2d_depthwise(x, kernel, bias, dilation=(1, 1)):
    ks, kf, c = kernel.shape
    _check_conv_input("conv2d_depthwise", x, c)
    if bias.shape != (c,):
        raise ShapeError(f"conv2d_depthwise: bias {bias.shape} != ({c},)")
    ds, df = dilation
    ps, pf = (ks // 2) * ds, (kf // 2) * df
    _, s, f, _ = x.shape
    xp = np.pad(x, ((0, 0), (ps, ps), (pf, pf), (0, 0)))
    out = np.empty_like(x)
    out[...] = bias
    taps = [(u, v, u * ds, v * df) for u in range(ks) for v in range(kf)]
    for u, v, os_, of in taps:
        out += xp[:, os_:os_ + s, of:of + f, :] * kernel[u, v]

    def backward(g):
        gxp = np.zeros_like(xp)
        gk = np.empty_like(kernel)
        for u, v, os_, of in taps:
            win = xp[:, os_:os_ + s, of:of + f, :]
            gk[u, v] = np.einsum("bsfc,bsfc->c", win, g)
            gxp[:, os_:os_ + s, of:of + f, :] += g * kernel[u, v]
        gx = gxp[:, ps:ps + s, pf:pf + f, :]
        return gx, gk, g.sum(axis=(0, 1, 2))

    return out, backward


@_op("conv2d_pointwise")
def _conv2d_pointwise(x, weight, bias):
    cin, cout = weight.shape
    _check_conv_input("conv2d_pointwise", x, cin)
    if bias.shape != (cout,):
        raise ShapeError(f"conv2d_pointwise: bias {bias.shape} != ({cout},)")
    flat = x.reshape(-1, cin)
    out = (flat @ weight + bias).reshape(x.shape[:-1] + (cout,))

    def backward(g):
        gflat = g.reshape(-1, cout)
        gx = (gflat @ weight.T).reshape(x.shape)
        return gx, flat.T @ gflat, gflat.sum(axis=0)

    return out, backward


@_op("batch_norm")
def _batch_norm(x, gamma, beta, eps=1e-3):
    """Per-channel normalization with statistics of the current batch."""
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batch_norm: scale/offset must be ({c},)")
    axes = tuple(range(x.ndim - 1))
    n = x.size // c
    mu = x.mean(axis=axes)
    xc = x - mu
    var = (xc * xc).mean(axis=axes)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma + beta

    def backward(g):
        gb = g.sum(axis=axes)
        gg = (g * xhat).sum(axis=axes)
        gx = (gamma * inv / n) * (n * g - gb - xhat * gg)
        return gx, gg, gb

    out = np.asarray(out, dtype=x.dtype)
    return out, backward


# ---------------------------------------------------------------------------
# public wrappers

def add(a, b):
    return record("add", a, b)


def sub(a, b):
    return record("sub", a, b)


def mul(a, b):
    return record("mul", a, b)


def matmul(a, b):
    return record("matmul", a, b)


def relu(a):
    return record("relu", a)


def sigmoid(a):
    return record("sigmoid", a)


def softplus(a):
    return record("softplus", a)


def log(a):
    return record("log", a)


def exp(a):
    return record("exp", a)


def reciprocal(a):
    return record("reciprocal", a)


def sqrt(a):
    return record("sqrt", a)


def clip(a, low, high):
    return record("clip", a, low=low, high=high)


def reshape(a, shape):
    return record("reshape", a, shape=tuple(shape))


def transpose(a, axes=None):
    return record("transpose", a, axes=axes)


def expand(a, shape):
    return record("expand", a, shape=tuple(shape))


def concat(tensors: Sequence[Tensor], axis=0):
    return record("concat", *tensors, axis=axis)


def reduce_sum(a, axis=None, keepdims=False):
    return record("reduce_sum", a, axis=axis, keepdims=keepdims)


def reduce_mean(a, axis=None, keepdims=False):
    return record("reduce_mean", a, axis=axis, keepdims=keepdims)


def complex_matmul(a, b):
    return record("complex_matmul", a, b)


def complex_mul(a, b):
    return record("complex_mul", a, b)


def conj(a):
    return record("conj", a)


def hermitian(a):
    """Conjugate transpose of the last two matrix axes of a complex tensor."""
    return record("hermitian", a)


def abs_squared(a):
    return record("abs_squared", a)


def small_complex_inverse(m, ridge: float = 0.0):
    """(M + ridge*I)^-1 for complex square matrices of size at most 4."""
    if ridge < 0:
        raise ValueError("ridge must be non-negative")
    return record("small_complex_inverse", m, ridge=float(ridge))


def conv2d_depthwise(x, kernel, bias, dilation=(1, 1)):
    return record("conv2d_depthwise", x, kernel, bias, dilation=tuple(dilation))


def conv2d_pointwise(x, weight, bias):
    return record("conv2d_pointwise", x, weight, bias)


def batch_norm(x, gamma, beta, eps=1e-3):
    return record("batch_norm", x, gamma, beta, eps=eps)


def complex_tensor(z, requires_grad=False, name=None) -> Tensor:
    """Pack a numpy complex array into the (..., 2) real representation."""
    z = np.asarray(z)
    return Tensor(_to_real(z, get_dtype()), requires_grad=requires_grad, name=name)


def to_complex(t) -> np.ndarray:
    """Unpack a (..., 2) real tensor or array into a numpy complex array."""
    data = t.data if isinstance(t, Tensor) else np.asarray(t)
    return _to_complex(data)


# ---------------------------------------------------------------------------
# gradient checking

def finite_difference_check(
    fn: Callable[[Tensor], Tensor],
    point,
    epsilon: float = 1e-5,
    indices=None,
    numeric_dtype=None,
) -> float:
    """Compare reverse-mode gradients with central differences.

    Returns max |analytic - numeric| / (|analytic| + |numeric| + 1e-12) over
    the checked coordinates (all of them unless ``indices`` is given). The
    analytic side runs at the active precision. ``numeric_dtype`` evaluates
    the differences at another precision, which is how a 32-bit gradient is
    checked without drowning it in 32-bit rounding of the forward pass.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    base = np.array(point.data if isinstance(point, Tensor) else point, dtype=get_dtype())
    x = Tensor(base.copy(), requires_grad=True)
    with Tape() as tape:
        y = fn(x)
    analytic = backprop(tape, y).get(x, np.zeros_like(base))
    ctx = precision(numeric_dtype) if numeric_dtype is not None else contextlib.nullcontext()
    with ctx:
        flat = base.astype(get_dtype()).reshape(-1)
        coords = range(flat.size) if indices is None else indices
        numeric_all = {}
        for i in coords:
            bumped = flat.copy()
            bumped[i] = flat[i] + epsilon
            up = float(fn(Tensor(bumped.reshape(base.shape))).data)
            bumped[i] = flat[i] - epsilon
            down = float(fn(Tensor(bumped.reshape(base.shape))).data)
            numeric_all[i] = (up - down) / (2 * epsilon)
    worst = 0.0
    for i, numeric in numeric_all.items():
        a = float(analytic.reshape(-1)[i])
        err = abs(a - numeric) / (abs(a) + abs(numeric) + 1e-12)
        worst = max(worst, err)
    return worst

"""Differentiable primitives.

Each primitive is a :class:`Function` subclass registered under a ``kind``
string.  ``apply(kind, *inputs, **attrs)`` runs the forward pass, rejects
non-finite results and records a graph node.  Layout is channels-last
throughout: 2D maps are ``(N, H, W, C)`` and 3D maps ``(N, H, W, D, C)``.

Convolutions are a patch gather followed by a matmul, so the matmul backward
rule covers every convolution variant.
"""

from __future__ import annotations

import builtins
import contextlib
import itertools
from typing import Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf

from .tensor import Node, NonFiniteError, ShapeError, Tensor, as_tensor, grad_enabled

PRIMITIVES: dict[str, type["Function"]] = {}

_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def register(kind: str):
    def deco(cls):
        cls.kind = kind
        PRIMITIVES[kind] = cls
        return cls
    return deco


class Function:
    kind = "?"

    def forward(self, *xs: np.ndarray, **attrs) -> np.ndarray:
        raise NotImplementedError

    def backward(self, g: np.ndarray) -> tuple:
        raise NotImplementedError


_BRANCHES: Optional[list] = None


@contextlib.contextmanager
def record_branches():
    """Collect the branch taken by every piecewise primitive (max, relu).

    Finite-difference audits compare these records to detect a stencil that
    crosses a non-differentiable point.
    """
    global _BRANCHES
    outer, _BRANCHES = _BRANCHES, []
    try:
        yield _BRANCHES
    finally:
        _BRANCHES = outer


def _note_branch(arr: np.ndarray) -> None:
    if _BRANCHES is not None:
        _BRANCHES.append(arr.copy())


def _check_finite(arr: np.ndarray, kind: str) -> None:
    s = np.sum(arr, dtype=np.float64) if arr.size else 0.0
    if not np.isfinite(s) and not np.isfinite(arr).all():
        raise NonFiniteError(kind)


def apply(kind: str, *inputs, **attrs) -> Tensor:
    """Run primitive ``kind`` on ``inputs``; record it for backward."""
    try:
        cls = PRIMITIVES[kind]
    except KeyError:
        raise ValueError(f"unknown primitive kind {kind!r}") from None
    tensors = tuple(as_tensor(x) for x in inputs)
    fn = cls()
    out_data = fn.forward(*(t.data for t in tensors), **attrs)
    _check_finite(out_data, kind)
    needs_grad = grad_enabled() and any(t.requires_grad for t in tensors)
    out = Tensor(out_data, requires_grad=needs_grad)
    if needs_grad:
        out.node = Node(fn, tensors, out)
    return out


def unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

@register("add")
class Add(Function):
    def forward(self, a, b):
        self.shapes = (a.shape, b.shape)
        return a + b

    def backward(self, g):
        return unbroadcast(g, self.shapes[0]), unbroadcast(g, self.shapes[1])


@register("sub")
class Sub(Function):
    def forward(self, a, b):
        self.shapes = (a.shape, b.shape)
        return a - b

    def backward(self, g):
        return unbroadcast(g, self.shapes[0]), unbroadcast(-g, self.shapes[1])


@register("mul")
class Mul(Function):
    def forward(self, a, b):
        self.a, self.b = a, b
        return a * b

    def backward(self, g):
        return unbroadcast(g * self.b, self.a.shape), unbroadcast(g * self.a, self.b.shape)


@register("div")
class Div(Function):
    def forward(self, a, b):
        self.a, self.b = a, b
        return a / b

    def backward(self, g):
        ga = g / self.b
        gb = -g * self.a / (self.b * self.b)
        return unbroadcast(ga, self.a.shape), unbroadcast(gb, self.b.shape)


@register("scale")
class Scale(Function):
    def forward(self, x, c: float = 1.0):
        self.c = x.dtype.type(c)
        return x * self.c

    def backward(self, g):
        return (g * self.c,)


@register("sigmoid")
class Sigmoid(Function):
    def forward(self, x):
        # split by sign to avoid overflow in exp
        y = np.empty_like(x)
        pos = x >= 0
        y[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
        y[~pos] = ex / (1.0 + ex)
        self.y = y
        return y

    def backward(self, g):
        return (g * self.y * (1.0 - self.y),)


@register("gelu")
class Gelu(Function):
    """Exact GELU, ``x * Phi(x)``."""

    def forward(self, x):
        self.x = x
        self.cdf = (0.5 * (1.0 + erf(x / _SQRT2))).astype(x.dtype, copy=False)
        return x * self.cdf

    def backward(self, g):
        x = self.x
        pdf = (_INV_SQRT_2PI * np.exp(-0.5 * x * x)).astype(x.dtype, copy=False)
        return (g * (self.cdf + x * pdf),)


@register("relu")
class Relu(Function):
    def forward(self, x):
        self.mask = x > 0
        _note_branch(self.mask)
        return x * self.mask

    def backward(self, g):
        return (g * self.mask,)


@register("softmax")
class Softmax(Function):
    def forward(self, x, axis: int = -1):
        self.axis = axis
        z = x - x.max(axis=axis, keepdims=True)
        e = np.exp(z)
        self.y = e / e.sum(axis=axis, keepdims=True)
        return self.y

    def backward(self, g):
        y = self.y
        return (y * (g - (g * y).sum(axis=self.axis, keepdims=True)),)


@register("log_softmax")
class LogSoftmax(Function):
    def forward(self, x, axis: int = -1):
        self.axis = axis
        z = x - x.max(axis=axis, keepdims=True)
        out = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))
        self.p = np.exp(out)
        return out

    def backward(self, g):
        return (g - self.p * g.sum(axis=self.axis, keepdims=True),)


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------

def _norm_axes(axis, ndim) -> tuple:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


@register("sum")
class Sum(Function):
    def forward(self, x, axis=None, keepdims: bool = False):
        self.shape = x.shape
        self.axes = _norm_axes(axis, x.ndim)
        return np.asarray(x.sum(axis=self.axes, keepdims=keepdims))

    def backward(self, g):
        g = g.reshape([1 if i in self.axes else s for i, s in enumerate(self.shape)])
        return (np.broadcast_to(g, self.shape).copy(),)


@register("mean")
class Mean(Function):
    def forward(self, x, axis=None, keepdims: bool = False):
        self.shape = x.shape
        self.axes = _norm_axes(axis, x.ndim)
        self.n = int(np.prod([x.shape[a] for a in self.axes]))
        return np.asarray(x.mean(axis=self.axes, keepdims=keepdims))

    def backward(self, g):
        g = g.reshape([1 if i in self.axes else s for i, s in enumerate(self.shape)])
        return (np.broadcast_to(g / g.dtype.type(self.n), self.shape).copy(),)


@register("max")
class Max(Function):
    """Max over one axis; the gradient goes to the first maximal entry."""

    def forward(self, x, axis: int = -1, keepdims: bool = False):
        self.axis = axis % x.ndim
        self.shape = x.shape
        self.idx = np.argmax(x, axis=self.axis)
        _note_branch(self.idx)
        out = np.take_along_axis(x, np.expand_dims(self.idx, self.axis), axis=self.axis)
        return out if keepdims else np.squeeze(out, axis=self.axis)

    def backward(self, g):
        gx = np.zeros(self.shape, dtype=g.dtype)
        g = g.reshape(self.idx.shape)
        np.put_along_axis(gx, np.expand_dims(self.idx, self.axis),
                          np.expand_dims(g, self.axis), axis=self.axis)
        return (gx,)


# ---------------------------------------------------------------------------
# linear algebra and layout
# ---------------------------------------------------------------------------

@register("matmul")
class Matmul(Function):
    def forward(self, a, b):
        if a.ndim < 2 or b.ndim < 2:
            raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
        if a.shape[-1] != b.shape[-2]:
            raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
        self.a, self.b = a, b
        return np.matmul(a, b)

    def backward(self, g):
        a, b = self.a, self.b
        ga = np.matmul(g, np.swapaxes(b, -1, -2))
        gb = np.matmul(np.swapaxes(a, -1, -2), g)
        return unbroadcast(ga, a.shape), unbroadcast(gb, b.shape)


@register("reshape")
class Reshape(Function):
    def forward(self, x, shape=()):
        self.shape = x.shape
        try:
            return x.reshape(shape)
        except ValueError as exc:
            raise ShapeError(str(exc)) from None

    def backward(self, g):
        return (g.reshape(self.shape),)


@register("permute")
class Permute(Function):
    def forward(self, x, axes=()):
        if sorted(axes) != list(range(x.ndim)):
            raise ShapeError(f"invalid permutation {axes} for rank {x.ndim}")
        self.inv = np.argsort(axes)
        return np.ascontiguousarray(x.transpose(axes))

    def backward(self, g):
        return (np.ascontiguousarray(g.transpose(self.inv)),)


@register("concat")
class Concat(Function):
    def forward(self, *xs, axis: int = -1):
        ref = xs[0]
        axis = axis % ref.ndim
        for x in xs[1:]:
            if x.ndim != ref.ndim or any(x.shape[i] != ref.shape[i] for i in range(ref.ndim) if i != axis):
                raise ShapeError(f"concat shape mismatch {ref.shape} vs {x.shape} on axis {axis}")
        self.axis = axis
        self.bounds = np.cumsum([x.shape[axis] for x in xs])[:-1]
        return np.concatenate(xs, axis=axis)

    def backward(self, g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, self.bounds, axis=self.axis))


@register("narrow")
class Narrow(Function):
    """Contiguous slice ``[start, start+length)`` along one axis."""

    def forward(self, x, axis: int = 0, start: int = 0, length: int = 1):
        axis = axis % x.ndim
        if start < 0 or start + length > x.shape[axis]:
            raise ShapeError(f"narrow [{start}, {start + length}) out of range for extent {x.shape[axis]}")
        self.shape, self.axis, self.start = x.shape, axis, start
        idx = [slice(None)] * x.ndim
        idx[axis] = slice(start, start + length)
        self.idx = tuple(idx)
        return np.ascontiguousarray(x[self.idx])

    def backward(self, g):
        gx = np.zeros(self.shape, dtype=g.dtype)
        gx[self.idx] = g
        return (gx,)


@register("take")
class Take(Function):
    """Gather rows of a table: ``table[index]``."""

    def forward(self, table, index=None):
        index = np.asarray(index)
        if index.min(initial=0) < 0 or index.max(initial=0) >= table.shape[0]:
            raise ShapeError("take index out of range")
        self.index, self.shape = index, table.shape
        return table[index]

    def backward(self, g):
        gt = np.zeros(self.shape, dtype=g.dtype)
        np.add.at(gt, self.index, g)
        return (gt,)


# ---------------------------------------------------------------------------
# normalization
# ---------------------------------------------------------------------------

@register("batch_norm")
class BatchNorm(Function):
    """Per-channel batch norm over every axis except the last.

    With ``groups=G`` the leading axis is split into ``G`` equal groups that
    get independent batch statistics (used for the three views).  Running
    statistics are updated in place when ``training`` and ``update_stats``.
    """

    def forward(self, x, gamma, beta, running_mean=None, running_var=None, training=True,
                momentum=0.1, eps=1e-5, groups=1, update_stats=True):
        C = x.shape[-1]
        self.shape = x.shape
        self.training = training
        xg = x.reshape(groups, -1, C)
        if training:
            n = xg.shape[1]
            mu = xg.mean(axis=1, keepdims=True)
            xc = xg - mu
            var = (xc * xc).mean(axis=1, keepdims=True)
            inv = 1.0 / np.sqrt(var + x.dtype.type(eps))
            if update_stats and running_mean is not None:
                unbiased = var * (n / builtins.max(n - 1, 1))
                running_mean *= 1.0 - momentum
                running_mean += momentum * mu.mean(axis=0).reshape(C)
                running_var *= 1.0 - momentum
                running_var += momentum * unbiased.mean(axis=0).reshape(C)
        else:
            xc = xg - running_mean.reshape(1, 1, C)
            inv = np.broadcast_to(1.0 / np.sqrt(running_var.reshape(1, 1, C) + x.dtype.type(eps)),
                                  (groups, 1, C)).astype(x.dtype)
        xhat = xc * inv
        self.xhat, self.inv, self.gamma = xhat, inv, gamma
        return (xhat * gamma + beta).reshape(x.shape)

    def backward(self, g):
        C = self.shape[-1]
        gg = g.reshape(self.xhat.shape)
        dgamma = (gg * self.xhat).sum(axis=(0, 1))
        dbeta = gg.sum(axis=(0, 1))
        dxhat = gg * self.gamma
        if self.training:
            m1 = dxhat.mean(axis=1, keepdims=True)
            m2 = (dxhat * self.xhat).mean(axis=1, keepdims=True)
            dx = self.inv * (dxhat - m1 - self.xhat * m2)
        else:
            dx = dxhat * self.inv
        return dx.reshape(self.shape), dgamma.reshape(C), dbeta.reshape(C)


@register("layer_norm")
class LayerNorm(Function):
    def forward(self, x, gamma, beta, eps=1e-5):
        mu = x.mean(axis=-1, keepdims=True)
        xc = x - mu
        var = (xc * xc).mean(axis=-1, keepdims=True)
        self.inv = 1.0 / np.sqrt(var + x.dtype.type(eps))
        self.xhat = xc * self.inv
        self.gamma = gamma
        return self.xhat * gamma + beta

    def backward(self, g):
        lead = tuple(range(g.ndim - 1))
        dgamma = (g * self.xhat).sum(axis=lead)
        dbeta = g.sum(axis=lead)
        dxhat = g * self.gamma
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * self.xhat).mean(axis=-1, keepdims=True)
        return self.inv * (dxhat - m1 - self.xhat * m2), dgamma, dbeta


# ---------------------------------------------------------------------------
# patch gather (convolution front end)
# ---------------------------------------------------------------------------

def conv_output_size(n: int, k: int, s: int, p: int) -> int:
    return (n + 2 * p - k) // s + 1


@register("patches")
class Patches(Function):
    """``(N, *spatial, C) -> (N, *out, *kernel, C)`` sliding-window gather."""

    def forward(self, x, kernel=(3, 3), stride=(1, 1), padding=(0, 0)):
        nd = len(kernel)
        if x.ndim != nd + 2:
            raise ShapeError(f"patches over {nd} spatial dims needs rank {nd + 2}, got {x.shape}")
        out = tuple(conv_output_size(n, k, s, p) for n, k, s, p in zip(x.shape[1:-1], kernel, stride, padding))
        if min(out) < 1:
            raise ShapeError(f"kernel {kernel} does not fit input {x.shape} with padding {padding}")
        self.kernel, self.stride, self.padding, self.out = kernel, stride, padding, out
        self.in_shape = x.shape
        xp = np.pad(x, [(0, 0)] + [(p, p) for p in padding] + [(0, 0)]) if any(padding) else x
        self.pad_shape = xp.shape
        win = sliding_window_view(xp, kernel, axis=tuple(range(1, nd + 1)))
        win = win[(slice(None),) + tuple(slice(0, (o - 1) * s + 1, s) for o, s in zip(out, stride))]
        perm = (0, *range(1, nd + 1), *range(nd + 2, 2 * nd + 2), nd + 1)
        return np.ascontiguousarray(win.transpose(perm))

    def backward(self, g):
        nd = len(self.kernel)
        gx = np.zeros(self.pad_shape, dtype=g.dtype)
        lead = (slice(None),) * (1 + nd)
        for offs in itertools.product(*(range(k) for k in self.kernel)):
            dst = (slice(None),) + tuple(slice(o, o + (n - 1) * s + 1, s)
                                         for o, n, s in zip(offs, self.out, self.stride))
            gx[dst] += g[lead + offs]
        crop = (slice(None),) + tuple(slice(p, p + n) for p, n in zip(self.padding, self.in_shape[1:-1]))
        return (np.ascontiguousarray(gx[crop]),)


# ---------------------------------------------------------------------------
# functional wrappers
# ---------------------------------------------------------------------------

def add(a, b):
    return apply("add", a, b)


def sub(a, b):
    return apply("sub", a, b)


def mul(a, b):
    return apply("mul", a, b)


def div(a, b):
    return apply("div", a, b)


def scale(x, c: float):
    return apply("scale", x, c=c)


def matmul(a, b):
    return apply("matmul", a, b)


def sigmoid(x):
    return apply("sigmoid", x)


def gelu(x):
    return apply("gelu", x)


def relu(x):
    return apply("relu", x)


def softmax(x, axis: int = -1):
    return apply("softmax", x, axis=axis)


def log_softmax(x, axis: int = -1):
    return apply("log_softmax", x, axis=axis)


def sum(x, axis=None, keepdims: bool = False):  # noqa: A001 - mirrors numpy
    return apply("sum", x, axis=axis, keepdims=keepdims)


def mean(x, axis=None, keepdims: bool = False):
    return apply("mean", x, axis=axis, keepdims=keepdims)


def max(x, axis: int = -1, keepdims: bool = False):  # noqa: A001
    return apply("max", x, axis=axis, keepdims=keepdims)


def reshape(x, shape):
    return apply("reshape", x, shape=tuple(shape))


def permute(x, axes):
    return apply("permute", x, axes=tuple(axes))


def concat(xs: Sequence, axis: int = -1):
    return apply("concat", *xs, axis=axis)


def narrow(x, axis: int, start: int, length: int):
    return apply("narrow", x, axis=axis, start=start, length=length)


def split(x, sizes: Sequence[int], axis: int = -1) -> list[Tensor]:
    x = as_tensor(x)
    if np.sum(sizes) != x.shape[axis]:
        raise ShapeError(f"split sizes {list(sizes)} do not partition extent {x.shape[axis]}")
    out, start = [], 0
    for n in sizes:
        out.append(narrow(x, axis, start, int(n)))
        start += int(n)
    return out


def take(table, index):
    return apply("take", table, index=index)


def batch_norm(x, gamma, beta, running_mean=None, running_var=None, training=True,
               momentum=0.1, eps=1e-5, groups=1, update_stats=True):
    if not training and running_mean is None:
        raise ValueError("eval-mode batch norm needs running statistics")
    return apply("batch_norm", x, gamma, beta, running_mean=running_mean, running_var=running_var,
                 training=training, momentum=momentum, eps=eps, groups=groups, update_stats=update_stats)


def layer_norm(x, gamma, beta, eps=1e-5):
    return apply("layer_norm", x, gamma, beta, eps=eps)


def patches(x, kernel, stride, padding):
    return apply("patches", x, kernel=tuple(kernel), stride=tuple(stride), padding=tuple(padding))


def linear(x, weight, bias=None):
    """Pointwise projection along the last axis: ``x @ W + b``."""
    y = matmul(x, weight)
    return y if bias is None else add(y, bias)


def conv2d(x, weight, bias=None, stride=1, padding=0):
    """General 2D convolution; ``weight`` is ``(kh, kw, Cin, Cout)``."""
    kh, kw, cin, cout = weight.shape
    if x.shape[-1] != cin:
        raise ShapeError(f"conv2d expects {cin} input channels, got {x.shape[-1]}")
    cols = patches(x, (kh, kw), (stride, stride), (padding, padding))
    n, ho, wo = cols.shape[:3]
    cols = reshape(cols, (n, ho, wo, kh * kw * cin))
    return linear(cols, reshape(weight, (kh * kw * cin, cout)), bias)


def depthwise_conv2d(x, weight, bias=None, stride=1, padding=0):
    """Per-channel 2D convolution; ``weight`` is ``(kh, kw, C)``."""
    kh, kw, c = weight.shape
    if x.shape[-1] != c:
        raise ShapeError(f"depthwise conv expects {c} channels, got {x.shape[-1]}")
    cols = patches(x, (kh, kw), (stride, stride), (padding, padding))
    n, ho, wo = cols.shape[:3]
    cols = reshape(cols, (n, ho, wo, kh * kw, c))
    y = sum(mul(cols, reshape(weight, (kh * kw, c))), axis=3)
    return y if bias is None else add(y, bias)


def conv3d(x, weight, bias=None, stride=1, padding=0):
    """3D convolution; ``weight`` is ``(kh, kw, kd, Cin, Cout)``."""
    kh, kw, kd, cin, cout = weight.shape
    if x.shape[-1] != cin:
        raise ShapeError(f"conv3d expects {cin} input channels, got {x.shape[-1]}")
    cols = patches(x, (kh, kw, kd), (stride,) * 3, (padding,) * 3)
    n, ho, wo, do = cols.shape[:4]
    cols = reshape(cols, (n, ho, wo, do, kh * kw * kd * cin))
    return linear(cols, reshape(weight, (kh * kw * kd * cin, cout)), bias)


def conv_transpose3d(x, weight, bias=None):
    """Transposed 3D convolution with kernel == stride (non-overlapping).

    ``weight`` is ``(Cin, k, k, k, Cout)``; output extent is ``k`` times input.
    """
    cin, k, k2, k3, cout = weight.shape
    if not (k == k2 == k3):
        raise ShapeError("conv_transpose3d needs a cubic kernel")
    if x.shape[-1] != cin:
        raise ShapeError(f"conv_transpose3d expects {cin} input channels, got {x.shape[-1]}")
    n, h, w, d, _ = x.shape
    y = matmul(x, reshape(weight, (cin, k * k * k * cout)))
    y = reshape(y, (n, h, w, d, k, k, k, cout))
    y = permute(y, (0, 1, 4, 2, 5, 3, 6, 7))
    y = reshape(y, (n, h * k, w * k, d * k, cout))
    return y if bias is None else add(y, bias)


def channel_mean_max(x):
    """Per-position channel mean and channel max, stacked as 2 channels."""
    return concat([mean(x, axis=-1, keepdims=True), max(x, axis=-1, keepdims=True)], axis=-1)


def global_avg_pool(x, axes):
    return mean(x, axis=axes, keepdims=True)


def global_max_pool(x, axes):
    """Max over several axes by folding them into one."""
    axes = _norm_axes(axes, x.ndim)
    keep = [a for a in range(x.ndim) if a not in axes]
    perm = keep + list(axes)
    xt = permute(x, perm)
    folded = reshape(xt, [x.shape[a] for a in keep] + [-1])
    m = max(folded, axis=-1)
    return reshape(m, [1 if a in axes else x.shape[a] for a in range(x.ndim)])


def primitive_forward(kind: str, inputs: Sequence, attrs: Optional[dict] = None) -> Tensor:
    return apply(kind, *inputs, **(attrs or {}))

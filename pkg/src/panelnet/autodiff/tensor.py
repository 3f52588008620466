"""Dense tensors with reverse-mode differentiation.

Shapes are always explicit: binary elementwise ops require identical shapes
and raise :class:`ShapeError` otherwise. Use :func:`expand` to broadcast.
"""

from __future__ import annotations

import contextlib
import threading

import numpy as np

from ..errors import NumericError, ShapeError

_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if dtype is None and arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None
        self.name = name

    # -- graph construction -------------------------------------------------
    @classmethod
    def _make(cls, data, parents, backward):
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.name = None
        track = grad_enabled() and any(p.requires_grad for p in parents)
        out.requires_grad = track
        out._parents = tuple(parents) if track else ()
        out._backward = backward if track else None
        return out

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self, grad=None):
        """Propagate gradients to every leaf that requires them.

        Each node is visited once, in reverse topological order.
        """
        if grad is None:
            if self.data.size != 1:
                raise ShapeError(f"backward() without a seed needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        order = []
        seen = set()
        stack = [(self, False)]
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
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        grads = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node._accumulate(g)
                continue
            parent_grads = node._backward(g)
            for p, pg in zip(node._parents, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                if id(p) in grads:
                    grads[id(p)] = grads[id(p)] + pg
                else:
                    grads[id(p)] = pg

    # -- operators ----------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, 1.0 / other)
        return div(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return slice_(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def permute(self, *axes):
        return permute(self, axes)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _same_shape(op, a, b):
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# -- elementwise --------------------------------------------------------------

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("add", a, b)
    return Tensor._make(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("sub", a, b)
    return Tensor._make(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("mul", a, b)
    return Tensor._make(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("div", a, b)
    out = a.data / b.data
    return Tensor._make(out, (a, b), lambda g: (g / b.data, -g * out / b.data))


def scale(a, c: float):
    a = as_tensor(a)
    c = a.data.dtype.type(c)
    return Tensor._make(a.data * c, (a,), lambda g: (g * c,))


def add_scalar(a, c: float):
    a = as_tensor(a)
    return Tensor._make(a.data + a.data.dtype.type(c), (a,), lambda g: (g,))


def exp(a):
    out = np.exp(a.data)
    return Tensor._make(out, (a,), lambda g: (g * out,))


def log(a):
    return Tensor._make(np.log(a.data), (a,), lambda g: (g / a.data,))


def abs_(a):
    # sign(0) = 0: the subgradient at the kink is taken as zero
    return Tensor._make(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def square(a):
    return Tensor._make(a.data * a.data, (a,), lambda g: (2 * g * a.data,))


def sqrt(a):
    out = np.sqrt(a.data)
    return Tensor._make(out, (a,), lambda g: (g * 0.5 / out,))


def maximum(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("maximum", a, b)
    take_a = a.data >= b.data
    return Tensor._make(
        np.where(take_a, a.data, b.data), (a, b), lambda g: (g * take_a, g * ~take_a)
    )


def where(cond, a, b):
    """Select ``a`` where ``cond`` (a constant boolean array) holds, else ``b``."""
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("where", a, b)
    cond = np.asarray(cond, dtype=bool)
    if cond.shape != a.shape:
        raise ShapeError(f"where: condition shape {cond.shape} vs {a.shape}")
    zero = a.data.dtype.type(0)
    return Tensor._make(
        np.where(cond, a.data, b.data),
        (a, b),
        lambda g: (np.where(cond, g, zero), np.where(cond, zero, g)),
    )


def relu(a):
    # left subgradient at 0
    pos = a.data > 0
    return Tensor._make(a.data * pos, (a,), lambda g: (g * pos,))


_GELU_K = np.sqrt(2.0 / np.pi)


def gelu(a):
    """tanh approximation of GELU."""
    x = a.data
    k = x.dtype.type(_GELU_K)
    c = x.dtype.type(0.044715)
    inner = k * (x + c * x ** 3)
    t = np.tanh(inner)
    out = 0.5 * x * (1 + t)

    def backward(g):
        dinner = k * (1 + 3 * c * x * x)
        return (g * (0.5 * (1 + t) + 0.5 * x * (1 - t * t) * dinner),)

    return Tensor._make(out, (a,), backward)


def sigmoid(a):
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return Tensor._make(out, (a,), lambda g: (g * out * (1 - out),))


def softplus(a):
    x = a.data
    out = np.logaddexp(0, x).astype(x.dtype, copy=False)
    sig = 0.5 * (1 + np.tanh(0.5 * x))
    return Tensor._make(out, (a,), lambda g: (g * sig,))


def tanh(a):
    out = np.tanh(a.data)
    return Tensor._make(out, (a,), lambda g: (g * (1 - out * out),))


# -- reductions ---------------------------------------------------------------

def sum_(a, axis=None, keepdims=False):
    out = np.sum(a.data, axis=axis, keepdims=keepdims)
    if not isinstance(out, np.ndarray):
        out = np.asarray(out, dtype=a.data.dtype)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return Tensor._make(out, (a,), backward)


def mean(a, axis=None, keepdims=False):
    n = a.data.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return scale(sum_(a, axis, keepdims), 1.0 / n)


def max_(a, axis=None, keepdims=False):
    """Maximum; ties share the gradient equally."""
    out = np.max(a.data, axis=axis, keepdims=True)
    hit = a.data == out
    count = np.sum(hit, axis=axis, keepdims=True)
    res = out if keepdims else np.squeeze(out, axis=axis) if axis is not None else out.reshape(())

    def backward(g):
        if not keepdims:
            g = np.reshape(g, out.shape)
        return (g * hit / count,)

    return Tensor._make(np.asarray(res), (a,), backward)


# -- shape ops ----------------------------------------------------------------

def reshape(a, shape):
    shape = tuple(shape)
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}") from exc
    return Tensor._make(out, (a,), lambda g: (g.reshape(a.shape),))


def permute(a, axes):
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"permute: axes {axes} invalid for shape {a.shape}")
    inv = tuple(np.argsort(axes))
    return Tensor._make(
        np.ascontiguousarray(a.data.transpose(axes)), (a,), lambda g: (g.transpose(inv),)
    )


def expand(a, shape):
    """Explicit broadcast of ``a`` to ``shape`` (numpy rules)."""
    shape = tuple(shape)
    try:
        out = np.broadcast_to(a.data, shape)
    except ValueError as exc:
        raise ShapeError(f"expand: cannot broadcast {a.shape} to {shape}") from exc
    lead = len(shape) - a.ndim
    keep = tuple(i + lead for i, s in enumerate(a.shape) if s == 1 and shape[i + lead] != 1)

    def backward(g):
        g = g.sum(axis=tuple(range(lead)) + keep, keepdims=True)
        return (g.reshape(a.shape),)

    return Tensor._make(np.ascontiguousarray(out), (a,), backward)


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    ax = axis % tensors[0].ndim
    for t in tensors[1:]:
        ref, cur = list(tensors[0].shape), list(t.shape)
        ref[ax] = cur[ax] = 0
        if ref != cur:
            raise ShapeError(f"concat: shape mismatch {tensors[0].shape} vs {t.shape} on axis {axis}")
    sizes = [t.shape[ax] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in tensors], axis=ax)
    return Tensor._make(out, tensors, lambda g: tuple(np.split(g, splits, axis=ax)))


def slice_(a, idx):
    out = a.data[idx]

    def backward(g):
        full = np.zeros_like(a.data)
        full[idx] = g
        return (full,)

    return Tensor._make(np.ascontiguousarray(out), (a,), backward)


def take(a, index, axis):
    """Gather along ``axis`` with an integer index array (repeats allowed)."""
    index = np.asarray(index)
    out = np.take(a.data, index, axis=axis)

    def backward(g):
        full = np.zeros_like(a.data)
        ax = axis % a.ndim
        moved = np.moveaxis(full, ax, 0)
        gm = np.moveaxis(g, tuple(range(ax, ax + index.ndim)), tuple(range(index.ndim)))
        np.add.at(moved, index, gm)
        return (full,)

    return Tensor._make(out, (a,), backward)


# -- linear algebra -----------------------------------------------------------

def matmul(a, b):
    """(..., m, k) @ (..., k, n) with identical leading dims."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: shape mismatch {a.shape} vs {b.shape}")
    out = a.data @ b.data
    return Tensor._make(
        out, (a, b),
        lambda g: (g @ np.swapaxes(b.data, -1, -2), np.swapaxes(a.data, -1, -2) @ g),
    )


def linear(x, weight, bias=None):
    """``x @ weight + bias`` for x of shape (..., in), weight (in, out), bias (out,)."""
    if x.shape[-1] != weight.shape[0] or weight.ndim != 2:
        raise ShapeError(f"linear: shape mismatch {x.shape} vs {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[1],):
        raise ShapeError(f"linear: bias shape {bias.shape} vs {weight.shape}")
    x2 = x.data.reshape(-1, x.shape[-1])
    out = x2 @ weight.data
    if bias is not None:
        out = out + bias.data
    out = out.reshape(x.shape[:-1] + (weight.shape[1],))
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = (g2 @ weight.data.T).reshape(x.shape)
        gw = x2.T @ g2
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return Tensor._make(out, parents, backward)


def softmax(a, axis=-1):
    x = a.data
    e = np.exp(x - np.max(x, axis=axis, keepdims=True))
    out = e / np.sum(e, axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - np.sum(g * out, axis=axis, keepdims=True)),)

    return Tensor._make(out, (a,), backward)


def log_softmax(a, axis=-1):
    x = a.data
    shifted = x - np.max(x, axis=axis, keepdims=True)
    lse = np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))
    out = shifted - lse
    soft = np.exp(out)

    def backward(g):
        return (g - soft * np.sum(g, axis=axis, keepdims=True),)

    return Tensor._make(out, (a,), backward)


def layer_norm(a, gamma, beta, eps=1e-5):
    """Normalize over the last axis, then scale and shift."""
    d = a.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm: affine shapes {gamma.shape}, {beta.shape} vs feature dim {d}")
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def backward(g):
        gh = g * gamma.data
        gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                    - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        red = tuple(range(a.ndim - 1))
        return gx, (g * xhat).sum(axis=red), g.sum(axis=red)

    return Tensor._make(out.astype(x.dtype, copy=False), (a, gamma, beta), backward)


def batch_norm(a, gamma, beta, running_mean, running_var, training, momentum=0.1, eps=1e-5):
    """Per-channel normalization of (B, C, H, W) input.

    ``running_mean``/``running_var`` are numpy arrays updated in place when
    training (unbiased variance, ``momentum`` weight on the new batch).
    """
    if a.ndim != 4 or gamma.shape != (a.shape[1],) or beta.shape != (a.shape[1],):
        raise ShapeError(f"batch_norm: input {a.shape} vs affine {gamma.shape}, {beta.shape}")
    x = a.data
    C = x.shape[1]
    g_ = gamma.data.reshape(1, C, 1, 1)
    b_ = beta.data.reshape(1, C, 1, 1)
    if not training:
        inv = 1.0 / np.sqrt(running_var + eps)
        scale_ = (gamma.data * inv).astype(x.dtype).reshape(1, C, 1, 1)
        xhat = (x - running_mean.reshape(1, C, 1, 1).astype(x.dtype)) * inv.reshape(1, C, 1, 1).astype(x.dtype)
        out = x * scale_ + (b_ - running_mean.reshape(1, C, 1, 1).astype(x.dtype) * scale_)

        def backward_eval(g):
            return g * scale_, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))

        return Tensor._make(out, (a, gamma, beta), backward_eval)

    m = x.shape[0] * x.shape[2] * x.shape[3]
    mu = x.mean(axis=(0, 2, 3), keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=(0, 2, 3), keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * g_ + b_
    if grad_enabled():
        running_mean *= 1 - momentum
        running_mean += momentum * mu.reshape(C)
        running_var *= 1 - momentum
        running_var += momentum * var.reshape(C) * (m / max(m - 1, 1))

    def backward(g):
        gh = g * g_
        gx = inv * (gh - gh.mean(axis=(0, 2, 3), keepdims=True)
                    - xhat * (gh * xhat).mean(axis=(0, 2, 3), keepdims=True))
        return gx, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))

    return Tensor._make(out.astype(x.dtype, copy=False), (a, gamma, beta), backward)


# -- spatial ops --------------------------------------------------------------

def conv2d(x, weight, bias=None, stride=1, padding=0):
    """Cross-correlation of (B, C, H, W) with weight (O, C, kh, kw), zero padding."""
    from .._kernels import col2im, im2col

    if x.ndim != 4 or weight.ndim != 4 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"conv2d: shape mismatch {x.shape} vs {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeError(f"conv2d: bias shape {bias.shape} vs {weight.shape}")
    B, C, H, W = x.shape
    O, _, kh, kw = weight.shape
    Ho = (H + 2 * padding - kh) // stride + 1
    Wo = (W + 2 * padding - kw) // stride + 1
    if Ho <= 0 or Wo <= 0:
        raise ShapeError(f"conv2d: kernel {weight.shape} too large for input {x.shape}")
    L = Ho * Wo
    if kh == 1 and kw == 1 and padding == 0:
        xs = x.data[:, :, ::stride, ::stride] if stride > 1 else x.data
        cols = np.ascontiguousarray(xs).reshape(B, C, L)
    else:
        cols = im2col(np.ascontiguousarray(x.data), kh, kw, stride, padding)
    wmat = weight.data.reshape(O, -1)
    out = np.matmul(wmat, cols)
    if bias is not None:
        out += bias.data[:, None]
    out = out.reshape(B, O, Ho, Wo)
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        g3 = g.reshape(B, O, L)
        gw = np.matmul(g3, cols.transpose(0, 2, 1)).sum(axis=0).reshape(weight.shape)
        gcols = np.matmul(wmat.T, g3)
        if kh == 1 and kw == 1 and padding == 0:
            gsub = gcols.reshape(B, C, Ho, Wo)
            if stride > 1:
                gx = np.zeros_like(x.data)
                gx[:, :, ::stride, ::stride] = gsub
            else:
                gx = gsub
        else:
            gx = col2im(gcols, B, C, H, W, kh, kw, stride, padding)
        if bias is None:
            return gx, gw
        return gx, gw, g3.sum(axis=(0, 2))

    return Tensor._make(out, parents, backward)


def upsample2x(x):
    """Nearest-neighbour upsampling of the two trailing axes by 2."""
    out = x.data.repeat(2, axis=-2).repeat(2, axis=-1)

    def backward(g):
        s = g.shape
        g = g.reshape(s[:-2] + (s[-2] // 2, 2, s[-1] // 2, 2))
        return (g.sum(axis=(-3, -1)),)

    return Tensor._make(out, (x,), backward)


__all__ = [
    "NumericError", "ShapeError", "Tensor", "abs_", "add", "add_scalar", "as_tensor",
    "batch_norm", "concat", "conv2d", "div", "exp", "expand", "gelu", "grad_enabled",
    "layer_norm", "linear", "log", "log_softmax", "matmul", "max_", "maximum", "mean",
    "mul", "no_grad", "permute", "relu", "reshape", "scale", "sigmoid", "slice_", "softmax",
    "softplus", "sqrt", "square", "sub", "sum_", "take", "tanh", "upsample2x", "where",
]

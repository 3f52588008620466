"""Parameter containers and the layers the model is assembled from."""

from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from ..errors import ConfigError
from .tensor import ShapeError, Tensor


class Parameter(Tensor):
    __slots__ = ()

    def __init__(self, data, dtype=np.float32):
        super().__init__(np.array(data, dtype=dtype), requires_grad=True)


class Module:
    """Base class. Parameters, buffers and submodules are discovered from
    instance attributes in assignment order, which fixes parameter names."""

    training = True

    def named_parameters(self, prefix=""):
        for name, value in vars(self).items():
            yield from _walk(value, prefix + name, "param")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix=""):
        for name, value in vars(self).items():
            yield from _walk(value, prefix + name, "buffer")

    def modules(self):
        yield self
        for value in vars(self).values():
            items = value if isinstance(value, (list, tuple)) else [value]
            for item in items:
                if isinstance(item, Module):
                    yield from item.modules()

    def train(self, mode=True):
        for m in self.modules():
            m.training = mode
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def to(self, dtype):
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        for m in self.modules():
            for k, v in vars(m).items():
                if isinstance(v, Buffer):
                    v.data = v.data.astype(dtype)
        return self

    def state_dict(self):
        out = {name: p.data for name, p in self.named_parameters()}
        out.update({name: b.data for name, b in self.named_buffers()})
        return out

    def load_state_dict(self, state):
        expected = dict(self.named_parameters())
        buffers = dict(self.named_buffers())
        missing = (set(expected) | set(buffers)) - set(state)
        if missing:
            raise KeyError(f"missing entries in state: {sorted(missing)[:5]}")
        for name, p in expected.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise ShapeError(f"{name}: checkpoint shape {arr.shape} vs model {p.shape}")
            p.data = arr.astype(p.dtype, copy=True)
        for name, b in buffers.items():
            arr = np.asarray(state[name])
            if arr.shape != b.data.shape:
                raise ShapeError(f"{name}: checkpoint shape {arr.shape} vs model {b.data.shape}")
            b.data[...] = arr

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class Buffer:
    """Non-trainable state saved alongside parameters (e.g. running stats)."""

    __slots__ = ("data",)

    def __init__(self, data):
        self.data = data


def _walk(value, name, kind):
    if kind == "param" and isinstance(value, Parameter):
        yield name, value
    elif kind == "buffer" and isinstance(value, Buffer):
        yield name, value
    elif isinstance(value, Module):
        yield from (value.named_parameters(name + ".") if kind == "param" else value.named_buffers(name + "."))
    elif isinstance(value, (list, tuple)):
        for i, item in enumerate(value):
            yield from _walk(item, f"{name}{i}" if name.endswith("block") else f"{name}.{i}", kind)


def kaiming(rng, shape, fan_in, dtype=np.float32):
    return (rng.standard_normal(shape) * math.sqrt(2.0 / fan_in)).astype(dtype)


def xavier(rng, shape, fan_in, fan_out, dtype=np.float32):
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, shape).astype(dtype)


class Linear(Module):
    def __init__(self, rng, d_in, d_out, bias=True, zero=False):
        w = np.zeros((d_in, d_out)) if zero else xavier(rng, (d_in, d_out), d_in, d_out)
        self.weight = Parameter(w)
        self.bias = Parameter(np.zeros(d_out)) if bias else None

    def forward(self, x):
        return T.linear(x, self.weight, self.bias)


class Conv2d(Module):
    def __init__(self, rng, c_in, c_out, k, stride=1, padding=None, bias=True, zero=False):
        padding = k // 2 if padding is None else padding
        shape = (c_out, c_in, k, k)
        self.weight = Parameter(np.zeros(shape) if zero else kaiming(rng, shape, c_in * k * k))
        self.bias = Parameter(np.zeros(c_out)) if bias else None
        self.stride = stride
        self.padding = padding

    def forward(self, x):
        return T.conv2d(x, self.weight, self.bias, self.stride, self.padding)


class BatchNorm2d(Module):
    def __init__(self, channels, momentum=0.1, eps=1e-5):
        self.weight = Parameter(np.ones(channels))
        self.bias = Parameter(np.zeros(channels))
        self.running_mean = Buffer(np.zeros(channels, dtype=np.float32))
        self.running_var = Buffer(np.ones(channels, dtype=np.float32))
        self.momentum = momentum
        self.eps = eps

    def forward(self, x):
        return T.batch_norm(x, self.weight, self.bias, self.running_mean.data,
                            self.running_var.data, self.training, self.momentum, self.eps)


class LayerNorm(Module):
    def __init__(self, dim, eps=1e-5):
        self.weight = Parameter(np.ones(dim))
        self.bias = Parameter(np.zeros(dim))
        self.eps = eps

    def forward(self, x):
        return T.layer_norm(x, self.weight, self.bias, self.eps)


def attention(q, k, v, heads):
    """Multi-head scaled dot-product attention on (B, T, d) projections."""
    B, n_tok, d = q.shape
    if d % heads:
        raise ConfigError(f"token dim {d} not divisible by {heads} heads")
    dh = d // heads

    def split(t):
        return T.permute(T.reshape(t, (B, n_tok, heads, dh)), (0, 2, 1, 3))

    qh, kh, vh = split(q), split(k), split(v)
    scores = T.scale(T.matmul(qh, T.permute(kh, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
    weights = T.softmax(scores, axis=-1)
    ctx = T.matmul(weights, vh)
    return T.reshape(T.permute(ctx, (0, 2, 1, 3)), (B, n_tok, d))


class MultiHeadAttention(Module):
    def __init__(self, rng, dim, heads, zero_out=True):
        if dim % heads:
            raise ConfigError(f"token dim {dim} not divisible by {heads} heads")
        self.heads = heads
        self.qkv = Linear(rng, dim, 3 * dim)
        self.proj = Linear(rng, dim, dim, zero=zero_out)

    def forward(self, x):
        d = x.shape[-1]
        qkv = self.qkv(x)
        q, k, v = qkv[..., :d], qkv[..., d:2 * d], qkv[..., 2 * d:]
        return self.proj(attention(q, k, v, self.heads))


class FeedForward(Module):
    def __init__(self, rng, dim, ratio=4, zero_out=True):
        self.fc1 = Linear(rng, dim, ratio * dim)
        self.fc2 = Linear(rng, ratio * dim, dim, zero=zero_out)

    def forward(self, x):
        return self.fc2(T.gelu(self.fc1(x)))


class TransformerBlock(Module):
    """Pre-LN block: x + MSA(LN(x)), then + FFN(LN(.))."""

    def __init__(self, rng, dim, heads, ffn_ratio=4, zero_out=True):
        self.norm1 = LayerNorm(dim)
        self.attn = MultiHeadAttention(rng, dim, heads, zero_out)
        self.norm2 = LayerNorm(dim)
        self.ffn = FeedForward(rng, dim, ffn_ratio, zero_out)

    def forward(self, x):
        x = T.add(x, self.attn(self.norm1(x)))
        return T.add(x, self.ffn(self.norm2(x)))

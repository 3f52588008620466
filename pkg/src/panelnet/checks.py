"""Registry of float64 finite-difference checks for every op and composite block.

Each case builds a scalar function and its inputs from a seed. Inputs are
drawn away from kinks (abs, relu, max, BerHu threshold) so central
differences are valid.
"""

from __future__ import annotations

import numpy as np

from .autodiff import nn
from .autodiff import tensor as T
from .autodiff.gradcheck import gradient_check
from .autodiff.tensor import Tensor
from .losses import berhu_loss, boundary_to_horizon_depth, layout_loss, weighted_cross_entropy
from .model import BasicBlock, ConvBNReLU, GeometryEmbedding, PanelBlock, WindowBlock
from .panels import PanelConfig, fold_tensor, merge_tensor, partition_tensor

F64 = np.float64


def _t(a):
    return Tensor(np.asarray(a, dtype=F64), requires_grad=True)


def _away(rng, shape, gap=0.1, scale=1.0):
    """Normal samples pushed at least ``gap`` away from zero."""
    x = rng.standard_normal(shape) * scale
    return np.where(x >= 0, x + gap, x - gap)


def _weighted(out, w):
    return T.sum_(T.mul(out, Tensor(w)))


def _unary(op, sampler=None):
    def build(rng):
        x = sampler(rng) if sampler else rng.standard_normal((3, 4))
        w = rng.standard_normal(op(_t(x)).shape)
        return (lambda a: _weighted(op(a), w)), [x]
    return build


def _binary(op, sampler=None):
    def build(rng):
        a = rng.standard_normal((3, 4))
        b = sampler(rng) if sampler else rng.standard_normal((3, 4))
        w = rng.standard_normal((3, 4))
        return (lambda x, y: _weighted(op(x, y), w)), [a, b]
    return build


def _reduce(op):
    def build(rng):
        x = rng.standard_normal((3, 4, 5))
        w = rng.standard_normal((3, 5))
        return (lambda a: _weighted(op(a), w)), [x]
    return build


def _module_case(make, x_shape, zero_out=False):
    """Check input and parameter gradients of a module at float64."""

    def build(rng):
        mod = make(rng, zero_out).to(F64)
        mod.train()
        params = mod.parameters()
        x = rng.standard_normal(x_shape)
        w = rng.standard_normal(mod(_t(x)).shape)
        return (lambda a, *ps: _weighted(mod(a), w)), [x] + params
    return build


def _conv(stride, padding, k):
    def build(rng):
        x = rng.standard_normal((2, 3, 7, 6))
        wt = rng.standard_normal((4, 3, k, k)) * 0.3
        b = rng.standard_normal(4)
        out_shape = T.conv2d(_t(x), _t(wt), _t(b), stride, padding).shape
        w = rng.standard_normal(out_shape)
        return (lambda a, c, d: _weighted(T.conv2d(a, c, d, stride, padding), w)), [x, wt, b]
    return build


def _take(rng):
    x = rng.standard_normal((4, 5))
    idx = np.array([0, 2, 2, 4, 1])
    w = rng.standard_normal((4, 5))
    return (lambda a: _weighted(T.take(a, idx, axis=1), w)), [x]


def _expand(rng):
    w = rng.standard_normal((2, 3, 4))
    return (lambda a: _weighted(T.expand(T.reshape(a, (1, 3, 4)), (2, 3, 4)), w)), [
        rng.standard_normal((3, 4))]


def _slice(rng):
    w = rng.standard_normal((2, 2))
    return (lambda a: _weighted(T.slice_(a, (slice(1, 3), slice(None, None, 2))), w)), [
        rng.standard_normal((3, 4))]


def _where(rng):
    cond = rng.random((3, 4)) < 0.5
    w = rng.standard_normal((3, 4))
    return (lambda a, b: _weighted(T.where(cond, a, b), w)), [rng.standard_normal((3, 4)),
                                                                rng.standard_normal((3, 4))]


def _maximum(rng):
    a = rng.standard_normal((3, 4))
    b = a + _away(rng, (3, 4))
    w = rng.standard_normal((3, 4))
    return (lambda x, y: _weighted(T.maximum(x, y), w)), [a, b]


def _concat(rng):
    w = rng.standard_normal((2, 7))
    return (lambda a, b: _weighted(T.concat([a, b], axis=1), w)), [rng.standard_normal((2, 3)),
                                                                   rng.standard_normal((2, 4))]


def _matmul(rng):
    w = rng.standard_normal((2, 3, 5))
    return (lambda a, b: _weighted(T.matmul(a, b), w)), [rng.standard_normal((2, 3, 4)),
                                                         rng.standard_normal((2, 4, 5))]


def _linear(rng):
    w = rng.standard_normal((2, 3, 5))
    return (lambda x, a, b: _weighted(T.linear(x, a, b), w)), [
        rng.standard_normal((2, 3, 4)), rng.standard_normal((4, 5)), rng.standard_normal(5)]


def _layer_norm(rng):
    w = rng.standard_normal((3, 6))
    return (lambda x, g, b: _weighted(T.layer_norm(x, g, b), w)), [
        rng.standard_normal((3, 6)), rng.standard_normal(6), rng.standard_normal(6)]


def _batch_norm(rng):
    w = rng.standard_normal((4, 3, 2, 2))
    rm, rv = np.zeros(3), np.ones(3)
    return (lambda x, g, b: _weighted(T.batch_norm(x, g, b, rm, rv, training=True), w)), [
        rng.standard_normal((4, 3, 2, 2)), rng.standard_normal(3), rng.standard_normal(3)]


def _attention(rng):
    q, k, v = (rng.standard_normal((2, 5, 8)) for _ in range(3))
    w = rng.standard_normal((2, 5, 8))
    return (lambda a, b, c: _weighted(nn.attention(a, b, c, heads=2), w)), [q, k, v]


_PANEL = PanelConfig(4, 2, 8, 3)


def _partition(rng):
    w = rng.standard_normal((_PANEL.num_panels, 2, 3, 4))
    return (lambda x: _weighted(partition_tensor(x, _PANEL), w)), [rng.standard_normal((2, 3, 8))]


def _fold(rng):
    w = rng.standard_normal((2, 3, 8))
    return (lambda p: _weighted(fold_tensor(p, _PANEL), w)), [
        rng.standard_normal((_PANEL.num_panels, 2, 3, 4))]


def _merge(rng):
    w = rng.standard_normal((2, 3, 8))
    conf = rng.uniform(0.1, 1.0, (_PANEL.num_panels, 1, 3, 4))
    return (lambda p, c: _weighted(merge_tensor(p, c, _PANEL, uniform=False), w)), [
        rng.standard_normal((_PANEL.num_panels, 2, 3, 4)), conf]


def _berhu(rng):
    gt = rng.uniform(1, 4, (4, 5))
    e = _away(rng, (4, 5), gap=0.05, scale=0.5)
    c = 0.3
    # keep every |e| clear of the threshold
    e = np.where(np.abs(np.abs(e) - c) < 0.05, e * 1.5, e)
    mask = rng.random((4, 5)) < 0.8
    mask[0, 0] = True
    return (lambda p: berhu_loss(p, gt, mask, c=c)), [gt + e]


def _cross_entropy(rng):
    labels = rng.integers(0, 4, (3, 5))
    labels[0, 0] = 255
    weights = rng.uniform(0.5, 2.0, 4)
    return (lambda x: weighted_cross_entropy(x, labels, weights, axis=0)), [rng.standard_normal((4, 3, 5))]


def _horizon(rng):
    b = rng.uniform(1.8, 2.8, 6)
    w = rng.standard_normal(6)
    return (lambda x: _weighted(boundary_to_horizon_depth(x, 1.5), w)), [b]


def _layout(rng):
    gt_b = rng.uniform(1.8, 2.8, 6)
    pred_b = np.clip(gt_b + _away(rng, 6, gap=0.05, scale=0.1), 1.7, 2.9)
    return (lambda b, h: layout_loss(b, h, gt_b, 2.8, 1.5)), [pred_b, np.array([3.1])]


def _decode_stage(rng, zero_out):
    stage = ConvBNReLU(rng, 5, 3)

    class _Stage(nn.Module):
        def __init__(self):
            self.stage = stage

        def forward(self, x):
            skip = T.slice_(x, (slice(None), slice(0, 2)))
            return self.stage(T.upsample2x(T.concat([x, skip], axis=1)))

    return _Stage()


CHECKS = {
    "add": _binary(T.add),
    "sub": _binary(T.sub),
    "mul": _binary(T.mul),
    "div": _binary(T.div, lambda r: _away(r, (3, 4), gap=0.5)),
    "scale": _unary(lambda a: T.scale(a, -1.7)),
    "add_scalar": _unary(lambda a: T.add_scalar(a, 0.3)),
    "exp": _unary(T.exp),
    "log": _unary(T.log, lambda r: r.uniform(0.5, 2.0, (3, 4))),
    "abs": _unary(T.abs_, lambda r: _away(r, (3, 4))),
    "square": _unary(T.square),
    "sqrt": _unary(T.sqrt, lambda r: r.uniform(0.5, 2.0, (3, 4))),
    "maximum": _maximum,
    "where": _where,
    "relu": _unary(T.relu, lambda r: _away(r, (3, 4))),
    "gelu": _unary(T.gelu),
    "sigmoid": _unary(T.sigmoid),
    "softplus": _unary(T.softplus),
    "tanh": _unary(T.tanh),
    "sum": _reduce(lambda a: T.sum_(a, axis=1)),
    "mean": _reduce(lambda a: T.mean(a, axis=1)),
    "max": _reduce(lambda a: T.max_(a, axis=1)),
    "reshape": _unary(lambda a: T.reshape(T.reshape(a, (2, 6)), (3, 4))),
    "permute": _unary(lambda a: T.reshape(T.permute(T.reshape(a, (3, 2, 2)), (2, 0, 1)), (3, 4))),
    "expand": _expand,
    "concat": _concat,
    "slice": _slice,
    "take": _take,
    "matmul": _matmul,
    "linear": _linear,
    "softmax": _unary(lambda a: T.softmax(a, axis=-1)),
    "log_softmax": _unary(lambda a: T.log_softmax(a, axis=0)),
    "layer_norm": _layer_norm,
    "batch_norm": _batch_norm,
    "conv2d_3x3": _conv(1, 1, 3),
    "conv2d_3x3_stride2": _conv(2, 1, 3),
    "conv2d_1x1": _conv(1, 0, 1),
    "conv2d_7x7_stride2": _conv(2, 3, 7),
    "upsample2x": _unary(lambda a: T.upsample2x(a), lambda r: r.standard_normal((1, 2, 2, 3))),
    "attention": _attention,
    "partition": _partition,
    "fold": _fold,
    "merge": _merge,
    "window_block": _module_case(lambda r, z: WindowBlock(r, 2, 2, 4, 2, 2, zero_out=z), (3, 2, 2, 4)),
    "panel_block": _module_case(lambda r, z: PanelBlock(r, 4, 8, 2, zero_out=z), (4, 8)),
    "decode_stage": _module_case(_decode_stage, (2, 3, 2, 3)),
    "encoder_block": _module_case(lambda r, z: BasicBlock(r, 2, 3, 2), (2, 2, 4, 4)),
    "geometry_embedding": _module_case(lambda r, z: GeometryEmbedding(r, 3, hidden=4, zero_out=z),
                                       (2, 5, 2, 2)),
    "berhu": _berhu,
    "cross_entropy": _cross_entropy,
    "horizon_depth": _horizon,
    "layout_loss": _layout,
}

GROUPS = {
    "ops": [k for k in CHECKS if k not in ("window_block", "panel_block", "decode_stage",
                                           "encoder_block", "geometry_embedding", "berhu",
                                           "cross_entropy", "horizon_depth", "layout_loss")],
    "blocks": ["window_block", "panel_block", "decode_stage", "encoder_block", "geometry_embedding"],
    "losses": ["berhu", "cross_entropy", "horizon_depth", "layout_loss"],
}


def check(name: str, seed: int = 0, tol: float = 1e-3):
    rng = np.random.default_rng(seed)
    f, inputs = CHECKS[name](rng)
    inputs = [x if isinstance(x, Tensor) else _t(x) for x in inputs]
    return gradient_check(f, inputs, eps=1e-6, tol=tol, max_entries=40, rng=rng)


def run_checks(module=None, seeds=range(3)):
    """Yield ``(label, report)``; ``module`` is a case name, a group, or None for all."""
    if module is None:
        names = list(CHECKS)
    elif module in GROUPS:
        names = GROUPS[module]
    else:
        names = [module]
    for name in names:
        for seed in seeds:
            yield f"{name}[seed={seed}]", check(name, seed)

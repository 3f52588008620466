"""PanelNet: panel encoder with geometry embedding, Local2Global Transformer,
skip-connected decoder with a confidence head, and task heads."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .autodiff import tensor as T
from .autodiff.nn import (BatchNorm2d, ConfigError, Conv2d, Linear, Module, Parameter,
                          TransformerBlock)
from .autodiff.tensor import ShapeError, Tensor
from .geometry import panel_geometry_stack
from .panels import PanelConfig, merge_tensor, partition_tensor

TASKS = ("depth", "segmentation", "layout")
TOKEN_DIM = 512


def default_heads(dim: int) -> int:
    return 2 if dim <= 8 else 4


@dataclass
class ModelConfig:
    task: str = "depth"
    height: int = 512
    width: int = 1024
    interval: int = 128
    stride: int = 32
    stem_channels: int = 64
    stage_channels: tuple = (64, 128, 256, 512)
    stage_blocks: tuple = (3, 4, 6, 3)
    token_dim: int = TOKEN_DIM
    window_stages: tuple = ((1, 2), (2, 2), (4, 2))
    window_heads: tuple | None = None
    panel_blocks: int = 6
    panel_heads: int = 8
    panel_first: bool = False
    ffn_ratio: int = 4
    decoder_channels: tuple = (256, 256, 128, 64, 32, 32)
    geo_hidden: int = 64
    use_geometry: bool = True
    ref_panel_index: int = 0
    max_depth: float = 10.0
    num_classes: int = 4
    boundary_length: int = 1024
    head_hidden: int = 256
    merge_uniform: bool = False
    seed: int = 0

    def __post_init__(self):
        self.stage_channels = tuple(self.stage_channels)
        self.stage_blocks = tuple(self.stage_blocks)
        self.window_stages = tuple(tuple(s) for s in self.window_stages)
        self.decoder_channels = tuple(self.decoder_channels)
        if self.window_heads is not None:
            self.window_heads = tuple(self.window_heads)
        self.validate()

    @property
    def panel(self) -> PanelConfig:
        return PanelConfig(self.interval, self.stride, self.width, self.height)

    @property
    def num_panels(self) -> int:
        return self.width // self.stride

    @property
    def bottleneck_shape(self) -> tuple:
        """(C_b, H_b, W_b) of the reduced encoder output."""
        hb, wb = self.height // 32, self.interval // 32
        return self.token_dim // (hb * wb), hb, wb

    def stage_heads(self) -> tuple:
        cb = self.bottleneck_shape[0]
        if self.window_heads is not None:
            return self.window_heads
        return tuple(default_heads(p * p * cb) for p, _ in self.window_stages)

    @property
    def num_blocks(self) -> int:
        return sum(n for _, n in self.window_stages) + self.panel_blocks

    def validate(self):
        if self.task not in TASKS:
            raise ConfigError(f"unknown task {self.task!r}; expected one of {TASKS}")
        self.panel  # noqa: B018 - validates divisibility
        if self.height % 32 or self.interval % 32:
            raise ConfigError(f"panel size {self.height}x{self.interval} must be divisible by 32")
        hb, wb = self.height // 32, self.interval // 32
        if self.token_dim % (hb * wb):
            raise ConfigError(f"token dim {self.token_dim} not divisible by H_b*W_b = {hb * wb}")
        if len(self.stage_channels) != 4 or len(self.stage_blocks) != 4:
            raise ConfigError("encoder needs exactly four stages")
        if len(self.decoder_channels) != 6:
            raise ConfigError("decoder_channels needs 6 entries (1x1, four stages, final)")
        cb = self.token_dim // (hb * wb)
        heads = self.stage_heads()
        if len(heads) != len(self.window_stages):
            raise ConfigError("window_heads must match window_stages")
        for (p, _), h in zip(self.window_stages, heads):
            if hb % p or wb % p:
                raise ConfigError(f"window patch size {p} must divide H_b={hb} and W_b={wb}")
            if (p * p * cb) % h:
                raise ConfigError(f"window token dim {p * p * cb} not divisible by {h} heads")
        if self.token_dim % self.panel_heads:
            raise ConfigError(f"token dim {self.token_dim} not divisible by {self.panel_heads} heads")
        if self.task == "layout" and self.boundary_length % self.width:
            raise ConfigError(f"boundary length {self.boundary_length} must be a multiple of width {self.width}")
        if not 0 <= self.ref_panel_index < self.num_panels:
            raise ConfigError(f"reference panel {self.ref_panel_index} outside [0, {self.num_panels})")

    @property
    def out_channels(self) -> int:
        return self.num_classes if self.task == "segmentation" else 1

    @classmethod
    def desk(cls, **overrides):
        """Small CPU-trainable configuration."""
        base = dict(height=128, width=256, interval=64, stride=16, stem_channels=16,
                    stage_channels=(16, 32, 64, 128), stage_blocks=(1, 1, 1, 1),
                    window_stages=((1, 1), (2, 1)), panel_blocks=2,
                    decoder_channels=(64, 64, 32, 16, 8, 8), head_hidden=64,
                    boundary_length=256)
        base.update(overrides)
        return cls(**base)

    @classmethod
    def full(cls, **overrides):
        return cls(**overrides)

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    def with_(self, **changes):
        return replace(self, **changes)


# -- encoder ------------------------------------------------------------------

class ConvBNReLU(Module):
    def __init__(self, rng, c_in, c_out, k=3, stride=1, relu=True):
        self.conv = Conv2d(rng, c_in, c_out, k, stride, bias=False)
        self.bn = BatchNorm2d(c_out)
        self.relu = relu

    def forward(self, x):
        y = self.bn(self.conv(x))
        return T.relu(y) if self.relu else y


class BasicBlock(Module):
    def __init__(self, rng, c_in, c_out, stride):
        self.conv1 = Conv2d(rng, c_in, c_out, 3, stride, bias=False)
        self.bn1 = BatchNorm2d(c_out)
        self.conv2 = Conv2d(rng, c_out, c_out, 3, 1, bias=False)
        self.bn2 = BatchNorm2d(c_out)
        if stride != 1 or c_in != c_out:
            self.down = Conv2d(rng, c_in, c_out, 1, stride, padding=0, bias=False)
            self.down_bn = BatchNorm2d(c_out)
        else:
            self.down = None

    def forward(self, x):
        y = T.relu(self.bn1(self.conv1(x)))
        y = self.bn2(self.conv2(y))
        skip = x if self.down is None else self.down_bn(self.down(x))
        return T.relu(T.add(y, skip))


class Stage(Module):
    def __init__(self, rng, c_in, c_out, n_blocks, stride):
        self.block = [BasicBlock(rng, c_in if i == 0 else c_out, c_out, stride if i == 0 else 1)
                      for i in range(n_blocks)]

    def forward(self, x):
        for blk in self.block:
            x = blk(x)
        return x


class GeometryEmbedding(Module):
    """Per-pixel two-layer MLP on (x, y, z, x', y'), realised as 1x1 convs."""

    def __init__(self, rng, out_channels, hidden=64, zero_out=True):
        self.fc1 = Conv2d(rng, 5, hidden, 1, padding=0)
        self.fc2 = Conv2d(rng, hidden, out_channels, 1, padding=0, zero=zero_out)

    def forward(self, coords):
        if coords.shape[1] != 5:
            raise ShapeError(f"geometry embedding expects 5 coordinate channels, got {coords.shape}")
        return self.fc2(T.gelu(self.fc1(coords)))


class Encoder(Module):
    def __init__(self, rng, cfg: ModelConfig):
        c = cfg.stem_channels
        self.stem1 = ConvBNReLU(rng, 3, c, 3, 2)
        self.stem2 = ConvBNReLU(rng, c, c, 3, 2)
        widths = (c,) + cfg.stage_channels
        strides = (1, 2, 2, 2)
        self.stage1 = Stage(rng, widths[0], widths[1], cfg.stage_blocks[0], strides[0])
        self.stage2 = Stage(rng, widths[1], widths[2], cfg.stage_blocks[1], strides[1])
        self.stage3 = Stage(rng, widths[2], widths[3], cfg.stage_blocks[2], strides[2])
        self.stage4 = Stage(rng, widths[3], widths[4], cfg.stage_blocks[3], strides[3])
        self.reduce = Conv2d(rng, widths[4], cfg.bottleneck_shape[0], 1, padding=0)

    def forward(self, panels, geo=None):
        """Return ([f4, f8, f16, f32], f_b) for (N, 3, H, I) panels."""
        x = self.stem2(self.stem1(panels))
        if geo is not None:
            if geo.shape != x.shape:
                raise ShapeError(f"geometry embedding {geo.shape} vs stem output {x.shape}")
            x = T.add(x, geo)
        f4 = self.stage1(x)
        f8 = self.stage2(f4)
        f16 = self.stage3(f8)
        f32 = self.stage4(f16)
        return [f4, f8, f16, f32], self.reduce(f32)


# -- Local2Global Transformer ---------------------------------------------------

def patchify(x, p):
    """(N, C, H, W) -> (N, H*W/p^2, p*p*C) tokens of flattened p x p patches."""
    n, c, h, w = x.shape
    if h % p or w % p:
        raise ConfigError(f"patch size {p} must divide feature map {h}x{w}")
    t = T.reshape(x, (n, c, h // p, p, w // p, p))
    t = T.permute(t, (0, 2, 4, 1, 3, 5))
    return T.reshape(t, (n, (h // p) * (w // p), c * p * p))


def unpatchify(tokens, p, c, h, w):
    n = tokens.shape[0]
    t = T.reshape(tokens, (n, h // p, w // p, c, p, p))
    t = T.permute(t, (0, 3, 1, 4, 2, 5))
    return T.reshape(t, (n, c, h, w))


class WindowBlock(Module):
    """Attention among the p x p feature patches inside each panel."""

    def __init__(self, rng, channels, h, w, p, heads, ffn_ratio=4, zero_out=True):
        if h % p or w % p:
            raise ConfigError(f"patch size {p} must divide feature map {h}x{w}")
        self.p = p
        self.dim = p * p * channels
        self.num_tokens = (h // p) * (w // p)
        self.pos_embed = Parameter(np.zeros((self.num_tokens, self.dim)))
        self.block = TransformerBlock(rng, self.dim, heads, ffn_ratio, zero_out)

    def forward(self, x):
        n, c, h, w = x.shape
        tokens = patchify(x, self.p)
        tokens = T.add(tokens, T.expand(self.pos_embed, tokens.shape))
        return unpatchify(self.block(tokens), self.p, c, h, w)


class PanelBlock(Module):
    """Attention across the N panel tokens of one panorama."""

    def __init__(self, rng, num_panels, dim, heads, ffn_ratio=4, zero_out=True):
        self.pos_embed = Parameter(np.zeros((num_panels, dim)))
        self.block = TransformerBlock(rng, dim, heads, ffn_ratio, zero_out)

    def forward(self, tokens):
        if tokens.ndim != 2 or tokens.shape != self.pos_embed.shape:
            raise ShapeError(f"panel tokens {tokens.shape} vs expected {self.pos_embed.shape}")
        x = T.add(tokens, self.pos_embed)
        x = T.reshape(x, (1,) + x.shape)
        y = self.block(x)
        return T.reshape(y, tokens.shape)


class Local2Global(Module):
    def __init__(self, rng, cfg: ModelConfig, zero_out=True):
        cb, hb, wb = cfg.bottleneck_shape
        self.shape = (cb, hb, wb)
        self.panel_first = cfg.panel_first
        self.window = [
            WindowBlock(rng, cb, hb, wb, p, heads, cfg.ffn_ratio, zero_out)
            for (p, count), heads in zip(cfg.window_stages, cfg.stage_heads())
            for _ in range(count)
        ]
        self.panel = [PanelBlock(rng, cfg.num_panels, cfg.token_dim, cfg.panel_heads,
                                 cfg.ffn_ratio, zero_out)
                      for _ in range(cfg.panel_blocks)]

    def _windows(self, x):
        for blk in self.window:
            x = blk(x)
        return x

    def _panels(self, x):
        n = x.shape[0]
        tokens = T.reshape(x, (n, -1))
        for blk in self.panel:
            tokens = blk(tokens)
        return T.reshape(tokens, x.shape)

    def forward(self, fb):
        if fb.shape[1:] != self.shape:
            raise ShapeError(f"L2G input {fb.shape} vs bottleneck {self.shape}")
        if self.panel_first:
            return self._windows(self._panels(fb))
        return self._panels(self._windows(fb))


# -- decoder and heads ----------------------------------------------------------

class Decoder(Module):
    def __init__(self, rng, cfg: ModelConfig):
        d = cfg.decoder_channels
        skips = cfg.stage_channels[::-1]  # f32, f16, f8, f4
        self.inp = Conv2d(rng, cfg.bottleneck_shape[0], d[0], 1, padding=0)
        self.up1 = ConvBNReLU(rng, d[0] + skips[0], d[1])
        self.up2 = ConvBNReLU(rng, d[1] + skips[1], d[2])
        self.up3 = ConvBNReLU(rng, d[2] + skips[2], d[3])
        self.up4 = ConvBNReLU(rng, d[3] + skips[3], d[4])
        self.up5 = ConvBNReLU(rng, d[4], d[5])
        self.head = Conv2d(rng, d[5], cfg.out_channels, 1, padding=0)
        self.confidence = Conv2d(rng, d[5], 1, 1, padding=0)

    def features(self, x, skips):
        f4, f8, f16, f32 = skips
        x = self.inp(x)
        for up, skip in ((self.up1, f32), (self.up2, f16), (self.up3, f8), (self.up4, f4)):
            if skip.shape[2:] != x.shape[2:]:
                raise ShapeError(f"decoder map {x.shape} vs encoder skip {skip.shape}")
            x = up(T.upsample2x(T.concat([x, skip], axis=1)))
        return self.up5(T.upsample2x(x))

    def forward(self, x, skips):
        feat = self.features(x, skips)
        return feat, self.head(feat), T.sigmoid(self.confidence(feat))


class LayoutHeads(Module):
    """Floor boundary from column-pooled features, room height from global pooling."""

    def __init__(self, rng, channels, width, boundary_length, hidden=256):
        self.per_column = boundary_length // width
        self.boundary = Linear(rng, channels, self.per_column)
        self.height1 = Linear(rng, channels, hidden)
        self.height2 = Linear(rng, hidden, 1)

    def forward(self, feat):
        """``feat``: merged (C, H, W) features -> (boundary angles (L,), height (1,), clamped count)."""
        c, h, w = feat.shape
        cols = T.permute(T.mean(feat, axis=1), (1, 0))  # (W, C)
        raw = T.reshape(self.boundary(cols), (w * self.per_column,))
        angles = T.add_scalar(T.scale(T.sigmoid(raw), math.pi / 2), math.pi / 2)
        lo, hi = math.pi / 2 + 1e-4, math.pi - 1e-4
        bad = (angles.data <= lo) | (angles.data >= hi)
        if bad.any():
            clamped = np.clip(angles.data, lo, hi).astype(angles.dtype)
            angles = T.where(~bad, angles, Tensor(clamped))
        pooled = T.reshape(T.mean(cols, axis=0), (1, c))
        height = T.softplus(self.height2(T.relu(self.height1(pooled))))
        return angles, T.reshape(height, (1,)), int(bad.sum())


class PanelNet(Module):
    def __init__(self, cfg: ModelConfig, rng=None, zero_out=True):
        cfg.validate()
        rng = rng if rng is not None else np.random.default_rng(cfg.seed)
        self.cfg = cfg
        self.geometry = GeometryEmbedding(rng, cfg.stem_channels, cfg.geo_hidden) if cfg.use_geometry else None
        self.encoder = Encoder(rng, cfg)
        self.l2g = Local2Global(rng, cfg, zero_out)
        self.decoder = Decoder(rng, cfg)
        self.layout = (LayoutHeads(rng, cfg.decoder_channels[-1], cfg.width, cfg.boundary_length,
                                   cfg.head_hidden) if cfg.task == "layout" else None)
        self._coords = None
        if cfg.task == "depth":
            # start predictions near 3 m instead of max_depth / 2
            prior = 3.0 / cfg.max_depth
            self.decoder.head.bias.data[:] = math.log(prior / (1 - prior))

    def coords(self, dtype):
        if self._coords is None or self._coords.dtype != dtype:
            cfg = self.cfg
            grid = panel_geometry_stack(cfg.interval, cfg.stride, cfg.width, cfg.height,
                                        cfg.ref_panel_index, sample_stride=4)
            self._coords = Tensor(grid.astype(dtype))
        return self._coords

    def geometry_embedding(self, dtype=np.float32):
        if self.geometry is None:
            return None
        return self.geometry(self.coords(dtype))

    def encode(self, panels):
        cfg = self.cfg
        if panels.shape[2] % 32 or panels.shape[3] % 32:
            raise ConfigError(f"panel size {panels.shape[2:]} must be divisible by 32")
        return self.encoder(panels, self.geometry_embedding(panels.dtype))

    def forward(self, rgb, uniform=None):
        """Run one panorama ``rgb`` (3, H, W). Returns a dict of tensors."""
        cfg = self.cfg
        uniform = cfg.merge_uniform if uniform is None else uniform
        rgb = rgb if isinstance(rgb, Tensor) else Tensor(np.asarray(rgb, dtype=np.float32))
        panels = partition_tensor(rgb, cfg.panel)
        skips, fb = self.encode(panels)
        feat, out, conf = self.decoder(self.l2g(fb), skips)
        result = {"confidence": conf, "panel_output": out}
        if cfg.task == "depth":
            depth = T.scale(T.sigmoid(out), cfg.max_depth)
            result["panel_depth"] = depth
            result["depth"] = merge_tensor(depth, conf, cfg.panel, uniform)
        elif cfg.task == "segmentation":
            result["logits"] = merge_tensor(out, conf, cfg.panel, uniform)
        else:
            merged = merge_tensor(feat, conf, cfg.panel, uniform)
            boundary, height, clamped = self.layout(merged)
            result.update(boundary=boundary, room_height=height, clamped=clamped)
        return result

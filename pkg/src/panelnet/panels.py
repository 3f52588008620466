"""Circular vertical panels: partition an ERP raster and merge predictions back."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ._kernels import fold_columns
from .autodiff import tensor as T
from .errors import ConfigError, NumericError


class MergeError(NumericError):
    pass


@dataclass(frozen=True)
class PanelConfig:
    interval: int
    stride: int
    width: int
    height: int

    def __post_init__(self):
        if min(self.interval, self.stride, self.width, self.height) <= 0:
            raise ConfigError(f"panel config values must be positive: {self}")
        if self.width % self.stride:
            raise ConfigError(f"stride {self.stride} does not divide width {self.width}")
        if self.interval % self.stride:
            raise ConfigError(f"stride {self.stride} does not divide interval {self.interval}")
        if self.interval > self.width:
            raise ConfigError(f"interval {self.interval} exceeds width {self.width}")

    @property
    def num_panels(self) -> int:
        return self.width // self.stride

    @property
    def multiplicity(self) -> int:
        return self.interval // self.stride

    def column_index(self) -> np.ndarray:
        """(N, I) table: ERP column of panel n, local column j."""
        n = np.arange(self.num_panels)[:, None]
        return (n * self.stride + np.arange(self.interval)[None, :]) % self.width


@dataclass
class PanelSet:
    panels: np.ndarray  # (N, C, H, I)
    config: PanelConfig

    def __post_init__(self):
        cfg = self.config
        if self.panels.ndim != 4 or self.panels.shape[0] != cfg.num_panels \
                or self.panels.shape[2:] != (cfg.height, cfg.interval):
            raise ConfigError(
                f"panel array {self.panels.shape} does not match {cfg.num_panels} panels of "
                f"{cfg.height}x{cfg.interval}")

    def __len__(self):
        return self.panels.shape[0]

    def __getitem__(self, n):
        return self.panels[n]


def _check_erp(erp, cfg):
    if erp.ndim != 3 or erp.shape[1:] != (cfg.height, cfg.width):
        raise ConfigError(f"ERP shape {erp.shape} does not match {cfg.height}x{cfg.width}")


def partition_erp(erp: np.ndarray, cfg: PanelConfig) -> PanelSet:
    """Cut a (C, H, W) ERP into N = W/S panels; panel n column j is ERP column (n*S + j) mod W."""
    erp = np.asarray(erp)
    _check_erp(erp, cfg)
    panels = erp[:, :, cfg.column_index()]  # (C, H, N, I)
    return PanelSet(np.ascontiguousarray(panels.transpose(2, 0, 1, 3)), cfg)


def coverage(cfg: PanelConfig) -> np.ndarray:
    """Number of panels covering each ERP column."""
    counts = np.zeros(cfg.width, dtype=np.int64)
    for cols in cfg.column_index():
        counts[cols] += 1
    return counts


def merge_panels(preds, confidences=None, cfg: PanelConfig | None = None, uniform=False) -> np.ndarray:
    """Weighted average of overlapping panel predictions on the ERP.

    Weights are the confidences, or 1 when ``confidences`` is None or
    ``uniform`` is set. Accumulation runs in float64 in ascending panel order.
    """
    if isinstance(preds, PanelSet):
        cfg = cfg or preds.config
        preds = preds.panels
    if isinstance(confidences, PanelSet):
        confidences = confidences.panels
    if cfg is None:
        raise ConfigError("merge_panels needs a PanelConfig")
    preds = np.asarray(preds)
    PanelSet(preds, cfg)
    out_dtype = preds.dtype if preds.dtype.kind == "f" else np.float64
    p64 = preds.astype(np.float64)
    if confidences is None or uniform:
        num = fold_columns(np.ascontiguousarray(p64), cfg.width, cfg.stride)
        den = np.full((1,) + num.shape[1:], float(cfg.multiplicity))
    else:
        w = np.asarray(confidences, dtype=np.float64)
        if w.shape != (preds.shape[0], 1) + preds.shape[2:]:
            raise ConfigError(f"confidence shape {w.shape} vs predictions {preds.shape}")
        num = fold_columns(np.ascontiguousarray(p64 * w), cfg.width, cfg.stride)
        den = fold_columns(np.ascontiguousarray(w), cfg.width, cfg.stride)
    if np.any(den <= 0):
        raise MergeError("zero total confidence at some ERP pixel")
    return (num / den).astype(out_dtype)


# -- differentiable versions ----------------------------------------------------

def partition_tensor(erp: T.Tensor, cfg: PanelConfig) -> T.Tensor:
    """Autodiff partition of a (C, H, W) tensor into (N, C, H, I)."""
    _check_erp(erp.data, cfg)
    idx = cfg.column_index()
    out = np.ascontiguousarray(erp.data[:, :, idx].transpose(2, 0, 1, 3))

    def backward(g):
        return (fold_columns(np.ascontiguousarray(g), cfg.width, cfg.stride),)

    return T.Tensor._make(out, (erp,), backward)


def fold_tensor(panels: T.Tensor, cfg: PanelConfig) -> T.Tensor:
    """Autodiff circular sum of (N, C, H, I) panels onto a (C, H, W) canvas."""
    PanelSet(panels.data, cfg)
    out = fold_columns(np.ascontiguousarray(panels.data), cfg.width, cfg.stride)
    idx = cfg.column_index()

    def backward(g):
        return (np.ascontiguousarray(g[:, :, idx].transpose(2, 0, 1, 3)),)

    return T.Tensor._make(out, (panels,), backward)


def merge_tensor(preds: T.Tensor, confidences: T.Tensor | None, cfg: PanelConfig,
                 uniform=False) -> T.Tensor:
    """Differentiable counterpart of :func:`merge_panels`."""
    if confidences is None or uniform:
        return T.scale(fold_tensor(preds, cfg), 1.0 / cfg.multiplicity)
    w = T.expand(confidences, preds.shape)
    num = fold_tensor(T.mul(preds, w), cfg)
    den = fold_tensor(w, cfg)
    if np.any(den.data <= 0):
        raise MergeError("zero total confidence at some ERP pixel")
    return T.div(num, den)

"""Evaluation metrics for depth, segmentation and cuboid layouts."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass

import numpy as np

from .errors import DataError
from .losses import boundary_to_horizon_depth

CSV_HEADER = ("step", "mre", "mae", "rmse", "rmse_log", "d1", "d2", "d3", "miou", "macc", "iou3d")


class MetricError(DataError):
    pass


@dataclass
class DepthMetrics:
    mre: float
    mae: float
    rmse: float
    rmse_log: float
    delta1: float
    delta2: float
    delta3: float
    log_excluded: int = 0


def valid_mask(gt) -> np.ndarray:
    return np.asarray(gt) > 0


def depth_metrics(pred, gt, mask=None) -> DepthMetrics:
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    mask = valid_mask(gt) if mask is None else np.asarray(mask, dtype=bool) & valid_mask(gt)
    if not mask.any():
        raise MetricError("no valid ground-truth pixels")
    p, g = pred[mask], gt[mask]
    diff = p - g
    loggable = p > 0
    excluded = int((~loggable).sum())
    if loggable.any():
        rmse_log = math.sqrt(np.mean((np.log(p[loggable]) - np.log(g[loggable])) ** 2))
    else:
        rmse_log = float("nan")
    # non-positive predictions count as misses for every threshold
    ratio = np.full(p.shape, np.inf)
    ratio[loggable] = np.maximum(p[loggable] / g[loggable], g[loggable] / p[loggable])
    return DepthMetrics(
        mre=float(np.mean(np.abs(diff) / g)),
        mae=float(np.mean(np.abs(diff))),
        rmse=math.sqrt(float(np.mean(diff ** 2))),
        rmse_log=rmse_log,
        delta1=float(np.mean(ratio < 1.25)),
        delta2=float(np.mean(ratio < 1.25 ** 2)),
        delta3=float(np.mean(ratio < 1.25 ** 3)),
        log_excluded=excluded,
    )


def confusion_matrix(pred, gt, num_classes, ignore=255) -> np.ndarray:
    pred = np.asarray(pred).reshape(-1).astype(np.int64)
    gt = np.asarray(gt).reshape(-1).astype(np.int64)
    keep = gt != ignore
    pred, gt = pred[keep], gt[keep]
    return np.bincount(gt * num_classes + pred, minlength=num_classes ** 2).reshape(num_classes, num_classes)


def seg_metrics(pred, gt, num_classes, ignore=255):
    """(mIoU, mAcc) averaged over the classes present in ``gt``."""
    cm = confusion_matrix(pred, gt, num_classes, ignore)
    tp = np.diag(cm).astype(np.float64)
    gt_count = cm.sum(axis=1)
    pred_count = cm.sum(axis=0)
    present = gt_count > 0
    if not present.any():
        raise MetricError("no labelled pixels")
    iou = tp[present] / (gt_count[present] + pred_count[present] - tp[present])
    acc = tp[present] / gt_count[present]
    return float(iou.mean()), float(acc.mean())


@dataclass(frozen=True)
class Cuboid:
    """Axis-aligned box given by its min and max corners (meters)."""

    lo: tuple
    hi: tuple

    @property
    def volume(self) -> float:
        return float(np.prod(np.subtract(self.hi, self.lo)))


def cuboid_3diou(a: Cuboid, b: Cuboid) -> float:
    if a.volume <= 0 or b.volume <= 0:
        raise MetricError("degenerate cuboid with non-positive volume")
    lo = np.maximum(a.lo, b.lo)
    hi = np.minimum(a.hi, b.hi)
    inter = float(np.prod(np.clip(hi - lo, 0, None)))
    return inter / (a.volume + b.volume - inter)


def fit_cuboid(boundary, camera_height, room_height) -> Cuboid:
    """Axis-aligned room box around the camera from a floor boundary.

    Wall distance toward each cardinal direction is the median over the
    columns whose azimuth lies within 45 degrees of that direction.
    """
    boundary = np.asarray(boundary, dtype=np.float64)
    w = boundary.shape[0]
    phi = 2 * np.pi * (np.arange(w) + 0.5) / w - np.pi
    d = boundary_to_horizon_depth(boundary, camera_height)
    x, y = d * np.cos(phi), d * np.sin(phi)
    c, s = np.cos(phi), np.sin(phi)
    east = x[c > np.abs(s)]
    west = -x[-c > np.abs(s)]
    north = y[s > np.abs(c)]
    south = -y[-s > np.abs(c)]
    if min(len(east), len(west), len(north), len(south)) == 0:
        raise MetricError("boundary too short to fit a cuboid")
    return Cuboid(
        (-float(np.median(west)), -float(np.median(south)), -float(camera_height)),
        (float(np.median(east)), float(np.median(north)), float(room_height) - float(camera_height)),
    )


def layout_3diou(pred_boundary, pred_height, gt_boundary, gt_height, camera_height) -> float:
    return cuboid_3diou(fit_cuboid(pred_boundary, camera_height, pred_height),
                        fit_cuboid(gt_boundary, camera_height, gt_height))


def metrics_row(step, depth: DepthMetrics | None = None, seg=None, iou3d=None) -> dict:
    row = dict.fromkeys(CSV_HEADER, "")
    row["step"] = step
    if depth is not None:
        d = asdict(depth)
        row.update(mre=d["mre"], mae=d["mae"], rmse=d["rmse"], rmse_log=d["rmse_log"],
                   d1=d["delta1"], d2=d["delta2"], d3=d["delta3"])
    if seg is not None:
        row.update(miou=seg[0], macc=seg[1])
    if iou3d is not None:
        row["iou3d"] = iou3d
    return row


def format_rows(rows, header=True) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=CSV_HEADER, lineterminator="\n")
    if header:
        writer.writeheader()
    for row in rows:
        writer.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in row.items()})
    return buf.getvalue()

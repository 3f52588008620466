"""Training losses: BerHu for depth, class-weighted cross-entropy, layout L1."""

from __future__ import annotations

import math

import numpy as np

from .autodiff import tensor as T
from .autodiff.tensor import Tensor
from .errors import DataError, ShapeError
from .geometry import GeometryError

IGNORE_LABEL = 255


class LossError(DataError):
    pass


def berhu_threshold(err: np.ndarray, mask: np.ndarray, fraction: float = 0.2) -> float:
    return fraction * float(np.max(np.abs(err[mask])))


def berhu_loss(pred, gt, mask, c: float | None = None):
    """Reverse Huber loss averaged over ``mask``.

    ``|e|`` up to ``c``, ``(e^2 + c^2) / (2c)`` beyond. ``c`` defaults to
    0.2 * max |e| over the valid pixels and is treated as a constant. At
    ``|e| == c`` the linear branch is used.
    """
    pred = pred if isinstance(pred, Tensor) else Tensor(pred)
    gt = np.asarray(gt.data if isinstance(gt, Tensor) else gt, dtype=pred.dtype)
    mask = np.asarray(mask, dtype=bool)
    if pred.shape != gt.shape or mask.shape != gt.shape:
        raise ShapeError(f"berhu_loss: shapes {pred.shape}, {gt.shape}, mask {mask.shape}")
    count = int(mask.sum())
    if count == 0:
        raise LossError("berhu_loss: empty mask")
    e = T.sub(pred, Tensor(gt))
    if c is None:
        c = berhu_threshold(e.data, mask)
    if c <= 0:
        # perfect prediction on every valid pixel
        return T.scale(T.sum_(T.mul(T.abs_(e), Tensor(mask.astype(pred.dtype)))), 1.0 / count)
    ae = T.abs_(e)
    quad = T.scale(T.add_scalar(T.square(e), c * c), 1.0 / (2 * c))
    per_pixel = T.where(ae.data <= c, ae, quad)
    per_pixel = T.mul(per_pixel, Tensor(mask.astype(pred.dtype)))
    return T.scale(T.sum_(per_pixel), 1.0 / count)


def weighted_cross_entropy(logits, labels, class_weights=None, axis=0):
    """Cross-entropy with per-class weights, normalized by the summed weight
    of the non-ignored pixels. ``logits`` has the class axis at ``axis``."""
    logits = logits if isinstance(logits, Tensor) else Tensor(logits)
    labels = np.asarray(labels)
    k = logits.shape[axis]
    weights = np.ones(k) if class_weights is None else np.asarray(class_weights, dtype=np.float64)
    if weights.shape != (k,):
        raise ShapeError(f"class weights {weights.shape} vs {k} classes")
    valid = labels != IGNORE_LABEL
    if np.any((labels[valid] < 0) | (labels[valid] >= k)):
        raise DataError(f"labels outside [0, {k}) or {IGNORE_LABEL}")
    expected = logits.shape[:axis % logits.ndim] + logits.shape[axis % logits.ndim + 1:]
    if labels.shape != expected:
        raise ShapeError(f"labels {labels.shape} vs logits {logits.shape} (class axis {axis})")
    logp = T.log_softmax(logits, axis=axis)
    safe = np.where(valid, labels, 0).astype(np.int64)
    onehot = np.moveaxis(np.eye(k, dtype=logits.dtype)[safe], -1, axis % logits.ndim)
    pix_w = np.where(valid, weights[safe], 0.0)
    total = float(pix_w.sum())
    if total <= 0:
        raise LossError("weighted_cross_entropy: no weighted pixels")
    wmap = onehot * np.expand_dims(pix_w, axis % logits.ndim).astype(logits.dtype)
    return T.scale(T.sum_(T.mul(logp, Tensor(wmap))), -1.0 / total)


def boundary_to_horizon_depth(boundary, camera_height: float):
    """Horizontal wall distance per column from floor-boundary polar angles.

    Accepts a Tensor (differentiable) or an array.
    """
    if camera_height <= 0:
        raise GeometryError(f"camera height must be positive, got {camera_height}")
    if isinstance(boundary, Tensor):
        if np.any(boundary.data <= math.pi / 2):
            raise GeometryError("floor boundary at or above the horizon")
        # h / tan(t - pi/2) = -h * tan(t)
        return T.scale(_tan(boundary), -camera_height)
    b = np.asarray(boundary, dtype=np.float64)
    if np.any(b <= math.pi / 2):
        raise GeometryError("floor boundary at or above the horizon")
    return camera_height / np.tan(b - math.pi / 2)


def _tan(a):
    out = np.tan(a.data)
    return Tensor._make(out, (a,), lambda g: (g * (1 + out * out),))


def layout_loss(pred_boundary, pred_height, gt_boundary, gt_height, camera_height):
    """Mean L1 between horizon depths plus L1 between room heights."""
    pred_boundary = pred_boundary if isinstance(pred_boundary, Tensor) else Tensor(np.asarray(pred_boundary, dtype=np.float64))
    pred_height = pred_height if isinstance(pred_height, Tensor) else Tensor(np.asarray(pred_height, dtype=pred_boundary.dtype).reshape(1))
    gt_boundary = np.asarray(gt_boundary)
    if pred_boundary.shape != gt_boundary.shape:
        raise ShapeError(f"layout_loss: boundary shapes {pred_boundary.shape} vs {gt_boundary.shape}")
    d_pred = boundary_to_horizon_depth(pred_boundary, camera_height)
    d_gt = boundary_to_horizon_depth(gt_boundary, camera_height).astype(pred_boundary.dtype)
    depth_term = T.mean(T.abs_(T.sub(d_pred, Tensor(d_gt))))
    h = T.reshape(pred_height, (1,))
    height_term = T.sum_(T.abs_(T.sub(h, Tensor(np.array([gt_height], dtype=h.dtype)))))
    return T.add(depth_term, height_term)

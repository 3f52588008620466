"""ERP pixel/sphere conventions and per-panel coordinate grids.

Pixel ``(x_e, y_e)`` maps to its center: ``phi = 2*pi*(x_e + 0.5)/W_e - pi``
(azimuth) and ``theta = pi*(y_e + 0.5)/H_e`` (polar angle, 0 at the zenith),
so no pixel center lies on a pole. The sphere point is
``(sin t cos p, sin t sin p, cos t)`` with z pointing up.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataError


class GeometryError(DataError):
    pass


@dataclass(frozen=True)
class SphericalAngles:
    phi: np.ndarray | float
    theta: np.ndarray | float


def pixel_to_angles(x_e, y_e, width: int, height: int) -> SphericalAngles:
    if width <= 0 or height <= 0:
        raise GeometryError(f"image size must be positive, got {width}x{height}")
    x = np.asarray(x_e, dtype=np.float64)
    y = np.asarray(y_e, dtype=np.float64)
    if np.any(x < 0) or np.any(x >= width) or np.any(y < 0) or np.any(y >= height):
        raise GeometryError(f"pixel coordinates outside [0,{width})x[0,{height})")
    phi = 2.0 * np.pi * (x + 0.5) / width - np.pi
    theta = np.pi * (y + 0.5) / height
    if phi.ndim == 0:
        return SphericalAngles(float(phi), float(theta))
    return SphericalAngles(phi, theta)


def angles_to_unit_vector(angles: SphericalAngles):
    phi = np.asarray(angles.phi, dtype=np.float64)
    theta = np.asarray(angles.theta, dtype=np.float64)
    st = np.sin(theta)
    return st * np.cos(phi), st * np.sin(phi), np.cos(theta)


def panel_columns(n: int, interval: int, stride: int, width: int) -> np.ndarray:
    """ERP columns covered by panel ``n`` (left-aligned at ``n*stride``, wrapping)."""
    return (n * stride + np.arange(interval)) % width


def _check_panel_args(n, interval, stride, width, height):
    if min(interval, stride, width, height) <= 0:
        raise ConfigError("interval, stride and image size must be positive")
    if width % stride:
        raise ConfigError(f"stride {stride} does not divide width {width}")
    if not 0 <= n < width // stride:
        raise ConfigError(f"panel index {n} outside [0, {width // stride})")


def global_grid(n, interval, stride, width, height) -> np.ndarray:
    """Unit-sphere coordinates (3, H_e, I) of every pixel in panel ``n``."""
    _check_panel_args(n, interval, stride, width, height)
    cols = panel_columns(n, interval, stride, width)
    rows = np.arange(height)
    ang = pixel_to_angles(cols[None, :], rows[:, None], width, height)
    x, y, z = angles_to_unit_vector(SphericalAngles(np.broadcast_to(ang.phi, (height, interval)),
                                                    np.broadcast_to(ang.theta, (height, interval))))
    return np.stack([x, y, z]).astype(np.float32)


@dataclass(frozen=True)
class PanelGeometry:
    """Coordinates for one panel: ``global_grid`` (3, H, I) holds (x, y, z);
    ``local_grid`` (2, H, I) holds the (x, y) of the reference panel. The
    local z equals the global z and is not stored."""

    global_grid: np.ndarray
    local_grid: np.ndarray

    def features(self) -> np.ndarray:
        """The 5-channel (x, y, z, x', y') stack fed to the embedding MLP."""
        return np.concatenate([self.global_grid, self.local_grid], axis=0)


def panel_coordinate_grid(n, interval, stride, width, height, ref_panel_index=0) -> PanelGeometry:
    glob = global_grid(n, interval, stride, width, height)
    if ref_panel_index == n:
        local = glob[:2].copy()
    else:
        local = global_grid(ref_panel_index, interval, stride, width, height)[:2]
    return PanelGeometry(glob, local)


def panel_geometry_stack(interval, stride, width, height, ref_panel_index=0, sample_stride=1):
    """(N, 5, H', I') coordinate features for all panels.

    With ``sample_stride`` s > 1 the grid is evaluated at the centers of
    s x s pixel blocks, i.e. the pixel centers of a stride-s feature map.
    """
    if width % stride:
        raise ConfigError(f"stride {stride} does not divide width {width}")
    if sample_stride > 1:
        return _block_center_grid(interval, stride, width, height, ref_panel_index, sample_stride)
    return np.stack([
        panel_coordinate_grid(n, interval, stride, width, height, ref_panel_index).features()
        for n in range(width // stride)
    ])


def _block_center_grid(interval, stride, width, height, ref, s):
    if interval % s or height % s:
        raise ConfigError(f"sample stride {s} must divide panel size {height}x{interval}")
    n_panels = width // stride
    rows = np.arange(height // s) * s + (s - 1) / 2.0
    offs = np.arange(interval // s) * s + (s - 1) / 2.0

    def grid(n):
        cols = np.mod(n * stride + offs, width)
        phi = 2.0 * np.pi * (cols[None, :] + 0.5) / width - np.pi
        theta = np.pi * (rows[:, None] + 0.5) / height
        phi, theta = np.broadcast_arrays(phi, theta)
        return np.stack(angles_to_unit_vector(SphericalAngles(phi, theta))).astype(np.float32)

    local = grid(ref)[:2]
    return np.stack([np.concatenate([grid(n), local]) for n in range(n_panels)])

"""Procedural cuboid rooms rendered analytically to ERP depth, labels and layout.

Room frame: x in [0, width], y in [0, length], z in [0, height] (z up).
The camera sits at (cx, cy, camera_height); ERP rays follow the pixel
convention in :mod:`panelnet.geometry`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigError
from .geometry import SphericalAngles, angles_to_unit_vector

CEILING, FLOOR, WALL, FURNITURE = 0, 1, 2, 3
CLASS_NAMES = ("ceiling", "floor", "wall", "furniture")
WALL_MARGIN = 0.3
MAX_FURNITURE = 3

DEFAULT_RANGES = {
    "width": (2.0, 8.0),
    "length": (2.0, 8.0),
    "height": (2.4, 3.5),
    "camera_height": (1.2, 1.8),
}

# albedo per surface: ceiling, floor, walls -x +x -y +y, furniture
_ALBEDO = np.array([
    [0.92, 0.92, 0.88],
    [0.55, 0.42, 0.30],
    [0.72, 0.72, 0.78],
    [0.80, 0.74, 0.66],
    [0.66, 0.76, 0.70],
    [0.78, 0.70, 0.74],
    [0.35, 0.45, 0.62],
])


@dataclass(frozen=True)
class Box:
    lo: tuple
    hi: tuple


@dataclass(frozen=True)
class RoomScene:
    width: float
    length: float
    height: float
    cx: float
    cy: float
    camera_height: float
    furniture: tuple = ()
    seed: int = 0

    def __post_init__(self):
        m = 0.2
        if not (m <= self.cx <= self.width - m and m <= self.cy <= self.length - m):
            raise ConfigError("camera closer than 0.2 m to a wall")
        if not 0 < self.camera_height < self.height:
            raise ConfigError("camera height outside the room")
        if len(self.furniture) > MAX_FURNITURE:
            raise ConfigError(f"at most {MAX_FURNITURE} furniture boxes")

    @property
    def diagonal(self) -> float:
        return math.sqrt(self.width ** 2 + self.length ** 2 + self.height ** 2)

    def to_dict(self) -> dict:
        return {
            "width": self.width, "length": self.length, "height": self.height,
            "cx": self.cx, "cy": self.cy, "camera_height": self.camera_height,
            "furniture": [[list(b.lo), list(b.hi)] for b in self.furniture],
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d) -> "RoomScene":
        boxes = tuple(Box(tuple(lo), tuple(hi)) for lo, hi in d.get("furniture", []))
        return cls(d["width"], d["length"], d["height"], d["cx"], d["cy"],
                   d["camera_height"], boxes, d.get("seed", 0))


@dataclass
class Sample:
    """One rendered panorama with its ground truth."""

    rgb: np.ndarray        # (3, H, W) float32 in [0, 1]
    depth: np.ndarray      # (1, H, W) float32, meters along the ray
    semantics: np.ndarray  # (1, H, W) uint8 labels
    boundary: np.ndarray   # (W,) floor-boundary polar angles
    room_height: float
    camera_height: float
    scene: RoomScene | None = field(default=None, repr=False)


def _draw_furniture(rng, width, length, camera_height, cx, cy, count):
    boxes = []
    attempts = 0
    while len(boxes) < count and attempts < 200:
        attempts += 1
        sx, sy = rng.uniform(0.4, 1.5, size=2)
        sz = rng.uniform(0.4, min(1.2, camera_height - 0.3))
        if sx > width - 0.1 or sy > length - 0.1:
            continue
        x0 = rng.uniform(0.05, width - sx - 0.05)
        y0 = rng.uniform(0.05, length - sy - 0.05)
        # keep clear of the camera so it is never inside or right next to a box
        nx = min(max(cx, x0), x0 + sx)
        ny = min(max(cy, y0), y0 + sy)
        if math.hypot(cx - nx, cy - ny) < 0.4:
            continue
        boxes.append(Box((x0, y0, 0.0), (x0 + sx, y0 + sy, sz)))
    return tuple(boxes)


def sample_room(seed: int, ranges=None, furniture: int = 0) -> RoomScene:
    """Deterministic random room for ``seed``."""
    r = dict(DEFAULT_RANGES)
    r.update(ranges or {})
    for key, (lo, hi) in r.items():
        if lo > hi or lo <= 0:
            raise ConfigError(f"invalid range for {key}: {(lo, hi)}")
    if r["width"][0] <= 2 * WALL_MARGIN or r["length"][0] <= 2 * WALL_MARGIN:
        raise ConfigError("room too small for the camera margin")
    if r["camera_height"][1] >= r["height"][0]:
        raise ConfigError("camera height range reaches the ceiling range")
    if not 0 <= furniture <= MAX_FURNITURE:
        raise ConfigError(f"furniture count must be in [0, {MAX_FURNITURE}]")
    rng = np.random.default_rng(seed)
    width = float(rng.uniform(*r["width"]))
    length = float(rng.uniform(*r["length"]))
    height = float(rng.uniform(*r["height"]))
    hc = float(rng.uniform(*r["camera_height"]))
    cx = float(rng.uniform(WALL_MARGIN, width - WALL_MARGIN))
    cy = float(rng.uniform(WALL_MARGIN, length - WALL_MARGIN))
    boxes = _draw_furniture(rng, width, length, hc, cx, cy, furniture) if furniture else ()
    return RoomScene(width, length, height, cx, cy, hc, boxes, seed)


def _ray_grid(width, height):
    phi = 2.0 * np.pi * (np.arange(width) + 0.5) / width - np.pi
    theta = np.pi * (np.arange(height) + 0.5) / height
    phi, theta = np.meshgrid(phi, theta)
    return np.stack(angles_to_unit_vector(SphericalAngles(phi, theta)))


def wall_distance(scene: RoomScene, phi) -> np.ndarray:
    """Horizontal distance from the camera to the walls along azimuth ``phi``."""
    c, s = np.cos(phi), np.sin(phi)
    with np.errstate(divide="ignore"):
        tx = np.where(c > 0, (scene.width - scene.cx) / c, np.where(c < 0, -scene.cx / c, np.inf))
        ty = np.where(s > 0, (scene.length - scene.cy) / s, np.where(s < 0, -scene.cy / s, np.inf))
    return np.minimum(tx, ty)


def floor_boundary(scene: RoomScene, width: int) -> np.ndarray:
    phi = 2.0 * np.pi * (np.arange(width) + 0.5) / width - np.pi
    return np.pi / 2 + np.arctan(scene.camera_height / wall_distance(scene, phi))


def cast_rays(scene: RoomScene, d: np.ndarray):
    """Nearest hit along unit directions ``d`` (3, ...) from the camera.

    Returns (depth, label, surface id, |cos| between ray and surface normal).
    """
    d = np.asarray(d, dtype=np.float64)
    origin = np.array([scene.cx, scene.cy, scene.camera_height])
    upper = np.array([scene.width, scene.length, scene.height])
    bshape = (3,) + (1,) * (d.ndim - 1)
    t_axis = np.full(d.shape, np.inf)
    with np.errstate(divide="ignore", invalid="ignore"):
        for a in range(3):
            t_axis[a] = np.where(d[a] > 0, (upper[a] - origin[a]) / d[a],
                                 np.where(d[a] < 0, -origin[a] / d[a], np.inf))
    axis = np.argmin(t_axis, axis=0)
    depth = np.take_along_axis(t_axis, axis[None], 0)[0]
    component = np.take_along_axis(d, axis[None], 0)[0]
    positive = component > 0
    labels = np.where(axis == 2, np.where(positive, CEILING, FLOOR), WALL).astype(np.uint8)
    surface = np.where(axis == 2, np.where(positive, 0, 1), 2 + 2 * axis + positive.astype(int))
    cosine = np.abs(component)

    for box in scene.furniture:
        lo = (np.asarray(box.lo) - origin).reshape(bshape)
        hi = (np.asarray(box.hi) - origin).reshape(bshape)
        with np.errstate(divide="ignore", invalid="ignore"):
            t1 = lo / d
            t2 = hi / d
        tmin = np.minimum(t1, t2)
        tmax = np.maximum(t1, t2)
        # rays parallel to a slab: inside -> unbounded, outside -> miss
        par = d == 0
        inside = (lo <= 0) & (hi >= 0)
        tmin = np.where(par, np.where(inside, -np.inf, np.inf), tmin)
        tmax = np.where(par, np.where(inside, np.inf, -np.inf), tmax)
        enter = np.max(tmin, axis=0)
        leave = np.min(tmax, axis=0)
        hit = (enter <= leave) & (enter > 0) & (enter < depth)
        face_axis = np.argmax(tmin, axis=0)
        depth = np.where(hit, enter, depth)
        labels = np.where(hit, FURNITURE, labels).astype(np.uint8)
        surface = np.where(hit, 6, surface)
        cosine = np.where(hit, np.abs(np.take_along_axis(d, face_axis[None], 0)[0]), cosine)
    return depth, labels, surface, cosine


def render_erp(scene: RoomScene, width: int, height: int, check_size=True) -> Sample:
    """Ray-cast every pixel center; return RGB proxy plus depth/label/layout truth."""
    if check_size and (width % 32 or height % 32):
        raise ConfigError(f"render size {height}x{width} must be divisible by 32")
    depth, labels, surface, cosine = cast_rays(scene, _ray_grid(width, height))
    shade = 0.15 + 0.85 * cosine / (1.0 + 0.08 * depth ** 2)
    rgb = np.clip(_ALBEDO[surface].transpose(2, 0, 1) * shade, 0.0, 1.0)
    return Sample(
        rgb=rgb.astype(np.float32),
        depth=depth[None].astype(np.float32),
        semantics=labels[None],
        boundary=floor_boundary(scene, width),
        room_height=scene.height,
        camera_height=scene.camera_height,
        scene=scene,
    )


# -- augmentation -------------------------------------------------------------

def rotate_columns(x: np.ndarray, shift: int) -> np.ndarray:
    """Circular shift: output column c is input column (c + shift) mod W."""
    return np.roll(x, -shift, axis=-1)


def flip(sample: Sample) -> Sample:
    return replace(sample, rgb=sample.rgb[..., ::-1].copy(), depth=sample.depth[..., ::-1].copy(),
                   semantics=sample.semantics[..., ::-1].copy(), boundary=sample.boundary[::-1].copy())


def rotate(sample: Sample, shift: int) -> Sample:
    return replace(sample, rgb=rotate_columns(sample.rgb, shift),
                   depth=rotate_columns(sample.depth, shift),
                   semantics=rotate_columns(sample.semantics, shift),
                   boundary=rotate_columns(sample.boundary, shift))


def gamma(sample: Sample, g: float) -> Sample:
    if not 0.5 <= g <= 2.0:
        raise ConfigError(f"gamma {g} outside [0.5, 2]")
    return replace(sample, rgb=np.power(sample.rgb, np.float32(g)).astype(np.float32))


def augment(sample: Sample, ops=None, seed=None, rotate_unit: int = 1) -> Sample:
    """Apply augmentations.

    ``ops`` maps names to explicit settings, e.g. ``{"flip": True,
    "rotate": 32, "gamma": 1.3}``; they are applied as flip, rotate, gamma.
    With ``seed`` set and ``ops`` a collection of names, settings are drawn:
    flip with probability 1/2, rotation by a random multiple of
    ``rotate_unit``, gamma log-uniform in [0.5, 2].
    """
    if seed is not None and not isinstance(ops, dict):
        names = set(ops or ("flip", "rotate", "gamma"))
        rng = np.random.default_rng(seed)
        width = sample.rgb.shape[-1]
        drawn = {}
        draw_flip = bool(rng.random() < 0.5)
        draw_rot = int(rng.integers(0, width // rotate_unit)) * rotate_unit
        draw_gamma = float(np.exp(rng.uniform(np.log(0.5), np.log(2.0))))
        if "flip" in names:
            drawn["flip"] = draw_flip
        if "rotate" in names:
            drawn["rotate"] = draw_rot
        if "gamma" in names:
            drawn["gamma"] = draw_gamma
        ops = drawn
    ops = ops or {}
    out = sample
    if ops.get("flip"):
        out = flip(out)
    if ops.get("rotate"):
        out = rotate(out, int(ops["rotate"]))
    if ops.get("gamma", 1.0) != 1.0:
        out = gamma(out, float(ops["gamma"]))
    return out

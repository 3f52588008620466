"""ERPT raster container and the on-disk scene dataset.

ERPT layout: b"ERPT", u32 version (1), u8 dtype (0 = float32, 1 = uint8),
u32 C, u32 H, u32 W, then the row-major little-endian payload.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import DataError
from .synthetic import RoomScene, Sample

MAGIC = b"ERPT"
VERSION = 1
_HEADER = struct.Struct("<4sIBIII")
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("u1")}


def encode(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3:
        raise DataError(f"ERPT stores C x H x W rasters, got shape {arr.shape}")
    if arr.dtype == np.uint8:
        code = 1
    elif arr.dtype.kind == "f":
        code = 0
    else:
        raise DataError(f"ERPT supports float32 and uint8, got {arr.dtype}")
    payload = np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()
    return _HEADER.pack(MAGIC, VERSION, code, *arr.shape) + payload


def decode(buf: bytes) -> np.ndarray:
    if len(buf) < _HEADER.size:
        raise DataError("truncated ERPT header")
    magic, version, code, c, h, w = _HEADER.unpack_from(buf)
    if magic != MAGIC:
        raise DataError("not an ERPT file")
    if version != VERSION:
        raise DataError(f"unsupported ERPT version {version}")
    if code not in _DTYPES:
        raise DataError(f"unknown ERPT dtype code {code}")
    dt = _DTYPES[code]
    expected = c * h * w * dt.itemsize
    body = buf[_HEADER.size:]
    if len(body) != expected:
        raise DataError(f"ERPT payload is {len(body)} bytes, expected {expected}")
    arr = np.frombuffer(body, dtype=dt).reshape(c, h, w)
    return arr.astype(dt.newbyteorder("="))


def write(path, arr):
    Path(path).write_bytes(encode(arr))


def read(path) -> np.ndarray:
    try:
        return decode(Path(path).read_bytes())
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc


# -- scene directories ----------------------------------------------------------

def scene_dir(root, index: int) -> Path:
    return Path(root) / f"scene_{index:05d}"


def write_layout(path, room_height, boundary):
    text = f"height {room_height:.17g}\n" + " ".join(f"{v:.17g}" for v in boundary) + "\n"
    Path(path).write_text(text)


def read_layout(path):
    lines = Path(path).read_text().split("\n", 1)
    head = lines[0].split()
    if len(head) != 2 or head[0] != "height":
        raise DataError(f"{path}: first line must be 'height <value>'")
    boundary = np.array([float(v) for v in lines[1].split()]) if len(lines) > 1 else np.zeros(0)
    return float(head[1]), boundary


def save_sample(root, index: int, sample: Sample) -> Path:
    d = scene_dir(root, index)
    d.mkdir(parents=True, exist_ok=True)
    write(d / "rgb.erpt", sample.rgb)
    write(d / "depth.erpt", sample.depth)
    write(d / "sem.erpt", sample.semantics)
    write_layout(d / "layout.txt", sample.room_height, sample.boundary)
    meta = {"camera_height": sample.camera_height}
    if sample.scene is not None:
        meta["scene"] = sample.scene.to_dict()
    (d / "scene.json").write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n")
    return d


def load_sample(path) -> Sample:
    d = Path(path)
    try:
        meta = json.loads((d / "scene.json").read_text())
    except (OSError, ValueError) as exc:
        raise DataError(f"{d}: missing or invalid scene.json") from exc
    rgb = read(d / "rgb.erpt")
    depth = read(d / "depth.erpt")
    sem = read(d / "sem.erpt")
    height, boundary = read_layout(d / "layout.txt")
    if rgb.shape[0] != 3 or depth.shape != (1,) + rgb.shape[1:] or sem.shape != depth.shape:
        raise DataError(f"{d}: inconsistent raster shapes {rgb.shape}, {depth.shape}, {sem.shape}")
    if not (np.all(np.isfinite(rgb)) and np.all(np.isfinite(depth)) and np.all(np.isfinite(boundary))):
        raise DataError(f"{d}: non-finite values in the scene rasters")
    if boundary.shape != (rgb.shape[2],):
        raise DataError(f"{d}: boundary has {boundary.shape[0]} values for width {rgb.shape[2]}")
    scene = RoomScene.from_dict(meta["scene"]) if "scene" in meta else None
    return Sample(rgb.astype(np.float32), depth.astype(np.float32), sem, boundary, height,
                  float(meta["camera_height"]), scene)


def list_scenes(root) -> list:
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"dataset directory {root} does not exist")
    dirs = sorted(p for p in root.iterdir() if p.is_dir() and p.name.startswith("scene_"))
    if not dirs:
        raise DataError(f"no scene_* directories in {root}")
    return dirs


def load_dataset(root) -> list:
    return [load_sample(p) for p in list_scenes(root)]

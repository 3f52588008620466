"""Binary checkpoint container.

Layout: b"PNCK", u32 version, u32 count, then per entry u32 name length,
name bytes (utf-8), u8 dtype, u32 ndim, u32 dims[ndim], little-endian
row-major payload. Entries are written in the order given.
"""

from __future__ import annotations

import struct

import numpy as np

from ..errors import DataError

MAGIC = b"PNCK"
VERSION = 1

_CODES = {np.dtype("<f4"): 0, np.dtype("<f8"): 1, np.dtype("u1"): 2, np.dtype("<i8"): 3}
_DTYPES = {v: k for k, v in _CODES.items()}


class CheckpointError(DataError):
    pass


def encode(entries) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(entries))]
    for name, arr in entries.items():
        arr = np.asarray(arr)
        dt = arr.dtype.newbyteorder("<") if arr.dtype.byteorder == ">" else arr.dtype
        if dt not in _CODES:
            raise CheckpointError(f"{name}: unsupported dtype {arr.dtype}")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<BI", _CODES[dt], arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=dt.newbyteorder("<")).tobytes())
    return b"".join(parts)


def decode(buf: bytes) -> dict:
    try:
        return _decode(buf)
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        if isinstance(exc, CheckpointError):
            raise
        raise CheckpointError(f"truncated or corrupt checkpoint: {exc}") from exc


def _decode(buf: bytes) -> dict:
    if buf[:4] != MAGIC:
        raise CheckpointError("not a PNCK checkpoint")
    version, count = struct.unpack_from("<II", buf, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    off = 12
    out = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<I", buf, off)
        off += 4
        name = buf[off:off + n].decode("utf-8")
        off += n
        code, ndim = struct.unpack_from("<BI", buf, off)
        off += 5
        dims = struct.unpack_from(f"<{ndim}I", buf, off)
        off += 4 * ndim
        dt = _DTYPES.get(code)
        if dt is None:
            raise CheckpointError(f"{name}: unknown dtype code {code}")
        size = int(np.prod(dims)) * dt.itemsize
        if off + size > len(buf):
            raise CheckpointError(f"{name}: payload runs past the end of the file")
        out[name] = np.frombuffer(buf[off:off + size], dtype=dt).reshape(dims).copy()
        off += size
    if off != len(buf):
        raise CheckpointError("trailing bytes after last entry")
    return out


def save(path, entries):
    with open(path, "wb") as fh:
        fh.write(encode(entries))


def load(path) -> dict:
    with open(path, "rb") as fh:
        return decode(fh.read())

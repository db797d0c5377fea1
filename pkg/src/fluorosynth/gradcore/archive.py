"""FSTN tensor archive: a flat little-endian container of named float32 arrays.

Layout::

    b"FSTN" | version u16 | count u32 |
    count x { name_len u16 | name utf-8 | rank u8 | extents u32 * rank |
              dtype u8 (0 = f32) | payload }
"""
from __future__ import annotations

import io
import os
import struct
from typing import BinaryIO, Mapping

import numpy as np

MAGIC = b"FSTN"
VERSION = 1
DTYPE_TAGS = {0: np.dtype("<f4")}


class ArchiveError(ValueError):
    pass


def write_archive(path_or_file, tensors: Mapping[str, np.ndarray]) -> None:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<HI", VERSION, len(tensors)))
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        if arr.dtype.kind != "f":
            raise ArchiveError(f"tensor {name!r}: only floating arrays can be archived, got {arr.dtype}")
        if arr.dtype != np.float32 and not np.array_equal(arr.astype(np.float32), arr):
            raise ArchiveError(f"tensor {name!r}: {arr.dtype} values are not exactly representable as f32")
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF or arr.ndim > 0xFF:
            raise ArchiveError(f"tensor {name!r}: name or rank too large")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(struct.pack("<B", 0))
        buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    data = buf.getvalue()
    if hasattr(path_or_file, "write"):
        path_or_file.write(data)
        return
    tmp = f"{os.fspath(path_or_file)}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path_or_file)


def _read_exact(fh: BinaryIO, n: int) -> bytes:
    b = fh.read(n)
    if len(b) != n:
        raise ArchiveError("truncated archive")
    return b


def read_archive(path_or_file) -> dict[str, np.ndarray]:
    if hasattr(path_or_file, "read"):
        return _read(path_or_file)
    with open(path_or_file, "rb") as fh:
        return _read(fh)


def _read(fh: BinaryIO) -> dict[str, np.ndarray]:
    if _read_exact(fh, 4) != MAGIC:
        raise ArchiveError("not an FSTN archive (bad magic)")
    version, count = struct.unpack("<HI", _read_exact(fh, 6))
    if version != VERSION:
        raise ArchiveError(f"unsupported archive version {version}")
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", _read_exact(fh, 2))
        name = _read_exact(fh, nlen).decode("utf-8")
        (rank,) = struct.unpack("<B", _read_exact(fh, 1))
        shape = struct.unpack(f"<{rank}I", _read_exact(fh, 4 * rank))
        (tag,) = struct.unpack("<B", _read_exact(fh, 1))
        if tag not in DTYPE_TAGS:
            raise ArchiveError(f"tensor {name!r}: unknown dtype tag {tag}")
        dtype = DTYPE_TAGS[tag]
        count_elems = int(np.prod(shape, dtype=np.int64))
        payload = _read_exact(fh, count_elems * dtype.itemsize)
        out[name] = np.frombuffer(payload, dtype=dtype).astype(np.float32).reshape(shape)
    if fh.read(1):
        raise ArchiveError("trailing bytes after last tensor")
    return out

"""The "EDWT" named-tensor container.

Layout (little-endian)::

    b"EDWT" | u32 version=1 | u32 count
    count x ( u16 name_len | name (UTF-8) | u8 rank | rank x u32 dim | f64 payload )
"""

from __future__ import annotations

import struct
from collections import OrderedDict
from pathlib import Path

import numpy as np

from .errors import FormatError

MAGIC = b"EDWT"
VERSION = 1


def dumps(tensors) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(getattr(arr, "data", arr), dtype=np.float64)
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise ValueError(f"tensor name too long: {name[:40]}...")
        if arr.ndim > 0xFF:
            raise ValueError(f"rank {arr.ndim} too large for {name}")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack(f"<B{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return b"".join(parts)


def loads(buf: bytes) -> OrderedDict:
    view = memoryview(buf)
    pos = 0

    def take(n, what):
        nonlocal pos
        if pos + n > len(view):
            raise FormatError(f"truncated while reading {what}", offset=pos)
        chunk = view[pos:pos + n]
        pos += n
        return chunk

    magic = bytes(take(4, "magic"))
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}", offset=0)
    version, count = struct.unpack("<II", take(8, "header"))
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", offset=4)
    out = OrderedDict()
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2, "name length"))
        start = pos
        try:
            name = bytes(take(name_len, "name")).decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError("tensor name is not UTF-8", offset=start) from None
        if name in out:
            raise FormatError(f"duplicate tensor name {name!r}", offset=start)
        (rank,) = struct.unpack("<B", take(1, "rank"))
        dims = struct.unpack(f"<{rank}I", take(4 * rank, "dims"))
        n = int(np.prod(dims, dtype=np.int64)) if rank else 1
        payload = take(8 * n, f"payload of {name!r}")
        out[name] = np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(dims)
    if pos != len(view):
        raise FormatError(f"{len(view) - pos} trailing bytes", offset=pos)
    return out


def save(path, tensors) -> None:
    Path(path).write_bytes(dumps(tensors))


def load(path) -> OrderedDict:
    return loads(Path(path).read_bytes())

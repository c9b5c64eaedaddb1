"""Binary parameter checkpoints.

Layout (all integers little-endian)::

    b"SENC"  u32 version
    u32 meta_len, meta_len bytes of UTF-8 text (the run config, key=value lines)
    u32 n_params
    n_params times: u16 name_len, name (UTF-8), u8 rank, rank x u32 dims, f64 values

Values are written verbatim, so a save/load cycle is bit exact.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import FormatError

MAGIC = b"SENC"
VERSION = 1


def dumps(params: Mapping[str, np.ndarray], meta: str = "") -> bytes:
    out = [MAGIC, struct.pack("<I", VERSION)]
    meta_b = meta.encode("utf-8")
    out.append(struct.pack("<I", len(meta_b)))
    out.append(meta_b)
    out.append(struct.pack("<I", len(params)))
    for name, value in params.items():
        arr = np.array(value, dtype="<f8", order="C")  # keeps rank 0, unlike ascontiguousarray
        name_b = name.encode("utf-8")
        if len(name_b) > 0xFFFF or arr.ndim > 0xFF:
            raise ValueError(f"parameter {name!r} cannot be encoded")
        out.append(struct.pack("<H", len(name_b)))
        out.append(name_b)
        out.append(struct.pack("<B", arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(arr.tobytes())
    return b"".join(out)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError(
                f"truncated checkpoint reading {what}: expected {n} bytes, {len(self.buf) - self.pos} available",
                self.pos,
            )
        chunk = self.buf[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def loads(buf: bytes) -> tuple[dict[str, np.ndarray], str]:
    r = _Reader(buf)
    if r.take(4, "magic") != MAGIC:
        raise FormatError("bad checkpoint magic", 0)
    (version,) = r.unpack("<I", "version")
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", 4)
    (meta_len,) = r.unpack("<I", "metadata length")
    meta = r.take(meta_len, "metadata").decode("utf-8")
    (count,) = r.unpack("<I", "parameter count")
    params: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = r.unpack("<H", "name length")
        name = r.take(name_len, "name").decode("utf-8")
        (rank,) = r.unpack("<B", "rank")
        dims = r.unpack(f"<{rank}I", "dims") if rank else ()
        n = int(np.prod(dims)) if rank else 1
        raw = r.take(8 * n, f"values of {name!r}")
        params[name] = np.frombuffer(raw, dtype="<f8").reshape(dims).astype(np.float64)
    if r.pos != len(buf):
        raise FormatError(f"{len(buf) - r.pos} trailing bytes after last parameter", r.pos)
    return params, meta


def save(path: str | Path, params: Mapping[str, np.ndarray], meta: str = "") -> None:
    Path(path).write_bytes(dumps(params, meta))


def load(path: str | Path) -> tuple[dict[str, np.ndarray], str]:
    return loads(Path(path).read_bytes())

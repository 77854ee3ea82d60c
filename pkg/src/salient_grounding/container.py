"""Named-tensor container (``DCF1``) shared by datasets, features and checkpoints.

Layout, all integers little-endian::

    b"DCF1" | u32 record count |
    per record: u16 name length, UTF-8 name, u8 rank, rank x u32 extents,
                row-major float32 values
"""
from __future__ import annotations

import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"DCF1"


class ContainerError(ValueError):
    pass


def encode(records: Mapping[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<I", len(records))]
    for name, value in records.items():
        arr = np.array(value, dtype="<f4", order="C")  # ascontiguousarray would promote 0-d to 1-d
        raw_name = name.encode("utf-8")
        if len(raw_name) > 0xFFFF:
            raise ContainerError(f"record name too long: {name[:40]}...")
        if arr.ndim > 0xFF:
            raise ContainerError(f"record {name!r} has rank {arr.ndim} > 255")
        parts.append(struct.pack("<H", len(raw_name)))
        parts.append(raw_name)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def decode(buf: bytes, source: str = "<bytes>") -> dict[str, np.ndarray]:
    def need(off, n, what):
        if off + n > len(buf):
            raise ContainerError(f"{source}: truncated while reading {what} at byte {off}")

    need(0, 8, "header")
    if buf[:4] != MAGIC:
        raise ContainerError(f"{source}: bad magic {buf[:4]!r}, expected {MAGIC!r}")
    (count,) = struct.unpack_from("<I", buf, 4)
    off = 8
    out: dict[str, np.ndarray] = {}
    for r in range(count):
        need(off, 2, f"name length of record {r}")
        (nlen,) = struct.unpack_from("<H", buf, off)
        off += 2
        need(off, nlen + 1, f"name of record {r}")
        try:
            name = buf[off:off + nlen].decode("utf-8")
        except UnicodeDecodeError as exc:
            raise ContainerError(f"{source}: record {r} name is not UTF-8") from exc
        off += nlen
        rank = buf[off]
        off += 1
        need(off, 4 * rank, f"extents of record {name!r}")
        shape = struct.unpack_from(f"<{rank}I", buf, off)
        off += 4 * rank
        nbytes = 4 * int(np.prod(shape, dtype=np.int64))
        need(off, nbytes, f"values of record {name!r}")
        out[name] = np.frombuffer(buf, dtype="<f4", count=nbytes // 4, offset=off).reshape(shape).copy()
        off += nbytes
    if off != len(buf):
        raise ContainerError(f"{source}: {len(buf) - off} trailing bytes after {count} records")
    return out


def write(path: str | Path, records: Mapping[str, np.ndarray]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(encode(records))
    tmp.replace(path)


def read(path: str | Path) -> dict[str, np.ndarray]:
    path = Path(path)
    if not path.exists():
        raise ContainerError(f"{path}: no such container file")
    return decode(path.read_bytes(), source=str(path))

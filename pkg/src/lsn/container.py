"""Named-tensor container ("LSNT") with an optional trailing metadata record.

Layout, all little-endian::

    b"LSNT" | version u32 | count u32
    per tensor: name_len u16 | utf-8 name | ndim u8 (=4) | 4 x u32 dims | float32 data
    optional:   iteration u64 | 32 ascii hex chars (config fingerprint)
"""
from __future__ import annotations

import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"LSNT"
VERSION = 1
_META = struct.Struct("<Q32s")


class ContainerError(ValueError):
    pass


def pack(tensors: Mapping[str, np.ndarray], iteration: int | None = None, fingerprint: str | None = None) -> bytes:
    out = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, value in tensors.items():
        arr = np.asarray(value)
        if arr.ndim != 4:
            raise ContainerError(f"tensor {name!r} has {arr.ndim} dims; the container stores 4-D tensors")
        raw = name.encode("utf-8")
        out.append(struct.pack("<H", len(raw)) + raw)
        out.append(struct.pack("<B4I", 4, *arr.shape))
        out.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    if iteration is not None:
        fp = (fingerprint or "0" * 32).encode("ascii")
        if len(fp) != 32:
            raise ContainerError(f"fingerprint must be 32 hex chars, got {fingerprint!r}")
        out.append(_META.pack(iteration, fp))
    return b"".join(out)


def unpack(data: bytes) -> tuple[dict[str, np.ndarray], int | None, str | None]:
    """Returns (tensors, iteration, fingerprint); the last two are None without metadata."""
    if data[:4] != MAGIC:
        raise ContainerError(f"bad magic {data[:4]!r}, expected {MAGIC!r}")
    if len(data) < 12:
        raise ContainerError("truncated container header")
    version, count = struct.unpack_from("<II", data, 4)
    if version != VERSION:
        raise ContainerError(f"unsupported container version {version}")
    pos = 12
    tensors: dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<H", data, pos)
            pos += 2
            name = data[pos : pos + n].decode("utf-8")
            pos += n
            ndim, *dims = struct.unpack_from("<B4I", data, pos)
            pos += 17
            if ndim != 4:
                raise ContainerError(f"tensor {name!r}: ndim {ndim}, expected 4")
            size = int(np.prod(dims)) * 4
            if pos + size > len(data):
                raise ContainerError(f"tensor {name!r}: payload truncated at byte offset {pos}")
            tensors[name] = np.frombuffer(data, dtype="<f4", count=size // 4, offset=pos).astype(np.float32).reshape(dims)
            pos += size
    except struct.error as exc:
        raise ContainerError(f"truncated container at byte offset {pos}") from exc
    rest = len(data) - pos
    if rest == 0:
        return tensors, None, None
    if rest != _META.size:
        raise ContainerError(f"{rest} trailing bytes after the tensors at byte offset {pos}")
    iteration, fp = _META.unpack_from(data, pos)
    return tensors, int(iteration), fp.decode("ascii")


def save(path: Path | str, tensors: Mapping[str, np.ndarray], iteration: int | None = None,
         fingerprint: str | None = None) -> None:
    Path(path).write_bytes(pack(tensors, iteration, fingerprint))


def load(path: Path | str):
    return unpack(Path(path).read_bytes())

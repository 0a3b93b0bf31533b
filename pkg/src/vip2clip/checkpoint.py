"""VPCK tensor-container format.

Layout (all integers little-endian)::

    b"VPCK"  u32 version (=1)  u32 tensor_count
    per tensor, sorted by name:
        u16 name_len  name (UTF-8)  u8 ndim  u32 dim * ndim  f32 payload (row-major)
"""
import struct
from pathlib import Path

import numpy as np

from vip2clip.errors import CheckpointFormatError, IoError

MAGIC = b"VPCK"
VERSION = 1


def dumps(tensors: dict[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name in sorted(tensors):
        arr = np.asarray(tensors[name])
        raw_name = name.encode("utf-8")
        if len(raw_name) > 0xFFFF or arr.ndim > 0xFF:
            raise CheckpointFormatError(f"tensor {name!r} cannot be encoded")
        parts.append(struct.pack("<H", len(raw_name)))
        parts.append(raw_name)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


def loads(blob: bytes) -> dict[str, np.ndarray]:
    if blob[:4] != MAGIC:
        raise CheckpointFormatError("missing VPCK magic")
    try:
        version, count = struct.unpack_from("<II", blob, 4)
        if version != VERSION:
            raise CheckpointFormatError(f"unsupported VPCK version {version}")
        pos = 12
        out: dict[str, np.ndarray] = {}
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", blob, pos)
            pos += 2
            name = blob[pos:pos + name_len].decode("utf-8")
            pos += name_len
            (ndim,) = struct.unpack_from("<B", blob, pos)
            pos += 1
            shape = struct.unpack_from(f"<{ndim}I", blob, pos)
            pos += 4 * ndim
            n = int(np.prod(shape, dtype=np.int64))
            if pos + 4 * n > len(blob):
                raise CheckpointFormatError(f"truncated payload for {name!r}")
            out[name] = np.frombuffer(blob, dtype="<f4", count=n, offset=pos).reshape(shape).astype(np.float32)
            pos += 4 * n
    except (struct.error, UnicodeDecodeError) as exc:
        raise CheckpointFormatError(f"corrupt VPCK stream: {exc}") from exc
    if pos != len(blob):
        raise CheckpointFormatError("trailing bytes after last tensor")
    return out


def save(path, tensors: dict[str, np.ndarray]) -> None:
    try:
        Path(path).write_bytes(dumps(tensors))
    except OSError as exc:
        raise IoError(f"cannot write checkpoint {path}: {exc}") from exc


def load(path) -> dict[str, np.ndarray]:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise IoError(f"cannot read checkpoint {path}: {exc}") from exc
    return loads(blob)

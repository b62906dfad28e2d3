"""Self-describing binary tensor files.

Layout (little endian)::

    magic       6 bytes (e.g. b"UVLMK\\0", b"UVDIT\\0")
    version     u32
    meta_len    u32, then meta_len bytes of UTF-8 JSON (sorted keys)
    n_tensors   u32
    per tensor: name_len u16, name, dtype code u8, ndim u8, shape u32 * ndim,
                row-major data
"""
from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np

FORMAT_VERSION = 1

_DTYPES = {0: np.float32, 1: np.float64, 2: np.int64, 3: np.uint8, 4: np.int32}
_CODES = {np.dtype(v): k for k, v in _DTYPES.items()}


class CheckpointError(ValueError):
    """Malformed, truncated or mismatched checkpoint."""


def dumps(magic: bytes, meta: dict, tensors: dict[str, np.ndarray]) -> bytes:
    if len(magic) != 6:
        raise ValueError("magic must be 6 bytes")
    parts = [magic, struct.pack("<I", FORMAT_VERSION)]
    meta_b = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode()
    parts += [struct.pack("<I", len(meta_b)), meta_b, struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr)
        if arr.dtype not in _CODES:
            raise CheckpointError(f"unsupported dtype {arr.dtype} for tensor {name!r}")
        nb = name.encode()
        parts.append(struct.pack("<H", len(nb)) + nb)
        parts.append(struct.pack("<BB", _CODES[arr.dtype], arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError("truncated checkpoint")
        out = self.data[self.pos: self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def loads(data: bytes, magic: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    r = _Reader(data)
    got = r.take(6) if len(data) >= 6 else b""
    if got != magic:
        raise CheckpointError(f"bad magic {got!r}, expected {magic!r}")
    (version,) = r.unpack("<I")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported format version {version}")
    (meta_len,) = r.unpack("<I")
    try:
        meta = json.loads(r.take(meta_len).decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"corrupt metadata: {e}") from None
    (n,) = r.unpack("<I")
    tensors = {}
    for _ in range(n):
        (nl,) = r.unpack("<H")
        name = r.take(nl).decode()
        code, ndim = r.unpack("<BB")
        if code not in _DTYPES:
            raise CheckpointError(f"unknown dtype code {code} for {name!r}")
        shape = r.unpack(f"<{ndim}I") if ndim else ()
        dt = np.dtype(_DTYPES[code]).newbyteorder("<")
        nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        tensors[name] = np.frombuffer(r.take(nbytes), dtype=dt).reshape(shape).astype(_DTYPES[code])
    if r.pos != len(data):
        raise CheckpointError("trailing bytes after tensor table")
    return meta, tensors


def save(path, magic: bytes, meta: dict, tensors: dict[str, np.ndarray]) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(dumps(magic, meta, tensors))
    os.replace(tmp, path)


def load(path, magic: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    return loads(Path(path).read_bytes(), magic)

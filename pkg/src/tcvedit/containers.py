"""Little-endian binary containers for named float32 tensors.

Layout: 4-byte magic, u32 version, u32 metadata length, UTF-8 JSON
metadata, u32 tensor count, then per tensor: u32 name length, name,
u32 ndim, ndim x u32 dims, float32 payload (row-major).
"""
from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np
import torch

VERSION = 1


class ContainerError(ValueError):
    pass


def encode(magic: bytes, tensors: dict[str, torch.Tensor], meta: dict | None = None) -> bytes:
    if len(magic) != 4:
        raise ValueError("magic must be 4 bytes")
    meta_bytes = json.dumps(meta or {}, sort_keys=True).encode()
    parts = [magic, struct.pack("<II", VERSION, len(meta_bytes)), meta_bytes, struct.pack("<I", len(tensors))]
    for name, t in tensors.items():
        arr = t.detach().cpu().contiguous().numpy().astype("<f4")
        nb = name.encode()
        parts.append(struct.pack("<I", len(nb)) + nb)
        parts.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def decode(magic: bytes, data: bytes) -> tuple[dict[str, torch.Tensor], dict]:
    if data[:4] != magic:
        raise ContainerError(f"bad magic {data[:4]!r}, expected {magic!r}")
    version, mlen = struct.unpack_from("<II", data, 4)
    if version != VERSION:
        raise ContainerError(f"unsupported container version {version}")
    off = 12
    meta = json.loads(data[off:off + mlen].decode())
    off += mlen
    (count,) = struct.unpack_from("<I", data, off)
    off += 4
    tensors = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", data, off)
        off += 4
        name = data[off:off + nlen].decode()
        off += nlen
        (ndim,) = struct.unpack_from("<I", data, off)
        off += 4
        shape = struct.unpack_from(f"<{ndim}I", data, off)
        off += 4 * ndim
        n = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(data, dtype="<f4", count=n, offset=off).reshape(shape)
        off += 4 * n
        tensors[name] = torch.from_numpy(arr.copy())
    if off != len(data):
        raise ContainerError("trailing bytes in container")
    return tensors, meta


def write(path: str | Path, magic: bytes, tensors: dict[str, torch.Tensor], meta: dict | None = None) -> None:
    Path(path).write_bytes(encode(magic, tensors, meta))


def read(path: str | Path, magic: bytes) -> tuple[dict[str, torch.Tensor], dict]:
    return decode(magic, Path(path).read_bytes())


def digest(magic: bytes, tensors: dict[str, torch.Tensor], meta: dict | None = None) -> str:
    return hashlib.sha256(encode(magic, tensors, meta)).hexdigest()

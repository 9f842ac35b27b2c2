"""Binary checkpoint format.

Layout (all integers little-endian u32)::

    b"RGTM" | version | role_len | role (utf-8) | n_records
    per record: name_len | name (utf-8) | rank | dims[rank] | float32 data

Parameters are stored as little-endian float32, so a float32 store
round-trips bit-exactly.
"""

from __future__ import annotations

import io
import os
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from rgtom.errors import StaleArtifactError

MAGIC = b"RGTM"
VERSION = 1


def dumps(arrays: Mapping[str, np.ndarray], role: str = "") -> bytes:
    buf = io.BytesIO()
    role_b = role.encode("utf-8")
    buf.write(MAGIC)
    buf.write(struct.pack("<II", VERSION, len(role_b)))
    buf.write(role_b)
    buf.write(struct.pack("<I", len(arrays)))
    for name, arr in arrays.items():
        arr = np.asarray(arr, dtype="<f4")
        name_b = name.encode("utf-8")
        buf.write(struct.pack("<I", len(name_b)))
        buf.write(name_b)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr).tobytes())
    return buf.getvalue()


def loads(data: bytes) -> tuple[str, dict[str, np.ndarray]]:
    """Parse checkpoint bytes into ``(role, arrays)``."""
    if data[:4] != MAGIC:
        raise StaleArtifactError("not a checkpoint: bad magic bytes")
    off = 4
    version, role_len = struct.unpack_from("<II", data, off)
    off += 8
    if version != VERSION:
        raise StaleArtifactError(f"unsupported checkpoint version {version}")
    role = data[off : off + role_len].decode("utf-8")
    off += role_len
    (n,) = struct.unpack_from("<I", data, off)
    off += 4
    out: dict[str, np.ndarray] = {}
    for _ in range(n):
        (name_len,) = struct.unpack_from("<I", data, off)
        off += 4
        name = data[off : off + name_len].decode("utf-8")
        off += name_len
        (rank,) = struct.unpack_from("<I", data, off)
        off += 4
        dims = struct.unpack_from(f"<{rank}I", data, off)
        off += 4 * rank
        count = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(data, dtype="<f4", count=count, offset=off).reshape(dims)
        off += 4 * count
        out[name] = arr.astype(np.float32)
    if off != len(data):
        raise StaleArtifactError("trailing bytes in checkpoint")
    return role, out


def atomic_write(path: str | os.PathLike, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(data)
        f.flush()
        os.fsync(f.fileno())
    os.replace(tmp, path)


def save(path, arrays: Mapping[str, np.ndarray], role: str = "") -> None:
    atomic_write(path, dumps(arrays, role))


def load(path, expect_role: str | None = None) -> dict[str, np.ndarray]:
    role, arrays = loads(Path(path).read_bytes())
    if expect_role is not None and role != expect_role:
        raise StaleArtifactError(f"checkpoint role {role!r} != expected {expect_role!r}")
    return arrays

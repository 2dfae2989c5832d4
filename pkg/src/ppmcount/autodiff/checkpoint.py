"""Binary parameter container.

Layout (all integers little-endian)::

    b"PKC1"
    repeated until end of file:
        uint32  name length in bytes
        bytes   name (UTF-8)
        uint32  rank
        uint64  dims[rank]
        float64 payload, row-major, little-endian
"""

from __future__ import annotations

import os
import struct
import tempfile
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"PKC1"


def dumps(arrays: Mapping[str, np.ndarray]) -> bytes:
    parts = [MAGIC]
    for name, arr in arrays.items():
        arr = np.asarray(arr, dtype="<f8", order="C")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def loads(blob: bytes) -> dict[str, np.ndarray]:
    if blob[:4] != MAGIC:
        raise ValueError("not a PKC1 checkpoint (bad magic bytes)")
    out: dict[str, np.ndarray] = {}
    pos = 4
    try:
        while pos < len(blob):
            (name_len,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            name = blob[pos:pos + name_len].decode("utf-8")
            pos += name_len
            (rank,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            dims = struct.unpack_from(f"<{rank}Q", blob, pos)
            pos += 8 * rank
            count = int(np.prod(dims, dtype=np.int64))
            if pos + 8 * count > len(blob):
                raise ValueError(f"truncated payload for {name!r}")
            out[name] = np.frombuffer(blob, dtype="<f8", count=count, offset=pos).reshape(dims).astype(np.float64)
            pos += 8 * count
    except struct.error as exc:
        raise ValueError(f"truncated checkpoint: {exc}") from exc
    return out


def atomic_write(path, payload: bytes | str) -> None:
    """Write via a temp file in the same directory, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload.encode("utf-8") if isinstance(payload, str) else payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save(path, arrays: Mapping[str, np.ndarray]) -> None:
    atomic_write(path, dumps(arrays))


def load(path) -> dict[str, np.ndarray]:
    return loads(Path(path).read_bytes())

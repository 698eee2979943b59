"""Flat binary parameter checkpoints.

Layout (all integers little-endian u32)::

    b"CALI" | version
    repeated: name_len | name (utf-8) | rank | extents[rank] | f64 payload (little-endian)
"""
from __future__ import annotations

import os
import struct
import tempfile
from pathlib import Path
from typing import Mapping

import numpy as np

from calico.errors import CodecError

MAGIC = b"CALI"
VERSION = 1


def encode_checkpoint(state: Mapping[str, np.ndarray]) -> bytes:
    chunks = [MAGIC, struct.pack("<I", VERSION)]
    for name, arr in state.items():
        arr = np.asarray(arr, dtype="<f8")
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes(order="C"))
    return b"".join(chunks)


def decode_checkpoint(blob: bytes) -> dict[str, np.ndarray]:
    if blob[:4] != MAGIC:
        raise CodecError("not a checkpoint: bad magic")
    if len(blob) < 8:
        raise CodecError("truncated checkpoint header")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != VERSION:
        raise CodecError(f"unsupported checkpoint version {version}")
    pos = 8
    out: dict[str, np.ndarray] = {}
    try:
        while pos < len(blob):
            (n,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            name = blob[pos:pos + n].decode("utf-8")
            pos += n
            (rank,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            shape = struct.unpack_from(f"<{rank}I", blob, pos)
            pos += 4 * rank
            count = int(np.prod(shape, dtype=np.int64))
            end = pos + 8 * count
            if end > len(blob):
                raise CodecError(f"truncated payload for {name!r}")
            out[name] = np.frombuffer(blob[pos:end], dtype="<f8").reshape(shape).astype(np.float64)
            pos = end
    except struct.error as exc:
        raise CodecError(f"truncated checkpoint record at byte {pos}") from exc
    return out


def atomic_write_bytes(path: str | os.PathLike, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_checkpoint(path: str | os.PathLike, state: Mapping[str, np.ndarray]) -> None:
    atomic_write_bytes(path, encode_checkpoint(state))


def load_checkpoint(path: str | os.PathLike) -> dict[str, np.ndarray]:
    return decode_checkpoint(Path(path).read_bytes())

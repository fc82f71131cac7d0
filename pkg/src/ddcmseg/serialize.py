"""Binary tensor container used for checkpoints and raw tensor dumps.

Layout (all integers little-endian):

    magic  b"DDCM"
    u32    version (currently 1)
    then, repeated until end of file:
        u32   name length in bytes
        bytes UTF-8 name
        u8    rank
        u64   dims[rank]
        f32   values, C order, prod(dims) elements
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import CheckpointError

MAGIC = b"DDCM"
VERSION = 1


def save_tensors(path, named_arrays) -> None:
    """Write ``(name, ndarray)`` pairs (or a dict) in insertion order."""
    if isinstance(named_arrays, dict):
        named_arrays = named_arrays.items()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        for name, arr in named_arrays:
            arr = np.ascontiguousarray(arr, dtype="<f4")
            raw_name = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw_name)))
            fh.write(raw_name)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(arr.tobytes(order="C"))


def load_tensors(path) -> dict[str, np.ndarray]:
    """Read a tensor container; raises :class:`CheckpointError` on corruption."""
    blob = Path(path).read_bytes()
    if len(blob) < 8 or blob[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic, not a tensor container")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported container version {version}")
    out: dict[str, np.ndarray] = {}
    pos = 8
    total = len(blob)
    while pos < total:
        try:
            (name_len,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            name = blob[pos:pos + name_len].decode("utf-8")
            if len(blob[pos:pos + name_len]) != name_len:
                raise struct.error("short read")
            pos += name_len
            (rank,) = struct.unpack_from("<B", blob, pos)
            pos += 1
            dims = struct.unpack_from(f"<{rank}Q", blob, pos)
            pos += 8 * rank
            count = 1
            for d in dims:
                count *= d
            nbytes = 4 * count
            if pos + nbytes > total:
                raise struct.error("short read")
            arr = np.frombuffer(blob, dtype="<f4", count=count, offset=pos).reshape(dims)
            pos += nbytes
        except struct.error as exc:
            raise CheckpointError(f"{path}: truncated tensor record") from exc
        if name in out:
            raise CheckpointError(f"{path}: duplicate tensor name {name!r}")
        out[name] = np.array(arr)  # own writable copy
    return out

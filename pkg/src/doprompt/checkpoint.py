"""Binary checkpoint format for named parameter tensors.

Layout: magic bytes "DPT1", then one record per parameter:

    name_len   u64 LE
    name       UTF-8, name_len bytes
    rank       u64 LE
    dims       rank x u64 LE
    values     prod(dims) x f32 LE

Records run to end of file. Values are stored as 32-bit reals regardless of
the engine's active dtype, so float32 parameters round-trip bit-exactly.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .tensor import Tensor

MAGIC = b"DPT1"

__all__ = ["CheckpointError", "MAGIC", "load_arrays", "load_params", "save_arrays", "save_params"]


class CheckpointError(IOError):
    """Corrupt or truncated checkpoint file."""


def save_arrays(path, arrays: dict) -> None:
    """Write name -> ndarray mappings in insertion order."""
    path = Path(path)
    with open(path, "wb") as f:
        f.write(MAGIC)
        for name, arr in arrays.items():
            data = np.asarray(arr, dtype="<f4")  # tobytes() emits C order
            encoded = name.encode("utf-8")
            f.write(struct.pack("<Q", len(encoded)))
            f.write(encoded)
            f.write(struct.pack("<Q", data.ndim))
            f.write(struct.pack(f"<{data.ndim}Q", *data.shape))
            f.write(data.tobytes())


def load_arrays(path) -> dict:
    """Read back name -> float32 ndarray, preserving record order."""
    path = Path(path)
    blob = path.read_bytes()
    if blob[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {blob[:4]!r}, expected {MAGIC!r}")
    out: dict[str, np.ndarray] = {}
    pos = 4
    total = len(blob)

    def take(n, what):
        nonlocal pos
        if pos + n > total:
            raise CheckpointError(f"{path}: truncated while reading {what}")
        chunk = blob[pos : pos + n]
        pos += n
        return chunk

    while pos < total:
        (name_len,) = struct.unpack("<Q", take(8, "name length"))
        name = take(name_len, "name").decode("utf-8")
        (rank,) = struct.unpack("<Q", take(8, "rank"))
        dims = struct.unpack(f"<{rank}Q", take(8 * rank, "dims"))
        count = int(np.prod(dims)) if rank else 1
        values = np.frombuffer(take(4 * count, f"values of {name!r}"), dtype="<f4")
        out[name] = values.reshape(dims).copy()
    return out


def save_params(path, params: dict) -> None:
    save_arrays(path, {name: p.data for name, p in params.items()})


def load_params(path, requires_grad: bool = True) -> dict:
    arrays = load_arrays(path)
    return {name: Tensor(arr, requires_grad=requires_grad) for name, arr in arrays.items()}

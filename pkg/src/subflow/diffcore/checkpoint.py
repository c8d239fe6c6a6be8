"""Parameter checkpoint file.

Layout: magic "PRMS", u32 version=1, u32 tensor count, then per tensor
u32 rank, u32 dims..., f32 little-endian data.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Sequence, Union

import numpy as np

from ..errors import FormatError
from .tensor import Tensor

MAGIC = b"PRMS"
VERSION = 1


def save_params(path, tensors: Sequence[Union[Tensor, np.ndarray]]) -> None:
    arrays = [t.data if isinstance(t, Tensor) else np.asarray(t) for t in tensors]
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(arrays)))
        for arr in arrays:
            a = np.asarray(arr, dtype="<f4")
            fh.write(struct.pack("<I", a.ndim))
            fh.write(struct.pack(f"<{a.ndim}I", *a.shape))
            fh.write(np.ascontiguousarray(a).tobytes())


def load_params(path) -> list[np.ndarray]:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:4]!r}, expected {MAGIC!r}")
    off = 4
    version, count = struct.unpack_from("<II", raw, off)
    off += 8
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    out = []
    for i in range(count):
        if off + 4 > len(raw):
            raise FormatError(f"{path}: truncated at byte {off} (tensor {i} rank)")
        (rank,) = struct.unpack_from("<I", raw, off)
        off += 4
        if off + 4 * rank > len(raw):
            raise FormatError(f"{path}: truncated at byte {off} (tensor {i} dims)")
        dims = struct.unpack_from(f"<{rank}I", raw, off)
        off += 4 * rank
        n = int(np.prod(dims, dtype=np.int64)) if rank else 1
        nbytes = 4 * n
        if off + nbytes > len(raw):
            raise FormatError(f"{path}: truncated at byte {off} (tensor {i} data)")
        data = np.frombuffer(raw, dtype="<f4", count=n, offset=off).reshape(dims)
        off += nbytes
        out.append(data.astype(np.float32))
    return out


def restore_params(params: Sequence[Tensor], arrays: Sequence[np.ndarray]) -> None:
    """Copy loaded arrays into existing parameter tensors, checking shapes."""
    if len(params) != len(arrays):
        raise FormatError(f"checkpoint holds {len(arrays)} tensors, model has {len(params)}")
    for p, a in zip(params, arrays):
        if p.data.shape != a.shape:
            raise FormatError(f"checkpoint tensor shape {a.shape} != model {p.data.shape}")
        p.data = a.astype(p.data.dtype)

"""Versioned binary checkpoints: config text plus named array blocks.

Layout (little-endian)::

    b"FPEDCKPT" | u32 version | u32 n_blocks | u32 len(config) | config utf-8
    then per block: u16 len(name) | name utf-8 | u8 dtype (0=f64, 1=i64)
                    | u8 ndim | u32 shape[ndim] | raw values
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"FPEDCKPT"
VERSION = 1
_DTYPES = {0: np.dtype("<f8"), 1: np.dtype("<i8")}


class CheckpointError(ValueError):
    pass


def save_arrays(path, config_text: str, arrays: dict) -> None:
    cfg = config_text.encode("utf-8")
    chunks = [MAGIC, struct.pack("<III", VERSION, len(arrays), len(cfg)), cfg]
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        code = 1 if np.issubdtype(arr.dtype, np.integer) or arr.dtype == bool else 0
        data = np.ascontiguousarray(arr, dtype=_DTYPES[code])
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(encoded)) + encoded)
        chunks.append(struct.pack("<BB", code, data.ndim) + struct.pack(f"<{data.ndim}I", *data.shape))
        chunks.append(data.tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_arrays(path) -> tuple[str, dict]:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if raw[:8] != MAGIC:
        raise CheckpointError(f"{path}: not an FPED checkpoint")
    version, n_blocks, cfg_len = struct.unpack_from("<III", raw, 8)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    off = 20
    config_text = raw[off:off + cfg_len].decode("utf-8")
    off += cfg_len
    arrays = {}
    for _ in range(n_blocks):
        (name_len,) = struct.unpack_from("<H", raw, off)
        off += 2
        name = raw[off:off + name_len].decode("utf-8")
        off += name_len
        code, ndim = struct.unpack_from("<BB", raw, off)
        off += 2
        shape = struct.unpack_from(f"<{ndim}I", raw, off)
        off += 4 * ndim
        dtype = _DTYPES[code]
        count = int(np.prod(shape)) if ndim else 1
        arrays[name] = np.frombuffer(raw, dtype=dtype, count=count, offset=off).reshape(shape).copy()
        off += count * dtype.itemsize
    if off != len(raw):
        raise CheckpointError(f"{path}: trailing bytes after the last block")
    return config_text, arrays

"""Binary tensor files: ``b"SPDT"``, three little-endian u32 (C, H, W), then C*H*W little-endian f32."""
from __future__ import annotations

import io
import struct
from pathlib import Path
from typing import BinaryIO

import numpy as np

from .errors import UnsupportedFormat

MAGIC = b"SPDT"
_DIMS = struct.Struct("<3I")


def encode_tensor(x: np.ndarray) -> bytes:
    x = np.asarray(x)
    if x.ndim != 3:
        raise ValueError(f"tensor files hold (C, H, W) arrays, got shape {x.shape}")
    return MAGIC + _DIMS.pack(*x.shape) + np.ascontiguousarray(x, dtype="<f4").tobytes()


def decode_tensor(stream: BinaryIO) -> np.ndarray:
    if stream.read(4) != MAGIC:
        raise UnsupportedFormat("missing SPDT magic")
    head = stream.read(_DIMS.size)
    if len(head) != _DIMS.size:
        raise UnsupportedFormat("truncated SPDT header")
    c, h, w = _DIMS.unpack(head)
    count = c * h * w
    payload = stream.read(4 * count)
    if len(payload) != 4 * count:
        raise UnsupportedFormat(f"expected {count} float32 values, got {len(payload) // 4}")
    return np.frombuffer(payload, dtype="<f4").reshape(c, h, w).astype(float)


def write_tensor(path: str | Path, x: np.ndarray) -> None:
    Path(path).write_bytes(encode_tensor(x))


def read_tensor(path: str | Path) -> np.ndarray:
    with open(path, "rb") as fh:
        return decode_tensor(fh)


def read_tensor_bytes(data: bytes) -> np.ndarray:
    return decode_tensor(io.BytesIO(data))

"""
Flat binary parameter files.

Layout (all integers little-endian):

    b"CCE1"                      magic
    u32 layer_count
    per layer:
        u16 name_len, name (UTF-8)
        u8  tensor_count
        per tensor:
            u8  key_len, key (UTF-8)
            u8  ndim, ndim x u32 extents
            prod(extents) x float64 little-endian values
"""
from __future__ import annotations

import logging
import math
import struct
from pathlib import Path

import numpy as np

from app.errors import ModelFormatError
from app.nn.network import Params

logger = logging.getLogger(__name__)

MAGIC = b"CCE1"


def encode_params(params: Params) -> bytes:
    chunks = [MAGIC, struct.pack("<I", len(params))]
    for name, tensors in params.items():
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(raw)) + raw)
        chunks.append(struct.pack("<B", len(tensors)))
        for key, value in tensors.items():
            raw_key = key.encode("utf-8")
            chunks.append(struct.pack("<B", len(raw_key)) + raw_key)
            chunks.append(struct.pack("<B", value.ndim) + struct.pack(f"<{value.ndim}I", *value.shape))
            chunks.append(np.ascontiguousarray(value, dtype="<f8").tobytes())
    return b"".join(chunks)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.offset = 0

    def take(self, n: int, what: str) -> bytes:
        if self.offset + n > len(self.data):
            raise ModelFormatError(f"Truncated parameter file while reading {what}", self.offset)
        chunk = self.data[self.offset:self.offset + n]
        self.offset += n
        return chunk

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))

    def text(self, n: int, what: str) -> str:
        start = self.offset
        try:
            return self.take(n, what).decode("utf-8")
        except UnicodeDecodeError as e:
            raise ModelFormatError(f"Invalid UTF-8 in {what}", start + e.start) from e


def decode_params(data: bytes) -> Params:
    reader = _Reader(data)
    if reader.take(4, "magic") != MAGIC:
        raise ModelFormatError("Bad magic number, expected b'CCE1'", 0)
    (layer_count,) = reader.unpack("<I", "layer count")
    params: Params = {}
    for _ in range(layer_count):
        (name_len,) = reader.unpack("<H", "layer name length")
        name = reader.text(name_len, "layer name")
        (tensor_count,) = reader.unpack("<B", "tensor count")
        tensors = {}
        for _ in range(tensor_count):
            (key_len,) = reader.unpack("<B", "tensor key length")
            key = reader.text(key_len, "tensor key")
            (ndim,) = reader.unpack("<B", "tensor rank")
            shape = reader.unpack(f"<{ndim}I", "tensor shape")
            raw = reader.take(8 * math.prod(shape), f"values of {name}.{key}")
            tensors[key] = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(shape)
        params[name] = tensors
    if reader.offset != len(data):
        raise ModelFormatError("Trailing bytes after the last layer", reader.offset)
    return params


def save_params(path: Path, params: Params) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_params(params))
    logger.info(f"Saved {len(params)} layer(s) to {path}")


def load_params(path: Path) -> Params:
    return decode_params(Path(path).read_bytes())

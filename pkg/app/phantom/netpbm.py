"""
Binary PPM (P6) and PGM (P5) codec, maxval 255.

Writers emit the minimal header `P6\\n<w> <h>\\n255\\n` (or P5) followed by the
raw bytes, so a round trip is bit-exact. The reader also accepts the comments
and arbitrary whitespace the netpbm format allows in headers.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np

from app.errors import NetpbmFormatError

_WHITESPACE = b" \t\n\r\v\f"


def encode_ppm(rgb: np.ndarray) -> bytes:
    """(H, W, 3) uint8 to P6 bytes."""
    if rgb.ndim != 3 or rgb.shape[2] != 3 or rgb.dtype != np.uint8:
        raise ValueError(f"PPM needs an (H, W, 3) uint8 array, got {rgb.shape} {rgb.dtype}")
    h, w, _ = rgb.shape
    return b"P6\n%d %d\n255\n" % (w, h) + np.ascontiguousarray(rgb).tobytes()


def encode_pgm(gray: np.ndarray) -> bytes:
    """(H, W) uint8 to P5 bytes."""
    if gray.ndim != 2 or gray.dtype != np.uint8:
        raise ValueError(f"PGM needs an (H, W) uint8 array, got {gray.shape} {gray.dtype}")
    h, w = gray.shape
    return b"P5\n%d %d\n255\n" % (w, h) + np.ascontiguousarray(gray).tobytes()


def _read_token(data: bytes, pos: int) -> tuple[bytes, int]:
    """Skips whitespace and comments, then returns the next header token and the position after it."""
    n = len(data)
    while pos < n:
        if data[pos] in _WHITESPACE:
            pos += 1
        elif data[pos:pos + 1] == b"#":
            while pos < n and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
        else:
            break
    start = pos
    while pos < n and data[pos] not in _WHITESPACE and data[pos:pos + 1] != b"#":
        pos += 1
    if start == pos:
        raise NetpbmFormatError("Truncated header", start)
    return data[start:pos], pos


def _read_int(data: bytes, pos: int, what: str) -> tuple[int, int]:
    token, end = _read_token(data, pos)
    if not token.isdigit():
        start = end - len(token)
        raise NetpbmFormatError(f"Expected {what} as a decimal integer, got {token!r}", start)
    return int(token), end


def decode_netpbm(data: bytes) -> np.ndarray:
    """P6 bytes to (H, W, 3) uint8, P5 bytes to (H, W) uint8."""
    magic = data[:2]
    if magic not in (b"P5", b"P6"):
        raise NetpbmFormatError(f"Bad magic number {magic!r}, expected b'P5' or b'P6'", 0)
    pos = 2
    if pos >= len(data) or data[pos] not in _WHITESPACE:
        raise NetpbmFormatError("Expected whitespace after the magic number", pos)
    width, pos = _read_int(data, pos, "width")
    height, pos = _read_int(data, pos, "height")
    maxval, pos = _read_int(data, pos, "maxval")
    if maxval != 255:
        raise NetpbmFormatError(f"Only maxval 255 is supported, got {maxval}", pos)
    if width < 1 or height < 1:
        raise NetpbmFormatError(f"Image extents must be positive, got {width}x{height}", pos)
    if pos >= len(data) or data[pos] not in _WHITESPACE:
        raise NetpbmFormatError("Expected a single whitespace byte before the raster", pos)
    pos += 1

    channels = 3 if magic == b"P6" else 1
    expected = width * height * channels
    payload = data[pos:pos + expected]
    if len(payload) < expected:
        raise NetpbmFormatError(
            f"Truncated raster: expected {expected} bytes, found {len(payload)}", pos + len(payload)
        )
    pixels = np.frombuffer(payload, dtype=np.uint8)
    if channels == 3:
        return pixels.reshape(height, width, 3).copy()
    return pixels.reshape(height, width).copy()


def write_ppm(path: Path, rgb: np.ndarray) -> None:
    Path(path).write_bytes(encode_ppm(rgb))


def write_pgm(path: Path, gray: np.ndarray) -> None:
    Path(path).write_bytes(encode_pgm(gray))


def read_netpbm(path: Path) -> np.ndarray:
    return decode_netpbm(Path(path).read_bytes())


def image_to_u8(image: np.ndarray) -> np.ndarray:
    """(3, H, W) floats in [0, 1] to (H, W, 3) uint8."""
    return np.clip(np.rint(np.transpose(image, (1, 2, 0)) * 255.0), 0, 255).astype(np.uint8)


def u8_to_image(rgb: np.ndarray) -> np.ndarray:
    return np.transpose(rgb, (2, 0, 1)).astype(np.float64) / 255.0


def mask_to_u8(mask: np.ndarray) -> np.ndarray:
    return np.where(mask > 0, 255, 0).astype(np.uint8)


def u8_to_mask(gray: np.ndarray) -> np.ndarray:
    return (gray > 127).astype(np.uint8)

"""Image file formats: binary PPM (P6, 8-bit) and raw float64 planes ("NMIX").

NMIX layout: 16-byte header = b"NMIX" + u32 height + u32 width + u32 channels
(all little-endian), followed by H*W*C little-endian float64 values in
row-major (H, W, C) order.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import FormatError

NMIX_MAGIC = b"NMIX"


def write_ppm(path, img: np.ndarray) -> None:
    img = np.asarray(img, dtype=float)
    if img.ndim == 3 and img.shape[2] == 1:
        img = np.repeat(img, 3, axis=2)
    if img.ndim != 3 or img.shape[2] != 3:
        raise FormatError(f"PPM needs (H, W, 3) data, got {img.shape}")
    h, w, _ = img.shape
    data = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode("ascii") + data.tobytes())


def read_ppm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError("truncated PPM header")
        tokens.append(raw[start:pos])
    pos += 1  # single whitespace after maxval
    if tokens[0] != b"P6":
        raise FormatError(f"not a P6 file: {tokens[0]!r}")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    if maxval != 255:
        raise FormatError("only 8-bit PPM is supported")
    body = raw[pos:pos + w * h * 3]
    if len(body) != w * h * 3:
        raise FormatError("truncated PPM pixel data")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w, 3).astype(np.float64) / 255.0


def write_nmix(path, img: np.ndarray) -> None:
    img = np.asarray(img, dtype="<f8")
    if img.ndim != 3:
        raise FormatError(f"NMIX needs (H, W, C) data, got {img.shape}")
    h, w, c = img.shape
    Path(path).write_bytes(NMIX_MAGIC + struct.pack("<III", h, w, c) + img.tobytes())


def read_nmix(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 16 or raw[:4] != NMIX_MAGIC:
        raise FormatError("missing NMIX header")
    h, w, c = struct.unpack("<III", raw[4:16])
    n = h * w * c * 8
    if len(raw) - 16 != n:
        raise FormatError(f"NMIX payload is {len(raw) - 16} bytes, expected {n}")
    return np.frombuffer(raw[16:], dtype="<f8").reshape(h, w, c).astype(np.float64)

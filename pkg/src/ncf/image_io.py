"""8-bit image file handling: PNG (via Pillow), binary PPM (P6), PGM (P5).

Loaders return float64 arrays scaled by 1/255 (masks stay integer).
Writers quantize with round-half-up; np.round would round half to even.
"""

from __future__ import annotations

import re
from pathlib import Path

import numpy as np
from PIL import Image


def quantize_u8(img) -> np.ndarray:
    """[0,1] float -> uint8 with ties rounded up."""
    arr = np.asarray(img, dtype=np.float64)
    return np.clip(np.floor(arr * 255.0 + 0.5), 0.0, 255.0).astype(np.uint8)


def read_rgb(path) -> np.ndarray:
    """Read an 8-bit RGB image (PNG or PPM) as float64 (H, W, 3) in [0, 1]."""
    path = Path(path)
    if path.suffix.lower() == ".ppm":
        raw = _read_pnm(path, b"P6")
        return raw.astype(np.float64) / 255.0
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
    return arr.astype(np.float64) / 255.0


def write_rgb(path, img) -> None:
    """Write a float [0,1] RGB image as 8-bit PNG or PPM (by extension)."""
    path = Path(path)
    u8 = quantize_u8(img)
    if u8.ndim != 3 or u8.shape[2] != 3:
        raise ValueError(f"expected (H, W, 3) image, got {u8.shape}")
    if path.suffix.lower() == ".ppm":
        _write_pnm(path, b"P6", u8)
    else:
        Image.fromarray(u8, mode="RGB").save(path, format="PNG")


def read_mask(path) -> np.ndarray:
    """Read a class-id mask (PGM or PNG, 8-bit grayscale) as int64 (H, W)."""
    path = Path(path)
    if path.suffix.lower() == ".pgm":
        return _read_pnm(path, b"P5").astype(np.int64)
    with Image.open(path) as im:
        return np.asarray(im.convert("L"), dtype=np.uint8).astype(np.int64)


def write_mask(path, mask) -> None:
    """Write an integer mask with values in [0, 255] as PGM or PNG."""
    path = Path(path)
    arr = np.asarray(mask)
    if arr.min() < 0 or arr.max() > 255:
        raise ValueError("mask values must fit in 8 bits")
    u8 = arr.astype(np.uint8)
    if path.suffix.lower() == ".pgm":
        _write_pnm(path, b"P5", u8)
    else:
        Image.fromarray(u8, mode="L").save(path, format="PNG")


def _write_pnm(path, magic: bytes, u8: np.ndarray) -> None:
    h, w = u8.shape[:2]
    with open(path, "wb") as fh:
        fh.write(magic + b"\n%d %d\n255\n" % (w, h))
        fh.write(u8.tobytes())


def _read_pnm(path, magic: bytes) -> np.ndarray:
    data = Path(path).read_bytes()
    if not data.startswith(magic):
        raise ValueError(f"{path}: not a {magic.decode()} file")
    # header: magic, width, height, maxval; '#' comments allowed
    pos, fields = len(magic), []
    while len(fields) < 3:
        m = re.compile(rb"\s*(?:#[^\n]*\n\s*)*(\d+)").match(data, pos)
        if m is None:
            raise ValueError(f"{path}: truncated header")
        fields.append(int(m.group(1)))
        pos = m.end()
    w, h, maxval = fields
    if maxval != 255:
        raise ValueError(f"{path}: only maxval 255 supported")
    pos += 1  # single whitespace byte after maxval
    channels = 3 if magic == b"P6" else 1
    need = w * h * channels
    if len(data) - pos < need:
        raise ValueError(f"{path}: truncated pixel data")
    pixels = np.frombuffer(data, dtype=np.uint8, count=need, offset=pos)
    shape = (h, w, 3) if channels == 3 else (h, w)
    return pixels.reshape(shape).copy()

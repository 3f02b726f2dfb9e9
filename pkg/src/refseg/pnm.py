"""Binary PGM (P5) / PPM (P6) reading and writing, 8-bit only."""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import FormatError


def _tokens(data: bytes):
    # header tokens with '#' comments, stops after the maxval token
    pos = 0
    out = []
    while len(out) < 4:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos >= len(data):
            raise FormatError("truncated PNM header")
        if data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        out.append(data[start:pos])
    # exactly one whitespace byte separates maxval from the raster
    return out, pos + 1


def read_pnm(path) -> np.ndarray:
    """Read a P5 or P6 file as uint8, shape (H, W) or (H, W, 3)."""
    data = Path(path).read_bytes()
    (magic, w, h, maxval), offset = _tokens(data)
    if magic not in (b"P5", b"P6"):
        raise FormatError(f"{path}: unsupported magic {magic!r}")
    try:
        w, h, maxval = int(w), int(h), int(maxval)
    except ValueError:
        raise FormatError(f"{path}: malformed header") from None
    if maxval != 255:
        raise FormatError(f"{path}: only 8-bit files are supported (maxval={maxval})")
    channels = 3 if magic == b"P6" else 1
    n = w * h * channels
    raster = data[offset : offset + n]
    if len(raster) != n:
        raise FormatError(f"{path}: expected {n} raster bytes, found {len(raster)}")
    img = np.frombuffer(raster, dtype=np.uint8).reshape(h, w, channels)
    return img[:, :, 0].copy() if channels == 1 else img.copy()


def write_pnm(path, img: np.ndarray) -> None:
    img = np.asarray(img)
    if img.dtype != np.uint8:
        raise FormatError(f"expected uint8 raster, got {img.dtype}")
    if img.ndim == 2:
        magic = b"P5"
    elif img.ndim == 3 and img.shape[2] == 3:
        magic = b"P6"
    else:
        raise FormatError(f"cannot write array of shape {img.shape}")
    h, w = img.shape[:2]
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(magic + b"\n%d %d\n255\n" % (w, h))
        f.write(np.ascontiguousarray(img).tobytes())


def image_to_u8(image: np.ndarray) -> np.ndarray:
    return np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)


def read_image(path) -> np.ndarray:
    """PPM -> float image in [0, 1], shape (H, W, 3)."""
    raw = read_pnm(path)
    if raw.ndim != 3:
        raise FormatError(f"{path}: expected a colour (P6) image")
    return raw.astype(np.float64) / 255.0


def write_image(path, image: np.ndarray) -> None:
    write_pnm(path, image_to_u8(image))


def read_mask(path) -> np.ndarray:
    """PGM mask -> uint8 array of 0/1. Any nonzero byte counts as foreground."""
    raw = read_pnm(path)
    if raw.ndim != 2:
        raise FormatError(f"{path}: expected a grayscale (P5) mask")
    return (raw > 0).astype(np.uint8)


def write_mask(path, mask: np.ndarray) -> None:
    write_pnm(path, np.where(np.asarray(mask) > 0, 255, 0).astype(np.uint8))


def write_heatmap(path, heat: np.ndarray) -> None:
    """Foreground probabilities as 8-bit grey, value = round(255 * p)."""
    write_pnm(path, image_to_u8(heat))

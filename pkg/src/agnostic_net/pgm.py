"""Binary 8-bit PGM (P5) reading and writing."""

from __future__ import annotations

import re
from pathlib import Path

import numpy as np

_HEADER = re.compile(rb"\AP5(?:\s|#[^\n]*\n)+(\d+)(?:\s|#[^\n]*\n)+(\d+)(?:\s|#[^\n]*\n)+(\d+)\s")


class PGMError(ValueError):
    pass


def write_pgm(path, image: np.ndarray) -> None:
    """Write a 2-D array with values in [0, 1] as round(255 * v)."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 3 and image.shape[0] == 1:
        image = image[0]
    if image.ndim != 2:
        raise ValueError(f"PGM needs a 2-D image, got shape {image.shape}")
    pixels = np.rint(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)
    h, w = pixels.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(pixels.tobytes())


def read_pgm(path) -> np.ndarray:
    """Read a P5 file into a float64 array scaled to [0, 1]."""
    buf = Path(path).read_bytes()
    m = _HEADER.match(buf)
    if m is None:
        raise PGMError(f"{path}: not a binary (P5) PGM header")
    w, h, maxval = (int(g) for g in m.groups())
    if not 0 < maxval < 256:
        raise PGMError(f"{path}: only 8-bit PGM is supported (maxval {maxval})")
    body = buf[m.end():]
    if len(body) < w * h:
        raise PGMError(f"{path}: expected {w * h} pixel bytes, found {len(body)}")
    pixels = np.frombuffer(body, dtype=np.uint8, count=w * h).reshape(h, w)
    return pixels.astype(np.float64) / maxval

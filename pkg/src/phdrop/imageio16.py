"""16-bit PNG storage for float images in [0, 1]."""

from __future__ import annotations

from pathlib import Path

import numpy as np
import png


class ImageDecodeError(IOError):
    """A PNG file could not be decoded."""


def quantize16(image: np.ndarray) -> np.ndarray:
    """Snap values to the k/65535 grid so a PNG round trip is bit-exact."""
    k = np.round(np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0) * 65535.0)
    return (k / 65535.0).astype(np.float32)


def write_png16(path: str | Path, image: np.ndarray) -> None:
    a = np.asarray(image, dtype=np.float64)
    if a.ndim == 2:
        greyscale, planes = True, 1
    elif a.ndim == 3 and a.shape[2] == 3:
        greyscale, planes = False, 3
    else:
        raise ValueError(f"expected HxW or HxWx3 image, got shape {a.shape}")
    k = np.round(np.clip(a, 0.0, 1.0) * 65535.0).astype(np.uint16)
    h, w = k.shape[:2]
    writer = png.Writer(width=w, height=h, greyscale=greyscale, bitdepth=16)
    rows = k.reshape(h, w * planes)
    with open(path, "wb") as f:
        writer.write(f, rows)


def read_png16(path: str | Path) -> np.ndarray:
    """Read a PNG written by :func:`write_png16` as float32 in [0, 1]."""
    path = Path(path)
    try:
        w, h, rows, info = png.Reader(filename=str(path)).read()
        data = np.vstack([np.asarray(r, dtype=np.uint16) for r in rows])
    except (png.Error, EOFError, ValueError, OSError) as exc:
        raise ImageDecodeError(f"cannot decode image {path}: {exc}") from exc
    planes = info["planes"]
    if data.shape != (h, w * planes):
        raise ImageDecodeError(f"cannot decode image {path}: truncated pixel data")
    maxval = float(2 ** info["bitdepth"] - 1)
    img = (data.astype(np.float64) / maxval).astype(np.float32)
    return img.reshape(h, w) if planes == 1 else img.reshape(h, w, planes)

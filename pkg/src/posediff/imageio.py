"""8-bit RGB raster I/O. Internally images are float ``[3, H, W]`` in [-1, 1]."""

from __future__ import annotations

import numpy as np
from PIL import Image


def to_uint8(image) -> np.ndarray:
    """Map [-1, 1] to [0, 255], rounding half away from zero. Keeps channel-first layout."""
    x = np.asarray(image, dtype=np.float64)
    v = (np.clip(x, -1.0, 1.0) + 1.0) * 127.5
    return np.floor(v + 0.5).astype(np.uint8)


def from_uint8(pixels) -> np.ndarray:
    return np.asarray(pixels, dtype=np.float64) / 127.5 - 1.0


def write_image(path, image) -> None:
    """Write a ``[3, H, W]`` float image (or uint8 array) as PNG."""
    arr = np.asarray(image)
    if arr.dtype != np.uint8:
        arr = to_uint8(arr)
    Image.fromarray(np.ascontiguousarray(arr.transpose(1, 2, 0)), mode="RGB").save(path, format="PNG")


def read_image(path, as_uint8: bool = False) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB")).transpose(2, 0, 1).copy()
    return arr if as_uint8 else from_uint8(arr)


def read_mask(path) -> np.ndarray:
    """Binary ``[H, W]`` mask: luminance above one half marks the region to regenerate."""
    with Image.open(path) as im:
        lum = np.asarray(im.convert("L"), dtype=np.float64) / 255.0
    return (lum > 0.5).astype(np.float64)


def make_grid(rows, pad: int = 2, fill: float = 1.0) -> np.ndarray:
    """Tile a list of rows (each a list of ``[3, H, W]`` images) into one image."""
    rows = [[np.asarray(im, dtype=np.float64) for im in row] for row in rows]
    h, w = rows[0][0].shape[1:]
    ncols = max(len(r) for r in rows)
    grid = np.full((3, len(rows) * (h + pad) + pad, ncols * (w + pad) + pad), fill)
    for i, row in enumerate(rows):
        for j, im in enumerate(row):
            y, x = pad + i * (h + pad), pad + j * (w + pad)
            grid[:, y:y + h, x:x + w] = im
    return grid

"""Turning flattened image vectors into PNG bytes and tile grids.

Clamping to [0, 1] happens here, at the display boundary, and nowhere in
the distribution math.
"""

from __future__ import annotations

import io

import numpy as np
from PIL import Image

__all__ = ["to_uint8_image", "to_png_bytes", "write_png", "tile_grid"]


def to_uint8_image(vec: np.ndarray, shape: tuple[int, int, int]) -> np.ndarray:
    """Clamp to [0, 1] and quantise to an (H, W[, C]) uint8 array."""
    w, h, c = shape
    arr = np.clip(np.asarray(vec, dtype=np.float64), 0.0, 1.0).reshape(h, w, c)
    out = np.round(arr * 255.0).astype(np.uint8)
    return out[:, :, 0] if c == 1 else out


def to_png_bytes(vec: np.ndarray, shape: tuple[int, int, int]) -> bytes:
    img = Image.fromarray(to_uint8_image(vec, shape))
    buf = io.BytesIO()
    img.save(buf, format="PNG")
    return buf.getvalue()


def write_png(path: str, vec: np.ndarray, shape: tuple[int, int, int]) -> None:
    with open(path, "wb") as fh:
        fh.write(to_png_bytes(vec, shape))


def tile_grid(tiles: list[list[np.ndarray]], shape: tuple[int, int, int]) -> np.ndarray:
    """Assemble rows of flattened images into one flattened grid image.

    Returns the grid as a flat vector with geometry
    ``(cols * W, rows * H, C)``.
    """
    w, h, c = shape
    rows = []
    for row in tiles:
        rows.append(np.concatenate([vec.reshape(h, w, c) for vec in row], axis=1))
    grid = np.concatenate(rows, axis=0)
    return grid.reshape(-1)

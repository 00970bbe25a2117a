"""Dataset ingestion and synthetic generators.

Images are flattened row-major over (H, W, C) into vectors of length
S = W * H * C with intensities normalised to [0, 1].
"""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass

import numpy as np
from PIL import Image, UnidentifiedImageError

from .lowrank import LowRankGaussian

__all__ = [
    "ImageBatch",
    "flatten",
    "unflatten",
    "load_directory",
    "synthetic_lowrank",
    "blob_dataset",
]

log = logging.getLogger(__name__)


@dataclass
class ImageBatch:
    """A batch of flattened images.

    ``pixels`` has shape (n, S) with values in [0, 1]; ``shape`` is the
    (W, H, C) geometry with S = W * H * C.
    """

    pixels: np.ndarray
    shape: tuple[int, int, int]

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float64)
        w, h, c = self.shape
        if self.pixels.ndim != 2 or self.pixels.shape[1] != w * h * c:
            raise ValueError(
                f"pixels shape {self.pixels.shape} inconsistent with "
                f"(W, H, C) = {self.shape}"
            )

    def __len__(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.shape[0]

    @property
    def height(self) -> int:
        return self.shape[1]

    @property
    def channels(self) -> int:
        return self.shape[2]


def flatten(img: np.ndarray) -> np.ndarray:
    """Flatten an (H, W, C) image row-major into a vector."""
    return np.asarray(img, dtype=np.float64).reshape(-1)


def unflatten(vec: np.ndarray, shape: tuple[int, int, int]) -> np.ndarray:
    """Inverse of :func:`flatten` for a (W, H, C) geometry."""
    w, h, c = shape
    return np.asarray(vec, dtype=np.float64).reshape(h, w, c)


def load_directory(
    path: str,
    target_shape: tuple[int, int],
    grayscale: bool = False,
) -> tuple[ImageBatch, list[str]]:
    """Load every decodable PNG under ``path`` into one batch.

    Images are resized bilinearly to ``target_shape`` = (W, H), converted
    to luma when ``grayscale`` is set, normalised by 255 and flattened.
    Unreadable files are skipped with a warning; an empty result is an
    error.  Returns the batch plus the list of files actually used (for
    the dataset manifest).
    """
    w, h = target_shape
    rows = []
    used = []
    for name in sorted(os.listdir(path)):
        if not name.lower().endswith(".png"):
            continue
        full = os.path.join(path, name)
        try:
            with Image.open(full) as img:
                img = img.convert("L" if grayscale else "RGB")
                img = img.resize((w, h), Image.BILINEAR)
                arr = np.asarray(img, dtype=np.float64) / 255.0
        except (OSError, UnidentifiedImageError) as exc:
            log.warning("skipping unreadable image %s: %s", full, exc)
            continue
        if arr.ndim == 2:
            arr = arr[:, :, None]
        rows.append(flatten(arr))
        used.append(name)
    if not rows:
        raise ValueError(f"no usable PNG images found in {path}")
    c = 1 if grayscale else 3
    return ImageBatch(pixels=np.stack(rows), shape=(w, h, c)), used


def synthetic_lowrank(
    s: int, r: int, seed: int, n: int
) -> tuple[ImageBatch, LowRankGaussian]:
    """Draw a random ground-truth low-rank Gaussian and ``n`` samples from it.

    The truth is scaled so samples mostly land inside [0, 1]; they are
    clamped afterwards, so fitted-recovery checks should allow for the
    small clipping bias.  Returned with geometry (S, 1, 1).
    """
    if n < 1:
        raise ValueError("n must be at least 1")
    rng = np.random.default_rng(seed)
    mu = rng.uniform(0.4, 0.6, size=s)
    factor = rng.normal(scale=0.06, size=(s, r))
    diag = rng.uniform(1e-4, 4e-4, size=s)
    truth = LowRankGaussian(mu=mu, cov_factor=factor, cov_diag=diag)
    eps_p = rng.standard_normal((n, r))
    eps_d = rng.standard_normal((n, s))
    samples = mu + eps_p @ factor.T + np.sqrt(diag) * eps_d
    samples = np.clip(samples, 0.0, 1.0)
    return ImageBatch(pixels=samples, shape=(s, 1, 1)), truth


def blob_dataset(
    width: int,
    height: int,
    n: int,
    seed: int,
    noise: float = 0.1,
) -> ImageBatch:
    """Grayscale images of one soft blob at a random position, plus noise.

    A simple structured dataset for desk-scale training runs: each image
    is a Gaussian bump with random centre and fixed radius, with additive
    pixel noise of the given standard deviation, clamped to [0, 1].
    """
    rng = np.random.default_rng(seed)
    ys, xs = np.mgrid[0:height, 0:width]
    radius = 0.18 * min(width, height)
    imgs = np.empty((n, height * width))
    for i in range(n):
        cx = rng.uniform(0.25 * width, 0.75 * width)
        cy = rng.uniform(0.25 * height, 0.75 * height)
        bump = np.exp(-((xs - cx) ** 2 + (ys - cy) ** 2) / (2.0 * radius**2))
        img = 0.15 + 0.7 * bump + rng.normal(scale=noise, size=bump.shape)
        imgs[i] = np.clip(img, 0.0, 1.0).reshape(-1)
    return ImageBatch(pixels=imgs, shape=(width, height, 1))

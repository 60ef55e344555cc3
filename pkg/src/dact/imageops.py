"""Low-level image helpers: loading, grayscale, bilinear sampling/resizing.

All sampling uses the half-pixel-center convention (pixel (i, j) sits at
coordinate (i + 0.5, j + 0.5)) and edge-replicate padding, so warps and
resizes stay consistent between the flow solver and the augmentation path.
"""

from __future__ import annotations

import numpy as np
from PIL import Image

from .errors import DataError


def load_image(path) -> np.ndarray:
    """Load an image file as float32 RGB in [0, 1], shape (H, W, 3)."""
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float32)
    except OSError as exc:
        raise DataError(f"cannot read image {path}: {exc}") from exc
    return arr / 255.0


def save_png(path, img: np.ndarray) -> None:
    """Write a float array in [0, 1] (H, W) or (H, W, 3) as an 8-bit PNG."""
    arr = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path, format="PNG")


class ImageCache:
    """Memoizing image loader for repeated epoch passes over a corpus.

    Returned arrays are shared; callers must not mutate them in place.
    """

    def __init__(self, max_entries: int = 4096):
        self._cache: dict[str, np.ndarray] = {}
        self._max = max_entries

    def __call__(self, path) -> np.ndarray:
        key = str(path)
        img = self._cache.get(key)
        if img is None:
            img = load_image(path)
            if len(self._cache) >= self._max:
                self._cache.clear()
            self._cache[key] = img
        return img


def to_gray(img: np.ndarray) -> np.ndarray:
    """Unweighted channel mean; grayscale inputs pass through."""
    if img.ndim == 2:
        return np.asarray(img, dtype=np.float64)
    return np.asarray(img, dtype=np.float64).mean(axis=2)


def bilinear_sample(img: np.ndarray, ys: np.ndarray, xs: np.ndarray) -> np.ndarray:
    """Sample img at fractional array coordinates (ys, xs), edge-clamped.

    Coordinates are in array index units (row, col). img may be (H, W) or
    (H, W, C); the trailing channel axis is sampled jointly.
    """
    h, w = img.shape[:2]
    ys = np.clip(ys, 0.0, h - 1.0)
    xs = np.clip(xs, 0.0, w - 1.0)
    y0 = np.floor(ys).astype(np.intp)
    x0 = np.floor(xs).astype(np.intp)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = ys - y0
    wx = xs - x0
    if img.ndim == 3:
        wy = wy[..., None]
        wx = wx[..., None]
    top = img[y0, x0] * (1.0 - wx) + img[y0, x1] * wx
    bot = img[y1, x0] * (1.0 - wx) + img[y1, x1] * wx
    return top * (1.0 - wy) + bot * wy


def resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize with half-pixel centers; identity when sizes match."""
    h, w = img.shape[:2]
    if (h, w) == (out_h, out_w):
        return img.copy()
    ys = (np.arange(out_h) + 0.5) * (h / out_h) - 0.5
    xs = (np.arange(out_w) + 0.5) * (w / out_w) - 0.5
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    return bilinear_sample(img, yy, xx)


def central_diff(img: np.ndarray, axis: int) -> np.ndarray:
    """Central difference with edge replication along the given axis."""
    fwd = np.roll(img, -1, axis=axis)
    bwd = np.roll(img, 1, axis=axis)
    # replicate edges: one-sided difference at the borders
    if axis == 0:
        fwd[-1] = img[-1]
        bwd[0] = img[0]
    else:
        fwd[:, -1] = img[:, -1]
        bwd[:, 0] = img[:, 0]
    return 0.5 * (fwd - bwd)

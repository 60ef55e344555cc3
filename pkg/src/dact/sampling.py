"""Temporal frame selection and spatial augmentation.

Three samplers cover the evaluation and training regimes: deterministic
segment middles, one random frame per segment, and a random run of
consecutive frames (wrapping). Spatial augmentation draws a single
transform per sample and applies it to every frame, preserving motion
coherence for flow-fused inputs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InsufficientFramesError
from .imageops import bilinear_sample

SAMPLING_MODES = ("segments_middle", "segments_random", "consecutive")


@dataclass
class SamplingPlan:
    mode: str = "segments_middle"
    n_segments: int = 4

    def __post_init__(self):
        if self.mode not in SAMPLING_MODES:
            raise ValueError(f"unknown sampling mode {self.mode!r}")
        if self.n_segments < 1:
            raise ValueError("n_segments must be >= 1")


@dataclass
class AugmentParams:
    scale_range: tuple = (0.8, 1.2)
    rotation_range_deg: tuple = (-20.0, 20.0)
    crop_range: tuple = (0.7, 1.0)  # crop side as fraction of post-rotation side
    output_side: int = 224

    def __post_init__(self):
        if min(self.scale_range) <= 0:
            raise ValueError("scale_range must be positive")
        if not 0 < min(self.crop_range) <= max(self.crop_range) <= 1:
            raise ValueError("crop_range must lie in (0, 1]")
        if self.output_side < 8:
            raise ValueError("output_side must be >= 8")


def _segment_bounds(total, n):
    return [(total * s) // n for s in range(n + 1)]


def sample_segments_middle(total: int, n: int) -> list[int]:
    """Middle frame of each of n contiguous segments; empty segments reuse
    the nearest preceding non-empty segment's index."""
    if total < 1 or n < 1:
        raise ValueError("total and n must be >= 1")
    bounds = _segment_bounds(total, n)
    picks: list[int | None] = []
    for s in range(n):
        start, end = bounds[s], bounds[s + 1]
        picks.append(start + (end - start) // 2 if end > start else None)
    # fill empties from the left, then the right for leading gaps
    last = None
    for s in range(n):
        if picks[s] is None:
            picks[s] = last
        else:
            last = picks[s]
    nxt = None
    for s in range(n - 1, -1, -1):
        if picks[s] is None:
            picks[s] = nxt
        else:
            nxt = picks[s]
    return [int(p) for p in picks]


def sample_segments_random(total: int, n: int, rng: np.random.Generator) -> list[int]:
    """One uniform draw inside each segment; requires total >= n."""
    if total < n:
        raise InsufficientFramesError(
            f"need at least {n} frames for segment sampling, got {total}")
    bounds = _segment_bounds(total, n)
    return [int(rng.integers(bounds[s], bounds[s + 1])) for s in range(n)]


def sample_consecutive(total: int, n: int, rng: np.random.Generator) -> list[int]:
    """A run of n consecutive indices from a uniform start, wrapping."""
    if total < 1:
        raise ValueError("total must be >= 1")
    start = int(rng.integers(0, total))
    return [(start + j) % total for j in range(n)]


def sample_indices(mode: str, total: int, n: int,
                   rng: np.random.Generator | None = None) -> list[int]:
    if mode == "segments_middle":
        return sample_segments_middle(total, n)
    if mode == "segments_random":
        return sample_segments_random(total, n, rng)
    if mode == "consecutive":
        return sample_consecutive(total, n, rng)
    raise ValueError(f"unknown sampling mode {mode!r}")


def draw_transform(shape, params: AugmentParams, rng: np.random.Generator | None,
                   eval_mode: bool):
    """Draw one (scale, angle, crop) instance for an input of this shape."""
    h, w = shape[:2]
    if eval_mode:
        scale, theta, frac = 1.0, 0.0, 1.0
        crop = frac * min(h, w)
        y0 = (h - crop) / 2.0
        x0 = (w - crop) / 2.0
    else:
        scale = rng.uniform(*params.scale_range)
        theta = np.deg2rad(rng.uniform(*params.rotation_range_deg))
        frac = rng.uniform(*params.crop_range)
        hs, ws = scale * h, scale * w
        crop = frac * min(hs, ws)
        y0 = rng.uniform(0.0, max(hs - crop, 0.0))
        x0 = rng.uniform(0.0, max(ws - crop, 0.0))
    return scale, theta, crop, y0, x0


def _apply_transform(img, scale, theta, crop, y0, x0, out_side):
    h, w = img.shape[:2]
    hs, ws = scale * h, scale * w
    # clamp the crop window inside the scaled-rotated canvas
    crop = min(crop, hs, ws)
    y0 = min(max(y0, 0.0), hs - crop)
    x0 = min(max(x0, 0.0), ws - crop)

    step = crop / out_side
    ys = y0 + (np.arange(out_side) + 0.5) * step
    xs = x0 + (np.arange(out_side) + 0.5) * step
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    # undo the rotation about the scaled-image center
    cy, cx = hs / 2.0, ws / 2.0
    cos_t, sin_t = np.cos(theta), np.sin(theta)
    ry = cos_t * (yy - cy) + sin_t * (xx - cx) + cy
    rx = -sin_t * (yy - cy) + cos_t * (xx - cx) + cx
    # undo the scaling, back to source index coordinates
    sy = ry / scale - 0.5
    sx = rx / scale - 0.5
    return bilinear_sample(img, sy, sx)


def augment_spatial(frames, params: AugmentParams,
                    rng: np.random.Generator | None = None,
                    eval_mode: bool = False) -> list[np.ndarray]:
    """Apply one jointly-drawn scale/rotate/crop/resize to every frame.

    All frames must share dimensions. Outputs are output_side x output_side
    with the input's channel layout. eval_mode is a deterministic center
    crop + resize.
    """
    if not frames:
        return []
    shape = frames[0].shape
    for f in frames[1:]:
        if f.shape != shape:
            raise ValueError("all frames of a sample must share dimensions")
    if not eval_mode and rng is None:
        raise ValueError("rng required unless eval_mode")
    inst = draw_transform(shape, params, rng, eval_mode)
    return [_apply_transform(f, *inst, params.output_side) for f in frames]

"""Synthetic desk-scale corpus generator.

Videos show a single textured patch over a fixed background whose red and
blue channels ramp along x and y. Class identity is carried ONLY by the
patch's motion pattern (translation direction, sway, stillness); subject
identity ONLY by appearance (background texture, patch color and shape).
The color ramps make patch position visible to globally-pooled features,
so motion classes stay learnable after spatial pooling.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter

from .dataset import DatasetManifest, FrameRecord, write_manifest
from .errors import ConfigError, DataError
from .imageops import save_png
from .seeding import derive_rng

# (name, unit direction); "move_*" translates, "sway_*" oscillates
_PATTERNS = [
    ("still", (0.0, 0.0)),
    ("move_right", (1.0, 0.0)),
    ("move_down", (0.0, 1.0)),
    ("move_left", (-1.0, 0.0)),
    ("sway_x", (1.0, 0.0)),
    ("move_up", (0.0, -1.0)),
    ("sway_y", (0.0, 1.0)),
    ("move_down_right", (0.7071, 0.7071)),
    ("move_up_left", (-0.7071, -0.7071)),
    ("sway_diag", (0.7071, 0.7071)),
    ("move_down_left", (-0.7071, 0.7071)),
    ("move_up_right", (0.7071, -0.7071)),
]

_SHAPES = ("square", "circle", "diamond")


@dataclass
class CorpusConfig:
    classes: int = 5
    subjects: int = 10
    videos_per: int = 1  # videos per (subject, class)
    frames: int = 16
    side: int = 64
    noise: float = 0.02  # uniform pixel noise amplitude
    test_frame_fraction: float = 0.0
    style_permutation: tuple | None = None  # subject index -> style index

    def validate(self):
        if not 1 <= self.classes <= len(_PATTERNS):
            raise ConfigError(f"classes must be in [1, {len(_PATTERNS)}]")
        if self.subjects < 1 or self.videos_per < 1 or self.frames < 1:
            raise ConfigError("subjects, videos_per and frames must be >= 1")
        if self.side < 16:
            raise ConfigError("side must be >= 16")
        if not 0.0 <= self.test_frame_fraction < 1.0:
            raise ConfigError("test_frame_fraction must be in [0, 1)")
        if self.style_permutation is not None:
            if sorted(self.style_permutation) != list(range(self.subjects)):
                raise ConfigError("style_permutation must permute subject indices")


def class_names(config: CorpusConfig) -> list[str]:
    return [_PATTERNS[c][0] for c in range(config.classes)]


def _subject_style(seed, style_index, side):
    rng = derive_rng(seed, "style", style_index)
    texture = gaussian_filter(rng.random((side, side)), side / 8.0, mode="wrap")
    span = texture.max() - texture.min()
    texture = (texture - texture.min()) / (span if span > 0 else 1.0) - 0.5
    # colors drawn from the extreme bands so the patch never blends into
    # the mid-tone background ramps
    lo = rng.uniform(0.05, 0.25, 3)
    hi = rng.uniform(0.75, 0.95, 3)
    color = np.where(rng.random(3) < 0.5, lo, hi)
    return {
        "texture": texture * 0.12,
        "texture_gain": rng.uniform(0.5, 1.0, 3),
        "patch_color": color,
        "shape": _SHAPES[int(rng.integers(len(_SHAPES)))],
    }


def _background(style, side):
    ramp = np.linspace(0.15, 0.85, side)
    bg = np.empty((side, side, 3))
    bg[:, :, 0] = ramp[None, :]  # red ramps along x
    bg[:, :, 1] = 0.45
    bg[:, :, 2] = ramp[:, None]  # blue ramps along y
    bg += style["texture"][:, :, None] * style["texture_gain"][None, None, :]
    return bg


def _patch_masks(side, cx, cy, half, shape):
    """(full patch mask, interior mask); the 1.2px rim between them is drawn
    white for every subject so the patch stays visible on any background."""
    yy, xx = np.meshgrid(np.arange(side, dtype=np.float64),
                         np.arange(side, dtype=np.float64), indexing="ij")
    dx = np.abs(xx - cx)
    dy = np.abs(yy - cy)
    if shape == "square":
        dist = np.maximum(dx, dy) - half
    elif shape == "circle":
        dist = np.sqrt(dx * dx + dy * dy) - half * 1.128
    else:  # diamond
        dist = (dx + dy) - half * 1.414
    outer = np.clip(0.5 - dist, 0.0, 1.0)  # 1px antialiased edge
    inner = np.clip(0.5 - (dist + 1.2), 0.0, 1.0)
    return outer, inner


def _positions(pattern_name, direction, start, excursion, n_frames):
    t = np.arange(n_frames, dtype=np.float64)
    if pattern_name == "still":
        off = np.zeros(n_frames)
    elif pattern_name.startswith("sway"):
        off = excursion * np.sin(2.0 * np.pi * 1.5 * t / max(n_frames - 1, 1))
    else:
        off = excursion * (2.0 * t / max(n_frames - 1, 1) - 1.0)
    dx, dy = direction
    return start[0] + dx * off, start[1] + dy * off


def synth_corpus(config: CorpusConfig, seed: int, out_dir) -> DatasetManifest:
    """Render the corpus under out_dir and write manifest.csv + classes.txt.

    Deterministic for a fixed (config, seed): reruns produce byte-identical
    frames.
    """
    config.validate()
    out_dir = os.fspath(out_dir)
    try:
        os.makedirs(out_dir, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create output directory {out_dir}: {exc}") from exc

    side = config.side
    patch_half = max(3.0, side * 0.19)
    jitter_amp = side * 0.05
    excursion = 0.8 * (side / 2.0 - patch_half - jitter_amp - 1.0)
    if excursion <= 1.0:
        raise ConfigError(f"side {side} too small for patch motion")

    records = []
    for s_idx in range(config.subjects):
        style_index = (config.style_permutation[s_idx]
                       if config.style_permutation is not None else s_idx)
        style = _subject_style(seed, style_index, side)
        bg = _background(style, side)
        subject_id = f"s{s_idx:02d}"
        for c_idx in range(config.classes):
            name, direction = _PATTERNS[c_idx]
            for v_idx in range(config.videos_per):
                vid_rng = derive_rng(seed, "video", s_idx, c_idx, v_idx)
                start = (side / 2.0 + vid_rng.uniform(-jitter_amp, jitter_amp),
                         side / 2.0 + vid_rng.uniform(-jitter_amp, jitter_amp))
                xs, ys = _positions(name, direction, start, excursion,
                                    config.frames)
                n_test = int(round(config.test_frame_fraction * config.frames))
                test_at = set()
                if n_test:
                    test_at = set(vid_rng.choice(config.frames, size=n_test,
                                                 replace=False).tolist())
                vdir = os.path.join(f"s{s_idx:02d}", f"c{c_idx:02d}", f"v{v_idx:02d}")
                os.makedirs(os.path.join(out_dir, vdir), exist_ok=True)
                for t in range(config.frames):
                    outer, inner = _patch_masks(side, xs[t], ys[t], patch_half,
                                                style["shape"])
                    outer = outer[:, :, None]
                    inner = inner[:, :, None]
                    img = (bg * (1.0 - outer) + 1.0 * (outer - inner)
                           + style["patch_color"] * inner)
                    img = img + vid_rng.uniform(-config.noise, config.noise,
                                                (side, side, 3))
                    rel = os.path.join(vdir, f"f{t:03d}.png")
                    save_png(os.path.join(out_dir, rel), np.clip(img, 0.0, 1.0))
                    records.append(FrameRecord(
                        path=rel,
                        subject_id=subject_id,
                        class_label=c_idx,
                        frame_index=v_idx * config.frames + t,
                        split_tag="test" if t in test_at else "train",
                    ))

    manifest = DatasetManifest(records=records, class_names=class_names(config),
                               subjects=[f"s{i:02d}" for i in range(config.subjects)],
                               root=out_dir)
    write_manifest(manifest, os.path.join(out_dir, "manifest.csv"))
    return manifest

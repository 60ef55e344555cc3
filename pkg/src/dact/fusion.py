"""Motion Fused Frames: RGB frames with appended quantized-flow channels.

Each selected frame at sequence position t carries the flow of the m
consecutive pairs ending at t, i.e. (t-m, t-m+1) ... (t-1, t), clamped at
the sequence start. Channel order per group is [R, G, B, u1, v1, ..., um, vm],
all normalized to [0, 1]. Flow files live at <video_dir>/flow/<t>.qflow for
the pair (t, t+1), where t is the position within the sequence.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .dataset import ActionSequence
from .errors import MissingFlowError
from .flow import QuantizedFlow, read_qflow
from .imageops import load_image

NEUTRAL_Q = 128  # quantized zero displacement


@dataclass
class MotionFusedSample:
    groups: list[np.ndarray]  # each (3 + 2m, side, side), float32 in [0, 1]
    flow_frames: int

    def __len__(self):
        return len(self.groups)

    def to_array(self) -> np.ndarray:
        return np.stack(self.groups, axis=0)


def flow_path(sequence: ActionSequence, pair_index: int, root: str = ".") -> str:
    """File path for the flow of pair (pair_index, pair_index + 1)."""
    frame = sequence.frames[pair_index]
    base = frame.path if os.path.isabs(frame.path) \
        else os.path.normpath(os.path.join(root, frame.path))
    return os.path.join(os.path.dirname(base), "flow", f"{pair_index}.qflow")


class FlowStore:
    """Disk-backed quantized-flow lookup with a small in-memory cache."""

    def __init__(self, root: str = ".", cache_size: int = 256):
        self.root = root
        self._cache: dict[str, QuantizedFlow] = {}
        self._cache_size = cache_size

    def path_for(self, sequence: ActionSequence, pair_index: int) -> str:
        return flow_path(sequence, pair_index, self.root)

    def get(self, sequence: ActionSequence, pair_index: int) -> QuantizedFlow:
        path = self.path_for(sequence, pair_index)
        hit = self._cache.get(path)
        if hit is not None:
            return hit
        if not os.path.exists(path):
            raise MissingFlowError(
                f"missing flow for pair ({pair_index}, {pair_index + 1}) of "
                f"subject {sequence.subject_id!r} class {sequence.class_label}: "
                f"{path}")
        qf = read_qflow(path)
        if len(self._cache) >= self._cache_size:
            self._cache.clear()
        self._cache[path] = qf
        return qf


def _neutral_planes(h, w, m):
    return [np.full((h, w), NEUTRAL_Q / 255.0) for _ in range(2 * m)]


def assemble_mff(rgb_indices, sequence: ActionSequence, flow_store,
                 m: int, loader=None, root: str = ".",
                 augment=None) -> MotionFusedSample:
    """Build the (3 + 2m)-channel groups for the selected frame positions.

    loader maps a path to an (H, W, 3) float array in [0, 1]; augment, if
    given, maps the list of stacked (H, W, 3 + 2m) frames to transformed
    frames (one transform instance for the whole sample).
    """
    if m < 0:
        raise ValueError("flow frame count m must be >= 0")
    loader = loader or load_image
    total = len(sequence.frames)
    stacks = []
    for t in rgb_indices:
        rec = sequence.frames[t]
        path = rec.path if os.path.isabs(rec.path) \
            else os.path.normpath(os.path.join(root, rec.path))
        rgb = loader(path)
        h, w = rgb.shape[:2]
        if m == 0:
            stacks.append(np.asarray(rgb, dtype=np.float64))
            continue
        planes = []
        if total < 2:
            planes = _neutral_planes(h, w, m)
        else:
            for p in range(t - m, t):
                qf = flow_store.get(sequence, max(p, 0))
                planes.append(qf.qu.astype(np.float64) / 255.0)
                planes.append(qf.qv.astype(np.float64) / 255.0)
        stacks.append(np.concatenate([rgb] + [pl[:, :, None] for pl in planes],
                                     axis=2))
    if augment is not None:
        stacks = augment(stacks)
    groups = [np.ascontiguousarray(s.transpose(2, 0, 1), dtype=np.float32)
              for s in stacks]
    return MotionFusedSample(groups=groups, flow_frames=m)


def inflate_first_conv(weights: np.ndarray, m: int) -> np.ndarray:
    """Extend a (out, 3, k, k) kernel to (out, 3 + 2m, k, k): RGB slices are
    copied, each new channel gets the element-wise mean of the RGB slices."""
    if m < 0:
        raise ValueError("flow frame count m must be >= 0")
    if weights.ndim != 4 or weights.shape[1] != 3:
        raise ValueError(f"expected (out, 3, k, k) kernel, got {weights.shape}")
    if m == 0:
        return weights.copy()
    mean = weights.mean(axis=1, keepdims=True)
    extra = np.repeat(mean, 2 * m, axis=1)
    return np.concatenate([weights, extra], axis=1)

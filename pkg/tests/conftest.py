import numpy as np
import pytest
from scipy.ndimage import gaussian_filter

from dact.dataset import ActionSequence, FrameRecord
from dact.flow import QuantizedFlow
from dact.synth import CorpusConfig, synth_corpus


def smooth_texture(seed, size=96, sigma=2.0):
    """Band-limited random texture in [0, 1] with wrap-around continuity."""
    rng = np.random.default_rng(seed)
    tex = gaussian_filter(rng.random((size, size)), sigma, mode="wrap")
    return (tex - tex.min()) / (tex.max() - tex.min())


def shifted_pair(seed, side=64, shift=3, margin=16):
    """(img_t, img_t1) where content moves right by `shift` px; true flow
    is u=+shift, v=0."""
    big = smooth_texture(seed, size=side + 2 * margin)
    a = big[margin:margin + side, margin:margin + side]
    b = big[margin:margin + side, margin - shift:margin - shift + side]
    return a, b


def rel_error(analytic, numeric):
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    denom = max(np.linalg.norm(a) + np.linalg.norm(n), 1e-10)
    return np.linalg.norm(a - n) / denom


def numeric_gradient(f, x, h=1e-3):
    """Central finite differences of scalar f w.r.t. array x (in place)."""
    grad = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        ix = it.multi_index
        orig = x[ix]
        x[ix] = orig + h
        fp = f()
        x[ix] = orig - h
        fm = f()
        x[ix] = orig
        grad[ix] = (fp - fm) / (2.0 * h)
    return grad


def sampled_gradient_error(f, x, analytic, h=1e-3, max_entries=64, seed=0):
    """rel_error of analytic vs central differences over a deterministic
    subsample of entries (all entries for small tensors)."""
    flat = x.reshape(-1)
    aflat = np.asarray(analytic).reshape(-1)
    total = flat.size
    if total <= max_entries:
        picks = np.arange(total)
    else:
        picks = np.random.default_rng(seed).choice(total, max_entries,
                                                   replace=False)
    numeric = np.empty(len(picks))
    for j, idx in enumerate(picks):
        orig = flat[idx]
        flat[idx] = orig + h
        fp = f()
        flat[idx] = orig - h
        fm = f()
        flat[idx] = orig
        numeric[j] = (fp - fm) / (2.0 * h)
    return rel_error(aflat[picks], numeric)


def make_sequence(n_frames, subject="s00", label=0, split="train",
                  path_prefix="seq"):
    frames = [FrameRecord(f"{path_prefix}/f{i:03d}.png", subject, label, i, split)
              for i in range(n_frames)]
    return ActionSequence(subject, label, frames)


class ArrayLoader:
    """Path -> array loader backed by a dict (no disk)."""

    def __init__(self, images):
        self.images = images

    def __call__(self, path):
        return self.images[str(path)]


class FakeFlowStore:
    """Flow store returning canned planes keyed by pair index."""

    def __init__(self, side, by_pair=None, fill=200):
        self.side = side
        self.by_pair = by_pair or {}
        self.fill = fill
        self.requests = []

    def get(self, sequence, pair_index):
        self.requests.append(pair_index)
        if pair_index in self.by_pair:
            return self.by_pair[pair_index]
        qu = np.full((self.side, self.side), self.fill, dtype=np.uint8)
        qv = np.full((self.side, self.side), 255 - self.fill, dtype=np.uint8)
        return QuantizedFlow(self.side, self.side, qu, qv, 1.0)


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory):
    """3 classes x 4 subjects x 8 frames at side 32, on disk."""
    root = tmp_path_factory.mktemp("tiny_corpus")
    config = CorpusConfig(classes=3, subjects=4, videos_per=1, frames=8, side=32)
    manifest = synth_corpus(config, seed=123, out_dir=root)
    return manifest

"""SGD-with-momentum training loop with step-wise learning-rate drops.

The loop is defined purely in iterations: each mini-batch element samples a
sequence uniformly with replacement, picks N frame positions by the
configured temporal mode, augments spatially and assembles the fused
channel groups. Per-sample random streams derive from
(seed, purpose, iteration, slot), so results are independent of the
preprocessing worker count.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigError, NumericalAbort
from .fusion import assemble_mff
from .imageops import ImageCache
from .network import (NetworkConfig, NetworkParams, frozen_names, is_state,
                      loss_and_grads)
from .sampling import SAMPLING_MODES, AugmentParams, augment_spatial, sample_indices
from .seeding import derive_rng


@dataclass
class TrainConfig:
    batch_size: int = 32
    momentum: float = 0.9
    weight_decay: float = 5e-4
    base_lr: float = 1e-3
    schedule: tuple = ((1600, 10.0), (2800, 10.0))  # (iteration, divisor)
    total_iterations: int = 4000
    dropout: float = 0.3
    sampling: str = "segments_random"
    n_segments: int = 4
    flow_frames: int = 0
    class_weighted: bool = False  # inverse-frequency loss weights
    seed: int = 0

    def validate(self):
        if self.batch_size < 1 or self.total_iterations < 1:
            raise ConfigError("batch_size and total_iterations must be >= 1")
        if self.sampling not in SAMPLING_MODES:
            raise ConfigError(f"unknown sampling mode {self.sampling!r}")
        if self.n_segments < 1 or self.flow_frames < 0:
            raise ConfigError("need n_segments >= 1 and flow_frames >= 0")
        last = -1
        for it, div in self.schedule:
            if it <= last:
                raise ConfigError("schedule iterations must be strictly increasing")
            if it >= self.total_iterations:
                raise ConfigError("schedule iterations must precede total_iterations")
            if div <= 0:
                raise ConfigError("schedule divisors must be positive")
            last = it

    def to_text(self) -> str:
        sched = ",".join(f"{int(it)}:{div:g}" for it, div in self.schedule)
        lines = [
            f"batch_size={self.batch_size}",
            f"momentum={self.momentum!r}",
            f"weight_decay={self.weight_decay!r}",
            f"base_lr={self.base_lr!r}",
            f"schedule={sched}",
            f"total_iterations={self.total_iterations}",
            f"dropout={self.dropout!r}",
            f"sampling={self.sampling}",
            f"n_segments={self.n_segments}",
            f"flow_frames={self.flow_frames}",
            f"class_weighted={self.class_weighted}",
            f"seed={self.seed}",
        ]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "TrainConfig":
        kwargs = {}
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigError(f"bad config line {lineno}: {raw!r}")
            key, value = (s.strip() for s in line.split("=", 1))
            if key == "schedule":
                sched = []
                if value:
                    for part in value.split(","):
                        it_s, div_s = part.split(":")
                        sched.append((int(it_s), float(div_s)))
                kwargs[key] = tuple(sched)
            elif key in ("batch_size", "total_iterations", "n_segments",
                         "flow_frames", "seed"):
                kwargs[key] = int(value)
            elif key in ("momentum", "weight_decay", "base_lr", "dropout"):
                kwargs[key] = float(value)
            elif key == "class_weighted":
                kwargs[key] = value.lower() in ("1", "true", "yes")
            elif key == "sampling":
                kwargs[key] = value
            else:
                raise ConfigError(f"unknown config key {key!r} (line {lineno})")
        cfg = cls(**kwargs)
        cfg.validate()
        return cfg


@dataclass
class OptimizerState:
    velocity: dict[str, np.ndarray]
    iteration: int = 0


@dataclass
class TrainLog:
    rows: list = field(default_factory=list)  # (iteration, lr, loss, batch_acc)

    def append(self, iteration, lr, loss, batch_accuracy):
        self.rows.append((int(iteration), float(lr), float(loss),
                          float(batch_accuracy)))

    def to_csv(self) -> str:
        lines = ["iteration,lr,loss,batch_accuracy"]
        for it, lr, loss, acc in self.rows:
            lines.append(f"{it},{lr!r},{loss!r},{acc!r}")
        return "\n".join(lines) + "\n"

    def write(self, path):
        with open(path, "w", encoding="utf-8") as f:
            f.write(self.to_csv())


def lr_at(iteration: int, config: TrainConfig) -> float:
    """Base rate divided at every schedule point reached (inclusive)."""
    divisor = 1.0
    for point, div in config.schedule:
        if iteration >= point:
            divisor *= div
    return config.base_lr / divisor


def init_optimizer(params: NetworkParams) -> OptimizerState:
    return OptimizerState(
        velocity={n: np.zeros_like(t) for n, t in params.tensors.items()})


def sgd_step(params: NetworkParams, grads, state: OptimizerState, lr, momentum,
             weight_decay, frozen=frozenset()):
    """v <- mu*v + (g + lambda*w); w <- w - lr*v, applied to every learnable
    tensor. Frozen and state tensors are untouched."""
    for name in params.tensors:
        if is_state(name) or name in frozen:
            continue
        g = grads[name]
        if not np.all(np.isfinite(g)):
            raise NumericalAbort("non-finite gradient", tensor=name,
                                 iteration=state.iteration)
        w = params.tensors[name]
        g_eff = g + weight_decay * w
        v = state.velocity[name]
        v *= momentum
        v += g_eff
        w -= lr * v
    state.iteration += 1
    return params, state


def _preprocess(sequence, positions, flow_frames, flow_store, root, augment,
                rng, loader):
    def aug(stacks):
        return augment_spatial(stacks, augment, rng, eval_mode=False)

    sample = assemble_mff(positions, sequence, flow_store, flow_frames,
                          loader=loader, root=root, augment=aug)
    return sample.to_array()


def train(sequences, config: TrainConfig, params_init: NetworkParams,
          network_config: NetworkConfig, augment: AugmentParams | None = None,
          flow_store=None, root: str = ".", jobs: int = 1, loader=None):
    """Run the full iteration loop; returns (params, TrainLog).

    Deterministic for a fixed config.seed regardless of jobs.
    """
    config.validate()
    if not sequences:
        raise ConfigError("training split is empty")
    net_cfg = replace(network_config, dropout=config.dropout,
                      n_groups=config.n_segments)
    net_cfg.validate()
    if augment is None:
        augment = AugmentParams(output_side=net_cfg.backbone.input_side)
    if config.flow_frames > 0 and flow_store is None:
        raise ConfigError("flow_frames > 0 requires a flow store")
    if loader is None:
        loader = ImageCache()

    params = params_init
    state = init_optimizer(params)
    frozen = frozen_names(net_cfg)
    log = TrainLog()
    seed = config.seed
    class_weights = None
    if config.class_weighted:
        counts = np.bincount([s.class_label for s in sequences],
                             minlength=net_cfg.num_classes).astype(np.float64)
        class_weights = np.where(counts > 0, len(sequences)
                                 / (net_cfg.num_classes * np.maximum(counts, 1)),
                                 0.0)
    pool = ThreadPoolExecutor(max_workers=jobs) if jobs > 1 else None
    try:
        for it in range(config.total_iterations):
            batch_rng = derive_rng(seed, "batch", it)
            picks = batch_rng.integers(0, len(sequences), config.batch_size)

            def make(slot):
                seq = sequences[picks[slot]]
                t_rng = derive_rng(seed, "temporal", it, slot)
                positions = sample_indices(config.sampling, len(seq),
                                           config.n_segments, t_rng)
                a_rng = derive_rng(seed, "augment", it, slot)
                return _preprocess(seq, positions, config.flow_frames,
                                   flow_store, root, augment, a_rng, loader)

            slots = range(config.batch_size)
            arrays = list(pool.map(make, slots)) if pool else [make(s) for s in slots]
            x = np.stack(arrays)
            targets = np.array([sequences[picks[s]].class_label for s in slots])

            drop_rng = derive_rng(seed, "dropout", it)
            weights = class_weights[targets] if class_weights is not None else None
            loss, probs, grads = loss_and_grads(
                x, targets, params, net_cfg, mode="train", dropout_rng=drop_rng,
                update_stats=True, sample_weights=weights)
            if not np.isfinite(loss):
                raise NumericalAbort("non-finite loss", iteration=it)
            lr = lr_at(it, config)
            sgd_step(params, grads, state, lr, config.momentum,
                     config.weight_decay, frozen)
            acc = float((probs.argmax(axis=1) == targets).mean())
            log.append(it, lr, loss, acc)
    finally:
        if pool:
            pool.shutdown()
    return params, log

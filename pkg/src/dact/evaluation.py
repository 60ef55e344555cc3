"""Confusion matrices, derived metrics, k-fold orchestration and latency
benchmarking.

Confusion matrix convention: rows are true classes, columns predictions.
Macro precision averages over classes whose prediction column is non-empty.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from .dataset import ActionSequence, FrameSet, FoldPlan, frame_set_positions
from .errors import ConfigError, DataError
from .fusion import assemble_mff
from .imageops import ImageCache
from .network import NetworkConfig, forward_batch, init_params
from .sampling import AugmentParams, augment_spatial, sample_segments_middle
from .seeding import derive_rng
from .training import TrainConfig, train


def confusion_from_pairs(true_labels, predicted_labels, num_classes: int):
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    for t, p in zip(true_labels, predicted_labels):
        cm[int(t), int(p)] += 1
    return cm


def accuracy(cm) -> float:
    total = int(cm.sum())
    if total == 0:
        raise DataError("empty confusion matrix")
    return float(np.trace(cm)) / total


def per_class_precision(cm) -> np.ndarray:
    col = cm.sum(axis=0).astype(np.float64)
    diag = np.diag(cm).astype(np.float64)
    return np.where(col > 0, diag / np.maximum(col, 1), 0.0)


def per_class_recall(cm) -> np.ndarray:
    row = cm.sum(axis=1).astype(np.float64)
    diag = np.diag(cm).astype(np.float64)
    return np.where(row > 0, diag / np.maximum(row, 1), 0.0)


def macro_precision(cm) -> float:
    """Mean precision over classes that received at least one prediction."""
    col = cm.sum(axis=0)
    nonempty = col > 0
    if not nonempty.any():
        raise DataError("empty confusion matrix")
    prec = per_class_precision(cm)
    return float(prec[nonempty].mean())


def binary_collapse(cm, safe_class: int):
    """Merge all non-safe classes into 'distracted'.

    Returns (2x2 matrix with rows/cols ordered [safe, distracted], metrics
    dict with binary_accuracy and binary_recall of the distracted class).
    """
    c = cm.shape[0]
    if c < 2:
        raise DataError("binary collapse needs at least 2 classes")
    if not 0 <= safe_class < c:
        raise DataError(f"safe_class {safe_class} out of range [0, {c})")
    others = [i for i in range(c) if i != safe_class]
    tn = int(cm[safe_class, safe_class])
    fp = int(cm[safe_class, others].sum())
    fn = int(cm[others, safe_class].sum())
    tp = int(cm[np.ix_(others, others)].sum())
    cm2 = np.array([[tn, fp], [fn, tp]], dtype=np.int64)
    total = tn + fp + fn + tp
    metrics = {
        "binary_accuracy": (tn + tp) / total if total else 0.0,
        "binary_recall": tp / (tp + fn) if (tp + fn) else 0.0,
        "true_safe": tn,
        "false_distracted": fp,
        "false_safe": fn,
        "true_distracted": tp,
    }
    return cm2, metrics


@dataclass
class MetricsReport:
    accuracy: float | None = None
    per_class_precision: list = field(default_factory=list)
    per_class_recall: list = field(default_factory=list)
    macro_precision: float | None = None
    binary_accuracy: float | None = None
    binary_recall: float | None = None
    fold_accuracies: list | None = None
    fold_macro_precisions: list | None = None
    average_accuracy: float | None = None
    average_macro_precision: float | None = None
    latency_ms_per_video: float | None = None
    class_names: list | None = None

    def to_dict(self) -> dict:
        out = {}
        for key, value in self.__dict__.items():
            if value is None:
                continue
            if isinstance(value, np.ndarray):
                value = value.tolist()
            out[key] = value
        return out


def report_from_matrix(cm, class_names=None) -> MetricsReport:
    return MetricsReport(
        accuracy=accuracy(cm),
        per_class_precision=per_class_precision(cm).tolist(),
        per_class_recall=per_class_recall(cm).tolist(),
        macro_precision=macro_precision(cm),
        class_names=list(class_names) if class_names else None,
    )


@dataclass
class EvalConfig:
    network: NetworkConfig
    flow_frames: int = 0
    augment: AugmentParams | None = None
    batch_size: int = 16

    def resolved_augment(self) -> AugmentParams:
        return self.augment or AugmentParams(
            output_side=self.network.backbone.input_side)


def _item_sample(item, config: EvalConfig, flow_store, root, loader):
    if isinstance(item, FrameSet):
        sequence = item.source
        positions = frame_set_positions(item)
        if len(positions) != config.network.n_groups:
            raise DataError(
                f"frame set holds {len(positions)} frames, network expects "
                f"{config.network.n_groups}")
    elif isinstance(item, ActionSequence):
        sequence = item
        positions = sample_segments_middle(len(sequence), config.network.n_groups)
    else:
        raise DataError(f"cannot evaluate item of type {type(item).__name__}")
    aug = config.resolved_augment()

    def transform(stacks):
        return augment_spatial(stacks, aug, eval_mode=True)

    sample = assemble_mff(positions, sequence, flow_store, config.flow_frames,
                          loader=loader, root=root, augment=transform)
    return sample.to_array()


def evaluate(params, test_items, config: EvalConfig, flow_store=None,
             root: str = ".", loader=None, classify=None):
    """Confusion matrix over deterministically preprocessed items.

    FrameSets are used as-is; sequences are sampled by segment middles.
    classify, if given, maps an item directly to a predicted label and
    bypasses the network (stub hook for tests).
    """
    if not test_items:
        raise DataError("no items to evaluate")
    if loader is None:
        loader = ImageCache()
    num_classes = config.network.num_classes
    truths = []
    preds = []
    if classify is not None:
        for item in test_items:
            truths.append(_item_label(item))
            preds.append(int(classify(item)))
    else:
        batch = []
        labels = []
        for item in test_items:
            batch.append(_item_sample(item, config, flow_store, root, loader))
            labels.append(_item_label(item))
            if len(batch) == config.batch_size:
                preds.extend(_classify_batch(batch, params, config))
                truths.extend(labels)
                batch, labels = [], []
        if batch:
            preds.extend(_classify_batch(batch, params, config))
            truths.extend(labels)
    return confusion_from_pairs(truths, preds, num_classes)


def _item_label(item):
    return item.source.class_label if isinstance(item, FrameSet) else item.class_label


def _classify_batch(batch, params, config):
    x = np.stack(batch)
    logits, _ = forward_batch(x, params, config.network, mode="eval")
    return logits.argmax(axis=1).tolist()


def cross_validate(sequences, fold_plan: FoldPlan, train_config: TrainConfig,
                   network_config: NetworkConfig,
                   augment: AugmentParams | None = None, flow_store=None,
                   root: str = ".", jobs: int = 1, loader=None):
    """Train from scratch on each fold and evaluate on its held-out subjects.

    Returns (MetricsReport with per-fold and average metrics, list of
    per-fold confusion matrices).
    """
    if loader is None:
        loader = ImageCache()
    fold_accs = []
    fold_precs = []
    matrices = []
    for fold_index, (train_subjects, test_subjects) in enumerate(fold_plan.folds):
        train_set = set(train_subjects)
        test_set = set(test_subjects)
        train_seqs = [s for s in sequences if s.subject_id in train_set]
        test_seqs = [s for s in sequences if s.subject_id in test_set]
        if not train_seqs:
            raise ConfigError(f"fold {fold_index} has an empty training split")
        if not test_seqs:
            raise DataError(f"fold {fold_index} has an empty test split")
        fold_seed = int(derive_rng(train_config.seed, "fold", fold_index)
                        .integers(0, 2**31))
        fold_cfg = replace(train_config, seed=fold_seed)
        params = init_params(
            replace(network_config, dropout=fold_cfg.dropout,
                    n_groups=fold_cfg.n_segments),
            seed=fold_seed)
        params, _ = train(train_seqs, fold_cfg, params, network_config,
                          augment=augment, flow_store=flow_store, root=root,
                          jobs=jobs, loader=loader)
        eval_cfg = EvalConfig(
            network=replace(network_config, dropout=fold_cfg.dropout,
                            n_groups=fold_cfg.n_segments),
            flow_frames=fold_cfg.flow_frames, augment=augment)
        cm = evaluate(params, test_seqs, eval_cfg, flow_store=flow_store,
                      root=root, loader=loader)
        matrices.append(cm)
        fold_accs.append(accuracy(cm))
        fold_precs.append(macro_precision(cm))
    report = MetricsReport(
        fold_accuracies=fold_accs,
        fold_macro_precisions=fold_precs,
        average_accuracy=float(np.mean(fold_accs)),
        average_macro_precision=float(np.mean(fold_precs)),
    )
    return report, matrices


@dataclass
class LatencyReport:
    mean_ms: float
    p50_ms: float
    p95_ms: float
    samples: list

    def to_dict(self):
        return {"mean_ms": self.mean_ms, "p50_ms": self.p50_ms,
                "p95_ms": self.p95_ms, "n_samples": len(self.samples),
                "samples": self.samples}


def benchmark_latency(params, network_config: NetworkConfig, n_videos: int,
                      warmup: int = 2, frames_per_video: int = 16,
                      flow_frames: int = 0) -> LatencyReport:
    """Time eval-mode classification of single videos, batch size 1.

    Frames and flow planes are pre-generated in memory (flow is an offline
    product; disk I/O is excluded). The timed path is frame selection,
    eval augmentation, group assembly and the network forward.
    """
    if n_videos < 1:
        raise ConfigError("n_videos must be >= 1")
    side = network_config.backbone.input_side
    n = network_config.n_groups
    rng = derive_rng(0, "bench")
    videos = rng.random((warmup + n_videos, frames_per_video, side, side, 3))
    planes = rng.random((frames_per_video, side, side, 2 * flow_frames)) \
        if flow_frames else None
    aug = AugmentParams(output_side=side)

    times_ms = []
    for v in range(warmup + n_videos):
        t0 = time.perf_counter()
        picks = sample_segments_middle(frames_per_video, n)
        stacks = []
        for t in picks:
            if planes is not None:
                stacks.append(np.concatenate([videos[v, t], planes[t]], axis=2))
            else:
                stacks.append(videos[v, t])
        stacks = augment_spatial(stacks, aug, eval_mode=True)
        x = np.stack([s.transpose(2, 0, 1) for s in stacks])[None]
        forward_batch(x.astype(np.float32), params, network_config, mode="eval")
        elapsed = (time.perf_counter() - t0) * 1000.0
        if v >= warmup:
            times_ms.append(elapsed)
    arr = np.array(times_ms)
    return LatencyReport(mean_ms=float(arr.mean()),
                         p50_ms=float(np.percentile(arr, 50)),
                         p95_ms=float(np.percentile(arr, 95)),
                         samples=times_ms)

"""Command-line entry point.

Subcommands: synth, flow, train, eval, cv, bench. Every command resolves
its options from flags > config file > defaults, writes the resolved
configuration as JSON next to its outputs, and renders report figures
alongside the delimited output files.

Exit codes: 0 success, 2 configuration/usage error, 3 data error,
4 numerical abort.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace

from . import report as rpt
from .checkpoint import load_checkpoint, save_checkpoint
from .dataset import (generate_frame_sets, ingest_manifest, restructure,
                      sequences_for_split, subject_kfold)
from .errors import ConfigError, DactError, DataError, NumericalAbort
from .evaluation import (EvalConfig, benchmark_latency, binary_collapse,
                         cross_validate, evaluate, report_from_matrix)
from .flow import FlowParams, estimate_flow, quantize_flow, write_qflow
from .fusion import FlowStore, flow_path
from .imageops import load_image
from .network import (BackboneConfig, NetworkConfig, default_reduction_units,
                      init_params)
from .synth import CorpusConfig, synth_corpus
from .training import TrainConfig, train

_TRAIN_DEFAULTS = {
    "batch_size": 32,
    "momentum": 0.9,
    "weight_decay": 5e-4,
    "base_lr": 1e-3,
    "schedule": "1600:10,2800:10",
    "total_iterations": 4000,
    "dropout": 0.3,
    "sampling": "segments_random",
    "n_segments": 4,
    "flow_frames": 0,
    "class_weighted": False,
    "seed": 0,
}

_MODEL_DEFAULTS = {
    "side": 64,
    "stages": "16,32,64,128",
    "bn_freeze": "none",
    "reduction_units": -1,  # -1: auto (2048 when n_segments >= 8)
}


def _parse_schedule(text: str):
    sched = []
    if text:
        for part in text.split(","):
            try:
                it_s, div_s = part.split(":")
                sched.append((int(it_s), float(div_s)))
            except ValueError:
                raise ConfigError(f"bad schedule entry {part!r}; "
                                  "expected iteration:divisor") from None
    return tuple(sched)


def _parse_stages(text: str):
    try:
        widths = tuple(int(s) for s in text.split(","))
    except ValueError:
        raise ConfigError(f"bad stage widths {text!r}") from None
    if not widths:
        raise ConfigError("stage widths cannot be empty")
    return widths


def _load_config_file(path):
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    with open(path, encoding="utf-8") as f:
        text = f.read()
    if path.endswith(".json"):
        try:
            obj = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") \
                from exc
        if not isinstance(obj, dict):
            raise ConfigError(f"config file {path} must hold a JSON object")
        return obj
    cfg = TrainConfig.from_text(text)
    out = {k: getattr(cfg, k) for k in _TRAIN_DEFAULTS}
    out["schedule"] = ",".join(f"{it}:{div:g}" for it, div in cfg.schedule)
    return out


def _resolve(args, defaults):
    """flags > config file > defaults; unknown file keys are rejected."""
    resolved = dict(defaults)
    config_path = getattr(args, "config", None)
    if config_path:
        for key, value in _load_config_file(config_path).items():
            if key == "command":
                continue
            if key not in resolved:
                raise ConfigError(f"unknown config key {key!r} in {config_path}")
            resolved[key] = value
    for key, value in vars(args).items():
        if key in ("func", "config", "command") or value is None:
            continue
        resolved[key] = value
    return resolved


def _write_resolved(resolved, path):
    rpt.write_json(resolved, path)


def _train_config_from(resolved) -> TrainConfig:
    cfg = TrainConfig(
        batch_size=int(resolved["batch_size"]),
        momentum=float(resolved["momentum"]),
        weight_decay=float(resolved["weight_decay"]),
        base_lr=float(resolved["base_lr"]),
        schedule=_parse_schedule(str(resolved["schedule"])),
        total_iterations=int(resolved["total_iterations"]),
        dropout=float(resolved["dropout"]),
        sampling=str(resolved["sampling"]),
        n_segments=int(resolved["n_segments"]),
        flow_frames=int(resolved["flow_frames"]),
        class_weighted=bool(resolved["class_weighted"]),
        seed=int(resolved["seed"]),
    )
    cfg.validate()
    return cfg


def _network_config_from(resolved, num_classes, train_cfg) -> NetworkConfig:
    stages = _parse_stages(str(resolved["stages"]))
    reduction = int(resolved["reduction_units"])
    if reduction < 0:
        reduction = default_reduction_units(train_cfg.n_segments)
    elif reduction == 0:
        reduction = None
    cfg = NetworkConfig(
        backbone=BackboneConfig(
            input_channels=3 + 2 * train_cfg.flow_frames,
            stage_widths=stages,
            input_side=int(resolved["side"]),
            bn_freeze_policy=str(resolved["bn_freeze"]),
        ),
        n_groups=train_cfg.n_segments,
        num_classes=num_classes,
        reduction_units=reduction,
        dropout=train_cfg.dropout,
    )
    cfg.validate()
    return cfg


def cmd_synth(args) -> int:
    defaults = {"classes": 5, "subjects": 10, "videos": 1, "frames": 16,
                "side": 64, "noise": 0.02, "test_frame_fraction": 0.0,
                "seed": 0, "out": None}
    resolved = _resolve(args, defaults)
    if not resolved["out"]:
        raise ConfigError("--out is required")
    config = CorpusConfig(
        classes=int(resolved["classes"]),
        subjects=int(resolved["subjects"]),
        videos_per=int(resolved["videos"]),
        frames=int(resolved["frames"]),
        side=int(resolved["side"]),
        noise=float(resolved["noise"]),
        test_frame_fraction=float(resolved["test_frame_fraction"]),
    )
    manifest = synth_corpus(config, int(resolved["seed"]), resolved["out"])
    _write_resolved(resolved, os.path.join(resolved["out"], "resolved_config.json"))
    print(f"wrote {len(manifest.records)} frames for "
          f"{len(manifest.subjects)} subjects x {len(manifest.class_names)} "
          f"classes under {resolved['out']}")
    return 0


def _flow_params_from(resolved) -> FlowParams:
    return FlowParams(
        alpha=float(resolved["alpha"]),
        gamma=float(resolved["gamma"]),
        pyramid_scale=float(resolved["pyramid_scale"]),
        outer_iters=int(resolved["outer_iters"]),
        inner_iters=int(resolved["inner_iters"]),
        omega=float(resolved["omega"]),
        min_pyramid_side=int(resolved["min_side"]),
        presmooth_sigma=float(resolved["presmooth"]),
    )


def cmd_flow(args) -> int:
    defaults = {"manifest": None, "alpha": 30.0, "gamma": 10.0,
                "pyramid_scale": 0.9, "outer_iters": 5, "inner_iters": 20,
                "omega": 1.9, "min_side": 16, "presmooth": 0.8,
                "force": False, "jobs": 1}
    resolved = _resolve(args, defaults)
    if not resolved["manifest"]:
        raise ConfigError("--manifest is required")
    manifest = ingest_manifest(resolved["manifest"])
    params = _flow_params_from(resolved)
    sequences = restructure(manifest)

    tasks = []
    skipped = 0
    for seq in sequences:
        for t in range(len(seq.frames) - 1):
            out_path = flow_path(seq, t, manifest.root)
            if os.path.exists(out_path) and not resolved["force"]:
                skipped += 1
                continue
            tasks.append((seq, t, out_path))

    def compute(task):
        seq, t, out_path = task
        img_a = load_image(manifest.resolve(seq.frames[t].path))
        img_b = load_image(manifest.resolve(seq.frames[t + 1].path))
        qf = quantize_flow(estimate_flow(img_a, img_b, params))
        os.makedirs(os.path.dirname(out_path), exist_ok=True)
        write_qflow(out_path, qf)

    jobs = int(resolved["jobs"])
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            list(pool.map(compute, tasks))
    else:
        for task in tasks:
            compute(task)
    _write_resolved(resolved, os.path.join(manifest.root,
                                           "flow_resolved_config.json"))
    print(f"computed {len(tasks)} flow files ({skipped} already present)")
    return 0


def _prepare_training(args):
    resolved = _resolve(args, {**_TRAIN_DEFAULTS, **_MODEL_DEFAULTS,
                               "manifest": None, "out": None, "split": "train",
                               "jobs": 1})
    if not resolved["manifest"] or not resolved["out"]:
        raise ConfigError("--manifest and --out are required")
    manifest = ingest_manifest(resolved["manifest"])
    train_cfg = _train_config_from(resolved)
    net_cfg = _network_config_from(resolved, len(manifest.class_names), train_cfg)
    return resolved, manifest, train_cfg, net_cfg


def _split_sequences(manifest, split):
    sequences = restructure(manifest)
    if split != "all":
        sequences = sequences_for_split(sequences, split)
    if not sequences:
        raise DataError(f"no sequences in split {split!r}")
    return sequences


def cmd_train(args) -> int:
    resolved, manifest, train_cfg, net_cfg = _prepare_training(args)
    sequences = _split_sequences(manifest, resolved["split"])
    flow_store = FlowStore(manifest.root) if train_cfg.flow_frames > 0 else None
    params = init_params(net_cfg, seed=train_cfg.seed)
    params, log = train(sequences, train_cfg, params, net_cfg,
                        flow_store=flow_store, root=manifest.root,
                        jobs=int(resolved["jobs"]))
    out = resolved["out"]
    os.makedirs(out, exist_ok=True)
    save_checkpoint(params, os.path.join(out, "checkpoint.dact"))
    log.write(os.path.join(out, "train_log.csv"))
    with open(os.path.join(out, "train_config.txt"), "w", encoding="utf-8") as f:
        f.write(train_cfg.to_text())
    rpt.save_training_curves(log, os.path.join(out, "loss_curve.png"))
    _write_resolved(resolved, os.path.join(out, "resolved_config.json"))
    last = log.rows[-1]
    print(f"trained {train_cfg.total_iterations} iterations on "
          f"{len(sequences)} sequences; final loss {last[2]:.4f}, "
          f"batch accuracy {last[3]:.2f}")
    return 0


def cmd_eval(args) -> int:
    resolved = _resolve(args, {**_TRAIN_DEFAULTS, **_MODEL_DEFAULTS,
                               "manifest": None, "checkpoint": None,
                               "out": None, "split": "test", "frame_sets": 0,
                               "binary": False, "safe_class": 0})
    for key in ("manifest", "checkpoint", "out"):
        if not resolved[key]:
            raise ConfigError(f"--{key.replace('_', '-')} is required")
    if not os.path.exists(resolved["checkpoint"]):
        raise ConfigError(f"checkpoint not found: {resolved['checkpoint']}")
    manifest = ingest_manifest(resolved["manifest"])
    train_cfg = _train_config_from(resolved)
    net_cfg = _network_config_from(resolved, len(manifest.class_names), train_cfg)
    params = load_checkpoint(resolved["checkpoint"], net_cfg)
    sequences = _split_sequences(manifest, resolved["split"])

    n_sets = int(resolved["frame_sets"])
    if n_sets:
        if n_sets != net_cfg.n_groups:
            raise ConfigError(
                f"--frame-sets {n_sets} must match the network's "
                f"{net_cfg.n_groups} groups")
        items = [fs for seq in sequences for fs in generate_frame_sets(seq, n_sets)]
    else:
        items = sequences

    flow_store = FlowStore(manifest.root) if train_cfg.flow_frames > 0 else None
    eval_cfg = EvalConfig(network=net_cfg, flow_frames=train_cfg.flow_frames)
    cm = evaluate(params, items, eval_cfg, flow_store=flow_store,
                  root=manifest.root)
    metrics = report_from_matrix(cm, manifest.class_names)
    if resolved["binary"]:
        _, binary = binary_collapse(cm, int(resolved["safe_class"]))
        metrics.binary_accuracy = binary["binary_accuracy"]
        metrics.binary_recall = binary["binary_recall"]

    out = resolved["out"]
    os.makedirs(out, exist_ok=True)
    rpt.write_json(metrics.to_dict(), os.path.join(out, "metrics.json"))
    with open(os.path.join(out, "metrics.txt"), "w", encoding="utf-8") as f:
        f.write(rpt.metrics_table(metrics))
    rpt.confusion_to_csv(cm, os.path.join(out, "confusion.csv"),
                         manifest.class_names)
    rpt.save_confusion_figure(cm, os.path.join(out, "confusion.png"),
                              manifest.class_names)
    _write_resolved(resolved, os.path.join(out, "resolved_config.json"))
    print(f"evaluated {len(items)} items: accuracy {metrics.accuracy:.4f}")
    return 0


def cmd_cv(args) -> int:
    resolved = _resolve(args, {**_TRAIN_DEFAULTS, **_MODEL_DEFAULTS,
                               "manifest": None, "out": None, "split": "train",
                               "k": 5, "jobs": 1})
    if not resolved["manifest"] or not resolved["out"]:
        raise ConfigError("--manifest and --out are required")
    manifest = ingest_manifest(resolved["manifest"])
    train_cfg = _train_config_from(resolved)
    net_cfg = _network_config_from(resolved, len(manifest.class_names), train_cfg)
    sequences = _split_sequences(manifest, resolved["split"])
    plan = subject_kfold(sequences, int(resolved["k"]), train_cfg.seed)
    flow_store = FlowStore(manifest.root) if train_cfg.flow_frames > 0 else None
    metrics, matrices = cross_validate(sequences, plan, train_cfg, net_cfg,
                                       flow_store=flow_store, root=manifest.root,
                                       jobs=int(resolved["jobs"]))
    out = resolved["out"]
    os.makedirs(out, exist_ok=True)
    with open(os.path.join(out, "fold_plan.json"), "w", encoding="utf-8") as f:
        f.write(plan.to_json() + "\n")
    rpt.write_json(metrics.to_dict(), os.path.join(out, "cv_metrics.json"))
    with open(os.path.join(out, "cv_metrics.txt"), "w", encoding="utf-8") as f:
        f.write(rpt.metrics_table(metrics))
    for i, cm in enumerate(matrices):
        rpt.confusion_to_csv(cm, os.path.join(out, f"fold{i + 1}_confusion.csv"),
                             manifest.class_names)
    rpt.save_fold_accuracy_figure(metrics, os.path.join(out, "fold_accuracy.png"))
    _write_resolved(resolved, os.path.join(out, "resolved_config.json"))
    accs = " ".join(f"{a * 100:.2f}" for a in metrics.fold_accuracies)
    print(f"cv folds (%): {accs}  average: {metrics.average_accuracy * 100:.2f}")
    return 0


def cmd_bench(args) -> int:
    resolved = _resolve(args, {**_MODEL_DEFAULTS,
                               "n_segments": 4, "flow_frames": 0,
                               "videos": 20, "warmup": 2,
                               "frames_per_video": 16, "classes": 5,
                               "checkpoint": None, "out": None})
    if not resolved["out"]:
        raise ConfigError("--out is required")
    reduction = int(resolved["reduction_units"])
    n = int(resolved["n_segments"])
    net_cfg = NetworkConfig(
        backbone=BackboneConfig(
            input_channels=3 + 2 * int(resolved["flow_frames"]),
            stage_widths=_parse_stages(str(resolved["stages"])),
            input_side=int(resolved["side"]),
            bn_freeze_policy=str(resolved["bn_freeze"]),
        ),
        n_groups=n,
        num_classes=int(resolved["classes"]),
        reduction_units=(default_reduction_units(n) if reduction < 0
                         else (None if reduction == 0 else reduction)),
    )
    net_cfg.validate()
    if resolved["checkpoint"]:
        params = load_checkpoint(resolved["checkpoint"], net_cfg)
    else:
        params = init_params(net_cfg, seed=0)
    rep = benchmark_latency(params, net_cfg, int(resolved["videos"]),
                            warmup=int(resolved["warmup"]),
                            frames_per_video=int(resolved["frames_per_video"]),
                            flow_frames=int(resolved["flow_frames"]))
    out = resolved["out"]
    os.makedirs(out, exist_ok=True)
    rpt.write_json(rep.to_dict(), os.path.join(out, "latency.json"))
    rpt.save_latency_figure(rep, os.path.join(out, "latency_hist.png"))
    _write_resolved(resolved, os.path.join(out, "resolved_config.json"))
    print(f"latency ms/video over {len(rep.samples)} videos: "
          f"mean {rep.mean_ms:.2f}  p50 {rep.p50_ms:.2f}  p95 {rep.p95_ms:.2f}")
    return 0


def _add_train_options(p, include_out=True):
    p.add_argument("--manifest", help="dataset manifest CSV")
    if include_out:
        p.add_argument("--out", help="output directory")
    p.add_argument("--config", help="config file (key=value text or JSON)")
    p.add_argument("--split", choices=["train", "test", "unassigned", "all"])
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--momentum", type=float)
    p.add_argument("--weight-decay", type=float, dest="weight_decay")
    p.add_argument("--lr", type=float, dest="base_lr")
    p.add_argument("--schedule", help="lr drops, e.g. 1600:10,2800:10")
    p.add_argument("--iters", type=int, dest="total_iterations")
    p.add_argument("--dropout", type=float)
    p.add_argument("--sampling", choices=["segments_middle", "segments_random",
                                          "consecutive"])
    p.add_argument("--n", type=int, dest="n_segments",
                   help="frames selected per video")
    p.add_argument("--m", type=int, dest="flow_frames",
                   help="flow frames appended per selected frame")
    p.add_argument("--class-weighted", action="store_true", default=None,
                   dest="class_weighted",
                   help="weight the loss by inverse class frequency")
    p.add_argument("--seed", type=int)
    p.add_argument("--jobs", type=int, help="preprocessing workers")
    _add_model_options(p)


def _add_model_options(p):
    p.add_argument("--side", type=int, help="network input side")
    p.add_argument("--stages", help="backbone widths, e.g. 16,32,64,128")
    p.add_argument("--bn-freeze", choices=["none", "all_but_first"],
                   dest="bn_freeze")
    p.add_argument("--reduction-units", type=int, dest="reduction_units",
                   help="-1 auto, 0 none, else unit count")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dact",
        description="Spatio-temporal driver action classification pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="render a synthetic corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--classes", type=int)
    p.add_argument("--subjects", type=int)
    p.add_argument("--videos", type=int, help="videos per (subject, class)")
    p.add_argument("--frames", type=int, help="frames per video")
    p.add_argument("--side", type=int)
    p.add_argument("--noise", type=float)
    p.add_argument("--test-frame-fraction", type=float,
                   dest="test_frame_fraction")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("flow", help="precompute quantized flow files")
    p.add_argument("--manifest", required=True)
    p.add_argument("--config")
    p.add_argument("--alpha", type=float)
    p.add_argument("--gamma", type=float)
    p.add_argument("--pyramid-scale", type=float, dest="pyramid_scale")
    p.add_argument("--outer-iters", type=int, dest="outer_iters")
    p.add_argument("--inner-iters", type=int, dest="inner_iters")
    p.add_argument("--omega", type=float)
    p.add_argument("--min-side", type=int, dest="min_side")
    p.add_argument("--presmooth", type=float)
    p.add_argument("--force", action="store_true", default=None)
    p.add_argument("--jobs", type=int)
    p.set_defaults(func=cmd_flow)

    p = sub.add_parser("train", help="train a model")
    _add_train_options(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    _add_train_options(p)
    p.add_argument("--checkpoint")
    p.add_argument("--frame-sets", type=int, dest="frame_sets",
                   help="evaluate wrap-around frame sets of this size")
    p.add_argument("--binary", action="store_true", default=None)
    p.add_argument("--safe-class", type=int, dest="safe_class")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("cv", help="subject-disjoint cross validation")
    _add_train_options(p)
    p.add_argument("--k", type=int, help="number of folds")
    p.set_defaults(func=cmd_cv)

    p = sub.add_parser("bench", help="latency benchmark")
    p.add_argument("--out")
    p.add_argument("--config")
    p.add_argument("--n", type=int, dest="n_segments")
    p.add_argument("--m", type=int, dest="flow_frames")
    p.add_argument("--videos", type=int)
    p.add_argument("--warmup", type=int)
    p.add_argument("--frames-per-video", type=int, dest="frames_per_video")
    p.add_argument("--classes", type=int)
    p.add_argument("--checkpoint")
    _add_model_options(p)
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 2 if exc.code not in (0, None) else int(exc.code or 0)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericalAbort as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return 4
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except DactError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())

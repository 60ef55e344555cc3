"""Report rendering: JSON/CSV/plain-text tables plus matplotlib figures.

Figures are written to files next to the delimited output; nothing is
shown interactively.
"""

from __future__ import annotations

import json

import matplotlib
import numpy as np

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

from .evaluation import LatencyReport, MetricsReport  # noqa: E402
from .training import TrainLog  # noqa: E402


def write_json(obj, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(obj, f, indent=2, sort_keys=True)
        f.write("\n")


def confusion_to_csv(cm, path, class_names=None) -> None:
    names = class_names or [f"class_{i}" for i in range(cm.shape[0])]
    with open(path, "w", encoding="utf-8") as f:
        f.write("true\\pred," + ",".join(names) + "\n")
        for i, row in enumerate(cm):
            f.write(names[i] + "," + ",".join(str(int(v)) for v in row) + "\n")


def metrics_table(report: MetricsReport) -> str:
    lines = []
    if report.accuracy is not None:
        lines.append(f"accuracy          {report.accuracy:.4f}")
    if report.macro_precision is not None:
        lines.append(f"macro precision   {report.macro_precision:.4f}")
    if report.binary_accuracy is not None:
        lines.append(f"binary accuracy   {report.binary_accuracy:.4f}")
    if report.binary_recall is not None:
        lines.append(f"binary recall     {report.binary_recall:.4f}")
    if report.per_class_precision:
        names = report.class_names or [
            f"class_{i}" for i in range(len(report.per_class_precision))]
        lines.append("")
        lines.append(f"{'class':<18}{'precision':>10}{'recall':>10}")
        for name, p, r in zip(names, report.per_class_precision,
                              report.per_class_recall):
            lines.append(f"{name:<18}{p:>10.4f}{r:>10.4f}")
    if report.fold_accuracies:
        lines.append("")
        header = "".join(f"{'P' + str(i + 1):>9}"
                         for i in range(len(report.fold_accuracies)))
        lines.append(f"{'fold':<10}" + header + f"{'Average':>10}")
        accs = "".join(f"{a * 100:>9.2f}" for a in report.fold_accuracies)
        lines.append(f"{'acc (%)':<10}" + accs
                     + f"{report.average_accuracy * 100:>10.2f}")
        if report.fold_macro_precisions:
            precs = "".join(f"{p * 100:>9.2f}" for p in report.fold_macro_precisions)
            lines.append(f"{'prec (%)':<10}" + precs
                         + f"{report.average_macro_precision * 100:>10.2f}")
    if report.latency_ms_per_video is not None:
        lines.append(f"latency           {report.latency_ms_per_video:.2f} ms/video")
    return "\n".join(lines) + "\n"


def save_confusion_figure(cm, path, class_names=None) -> None:
    names = class_names or [f"class_{i}" for i in range(cm.shape[0])]
    fig, ax = plt.subplots(figsize=(5.5, 5))
    im = ax.imshow(cm, cmap="Blues")
    ax.set_xticks(range(len(names)), names, rotation=45, ha="right", fontsize=8)
    ax.set_yticks(range(len(names)), names, fontsize=8)
    ax.set_xlabel("predicted")
    ax.set_ylabel("true")
    thresh = cm.max() / 2.0 if cm.max() else 0.5
    for i in range(cm.shape[0]):
        for j in range(cm.shape[1]):
            ax.text(j, i, str(int(cm[i, j])), ha="center", va="center",
                    fontsize=7, color="white" if cm[i, j] > thresh else "black")
    fig.colorbar(im, ax=ax, shrink=0.8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_training_curves(log: TrainLog, path) -> None:
    rows = np.array(log.rows)
    fig, (ax1, ax2) = plt.subplots(2, 1, figsize=(6.5, 5), sharex=True)
    ax1.plot(rows[:, 0], rows[:, 2], lw=0.8)
    ax1.set_ylabel("loss")
    ax1.grid(alpha=0.3)
    ax2.plot(rows[:, 0], rows[:, 3], lw=0.8, color="tab:green")
    ax2.set_ylabel("batch accuracy")
    ax2.set_xlabel("iteration")
    ax2.set_ylim(0, 1.02)
    ax2.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_fold_accuracy_figure(report: MetricsReport, path) -> None:
    accs = report.fold_accuracies or []
    labels = [f"P{i + 1}" for i in range(len(accs))] + ["Avg"]
    values = [a * 100 for a in accs] + [report.average_accuracy * 100]
    fig, ax = plt.subplots(figsize=(6, 4))
    colors = ["tab:blue"] * len(accs) + ["tab:orange"]
    ax.bar(labels, values, color=colors)
    ax.set_ylabel("accuracy (%)")
    ax.set_ylim(0, 102)
    for x, v in enumerate(values):
        ax.text(x, v + 1, f"{v:.1f}", ha="center", fontsize=8)
    ax.grid(axis="y", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_latency_figure(rep: LatencyReport, path) -> None:
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.hist(rep.samples, bins=min(20, max(3, len(rep.samples) // 2)),
            color="tab:blue", alpha=0.8)
    for value, name, color in ((rep.p50_ms, "p50", "tab:green"),
                               (rep.p95_ms, "p95", "tab:red")):
        ax.axvline(value, color=color, ls="--", lw=1, label=f"{name}={value:.1f} ms")
    ax.set_xlabel("ms / video")
    ax.set_ylabel("count")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)

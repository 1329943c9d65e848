"""Matplotlib figure rendering for the training and report paths.

Figures are written next to the delimited outputs (metric log, report CSV)
so a run directory is self-describing without extra tooling.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402

from .metrics import Report  # noqa: E402
from .train import EpochRecord, LrSchedule, lr_schedule  # noqa: E402


def render_training_curves(records: list, path) -> None:
    """Train/validation loss and validation accuracy against epoch."""
    epochs = [r.epoch for r in records]
    fig, ax = plt.subplots(figsize=(7, 4.5))
    ax.plot(epochs, [r.train_loss for r in records], label="train loss", color="tab:blue")
    if any(r.val_loss is not None for r in records):
        ax.plot(epochs, [r.val_loss for r in records], label="val loss", color="tab:orange")
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    if any(r.val_acc is not None for r in records):
        ax2 = ax.twinx()
        ax2.plot(epochs, [r.val_acc for r in records], label="val accuracy",
                 color="tab:green", linestyle="--")
        ax2.set_ylabel("validation accuracy")
        ax2.set_ylim(0, 1.02)
    handles, labels = ax.get_legend_handles_labels()
    for other in fig.axes[1:]:
        h, l = other.get_legend_handles_labels()
        handles += h
        labels += l
    ax.legend(handles, labels, loc="center right")
    ax.set_title("training curves")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def render_lr_curve(schedule: LrSchedule, epochs: int, path) -> None:
    """The warmup-then-step learning-rate trajectory over the run."""
    xs, ys = [], []
    for e in range(epochs):
        for it in (0, schedule.iters_per_epoch // 2):
            xs.append(e + it / schedule.iters_per_epoch)
            ys.append(lr_schedule(e, it, schedule))
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(xs, ys, color="tab:red")
    ax.set_yscale("log")
    ax.set_xlabel("epoch")
    ax.set_ylabel("learning rate")
    ax.set_title("learning-rate schedule")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def render_class_f1(report: Report, path) -> None:
    """Per-class F1 bars for the aggregate scope, mean F1 as a reference line."""
    agg = report.aggregate
    names = list(report.class_names)
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.bar(names, [100 * v for v in agg.f1], color="tab:blue")
    ax.axhline(100 * agg.mean_f1, color="tab:red", linestyle="--",
               label=f"mean F1 = {100 * agg.mean_f1:.2f}")
    ax.set_ylabel("F1 (%)")
    ax.set_ylim(0, 105)
    ax.legend()
    ax.set_title("aggregate per-class F1")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def render_tile_oa(report: Report, path) -> None:
    """Overall accuracy per tile with the aggregate drawn last."""
    scopes = [t.scope.removeprefix("tile:") for t in report.tiles]
    fig, ax = plt.subplots(figsize=(max(5, 0.7 * len(scopes)), 4))
    colors = ["tab:blue"] * (len(scopes) - 1) + ["tab:green"]
    ax.bar(scopes, [100 * t.oa for t in report.tiles], color=colors)
    ax.set_ylabel("overall accuracy (%)")
    ax.set_ylim(0, 105)
    ax.set_title("per-tile overall accuracy")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)

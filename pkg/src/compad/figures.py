"""Matplotlib figures rendered next to the delimited outputs.

Training writes a loss-curve plot beside the metrics CSV, evaluation a
per-threshold mAP chart beside the result JSON/CSV, and inference a
timeline plot of predicted segments against ground truth.
"""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

from .data import Dataset
from .evaluation import EvalResult
from .model import Detection
from .training import EpochMetrics


def save_training_curves(metrics: Sequence[EpochMetrics], path: str | Path) -> None:
    epochs = [m.epoch for m in metrics]
    fig, ax = plt.subplots(figsize=(7, 4.5))
    ax.plot(epochs, [m.loss_total for m in metrics], label="total", lw=2)
    ax.plot(epochs, [m.loss_act for m in metrics], label="activity", ls="--")
    ax.plot(epochs, [m.loss_br for m in metrics], label="boundary", ls=":")
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.legend()
    ax.grid(alpha=0.3)
    map_points = [(m.epoch, m.map_avg) for m in metrics if m.map_avg is not None]
    if map_points:
        twin = ax.twinx()
        twin.plot(*zip(*map_points), color="tab:green", marker="o", label="mAP")
        twin.set_ylabel("avg mAP")
        twin.set_ylim(0, 1.05)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_map_chart(result: EvalResult, path: str | Path) -> None:
    thresholds = result.protocol.iou_thresholds
    values = [result.map_per_threshold[t] for t in thresholds]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.bar([f"{t:g}" for t in thresholds], values, color="tab:blue", alpha=0.8)
    ax.axhline(result.avg_map, color="tab:red", ls="--", label=f"avg {result.avg_map:.3f}")
    ax.set_xlabel("temporal IoU threshold")
    ax.set_ylabel("mAP")
    ax.set_ylim(0, 1.05)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_timelines(
    dataset: Dataset,
    detections: Sequence[Detection],
    path: str | Path,
    max_videos: int = 6,
    min_score: float = 0.05,
) -> None:
    """Ground-truth spans (green, above the axis) against predictions
    (red, below, opacity by score) for the first few videos."""
    videos = dataset.videos[:max_videos]
    if not videos:
        return
    by_video: dict[str, list[Detection]] = {}
    for d in detections:
        by_video.setdefault(d.video_id, []).append(d)
    fig, axes = plt.subplots(len(videos), 1, figsize=(8, 1.6 * len(videos)), squeeze=False)
    for ax, video in zip(axes[:, 0], videos):
        n = len(video.snippets)
        for g in video.ground_truth:
            ax.barh(1, g.end_snippet - g.start_snippet + 1, left=g.start_snippet,
                    height=0.7, color="tab:green", alpha=0.8)
        for d in sorted(by_video.get(video.video_id, []), key=lambda d: -d.score)[:8]:
            if d.score < min_score:
                continue
            ax.barh(0, d.end_snippet - d.start_snippet + 1, left=d.start_snippet,
                    height=0.7, color="tab:red", alpha=max(0.25, min(1.0, d.score)))
        ax.set_xlim(0, max(n, 1))
        ax.set_yticks([0, 1], ["pred", "gt"])
        ax.set_title(video.video_id, fontsize=9, loc="left")
    axes[-1, 0].set_xlabel("snippet index")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)

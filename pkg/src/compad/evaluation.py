"""Temporal-detection metrics: IoU-thresholded average precision per
class, mAP per threshold, and protocol averages.

Matching is greedy in score order: each prediction takes the unmatched
same-class ground truth in its own video with the highest temporal IoU,
provided that IoU clears the threshold. AP is the all-points interpolated
area under the precision envelope. Classes without ground truth are
skipped; mAP is the unweighted mean over the remaining classes.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import Dataset
from .model import Detection
from .temporal import temporal_iou


class EvalError(Exception):
    pass


@dataclass(frozen=True)
class GroundTruthInstance:
    video_id: str
    activity_class: int
    start_snippet: int
    end_snippet: int


PROTOCOL_THRESHOLDS = {
    "road": [0.1, 0.2, 0.3, 0.4, 0.5],
    "thumos14": [0.3, 0.4, 0.5, 0.6, 0.7],
    "activitynet13": [0.5, 0.75, 0.95],
    # the benchmark's official ten-threshold variant
    "activitynet13_full": [round(0.5 + 0.05 * i, 2) for i in range(10)],
}


@dataclass
class EvalProtocol:
    iou_thresholds: list[float]
    multi_label: bool = True
    name: str = "custom"

    def __post_init__(self):
        t = self.iou_thresholds
        if not t:
            raise EvalError("protocol needs at least one IoU threshold")
        if any(not (0.0 < x <= 1.0) for x in t):
            raise EvalError(f"thresholds must lie in (0, 1], got {t}")
        if any(b <= a for a, b in zip(t, t[1:])):
            raise EvalError(f"thresholds must be strictly increasing, got {t}")

    @classmethod
    def preset(cls, name: str) -> "EvalProtocol":
        if name not in PROTOCOL_THRESHOLDS:
            raise EvalError(
                f"unknown protocol {name!r}; choose from {sorted(PROTOCOL_THRESHOLDS)}"
            )
        return cls(iou_thresholds=list(PROTOCOL_THRESHOLDS[name]), name=name)


@dataclass
class EvalResult:
    protocol: EvalProtocol
    per_class: dict[int, dict[float, float]]  # class -> threshold -> AP
    map_per_threshold: dict[float, float]
    avg_map: float
    class_names: list[str] = field(default_factory=list)


def dataset_ground_truth(dataset: Dataset) -> list[GroundTruthInstance]:
    return [
        GroundTruthInstance(v.video_id, g.activity_class, g.start_snippet, g.end_snippet)
        for v in dataset.videos
        for g in v.ground_truth
    ]


def _sorted_predictions(predictions: Sequence[Detection]) -> list[Detection]:
    # descending score; ties by earlier start, then lower video id
    return sorted(predictions, key=lambda p: (-p.score, p.start_snippet, p.video_id))


def average_precision(
    predictions: Sequence[Detection],
    ground_truth: Sequence[GroundTruthInstance],
    activity_class: int,
    iou_threshold: float,
) -> float | None:
    """All-points interpolated AP for one class at one IoU threshold.

    Returns None when the class has no ground truth (such classes are
    skipped by mean_ap); zero predictions against existing ground truth
    give AP 0.
    """
    gts = [g for g in ground_truth if g.activity_class == activity_class]
    if not gts:
        return None
    preds = [p for p in _sorted_predictions(predictions) if p.activity_class == activity_class]
    if not preds:
        return 0.0

    by_video: dict[str, list[int]] = {}
    for idx, g in enumerate(gts):
        by_video.setdefault(g.video_id, []).append(idx)
    matched = [False] * len(gts)

    tp = np.zeros(len(preds))
    fp = np.zeros(len(preds))
    for i, pred in enumerate(preds):
        best_iou, best_idx = 0.0, -1
        for idx in by_video.get(pred.video_id, ()):
            if matched[idx]:
                continue
            g = gts[idx]
            iou = temporal_iou(
                (pred.start_snippet, pred.end_snippet), (g.start_snippet, g.end_snippet)
            )
            if iou > best_iou:
                best_iou, best_idx = iou, idx
        if best_idx >= 0 and best_iou >= iou_threshold:
            matched[best_idx] = True
            tp[i] = 1.0
        else:
            fp[i] = 1.0

    cum_tp = np.cumsum(tp)
    cum_fp = np.cumsum(fp)
    recall = cum_tp / len(gts)
    precision = cum_tp / (cum_tp + cum_fp)

    # precision envelope over the full recall axis
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mprec = np.concatenate([[0.0], precision, [0.0]])
    for i in range(len(mprec) - 2, -1, -1):
        mprec[i] = max(mprec[i], mprec[i + 1])
    return float(np.sum((mrec[1:] - mrec[:-1]) * mprec[1:]))


def mean_ap(
    predictions: Sequence[Detection],
    ground_truth: Sequence[GroundTruthInstance],
    protocol: EvalProtocol,
    num_classes: int | None = None,
    class_names: list[str] | None = None,
) -> EvalResult:
    """mAP per threshold (mean over classes with ≥ 1 GT instance) and the
    average over the protocol's thresholds."""
    if not ground_truth:
        raise EvalError("mean_ap is undefined without any ground truth")
    classes = sorted({g.activity_class for g in ground_truth})
    if num_classes is not None:
        classes = [c for c in range(num_classes) if c in set(classes)]

    per_class: dict[int, dict[float, float]] = {}
    map_per_threshold: dict[float, float] = {}
    for tau in protocol.iou_thresholds:
        aps = []
        for c in classes:
            ap = average_precision(predictions, ground_truth, c, tau)
            per_class.setdefault(c, {})[tau] = ap
            aps.append(ap)
        map_per_threshold[tau] = float(np.mean(aps))
    avg_map = float(np.mean(list(map_per_threshold.values())))
    return EvalResult(
        protocol=protocol,
        per_class=per_class,
        map_per_threshold=map_per_threshold,
        avg_map=avg_map,
        class_names=class_names or [],
    )


# ---------------------------------------------------------------------------
# result files
# ---------------------------------------------------------------------------

def write_result_json(result: EvalResult, path: str | Path) -> None:
    payload = {
        "protocol": {
            "name": result.protocol.name,
            "iou_thresholds": result.protocol.iou_thresholds,
            "multi_label": result.protocol.multi_label,
        },
        "per_class": {
            str(c): {f"{tau:g}": ap for tau, ap in taus.items()}
            for c, taus in result.per_class.items()
        },
        "map": {f"{tau:g}": v for tau, v in result.map_per_threshold.items()},
        "avg_map": result.avg_map,
    }
    Path(path).write_text(
        json.dumps(payload, sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )


def write_result_csv(result: EvalResult, path: str | Path) -> None:
    """One row per class and a closing mAP row, columns per threshold plus
    the average (the layout of the benchmark tables)."""
    thresholds = result.protocol.iou_thresholds
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["class"] + [f"{t:g}" for t in thresholds] + ["avg"])
        for c in sorted(result.per_class):
            name = (
                result.class_names[c]
                if c < len(result.class_names)
                else f"class_{c}"
            )
            aps = [result.per_class[c][t] for t in thresholds]
            writer.writerow([name] + [f"{a:.4f}" for a in aps] + [f"{np.mean(aps):.4f}"])
        row = [result.map_per_threshold[t] for t in thresholds]
        writer.writerow(["mAP"] + [f"{v:.4f}" for v in row] + [f"{result.avg_map:.4f}"])


def format_map_row(result: EvalResult, label: str = "Ours") -> str:
    """Render the per-threshold mAP row the way the benchmark tables print
    it (percent values, Avg last)."""
    thresholds = result.protocol.iou_thresholds
    header = "Method".ljust(12) + "".join(f"{t:>8g}" for t in thresholds) + f"{'Avg':>8}"
    values = label.ljust(12) + "".join(
        f"{100 * result.map_per_threshold[t]:>8.1f}" for t in thresholds
    )
    values += f"{100 * result.avg_map:>8.1f}"
    return header + "\n" + values

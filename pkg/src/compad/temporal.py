"""Temporal graph over per-snippet scene representations.

Three 1D convolutions with sigmoid activations over the fixed-length
sequence, a per-snippet multi-label classification head (with an explicit
background class), a class-agnostic boundary head, pre-defined binary-mask
anchors, IoU-based anchor matching, and decoding of scored segments.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import GroundTruthSegment


class TemporalError(Exception):
    pass


@dataclass
class TemporalGraph:
    """Length-N feature sequence, zero-padded beyond ``valid_len``."""

    features: Tensor  # N x D_scene
    valid_len: int

    @property
    def length(self) -> int:
        return self.features.shape[0]


@dataclass
class TemporalParams:
    """Conv stack plus the two per-snippet heads.

    Kernel sizes must be odd; convolutions run with same-length padding.
    The classification head maps to C+1 logits per snippet (the extra
    index is the background class); the boundary head maps to one logit.
    """

    convs: list[Tensor]  # each C_out x C_in x K
    w_cls: Tensor  # (C+1) x C_last
    b_cls: Tensor  # (C+1) x 1
    w_br: Tensor  # 1 x C_last
    b_br: Tensor  # 1 x 1

    @property
    def num_outputs(self) -> int:
        return self.w_cls.shape[0]

    def validate(self) -> None:
        prev = None
        for i, k in enumerate(self.convs):
            if k.ndim != 3:
                raise TemporalError(f"conv {i}: kernel must be C_out x C_in x K")
            if k.shape[2] % 2 == 0:
                raise TemporalError(f"conv {i}: kernel size {k.shape[2]} must be odd")
            if prev is not None and k.shape[1] != prev:
                raise TemporalError(
                    f"conv {i}: input channels {k.shape[1]} != previous output {prev}"
                )
            prev = k.shape[0]
        if self.w_cls.shape[1] != prev or self.w_br.shape[1] != prev:
            raise TemporalError("head input width does not match conv output channels")


def conv_channel_plan(scene_dim: int) -> list[tuple[int, int]]:
    """(in, out) channel pairs for the three conv layers; widths shrink
    as [D, D/2, D/4] to bound parameter count."""
    half = max(1, scene_dim // 2)
    quarter = max(1, scene_dim // 4)
    return [(scene_dim, half), (half, quarter), (quarter, quarter)]


def init_temporal_params(
    rng: np.random.Generator, scene_dim: int, num_classes: int, kernel_size: int = 3
) -> TemporalParams:
    if kernel_size % 2 == 0:
        raise TemporalError(f"kernel size must be odd, got {kernel_size}")
    convs = []
    for c_in, c_out in conv_channel_plan(scene_dim):
        fan_in = c_in * kernel_size
        bound = np.sqrt(6.0 / (fan_in + c_out))
        convs.append(ad.param(rng.uniform(-bound, bound, (c_out, c_in, kernel_size))))
    c_last = convs[-1].shape[0]
    bound = np.sqrt(6.0 / (c_last + num_classes + 1))
    params = TemporalParams(
        convs=convs,
        w_cls=ad.param(rng.uniform(-bound, bound, (num_classes + 1, c_last))),
        b_cls=ad.param(np.zeros((num_classes + 1, 1))),
        w_br=ad.param(rng.uniform(-bound, bound, (1, c_last))),
        b_br=ad.param(np.zeros((1, 1))),
    )
    params.validate()
    return params


def build_temporal_graph(scene_reprs: Sequence[Tensor], n: int) -> TemporalGraph:
    """Stack per-snippet representations as the first rows of an N x D
    zero matrix. Sequences longer than N must be chunked upstream."""
    if len(scene_reprs) > n:
        raise TemporalError(
            f"{len(scene_reprs)} snippets exceed temporal length {n}; "
            "split the video with chunk_video first"
        )
    if not scene_reprs:
        return TemporalGraph(features=ad.const(np.zeros((n, 1))), valid_len=0)
    return TemporalGraph(features=ad.pad_rows(scene_reprs, n), valid_len=len(scene_reprs))


def temporal_logits(graph: TemporalGraph, params: TemporalParams) -> tuple[Tensor, Tensor]:
    """Raw head outputs: class logits (C+1) x N and boundary logits 1 x N."""
    h = ad.transpose(graph.features)  # channels x N
    for kern in params.convs:
        pad = kern.shape[2] // 2
        h = ad.sigmoid(ad.conv1d(h, kern, stride=1, padding=pad))
    class_logits = ad.add(ad.matmul(params.w_cls, h), params.b_cls)
    boundary_logits = ad.add(ad.matmul(params.w_br, h), params.b_br)
    return class_logits, boundary_logits


def valid_mask(n: int, valid_len: int) -> np.ndarray:
    mask = np.zeros(n)
    mask[:valid_len] = 1.0
    return mask


def temporal_forward(graph: TemporalGraph, params: TemporalParams) -> tuple[Tensor, Tensor]:
    """Per-snippet sigmoid class probabilities (N x (C+1)) and boundary
    probabilities (N,), both exactly zero at positions ≥ valid_len."""
    if graph.valid_len == 0:
        n = graph.length
        return ad.const(np.zeros((n, params.num_outputs))), ad.const(np.zeros(n))
    class_logits, boundary_logits = temporal_logits(graph, params)
    mask_row = ad.const(valid_mask(graph.length, graph.valid_len)[np.newaxis, :])
    class_probs = ad.transpose(ad.mul(ad.sigmoid(class_logits), mask_row))
    boundary = ad.reshape(ad.mul(ad.sigmoid(boundary_logits), mask_row), (graph.length,))
    return class_probs, boundary


# ---------------------------------------------------------------------------
# anchors
# ---------------------------------------------------------------------------

DEFAULT_ANCHOR_SCALES = (8, 16, 32, 64, 128, 256, 512, 1024)


@dataclass
class AnchorSet:
    """Pre-defined contiguous binary masks of length N."""

    length: int
    spans: list[tuple[int, int]]  # inclusive (start, end) per mask

    def __len__(self) -> int:
        return len(self.spans)

    def masks(self) -> np.ndarray:
        out = np.zeros((len(self.spans), self.length), dtype=bool)
        for i, (s, e) in enumerate(self.spans):
            out[i, s : e + 1] = True
        return out


def generate_anchors(n: int, scales: Sequence[int], count: int) -> AnchorSet:
    """Multi-scale half-overlap windows, enumerated scale-major then
    position. Only windows that fit entirely within [0, n) are kept; if
    more than ``count`` exist they are subsampled by uniform index
    striding, and if fewer exist the set is simply smaller."""
    if not scales:
        raise TemporalError("generate_anchors: empty scale list")
    if list(scales) != sorted(set(scales)):
        raise TemporalError(f"scales must be strictly increasing, got {list(scales)}")
    if count < len(scales):
        raise TemporalError(f"count {count} is below the number of scales {len(scales)}")
    spans = []
    for s in scales:
        if s < 1 or s > n:
            raise TemporalError(f"scale {s} outside [1, {n}]")
        stride = max(1, s // 2)
        start = 0
        while start + s <= n:
            spans.append((start, start + s - 1))
            start += stride
    if len(spans) > count:
        spans = [spans[(i * len(spans)) // count] for i in range(count)]
    return AnchorSet(length=n, spans=spans)


def temporal_iou(a: tuple[int, int], b: tuple[int, int]) -> float:
    """IoU of two inclusive snippet intervals, counted in snippets."""
    (a0, a1), (b0, b1) = a, b
    if a0 > a1 or b0 > b1:
        raise TemporalError(f"invalid interval: {a} vs {b}")
    inter = min(a1, b1) - max(a0, b0) + 1
    if inter <= 0:
        return 0.0
    union = (a1 - a0 + 1) + (b1 - b0 + 1) - inter
    return inter / union


IGNORE = -1


def match_anchors(
    anchors: AnchorSet,
    gt_segments: Sequence[GroundTruthSegment],
    pos_iou: float = 0.7,
    neg_iou: float = 0.3,
) -> tuple[list[int], np.ndarray, np.ndarray]:
    """Assign training roles to anchors against ground truth.

    Returns (best anchor index per GT, per-anchor labels, per-snippet
    boundary target). For each GT the max-IoU anchor is positive (ties go
    to the lower anchor index); anchors with IoU ≥ pos_iou against any GT
    are positive; anchors whose best IoU falls below neg_iou are negative;
    the rest are ignored (label -1). The boundary target is the union mask
    of the GT segments.
    """
    if len(anchors) == 0:
        raise TemporalError("match_anchors: need at least one anchor")
    labels = np.zeros(len(anchors), dtype=int)
    y_br = np.zeros(anchors.length)
    best_per_gt = []
    if not gt_segments:
        return best_per_gt, labels, y_br

    best_iou = np.zeros(len(anchors))
    for gt in gt_segments:
        y_br[gt.start_snippet : gt.end_snippet + 1] = 1.0
        ious = np.array(
            [temporal_iou(span, (gt.start_snippet, gt.end_snippet)) for span in anchors.spans]
        )
        best_per_gt.append(int(np.argmax(ious)))
        best_iou = np.maximum(best_iou, ious)
    labels = np.full(len(anchors), IGNORE, dtype=int)
    labels[best_iou < neg_iou] = 0
    labels[best_iou >= pos_iou] = 1
    for idx in best_per_gt:
        labels[idx] = 1
    return best_per_gt, labels, y_br


# ---------------------------------------------------------------------------
# decoding
# ---------------------------------------------------------------------------

@dataclass
class Segment:
    """Scored, class-labeled inclusive snippet interval."""

    activity_class: int
    start_snippet: int
    end_snippet: int
    score: float


def decode(
    class_probs: np.ndarray,
    boundary_probs: np.ndarray,
    anchors: AnchorSet,
    valid_len: int,
    nms_iou: float = 0.5,
    top_k: int = 100,
) -> list[Segment]:
    """Score anchors against the head outputs and keep the NMS survivors.

    Each anchor, clipped to the valid region, scores as the mean boundary
    probability inside its mask; the per-class score multiplies in the
    mean class probability. Candidates are sorted by (score desc, anchor
    index, class), suppressed class-wise at IoU ≥ nms_iou, and the top_k
    survivors are returned in that order. The background class (last
    column) is never emitted.
    """
    if not (0.0 < nms_iou <= 1.0):
        raise TemporalError(f"nms_iou must be in (0, 1], got {nms_iou}")
    if top_k < 1:
        raise TemporalError(f"top_k must be ≥ 1, got {top_k}")
    if valid_len == 0:
        return []
    class_probs = np.asarray(class_probs)
    boundary_probs = np.asarray(boundary_probs)
    num_classes = class_probs.shape[1] - 1  # background excluded

    candidates = []  # (score, anchor_idx, class, start, end)
    for idx, (s, e) in enumerate(anchors.spans):
        e = min(e, valid_len - 1)
        if s >= valid_len:
            continue
        inside = slice(s, e + 1)
        anchor_score = float(boundary_probs[inside].mean())
        for c in range(num_classes):
            score = anchor_score * float(class_probs[inside, c].mean())
            candidates.append((score, idx, c, s, e))
    candidates.sort(key=lambda t: (-t[0], t[1], t[2]))

    kept: list[Segment] = []
    kept_by_class: dict[int, list[tuple[int, int]]] = {}
    for score, _idx, c, s, e in candidates:
        if len(kept) >= top_k:
            break
        suppressed = any(
            temporal_iou((s, e), span) >= nms_iou for span in kept_by_class.get(c, ())
        )
        if suppressed:
            continue
        kept.append(Segment(activity_class=c, start_snippet=s, end_snippet=e, score=score))
        kept_by_class.setdefault(c, []).append((s, e))
    return kept

"""Loss functions, the Adam optimizer, checkpoint serialization, and the
training loop.

The total objective is a weighted sum of the per-snippet multi-label
activity loss (binary cross entropy on logits, computed in the
log-sum-exp form with per-class positive weights) and the class-agnostic
boundary loss (binary cross entropy on probabilities). The weight on the
activity term defaults to the configured anchor count.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import Dataset, VideoSample, chunk_video
from .model import ActivityModel, build_model
from .scene_graph import AggMode, Topology, snippet_graph
from .temporal import DEFAULT_ANCHOR_SCALES, AnchorSet, generate_anchors

PROB_EPS = 1e-7
CADW_MAGIC = b"CADW"
CADW_VERSION = 1


class TrainingError(Exception):
    pass


class DivergenceError(TrainingError):
    """Training loss went non-finite; the last good checkpoint is kept."""


@dataclass
class LossConfig:
    """Weights of the two loss terms. ``lam`` is the multiplier on the
    activity term (defaults to the configured anchor count). ``pos_weight``
    holds per-class positive-sample weights p_c of length C+1; when None
    they are computed from the training split as (#negatives / #positives)
    clamped to [1, 100]."""

    lam: float | None = None
    pos_weight: np.ndarray | None = None

    def validate(self) -> None:
        if self.lam is not None and not self.lam > 0:
            raise TrainingError(f"lambda must be positive, got {self.lam}")
        if self.pos_weight is not None and not (np.asarray(self.pos_weight) > 0).all():
            raise TrainingError("pos_weight entries must be positive")


@dataclass
class TrainConfig:
    """Run configuration; defaults follow the 4-attention-layer scheme with
    {4, 4, C, C} heads, 128 anchors, and LeakyReLU slope 0.2."""

    snippet_len: int = 24
    temporal_len: int = 128
    topology: Topology = Topology.FULLY
    agg_mode: AggMode = AggMode.AGGREGATED
    heads: list[int] | None = None  # None -> [4, 4, C, C]
    hidden_dim: int | None = None  # None -> feature dim
    scene_dim: int | None = None  # None -> hidden dim
    concat_last_layer: bool = False
    learning_rate: float = 1e-3
    epochs: int = 20
    batch_size: int = 1
    seed: int = 0
    anchor_count: int = 128
    anchor_scales: list[int] | None = None  # None -> powers of two up to N
    leaky_slope: float = 0.2
    kernel_size: int = 3

    def validate(self) -> None:
        for name in ("snippet_len", "temporal_len", "epochs", "batch_size", "anchor_count"):
            if getattr(self, name) < 1:
                raise TrainingError(f"{name} must be ≥ 1, got {getattr(self, name)}")
        if not np.isfinite(self.learning_rate) or self.learning_rate < 0:
            raise TrainingError(f"learning_rate must be finite and ≥ 0, got {self.learning_rate}")
        if not (0.0 < self.leaky_slope < 1.0):
            raise TrainingError(f"leaky_slope must be in (0, 1), got {self.leaky_slope}")
        if self.heads is not None and any(h < 1 for h in self.heads):
            raise TrainingError("head counts must be ≥ 1")

    def resolved_scales(self) -> list[int]:
        if self.anchor_scales is not None:
            return list(self.anchor_scales)
        return [s for s in DEFAULT_ANCHOR_SCALES if s <= self.temporal_len]


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def _valid_vector(n: int, valid_len: int) -> np.ndarray:
    v = np.zeros(n)
    v[:valid_len] = 1.0
    return v


def boundary_loss(
    pred: Tensor, target: np.ndarray, weights: np.ndarray | float, valid_len: int
) -> Tensor:
    """Mean over valid positions of -w·[y·log p + (1-y)·log(1-p)] with the
    probabilities clamped to [1e-7, 1 - 1e-7]."""
    n = pred.shape[0]
    if valid_len == 0:
        return ad.const(np.asarray(0.0))
    target = np.asarray(target, dtype=float)
    w = np.broadcast_to(np.asarray(weights, dtype=float), (n,))
    valid = _valid_vector(n, valid_len)
    p = ad.clamp(pred, PROB_EPS, 1.0 - PROB_EPS)
    pos = ad.mul(ad.log(p), ad.const(w * target * valid))
    neg_term = ad.mul(ad.log(ad.add(ad.const(np.ones(n)), ad.neg(p))), ad.const(w * (1.0 - target) * valid))
    total = ad.neg(ad.add(ad.sum_all(pos), ad.sum_all(neg_term)))
    return ad.scale(total, 1.0 / valid_len)


def activity_loss(
    logits: Tensor,
    targets: np.ndarray,
    pos_weight: np.ndarray,
    weights: np.ndarray | float,
    valid_len: int,
) -> Tensor:
    """Mean over valid (snippet, class) cells of
    -w·[p_c·y·log σ(x) + (1-y)·log(1-σ(x))], computed with softplus so
    large logits never overflow."""
    n, c = logits.shape
    if valid_len == 0:
        return ad.const(np.asarray(0.0))
    y = np.asarray(targets, dtype=float)
    if y.shape != (n, c):
        raise TrainingError(f"targets shape {y.shape} != logits shape {(n, c)}")
    p_c = np.broadcast_to(np.asarray(pos_weight, dtype=float), (c,))
    w = np.broadcast_to(np.asarray(weights, dtype=float), (n, c))
    valid = _valid_vector(n, valid_len)[:, np.newaxis]
    pos_w = w * p_c[np.newaxis, :] * y * valid
    neg_w = w * (1.0 - y) * valid
    # -log σ(x) = softplus(-x); -log(1 - σ(x)) = softplus(x)
    total = ad.add(
        ad.sum_all(ad.mul(ad.softplus(ad.neg(logits)), ad.const(pos_w))),
        ad.sum_all(ad.mul(ad.softplus(logits), ad.const(neg_w))),
    )
    return ad.scale(total, 1.0 / (valid_len * c))


def total_loss(l_act: Tensor, l_br: Tensor, lam: float) -> Tensor:
    """λ·L_Act + L_Br."""
    return ad.add(ad.scale(l_act, lam), l_br)


def positive_class_weights(
    targets: list[np.ndarray], valid_lens: list[int], clamp: tuple[float, float] = (1.0, 100.0)
) -> np.ndarray:
    """Per-class (#negatives / #positives) over the training split, clamped;
    classes with no positives fall back to 1."""
    if not targets:
        raise TrainingError("positive_class_weights: empty target list")
    c = targets[0].shape[1]
    pos = np.zeros(c)
    neg = np.zeros(c)
    for y, valid in zip(targets, valid_lens):
        pos += y[:valid].sum(axis=0)
        neg += (1.0 - y[:valid]).sum(axis=0)
    out = np.ones(c)
    nonzero = pos > 0
    out[nonzero] = np.clip(neg[nonzero] / pos[nonzero], clamp[0], clamp[1])
    return out


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    first: dict[str, np.ndarray] = field(default_factory=dict)
    second: dict[str, np.ndarray] = field(default_factory=dict)


def optimizer_step(params: dict[str, Tensor], state: AdamState, lr: float) -> None:
    """One Adam update applied in the params' fixed iteration order."""
    state.step += 1
    t = state.step
    for name, p in params.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if not np.isfinite(g).all():
            raise TrainingError(f"non-finite gradient for parameter {name!r}")
        m = state.first.setdefault(name, np.zeros_like(p.data))
        v = state.second.setdefault(name, np.zeros_like(p.data))
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        m_hat = m / (1.0 - state.beta1**t)
        v_hat = v / (1.0 - state.beta2**t)
        p.data -= lr * m_hat / (np.sqrt(v_hat) + state.eps)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(path: str | Path, named: dict[str, np.ndarray]) -> None:
    """Write named parameter blocks: magic, u32 version, then per block a
    u32 name length, UTF-8 name, u32 rank, u32 dims, float64 payload."""
    buf = bytearray()
    buf += CADW_MAGIC
    buf += struct.pack("<I", CADW_VERSION)
    for name, arr in named.items():
        encoded = name.encode("utf-8")
        arr = np.asarray(arr, dtype=np.float64)
        buf += struct.pack("<I", len(encoded))
        buf += encoded
        buf += struct.pack("<I", arr.ndim)
        for dim in arr.shape:
            buf += struct.pack("<I", dim)
        buf += arr.astype("<f8").tobytes()
    Path(path).write_bytes(bytes(buf))


def load_checkpoint(path: str | Path) -> dict[str, np.ndarray]:
    blob = Path(path).read_bytes()
    if blob[:4] != CADW_MAGIC:
        raise TrainingError(f"bad checkpoint magic {blob[:4]!r} in {path}")
    version = struct.unpack_from("<I", blob, 4)[0]
    if version != CADW_VERSION:
        raise TrainingError(f"unsupported checkpoint version {version} in {path}")
    pos = 8
    named: dict[str, np.ndarray] = {}
    while pos < len(blob):
        (name_len,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        name = blob[pos : pos + name_len].decode("utf-8")
        pos += name_len
        (rank,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        dims = struct.unpack_from(f"<{rank}I", blob, pos)
        pos += 4 * rank
        count = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(blob, dtype="<f8", count=count, offset=pos).copy()
        pos += 8 * count
        named[name] = arr.reshape(dims)
    return named


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

@dataclass
class EpochMetrics:
    epoch: int
    loss_act: float
    loss_br: float
    loss_total: float
    map_avg: float | None = None


@dataclass
class TrainResult:
    model: ActivityModel
    anchors: AnchorSet
    metrics: list[EpochMetrics]
    pos_weight: np.ndarray
    lam: float


@dataclass
class _PreparedChunk:
    chunk: VideoSample
    y_cls: np.ndarray  # N x (C+1)
    y_br: np.ndarray  # N
    valid_len: int


def chunk_targets(chunk: VideoSample, temporal_len: int, num_classes: int) -> _PreparedChunk:
    """Per-snippet multi-label targets: class c inside a class-c segment,
    background (index C) when inside none; boundary target is the union
    mask."""
    y_cls = np.zeros((temporal_len, num_classes + 1))
    y_br = np.zeros(temporal_len)
    valid = len(chunk.snippets)
    for seg in chunk.ground_truth:
        y_cls[seg.start_snippet : seg.end_snippet + 1, seg.activity_class] = 1.0
        y_br[seg.start_snippet : seg.end_snippet + 1] = 1.0
    inside = y_cls[:valid, :num_classes].any(axis=1)
    y_cls[:valid, num_classes] = (~inside).astype(float)
    return _PreparedChunk(chunk=chunk, y_cls=y_cls, y_br=y_br, valid_len=valid)


def train(
    dataset: Dataset,
    config: TrainConfig,
    loss_config: LossConfig | None = None,
    checkpoint_path: str | Path | None = None,
    eval_fn=None,
) -> TrainResult:
    """Train on the dataset, iterating chunked videos in seeded shuffled
    order. Writes a checkpoint after every epoch when a path is given and
    aborts on a non-finite loss with the last good checkpoint retained.
    ``eval_fn(model, anchors)`` runs once per epoch when provided and its
    value lands in the metrics as map_avg."""
    config.validate()
    loss_config = loss_config or LossConfig()
    loss_config.validate()
    if not dataset.videos:
        raise TrainingError("cannot train on an empty dataset")

    rng = np.random.default_rng(config.seed)
    c = dataset.num_activity_classes
    model = build_model(
        rng,
        feature_dim=dataset.feature_dim,
        num_classes=c,
        temporal_len=config.temporal_len,
        heads=config.heads,
        hidden_dim=config.hidden_dim,
        scene_dim=config.scene_dim,
        topology=config.topology,
        agg_mode=config.agg_mode,
        concat_last_layer=config.concat_last_layer,
        slope=config.leaky_slope,
        kernel_size=config.kernel_size,
    )
    anchors = generate_anchors(
        config.temporal_len, config.resolved_scales(), config.anchor_count
    )
    lam = loss_config.lam if loss_config.lam is not None else float(config.anchor_count)

    # one prepared-chunk list per video, so the batch unit stays "videos"
    video_groups: list[list[_PreparedChunk]] = []
    for video in dataset.videos:
        group = [
            chunk_targets(chunk_piece, config.temporal_len, c)
            for chunk_piece in chunk_video(video, config.temporal_len)
        ]
        if group:
            video_groups.append(group)

    if loss_config.pos_weight is not None:
        pos_weight = np.asarray(loss_config.pos_weight, dtype=float)
        if pos_weight.shape != (c + 1,):
            raise TrainingError(f"pos_weight must have length {c + 1}")
    else:
        all_chunks = [p for group in video_groups for p in group]
        pos_weight = positive_class_weights(
            [p.y_cls for p in all_chunks], [p.valid_len for p in all_chunks]
        )

    named = model.named_parameters()
    state = AdamState()
    metrics: list[EpochMetrics] = []

    for epoch in range(config.epochs):
        order = rng.permutation(len(video_groups))
        sums = np.zeros(3)
        n_chunks = 0
        pending = 0
        for vi in order:
            for prep in video_groups[int(vi)]:
                with ad.Tape() as tape:
                    class_logits, boundary_logits, valid = model.forward_chunk(prep.chunk)
                    l_act = activity_loss(
                        ad.transpose(class_logits), prep.y_cls, pos_weight, 1.0, valid
                    )
                    br_probs = ad.reshape(
                        ad.sigmoid(boundary_logits), (config.temporal_len,)
                    )
                    l_br = boundary_loss(br_probs, prep.y_br, 1.0, valid)
                    l_tot = total_loss(l_act, l_br, lam)
                values = (l_act.item(), l_br.item(), l_tot.item())
                if not all(np.isfinite(values)):
                    raise DivergenceError(
                        f"non-finite loss at epoch {epoch}: act={values[0]}, br={values[1]}"
                    )
                tape.backward(l_tot)
                sums += values
                n_chunks += 1
            pending += 1
            if pending == config.batch_size:
                optimizer_step(named, state, config.learning_rate)
                for p in named.values():
                    p.zero_grad()
                pending = 0
        if pending:
            optimizer_step(named, state, config.learning_rate)
            for p in named.values():
                p.zero_grad()

        map_avg = eval_fn(model, anchors) if eval_fn is not None else None
        metrics.append(
            EpochMetrics(
                epoch=epoch,
                loss_act=sums[0] / n_chunks,
                loss_br=sums[1] / n_chunks,
                loss_total=sums[2] / n_chunks,
                map_avg=map_avg,
            )
        )
        if checkpoint_path is not None:
            save_checkpoint(
                checkpoint_path, {k: v.data for k, v in model.named_parameters().items()}
            )

    return TrainResult(
        model=model, anchors=anchors, metrics=metrics, pos_weight=pos_weight, lam=lam
    )


def write_metrics_csv(path: str | Path, metrics: list[EpochMetrics]) -> None:
    lines = ["epoch,loss_act,loss_br,loss_total,map_avg"]
    for m in metrics:
        map_cell = "" if m.map_avg is None else f"{m.map_avg:.6f}"
        lines.append(
            f"{m.epoch},{m.loss_act:.10f},{m.loss_br:.10f},{m.loss_total:.10f},{map_cell}"
        )
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

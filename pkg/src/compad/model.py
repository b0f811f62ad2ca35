"""Full-model glue: parameter container, per-chunk forward pass, and
dataset-level inference that maps chunk-local segments back to video
coordinates.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import Dataset, VideoSample, chunk_video
from .scene_graph import (
    AggMode,
    SgatLayerParams,
    SgatStackParams,
    Topology,
    init_sgat_params,
    sgat_forward,
    snippet_graph,
)
from .temporal import (
    AnchorSet,
    Segment,
    TemporalParams,
    build_temporal_graph,
    decode,
    init_temporal_params,
    temporal_forward,
    temporal_logits,
)


@dataclass
class ActivityModel:
    """Scene-graph attention stack plus temporal localizer, with the
    non-learnable settings both passes need."""

    sgat: SgatStackParams
    temporal: TemporalParams
    topology: Topology
    temporal_len: int
    slope: float = 0.2

    def named_parameters(self) -> dict[str, Tensor]:
        """Parameters in fixed canonical order (checkpoint and optimizer
        order)."""
        named: dict[str, Tensor] = {}
        for i, layer in enumerate(self.sgat.layers):
            named[f"sgat.layer{i}.w1"] = layer.w1
            for h, a in enumerate(layer.attn):
                named[f"sgat.layer{i}.attn{h}"] = a
        named["sgat.w2"] = self.sgat.w2
        for i, kern in enumerate(self.temporal.convs):
            named[f"temporal.conv{i}"] = kern
        named["temporal.w_cls"] = self.temporal.w_cls
        named["temporal.b_cls"] = self.temporal.b_cls
        named["temporal.w_br"] = self.temporal.w_br
        named["temporal.b_br"] = self.temporal.b_br
        return named

    def forward_chunk(self, chunk: VideoSample) -> tuple[Tensor, Tensor, int]:
        """Differentiable pass over one chunk: class logits (C+1) x N,
        boundary logits 1 x N, and the number of real snippets."""
        reprs = [
            sgat_forward(snippet_graph(s, self.topology), self.sgat, self.slope)
            for s in chunk.snippets
        ]
        graph = build_temporal_graph(reprs, self.temporal_len)
        class_logits, boundary_logits = temporal_logits(graph, self.temporal)
        return class_logits, boundary_logits, graph.valid_len

    def predict_chunk(self, chunk: VideoSample) -> tuple[np.ndarray, np.ndarray, int]:
        """Inference pass: masked class probabilities N x (C+1) and
        boundary probabilities (N,)."""
        reprs = [
            sgat_forward(snippet_graph(s, self.topology), self.sgat, self.slope)
            for s in chunk.snippets
        ]
        graph = build_temporal_graph(reprs, self.temporal_len)
        class_probs, boundary = temporal_forward(graph, self.temporal)
        return class_probs.data, boundary.data, graph.valid_len


def build_model(
    rng: np.random.Generator,
    feature_dim: int,
    num_classes: int,
    temporal_len: int,
    heads: list[int] | None = None,
    hidden_dim: int | None = None,
    scene_dim: int | None = None,
    topology: Topology = Topology.FULLY,
    agg_mode: AggMode = AggMode.AGGREGATED,
    concat_last_layer: bool = False,
    slope: float = 0.2,
    kernel_size: int = 3,
) -> ActivityModel:
    """Initialize a model with Xavier-uniform weights from ``rng``.

    Default heads follow the 4-layer {4, 4, C, C} scheme.
    """
    if heads is None:
        heads = [4, 4, num_classes, num_classes]
    hidden = hidden_dim if hidden_dim is not None else feature_dim
    scene = scene_dim if scene_dim is not None else hidden
    sgat = init_sgat_params(
        rng,
        in_dim=feature_dim,
        hidden_dims=[hidden] * len(heads),
        heads=heads,
        scene_dim=scene,
        agg_mode=agg_mode,
        concat_last_layer=concat_last_layer,
    )
    temporal = init_temporal_params(rng, scene, num_classes, kernel_size)
    return ActivityModel(
        sgat=sgat,
        temporal=temporal,
        topology=Topology(topology),
        temporal_len=temporal_len,
        slope=slope,
    )


def model_from_arrays(
    arrays: dict[str, np.ndarray],
    topology: Topology,
    agg_mode: AggMode,
    temporal_len: int,
    slope: float = 0.2,
    concat_last_layer: bool = False,
) -> ActivityModel:
    """Rebuild a model from named checkpoint arrays; the layer/head
    structure is inferred from the block names."""
    layers = []
    i = 0
    while f"sgat.layer{i}.w1" in arrays:
        attn = []
        h = 0
        while f"sgat.layer{i}.attn{h}" in arrays:
            attn.append(ad.param(arrays[f"sgat.layer{i}.attn{h}"]))
            h += 1
        layers.append(SgatLayerParams(w1=ad.param(arrays[f"sgat.layer{i}.w1"]), attn=attn))
        i += 1
    if not layers or "sgat.w2" not in arrays:
        raise KeyError("checkpoint is missing scene-graph attention blocks")
    sgat = SgatStackParams(
        layers=layers,
        w2=ad.param(arrays["sgat.w2"]),
        agg_mode=AggMode(agg_mode),
        concat_last_layer=concat_last_layer,
    )
    convs = []
    i = 0
    while f"temporal.conv{i}" in arrays:
        convs.append(ad.param(arrays[f"temporal.conv{i}"]))
        i += 1
    temporal = TemporalParams(
        convs=convs,
        w_cls=ad.param(arrays["temporal.w_cls"]),
        b_cls=ad.param(arrays["temporal.b_cls"]),
        w_br=ad.param(arrays["temporal.w_br"]),
        b_br=ad.param(arrays["temporal.b_br"]),
    )
    temporal.validate()
    return ActivityModel(
        sgat=sgat,
        temporal=temporal,
        topology=Topology(topology),
        temporal_len=temporal_len,
        slope=slope,
    )


@dataclass(frozen=True)
class Detection:
    """A predicted segment in whole-video coordinates."""

    video_id: str
    activity_class: int
    start_snippet: int
    end_snippet: int
    score: float


def infer_video(
    model: ActivityModel,
    video: VideoSample,
    anchors: AnchorSet,
    nms_iou: float = 0.5,
    top_k: int = 100,
) -> list[Detection]:
    """Decode segments chunk by chunk and shift them back to video
    coordinates (chunk k starts at k · temporal_len)."""
    detections = []
    for chunk_idx, chunk in enumerate(chunk_video(video, model.temporal_len)):
        class_probs, boundary, valid = model.predict_chunk(chunk)
        offset = chunk_idx * model.temporal_len
        for seg in decode(class_probs, boundary, anchors, valid, nms_iou, top_k):
            detections.append(
                Detection(
                    video_id=video.video_id,
                    activity_class=seg.activity_class,
                    start_snippet=seg.start_snippet + offset,
                    end_snippet=seg.end_snippet + offset,
                    score=seg.score,
                )
            )
    return detections


def infer_dataset(
    model: ActivityModel,
    dataset: Dataset,
    anchors: AnchorSet,
    nms_iou: float = 0.5,
    top_k: int = 100,
    threads: int = 1,
) -> list[Detection]:
    """Run inference over every video; results are concatenated in the
    dataset's video order regardless of worker count."""
    if threads > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=threads) as pool:
            per_video = list(
                pool.map(
                    lambda v: infer_video(model, v, anchors, nms_iou, top_k),
                    dataset.videos,
                )
            )
    else:
        per_video = [
            infer_video(model, v, anchors, nms_iou, top_k) for v in dataset.videos
        ]
    return [det for group in per_video for det in group]

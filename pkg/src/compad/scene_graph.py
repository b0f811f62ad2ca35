"""Per-snippet scene graphs and the multi-head graph-attention stack.

Node 0 is the whole-scene feature; nodes 1..n are agent tubes. Edges are
directed pairs under one of three topologies; every node additionally
attends to itself inside the attention layer, so isolated nodes are never
a failure mode. A stack of attention layers followed by aggregation and a
learnable output transform turns the variable-size graph into one
fixed-size scene representation.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import Snippet


class Topology(str, Enum):
    FULLY = "fully"
    STAR = "star"
    STAR_PLUS = "star-plus"


class AggMode(str, Enum):
    AGGREGATED = "aggregated"
    SCENE = "scene"


class GraphError(Exception):
    pass


def build_edges(
    n_agents: int, agent_classes: Sequence[int], topology: Topology
) -> list[tuple[int, int]]:
    """Directed edge list over n_agents+1 nodes (node 0 is the scene).

    Both directions are emitted for every connected pair. Star connects
    the scene to each agent; star-plus adds agent pairs sharing a class
    label; fully connects all node pairs. Ordering is lexicographic.
    """
    if len(agent_classes) != n_agents:
        raise GraphError(
            f"agent_classes has {len(agent_classes)} entries for {n_agents} agents"
        )
    topology = Topology(topology)
    pairs: set[tuple[int, int]] = set()
    if topology is Topology.FULLY:
        for i in range(n_agents + 1):
            for j in range(n_agents + 1):
                if i != j:
                    pairs.add((i, j))
    else:
        for a in range(1, n_agents + 1):
            pairs.add((0, a))
            pairs.add((a, 0))
        if topology is Topology.STAR_PLUS:
            for a in range(1, n_agents + 1):
                for b in range(1, n_agents + 1):
                    if a != b and agent_classes[a - 1] == agent_classes[b - 1]:
                        pairs.add((a, b))
    return sorted(pairs)


def neighborhood_mask(n_nodes: int, edges: Sequence[tuple[int, int]]) -> np.ndarray:
    """mask[i, j] is true when j feeds node i's attention: incoming edges
    plus the implicit self-loop."""
    mask = np.zeros((n_nodes, n_nodes), dtype=bool)
    np.fill_diagonal(mask, True)
    for src, dst in edges:
        if not (0 <= src < n_nodes and 0 <= dst < n_nodes):
            raise GraphError(f"edge ({src}, {dst}) references a node outside 0..{n_nodes - 1}")
        mask[dst, src] = True
    return mask


@dataclass
class SceneGraph:
    """Node-feature matrix plus a directed edge list; row 0 is the scene."""

    node_features: np.ndarray  # (n+1) x D_in
    edges: list[tuple[int, int]]
    topology: Topology

    @property
    def n_nodes(self) -> int:
        return self.node_features.shape[0]


def snippet_graph(snippet: Snippet, topology: Topology) -> SceneGraph:
    """Build the local scene graph for one snippet."""
    rows = [snippet.scene_feature] + [tube.feature for tube in snippet.agents]
    classes = [tube.agent_class for tube in snippet.agents]
    return SceneGraph(
        node_features=np.stack(rows, axis=0),
        edges=build_edges(len(snippet.agents), classes, topology),
        topology=Topology(topology),
    )


@dataclass
class SgatLayerParams:
    """Shared linear transform plus one attention vector per head."""

    w1: Tensor  # D_in x D_out
    attn: list[Tensor]  # per head, length 2*D_out

    @property
    def heads(self) -> int:
        return len(self.attn)

    @property
    def out_dim(self) -> int:
        return self.w1.shape[1]


@dataclass
class SgatStackParams:
    """The attention layer stack and the output aggregation transform."""

    layers: list[SgatLayerParams]
    w2: Tensor  # D_last x D_scene
    agg_mode: AggMode = AggMode.AGGREGATED
    concat_last_layer: bool = False

    @property
    def scene_dim(self) -> int:
        return self.w2.shape[1]


def _xavier(rng: np.random.Generator, fan_in: int, fan_out: int, shape: tuple) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, shape)


def init_sgat_params(
    rng: np.random.Generator,
    in_dim: int,
    hidden_dims: Sequence[int],
    heads: Sequence[int],
    scene_dim: int,
    agg_mode: AggMode = AggMode.AGGREGATED,
    concat_last_layer: bool = False,
) -> SgatStackParams:
    if len(hidden_dims) != len(heads):
        raise GraphError(
            f"{len(hidden_dims)} layer widths but {len(heads)} head counts"
        )
    layers = []
    prev = in_dim
    for width, n_heads in zip(hidden_dims, heads):
        if n_heads < 1:
            raise GraphError(f"head count must be ≥ 1, got {n_heads}")
        w1 = ad.param(_xavier(rng, prev, width, (prev, width)))
        attn = [
            ad.param(_xavier(rng, 2 * width, 1, (2 * width,))) for _ in range(n_heads)
        ]
        layers.append(SgatLayerParams(w1=w1, attn=attn))
        prev = width
    last_out = prev * (heads[-1] if concat_last_layer else 1)
    w2 = ad.param(_xavier(rng, last_out, scene_dim, (last_out, scene_dim)))
    return SgatStackParams(
        layers=layers,
        w2=w2,
        agg_mode=AggMode(agg_mode),
        concat_last_layer=concat_last_layer,
    )


def sgat_layer(
    node_features: Tensor,
    edges: Sequence[tuple[int, int]],
    params: SgatLayerParams,
    slope: float,
    concat_heads: bool = False,
) -> Tensor:
    """One attention layer over the graph.

    Per head: transform nodes with W1, score each neighborhood pair with a
    LeakyReLU of the concatenated features, normalize per node with a
    masked softmax (self-loop included), and take the attention-weighted
    neighbor sum. Heads are averaged (or concatenated for the optional
    last-layer variant). Since W1 is shared across heads, averaging the
    coefficient matrices before the single weighted sum is algebraically
    identical to averaging per-head outputs.
    """
    n = node_features.shape[0]
    mask = neighborhood_mask(n, edges)
    z = ad.matmul(node_features, params.w1)
    alphas = [ad.gat_attention(z, a, mask, slope) for a in params.attn]
    if concat_heads:
        return ad.concat_cols([ad.matmul(alpha, z) for alpha in alphas])
    return ad.matmul(ad.mean_tensors(alphas), z)


def sgat_forward(graph: SceneGraph, params: SgatStackParams, slope: float) -> Tensor:
    """Run the layer stack and aggregate to one 1 x D_scene representation.

    Aggregated mode averages all node rows before the output transform;
    scene mode keeps only the scene node's row.
    """
    h = ad.const(graph.node_features)
    last = len(params.layers) - 1
    for i, layer in enumerate(params.layers):
        concat = params.concat_last_layer and i == last
        h = sgat_layer(h, graph.edges, layer, slope, concat_heads=concat)
    n = graph.n_nodes
    if params.agg_mode is AggMode.AGGREGATED:
        pool = ad.const(np.full((1, n), 1.0 / n))
    else:
        row = np.zeros((1, n))
        row[0, 0] = 1.0
        pool = ad.const(row)
    return ad.matmul(ad.matmul(pool, h), params.w2)

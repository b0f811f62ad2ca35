"""Data model, on-disk feature format, video chunking, and the synthetic
dataset generator that stands in for the detection/tracking/feature stage.

The CADF format is a `manifest.json` (magic "CADF", version 1) next to a
`features.bin` holding little-endian float32 features: per video, per
snippet, D scene floats, then for each agent a u32 class id, a u32 tube
length, and D floats. Features are widened to float64 on load and
quantized back to float32 on save, so load(save(x)) round-trips exactly
at the 32-bit level.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

CADF_MAGIC = "CADF"
CADF_VERSION = 1


class DataError(Exception):
    """Base class for data-layer failures."""


class FormatError(DataError):
    """Malformed manifest or binary payload."""


class ConfigError(DataError):
    """Invalid generator or chunking configuration."""


@dataclass
class AgentTube:
    """One tracked scene object within a snippet, pooled to a single
    feature vector."""

    tube_id: int
    agent_class: int
    feature: np.ndarray
    tube_length: int

    def validate(self, feature_dim: int, num_agent_classes: int) -> None:
        if self.feature.shape != (feature_dim,):
            raise DataError(
                f"agent tube {self.tube_id}: feature length {self.feature.shape} != ({feature_dim},)"
            )
        if not 0 <= self.agent_class < num_agent_classes:
            raise DataError(f"agent tube {self.tube_id}: class {self.agent_class} out of range")
        if self.tube_length < 1:
            raise DataError(f"agent tube {self.tube_id}: non-positive tube length")


@dataclass
class Snippet:
    """Fixed-length video segment: one scene feature plus zero or more
    agent tubes."""

    index: int
    scene_feature: np.ndarray
    agents: list[AgentTube] = field(default_factory=list)


@dataclass
class GroundTruthSegment:
    """Inclusive snippet interval labeled with an activity class."""

    activity_class: int
    start_snippet: int
    end_snippet: int

    def length(self) -> int:
        return self.end_snippet - self.start_snippet + 1


@dataclass
class VideoSample:
    video_id: str
    snippets: list[Snippet]
    ground_truth: list[GroundTruthSegment] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.snippets)


@dataclass
class Dataset:
    feature_dim: int
    num_activity_classes: int
    num_agent_classes: int
    activity_class_names: list[str]
    agent_class_names: list[str]
    videos: list[VideoSample]

    def subset(self, video_indices: list[int]) -> "Dataset":
        return Dataset(
            feature_dim=self.feature_dim,
            num_activity_classes=self.num_activity_classes,
            num_agent_classes=self.num_agent_classes,
            activity_class_names=list(self.activity_class_names),
            agent_class_names=list(self.agent_class_names),
            videos=[self.videos[i] for i in video_indices],
        )


def datasets_equal(a: Dataset, b: Dataset) -> bool:
    """Structural equality (exact feature comparison)."""
    if (
        a.feature_dim != b.feature_dim
        or a.num_activity_classes != b.num_activity_classes
        or a.num_agent_classes != b.num_agent_classes
        or a.activity_class_names != b.activity_class_names
        or a.agent_class_names != b.agent_class_names
        or len(a.videos) != len(b.videos)
    ):
        return False
    for va, vb in zip(a.videos, b.videos):
        if va.video_id != vb.video_id or len(va.snippets) != len(vb.snippets):
            return False
        if [
            (g.activity_class, g.start_snippet, g.end_snippet) for g in va.ground_truth
        ] != [(g.activity_class, g.start_snippet, g.end_snippet) for g in vb.ground_truth]:
            return False
        for sa, sb in zip(va.snippets, vb.snippets):
            if not np.array_equal(sa.scene_feature, sb.scene_feature):
                return False
            if len(sa.agents) != len(sb.agents):
                return False
            for ta, tb in zip(sa.agents, sb.agents):
                if (
                    ta.tube_id != tb.tube_id
                    or ta.agent_class != tb.agent_class
                    or ta.tube_length != tb.tube_length
                    or not np.array_equal(ta.feature, tb.feature)
                ):
                    return False
    return True


# ---------------------------------------------------------------------------
# CADF serialization
# ---------------------------------------------------------------------------

def _video_payload_size(feature_dim: int, agent_counts: list[int]) -> int:
    per_agent = 4 + 4 + 4 * feature_dim
    return sum(4 * feature_dim + n * per_agent for n in agent_counts)


def save_dataset(dataset: Dataset, manifest_path: str | Path) -> None:
    """Write the dataset as manifest.json + features.bin, deterministically
    (the same dataset always produces byte-identical files)."""
    manifest_path = Path(manifest_path)
    manifest_path.parent.mkdir(parents=True, exist_ok=True)
    payload = bytearray()
    videos_meta = []
    for video in dataset.videos:
        offset = len(payload)
        agent_counts = [len(s.agents) for s in video.snippets]
        for snippet in video.snippets:
            payload += snippet.scene_feature.astype("<f4").tobytes()
            for tube in snippet.agents:
                payload += np.asarray(
                    [tube.agent_class, tube.tube_length], dtype="<u4"
                ).tobytes()
                payload += tube.feature.astype("<f4").tobytes()
        videos_meta.append(
            {
                "id": video.video_id,
                "num_snippets": len(video.snippets),
                "gt": [
                    [g.activity_class, g.start_snippet, g.end_snippet]
                    for g in video.ground_truth
                ],
                "agents_per_snippet": agent_counts,
                "offset": offset,
            }
        )
    manifest = {
        "magic": CADF_MAGIC,
        "version": CADF_VERSION,
        "feature_dim": dataset.feature_dim,
        "num_activity_classes": dataset.num_activity_classes,
        "num_agent_classes": dataset.num_agent_classes,
        "activity_class_names": dataset.activity_class_names,
        "agent_class_names": dataset.agent_class_names,
        "videos": videos_meta,
    }
    try:
        manifest_path.write_text(
            json.dumps(manifest, sort_keys=True, separators=(",", ":")) + "\n",
            encoding="utf-8",
        )
        (manifest_path.parent / "features.bin").write_bytes(bytes(payload))
    except OSError as exc:
        raise DataError(f"failed writing dataset at {manifest_path}: {exc}") from exc


def load_dataset(manifest_path: str | Path) -> Dataset:
    """Read a CADF dataset, widening features to float64."""
    manifest_path = Path(manifest_path)
    try:
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise DataError(f"cannot read manifest {manifest_path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise FormatError(f"manifest {manifest_path} is not valid JSON: {exc}") from exc

    if manifest.get("magic") != CADF_MAGIC:
        raise FormatError(f"bad magic {manifest.get('magic')!r}, expected {CADF_MAGIC!r}")
    if manifest.get("version") != CADF_VERSION:
        raise FormatError(
            f"unsupported version {manifest.get('version')!r}, expected {CADF_VERSION}"
        )
    feature_dim = int(manifest["feature_dim"])
    bin_path = manifest_path.parent / "features.bin"
    try:
        blob = bin_path.read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read payload {bin_path}: {exc}") from exc

    consumed = 0
    videos = []
    for meta in manifest["videos"]:
        agent_counts = [int(n) for n in meta["agents_per_snippet"]]
        if len(agent_counts) != int(meta["num_snippets"]):
            raise FormatError(
                f"video {meta['id']!r}: agents_per_snippet has {len(agent_counts)} entries "
                f"for {meta['num_snippets']} snippets"
            )
        offset = int(meta["offset"])
        size = _video_payload_size(feature_dim, agent_counts)
        if offset + size > len(blob):
            raise FormatError(
                f"video {meta['id']!r}: payload of {size} bytes at offset {offset} "
                f"overruns file of {len(blob)} bytes (feature_dim {feature_dim} inconsistent "
                f"with payload?)"
            )
        pos = offset
        snippets = []
        for idx, n_agents in enumerate(agent_counts):
            scene = np.frombuffer(blob, dtype="<f4", count=feature_dim, offset=pos)
            pos += 4 * feature_dim
            agents = []
            for tube_id in range(n_agents):
                header = np.frombuffer(blob, dtype="<u4", count=2, offset=pos)
                pos += 8
                feat = np.frombuffer(blob, dtype="<f4", count=feature_dim, offset=pos)
                pos += 4 * feature_dim
                agents.append(
                    AgentTube(
                        tube_id=tube_id,
                        agent_class=int(header[0]),
                        tube_length=int(header[1]),
                        feature=feat.astype(np.float64),
                    )
                )
            snippets.append(
                Snippet(index=idx, scene_feature=scene.astype(np.float64), agents=agents)
            )
        n_snip = len(snippets)
        gt = []
        for cls, start, end in meta["gt"]:
            if not (0 <= start <= end < n_snip):
                raise FormatError(
                    f"video {meta['id']!r}: ground-truth segment [{start}, {end}] outside "
                    f"[0, {n_snip})"
                )
            gt.append(GroundTruthSegment(int(cls), int(start), int(end)))
        videos.append(VideoSample(video_id=str(meta["id"]), snippets=snippets, ground_truth=gt))
        consumed = max(consumed, offset + size)

    if consumed != len(blob):
        raise FormatError(
            f"payload length mismatch: manifest accounts for {consumed} bytes, "
            f"file has {len(blob)}"
        )
    return Dataset(
        feature_dim=feature_dim,
        num_activity_classes=int(manifest["num_activity_classes"]),
        num_agent_classes=int(manifest["num_agent_classes"]),
        activity_class_names=[str(s) for s in manifest["activity_class_names"]],
        agent_class_names=[str(s) for s in manifest["agent_class_names"]],
        videos=videos,
    )


# ---------------------------------------------------------------------------
# chunking
# ---------------------------------------------------------------------------

def chunk_video(video: VideoSample, n: int) -> list[VideoSample]:
    """Split into consecutive non-overlapping chunks of at most ``n``
    snippets; the final chunk keeps its true length. Ground-truth segments
    are clipped to each chunk and re-indexed to chunk-local coordinates.
    Chunk k covers original snippets [k·n, k·n + len_k)."""
    if n < 1:
        raise ConfigError(f"chunk length must be ≥ 1, got {n}")
    if not video.snippets:
        return []
    chunks = []
    for chunk_idx, start in enumerate(range(0, len(video.snippets), n)):
        stop = min(start + n, len(video.snippets))
        snippets = [
            Snippet(index=i - start, scene_feature=s.scene_feature, agents=s.agents)
            for i, s in enumerate(video.snippets[start:stop], start=start)
        ]
        gt = []
        for seg in video.ground_truth:
            lo = max(seg.start_snippet, start)
            hi = min(seg.end_snippet, stop - 1)
            if lo <= hi:
                gt.append(GroundTruthSegment(seg.activity_class, lo - start, hi - start))
        chunks.append(VideoSample(video_id=video.video_id, snippets=snippets, ground_truth=gt))
    return chunks


# ---------------------------------------------------------------------------
# synthetic generation
# ---------------------------------------------------------------------------

@dataclass
class SynthConfig:
    """Controls the synthetic stand-in for the detection/tracking/feature
    stage. Scene features inside an activity segment are drawn from a
    class-specific unit-variance Gaussian whose mean direction has norm
    ``class_separation``; background snippets use a zero-mean Gaussian.
    Agent features carry half of the class mean plus an agent-class
    direction, so per-snippet agents correlate with the activity."""

    num_videos: int = 20
    num_classes: int = 3
    feature_dim: int = 1024
    num_agent_classes: int = 4
    snippets_per_video: tuple[int, int] = (96, 128)
    segments_per_video: tuple[int, int] = (1, 3)
    segment_len: tuple[int, int] = (10, 40)
    agents_per_snippet: tuple[int, int] = (0, 3)
    class_separation: float = 3.0
    snippet_len_frames: int = 24

    def validate(self) -> None:
        if self.num_videos < 1:
            raise ConfigError(f"num_videos must be ≥ 1, got {self.num_videos}")
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be ≥ 2, got {self.num_classes}")
        if self.feature_dim < 4:
            raise ConfigError(f"feature_dim must be ≥ 4, got {self.feature_dim}")
        if self.num_agent_classes < 1:
            raise ConfigError("num_agent_classes must be ≥ 1")
        for name in ("snippets_per_video", "segments_per_video", "segment_len", "agents_per_snippet"):
            lo, hi = getattr(self, name)
            if lo > hi or lo < 0:
                raise ConfigError(f"{name} range ({lo}, {hi}) is invalid")
        if self.segments_per_video[0] < 1:
            raise ConfigError("segments_per_video lower bound must be ≥ 1")
        if self.segment_len[0] < 1:
            raise ConfigError("segment_len lower bound must be ≥ 1")
        if self.segments_per_video[0] * self.segment_len[0] > self.snippets_per_video[0]:
            raise ConfigError(
                f"segments cannot fit: {self.segments_per_video[0]} segments of length "
                f"≥ {self.segment_len[0]} exceed the shortest video "
                f"({self.snippets_per_video[0]} snippets)"
            )
        if self.class_separation <= 0:
            raise ConfigError("class_separation must be positive")
        if self.snippet_len_frames < 1:
            raise ConfigError("snippet_len_frames must be ≥ 1")


def _unit_directions(rng: np.random.Generator, count: int, dim: int) -> np.ndarray:
    raw = rng.standard_normal((count, dim))
    if count <= dim:
        # Orthonormal rows keep pairwise class-mean distances at sep·sqrt(2).
        q, _ = np.linalg.qr(raw.T)
        return q.T[:count]
    return raw / np.linalg.norm(raw, axis=1, keepdims=True)


def _place_segments(
    rng: np.random.Generator, total: int, cfg: SynthConfig
) -> list[tuple[int, int]]:
    k_lo, k_hi = cfg.segments_per_video
    len_lo, len_hi = cfg.segment_len
    k_max = min(k_hi, total // len_lo)
    if k_max < k_lo:
        raise ConfigError(f"segments cannot fit in a {total}-snippet video")
    k = int(rng.integers(k_lo, k_max + 1))
    lengths = []
    budget = total - k * len_lo
    for i in range(k):
        extra = int(rng.integers(0, min(len_hi - len_lo, budget) + 1))
        lengths.append(len_lo + extra)
        budget -= extra
    free = total - sum(lengths)
    gaps = rng.multinomial(free, np.full(k + 1, 1.0 / (k + 1)))
    segments = []
    cursor = 0
    for length, gap in zip(lengths, gaps[:-1]):
        cursor += int(gap)
        segments.append((cursor, cursor + length - 1))
        cursor += length
    return segments


def synth_generate(config: SynthConfig, seed: int) -> Dataset:
    """Deterministic synthetic dataset: each video carries 1-3 (configurable)
    non-overlapping latent activity segments with recorded ground truth.

    Features are quantized to float32 at generation time so that the CADF
    round trip is exact."""
    config.validate()
    rng = np.random.default_rng(seed)
    d = config.feature_dim
    class_means = (
        _unit_directions(rng, config.num_classes, d) * config.class_separation
    )
    agent_dirs = _unit_directions(rng, config.num_agent_classes, d)

    def quantize(x: np.ndarray) -> np.ndarray:
        return x.astype(np.float32).astype(np.float64)

    videos = []
    for v in range(config.num_videos):
        n_snip = int(rng.integers(config.snippets_per_video[0], config.snippets_per_video[1] + 1))
        placements = _place_segments(rng, n_snip, config)
        seg_classes = [int(rng.integers(config.num_classes)) for _ in placements]
        label = np.full(n_snip, -1, dtype=int)
        gt = []
        for (start, end), cls in zip(placements, seg_classes):
            label[start : end + 1] = cls
            gt.append(GroundTruthSegment(cls, start, end))
        snippets = []
        for i in range(n_snip):
            mean = class_means[label[i]] if label[i] >= 0 else np.zeros(d)
            scene = quantize(mean + rng.standard_normal(d))
            n_agents = int(
                rng.integers(config.agents_per_snippet[0], config.agents_per_snippet[1] + 1)
            )
            agents = []
            for tube_id in range(n_agents):
                agent_class = int(rng.integers(config.num_agent_classes))
                tube_length = int(rng.integers(1, config.snippet_len_frames + 1))
                feat = quantize(0.5 * mean + agent_dirs[agent_class] + rng.standard_normal(d))
                agents.append(
                    AgentTube(
                        tube_id=tube_id,
                        agent_class=agent_class,
                        feature=feat,
                        tube_length=tube_length,
                    )
                )
            snippets.append(Snippet(index=i, scene_feature=scene, agents=agents))
        videos.append(VideoSample(video_id=f"synth_{v:04d}", snippets=snippets, ground_truth=gt))

    return Dataset(
        feature_dim=d,
        num_activity_classes=config.num_classes,
        num_agent_classes=config.num_agent_classes,
        activity_class_names=[f"activity_{c}" for c in range(config.num_classes)],
        agent_class_names=[f"agent_{c}" for c in range(config.num_agent_classes)],
        videos=videos,
    )

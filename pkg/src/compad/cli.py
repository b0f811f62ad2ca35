"""Command-line surface: synthetic data generation, training, evaluation,
inference, and numeric self-checks.

Commands write their resolved configuration to run_config.json in the
output directory. Exit codes: 0 success, 1 runtime/data failure, 2
usage/validation failure. Flag values override config-file values; the
seed falls back to the COMPAD_SEED environment variable.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import grad_check
from .data import (
    DataError,
    SynthConfig,
    load_dataset,
    save_dataset,
    synth_generate,
)
from .evaluation import (
    EvalError,
    EvalProtocol,
    dataset_ground_truth,
    format_map_row,
    mean_ap,
    write_result_csv,
    write_result_json,
)
from .model import build_model, infer_dataset, model_from_arrays
from .scene_graph import AggMode, Topology
from .temporal import TemporalError, generate_anchors
from .training import (
    LossConfig,
    TrainConfig,
    TrainingError,
    activity_loss,
    boundary_loss,
    chunk_targets,
    load_checkpoint,
    total_loss,
    train,
    write_metrics_csv,
)

TOPOLOGIES = [t.value for t in Topology]
AGG_MODES = [m.value for m in AggMode]
PROTOCOL_CHOICES = ["road", "thumos14", "activitynet13", "custom"]

GRADCHECK_TOLERANCE = 1e-4


class UsageError(Exception):
    """Validation failure that maps to exit code 2."""


def _int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated ints, got {text!r}") from exc


def _float_list(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated floats, got {text!r}") from exc


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="compad",
        description="Complex activity detection: scene-graph attention with a "
        "temporal-graph localizer on synthetic or CADF feature datasets.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def shared(p: argparse.ArgumentParser, out_required: bool = True) -> None:
        p.add_argument("--config", help="JSON config file; flags override its values")
        p.add_argument("--out", required=out_required, help="output directory")
        p.add_argument("--seed", type=int, default=None,
                       help="RNG seed (falls back to $COMPAD_SEED, then 0)")
        p.add_argument("--threads", type=int, default=None,
                       help="worker threads for per-video forwards (default 1)")
        p.add_argument("--no-figures", action="store_const", const=True, default=None,
                       help="skip rendering matplotlib figures")

    p = sub.add_parser("synth", help="generate a synthetic CADF dataset")
    shared(p)
    p.add_argument("--videos", type=int, default=None)
    p.add_argument("--holdout", type=int, default=None,
                   help="extra held-out videos written to a sibling dataset")
    p.add_argument("--classes", type=int, default=None)
    p.add_argument("--feature-dim", type=int, default=None)
    p.add_argument("--agent-classes", type=int, default=None)
    p.add_argument("--snippets", type=_int_list, default=None, metavar="MIN,MAX")
    p.add_argument("--segments", type=_int_list, default=None, metavar="MIN,MAX")
    p.add_argument("--segment-len", type=_int_list, default=None, metavar="MIN,MAX")
    p.add_argument("--agents", type=_int_list, default=None, metavar="MIN,MAX")
    p.add_argument("--separation", type=float, default=None,
                   help="class-mean separation of scene features")
    p.add_argument("--snippet-len", type=int, default=None, help="frames per snippet")

    def model_flags(p: argparse.ArgumentParser) -> None:
        p.add_argument("--temporal-len", type=int, default=None)
        p.add_argument("--topology", choices=TOPOLOGIES, default=None)
        p.add_argument("--agg", choices=AGG_MODES, default=None)
        p.add_argument("--heads", type=_int_list, default=None, metavar="H1,H2,...")
        p.add_argument("--hidden-dim", type=int, default=None)
        p.add_argument("--scene-dim", type=int, default=None)
        p.add_argument("--concat-last-layer", action="store_const", const=True, default=None)
        p.add_argument("--slope", type=float, default=None, help="LeakyReLU slope")
        p.add_argument("--kernel-size", type=int, default=None)
        p.add_argument("--anchor-count", type=int, default=None)
        p.add_argument("--anchor-scales", type=_int_list, default=None, metavar="S1,S2,...")

    p = sub.add_parser("train", help="train on a CADF dataset")
    shared(p)
    p.add_argument("--dataset", required=True, help="manifest.json path or its directory")
    model_flags(p)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None, help="videos per optimizer step")
    p.add_argument("--snippet-len", type=int, default=None, help="frames per snippet")
    p.add_argument("--lambda", dest="lam", type=float, default=None,
                   help="activity-loss weight (default: anchor count)")
    p.add_argument("--pos-weight", type=_float_list, default=None,
                   help="per-class positive weights, length C+1")
    p.add_argument("--eval-dataset", default=None,
                   help="held-out dataset evaluated after each epoch")
    p.add_argument("--protocol", choices=PROTOCOL_CHOICES, default=None)
    p.add_argument("--iou-thresholds", type=_float_list, default=None,
                   help="thresholds for --protocol custom")

    def decode_flags(p: argparse.ArgumentParser) -> None:
        p.add_argument("--nms-iou", type=float, default=None)
        p.add_argument("--top-k", type=int, default=None)

    p = sub.add_parser("eval", help="run inference and score it against ground truth")
    shared(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--protocol", choices=PROTOCOL_CHOICES, default=None)
    p.add_argument("--iou-thresholds", type=_float_list, default=None,
                   help="thresholds for --protocol custom")
    model_flags(p)
    decode_flags(p)

    p = sub.add_parser("infer", help="emit scored segments as JSON lines")
    shared(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--checkpoint", required=True)
    model_flags(p)
    decode_flags(p)
    p.add_argument("--seconds", action="store_const", const=True, default=None,
                   help="also report boundaries in seconds")
    p.add_argument("--fps", type=float, default=None)
    p.add_argument("--snippet-len", type=int, default=None, help="frames per snippet")

    p = sub.add_parser("gradcheck", help="finite-difference check of the full model")
    shared(p, out_required=False)
    p.add_argument("--eps", type=float, default=None)

    return parser


DEFAULTS = {
    "seed": 0,
    "threads": 1,
    "no_figures": False,
    # synth
    "videos": 20,
    "holdout": 0,
    "classes": 3,
    "feature_dim": 1024,
    "agent_classes": 4,
    "snippets": [96, 128],
    "segments": [1, 3],
    "segment_len": [10, 40],
    "agents": [0, 3],
    "separation": 3.0,
    "snippet_len": 24,
    # model / training
    "temporal_len": 128,
    "topology": "fully",
    "agg": "aggregated",
    "heads": None,  # -> [4, 4, C, C]
    "hidden_dim": None,
    "scene_dim": None,
    "concat_last_layer": False,
    "slope": 0.2,
    "kernel_size": 3,
    "anchor_count": 128,
    "anchor_scales": None,
    "lr": 1e-3,
    "epochs": 20,
    "batch_size": 1,
    "lam": None,
    "pos_weight": None,
    "eval_dataset": None,
    "protocol": "road",
    "iou_thresholds": None,
    # decode
    "nms_iou": 0.5,
    "top_k": 100,
    # infer
    "seconds": False,
    "fps": 25.0,
    # gradcheck
    "eps": 1e-5,
    "out": None,
}


def resolve_config(args: argparse.Namespace) -> dict:
    """Merge precedence: flags > config file > $COMPAD_SEED (seed only) >
    defaults."""
    merged = dict(DEFAULTS)
    config_path = getattr(args, "config", None)
    if config_path:
        try:
            file_values = json.loads(Path(config_path).read_text(encoding="utf-8"))
        except OSError as exc:
            raise UsageError(f"cannot read config file {config_path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise UsageError(f"config file {config_path} is not valid JSON: {exc}") from exc
        unknown = set(file_values) - set(DEFAULTS) - {"dataset", "checkpoint"}
        if unknown:
            raise UsageError(f"unknown config file keys: {sorted(unknown)}")
        merged.update(file_values)
    env_seed = os.environ.get("COMPAD_SEED")
    if env_seed is not None and getattr(args, "seed", None) is None and (
        not config_path or "seed" not in file_values
    ):
        try:
            merged["seed"] = int(env_seed)
        except ValueError as exc:
            raise UsageError(f"COMPAD_SEED must be an integer, got {env_seed!r}") from exc
    for key, value in vars(args).items():
        if key in ("command", "config"):
            continue
        if value is not None:
            merged[key] = value
    merged["command"] = args.command
    _validate(merged)
    return merged


def _validate(cfg: dict) -> None:
    for key in ("lr", "slope", "separation", "nms_iou", "eps"):
        value = cfg.get(key)
        if value is not None and not np.isfinite(value):
            raise UsageError(f"--{key.replace('_', '-')} must be finite, got {value}")
    for key in ("snippets", "segments", "segment_len", "agents"):
        value = cfg.get(key)
        if value is not None and len(value) != 2:
            raise UsageError(f"--{key.replace('_', '-')} needs exactly MIN,MAX")
    if cfg.get("threads", 1) < 1:
        raise UsageError("--threads must be ≥ 1")
    if cfg["command"] in ("train", "eval") and cfg.get("protocol") == "custom":
        if not cfg.get("iou_thresholds"):
            raise UsageError("--protocol custom requires --iou-thresholds")


def _out_dir(cfg: dict) -> Path:
    out = Path(cfg["out"] if cfg.get("out") else "gradcheck-out")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _echo_run_config(cfg: dict, out: Path, extra: dict | None = None) -> None:
    payload = {k: v for k, v in cfg.items() if not k.startswith("_")}
    if extra:
        payload.update(extra)
    (out / "run_config.json").write_text(
        json.dumps(payload, sort_keys=True, indent=2, default=str) + "\n", encoding="utf-8"
    )


def _manifest_path(dataset_arg: str) -> Path:
    path = Path(dataset_arg)
    return path if path.suffix == ".json" else path / "manifest.json"


def _figures_enabled(cfg: dict) -> bool:
    return not cfg.get("no_figures")


def _protocol_from_config(cfg: dict) -> EvalProtocol:
    if cfg["protocol"] == "custom":
        return EvalProtocol(iou_thresholds=list(cfg["iou_thresholds"]))
    return EvalProtocol.preset(cfg["protocol"])


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_synth(cfg: dict) -> int:
    out = _out_dir(cfg)
    synth_cfg = SynthConfig(
        num_videos=cfg["videos"] + cfg["holdout"],
        num_classes=cfg["classes"],
        feature_dim=cfg["feature_dim"],
        num_agent_classes=cfg["agent_classes"],
        snippets_per_video=tuple(cfg["snippets"]),
        segments_per_video=tuple(cfg["segments"]),
        segment_len=tuple(cfg["segment_len"]),
        agents_per_snippet=tuple(cfg["agents"]),
        class_separation=cfg["separation"],
        snippet_len_frames=cfg["snippet_len"],
    )
    dataset = synth_generate(synth_cfg, seed=cfg["seed"])
    train_split = dataset.subset(list(range(cfg["videos"])))
    save_dataset(train_split, out / "train" / "manifest.json")
    written = {"train": str(out / "train")}
    if cfg["holdout"] > 0:
        heldout = dataset.subset(list(range(cfg["videos"], len(dataset.videos))))
        save_dataset(heldout, out / "heldout" / "manifest.json")
        written["heldout"] = str(out / "heldout")
    _echo_run_config(cfg, out, {"datasets_written": written})
    print(f"wrote {cfg['videos']} training videos to {written['train']}")
    if cfg["holdout"]:
        print(f"wrote {cfg['holdout']} held-out videos to {written['heldout']}")
    return 0


def _train_config(cfg: dict) -> TrainConfig:
    return TrainConfig(
        snippet_len=cfg["snippet_len"],
        temporal_len=cfg["temporal_len"],
        topology=Topology(cfg["topology"]),
        agg_mode=AggMode(cfg["agg"]),
        heads=cfg["heads"],
        hidden_dim=cfg["hidden_dim"],
        scene_dim=cfg["scene_dim"],
        concat_last_layer=bool(cfg["concat_last_layer"]),
        learning_rate=cfg["lr"],
        epochs=cfg["epochs"],
        batch_size=cfg["batch_size"],
        seed=cfg["seed"],
        anchor_count=cfg["anchor_count"],
        anchor_scales=cfg["anchor_scales"],
        leaky_slope=cfg["slope"],
        kernel_size=cfg["kernel_size"],
    )


def cmd_train(cfg: dict) -> int:
    out = _out_dir(cfg)
    dataset = load_dataset(_manifest_path(cfg["dataset"]))
    train_cfg = _train_config(cfg)
    train_cfg.validate()
    loss_cfg = LossConfig(
        lam=cfg["lam"],
        pos_weight=np.asarray(cfg["pos_weight"], dtype=float) if cfg["pos_weight"] else None,
    )

    eval_fn = None
    if cfg["eval_dataset"]:
        heldout = load_dataset(_manifest_path(cfg["eval_dataset"]))
        protocol = _protocol_from_config(cfg)
        heldout_gt = dataset_ground_truth(heldout)

        def eval_fn(model, anchors):
            detections = infer_dataset(
                model, heldout, anchors, cfg["nms_iou"], cfg["top_k"], cfg["threads"]
            )
            result = mean_ap(
                detections, heldout_gt, protocol, num_classes=heldout.num_activity_classes
            )
            return result.avg_map

    checkpoint = out / "checkpoint.cadw"
    result = train(dataset, train_cfg, loss_cfg, checkpoint_path=checkpoint, eval_fn=eval_fn)
    write_metrics_csv(out / "metrics.csv", result.metrics)
    _echo_run_config(
        cfg,
        out,
        {
            "anchor_count_effective": len(result.anchors),
            "lambda_effective": result.lam,
            "pos_weight_effective": result.pos_weight.tolist(),
            "checkpoint": str(checkpoint),
        },
    )
    if _figures_enabled(cfg):
        from .figures import save_training_curves

        save_training_curves(result.metrics, out / "loss_curves.png")
    last = result.metrics[-1]
    print(
        f"epoch {last.epoch}: loss_act={last.loss_act:.6f} loss_br={last.loss_br:.6f} "
        f"loss_total={last.loss_total:.6f}"
        + (f" map_avg={last.map_avg:.4f}" if last.map_avg is not None else "")
    )
    print(f"checkpoint: {checkpoint}")
    return 0


def _load_model_for_inference(cfg: dict) -> tuple:
    checkpoint_path = Path(cfg["checkpoint"])
    arrays = load_checkpoint(checkpoint_path)
    sibling = checkpoint_path.parent / "run_config.json"
    saved = {}
    if sibling.exists():
        saved = json.loads(sibling.read_text(encoding="utf-8"))

    def setting(key):
        # explicit flag > training-run echo > defaults
        if cfg.get(f"_flag_{key}") is not None:
            return cfg[f"_flag_{key}"]
        if key in saved and saved[key] is not None:
            return saved[key]
        return cfg[key]

    temporal_len = int(setting("temporal_len"))
    model = model_from_arrays(
        arrays,
        topology=Topology(setting("topology")),
        agg_mode=AggMode(setting("agg")),
        temporal_len=temporal_len,
        slope=float(setting("slope")),
        concat_last_layer=bool(setting("concat_last_layer")),
    )
    scales = setting("anchor_scales")
    if scales is None:
        scales = TrainConfig(temporal_len=temporal_len).resolved_scales()
    anchors = generate_anchors(temporal_len, [int(s) for s in scales], int(setting("anchor_count")))
    return model, anchors


def cmd_eval(cfg: dict) -> int:
    out = _out_dir(cfg)
    dataset = load_dataset(_manifest_path(cfg["dataset"]))
    model, anchors = _load_model_for_inference(cfg)
    protocol = _protocol_from_config(cfg)
    ground_truth = dataset_ground_truth(dataset)
    detections = infer_dataset(
        model, dataset, anchors, cfg["nms_iou"], cfg["top_k"], cfg["threads"]
    )
    result = mean_ap(
        detections,
        ground_truth,
        protocol,
        num_classes=dataset.num_activity_classes,
        class_names=dataset.activity_class_names,
    )
    write_result_json(result, out / "result.json")
    write_result_csv(result, out / "result.csv")
    _echo_run_config(
        cfg,
        out,
        {
            "anchor_count_effective": len(anchors),
            "iou_thresholds_effective": protocol.iou_thresholds,
        },
    )
    if _figures_enabled(cfg):
        from .figures import save_map_chart

        save_map_chart(result, out / "map_chart.png")
    print(format_map_row(result))
    return 0


def cmd_infer(cfg: dict) -> int:
    out = _out_dir(cfg)
    dataset = load_dataset(_manifest_path(cfg["dataset"]))
    model, anchors = _load_model_for_inference(cfg)
    detections = infer_dataset(
        model, dataset, anchors, cfg["nms_iou"], cfg["top_k"], cfg["threads"]
    )
    detections.sort(key=lambda d: (d.video_id, -d.score, d.start_snippet, d.activity_class))
    names = dataset.activity_class_names
    lines = []
    for d in detections:
        record = {
            "video_id": d.video_id,
            "class": d.activity_class,
            "class_name": names[d.activity_class] if d.activity_class < len(names) else "",
            "start_snippet": d.start_snippet,
            "end_snippet": d.end_snippet,
            "score": d.score,
        }
        if cfg["seconds"]:
            scale = cfg["snippet_len"] / cfg["fps"]
            record["start_seconds"] = d.start_snippet * scale
            record["end_seconds"] = (d.end_snippet + 1) * scale
        lines.append(json.dumps(record, sort_keys=True))
    (out / "segments.jsonl").write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")
    _echo_run_config(cfg, out, {"anchor_count_effective": len(anchors), "segments": len(lines)})
    if _figures_enabled(cfg):
        from .figures import save_timelines

        save_timelines(dataset, detections, out / "timelines.png")
    print(f"wrote {len(lines)} segments to {out / 'segments.jsonl'}")
    return 0


def cmd_gradcheck(cfg: dict) -> int:
    out = _out_dir(cfg)
    rng = np.random.default_rng(cfg["seed"])
    synth_cfg = SynthConfig(
        num_videos=1,
        num_classes=2,
        feature_dim=8,
        num_agent_classes=2,
        snippets_per_video=(6, 6),
        segments_per_video=(1, 1),
        segment_len=(2, 4),
        agents_per_snippet=(0, 2),
    )
    dataset = synth_generate(synth_cfg, seed=cfg["seed"])
    video = dataset.videos[0]
    model = build_model(
        rng,
        feature_dim=8,
        num_classes=2,
        temporal_len=8,
        heads=[2],
        hidden_dim=8,
        scene_dim=8,
        topology=Topology(cfg["topology"]),
        agg_mode=AggMode(cfg["agg"]),
        slope=cfg["slope"],
    )
    anchors = generate_anchors(8, [4, 8], 4)
    prep = chunk_targets(video, 8, 2)
    named = model.named_parameters()

    def f():
        class_logits, boundary_logits, valid = model.forward_chunk(video)
        l_act = activity_loss(ad.transpose(class_logits), prep.y_cls, np.ones(3), 1.0, valid)
        br = ad.reshape(ad.sigmoid(boundary_logits), (8,))
        l_br = boundary_loss(br, prep.y_br, 1.0, valid)
        return total_loss(l_act, l_br, float(len(anchors)))

    error = grad_check(f, list(named.values()), eps=cfg["eps"])
    passed = error < GRADCHECK_TOLERANCE
    _echo_run_config(cfg, out, {"max_relative_error": error, "passed": bool(passed)})
    print(f"gradcheck max relative error: {error:.3e} "
          f"({'PASS' if passed else 'FAIL'} at {GRADCHECK_TOLERANCE:g})")
    return 0 if passed else 1


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "eval": cmd_eval,
    "infer": cmd_infer,
    "gradcheck": cmd_gradcheck,
}


def parse_args(argv=None) -> tuple[str, dict]:
    """Parse flags and merge them with config-file values and defaults.

    Raises SystemExit(2) on usage errors, matching argparse behavior."""
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = resolve_config(args)
    except UsageError as exc:
        parser.exit(2, f"error: {exc}\n")
    # remember which model settings were explicit flags so eval/infer can
    # distinguish them from defaults when a training echo is available
    for key in ("temporal_len", "topology", "agg", "slope", "concat_last_layer",
                "anchor_count", "anchor_scales"):
        cfg[f"_flag_{key}"] = getattr(args, key, None)
    return args.command, cfg


def main(argv=None) -> int:
    command, cfg = parse_args(argv)
    try:
        return COMMANDS[command](cfg)
    except (DataError, TrainingError, EvalError, TemporalError, ad.EngineError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

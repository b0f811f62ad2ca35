import json

import numpy as np
import pytest

from oracles import greedy_ap, iou_by_counting

from compad.evaluation import (
    PROTOCOL_THRESHOLDS,
    EvalError,
    EvalProtocol,
    GroundTruthInstance,
    average_precision,
    format_map_row,
    mean_ap,
    write_result_csv,
    write_result_json,
)
from compad.model import Detection


def det(video, cls, start, end, score):
    return Detection(video, cls, start, end, score)


def gt(video, cls, start, end):
    return GroundTruthInstance(video, cls, start, end)


def replay_matching_oracle(predictions, gts, cls, tau):
    """Independent re-derivation: sort, greedily match by max IoU within
    the same video, then integrate the PR curve step by step."""
    preds = sorted(
        [p for p in predictions if p.activity_class == cls],
        key=lambda p: (-p.score, p.start_snippet, p.video_id),
    )
    targets = [g for g in gts if g.activity_class == cls]
    if not targets:
        return None
    taken = set()
    flags = []
    for p in preds:
        candidates = [
            (iou_by_counting((p.start_snippet, p.end_snippet), (g.start_snippet, g.end_snippet)), i)
            for i, g in enumerate(targets)
            if g.video_id == p.video_id and i not in taken
        ]
        candidates = [(i_ou, i) for i_ou, i in candidates if i_ou >= tau]
        if candidates:
            best = max(candidates, key=lambda t: t[0])
            taken.add(best[1])
            flags.append(True)
        else:
            flags.append(False)
    return greedy_ap((flags, len(targets)))


class TestAveragePrecision:
    def test_perfect_detector(self):
        preds = [det("v", 0, 3, 9, 0.9)]
        gts = [gt("v", 0, 3, 9)]
        assert average_precision(preds, gts, 0, 0.5) == 1.0

    def test_total_miss(self):
        preds = [det("v", 0, 0, 2, 0.9)]
        gts = [gt("v", 0, 10, 14)]
        assert average_precision(preds, gts, 0, 0.5) == 0.0

    def test_hit_miss_hit_is_five_sixths(self):
        # scores 0.9 hit, 0.8 miss, 0.7 hit over two GTs at tau 0.5
        gts = [gt("v", 0, 0, 9), gt("v", 0, 20, 29)]
        preds = [
            det("v", 0, 0, 9, 0.9),
            det("v", 0, 40, 49, 0.8),
            det("v", 0, 20, 29, 0.7),
        ]
        ap = average_precision(preds, gts, 0, 0.5)
        assert ap == pytest.approx(5 / 6, abs=1e-12)
        assert replay_matching_oracle(preds, gts, 0, 0.5) == pytest.approx(ap, abs=1e-12)

    def test_no_predictions_with_gt(self):
        assert average_precision([], [gt("v", 0, 0, 5)], 0, 0.5) == 0.0

    def test_class_without_gt_skipped(self):
        assert average_precision([det("v", 1, 0, 5, 0.5)], [gt("v", 0, 0, 5)], 1, 0.5) is None

    def test_matching_respects_video_boundaries(self):
        preds = [det("a", 0, 0, 9, 0.9)]
        gts = [gt("b", 0, 0, 9)]
        assert average_precision(preds, gts, 0, 0.5) == 0.0

    def test_gt_never_matched_twice(self):
        gts = [gt("v", 0, 0, 9)]
        preds = [det("v", 0, 0, 9, 0.9), det("v", 0, 0, 9, 0.8)]
        # second prediction is a false positive: precision drops past recall 1
        ap = average_precision(preds, gts, 0, 0.5)
        assert ap == 1.0  # envelope at full recall already reached

    def test_monotone_in_threshold(self):
        rng = np.random.default_rng(70)
        for _ in range(20):
            gts, preds = random_instance(rng)
            taus = [0.1, 0.3, 0.5, 0.7, 0.9]
            aps = [average_precision(preds, gts, 0, t) or 0.0 for t in taus]
            assert all(a >= b - 1e-12 for a, b in zip(aps, aps[1:]))

    def test_invariant_under_monotone_score_rescale(self):
        rng = np.random.default_rng(71)
        gts, preds = random_instance(rng)
        base = average_precision(preds, gts, 0, 0.5)
        rescaled = [
            Detection(p.video_id, p.activity_class, p.start_snippet, p.end_snippet, p.score**3 + 1)
            for p in preds
        ]
        assert average_precision(rescaled, gts, 0, 0.5) == pytest.approx(base, abs=1e-12)

    def test_zero_overlap_lowest_score_never_increases_ap(self):
        rng = np.random.default_rng(72)
        for _ in range(20):
            gts, preds = random_instance(rng)
            base = average_precision(preds, gts, 0, 0.5)
            min_score = min(p.score for p in preds) if preds else 1.0
            extra = preds + [det("v", 0, 990, 995, min_score / 2)]
            worse = average_precision(extra, gts, 0, 0.5)
            assert worse <= base + 1e-12

    def test_matches_replay_oracle_randomized(self):
        rng = np.random.default_rng(73)
        for _ in range(50):
            gts, preds = random_instance(rng)
            for tau in (0.3, 0.5, 0.7):
                got = average_precision(preds, gts, 0, tau)
                want = replay_matching_oracle(preds, gts, 0, tau)
                assert got == pytest.approx(want, abs=1e-12)


def random_instance(rng, videos=2, max_gt=4, max_pred=10):
    gts = []
    for v in range(videos):
        for _ in range(int(rng.integers(1, max_gt + 1))):
            s = int(rng.integers(0, 40))
            e = s + int(rng.integers(0, 15))
            gts.append(gt(f"v{v}", 0, s, e))
    preds = []
    for _ in range(int(rng.integers(1, max_pred + 1))):
        v = int(rng.integers(0, videos))
        s = int(rng.integers(0, 45))
        e = s + int(rng.integers(0, 15))
        preds.append(det(f"v{v}", 0, s, e, float(rng.uniform(0.01, 1.0))))
    return gts, preds


class TestMeanAp:
    def test_perfect_predictions_saturate(self):
        gts = [gt("v", 0, 0, 9), gt("v", 1, 20, 29)]
        preds = [det("v", 0, 0, 9, 0.9), det("v", 1, 20, 29, 0.8)]
        protocol = EvalProtocol.preset("thumos14")
        result = mean_ap(preds, gts, protocol)
        assert all(v == 1.0 for v in result.map_per_threshold.values())
        assert result.avg_map == 1.0

    def test_one_perfect_one_empty_class(self):
        gts = [gt("v", 0, 0, 9), gt("v", 1, 20, 29)]
        preds = [det("v", 0, 0, 9, 0.9)]
        result = mean_ap(preds, gts, EvalProtocol.preset("road"))
        assert all(v == pytest.approx(0.5) for v in result.map_per_threshold.values())

    def test_no_gt_is_an_error(self):
        with pytest.raises(EvalError):
            mean_ap([], [], EvalProtocol.preset("road"))

    def test_random_vs_per_class_oracle(self):
        rng = np.random.default_rng(74)
        gts, preds = [], []
        for cls in range(3):
            g, p = random_instance(rng)
            gts += [
                GroundTruthInstance(x.video_id, cls, x.start_snippet, x.end_snippet) for x in g
            ]
            preds += [
                Detection(x.video_id, cls, x.start_snippet, x.end_snippet, x.score) for x in p
            ]
        protocol = EvalProtocol([0.3, 0.5, 0.7])
        result = mean_ap(preds, gts, protocol)
        for tau in protocol.iou_thresholds:
            expected = np.mean(
                [replay_matching_oracle(preds, gts, c, tau) for c in range(3)]
            )
            assert result.map_per_threshold[tau] == pytest.approx(expected, abs=1e-12)

    def test_classes_without_gt_excluded_from_mean(self):
        gts = [gt("v", 2, 0, 9)]
        preds = [det("v", 0, 0, 9, 0.9), det("v", 2, 0, 9, 0.9)]
        result = mean_ap(preds, gts, EvalProtocol([0.5]), num_classes=5)
        assert list(result.per_class) == [2]
        assert result.map_per_threshold[0.5] == 1.0


class TestProtocols:
    def test_presets_match_published_threshold_lists(self):
        assert PROTOCOL_THRESHOLDS["road"] == [0.1, 0.2, 0.3, 0.4, 0.5]
        assert PROTOCOL_THRESHOLDS["thumos14"] == [0.3, 0.4, 0.5, 0.6, 0.7]
        assert PROTOCOL_THRESHOLDS["activitynet13"] == [0.5, 0.75, 0.95]
        assert PROTOCOL_THRESHOLDS["activitynet13_full"][0] == 0.5
        assert len(PROTOCOL_THRESHOLDS["activitynet13_full"]) == 10

    def test_thresholds_must_increase(self):
        with pytest.raises(EvalError):
            EvalProtocol([0.5, 0.5])
        with pytest.raises(EvalError):
            EvalProtocol([0.5, 0.3])

    def test_thresholds_in_unit_interval(self):
        with pytest.raises(EvalError):
            EvalProtocol([0.0, 0.5])
        with pytest.raises(EvalError):
            EvalProtocol([0.5, 1.5])

    def test_unknown_preset(self):
        with pytest.raises(EvalError, match="unknown protocol"):
            EvalProtocol.preset("coco")


class TestResultFiles:
    def make_result(self):
        gts = [gt("v", 0, 0, 9), gt("v", 1, 20, 29)]
        preds = [det("v", 0, 0, 9, 0.9), det("v", 1, 20, 24, 0.8)]
        return mean_ap(preds, gts, EvalProtocol.preset("road"), class_names=["walk", "run"])

    def test_json_layout(self, tmp_path):
        result = self.make_result()
        write_result_json(result, tmp_path / "result.json")
        payload = json.loads((tmp_path / "result.json").read_text())
        assert payload["protocol"]["iou_thresholds"] == [0.1, 0.2, 0.3, 0.4, 0.5]
        assert set(payload["map"]) == {"0.1", "0.2", "0.3", "0.4", "0.5"}
        assert 0.0 <= payload["avg_map"] <= 1.0

    def test_csv_layout(self, tmp_path):
        result = self.make_result()
        write_result_csv(result, tmp_path / "result.csv")
        lines = (tmp_path / "result.csv").read_text().strip().splitlines()
        assert lines[0] == "class,0.1,0.2,0.3,0.4,0.5,avg"
        assert lines[1].startswith("walk,")
        assert lines[-1].startswith("mAP,")

    def test_printed_table_row(self):
        result = self.make_result()
        text = format_map_row(result)
        assert "Avg" in text and "Ours" in text

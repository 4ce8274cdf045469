import json

import numpy as np
import pytest

from refclick import maskops, robot
from refclick.clicks import NEGATIVE, POSITIVE
from refclick.sampling import EvalSample


def blob(shape, r0, c0, r1, c1):
    m = np.zeros(shape, dtype=np.uint8)
    m[r0:r1, c0:c1] = 1
    return m


def make_sample(gt, sample_id="s"):
    image = np.zeros((*gt.shape, 3), dtype=np.uint8)
    return EvalSample(
        target_image=image, target_gt=gt, guidance=None, combo=("p",), kind="single", target_id=sample_id
    )


class ScriptedPredictor:
    """Emits a fixed sequence of soft masks, one per interaction round."""

    def __init__(self, masks):
        self.masks = masks

    def open_session(self, image, guidance):
        state = {"i": 0}

        def step(clicks, prev):
            pred = self.masks[min(state["i"], len(self.masks) - 1)]
            state["i"] += 1
            return pred.astype(np.float32)

        return step


class OraclePredictor:
    def __init__(self, gt):
        self.gt = gt

    def open_session(self, image, guidance):
        return lambda clicks, prev: self.gt.astype(np.float32)


class EmptyPredictor:
    def open_session(self, image, guidance):
        return lambda clicks, prev: np.zeros(image.shape[:2], dtype=np.float32)


# -- first click ---------------------------------------------------------------


def test_first_click_square_center():
    gt = blob((5, 5), 0, 0, 5, 5)
    c = robot.first_click(gt)
    assert (c.row, c.col, c.polarity, c.order) == (2, 2, POSITIVE, 1)


def test_first_click_single_pixel():
    gt = blob((6, 6), 3, 4, 4, 5)
    c = robot.first_click(gt)
    assert (c.row, c.col) == (3, 4)


def test_first_click_always_on_gt():
    rng = np.random.default_rng(0)
    for _ in range(50):
        gt = (rng.random((9, 9)) < 0.4).astype(np.uint8)
        if not gt.any():
            continue
        c = robot.first_click(gt)
        assert gt[c.row, c.col] == 1


def test_first_click_empty_raises():
    with pytest.raises(ValueError):
        robot.first_click(np.zeros((4, 4), np.uint8))


# -- next click ----------------------------------------------------------------


def test_next_click_all_missed_clicks_blob_center():
    gt = blob((9, 9), 2, 2, 7, 7)
    pred = np.zeros((9, 9), dtype=np.float32)
    c = robot.next_click(pred, gt, [robot.first_click(gt)])
    assert (c.row, c.col) == maskops.interior_center(gt)
    assert c.polarity == POSITIVE and c.order == 2


def test_next_click_false_positive_region_is_negative():
    gt = blob((10, 10), 0, 0, 4, 4)
    extra = blob((10, 10), 6, 6, 9, 9)
    pred = (gt | extra).astype(np.float32)
    c = robot.next_click(pred, gt, [robot.first_click(gt)])
    assert extra[c.row, c.col] == 1
    assert c.polarity == NEGATIVE


def test_next_click_prefers_larger_error_region():
    gt = np.zeros((12, 12), np.uint8)
    gt[0:2, 0:5] = 1  # false negative of 10 px (pred misses it)
    fp = blob((12, 12), 8, 8, 10, 10)  # false positive of 4 px
    pred = fp.astype(np.float32)
    c = robot.next_click(pred, gt, [])
    assert gt[c.row, c.col] == 1
    assert c.polarity == POSITIVE


def test_next_click_perfect_prediction_raises():
    gt = blob((6, 6), 1, 1, 4, 4)
    with pytest.raises(ValueError):
        robot.next_click(gt.astype(np.float32), gt, [])


def brute_next_click(pred, gt):
    """Exhaustive re-derivation: largest 4-connected XOR region, deepest pixel."""
    pred_bin = (pred > 0.5).astype(np.uint8)
    error = pred_bin ^ gt
    labels, count = _flood(error)
    best_label, best_size = None, -1
    for lab in range(1, count + 1):
        size = int((labels == lab).sum())
        if size > best_size:
            best_label, best_size = lab, size
    region = (labels == best_label).astype(np.uint8)
    h, w = region.shape
    padded = np.pad(region, 1)
    bg = np.argwhere(padded == 0)
    best, best_d = None, -1.0
    for r in range(h):
        for c in range(w):
            if region[r, c]:
                d = np.sqrt(((bg - (r + 1, c + 1)) ** 2).sum(axis=1)).min()
                if d > best_d:
                    best, best_d = (r, c), d
    return best, (POSITIVE if gt[best] == 1 else NEGATIVE)


def _flood(m):
    h, w = m.shape
    labels = np.zeros((h, w), np.int32)
    count = 0
    for r in range(h):
        for c in range(w):
            if m[r, c] and not labels[r, c]:
                count += 1
                stack = [(r, c)]
                labels[r, c] = count
                while stack:
                    cr, cc = stack.pop()
                    for dr, dc in ((-1, 0), (1, 0), (0, -1), (0, 1)):
                        nr, nc = cr + dr, cc + dc
                        if 0 <= nr < h and 0 <= nc < w and m[nr, nc] and not labels[nr, nc]:
                            labels[nr, nc] = count
                            stack.append((nr, nc))
    return labels, count


def test_next_click_matches_brute_force():
    rng = np.random.default_rng(31)
    done = 0
    while done < 60:
        gt = (rng.random((8, 8)) < 0.45).astype(np.uint8)
        pred = rng.random((8, 8)).astype(np.float32)
        if not gt.any() or not ((pred > 0.5).astype(np.uint8) ^ gt).any():
            continue
        c = robot.next_click(pred, gt, [])
        want_pos, want_pol = brute_next_click(pred, gt)
        assert (c.row, c.col) == want_pos
        assert c.polarity == want_pol
        done += 1


# -- sessions ----------------------------------------------------------------------


def test_session_oracle_model_one_click():
    gt = blob((8, 8), 2, 2, 6, 6)
    trace = robot.run_session(OraclePredictor(gt), make_sample(gt))
    assert trace.ious == [1.0]
    assert len(trace.clicks) == 1


def test_session_constant_empty_model_runs_to_cap():
    gt = blob((8, 8), 2, 2, 6, 6)
    trace = robot.run_session(EmptyPredictor(), make_sample(gt))
    assert trace.ious == [0.0] * 20
    assert len(trace.clicks) == 20


def test_session_scripted_stops_at_third_click():
    gt = np.zeros((16, 16), np.uint8)
    gt[3:13, 3:13] = 1  # 100 pixels
    flat = np.argwhere(gt)

    def subset(k):
        m = np.zeros_like(gt)
        for r, c in flat[:k]:
            m[r, c] = 1
        return m

    preds = [subset(50), subset(82), subset(91)]
    for m, want in zip(preds, (0.5, 0.82, 0.91)):
        assert maskops.iou(m, gt) == pytest.approx(want)
    trace = robot.run_session(ScriptedPredictor(preds), make_sample(gt))
    assert len(trace.ious) == 3
    assert trace.ious[-1] >= 0.90


def test_session_clicks_land_in_error_with_matching_polarity():
    rng = np.random.default_rng(5)
    gt = blob((10, 10), 2, 2, 8, 8)
    masks = [(rng.random((10, 10)) < 0.4).astype(np.float32) for _ in range(20)]
    trace = robot.run_session(ScriptedPredictor(masks), make_sample(gt))
    for i, click in enumerate(trace.clicks[1:]):
        pred_bin = (masks[i] > 0.5).astype(np.uint8)
        error = pred_bin ^ gt
        assert error[click.row, click.col] == 1
        assert click.polarity == (POSITIVE if gt[click.row, click.col] else NEGATIVE)


# -- NoC arithmetic -------------------------------------------------------------------


def trace_of(ious):
    return robot.SessionTrace(sample_id="t", ious=list(ious))


def test_noc_hand_computed():
    t = [trace_of([0.5, 0.82, 0.91])]
    assert robot.noc(t, 0.80) == 2
    assert robot.noc(t, 0.85) == 3
    assert robot.noc(t, 0.90) == 3


def test_noc_failure_counts_as_twenty():
    t = [trace_of([0.1] * 20)]
    assert robot.noc(t, 0.90) == 20


def test_noc_all_first_click():
    t = [trace_of([0.95]), trace_of([0.99])]
    assert robot.noc(t, 0.90) == 1.0


def test_noc_mean_of_two():
    t = [trace_of([0.5, 0.85]), trace_of([0.2, 0.4, 0.6, 0.81])]
    assert robot.noc(t, 0.80) == 3.0


def test_noc_monotone_in_threshold():
    rng = np.random.default_rng(8)
    for _ in range(200):
        traces = [trace_of(rng.random(int(rng.integers(1, 21)))) for _ in range(int(rng.integers(1, 6)))]
        a, b, c = (robot.noc(traces, t) for t in (0.80, 0.85, 0.90))
        assert a <= b <= c


# -- evaluation --------------------------------------------------------------------------


def test_evaluate_oracle_and_empty():
    gt = blob((8, 8), 1, 1, 7, 7)
    samples = [make_sample(gt, f"s{i}") for i in range(3)]
    report = robot.evaluate(OraclePredictor(gt), samples)
    assert report.noc80 == report.noc85 == report.noc90 == 1.0
    assert report.iou_at_1 == 100.0
    assert report.n_samples == 3
    report = robot.evaluate(EmptyPredictor(), samples)
    assert report.noc80 == report.noc85 == report.noc90 == 20.0
    assert report.failures_per_threshold == {"0.80": 3, "0.85": 3, "0.90": 3}


def test_evaluate_deterministic_across_worker_counts():
    rng = np.random.default_rng(9)
    gt = blob((10, 10), 2, 2, 8, 8)
    masks = [(rng.random((10, 10)) < 0.45).astype(np.float32) for _ in range(30)]
    samples = [make_sample(gt, f"s{i}") for i in range(6)]
    reports = []
    for workers in (1, 3):
        predictor = ScriptedPredictor(masks)
        report = robot.evaluate(predictor, samples, robot.EvalConfig(workers=workers))
        reports.append(report.to_json())
    assert reports[0] == reports[1]


def test_report_json_and_csv(tmp_path):
    gt = blob((8, 8), 1, 1, 7, 7)
    report = robot.evaluate(OraclePredictor(gt), [make_sample(gt)])
    payload = json.loads(report.to_json())
    assert payload["n_samples"] == 1
    assert payload["traces"][0]["ious"] == [1.0]
    assert "conventions" in payload
    csv_path = tmp_path / "table.csv"
    robot.write_csv(report, csv_path)
    lines = csv_path.read_text().splitlines()
    assert lines[0] == "@80,@85,@90,&1"
    assert lines[1] == "1.00,1.00,1.00,100.00"


def test_apply_regime():
    img = np.zeros((8, 8, 3), np.uint8)
    g = robot.ReferenceGuidance(img, blob((8, 8), 0, 0, 2, 2), blob((8, 8), 4, 4, 6, 6))
    assert robot.apply_regime(g, "both") is g
    assert robot.apply_regime(g, "none") is None
    assert robot.apply_regime(g, "pos").neg_mask is None
    assert robot.apply_regime(g, "neg").pos_mask is None
    with pytest.raises(ValueError):
        robot.apply_regime(g, "sideways")

"""Detection metrics: coverage matching, FP components, edge robustness."""
import json

import numpy as np
import pytest

from eval_oracle import all_boxes, naive_counts, naive_edge_robustness
from tideseg.data import OBSTACLE, SKY, WATER, FrameAnnotation, SegmentationMask
from tideseg.errors import ConfigError, DataError
from tideseg.evaluation import (
    DetectionReport,
    EvalConfig,
    apply_danger_zone,
    evaluate_frame,
    f1_score,
    format_report,
    match_obstacles,
    predicted_boundary,
    rasterize_edge,
    summarize,
    water_edge_robustness,
    write_report_record,
)


def mask_of(labels) -> SegmentationMask:
    return SegmentationMask(np.asarray(labels, dtype=np.int64))


def ann_of(gt, boxes=(), edge=(), zone=None) -> FrameAnnotation:
    return FrameAnnotation(
        mask=mask_of(gt),
        obstacle_boxes=tuple(boxes),
        water_edge=tuple(edge),
        danger_zone=zone,
    )


def water_canvas(h, w, value=WATER):
    return np.full((h, w), value, dtype=np.int64)


# ---------------------------------------------------------------------------
# metric arithmetic
# ---------------------------------------------------------------------------
def test_f1_matches_reference_rows_at_one_decimal():
    assert round(f1_score(96.9, 92.0), 1) == 94.4
    assert round(f1_score(90.8, 96.5), 1) == 93.6


def test_f1_is_harmonic_mean_and_degenerate_zero():
    rng = np.random.default_rng(3)
    for _ in range(50):
        pr, re = rng.uniform(1, 100, size=2)
        assert f1_score(pr, re) == pytest.approx(2 / (1 / pr + 1 / re))
    assert f1_score(0.0, 0.0) == 0.0


@pytest.mark.parametrize(
    "kwargs",
    [
        {"coverage_threshold": 0.0},
        {"coverage_threshold": 1.5},
        {"edge_tolerance": 0},
        {"min_fp_area": 0},
        {"box_ignore_margin": -1},
        {"danger_zone_source": "zeal"},
    ],
)
def test_config_rejects_bad_thresholds(kwargs):
    with pytest.raises(ConfigError):
        EvalConfig(**kwargs)


# ---------------------------------------------------------------------------
# coverage matching
# ---------------------------------------------------------------------------
def test_fully_covered_box_is_tp():
    gt = water_canvas(8, 8)
    gt[2:6, 2:6] = OBSTACLE
    pred = water_canvas(8, 8)
    pred[2:6, 2:6] = OBSTACLE
    counts = match_obstacles(mask_of(pred), ann_of(gt, [(2, 2, 6, 6)]), EvalConfig())
    assert (counts.tp, counts.fn, counts.fp) == (1, 0, 0)


def test_quarter_covered_box_is_fn():
    gt = water_canvas(8, 8)
    gt[2:6, 2:6] = OBSTACLE
    pred = water_canvas(8, 8)
    pred[2:4, 2:4] = OBSTACLE  # 4 of 16 pixels -> coverage 0.25 < 0.5
    counts = match_obstacles(mask_of(pred), ann_of(gt, [(2, 2, 6, 6)]), EvalConfig())
    assert (counts.tp, counts.fn, counts.fp) == (0, 1, 0)


def test_fp_blob_area_threshold():
    gt = water_canvas(16, 16)
    pred = water_canvas(16, 16)
    pred[2:5, 2:5] = OBSTACLE   # area 9
    pred[10, 10] = OBSTACLE     # area 1
    cfg = EvalConfig(min_fp_area=4)
    counts = match_obstacles(mask_of(pred), ann_of(gt), cfg)
    assert counts.fp == 1
    assert int(counts.fp_blobs[0].sum()) == 9


def test_fp_region_excludes_boxes_and_sky():
    gt = water_canvas(12, 12)
    gt[:4] = SKY
    gt[6:9, 6:9] = OBSTACLE
    pred = water_canvas(12, 12)
    pred[1:3, 1:5] = OBSTACLE   # over gt sky: not an FP
    pred[6:9, 6:9] = OBSTACLE   # inside the box: TP, not an FP
    counts = match_obstacles(
        mask_of(pred), ann_of(gt, [(6, 6, 9, 9)]), EvalConfig(min_fp_area=1)
    )
    assert (counts.tp, counts.fn, counts.fp) == (1, 0, 0)


def test_diagonal_pixels_are_separate_components():
    gt = water_canvas(6, 6)
    pred = water_canvas(6, 6)
    pred[1, 1] = OBSTACLE
    pred[2, 2] = OBSTACLE  # touches only diagonally: 4-connectivity splits it
    counts = match_obstacles(mask_of(pred), ann_of(gt), EvalConfig(min_fp_area=2))
    assert counts.fp == 0
    counts = match_obstacles(mask_of(pred), ann_of(gt), EvalConfig(min_fp_area=1))
    assert counts.fp == 2


def test_shape_mismatch_rejected():
    with pytest.raises(DataError, match="shape"):
        match_obstacles(mask_of(water_canvas(4, 4)), ann_of(water_canvas(4, 5)), EvalConfig())


def test_box_margin_absorbs_spill_ring():
    gt = water_canvas(16, 16)
    gt[6:10, 6:10] = OBSTACLE
    pred = water_canvas(16, 16)
    pred[5:11, 5:11] = OBSTACLE  # detection bleeding 1 px past the box
    box = [(6, 6, 10, 10)]
    strict = match_obstacles(mask_of(pred), ann_of(gt, box), EvalConfig(min_fp_area=4))
    lenient = match_obstacles(
        mask_of(pred), ann_of(gt, box), EvalConfig(min_fp_area=4, box_ignore_margin=1)
    )
    assert (strict.tp, strict.fp) == (1, 1)   # the ring counts without a margin
    assert (lenient.tp, lenient.fp) == (1, 0)


def test_box_margin_keeps_detached_blobs_and_exact_coverage():
    gt = water_canvas(16, 16)
    gt[6:10, 6:10] = OBSTACLE
    pred = water_canvas(16, 16)
    pred[4:6, 6:10] = OBSTACLE   # spill strip 2 px above the box only
    pred[12:14, 2:6] = OBSTACLE  # detached blob well clear of the box
    box = [(6, 6, 10, 10)]
    cfg = EvalConfig(min_fp_area=4, box_ignore_margin=2)
    counts = match_obstacles(mask_of(pred), ann_of(gt, box), cfg)
    assert counts.fp == 1                      # only the detached blob
    assert (counts.tp, counts.fn) == (0, 1)    # coverage still uses the bare box
    cfg1 = EvalConfig(min_fp_area=4, box_ignore_margin=1)
    assert match_obstacles(mask_of(pred), ann_of(gt, box), cfg1).fp == 2


# ---------------------------------------------------------------------------
# danger zone
# ---------------------------------------------------------------------------
def test_zone_keeps_box_out_but_blob_in():
    h = w = 16
    gt = water_canvas(h, w)
    gt[1:4, 1:4] = OBSTACLE
    pred = water_canvas(h, w)
    pred[1:4, 1:4] = OBSTACLE     # TP box centered at rows 1-3: outside zone
    pred[11:14, 6:9] = OBSTACLE   # FP blob inside zone
    zone = np.zeros((h, w), dtype=bool)
    zone[10:] = True
    cfg = EvalConfig(min_fp_area=4)
    ann = ann_of(gt, [(1, 1, 4, 4)], zone=zone)
    counts = match_obstacles(mask_of(pred), ann, cfg)
    assert (counts.tp, counts.fp) == (1, 1)
    tp_z, fn_z, fp_z = apply_danger_zone(counts, ann, cfg)
    assert (tp_z, fn_z, fp_z) == (0, 0, 1)


def test_full_zone_reproduces_overall_counts():
    rng = np.random.default_rng(11)
    for _ in range(10):
        pred = rng.integers(0, 3, size=(12, 12))
        gt = water_canvas(12, 12)
        gt[2:5, 3:6] = OBSTACLE
        ann = ann_of(gt, [(3, 2, 6, 5)], zone=np.ones((12, 12), dtype=bool))
        cfg = EvalConfig(min_fp_area=1)
        counts = match_obstacles(mask_of(pred), ann, cfg)
        assert apply_danger_zone(counts, ann, cfg) == (counts.tp, counts.fn, counts.fp)


def test_zone_source_none_reports_zero():
    gt = water_canvas(8, 8)
    pred = water_canvas(8, 8)
    pred[4:7, 4:7] = OBSTACLE
    ann = ann_of(gt, zone=np.ones((8, 8), dtype=bool))
    cfg = EvalConfig(min_fp_area=1, danger_zone_source="none")
    counts = match_obstacles(mask_of(pred), ann, cfg)
    assert apply_danger_zone(counts, ann, cfg) == (0, 0, 0)


def test_missing_zone_mask_raises():
    ann = ann_of(water_canvas(4, 4))
    object.__setattr__(ann, "danger_zone", None)
    counts = match_obstacles(mask_of(water_canvas(4, 4)), ann, EvalConfig())
    with pytest.raises(DataError, match="zone"):
        apply_danger_zone(counts, ann, EvalConfig())


# ---------------------------------------------------------------------------
# water edge
# ---------------------------------------------------------------------------
def test_rasterize_edge_interpolates_between_vertices():
    points = rasterize_edge(((0, 0), (4, 8)), width=8)
    assert points == {0: 0.0, 1: 2.0, 2: 4.0, 3: 6.0, 4: 8.0}


def test_predicted_boundary_is_first_water_row():
    pred = np.full((6, 3), SKY, dtype=np.int64)
    pred[2:, 0] = WATER
    pred[4:, 1] = WATER
    # column 2 stays sky: no boundary
    assert predicted_boundary(mask_of(pred)).tolist() == [2, 4, -1]


def test_half_columns_robust_gives_half():
    h, w = 16, 16
    gt = water_canvas(h, w)
    gt[:8] = SKY
    pred = np.full((h, w), SKY, dtype=np.int64)
    pred[8:, :8] = WATER    # exact in left half
    pred[14:, 8:] = WATER   # off by 6 rows in right half
    ann = ann_of(gt, edge=((0, 8), (15, 8)))
    result = water_edge_robustness(mask_of(pred), ann, edge_tolerance=2)
    assert result is not None
    mu_r, robust, total = result
    assert (robust, total) == (8, 16)
    assert mu_r == pytest.approx(0.5)


def test_column_without_water_is_not_robust():
    pred = np.full((8, 4), OBSTACLE, dtype=np.int64)
    ann = ann_of(water_canvas(8, 4), edge=((0, 3), (3, 3)))
    mu_r, robust, total = water_edge_robustness(mask_of(pred), ann, edge_tolerance=20)
    assert (mu_r, robust, total) == (0.0, 0, 4)


def test_frame_without_edge_is_skipped():
    ann = ann_of(water_canvas(8, 8))
    assert water_edge_robustness(mask_of(water_canvas(8, 8)), ann, 5) is None
    result = evaluate_frame(mask_of(water_canvas(8, 8)), ann, EvalConfig())
    assert result.mu_r is None and result.edge_points == 0


def test_edge_robustness_matches_oracle_on_random_masks():
    rng = np.random.default_rng(29)
    for _ in range(40):
        h, w = 20, 24
        pred = rng.integers(0, 3, size=(h, w))
        xs = sorted(rng.choice(w, size=3, replace=False).tolist())
        polyline = tuple((int(x), int(rng.integers(0, h))) for x in xs)
        tol = int(rng.integers(1, 6))
        ann = ann_of(water_canvas(h, w), edge=polyline)
        got = water_edge_robustness(mask_of(pred), ann, tol)
        want = naive_edge_robustness(pred.tolist(), rasterize_edge(polyline, w), tol)
        assert (got[1], got[2]) == want


# ---------------------------------------------------------------------------
# oracle agreement
# ---------------------------------------------------------------------------
def test_exhaustive_small_masks_match_oracle():
    cfg = EvalConfig(coverage_threshold=0.5, min_fp_area=2)
    cases = 0
    for h, w in ((1, 1), (1, 3), (2, 2), (2, 3), (3, 2), (3, 3)):
        n = h * w
        box_options = [None] + all_boxes(h, w)
        for bits in range(2 ** n):
            pred = np.array(
                [(bits >> i) & 1 for i in range(n)], dtype=np.int64
            ).reshape(h, w)
            pred = np.where(pred == 1, OBSTACLE, WATER)
            for box in box_options:
                boxes = [] if box is None else [box]
                gt = water_canvas(h, w)
                if box is not None:
                    x0, y0, x1, y1 = box
                    gt[y0:y1, x0:x1] = OBSTACLE
                counts = match_obstacles(mask_of(pred), ann_of(gt, boxes), cfg)
                want = naive_counts(pred.tolist(), gt.tolist(), boxes, None, 0.5, 2)
                assert (counts.tp, counts.fn, counts.fp) == want[:3], (
                    h, w, bits, box,
                )
                cases += 1
    assert cases > 20_000


def random_case(rng):
    h, w = 32, 32
    horizon = int(rng.integers(6, 16))
    gt = water_canvas(h, w)
    gt[:horizon] = SKY
    boxes = []
    for _ in range(int(rng.integers(0, 4))):
        bw, bh = int(rng.integers(2, 7)), int(rng.integers(2, 7))
        x0 = int(rng.integers(0, w - bw))
        y0 = int(rng.integers(horizon, h - bh))
        box = (x0, y0, x0 + bw, y0 + bh)
        if any(not (box[2] <= b[0] or b[2] <= box[0] or box[3] <= b[1] or b[3] <= box[1])
               for b in boxes):
            continue
        boxes.append(box)
        gt[y0:y0 + bh, x0:x0 + bw] = OBSTACLE
    pred = rng.choice([OBSTACLE, WATER, SKY], size=(h, w), p=[0.25, 0.5, 0.25])
    zone = np.zeros((h, w), dtype=bool)
    zone[int(0.6 * h):] = True
    return pred, gt, boxes, zone


def test_random_masks_match_oracle_including_zone():
    rng = np.random.default_rng(71)
    for _ in range(100):
        pred, gt, boxes, zone = random_case(rng)
        tau = float(rng.choice([0.25, 0.5, 0.75]))
        min_area = int(rng.choice([1, 3, 9]))
        cfg = EvalConfig(coverage_threshold=tau, min_fp_area=min_area)
        ann = ann_of(gt, boxes, zone=zone)
        counts = match_obstacles(mask_of(pred), ann, cfg)
        zone_counts = apply_danger_zone(counts, ann, cfg)
        want = naive_counts(pred.tolist(), gt.tolist(), boxes, zone.tolist(), tau, min_area)
        assert (counts.tp, counts.fn, counts.fp) + zone_counts == want


def test_tp_plus_fn_equals_box_count():
    rng = np.random.default_rng(5)
    for _ in range(30):
        pred, gt, boxes, _ = random_case(rng)
        counts = match_obstacles(mask_of(pred), ann_of(gt, boxes), EvalConfig())
        assert counts.tp + counts.fn == len(boxes)


def test_tp_monotone_in_coverage_threshold():
    rng = np.random.default_rng(13)
    taus = (0.1, 0.3, 0.5, 0.7, 0.9, 1.0)
    for _ in range(20):
        pred, gt, boxes, _ = random_case(rng)
        tps = [
            match_obstacles(mask_of(pred), ann_of(gt, boxes), EvalConfig(coverage_threshold=t)).tp
            for t in taus
        ]
        assert all(a >= b for a, b in zip(tps, tps[1:]))


def test_fp_monotone_in_min_area():
    rng = np.random.default_rng(17)
    areas = (1, 2, 4, 8, 16)
    for _ in range(20):
        pred, gt, boxes, _ = random_case(rng)
        fps = [
            match_obstacles(mask_of(pred), ann_of(gt, boxes), EvalConfig(min_fp_area=a)).fp
            for a in areas
        ]
        assert all(a >= b for a, b in zip(fps, fps[1:]))


# ---------------------------------------------------------------------------
# summaries and reports
# ---------------------------------------------------------------------------
def make_scene(h=16, w=16):
    gt = water_canvas(h, w)
    gt[:6] = SKY
    gt[8:12, 2:6] = OBSTACLE
    edge = ((0, 6), (w - 1, 6))
    zone = np.zeros((h, w), dtype=bool)
    zone[10:] = True
    return gt, [(2, 8, 6, 12)], edge, zone


def test_perfect_prediction_scores_hundred():
    gt, boxes, edge, zone = make_scene()
    ann = ann_of(gt, boxes, edge, zone)
    results = [evaluate_frame(mask_of(gt.copy()), ann, EvalConfig(min_fp_area=1))
               for _ in range(3)]
    report = summarize(results, EvalConfig(min_fp_area=1))
    assert (report.pr, report.re, report.f1) == (100.0, 100.0, 100.0)
    assert report.mu_r == pytest.approx(1.0)
    assert report.degenerate == ("pr_danger", "re_danger")  # zone holds no box/blob


def test_all_water_prediction_flags_degenerate_precision():
    gt, boxes, edge, zone = make_scene()
    ann = ann_of(gt, boxes, edge, zone)
    pred = mask_of(water_canvas(16, 16))
    report = summarize([evaluate_frame(pred, ann, EvalConfig())], EvalConfig())
    assert report.tp == 0 and report.fn == 1 and report.fp == 0
    assert report.pr == 0.0 and report.re == 0.0 and report.f1 == 0.0
    assert "pr" in report.degenerate


def test_mu_r_frame_averaged_vs_pooled():
    h, w = 8, 8
    gt = water_canvas(h, w)
    gt[:4] = SKY
    good = np.full((h, w), SKY, dtype=np.int64)
    good[4:] = WATER
    bad = np.full((h, w), SKY, dtype=np.int64)

    ann_one = ann_of(gt, edge=((0, 4),))                 # 1 column evaluated
    ann_many = ann_of(gt, edge=((0, 4), (w - 1, 4)))     # all 8 columns
    results = [
        evaluate_frame(mask_of(good), ann_one, EvalConfig(edge_tolerance=1)),
        evaluate_frame(mask_of(bad), ann_many, EvalConfig(edge_tolerance=1)),
    ]
    averaged = summarize(results, EvalConfig(edge_tolerance=1))
    pooled = summarize(results, EvalConfig(edge_tolerance=1, mu_r_pooled=True))
    assert averaged.mu_r == pytest.approx(0.5)   # (1.0 + 0.0) / 2
    assert pooled.mu_r == pytest.approx(1 / 9)   # 1 robust of 9 points


def test_summarize_without_frames_raises():
    with pytest.raises(DataError, match="zero"):
        summarize([], EvalConfig())


def test_summary_f1_consistent_with_counts():
    rng = np.random.default_rng(23)
    results = []
    cfg = EvalConfig(min_fp_area=2)
    for _ in range(12):
        pred, gt, boxes, zone = random_case(rng)
        if boxes:  # guarantee a mix of hits among the random misses
            x0, y0, x1, y1 = boxes[0]
            pred[y0:y1, x0:x1] = OBSTACLE
        results.append(evaluate_frame(mask_of(pred), ann_of(gt, boxes, zone=zone), cfg))
    report = summarize(results, cfg)
    tp, fp, fn = report.tp, report.fp, report.fn
    assert tp > 0, "random sweep produced no true positives; rework the fixture"
    pr = 100 * tp / (tp + fp)
    re = 100 * tp / (tp + fn)
    assert report.f1 == pytest.approx(2 * pr * re / (pr + re))


def test_report_render_and_record(tmp_path):
    gt, boxes, edge, zone = make_scene()
    ann = ann_of(gt, boxes, edge, zone)
    cfg = EvalConfig(min_fp_area=1)
    report = summarize([evaluate_frame(mask_of(gt.copy()), ann, cfg)], cfg)
    text = format_report(report, title="demo")
    assert "demo" in text and "(" in text and "min_fp_area=1" in text

    out = tmp_path / "report.json"
    write_report_record(out, report, extra={"tag": "smoke"})
    loaded = json.loads(out.read_text())
    assert loaded["f1"] == report.f1
    assert loaded["counts"]["tp"] == report.tp
    assert loaded["tag"] == "smoke"
    assert loaded["config"]["coverage_threshold"] == 0.5

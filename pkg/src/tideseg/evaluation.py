"""Obstacle-detection evaluation: edge robustness, TP/FP/FN, reports.

Per frame and ground-truth box, coverage = fraction of the box filled with
predicted obstacle pixels; coverage >= tau counts the box as detected (TP),
otherwise missed (FN).  False positives are 4-connected components of
predicted obstacle pixels inside the ground-truth water region and outside
every box, each component with area >= min_fp_area counting once.
box_ignore_margin widens the excluded region around each box by that many
pixels, so segmentation spill hugging a correctly detected obstacle is not
billed as a false positive; coverage always uses the exact box.

The danger-zone split re-runs the matching restricted to boxes whose center
pixel lies inside the zone and to FP components intersecting it.

Water-edge robustness (mu_R) rasterizes the ground-truth edge polyline to
one point per column and checks, per column, whether the topmost
non-water-to-water transition of the prediction lies within edge_tolerance
rows of the ground truth.  Frames without an edge polyline are skipped.

Reports carry their thresholds so every number is self-describing.
Degenerate ratios (zero denominators) are reported as 0 and flagged.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .data import OBSTACLE, WATER, FrameAnnotation, SegmentationMask
from .errors import ConfigError, DataError


@dataclass(frozen=True)
class EvalConfig:
    coverage_threshold: float = 0.5
    edge_tolerance: int = 20
    min_fp_area: int = 25
    box_ignore_margin: int = 0
    danger_zone_source: str = "annotation"
    mu_r_pooled: bool = False

    def __post_init__(self):
        if not 0.0 < self.coverage_threshold <= 1.0:
            raise ConfigError("coverage threshold must lie in (0, 1]")
        if self.edge_tolerance <= 0 or self.min_fp_area <= 0:
            raise ConfigError("edge tolerance and min FP area must be positive")
        if self.box_ignore_margin < 0:
            raise ConfigError("box ignore margin must be >= 0")
        if self.danger_zone_source not in ("annotation", "none"):
            raise ConfigError("danger_zone_source must be 'annotation' or 'none'")

    def to_dict(self) -> dict:
        return {
            "coverage_threshold": self.coverage_threshold,
            "edge_tolerance": self.edge_tolerance,
            "min_fp_area": self.min_fp_area,
            "box_ignore_margin": self.box_ignore_margin,
            "danger_zone_source": self.danger_zone_source,
            "mu_r_pooled": self.mu_r_pooled,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EvalConfig":
        return cls(**d)


@dataclass
class FrameCounts:
    tp: int
    fn: int
    fp: int
    covered: list[bool]          # per gt box, in annotation order
    fp_blobs: list[np.ndarray]   # boolean masks of counted FP components


@dataclass
class FrameResult:
    tp: int
    fn: int
    fp: int
    tp_danger: int
    fn_danger: int
    fp_danger: int
    edge_points: int
    robust_points: int
    mu_r: float | None


@dataclass
class DetectionReport:
    frames: int
    tp: int
    fp: int
    fn: int
    tp_danger: int
    fp_danger: int
    fn_danger: int
    pr: float
    re: float
    f1: float
    pr_danger: float
    re_danger: float
    f1_danger: float
    mu_r: float
    degenerate: tuple[str, ...]
    config: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "frames": self.frames,
            "counts": {"tp": self.tp, "fp": self.fp, "fn": self.fn},
            "danger_counts": {
                "tp": self.tp_danger,
                "fp": self.fp_danger,
                "fn": self.fn_danger,
            },
            "pr": self.pr,
            "re": self.re,
            "f1": self.f1,
            "pr_danger": self.pr_danger,
            "re_danger": self.re_danger,
            "f1_danger": self.f1_danger,
            "mu_r": self.mu_r,
            "degenerate": list(self.degenerate),
            "config": self.config,
        }


# ---------------------------------------------------------------------------
# metric arithmetic
# ---------------------------------------------------------------------------
def f1_score(pr: float, re: float) -> float:
    """Harmonic mean of precision and recall percentages."""
    if pr + re == 0:
        return 0.0
    return 2.0 * pr * re / (pr + re)


def _ratio(num: int, den: int, name: str, flags: list[str]) -> float:
    if den == 0:
        flags.append(name)
        return 0.0
    return 100.0 * num / den


# ---------------------------------------------------------------------------
# water edge
# ---------------------------------------------------------------------------
def rasterize_edge(polyline, width: int) -> dict[int, float]:
    """Column -> edge row, linearly interpolated between polyline vertices."""
    points: dict[int, float] = {}
    if len(polyline) == 1:
        x, y = polyline[0]
        if 0 <= x < width:
            points[int(x)] = float(y)
        return points
    for (x0, y0), (x1, y1) in zip(polyline[:-1], polyline[1:]):
        if x1 == x0:
            points[int(x0)] = float((y0 + y1) / 2.0)
            continue
        step = 1 if x1 > x0 else -1
        for x in range(int(x0), int(x1) + step, step):
            frac = (x - x0) / (x1 - x0)
            if 0 <= x < width:
                points[int(x)] = float(y0 + frac * (y1 - y0))
    return points


def predicted_boundary(pred: SegmentationMask) -> np.ndarray:
    """Per column: topmost row where a non-water-to-water transition occurs
    (the start of the first water run), or -1 when the column has no water."""
    water = pred.labels == WATER
    h, w = water.shape
    first = np.where(water.any(axis=0), water.argmax(axis=0), -1)
    return first


def water_edge_robustness(
    pred: SegmentationMask, ann: FrameAnnotation, edge_tolerance: int
) -> tuple[float, int, int] | None:
    """(robust fraction, robust count, evaluated count); None without an edge."""
    if not ann.water_edge:
        return None
    h, w = pred.labels.shape
    gt = rasterize_edge(ann.water_edge, w)
    if not gt:
        return None
    boundary = predicted_boundary(pred)
    robust = 0
    for x, y in gt.items():
        if boundary[x] >= 0 and abs(boundary[x] - y) <= edge_tolerance:
            robust += 1
    return robust / len(gt), robust, len(gt)


# ---------------------------------------------------------------------------
# obstacle matching
# ---------------------------------------------------------------------------
def match_obstacles(
    pred: SegmentationMask, ann: FrameAnnotation, cfg: EvalConfig
) -> FrameCounts:
    if pred.labels.shape != ann.mask.shape:
        raise DataError(
            f"prediction shape {pred.labels.shape} != ground truth {ann.mask.shape}"
        )
    pred_obstacle = pred.labels == OBSTACLE
    covered = []
    in_boxes = np.zeros_like(pred_obstacle)
    m = cfg.box_ignore_margin
    for x0, y0, x1, y1 in ann.obstacle_boxes:
        area = (x1 - x0) * (y1 - y0)
        hit = int(pred_obstacle[y0:y1, x0:x1].sum())
        covered.append(hit / area >= cfg.coverage_threshold)
        in_boxes[max(0, y0 - m) : y1 + m, max(0, x0 - m) : x1 + m] = True
    tp = sum(covered)
    fn = len(covered) - tp

    fp_region = pred_obstacle & (ann.mask.labels == WATER) & ~in_boxes
    labeled, n = ndimage.label(fp_region, structure=np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]]))
    fp_blobs = []
    for k in range(1, n + 1):
        blob = labeled == k
        if int(blob.sum()) >= cfg.min_fp_area:
            fp_blobs.append(blob)
    return FrameCounts(tp=tp, fn=fn, fp=len(fp_blobs), covered=covered, fp_blobs=fp_blobs)


def _box_center_pixel(box) -> tuple[int, int]:
    x0, y0, x1, y1 = box
    return (y0 + y1 - 1) // 2, (x0 + x1 - 1) // 2


def apply_danger_zone(
    counts: FrameCounts, ann: FrameAnnotation, cfg: EvalConfig
) -> tuple[int, int, int]:
    """(tp, fn, fp) restricted to boxes centered in the zone and FP blobs
    intersecting it."""
    if cfg.danger_zone_source == "none":
        return 0, 0, 0
    zone = ann.danger_zone
    if zone is None:
        raise DataError("danger_zone_source=annotation but annotation has no zone mask")
    tp_z = fn_z = 0
    for box, hit in zip(ann.obstacle_boxes, counts.covered):
        cy, cx = _box_center_pixel(box)
        if zone[cy, cx]:
            if hit:
                tp_z += 1
            else:
                fn_z += 1
    fp_z = sum(1 for blob in counts.fp_blobs if (blob & zone).any())
    return tp_z, fn_z, fp_z


def evaluate_frame(
    pred: SegmentationMask, ann: FrameAnnotation, cfg: EvalConfig
) -> FrameResult:
    counts = match_obstacles(pred, ann, cfg)
    tp_z, fn_z, fp_z = apply_danger_zone(counts, ann, cfg)
    edge = water_edge_robustness(pred, ann, cfg.edge_tolerance)
    if edge is None:
        mu_r, robust, total = None, 0, 0
    else:
        mu_r, robust, total = edge
    return FrameResult(
        tp=counts.tp,
        fn=counts.fn,
        fp=counts.fp,
        tp_danger=tp_z,
        fn_danger=fn_z,
        fp_danger=fp_z,
        edge_points=total,
        robust_points=robust,
        mu_r=mu_r,
    )


# ---------------------------------------------------------------------------
# summary
# ---------------------------------------------------------------------------
def summarize(results: list[FrameResult], cfg: EvalConfig) -> DetectionReport:
    if not results:
        raise DataError("cannot summarize zero evaluated frames")
    tp = sum(r.tp for r in results)
    fp = sum(r.fp for r in results)
    fn = sum(r.fn for r in results)
    tp_z = sum(r.tp_danger for r in results)
    fp_z = sum(r.fp_danger for r in results)
    fn_z = sum(r.fn_danger for r in results)
    flags: list[str] = []
    pr = _ratio(tp, tp + fp, "pr", flags)
    re = _ratio(tp, tp + fn, "re", flags)
    pr_z = _ratio(tp_z, tp_z + fp_z, "pr_danger", flags)
    re_z = _ratio(tp_z, tp_z + fn_z, "re_danger", flags)

    with_edges = [r for r in results if r.mu_r is not None]
    if not with_edges:
        flags.append("mu_r")
        mu_r = 0.0
    elif cfg.mu_r_pooled:
        mu_r = sum(r.robust_points for r in with_edges) / sum(r.edge_points for r in with_edges)
    else:
        mu_r = float(np.mean([r.mu_r for r in with_edges]))

    return DetectionReport(
        frames=len(results),
        tp=tp,
        fp=fp,
        fn=fn,
        tp_danger=tp_z,
        fp_danger=fp_z,
        fn_danger=fn_z,
        pr=pr,
        re=re,
        f1=f1_score(pr, re),
        pr_danger=pr_z,
        re_danger=re_z,
        f1_danger=f1_score(pr_z, re_z),
        mu_r=mu_r,
        degenerate=tuple(flags),
        config=cfg.to_dict(),
    )


# ---------------------------------------------------------------------------
# rendering
# ---------------------------------------------------------------------------
def write_report_record(path: Path | str, report: DetectionReport, extra: dict | None = None) -> None:
    record = report.to_dict()
    if extra:
        record.update(extra)
    Path(path).write_text(json.dumps(record, indent=2) + "\n", encoding="utf-8")


def format_report(report: DetectionReport, title: str = "evaluation") -> str:
    """Fixed-width table; danger-zone values in parentheses."""
    c = report.config
    lines = [
        f"# {title}",
        f"# thresholds: coverage={c.get('coverage_threshold')} "
        f"edge_tolerance={c.get('edge_tolerance')} min_fp_area={c.get('min_fp_area')} "
        f"box_margin={c.get('box_ignore_margin', 0)}",
        f"{'frames':>8} {'mu_R':>7} {'TP':>10} {'FP':>10} {'FN':>10} "
        f"{'Pr':>14} {'Re':>14} {'F1':>14}",
        f"{report.frames:>8} {100.0 * report.mu_r:>7.1f} "
        f"{report.tp:>4} ({report.tp_danger:>3}) {report.fp:>4} ({report.fp_danger:>3}) "
        f"{report.fn:>4} ({report.fn_danger:>3}) "
        f"{report.pr:>6.1f} ({report.pr_danger:>5.1f}) "
        f"{report.re:>6.1f} ({report.re_danger:>5.1f}) "
        f"{report.f1:>6.1f} ({report.f1_danger:>5.1f})",
    ]
    if report.degenerate:
        lines.append(f"# degenerate ratios reported as 0: {', '.join(report.degenerate)}")
    return "\n".join(lines)

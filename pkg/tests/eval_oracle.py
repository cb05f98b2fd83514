"""Naive pixel-enumeration oracle for the detection metrics.

Everything here is written with plain Python loops and breadth-first
flood fill so it shares no code with tideseg.evaluation.  Slow on
purpose; only used to cross-check the real implementation on small and
randomly generated cases.
"""
from collections import deque

OBSTACLE, WATER, SKY = 0, 1, 2


def all_boxes(h, w):
    """Every half-open (x0, y0, x1, y1) box that fits in an h x w image."""
    boxes = []
    for y0 in range(h):
        for y1 in range(y0 + 1, h + 1):
            for x0 in range(w):
                for x1 in range(x0 + 1, w + 1):
                    boxes.append((x0, y0, x1, y1))
    return boxes


def naive_counts(pred, gt, boxes, zone, tau, min_fp_area, box_margin=0):
    """Return (tp, fn, fp, tp_zone, fn_zone, fp_zone) by direct enumeration.

    pred/gt: 2-D sequences of labels; zone: 2-D sequence of bools (may be
    None for an all-false zone).  box_margin widens the FP-exclusion zone
    around every box; coverage still uses the exact box.
    """
    h = len(pred)
    w = len(pred[0]) if h else 0
    if zone is None:
        zone = [[False] * w for _ in range(h)]

    covered = []
    for x0, y0, x1, y1 in boxes:
        hits = 0
        for y in range(y0, y1):
            for x in range(x0, x1):
                if pred[y][x] == OBSTACLE:
                    hits += 1
        covered.append(hits / ((x1 - x0) * (y1 - y0)) >= tau)
    tp = sum(covered)
    fn = len(boxes) - tp

    def inside_some_box(y, x):
        return any(
            x0 - box_margin <= x < x1 + box_margin and y0 - box_margin <= y < y1 + box_margin
            for x0, y0, x1, y1 in boxes
        )

    region = set()
    for y in range(h):
        for x in range(w):
            if pred[y][x] == OBSTACLE and gt[y][x] == WATER and not inside_some_box(y, x):
                region.add((y, x))

    blobs = []
    todo = set(region)
    while todo:
        seed = todo.pop()
        blob = {seed}
        queue = deque([seed])
        while queue:
            y, x = queue.popleft()
            for ny, nx in ((y - 1, x), (y + 1, x), (y, x - 1), (y, x + 1)):
                if (ny, nx) in todo:
                    todo.remove((ny, nx))
                    blob.add((ny, nx))
                    queue.append((ny, nx))
        blobs.append(blob)
    fp_blobs = [b for b in blobs if len(b) >= min_fp_area]
    fp = len(fp_blobs)

    tp_z = fn_z = 0
    for box, hit in zip(boxes, covered):
        x0, y0, x1, y1 = box
        cy, cx = (y0 + y1 - 1) // 2, (x0 + x1 - 1) // 2
        if zone[cy][cx]:
            if hit:
                tp_z += 1
            else:
                fn_z += 1
    fp_z = sum(1 for b in fp_blobs if any(zone[y][x] for y, x in b))
    return tp, fn, fp, tp_z, fn_z, fp_z


def naive_edge_robustness(pred, edge_points, tolerance):
    """(robust, total) where edge_points maps column -> ground-truth row."""
    h = len(pred)
    robust = 0
    for x, gy in edge_points.items():
        boundary = None
        for y in range(h):
            if pred[y][x] == WATER:
                boundary = y
                break
        if boundary is not None and abs(boundary - gy) <= tolerance:
            robust += 1
    return robust, len(edge_points)

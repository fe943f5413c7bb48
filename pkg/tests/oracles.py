"""Independent reference implementations used to cross-check the package.

Everything here is deliberately naive: plain loops, plain floats, permutation
enumeration. Nothing imports the modules under test except the record type.
"""

from __future__ import annotations

import itertools
from typing import Optional, Sequence

import numpy as np

from fewvod.records import DetectionRecord


def iou_corners(a, b) -> float:
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    inter = max(iw, 0.0) * max(ih, 0.0)
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union if union > 0 else 0.0


def giou_corners(a, b) -> float:
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    inter = max(iw, 0.0) * max(ih, 0.0)
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    enclose = (max(a[2], b[2]) - min(a[0], b[0])) * (max(a[3], b[3]) - min(a[1], b[1]))
    iou = inter / union if union > 0 else 0.0
    return iou - (enclose - union) / enclose if enclose > 0 else iou


def assignment_minimum(cost) -> float:
    """Brute-force minimum assignment cost of all columns to distinct rows.

    `cost` is any P x M indexable (M <= P). Enumerates P!/(P-M)! injections.
    """
    p = len(cost)
    m = len(cost[0]) if p else 0
    if m == 0:
        return 0.0
    best = None
    for rows in itertools.permutations(range(p), m):
        total = 0.0
        for j in range(m):
            total += float(cost[rows[j]][j])
        if best is None or total < best:
            best = total
    return best


def batch_assignment_minimum(costs: np.ndarray, chunk: int = 4000) -> np.ndarray:
    """Vectorized twin of `assignment_minimum` for a [B, P, M] stack.

    Enumerates the same injections and accumulates each total in the same
    ascending-column order, so results are bit-identical to the scalar oracle
    (the acceptance suite cross-checks the two before relying on this one).
    """
    b, p, m = costs.shape
    if m == 0:
        return np.zeros(b)
    cols = [np.ascontiguousarray(costs[:, :, j].T) for j in range(m)]  # each [P, B]
    perms = np.fromiter(itertools.chain.from_iterable(itertools.permutations(range(p), m)),
                        dtype=np.int64).reshape(-1, m)
    best = np.full(b, np.inf)
    totals = np.empty((chunk, b))
    for s in range(0, len(perms), chunk):
        blk = perms[s:s + chunk]
        t = totals[:len(blk)]
        np.take(cols[0], blk[:, 0], axis=0, out=t)
        for j in range(1, m):
            t += cols[j][blk[:, j]]
        best = np.minimum(best, t.min(axis=0))
    return best


def independent_ap(dets: Sequence[DetectionRecord], gts: Sequence[DetectionRecord],
                   iou_thr: float) -> float:
    """Single-class all-point AP from first principles.

    Greedy confidence-descending matching (ties broken by video/frame/input
    order), then AP as the sum over true positives of the best precision at or
    after that detection's rank, divided by the ground-truth count.
    """
    if not gts or not dets:
        return 0.0
    order = sorted(range(len(dets)), key=lambda i: (dets[i].video, dets[i].frame, i))
    order = sorted(order, key=lambda i: -dets[i].confidence)
    matched: set[int] = set()
    flags = []
    for i in order:
        d = dets[i]
        best_j: Optional[int] = None
        best_iou = 0.0
        for j, g in enumerate(gts):
            if j in matched or (g.video, g.frame, g.category) != (d.video, d.frame, d.category):
                continue
            iou = iou_corners(d.box, g.box)
            if iou > best_iou:
                best_iou, best_j = iou, j
        if best_j is not None and best_iou >= iou_thr:
            matched.add(best_j)
            flags.append(True)
        else:
            flags.append(False)
    precisions = []
    tp = 0
    for rank, flag in enumerate(flags, start=1):
        tp += flag
        precisions.append(tp / rank)
    ap = 0.0
    for rank, flag in enumerate(flags):
        if flag:
            ap += max(precisions[rank:]) / len(gts)
    return ap


def independent_evaluate(dets: Sequence[DetectionRecord], gts: Sequence[DetectionRecord],
                         categories: Sequence[str], grid: Sequence[float]) -> dict:
    """Class-then-threshold mean AP, skipping classes without ground truth."""
    class_means, ap50s, ap75s = [], [], []
    for c in categories:
        cls_gts = [g for g in gts if g.category == c]
        if not cls_gts:
            continue
        cls_dets = [d for d in dets if d.category == c]
        aps = [independent_ap(cls_dets, cls_gts, thr) for thr in grid]
        class_means.append(sum(aps) / len(aps))
        ap50s.append(aps[list(grid).index(0.5)])
        ap75s.append(aps[list(grid).index(0.75)])

    def mean(xs):
        return sum(xs) / len(xs) if xs else 0.0

    return {"ap": mean(class_means), "ap50": mean(ap50s), "ap75": mean(ap75s)}

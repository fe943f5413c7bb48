"""Detection metrics: PR curves, interpolated AP over the COCO IoU grid,
error-type analysis, the confidence-threshold sweep, and the fusion ablation.

All operations are read-only over detection/annotation records. Matching is
greedy by descending confidence within each (video, frame), class-aware, with
each ground truth matched at most once. AP uses the all-point interpolation
(monotone precision envelope integrated over recall). Classes with no ground
truth anywhere are skipped when averaging.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ConfigError, DataError
from .records import DetectionRecord, group_by_frame

IOU_GRID = tuple(i / 100 for i in range(50, 100, 5))
FG_THR = 0.5
BG_THR = 0.1
ERROR_TYPES = ("classification", "localization", "background", "duplicate", "missed")


def corner_iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """IoU between two corner-box arrays [N,4] x [M,4]; zero union gives 0."""
    a = a[:, None, :]
    b = b[None, :, :]
    lt = np.maximum(a[..., :2], b[..., :2])
    rb = np.minimum(a[..., 2:], b[..., 2:])
    wh = np.clip(rb - lt, 0.0, None)
    inter = wh[..., 0] * wh[..., 1]
    area_a = (a[..., 2] - a[..., 0]) * (a[..., 3] - a[..., 1])
    area_b = (b[..., 2] - b[..., 0]) * (b[..., 3] - b[..., 1])
    union = area_a + area_b - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        iou = np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)
    return iou


def _sorted_dets(dets: Sequence[DetectionRecord]) -> list[int]:
    """Detection indices in confidence-descending order, deterministic ties."""
    for d in dets:
        if d.confidence is None:
            raise DataError(f"detection without confidence: {d}")
    keyed = sorted(range(len(dets)), key=lambda i: (dets[i].video, dets[i].frame, i))
    return sorted(keyed, key=lambda i: -dets[i].confidence)


@dataclass
class MatchOutcome:
    """Greedy matching result; `order` aligns tp/det_gt with confidence rank."""

    order: list[int]
    tp: np.ndarray
    det_gt: list[Optional[int]]
    gt_matched: np.ndarray


def greedy_match(dets: Sequence[DetectionRecord], gts: Sequence[DetectionRecord],
                 iou_thr: float) -> MatchOutcome:
    """Match detections to same-class, same-frame ground truths at IoU >= iou_thr.

    Detections are visited in descending confidence; each picks the unmatched
    candidate with the highest IoU (earliest gt index on ties).
    """
    by_frame: dict = {}
    for j, g in enumerate(gts):
        by_frame.setdefault((g.video, g.frame, g.category), []).append(j)
    gt_boxes = np.array([g.box for g in gts], dtype=np.float64).reshape(len(gts), 4)
    gt_matched = np.zeros(len(gts), dtype=bool)

    order = _sorted_dets(dets)
    tp = np.zeros(len(order), dtype=bool)
    det_gt: list[Optional[int]] = [None] * len(order)
    for rank, i in enumerate(order):
        d = dets[i]
        candidates = [j for j in by_frame.get((d.video, d.frame, d.category), ())
                      if not gt_matched[j]]
        if not candidates:
            continue
        ious = corner_iou_matrix(np.array([d.box], dtype=np.float64),
                                 gt_boxes[candidates])[0]
        best = int(np.argmax(ious))
        if ious[best] >= iou_thr:
            tp[rank] = True
            j = candidates[best]
            det_gt[rank] = j
            gt_matched[j] = True
    return MatchOutcome(order=order, tp=tp, det_gt=det_gt, gt_matched=gt_matched)


def pr_curve(dets: Sequence[DetectionRecord], gts: Sequence[DetectionRecord],
             iou_thr: float) -> tuple[np.ndarray, np.ndarray]:
    """Pooled precision/recall sequences over confidence-ranked detections.

    With no ground truth the curve is empty (AP 0 by convention).
    """
    if not gts or not dets:
        return np.array([]), np.array([])
    outcome = greedy_match(dets, gts, iou_thr)
    tp_cum = np.cumsum(outcome.tp)
    ranks = np.arange(1, len(outcome.order) + 1)
    precision = tp_cum / ranks
    recall = tp_cum / len(gts)
    return precision, recall


def average_precision(precision: np.ndarray, recall: np.ndarray) -> float:
    """All-point interpolated area under the PR curve.

    Worked example: 4 ground truths and ranked outcomes [TP, FP, TP, FP]
    give precision [1, 1/2, 2/3, 1/2] and recall [1/4, 1/4, 1/2, 1/2];
    the precision envelope is [1, 2/3, 2/3, 1/2] and the area is
    1/4 * 1 + 1/4 * 2/3 = 5/12. One ground truth with outcomes [TP, FP]
    gives precision [1, 1/2], recall [1, 1], area exactly 1.
    """
    if len(precision) == 0:
        return 0.0
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    prev = np.concatenate([[0.0], recall[:-1]])
    return float(np.sum((recall - prev) * envelope))


@dataclass
class EvalResult:
    ap: float
    ap50: float
    ap75: float
    per_class: dict[str, float]
    class_gt_counts: dict[str, int]
    num_detections: int
    iou_grid: tuple = IOU_GRID
    sweep: Optional[list] = None

    def as_dict(self) -> dict:
        return {
            "ap": self.ap,
            "ap50": self.ap50,
            "ap75": self.ap75,
            "per_class": dict(sorted(self.per_class.items())),
            "class_gt_counts": dict(sorted(self.class_gt_counts.items())),
            "num_detections": self.num_detections,
        }


def _class_ap(dets, gts, thr) -> float:
    return average_precision(*pr_curve(dets, gts, thr))


def evaluate(detections: Sequence[DetectionRecord], ground_truths: Sequence[DetectionRecord],
             categories: Optional[Sequence[str]] = None) -> EvalResult:
    """Class-averaged AP over the 0.50:0.05:0.95 IoU grid, plus AP50/AP75.

    Per-class curves pool frames across videos. The class mean is taken first,
    then (for the headline AP) the mean over IoU thresholds; classes without
    ground truth are skipped. Detections with a category outside the
    vocabulary raise DataError.
    """
    vocab = list(categories) if categories is not None else sorted({g.category for g in ground_truths})
    vocab_set = set(vocab)
    for d in detections:
        if d.category not in vocab_set:
            raise DataError(f"detection category {d.category!r} not in vocabulary")

    dets_by_cat: dict[str, list[DetectionRecord]] = {c: [] for c in vocab}
    gts_by_cat: dict[str, list[DetectionRecord]] = {c: [] for c in vocab}
    for d in detections:
        dets_by_cat[d.category].append(d)
    for g in ground_truths:
        if g.category in vocab_set:
            gts_by_cat[g.category].append(g)

    per_class: dict[str, float] = {}
    ap50s, ap75s, ap_means = [], [], []
    counts = {c: len(gts_by_cat[c]) for c in vocab}
    for c in vocab:
        if counts[c] == 0:
            continue
        aps = [_class_ap(dets_by_cat[c], gts_by_cat[c], thr) for thr in IOU_GRID]
        per_class[c] = float(np.mean(aps))
        ap_means.append(per_class[c])
        ap50s.append(aps[IOU_GRID.index(0.5)])
        ap75s.append(aps[IOU_GRID.index(0.75)])

    def mean(xs):
        return float(np.mean(xs)) if xs else 0.0

    return EvalResult(
        ap=mean(ap_means), ap50=mean(ap50s), ap75=mean(ap75s),
        per_class=per_class, class_gt_counts=counts, num_detections=len(detections),
    )


@dataclass
class ErrorBreakdown:
    """Error-type counts and the AP gained by fixing each type in isolation."""

    counts: dict[str, int]
    delta_ap: dict[str, float]
    num_tp: int
    num_fp: int
    num_missed: int
    base_ap: float

    def as_dict(self) -> dict:
        return {
            "counts": self.counts,
            "delta_ap": self.delta_ap,
            "num_tp": self.num_tp,
            "num_fp": self.num_fp,
            "num_missed": self.num_missed,
            "base_ap": self.base_ap,
        }


def _classify_fp(det: DetectionRecord, gts: Sequence[DetectionRecord],
                 frame_gts: dict, gt_boxes: np.ndarray, fg_thr: float, bg_thr: float) -> str:
    """Single-FP taxonomy. Precedence: classification (wrong class, IoU >= fg),
    duplicate (right class, IoU >= fg on an already-claimed gt), localization
    (right class, bg <= IoU < fg), classification again for wrong-class
    moderate overlap, else background."""
    same, other = [], []
    for j in frame_gts.get((det.video, det.frame), ()):
        (same if gts[j].category == det.category else other).append(j)
    box = np.array([det.box], dtype=np.float64)
    iou_same = corner_iou_matrix(box, gt_boxes[same])[0].max() if same else 0.0
    iou_other = corner_iou_matrix(box, gt_boxes[other])[0].max() if other else 0.0
    if iou_other >= fg_thr:
        return "classification"
    if iou_same >= fg_thr:
        return "duplicate"
    if iou_same >= bg_thr:
        return "localization"
    if iou_other >= bg_thr:
        return "classification"
    return "background"


def error_types(detections: Sequence[DetectionRecord], ground_truths: Sequence[DetectionRecord],
                fg_thr: float = FG_THR, bg_thr: float = BG_THR,
                categories: Optional[Sequence[str]] = None) -> ErrorBreakdown:
    """Assign every false positive exactly one error type; count missed gts.

    delta_ap[t] is the AP-at-fg_thr improvement from deleting type t's false
    positives (for "missed": from deleting the unmatched ground truths).
    """
    vocab = list(categories) if categories is not None else sorted({g.category for g in ground_truths})
    outcome = greedy_match(detections, ground_truths, fg_thr)
    gt_boxes = np.array([g.box for g in ground_truths], dtype=np.float64).reshape(len(ground_truths), 4)
    frame_gts: dict = {}
    for j, g in enumerate(ground_truths):
        frame_gts.setdefault((g.video, g.frame), []).append(j)

    counts = {t: 0 for t in ERROR_TYPES}
    fp_indices: dict[str, list[int]] = {t: [] for t in ERROR_TYPES}
    for rank, i in enumerate(outcome.order):
        if outcome.tp[rank]:
            continue
        kind = _classify_fp(detections[i], ground_truths, frame_gts, gt_boxes, fg_thr, bg_thr)
        counts[kind] += 1
        fp_indices[kind].append(i)
    missed = int((~outcome.gt_matched).sum())
    counts["missed"] = missed

    def mean_class_ap(dets, gts):
        by_c = lambda recs, c: [r for r in recs if r.category == c]
        vals = [_class_ap(by_c(dets, c), by_c(gts, c), fg_thr)
                for c in vocab if any(g.category == c for g in gts)]
        return float(np.mean(vals)) if vals else 0.0

    base_ap = mean_class_ap(detections, ground_truths)
    delta_ap: dict[str, float] = {}
    for t in ERROR_TYPES:
        if t == "missed":
            keep_gts = [g for j, g in enumerate(ground_truths) if outcome.gt_matched[j]]
            fixed = mean_class_ap(detections, keep_gts) if keep_gts else base_ap
        else:
            drop = set(fp_indices[t])
            fixed = mean_class_ap([d for i, d in enumerate(detections) if i not in drop],
                                  ground_truths)
        delta_ap[t] = fixed - base_ap

    num_tp = int(outcome.tp.sum())
    return ErrorBreakdown(
        counts=counts, delta_ap=delta_ap, num_tp=num_tp,
        num_fp=len(detections) - num_tp, num_missed=missed, base_ap=base_ap,
    )


@dataclass
class SweepPoint:
    tau: float
    ap: float
    ap50: float
    ap75: float
    mean_propagated_per_frame: float
    mean_emitted_per_frame: float

    def as_dict(self) -> dict:
        return self.__dict__.copy()


def threshold_sweep(model, videos, ground_truths: Sequence[DetectionRecord],
                    taus: Sequence[float],
                    categories: Optional[Sequence[str]] = None) -> list[SweepPoint]:
    """Frozen-model sweep over the propagation threshold tau.

    `model` must expose `infer_videos(videos, tau=...) -> (records, stats)`
    where stats carries mean_propagated_per_frame / mean_emitted_per_frame.
    Points are returned in ascending tau order.
    """
    points = []
    for tau in sorted(taus):
        records, stats = model.infer_videos(videos, tau=tau)
        result = evaluate(records, ground_truths, categories)
        points.append(SweepPoint(
            tau=float(tau), ap=result.ap, ap50=result.ap50, ap75=result.ap75,
            mean_propagated_per_frame=float(stats["mean_propagated_per_frame"]),
            mean_emitted_per_frame=float(stats["mean_emitted_per_frame"]),
        ))
    return points


@dataclass
class AblationResult:
    with_fusion: EvalResult
    without_fusion: EvalResult

    @property
    def delta_ap(self) -> float:
        return self.with_fusion.ap - self.without_fusion.ap

    @property
    def delta_ap50(self) -> float:
        return self.with_fusion.ap50 - self.without_fusion.ap50

    def as_dict(self) -> dict:
        return {
            "with_fusion": self.with_fusion.as_dict(),
            "without_fusion": self.without_fusion.as_dict(),
            "delta_ap": self.delta_ap,
            "delta_ap50": self.delta_ap50,
        }


def ablation_fusion(model_with, model_without, videos,
                    ground_truths: Sequence[DetectionRecord],
                    categories: Optional[Sequence[str]] = None) -> AblationResult:
    """Paired evaluation of the same pipeline with fusion on vs off.

    The two models must agree on every comparable config field except the
    fusion toggle; anything else raises ConfigError.
    """
    cfg_with = dict(model_with.comparable_config())
    cfg_without = dict(model_without.comparable_config())
    cfg_with.pop("fusion_enabled", None)
    cfg_without.pop("fusion_enabled", None)
    if cfg_with != cfg_without:
        diff = {k for k in set(cfg_with) | set(cfg_without)
                if cfg_with.get(k) != cfg_without.get(k)}
        raise ConfigError(f"ablation models differ beyond the fusion toggle: {sorted(diff)}")

    recs_with, _ = model_with.infer_videos(videos, fusion_enabled=True)
    recs_without, _ = model_without.infer_videos(videos, fusion_enabled=False)
    return AblationResult(
        with_fusion=evaluate(recs_with, ground_truths, categories),
        without_fusion=evaluate(recs_without, ground_truths, categories),
    )


def occluded_frame_subset(detections: Sequence[DetectionRecord],
                          ground_truths: Sequence[DetectionRecord],
                          max_visible: float = 0.99
                          ) -> tuple[list[DetectionRecord], list[DetectionRecord]]:
    """Restrict both record sets to frames containing a partially occluded gt.

    A frame qualifies when any of its ground truths has `visible` <= max_visible.
    """
    occluded_frames = {(g.video, g.frame) for g in ground_truths
                       if g.visible is not None and g.visible <= max_visible}
    dets = [d for d in detections if (d.video, d.frame) in occluded_frames]
    gts = [g for g in ground_truths if (g.video, g.frame) in occluded_frames]
    return dets, gts

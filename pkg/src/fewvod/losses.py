"""Bipartite matching between patch predictions and ground truth, and the training loss.

Each frame is matched independently: ground-truth objects are assigned to
distinct prediction patches by minimizing a combined class/box cost (solved
exactly with scipy's linear sum assignment). The frame loss applies
cross-entropy and box terms to matched pairs and a down-weighted background
cross-entropy to every unmatched patch; the video loss is the plain sum over
frames. Matching runs on detached costs, so gradients flow only through the
loss terms.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
from scipy.optimize import linear_sum_assignment
from torch import Tensor

from .errors import NumericError
from .geometry import LOSS_EPS, box_cxcywh_to_corners, box_giou, pairwise_costs

PROB_FLOOR = 1e-9


@dataclass
class LossConfig:
    lambda_cls: float = 2.0
    lambda_box: float = 5.0
    weight_l1: float = 5.0
    weight_giou: float = 2.0
    background_weight: float = 0.1

    def validate(self) -> None:
        for name in ("lambda_cls", "lambda_box", "weight_l1", "weight_giou", "background_weight"):
            if getattr(self, name) < 0:
                raise NumericError(f"loss weight {name} must be >= 0")


@dataclass
class MatchResult:
    """Injective map from ground-truth index m to prediction (patch) index."""

    pred_indices: Tensor  # [M] long, pred_indices[m] = sigma(m)
    total_cost: float

    def __post_init__(self) -> None:
        if self.pred_indices.unique().numel() != self.pred_indices.numel():
            raise NumericError("matching assigned one patch to multiple objects")

    @property
    def num_matched(self) -> int:
        return self.pred_indices.numel()


def match_cost(probs: Tensor, boxes: Tensor, gt_boxes: Tensor, gt_categories: Tensor,
               cfg: LossConfig = LossConfig()) -> Tensor:
    """P x M matching cost: class term is -probability, box terms mirror the loss."""
    m = gt_boxes.shape[0]
    if m == 0:
        return torch.zeros(probs.shape[0], 0, dtype=probs.dtype)
    cost_class = -probs[:, gt_categories]
    cost_l1, cost_giou = pairwise_costs(boxes, gt_boxes)
    return cfg.lambda_cls * cost_class + cfg.lambda_box * (
        cfg.weight_l1 * cost_l1 + cfg.weight_giou * cost_giou
    )


def hungarian_match(cost: Tensor) -> MatchResult:
    """Minimum-cost injective assignment of all M columns to distinct rows.

    Raises NumericError when M > P (more objects than patches: infeasible).
    """
    p, m = cost.shape
    if m > p:
        raise NumericError(f"infeasible episode: {m} objects but only {p} patches")
    if m == 0:
        return MatchResult(pred_indices=torch.empty(0, dtype=torch.long), total_cost=0.0)
    cost_np = cost.detach().cpu().numpy()
    row_ind, col_ind = linear_sum_assignment(cost_np)
    pred_for_gt = torch.empty(m, dtype=torch.long)
    pred_for_gt[torch.from_numpy(col_ind)] = torch.from_numpy(row_ind)
    # summed in gt order so the total is independent of scipy's return order
    total = float(cost_np[pred_for_gt.numpy(), np.arange(m)].sum())
    return MatchResult(pred_indices=pred_for_gt, total_cost=total)


def _clamped_log(probs: Tensor) -> Tensor:
    return torch.log(probs.clamp(min=PROB_FLOOR))


def frame_loss(probs: Tensor, boxes: Tensor, gt_boxes: Tensor, gt_categories: Tensor,
               cfg: LossConfig = LossConfig(), match: MatchResult | None = None
               ) -> tuple[Tensor, dict]:
    """Matched CE + box terms, plus down-weighted background CE on unmatched patches.

    Returns (scalar loss, per-term breakdown). `match` defaults to a fresh
    Hungarian assignment on the detached matching cost.
    """
    num_patches = probs.shape[0]
    background = probs.shape[1] - 1
    if match is None:
        with torch.no_grad():
            match = hungarian_match(match_cost(probs, boxes, gt_boxes, gt_categories, cfg))

    zero = probs.new_zeros(())
    ce_matched, l1_term, giou_term = zero, zero, zero
    matched_mask = torch.zeros(num_patches, dtype=torch.bool)
    if match.num_matched > 0:
        sigma = match.pred_indices
        matched_mask[sigma] = True
        ce_matched = -_clamped_log(probs[sigma, gt_categories]).sum()
        l1_term = (boxes[sigma] - gt_boxes).abs().sum()
        giou = box_giou(box_cxcywh_to_corners(boxes[sigma]),
                        box_cxcywh_to_corners(gt_boxes), eps=LOSS_EPS)
        giou_term = (1.0 - giou).sum()

    ce_background = -_clamped_log(probs[~matched_mask, background]).sum()
    loss = (
        cfg.lambda_cls * ce_matched
        + cfg.lambda_box * (cfg.weight_l1 * l1_term + cfg.weight_giou * giou_term)
        + cfg.lambda_cls * cfg.background_weight * ce_background
    )
    breakdown = {
        "loss": loss.item(),
        "ce_matched": ce_matched.item(),
        "ce_background": ce_background.item(),
        "l1": l1_term.item(),
        "giou": giou_term.item(),
        "num_matched": match.num_matched,
        "num_background": int((~matched_mask).sum()),
    }
    return loss, breakdown


def video_loss(frame_preds: Sequence, frame_gts: Sequence[tuple[Tensor, Tensor]],
               cfg: LossConfig = LossConfig()) -> tuple[Tensor, list[dict]]:
    """Sum of per-frame losses; matching recomputed each frame.

    `frame_preds` entries are either (probs, boxes) pairs or objects exposing
    `.probs`/`.boxes` (e.g. HeadOutputs). Gradients flow across frames through
    whatever graph produced the predictions.
    """
    if len(frame_preds) != len(frame_gts):
        raise NumericError(f"{len(frame_preds)} prediction frames vs {len(frame_gts)} gt frames")
    if not frame_preds:
        raise NumericError("video loss needs at least one frame")
    total = None
    breakdowns = []
    for preds, (gt_boxes, gt_categories) in zip(frame_preds, frame_gts):
        probs, boxes = (preds.probs, preds.boxes) if hasattr(preds, "probs") else preds
        loss, info = frame_loss(probs, boxes, gt_boxes, gt_categories, cfg)
        total = loss if total is None else total + loss
        breakdowns.append(info)
    if not torch.isfinite(total):
        raise NumericError(f"non-finite video loss: {total.item()}")
    return total, breakdowns

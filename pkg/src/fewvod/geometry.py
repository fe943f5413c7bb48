"""Axis-aligned bounding-box arithmetic shared by the box head, the loss, and evaluation.

Boxes are stored in normalized center-size form ``(cx, cy, w, h)`` with all four
values expressed as fractions of the frame size; corner form ``(x1, y1, x2, y2)``
is derived. All functions accept tensors whose last dimension is 4 and preserve
the input dtype, so metric code can run in float64 while the loss path stays on
whatever dtype the model uses.

Degenerate overlaps (zero-area boxes, zero-area unions) evaluate to IoU 0 on the
metric path (``eps=0``); the loss path clamps denominators with a small epsilon
instead so the result stays differentiable.
"""

from __future__ import annotations

import torch
from torch import Tensor

from .errors import InvalidBoxError

# Denominator clamp used by the loss/matching path.
LOSS_EPS = 1e-7


def box_cxcywh_to_corners(boxes: Tensor) -> Tensor:
    """Convert center-size boxes to corner form (x1, y1, x2, y2).

    Raises:
        InvalidBoxError: if any width or height is negative.
    """
    cx, cy, w, h = boxes.unbind(-1)
    if (w < 0).any() or (h < 0).any():
        raise InvalidBoxError("negative width/height in center-size box")
    return torch.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], dim=-1)


def box_corners_to_cxcywh(boxes: Tensor) -> Tensor:
    """Convert corner boxes to center-size form.

    Raises:
        InvalidBoxError: if any box has x2 < x1 or y2 < y1.
    """
    x1, y1, x2, y2 = boxes.unbind(-1)
    if (x2 < x1).any() or (y2 < y1).any():
        raise InvalidBoxError("corner box with x2 < x1 or y2 < y1")
    return torch.stack([(x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1], dim=-1)


def _corner_area(boxes: Tensor) -> Tensor:
    return (boxes[..., 2] - boxes[..., 0]) * (boxes[..., 3] - boxes[..., 1])


def box_iou(a: Tensor, b: Tensor, eps: float = 0.0) -> Tensor:
    """Elementwise IoU of corner boxes; `a` and `b` broadcast against each other.

    With ``eps=0`` a zero-area union yields IoU 0 by convention; a positive
    ``eps`` clamps the denominator instead (differentiable loss path).
    """
    lt = torch.maximum(a[..., :2], b[..., :2])
    rb = torch.minimum(a[..., 2:], b[..., 2:])
    wh = (rb - lt).clamp(min=0)
    inter = wh[..., 0] * wh[..., 1]
    union = _corner_area(a) + _corner_area(b) - inter
    if eps > 0:
        return inter / union.clamp(min=eps)
    iou = inter / union
    return torch.where(union > 0, iou, torch.zeros_like(iou))


def box_giou(a: Tensor, b: Tensor, eps: float = 0.0) -> Tensor:
    """Elementwise generalized IoU of corner boxes, in (-1, 1].

    giou = iou - (enclosing_area - union) / enclosing_area. Same epsilon
    convention as :func:`box_iou`.
    """
    lt = torch.maximum(a[..., :2], b[..., :2])
    rb = torch.minimum(a[..., 2:], b[..., 2:])
    wh = (rb - lt).clamp(min=0)
    inter = wh[..., 0] * wh[..., 1]
    union = _corner_area(a) + _corner_area(b) - inter

    enc_lt = torch.minimum(a[..., :2], b[..., :2])
    enc_rb = torch.maximum(a[..., 2:], b[..., 2:])
    enc_wh = (enc_rb - enc_lt).clamp(min=0)
    enclose = enc_wh[..., 0] * enc_wh[..., 1]

    if eps > 0:
        iou = inter / union.clamp(min=eps)
        return iou - (enclose - union) / enclose.clamp(min=eps)
    iou = inter / union
    iou = torch.where(union > 0, iou, torch.zeros_like(iou))
    penalty = (enclose - union) / enclose
    penalty = torch.where(enclose > 0, penalty, torch.zeros_like(penalty))
    return iou - penalty


def pairwise_iou(a: Tensor, b: Tensor, eps: float = 0.0) -> Tensor:
    """Pairwise IoU matrix [N, M] for corner boxes a [N, 4] and b [M, 4]."""
    return box_iou(a[:, None, :], b[None, :, :], eps=eps)


def pairwise_giou(a: Tensor, b: Tensor, eps: float = 0.0) -> Tensor:
    """Pairwise generalized IoU matrix [N, M] for corner boxes."""
    return box_giou(a[:, None, :], b[None, :, :], eps=eps)


def pairwise_costs(pred_boxes: Tensor, gt_boxes: Tensor, eps: float = LOSS_EPS) -> tuple[Tensor, Tensor]:
    """Box-cost matrices between predictions and ground truths in center-size form.

    Args:
        pred_boxes: [N, 4] predicted (cx, cy, w, h) boxes, N >= 1.
        gt_boxes: [M, 4] ground-truth boxes; M may be 0.

    Returns:
        (l1, giou_cost): both [N, M]. l1 is the summed absolute difference of
        the four center-size parameters; giou_cost is 1 - giou.
    """
    if pred_boxes.numel() == 0:
        raise InvalidBoxError("pairwise_costs requires at least one prediction")
    if gt_boxes.shape[0] == 0:
        empty = pred_boxes.new_zeros((pred_boxes.shape[0], 0))
        return empty, empty.clone()
    l1 = torch.cdist(pred_boxes, gt_boxes, p=1)
    giou = pairwise_giou(
        box_cxcywh_to_corners(pred_boxes), box_cxcywh_to_corners(gt_boxes), eps=eps
    )
    return l1, 1.0 - giou

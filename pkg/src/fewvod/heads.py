"""Few-shot classification and box regression heads over fused patch features.

The classifier projects patch features with a bias-free square linear map,
compares them to category prototypes by cosine similarity, scales by a
learnable temperature, appends a learnable background logit, and softmaxes
over N+1 classes (background last). The box head is a small MLP predicting
normalized center-size boxes through a sigmoid. Each patch emits at most one
detection; there is no NMS by default.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import torch
from torch import Tensor, nn

from .errors import ConfigError
from .geometry import box_cxcywh_to_corners, box_iou
from .support import Prototypes

COSINE_EPS = 1e-8
TEMPERATURE_INIT = 10.0
DEFAULT_KAPPA = 0.98
_BIAS_EPS = 1e-4


def box_bias(grid_shape: tuple[int, int], dtype: torch.dtype = torch.float64) -> Tensor:
    """Logit-space (cx, cy, w, h) of each patch's grid cell, row-major [P, 4].

    Added to the box MLP output before the sigmoid so each patch predicts a
    box relative to its own cell rather than in absolute coordinates.
    """
    rows, cols = grid_shape
    ys = (torch.arange(rows, dtype=dtype) + 0.5) / rows
    xs = (torch.arange(cols, dtype=dtype) + 0.5) / cols
    gy, gx = torch.meshgrid(ys, xs, indexing="ij")
    cell = torch.stack([
        gx.reshape(-1),
        gy.reshape(-1),
        torch.full((rows * cols,), 1.0 / cols, dtype=dtype),
        torch.full((rows * cols,), 1.0 / rows, dtype=dtype),
    ], dim=-1)
    cell = cell.clamp(_BIAS_EPS, 1.0 - _BIAS_EPS)
    return torch.log(cell) - torch.log1p(-cell)


def cosine_similarity_matrix(a: Tensor, b: Tensor, eps: float = COSINE_EPS) -> Tensor:
    """Pairwise cosine similarity [P, N] with norm clamping at eps."""
    a = a / a.norm(dim=-1, keepdim=True).clamp_min(eps)
    b = b / b.norm(dim=-1, keepdim=True).clamp_min(eps)
    return a @ b.T


@dataclass
class ClassScores:
    similarities: Tensor  # [P, N] cosine similarities in [-1, 1]
    probs: Tensor         # [P, N+1] probability rows, background last


@dataclass
class HeadOutputs:
    """Per-patch head results for one frame."""

    cls_embeddings: Tensor  # [P, D] classifier-projected embeddings
    similarities: Tensor    # [P, N]
    probs: Tensor           # [P, N+1]
    boxes: Tensor           # [P, 4] (cx, cy, w, h) in (0, 1)


class DetectionHeads(nn.Module):
    """Classification head + box head sharing the fused frame features."""

    def __init__(self, embed_dim: int, box_hidden_dim: int = 512,
                 temperature_init: float = TEMPERATURE_INIT,
                 dtype: torch.dtype = torch.float64):
        super().__init__()
        if temperature_init <= 0:
            raise ConfigError(f"temperature_init must be > 0, got {temperature_init}")
        self.embed_dim = embed_dim
        self.cls_proj = nn.Linear(embed_dim, embed_dim, bias=False)
        self.log_temperature = nn.Parameter(torch.tensor(math.log(temperature_init), dtype=dtype))
        self.background_logit = nn.Parameter(torch.tensor(0.0, dtype=dtype))
        self.box_mlp = nn.Sequential(
            nn.Linear(embed_dim, box_hidden_dim),
            nn.ReLU(),
            nn.Linear(box_hidden_dim, box_hidden_dim),
            nn.ReLU(),
            nn.Linear(box_hidden_dim, 4),
        )
        self.to(dtype)

    @property
    def temperature(self) -> Tensor:
        return self.log_temperature.exp()

    def project_cls(self, features: Tensor) -> Tensor:
        if features.shape[-1] != self.embed_dim:
            raise ConfigError(f"feature width {features.shape[-1]} != head width {self.embed_dim}")
        return self.cls_proj(features)

    def class_scores(self, cls_embeddings: Tensor, prototypes: Prototypes) -> ClassScores:
        sims = cosine_similarity_matrix(cls_embeddings, prototypes.matrix)
        fg_logits = self.temperature * sims
        bg = self.background_logit.expand(cls_embeddings.shape[0], 1)
        probs = torch.softmax(torch.cat([fg_logits, bg], dim=-1), dim=-1)
        return ClassScores(similarities=sims, probs=probs)

    def predict_boxes(self, features: Tensor, grid_shape: Optional[tuple[int, int]] = None
                      ) -> Tensor:
        """Per-patch (cx, cy, w, h) in (0,1)^4.

        With `grid_shape` the MLP output is offset by each patch's own
        position and size in logit space before the sigmoid, so a zero MLP
        output decodes to the patch's cell. The feature grid itself carries
        no positional signal, so localization depends on this bias.
        """
        if features.shape[-1] != self.embed_dim:
            raise ConfigError(f"feature width {features.shape[-1]} != head width {self.embed_dim}")
        raw = self.box_mlp(features)
        if grid_shape is not None:
            raw = raw + box_bias(grid_shape, dtype=raw.dtype)
        return torch.sigmoid(raw)

    def forward(self, features: Tensor, prototypes: Prototypes,
                grid_shape: Optional[tuple[int, int]] = None) -> HeadOutputs:
        cls_emb = self.project_cls(features)
        scores = self.class_scores(cls_emb, prototypes)
        return HeadOutputs(
            cls_embeddings=cls_emb,
            similarities=scores.similarities,
            probs=scores.probs,
            boxes=self.predict_boxes(features, grid_shape=grid_shape),
        )


@dataclass
class RawDetection:
    """One decoded detection, before record assembly."""

    patch_index: int
    category_index: int
    box_corners: Tensor  # [4] (x1, y1, x2, y2) normalized
    confidence: float


def max_foreground(probs: Tensor) -> tuple[Tensor, Tensor]:
    """(max foreground probability, argmax category index) per patch."""
    fg = probs[..., :-1]
    conf, idx = fg.max(dim=-1)
    return conf, idx


def decode_detections(outputs: HeadOutputs, kappa: float = DEFAULT_KAPPA,
                      nms_iou: Optional[float] = None) -> list[RawDetection]:
    """Threshold patch predictions into detections.

    A patch fires when its max foreground probability exceeds `kappa`; the
    predicted category is the argmax foreground class. Pass `nms_iou`
    (e.g. 0.5) for optional class-aware greedy suppression.
    """
    conf, cat = max_foreground(outputs.probs)
    keep = torch.nonzero(conf > kappa, as_tuple=False).flatten()
    corners = box_cxcywh_to_corners(outputs.boxes)
    dets = [
        RawDetection(
            patch_index=int(p),
            category_index=int(cat[p]),
            box_corners=corners[p].detach(),
            confidence=conf[p].item(),
        )
        for p in keep.tolist()
    ]
    if nms_iou is None:
        return dets
    dets.sort(key=lambda d: (-d.confidence, d.patch_index))
    kept: list[RawDetection] = []
    for d in dets:
        suppressed = False
        for k in kept:
            if k.category_index != d.category_index:
                continue
            if box_iou(k.box_corners, d.box_corners).item() > nms_iou:
                suppressed = True
                break
        if not suppressed:
            kept.append(d)
    kept.sort(key=lambda d: d.patch_index)
    return kept

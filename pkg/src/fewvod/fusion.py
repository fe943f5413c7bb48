"""Confidence-filtered temporal feature propagation between adjacent frames.

Classifier embeddings from frame t-1 whose max foreground probability exceeds
a threshold tau form a retained set. The current frame's patch features attend
over that set (multi-head cross-attention, current features as queries) and
the attended values are added residually. The attention output projection is
zero-initialized, so an untrained fusion module starts as the identity; the
first frame of a video and any frame with an empty retained set bypass the
attention entirely and pass features through bit-identically.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import torch
from torch import Tensor, nn

from .errors import ConfigError, NumericError
from .heads import DetectionHeads, HeadOutputs, max_foreground
from .support import Prototypes

RETAINED_CAP = 32
DEFAULT_TAU = 0.94


@dataclass
class RetainedSet:
    """Embeddings carried from one frame to the next, with their confidences."""

    embeddings: Tensor      # [R, D]
    confidences: Tensor     # [R]
    patch_indices: Tensor   # [R] source patch ids, ascending

    def __len__(self) -> int:
        return self.embeddings.shape[0]


def empty_retained(embed_dim: int, dtype: torch.dtype = torch.float64) -> RetainedSet:
    return RetainedSet(
        embeddings=torch.empty(0, embed_dim, dtype=dtype),
        confidences=torch.empty(0, dtype=dtype),
        patch_indices=torch.empty(0, dtype=torch.long),
    )


def select_retained(outputs: HeadOutputs, tau: float, cap: int = RETAINED_CAP) -> RetainedSet:
    """Patches with max foreground probability > tau, top-`cap` by confidence.

    Ties at the cap boundary are broken toward lower patch indices, and the
    selected rows are kept in ascending patch order.
    """
    conf, _ = max_foreground(outputs.probs)
    candidates = torch.nonzero(conf > tau, as_tuple=False).flatten()
    if candidates.numel() > cap:
        order = torch.argsort(-conf[candidates], stable=True)
        candidates = candidates[order[:cap]]
    candidates, _ = torch.sort(candidates)
    return RetainedSet(
        embeddings=outputs.cls_embeddings[candidates],
        confidences=conf[candidates].detach(),
        patch_indices=candidates,
    )


class TemporalFusion(nn.Module):
    """Multi-head cross-attention from current-frame features to retained embeddings."""

    def __init__(self, embed_dim: int, num_heads: int = 4, dtype: torch.dtype = torch.float64):
        super().__init__()
        if embed_dim % num_heads != 0:
            raise ConfigError(f"embed_dim {embed_dim} not divisible by {num_heads} heads")
        self.embed_dim = embed_dim
        self.num_heads = num_heads
        self.head_dim = embed_dim // num_heads
        self.q_proj = nn.Linear(embed_dim, embed_dim)
        self.k_proj = nn.Linear(embed_dim, embed_dim)
        self.v_proj = nn.Linear(embed_dim, embed_dim)
        self.out_proj = nn.Linear(embed_dim, embed_dim)
        # Zero output projection: fusion starts as an exact identity map.
        nn.init.zeros_(self.out_proj.weight)
        nn.init.zeros_(self.out_proj.bias)
        self.to(dtype)

    def _split_heads(self, x: Tensor) -> Tensor:
        n = x.shape[0]
        return x.reshape(n, self.num_heads, self.head_dim).transpose(0, 1)

    def cross_frame_attention(self, features: Tensor, retained: RetainedSet) -> Tensor:
        """Per-head attention weights [H, P, R] of queries over retained embeddings.

        Requires a non-empty retained set; callers must route R=0 through the
        identity path in `fuse` instead.
        """
        if len(retained) == 0:
            raise NumericError("cross-frame attention over an empty retained set")
        if retained.embeddings.shape[-1] != self.embed_dim:
            raise ConfigError(
                f"retained width {retained.embeddings.shape[-1]} != fusion width {self.embed_dim}")
        q = self._split_heads(self.q_proj(features))             # [H, P, dh]
        k = self._split_heads(self.k_proj(retained.embeddings))  # [H, R, dh]
        scores = q @ k.transpose(-2, -1) / math.sqrt(self.head_dim)
        return torch.softmax(scores, dim=-1)

    def fuse(self, features: Tensor, retained: RetainedSet) -> tuple[Tensor, Optional[Tensor]]:
        """Residual cross-attention update.

        Returns (fused features [P, D], attention weights [H, P, R]). An empty
        retained set short-circuits: the input tensor is returned unchanged
        and the weights are None.
        """
        if len(retained) == 0:
            return features, None
        attn = self.cross_frame_attention(features, retained)   # [H, P, R]
        v = self._split_heads(self.v_proj(retained.embeddings))
        context = (attn @ v).transpose(0, 1).reshape(features.shape[0], self.embed_dim)
        return features + self.out_proj(context), attn

    def forward(self, features: Tensor, retained: RetainedSet):
        return self.fuse(features, retained)


@dataclass
class FrameResult:
    """Per-frame model outputs plus fusion bookkeeping."""

    outputs: HeadOutputs
    fused_features: Tensor
    retained_in: int      # size of the retained set consumed by this frame
    attention: Optional[Tensor] = None  # [H, P, R] when fusion ran


@dataclass
class VideoResult:
    frames: list[FrameResult] = field(default_factory=list)

    @property
    def head_outputs(self) -> list[HeadOutputs]:
        return [f.outputs for f in self.frames]

    def mean_retained_in(self) -> float:
        if not self.frames:
            return 0.0
        return sum(f.retained_in for f in self.frames) / len(self.frames)


def process_video(frame_features: Sequence[Tensor], heads: DetectionHeads,
                  fusion: TemporalFusion, prototypes: Prototypes, tau: float = DEFAULT_TAU,
                  fusion_enabled: bool = True, keep_attention: bool = False,
                  cap: int = RETAINED_CAP,
                  grid_shape: Optional[tuple[int, int]] = None) -> VideoResult:
    """Run fusion + heads over a video's per-frame patch features, in order.

    Only the immediately preceding frame feeds each frame's retained set; with
    `fusion_enabled=False` every frame is processed independently (the
    retained set is never consulted), which is the ablation baseline.
    """
    result = VideoResult()
    retained = empty_retained(fusion.embed_dim, dtype=frame_features[0].dtype if frame_features else torch.float64)
    for features in frame_features:
        if fusion_enabled:
            fused, attn = fusion.fuse(features, retained)
        else:
            fused, attn = features, None
        outputs = heads(fused, prototypes, grid_shape=grid_shape)
        result.frames.append(FrameResult(
            outputs=outputs,
            fused_features=fused,
            retained_in=len(retained) if fusion_enabled else 0,
            attention=attn if keep_attention else None,
        ))
        retained = select_retained(outputs, tau, cap=cap)
    return result

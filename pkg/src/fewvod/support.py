"""Category prototypes from few-shot support images.

Each support image contributes the embedding of its most object-like patch
(argmax objectness); a category prototype is the mean of its K support
embeddings. Prototypes are kept in a fixed category order so classifier
logits have a stable column layout.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import torch
from torch import Tensor

from .encoder import FrameEmbeddings
from .errors import ConfigError, DataError


def select_object_patch(fe: FrameEmbeddings) -> tuple[int, Tensor]:
    """Index and embedding of the highest-objectness patch (lowest index wins ties)."""
    idx = int(torch.argmax(fe.objectness))
    return idx, fe.embeddings[idx]


def build_prototype(embeddings: Sequence[Tensor]) -> Tensor:
    """Element-wise mean of K support embeddings."""
    if not embeddings:
        raise ConfigError("prototype requires at least one support embedding")
    dims = {e.shape[-1] for e in embeddings}
    if len(dims) != 1:
        raise ConfigError(f"support embeddings disagree on embed_dim: {sorted(dims)}")
    return torch.stack(list(embeddings)).mean(dim=0)


@dataclass
class Prototypes:
    """Stacked category prototypes [N, D] with their category names."""

    categories: list[str]
    matrix: Tensor

    def __post_init__(self) -> None:
        if len(self.categories) != self.matrix.shape[0]:
            raise DataError("one prototype row per category required")
        if len(set(self.categories)) != len(self.categories):
            raise DataError("duplicate category names in prototype set")
        if self.matrix.ndim != 2 or self.matrix.shape[0] < 1:
            raise DataError(f"prototype matrix must be [N>=1, D], got {tuple(self.matrix.shape)}")
        if not bool(torch.isfinite(self.matrix).all()):
            raise DataError("non-finite prototype values")

    @property
    def num_categories(self) -> int:
        return self.matrix.shape[0]

    @property
    def embed_dim(self) -> int:
        return self.matrix.shape[1]

    def index_of(self, category: str) -> int:
        try:
            return self.categories.index(category)
        except ValueError:
            raise DataError(f"unknown category {category!r}") from None


def build_prototypes(support: Mapping[str, Sequence[FrameEmbeddings]]) -> Prototypes:
    """Mean-of-support-embeddings prototype per category (N-way K-shot bank).

    `support` maps category name -> K encoded support images; K must be the
    same for every category. Category order of the result follows the
    mapping's iteration order.
    """
    if not support:
        raise ConfigError("support set must contain at least one category")
    shot_counts = {cat: len(shots) for cat, shots in support.items()}
    if min(shot_counts.values()) < 1:
        empty = [c for c, n in shot_counts.items() if n == 0]
        raise ConfigError(f"categories with no support images: {empty}")
    if len(set(shot_counts.values())) != 1:
        raise ConfigError(f"unbalanced shots per category: {shot_counts}")
    categories = list(support.keys())
    rows = [build_prototype([select_object_patch(fe)[1] for fe in support[cat]])
            for cat in categories]
    return Prototypes(categories=categories, matrix=torch.stack(rows))

"""Per-frame patch embeddings and objectness scores behind a uniform interface.

Two backends:

* ``synthetic-trainable`` (default): a miniature trainable encoder, a linear
  patch projection followed by 2 self-attention blocks, with a 1-layer
  objectness scorer ending in a sigmoid. No positional embeddings are used, so
  the encoder is translation-equivariant at patch granularity.
* ``pretrained-adapter``: a stub that consumes externally computed embedding
  and objectness arrays from per-frame ``.npz`` files, for plugging in a large
  pretrained encoder without adding it as a dependency.
"""

from __future__ import annotations

import glob
import os
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch
from torch import Tensor, nn

from .errors import CheckpointError, ConfigError, DataError

BACKEND_KINDS = ("synthetic-trainable", "pretrained-adapter")
CHECKPOINT_VERSION = 1

# Fixed internals of the synthetic backend (not exposed as config).
_NUM_BLOCKS = 2
_NUM_HEADS = 4
_MLP_RATIO = 2


@dataclass
class EncoderConfig:
    patch_size: int = 8
    embed_dim: int = 64
    backend_kind: str = "synthetic-trainable"

    def validate(self) -> None:
        if self.patch_size < 1:
            raise ConfigError(f"patch_size must be >= 1, got {self.patch_size}")
        if self.embed_dim < 8:
            raise ConfigError(f"embed_dim must be >= 8, got {self.embed_dim}")
        if self.embed_dim % _NUM_HEADS != 0:
            raise ConfigError(f"embed_dim must be divisible by {_NUM_HEADS}")
        if self.backend_kind not in BACKEND_KINDS:
            raise ConfigError(f"unknown backend_kind {self.backend_kind!r}")


@dataclass
class FrameEmbeddings:
    """Patch embeddings [P, D], per-patch objectness [P] in [0, 1], and the patch grid."""

    embeddings: Tensor
    objectness: Tensor
    grid_shape: tuple[int, int]

    def __post_init__(self) -> None:
        p, d = self.embeddings.shape
        rows, cols = self.grid_shape
        if p < 1 or d < 8:
            raise DataError(f"embeddings must be [P>=1, D>=8], got {tuple(self.embeddings.shape)}")
        if rows * cols != p:
            raise DataError(f"grid {self.grid_shape} does not cover {p} patches")
        if self.objectness.shape != (p,):
            raise DataError("objectness must have one entry per patch")
        if not bool(torch.isfinite(self.embeddings).all()) or not bool(torch.isfinite(self.objectness).all()):
            raise DataError("non-finite values in frame embeddings")
        if bool((self.objectness < 0).any()) or bool((self.objectness > 1).any()):
            raise DataError("objectness entries must lie in [0, 1]")

    @property
    def num_patches(self) -> int:
        return self.embeddings.shape[0]

    @property
    def embed_dim(self) -> int:
        return self.embeddings.shape[1]


def image_to_tensor(image, dtype: torch.dtype = torch.float64) -> Tensor:
    """Convert an HxWxC pixel array to a float tensor in [0, 1]."""
    if isinstance(image, Tensor):
        t = image
    else:
        t = torch.from_numpy(np.ascontiguousarray(image))
    if t.ndim != 3:
        raise ConfigError(f"expected HxWxC image, got shape {tuple(t.shape)}")
    if not t.is_floating_point():
        t = t.to(dtype) / 255.0
    else:
        t = t.to(dtype)
    return t


class _SelfAttentionBlock(nn.Module):
    """Pre-norm self-attention block: attention and a small feed-forward, both residual."""

    def __init__(self, dim: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = nn.MultiheadAttention(dim, _NUM_HEADS, batch_first=True)
        self.norm2 = nn.LayerNorm(dim)
        hidden = _MLP_RATIO * dim
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))

    def forward(self, x: Tensor) -> Tensor:
        h = self.norm1(x)
        attn_out, _ = self.attn(h, h, h, need_weights=False)
        x = x + attn_out
        return x + self.mlp(self.norm2(x))


class SyntheticEncoder(nn.Module):
    """Trainable desk-scale encoder: patchify, project, 2 attention blocks, objectness head."""

    def __init__(self, config: EncoderConfig, seed: Optional[int] = None,
                 dtype: torch.dtype = torch.float64):
        super().__init__()
        config.validate()
        if config.backend_kind != "synthetic-trainable":
            raise ConfigError("SyntheticEncoder requires backend_kind 'synthetic-trainable'")
        if seed is not None:
            torch.manual_seed(seed)
        self.config = config
        d = config.embed_dim
        self.patch_proj = nn.Linear(3 * config.patch_size * config.patch_size, d)
        self.blocks = nn.ModuleList(_SelfAttentionBlock(d) for _ in range(_NUM_BLOCKS))
        self.objectness_head = nn.Linear(d, 1)
        self.to(dtype)
        self._dtype = dtype

    @property
    def embed_dim(self) -> int:
        return self.config.embed_dim

    def _patchify(self, image: Tensor) -> tuple[Tensor, tuple[int, int]]:
        h, w, c = image.shape
        ps = self.config.patch_size
        if h % ps != 0 or w % ps != 0:
            raise ConfigError(f"image {h}x{w} not divisible by patch size {ps}")
        rows, cols = h // ps, w // ps
        patches = (
            image.reshape(rows, ps, cols, ps, c)
            .permute(0, 2, 1, 3, 4)
            .reshape(rows * cols, ps * ps * c)
        )
        return patches, (rows, cols)

    def encode(self, image) -> FrameEmbeddings:
        """Encode one HxWx3 image. Pure function of (parameters, input)."""
        pixels = image_to_tensor(image, self._dtype)
        patches, grid = self._patchify(pixels)
        tokens = self.patch_proj(patches)
        for block in self.blocks:
            tokens = block(tokens)
        objectness = torch.sigmoid(self.objectness_head(tokens)).squeeze(-1)
        return FrameEmbeddings(embeddings=tokens, objectness=objectness, grid_shape=grid)

    def forward(self, image) -> FrameEmbeddings:
        return self.encode(image)


def save_encoder(encoder: SyntheticEncoder, path: str) -> None:
    """Write a versioned encoder checkpoint atomically."""
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "kind": "synthetic-encoder",
        "config": {
            "patch_size": encoder.config.patch_size,
            "embed_dim": encoder.config.embed_dim,
            "backend_kind": encoder.config.backend_kind,
        },
        "state": encoder.state_dict(),
    }
    tmp = f"{path}.tmp"
    torch.save(payload, tmp)
    os.replace(tmp, path)


def load_encoder(path: str, expect_embed_dim: Optional[int] = None) -> SyntheticEncoder:
    """Rebuild an encoder from a checkpoint.

    Raises:
        CheckpointError: missing or corrupt file, or wrong container kind.
        ConfigError: embed_dim does not match `expect_embed_dim`.
    """
    try:
        payload = torch.load(path, weights_only=False)
    except Exception as exc:
        raise CheckpointError(f"cannot load encoder checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("kind") != "synthetic-encoder":
        raise CheckpointError(f"{path} is not an encoder checkpoint")
    if payload.get("format_version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {payload.get('format_version')}")
    config = EncoderConfig(**payload["config"])
    if expect_embed_dim is not None and config.embed_dim != expect_embed_dim:
        raise ConfigError(
            f"checkpoint embed_dim {config.embed_dim} does not match expected {expect_embed_dim}"
        )
    encoder = SyntheticEncoder(config)
    encoder.load_state_dict(payload["state"])
    return encoder


# ---------------------------------------------------------------------------
# Pretrained-adapter backend: per-frame npz files of precomputed arrays.
# ---------------------------------------------------------------------------

def save_frame_embeddings(path: str, fe: FrameEmbeddings) -> None:
    """Write one frame's precomputed (embeddings, objectness) arrays as float32 npz."""
    np.savez(
        path,
        embeddings=fe.embeddings.detach().cpu().numpy().astype(np.float32),
        objectness=fe.objectness.detach().cpu().numpy().astype(np.float32),
        grid=np.asarray(fe.grid_shape, dtype=np.int64),
    )


def load_frame_embeddings(path: str, dtype: torch.dtype = torch.float64) -> FrameEmbeddings:
    """Load one precomputed frame file, validating the schema."""
    try:
        with np.load(path) as data:
            embeddings = np.asarray(data["embeddings"])
            objectness = np.asarray(data["objectness"])
            grid = np.asarray(data["grid"])
    except (OSError, KeyError, ValueError) as exc:
        raise DataError(f"cannot read frame embeddings {path}: {exc}") from exc
    if embeddings.ndim != 2 or objectness.ndim != 1 or grid.shape != (2,):
        raise DataError(f"bad array shapes in {path}")
    return FrameEmbeddings(
        embeddings=torch.from_numpy(embeddings).to(dtype),
        objectness=torch.from_numpy(objectness).to(dtype),
        grid_shape=(int(grid[0]), int(grid[1])),
    )


class PrecomputedEncoder:
    """Adapter backend serving FrameEmbeddings from a directory of npz files.

    Files are served in sorted filename order; ``frame_0000.npz`` style names
    keep that order aligned with frame indices.
    """

    def __init__(self, directory: str, dtype: torch.dtype = torch.float64):
        self.directory = directory
        self._dtype = dtype
        self.paths = sorted(glob.glob(os.path.join(directory, "*.npz")))
        if not self.paths:
            raise DataError(f"no .npz frame files found in {directory}")
        first = load_frame_embeddings(self.paths[0], dtype)
        self._embed_dim = first.embed_dim

    @property
    def embed_dim(self) -> int:
        return self._embed_dim

    def __len__(self) -> int:
        return len(self.paths)

    def encode_index(self, index: int) -> FrameEmbeddings:
        fe = load_frame_embeddings(self.paths[index], self._dtype)
        if fe.embed_dim != self._embed_dim:
            raise DataError(f"{self.paths[index]}: embed_dim {fe.embed_dim} != {self._embed_dim}")
        return fe

    def encode_all(self) -> list[FrameEmbeddings]:
        return [self.encode_index(i) for i in range(len(self.paths))]

"""The assembled few-shot video detector: encoder + prototypes + fusion + heads.

One Detector owns the trainable modules and the run configuration. Prototypes
are not part of the model state; they are rebuilt from each episode's support
set. Checkpoints bundle config and weights so a saved detector reloads
bit-identically.
"""

from __future__ import annotations

import os
from typing import Mapping, Optional, Sequence

import numpy as np
import torch
from torch import nn

from .config import RunConfig, config_to_dict, parse_config
from .data import Episode
from .encoder import FrameEmbeddings, SyntheticEncoder
from .errors import CheckpointError, ConfigError
from .evaluation import EvalResult, evaluate
from .fusion import TemporalFusion, VideoResult, process_video
from .heads import DetectionHeads, decode_detections
from .records import DetectionRecord
from .support import Prototypes, build_prototypes

DETECTOR_CHECKPOINT_VERSION = 1
_UNSET = object()


class Detector(nn.Module):
    """Full pipeline over one video: encode, fuse with the previous frame, predict."""

    def __init__(self, config: RunConfig):
        super().__init__()
        config.validate()
        self.config = config
        torch.manual_seed(config.seed)
        d = config.encoder.embed_dim
        self.encoder = SyntheticEncoder(config.encoder)
        self.fusion = TemporalFusion(d, num_heads=config.fusion.num_heads)
        self.heads = DetectionHeads(d, box_hidden_dim=config.heads.box_hidden_dim,
                                    temperature_init=config.heads.temperature_init)

    @property
    def embed_dim(self) -> int:
        return self.config.encoder.embed_dim

    def encode_support(self, images_by_category: Mapping[str, Sequence[np.ndarray]]) -> Prototypes:
        support = {cat: [self.encoder.encode(img) for img in imgs]
                   for cat, imgs in images_by_category.items()}
        return build_prototypes(support)

    def forward_video(self, frames: np.ndarray, prototypes: Prototypes,
                      tau: Optional[float] = None, fusion_enabled: Optional[bool] = None,
                      keep_attention: bool = False
                      ) -> tuple[VideoResult, list[FrameEmbeddings]]:
        """Full differentiable forward pass over one video's frames [T, H, W, 3]."""
        embeddings = [self.encoder.encode(frame) for frame in frames]
        result = process_video(
            [fe.embeddings for fe in embeddings], self.heads, self.fusion, prototypes,
            tau=self.config.fusion.tau if tau is None else tau,
            fusion_enabled=self.config.fusion.enabled if fusion_enabled is None else fusion_enabled,
            keep_attention=keep_attention,
            cap=self.config.fusion.retained_cap,
            grid_shape=embeddings[0].grid_shape if embeddings else None,
        )
        return result, embeddings

    def infer_video(self, frames: np.ndarray, video_name: str, prototypes: Prototypes,
                    tau: Optional[float] = None, kappa: Optional[float] = None,
                    fusion_enabled: Optional[bool] = None, nms_iou=_UNSET
                    ) -> tuple[list[DetectionRecord], VideoResult]:
        """Decode one video into detection records (no gradients)."""
        if kappa is None:
            kappa = self.config.heads.kappa
        if nms_iou is _UNSET:
            nms_iou = self.config.heads.nms_iou
        self.eval()
        with torch.no_grad():
            result, _ = self.forward_video(frames, prototypes, tau=tau,
                                           fusion_enabled=fusion_enabled)
        records = []
        for t, frame_result in enumerate(result.frames):
            for det in decode_detections(frame_result.outputs, kappa=kappa, nms_iou=nms_iou):
                records.append(DetectionRecord(
                    video=video_name, frame=t,
                    category=prototypes.categories[det.category_index],
                    box=tuple(float(x) for x in det.box_corners),
                    confidence=det.confidence,
                ))
        return records, result

    def infer_videos(self, episodes: Sequence[Episode], tau: Optional[float] = None,
                     kappa: Optional[float] = None, fusion_enabled: Optional[bool] = None,
                     nms_iou=_UNSET) -> tuple[list[DetectionRecord], dict]:
        """Run inference over whole episodes (support encoding + all videos).

        Returns pooled detection records plus propagation statistics:
        mean_propagated_per_frame (size of the retained set each frame
        consumed) and mean_emitted_per_frame (decoded detections).
        """
        records: list[DetectionRecord] = []
        total_frames = 0
        total_retained = 0
        for episode in episodes:
            prototypes = self.encode_support_frozen(episode.support_by_category())
            for video in episode.videos:
                recs, result = self.infer_video(
                    video.frames, video.name, prototypes,
                    tau=tau, kappa=kappa, fusion_enabled=fusion_enabled, nms_iou=nms_iou)
                records.extend(recs)
                total_frames += len(result.frames)
                total_retained += sum(f.retained_in for f in result.frames)
        stats = {
            "mean_propagated_per_frame": total_retained / total_frames if total_frames else 0.0,
            "mean_emitted_per_frame": len(records) / total_frames if total_frames else 0.0,
            "num_frames": total_frames,
        }
        return records, stats

    def encode_support_frozen(self, images_by_category) -> Prototypes:
        with torch.no_grad():
            return self.encode_support(images_by_category)

    def comparable_config(self) -> dict:
        """Config dict with the fusion toggle pulled out as `fusion_enabled`."""
        d = config_to_dict(self.config)
        d["fusion_enabled"] = d["fusion"].pop("enabled")
        return d


def save_detector(detector: Detector, path: str) -> None:
    payload = {
        "format_version": DETECTOR_CHECKPOINT_VERSION,
        "kind": "detector",
        "config": config_to_dict(detector.config),
        "state": detector.state_dict(),
    }
    tmp = f"{path}.tmp"
    torch.save(payload, tmp)
    os.replace(tmp, path)


def load_detector(path: str) -> Detector:
    try:
        payload = torch.load(path, weights_only=False)
    except Exception as exc:
        raise CheckpointError(f"cannot load detector checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("kind") != "detector":
        raise CheckpointError(f"{path} is not a detector checkpoint")
    if payload.get("format_version") != DETECTOR_CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {payload.get('format_version')}")
    config = parse_config(payload["config"])
    detector = Detector(config)
    try:
        detector.load_state_dict(payload["state"])
    except RuntimeError as exc:
        raise CheckpointError(f"checkpoint state does not fit its config: {exc}") from exc
    return detector


def evaluate_detector(detector: Detector, episodes: Sequence[Episode],
                      tau: Optional[float] = None, kappa: Optional[float] = None,
                      fusion_enabled: Optional[bool] = None) -> EvalResult:
    """Episode-level inference followed by AP evaluation against episode ground truth."""
    if not episodes:
        raise ConfigError("evaluate_detector needs at least one episode")
    records, _ = detector.infer_videos(episodes, tau=tau, kappa=kappa,
                                       fusion_enabled=fusion_enabled)
    ground_truth = [rec for ep in episodes for rec in ep.ground_truth()]
    categories = sorted({c for ep in episodes for c in ep.categories})
    return evaluate(records, ground_truth, categories)

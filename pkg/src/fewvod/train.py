"""Episodic training: one optimizer step per video, sequential and seeded.

The loop is single-threaded and deterministic for a fixed seed: episode order
is shuffled with a seeded random.Random, prototypes are re-encoded inside
every step (so gradients reach the encoder through the support path as well),
and the metrics log contains no timing, making reruns byte-identical.
"""

from __future__ import annotations

import json
import math
import os
import random
import time
from dataclasses import dataclass
from typing import Optional, Sequence

import torch
from torch import Tensor

from .config import RunConfig, save_config
from .data import Dataset, Episode
from .detector import Detector, evaluate_detector, save_detector
from .encoder import FrameEmbeddings
from .errors import ConfigError, DataError, NumericError
from .geometry import box_corners_to_cxcywh
from .losses import video_loss
from .records import DetectionRecord


def frame_gt_tensors(annotations: Sequence[DetectionRecord], frame: int,
                     categories: Sequence[str], dtype: torch.dtype = torch.float64
                     ) -> tuple[Tensor, Tensor]:
    """(boxes [M,4] center-size, category indices [M]) for one frame's ground truth."""
    cat_index = {c: i for i, c in enumerate(categories)}
    rows = [rec for rec in annotations if rec.frame == frame]
    if not rows:
        return torch.zeros(0, 4, dtype=dtype), torch.zeros(0, dtype=torch.long)
    corners = torch.tensor([rec.box for rec in rows], dtype=dtype)
    cats = torch.tensor([cat_index[rec.category] for rec in rows], dtype=torch.long)
    return box_corners_to_cxcywh(corners), cats


def objectness_targets(grid_shape: tuple[int, int], gt_corners: Tensor,
                       dtype: torch.dtype = torch.float64) -> Tensor:
    """Per-patch 0/1 labels: 1 iff the patch center falls inside any gt box."""
    rows, cols = grid_shape
    ys = (torch.arange(rows, dtype=dtype) + 0.5) / rows
    xs = (torch.arange(cols, dtype=dtype) + 0.5) / cols
    gy, gx = torch.meshgrid(ys, xs, indexing="ij")
    gx = gx.reshape(-1, 1)
    gy = gy.reshape(-1, 1)
    if gt_corners.shape[0] == 0:
        return torch.zeros(rows * cols, dtype=dtype)
    x1, y1, x2, y2 = gt_corners.unbind(-1)
    inside = (gx >= x1) & (gx <= x2) & (gy >= y1) & (gy <= y2)
    return inside.any(dim=1).to(dtype)


def objectness_video_loss(embeddings: Sequence[FrameEmbeddings],
                          annotations: Sequence[DetectionRecord]) -> Tensor:
    """Sum over frames of mean binary cross-entropy on patch occupancy."""
    total = None
    for t, fe in enumerate(embeddings):
        gt = [rec for rec in annotations if rec.frame == t]
        corners = torch.tensor([rec.box for rec in gt], dtype=fe.objectness.dtype) \
            if gt else torch.zeros(0, 4, dtype=fe.objectness.dtype)
        targets = objectness_targets(fe.grid_shape, corners, dtype=fe.objectness.dtype)
        bce = torch.nn.functional.binary_cross_entropy(fe.objectness, targets)
        total = bce if total is None else total + bce
    if total is None:
        raise NumericError("objectness loss over zero frames")
    return total


@dataclass
class TrainResult:
    metrics: list[dict]
    best_epoch: Optional[int]
    best_val_ap50: float
    best_checkpoint: str
    last_checkpoint: str
    metrics_path: str


def _write_metrics(path: str, entries: list[dict]) -> None:
    tmp = path + ".tmp"
    with open(tmp, "w") as f:
        for entry in entries:
            f.write(json.dumps(entry, sort_keys=True) + "\n")
    os.replace(tmp, path)


def _dump_failure(out_dir: str, info: dict) -> str:
    path = os.path.join(out_dir, "failure_dump.json")
    with open(path, "w") as f:
        json.dump(info, f, indent=1, sort_keys=True, default=str)
    return path


def _cosine_warmup_factor(step: int, total_steps: int, warmup_steps: int) -> float:
    if step < warmup_steps:
        return (step + 1) / warmup_steps
    progress = (step - warmup_steps) / max(1, total_steps - warmup_steps)
    return 0.5 * (1.0 + math.cos(math.pi * min(progress, 1.0)))


def train(config: RunConfig, dataset: Dataset, out_dir: str, force: bool = False,
          quiet: bool = False) -> TrainResult:
    """Train a fresh Detector on the dataset's train episodes.

    Per epoch the novel (or train, per optim.eval_split) episodes are scored
    with AP50 and the best checkpoint is kept. Non-finite losses abort with a
    diagnostic dump and NumericError.
    """
    config.validate()
    torch.set_num_threads(1)
    os.makedirs(out_dir, exist_ok=True)
    metrics_path = os.path.join(out_dir, "metrics.jsonl")
    if os.path.exists(metrics_path) and not force:
        raise DataError(f"training output already exists at {out_dir}; pass force to overwrite")

    train_episodes = dataset.by_split("train")
    if not train_episodes:
        raise DataError("dataset has no train episodes")
    eval_episodes = dataset.by_split(config.optim.eval_split) or train_episodes

    detector = Detector(config)
    save_config(config, os.path.join(out_dir, "config.yaml"))
    best_path = os.path.join(out_dir, "best.pt")
    last_path = os.path.join(out_dir, "last.pt")

    opt = torch.optim.AdamW(detector.parameters(), lr=config.optim.learning_rate,
                            weight_decay=config.optim.weight_decay)
    steps_per_epoch = sum(len(ep.videos) for ep in train_episodes)
    total_steps = max(1, config.optim.epochs * steps_per_epoch)
    warmup_steps = max(1, int(round(config.optim.warmup_fraction * total_steps)))

    loss_cfg = config.loss.to_loss_config()
    rng = random.Random(config.seed)
    entries: list[dict] = []
    best_ap50 = -1.0
    best_epoch: Optional[int] = None
    step = 0

    save_detector(detector, last_path)
    if config.optim.epochs == 0:
        save_detector(detector, best_path)
        _write_metrics(metrics_path, entries)
        return TrainResult(metrics=entries, best_epoch=None, best_val_ap50=0.0,
                           best_checkpoint=best_path, last_checkpoint=last_path,
                           metrics_path=metrics_path)

    for epoch in range(config.optim.epochs):
        t0 = time.monotonic()
        order = list(range(len(train_episodes)))
        rng.shuffle(order)
        detector.train()
        epoch_losses: list[float] = []
        for ep_idx in order:
            episode = train_episodes[ep_idx]
            support = episode.support_by_category()
            for video in episode.videos:
                factor = _cosine_warmup_factor(step, total_steps, warmup_steps)
                for group in opt.param_groups:
                    group["lr"] = config.optim.learning_rate * factor
                opt.zero_grad()
                prototypes = detector.encode_support(support)
                result, embeddings = detector.forward_video(video.frames, prototypes)
                num_frames = len(result.frames)
                frame_gts = [frame_gt_tensors(video.annotations, t, episode.categories)
                             for t in range(num_frames)]
                try:
                    loss, breakdowns = video_loss(result.head_outputs, frame_gts, loss_cfg)
                    if config.loss.objectness_enabled:
                        loss = loss + config.loss.objectness_weight * \
                            objectness_video_loss(embeddings, video.annotations)
                    if not torch.isfinite(loss):
                        raise NumericError(f"non-finite loss {loss.item()}")
                except NumericError as exc:
                    dump = _dump_failure(out_dir, {
                        "episode": episode.name, "video": video.name, "epoch": epoch,
                        "step": step, "error": str(exc),
                        "max_prob": float(result.frames[0].outputs.probs.max()) if result.frames else None,
                    })
                    raise NumericError(f"{exc} (diagnostics in {dump})") from exc
                loss.backward()
                torch.nn.utils.clip_grad_norm_(detector.parameters(), config.optim.grad_clip)
                opt.step()
                step += 1
                epoch_losses.append(loss.item())

        val = evaluate_detector(detector, eval_episodes)
        entry = {
            "epoch": epoch,
            "train_loss": sum(epoch_losses) / len(epoch_losses),
            "val_ap": val.ap,
            "val_ap50": val.ap50,
            "val_ap75": val.ap75,
            "lr": opt.param_groups[0]["lr"],
            "steps": step,
        }
        entries.append(entry)
        _write_metrics(metrics_path, entries)
        save_detector(detector, last_path)
        if val.ap50 > best_ap50:
            best_ap50 = val.ap50
            best_epoch = epoch
            save_detector(detector, best_path)
        if not quiet:
            print(f"epoch {epoch}: loss {entry['train_loss']:.4f} "
                  f"val_ap50 {val.ap50:.4f} ({time.monotonic() - t0:.1f}s)")

    return TrainResult(metrics=entries, best_epoch=best_epoch, best_val_ap50=best_ap50,
                       best_checkpoint=best_path, last_checkpoint=last_path,
                       metrics_path=metrics_path)

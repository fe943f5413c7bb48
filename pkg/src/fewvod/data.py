"""Synthetic few-shot video episodes: moving textured shapes with occlusion.

Categories are shape x texture combinations (5 shapes, 4 textures, 20
categories) split into 12 training and 8 novel categories; the novel split
holds the two shapes most confusable with each other. Objects move along
horizontal lanes (one object per lane, so objects never overlap each other),
with linear or sinusoidal x-motion and a sinusoidal size curve. Occluder bars
cover an object's full x-range for a scheduled frame window; ground-truth
boxes always bound the full unoccluded mask, and each annotation carries the
visible pixel fraction.

All sampling is driven by numpy Generators seeded per episode, so generation
is reproducible and parallelizable across episodes.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np
from matplotlib.path import Path as PolygonPath
from PIL import Image

from .errors import ConfigError, DataError
from .records import DetectionRecord, read_records, write_records

SHAPES = ("circle", "square", "triangle", "cross", "star")
TEXTURES = ("solid", "striped", "dotted", "checker")
TRAIN_SHAPES = ("circle", "square", "triangle")
NOVEL_SHAPES = ("cross", "star")

BACKGROUND_COLOR = (40, 40, 40)
OCCLUDER_COLOR = (128, 128, 128)
# (primary, secondary) colors per texture; shapes sharing a texture share colors,
# which keeps same-texture categories distinguishable only by shape.
TEXTURE_COLORS = {
    "solid": ((220, 60, 60), (220, 60, 60)),
    "striped": ((60, 160, 220), (235, 235, 90)),
    "dotted": ((230, 230, 230), (60, 130, 60)),
    "checker": ((210, 120, 50), (100, 60, 140)),
}

SCHEMA_VERSION = 1


def category_name(shape: str, texture: str) -> str:
    return f"{shape}_{texture}"


def all_categories() -> list[str]:
    return [category_name(s, t) for s in SHAPES for t in TEXTURES]


def category_split() -> tuple[list[str], list[str]]:
    """(train categories, novel categories); the sets are disjoint by shape."""
    train = [category_name(s, t) for s in TRAIN_SHAPES for t in TEXTURES]
    novel = [category_name(s, t) for s in NOVEL_SHAPES for t in TEXTURES]
    return train, novel


def split_category(category: str) -> tuple[str, str]:
    shape, _, texture = category.partition("_")
    if shape not in SHAPES or texture not in TEXTURES:
        raise DataError(f"unknown category {category!r}")
    return shape, texture


# ---------------------------------------------------------------------------
# Rendering
# ---------------------------------------------------------------------------

def _star_vertices(cx: float, cy: float, outer: float, inner: float,
                   points: int = 5) -> list[tuple[float, float]]:
    verts = []
    for k in range(2 * points):
        r = outer if k % 2 == 0 else inner
        ang = -math.pi / 2 + k * math.pi / points
        verts.append((cx + r * math.cos(ang), cy + r * math.sin(ang)))
    return verts


def shape_mask(shape: str, canvas: int, cx: float, cy: float, size: float) -> np.ndarray:
    """Boolean canvas mask of a shape centered at (cx, cy) with bbox width `size`."""
    ys, xs = np.mgrid[0:canvas, 0:canvas]
    px = xs + 0.5
    py = ys + 0.5
    half = size / 2
    if shape == "circle":
        return (px - cx) ** 2 + (py - cy) ** 2 <= half ** 2
    if shape == "square":
        return (np.abs(px - cx) <= half) & (np.abs(py - cy) <= half)
    if shape == "cross":
        bar = 0.34 * half
        horizontal = (np.abs(px - cx) <= half) & (np.abs(py - cy) <= bar)
        vertical = (np.abs(px - cx) <= bar) & (np.abs(py - cy) <= half)
        return horizontal | vertical
    if shape == "triangle":
        verts = [(cx, cy - half), (cx - half, cy + half), (cx + half, cy + half)]
    elif shape == "star":
        verts = _star_vertices(cx, cy, half, 0.45 * half)
    else:
        raise DataError(f"unknown shape {shape!r}")
    pts = np.stack([px.ravel(), py.ravel()], axis=1)
    return PolygonPath(verts).contains_points(pts).reshape(canvas, canvas)


def apply_texture(frame: np.ndarray, mask: np.ndarray, texture: str) -> None:
    """Paint masked pixels; pattern coordinates are relative to the mask bbox,
    so the texture travels with the object instead of sliding through it."""
    color_a, color_b = TEXTURE_COLORS[texture]
    ys, xs = np.nonzero(mask)
    if len(ys) == 0:
        raise DataError("degenerate object mask: nothing to texture")
    local_y = ys - ys.min()
    local_x = xs - xs.min()
    if texture == "solid":
        choose_a = np.ones(len(ys), dtype=bool)
    elif texture == "striped":
        choose_a = (local_x // 3) % 2 == 0
    elif texture == "dotted":
        choose_a = (local_x % 4 < 2) & (local_y % 4 < 2)
    elif texture == "checker":
        choose_a = (local_x // 3 + local_y // 3) % 2 == 0
    else:
        raise DataError(f"unknown texture {texture!r}")
    frame[ys[choose_a], xs[choose_a]] = color_a
    frame[ys[~choose_a], xs[~choose_a]] = color_b


def mask_bbox_normalized(mask: np.ndarray) -> tuple[float, float, float, float]:
    """Tight corner box of a boolean mask, normalized by the canvas size."""
    ys, xs = np.nonzero(mask)
    if len(ys) == 0:
        raise DataError("degenerate object mask: empty bounding box")
    h, w = mask.shape
    return (xs.min() / w, ys.min() / h, (xs.max() + 1) / w, (ys.max() + 1) / h)


# ---------------------------------------------------------------------------
# Scene sampling
# ---------------------------------------------------------------------------

@dataclass
class ObjectTrack:
    """One object's category and per-frame geometry."""

    category: str
    centers: np.ndarray  # [T, 2] float (cx, cy) in pixels
    sizes: np.ndarray    # [T] float bbox width in pixels


@dataclass
class OccluderEvent:
    """A static bar covering [x0, x1) x [y0, y1) during frames [t_start, t_end)."""

    x0: int
    x1: int
    y0: int
    y1: int
    t_start: int
    t_end: int

    def active(self, t: int) -> bool:
        return self.t_start <= t < self.t_end


@dataclass
class GeneratorConfig:
    canvas_size: int = 64
    n_way: int = 3
    k_shot: int = 2
    num_frames: int = 8
    videos_per_episode: int = 2
    objects_per_video: int = 3
    num_train_episodes: int = 20
    num_eval_episodes: int = 10
    occluder_prob: float = 0.5
    occluder_len: int = 3
    min_size: float = 10.0
    max_size: float = 16.0
    scale_amplitude: float = 0.15
    seed: int = 0

    def validate(self) -> None:
        if self.canvas_size < 16:
            raise ConfigError("canvas_size must be >= 16")
        if self.n_way < 1 or self.k_shot < 1 or self.num_frames < 1:
            raise ConfigError("n_way, k_shot, num_frames must all be >= 1")
        if self.objects_per_video < 1 or self.videos_per_episode < 1:
            raise ConfigError("objects_per_video and videos_per_episode must be >= 1")
        if not (2.0 <= self.min_size <= self.max_size <= self.canvas_size / 2):
            raise ConfigError(
                f"sizes must satisfy 2 <= min <= max <= canvas/2, got "
                f"[{self.min_size}, {self.max_size}] on canvas {self.canvas_size}")
        if not 0.0 <= self.occluder_prob <= 1.0:
            raise ConfigError("occluder_prob must be in [0, 1]")


def sample_track(rng: np.random.Generator, cfg: GeneratorConfig, category: str,
                 lane_y: float) -> ObjectTrack:
    t = np.arange(cfg.num_frames, dtype=np.float64)
    base = rng.uniform(cfg.min_size, cfg.max_size)
    amp = rng.uniform(0.0, cfg.scale_amplitude)
    phase = rng.uniform(0, 2 * math.pi)
    period = cfg.num_frames * rng.uniform(1.0, 2.0)
    sizes = base * (1 + amp * np.sin(2 * math.pi * t / period + phase))

    margin = sizes.max() / 2 + 1.0
    lo, hi = margin, cfg.canvas_size - margin
    if rng.random() < 0.5:
        x0 = rng.uniform(lo, hi)
        span = max(cfg.num_frames - 1, 1)
        x1 = np.clip(x0 + rng.uniform(-cfg.num_frames, cfg.num_frames), lo, hi)
        x = x0 + (x1 - x0) * t / span
    else:
        amp_x = rng.uniform(3.0, 6.0)
        cx0 = rng.uniform(lo + amp_x, max(hi - amp_x, lo + amp_x))
        period_x = cfg.num_frames * rng.uniform(1.2, 2.0)
        phase_x = rng.uniform(0, 2 * math.pi)
        x = cx0 + amp_x * np.sin(2 * math.pi * t / period_x + phase_x)
    x = np.clip(x, lo, hi)
    centers = np.stack([x, np.full_like(x, lane_y)], axis=1)
    return ObjectTrack(category=category, centers=centers, sizes=sizes)


def sample_occluder(rng: np.random.Generator, cfg: GeneratorConfig,
                    track: ObjectTrack, lane_half: float) -> OccluderEvent:
    """Bar covering the object's full x-extent for a window of frames.

    Windows start at frame 2 or later so the first frames always provide an
    unoccluded view for feature propagation.
    """
    length = min(cfg.occluder_len, cfg.num_frames - 2)
    t0 = int(rng.integers(2, cfg.num_frames - length + 1))
    window = slice(t0, t0 + length)
    xs = track.centers[window, 0]
    half = track.sizes[window].max() / 2
    x0 = int(np.floor(xs.min() - half - 1))
    x1 = int(np.ceil(xs.max() + half + 1))
    lane_y = track.centers[0, 1]
    y0 = int(np.floor(lane_y - lane_half))
    y1 = int(np.ceil(lane_y + lane_half))
    c = cfg.canvas_size
    return OccluderEvent(x0=max(x0, 0), x1=min(x1, c), y0=max(y0, 0), y1=min(y1, c),
                         t_start=t0, t_end=t0 + length)


def render_video(tracks: Sequence[ObjectTrack], events: Sequence[OccluderEvent],
                 cfg: GeneratorConfig, video_name: str
                 ) -> tuple[np.ndarray, list[DetectionRecord]]:
    """Render frames and exact annotations for sampled tracks and occluders."""
    c = cfg.canvas_size
    t_total = cfg.num_frames
    frames = np.empty((t_total, c, c, 3), dtype=np.uint8)
    annotations: list[DetectionRecord] = []
    for t in range(t_total):
        frame = np.empty((c, c, 3), dtype=np.uint8)
        frame[:] = BACKGROUND_COLOR
        occluded = np.zeros((c, c), dtype=bool)
        for ev in events:
            if ev.active(t):
                occluded[ev.y0:ev.y1, ev.x0:ev.x1] = True
        for track in tracks:
            shape, texture = split_category(track.category)
            cx, cy = track.centers[t]
            mask = shape_mask(shape, c, cx, cy, track.sizes[t])
            apply_texture(frame, mask, texture)
            total = int(mask.sum())
            visible = int((mask & ~occluded).sum()) / total
            annotations.append(DetectionRecord(
                video=video_name, frame=t, category=track.category,
                box=mask_bbox_normalized(mask), visible=visible,
            ))
        for ev in events:
            if ev.active(t):
                frame[ev.y0:ev.y1, ev.x0:ev.x1] = OCCLUDER_COLOR
        frames[t] = frame
    return frames, annotations


def render_support_image(rng: np.random.Generator, cfg: GeneratorConfig,
                         category: str) -> np.ndarray:
    """A single unoccluded object near the canvas center."""
    c = cfg.canvas_size
    shape, texture = split_category(category)
    size = rng.uniform(max(cfg.min_size, cfg.max_size - 4), cfg.max_size)
    jitter = min(4.0, c / 2 - size / 2 - 1)
    cx = c / 2 + rng.uniform(-jitter, jitter)
    cy = c / 2 + rng.uniform(-jitter, jitter)
    frame = np.empty((c, c, 3), dtype=np.uint8)
    frame[:] = BACKGROUND_COLOR
    apply_texture(frame, shape_mask(shape, c, cx, cy, size), texture)
    return frame


# ---------------------------------------------------------------------------
# Episodes and datasets
# ---------------------------------------------------------------------------

@dataclass
class SupportImage:
    category: str
    image: np.ndarray  # [H, W, 3] uint8


@dataclass
class VideoSample:
    name: str
    frames: np.ndarray  # [T, H, W, 3] uint8
    annotations: list[DetectionRecord]


@dataclass
class Episode:
    name: str
    split: str  # "train" or "novel"
    categories: list[str]  # the N episode categories, fixed order
    k_shot: int
    support: list[SupportImage]
    videos: list[VideoSample]

    def support_by_category(self) -> dict[str, list[np.ndarray]]:
        grouped: dict[str, list[np.ndarray]] = {c: [] for c in self.categories}
        for s in self.support:
            grouped[s.category].append(s.image)
        return grouped

    def ground_truth(self) -> list[DetectionRecord]:
        return [rec for v in self.videos for rec in v.annotations]


def generate_episode(cfg: GeneratorConfig, pool: Sequence[str], seed: int,
                     name: str, split: str) -> Episode:
    """One N-way K-shot episode with `videos_per_episode` target videos."""
    cfg.validate()
    if cfg.n_way > len(pool):
        raise ConfigError(f"n_way {cfg.n_way} exceeds category pool of {len(pool)}")
    rng = np.random.default_rng(seed)
    categories = [pool[i] for i in rng.choice(len(pool), size=cfg.n_way, replace=False)]

    support = [SupportImage(category=cat, image=render_support_image(rng, cfg, cat))
               for cat in categories for _ in range(cfg.k_shot)]

    n_objects = min(cfg.objects_per_video, cfg.n_way)
    lane_height = cfg.canvas_size / n_objects
    lane_half = lane_height / 2
    videos = []
    for v in range(cfg.videos_per_episode):
        video_name = f"{name}/v{v:03d}"
        chosen = [categories[i] for i in rng.choice(cfg.n_way, size=n_objects, replace=False)]
        tracks = [sample_track(rng, cfg, cat, lane_y=(i + 0.5) * lane_height)
                  for i, cat in enumerate(chosen)]
        events = [sample_occluder(rng, cfg, tr, lane_half) for tr in tracks
                  if cfg.num_frames >= 4 and rng.random() < cfg.occluder_prob]
        frames, annotations = render_video(tracks, events, cfg, video_name)
        videos.append(VideoSample(name=video_name, frames=frames, annotations=annotations))
    return Episode(name=name, split=split, categories=categories,
                   k_shot=cfg.k_shot, support=support, videos=videos)


@dataclass
class Dataset:
    seed: int
    train_categories: list[str]
    novel_categories: list[str]
    episodes: list[Episode]

    def by_split(self, split: str) -> list[Episode]:
        return [e for e in self.episodes if e.split == split]


def generate_dataset(cfg: GeneratorConfig) -> Dataset:
    """Training episodes from the train split, eval episodes from the novel split."""
    cfg.validate()
    train_pool, novel_pool = category_split()
    episodes = []
    for i in range(cfg.num_train_episodes):
        episodes.append(generate_episode(
            cfg, train_pool, seed=cfg.seed + i, name=f"train_{i:04d}", split="train"))
    for i in range(cfg.num_eval_episodes):
        episodes.append(generate_episode(
            cfg, novel_pool, seed=cfg.seed + 50_000 + i, name=f"novel_{i:04d}", split="novel"))
    return Dataset(seed=cfg.seed, train_categories=train_pool,
                   novel_categories=novel_pool, episodes=episodes)


# ---------------------------------------------------------------------------
# Disk format: manifest.json + per-episode directories
# ---------------------------------------------------------------------------

def _save_png(path: str, array: np.ndarray) -> None:
    Image.fromarray(array).save(path)


def _load_png(path: str) -> np.ndarray:
    try:
        with Image.open(path) as img:
            return np.array(img.convert("RGB"))
    except OSError as exc:
        raise DataError(f"cannot read image {path}: {exc}") from exc


def write_dataset(dataset: Dataset, root: str, force: bool = False) -> None:
    """Write manifest + per-episode directories (frames, support, annotations)."""
    manifest_path = os.path.join(root, "manifest.json")
    if os.path.exists(manifest_path) and not force:
        raise DataError(f"dataset already exists at {root}; pass force to overwrite")
    os.makedirs(root, exist_ok=True)
    entries = []
    for ep in dataset.episodes:
        ep_dir = os.path.join(root, "episodes", ep.name)
        support_dir = os.path.join(ep_dir, "support")
        os.makedirs(support_dir, exist_ok=True)
        support_entries = []
        for i, s in enumerate(ep.support):
            rel = f"support/s{i:02d}_{s.category}.png"
            _save_png(os.path.join(ep_dir, rel), s.image)
            support_entries.append({"image": rel, "category": s.category})
        video_entries = []
        for v in ep.videos:
            vdir_rel = os.path.join("videos", v.name.split("/")[-1])
            vdir = os.path.join(ep_dir, vdir_rel)
            os.makedirs(vdir, exist_ok=True)
            for t in range(v.frames.shape[0]):
                _save_png(os.path.join(vdir, f"frame_{t:03d}.png"), v.frames[t])
            video_entries.append({"name": v.name, "dir": vdir_rel,
                                  "num_frames": int(v.frames.shape[0])})
        write_records(os.path.join(ep_dir, "annotations.jsonl"), ep.ground_truth())
        episode_meta = {
            "name": ep.name, "split": ep.split, "categories": ep.categories,
            "k_shot": ep.k_shot, "support": support_entries, "videos": video_entries,
        }
        with open(os.path.join(ep_dir, "episode.json"), "w") as f:
            json.dump(episode_meta, f, indent=1, sort_keys=True)
        entries.append({"name": ep.name, "split": ep.split, "categories": ep.categories,
                        "k_shot": ep.k_shot, "num_videos": len(ep.videos),
                        "path": os.path.join("episodes", ep.name)})
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "seed": dataset.seed,
        "train_categories": dataset.train_categories,
        "novel_categories": dataset.novel_categories,
        "episodes": entries,
    }
    tmp = manifest_path + ".tmp"
    with open(tmp, "w") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)
    os.replace(tmp, manifest_path)


def _require(mapping: dict, key: str, context: str):
    if key not in mapping:
        raise DataError(f"{context}: missing key {key!r}")
    return mapping[key]


def read_episode(root: str, entry_path: str) -> Episode:
    ep_dir = os.path.join(root, entry_path)
    meta_path = os.path.join(ep_dir, "episode.json")
    try:
        with open(meta_path) as f:
            meta = json.load(f)
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read episode metadata {meta_path}: {exc}") from exc
    support = [SupportImage(category=s["category"],
                            image=_load_png(os.path.join(ep_dir, s["image"])))
               for s in _require(meta, "support", meta_path)]
    annotations = read_records(os.path.join(ep_dir, "annotations.jsonl"))
    by_video: dict[str, list[DetectionRecord]] = {}
    for rec in annotations:
        by_video.setdefault(rec.video, []).append(rec)
    videos = []
    for v in _require(meta, "videos", meta_path):
        vdir = os.path.join(ep_dir, v["dir"])
        frames = [_load_png(os.path.join(vdir, f"frame_{t:03d}.png"))
                  for t in range(v["num_frames"])]
        videos.append(VideoSample(name=v["name"], frames=np.stack(frames),
                                  annotations=by_video.get(v["name"], [])))
    return Episode(name=meta["name"], split=meta["split"], categories=meta["categories"],
                   k_shot=meta["k_shot"], support=support, videos=videos)


def read_dataset(root: str) -> Dataset:
    manifest_path = os.path.join(root, "manifest.json")
    try:
        with open(manifest_path) as f:
            manifest = json.load(f)
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read dataset manifest {manifest_path}: {exc}") from exc
    version = manifest.get("schema_version")
    if version != SCHEMA_VERSION:
        raise DataError(f"unsupported dataset schema version {version!r}")
    episodes = [read_episode(root, e["path"]) for e in _require(manifest, "episodes", manifest_path)]
    return Dataset(
        seed=manifest.get("seed", 0),
        train_categories=_require(manifest, "train_categories", manifest_path),
        novel_categories=_require(manifest, "novel_categories", manifest_path),
        episodes=episodes,
    )

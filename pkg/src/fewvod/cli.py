"""Command-line entry points: generate, train, infer, eval, sweep, ablate, errors.

Exit codes: 0 success, 2 configuration error, 3 data/schema error, 4 numeric
failure. Commands that write refuse to overwrite existing outputs unless
--force is given. Relative output paths are resolved against the
FEWVOD_OUTPUT_ROOT environment variable when it is set.
"""

from __future__ import annotations

import argparse
import glob
import json
import os
import sys
from typing import Optional, Sequence

import numpy as np

from .config import apply_overrides, default_config, load_config
from .data import Dataset, read_dataset
from .detector import Detector, load_detector
from .errors import ConfigError, DataError, NumericError
from .evaluation import (BG_THR, FG_THR, ablation_fusion, error_types, evaluate,
                         threshold_sweep)
from .records import read_records, write_records

DEFAULT_SWEEP_TAUS = (0.70, 0.78, 0.86, 0.90, 0.94, 0.98)


def _out_path(path: str) -> str:
    root = os.environ.get("FEWVOD_OUTPUT_ROOT")
    if root and not os.path.isabs(path):
        return os.path.join(root, path)
    return path


def _refuse_overwrite(path: str, force: bool) -> None:
    if os.path.exists(path) and not force:
        raise DataError(f"output {path} exists; pass --force to overwrite")


def _build_config(args):
    cfg = load_config(args.config) if args.config else default_config()
    return apply_overrides(cfg, args.set or [])


def _write_json(path: str, payload: dict, force: bool) -> None:
    _refuse_overwrite(path, force)
    tmp = path + ".tmp"
    with open(tmp, "w") as f:
        json.dump(payload, f, indent=1, sort_keys=True)
        f.write("\n")
    os.replace(tmp, path)


def _load_episodes(data_dir: str, split: str) -> tuple[Dataset, list]:
    dataset = read_dataset(data_dir)
    episodes = dataset.by_split(split)
    if not episodes:
        raise DataError(f"dataset {data_dir} has no '{split}' episodes")
    return dataset, episodes


def _print_eval(result) -> None:
    print(f"AP    {result.ap:.4f}")
    print(f"AP50  {result.ap50:.4f}")
    print(f"AP75  {result.ap75:.4f}")
    for cat, ap in sorted(result.per_class.items()):
        print(f"  {cat:<20s} AP {ap:.4f}  (gt {result.class_gt_counts[cat]})")


def cmd_generate(args) -> int:
    cfg = _build_config(args)
    out = _out_path(args.out)
    from .data import generate_dataset, write_dataset
    _refuse_overwrite(os.path.join(out, "manifest.json"), args.force)
    dataset = generate_dataset(cfg.data)
    write_dataset(dataset, out, force=args.force)
    train_n = len(dataset.by_split("train"))
    novel_n = len(dataset.by_split("novel"))
    print(f"wrote {train_n + novel_n} episodes ({train_n} train, {novel_n} novel) to {out}")
    print(f"categories: {len(dataset.train_categories)} train / {len(dataset.novel_categories)} novel")
    return 0


def cmd_train(args) -> int:
    cfg = _build_config(args)
    out = _out_path(args.out)
    from .train import train
    dataset = read_dataset(args.data)
    result = train(cfg, dataset, out, force=args.force)
    if result.best_epoch is None:
        print(f"saved initialization checkpoint to {result.last_checkpoint}")
    else:
        print(f"best epoch {result.best_epoch} val_ap50 {result.best_val_ap50:.4f}")
        print(f"checkpoints: {result.best_checkpoint} (best), {result.last_checkpoint} (last)")
    return 0


def _read_support_manifest(path: str) -> dict[str, list[np.ndarray]]:
    from .data import _load_png
    try:
        with open(path) as f:
            entries = json.load(f)
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read support manifest {path}: {exc}") from exc
    if isinstance(entries, dict):
        entries = entries.get("support", [])
    if not entries:
        raise ConfigError(f"support manifest {path} lists no images")
    base = os.path.dirname(os.path.abspath(path))
    images: dict[str, list[np.ndarray]] = {}
    for e in entries:
        if "image" not in e or "category" not in e:
            raise DataError(f"support manifest {path}: entries need image and category")
        images.setdefault(e["category"], []).append(_load_png(os.path.join(base, e["image"])))
    return images


def _read_video_frames(video_dir: str) -> np.ndarray:
    from .data import _load_png
    paths = sorted(glob.glob(os.path.join(video_dir, "*.png")))
    if not paths:
        raise DataError(f"no frames (*.png) found in {video_dir}")
    return np.stack([_load_png(p) for p in paths])


def cmd_infer(args) -> int:
    detector = load_detector(args.checkpoint)
    support = _read_support_manifest(args.support)
    frames = _read_video_frames(args.video)
    out = _out_path(args.out)
    _refuse_overwrite(out, args.force)
    prototypes = detector.encode_support_frozen(support)
    video_name = args.video_name or os.path.basename(os.path.normpath(args.video))
    records, result = detector.infer_video(
        frames, video_name, prototypes,
        tau=args.tau, kappa=args.kappa,
        fusion_enabled=False if args.no_fusion else None,
        nms_iou=args.nms_iou if args.nms_iou is not None else detector.config.heads.nms_iou)
    write_records(out, records)
    print(f"wrote {len(records)} detections over {len(result.frames)} frames to {out}")
    return 0


def cmd_eval(args) -> int:
    dets = read_records(args.detections)
    gts = read_records(args.ground_truth)
    categories = args.categories.split(",") if args.categories else None
    result = evaluate(dets, gts, categories)
    _print_eval(result)
    if args.out:
        _write_json(_out_path(args.out), result.as_dict(), args.force)
    return 0


def cmd_sweep(args) -> int:
    detector = load_detector(args.checkpoint)
    _, episodes = _load_episodes(args.data, args.split)
    taus = [float(t) for t in args.taus.split(",")] if args.taus else list(DEFAULT_SWEEP_TAUS)
    gts = [rec for ep in episodes for rec in ep.ground_truth()]
    categories = sorted({c for ep in episodes for c in ep.categories})
    points = threshold_sweep(detector, episodes, gts, taus, categories)

    print(f"{'tau':>6} {'AP':>8} {'AP50':>8} {'propagated/frame':>17} {'emitted/frame':>14}")
    for p in points:
        print(f"{p.tau:>6.2f} {p.ap:>8.4f} {p.ap50:>8.4f} "
              f"{p.mean_propagated_per_frame:>17.3f} {p.mean_emitted_per_frame:>14.3f}")
    if args.out:
        out_dir = _out_path(args.out)
        os.makedirs(out_dir, exist_ok=True)
        _write_json(os.path.join(out_dir, "sweep.json"),
                    {"points": [p.as_dict() for p in points]}, args.force)
        _plot_sweep(points, os.path.join(out_dir, "sweep.png"), args.force)
        print(f"wrote sweep.json and sweep.png to {out_dir}")
    return 0


def _plot_sweep(points, path: str, force: bool) -> None:
    _refuse_overwrite(path, force)
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    taus = [p.tau for p in points]
    fig, ax1 = plt.subplots(figsize=(5.0, 3.2))
    ax1.plot(taus, [p.ap for p in points], "o-", color="tab:blue", label="AP")
    ax1.set_xlabel("propagation threshold tau")
    ax1.set_ylabel("AP", color="tab:blue")
    ax2 = ax1.twinx()
    ax2.plot(taus, [p.mean_propagated_per_frame for p in points], "s--",
             color="tab:red", label="propagated/frame")
    ax2.set_ylabel("mean propagated per frame", color="tab:red")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def cmd_ablate(args) -> int:
    det_with = load_detector(args.with_checkpoint)
    det_without = load_detector(args.without_checkpoint)
    _, episodes = _load_episodes(args.data, args.split)
    gts = [rec for ep in episodes for rec in ep.ground_truth()]
    categories = sorted({c for ep in episodes for c in ep.categories})
    result = ablation_fusion(det_with, det_without, episodes, gts, categories)
    print("with fusion:")
    _print_eval(result.with_fusion)
    print("without fusion:")
    _print_eval(result.without_fusion)
    print(f"delta AP {result.delta_ap:+.4f}, delta AP50 {result.delta_ap50:+.4f}")
    if args.out:
        _write_json(_out_path(args.out), result.as_dict(), args.force)
    return 0


def cmd_errors(args) -> int:
    dets = read_records(args.detections)
    gts = read_records(args.ground_truth)
    breakdown = error_types(dets, gts, fg_thr=args.fg_thr, bg_thr=args.bg_thr)
    print(f"true positives: {breakdown.num_tp}, false positives: {breakdown.num_fp}, "
          f"missed: {breakdown.num_missed}")
    print(f"{'type':<16} {'count':>6} {'delta AP':>9}")
    for t, n in breakdown.counts.items():
        print(f"{t:<16} {n:>6} {breakdown.delta_ap[t]:>+9.4f}")
    if args.out:
        _write_json(_out_path(args.out), breakdown.as_dict(), args.force)
    return 0


def _add_config_args(p) -> None:
    p.add_argument("--config", help="YAML config file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override a config key, e.g. --set fusion.tau=0.9")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fewvod",
        description="Few-shot video object detection with temporal feature propagation")
    sub = parser.add_subparsers(dest="command")

    p = sub.add_parser("generate", help="generate a synthetic episode dataset")
    _add_config_args(p)
    p.add_argument("--out", required=True, help="dataset output directory")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train a detector on a generated dataset")
    _add_config_args(p)
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="run output directory")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="run detection over one video directory")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--support", required=True, help="support manifest JSON")
    p.add_argument("--video", required=True, help="directory of frame PNGs")
    p.add_argument("--out", required=True, help="detections JSONL output")
    p.add_argument("--video-name", help="video id used in records (default: dir name)")
    p.add_argument("--tau", type=float, help="propagation threshold override")
    p.add_argument("--kappa", type=float, help="detection threshold override")
    p.add_argument("--nms-iou", type=float, help="enable class-aware NMS at this IoU")
    p.add_argument("--no-fusion", action="store_true", help="disable temporal fusion")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="score detections against ground truth")
    p.add_argument("--detections", required=True)
    p.add_argument("--ground-truth", required=True)
    p.add_argument("--categories", help="comma-separated category vocabulary")
    p.add_argument("--out", help="write metrics JSON here")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="sweep the propagation threshold tau")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--split", default="novel", choices=["train", "novel"])
    p.add_argument("--taus", help="comma-separated tau values")
    p.add_argument("--out", help="directory for sweep.json and sweep.png")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("ablate", help="paired evaluation with fusion on vs off")
    p.add_argument("--with-checkpoint", required=True, dest="with_checkpoint")
    p.add_argument("--without-checkpoint", required=True, dest="without_checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="novel", choices=["train", "novel"])
    p.add_argument("--out", help="write paired metrics JSON here")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("errors", help="error-type analysis of detections")
    p.add_argument("--detections", required=True)
    p.add_argument("--ground-truth", required=True)
    p.add_argument("--fg-thr", type=float, default=FG_THR)
    p.add_argument("--bg-thr", type=float, default=BG_THR)
    p.add_argument("--out", help="write breakdown JSON here")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_errors)

    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if not getattr(args, "func", None):
        parser.print_help()
        return 2
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())

"""Line-delimited detection/annotation record schema shared across the pipeline.

One JSON object per line with keys:
    video       str, globally unique video id (e.g. "ep0003/v0")
    frame       int, 0-based frame index
    category    str, category name
    box         [x1, y1, x2, y2] corners normalized to the unit square
    confidence  float, detections only (ground truth omits it)
    visible     float in [0, 1], optional ground-truth visibility fraction

Detections and ground truth use the same schema; `confidence is None` marks a
ground-truth record.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

from .errors import DataError


@dataclass(frozen=True)
class DetectionRecord:
    video: str
    frame: int
    category: str
    box: tuple[float, float, float, float]
    confidence: Optional[float] = None
    visible: Optional[float] = None

    def frame_key(self) -> tuple[str, int]:
        return (self.video, self.frame)


def record_to_dict(rec: DetectionRecord) -> dict:
    d = {
        "video": rec.video,
        "frame": rec.frame,
        "category": rec.category,
        "box": list(rec.box),
    }
    if rec.confidence is not None:
        d["confidence"] = rec.confidence
    if rec.visible is not None:
        d["visible"] = rec.visible
    return d


def record_from_dict(d: dict) -> DetectionRecord:
    try:
        box = d["box"]
        if not isinstance(box, (list, tuple)) or len(box) != 4:
            raise DataError("box must hold exactly 4 numbers")
        return DetectionRecord(
            video=str(d["video"]),
            frame=int(d["frame"]),
            category=str(d["category"]),
            box=tuple(float(v) for v in box),
            confidence=None if d.get("confidence") is None else float(d["confidence"]),
            visible=None if d.get("visible") is None else float(d["visible"]),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"malformed record: {exc}") from exc


def write_records(path: str, records: Iterable[DetectionRecord]) -> None:
    """Write records as JSONL, atomically (write temp, then rename)."""
    tmp = f"{path}.tmp"
    with open(tmp, "w") as fh:
        for rec in records:
            fh.write(json.dumps(record_to_dict(rec), sort_keys=True))
            fh.write("\n")
    os.replace(tmp, path)


def read_records(path: str) -> list[DetectionRecord]:
    """Read a JSONL records file; schema violations report the line number."""
    records = []
    try:
        with open(path) as fh:
            lines = fh.readlines()
    except OSError as exc:
        raise DataError(f"cannot read records file {path}: {exc}") from exc
    for lineno, line in enumerate(lines, start=1):
        line = line.strip()
        if not line:
            continue
        try:
            records.append(record_from_dict(json.loads(line)))
        except (json.JSONDecodeError, DataError) as exc:
            raise DataError(f"{path}:{lineno}: {exc}") from exc
    return records


def group_by_frame(records: Sequence[DetectionRecord]) -> dict[tuple[str, int], list[DetectionRecord]]:
    grouped: dict[tuple[str, int], list[DetectionRecord]] = {}
    for rec in records:
        grouped.setdefault(rec.frame_key(), []).append(rec)
    return grouped

"""Read AU / head-pose streams written by external AU estimators.

The expected layout is the common per-frame CSV with intensity columns
``AU01_r`` ... ``AU45_r``, optional ``frame``, ``timestamp``, ``confidence``
and head rotation ``pose_Rx``, ``pose_Ry``, ``pose_Rz`` (radians).  Header
matching ignores case and surrounding whitespace.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .config import DataError
from .datagen import ACTION_UNITS, apply_table, minmax_table
from .neurocontrol import RANGE_RAD, HeadPoseTarget

log = logging.getLogger(__name__)

AU_COLUMNS = tuple(f"{a}_r" for a in ACTION_UNITS)
POSE_COLUMNS = ("pose_Rx", "pose_Ry", "pose_Rz")
RAW_SCALE = 5.0
LOW_CONFIDENCE = 0.5


@dataclass(frozen=True)
class AuFrame:
    index: int
    timestamp: float
    aus: np.ndarray  # (17,) in ACTION_UNITS order
    pose: np.ndarray  # (3,) rad about x, y, z
    confidence: float = 1.0

    @property
    def low_confidence(self) -> bool:
        return self.confidence < LOW_CONFIDENCE


def parse_au_csv(path: str | Path) -> list[AuFrame]:
    """Frames in file order.  Rows with unparseable numbers are skipped."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh, skipinitialspace=True)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file, header row expected") from None
        cols = {h.strip().lower(): k for k, h in enumerate(header)}
        missing = [c for c in AU_COLUMNS if c.lower() not in cols]
        if missing:
            raise DataError(f"{path}: missing AU column(s) {', '.join(missing)}")
        au_idx = [cols[c.lower()] for c in AU_COLUMNS]
        pose_idx = [cols.get(c.lower()) for c in POSE_COLUMNS]
        frame_idx = cols.get("frame")
        time_idx = cols.get("timestamp")
        conf_idx = cols.get("confidence")
        frames: list[AuFrame] = []
        for lineno, row in enumerate(reader, 2):
            if not row or all(not c.strip() for c in row):
                continue
            try:
                aus = np.array([float(row[k]) for k in au_idx])
                pose = np.array([0.0 if k is None else float(row[k]) for k in pose_idx])
                conf = 1.0 if conf_idx is None else float(row[conf_idx])
                index = len(frames) if frame_idx is None else int(float(row[frame_idx]))
                stamp = float(len(frames)) if time_idx is None else float(row[time_idx])
            except (ValueError, IndexError):
                log.warning("%s:%d: unparseable row skipped", path, lineno)
                continue
            if not (np.all(np.isfinite(aus)) and np.all(np.isfinite(pose)) and math.isfinite(conf)):
                log.warning("%s:%d: non-finite value, row skipped", path, lineno)
                continue
            if frames and stamp < frames[-1].timestamp:
                log.warning("%s:%d: timestamp goes backwards, row skipped", path, lineno)
                continue
            aus = np.maximum(aus, 0.0)
            frames.append(AuFrame(index, stamp, aus, pose, min(1.0, max(0.0, conf))))
    low = sum(f.low_confidence for f in frames)
    if low:
        log.warning("%s: %d frame(s) below confidence %.2f", path, low, LOW_CONFIDENCE)
    return frames


def write_au_csv(frames: Sequence[AuFrame], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["frame", "timestamp", "confidence", *POSE_COLUMNS, *AU_COLUMNS])
        for f in frames:
            w.writerow([f.index, f"{f.timestamp:.6g}", f"{f.confidence:.6g}",
                        *(f"{v:.6g}" for v in f.pose), *(f"{v:.6g}" for v in f.aus)])


def normalize_stream(frames: Sequence[AuFrame], table: np.ndarray | None = None) -> list[AuFrame]:
    """Map AU intensities to [0, 1].

    With a training ``table`` of per-AU (min, max) it is applied and clamped.
    Without one, a multi-frame sequence is min-max normalized per AU over its
    own frames and a single frame is divided by the raw scale (5).
    """
    if not frames:
        raise ValueError("at least one frame required")
    raw = np.array([f.aus for f in frames])
    if table is not None:
        norm = apply_table(raw, np.asarray(table, dtype=float))
    elif len(frames) == 1:
        norm = np.clip(raw / RAW_SCALE, 0.0, 1.0)
    else:
        norm = apply_table(raw, minmax_table(raw))
    return [replace(f, aus=norm[k]) for k, f in enumerate(frames)]


def head_pose_targets(frames: Sequence[AuFrame], limit: float = RANGE_RAD) -> list[HeadPoseTarget]:
    """pose_Rx/Ry/Rz -> pitch/yaw/roll, clamped to the controller range."""
    out = []
    for f in frames:
        p = np.asarray(f.pose, dtype=float)
        if np.any(np.abs(p) > limit):
            log.warning("frame %d: head pose %s beyond +-%.1f deg, clamped", f.index,
                        np.round(np.rad2deg(p), 1).tolist(), np.rad2deg(limit))
            p = np.clip(p, -limit, limit)
        out.append(HeadPoseTarget(float(p[0]), float(p[1]), float(p[2])))
    return out

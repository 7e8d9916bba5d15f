"""Turn activation sequences into scored temporal action instances.

Per class: min-max normalize the column, sweep a ladder of thresholds,
collect maximal runs of segments above each threshold, and score every run
by the contrast between its inner mean and the mean over flanking margins.
Greedy temporal NMS then prunes overlapping candidates per class.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .baseline import Cas
from .dataset import VideoFeatures
from .errors import ShapeError, ValidationError


@dataclass(frozen=True)
class ActionInstance:
    video_id: str
    class_index: int
    start_sec: float
    end_sec: float
    score: float


DEFAULT_THRESHOLDS = tuple(round(0.1 * i, 1) for i in range(1, 10))


@dataclass(frozen=True)
class LocalizeConfig:
    thresholds: tuple = DEFAULT_THRESHOLDS
    video_class_threshold: float = 0.1
    nms_tiou: float = 0.5
    outer_margin_fraction: float = 0.25


def _runs_at_or_above(values: np.ndarray, threshold: float):
    """Maximal runs of consecutive indices with values[i] >= threshold."""
    runs = []
    start = None
    for i, v in enumerate(values):
        if v >= threshold:
            if start is None:
                start = i
        elif start is not None:
            runs.append((start, i - 1))
            start = None
    if start is not None:
        runs.append((start, len(values) - 1))
    return runs


def extract_instances(cas: Cas, video: VideoFeatures, video_probs: np.ndarray,
                      cfg: LocalizeConfig):
    """All candidate instances pooled over thresholds, per admitted class.

    Candidate score = mean normalized activation inside the run minus the
    mean over the flanking margins (margin length ceil(fraction * run
    length) per side, clipped to the video; no flank segments -> 0).
    A constant column normalizes to all 0.5.
    """
    scores = cas.scores
    t, num_classes = scores.shape
    if cas.video_id != video.video_id:
        raise ShapeError(f"cas {cas.video_id!r} does not match video {video.video_id!r}")
    if t != video.num_segments or len(video_probs) != num_classes:
        raise ShapeError(
            f"cas {scores.shape} inconsistent with video T={video.num_segments} "
            f"or probs F={len(video_probs)}"
        )
    sps = video.seconds_per_segment
    out = []
    for f in range(num_classes):
        if video_probs[f] < cfg.video_class_threshold:
            continue
        column = scores[:, f]
        low, high = column.min(), column.max()
        if high - low <= 0.0:
            normalized = np.full(t, 0.5)
        else:
            normalized = (column - low) / (high - low)
        for threshold in cfg.thresholds:
            for start, end in _runs_at_or_above(normalized, threshold):
                run_len = end - start + 1
                margin = math.ceil(cfg.outer_margin_fraction * run_len)
                left = normalized[max(0, start - margin):start]
                right = normalized[end + 1:min(t, end + 1 + margin)]
                flank_total = len(left) + len(right)
                flank_mean = (
                    (left.sum() + right.sum()) / flank_total if flank_total else 0.0
                )
                score = float(normalized[start:end + 1].mean() - flank_mean)
                out.append(ActionInstance(
                    video.video_id, f, start * sps, (end + 1) * sps, score,
                ))
    return out


def _interval_tiou(a_start, a_end, b_start, b_end) -> float:
    inter = max(0.0, min(a_end, b_end) - max(a_start, b_start))
    union = (a_end - a_start) + (b_end - b_start) - inter
    return inter / union if union > 0 else 0.0


def nms(instances, nms_tiou: float):
    """Greedy per-class suppression; returns survivors sorted by score.

    Selection order (and the output order) is score descending, ties by
    earlier start, then class index, then end, so results are fully
    deterministic.
    """
    if not 0 < nms_tiou <= 1:
        raise ValidationError(f"nms_tiou must be in (0, 1], got {nms_tiou}")
    if len({inst.video_id for inst in instances}) > 1:
        raise ValidationError("nms expects instances from a single video")
    ordered = sorted(
        instances,
        key=lambda a: (-a.score, a.start_sec, a.class_index, a.end_sec),
    )
    kept = []
    for cand in ordered:
        suppressed = any(
            prev.class_index == cand.class_index
            and _interval_tiou(prev.start_sec, prev.end_sec,
                               cand.start_sec, cand.end_sec) >= nms_tiou
            for prev in kept
        )
        if not suppressed:
            kept.append(cand)
    return kept


def write_predictions(instances, path) -> None:
    """One `pred` line per instance, scores at 6 decimal places."""
    lines = [
        f"pred {p.video_id} {p.class_index} "
        f"{p.start_sec:.6f} {p.end_sec:.6f} {p.score:.6f}"
        for p in instances
    ]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + ("\n" if lines else ""))


def read_predictions(path):
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            stripped = line.strip()
            if not stripped or stripped.startswith("#"):
                continue
            parts = stripped.split()
            if len(parts) != 6 or parts[0] != "pred":
                raise ValidationError(f"{path}:{lineno}: malformed prediction line")
            out.append(ActionInstance(
                parts[1], int(parts[2]), float(parts[3]), float(parts[4]),
                float(parts[5]),
            ))
    return out

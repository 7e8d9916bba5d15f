"""Detection metrics: temporal IoU, per-class AP, mAP sweeps, error taxonomy.

AP follows the standard detection protocol: predictions are walked in
score order, each is a true positive when its best-overlapping unmatched
ground-truth instance (same class, same video) clears the IoU threshold,
and the precision envelope is interpolated from the bottom of the ranking
upward. Classes with neither ground truth nor predictions are excluded
from the mean rather than scored.

The false-positive taxonomy buckets the top-5G predictions (G = number of
ground-truth instances) into true positives, double detections,
background, cross-class confusion, and over-/incomplete localizations.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ValidationError

IOU_PRESETS = {
    "coarse": tuple(round(0.1 * i, 2) for i in range(1, 10)),
    "fine": tuple(round(0.5 + 0.05 * i, 2) for i in range(0, 10)),
}

ERROR_CATEGORIES = (
    "true_positive",
    "over_completeness",
    "incompleteness",
    "confusion",
    "background",
    "double_detection",
)


@dataclass(frozen=True)
class EvalResult:
    ap: dict                 # (class_index, iou_threshold) -> AP
    map_by_iou: dict         # iou_threshold -> mAP
    average_map: float
    iou_thresholds: tuple
    num_gt: int
    num_predictions: int


@dataclass(frozen=True)
class ErrorProfile:
    counts: dict             # category -> count over analyzed predictions
    quintile_percentages: tuple   # five dicts, category -> percentage
    num_analyzed: int


def tiou(a, b) -> float:
    """Temporal intersection-over-union of two (start, end) intervals."""
    a_start, a_end = float(a[0]), float(a[1])
    b_start, b_end = float(b[0]), float(b[1])
    if a_start >= a_end or b_start >= b_end:
        raise ValidationError(
            f"degenerate interval: [{a_start}, {a_end}] vs [{b_start}, {b_end}]"
        )
    inter = max(0.0, min(a_end, b_end) - max(a_start, b_start))
    union = (a_end - a_start) + (b_end - b_start) - inter
    return inter / union


def _score_order(predictions):
    return sorted(
        predictions,
        key=lambda p: (-p.score, p.start_sec, p.video_id, p.class_index, p.end_sec),
    )


def _match_class(preds_in_order, gts, iou_threshold):
    """Greedy score-order matching within one class.

    A prediction is a true positive when the best-IoU unmatched ground
    truth in its video reaches the threshold; that instance is then
    claimed. Ground truths are walked in a deterministic order so IoU ties
    resolve to the earliest instance.
    """
    gts = sorted(gts, key=lambda g: (g.video_id, g.start_sec, g.end_sec))
    matched = [False] * len(gts)
    tp_flags = []
    match_idx = []
    for pred in preds_in_order:
        best_iou = 0.0
        best_j = -1
        for j, gt in enumerate(gts):
            if matched[j] or gt.video_id != pred.video_id:
                continue
            overlap = tiou((pred.start_sec, pred.end_sec), (gt.start_sec, gt.end_sec))
            if overlap > best_iou:
                best_iou = overlap
                best_j = j
        if best_j >= 0 and best_iou >= iou_threshold:
            matched[best_j] = True
            tp_flags.append(True)
            match_idx.append(best_j)
        else:
            tp_flags.append(False)
            match_idx.append(-1)
    return tp_flags, match_idx


def average_precision(predictions, gts, iou_threshold: float):
    """AP for a single class; ``None`` when there is nothing to score.

    Interpolated precision, sequential accumulation over true-positive
    ranks so the result matches a naive reference bit for bit.
    """
    if not gts:
        return 0.0 if predictions else None
    ordered = _score_order(predictions)
    tp_flags, _ = _match_class(ordered, gts, iou_threshold)
    if not ordered:
        return 0.0
    tp_cum = np.cumsum([1.0 if f else 0.0 for f in tp_flags])
    ranks = np.arange(1, len(ordered) + 1, dtype=np.float64)
    precision = tp_cum / ranks
    interpolated = np.maximum.accumulate(precision[::-1])[::-1]
    ap = 0.0
    recall_step = 1.0 / len(gts)
    for i, flag in enumerate(tp_flags):
        if flag:
            ap += interpolated[i] * recall_step
    return float(ap)


def map_eval(predictions, gts, iou_thresholds) -> EvalResult:
    """AP per (class, threshold) and the resulting mAP summaries."""
    iou_thresholds = tuple(iou_thresholds)
    classes = sorted(
        {p.class_index for p in predictions} | {g.class_index for g in gts}
    )
    preds_by_class = {c: [p for p in predictions if p.class_index == c]
                      for c in classes}
    gts_by_class = {c: [g for g in gts if g.class_index == c] for c in classes}
    ap = {}
    map_by_iou = {}
    for threshold in iou_thresholds:
        values = []
        for c in classes:
            value = average_precision(preds_by_class[c], gts_by_class[c], threshold)
            if value is None:
                continue
            ap[(c, threshold)] = value
            values.append(value)
        map_by_iou[threshold] = float(np.mean(values)) if values else 0.0
    average_map = (
        float(np.mean([map_by_iou[t] for t in iou_thresholds]))
        if iou_thresholds else 0.0
    )
    return EvalResult(ap, map_by_iou, average_map, iou_thresholds,
                      len(gts), len(predictions))


def _one_sided_excess(p_start, p_end, g_start, g_end):
    before = max(0.0, g_start - p_start) + max(0.0, p_end - g_end)
    after = max(0.0, p_start - g_start) + max(0.0, g_end - p_end)
    return before, after   # |p \ g|, |g \ p|


def _categorize(pred, same_video_gts, matched_flags, is_tp, iou_threshold):
    if is_tp:
        return "true_positive"
    overlaps = [
        tiou((pred.start_sec, pred.end_sec), (g.start_sec, g.end_sec))
        for g in same_video_gts
    ]
    same_class = [
        (g, o, matched_flags[i])
        for i, (g, o) in enumerate(zip(same_video_gts, overlaps))
        if g.class_index == pred.class_index
    ]
    # (i) duplicate hit on an already-claimed instance of the same class
    if any(o >= iou_threshold and was_matched for _, o, was_matched in same_class):
        return "double_detection"
    # (ii) no overlap with any annotated instance at all
    if not overlaps or max(overlaps) == 0.0:
        return "background"
    # (iii) threshold-level overlap with a different class
    if any(
        o >= iou_threshold
        for g, o in zip(same_video_gts, overlaps)
        if g.class_index != pred.class_index
    ):
        return "confusion"
    # (iv) geometric mismatch against the best same-class instance; with no
    # same-class overlap the prediction sits on other classes' foreground.
    positive_same = [(g, o) for g, o, _ in same_class if o > 0.0]
    if not positive_same:
        return "confusion"
    best_gt, _ = max(positive_same, key=lambda item: (item[1], -item[0].start_sec))
    p_s, p_e = pred.start_sec, pred.end_sec
    g_s, g_e = best_gt.start_sec, best_gt.end_sec
    contains_gt = p_s <= g_s and p_e >= g_e and (p_s < g_s or p_e > g_e)
    inside_gt = g_s <= p_s and g_e >= p_e and (g_s < p_s or g_e > p_e)
    if contains_gt:
        return "over_completeness"
    if inside_gt:
        return "incompleteness"
    excess_pred, excess_gt = _one_sided_excess(p_s, p_e, g_s, g_e)
    return "over_completeness" if excess_pred >= excess_gt else "incompleteness"


def error_profile(predictions, gts, iou_threshold: float) -> ErrorProfile:
    """Categorize the top-5G predictions and report per-quintile shares."""
    if not gts:
        raise ValidationError("error profile requires at least one ground truth")
    budget = 5 * len(gts)
    analyzed = _score_order(predictions)[:budget]

    gts_by_video = {}
    for g in gts:
        gts_by_video.setdefault(g.video_id, []).append(g)
    for video_gts in gts_by_video.values():
        video_gts.sort(key=lambda g: (g.start_sec, g.end_sec, g.class_index))

    # Same greedy matching as AP, run per class over the analyzed prefix.
    matched = {}   # id(gt) -> True once claimed
    categories = []
    for pred in analyzed:
        video_gts = gts_by_video.get(pred.video_id, [])
        same_class_unmatched = [
            g for g in video_gts
            if g.class_index == pred.class_index and not matched.get(id(g))
        ]
        best_iou, best_gt = 0.0, None
        for g in same_class_unmatched:
            overlap = tiou((pred.start_sec, pred.end_sec), (g.start_sec, g.end_sec))
            if overlap > best_iou:
                best_iou, best_gt = overlap, g
        is_tp = best_gt is not None and best_iou >= iou_threshold
        if is_tp:
            matched[id(best_gt)] = True
        flags = [bool(matched.get(id(g))) for g in video_gts]
        categories.append(
            _categorize(pred, video_gts, flags, is_tp, iou_threshold)
        )

    counts = {c: 0 for c in ERROR_CATEGORIES}
    for cat in categories:
        counts[cat] += 1
    quintiles = []
    for chunk in np.array_split(np.array(categories, dtype=object), 5):
        if len(chunk) == 0:
            quintiles.append({c: 0.0 for c in ERROR_CATEGORIES})
            continue
        quintiles.append({
            c: 100.0 * float(np.sum(chunk == c)) / len(chunk)
            for c in ERROR_CATEGORIES
        })
    return ErrorProfile(counts, tuple(quintiles), len(analyzed))


def write_eval_text(result: EvalResult, path) -> None:
    """Human-readable class x threshold AP grid with a closing mAP row."""
    classes = sorted({c for c, _ in result.ap})
    header = "class    " + "  ".join(f"{t:>6.2f}" for t in result.iou_thresholds)
    lines = [header]
    for c in classes:
        cells = []
        for t in result.iou_thresholds:
            value = result.ap.get((c, t))
            cells.append(f"{value:6.4f}" if value is not None else "     -")
        lines.append(f"{c:<9d}" + "  ".join(cells))
    lines.append(
        "mAP      " + "  ".join(f"{result.map_by_iou[t]:6.4f}"
                                for t in result.iou_thresholds)
    )
    lines.append(f"average mAP {result.average_map:.4f} "
                 f"(gt {result.num_gt}, predictions {result.num_predictions})")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def write_eval_dat(result: EvalResult, path) -> None:
    """Machine-readable mirror of EvalResult (full-precision floats)."""
    lines = [
        f"num_gt {result.num_gt}",
        f"num_preds {result.num_predictions}",
        "thresholds " + ",".join(repr(t) for t in result.iou_thresholds),
    ]
    for (c, t), value in sorted(result.ap.items()):
        lines.append(f"ap {c} {t!r} {value!r}")
    for t in result.iou_thresholds:
        lines.append(f"map {t!r} {result.map_by_iou[t]!r}")
    lines.append(f"avg_map {result.average_map!r}")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def read_eval_dat(path) -> EvalResult:
    ap = {}
    map_by_iou = {}
    average_map = 0.0
    thresholds = ()
    num_gt = num_preds = 0
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "num_gt":
                num_gt = int(parts[1])
            elif parts[0] == "num_preds":
                num_preds = int(parts[1])
            elif parts[0] == "thresholds":
                thresholds = tuple(float(s) for s in parts[1].split(","))
            elif parts[0] == "ap":
                ap[(int(parts[1]), float(parts[2]))] = float(parts[3])
            elif parts[0] == "map":
                map_by_iou[float(parts[1])] = float(parts[2])
            elif parts[0] == "avg_map":
                average_map = float(parts[1])
    return EvalResult(ap, map_by_iou, average_map, thresholds, num_gt, num_preds)


def write_errors_dat(profile: ErrorProfile, iou_threshold: float, path) -> None:
    lines = [f"analyzed {profile.num_analyzed}", f"iou_threshold {iou_threshold!r}"]
    for category in ERROR_CATEGORIES:
        lines.append(f"count {category} {profile.counts[category]}")
    for i, quintile in enumerate(profile.quintile_percentages, start=1):
        for category in ERROR_CATEGORIES:
            lines.append(f"quintile {i} {category} {quintile[category]!r}")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def read_errors_dat(path) -> ErrorProfile:
    counts = {c: 0 for c in ERROR_CATEGORIES}
    quintiles = [dict.fromkeys(ERROR_CATEGORIES, 0.0) for _ in range(5)]
    analyzed = 0
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "analyzed":
                analyzed = int(parts[1])
            elif parts[0] == "count":
                counts[parts[1]] = int(parts[2])
            elif parts[0] == "quintile":
                quintiles[int(parts[1]) - 1][parts[2]] = float(parts[3])
    return ErrorProfile(counts, tuple(quintiles), analyzed)

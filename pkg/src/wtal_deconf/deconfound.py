"""Activation calibration and the decoupled two-model pipeline.

Calibration adds the per-segment confounder score, scaled by gamma, to
every class column of the activation matrix. The pipeline trains the
classifier (labels used) and the projector bank (labels unused) as two
fully independent stages, fixes the bank's orientation, optionally sweeps
gamma on a held-out fifth of the training list, and emits calibrated
activation sequences for every test video.

Because the added value is shared across classes, calibration never
changes the per-segment class ranking; it only moves segments across
detection thresholds.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass

import numpy as np

from .baseline import (Cas, ClassifierParams, TrainConfig, cas_forward,
                       topk_aggregate, train_classifier)
from .dataset import Dataset, VideoFeatures
from .errors import FormatError, ShapeError
from .evaluate import map_eval
from .localize import LocalizeConfig, extract_instances, nms
from .tspca import (ConfounderScore, ProjectorBank, TspcaConfig,
                    confounder_score, orient_projectors, train_tspca)

logger = logging.getLogger(__name__)

CAS_MAGIC = b"WCAS"
CAS_VERSION = 1
_CAS_HEADER = struct.Struct("<4sIIII")


@dataclass(frozen=True)
class CalibrationConfig:
    gamma: float = 0.5
    gamma_grid: tuple = (0.1, 0.2, 0.5, 1.0)


@dataclass(frozen=True, eq=False)
class PipelineResult:
    calibrated: tuple        # Cas per test video
    uncalibrated: tuple      # Cas per test video
    confounders: tuple       # ConfounderScore per test video
    gamma: float
    classifier: ClassifierParams
    bank: ProjectorBank
    metadata: dict


def calibrate(cas: Cas, score: ConfounderScore, gamma: float) -> Cas:
    """Shift every class column by gamma times the confounder score."""
    if cas.video_id != score.video_id:
        raise ShapeError(
            f"cas {cas.video_id!r} does not match confounder {score.video_id!r}"
        )
    if cas.scores.shape[0] != score.z.shape[0]:
        raise ShapeError(
            f"cas has T={cas.scores.shape[0]} but confounder has T={score.z.shape[0]}"
        )
    return Cas(cas.video_id, cas.scores + gamma * score.z[:, None])


def quantize_cas(cas: Cas) -> Cas:
    """Round through the on-disk float32 precision.

    The pipeline hands localization the same numbers a stage rerun would
    read back from the export files, so staged and in-memory runs agree.
    """
    return Cas(cas.video_id, cas.scores.astype(np.float32).astype(np.float64))


def video_probabilities(cas: Cas, k_divisor: int) -> np.ndarray:
    """Softmax over the top-k aggregated class scores."""
    agg = topk_aggregate(cas, k_divisor)
    shifted = agg - agg.max()
    exp = np.exp(shifted)
    return exp / exp.sum()


def localize_cas(cas: Cas, video: VideoFeatures, k_divisor: int,
                 loc_cfg: LocalizeConfig):
    """Instances for one video: extraction then per-class NMS."""
    probs = video_probabilities(cas, k_divisor)
    candidates = extract_instances(cas, video, probs, loc_cfg)
    return nms(candidates, loc_cfg.nms_tiou)


def _map_at(cas_by_id: dict, dataset: Dataset, gts, k_divisor: int,
            loc_cfg: LocalizeConfig, iou_threshold: float) -> float:
    predictions = []
    for video in dataset.videos:
        if video.video_id in cas_by_id:
            predictions.extend(
                localize_cas(cas_by_id[video.video_id], video, k_divisor, loc_cfg)
            )
    return map_eval(predictions, gts, (iou_threshold,)).map_by_iou[iou_threshold]


def select_gamma(train: Dataset, classifier: ClassifierParams,
                 bank: ProjectorBank, cal_cfg: CalibrationConfig,
                 loc_cfg: LocalizeConfig, split_seed: int):
    """Pick gamma by mAP@0.5 on the last fifth of the shuffled train list.

    Falls back to the configured default when the grid is trivial or the
    held-out fifth carries no ground truth. Returns (gamma, sweep log).
    """
    if len(cal_cfg.gamma_grid) <= 1:
        return cal_cfg.gamma, {}
    order = np.random.default_rng(split_seed).permutation(len(train.videos))
    held = max(1, len(train.videos) // 5)
    held_ids = [train.videos[i].video_id for i in order[-held:]]
    held_gts = [g for g in train.ground_truth if g.video_id in set(held_ids)]
    if not held_gts:
        logger.warning(
            "held-out fifth has no ground truth; keeping default gamma %.3f",
            cal_cfg.gamma,
        )
        return cal_cfg.gamma, {}
    held_ds = Dataset(
        [train.video_for(v) for v in held_ids],
        [train.label_for(v) for v in held_ids],
        held_gts, train.split,
    )
    sweep = {}
    best_gamma, best_map = None, -1.0
    for gamma in cal_cfg.gamma_grid:
        cas_by_id = {}
        for video in held_ds.videos:
            cas = cas_forward(classifier, video)
            score = confounder_score(bank, video)
            cas_by_id[video.video_id] = quantize_cas(calibrate(cas, score, gamma))
        value = _map_at(cas_by_id, held_ds, held_gts, classifier.k_divisor,
                        loc_cfg, 0.5)
        sweep[gamma] = value
        if value > best_map:   # ties keep the earlier grid entry
            best_gamma, best_map = gamma, value
    return best_gamma, sweep


def run_pipeline(train: Dataset, test: Dataset, wtal_cfg: TrainConfig,
                 tspca_cfg: TspcaConfig, cal_cfg: CalibrationConfig,
                 loc_cfg: LocalizeConfig | None = None, k_divisor: int = 8,
                 tspca_first: bool = False) -> PipelineResult:
    """Train both models independently, orient, pick gamma, calibrate test.

    The two training stages share no state: ``tspca_first`` only swaps
    their order and must not change any output.
    """
    loc_cfg = loc_cfg if loc_cfg is not None else LocalizeConfig()
    if tspca_first:
        bank, tspca_history = train_tspca(train, tspca_cfg)
        classifier, wtal_history = train_classifier(train, wtal_cfg, k_divisor)
    else:
        classifier, wtal_history = train_classifier(train, wtal_cfg, k_divisor)
        bank, tspca_history = train_tspca(train, tspca_cfg)
    bank = orient_projectors(bank, train, classifier)
    gamma, sweep = select_gamma(train, classifier, bank, cal_cfg, loc_cfg,
                                split_seed=wtal_cfg.seed)

    calibrated, uncalibrated, confounders = [], [], []
    if not test.videos:
        logger.warning("test split is empty; pipeline produces no activations")
    for video in test.videos:
        cas = cas_forward(classifier, video)
        score = confounder_score(bank, video)
        uncalibrated.append(quantize_cas(cas))
        calibrated.append(quantize_cas(calibrate(cas, score, gamma)))
        confounders.append(score)

    metadata = {
        "wtal_loss_history": wtal_history,
        "tspca_loss_history": tspca_history,
        "gamma_sweep": sweep,
        "orientation": bank.orientation,
    }
    return PipelineResult(tuple(calibrated), tuple(uncalibrated),
                          tuple(confounders), gamma, classifier, bank, metadata)


def write_cas_text(cas_list, path) -> None:
    """Text export: one `cas <video> <t> <f> <value>` line per entry."""
    lines = []
    for cas in cas_list:
        t, f = cas.scores.shape
        for i in range(t):
            for j in range(f):
                # float32 payloads round-trip through 9 significant digits
                lines.append(f"cas {cas.video_id} {i} {j} {cas.scores[i, j]:.9g}")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + ("\n" if lines else ""))


def read_cas_text(path):
    by_video = {}
    order = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            stripped = line.strip()
            if not stripped or stripped.startswith("#"):
                continue
            parts = stripped.split()
            if len(parts) != 5 or parts[0] != "cas":
                raise FormatError(f"{path}:{lineno}: malformed cas line")
            video_id, t, f, value = parts[1], int(parts[2]), int(parts[3]), parts[4]
            if video_id not in by_video:
                by_video[video_id] = {}
                order.append(video_id)
            by_video[video_id][(t, f)] = np.float64(np.float32(value))
    out = []
    for video_id in order:
        entries = by_video[video_id]
        t_max = max(k[0] for k in entries) + 1
        f_max = max(k[1] for k in entries) + 1
        scores = np.zeros((t_max, f_max))
        for (i, j), value in entries.items():
            scores[i, j] = value
        out.append(Cas(video_id, scores))
    return out


def write_cas_binary(cas: Cas, path) -> None:
    """Binary export mirroring the feature-file layout (float32 payload)."""
    t, f = cas.scores.shape
    header = _CAS_HEADER.pack(CAS_MAGIC, CAS_VERSION, t, f, 0)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(cas.scores, dtype="<f4").tobytes())


def read_cas_binary(path, video_id: str) -> Cas:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _CAS_HEADER.size:
        raise FormatError(f"{path}: file shorter than header")
    magic, version, t, f, _reserved = _CAS_HEADER.unpack_from(raw)
    if magic != CAS_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != CAS_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    body = raw[_CAS_HEADER.size:]
    if len(body) != t * f * 4:
        raise FormatError(f"{path}: payload is {len(body)} bytes, expected {t * f * 4}")
    scores = np.frombuffer(body, dtype="<f4").astype(np.float64).reshape(t, f)
    return Cas(video_id, scores)

"""Minimal weakly-supervised localizer.

A single linear layer scores every segment against every class (the class
activation matrix), the per-class video score is the mean of the top-k
segment scores, and training minimizes the softmax cross-entropy of the
positive classes using hand-derived gradients. Keeping the model linear
keeps the gradients exact and the later calibration step's effect isolable.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np

from .dataset import Dataset, VideoFeatures
from .errors import FormatError, NumericalError, ShapeError

PARAMS_MAGIC = b"WTCP"
PARAMS_VERSION = 1
_PARAMS_HEADER = struct.Struct("<4sIIII")

LOG_FLOOR = 1e-12  # probability clamp inside the log; keeps the loss finite


@dataclass(frozen=True, eq=False)
class Cas:
    """Segment-by-class activation scores (logits) for one video."""

    video_id: str
    scores: np.ndarray

    def __post_init__(self):
        scores = np.asarray(self.scores, dtype=np.float64)
        object.__setattr__(self, "scores", scores)
        if scores.ndim != 2:
            raise ShapeError(f"cas for {self.video_id!r} must be T x F")
        if not np.all(np.isfinite(scores)):
            raise ShapeError(f"cas for {self.video_id!r} contains non-finite values")


@dataclass(frozen=True, eq=False)
class ClassifierParams:
    weights: np.ndarray      # D x F
    bias: np.ndarray         # F
    k_divisor: int = 8

    def __post_init__(self):
        object.__setattr__(self, "weights", np.asarray(self.weights, dtype=np.float64))
        object.__setattr__(self, "bias", np.asarray(self.bias, dtype=np.float64))
        if self.weights.ndim != 2 or self.bias.shape != (self.weights.shape[1],):
            raise ShapeError("weights must be D x F with a matching F-length bias")
        if self.k_divisor < 1:
            raise ShapeError("k_divisor must be a positive integer")


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.01
    momentum: float = 0.9
    epochs: int = 100
    weight_decay: float = 1e-4
    seed: int = 0


def top_k_for(num_segments: int, k_divisor: int) -> int:
    return max(1, math.ceil(num_segments / k_divisor))


def cas_forward(params: ClassifierParams, video: VideoFeatures) -> Cas:
    """Linear segment scores: scores[t, f] = x[t] . W[:, f] + b[f]."""
    if video.feature_dim != params.weights.shape[0]:
        raise ShapeError(
            f"video {video.video_id!r} has D={video.feature_dim}, "
            f"classifier expects D={params.weights.shape[0]}"
        )
    return Cas(video.video_id, video.x @ params.weights + params.bias)


def topk_aggregate(cas: Cas, k_divisor: int) -> np.ndarray:
    """Per-class mean of the k = max(1, ceil(T / k_divisor)) largest scores.

    Operates on the multiset of column values, so the result is invariant
    under any permutation of the segment rows.
    """
    scores = cas.scores
    k = top_k_for(scores.shape[0], k_divisor)
    top = np.sort(scores, axis=0)[-k:, :]
    return top.mean(axis=0)


def _topk_indices(scores: np.ndarray, k: int) -> np.ndarray:
    # Stable selection (ties -> lower segment index) so training is deterministic.
    return np.argsort(-scores, axis=0, kind="stable")[:k, :]


def video_cls_loss(scores: np.ndarray, y: np.ndarray):
    """Positive-class cross-entropy on softmaxed video scores.

    loss = -sum_f y_f log softmax(scores)_f, with the probability clamped
    at LOG_FLOOR inside the log. Returns (loss, d loss / d scores); the
    gradient is the exact analytic one, (sum_f y_f) * p - y.
    """
    scores = np.asarray(scores, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if scores.shape != y.shape or scores.ndim != 1:
        raise ShapeError(f"scores {scores.shape} and labels {y.shape} must match")
    shifted = scores - scores.max()
    exp = np.exp(shifted)
    p = exp / exp.sum()
    loss = -float(np.dot(y, np.log(np.maximum(p, LOG_FLOOR))))
    grad = y.sum() * p - y
    return loss, grad


def train_classifier(train: Dataset, cfg: TrainConfig, k_divisor: int = 8):
    """Momentum gradient descent over per-video updates.

    The top-k index set is held fixed within each step (subgradient of the
    top-k mean), so the gradient reaches only the selected segments.
    Returns (params, per-epoch mean loss history); deterministic for a
    fixed seed.
    """
    if not train.videos:
        raise ShapeError("training split is empty")
    num_classes = train.num_classes
    dim = train.feature_dim
    rng = np.random.default_rng(cfg.seed)
    weights = rng.uniform(-1.0 / math.sqrt(dim), 1.0 / math.sqrt(dim),
                          size=(dim, num_classes))
    bias = np.zeros(num_classes)
    vel_w = np.zeros_like(weights)
    vel_b = np.zeros_like(bias)

    history = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(train.videos))
        epoch_loss = 0.0
        for idx in order:
            video = train.videos[idx]
            y = train.label_for(video.video_id).y
            activations = video.x @ weights + bias
            k = top_k_for(video.num_segments, k_divisor)
            sel = _topk_indices(activations, k)
            agg = np.take_along_axis(activations, sel, axis=0).mean(axis=0)
            loss, grad_scores = video_cls_loss(agg, y)
            if not math.isfinite(loss):
                raise NumericalError(
                    f"non-finite loss at epoch {epoch}, video {video.video_id!r}"
                )
            grad_act = np.zeros_like(activations)
            np.put_along_axis(
                grad_act, sel,
                np.broadcast_to(grad_scores / k, (k, num_classes)), axis=0,
            )
            grad_w = video.x.T @ grad_act + cfg.weight_decay * weights
            grad_b = grad_act.sum(axis=0)
            vel_w = cfg.momentum * vel_w + grad_w
            vel_b = cfg.momentum * vel_b + grad_b
            weights = weights - cfg.learning_rate * vel_w
            bias = bias - cfg.learning_rate * vel_b
            epoch_loss += loss
        history.append(epoch_loss / len(train.videos))
    return ClassifierParams(weights, bias, k_divisor), history


def save_params(params: ClassifierParams, path) -> None:
    d, f = params.weights.shape
    header = _PARAMS_HEADER.pack(PARAMS_MAGIC, PARAMS_VERSION, d, f, params.k_divisor)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(params.weights, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(params.bias, dtype="<f8").tobytes())


def load_params(path) -> ClassifierParams:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _PARAMS_HEADER.size:
        raise FormatError(f"{path}: file shorter than header")
    magic, version, d, f, k_divisor = _PARAMS_HEADER.unpack_from(raw)
    if magic != PARAMS_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != PARAMS_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    body = raw[_PARAMS_HEADER.size:]
    expected = (d * f + f) * 8
    if len(body) != expected:
        raise FormatError(f"{path}: payload is {len(body)} bytes, expected {expected}")
    values = np.frombuffer(body, dtype="<f8")
    weights = values[:d * f].reshape(d, f)
    bias = values[d * f:]
    return ClassifierParams(weights, bias, k_divisor)

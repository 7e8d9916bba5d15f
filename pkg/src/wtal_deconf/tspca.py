"""Temporal-smoothing PCA: learned projectors that summarize every segment.

A bank of L projector rows is trained on features alone (labels never
enter) to maximize the per-video variance of the projections while
(a) staying near orthonormal, (b) approximately reconstructing the
features, and (c) keeping projections of consecutive segments close.
The per-video loss is

    pro    = -(1/T) sum_t sum_l (p_l.x_t - mean_m p_l.x_m)^2
             + (1/L^2) ||P P^T - I||_F^2
    recon  =  (1/T) sum_t || sum_l (p_l.x_t) p_l - x_t ||^2
    smooth =  (1/(T-1)) sum_t sum_l (p_l.x_{t+1} - p_l.x_t)^2   (0 if T = 1)
    total  =  pro + recon_weight * recon + smooth_weight * smooth

The orthogonality penalty uses the squared Frobenius norm so its gradient
is smooth at exact orthogonality, and every term is normalized by the
segment count so videos of different lengths contribute comparably.

The averaged projection of a video, standardized per video and flipped by
a single global orientation sign, is the per-segment confounder score used
to calibrate activation sequences downstream.
"""

from __future__ import annotations

import logging
import math
import struct
from dataclasses import dataclass, replace

import numpy as np

from .baseline import ClassifierParams, cas_forward
from .dataset import Dataset, VideoFeatures
from .errors import ConfigurationError, FormatError, NumericalError, ShapeError
from .linalg import gram_schmidt_rows, jacobi_eigh

logger = logging.getLogger(__name__)

BANK_MAGIC = b"TSPC"
BANK_VERSION = 1
_BANK_HEADER = struct.Struct("<4sIIIbdd")

STD_FLOOR = 1e-12  # below this, per-video standardization returns zeros


@dataclass(frozen=True, eq=False)
class ProjectorBank:
    projectors: np.ndarray       # L x D, rows are the projectors
    recon_weight: float = 1.0
    smooth_weight: float = 1.0
    orientation: int = 1

    def __post_init__(self):
        p = np.asarray(self.projectors, dtype=np.float64)
        object.__setattr__(self, "projectors", p)
        if p.ndim != 2 or p.shape[0] < 1:
            raise ShapeError("projectors must be an L x D matrix with L >= 1")
        if not np.all(np.isfinite(p)):
            raise ShapeError("projectors contain non-finite values")
        if self.orientation not in (1, -1):
            raise ShapeError("orientation must be +1 or -1")
        if self.recon_weight < 0 or self.smooth_weight < 0:
            raise ShapeError("loss weights must be non-negative")


@dataclass(frozen=True, eq=False)
class ConfounderScore:
    """Standardized per-segment confounder values for one video."""

    video_id: str
    z: np.ndarray

    def __post_init__(self):
        z = np.asarray(self.z, dtype=np.float64)
        object.__setattr__(self, "z", z)
        if z.ndim != 1:
            raise ShapeError("confounder score must be a length-T vector")


@dataclass(frozen=True)
class TspcaConfig:
    num_projectors: int = 5
    recon_weight: float = 1.0
    smooth_weight: float = 1.0
    learning_rate: float = 0.005
    epochs: int = 500
    seed: int = 0


def init_projectors(num_projectors: int, dim: int, seed) -> ProjectorBank:
    """Orthonormal rows from Gram-Schmidt over Gaussian draws."""
    if not 1 <= num_projectors <= dim:
        raise ConfigurationError(
            f"need 1 <= L <= D, got L={num_projectors}, D={dim}"
        )
    rng = np.random.default_rng(seed)
    rows = gram_schmidt_rows(rng.standard_normal((num_projectors, dim)))
    return ProjectorBank(rows)


def _check_dim(p: np.ndarray, video: VideoFeatures) -> None:
    if p.shape[1] != video.feature_dim:
        raise ShapeError(
            f"projector dim {p.shape[1]} != video {video.video_id!r} "
            f"feature dim {video.feature_dim}"
        )


def _loss_terms(p: np.ndarray, x: np.ndarray):
    t = x.shape[0]
    num = p.shape[0]
    centered = x - x.mean(axis=0)
    proj_centered = centered @ p.T                       # T x L
    gram_dev = p @ p.T - np.eye(num)
    pro = -float((proj_centered ** 2).sum()) / t \
        + float((gram_dev ** 2).sum()) / num ** 2
    coeff = x @ p.T                                      # T x L
    residual = coeff @ p - x
    recon = float((residual ** 2).sum()) / t
    if t > 1:
        dproj = np.diff(coeff, axis=0)
        smooth = float((dproj ** 2).sum()) / (t - 1)
    else:
        smooth = 0.0
    return pro, recon, smooth


def _loss_grad(p: np.ndarray, x: np.ndarray, recon_weight: float,
               smooth_weight: float) -> np.ndarray:
    t = x.shape[0]
    num = p.shape[0]
    centered = x - x.mean(axis=0)
    proj_centered = centered @ p.T
    grad = -(2.0 / t) * proj_centered.T @ centered
    gram_dev = p @ p.T - np.eye(num)
    grad += (4.0 / num ** 2) * gram_dev @ p
    coeff = x @ p.T
    residual = coeff @ p - x
    grad += recon_weight * (2.0 / t) * ((residual @ p.T).T @ x + coeff.T @ residual)
    if t > 1 and smooth_weight != 0.0:
        dx = np.diff(x, axis=0)
        grad += smooth_weight * (2.0 / (t - 1)) * (dx @ p.T).T @ dx
    return grad


def tspca_losses(bank: ProjectorBank, video: VideoFeatures):
    """Return the (pro, recon, smooth) terms of the per-video loss."""
    _check_dim(bank.projectors, video)
    return _loss_terms(bank.projectors, video.x)


def tspca_grads(bank: ProjectorBank, video: VideoFeatures) -> np.ndarray:
    """Analytic gradient of the weighted per-video total loss w.r.t. the rows."""
    _check_dim(bank.projectors, video)
    return _loss_grad(bank.projectors, video.x, bank.recon_weight, bank.smooth_weight)


def orthogonality_residual(bank: ProjectorBank) -> float:
    """Frobenius distance of P P^T from the identity."""
    num = bank.projectors.shape[0]
    return float(np.linalg.norm(bank.projectors @ bank.projectors.T - np.eye(num)))


def train_tspca(train: Dataset, cfg: TspcaConfig):
    """Per-video SGD on the projector loss; labels are never consulted.

    Returns (bank, per-epoch mean loss history). The bank keeps
    orientation +1; fixing the sign is a separate step. Deterministic for
    a fixed seed.
    """
    if not train.videos:
        raise ShapeError("training split is empty")
    dim = train.feature_dim
    if not 1 <= cfg.num_projectors <= dim:
        raise ConfigurationError(
            f"need 1 <= L <= D, got L={cfg.num_projectors}, D={dim}"
        )
    rng = np.random.default_rng(cfg.seed)
    p = gram_schmidt_rows(rng.standard_normal((cfg.num_projectors, dim)))

    history = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(train.videos))
        epoch_loss = 0.0
        for idx in order:
            x = train.videos[idx].x
            pro, recon, smooth = _loss_terms(p, x)
            total = pro + cfg.recon_weight * recon + cfg.smooth_weight * smooth
            if not math.isfinite(total):
                raise NumericalError(
                    f"non-finite projector loss at epoch {epoch}, "
                    f"video {train.videos[idx].video_id!r}"
                )
            p = p - cfg.learning_rate * _loss_grad(
                p, x, cfg.recon_weight, cfg.smooth_weight
            )
            epoch_loss += total
        history.append(epoch_loss / len(train.videos))

    bank = ProjectorBank(p, cfg.recon_weight, cfg.smooth_weight, orientation=1)
    residual = orthogonality_residual(bank)
    row_norms = np.linalg.norm(p, axis=1)
    logger.info("projector training done: ||PP^T - I||_F = %.4f, row norms %s",
                residual, np.array2string(row_norms, precision=3))
    if row_norms.min() < 0.5 or row_norms.max() > 2.0:
        logger.warning("projector row norms %s left the [0.5, 2.0] sanity band",
                       np.array2string(row_norms, precision=3))
    return bank, history


def exact_pca_oracle(train: Dataset, num_components: int) -> np.ndarray:
    """Top eigenvectors of the pooled per-video-centered covariance.

    Dense Jacobi eigendecomposition, independent of the gradient-descent
    training path; used to test the projector learner in its PCA limit.
    """
    if not train.videos:
        raise ShapeError("dataset is empty")
    dim = train.feature_dim
    if dim > 256:
        raise ConfigurationError(f"oracle limited to D <= 256, got {dim}")
    if not 1 <= num_components <= dim:
        raise ConfigurationError(f"need 1 <= L <= D, got L={num_components}")
    cov = np.zeros((dim, dim))
    total_segments = 0
    for video in train.videos:
        centered = video.x - video.x.mean(axis=0)
        cov += centered.T @ centered
        total_segments += video.num_segments
    cov /= total_segments
    _eigvals, eigvecs = jacobi_eigh(cov, tol=1e-10, max_sweeps=100)
    return eigvecs[:num_components]


def raw_projection(bank: ProjectorBank, video: VideoFeatures) -> np.ndarray:
    """Pre-standardization confounder: mean over rows of p_l . x_t."""
    _check_dim(bank.projectors, video)
    return (video.x @ bank.projectors.T).mean(axis=1)


def orient_projectors(bank: ProjectorBank, train: Dataset,
                      baseline: ClassifierParams) -> ProjectorBank:
    """Fix the global sign so the confounder scores foreground positively.

    The sign is the sign of the Pearson correlation, pooled over all train
    segments, between the raw projection and the per-segment max class
    activation of the baseline. Projector weights are unchanged.
    """
    raw, activation = [], []
    for video in train.videos:
        raw.append(raw_projection(bank, video))
        activation.append(cas_forward(baseline, video).scores.max(axis=1))
    raw = np.concatenate(raw)
    activation = np.concatenate(activation)
    if raw.std() <= STD_FLOOR or activation.std() <= STD_FLOOR:
        logger.warning("degenerate series while orienting projectors; keeping +1")
        return replace(bank, orientation=1)
    corr = float(np.corrcoef(raw, activation)[0, 1])
    return replace(bank, orientation=1 if corr >= 0 else -1)


def confounder_score(bank: ProjectorBank, video: VideoFeatures) -> ConfounderScore:
    """Standardized, orientation-signed confounder for one video.

    Zero vector when the video has one segment or the raw projections are
    (numerically) constant.
    """
    raw = raw_projection(bank, video)
    std = float(raw.std())
    if video.num_segments == 1 or std <= STD_FLOOR:
        return ConfounderScore(video.video_id, np.zeros(video.num_segments))
    z = bank.orientation * (raw - raw.mean()) / std
    return ConfounderScore(video.video_id, z)


def save_bank(bank: ProjectorBank, path) -> None:
    num, dim = bank.projectors.shape
    header = _BANK_HEADER.pack(BANK_MAGIC, BANK_VERSION, num, dim,
                               bank.orientation, bank.recon_weight,
                               bank.smooth_weight)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(bank.projectors, dtype="<f8").tobytes())


def load_bank(path) -> ProjectorBank:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _BANK_HEADER.size:
        raise FormatError(f"{path}: file shorter than header")
    magic, version, num, dim, orientation, recon_w, smooth_w = \
        _BANK_HEADER.unpack_from(raw)
    if magic != BANK_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != BANK_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    body = raw[_BANK_HEADER.size:]
    if len(body) != num * dim * 8:
        raise FormatError(
            f"{path}: payload is {len(body)} bytes, expected {num * dim * 8}"
        )
    projectors = np.frombuffer(body, dtype="<f8").reshape(num, dim)
    return ProjectorBank(projectors, recon_w, smooth_w, orientation)

"""On-disk dataset model and the synthetic confounded-video generator.

File layouts
------------
Feature file (binary, little-endian):
    magic "WTFX" | u32 version=1 | u32 T | u32 D | u32 reserved=0
    followed by T*D float32 values, row-major.

Manifest (UTF-8 text, one record per line, ``#`` starts a comment):
    classes <F>                                   (exactly once)
    video <id> <relative feature path> <seconds_per_segment>
    labels <id> <comma-separated class indices>
    gt <id> <class> <start_sec> <end_sec>         (zero or more)

Features are stored as float32 but handled as float64 in memory; the
generator rounds through float32 once so that a save/load cycle is
bit-exact.
"""

from __future__ import annotations

import enum
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, FormatError, ValidationError
from .linalg import gram_schmidt_rows

FEATURE_MAGIC = b"WTFX"
FEATURE_VERSION = 1
_HEADER = struct.Struct("<4sIIII")


class Split(enum.Enum):
    TRAIN = "train"
    TEST = "test"


@dataclass(frozen=True, eq=False)
class VideoFeatures:
    """Per-video segment features: a T x D matrix plus timing metadata."""

    video_id: str
    x: np.ndarray
    seconds_per_segment: float

    def __post_init__(self):
        x = np.asarray(self.x, dtype=np.float64)
        object.__setattr__(self, "x", x)
        if x.ndim != 2 or x.shape[0] < 1 or x.shape[1] < 1:
            raise ValidationError(
                f"video {self.video_id!r}: features must be a T x D matrix "
                f"with T, D >= 1, got shape {x.shape}"
            )
        if not np.all(np.isfinite(x)):
            raise ValidationError(f"video {self.video_id!r}: non-finite feature value")
        if not self.seconds_per_segment > 0:
            raise ValidationError(
                f"video {self.video_id!r}: seconds_per_segment must be positive"
            )
        x.setflags(write=False)

    @property
    def num_segments(self) -> int:
        return self.x.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.x.shape[1]

    @property
    def duration_sec(self) -> float:
        return self.num_segments * self.seconds_per_segment


@dataclass(frozen=True, eq=False)
class VideoLabel:
    """Video-level multi-hot class presence vector."""

    video_id: str
    y: np.ndarray

    def __post_init__(self):
        y = np.asarray(self.y, dtype=np.float64)
        object.__setattr__(self, "y", y)
        if y.ndim != 1 or y.shape[0] < 1:
            raise ValidationError(f"label {self.video_id!r}: y must be a non-empty vector")
        if not np.all((y == 0.0) | (y == 1.0)):
            raise ValidationError(f"label {self.video_id!r}: y entries must be 0 or 1")
        y.setflags(write=False)

    @property
    def num_classes(self) -> int:
        return self.y.shape[0]


@dataclass(frozen=True)
class GroundTruthInstance:
    """One annotated action interval; used for evaluation only, never training."""

    video_id: str
    class_index: int
    start_sec: float
    end_sec: float


@dataclass(frozen=True)
class Dataset:
    videos: tuple
    labels: tuple
    ground_truth: tuple
    split: Split

    @property
    def num_classes(self) -> int:
        return self.labels[0].num_classes

    @property
    def feature_dim(self) -> int:
        return self.videos[0].feature_dim

    def label_for(self, video_id: str) -> VideoLabel:
        return self._label_index[video_id]

    def video_for(self, video_id: str) -> VideoFeatures:
        return self._video_index[video_id]

    def __post_init__(self):
        object.__setattr__(self, "videos", tuple(self.videos))
        object.__setattr__(self, "labels", tuple(self.labels))
        object.__setattr__(self, "ground_truth", tuple(self.ground_truth))
        object.__setattr__(self, "_video_index", {v.video_id: v for v in self.videos})
        object.__setattr__(self, "_label_index", {l.video_id: l for l in self.labels})
        problems = self._validate()
        if problems:
            raise ValidationError("; ".join(problems))

    def _validate(self) -> list:
        problems = []
        if len(self._video_index) != len(self.videos):
            problems.append("duplicate video ids in dataset")
        dims = {v.feature_dim for v in self.videos}
        if len(dims) > 1:
            problems.append(f"inconsistent feature dimensions {sorted(dims)}")
        classes = {l.num_classes for l in self.labels}
        if len(classes) > 1:
            problems.append(f"inconsistent class count F {sorted(classes)}")
        for label in self.labels:
            if label.video_id not in self._video_index:
                problems.append(f"label references missing video {label.video_id!r}")
            elif self.split is Split.TRAIN and not label.y.any():
                problems.append(
                    f"training video {label.video_id!r} has no positive class"
                )
        for gt in self.ground_truth:
            video = self._video_index.get(gt.video_id)
            if video is None:
                problems.append(f"gt references missing video {gt.video_id!r}")
                continue
            label = self._label_index.get(gt.video_id)
            if not (0 <= gt.start_sec < gt.end_sec <= video.duration_sec + 1e-9):
                problems.append(
                    f"gt for {gt.video_id!r} has invalid interval "
                    f"[{gt.start_sec}, {gt.end_sec}] (duration {video.duration_sec})"
                )
            if label is None or not (0 <= gt.class_index < label.num_classes):
                problems.append(
                    f"gt for {gt.video_id!r} has out-of-range class {gt.class_index}"
                )
            elif label.y[gt.class_index] != 1.0:
                problems.append(
                    f"gt class {gt.class_index} not present in label of {gt.video_id!r}"
                )
        return problems


@dataclass(frozen=True)
class SyntheticConfig:
    """Knobs of the confounded generator.

    Each video gets one action class and a context index; the context is
    coupled to the class (equal to ``class mod num_contexts`` with
    probability 0.8) and adds ``context_strength`` times a context
    direction to every segment, foreground and background alike. The
    context therefore correlates with the label without being the action:
    the confounding structure the calibration stage is meant to undo.
    """

    n_train: int = 20
    n_test: int = 10
    num_segments: int = 50
    feature_dim: int = 16
    num_classes: int = 4
    num_contexts: int = 3
    context_strength: float = 1.5
    noise_sigma: float = 0.5
    fg_fraction: float = 0.3
    seed: int = 0

    def __post_init__(self):
        checks = [
            (self.n_train >= 1, "n_train must be >= 1"),
            (self.n_test >= 1, "n_test must be >= 1"),
            (self.num_segments >= 8, "num_segments must be >= 8"),
            (self.feature_dim >= 8, "feature_dim must be >= 8"),
            (self.num_classes >= 2, "num_classes must be >= 2"),
            (self.num_contexts >= 2, "num_contexts must be >= 2"),
            (self.context_strength >= 0, "context_strength must be >= 0"),
            (self.noise_sigma >= 0, "noise_sigma must be >= 0"),
            (0 < self.fg_fraction <= 0.6, "fg_fraction must be in (0, 0.6]"),
            (self.seed >= 0, "seed must be a non-negative integer"),
        ]
        for ok, message in checks:
            if not ok:
                raise ConfigurationError(message)


# Coupling probability between class and context; strong enough to induce
# confusion errors, weak enough that the confounder stays identifiable.
_CONTEXT_COUPLING = 0.8


def write_features(video: VideoFeatures, path) -> None:
    """Serialize one video's feature matrix (float32 payload, row-major)."""
    t, d = video.x.shape
    header = _HEADER.pack(FEATURE_MAGIC, FEATURE_VERSION, t, d, 0)
    payload = np.ascontiguousarray(video.x, dtype="<f4").tobytes()
    try:
        with open(path, "wb") as fh:
            fh.write(header)
            fh.write(payload)
    except OSError as exc:
        raise OSError(f"cannot write feature file {path}: {exc}") from exc


def read_features(path, video_id: str | None = None,
                  seconds_per_segment: float = 1.0) -> VideoFeatures:
    """Read a feature file back; validates magic, version and payload size."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _HEADER.size:
        raise FormatError(f"{path}: file shorter than the {_HEADER.size}-byte header")
    magic, version, t, d, _reserved = _HEADER.unpack_from(raw)
    if magic != FEATURE_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}, expected {FEATURE_MAGIC!r}")
    if version != FEATURE_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    if t < 1 or d < 1:
        raise FormatError(f"{path}: header T={t}, D={d} must both be >= 1")
    payload = raw[_HEADER.size:]
    expected = t * d * 4
    if len(payload) != expected:
        raise FormatError(
            f"{path}: payload is {len(payload)} bytes, header T*D*4 = {expected}"
        )
    x = np.frombuffer(payload, dtype="<f4").astype(np.float64).reshape(t, d)
    if not np.all(np.isfinite(x)):
        raise ValidationError(f"{path}: non-finite feature value")
    name = video_id if video_id is not None else Path(path).stem
    return VideoFeatures(name, x, seconds_per_segment)


def _parse_record_lines(path):
    """Yield (line_number, keyword, args) for every non-comment manifest line."""
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            stripped = line.strip()
            if not stripped or stripped.startswith("#"):
                continue
            parts = stripped.split()
            yield lineno, parts[0], parts[1:]


def load_dataset(manifest_path, split: Split = Split.TRAIN) -> Dataset:
    """Load a dataset from a manifest; feature paths resolve relative to it.

    Collects every violation before raising so one pass reports all problems.
    """
    manifest_path = Path(manifest_path)
    base = manifest_path.parent
    num_classes = None
    video_rows = []    # (id, path, sps)
    label_rows = {}    # id -> [class indices]
    gt_rows = []       # (id, class, start, end)
    problems = []

    for lineno, keyword, args in _parse_record_lines(manifest_path):
        where = f"{manifest_path}:{lineno}"
        if keyword == "classes":
            if len(args) != 1 or not args[0].isdigit():
                problems.append(f"{where}: classes record needs one integer")
            elif num_classes is not None:
                problems.append(f"{where}: duplicate classes record")
            else:
                num_classes = int(args[0])
        elif keyword == "video":
            if len(args) != 3:
                problems.append(f"{where}: video record needs <id> <path> <sps>")
            else:
                try:
                    video_rows.append((args[0], args[1], float(args[2])))
                except ValueError:
                    problems.append(f"{where}: bad seconds_per_segment {args[2]!r}")
        elif keyword == "labels":
            if len(args) != 2:
                problems.append(f"{where}: labels record needs <id> <indices>")
            else:
                try:
                    label_rows[args[0]] = [int(s) for s in args[1].split(",") if s]
                except ValueError:
                    problems.append(f"{where}: bad class index list {args[1]!r}")
        elif keyword == "gt":
            if len(args) != 4:
                problems.append(f"{where}: gt record needs <id> <class> <start> <end>")
            else:
                try:
                    gt_rows.append(
                        (args[0], int(args[1]), float(args[2]), float(args[3]))
                    )
                except ValueError:
                    problems.append(f"{where}: bad gt record values {args!r}")
        else:
            problems.append(f"{where}: unknown record {keyword!r}")

    if num_classes is None or num_classes < 1:
        problems.append(f"{manifest_path}: missing or invalid classes record")
    if problems:
        raise ValidationError("; ".join(problems))

    videos = []
    for vid, rel, sps in video_rows:
        feature_path = base / rel
        if not feature_path.exists():
            problems.append(f"feature file missing for video {vid!r}: {feature_path}")
            continue
        videos.append(read_features(feature_path, video_id=vid, seconds_per_segment=sps))

    known = {v.video_id for v in videos}
    for vid in label_rows:
        if vid not in known:
            problems.append(f"labels reference missing video {vid!r}")
    for idxs in label_rows.values():
        for idx in idxs:
            if not 0 <= idx < (num_classes or 1):
                problems.append(f"label class {idx} out of range [0, {num_classes})")
    if problems:
        raise ValidationError("; ".join(problems))

    labels = []
    for video in videos:
        y = np.zeros(num_classes)
        for idx in label_rows.get(video.video_id, []):
            y[idx] = 1.0
        labels.append(VideoLabel(video.video_id, y))
    ground_truth = [GroundTruthInstance(*row) for row in gt_rows]
    return Dataset(videos, labels, ground_truth, split)


def save_dataset(dataset: Dataset, out_dir, manifest_name: str = "manifest.txt") -> Path:
    """Write feature files plus a manifest under ``out_dir``; returns manifest path."""
    out_dir = Path(out_dir)
    feature_dir = out_dir / "features"
    feature_dir.mkdir(parents=True, exist_ok=True)
    lines = [f"classes {dataset.num_classes}"]
    for video in dataset.videos:
        rel = f"features/{video.video_id}.wtfx"
        write_features(video, out_dir / rel)
        lines.append(f"video {video.video_id} {rel} {video.seconds_per_segment!r}")
        label = dataset.label_for(video.video_id)
        present = ",".join(str(i) for i in np.flatnonzero(label.y))
        if present:
            lines.append(f"labels {video.video_id} {present}")
    for gt in dataset.ground_truth:
        lines.append(
            f"gt {gt.video_id} {gt.class_index} {gt.start_sec!r} {gt.end_sec!r}"
        )
    manifest = out_dir / manifest_name
    manifest.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return manifest


def _place_intervals(rng, num_segments: int, n_fg: int):
    """Pick 1-2 disjoint, non-adjacent foreground runs totalling n_fg segments."""
    background = num_segments - n_fg
    two = n_fg >= 2 and background >= 3 and rng.random() < 0.5
    if not two:
        start = int(rng.integers(0, background + 1))
        return [(start, start + n_fg - 1)]
    len_a = int(rng.integers(1, n_fg))
    len_b = n_fg - len_a
    # One background segment is reserved between the runs so they stay distinct.
    spare = background - 1
    cuts = np.sort(rng.integers(0, spare + 1, size=2))
    gap_before, gap_mid = int(cuts[0]), 1 + int(cuts[1] - cuts[0])
    start_a = gap_before
    start_b = start_a + len_a + gap_mid
    return [(start_a, start_a + len_a - 1), (start_b, start_b + len_b - 1)]


def _generate_split(cfg: SyntheticConfig, split: Split, prefix: str, count: int,
                    class_dirs, context_dirs, background_dir, rng) -> Dataset:
    videos, labels, ground_truth = [], [], []
    sps = 1.0
    for i in range(count):
        video_id = f"{prefix}_{i:03d}"
        action = int(rng.integers(cfg.num_classes))
        if rng.random() < _CONTEXT_COUPLING:
            context = action % cfg.num_contexts
        else:
            context = int(rng.integers(cfg.num_contexts))
        n_fg = max(1, round(cfg.fg_fraction * cfg.num_segments))
        intervals = _place_intervals(rng, cfg.num_segments, n_fg)
        fg_mask = np.zeros(cfg.num_segments, dtype=bool)
        for start, end in intervals:
            fg_mask[start:end + 1] = True

        x = np.where(fg_mask[:, None], class_dirs[action], background_dir)
        x = x + cfg.context_strength * context_dirs[context]
        x = x + cfg.noise_sigma * rng.standard_normal((cfg.num_segments, cfg.feature_dim))
        # Round through the on-disk precision so save/load is bit-exact.
        x = x.astype(np.float32).astype(np.float64)

        videos.append(VideoFeatures(video_id, x, sps))
        y = np.zeros(cfg.num_classes)
        y[action] = 1.0
        labels.append(VideoLabel(video_id, y))
        for start, end in intervals:
            ground_truth.append(
                GroundTruthInstance(video_id, action, start * sps, (end + 1) * sps)
            )
    return Dataset(videos, labels, ground_truth, split)


def generate_synthetic(cfg: SyntheticConfig):
    """Build (train, test) datasets with an explicit latent context confounder.

    All class, context and background directions are mutually orthogonal
    unit vectors, so with zero noise the foreground of class f has strictly
    larger inner product with prototype f than any background segment.
    Deterministic: equal configs produce byte-identical datasets.
    """
    needed = cfg.num_classes + cfg.num_contexts + 1
    if cfg.feature_dim < needed:
        raise ConfigurationError(
            f"feature_dim must be >= num_classes + num_contexts + 1 = {needed}, "
            f"got {cfg.feature_dim}"
        )
    root = np.random.default_rng(cfg.seed)
    dir_rng, train_rng, test_rng = root.spawn(3)
    basis = gram_schmidt_rows(dir_rng.standard_normal((needed, cfg.feature_dim)))
    class_dirs = basis[:cfg.num_classes]
    context_dirs = basis[cfg.num_classes:cfg.num_classes + cfg.num_contexts]
    background_dir = basis[-1]
    train = _generate_split(cfg, Split.TRAIN, "train", cfg.n_train,
                            class_dirs, context_dirs, background_dir, train_rng)
    test = _generate_split(cfg, Split.TEST, "test", cfg.n_test,
                           class_dirs, context_dirs, background_dir, test_rng)
    return train, test

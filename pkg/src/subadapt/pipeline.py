"""Data pipeline: CSV ingestion, imputation, min-max scaling, windowing,
principal-component reduction, contiguous splits, and a synthetic
two-subject benchmark generator.

Recordings are frame-major: a recording is a [frames, channels] float64
matrix with NaN marking missing cells, plus one activity label per frame.
Windows are flattened frame-major, so a window of w frames over c channels
becomes a vector of dimension w * c.
"""
from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .rng import RandomSource


class IngestionError(ValueError):
    """A source file violates the CSV contract."""


class PipelineError(ValueError):
    """A transform's preconditions are not met."""


def half_up(x: float) -> int:
    """Round half away from zero for non-negative x (0.5 -> 1, 1.5 -> 2, 2.5 -> 3)."""
    return int(math.floor(x + 0.5))


# ---------------------------------------------------------------------------
# recordings and CSV ingestion


@dataclass(frozen=True)
class CsvSchema:
    subject_column: str = "subject"
    label_column: str = "label"
    channel_columns: tuple | None = None   # None: every other column, in header order
    missing_marker: str = "NaN"
    allowed_labels: tuple | None = None    # None: vocabulary is the sorted set seen in the file


@dataclass
class RawRecording:
    subject_id: str
    frames: np.ndarray          # [T, C], NaN = missing
    labels: np.ndarray          # [T] int64 indices into label_names
    sample_rate: float
    label_names: tuple

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.frames.ndim != 2:
            raise PipelineError(f"frames must be [frames, channels], got shape {self.frames.shape}")
        if self.labels.shape != (self.frames.shape[0],):
            raise PipelineError(f"need one label per frame: {self.frames.shape[0]} frames, "
                                f"{self.labels.shape[0]} labels")
        if self.sample_rate <= 0:
            raise PipelineError(f"sample_rate must be positive, got {self.sample_rate}")

    @property
    def num_channels(self) -> int:
        return self.frames.shape[1]


def load_recordings(path, schema: CsvSchema, sample_rate: float) -> list:
    """Parse one CSV into per-subject recordings, preserving row order."""
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise IngestionError(f"{path}: file is empty") from None
        header = [h.strip() for h in header]
        for col in (schema.subject_column, schema.label_column):
            if col not in header:
                raise IngestionError(f"{path}: missing required column {col!r}")
        subj_i = header.index(schema.subject_column)
        label_i = header.index(schema.label_column)
        if schema.channel_columns is None:
            channel_cols = [h for h in header if h not in (schema.subject_column, schema.label_column)]
        else:
            channel_cols = list(schema.channel_columns)
            for col in channel_cols:
                if col not in header:
                    raise IngestionError(f"{path}: missing channel column {col!r}")
        if not channel_cols:
            raise IngestionError(f"{path}: no channel columns")
        chan_is = [header.index(c) for c in channel_cols]

        subjects: dict[str, dict] = {}
        labels_seen: list[str] = []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise IngestionError(f"{path}:{lineno}: expected {len(header)} cells, got {len(row)}")
            subject = row[subj_i].strip()
            label = row[label_i].strip()
            if schema.allowed_labels is not None and label not in schema.allowed_labels:
                raise IngestionError(f"{path}:{lineno}: unknown label {label!r}")
            if label not in labels_seen:
                labels_seen.append(label)
            values = []
            for ci in chan_is:
                cell = row[ci].strip()
                if cell == schema.missing_marker:
                    values.append(np.nan)
                    continue
                try:
                    values.append(float(cell))
                except ValueError:
                    raise IngestionError(
                        f"{path}:{lineno}: channel {header[ci]!r} has non-numeric value {cell!r}") from None
            rec = subjects.setdefault(subject, {"frames": [], "labels": []})
            rec["frames"].append(values)
            rec["labels"].append(label)

    if not subjects:
        raise IngestionError(f"{path}: no data rows")
    if schema.allowed_labels is not None:
        label_names = tuple(schema.allowed_labels)
    else:
        label_names = tuple(sorted(labels_seen))
    index = {name: i for i, name in enumerate(label_names)}
    out = []
    for subject, rec in subjects.items():
        out.append(RawRecording(
            subject_id=subject,
            frames=np.array(rec["frames"], dtype=np.float64),
            labels=np.array([index[l] for l in rec["labels"]], dtype=np.int64),
            sample_rate=sample_rate,
            label_names=label_names,
        ))
    return out


def save_recordings_csv(recordings, path, schema: CsvSchema = CsvSchema()) -> None:
    path = Path(path)
    if not recordings:
        raise PipelineError("nothing to write")
    channels = recordings[0].num_channels
    if schema.channel_columns is not None:
        channel_cols = list(schema.channel_columns)
        if len(channel_cols) != channels:
            raise PipelineError(f"{len(channel_cols)} channel columns for {channels} channels")
    else:
        channel_cols = [f"ch{i}" for i in range(channels)]
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([schema.subject_column, schema.label_column, *channel_cols])
        for rec in recordings:
            if rec.num_channels != channels:
                raise PipelineError("recordings disagree on channel count")
            for frame, label in zip(rec.frames, rec.labels):
                cells = [schema.missing_marker if np.isnan(v) else repr(float(v)) for v in frame]
                writer.writerow([rec.subject_id, rec.label_names[label], *cells])


def impute_missing(rec: RawRecording) -> RawRecording:
    """Forward-fill each channel along time, then back-fill the leading gap."""
    frames = rec.frames.copy()
    for c in range(frames.shape[1]):
        col = frames[:, c]
        if np.all(np.isnan(col)):
            raise PipelineError(f"channel {c} of subject {rec.subject_id!r} is entirely missing")
        mask = np.isnan(col)
        idx = np.where(mask, 0, np.arange(len(col)))
        np.maximum.accumulate(idx, out=idx)
        col = col[idx]
        # leading NaNs survive forward fill; take the first observed value
        lead = np.isnan(col)
        if lead.any():
            col[lead] = col[~lead][0]
        frames[:, c] = col
    return replace(rec, frames=frames)


# ---------------------------------------------------------------------------
# min-max normalization


@dataclass
class NormalizationModel:
    channel_min: np.ndarray
    channel_max: np.ndarray

    def __post_init__(self):
        self.channel_min = np.asarray(self.channel_min, dtype=np.float64)
        self.channel_max = np.asarray(self.channel_max, dtype=np.float64)
        if self.channel_min.shape != self.channel_max.shape or self.channel_min.ndim != 1:
            raise PipelineError("channel_min/channel_max must be matching 1-D arrays")
        if np.any(self.channel_max < self.channel_min):
            raise PipelineError("channel_max below channel_min")

    def apply(self, values: np.ndarray) -> np.ndarray:
        values = np.asarray(values, dtype=np.float64)
        if values.shape[-1] != self.channel_min.shape[0]:
            raise PipelineError(f"value channels {values.shape[-1]} do not match model "
                                f"channels {self.channel_min.shape[0]}")
        span = self.channel_max - self.channel_min
        safe = np.where(span == 0, 1.0, span)
        out = (values - self.channel_min) / safe
        out = np.where(span == 0, 0.5, out)   # constant channel: pinned mid-range
        return np.clip(out, 0.0, 1.0)

    def invert(self, values: np.ndarray) -> np.ndarray:
        span = self.channel_max - self.channel_min
        return np.asarray(values, dtype=np.float64) * span + self.channel_min

    def to_json(self, path) -> None:
        Path(path).write_text(json.dumps(
            {"channel_min": self.channel_min.tolist(), "channel_max": self.channel_max.tolist()},
            sort_keys=True) + "\n")

    @staticmethod
    def from_json(path) -> "NormalizationModel":
        d = json.loads(Path(path).read_text())
        return NormalizationModel(np.asarray(d["channel_min"]), np.asarray(d["channel_max"]))


def fit_minmax(values: np.ndarray) -> NormalizationModel:
    """Per-channel observed ranges from a [rows, channels] matrix (NaNs ignored)."""
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 2 or values.shape[0] == 0:
        raise PipelineError(f"need a non-empty [rows, channels] matrix, got shape {values.shape}")
    if np.all(np.isnan(values), axis=0).any():
        raise PipelineError("a channel has no observed values")
    return NormalizationModel(np.nanmin(values, axis=0), np.nanmax(values, axis=0))


def declared_minmax(low, high, channels: int) -> NormalizationModel:
    """Model from declared sensor ranges; scalars broadcast to every channel."""
    low = np.broadcast_to(np.asarray(low, dtype=np.float64), (channels,)).copy()
    high = np.broadcast_to(np.asarray(high, dtype=np.float64), (channels,)).copy()
    return NormalizationModel(low, high)


def apply_minmax(model: NormalizationModel, rec: RawRecording) -> RawRecording:
    return replace(rec, frames=model.apply(rec.frames))


# ---------------------------------------------------------------------------
# windowed datasets


@dataclass
class DomainDataset:
    subject_id: str
    windows: np.ndarray          # [N, d]
    labels: np.ndarray | None    # [N] int64, None for an unlabeled target
    num_classes: int
    label_names: tuple | None = None

    def __post_init__(self):
        self.windows = np.asarray(self.windows, dtype=np.float64)
        if self.windows.ndim != 2:
            raise PipelineError(f"windows must be [count, dim], got shape {self.windows.shape}")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (self.windows.shape[0],):
                raise PipelineError("need one label per window")
            if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
                raise PipelineError("window label outside [0, num_classes)")
        if self.num_classes < 1:
            raise PipelineError(f"num_classes must be >= 1, got {self.num_classes}")

    def __len__(self) -> int:
        return self.windows.shape[0]

    @property
    def dim(self) -> int:
        return self.windows.shape[1]

    def class_counts(self) -> np.ndarray:
        if self.labels is None:
            raise PipelineError(f"dataset {self.subject_id!r} is unlabeled")
        return np.bincount(self.labels, minlength=self.num_classes)

    def unlabeled(self) -> "DomainDataset":
        return replace(self, labels=None)

    def take(self, indices) -> "DomainDataset":
        idx = np.asarray(indices, dtype=np.int64)
        return replace(self, windows=self.windows[idx],
                       labels=None if self.labels is None else self.labels[idx])

    def with_windows(self, windows: np.ndarray) -> "DomainDataset":
        return replace(self, windows=np.asarray(windows, dtype=np.float64))

    def save(self, directory) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        np.save(directory / "windows.npy", self.windows)
        if self.labels is not None:
            np.save(directory / "labels.npy", self.labels)
        meta = {"subject_id": self.subject_id, "num_classes": self.num_classes,
                "label_names": list(self.label_names) if self.label_names else None,
                "labeled": self.labels is not None}
        (directory / "meta.json").write_text(json.dumps(meta, sort_keys=True) + "\n")

    @staticmethod
    def load(directory) -> "DomainDataset":
        directory = Path(directory)
        meta = json.loads((directory / "meta.json").read_text())
        labels = np.load(directory / "labels.npy") if meta["labeled"] else None
        return DomainDataset(
            subject_id=meta["subject_id"], windows=np.load(directory / "windows.npy"),
            labels=labels, num_classes=meta["num_classes"],
            label_names=tuple(meta["label_names"]) if meta["label_names"] else None)


def _majority_label(labels: np.ndarray) -> int:
    counts = np.bincount(labels)
    best = counts.max()
    tied = np.flatnonzero(counts == best)
    if len(tied) == 1:
        return int(tied[0])
    # ties go to whichever tied label shows up first inside the window
    for lab in labels:
        if lab in tied:
            return int(lab)
    raise AssertionError("unreachable")


def segment_windows(rec: RawRecording, window_seconds: float, overlap_fraction: float) -> DomainDataset:
    if not (0.0 <= overlap_fraction < 1.0):
        raise PipelineError(f"overlap_fraction must lie in [0, 1), got {overlap_fraction}")
    window_frames = half_up(window_seconds * rec.sample_rate)
    if window_frames < 1:
        raise PipelineError(f"window of {window_seconds}s at {rec.sample_rate}Hz spans no frames")
    step = max(1, half_up(window_frames * (1.0 - overlap_fraction)))
    total = rec.frames.shape[0]
    num_classes = len(rec.label_names)
    if total < window_frames:
        warnings.warn(f"recording {rec.subject_id!r} is shorter than one window "
                      f"({total} < {window_frames} frames); produced 0 windows")
        return DomainDataset(rec.subject_id, np.zeros((0, window_frames * rec.num_channels)),
                             np.zeros(0, dtype=np.int64), num_classes, rec.label_names)
    starts = range(0, total - window_frames + 1, step)
    windows = np.stack([rec.frames[s:s + window_frames].reshape(-1) for s in starts])
    labels = np.array([_majority_label(rec.labels[s:s + window_frames]) for s in starts],
                      dtype=np.int64)
    return DomainDataset(rec.subject_id, windows, labels, num_classes, rec.label_names)


# ---------------------------------------------------------------------------
# principal-component reduction


@dataclass
class PcaModel:
    mean: np.ndarray                      # [d]
    components: np.ndarray                # [d', d], orthonormal rows
    explained_variance_ratio: np.ndarray  # fractions of total variance, [d']

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.components = np.asarray(self.components, dtype=np.float64)
        self.explained_variance_ratio = np.asarray(self.explained_variance_ratio, dtype=np.float64)

    @property
    def output_dim(self) -> int:
        return self.components.shape[0]

    def transform(self, windows: np.ndarray) -> np.ndarray:
        windows = np.asarray(windows, dtype=np.float64)
        if windows.shape[-1] != self.mean.shape[0]:
            raise PipelineError(f"window dimension {windows.shape[-1]} does not match "
                                f"fitted dimension {self.mean.shape[0]}")
        return (windows - self.mean) @ self.components.T

    def inverse_transform(self, reduced: np.ndarray) -> np.ndarray:
        return np.asarray(reduced, dtype=np.float64) @ self.components + self.mean

    def to_json(self, path) -> None:
        Path(path).write_text(json.dumps(
            {"mean": self.mean.tolist(), "components": self.components.tolist(),
             "explained_variance_ratio": self.explained_variance_ratio.tolist()},
            sort_keys=True) + "\n")

    @staticmethod
    def from_json(path) -> "PcaModel":
        d = json.loads(Path(path).read_text())
        return PcaModel(np.asarray(d["mean"]), np.asarray(d["components"]),
                        np.asarray(d["explained_variance_ratio"]))


def fit_pca(windows: np.ndarray, output_dim: int | None = None,
            fraction: float | None = None) -> PcaModel:
    """Fit on a pooled [rows, d] matrix; keep output_dim (or round(fraction * d)) components."""
    windows = np.asarray(windows, dtype=np.float64)
    if windows.ndim != 2 or windows.shape[0] < 2:
        raise PipelineError(f"need at least 2 pooled windows, got shape {windows.shape}")
    d = windows.shape[1]
    if (output_dim is None) == (fraction is None):
        raise PipelineError("give exactly one of output_dim or fraction")
    if fraction is not None:
        if not (0.0 < fraction <= 1.0):
            raise PipelineError(f"fraction must lie in (0, 1], got {fraction}")
        output_dim = max(1, half_up(fraction * d))
    if not (1 <= output_dim <= d):
        raise PipelineError(f"output_dim must lie in [1, {d}], got {output_dim}")
    mean = windows.mean(axis=0)
    centered = windows - mean
    u, s, vt = np.linalg.svd(centered, full_matrices=False)
    variances = (s * s) / (windows.shape[0] - 1)
    total = variances.sum()
    if total <= 0.0:
        raise PipelineError("pooled windows have zero variance; nothing to decompose")
    components = vt[:output_dim]
    # deterministic sign: largest-magnitude entry of each component is positive
    flip = np.sign(components[np.arange(output_dim), np.argmax(np.abs(components), axis=1)])
    flip = np.where(flip == 0, 1.0, flip)
    components = components * flip[:, None]
    return PcaModel(mean, components, variances[:output_dim] / total)


def apply_pca(model: PcaModel, ds: DomainDataset) -> DomainDataset:
    return ds.with_windows(model.transform(ds.windows))


# ---------------------------------------------------------------------------
# contiguous splits


@dataclass(frozen=True)
class SplitSpec:
    train: float = 0.6
    val: float = 0.1
    test: float = 0.3

    def __post_init__(self):
        for name, frac in (("train", self.train), ("val", self.val), ("test", self.test)):
            if frac <= 0.0:
                raise PipelineError(f"{name} fraction must be positive, got {frac}")
        if abs(self.train + self.val + self.test - 1.0) > 1e-9:
            raise PipelineError("split fractions must sum to 1")


def split_domain(ds: DomainDataset, spec: SplitSpec = SplitSpec()):
    """Contiguous train/val/test split preserving temporal order."""
    n = len(ds)
    if n < 3:
        raise PipelineError(f"cannot split {n} windows into three non-empty parts")
    n_train = max(1, half_up(spec.train * n))
    n_val = max(1, half_up(spec.val * n))
    while n - n_train - n_val < 1:
        if n_train >= n_val:
            n_train -= 1
        else:
            n_val -= 1
    train = ds.take(np.arange(0, n_train))
    val = ds.take(np.arange(n_train, n_train + n_val))
    test = ds.take(np.arange(n_train + n_val, n))
    return train, val, test


# ---------------------------------------------------------------------------
# synthetic two-subject benchmark


@dataclass(frozen=True)
class SynthSpec:
    num_classes: int
    channels: int
    frames: int
    class_counts: tuple
    mixing: np.ndarray | None = None     # [channels, channels]; None = identity
    offset: float | np.ndarray = 0.0
    shift_noise: float = 0.0             # extra per-frame noise on the target
    sample_noise: float = 0.05           # class-process noise in both domains
    seed: int = 0

    def __post_init__(self):
        if self.num_classes < 2:
            raise PipelineError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.channels < 1 or self.frames < 1:
            raise PipelineError("channels and frames must be >= 1")
        if len(self.class_counts) != self.num_classes:
            raise PipelineError(f"{len(self.class_counts)} class counts for "
                                f"{self.num_classes} classes")
        if any(c < 1 for c in self.class_counts):
            raise PipelineError("class counts must be >= 1")
        if self.shift_noise < 0 or self.sample_noise < 0:
            raise PipelineError("noise amplitudes must be >= 0")
        if self.mixing is not None:
            m = np.asarray(self.mixing, dtype=np.float64)
            if m.shape != (self.channels, self.channels):
                raise PipelineError(f"mixing must be [{self.channels}, {self.channels}], "
                                    f"got {m.shape}")
            if np.linalg.matrix_rank(m) < self.channels:
                raise PipelineError("mixing matrix is singular")
            object.__setattr__(self, "mixing", m)

    @property
    def window_dim(self) -> int:
        return self.frames * self.channels


def rotation_mixing(channels: int, degrees: float) -> np.ndarray:
    """Block-diagonal planar rotation of consecutive channel pairs."""
    theta = math.radians(degrees)
    m = np.eye(channels)
    c, s = math.cos(theta), math.sin(theta)
    for i in range(0, channels - 1, 2):
        m[i, i] = c
        m[i, i + 1] = -s
        m[i + 1, i] = s
        m[i + 1, i + 1] = c
    return m


def _interleave_classes(counts) -> np.ndarray:
    """Deterministic proportional order, so every contiguous slice stays near-stratified."""
    counts = np.asarray(counts, dtype=np.int64)
    total = int(counts.sum())
    emitted = np.zeros(len(counts), dtype=np.int64)
    order = np.empty(total, dtype=np.int64)
    share = counts / total
    for i in range(total):
        deficit = share * (i + 1) - emitted
        deficit[emitted >= counts] = -np.inf
        order[i] = int(np.argmax(deficit))
        emitted[order[i]] += 1
    return order


def _prototypes(spec: SynthSpec, rng: RandomSource) -> np.ndarray:
    """Per-class [frames, channels] waveforms: class-keyed sinusoids."""
    t = np.arange(spec.frames) / spec.frames
    protos = np.empty((spec.num_classes, spec.frames, spec.channels))
    for c in range(spec.num_classes):
        amp = 0.5 + rng.uniform((spec.channels,))
        phase = rng.uniform((spec.channels,)) * 2.0 * np.pi
        freq = c + 1
        protos[c] = amp[None, :] * np.sin(2.0 * np.pi * freq * t[:, None] + phase[None, :])
    return protos


def generate_synthetic_pair(spec: SynthSpec):
    """Build matched source/target datasets differing only by the declared subject shift.

    Both datasets carry labels; the target's exist for evaluation only and
    must be stripped (DomainDataset.unlabeled()) before adaptation training.
    """
    rng = RandomSource(spec.seed, "synthetic")
    protos = _prototypes(spec, rng)
    order = _interleave_classes(spec.class_counts)
    n = len(order)
    mixing = spec.mixing if spec.mixing is not None else np.eye(spec.channels)
    offset = np.broadcast_to(np.asarray(spec.offset, dtype=np.float64), (spec.channels,))

    source = np.empty((n, spec.window_dim))
    target = np.empty((n, spec.window_dim))
    for i, c in enumerate(order):
        s_frames = protos[c] + spec.sample_noise * rng.normal((spec.frames, spec.channels))
        t_frames = protos[c] + spec.sample_noise * rng.normal((spec.frames, spec.channels))
        t_frames = t_frames @ mixing.T + offset[None, :]
        if spec.shift_noise > 0:
            t_frames = t_frames + spec.shift_noise * rng.normal((spec.frames, spec.channels))
        source[i] = s_frames.reshape(-1)
        target[i] = t_frames.reshape(-1)

    label_names = tuple(f"c{i}" for i in range(spec.num_classes))
    labels = order.copy()
    return (DomainDataset("source", source, labels, spec.num_classes, label_names),
            DomainDataset("target", target, labels.copy(), spec.num_classes, label_names))

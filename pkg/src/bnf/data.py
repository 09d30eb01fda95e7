"""Datasets: CSV time series, windowing, synthetic bit-level tasks, container I/O."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .bitplane import FixedTensor, to_fixed_point
from .container import read_tensor

log = logging.getLogger(__name__)


@dataclass
class Dataset:
    """M-bit integer inputs ``x`` of shape (N, H, W, C) with labels and subject ids."""

    x: np.ndarray
    y: np.ndarray
    subjects: np.ndarray
    bit_width: int
    num_classes: int

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.uint16)
        self.y = np.asarray(self.y, dtype=np.int64)
        self.subjects = np.asarray(self.subjects)
        if self.x.ndim != 4:
            raise ValueError(f"dataset inputs must be (N, H, W, C), got {self.x.shape}")
        if not (len(self.x) == len(self.y) == len(self.subjects)):
            raise ValueError("x, y and subjects differ in length")
        if len(self.y) and (self.y.min() < 0 or self.y.max() >= self.num_classes):
            raise ValueError("labels out of range for class count")
        if len(self.x) and self.x.max() >= (1 << self.bit_width):
            raise ValueError(f"inputs exceed {self.bit_width} bits")

    def __len__(self):
        return len(self.y)

    @property
    def sample_shape(self) -> tuple[int, int, int]:
        return tuple(self.x.shape[1:])

    def subset(self, idx) -> "Dataset":
        return Dataset(self.x[idx], self.y[idx], self.subjects[idx], self.bit_width, self.num_classes)


# -- synthetic --------------------------------------------------------------

SYNTH_KINDS = ("bit_separable", "bit_parity", "linear")


@dataclass(frozen=True)
class SynthSpec:
    """Desk-scale synthetic task.

    ``bit_separable``: bit ``bit`` of channel 0 equals the label at every position,
    all other bits are uniform noise.
    ``bit_parity``: the ``parity_bits`` of channel 0 carry one pattern per sample,
    shared by all positions, whose parity is the label; other bits of channel 0
    are zero and other channels are uniform noise. A threshold on the integer
    value cannot separate it, per-bit weights can.
    ``linear``: label is the sign of a fixed random projection of the inputs.
    """

    kind: str
    M: int = 8
    channels: int = 1
    samples_per_class: int = 500
    seed: int = 0
    height: int = 1
    length: int = 8
    bit: int | None = None
    parity_bits: tuple[int, ...] = (0, 1, 2, 3, 4, 5)
    n_subjects: int = 4

    def __post_init__(self):
        if self.kind not in SYNTH_KINDS:
            raise ValueError(f"unknown synthetic kind {self.kind!r}")
        bits = [self.designated_bit] if self.kind == "bit_separable" else list(self.parity_bits)
        if any(not 0 <= b < self.M for b in bits):
            raise ValueError("designated bits must lie in 0..M-1")

    @property
    def designated_bit(self) -> int:
        return self.M - 1 if self.bit is None else self.bit


def generate_synthetic(spec: SynthSpec) -> Dataset:
    rng = np.random.default_rng(spec.seed)
    n = 2 * spec.samples_per_class
    shape = (n, spec.height, spec.length, spec.channels)
    top = 1 << spec.M
    y = np.repeat([0, 1], spec.samples_per_class)
    rng.shuffle(y)
    x = rng.integers(0, top, shape, dtype=np.int64)
    if spec.kind == "bit_separable":
        b = spec.designated_bit
        ch0 = x[..., 0] & ~(1 << b)
        x[..., 0] = ch0 | (y[:, None, None] << b)
    elif spec.kind == "bit_parity":
        k = len(spec.parity_bits)
        patterns = np.array([p for p in range(1 << k)])
        parity = np.array([bin(p).count("1") & 1 for p in patterns])
        chosen = np.empty(n, dtype=np.int64)
        for label in (0, 1):
            pool = patterns[parity == label]
            idx = np.flatnonzero(y == label)
            chosen[idx] = rng.choice(pool, size=len(idx))
        value = np.zeros(n, dtype=np.int64)
        for j, b in enumerate(spec.parity_bits):
            value |= ((chosen >> j) & 1) << b
        x[..., 0] = value[:, None, None]
    else:
        proj = np.random.default_rng(spec.seed + 1).standard_normal(shape[1:])
        score = ((x / (top - 1) - 0.5) * proj).sum(axis=(1, 2, 3))
        y = (score > np.median(score)).astype(np.int64)
    subjects = np.arange(n) % spec.n_subjects
    return Dataset(x, y, subjects, spec.M, 2)


# -- CSV time series --------------------------------------------------------

@dataclass
class TimeSeriesDataset:
    """Rows of a continuous recording: ``values`` (T, C), one label and subject per row."""

    values: np.ndarray
    labels: np.ndarray
    subjects: np.ndarray
    channel_names: list[str]
    sample_rate_hz: float = 100.0
    dropped_rows: int = 0
    label_names: list[str] = field(default_factory=list)


def load_column_map(path) -> dict:
    with open(path) as f:
        return json.load(f)


def _split(line: str, delimiter: str) -> list[str]:
    if delimiter == "whitespace":
        return line.split()
    return next(csv.reader([line], delimiter=delimiter))


def _resolve(col, header: list[str] | None) -> int:
    if isinstance(col, int):
        return col
    if header is None:
        raise ValueError(f"column {col!r} given by name but the file has no header")
    if col not in header:
        raise ValueError(f"column {col!r} not found in header")
    return header.index(col)


def load_timeseries_csv(path, column_map: dict, label_column, subject_column=None, *,
                        delimiter: str = ",", header: bool = True, subject=None,
                        label_map: dict | None = None, sample_rate_hz: float = 100.0) -> TimeSeriesDataset:
    """Parse a delimited recording. ``column_map`` maps channel name to column
    (name or index). Rows with a missing or unparsable value in a mapped column,
    or with a label absent from ``label_map``, are dropped and counted."""
    path = Path(path)
    if label_column is None:
        raise ValueError("label column is required")
    with path.open() as f:
        lines = [ln for ln in f.read().splitlines() if ln.strip()]
    hdr = [h.strip() for h in _split(lines[0], delimiter)] if header and lines else None
    rows = lines[1:] if hdr is not None else lines
    names = list(column_map)
    cols = [_resolve(column_map[k], hdr) for k in names]
    label_idx = _resolve(label_column, hdr)
    subj_idx = _resolve(subject_column, hdr) if subject_column is not None else None

    values, labels, subjects = [], [], []
    dropped = 0
    for line in rows:
        cells = _split(line, delimiter)
        try:
            vals = [float(cells[c]) for c in cols]
            raw_label = cells[label_idx].strip()
            sid = cells[subj_idx].strip() if subj_idx is not None else subject
        except (ValueError, IndexError):
            dropped += 1
            continue
        if not np.all(np.isfinite(vals)):
            dropped += 1
            continue
        if label_map is not None:
            key = str(int(float(raw_label)))
            if key not in label_map:
                dropped += 1
                continue
            label = int(label_map[key])
        else:
            try:
                label = int(float(raw_label))
            except ValueError:
                dropped += 1
                continue
        values.append(vals)
        labels.append(label)
        subjects.append(sid if sid is not None else 0)
    if dropped:
        log.info("%s: dropped %d rows", path, dropped)
    if not values:
        raise ValueError(f"{path}: no usable rows")
    return TimeSeriesDataset(np.array(values), np.array(labels), np.array(subjects), names,
                             sample_rate_hz, dropped)


def load_with_config(path, config: dict, subject=None) -> TimeSeriesDataset:
    return load_timeseries_csv(
        path, config["channels"], config["label"], config.get("subject"),
        delimiter=config.get("delimiter", ","), header=config.get("header", True),
        subject=subject, label_map=config.get("label_map"),
        sample_rate_hz=config.get("sample_rate_hz", 100.0),
    )


@dataclass
class Windows:
    """Real-valued windows of shape (N, C, length, 1): channels as rows, time as columns."""

    x: np.ndarray
    y: np.ndarray
    subjects: np.ndarray


def window_count(t: int, length: int, stride: int) -> int:
    return 0 if t < length else (t - length) // stride + 1


def window(ds: TimeSeriesDataset, length: int, stride: int | None = None) -> Windows:
    """Sliding windows within each contiguous single-subject run; label is the
    majority label (ties to the smaller id)."""
    stride = length if stride is None else stride
    if length < 1 or stride < 1:
        raise ValueError("window length and stride must be positive")
    if length > len(ds.values):
        raise ValueError(f"window length {length} exceeds series length {len(ds.values)}")
    xs, ys, ss = [], [], []
    subj = ds.subjects
    boundaries = np.flatnonzero(subj[1:] != subj[:-1]) + 1
    for seg in np.split(np.arange(len(subj)), boundaries):
        for k in range(window_count(len(seg), length, stride)):
            idx = seg[k * stride:k * stride + length]
            xs.append(ds.values[idx].T[:, :, None])
            ys.append(np.bincount(ds.labels[idx]).argmax())
            ss.append(subj[idx[0]])
    c = ds.values.shape[1]
    x = np.stack(xs) if xs else np.zeros((0, c, length, 1))
    return Windows(x, np.array(ys, dtype=np.int64), np.array(ss))


def windows_to_fixed(w: Windows, bit_width: int, ranges, num_classes: int) -> Dataset:
    """Quantize each channel (row) with its own ``(lo, hi)`` range."""
    out = np.empty(w.x.shape, dtype=np.uint16)
    for c, (lo, hi) in enumerate(ranges):
        out[:, c] = to_fixed_point(w.x[:, c], lo, hi, bit_width).values
    return Dataset(out, w.y, w.subjects, bit_width, num_classes)


# -- tensor containers -------------------------------------------------------

def load_container_dataset(x_path, y_path, subjects_path=None, num_classes: int | None = None) -> Dataset:
    """Inputs from a fixed-point container (N, H, W, C), labels from any numeric container."""
    x = read_tensor(x_path)
    if not isinstance(x, FixedTensor) or x.values.ndim != 4:
        raise ValueError(f"{x_path}: expected a rank-4 fixed-point tensor")
    y = _as_ints(read_tensor(y_path))
    subjects = _as_ints(read_tensor(subjects_path)) if subjects_path else np.zeros(len(y), dtype=np.int64)
    k = num_classes if num_classes is not None else int(y.max()) + 1
    return Dataset(x.values, y, subjects, x.bit_width, k)


def _as_ints(t) -> np.ndarray:
    v = t.values if isinstance(t, FixedTensor) else np.asarray(t)
    return v.reshape(-1).astype(np.int64)

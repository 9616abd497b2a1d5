"""VM resource-metrics dataset pipeline: CSV ingestion against the
26-feature schema, min-max normalization, sliding windows, chronological
splits, fault injection, and a synthetic generator for desk-scale runs.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

# Canonical 26-feature schema: 4 CPU, 8 disk, 7 memory, 7 network.
FEATURE_NAMES = [
    "cpu_idle_pct", "cpu_wait_pct", "cpu_system_pct", "cpu_stolen_pct",
    "disk_used_pct", "disk_read_reqs", "disk_write_reqs", "disk_read_freq",
    "disk_write_freq", "disk_read_rate", "disk_write_rate", "disk_wait_pct",
    "mem_avg_load", "mem_usable_pct", "mem_usable_mb", "mem_free_mb",
    "mem_total_mb", "mem_buffers_mb", "mem_cached_mb",
    "net_in_bytes", "net_out_bytes", "net_in_errors", "net_out_errors",
    "net_in_packets", "net_out_packets", "net_dropped_packets",
]
NUM_FEATURES = len(FEATURE_NAMES)

FEATURE_GROUPS = {
    "cpu": slice(0, 4),
    "disk": slice(4, 12),
    "memory": slice(12, 19),
    "network": slice(19, 26),
}

FAULT_TYPES = ("cpu_endless_loop", "memory_leak", "disk_io_fault", "network_congestion")
FAULT_GROUP = {
    "cpu_endless_loop": "cpu",
    "memory_leak": "memory",
    "disk_io_fault": "disk",
    "network_congestion": "network",
}


class DataError(ValueError):
    pass


@dataclass
class MetricsRecord:
    timestamp: float
    features: np.ndarray  # [26]
    label: int | None = None  # 0 normal, 1 abnormal, None unknown

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.shape != (NUM_FEATURES,):
            raise DataError(
                f"record needs exactly {NUM_FEATURES} features, got {self.features.shape}"
            )


# ---------------------------------------------------------------------------
# ingestion


def load_dataset(path, column_mapping=None, label_column=None,
                 timestamp_column=None, strict=False, max_gap=3):
    """Read a delimited text file into MetricsRecords.

    column_mapping maps each canonical feature name to the file's column
    header; identity mapping by default. Unparseable rows are skipped with
    a warning list (or fatal if strict). Missing values are linearly
    interpolated over gaps of at most `max_gap` rows, longer gaps drop
    the affected rows.
    """
    mapping = dict(column_mapping or {})
    rows, raw_labels, raw_ts = [], [], []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise DataError(f"{path}: missing header row")
        columns = []
        for name in FEATURE_NAMES:
            src = mapping.get(name, name)
            if src not in reader.fieldnames:
                raise DataError(f"{path}: mapped column {src!r} (for {name}) not found")
            columns.append(src)
        for lineno, row in enumerate(reader, start=2):
            values = np.empty(NUM_FEATURES)
            ok = True
            for j, src in enumerate(columns):
                cell = (row.get(src) or "").strip()
                if cell == "":
                    values[j] = np.nan
                    continue
                try:
                    values[j] = float(cell)
                except ValueError:
                    if strict:
                        raise DataError(f"{path}:{lineno}: unparseable value {cell!r} in {src}")
                    ok = False
                    break
            if not ok:
                continue
            rows.append(values)
            raw_labels.append(_parse_label(row.get(label_column)) if label_column else None)
            raw_ts.append(
                float(row[timestamp_column]) if timestamp_column and row.get(timestamp_column)
                else float(len(rows) - 1)
            )
    if not rows:
        return []
    matrix = np.vstack(rows)
    keep = _interpolate_gaps(matrix, max_gap)
    return [
        MetricsRecord(timestamp=raw_ts[i], features=matrix[i], label=raw_labels[i])
        for i in np.nonzero(keep)[0]
    ]


def _parse_label(value):
    if value is None or str(value).strip() == "":
        return None
    return int(float(value) != 0.0)


def _interpolate_gaps(matrix, max_gap):
    """In-place linear interpolation of NaN runs of length <= max_gap;
    returns a keep-mask marking rows whose gaps could not be filled."""
    n = matrix.shape[0]
    keep = np.ones(n, dtype=bool)
    for j in range(matrix.shape[1]):
        col = matrix[:, j]
        isnan = np.isnan(col)
        i = 0
        while i < n:
            if not isnan[i]:
                i += 1
                continue
            start = i
            while i < n and isnan[i]:
                i += 1
            end = i  # gap is [start, end)
            if start == 0 or end == n or end - start > max_gap:
                keep[start:end] = False
                continue
            left, right = col[start - 1], col[end]
            for k in range(start, end):
                frac = (k - start + 1) / (end - start + 1)
                col[k] = left + frac * (right - left)
    return keep


def records_to_matrix(records):
    if not records:
        return np.zeros((0, NUM_FEATURES))
    return np.vstack([r.features for r in records])


# ---------------------------------------------------------------------------
# normalization


@dataclass
class Normalizer:
    """Per-feature min-max fitted once on the training split. Values
    outside the training range are deliberately not clipped."""

    minimum: np.ndarray
    maximum: np.ndarray

    def apply(self, values):
        values = np.asarray(values, dtype=np.float64)
        span = self.maximum - self.minimum
        out = np.zeros_like(values)
        nz = span != 0
        out[..., nz] = (values[..., nz] - self.minimum[nz]) / span[nz]
        return out

    def invert(self, values):
        values = np.asarray(values, dtype=np.float64)
        span = self.maximum - self.minimum
        out = np.array(np.broadcast_to(self.minimum, values.shape), dtype=np.float64)
        nz = span != 0
        out[..., nz] = values[..., nz] * span[nz] + self.minimum[nz]
        return out


def fit_normalizer(train_values) -> Normalizer:
    values = np.asarray(train_values, dtype=np.float64)
    if values.size == 0:
        raise DataError("cannot fit normalizer on an empty training set")
    flat = values.reshape(-1, values.shape[-1])
    return Normalizer(minimum=flat.min(axis=0), maximum=flat.max(axis=0))


# ---------------------------------------------------------------------------
# windowing and splits


@dataclass
class WindowedSample:
    window: np.ndarray  # [t, features]
    label: int = 0
    fault: str | None = None
    source_vm: str | None = None
    index: int = 0


def make_windows(values, t, stride=1, labels=None, source_vm=None):
    """Consecutive windows of length t over a [rows, features] matrix.
    A window is abnormal iff any member record is abnormal."""
    values = np.asarray(values, dtype=np.float64)
    if t < 1:
        raise DataError("window length must be >= 1")
    n = values.shape[0]
    if t > n:
        raise DataError(f"window length {t} exceeds record count {n}")
    out = []
    for idx, start in enumerate(range(0, n - t + 1, stride)):
        label = 0
        if labels is not None:
            label = int(any(bool(l) for l in labels[start:start + t] if l is not None))
        out.append(WindowedSample(
            window=values[start:start + t].copy(),
            label=label,
            source_vm=source_vm,
            index=idx,
        ))
    return out


def split_windows(windows, ratios=(0.6, 0.2, 0.2)):
    """Chronological train/val/test split; no shuffling across time."""
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise DataError("split ratios must sum to 1")
    n = len(windows)
    n_train = int(round(ratios[0] * n))
    n_val = int(round(ratios[1] * n))
    return {
        "train": windows[:n_train],
        "val": windows[n_train:n_train + n_val],
        "test": windows[n_train + n_val:],
    }


def windows_matrix(windows):
    if not windows:
        return np.zeros((0, 0, NUM_FEATURES))
    return np.stack([w.window for w in windows])


# ---------------------------------------------------------------------------
# fault injection


@dataclass
class InjectionSpec:
    fault_type: str
    rate: float
    magnitude: float = 2.5
    seed: int = 0

    def __post_init__(self):
        if self.fault_type not in FAULT_TYPES:
            raise DataError(f"unknown fault type {self.fault_type!r}")
        if not (0 < self.rate < 1):
            raise DataError("injection rate must lie in (0, 1)")


def _perturb(window, fault_type, magnitude):
    """Apply a fault signature to a normalized [t, features] window,
    touching only the fault's feature group."""
    t = window.shape[0]
    w = window.copy()
    if fault_type == "cpu_endless_loop":
        # busy spin: idle collapses, wait/system/stolen saturate past range
        w[:, 0] *= 0.02
        w[:, 1:4] = magnitude
    elif fault_type == "memory_leak":
        # monotone ramp: load climbs, usable/free drain below range
        ramp = np.linspace(0.0, magnitude, t).reshape(-1, 1)
        w[:, 12:13] += ramp
        w[:, 13:16] -= ramp
        w[:, 17:19] -= 0.75 * ramp
    elif fault_type == "disk_io_fault":
        # read/write activity and wait spiked multiplicatively
        w[:, 5:12] *= magnitude
        w[:, 4] += 0.5
    elif fault_type == "network_congestion":
        # in traffic, errors and drops spike; out size throttled
        w[:, 19] = w[:, 19] * magnitude + 0.5
        w[:, 21:26] = w[:, 21:26] * magnitude + 0.5
        w[:, 20] *= 0.1
    return w


def inject_anomalies(windows, spec: InjectionSpec):
    """Perturb a seeded random fraction of windows per the fault signature
    and relabel them abnormal; all other windows are returned untouched."""
    rng = np.random.default_rng(spec.seed)
    n = len(windows)
    count = int(round(spec.rate * n))
    picked = set(rng.choice(n, size=count, replace=False).tolist()) if count else set()
    out = []
    for i, sample in enumerate(windows):
        if i in picked:
            out.append(WindowedSample(
                window=_perturb(sample.window, spec.fault_type, spec.magnitude),
                label=1,
                fault=spec.fault_type,
                source_vm=sample.source_vm,
                index=sample.index,
            ))
        else:
            out.append(sample)
    return out


def inject_fault_mix(windows, rate, magnitude=2.5, seed=0):
    """Inject all four fault types on disjoint window sets, rate total."""
    rng = np.random.default_rng(seed)
    n = len(windows)
    count = int(round(rate * n))
    picked = rng.choice(n, size=count, replace=False)
    faults = [FAULT_TYPES[i % len(FAULT_TYPES)] for i in range(count)]
    rng.shuffle(picked)
    out = list(windows)
    for i, fault in zip(picked, faults):
        sample = out[i]
        out[i] = WindowedSample(
            window=_perturb(sample.window, fault, magnitude),
            label=1,
            fault=fault,
            source_vm=sample.source_vm,
            index=sample.index,
        )
    return out


# ---------------------------------------------------------------------------
# synthetic generator


@dataclass
class SynthSpec:
    length: int = 5000
    noise: float = 0.05
    seed: int = 7
    features: int = NUM_FEATURES

    def __post_init__(self):
        if self.length < 1:
            raise DataError("length must be >= 1")


def synth_dataset(spec: SynthSpec) -> np.ndarray:
    """Multivariate series of sinusoidal baselines plus Gaussian noise,
    reproducible by seed. Returns [length, features] raw values."""
    rng = np.random.default_rng(spec.seed)
    t = np.arange(spec.length, dtype=np.float64)
    base = rng.uniform(10.0, 100.0, spec.features)
    amp = rng.uniform(1.0, 10.0, spec.features)
    period = rng.uniform(24.0, 240.0, spec.features)
    phase = rng.uniform(0.0, 2 * np.pi, spec.features)
    series = base + amp * np.sin(2 * np.pi * t[:, None] / period + phase)
    if spec.noise > 0:
        series = series + rng.normal(0.0, spec.noise * amp, (spec.length, spec.features))
    return series

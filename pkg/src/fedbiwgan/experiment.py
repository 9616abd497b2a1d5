"""End-to-end experiment pipeline: per-monitor data preparation, training
in the configured mode, per-monitor threshold calibration on the injected
validation split, and detection on the injected test split.

The CLI is a thin wrapper over these functions; tests drive them
directly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import ConfigError, Experiment
from .data import (
    Normalizer,
    SynthSpec,
    fit_normalizer,
    inject_fault_mix,
    load_dataset,
    make_windows,
    records_to_matrix,
    split_windows,
    synth_dataset,
    windows_matrix,
)
from .detection import (
    calibrate_threshold,
    classify_all,
    evaluate,
    per_fault_recall,
    score_windows,
)
from .federation import RunResult, run_training


@dataclass
class NodeData:
    """One monitor's normalized windows, chronologically split."""

    train: np.ndarray  # [n, t, features]
    val: np.ndarray
    test: np.ndarray
    normalizer: Normalizer


def build_node_data(exp: Experiment) -> dict:
    """Per-monitor window shards from the configured data source; the
    normalizer for each monitor is fitted on its own training split."""
    data_cfg = exp.data
    source = data_cfg.get("source", "synth")
    t = exp.model.window
    stride = int(data_cfg.get("stride", 1))
    ratios = tuple(data_cfg.get("ratios", (0.6, 0.2, 0.2)))
    nodes = {}
    for s in range(exp.topology.slices):
        for n in range(exp.topology.monitors_per_slice):
            if source == "synth":
                spec = SynthSpec(
                    length=int(data_cfg.get("length", 5000)),
                    noise=float(data_cfg.get("noise", 0.05)),
                    seed=int(
                        np.random.SeedSequence(
                            [int(data_cfg.get("seed", exp.seed)), s, n]
                        ).generate_state(1)[0]
                    ),
                )
                values = synth_dataset(spec)
            elif source == "csv":
                paths = data_cfg.get("paths", {})
                key = f"{s}.{n}"
                if key not in paths:
                    raise ConfigError(f"data.paths has no entry for monitor {key}")
                records = load_dataset(
                    paths[key],
                    column_mapping=data_cfg.get("mapping"),
                    label_column=data_cfg.get("label_column"),
                )
                values = records_to_matrix(records)
            else:
                raise ConfigError(f"unknown data source {source!r}")
            windows = make_windows(values, t, stride)
            splits = split_windows(windows, ratios)
            normalizer = fit_normalizer(windows_matrix(splits["train"]))
            nodes[(s, n)] = NodeData(
                train=normalizer.apply(windows_matrix(splits["train"])),
                val=normalizer.apply(windows_matrix(splits["val"])),
                test=normalizer.apply(windows_matrix(splits["test"])),
                normalizer=normalizer,
            )
    return nodes


def train_experiment(exp: Experiment, nodes: dict | None = None):
    nodes = nodes if nodes is not None else build_node_data(exp)
    shards = {key: nd.train for key, nd in nodes.items()}
    result = run_training(exp.topology, exp.training, exp.model, shards, exp.seed)
    return result, nodes


def _injected_samples(windows, injection, seed_offset):
    """Wrap normalized windows, inject the four-fault mix, return
    (matrix, labels, faults)."""
    from .data import WindowedSample

    samples = [WindowedSample(window=w, label=0) for w in windows]
    injected = inject_fault_mix(
        samples,
        rate=float(injection.get("rate", 0.1)),
        magnitude=float(injection.get("magnitude", 2.5)),
        seed=int(injection.get("seed", 0)) + seed_offset,
    )
    return (
        np.stack([s.window for s in injected]),
        [s.label for s in injected],
        [s.fault for s in injected],
    )


def calibrate_experiment(exp: Experiment, result: RunResult, nodes: dict, gamma=None):
    """Per-monitor thresholds from the injected validation split."""
    gamma = exp.gamma if gamma is None else gamma
    thresholds = {}
    for (s, n), nd in nodes.items():
        g, e, d = result.bundle_for(s, n)
        x, labels, faults = _injected_samples(nd.val, exp.injection, seed_offset=0)
        scored = score_windows(x, g, e, d, gamma, labels=labels, faults=faults)
        th, mean_normal, mean_abnormal, degenerate = calibrate_threshold(scored)
        thresholds[(s, n)] = {
            "threshold": th,
            "mean_normal": mean_normal,
            "mean_abnormal": mean_abnormal,
            "degenerate": degenerate,
        }
    return thresholds


def detect_experiment(exp: Experiment, result: RunResult, nodes: dict,
                      thresholds: dict, gamma=None):
    """Score and classify the injected test split on every monitor;
    returns (scored samples with node tags, pooled metrics, per-fault
    recall)."""
    gamma = exp.gamma if gamma is None else gamma
    all_scored = []
    for (s, n), nd in nodes.items():
        g, e, d = result.bundle_for(s, n)
        x, labels, faults = _injected_samples(nd.test, exp.injection, seed_offset=1)
        scored = score_windows(x, g, e, d, gamma, labels=labels, faults=faults)
        classify_all(scored, thresholds[(s, n)]["threshold"])
        for sample in scored:
            sample.window_id = (s, n, sample.window_id)
        all_scored.extend(scored)
    metrics = evaluate(all_scored)
    fault_recall = per_fault_recall(all_scored)
    return all_scored, metrics, fault_recall

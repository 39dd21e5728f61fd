"""End-to-end runs: train, compress, write artifacts; sweeps and ablation tables."""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional

import numpy as np

from . import ot
from .compression import (CompressionReport, block_distances, compress, compress_epsilon,
                          remove_blocks)
from .config import ConfigError, ExperimentConfig
from .datasets import DatasetKind, Splits, make_splits
from .net import ResidualNet, build_residual_mlp, save_checkpoint
from .training import Distance, EpochRecord, _needs_directions, heal, train, value_distance

log = logging.getLogger(__name__)

PLOT_COLUMNS = ("step", "cpl", "macs", "accuracy", "mean_distance")


@dataclass
class RunResult:
    report: CompressionReport
    net: ResidualNet
    dense_net: ResidualNet
    splits: Splits
    directory: Path


def _num_classes(cfg: ExperimentConfig, splits: Splits) -> int:
    if cfg.dataset.kind is DatasetKind.CSV:
        return int(max(splits.train.y.max(), splits.val.y.max(), splits.test.y.max())) + 1
    return cfg.dataset.n_classes


def build_net(cfg: ExperimentConfig, splits: Splits) -> ResidualNet:
    rng = np.random.default_rng(np.random.SeedSequence(cfg.train.seed).spawn(4)[3])
    return build_residual_mlp(splits.train.X.shape[1], cfg.net.widths, _num_classes(cfg, splits), rng,
                              hidden=cfg.net.hidden, activation=cfg.net.activation,
                              lift_activation=cfg.net.lift_activation)


def train_model(cfg: ExperimentConfig, splits: Optional[Splits] = None
                ) -> tuple[ResidualNet, list[EpochRecord], Splits]:
    splits = splits if splits is not None else make_splits(cfg.dataset)
    net = build_net(cfg, splits)
    history = train(net, splits.train.X, splits.train.y, cfg.train)
    return net, history, splits


def probe_accuracy(net: ResidualNet, X, y, cfg: ExperimentConfig) -> Optional[float]:
    """Accuracy after removing the ``probe_removals`` lowest-distance blocks in one shot."""
    n = cfg.compress.probe_removals
    if n <= 0 or n > len(net.live_eligible()):
        return None
    work = net.copy()
    rng = np.random.default_rng(np.random.SeedSequence(cfg.train.seed).spawn(3)[2])
    ranked = block_distances(work, X, cfg.train, rng, cfg.compress.score_batch_size).ranked()
    remove_blocks(work, ranked[:n])
    return work.accuracy(X, y)


def write_plot_csv(report: CompressionReport, path) -> None:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=PLOT_COLUMNS, lineterminator="\n")
    writer.writeheader()
    for row in report.plot_rows():
        writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
    Path(path).write_text(buf.getvalue(), encoding="utf-8")


def run_single(cfg: ExperimentConfig, directory, splits: Optional[Splits] = None) -> RunResult:
    """Train, compress (greedy with a budget, or one-shot with epsilon), optionally
    heal, and write the report, checkpoint and plot data into ``directory``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    net, history, splits = train_model(cfg, splits)
    dense = net.copy()
    probe = probe_accuracy(net, splits.val.X, splits.val.y, cfg)
    if cfg.compress.epsilon is not None:
        net, report = compress_epsilon(net, splits.val, cfg.compress.epsilon, cfg.train,
                                       score_batch_size=cfg.compress.score_batch_size)
    else:
        net, report = compress(net, splits.train, splits.val, cfg.compress.delta, cfg.train,
                               pretrained=True, score_batch_size=cfg.compress.score_batch_size)
    report.config = cfg.echo()
    report.training_log = [vars(r) for r in history]
    report.probe_accuracy = probe
    if cfg.compress.heal_epochs > 0:
        heal(net, splits.train.X, splits.train.y, cfg.train, cfg.compress.heal_epochs)
        report.healed_accuracy = net.accuracy(splits.val.X, splits.val.y)
    report.test_accuracy = net.accuracy(splits.test.X, splits.test.y)
    (directory / cfg.outputs.report).write_text(report.to_json(), encoding="utf-8")
    save_checkpoint(net, directory / cfg.outputs.checkpoint)
    write_plot_csv(report, directory / cfg.outputs.plot_data)
    log.info("run written to %s (removed %s)", directory, report.removal_order)
    return RunResult(report, net, dense, splits, directory)


AXIS_LABELS = {"lam": "lambda"}


def axis_label(axis: str) -> str:
    return AXIS_LABELS.get(axis, axis)


def cell_name(labels: dict) -> str:
    return "_".join(f"{axis_label(k)}={v}" for k, v in labels.items())


def check_sweep(cfg: ExperimentConfig, max_axes: Optional[int] = None) -> None:
    axes = cfg.sweep.axes()
    if max_axes is not None and not 1 <= len(axes) <= max_axes:
        raise ConfigError(f"expected 1 to {max_axes} swept axes, got {len(axes)}")
    distances = [Distance(d) for d in cfg.sweep.distance] if cfg.sweep.distance else [cfg.train.distance]
    projected = [d for d in distances if _needs_directions(d)]
    for axis in ("n_proj", "seed_mode"):
        if axis in axes and len(projected) != len(distances):
            raise ConfigError(f"sweeping {axis} conflicts with distances that use no projections: "
                              f"{sorted(d.value for d in distances if d not in projected)}")


def run_experiment(cfg: ExperimentConfig, out_dir=None) -> list[RunResult]:
    """One run, or one run per sweep cell in its own subdirectory."""
    out = Path(out_dir if out_dir is not None else cfg.outputs.directory)
    check_sweep(cfg)
    if not cfg.sweep.axes() and not cfg.sweep.seeds:
        return [run_single(cfg, out)]
    splits = make_splits(cfg.dataset)
    return [run_single(cell, out / cell_name(labels), splits) for labels, cell in cfg.cells()]


# --- ablations ---------------------------------------------------------------------------

def nested_mean_distances(net: ResidualNet, X, n_values, cfg: ExperimentConfig) -> dict[int, float]:
    """Mean max-sliced block distance of one net, with the direction set for
    ``n`` being the first ``n`` rows of one shared draw; the values are
    therefore nondecreasing in ``n``."""
    n_max = max(n_values)
    rng = np.random.default_rng(cfg.seed)
    _, pairs = net.forward_collect(np.asarray(X, dtype=np.float64))
    dims = sorted({a.shape[1] for a, _ in pairs.values()})
    pools = {d: ot.sample_unit_directions(d, n_max, rng) for d in dims}
    dcfg = replace(cfg.train.distance_cfg, max_mode=ot.MaxMode.RANDOM_SEARCH)
    out = {}
    for n in n_values:
        vals = [value_distance(Distance.MAX_SLICED, a.value, b.value, dcfg, pools[a.shape[1]][:n])
                for a, b in pairs.values()]
        out[n] = float(np.mean(vals)) if vals else 0.0
    return out


def _median(values):
    vals = [v for v in values if v is not None]
    return float(np.median(vals)) if vals else None


def ablate(cfg: ExperimentConfig, out_dir=None) -> list[dict]:
    """Full run per sweep cell, aggregated into ``ablation.csv`` (medians over seeds)."""
    check_sweep(cfg, max_axes=2)
    out = Path(out_dir if out_dir is not None else cfg.outputs.directory)
    axes = cfg.sweep.axes()
    results = run_experiment(cfg, out)
    groups: dict[tuple, list[RunResult]] = {}
    for (labels, _), res in zip(cfg.cells(), results):
        groups.setdefault(tuple(labels[a] for a in axes), []).append(res)

    nested = None
    if "n_proj" in axes:
        ref = results[0]
        nested = nested_mean_distances(ref.dense_net, ref.splits.val.X, cfg.sweep.n_proj, cfg)

    rows = []
    for key, runs in groups.items():
        reps = [r.report for r in runs]
        row = {axis_label(a): v for a, v in zip(axes, key)}
        row.update({
            "n_runs": len(runs),
            "dense_accuracy": _median([r.dense_accuracy for r in reps]),
            "final_accuracy": _median([r.final_accuracy for r in reps]),
            "mean_distance": _median([r.distance_snapshots[0].mean if r.distance_snapshots
                                      else r.final_distances.mean for r in reps]),
            "probe_accuracy": _median([r.probe_accuracy for r in reps]),
            "removed": _median([len(r.removal_order) - (r.rolled_back is not None) for r in reps]),
            "cpl": _median([x.net.critical_path_length() for x in runs]),
            "macs": _median([x.net.macs() for x in runs]),
        })
        if nested is not None:
            row["nested_mean_distance"] = nested[int(row["n_proj"])]
        rows.append(row)
    write_table(rows, out / "ablation.csv")
    return rows


def write_table(rows: list[dict], path) -> None:
    if not rows:
        raise ValueError("nothing to write")
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: ("" if v is None else repr(v) if isinstance(v, float) else v)
                         for k, v in row.items()})
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(buf.getvalue(), encoding="utf-8")


def read_table(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


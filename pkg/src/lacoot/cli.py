"""Command-line entry points: train, compress, ablate, distances, eval.

Exit codes: 0 success, 2 configuration error, 3 runtime error. Errors are
reported on stderr as a one-line JSON object.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import ot
from .compression import block_distances
from .config import ConfigError, read_config
from .datasets import load_cloud_csv, make_splits
from .experiment import ablate, run_experiment, train_model
from .net import load_checkpoint, save_checkpoint

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3

# flag dest -> "section.key" in the config file
FLAG_KEYS = {
    "dataset": "dataset.kind", "n_samples": "dataset.n_samples", "n_classes": "dataset.n_classes",
    "input_dim": "dataset.input_dim", "noise": "dataset.noise", "split": "dataset.split",
    "csv": "dataset.path",
    "widths": "net.widths", "hidden": "net.hidden", "activation": "net.activation",
    "lift_activation": "net.lift_activation",
    "lam": "train.lambda", "distance": "train.distance", "p": "train.p", "n_proj": "train.n_proj",
    "max_mode": "train.max_mode", "seed_mode": "train.seed_mode",
    "projection_seed": "train.projection_seed", "epochs": "train.epochs",
    "batch_size": "train.batch_size", "lr": "train.learning_rate", "momentum": "train.momentum",
    "milestones": "train.milestones", "lr_drop": "train.lr_drop", "resample": "train.resample",
    "delta": "compress.delta", "epsilon": "compress.epsilon", "heal_epochs": "compress.heal_epochs",
    "probe_removals": "compress.probe_removals", "score_batch_size": "compress.score_batch_size",
    "sweep_lambda": "sweep.lambda", "sweep_n_proj": "sweep.n_proj",
    "sweep_batch_size": "sweep.batch_size", "sweep_distance": "sweep.distance",
    "sweep_seed_mode": "sweep.seed_mode", "sweep_seeds": "sweep.seeds",
    "out_dir": "outputs.directory", "report": "outputs.report", "plot_data": "outputs.plot_data",
    "checkpoint_name": "outputs.checkpoint",
}

# --seed overrides every seed-bearing key unless that key was also given as a flag
SEED_KEYS = ("meta.seed", "dataset.seed", "train.seed", "train.projection_seed")


def _experiment_flags(p: argparse.ArgumentParser, sweeps: bool) -> None:
    p.add_argument("--config", type=Path, help="experiment config file; flags take precedence")
    p.add_argument("--seed", type=int, help="seed for all randomness (data, init, shuffling, projections)")
    p.add_argument("-v", "--verbose", action="store_true")
    g = p.add_argument_group("dataset")
    g.add_argument("--dataset", choices=["blobs", "rings", "xor", "csv"])
    g.add_argument("--csv", metavar="PATH", help="CSV file with a 'label' column")
    g.add_argument("--n-samples", type=int)
    g.add_argument("--n-classes", type=int)
    g.add_argument("--input-dim", type=int)
    g.add_argument("--noise", type=float)
    g.add_argument("--split", metavar="TRAIN,VAL,TEST")
    g = p.add_argument_group("network")
    g.add_argument("--widths", metavar="W1,W2,...")
    g.add_argument("--hidden", type=int)
    g.add_argument("--activation", choices=["relu", "linear"])
    g.add_argument("--lift-activation", choices=["relu", "linear", "none"])
    g = p.add_argument_group("training")
    g.add_argument("--lambda", dest="lam", type=float, help="regularization weight")
    g.add_argument("--distance", choices=["max_sliced", "sliced", "mean_l1", "mean_l2", "mmd",
                                          "kl_diag_gaussian"])
    g.add_argument("--p", type=float)
    g.add_argument("--n-proj", type=int)
    g.add_argument("--max-mode", choices=["random_search", "projected_ascent"])
    g.add_argument("--seed-mode", choices=["seeded", "unseeded"])
    g.add_argument("--projection-seed", type=int)
    g.add_argument("--epochs", type=int)
    g.add_argument("--batch-size", type=int)
    g.add_argument("--lr", type=float)
    g.add_argument("--momentum", type=float)
    g.add_argument("--milestones", metavar="F1,F2,...")
    g.add_argument("--lr-drop", type=float)
    g.add_argument("--resample", choices=["minibatch", "epoch"])
    g = p.add_argument_group("compression")
    g.add_argument("--delta", type=float)
    g.add_argument("--epsilon", type=float, help="one-shot removal threshold instead of the greedy loop")
    g.add_argument("--heal-epochs", type=int)
    g.add_argument("--probe-removals", type=int)
    g.add_argument("--score-batch-size", type=int)
    if sweeps:
        g = p.add_argument_group("sweep (comma-separated values)")
        g.add_argument("--sweep-lambda")
        g.add_argument("--sweep-n-proj")
        g.add_argument("--sweep-batch-size")
        g.add_argument("--sweep-distance")
        g.add_argument("--sweep-seed-mode")
        g.add_argument("--sweep-seeds")
    g = p.add_argument_group("outputs")
    g.add_argument("--out-dir")
    g.add_argument("--report")
    g.add_argument("--plot-data")
    g.add_argument("--checkpoint-name")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lacoot", description="Distance-regularized residual nets and block removal.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a dense net; write checkpoint and training log")
    _experiment_flags(p, sweeps=False)

    p = sub.add_parser("compress", help="train, compress, and write report, checkpoint and plot data")
    _experiment_flags(p, sweeps=True)

    p = sub.add_parser("ablate", help="run every sweep cell and write an aggregated ablation.csv")
    _experiment_flags(p, sweeps=True)

    p = sub.add_parser("eval", help="evaluate a checkpoint on the configured dataset")
    _experiment_flags(p, sweeps=False)
    p.add_argument("checkpoint", type=Path)

    p = sub.add_parser("distances", help="distance between two point clouds stored as CSV")
    p.add_argument("cloud_a", type=Path)
    p.add_argument("cloud_b", type=Path)
    p.add_argument("--metric", default="max_sliced",
                   choices=["max_sliced", "sliced", "exact", "mmd", "kl_diag_gaussian", "mean_l1", "mean_l2"])
    p.add_argument("--p", type=float, default=2.0)
    p.add_argument("--n-proj", type=int, default=40)
    p.add_argument("--max-mode", default="projected_ascent", choices=["random_search", "projected_ascent"])
    p.add_argument("--seed", type=int, default=0, help="seed for the projection directions")
    p.add_argument("-v", "--verbose", action="store_true")
    return parser


def overrides_from_args(args: argparse.Namespace) -> dict[str, str]:
    out = {}
    for dest, key in FLAG_KEYS.items():
        value = getattr(args, dest, None)
        if value is not None:
            out[key] = str(value)
    if getattr(args, "csv", None) is not None and getattr(args, "dataset", None) is None:
        out["dataset.kind"] = "csv"
    if getattr(args, "seed", None) is not None:
        for key in SEED_KEYS:
            out.setdefault(key, str(args.seed))
    return out


def _cmd_train(args, cfg) -> int:
    net, history, splits = train_model(cfg)
    out = Path(cfg.outputs.directory)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(net, out / cfg.outputs.checkpoint)
    dists = block_distances(net, splits.val.X, cfg.train, np.random.default_rng(cfg.train.seed))
    log = {"config": cfg.echo(), "training_log": [vars(r) for r in history],
           "val_accuracy": net.accuracy(splits.val.X, splits.val.y),
           "block_distances": dists.to_dict()}
    (out / "train_log.json").write_text(json.dumps(log, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    print(json.dumps({"checkpoint": str(out / cfg.outputs.checkpoint),
                      "val_accuracy": log["val_accuracy"]}, sort_keys=True))
    return EXIT_OK


def _cmd_compress(args, cfg) -> int:
    for res in run_experiment(cfg):
        r = res.report
        print(json.dumps({"directory": str(res.directory), "dense_accuracy": r.dense_accuracy,
                          "final_accuracy": r.final_accuracy, "removal_order": r.removal_order,
                          "rolled_back": r.rolled_back}, sort_keys=True))
    return EXIT_OK


def _cmd_ablate(args, cfg) -> int:
    rows = ablate(cfg)
    print(f"{len(rows)} rows written to {Path(cfg.outputs.directory) / 'ablation.csv'}")
    return EXIT_OK


def _cmd_eval(args, cfg) -> int:
    net = load_checkpoint(args.checkpoint)
    splits = make_splits(cfg.dataset)
    if splits.val.X.shape[1] != net.input_dim:
        raise ValueError(f"{args.checkpoint}: net expects {net.input_dim} features, data has {splits.val.X.shape[1]}")
    out = {"val_accuracy": net.accuracy(splits.val.X, splits.val.y),
           "test_accuracy": net.accuracy(splits.test.X, splits.test.y),
           "cpl": net.critical_path_length(), "macs": net.macs(),
           "states": [b.state.value for b in net.blocks]}
    if net.live_eligible():
        out["block_distances"] = block_distances(net, splits.val.X, cfg.train,
                                                 np.random.default_rng(cfg.train.seed)).to_dict()
    print(json.dumps(out, sort_keys=True))
    return EXIT_OK


def compute_distance(a: np.ndarray, b: np.ndarray, metric: str, cfg: ot.DistanceConfig) -> float:
    if metric == "max_sliced":
        return ot.max_sliced_wasserstein(a, b, cfg)[0]
    if metric == "sliced":
        return ot.sliced_wasserstein(a, b, cfg)
    if metric == "exact":
        return ot.exact_wasserstein_small(a, b, cfg.p)
    if metric == "mmd":
        return ot.mmd_rbf(a, b)
    if metric == "kl_diag_gaussian":
        return ot.kl_diag_gaussian(a, b)
    if metric in ("mean_l1", "mean_l2"):
        return ot.mean_lp(a, b, 1 if metric == "mean_l1" else 2)
    raise ValueError(f"unknown metric {metric!r}")


def _read_cloud(path: Path) -> np.ndarray:
    try:
        return load_cloud_csv(path)
    except (OSError, ValueError) as exc:
        msg = str(exc)
        raise ValueError(msg if str(path) in msg else f"{path}: {msg}") from None


def _cmd_distances(args) -> int:
    a, b = _read_cloud(args.cloud_a), _read_cloud(args.cloud_b)
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"{args.cloud_b}: has {b.shape[1]} columns, {args.cloud_a} has {a.shape[1]}")
    if len(a) != len(b) and args.metric not in ("mmd", "kl_diag_gaussian"):
        raise ValueError(f"{args.cloud_b}: has {len(b)} rows, {args.cloud_a} has {len(a)}")
    cfg = ot.DistanceConfig(p=args.p, n_proj=args.n_proj, max_mode=ot.MaxMode(args.max_mode), seed=args.seed)
    print(f"{compute_distance(a, b, args.metric, cfg):.12g}")
    return EXIT_OK


def _fail(code: int, exc: BaseException) -> int:
    print(json.dumps({"error": type(exc).__name__, "message": str(exc), "exit_code": code}), file=sys.stderr)
    return code


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "distances":
        try:
            return _cmd_distances(args)
        except Exception as exc:
            return _fail(EXIT_RUNTIME, exc)
    try:
        cfg = read_config(args.config, overrides_from_args(args))
    except ConfigError as exc:
        return _fail(EXIT_CONFIG, exc)
    handlers = {"train": _cmd_train, "compress": _cmd_compress, "ablate": _cmd_ablate, "eval": _cmd_eval}
    try:
        return handlers[args.command](args, cfg)
    except ConfigError as exc:
        return _fail(EXIT_CONFIG, exc)
    except Exception as exc:
        logging.getLogger(__name__).debug("command failed", exc_info=True)
        return _fail(EXIT_RUNTIME, exc)


if __name__ == "__main__":
    sys.exit(main())

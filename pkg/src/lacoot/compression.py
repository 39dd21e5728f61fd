"""Post-training block removal driven by per-block distances."""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .net import ResidualNet, block_lipschitz
from .training import (BlockDistanceVector, DirectionSource, EpochRecord, TrainConfig,
                       _needs_directions, train, value_distance)

REPORT_VERSION = 1


class ScoreMethod(str, enum.Enum):
    MSW = "msw"
    BLOCK_INFLUENCE = "block_influence"
    RANDOM = "random"


def block_distances(net: ResidualNet, X, cfg: TrainConfig,
                    rng: Optional[np.random.Generator] = None,
                    batch_size: Optional[int] = None,
                    directions: Optional[np.ndarray] = None) -> BlockDistanceVector:
    """Distance between input and output clouds of every eligible live block.

    ``X`` is split into batches of ``batch_size`` (one batch when None) and
    the per-batch values are averaged. One direction set is shared by all
    blocks and batches of a call.
    """
    X = np.asarray(X, dtype=np.float64)
    if len(X) == 0:
        raise ValueError("no samples to score on")
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    size = batch_size or len(X)
    source = DirectionSource(cfg.distance_cfg, rng)
    sums: dict[int, float] = {}
    n_batches = 0
    for start in range(0, len(X), size):
        chunk = X[start:start + size]
        if len(chunk) < 2 and n_batches:
            continue
        _, pairs = net.forward_collect(chunk)
        for k, (a, b) in pairs.items():
            dirs = directions
            if dirs is None and _needs_directions(cfg.distance):
                dirs = source.draw(a.shape[1])
            sums[k] = sums.get(k, 0.0) + value_distance(cfg.distance, a.value, b.value,
                                                        cfg.distance_cfg, dirs)
        n_batches += 1
    return BlockDistanceVector({k: v / n_batches for k, v in sums.items()})


def epsilon_select(distances: BlockDistanceVector, epsilon: float) -> set[int]:
    """Blocks whose distance is at most ``epsilon`` (one-shot removal candidates)."""
    if epsilon < 0:
        raise ValueError("epsilon must be nonnegative")
    return {k for k, v in distances.values.items() if v <= epsilon}


def remove_blocks(net: ResidualNet, blocks) -> None:
    for k in sorted(blocks):
        net.replace_with_identity(k)


def block_influence(net: ResidualNet, X, y) -> dict[int, float]:
    """Validation-accuracy drop caused by removing each eligible live block alone."""
    base = net.accuracy(X, y)
    drops = {}
    for k in net.live_eligible():
        net.replace_with_identity(k)
        try:
            drops[k] = base - net.accuracy(X, y)
        finally:
            net.restore(k)
    return drops


def score_blocks(net: ResidualNet, X, y, method: ScoreMethod, cfg: TrainConfig,
                 rng: Optional[np.random.Generator] = None) -> list[tuple[int, float]]:
    """Eligible live blocks ordered from first-to-remove to last, with their scores.

    MSW orders by block distance, block influence by the accuracy drop of
    removing the block alone, and random by a shuffle (score = position).
    Ties go to the lower block index.
    """
    method = ScoreMethod(method)
    if not net.live_eligible():
        raise ValueError("no eligible block left to score")
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    if method is ScoreMethod.MSW:
        scores = block_distances(net, X, cfg, rng).values
    elif method is ScoreMethod.BLOCK_INFLUENCE:
        scores = block_influence(net, X, y)
    else:
        order = [int(k) for k in rng.permutation(net.live_eligible())]
        return [(k, float(i)) for i, k in enumerate(order)]
    return sorted(scores.items(), key=lambda kv: (kv[1], kv[0]))


@dataclass
class RemovalCurve:
    method: str
    removal_order: list[int]
    accuracy: list[float]
    macs: list[int]
    cpl: list[int]


def removal_curve(net: ResidualNet, X, y, method: ScoreMethod, cfg: TrainConfig,
                  rng: Optional[np.random.Generator] = None,
                  max_steps: Optional[int] = None) -> RemovalCurve:
    """Remove blocks one at a time, re-scoring after every removal, with no budget.

    Works on a copy; ``net`` is left untouched. Index 0 of each trajectory is
    the dense net.
    """
    method = ScoreMethod(method)
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    work = net.copy()
    curve = RemovalCurve(method.value, [], [work.accuracy(X, y)], [work.macs()], [work.critical_path_length()])
    random_order = None
    if method is ScoreMethod.RANDOM:
        random_order = [k for k, _ in score_blocks(work, X, y, method, cfg, rng)]
    while work.live_eligible() and (max_steps is None or len(curve.removal_order) < max_steps):
        if random_order is not None:
            k = random_order[len(curve.removal_order)]
        else:
            k = score_blocks(work, X, y, method, cfg, rng)[0][0]
        work.replace_with_identity(k)
        curve.removal_order.append(k)
        curve.accuracy.append(work.accuracy(X, y))
        curve.macs.append(work.macs())
        curve.cpl.append(work.critical_path_length())
    return curve


@dataclass
class CompressionReport:
    config: dict
    dense_accuracy: float
    dense_cpl: int
    dense_macs: int
    removal_order: list[int] = field(default_factory=list)
    accuracy_trajectory: list[float] = field(default_factory=list)
    distance_snapshots: list[BlockDistanceVector] = field(default_factory=list)
    cpl_trajectory: list[int] = field(default_factory=list)
    macs_trajectory: list[int] = field(default_factory=list)
    final_distances: BlockDistanceVector = field(default_factory=lambda: BlockDistanceVector({}))
    rolled_back: Optional[int] = None
    final_accuracy: float = math.nan
    lipschitz_per_block: list[float] = field(default_factory=list)
    lipschitz_product: float = math.nan
    training_log: list[dict] = field(default_factory=list)
    probe_accuracy: Optional[float] = None
    healed_accuracy: Optional[float] = None
    test_accuracy: Optional[float] = None
    format_version: int = REPORT_VERSION

    def to_dict(self) -> dict:
        return {
            "format_version": self.format_version,
            "config": self.config,
            "dense_accuracy": self.dense_accuracy,
            "dense_cpl": self.dense_cpl,
            "dense_macs": self.dense_macs,
            "removal_order": self.removal_order,
            "accuracy_trajectory": self.accuracy_trajectory,
            "distance_snapshots": [s.to_dict() for s in self.distance_snapshots],
            "cpl_trajectory": self.cpl_trajectory,
            "macs_trajectory": self.macs_trajectory,
            "final_distances": self.final_distances.to_dict(),
            "rolled_back": self.rolled_back,
            "final_accuracy": self.final_accuracy,
            "lipschitz_per_block": self.lipschitz_per_block,
            "lipschitz_product": self.lipschitz_product,
            "training_log": self.training_log,
            "probe_accuracy": self.probe_accuracy,
            "healed_accuracy": self.healed_accuracy,
            "test_accuracy": self.test_accuracy,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "CompressionReport":
        if d.get("format_version") != REPORT_VERSION:
            raise ValueError(f"unsupported report version {d.get('format_version')}")
        return cls(
            config=d["config"],
            dense_accuracy=d["dense_accuracy"],
            dense_cpl=d["dense_cpl"],
            dense_macs=d["dense_macs"],
            removal_order=list(d["removal_order"]),
            accuracy_trajectory=list(d["accuracy_trajectory"]),
            distance_snapshots=[BlockDistanceVector.from_dict(s) for s in d["distance_snapshots"]],
            cpl_trajectory=list(d["cpl_trajectory"]),
            macs_trajectory=list(d["macs_trajectory"]),
            final_distances=BlockDistanceVector.from_dict(d["final_distances"]),
            rolled_back=d["rolled_back"],
            final_accuracy=d["final_accuracy"],
            lipschitz_per_block=list(d["lipschitz_per_block"]),
            lipschitz_product=d["lipschitz_product"],
            training_log=list(d["training_log"]),
            probe_accuracy=d.get("probe_accuracy"),
            healed_accuracy=d.get("healed_accuracy"),
            test_accuracy=d.get("test_accuracy"),
        )

    @classmethod
    def from_json(cls, text: str) -> "CompressionReport":
        return cls.from_dict(json.loads(text))

    def plot_rows(self) -> list[dict]:
        """Dense point followed by one row per removal step."""
        means = [s.mean for s in self.distance_snapshots[1:]] + [self.final_distances.mean]
        rows = [{"step": 0, "cpl": self.dense_cpl, "macs": self.dense_macs,
                 "accuracy": self.dense_accuracy,
                 "mean_distance": self.distance_snapshots[0].mean if self.distance_snapshots
                 else self.final_distances.mean}]
        for i, k in enumerate(self.removal_order):
            rows.append({"step": i + 1, "cpl": self.cpl_trajectory[i], "macs": self.macs_trajectory[i],
                         "accuracy": self.accuracy_trajectory[i], "mean_distance": means[i]})
        return rows


def _finish(net: ResidualNet, report: CompressionReport, Xv, yv, cfg: TrainConfig) -> None:
    report.final_accuracy = net.accuracy(Xv, yv)
    per_block, product = block_lipschitz(net, Xv, rng=np.random.default_rng(cfg.seed))
    report.lipschitz_per_block = per_block
    report.lipschitz_product = product


def compress(net: ResidualNet, train_data, val_data, delta: float, cfg: TrainConfig,
             lam: Optional[float] = None, pretrained: bool = False,
             rng: Optional[np.random.Generator] = None,
             score_batch_size: Optional[int] = None) -> tuple[ResidualNet, CompressionReport]:
    """Train (unless ``pretrained``), then greedily replace the block with the
    smallest validation distance by the identity until accuracy falls more than
    ``delta`` below the dense accuracy.

    The removal that breaks the budget is undone on the returned net but kept
    in the report (``rolled_back``). ``net`` is modified in place.
    """
    if delta < 0:
        raise ValueError("delta must be nonnegative")
    if lam is not None:
        cfg = cfg.replace(lam=lam)
    history: list[EpochRecord] = []
    if not pretrained:
        history = train(net, train_data.X, train_data.y, cfg)
    if rng is None:
        rng = np.random.default_rng(np.random.SeedSequence(cfg.seed).spawn(3)[2])
    Xv, yv = val_data.X, val_data.y
    dense_acc = net.accuracy(Xv, yv)
    report = CompressionReport(config=cfg.to_dict(), dense_accuracy=dense_acc,
                               dense_cpl=net.critical_path_length(), dense_macs=net.macs(),
                               training_log=[vars(r) for r in history])
    report.config["delta"] = delta
    while net.live_eligible():
        snapshot = block_distances(net, Xv, cfg, rng, score_batch_size)
        k = snapshot.argmin()
        net.replace_with_identity(k)
        acc = net.accuracy(Xv, yv)
        report.removal_order.append(k)
        report.accuracy_trajectory.append(acc)
        report.distance_snapshots.append(snapshot)
        report.cpl_trajectory.append(net.critical_path_length())
        report.macs_trajectory.append(net.macs())
        if dense_acc - acc > delta:
            report.final_distances = block_distances(net, Xv, cfg, rng, score_batch_size)
            net.restore(k)
            report.rolled_back = k
            break
    else:
        report.final_distances = BlockDistanceVector({})
    _finish(net, report, Xv, yv, cfg)
    return net, report


def compress_epsilon(net: ResidualNet, val_data, epsilon: float, cfg: TrainConfig,
                     rng: Optional[np.random.Generator] = None,
                     score_batch_size: Optional[int] = None) -> tuple[ResidualNet, CompressionReport]:
    """One-shot variant: score once and remove every block with distance <= ``epsilon``.

    There is no accuracy budget and nothing is rolled back. Blocks are removed
    in ascending distance order so the trajectories read like the greedy ones.
    """
    if rng is None:
        rng = np.random.default_rng(np.random.SeedSequence(cfg.seed).spawn(3)[2])
    Xv, yv = val_data.X, val_data.y
    report = CompressionReport(config=cfg.to_dict(), dense_accuracy=net.accuracy(Xv, yv),
                               dense_cpl=net.critical_path_length(), dense_macs=net.macs())
    report.config["epsilon"] = epsilon
    snapshot = block_distances(net, Xv, cfg, rng, score_batch_size)
    chosen = epsilon_select(snapshot, epsilon)
    for k in snapshot.ranked():
        if k not in chosen:
            continue
        net.replace_with_identity(k)
        report.removal_order.append(k)
        report.accuracy_trajectory.append(net.accuracy(Xv, yv))
        report.distance_snapshots.append(snapshot)
        report.cpl_trajectory.append(net.critical_path_length())
        report.macs_trajectory.append(net.macs())
    if net.live_eligible():
        report.final_distances = block_distances(net, Xv, cfg, rng, score_batch_size)
    _finish(net, report, Xv, yv, cfg)
    return net, report

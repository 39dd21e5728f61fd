"""Experiment configuration: sectioned ``key = value`` files and flag overrides.

Example::

    [meta]
    format_version = 1
    seed = 0

    [train]
    lambda = 1.0
    distance = max_sliced

Unknown sections or keys are rejected.
"""

from __future__ import annotations

import configparser
import itertools
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Optional

from .datasets import DatasetKind, DatasetSpec
from .ot import DistanceConfig, MaxMode
from .training import Distance, TrainConfig

FORMAT_VERSION = 1


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class NetSpec:
    widths: tuple[int, ...] = (16,) * 7
    hidden: Optional[int] = None
    activation: str = "relu"
    lift_activation: Optional[str] = "linear"


@dataclass(frozen=True)
class CompressSpec:
    delta: float = 0.02
    epsilon: Optional[float] = None
    heal_epochs: int = 0
    probe_removals: int = 3
    score_batch_size: Optional[int] = None


@dataclass(frozen=True)
class SweepSpec:
    lam: Optional[tuple[float, ...]] = None
    n_proj: Optional[tuple[int, ...]] = None
    batch_size: Optional[tuple[int, ...]] = None
    distance: Optional[tuple[str, ...]] = None
    seed_mode: Optional[tuple[str, ...]] = None
    seeds: Optional[tuple[int, ...]] = None

    AXES = ("lam", "n_proj", "batch_size", "distance", "seed_mode")

    def axes(self) -> list[str]:
        return [a for a in self.AXES if getattr(self, a) is not None]


@dataclass(frozen=True)
class OutputSpec:
    directory: str = "runs"
    report: str = "report.json"
    plot_data: str = "plot_data.csv"
    checkpoint: str = "model.ckpt"


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    net: NetSpec = field(default_factory=NetSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    compress: CompressSpec = field(default_factory=CompressSpec)
    sweep: SweepSpec = field(default_factory=SweepSpec)
    outputs: OutputSpec = field(default_factory=OutputSpec)
    seed: int = 0

    def cells(self) -> list[tuple[dict, "ExperimentConfig"]]:
        """Cross product of the swept values (times seeds), as ``(labels, config)`` pairs."""
        axes = self.sweep.axes()
        seeds = self.sweep.seeds or (None,)
        values = [getattr(self.sweep, a) for a in axes]
        out = []
        for combo in itertools.product(*values):
            for seed in seeds:
                labels = dict(zip(axes, combo))
                cfg = self
                for axis, value in labels.items():
                    cfg = cfg.with_axis(axis, value)
                if seed is not None:
                    labels["seed"] = seed
                    cfg = replace(cfg, train=cfg.train.replace(seed=seed))
                out.append((labels, replace(cfg, sweep=SweepSpec())))
        return out

    def with_axis(self, axis: str, value) -> "ExperimentConfig":
        t = self.train
        if axis == "lam":
            t = t.replace(lam=float(value))
        elif axis == "n_proj":
            t = t.replace(distance_cfg=replace(t.distance_cfg, n_proj=int(value)))
        elif axis == "batch_size":
            t = t.replace(batch_size=int(value))
        elif axis == "distance":
            t = t.replace(distance=Distance(value))
        elif axis == "seed_mode":
            seed = None if value == "unseeded" else (t.distance_cfg.seed if t.distance_cfg.seed is not None else self.seed)
            t = t.replace(distance_cfg=replace(t.distance_cfg, seed=seed))
        else:
            raise ConfigError(f"unknown sweep axis {axis!r}")
        return replace(self, train=t)

    def echo(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "seed": self.seed,
            "dataset": {"kind": self.dataset.kind.value, "n_samples": self.dataset.n_samples,
                        "n_classes": self.dataset.n_classes, "input_dim": self.dataset.input_dim,
                        "noise": self.dataset.noise, "split": list(self.dataset.split),
                        "seed": self.dataset.seed, "path": self.dataset.path},
            "net": {"widths": list(self.net.widths), "hidden": self.net.hidden,
                    "activation": self.net.activation, "lift_activation": self.net.lift_activation},
            "train": self.train.to_dict(),
            "compress": {"delta": self.compress.delta, "epsilon": self.compress.epsilon,
                         "heal_epochs": self.compress.heal_epochs,
                         "probe_removals": self.compress.probe_removals,
                         "score_batch_size": self.compress.score_batch_size},
        }


# --- parsing ------------------------------------------------------------------------------

KNOWN_KEYS = {
    "meta": {"format_version", "seed"},
    "dataset": {"kind", "n_samples", "n_classes", "input_dim", "noise", "split", "seed", "path"},
    "net": {"widths", "hidden", "activation", "lift_activation"},
    "train": {"lambda", "distance", "p", "n_proj", "max_mode", "seed_mode", "projection_seed",
              "epochs", "batch_size", "learning_rate", "momentum", "seed", "milestones", "lr_drop",
              "resample"},
    "compress": {"delta", "epsilon", "heal_epochs", "probe_removals", "score_batch_size"},
    "sweep": {"lambda", "n_proj", "batch_size", "distance", "seed_mode", "seeds"},
    "outputs": {"directory", "report", "plot_data", "checkpoint"},
}


def _list(text: str, conv) -> tuple:
    items = [t.strip() for t in text.split(",") if t.strip()]
    if not items:
        raise ConfigError("empty list")
    return tuple(conv(t) for t in items)


def _optional(text: str, conv):
    return None if text.strip().lower() in ("", "none") else conv(text)


def read_config(path=None, overrides: Optional[dict[str, str]] = None) -> ExperimentConfig:
    """Load ``path`` (or defaults) and apply ``{"section.key": value}`` overrides."""
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"{path}: no such config file")
        try:
            parser.read_string(path.read_text(encoding="utf-8"), source=str(path))
        except configparser.Error as exc:
            raise ConfigError(f"{path}: {exc}") from None
    for dotted, value in (overrides or {}).items():
        section, key = dotted.split(".", 1)
        if not parser.has_section(section):
            parser.add_section(section)
        parser.set(section, key, str(value))
    try:
        return _build(parser)
    except ConfigError:
        raise
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from None


def _build(parser: configparser.ConfigParser) -> ExperimentConfig:
    for section in parser.sections():
        if section not in KNOWN_KEYS:
            raise ConfigError(f"unknown section [{section}]")
        unknown = set(parser[section]) - KNOWN_KEYS[section]
        if unknown:
            raise ConfigError(f"unknown key(s) in [{section}]: {', '.join(sorted(unknown))}")

    def get(section, key, default=None):
        if parser.has_option(section, key):
            return parser.get(section, key)
        return default

    version = int(get("meta", "format_version", FORMAT_VERSION))
    if version != FORMAT_VERSION:
        raise ConfigError(f"unsupported config format_version {version}")
    seed = int(get("meta", "seed", 0))

    d = DatasetSpec()
    dataset = DatasetSpec(
        kind=DatasetKind(get("dataset", "kind", d.kind.value)),
        n_samples=int(get("dataset", "n_samples", d.n_samples)),
        n_classes=int(get("dataset", "n_classes", d.n_classes)),
        input_dim=int(get("dataset", "input_dim", d.input_dim)),
        noise=float(get("dataset", "noise", d.noise)),
        split=_list(get("dataset", "split", "0.6,0.2,0.2"), float),
        seed=int(get("dataset", "seed", seed)),
        path=get("dataset", "path"),
    )

    n = NetSpec()
    net = NetSpec(
        widths=_list(get("net", "widths", ",".join(map(str, n.widths))), int),
        hidden=_optional(get("net", "hidden", ""), int),
        activation=get("net", "activation", n.activation),
        lift_activation=_optional(get("net", "lift_activation", n.lift_activation or ""), str),
    )

    t = TrainConfig()
    seed_mode = get("train", "seed_mode", "unseeded")
    if seed_mode not in ("seeded", "unseeded"):
        raise ConfigError(f"seed_mode must be 'seeded' or 'unseeded', got {seed_mode!r}")
    proj_seed = int(get("train", "projection_seed", seed))
    dcfg = DistanceConfig(
        p=float(get("train", "p", t.distance_cfg.p)),
        n_proj=int(get("train", "n_proj", t.distance_cfg.n_proj)),
        max_mode=MaxMode(get("train", "max_mode", t.distance_cfg.max_mode.value)),
        seed=proj_seed if seed_mode == "seeded" else None,
    )
    train = TrainConfig(
        lam=float(get("train", "lambda", t.lam)),
        distance=Distance(get("train", "distance", t.distance.value)),
        distance_cfg=dcfg,
        epochs=int(get("train", "epochs", t.epochs)),
        batch_size=int(get("train", "batch_size", t.batch_size)),
        learning_rate=float(get("train", "learning_rate", t.learning_rate)),
        momentum=float(get("train", "momentum", t.momentum)),
        seed=int(get("train", "seed", seed)),
        milestones=_list(get("train", "milestones", ",".join(map(str, t.milestones))), float),
        lr_drop=float(get("train", "lr_drop", t.lr_drop)),
        resample=get("train", "resample", t.resample),
    )

    c = CompressSpec()
    compress = CompressSpec(
        delta=float(get("compress", "delta", c.delta)),
        epsilon=_optional(get("compress", "epsilon", ""), float),
        heal_epochs=int(get("compress", "heal_epochs", c.heal_epochs)),
        probe_removals=int(get("compress", "probe_removals", c.probe_removals)),
        score_batch_size=_optional(get("compress", "score_batch_size", ""), int),
    )

    def sweep_list(key, conv):
        raw = get("sweep", key)
        return None if raw is None else _list(raw, conv)

    sweep = SweepSpec(
        lam=sweep_list("lambda", float),
        n_proj=sweep_list("n_proj", int),
        batch_size=sweep_list("batch_size", int),
        distance=sweep_list("distance", lambda v: Distance(v).value),
        seed_mode=sweep_list("seed_mode", _seed_mode),
        seeds=sweep_list("seeds", int),
    )

    o = OutputSpec()
    outputs = OutputSpec(
        directory=get("outputs", "directory", o.directory),
        report=get("outputs", "report", o.report),
        plot_data=get("outputs", "plot_data", o.plot_data),
        checkpoint=get("outputs", "checkpoint", o.checkpoint),
    )
    return ExperimentConfig(dataset, net, train, compress, sweep, outputs, seed)


def _seed_mode(v: str) -> str:
    if v not in ("seeded", "unseeded"):
        raise ConfigError(f"seed_mode must be 'seeded' or 'unseeded', got {v!r}")
    return v


def to_text(values: dict[str, dict[str, Any]]) -> str:
    """Render ``{section: {key: value}}`` in the config file format."""
    lines = []
    for section, entries in values.items():
        lines.append(f"[{section}]")
        lines.extend(f"{k} = {v}" for k, v in entries.items())
        lines.append("")
    return "\n".join(lines)

"""Distance-regularized training of residual nets.

The objective is ``J = L + lam * R`` with ``L`` the cross-entropy and ``R``
the mean, over eligible live blocks, of a distance between each block's input
and output minibatch clouds.
"""

from __future__ import annotations

import enum
import logging
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from . import autodiff as ad
from . import ot
from .net import ResidualNet, _init_affine
from .ot import DistanceConfig, MaxMode

log = logging.getLogger(__name__)


class Distance(str, enum.Enum):
    MAX_SLICED = "max_sliced"
    SLICED = "sliced"
    MEAN_L1 = "mean_l1"
    MEAN_L2 = "mean_l2"
    MMD = "mmd"
    KL_DIAG_GAUSSIAN = "kl_diag_gaussian"


@dataclass(frozen=True)
class TrainConfig:
    lam: float = 1.0
    distance: Distance = Distance.MAX_SLICED
    distance_cfg: DistanceConfig = field(default_factory=DistanceConfig)
    epochs: int = 60
    batch_size: int = 64
    learning_rate: float = 0.05
    momentum: float = 0.9
    seed: int = 0
    # learning rate is multiplied by lr_drop at each milestone (fractions of epochs)
    milestones: tuple[float, ...] = (0.5, 0.75)
    lr_drop: float = 0.1
    # "minibatch": fresh directions every step; "epoch": one set per epoch
    resample: str = "minibatch"

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError(f"lambda must be nonnegative, got {self.lam}")
        if self.batch_size < 2:
            raise ValueError(f"batch_size must be >= 2, got {self.batch_size}")
        if self.resample not in ("minibatch", "epoch"):
            raise ValueError(f"resample must be 'minibatch' or 'epoch', got {self.resample!r}")
        object.__setattr__(self, "distance", Distance(self.distance))
        object.__setattr__(self, "milestones", tuple(float(m) for m in self.milestones))

    def lr_at(self, epoch: int, epochs: int) -> float:
        drops = sum(1 for m in self.milestones if epoch >= int(round(m * epochs)))
        return self.learning_rate * self.lr_drop ** drops

    def replace(self, **changes) -> "TrainConfig":
        values = {**{f: getattr(self, f) for f in self.__dataclass_fields__}, **changes}
        return TrainConfig(**values)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["distance"] = self.distance.value
        d["distance_cfg"]["max_mode"] = self.distance_cfg.max_mode.value
        d["milestones"] = list(self.milestones)
        return d


@dataclass
class BlockDistanceVector:
    """Per-block distances for the eligible live blocks, keyed by block index."""

    values: dict[int, float]

    @property
    def mean(self) -> float:
        return float(np.mean(list(self.values.values()))) if self.values else 0.0

    def argmin(self) -> int:
        # ties go to the lowest block index
        return min(self.values, key=lambda k: (self.values[k], k))

    def ranked(self) -> list[int]:
        return sorted(self.values, key=lambda k: (self.values[k], k))

    def to_dict(self) -> dict:
        return {"values": {str(k): v for k, v in self.values.items()}, "mean": self.mean}

    @classmethod
    def from_dict(cls, d: dict) -> "BlockDistanceVector":
        return cls({int(k): float(v) for k, v in d["values"].items()})


class TrainingDiverged(FloatingPointError):
    def __init__(self, message: str, state: dict):
        super().__init__(message)
        self.state = state


# --- direction streams ----------------------------------------------------------------

class DirectionSource:
    """Hands out projection directions per step under a seeding policy.

    Seeded configs return the same set on every call; otherwise directions come
    from ``rng`` and change between calls.
    """

    def __init__(self, cfg: DistanceConfig, rng: Optional[np.random.Generator] = None):
        self.cfg = cfg
        self.rng = rng if rng is not None else np.random.default_rng()
        self._cache: dict[int, np.ndarray] = {}

    def draw(self, d: int) -> np.ndarray:
        if d not in self._cache:
            stream = ot.direction_rng(self.cfg, self.rng)
            self._cache[d] = ot.sample_unit_directions(d, self.cfg.n_proj, stream)
        return self._cache[d]

    def next_step(self) -> None:
        self._cache.clear()


# --- distances on the tape ------------------------------------------------------------

def tape_distance(kind: Distance, mu: ad.Node, nu: ad.Node, dcfg: DistanceConfig,
                  directions: Optional[np.ndarray] = None) -> ad.Node:
    """Differentiable distance between two row-aligned clouds."""
    kind = Distance(kind)
    if mu.shape != nu.shape:
        raise ValueError(f"block clouds differ in shape: {mu.shape} vs {nu.shape}")
    p = dcfg.p
    if kind is Distance.MAX_SLICED:
        if dcfg.max_mode is MaxMode.PROJECTED_ASCENT:
            _, theta = ot.max_sliced_wasserstein(mu.value, nu.value, dcfg, directions=directions)
            return ad.projected_wasserstein(mu, nu, theta, p)
        return ad.msw_loss(mu, nu, directions, p)
    if kind is Distance.SLICED:
        xs, _ = ad.sort_columns(ad.matmul(mu, directions.T))
        ys, _ = ad.sort_columns(ad.matmul(nu, directions.T))
        return ad.power(ad.mean(ad.abs_pow(ad.sub(xs, ys), p)), 1.0 / p)
    if kind is Distance.MEAN_L1:
        return ad.mean(ad.reduce_sum(ad.abs_pow(ad.sub(mu, nu), 1.0), axis=1))
    if kind is Distance.MEAN_L2:
        return ad.mean(ad.sqrt(ad.reduce_sum(ad.square(ad.sub(mu, nu)), axis=1)))
    if kind is Distance.MMD:
        return _tape_mmd(mu, nu)
    if kind is Distance.KL_DIAG_GAUSSIAN:
        return _tape_kl(mu, nu)
    raise ValueError(f"unknown distance {kind}")


def _sq_dists(a: ad.Node, b: ad.Node) -> ad.Node:
    aa = ad.reduce_sum(ad.square(a), axis=1)
    bb = ad.reduce_sum(ad.square(b), axis=1)
    cross = ad.matmul(a, ad.Node(b.value.T, [(b, lambda g: g.T)], "transpose"))
    n, m = a.shape[0], b.shape[0]
    aa_col = ad.Node(aa.value[:, None] * np.ones((1, m)), [(aa, lambda g: g.sum(axis=1))], "bcast")
    bb_row = ad.Node(np.ones((n, 1)) * bb.value[None, :], [(bb, lambda g: g.sum(axis=0))], "bcast")
    return ad.clamp_min(ad.sub(ad.add(aa_col, bb_row), ad.scale(cross, 2.0)), 0.0)


def _tape_mmd(mu: ad.Node, nu: ad.Node) -> ad.Node:
    # bandwidth is a constant of the loss (median heuristic on current values)
    sigma = ot.median_bandwidth(mu.value, nu.value)
    c = -1.0 / (2.0 * sigma * sigma)

    def kmean(a, b):
        return ad.mean(ad.exp(ad.scale(_sq_dists(a, b), c)))

    mmd2 = ad.sub(ad.add(kmean(mu, mu), kmean(nu, nu)), ad.scale(kmean(mu, nu), 2.0))
    return ad.sqrt(ad.clamp_min(mmd2, 0.0))


def _tape_kl(mu: ad.Node, nu: ad.Node) -> ad.Node:
    def fit(x):
        m = ad.mean(x, axis=0)
        centered = ad.sub(x, m)
        v = ad.clamp_min(ad.mean(ad.square(centered), axis=0), ot.VAR_FLOOR)
        return m, v

    m1, v1 = fit(mu)
    m2, v2 = fit(nu)
    ratio = ad.Node(v1.value / v2.value,
                    [(v1, lambda g: g / v2.value), (v2, lambda g: -g * v1.value / v2.value ** 2)], "div")
    msq = ad.square(ad.sub(m1, m2))
    quad = ad.Node(msq.value / v2.value,
                   [(msq, lambda g: g / v2.value), (v2, lambda g: -g * msq.value / v2.value ** 2)], "div")
    # 0.5 * (log v2 - log v1 + v1/v2 + (m1-m2)^2/v2 - 1)
    terms = ad.sub(ad.add(ad.sub(ad.log(v2), ad.log(v1)), ad.add(ratio, quad)), 1.0)
    return ad.clamp_min(ad.scale(ad.reduce_sum(terms), 0.5), 0.0)


def value_distance(kind: Distance, mu: np.ndarray, nu: np.ndarray, dcfg: DistanceConfig,
                   directions: Optional[np.ndarray] = None,
                   rng: Optional[np.random.Generator] = None) -> float:
    """The same distances evaluated with the plain numpy implementations."""
    kind = Distance(kind)
    if kind is Distance.MAX_SLICED:
        return ot.max_sliced_wasserstein(mu, nu, dcfg, rng, directions=directions)[0]
    if kind is Distance.SLICED:
        return ot.sliced_wasserstein(mu, nu, dcfg, rng, directions=directions)
    if kind is Distance.MEAN_L1:
        return ot.mean_lp(mu, nu, 1)
    if kind is Distance.MEAN_L2:
        return ot.mean_lp(mu, nu, 2)
    if kind is Distance.MMD:
        return ot.mmd_rbf(mu, nu)
    if kind is Distance.KL_DIAG_GAUSSIAN:
        return ot.kl_diag_gaussian(mu, nu)
    raise ValueError(f"unknown distance {kind}")


def _needs_directions(kind: Distance) -> bool:
    return kind in (Distance.MAX_SLICED, Distance.SLICED)


# --- objective ------------------------------------------------------------------------

def regularizer(net: ResidualNet, batch, cfg: TrainConfig,
                source: Optional[DirectionSource] = None,
                nodes: Optional[dict] = None, directions: Optional[np.ndarray] = None,
                _pairs=None):
    """Mean block distance over the eligible live blocks.

    Returns ``(R node, BlockDistanceVector)``. ``directions`` fixes one shared
    direction set for every block; otherwise directions come from ``source``.
    """
    if _pairs is None:
        _, _pairs = net.forward_collect(batch, nodes)
    if not _pairs:
        return ad.constant(0.0), BlockDistanceVector({})
    if source is None and directions is None and _needs_directions(cfg.distance):
        source = DirectionSource(cfg.distance_cfg, np.random.default_rng(cfg.seed))
    terms, values = [], {}
    for k, (x_in, x_out) in _pairs.items():
        dirs = None
        if _needs_directions(cfg.distance):
            dirs = directions if directions is not None else source.draw(x_in.shape[1])
        term = tape_distance(cfg.distance, x_in, x_out, cfg.distance_cfg, dirs)
        terms.append(term)
        values[k] = float(term.value)
    total = ad.scale(ad.reduce_sum(ad.stack(terms)), 1.0 / len(terms))
    return total, BlockDistanceVector(values)


def objective(net: ResidualNet, batch, labels, cfg: TrainConfig,
              source: Optional[DirectionSource] = None, nodes: Optional[dict] = None,
              directions: Optional[np.ndarray] = None):
    """``J = L + lam * R``. Returns ``(J, L, R, BlockDistanceVector)`` as nodes."""
    logits, pairs = net.forward_collect(batch, nodes)
    loss = ad.softmax_cross_entropy(logits, labels)
    if cfg.lam == 0:
        return loss, loss, ad.constant(0.0), BlockDistanceVector({})
    reg, vec = regularizer(net, batch, cfg, source, nodes, directions, _pairs=pairs)
    return ad.add(loss, ad.scale(reg, cfg.lam)), loss, reg, vec


# --- optimization ---------------------------------------------------------------------

@dataclass
class EpochRecord:
    epoch: int
    loss: float
    reg: float
    mean_distance: float
    accuracy: float


class SGD:
    """Heavy-ball SGD: ``v = m v + g``, ``w -= lr v``, updating arrays in place."""

    def __init__(self, lr: float, momentum: float):
        self.lr, self.momentum = lr, momentum
        self.velocity: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        for name, g in grads.items():
            v = self.velocity.get(name)
            v = g.copy() if v is None else self.momentum * v + g
            self.velocity[name] = v
            params[name] -= self.lr * v


def _streams(cfg: TrainConfig):
    seq = np.random.SeedSequence(cfg.seed)
    shuffle_seq, dir_seq = seq.spawn(2)
    return np.random.default_rng(shuffle_seq), np.random.default_rng(dir_seq)


def train(net: ResidualNet, X, y, cfg: TrainConfig, epochs: Optional[int] = None) -> list[EpochRecord]:
    """Minibatch SGD with momentum on ``J``; updates ``net`` in place.

    Frozen blocks and removed blocks are left untouched. Deterministic given
    ``cfg.seed`` (and ``cfg.distance_cfg.seed`` when projections are seeded).
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if len(X) == 0 or len(X) != len(y):
        raise ValueError("training data must be non-empty with one label per row")
    epochs = cfg.epochs if epochs is None else epochs
    shuffle_rng, dir_rng = _streams(cfg)
    source = DirectionSource(cfg.distance_cfg, dir_rng)
    opt = SGD(cfg.learning_rate, cfg.momentum)
    params = net.parameters(live_only=True, trainable_only=True)
    history = []
    for epoch in range(epochs):
        order = shuffle_rng.permutation(len(X))
        opt.lr = cfg.lr_at(epoch, epochs)
        losses, regs, dists = [], [], []
        if cfg.resample == "epoch":
            source.next_step()
        for start in range(0, len(X), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            if len(idx) < 2:
                continue
            if cfg.resample == "minibatch":
                source.next_step()
            nodes = net.parameter_nodes()
            J, L, R, vec = objective(net, X[idx], y[idx], cfg, source, nodes)
            if not np.isfinite(J.value):
                state = {"epoch": epoch, "step_start": int(start), "loss": float(L.value),
                         "reg": float(R.value),
                         "param_norms": {k: float(np.linalg.norm(v)) for k, v in params.items()}}
                log.error("training diverged: %s", state)
                raise TrainingDiverged(f"non-finite objective at epoch {epoch}", state)
            J.backward()
            grads = {k: nodes[k].grad for k in params if nodes[k].grad is not None}
            opt.step(params, grads)
            losses.append(float(L.value))
            regs.append(float(R.value))
            if vec.values:
                dists.append(vec.mean)
        rec = EpochRecord(epoch, float(np.mean(losses)), float(np.mean(regs)),
                          float(np.mean(dists)) if dists else 0.0, net.accuracy(X, y))
        log.debug("epoch %d: %s", epoch, rec)
        history.append(rec)
    return history


def heal(net: ResidualNet, X, y, cfg: TrainConfig, epochs: int) -> list[EpochRecord]:
    """Fine-tune the remaining weights with the plain loss; removed blocks stay removed."""
    states = [b.state for b in net.blocks]
    history = train(net, X, y, cfg.replace(lam=0.0), epochs=epochs)
    assert [b.state for b in net.blocks] == states
    return history


def fit_adapter(net: ResidualNet, k: int, X, cfg: TrainConfig, epochs: int,
                restarts: int = 1, rng: Optional[np.random.Generator] = None) -> list[float]:
    """Train block ``k``'s adapter to match the block's output distribution.

    Only the adapter weights move, and the only loss is the max-sliced
    distance between adapter outputs and original block outputs per minibatch.
    With ``restarts > 1`` the adapter is re-initialized from ``rng`` and the
    run with the smallest full-data distance is kept (distribution matching
    has spurious local minima, e.g. maps that swap clusters). Returns the
    kept run's mean loss per epoch.
    """
    block = net.blocks[k]
    if not block.has_adapter:
        raise ValueError(f"block {k} has no adapter")
    if restarts < 1:
        raise ValueError("restarts must be >= 1")
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    inputs = net.features(X, upto=k)
    targets = block.apply(inputs, net._block_params(k, None)).value
    judge = DistanceConfig(p=cfg.distance_cfg.p, n_proj=cfg.distance_cfg.n_proj,
                           max_mode=MaxMode.PROJECTED_ASCENT, seed=cfg.seed)
    best = None
    for attempt in range(restarts):
        if attempt:
            block.adapter_W, block.adapter_b = _init_affine(block.in_dim, block.out_dim, rng)
        history = _fit_adapter_once(block, inputs, targets, cfg.replace(seed=cfg.seed + attempt), epochs)
        score = ot.max_sliced_wasserstein(block.adapter_output(inputs).value, targets, judge)[0]
        log.debug("adapter attempt %d: distance %.3g", attempt, score)
        if best is None or score < best[0]:
            best = (score, block.adapter_W.copy(), block.adapter_b.copy(), history)
    _, block.adapter_W, block.adapter_b, history = best
    return history


def _fit_adapter_once(block, inputs, targets, cfg: TrainConfig, epochs: int) -> list[float]:
    shuffle_rng, dir_rng = _streams(cfg)
    source = DirectionSource(cfg.distance_cfg, dir_rng)
    opt = SGD(cfg.learning_rate, cfg.momentum)
    params = {"adapter_W": block.adapter_W, "adapter_b": block.adapter_b}
    history = []
    for epoch in range(epochs):
        order = shuffle_rng.permutation(len(inputs))
        opt.lr = cfg.lr_at(epoch, epochs)
        losses = []
        for start in range(0, len(inputs), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            if len(idx) < 2:
                continue
            source.next_step()
            nodes = {n: ad.parameter(a) for n, a in params.items()}
            out = block.adapter_output(inputs[idx], nodes)
            target = ad.constant(targets[idx])
            loss = tape_distance(Distance.MAX_SLICED, out, target, cfg.distance_cfg,
                                 source.draw(out.shape[1]))
            loss.backward()
            opt.step(params, {n: nodes[n].grad for n in params})
            losses.append(float(loss.value))
        history.append(float(np.mean(losses)))
    return history

"""Discrete optimal-transport distances between uniformly weighted point clouds.

Point clouds are plain ``(N, d)`` float arrays; every row carries mass ``1/N``.
All functions are pure and take their random stream explicitly.
"""

from __future__ import annotations

import enum
import itertools
import math
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

MAX_EXACT_SUPPORT = 8


class MaxMode(str, enum.Enum):
    RANDOM_SEARCH = "random_search"
    PROJECTED_ASCENT = "projected_ascent"


@dataclass(frozen=True)
class DistanceConfig:
    """Settings shared by the sliced estimators.

    ``seed=None`` is the unseeded mode: directions are drawn from the caller's
    stream and change from call to call. An integer seed makes every call
    reuse the same direction set.
    """

    p: float = 2.0
    n_proj: int = 40
    max_mode: MaxMode = MaxMode.RANDOM_SEARCH
    seed: Optional[int] = None
    ascent_iters: int = 50
    ascent_step: float = 0.1

    def __post_init__(self):
        if not self.p > 0:
            raise ValueError(f"p must be positive, got {self.p}")
        if self.n_proj < 1:
            raise ValueError(f"n_proj must be >= 1, got {self.n_proj}")
        object.__setattr__(self, "max_mode", MaxMode(self.max_mode))

    @property
    def seeded(self) -> bool:
        return self.seed is not None


def as_point_cloud(x, name: str = "cloud") -> np.ndarray:
    """Validate and return ``x`` as a finite ``(N, d)`` float64 array.

    1-D input is read as ``N`` scalar samples.
    """
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[:, None]
    if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ValueError(f"{name} must be a non-empty (N, d) array, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite entries")
    return arr


def _check_pair(mu, nu, same_n: bool = True):
    mu = as_point_cloud(mu, "mu")
    nu = as_point_cloud(nu, "nu")
    if mu.shape[1] != nu.shape[1]:
        raise ValueError(f"dimension mismatch: {mu.shape[1]} vs {nu.shape[1]}")
    if same_n and mu.shape[0] != nu.shape[0]:
        raise ValueError(f"support size mismatch: {mu.shape[0]} vs {nu.shape[0]}")
    return mu, nu


def direction_rng(cfg: DistanceConfig, rng: Optional[np.random.Generator]) -> np.random.Generator:
    """Stream to draw projection directions from under ``cfg``'s seeding policy."""
    if cfg.seeded:
        return np.random.default_rng(cfg.seed)
    if rng is None:
        return np.random.default_rng()
    return rng


def sample_unit_directions(d: int, n: int, rng: np.random.Generator) -> np.ndarray:
    """Draw ``n`` directions uniformly on the unit sphere of R^d, shape ``(n, d)``."""
    if d < 1 or n < 1:
        raise ValueError(f"need d >= 1 and n >= 1, got d={d}, n={n}")
    out = rng.standard_normal((n, d))
    norms = np.linalg.norm(out, axis=1)
    # zero-norm draws have probability zero; redraw them anyway
    while np.any(norms == 0.0):
        bad = norms == 0.0
        out[bad] = rng.standard_normal((int(bad.sum()), d))
        norms = np.linalg.norm(out, axis=1)
    return out / norms[:, None]


def _as_directions(directions, d: int) -> np.ndarray:
    dirs = np.asarray(directions, dtype=np.float64)
    if dirs.ndim == 1:
        dirs = dirs[None, :]
    if dirs.ndim != 2 or dirs.shape[1] != d:
        raise ValueError(f"directions must have shape (n, {d}), got {dirs.shape}")
    return dirs


def project(cloud, theta) -> tuple[np.ndarray, np.ndarray]:
    """Project ``cloud`` on ``theta`` and sort.

    Returns
    -------
    values : ndarray, shape (N,)
        The projections in ascending order.
    perm : ndarray, shape (N,)
        Indices into the cloud rows such that ``values == (cloud @ theta)[perm]``.
        Ties keep their original order.
    """
    cloud = as_point_cloud(cloud)
    theta = np.asarray(theta, dtype=np.float64).ravel()
    if theta.shape[0] != cloud.shape[1]:
        raise ValueError(f"direction has dimension {theta.shape[0]}, cloud has {cloud.shape[1]}")
    proj = cloud @ theta
    perm = np.argsort(proj, kind="stable")
    return proj[perm], perm


def _sorted_projections(cloud: np.ndarray, dirs: np.ndarray) -> np.ndarray:
    # (N, n_dirs), each column sorted ascending
    return np.sort(cloud @ dirs.T, axis=0, kind="stable")


def wasserstein_1d(xs, ys, p: float = 2.0) -> float:
    """Closed-form p-Wasserstein distance between two sorted 1-D samples of equal size."""
    xs = np.asarray(xs, dtype=np.float64).ravel()
    ys = np.asarray(ys, dtype=np.float64).ravel()
    if xs.shape != ys.shape:
        raise ValueError(f"length mismatch: {xs.shape[0]} vs {ys.shape[0]}")
    if xs.size == 0:
        raise ValueError("empty samples")
    if np.any(np.diff(xs) < 0) or np.any(np.diff(ys) < 0):
        raise ValueError("wasserstein_1d expects samples sorted ascending")
    if not p > 0:
        raise ValueError(f"p must be positive, got {p}")
    return float(np.mean(np.abs(xs - ys) ** p) ** (1.0 / p))


def _projected_costs(mu: np.ndarray, nu: np.ndarray, dirs: np.ndarray, p: float) -> np.ndarray:
    """Mean ``|x_(i) - y_(i)|^p`` per direction, i.e. W_p^p of each slice."""
    diff = _sorted_projections(mu, dirs) - _sorted_projections(nu, dirs)
    return np.mean(np.abs(diff) ** p, axis=0)


def sliced_wasserstein(mu, nu, cfg: DistanceConfig = DistanceConfig(),
                       rng: Optional[np.random.Generator] = None,
                       directions=None) -> float:
    """Sliced p-Wasserstein distance over ``cfg.n_proj`` random directions.

    Pass ``directions`` to evaluate on a fixed set instead of sampling.
    """
    mu, nu = _check_pair(mu, nu)
    if directions is None:
        directions = sample_unit_directions(mu.shape[1], cfg.n_proj, direction_rng(cfg, rng))
    dirs = _as_directions(directions, mu.shape[1])
    costs = _projected_costs(mu, nu, dirs, cfg.p)
    return float(np.mean(costs) ** (1.0 / cfg.p))


def _slice_gradient(mu: np.ndarray, nu: np.ndarray, theta: np.ndarray, p: float):
    """Value of W_p on ``theta`` and its gradient w.r.t. ``theta`` with frozen sort orders."""
    _, pm = project(mu, theta)
    _, pn = project(nu, theta)
    delta = mu[pm] - nu[pn]
    a = delta @ theta
    n = len(a)
    cost = np.mean(np.abs(a) ** p)
    value = cost ** (1.0 / p)
    if value == 0.0:
        return 0.0, np.zeros_like(theta)
    dcost = (p / n) * (np.abs(a) ** (p - 1) * np.sign(a)) @ delta
    return float(value), (value ** (1.0 - p) / p) * dcost


def max_sliced_wasserstein(mu, nu, cfg: DistanceConfig = DistanceConfig(),
                           rng: Optional[np.random.Generator] = None,
                           directions=None) -> tuple[float, np.ndarray]:
    """Max-sliced p-Wasserstein distance and the direction attaining it.

    Random search takes the best of ``cfg.n_proj`` directions (or of the given
    ``directions``). Projected ascent starts from that best direction and
    follows the slice gradient on the sphere for ``cfg.ascent_iters`` steps,
    keeping the best direction visited. Both return lower bounds on the true
    maximum.
    """
    mu, nu = _check_pair(mu, nu)
    d = mu.shape[1]
    if directions is None:
        directions = sample_unit_directions(d, cfg.n_proj, direction_rng(cfg, rng))
    dirs = _as_directions(directions, d)
    costs = _projected_costs(mu, nu, dirs, cfg.p)
    best = int(np.argmax(costs))
    best_value = float(costs[best] ** (1.0 / cfg.p))
    best_theta = dirs[best].copy()
    if cfg.max_mode is MaxMode.RANDOM_SEARCH:
        return best_value, best_theta

    theta = best_theta.copy()
    for _ in range(cfg.ascent_iters):
        _, grad = _slice_gradient(mu, nu, theta, cfg.p)
        step = theta + cfg.ascent_step * grad
        norm = np.linalg.norm(step)
        if norm == 0.0:
            break
        theta = step / norm
        value, _ = _slice_gradient(mu, nu, theta, cfg.p)
        if value > best_value:
            best_value, best_theta = value, theta.copy()
    return best_value, best_theta


def exact_wasserstein_small(mu, nu, p: float = 2.0) -> float:
    """Exact p-Wasserstein distance by enumerating every bijection (N <= 8).

    The ground cost is ``||x - y||_p^p``, matching the Monge problem with
    uniform weights.
    """
    mu, nu = _check_pair(mu, nu)
    n = mu.shape[0]
    if n > MAX_EXACT_SUPPORT:
        raise ValueError(
            f"exact enumeration supports N <= {MAX_EXACT_SUPPORT}, got N={n}; "
            "larger problems need an assignment solver, which is not provided"
        )
    cost = np.sum(np.abs(mu[:, None, :] - nu[None, :, :]) ** p, axis=2)
    rows = np.arange(n)
    best = math.inf
    for perm in itertools.permutations(range(n)):
        total = cost[rows, perm].sum()
        if total < best:
            best = total
    return float((best / n) ** (1.0 / p))


def median_bandwidth(mu, nu) -> float:
    """Median pairwise Euclidean distance over the pooled sample (1.0 if degenerate)."""
    pooled = np.vstack([as_point_cloud(mu), as_point_cloud(nu)])
    sq = np.sum((pooled[:, None, :] - pooled[None, :, :]) ** 2, axis=2)
    iu = np.triu_indices(len(pooled), k=1)
    dists = np.sqrt(sq[iu])
    dists = dists[dists > 0]
    if dists.size == 0:
        return 1.0
    return float(np.median(dists))


def mmd_rbf(mu, nu, bandwidth: Union[float, str, None] = "median") -> float:
    """Gaussian-kernel MMD (biased V-statistic), returned as sqrt(MMD^2).

    ``bandwidth`` is the kernel scale sigma in ``exp(-|x-y|^2 / (2 sigma^2))``;
    ``"median"`` or ``None`` selects the median heuristic.
    """
    mu, nu = _check_pair(mu, nu, same_n=False)
    if bandwidth is None or bandwidth == "median":
        sigma = median_bandwidth(mu, nu)
    else:
        sigma = float(bandwidth)
        if not sigma > 0:
            raise ValueError(f"bandwidth must be positive, got {bandwidth}")

    def gram(a, b):
        sq = np.sum((a[:, None, :] - b[None, :, :]) ** 2, axis=2)
        return np.exp(-sq / (2.0 * sigma * sigma))

    mmd2 = gram(mu, mu).mean() + gram(nu, nu).mean() - 2.0 * gram(mu, nu).mean()
    return float(math.sqrt(max(mmd2, 0.0)))


VAR_FLOOR = 1e-8


def kl_diag_gaussian(mu, nu) -> float:
    """KL(fit(mu) || fit(nu)) between per-dimension Gaussian fits, summed over dimensions.

    Fits use the maximum-likelihood variance, floored at ``VAR_FLOOR``.
    """
    mu, nu = _check_pair(mu, nu, same_n=False)
    if mu.shape[0] < 2 or nu.shape[0] < 2:
        raise ValueError("KL fit needs at least 2 samples per cloud")
    m1, m2 = mu.mean(axis=0), nu.mean(axis=0)
    v1 = np.maximum(mu.var(axis=0), VAR_FLOOR)
    v2 = np.maximum(nu.var(axis=0), VAR_FLOOR)
    kl = 0.5 * (np.log(v2 / v1) + (v1 + (m1 - m2) ** 2) / v2 - 1.0)
    return float(max(np.sum(kl), 0.0))


def mean_lp(mu, nu, p: int = 2) -> float:
    """Mean over paired rows of ``||x_i - y_i||_p`` (rows are the same sample)."""
    mu, nu = _check_pair(mu, nu)
    if p not in (1, 2):
        raise ValueError(f"p must be 1 or 2, got {p}")
    return float(np.mean(np.linalg.norm(mu - nu, ord=p, axis=1)))

"""Diagnostics around the regularized objective: gradient alignment between the
loss and the regularizer, and the triangle-inequality lower bound on the total
distance a network has to travel."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import ot
from .net import ResidualNet
from .training import DirectionSource, TrainConfig, objective


@dataclass
class Alignment:
    cosine: float
    zero_gradient: bool


def _group(name: str) -> str:
    return name.rsplit(".", 1)[0]


def group_cosines(grads_a: dict[str, np.ndarray], grads_b: dict[str, np.ndarray]) -> dict[str, Alignment]:
    """Cosine similarity of two gradients per weight group (``blocks.<k>`` or ``head``).

    A group where either gradient vanishes gets cosine 0 and ``zero_gradient=True``.
    """
    groups: dict[str, tuple[list, list]] = {}
    for name in grads_a:
        a, b = groups.setdefault(_group(name), ([], []))
        a.append(np.ravel(grads_a[name]))
        b.append(np.ravel(grads_b[name]))
    out = {}
    for g, (a, b) in groups.items():
        va, vb = np.concatenate(a), np.concatenate(b)
        na, nb = np.linalg.norm(va), np.linalg.norm(vb)
        if na == 0.0 or nb == 0.0:
            out[g] = Alignment(0.0, True)
        else:
            out[g] = Alignment(float(np.clip(va @ vb / (na * nb), -1.0, 1.0)), False)
    return out


def gradient_alignment(net: ResidualNet, X, y, cfg: TrainConfig,
                       rng: Optional[np.random.Generator] = None,
                       directions: Optional[np.ndarray] = None) -> dict[str, Alignment]:
    """Cosine between dL/dw and dR/dw for each block's weights (and the head).

    Reported only; nothing here expects the values to have a particular sign.
    """
    source = DirectionSource(cfg.distance_cfg, rng if rng is not None else np.random.default_rng(cfg.seed))
    unit = cfg.replace(lam=1.0)
    grads = []
    for pick in ("loss", "reg"):
        nodes = net.parameter_nodes(trainable_only=False)
        _, L, R, _ = objective(net, X, y, unit, source, nodes, directions)
        target = L if pick == "loss" else R
        if target.requires_grad:
            target.backward()
        grads.append({n: (v.grad if v.grad is not None else np.zeros_like(v.value)) for n, v in nodes.items()})
    return group_cosines(*grads)


def embed_labels(labels, num_classes: int, dim: Optional[int] = None) -> np.ndarray:
    """One-hot label rows, zero-padded to ``dim`` columns."""
    labels = np.asarray(labels, dtype=np.int64)
    dim = num_classes if dim is None else dim
    if num_classes > dim:
        raise ValueError(f"cannot embed {num_classes} classes in {dim} dimensions")
    out = np.zeros((len(labels), dim))
    out[np.arange(len(labels)), labels] = 1.0
    return out


def triangle_bound_check(net: ResidualNet, batch, ground_truth, directions,
                         p: float = 2.0, slack: float = 1e-6) -> tuple[float, float, bool]:
    """Check ``d(mu_1, gt) <= sum_k d(mu_k, nu_k) + d(nu_K, gt)`` for the max-sliced distance.

    ``d`` is evaluated on the one given direction set for every term, which
    makes it a pseudo-metric, so the inequality must hold exactly. Every block
    and the ground-truth cloud must share one dimension.
    """
    x = ot.as_point_cloud(batch, "batch")
    gt = ot.as_point_cloud(ground_truth, "ground_truth")
    dims = {x.shape[1], gt.shape[1]} | {b.in_dim for b in net.blocks} | {b.out_dim for b in net.blocks}
    if len(dims) != 1:
        raise ValueError(f"feature and label spaces differ in dimension: {sorted(dims)}")
    if len(gt) != len(x):
        raise ValueError("ground truth must have one row per batch sample")
    cfg = ot.DistanceConfig(p=p)

    def d(a, b):
        return ot.max_sliced_wasserstein(a, b, cfg, directions=directions)[0]

    lhs = d(x, gt)
    rhs = 0.0
    for k, block in enumerate(net.blocks):
        out = block.apply(x, net._block_params(k, None)).value
        rhs += d(x, out)
        x = out
    rhs += d(x, gt)
    return lhs, rhs, bool(lhs <= rhs + slack)

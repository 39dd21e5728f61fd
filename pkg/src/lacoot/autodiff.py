"""Small reverse-mode differentiation engine over numpy arrays.

Every op returns a :class:`Node`. A node only keeps references to its parents
when at least one parent requires a gradient, so evaluating a network on
constant weights builds no graph at all.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable, Optional, Sequence

import numpy as np


class Node:
    __slots__ = ("value", "grad", "parents", "op", "requires_grad")

    def __init__(self, value, parents: Sequence = (), op: str = "leaf",
                 requires_grad: bool = False):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad or any(p.requires_grad for p, _ in parents)
        # (parent, fn mapping upstream grad to the parent's grad contribution)
        self.parents = tuple((p, fn) for p, fn in parents if p.requires_grad) if self.requires_grad else ()
        self.op = op

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Node(op={self.op}, shape={self.value.shape})"

    def backward(self, seed=None):
        """Accumulate d(self)/d(node) into ``node.grad`` for every node in the graph."""
        order = _topological_order(self)
        for node in order:
            node.grad = np.zeros_like(node.value)
        if seed is None:
            if self.value.size != 1:
                raise ValueError("backward() without a seed needs a scalar output")
            seed = np.ones_like(self.value)
        self.grad = np.asarray(seed, dtype=np.float64).reshape(self.value.shape).copy()
        for node in reversed(order):
            for parent, fn in node.parents:
                parent.grad += fn(node.grad)

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)


def _topological_order(root: Node) -> list[Node]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent, _ in node.parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def constant(x) -> Node:
    return x if isinstance(x, Node) else Node(x)


def parameter(x) -> Node:
    return Node(np.array(x, dtype=np.float64), requires_grad=True)


def _node(x) -> Node:
    return x if isinstance(x, Node) else Node(x)


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# --- elementwise and linear algebra -------------------------------------------------

def add(a, b) -> Node:
    a, b = _node(a), _node(b)
    return Node(a.value + b.value,
                [(a, lambda g: _unbroadcast(g, a.shape)), (b, lambda g: _unbroadcast(g, b.shape))],
                "add")


def sub(a, b) -> Node:
    a, b = _node(a), _node(b)
    return Node(a.value - b.value,
                [(a, lambda g: _unbroadcast(g, a.shape)), (b, lambda g: -_unbroadcast(g, b.shape))],
                "sub")


def mul(a, b) -> Node:
    a, b = _node(a), _node(b)
    return Node(a.value * b.value,
                [(a, lambda g: _unbroadcast(g * b.value, a.shape)),
                 (b, lambda g: _unbroadcast(g * a.value, b.shape))],
                "mul")


def scale(x, c: float) -> Node:
    x = _node(x)
    return Node(x.value * c, [(x, lambda g: g * c)], "scale")


def matmul(a, b) -> Node:
    a, b = _node(a), _node(b)
    if a.value.ndim != 2 or b.value.ndim not in (1, 2) or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    if b.value.ndim == 1:
        return Node(a.value @ b.value,
                    [(a, lambda g: np.outer(g, b.value)), (b, lambda g: a.value.T @ g)],
                    "matvec")
    return Node(a.value @ b.value,
                [(a, lambda g: g @ b.value.T), (b, lambda g: a.value.T @ g)],
                "matmul")


def affine(x, W, b) -> Node:
    """Row-batch affine map ``x @ W + b``."""
    x, W, b = _node(x), _node(W), _node(b)
    if x.value.ndim != 2 or W.value.ndim != 2 or x.shape[1] != W.shape[0]:
        raise ValueError(f"affine shape mismatch: x {x.shape}, W {W.shape}")
    if b.shape != (W.shape[1],):
        raise ValueError(f"bias shape {b.shape} does not match W {W.shape}")
    return Node(x.value @ W.value + b.value,
                [(x, lambda g: g @ W.value.T),
                 (W, lambda g: x.value.T @ g),
                 (b, lambda g: g.sum(axis=0))],
                "affine")


def relu(x) -> Node:
    x = _node(x)
    mask = x.value > 0
    return Node(np.where(mask, x.value, 0.0), [(x, lambda g: g * mask)], "relu")


def residual_add(x, fx) -> Node:
    x, fx = _node(x), _node(fx)
    if x.shape != fx.shape:
        raise ValueError(f"residual shapes differ: {x.shape} vs {fx.shape}")
    return Node(x.value + fx.value, [(x, lambda g: g), (fx, lambda g: g)], "residual_add")


def square(x) -> Node:
    x = _node(x)
    return Node(x.value ** 2, [(x, lambda g: 2.0 * x.value * g)], "square")


def abs_pow(x, p: float) -> Node:
    """``|x|^p``; the derivative at 0 is taken as 0."""
    x = _node(x)
    if p == 2:
        return square(x)
    a = np.abs(x.value)
    out = a ** p

    def back(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            d = np.where(a > 0, p * a ** (p - 1) * np.sign(x.value), 0.0)
        return g * d

    return Node(out, [(x, back)], "abs_pow")


def sqrt(x) -> Node:
    """Square root whose derivative at exactly 0 is defined as 0."""
    x = _node(x)
    if np.any(x.value < 0):
        raise ValueError("sqrt of a negative value")
    out = np.sqrt(x.value)

    def back(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(out > 0, g / (2.0 * out), 0.0)

    return Node(out, [(x, back)], "sqrt")


def power(x, e: float) -> Node:
    """``x ** e`` for nonnegative ``x``; derivative 0 wherever ``x == 0``."""
    x = _node(x)
    if e == 0.5:
        return sqrt(x)
    out = x.value ** e

    def back(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(x.value > 0, g * e * x.value ** (e - 1), 0.0)

    return Node(out, [(x, back)], "power")


def exp(x) -> Node:
    x = _node(x)
    out = np.exp(x.value)
    return Node(out, [(x, lambda g: g * out)], "exp")


def log(x) -> Node:
    x = _node(x)
    return Node(np.log(x.value), [(x, lambda g: g / x.value)], "log")


def clamp_min(x, lo: float) -> Node:
    x = _node(x)
    mask = x.value > lo
    return Node(np.where(mask, x.value, lo), [(x, lambda g: g * mask)], "clamp_min")


def reduce_sum(x, axis=None) -> Node:
    x = _node(x)

    def back(g):
        if axis is None:
            return np.broadcast_to(g, x.shape).copy()
        return np.broadcast_to(np.expand_dims(g, axis), x.shape).copy()

    return Node(x.value.sum(axis=axis), [(x, back)], "sum")


def mean(x, axis=None) -> Node:
    x = _node(x)
    n = x.value.size if axis is None else x.shape[axis]
    return scale(reduce_sum(x, axis), 1.0 / n)


def stack(nodes: Sequence[Node]) -> Node:
    nodes = [_node(n) for n in nodes]
    out = np.stack([n.value for n in nodes])
    return Node(out, [(n, (lambda i: lambda g: g[i])(i)) for i, n in enumerate(nodes)], "stack")


# --- sorting -------------------------------------------------------------------------

@dataclass(frozen=True)
class SortRecord:
    """Permutation produced by a forward sort: ``sorted = x[permutation]``."""

    permutation: np.ndarray

    def __post_init__(self):
        perm = np.asarray(self.permutation)
        if not np.array_equal(np.sort(perm), np.arange(len(perm))):
            raise ValueError("permutation is not a bijection")

    @property
    def length(self) -> int:
        return len(self.permutation)


def sort_1d(x) -> tuple[Node, SortRecord]:
    """Stable ascending sort; the backward pass scatters through the frozen permutation."""
    x = _node(x)
    if x.value.ndim != 1:
        raise ValueError(f"sort_1d expects a 1-D array, got shape {x.shape}")
    perm = np.argsort(x.value, kind="stable")

    def back(g):
        out = np.zeros_like(x.value)
        out[perm] = g
        return out

    return Node(x.value[perm], [(x, back)], "sort"), SortRecord(perm)


def sort_columns(x) -> tuple[Node, np.ndarray]:
    """Sort each column of a 2-D array independently (frozen-index backward)."""
    x = _node(x)
    if x.value.ndim != 2:
        raise ValueError(f"sort_columns expects a 2-D array, got shape {x.shape}")
    perm = np.argsort(x.value, axis=0, kind="stable")
    out = np.take_along_axis(x.value, perm, axis=0)

    def back(g):
        res = np.zeros_like(x.value)
        np.put_along_axis(res, perm, g, axis=0)
        return res

    return Node(out, [(x, back)], "sort_columns"), perm


# --- losses --------------------------------------------------------------------------

def softmax_cross_entropy(logits, labels) -> Node:
    """Mean cross-entropy of integer ``labels`` under ``softmax(logits)``."""
    logits = _node(logits)
    labels = np.asarray(labels, dtype=np.int64)
    n, c = logits.shape
    if n == 0:
        raise ValueError("empty batch")
    if labels.shape != (n,):
        raise ValueError(f"expected {n} labels, got shape {labels.shape}")
    if labels.min() < 0 or labels.max() >= c:
        raise ValueError(f"labels must lie in [0, {c})")
    z = logits.value - logits.value.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(z).sum(axis=1))
    loss = np.mean(logsumexp - z[np.arange(n), labels])
    probs = np.exp(z - logsumexp[:, None])

    def back(g):
        d = probs.copy()
        d[np.arange(n), labels] -= 1.0
        return g * d / n

    return Node(loss, [(logits, back)], "cross_entropy")


def msw_loss(mu_rows, nu_rows, directions, p: float = 2.0) -> Node:
    """Max over ``directions`` of the projected p-Wasserstein distance.

    The maximizing direction is chosen on the forward values and then held
    fixed, so only that slice carries gradient.
    """
    mu_rows, nu_rows = _node(mu_rows), _node(nu_rows)
    if mu_rows.shape != nu_rows.shape or mu_rows.value.ndim != 2:
        raise ValueError(f"msw_loss needs equal (N, d) shapes, got {mu_rows.shape} and {nu_rows.shape}")
    dirs = np.atleast_2d(np.asarray(directions, dtype=np.float64))
    if dirs.shape[0] == 0 or dirs.shape[1] != mu_rows.shape[1]:
        raise ValueError(f"directions must have shape (n>=1, {mu_rows.shape[1]}), got {dirs.shape}")
    if dirs.shape[0] > 1:
        diff = (np.sort(mu_rows.value @ dirs.T, axis=0, kind="stable")
                - np.sort(nu_rows.value @ dirs.T, axis=0, kind="stable"))
        theta = dirs[int(np.argmax(np.mean(np.abs(diff) ** p, axis=0)))]
    else:
        theta = dirs[0]
    return projected_wasserstein(mu_rows, nu_rows, theta, p)


def projected_wasserstein(mu_rows, nu_rows, theta, p: float = 2.0) -> Node:
    """W_p between the projections of two clouds on a single fixed direction."""
    xs, _ = sort_1d(matmul(mu_rows, theta))
    ys, _ = sort_1d(matmul(nu_rows, theta))
    cost = mean(abs_pow(sub(xs, ys), p))
    return power(cost, 1.0 / p)


# --- gradient checking ---------------------------------------------------------------

def numerical_gradient(f: Callable[[np.ndarray], float], w: np.ndarray, h: float = 1e-4) -> np.ndarray:
    """Central finite differences of a scalar function of an array."""
    if not h > 0:
        raise ValueError("h must be positive")
    w = np.array(w, dtype=np.float64)
    grad = np.zeros_like(w)
    flat, gflat = w.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(w)
        flat[i] = orig - h
        fm = f(w)
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise FloatingPointError(f"non-finite function value at coordinate {i}")
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    analytic, numeric = np.asarray(analytic), np.asarray(numeric)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom)) if analytic.size else 0.0


def finite_diff_check(f: Callable[[Node], Node], w, h: float = 1e-4) -> float:
    """Max relative error between the tape gradient of ``f`` at ``w`` and central differences.

    ``f`` maps a parameter node to a scalar node.
    """
    w = np.array(w, dtype=np.float64)
    node = parameter(w)
    out = f(node)
    if not np.isfinite(out.value).all():
        raise FloatingPointError("function value is not finite")
    out.backward()
    numeric = numerical_gradient(lambda v: float(f(constant(v)).value), w, h)
    return max_relative_error(node.grad, numeric)


def gradients(output: Node, params: Iterable[Node]) -> list[np.ndarray]:
    output.backward()
    return [p.grad if p.grad is not None else np.zeros_like(p.value) for p in params]

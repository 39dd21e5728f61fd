"""Residual MLP with removable blocks.

A block maps ``x`` to ``x + f(x)`` when its input and output widths match and
to ``f(x)`` otherwise, with ``f = affine -> activation -> affine``. Only the
equal-width (residual) blocks can be scored and swapped for the identity;
width-changing blocks can instead be replaced by a trained affine adapter.
"""

from __future__ import annotations

import enum
import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .ot import as_point_cloud

CHECKPOINT_MAGIC = b"RMLPCKPT"
CHECKPOINT_VERSION = 1


class BlockState(str, enum.Enum):
    ACTIVE = "active"
    IDENTITY = "identity"
    ADAPTER_ONLY = "adapter_only"


def _init_affine(fan_in: int, fan_out: int, rng: np.random.Generator):
    bound = 1.0 / np.sqrt(fan_in)
    W = rng.uniform(-bound, bound, size=(fan_in, fan_out))
    b = rng.uniform(-bound, bound, size=fan_out)
    return W, b


@dataclass
class Block:
    in_dim: int
    hidden_dim: int
    out_dim: int
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    activation: str = "relu"
    state: BlockState = BlockState.ACTIVE
    adapter_W: Optional[np.ndarray] = None
    adapter_b: Optional[np.ndarray] = None
    frozen: bool = False

    @property
    def residual(self) -> bool:
        return self.in_dim == self.out_dim

    @property
    def has_adapter(self) -> bool:
        return self.adapter_W is not None

    def param_names(self) -> list[str]:
        """Names of the arrays that are live on the main path in the current state."""
        if self.state is BlockState.ACTIVE:
            return ["W1", "b1", "W2", "b2"]
        if self.state is BlockState.ADAPTER_ONLY:
            return ["adapter_W", "adapter_b"]
        return []

    def branch(self, x, params: dict) -> ad.Node:
        """The learned map f(x) on the main path (Active state only)."""
        h = ad.affine(x, params["W1"], params["b1"])
        if self.activation == "relu":
            h = ad.relu(h)
        elif self.activation != "linear":
            raise ValueError(f"unknown activation {self.activation!r}")
        return ad.affine(h, params["W2"], params["b2"])

    def apply(self, x, params: dict) -> ad.Node:
        if self.state is BlockState.IDENTITY:
            return ad.constant(x)
        if self.state is BlockState.ADAPTER_ONLY:
            return ad.affine(x, params["adapter_W"], params["adapter_b"])
        fx = self.branch(x, params)
        return ad.residual_add(x, fx) if self.residual else fx

    def adapter_output(self, x, params: Optional[dict] = None) -> ad.Node:
        if not self.has_adapter:
            raise ValueError("block has no adapter")
        params = params or {}
        return ad.affine(x, params.get("adapter_W", self.adapter_W), params.get("adapter_b", self.adapter_b))

    def macs(self) -> int:
        if self.state is BlockState.ACTIVE:
            return self.in_dim * self.hidden_dim + self.hidden_dim * self.out_dim
        if self.state is BlockState.ADAPTER_ONLY:
            return self.in_dim * self.out_dim
        return 0

    def depth(self) -> int:
        return {BlockState.ACTIVE: 2, BlockState.ADAPTER_ONLY: 1, BlockState.IDENTITY: 0}[self.state]


@dataclass
class ResidualNet:
    input_dim: int
    num_classes: int
    blocks: list[Block]
    head_W: np.ndarray
    head_b: np.ndarray

    # --- structure --------------------------------------------------------------

    @property
    def widths(self) -> list[int]:
        return [b.out_dim for b in self.blocks]

    def eligible(self, k: int) -> bool:
        """Whether block ``k`` can be scored by a distance and replaced by the identity."""
        return self.blocks[k].residual

    def live_eligible(self) -> list[int]:
        return [k for k, b in enumerate(self.blocks) if b.residual and b.state is BlockState.ACTIVE]

    def check(self) -> None:
        dim = self.input_dim
        for k, b in enumerate(self.blocks):
            if b.in_dim != dim:
                raise ValueError(f"block {k} expects width {b.in_dim}, receives {dim}")
            if b.state is BlockState.IDENTITY and not b.residual:
                raise ValueError(f"block {k} changes width and cannot be the identity")
            if b.state is BlockState.ADAPTER_ONLY and not b.has_adapter:
                raise ValueError(f"block {k} is adapter-only but has no adapter")
            dim = b.out_dim
        if self.head_W.shape != (dim, self.num_classes):
            raise ValueError(f"head expects {self.head_W.shape}, features are {dim}-wide")

    # --- parameters -------------------------------------------------------------

    def parameters(self, live_only: bool = False, trainable_only: bool = False) -> dict[str, np.ndarray]:
        """Parameter arrays keyed ``blocks.<k>.<name>`` and ``head.W`` / ``head.b``.

        Arrays are returned by reference so optimizers can update them in place.
        """
        out = {}
        for k, b in enumerate(self.blocks):
            if trainable_only and b.frozen:
                continue
            names = b.param_names() if live_only else ["W1", "b1", "W2", "b2", "adapter_W", "adapter_b"]
            for name in names:
                arr = getattr(b, name)
                if arr is not None:
                    out[f"blocks.{k}.{name}"] = arr
        out["head.W"] = self.head_W
        out["head.b"] = self.head_b
        return out

    def parameter_nodes(self, trainable_only: bool = True) -> dict[str, ad.Node]:
        """Fresh leaf nodes for the live parameters; frozen blocks become constants."""
        nodes = {}
        for name, arr in self.parameters(live_only=True).items():
            k = _block_index(name)
            frozen = k is not None and self.blocks[k].frozen
            nodes[name] = ad.constant(arr) if (frozen and trainable_only) else ad.parameter(arr)
        return nodes

    def _block_params(self, k: int, nodes: Optional[dict]) -> dict:
        b = self.blocks[k]
        if nodes is None:
            return {n: getattr(b, n) for n in b.param_names()}
        return {n: nodes[f"blocks.{k}.{n}"] for n in b.param_names()}

    # --- evaluation -------------------------------------------------------------

    def forward_collect(self, batch, nodes: Optional[dict] = None):
        """Run the net, returning logits and ``{k: (block input, block output)}``.

        Pairs are collected for every eligible Active block, rows aligned by
        sample. Pass ``nodes`` (from :meth:`parameter_nodes`) to record a graph.
        """
        x = ad.constant(as_point_cloud(batch, "batch"))
        if x.shape[1] != self.input_dim:
            raise ValueError(f"batch has {x.shape[1]} features, net expects {self.input_dim}")
        pairs = {}
        for k, b in enumerate(self.blocks):
            y = b.apply(x, self._block_params(k, nodes))
            if b.residual and b.state is BlockState.ACTIVE:
                pairs[k] = (x, y)
            x = y
        hw = nodes["head.W"] if nodes is not None else self.head_W
        hb = nodes["head.b"] if nodes is not None else self.head_b
        return ad.affine(x, hw, hb), pairs

    def features(self, batch, upto: Optional[int] = None) -> np.ndarray:
        """Input to block ``upto`` (or to the head when ``upto`` is None)."""
        x = as_point_cloud(batch, "batch")
        for k, b in enumerate(self.blocks):
            if upto is not None and k == upto:
                return x
            x = b.apply(x, self._block_params(k, None)).value
        return x

    def forward(self, batch) -> np.ndarray:
        logits, _ = self.forward_collect(batch)
        return logits.value

    def predict(self, batch) -> np.ndarray:
        return np.argmax(self.forward(batch), axis=1)

    def accuracy(self, X, y) -> float:
        return float(np.mean(self.predict(X) == np.asarray(y)))

    # --- surgery ----------------------------------------------------------------

    def replace_with_identity(self, k: int) -> None:
        b = self.blocks[k]
        if not b.residual:
            raise ValueError(f"block {k} changes width ({b.in_dim}->{b.out_dim}) and cannot be removed")
        if b.state is not BlockState.ACTIVE:
            raise ValueError(f"block {k} is already {b.state.value}")
        b.state = BlockState.IDENTITY

    def restore(self, k: int) -> None:
        """Undo a removal (the weights are kept while a block is the identity)."""
        b = self.blocks[k]
        if b.state is not BlockState.IDENTITY:
            raise ValueError(f"block {k} is not removed")
        b.state = BlockState.ACTIVE

    def attach_adapter(self, k: int, rng: np.random.Generator) -> None:
        b = self.blocks[k]
        if b.residual:
            raise ValueError(f"block {k} keeps its width; remove it with replace_with_identity")
        if b.has_adapter:
            raise ValueError(f"block {k} already has an adapter")
        b.adapter_W, b.adapter_b = _init_affine(b.in_dim, b.out_dim, rng)

    def commit_adapter(self, k: int) -> None:
        """Switch block ``k`` to its adapter, discarding the original branch."""
        b = self.blocks[k]
        if not b.has_adapter:
            raise ValueError(f"block {k} has no adapter")
        if b.state is not BlockState.ACTIVE:
            raise ValueError(f"block {k} is already {b.state.value}")
        b.state = BlockState.ADAPTER_ONLY

    # --- metrics ----------------------------------------------------------------

    def critical_path_length(self) -> int:
        return sum(b.depth() for b in self.blocks) + 1

    def macs(self) -> int:
        return sum(b.macs() for b in self.blocks) + int(self.head_W.shape[0] * self.head_W.shape[1])

    def copy(self) -> "ResidualNet":
        import copy
        return copy.deepcopy(self)


def _block_index(name: str) -> Optional[int]:
    parts = name.split(".")
    return int(parts[1]) if parts[0] == "blocks" else None


def build_residual_mlp(input_dim: int, widths: Sequence[int], num_classes: int,
                       rng: np.random.Generator, hidden: Optional[int] = None,
                       activation: str = "relu", lift_activation: Optional[str] = None) -> ResidualNet:
    """Stack ``len(widths)`` blocks; block ``k`` maps ``widths[k-1]`` to ``widths[k]``.

    The first block reads ``input_dim``. ``hidden`` defaults to each block's
    output width. Width-changing blocks use ``lift_activation`` when given
    (``"linear"`` turns them into plain affine lifts). Weights use fan-in
    scaled uniform initialization.
    """
    widths = list(widths)
    if not widths:
        raise ValueError("widths must be non-empty")
    if input_dim < 1 or num_classes < 1 or min(widths) < 1 or (hidden is not None and hidden < 1):
        raise ValueError("all dimensions must be positive")
    blocks = []
    dim = input_dim
    for w in widths:
        h = hidden or w
        W1, b1 = _init_affine(dim, h, rng)
        W2, b2 = _init_affine(h, w, rng)
        act = lift_activation if (lift_activation and dim != w) else activation
        blocks.append(Block(dim, h, w, W1, b1, W2, b2, activation=act))
        dim = w
    head_W, head_b = _init_affine(dim, num_classes, rng)
    return ResidualNet(input_dim, num_classes, blocks, head_W, head_b)


# --- Lipschitz estimates ----------------------------------------------------------------

def _pairs(n: int, budget: int, rng: np.random.Generator) -> np.ndarray:
    total = n * (n - 1) // 2
    if budget >= total:
        return np.array(np.triu_indices(n, k=1)).T
    i = rng.integers(0, n, size=budget)
    j = rng.integers(0, n - 1, size=budget)
    j = j + (j >= i)
    return np.stack([i, j], axis=1)


def lipschitz_estimate(fn, probe, pair_budget: int = 2000,
                       rng: Optional[np.random.Generator] = None) -> float:
    """Empirical Lipschitz lower bound ``max ||fn(x)-fn(y)|| / ||x-y||`` over probe pairs.

    ``fn`` maps an ``(N, d)`` array to an ``(N, d')`` array.
    """
    probe = as_point_cloud(probe, "probe")
    if probe.shape[0] < 2:
        raise ValueError("probe cloud needs at least 2 points")
    rng = rng or np.random.default_rng(0)
    out = np.asarray(fn(probe), dtype=np.float64)
    idx = _pairs(probe.shape[0], pair_budget, rng)
    dx = np.linalg.norm(probe[idx[:, 0]] - probe[idx[:, 1]], axis=1)
    keep = dx > 0
    if not np.any(keep):
        raise ValueError("probe cloud has no pair of distinct points")
    dy = np.linalg.norm(out[idx[keep, 0]] - out[idx[keep, 1]], axis=1)
    return float(np.max(dy / dx[keep]))


def block_lipschitz(net: ResidualNet, probe, pair_budget: int = 2000,
                    rng: Optional[np.random.Generator] = None) -> tuple[list[float], float]:
    """Per-block Lipschitz estimates on the probe's propagated features, and their product."""
    rng = rng or np.random.default_rng(0)
    x = as_point_cloud(probe, "probe")
    estimates = []
    for k, b in enumerate(net.blocks):
        params = net._block_params(k, None)
        estimates.append(lipschitz_estimate(lambda z: b.apply(z, params).value, x, pair_budget, rng))
        x = b.apply(x, params).value
    return estimates, float(np.prod(estimates))


def spectral_norm(W: np.ndarray, iters: int = 500) -> float:
    """Largest singular value by power iteration."""
    v = np.ones(W.shape[1]) / np.sqrt(W.shape[1])
    for _ in range(iters):
        u = W @ v
        nu = np.linalg.norm(u)
        if nu == 0:
            return 0.0
        v = W.T @ (u / nu)
        v /= np.linalg.norm(v)
    return float(np.linalg.norm(W @ v))


# --- checkpoints -----------------------------------------------------------------------

def _header(net: ResidualNet) -> dict:
    return {
        "format_version": CHECKPOINT_VERSION,
        "input_dim": net.input_dim,
        "widths": net.widths,
        "num_classes": net.num_classes,
        "blocks": [
            {"in_dim": b.in_dim, "hidden_dim": b.hidden_dim, "out_dim": b.out_dim,
             "activation": b.activation, "state": b.state.value,
             "adapter": b.has_adapter, "frozen": b.frozen}
            for b in net.blocks
        ],
        "arrays": [[name, list(arr.shape)] for name, arr in net.parameters().items()],
    }


def save_checkpoint(net: ResidualNet, path) -> Path:
    """Write the net as header + little-endian float64 arrays, plus a ``.manifest.json`` mirror.

    Layout: 8-byte magic, uint32 header length, UTF-8 JSON header, then every
    array of ``header["arrays"]`` in order, C-contiguous ``<f8``.
    """
    path = Path(path)
    header = _header(net)
    raw = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(raw)))
        fh.write(raw)
        for arr in net.parameters().values():
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    manifest = path.with_name(path.name + ".manifest.json")
    manifest.write_text(json.dumps(header, indent=2, sort_keys=True) + "\n")
    return path


def load_checkpoint(path) -> ResidualNet:
    data = Path(path).read_bytes()
    if data[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    (hlen,) = struct.unpack("<I", data[8:12])
    header = json.loads(data[12:12 + hlen].decode("utf-8"))
    if header.get("format_version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {header.get('format_version')}")
    offset = 12 + hlen
    arrays = {}
    for name, shape in header["arrays"]:
        count = int(np.prod(shape)) if shape else 1
        arrays[name] = np.frombuffer(data, dtype="<f8", count=count, offset=offset).reshape(shape).astype(np.float64)
        offset += 8 * count
    if offset != len(data):
        raise ValueError(f"{path}: {len(data) - offset} trailing bytes")
    blocks = []
    for k, spec in enumerate(header["blocks"]):
        p = f"blocks.{k}."
        blocks.append(Block(
            spec["in_dim"], spec["hidden_dim"], spec["out_dim"],
            arrays[p + "W1"], arrays[p + "b1"], arrays[p + "W2"], arrays[p + "b2"],
            activation=spec["activation"], state=BlockState(spec["state"]),
            adapter_W=arrays.get(p + "adapter_W"), adapter_b=arrays.get(p + "adapter_b"),
            frozen=spec["frozen"],
        ))
    net = ResidualNet(header["input_dim"], header["num_classes"], blocks, arrays["head.W"], arrays["head.b"])
    net.check()
    return net

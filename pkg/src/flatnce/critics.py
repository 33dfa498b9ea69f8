"""Critic networks mapping sample pairs to affinity scores.

Four kinds:

* ``bilinear``   -- g(x, y) = beta * x^T W y
* ``separable``  -- g(x, y) = beta * <f(x), h(y)> with two small MLP
  encoders (2 hidden ReLU layers), optionally unit-normalized outputs
* ``joint``      -- an MLP on the concatenated pair [x, y]
* ``dual-u``     -- same architecture as ``joint`` but evaluated on
  positive pairs only; the dual variable of the FLO objective

The inverse temperature beta scales every score; it is controlled
externally (fixed or by the ESS scheduler), never by gradient.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad

CRITIC_KINDS = ("bilinear", "separable", "joint", "dual-u")


@dataclass
class CriticParams:
    """Named weight arrays plus the scalar knobs of one critic."""

    kind: str
    input_dim: int
    embed_dim: int
    hidden_dim: int
    beta: float
    normalize: bool
    arrays: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in CRITIC_KINDS:
            raise ValueError(f"unknown critic kind {self.kind!r}; expected one of {CRITIC_KINDS}")
        if self.beta <= 0:
            raise ValueError(f"inverse temperature beta must be positive, got {self.beta}")

    def copy(self) -> "CriticParams":
        return CriticParams(
            kind=self.kind,
            input_dim=self.input_dim,
            embed_dim=self.embed_dim,
            hidden_dim=self.hidden_dim,
            beta=self.beta,
            normalize=self.normalize,
            arrays={k: v.copy() for k, v in self.arrays.items()},
        )


@dataclass
class ScoreMatrix:
    """K-by-K critic scores for one batch; entry (i, i) is the positive pair."""

    scores: ad.Node

    def __post_init__(self):
        rows, cols = self.scores.shape
        if rows != cols:
            raise ValueError(f"score matrix must be square, got {self.scores.shape}")
        if rows < 2:
            raise ValueError(f"score matrix needs K >= 2 so negatives exist, got K={rows}")

    @property
    def k(self) -> int:
        return self.scores.shape[0]

    @property
    def values(self) -> np.ndarray:
        return self.scores.value


def score_matrix(values) -> ScoreMatrix:
    """Wrap raw score values (array or node) as a ScoreMatrix."""
    if isinstance(values, ad.Node):
        return ScoreMatrix(values)
    return ScoreMatrix(ad.constant(values))


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=(fan_in, fan_out))


def _mlp_arrays(rng, prefix: str, in_dim: int, hidden: int, out_dim: int) -> dict[str, np.ndarray]:
    return {
        f"{prefix}w1": _glorot(rng, in_dim, hidden),
        f"{prefix}b1": np.zeros((1, hidden)),
        f"{prefix}w2": _glorot(rng, hidden, hidden),
        f"{prefix}b2": np.zeros((1, hidden)),
        f"{prefix}w3": _glorot(rng, hidden, out_dim),
        f"{prefix}b3": np.zeros((1, out_dim)),
    }


def init_critic(
    kind: str,
    input_dim: int,
    embed_dim: int = 64,
    hidden_dim: int = 64,
    beta: float = 1.0,
    normalize: bool = False,
    rng: np.random.Generator | None = None,
) -> CriticParams:
    """Seeded Glorot-uniform weights, zero biases."""
    if rng is None:
        rng = np.random.Generator(np.random.Philox(0))
    if kind == "bilinear":
        arrays = {"w": _glorot(rng, input_dim, input_dim)}
    elif kind == "separable":
        arrays = {}
        arrays.update(_mlp_arrays(rng, "x_", input_dim, hidden_dim, embed_dim))
        arrays.update(_mlp_arrays(rng, "y_", input_dim, hidden_dim, embed_dim))
    elif kind in ("joint", "dual-u"):
        arrays = _mlp_arrays(rng, "", 2 * input_dim, hidden_dim, 1)
    else:
        raise ValueError(f"unknown critic kind {kind!r}; expected one of {CRITIC_KINDS}")
    return CriticParams(
        kind=kind,
        input_dim=input_dim,
        embed_dim=embed_dim,
        hidden_dim=hidden_dim,
        beta=beta,
        normalize=normalize,
        arrays=arrays,
    )


class BoundCritic:
    """A critic with its arrays bound as graph leaves for one forward pass.

    The trainer keeps the binding so it can read per-array gradients
    after `backward`; evaluation paths can simply drop it.
    """

    def __init__(self, params: CriticParams, dtype=np.float64):
        self.params = params
        self.dtype = dtype
        self.nodes = {name: ad.parameter(arr, dtype=dtype) for name, arr in params.arrays.items()}

    def _mlp(self, prefix: str, x: ad.Node) -> ad.Node:
        n = self.nodes
        h1 = ad.relu(ad.add(ad.matmul(x, n[f"{prefix}w1"]), n[f"{prefix}b1"]))
        h2 = ad.relu(ad.add(ad.matmul(h1, n[f"{prefix}w2"]), n[f"{prefix}b2"]))
        return ad.add(ad.matmul(h2, n[f"{prefix}w3"]), n[f"{prefix}b3"])

    def _const(self, arr: np.ndarray) -> ad.Node:
        return ad.constant(arr, dtype=self.dtype)

    def score_matrix(self, xs: np.ndarray, ys: np.ndarray) -> ScoreMatrix:
        p = self.params
        if p.kind == "dual-u":
            raise ValueError("a dual-u critic scores positive pairs only; use dual_scores")
        k = _check_batch(p, xs, ys)
        if p.kind == "bilinear":
            x = self._const(xs)
            y = self._const(ys)
            raw = ad.matmul(ad.matmul(x, self.nodes["w"]), ad.transpose(y))
        elif p.kind == "separable":
            fx = self._mlp("x_", self._const(xs))
            hy = self._mlp("y_", self._const(ys))
            if p.normalize:
                fx = ad.l2_normalize_rows(fx)
                hy = ad.l2_normalize_rows(hy)
            raw = ad.matmul(fx, ad.transpose(hy))
        else:  # joint
            pairs = np.concatenate(
                [np.repeat(xs, k, axis=0), np.tile(ys, (k, 1))], axis=1
            )
            out = self._mlp("", self._const(pairs))
            raw = ad.reshape(out, k, k)
        return ScoreMatrix(ad.scale(raw, p.beta))

    def dual_scores(self, xs: np.ndarray, ys: np.ndarray) -> ad.Node:
        p = self.params
        if p.kind != "dual-u":
            raise ValueError(f"dual_scores needs a dual-u critic, got kind {p.kind!r}")
        _check_batch(p, xs, ys)
        pairs = np.concatenate([xs, ys], axis=1)
        return self._mlp("", self._const(pairs))

    def grads(self) -> dict[str, np.ndarray]:
        missing = [name for name, node in self.nodes.items() if node.grad is None]
        if missing:
            raise ValueError(f"no gradients yet for {missing}; run backward() first")
        return {name: node.grad for name, node in self.nodes.items()}


def _check_batch(p: CriticParams, xs: np.ndarray, ys: np.ndarray) -> int:
    if xs.shape[0] != ys.shape[0]:
        raise ValueError(f"batch size mismatch: {xs.shape[0]} xs vs {ys.shape[0]} ys")
    if xs.shape[0] < 2:
        raise ValueError(f"batch size must be >= 2 so negatives exist, got {xs.shape[0]}")
    if xs.shape[1] != p.input_dim or ys.shape[1] != p.input_dim:
        raise ValueError(
            f"sample dimension mismatch: critic expects {p.input_dim}, "
            f"got xs {xs.shape[1]} and ys {ys.shape[1]}"
        )
    return xs.shape[0]


def score_batch(params: CriticParams, xs: np.ndarray, ys: np.ndarray) -> ScoreMatrix:
    """ScoreMatrix with scores[i, j] = g(x_i, y_j); pure in (params, xs, ys)."""
    return BoundCritic(params).score_matrix(xs, ys)


def dual_score_batch(params: CriticParams, xs: np.ndarray, ys: np.ndarray) -> ad.Node:
    """The dual critic evaluated on positive pairs only, as a K-by-1 node."""
    return BoundCritic(params).dual_scores(xs, ys)


def save_checkpoint(params: CriticParams, path) -> None:
    """JSON checkpoint; float64 values survive the round-trip bit-exactly."""
    doc = {
        "kind": params.kind,
        "input_dim": params.input_dim,
        "embed_dim": params.embed_dim,
        "hidden_dim": params.hidden_dim,
        "beta": params.beta,
        "normalize": params.normalize,
        "arrays": [
            {"name": name, "shape": list(arr.shape), "data": arr.ravel().tolist()}
            for name, arr in params.arrays.items()
        ],
    }
    with open(path, "w") as fh:
        json.dump(doc, fh)


def load_checkpoint(path) -> CriticParams:
    with open(path) as fh:
        doc = json.load(fh)
    arrays = {
        entry["name"]: np.array(entry["data"], dtype=np.float64).reshape(entry["shape"])
        for entry in doc["arrays"]
    }
    return CriticParams(
        kind=doc["kind"],
        input_dim=doc["input_dim"],
        embed_dim=doc["embed_dim"],
        hidden_dim=doc["hidden_dim"],
        beta=doc["beta"],
        normalize=doc["normalize"],
        arrays=arrays,
    )

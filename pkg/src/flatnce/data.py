"""Synthetic joint distributions with exact mutual-information oracles.

Batches pair positives row-by-row: (xs[i], ys[i]) is a joint draw, while
(xs[i], ys[j]) for j != i are product-of-marginals negatives simply
because rows are i.i.d.

Randomness comes from a counter-based Philox stream with Gaussian
variates produced by Box-Muller, so a (spec, K, seed, draw index) tuple
always yields identical bytes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DATASET_KINDS = ("correlated_gaussian", "cubic_gaussian", "shared_latent_views")


@dataclass(frozen=True)
class DatasetSpec:
    """A synthetic joint distribution over (x, y) pairs.

    correlated_gaussian: per dimension, (x, y) zero-mean unit-variance
        jointly Gaussian with correlation `rho`.
    cubic_gaussian: same, then y -> y**3 (MI is invariant under
        invertible maps, so the oracle is unchanged).
    shared_latent_views: z ~ N(0, I_d), x = z + sigma * e1,
        y = z + sigma * e2 with independent standard-normal noise.
    """

    kind: str = "correlated_gaussian"
    dim: int = 1
    rho: float = 0.0
    sigma: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in DATASET_KINDS:
            raise ValueError(f"unknown dataset kind {self.kind!r}; expected one of {DATASET_KINDS}")
        if self.dim < 1:
            raise ValueError(f"dim must be >= 1, got {self.dim}")
        if not abs(self.rho) < 1:
            raise ValueError(f"|rho| must be < 1, got {self.rho}")
        if self.sigma <= 0:
            raise ValueError(f"sigma must be positive, got {self.sigma}")

    def rng(self, stream: int = 0) -> np.random.Generator:
        return rng_stream(self.seed, stream)


@dataclass
class Batch:
    """K joint draws; rows are i.i.d., the pairing (xs[i], ys[i]) is positive."""

    xs: np.ndarray
    ys: np.ndarray

    @property
    def k(self) -> int:
        return self.xs.shape[0]


def rng_stream(seed: int, stream: int = 0) -> np.random.Generator:
    """An independent Philox stream; distinct `stream` values never collide."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=(stream,))))


def standard_normals(rng: np.random.Generator, shape: tuple[int, ...]) -> np.ndarray:
    """Standard-normal variates via Box-Muller on the uniform stream."""
    n = int(np.prod(shape))
    m = (n + 1) // 2
    u1 = 1.0 - rng.random(m)  # (0, 1]; keeps log() finite
    u2 = rng.random(m)
    r = np.sqrt(-2.0 * np.log(u1))
    z = np.concatenate([r * np.cos(2.0 * np.pi * u2), r * np.sin(2.0 * np.pi * u2)])
    return z[:n].reshape(shape)


def sample_batch(spec: DatasetSpec, k: int, rng: np.random.Generator) -> Batch:
    """Draw K i.i.d. positive pairs from the joint distribution."""
    if k < 2:
        raise ValueError(f"batch size must be >= 2 so in-batch negatives exist, got {k}")
    d = spec.dim
    if spec.kind in ("correlated_gaussian", "cubic_gaussian"):
        z1 = standard_normals(rng, (k, d))
        z2 = standard_normals(rng, (k, d))
        xs = z1
        ys = spec.rho * z1 + np.sqrt(1.0 - spec.rho**2) * z2
        if spec.kind == "cubic_gaussian":
            ys = ys**3
        return Batch(xs=xs, ys=ys)
    z = standard_normals(rng, (k, d))
    e1 = standard_normals(rng, (k, d))
    e2 = standard_normals(rng, (k, d))
    return Batch(xs=z + spec.sigma * e1, ys=z + spec.sigma * e2)


def true_mi(spec: DatasetSpec) -> float:
    """Exact mutual information in nats.

    Gaussian and cubic kinds: -(d/2) ln(1 - rho^2). Shared-latent views:
    x and y are jointly Gaussian per dimension with unit cross-covariance
    and variance 1 + sigma^2, so the determinant formula gives
    -(d/2) ln(1 - r^2) with r = 1 / (1 + sigma^2).
    """
    if spec.kind in ("correlated_gaussian", "cubic_gaussian"):
        return -0.5 * spec.dim * np.log1p(-spec.rho**2)
    r = 1.0 / (1.0 + spec.sigma**2)
    return -0.5 * spec.dim * np.log1p(-(r**2))


def rho_for_mi(mi: float, dim: int) -> float:
    """Per-dimension correlation giving target MI: inverts -(d/2) ln(1-rho^2)."""
    if mi < 0:
        raise ValueError(f"target MI must be nonnegative, got {mi}")
    return float(np.sqrt(-np.expm1(-2.0 * mi / dim)))


def density_ratio_critic(spec: DatasetSpec):
    """The exact log density-ratio critic g*(x, y) = log p(y|x) - log p(y).

    Only defined for the correlated_gaussian kind, where per dimension
    y | x ~ N(rho x, 1 - rho^2) and y ~ N(0, 1). Returns a callable
    mapping (xs: K-by-d, ys: K-by-d) to the K-by-K matrix of pairwise
    scores, suitable as an oracle critic for calibration runs.
    """
    if spec.kind != "correlated_gaussian":
        raise ValueError(
            f"density_ratio_critic needs kind 'correlated_gaussian', got {spec.kind!r}"
        )
    rho = spec.rho
    d = spec.dim
    one_minus = 1.0 - rho**2

    def critic(xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
        x2 = (xs * xs).sum(axis=1)[:, None]  # K x 1
        y2 = (ys * ys).sum(axis=1)[None, :]  # 1 x K
        cross = xs @ ys.T  # K x K of sum_d x_i y_j
        quad = y2 - 2.0 * rho * cross + rho**2 * x2
        return -quad / (2.0 * one_minus) + y2 / 2.0 - 0.5 * d * np.log(one_minus)

    return critic

"""Training diagnostics: effective sample size, the ESS-targeting
temperature controller, saturation detection, and the low-precision
gradient probe.

ESS of a simplex weight vector w is 1 / (K sum_j w_j^2): 1 means every
negative contributes equally to the gradient, 1/K means a single sample
dominates. The controller steers ESS toward a target by multiplicative
updates of the inverse temperature beta. Two branch directions ship:
``alg-s1-verbatim`` applies "ESS > target => shrink beta" literally,
``negative-feedback`` reverses it, which is the direction that actually
drives ESS toward the target (larger beta sharpens weights and lowers
ESS). The verbatim rule is kept selectable for faithfulness; see the
README for the discrepancy note.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .critics import ScoreMatrix
from .estimators import infonce, infonce_naive, negative_weights

SCHEDULER_MODES = ("alg-s1-verbatim", "negative-feedback")


def ess(weights) -> float:
    """Effective sample size 1 / (K sum w^2) of one simplex weight vector.

    Clamped to [1/K, 1] only to absorb roundoff at the 1e-12 level.
    """
    w = np.asarray(weights, dtype=np.float64).ravel()
    if w.size == 0:
        raise ValueError("ess: empty weight vector")
    if np.any(w < 0):
        raise ValueError("ess: weights must be nonnegative")
    total = w.sum()
    if abs(total - 1.0) > 1e-9:
        raise ValueError(f"ess: weights must sum to 1, got sum {total!r}")
    k = w.size
    return float(np.clip(1.0 / (k * (w**2).sum()), 1.0 / k, 1.0))


@dataclass
class EssReport:
    """Per-row negative-pool weights and their ESS for one batch."""

    weights: np.ndarray
    row_ess: np.ndarray
    mean_ess: float
    beta: float


def ess_report(scores: np.ndarray, beta: float = 1.0) -> EssReport:
    """ESS of the negative-only contrast weights, row by row.

    `scores` are raw critic scores (K-by-K); `beta` tempers the weights
    on top of whatever temperature the critic already applied.
    """
    w = negative_weights(scores, beta=beta)
    row = np.array([ess(w[i]) for i in range(w.shape[0])])
    return EssReport(weights=w, row_ess=row, mean_ess=float(row.mean()), beta=beta)


def batch_mean_ess(scores: np.ndarray, beta: float = 1.0) -> float:
    return ess_report(scores, beta=beta).mean_ess


@dataclass(frozen=True)
class SchedulerState:
    """Inverse temperature plus the ESS target policy.

    `target` is the desired ESS: a constant, or a callable of the step.
    beta is kept inside [beta_min, beta_max] because the multiplicative
    updates are otherwise unbounded.
    """

    beta: float = 1.0
    target: float | Callable[[int], float] = 0.25
    adapt_rate: float = 0.01
    mode: str = "alg-s1-verbatim"
    beta_min: float = 1e-3
    beta_max: float = 1e3

    def __post_init__(self):
        if self.beta <= 0:
            raise ValueError(f"beta must be positive, got {self.beta}")
        if not 0 < self.adapt_rate < 1:
            raise ValueError(f"adapt_rate must be in (0, 1), got {self.adapt_rate}")
        if self.mode not in SCHEDULER_MODES:
            raise ValueError(f"unknown scheduler mode {self.mode!r}; expected one of {SCHEDULER_MODES}")

    def target_at(self, t: int) -> float:
        return float(self.target(t)) if callable(self.target) else float(self.target)


def step_scheduler(state: SchedulerState, observed_ess: float, t: int) -> SchedulerState:
    """One multiplicative beta update from the observed batch ESS."""
    if not 0.0 <= observed_ess <= 1.0:
        raise ValueError(f"observed ESS must be in [0, 1], got {observed_ess}")
    rho = state.target_at(t)
    g = state.adapt_rate
    if state.mode == "alg-s1-verbatim":
        factor = (1.0 - g) if observed_ess > rho else (1.0 + g)
    else:
        factor = (1.0 + g) if observed_ess > rho else (1.0 - g)
    beta = float(np.clip(state.beta * factor, state.beta_min, state.beta_max))
    return replace(state, beta=beta)


def detect_saturation(
    history: Sequence[float], k: int, window: int = 10, slack: float = 0.05
) -> bool:
    """True once the mean of the last `window` batch MI estimates exceeds
    log K - slack. Needs at least `window` observations."""
    if window < 2:
        raise ValueError(f"window must be >= 2, got {window}")
    h = np.asarray(history, dtype=np.float64)
    if h.size < window:
        return False
    return bool(h[-window:].mean() > np.log(k) - slack)


def saturation_step(
    history: Sequence[float], k: int, window: int = 10, slack: float = 0.05
) -> int | None:
    """Index of the first history entry whose trailing window is saturated."""
    h = list(history)
    for i in range(len(h)):
        if detect_saturation(h[: i + 1], k, window=window, slack=slack):
            return i
    return None


@dataclass
class ProbeReport:
    """InfoNCE score gradients computed three ways on one saturated batch."""

    margin: float
    grad_naive32: np.ndarray
    grad_cancelled32: np.ndarray
    grad_naive64: np.ndarray
    grad_reference64: np.ndarray
    rel_err_naive32: np.ndarray
    rel_err_cancelled32: np.ndarray
    median_rel_err_naive32: float
    median_rel_err_cancelled32: float
    naive64_max_diff: float


def _score_grad(values: np.ndarray, dtype, cancelled: bool) -> np.ndarray:
    node = ad.parameter(values, dtype=dtype)
    out = (infonce if cancelled else infonce_naive)(ScoreMatrix(node))
    ad.backward(out.loss)
    return node.grad


def dominance_margin(scores: np.ndarray) -> float:
    """min over rows of (positive score - best negative score)."""
    s = np.asarray(scores, dtype=np.float64)
    d = np.diagonal(s)
    od = s[~np.eye(s.shape[0], dtype=bool)].reshape(s.shape[0], -1)
    return float((d - od.max(axis=1)).min())


def precision_probe(scores: np.ndarray, min_margin: float = 8.0) -> ProbeReport:
    """Compare 32-bit InfoNCE score gradients against a 64-bit reference.

    The naive arrangement subtracts the large positive score after the
    log-sum-exp; the cancelled arrangement removes it from every score
    first. On diagonally dominant (saturated) inputs the two agree in
    64-bit but the naive 32-bit gradient loses precision, because the
    contrast information rides on the small difference of two large
    numbers. Inputs must be saturated (margin >= min_margin) for the
    probe to be meaningful.
    """
    s = np.asarray(scores, dtype=np.float64)
    margin = dominance_margin(s)
    if margin < min_margin:
        raise ValueError(
            f"precision_probe: diagonal dominance margin {margin:.3f} is below "
            f"the required {min_margin}; the probe needs saturated scores"
        )
    s32 = s.astype(np.float32)
    grad_naive32 = _score_grad(s32, np.float32, cancelled=False)
    grad_cancelled32 = _score_grad(s32, np.float32, cancelled=True)
    grad_naive64 = _score_grad(s, np.float64, cancelled=False)
    grad_ref64 = _score_grad(s, np.float64, cancelled=True)

    denom = np.maximum(np.abs(grad_ref64), np.finfo(np.float64).tiny)
    rel_naive = np.abs(grad_naive32.astype(np.float64) - grad_ref64) / denom
    rel_cancelled = np.abs(grad_cancelled32.astype(np.float64) - grad_ref64) / denom
    return ProbeReport(
        margin=margin,
        grad_naive32=grad_naive32,
        grad_cancelled32=grad_cancelled32,
        grad_naive64=grad_naive64,
        grad_reference64=grad_ref64,
        rel_err_naive32=rel_naive,
        rel_err_cancelled32=rel_cancelled,
        median_rel_err_naive32=float(np.median(rel_naive)),
        median_rel_err_cancelled32=float(np.median(rel_cancelled)),
        naive64_max_diff=float(np.abs(grad_naive64 - grad_ref64).max()),
    )


def saturated_scores(
    k: int, margin: float, rng: np.random.Generator, offset: float = 25.0
) -> np.ndarray:
    """Engineer a score matrix whose diagonal dominates every row by
    `margin`, around a large common offset (the regime where the naive
    32-bit arrangement degrades)."""
    s = offset + rng.standard_normal((k, k))
    od = s[~np.eye(k, dtype=bool)].reshape(k, k - 1)
    np.fill_diagonal(s, od.max(axis=1) + margin)
    return s

"""Losses and MI estimates from a score matrix, for every supported objective.

All estimators consume a K-by-K `ScoreMatrix` whose diagonal holds the
positive pairs, and return an `EstimatorOutput` with the quantity to
minimize (a graph node), an MI estimate in nats, and per-row importance
weights with their effective sample sizes.

The self-normalized objectives (flatnce, flatnce_plus, holder_flatnce)
have a forward value of exactly 1: the learning signal lives entirely in
the gradient, which constant-capture routes through the log-sum-exp of
the score contrasts. flatnce_plus keeps the positive's zero contrast in
the pool, which makes its gradient coincide with the InfoNCE gradient.

Conventions: natural logs throughout; row-mean aggregation across the K
anchors so magnitudes are batch-size invariant; dv/nwj pool all K*(K-1)
off-diagonal entries as negatives; flo averages negatives with 1/(K-1)
so that the closed-form optimal dual attains equality batchwise.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .critics import CriticParams, ScoreMatrix, score_batch
from .data import DatasetSpec, sample_batch

ESTIMATOR_TAGS = (
    "infonce",
    "infonce_naive",
    "flatnce",
    "flatnce_plus",
    "holder_flatnce",
    "dv",
    "nwj",
    "flo",
)


@dataclass(frozen=True)
class EstimatorKind:
    """An estimator tag plus the pooling exponent for holder_flatnce."""

    tag: str
    gamma: float | None = None

    def __post_init__(self):
        if self.tag not in ESTIMATOR_TAGS:
            raise ValueError(f"unknown estimator {self.tag!r}; expected one of {ESTIMATOR_TAGS}")
        if self.tag == "holder_flatnce":
            if self.gamma is None or self.gamma == 0:
                raise ValueError("holder_flatnce needs a nonzero gamma")


@dataclass
class EstimatorOutput:
    """loss is minimized; mi_estimate is in nats; weights are row-simplex."""

    loss: ad.Node
    mi_estimate: float
    row_weights: np.ndarray
    row_ess: np.ndarray

    @property
    def loss_value(self) -> float:
        return self.loss.item()


def _row_softmax(v: np.ndarray) -> np.ndarray:
    m = v.max(axis=1, keepdims=True)
    e = np.exp(v - m)
    return e / e.sum(axis=1, keepdims=True)


def _offdiag_values(v: np.ndarray) -> np.ndarray:
    k = v.shape[0]
    return v[~np.eye(k, dtype=bool)].reshape(k, k - 1)


def negative_weights(scores: np.ndarray, beta: float = 1.0) -> np.ndarray:
    """Per-row softmax over the K-1 negative contrasts, optionally tempered.

    These are the self-normalized importance weights that drive the
    contrastive gradient; tempering by beta maps w to w**beta renormalized.
    """
    return _row_softmax(beta * _offdiag_values(np.asarray(scores, dtype=np.float64)))


def _full_weights(scores: np.ndarray) -> np.ndarray:
    return _row_softmax(np.asarray(scores, dtype=np.float64))


def _row_ess(weights: np.ndarray) -> np.ndarray:
    n = weights.shape[1]
    raw = 1.0 / (n * (weights**2).sum(axis=1))
    return np.clip(raw, 1.0 / n, 1.0)


def _contrast_node(sm: ScoreMatrix) -> ad.Node:
    """Delta with Delta[i, j] = g_ij - g_ii; the diagonal is exactly zero."""
    d = ad.diag_part(sm.scores)
    ones_row = ad.constant(np.ones((1, sm.k), dtype=sm.values.dtype))
    return ad.sub(sm.scores, ad.matmul(d, ones_row))


def _log_mean_exp_contrasts(sm: ScoreMatrix) -> ad.Node:
    """Per-row log((1/(K-1)) sum_{j != i} exp(g_ij - g_ii)) as a K-by-1 node."""
    c = ad.logsumexp_row(ad.offdiag(_contrast_node(sm)))
    return ad.sub(c, float(np.log(sm.k - 1)))


def infonce(sm: ScoreMatrix) -> EstimatorOutput:
    """Contrastive cross-entropy with the positive included in the pool.

    mi = (1/K) sum_i [g_ii - logsumexp_j g_ij + log K]; loss = log K - mi.
    The positive score is cancelled from the contrasts before the
    log-sum-exp, which keeps the small learning signal out of the
    large-magnitude diagonal (the low-precision failure of the naive
    arrangement; see `infonce_naive` and the precision probe).
    """
    per_row = ad.logsumexp_row(_contrast_node(sm))
    loss = ad.mean_all(per_row)
    mi = float(np.log(sm.k)) - loss.item()
    w = _full_weights(sm.values)
    return EstimatorOutput(loss, mi, w, _row_ess(w))


def infonce_naive(sm: ScoreMatrix) -> EstimatorOutput:
    """InfoNCE computed as logsumexp(row) minus the positive, with no
    cancellation in the graph. Identical in exact arithmetic; kept only
    for the low-precision probe."""
    lse = ad.logsumexp_row(sm.scores)
    loss = ad.mean_all(ad.sub(lse, ad.diag_part(sm.scores)))
    mi = float(np.log(sm.k)) - loss.item()
    w = _full_weights(sm.values)
    return EstimatorOutput(loss, mi, w, _row_ess(w))


def flatnce(sm: ScoreMatrix) -> EstimatorOutput:
    """Self-normalized contrast over the K-1 negatives.

    Per row, c_i = logsumexp_{j != i}(g_ij - g_ii) and the loss term is
    exp(c_i - capture(c_i)), which is identically 1 forward but carries
    the gradient of c_i. The reported mi_estimate log(K-1) - mean_i c_i
    is a monitoring quantity (a bound only up to a constant), never a
    calibrated estimate.
    """
    c = ad.logsumexp_row(ad.offdiag(_contrast_node(sm)))
    loss = ad.mean_all(ad.exp(ad.sub(c, ad.detach(c))))
    mi = float(np.log(sm.k - 1) - c.value.mean())
    w = negative_weights(sm.values)
    return EstimatorOutput(loss, mi, w, _row_ess(w))


def flatnce_plus(sm: ScoreMatrix) -> EstimatorOutput:
    """flatnce with the positive's zero contrast kept in the pool, so
    c_i = log(1 + sum_{j != i} exp(g_ij - g_ii)); the gradient equals the
    InfoNCE gradient exactly while the forward value stays 1."""
    c = ad.logsumexp_row(_contrast_node(sm))
    loss = ad.mean_all(ad.exp(ad.sub(c, ad.detach(c))))
    mi = float(np.log(sm.k) - c.value.mean())
    w = _full_weights(sm.values)
    return EstimatorOutput(loss, mi, w, _row_ess(w))


def holder_flatnce(sm: ScoreMatrix, gamma: float) -> EstimatorOutput:
    """flatnce with the arithmetic mean of contrast evidence replaced by a
    power mean with exponent gamma (min/max pooling in the limits).

    log m_gamma = (1/gamma) [logsumexp_{j != i}(gamma (g_ij - g_ii)) - log(K-1)],
    and the gradient equals (1/gamma) times the flatnce gradient of the
    gamma-scaled scores.
    """
    gamma = float(gamma)
    if gamma == 0:
        raise ValueError("gamma must be nonzero; the geometric-mean limit is not supported")
    od = ad.offdiag(_contrast_node(sm))
    lse = ad.logsumexp_row(ad.scale(od, gamma))
    log_m = ad.scale(ad.sub(lse, float(np.log(sm.k - 1))), 1.0 / gamma)
    loss = ad.mean_all(ad.exp(ad.sub(log_m, ad.detach(log_m))))
    mi = float(-log_m.value.mean())
    w = negative_weights(sm.values, beta=gamma)
    return EstimatorOutput(loss, mi, w, _row_ess(w))


def dv(sm: ScoreMatrix) -> EstimatorOutput:
    """Donsker-Varadhan: mean positive score minus the log of the mean
    exponentiated score over all K*(K-1) negatives."""
    d = ad.diag_part(sm.scores)
    row_lse = ad.logsumexp_row(ad.offdiag(sm.scores))
    total_lse = ad.logsumexp_row(ad.transpose(row_lse))
    log_mean = ad.sub(total_lse, float(np.log(sm.k * (sm.k - 1))))
    mi_node = ad.sub(ad.mean_all(d), log_mean)
    w = negative_weights(sm.values)
    return EstimatorOutput(ad.neg(mi_node), mi_node.item(), w, _row_ess(w))


def nwj(sm: ScoreMatrix) -> EstimatorOutput:
    """Nguyen-Wainwright-Jordan: mean positive score minus the mean of
    exp(score - 1) over all K*(K-1) negatives."""
    d = ad.diag_part(sm.scores)
    od = ad.offdiag(sm.scores)
    mi_node = ad.sub(ad.mean_all(d), ad.mean_all(ad.exp(ad.sub(od, 1.0))))
    w = negative_weights(sm.values)
    return EstimatorOutput(ad.neg(mi_node), mi_node.item(), w, _row_ess(w))


def flo(sm: ScoreMatrix, u) -> EstimatorOutput:
    """Primal-dual bound with dual variable u evaluated on positives.

    mi = 1 - mean_i [u_i + exp(-u_i) * (1/(K-1)) sum_{j != i} exp(g_ij - g_ii)].
    Equality with -mean_i u_i holds at u = optimal_dual(sm); any other u
    gives a strictly smaller value.
    """
    if isinstance(u, ad.Node):
        u_node = u
    else:
        u_arr = ad.column(u)
        if not np.isfinite(u_arr).all():
            raise ValueError("flo: dual values must be finite")
        u_node = ad.constant(u_arr)
    if u_node.shape != (sm.k, 1):
        raise ValueError(f"flo: dual values must have shape ({sm.k}, 1), got {u_node.shape}")
    log_m = _log_mean_exp_contrasts(sm)
    term = ad.add(u_node, ad.exp(ad.sub(log_m, u_node)))
    mi_node = ad.add(ad.neg(ad.mean_all(term)), 1.0)
    w = negative_weights(sm.values)
    return EstimatorOutput(ad.neg(mi_node), mi_node.item(), w, _row_ess(w))


def optimal_dual(sm: ScoreMatrix) -> np.ndarray:
    """The dual values attaining equality in `flo`, as a K-by-1 array:
    u_i = log((1/(K-1)) sum_{j != i} exp(g_ij - g_ii))."""
    return _log_mean_exp_contrasts(sm).value.copy()


def estimate(kind: EstimatorKind, sm: ScoreMatrix, u=None) -> EstimatorOutput:
    """Dispatch on an EstimatorKind. For flo without an explicit dual, the
    closed-form optimal dual is used (the tight value)."""
    if kind.tag == "holder_flatnce":
        return holder_flatnce(sm, kind.gamma)
    if kind.tag == "flo":
        return flo(sm, optimal_dual(sm) if u is None else u)
    fn = {
        "infonce": infonce,
        "infonce_naive": infonce_naive,
        "flatnce": flatnce,
        "flatnce_plus": flatnce_plus,
        "dv": dv,
        "nwj": nwj,
    }[kind.tag]
    return fn(sm)


def infonce_mi_value(scores: np.ndarray) -> float:
    """InfoNCE MI estimate straight from score values (no graph)."""
    s = np.asarray(scores, dtype=np.float64)
    k = s.shape[0]
    delta = s - np.diagonal(s)[:, None]
    m = delta.max(axis=1, keepdims=True)
    per_row = m + np.log(np.exp(delta - m).sum(axis=1, keepdims=True))
    return float(np.log(k) - per_row.mean())


def evaluate_large_k(
    critic,
    spec: DatasetSpec,
    k_eval: int,
    batches: int = 10,
    rng: np.random.Generator | None = None,
) -> float:
    """InfoNCE MI estimate under a frozen critic on fresh large batches.

    `critic` is either a CriticParams or a callable (xs, ys) -> K-by-K
    scores (e.g. the exact density-ratio critic). Pools of 256+ keep the
    log-K ceiling out of the way for the MI ranges used here; smaller
    pools are allowed but ceiling-limited. Averaged over `batches` draws.
    """
    if k_eval < 2:
        raise ValueError(f"k_eval must be >= 2, got {k_eval}")
    if batches < 1:
        raise ValueError(f"batches must be >= 1, got {batches}")
    if rng is None:
        rng = spec.rng(stream=2)
    total = 0.0
    for _ in range(batches):
        batch = sample_batch(spec, k_eval, rng)
        if isinstance(critic, CriticParams):
            values = score_batch(critic, batch.xs, batch.ys).values
        else:
            values = critic(batch.xs, batch.ys)
        total += infonce_mi_value(values)
    return total / batches

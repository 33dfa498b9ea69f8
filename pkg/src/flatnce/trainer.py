"""The optimization loop: batch -> scores -> loss -> gradients -> update,
with periodic large-pool evaluation, ESS logging and run records.

Three independent random streams per run (parameter init, training
batches, evaluation batches) keep the training trajectory invariant to
the evaluation cadence, and a (config, seed) pair fully determines the
serialized RunRecord when timing capture is off (the default).
"""

from __future__ import annotations

import csv
import hashlib
import json
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .critics import BoundCritic, CriticParams, init_critic
from .data import DatasetSpec, rng_stream, sample_batch, true_mi
from .diagnostics import SCHEDULER_MODES, SchedulerState, batch_mean_ess, step_scheduler
from .estimators import EstimatorKind, estimate, evaluate_large_k, flo, infonce_mi_value

GRAD_INF_LIMIT = 1e6

RUN_COLUMNS = (
    "step",
    "train_loss",
    "batch_mi_estimate",
    "estimator_mi",
    "eval_mi",
    "batch_mean_ess",
    "beta",
    "wall_ms",
)


@dataclass(frozen=True)
class OptimizerSpec:
    kind: str = "adam"
    lr: float = 5e-4
    momentum: float = 0.0  # sgd only
    beta1: float = 0.9  # adam only
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.kind not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.kind!r}; expected 'adam' or 'sgd'")
        if self.lr <= 0:
            raise ValueError(f"learning rate must be positive, got {self.lr}")


def optimizer_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: dict | None,
    spec: OptimizerSpec,
) -> tuple[dict[str, np.ndarray], dict]:
    """One update; functional, returns new arrays and new state.

    sgd: v <- momentum v + g, theta <- theta - lr v.
    adam: standard bias-corrected first/second moments.
    """
    for name in params:
        if params[name].shape != grads[name].shape:
            raise ValueError(
                f"gradient shape mismatch for {name!r}: "
                f"{params[name].shape} vs {grads[name].shape}"
            )
        if not np.isfinite(grads[name]).all():
            raise ValueError(f"non-finite gradient for parameter {name!r}")
    if state is None:
        state = {"t": 0, "m": {n: np.zeros_like(p) for n, p in params.items()}}
        if spec.kind == "adam":
            state["v"] = {n: np.zeros_like(p) for n, p in params.items()}
    new_params: dict[str, np.ndarray] = {}
    if spec.kind == "sgd":
        new_m = {}
        for n, p in params.items():
            new_m[n] = spec.momentum * state["m"][n] + grads[n]
            new_params[n] = p - spec.lr * new_m[n]
        return new_params, {"t": state["t"] + 1, "m": new_m}
    t = state["t"] + 1
    new_m, new_v = {}, {}
    for n, p in params.items():
        g = grads[n]
        new_m[n] = spec.beta1 * state["m"][n] + (1.0 - spec.beta1) * g
        new_v[n] = spec.beta2 * state["v"][n] + (1.0 - spec.beta2) * g**2
        m_hat = new_m[n] / (1.0 - spec.beta1**t)
        v_hat = new_v[n] / (1.0 - spec.beta2**t)
        new_params[n] = p - spec.lr * m_hat / (np.sqrt(v_hat) + spec.eps)
    return new_params, {"t": t, "m": new_m, "v": new_v}


@dataclass
class TrainConfig:
    dataset: DatasetSpec
    estimator: EstimatorKind
    critic: str = "separable"
    embed_dim: int = 64
    hidden_dim: int = 64
    normalize: bool = False
    k: int = 128
    steps: int = 2000
    optimizer: OptimizerSpec = field(default_factory=OptimizerSpec)
    beta: float = 1.0
    beta_mode: str = "fixed"  # "fixed" | "scheduler"
    ess_target: float = 0.25
    adapt_rate: float = 0.01
    scheduler_mode: str = "alg-s1-verbatim"
    eval_every: int = 100
    k_eval: int | None = 4096
    eval_batches: int = 2
    seed: int = 0
    precision: str = "f64"
    timing: bool = False
    label: str = "run"

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError(f"steps must be >= 1, got {self.steps}")
        if self.k < 2:
            raise ValueError(f"batch size must be >= 2, got {self.k}")
        if self.eval_every < 1:
            raise ValueError(f"eval_every must be >= 1, got {self.eval_every}")
        if self.precision not in ("f64", "f32"):
            raise ValueError(f"precision must be 'f64' or 'f32', got {self.precision!r}")
        if self.beta_mode not in ("fixed", "scheduler"):
            raise ValueError(f"beta_mode must be 'fixed' or 'scheduler', got {self.beta_mode!r}")
        if self.scheduler_mode not in SCHEDULER_MODES:
            raise ValueError(
                f"scheduler_mode must be one of {SCHEDULER_MODES}, got {self.scheduler_mode!r}"
            )


def config_hash(cfg: TrainConfig) -> str:
    return hashlib.sha256(
        json.dumps(asdict(cfg), sort_keys=True, default=str).encode()
    ).hexdigest()[:16]


@dataclass
class RunRecord:
    """Header plus one row per logged step; JSONL and CSV carry identical
    columns. The final critic parameters ride along in memory only."""

    header: dict
    rows: list[dict]
    final_critic: CriticParams | None = None
    final_dual: CriticParams | None = None

    def series(self, column: str) -> list:
        return [row[column] for row in self.rows]

    def to_jsonl(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(json.dumps(self.header, sort_keys=True) + "\n")
            for row in self.rows:
                fh.write(json.dumps({c: row[c] for c in RUN_COLUMNS}) + "\n")

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(RUN_COLUMNS)
            for row in self.rows:
                writer.writerow(["" if row[c] is None else row[c] for c in RUN_COLUMNS])

    @classmethod
    def from_jsonl(cls, path) -> "RunRecord":
        header = None
        rows = []
        with open(path) as fh:
            for lineno, line in enumerate(fh, start=1):
                line = line.strip()
                if not line:
                    continue
                try:
                    doc = json.loads(line)
                except json.JSONDecodeError as err:
                    raise ValueError(f"{path}: malformed JSON on line {lineno}: {err}") from None
                if lineno == 1:
                    if "config_hash" not in doc:
                        raise ValueError(f"{path}: line 1 is not a run header")
                    header = doc
                else:
                    missing = [c for c in RUN_COLUMNS if c not in doc]
                    if missing:
                        raise ValueError(f"{path}: line {lineno} is missing columns {missing}")
                    rows.append(doc)
        if header is None:
            raise ValueError(f"{path}: empty record file (line 1 expected a header)")
        return cls(header=header, rows=rows)


def train(cfg: TrainConfig) -> RunRecord:
    """Run the loop; deterministic given (config, seed) in 64-bit mode.

    Aborts (recording the failing step) when the loss goes non-finite or
    any gradient exceeds GRAD_INF_LIMIT in magnitude; dv in particular is
    prone to this without careful tuning.
    """
    dtype = np.float64 if cfg.precision == "f64" else np.float32
    rng_init = rng_stream(cfg.seed, 0)
    rng_batch = rng_stream(cfg.seed, 1)
    rng_eval = rng_stream(cfg.seed, 2)

    critic = init_critic(
        cfg.critic,
        cfg.dataset.dim,
        embed_dim=cfg.embed_dim,
        hidden_dim=cfg.hidden_dim,
        beta=cfg.beta,
        normalize=cfg.normalize,
        rng=rng_init,
    )
    dual = None
    dual_state = None
    if cfg.estimator.tag == "flo":
        dual = init_critic(
            "dual-u", cfg.dataset.dim, hidden_dim=cfg.hidden_dim, rng=rng_init
        )
    opt_state = None
    sched = None
    if cfg.beta_mode == "scheduler":
        sched = SchedulerState(
            beta=cfg.beta,
            target=cfg.ess_target,
            adapt_rate=cfg.adapt_rate,
            mode=cfg.scheduler_mode,
        )

    rows: list[dict] = []
    diverged_at = None
    start = time.perf_counter()
    for t in range(1, cfg.steps + 1):
        batch = sample_batch(cfg.dataset, cfg.k, rng_batch)
        xs = batch.xs.astype(dtype)
        ys = batch.ys.astype(dtype)
        bound = BoundCritic(critic, dtype=dtype)
        sm = bound.score_matrix(xs, ys)
        if cfg.estimator.tag == "flo":
            bound_dual = BoundCritic(dual, dtype=dtype)
            out = flo(sm, bound_dual.dual_scores(xs, ys))
        else:
            out = estimate(cfg.estimator, sm)
        loss_value = out.loss_value
        ad.backward(out.loss)
        grads = bound.grads()
        all_grads = list(grads.values())
        if cfg.estimator.tag == "flo":
            dual_grads = bound_dual.grads()
            all_grads += list(dual_grads.values())
        grad_inf = max(float(np.abs(g).max()) for g in all_grads)
        if not np.isfinite(loss_value) or not np.isfinite(grad_inf) or grad_inf > GRAD_INF_LIMIT:
            diverged_at = t
            break
        critic.arrays, opt_state = optimizer_step(
            critic.arrays, {n: g.astype(np.float64) for n, g in grads.items()}, opt_state, cfg.optimizer
        )
        if cfg.estimator.tag == "flo":
            dual.arrays, dual_state = optimizer_step(
                dual.arrays,
                {n: g.astype(np.float64) for n, g in dual_grads.items()},
                dual_state,
                cfg.optimizer,
            )
        if sched is not None:
            sched = step_scheduler(sched, batch_mean_ess(sm.values), t)
            critic.beta = sched.beta
        if t % cfg.eval_every == 0 or t == cfg.steps:
            eval_mi = None
            if cfg.k_eval:
                eval_mi = evaluate_large_k(
                    critic, cfg.dataset, cfg.k_eval, batches=cfg.eval_batches, rng=rng_eval
                )
            rows.append(
                {
                    "step": t,
                    "train_loss": float(loss_value),
                    "batch_mi_estimate": infonce_mi_value(sm.values),
                    "estimator_mi": float(out.mi_estimate),
                    "eval_mi": eval_mi,
                    "batch_mean_ess": batch_mean_ess(sm.values),
                    "beta": float(critic.beta),
                    "wall_ms": int((time.perf_counter() - start) * 1000) if cfg.timing else 0,
                }
            )
    header = {
        "config_hash": config_hash(cfg),
        "label": cfg.label,
        "estimator": cfg.estimator.tag,
        "k": cfg.k,
        "k_eval": cfg.k_eval,
        "steps": cfg.steps,
        "seed": cfg.seed,
        "true_mi": true_mi(cfg.dataset),
        "log_k": float(np.log(cfg.k)),
        "diverged_at_step": diverged_at,
    }
    return RunRecord(header=header, rows=rows, final_critic=critic, final_dual=dual)


@dataclass
class SweepResult:
    label: str
    record: RunRecord | None
    error: str | None


def _run_guarded(cfg: TrainConfig) -> SweepResult:
    try:
        return SweepResult(label=cfg.label, record=train(cfg), error=None)
    except Exception as err:  # keep the sweep alive; the failure is the result
        return SweepResult(label=cfg.label, record=None, error=f"{type(err).__name__}: {err}")


def sweep(configs: list[TrainConfig], workers: int | None = None) -> list[SweepResult]:
    """Run each config independently; failures become results, not raises."""
    if not configs:
        raise ValueError("sweep needs at least one config")
    if workers is None:
        workers = os.cpu_count() or 1
    workers = min(workers, len(configs))
    if workers <= 1:
        return [_run_guarded(cfg) for cfg in configs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_run_guarded, configs))


def sweep_summary(results: list[SweepResult]) -> list[dict]:
    """One row per run: final metrics or the failure reason."""
    table = []
    for res in results:
        entry = {"label": res.label, "error": res.error}
        if res.record is not None:
            h = res.record.header
            last = res.record.rows[-1] if res.record.rows else {}
            entry.update(
                estimator=h["estimator"],
                k=h["k"],
                steps=h["steps"],
                true_mi=h["true_mi"],
                diverged_at_step=h["diverged_at_step"],
                final_step=last.get("step"),
                final_eval_mi=last.get("eval_mi"),
                final_batch_mi=last.get("batch_mi_estimate"),
                final_mean_ess=last.get("batch_mean_ess"),
            )
        table.append(entry)
    return table

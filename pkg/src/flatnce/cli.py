"""Command-line entry point: estimation, training, sweeps and diagnostics.

Exit codes: 0 success, 2 usage error, 3 divergence guard tripped,
4 bad input file. Every command takes --seed and, in 64-bit mode, is
bytewise reproducible; --json switches stdout to a single JSON document.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from .config import ExperimentConfig, load_config
from .critics import load_checkpoint, save_checkpoint, score_batch, score_matrix
from .data import density_ratio_critic, rng_stream, sample_batch, true_mi
from .diagnostics import precision_probe, saturated_scores, saturation_step
from .estimators import ESTIMATOR_TAGS, EstimatorKind, estimate
from .trainer import RunRecord, sweep, sweep_summary, train

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DIVERGED = 3
EXIT_BAD_INPUT = 4


def _fail_usage(message: str) -> int:
    print(message, file=sys.stderr)
    return EXIT_USAGE


def _fail_input(message: str) -> int:
    print(message, file=sys.stderr)
    return EXIT_BAD_INPUT


def _load_or_default(path) -> ExperimentConfig:
    return load_config(path) if path else ExperimentConfig()


def _estimator_kind(tag: str, gamma: float) -> EstimatorKind | None:
    if tag not in ESTIMATOR_TAGS:
        return None
    return EstimatorKind(tag=tag, gamma=gamma if tag == "holder_flatnce" else None)


def cmd_estimate(args) -> int:
    try:
        cfg = _load_or_default(args.config)
    except ValueError as err:
        return _fail_input(str(err))
    if args.estimator:
        cfg.estimator = args.estimator
    if args.gamma is not None:
        cfg.gamma = args.gamma
    if args.k:
        cfg.k = args.k
    if args.seed is not None:
        cfg.seed = args.seed
    kind = _estimator_kind(cfg.estimator, cfg.gamma)
    if kind is None:
        return _fail_usage(
            f"unknown estimator {cfg.estimator!r}; valid tags: {', '.join(ESTIMATOR_TAGS)}"
        )
    spec = cfg.dataset_spec()
    if args.checkpoint:
        try:
            critic = load_checkpoint(args.checkpoint)
        except (OSError, ValueError, KeyError) as err:
            return _fail_input(f"cannot load checkpoint {args.checkpoint}: {err}")
        scorer = lambda xs, ys: score_batch(critic, xs, ys).values  # noqa: E731
    else:
        try:
            scorer = density_ratio_critic(spec)
        except ValueError as err:
            return _fail_usage(f"{err} (pass --checkpoint to estimate with a trained critic)")
    rng = rng_stream(cfg.seed, 3)
    estimates = []
    for _ in range(args.batches):
        batch = sample_batch(spec, cfg.k, rng)
        out = estimate(kind, score_matrix(scorer(batch.xs, batch.ys)))
        estimates.append(out.mi_estimate)
    estimates = np.array(estimates)
    stderr = float(estimates.std(ddof=1) / np.sqrt(len(estimates))) if len(estimates) > 1 else 0.0
    result = {
        "estimator": kind.tag,
        "k": cfg.k,
        "batches": args.batches,
        "seed": cfg.seed,
        "mi_estimate": float(estimates.mean()),
        "stderr": stderr,
        "true_mi": true_mi(spec),
    }
    if args.json:
        print(json.dumps(result))
    else:
        print(f"estimator={kind.tag} k={cfg.k} batches={args.batches} seed={cfg.seed}")
        print(f"mi_estimate = {result['mi_estimate']:.4f} +- {stderr:.4f} (stderr)")
        print(f"true_mi     = {result['true_mi']:.4f}")
    return EXIT_OK


def _write_record(record: RunRecord, cfg: ExperimentConfig, out_dir: Path) -> dict:
    out_dir.mkdir(parents=True, exist_ok=True)
    jsonl = out_dir / f"{cfg.label}.jsonl"
    csv_path = out_dir / f"{cfg.label}.csv"
    record.to_jsonl(jsonl)
    record.to_csv(csv_path)
    paths = {"jsonl": str(jsonl), "csv": str(csv_path)}
    if record.final_critic is not None:
        ckpt = out_dir / f"{cfg.label}.critic.json"
        save_checkpoint(record.final_critic, ckpt)
        paths["checkpoint"] = str(ckpt)
    if record.final_dual is not None:
        dual = out_dir / f"{cfg.label}.dual.json"
        save_checkpoint(record.final_dual, dual)
        paths["dual_checkpoint"] = str(dual)
    return paths


def cmd_train(args) -> int:
    try:
        cfg = _load_or_default(args.config)
    except ValueError as err:
        return _fail_input(str(err))
    for name in ("estimator", "k", "k_eval", "steps", "seed", "precision"):
        value = getattr(args, name)
        if value is not None:
            setattr(cfg, name, value)
    if args.out:
        cfg.out_dir = args.out
    if _estimator_kind(cfg.estimator, cfg.gamma) is None:
        return _fail_usage(
            f"unknown estimator {cfg.estimator!r}; valid tags: {', '.join(ESTIMATOR_TAGS)}"
        )
    try:
        tc = cfg.train_config()
    except ValueError as err:
        return _fail_input(f"invalid config: {err}")
    record = train(tc)
    paths = _write_record(record, cfg, Path(cfg.out_dir))
    diverged = record.header["diverged_at_step"]
    doc = {"header": record.header, "paths": paths, "final_row": record.rows[-1] if record.rows else None}
    if args.json:
        print(json.dumps(doc))
    else:
        print(f"wrote {paths['jsonl']} ({len(record.rows)} logged steps)")
        if record.rows:
            last = record.rows[-1]
            eval_part = "" if last["eval_mi"] is None else f" eval_mi={last['eval_mi']:.4f}"
            print(
                f"final: step={last['step']} loss={last['train_loss']:.4f} "
                f"batch_mi={last['batch_mi_estimate']:.4f}{eval_part} "
                f"ess={last['batch_mean_ess']:.3f} beta={last['beta']:.4f}"
            )
        if diverged is not None:
            print(f"diverged at step {diverged}", file=sys.stderr)
    return EXIT_DIVERGED if diverged is not None else EXIT_OK


def cmd_sweep(args) -> int:
    configs = []
    for path in args.configs:
        try:
            configs.append(load_config(path))
        except ValueError as err:
            return _fail_input(str(err))
    for cfg in configs:
        if _estimator_kind(cfg.estimator, cfg.gamma) is None:
            return _fail_usage(
                f"unknown estimator {cfg.estimator!r}; valid tags: {', '.join(ESTIMATOR_TAGS)}"
            )
    if args.seed is not None:
        for cfg in configs:
            cfg.seed = args.seed
    if args.out:
        for cfg in configs:
            cfg.out_dir = args.out
    try:
        tcs = [cfg.train_config() for cfg in configs]
    except ValueError as err:
        return _fail_input(f"invalid config: {err}")
    results = sweep(tcs, workers=args.workers)
    for cfg, res in zip(configs, results):
        if res.record is not None:
            _write_record(res.record, cfg, Path(cfg.out_dir))
    table = sweep_summary(results)
    out_dir = Path(args.out or configs[0].out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    summary_path = out_dir / "sweep_summary.json"
    summary_path.write_text(json.dumps(table, indent=2))
    if args.json:
        print(json.dumps({"summary": table, "summary_path": str(summary_path)}))
    else:
        for entry in table:
            if entry["error"] is not None:
                print(f"{entry['label']}: FAILED ({entry['error']})")
            else:
                eval_mi = entry["final_eval_mi"]
                eval_part = "" if eval_mi is None else f" eval_mi={eval_mi:.4f}"
                div = entry["diverged_at_step"]
                div_part = "" if div is None else f" DIVERGED@{div}"
                print(
                    f"{entry['label']}: estimator={entry['estimator']} k={entry['k']}"
                    f"{eval_part} ess={entry['final_mean_ess']:.3f}{div_part}"
                    if entry["final_mean_ess"] is not None
                    else f"{entry['label']}: estimator={entry['estimator']} k={entry['k']}{div_part}"
                )
        print(f"wrote {summary_path}")
    return EXIT_OK


def cmd_diagnose(args) -> int:
    if not args.records:
        return _fail_input("diagnose: no record files given")
    out_dir = Path(args.out)
    reports = []
    for path in args.records:
        try:
            record = RunRecord.from_jsonl(path)
        except (OSError, ValueError) as err:
            return _fail_input(str(err))
        steps = record.series("step")
        ess_series = record.series("batch_mean_ess")
        beta_series = record.series("beta")
        history = record.series("batch_mi_estimate")
        sat_idx = saturation_step(history, record.header["k"], window=args.window, slack=args.slack)
        out_dir.mkdir(parents=True, exist_ok=True)
        series_path = out_dir / f"{Path(path).stem}.ess.csv"
        with open(series_path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(("step", "ess", "beta"))
            writer.writerows(zip(steps, ess_series, beta_series))
        reports.append(
            {
                "record": str(path),
                "label": record.header.get("label"),
                "estimator": record.header.get("estimator"),
                "saturation_step": None if sat_idx is None else steps[sat_idx],
                "final_ess": ess_series[-1] if ess_series else None,
                "series_csv": str(series_path),
            }
        )
    rng = rng_stream(args.seed if args.seed is not None else 0, 3)
    probe_medians_naive = []
    probe_medians_cancelled = []
    wins = 0
    n_probe = 10
    for _ in range(n_probe):
        report = precision_probe(saturated_scores(128, 12.0, rng))
        probe_medians_naive.append(report.median_rel_err_naive32)
        probe_medians_cancelled.append(report.median_rel_err_cancelled32)
        wins += report.median_rel_err_cancelled32 < report.median_rel_err_naive32
    probe_doc = {
        "matrices": n_probe,
        "k": 128,
        "margin": 12.0,
        "median_rel_err_naive32": float(np.median(probe_medians_naive)),
        "median_rel_err_cancelled32": float(np.median(probe_medians_cancelled)),
        "cancelled_better_fraction": wins / n_probe,
    }
    doc = {"runs": reports, "precision_probe": probe_doc}
    if args.json:
        print(json.dumps(doc))
    else:
        for rep in reports:
            sat = rep["saturation_step"]
            sat_part = "never saturates" if sat is None else f"saturates at step {sat}"
            print(f"{rep['record']}: {rep['estimator']} {sat_part}; wrote {rep['series_csv']}")
        print(
            "precision probe: median rel err naive32="
            f"{probe_doc['median_rel_err_naive32']:.3e} "
            f"cancelled32={probe_doc['median_rel_err_cancelled32']:.3e} "
            f"(cancelled better on {wins}/{n_probe})"
        )
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="flatnce",
        description="Contrastive mutual-information estimation: train critics on "
        "synthetic data with known MI, compare estimators, diagnose training.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_est = sub.add_parser("estimate", help="MI estimate under an oracle or frozen critic")
    p_est.add_argument("--config", default=None)
    p_est.add_argument("--estimator", default=None)
    p_est.add_argument("--gamma", type=float, default=None)
    p_est.add_argument("--k", type=int, default=None)
    p_est.add_argument("--batches", type=int, default=50)
    p_est.add_argument("--seed", type=int, default=None)
    p_est.add_argument("--checkpoint", default=None)
    p_est.add_argument("--json", action="store_true")
    p_est.set_defaults(func=cmd_estimate)

    p_train = sub.add_parser("train", help="train a critic and write the run record")
    p_train.add_argument("--config", default=None)
    p_train.add_argument("--estimator", default=None)
    p_train.add_argument("--k", type=int, default=None)
    p_train.add_argument("--k-eval", dest="k_eval", type=int, default=None)
    p_train.add_argument("--steps", type=int, default=None)
    p_train.add_argument("--seed", type=int, default=None)
    p_train.add_argument("--precision", choices=("f32", "f64"), default=None)
    p_train.add_argument("--out", default=None)
    p_train.add_argument("--json", action="store_true")
    p_train.set_defaults(func=cmd_train)

    p_sweep = sub.add_parser("sweep", help="run several configs, emit a summary table")
    p_sweep.add_argument("configs", nargs="+")
    p_sweep.add_argument("--workers", type=int, default=None)
    p_sweep.add_argument("--seed", type=int, default=None)
    p_sweep.add_argument("--out", default=None)
    p_sweep.add_argument("--json", action="store_true")
    p_sweep.set_defaults(func=cmd_sweep)

    p_diag = sub.add_parser("diagnose", help="ESS curves, saturation step, precision probe")
    p_diag.add_argument("records", nargs="*")
    p_diag.add_argument("--out", default=".")
    p_diag.add_argument("--window", type=int, default=10)
    p_diag.add_argument("--slack", type=float, default=0.05)
    p_diag.add_argument("--seed", type=int, default=None)
    p_diag.add_argument("--json", action="store_true")
    p_diag.set_defaults(func=cmd_diagnose)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())

"""Experiment configuration: one flat, comment-capable YAML key table.

Every key is optional, so a minimal config is a handful of lines:

    dataset: correlated_gaussian
    rho: 0.9
    estimator: flatnce
    k: 32
    steps: 2000

Unknown keys are rejected rather than ignored.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from pathlib import Path

import yaml

from .data import DatasetSpec
from .estimators import EstimatorKind
from .trainer import OptimizerSpec, TrainConfig


@dataclass
class ExperimentConfig:
    # run identity / outputs
    label: str = "run"
    out_dir: str = "."
    seed: int = 0
    precision: str = "f64"
    timing: bool = False
    # dataset
    dataset: str = "correlated_gaussian"
    dim: int = 1
    rho: float = 0.9
    sigma: float = 1.0
    # critic
    critic: str = "separable"
    embed_dim: int = 64
    hidden_dim: int = 64
    normalize: bool = False
    # objective
    estimator: str = "infonce"
    gamma: float = 1.0
    # loop
    k: int = 128
    steps: int = 2000
    eval_every: int = 100
    k_eval: int = 4096
    eval_batches: int = 2
    # optimizer
    optimizer: str = "adam"
    lr: float = 5e-4
    momentum: float = 0.0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    # inverse temperature policy
    beta: float = 1.0
    beta_mode: str = "fixed"
    ess_target: float = 0.25
    adapt_rate: float = 0.01
    scheduler_mode: str = "alg-s1-verbatim"

    def dataset_spec(self) -> DatasetSpec:
        return DatasetSpec(
            kind=self.dataset, dim=self.dim, rho=self.rho, sigma=self.sigma, seed=self.seed
        )

    def estimator_kind(self) -> EstimatorKind:
        gamma = self.gamma if self.estimator == "holder_flatnce" else None
        return EstimatorKind(tag=self.estimator, gamma=gamma)

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            dataset=self.dataset_spec(),
            estimator=self.estimator_kind(),
            critic=self.critic,
            embed_dim=self.embed_dim,
            hidden_dim=self.hidden_dim,
            normalize=self.normalize,
            k=self.k,
            steps=self.steps,
            optimizer=OptimizerSpec(
                kind=self.optimizer,
                lr=self.lr,
                momentum=self.momentum,
                beta1=self.adam_beta1,
                beta2=self.adam_beta2,
                eps=self.adam_eps,
            ),
            beta=self.beta,
            beta_mode=self.beta_mode,
            ess_target=self.ess_target,
            adapt_rate=self.adapt_rate,
            scheduler_mode=self.scheduler_mode,
            eval_every=self.eval_every,
            k_eval=self.k_eval if self.k_eval > 0 else None,
            eval_batches=self.eval_batches,
            seed=self.seed,
            precision=self.precision,
            timing=self.timing,
            label=self.label,
        )


_FIELDS = {f.name: f.type for f in fields(ExperimentConfig)}


def config_from_mapping(mapping: dict, default_label: str | None = None) -> ExperimentConfig:
    unknown = sorted(set(mapping) - set(_FIELDS))
    if unknown:
        raise ValueError(f"unknown config keys {unknown}; valid keys: {sorted(_FIELDS)}")
    values = dict(mapping)
    if default_label is not None and "label" not in values:
        values["label"] = default_label
    return ExperimentConfig(**values)


def load_config(path) -> ExperimentConfig:
    """Parse a flat YAML config; a missing `label` defaults to the file stem."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as err:
        raise ValueError(f"cannot read config file {path}: {err}") from None
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as err:
        raise ValueError(f"{path}: not valid YAML: {err}") from None
    if doc is None:
        doc = {}
    if not isinstance(doc, dict):
        raise ValueError(f"{path}: config must be a flat key table, got {type(doc).__name__}")
    return config_from_mapping(doc, default_label=path.stem)


def save_config(cfg: ExperimentConfig, path) -> None:
    with open(path, "w") as fh:
        yaml.safe_dump(asdict(cfg), fh, sort_keys=False)

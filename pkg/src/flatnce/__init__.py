"""Contrastive mutual-information estimation with self-normalized objectives.

Core pieces: a minimal reverse-mode autodiff engine (`autodiff`), critic
networks producing K-by-K score matrices (`critics`), the estimator family
(`estimators`), importance-weight / effective-sample-size diagnostics and
the temperature controller (`diagnostics`), synthetic datasets with exact
MI oracles (`data`), the training loop (`trainer`) and a CLI (`cli`).
"""

from . import autodiff
from .critics import CriticParams, ScoreMatrix, init_critic, score_batch, dual_score_batch
from .data import Batch, DatasetSpec, density_ratio_critic, rho_for_mi, sample_batch, true_mi
from .diagnostics import EssReport, SchedulerState, detect_saturation, ess, precision_probe, step_scheduler
from .estimators import (
    ESTIMATOR_TAGS,
    EstimatorKind,
    EstimatorOutput,
    dv,
    estimate,
    evaluate_large_k,
    flatnce,
    flatnce_plus,
    flo,
    holder_flatnce,
    infonce,
    infonce_naive,
    nwj,
    optimal_dual,
)
from .trainer import OptimizerSpec, RunRecord, TrainConfig, optimizer_step, sweep, train

__version__ = "0.1.0"

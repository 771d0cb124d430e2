"""Selective prediction-set models trained by uncertainty-aware loss minimisation,
with delta-method coverage certificates for single and cross-fitted models."""

from .approximator import MlpParams, MlpSpec, forward, gradient, init_params, sgd_step
from .baselines import (
    IsolationForest,
    ThresholdPolicy,
    fit_threshold_policy,
    iforest_fit,
    iforest_score,
    train_erm,
)
from .datasets import (
    Dataset,
    WhitenTransform,
    gen_density_sim,
    gen_entropy_sim,
    gen_misspec_sim,
    load_csv,
    pca_whiten_fit,
)
from .guards import (
    CoverageEstimate,
    Records,
    RecalibrationError,
    aggregate_membership,
    build_records,
    local_coverage,
    recalibrate_aggregate,
    recalibrate_single,
)
from .losses import Box, IntervalParams, UlmHyper, ulm_objective
from .model import Interval, LabelSet, SelectiveModel, build_model, contains
from .trainer import FoldPlan, TrainConfig, domain_box, kfold_train, train_ulm, tune_lambda

__version__ = "0.1.0"

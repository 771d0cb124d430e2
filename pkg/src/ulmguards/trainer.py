"""Stochastic-gradient training of selective models, cross-fitting and lambda tuning."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from joblib import Parallel, delayed

from .approximator import Momentum, sgd_step
from .datasets import Dataset, pca_whiten_fit
from .losses import Box, UlmHyper, data_loss, ulm_objective_and_grad
from .model import SelectiveModel, build_model

logger = logging.getLogger(__name__)

METRIC_FIELDS = ("epoch", "objective", "data_term", "penalty_term", "mean_psi")


class TrainingDiverged(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    hyper: UlmHyper = field(default_factory=UlmHyper)
    kind: str = "gaussian"
    decision_mode: str = "coupled"
    hidden: tuple[int, ...] = (15, 15)
    decision_hidden: tuple[int, ...] = (15, 15)
    n_classes: int | None = None
    lr: float = 1e-2
    momentum: float = 0.9
    epochs: int = 50
    warmup_epochs: int = 0
    batch_size: int = 64
    m_penalty: int | None = None
    box_margin: float = 0.10
    clip_norm: float | None = 10.0
    beta_init: float = 5.0
    whiten: float | None = None
    seed: int = 0
    lambda_grid: tuple[float, ...] = (0.0,)
    K: int = 3
    shared_fold_seed: bool = False

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not 0 <= self.warmup_epochs <= self.epochs:
            raise ValueError("warmup_epochs must lie in [0, epochs]")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if any(v < 0 for v in self.lambda_grid):
            raise ValueError("lambda_grid entries must be non-negative")
        if self.lr <= 0:
            raise ValueError("lr must be positive")

    @property
    def penalty_points(self) -> int:
        return self.m_penalty or self.batch_size

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hyper"] = asdict(self.hyper)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        d = dict(d)
        hyper = UlmHyper(**d.pop("hyper", {}))
        for key in ("hidden", "decision_hidden", "lambda_grid"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(hyper=hyper, **d)


@dataclass
class FoldPlan:
    assignment: np.ndarray  # fold index in 0..K-1 per observation

    @property
    def K(self) -> int:
        return int(self.assignment.max()) + 1

    def validation(self, k: int) -> np.ndarray:
        return np.flatnonzero(self.assignment == k)

    def training(self, k: int) -> np.ndarray:
        return np.flatnonzero(self.assignment != k)

    def to_dict(self) -> dict:
        return {"K": self.K, "assignment": self.assignment.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> FoldPlan:
        return cls(np.array(d["assignment"], dtype=int))


def make_fold_plan(n: int, K: int, seed: int) -> FoldPlan:
    """Seeded shuffle, then contiguous blocks of size floor(n/K) or ceil(n/K)."""
    if K < 2:
        raise ValueError("K must be >= 2")
    if n < 2 * K:
        raise ValueError(f"need at least 2K={2 * K} observations, got {n}")
    perm = np.random.default_rng(seed).permutation(n)
    assignment = np.empty(n, dtype=int)
    for k, block in enumerate(np.array_split(perm, K)):
        assignment[block] = k
    return FoldPlan(assignment)


def domain_box(X, margin: float = 0.10) -> Box:
    """Bounding box of ``X`` widened by ``margin`` times the range on each side."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    lo, hi = X.min(axis=0), X.max(axis=0)
    pad = margin * (hi - lo)
    pad = np.where(hi - lo > 0, pad, 1e-6)
    return Box(lo - pad, hi + pad)


def _derived_seeds(seed: int, n: int) -> list[int]:
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(n)]


def train_ulm(
    dataset: Dataset,
    config: TrainConfig,
    metrics: list | None = None,
    init: SelectiveModel | None = None,
) -> SelectiveModel:
    """Minimise the uncertainty-aware objective by minibatch momentum SGD.

    Deterministic for a given (dataset, config). When ``metrics`` is a list,
    one dict per epoch (see ``METRIC_FIELDS``) is appended to it.
    """
    if dataset.n == 0:
        raise ValueError("empty dataset")
    if (config.kind == "categorical") != (dataset.outcome_kind == "categorical"):
        raise ValueError(f"{config.kind} model does not fit a {dataset.outcome_kind} outcome")
    init_seed, shuffle_seed, penalty_seed, monitor_seed = _derived_seeds(config.seed, 4)

    transform = pca_whiten_fit(dataset.X, config.whiten) if config.whiten else None
    X = transform.apply(dataset.X) if transform is not None else dataset.X
    y = dataset.y
    n = X.shape[0]
    n_classes = config.n_classes
    if config.kind == "categorical" and n_classes is None:
        n_classes = int(y.max()) + 1

    if init is not None:
        model = SelectiveModel.from_dict(init.to_dict())
    else:
        model = build_model(
            config.kind, X.shape[1], config.hyper,
            hidden=config.hidden, decision_mode=config.decision_mode,
            decision_hidden=config.decision_hidden, n_classes=n_classes,
            seed=init_seed, beta_init=config.beta_init,
        )
    model.hyper = config.hyper
    model.preprocess = transform

    box = domain_box(X, config.box_margin)
    vol = box.volume
    hyper = config.hyper
    m = config.penalty_points
    shuffle_rng = np.random.default_rng(shuffle_seed)
    penalty_rng = np.random.default_rng(penalty_seed)
    monitor_Z = box.sample(1000, np.random.default_rng(monitor_seed)) if hyper.lam > 0 else None
    mom = Momentum(config.momentum) if config.momentum > 0 else None

    theta = model.get_flat()
    # warm-up epochs fit the prediction head with the decision parameters frozen,
    # so the acceptance sigmoid does not saturate against an untrained head
    n_pred = model.pred_params.spec.n_params
    for epoch in range(config.epochs):
        warm = epoch < config.warmup_epochs
        perm = shuffle_rng.permutation(n)
        for start in range(0, n, config.batch_size):
            idx = perm[start:start + config.batch_size]
            Z = box.sample(m, penalty_rng) if hyper.lam > 0 else None
            value, grad, _ = ulm_objective_and_grad(X[idx], y[idx], model, hyper, Z, vol)
            if not np.isfinite(value) or not np.all(np.isfinite(grad)):
                raise TrainingDiverged(
                    f"non-finite objective at epoch {epoch}; try a smaller learning rate"
                )
            if warm:
                grad[n_pred:] = 0.0
            if config.clip_norm is not None:
                norm = float(np.linalg.norm(grad))
                if norm > config.clip_norm:
                    grad = grad * (config.clip_norm / norm)
            theta = sgd_step(theta, grad, config.lr, mom)
            model.set_flat(theta)
        if metrics is not None:
            value, _, parts = ulm_objective_and_grad(X, y, model, hyper, monitor_Z, vol, need_grad=False)
            if not np.isfinite(value):
                raise TrainingDiverged(f"non-finite objective at epoch {epoch}")
            metrics.append({
                "epoch": epoch + 1,
                "objective": value,
                "data_term": parts["data"],
                "penalty_term": parts["penalty"],
                "mean_psi": parts["mean_psi"],
            })
    return model


def kfold_train(
    dataset: Dataset,
    config: TrainConfig,
    plan: FoldPlan | None = None,
    n_jobs: int = 1,
    metrics: list[list] | None = None,
) -> tuple[list[SelectiveModel], FoldPlan]:
    """Train model k on every fold except k; fold k is kept for certifying model k.

    ``metrics``, if given, must hold K lists that receive per-epoch metrics;
    it forces sequential training.
    """
    if plan is None:
        plan = make_fold_plan(dataset.n, config.K, config.seed)
    K = plan.K
    if dataset.n < 2 * K:
        raise ValueError(f"need at least 2K={2 * K} observations, got {dataset.n}")
    seeds = [config.seed] * K if config.shared_fold_seed else _derived_seeds(config.seed + 1, K)
    configs = [replace(config, seed=seeds[k]) for k in range(K)]
    if metrics is not None:
        models = [
            train_ulm(dataset.subset(plan.training(k)), configs[k], metrics[k]) for k in range(K)
        ]
    elif n_jobs != 1:
        models = Parallel(n_jobs=n_jobs)(
            delayed(train_ulm)(dataset.subset(plan.training(k)), configs[k]) for k in range(K)
        )
    else:
        models = [train_ulm(dataset.subset(plan.training(k)), configs[k]) for k in range(K)]
    return list(models), plan


def tune_lambda(dataset: Dataset, config: TrainConfig, n_jobs: int = 1) -> tuple[float, dict[float, float]]:
    """Cross-validated choice of the acceptance-penalty weight.

    The score is the held-out adaptively truncated loss (no penalty, no
    augmentation), averaged over folds with fold-size weights. Ties go to the
    smaller lambda.
    """
    grid = [float(v) for v in config.lambda_grid]
    if not grid:
        raise ValueError("lambda_grid is empty")
    plan = make_fold_plan(dataset.n, config.K, config.seed)
    scores: dict[float, float] = {}
    for lam in sorted(set(grid)):
        cfg = replace(config, hyper=replace(config.hyper, lam=lam))
        models, _ = kfold_train(dataset, cfg, plan, n_jobs=n_jobs)
        total = 0.0
        for k, model in enumerate(models):
            val = dataset.subset(plan.validation(k))
            total += data_loss(model.prepare(val.X), val.y, model, cfg.hyper) * val.n
        scores[lam] = total / dataset.n
        logger.info("lambda=%g cv_score=%.6f", lam, scores[lam])
    best = min(scores, key=lambda lam: (scores[lam], lam))
    return best, scores

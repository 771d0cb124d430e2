"""Simulation studies on the synthetic generators.

Panels A-C fit one selective model and compare its hard decisions on a grid
with a rule computed from the generator truth. Panels D-F repeat K-fold
training plus recalibration over replicates and compare the estimates with
the true coverage of the fitted models.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .datasets import GeneratorTruth, gen_density_sim, gen_entropy_sim, gen_misspec_sim
from .guards import build_records, recalibrate_aggregate, recalibrate_single
from .losses import UlmHyper
from .trainer import TrainConfig, domain_box, kfold_train, train_ulm

PANELS = ("A", "B", "C", "D", "E", "F")


@dataclass
class SimulationConfig:
    grid_size: int = 50
    # panel A: entropy level sets
    entropy_n: int = 5000
    entropy_deltas: tuple[float, ...] = (1.0, 2.0)
    entropy_lam: float = 1e-4
    # panel B: density level sets
    density_n: int = 5000
    density_delta: float = 2.5
    density_lams: tuple[float, ...] = (0.01, 0.03)
    # panel C: misspecification
    misspec_n: int = 5000
    misspec_delta: float = 2.0
    misspec_lam: float = 1e-3
    misspec_warmup: int = 5
    # panels D-F: coverage of cross-fitted models
    coverage_n: int = 2000
    stability_n: int = 1000
    coverage_K: int = 3
    coverage_alpha: float = 0.1
    coverage_delta: float = 2.5
    coverage_lam: float = 0.001
    coverage_epochs: int = 20
    replicates: int = 100
    truth_samples: int = 1_000_000
    ci_level: float = 0.95
    neighborhoods: int = 50
    neighborhood_radius: float = 0.5
    neighborhood_samples: int = 2000
    epochs: int = 40
    hidden: tuple[int, ...] = (15, 15)
    seed: int = 0

    @classmethod
    def from_dict(cls, d: dict) -> SimulationConfig:
        d = dict(d)
        for key, val in list(d.items()):
            if isinstance(val, list):
                d[key] = tuple(val)
        return cls(**d)


def _grid(lower, upper, size: int) -> np.ndarray:
    g1 = np.linspace(lower[0], upper[0], size)
    g2 = np.linspace(lower[1], upper[1], size)
    a, b = np.meshgrid(g1, g2, indexing="ij")
    return np.column_stack([a.ravel(), b.ravel()])


def _train_config(cfg: SimulationConfig, **kw) -> TrainConfig:
    base = TrainConfig(kind="gaussian", epochs=cfg.epochs, hidden=cfg.hidden, seed=cfg.seed)
    return replace(base, **kw)


def _grid_rows(G, psi, oracle, **extra) -> list[dict]:
    acc = psi >= 0.5
    return [
        {**extra, "x1": float(x[0]), "x2": float(x[1]), "accept_prob": float(p),
         "accept": int(a), "oracle_accept": int(o), "agree": int(a == o)}
        for x, p, a, o in zip(G, psi, acc, oracle)
    ]


def panel_entropy(cfg: SimulationConfig) -> list[dict]:
    """Decision boundary versus the entropy level set {H(Y|x) = delta}."""
    ds = gen_entropy_sim(cfg.entropy_n, cfg.seed)
    G = _grid([-3, -3], [3, 3], cfg.grid_size)
    rows = []
    for delta in cfg.entropy_deltas:
        hyper = UlmHyper(alpha=0.1, delta=delta, lam=cfg.entropy_lam)
        model = train_ulm(ds, _train_config(cfg, hyper=hyper))
        oracle = ds.truth.entropy(G) < delta
        rows += _grid_rows(G, model.accept_prob(G), oracle, delta=delta)
    return rows


def best_density_threshold(density: np.ndarray, accept: np.ndarray) -> tuple[float, float]:
    """Threshold c maximising agreement of 1{density > c} with ``accept``."""
    order = np.argsort(density)
    d = density[order]
    a = accept[order].astype(int)
    # cut after position i: rule rejects d[:i], accepts d[i:]
    rejected_correct = np.concatenate([[0], np.cumsum(1 - a)])
    accepted_correct = np.concatenate([np.cumsum(a[::-1])[::-1], [0]])
    agree = rejected_correct + accepted_correct
    i = int(np.argmax(agree))
    c = -np.inf if i == 0 else float(d[i - 1])
    return c, float(agree[i] / d.size)


def panel_density(cfg: SimulationConfig) -> list[dict]:
    """Decision boundary versus density level sets {p*(x) = c}."""
    ds = gen_density_sim(cfg.density_n, cfg.seed)
    box = domain_box(ds.X, 0.10)
    G = _grid(box.lower, box.upper, cfg.grid_size)
    dens = ds.truth.density(G)
    rows = []
    for lam in cfg.density_lams:
        hyper = UlmHyper(alpha=0.1, delta=cfg.density_delta, lam=lam)
        model = train_ulm(ds, _train_config(cfg, hyper=hyper))
        psi = model.accept_prob(G)
        c, _ = best_density_threshold(dens, psi >= 0.5)
        rows += [
            {**r, "density": float(p), "threshold": c}
            for r, p in zip(_grid_rows(G, psi, dens > c, lam=lam), dens)
        ]
    return rows


def panel_misspec(cfg: SimulationConfig) -> list[dict]:
    """Linear prediction head with a separate decision network."""
    ds = gen_misspec_sim(cfg.misspec_n, cfg.seed)
    G = _grid([-3, -3], [3, 3], cfg.grid_size)
    hyper = UlmHyper(alpha=0.1, delta=cfg.misspec_delta, lam=cfg.misspec_lam)
    model = train_ulm(
        ds, _train_config(cfg, hyper=hyper, hidden=(), decision_mode="separate",
                          decision_hidden=cfg.hidden, warmup_epochs=cfg.misspec_warmup),
    )
    inside = np.all(np.abs(G) <= 1.0, axis=1)
    rows = _grid_rows(G, model.accept_prob(G), ~inside, delta=cfg.misspec_delta)
    for r, i in zip(rows, inside):
        r["inside"] = int(i)
    return rows


# ------------------------------------------------------------ coverage studies

def true_coverages(models, truth, X_mc: np.ndarray, alpha: float):
    """Per-model and mixture coverage among accepted inputs under the generator truth.

    Outcomes are integrated analytically given x; ``X_mc`` carries the
    Monte-Carlo average over inputs. Returns (per-model list, mixture) plus
    the (K, m) arrays of psi and conditional coverage.
    """
    psi = np.empty((len(models), X_mc.shape[0]))
    cov = np.empty_like(psi)
    for k, m in enumerate(models):
        Xm = m.prepare(X_mc)
        psi[k] = m.accept_prob(Xm)
        lo, hi = m.interval_bounds(Xm, alpha)
        cov[k] = truth.interval_prob(X_mc, lo, hi)
    num = (psi * cov).mean(axis=1)
    den = psi.mean(axis=1)
    return list(num / den), float(num.sum() / den.sum()), psi, cov


def local_coverage_iqr(psi: np.ndarray, cov: np.ndarray) -> float:
    """IQR over neighbourhoods; rows of ``psi``/``cov`` are neighbourhoods, columns samples."""
    with np.errstate(invalid="ignore", divide="ignore"):
        local = (psi * cov).sum(axis=1) / psi.sum(axis=1)
    local = local[np.isfinite(local)]
    q75, q25 = np.percentile(local, [75, 25])
    return float(q75 - q25)


def coverage_replicate(cfg: SimulationConfig, rep: int, n: int | None = None) -> list[dict]:
    """One replicate: K-fold training, recalibration, and the true coverages."""
    n = cfg.coverage_n if n is None else n
    seq = np.random.SeedSequence([cfg.seed, rep])
    data_seed, train_seed, mc_seed, nb_seed = (int(s.generate_state(1)[0]) for s in seq.spawn(4))
    ds = gen_density_sim(n, data_seed)
    hyper = UlmHyper(alpha=cfg.coverage_alpha, delta=cfg.coverage_delta, lam=cfg.coverage_lam)
    tcfg = _train_config(cfg, hyper=hyper, epochs=cfg.coverage_epochs, seed=train_seed, K=cfg.coverage_K)
    models, plan = kfold_train(ds, tcfg)
    records = build_records(models, ds.X, ds.y, plan, cfg.coverage_alpha)
    estimates = [recalibrate_single(r) for r in records] + [recalibrate_aggregate(records)]

    truth = ds.truth
    X_mc = truth.sample_x(cfg.truth_samples, np.random.default_rng(mc_seed))
    per_model, mixture, _, _ = true_coverages(models, truth, X_mc, cfg.coverage_alpha)
    truths = per_model + [mixture]

    iqrs = _neighbourhood_iqrs(cfg, models, truth, nb_seed)
    labels = [str(k) for k in range(len(models))] + ["agg"]
    rows = []
    for label, est, th, iqr in zip(labels, estimates, truths, iqrs):
        lo, hi = est.ci(cfg.ci_level)
        rows.append({
            "replicate": rep, "n": n, "model": label, "theta": est.theta, "sigma": est.sigma,
            "ci_lower": lo, "ci_upper": hi, "truth": th, "covered": int(lo <= th <= hi),
            "ci_width": hi - lo, "local_iqr": iqr,
        })
    return rows


def _neighbourhood_iqrs(cfg: SimulationConfig, models, truth: GeneratorTruth, seed: int) -> list[float]:
    """Spread of true local coverage over random small balls, per model and for the mixture."""
    rng = np.random.default_rng(seed)
    pool = truth.sample_x(20 * cfg.neighborhoods, rng)
    psi_pool = np.mean([m.accept_prob(m.prepare(pool)) for m in models], axis=0)
    centers = pool[psi_pool >= 0.5][: cfg.neighborhoods]
    m = cfg.neighborhood_samples
    # uniform points in each ball
    ang = rng.uniform(0, 2 * np.pi, size=(len(centers), m))
    rad = cfg.neighborhood_radius * np.sqrt(rng.uniform(size=(len(centers), m)))
    pts = centers[:, None, :] + np.stack([rad * np.cos(ang), rad * np.sin(ang)], axis=-1)
    flat = pts.reshape(-1, 2)
    # weight by the input density so local coverage matches Pr(. | X in ball)
    w = truth.density(flat)
    _, _, psi, cov = true_coverages(models, truth, flat, cfg.coverage_alpha)
    psi = psi * w
    shape = (len(centers), m)
    out = [local_coverage_iqr(psi[k].reshape(shape), cov[k].reshape(shape)) for k in range(len(models))]
    num = (psi * cov).sum(axis=0).reshape(shape)
    den = psi.sum(axis=0).reshape(shape)
    out.append(local_coverage_iqr(den, num / np.where(den > 0, den, 1.0)))
    return out


def panel_coverage(cfg: SimulationConfig, n: int | None = None, replicates: int | None = None,
                   n_jobs: int = 1) -> list[dict]:
    reps = cfg.replicates if replicates is None else replicates
    if n_jobs == 1:
        chunks = [coverage_replicate(cfg, r, n) for r in range(reps)]
    else:
        from joblib import Parallel, delayed
        chunks = Parallel(n_jobs=n_jobs)(delayed(coverage_replicate)(cfg, r, n) for r in range(reps))
    return [row for chunk in chunks for row in chunk]


def summarize_coverage(rows: list[dict]) -> dict:
    """CI coverage rates, widths and IQR comparisons from replicate rows."""
    reps = sorted({r["replicate"] for r in rows})
    by_rep = {rep: [r for r in rows if r["replicate"] == rep] for rep in reps}
    ind = [r for r in rows if r["model"] != "agg"]
    agg = [r for r in rows if r["model"] == "agg"]
    narrower = []
    stabler = []
    for rep, rr in by_rep.items():
        a = next(r for r in rr if r["model"] == "agg")
        others = [r for r in rr if r["model"] != "agg"]
        narrower.append(a["ci_width"] < np.mean([r["ci_width"] for r in others]))
        stabler.append(a["local_iqr"] <= np.median([r["local_iqr"] for r in others]))
    return {
        "replicates": len(reps),
        "individual_ci_coverage": float(np.mean([r["covered"] for r in ind])),
        "aggregate_ci_coverage": float(np.mean([r["covered"] for r in agg])),
        "individual_mean_width": float(np.mean([r["ci_width"] for r in ind])),
        "aggregate_mean_width": float(np.mean([r["ci_width"] for r in agg])),
        "aggregate_narrower_fraction": float(np.mean(narrower)),
        "aggregate_stabler_fraction": float(np.mean(stabler)),
    }


def run_panel(panel: str, cfg: SimulationConfig, n_jobs: int = 1) -> list[dict]:
    panel = panel.upper()
    if panel not in PANELS:
        raise ValueError(f"unknown panel {panel!r}; choose from {', '.join(PANELS)}")
    if panel == "A":
        return panel_entropy(cfg)
    if panel == "B":
        return panel_density(cfg)
    if panel == "C":
        return panel_misspec(cfg)
    if panel == "F":
        return panel_coverage(cfg, n=cfg.stability_n, n_jobs=n_jobs)
    return panel_coverage(cfg, n_jobs=n_jobs)

"""Selective prediction-set models: a decision function paired with a prediction function."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Any

import numpy as np
from scipy.special import expit, softmax
from scipy.stats import norm

from . import losses
from .approximator import MlpParams, MlpSpec, backward_cache, forward_cache, init_params
from .losses import UlmHyper

KINDS = ("interval", "gaussian", "categorical")
DECISION_MODES = ("coupled", "separate")
MODEL_VERSION = 1
BETA_INIT = 5.0


@dataclass(frozen=True)
class Interval:
    lower: float
    upper: float

    def __post_init__(self):
        if self.lower > self.upper:
            raise ValueError(f"inverted interval [{self.lower}, {self.upper}]")

    def contains(self, y) -> bool:
        if isinstance(y, (bool, np.bool_)):
            raise TypeError("interval membership needs a real outcome")
        return bool(self.lower <= float(y) <= self.upper)

    @property
    def size(self) -> float:
        return self.upper - self.lower


@dataclass(frozen=True)
class LabelSet:
    labels: tuple[int, ...]

    def __post_init__(self):
        labels = tuple(sorted(int(v) for v in self.labels))
        if len(set(labels)) != len(labels):
            raise ValueError("labels must be distinct")
        if labels and labels[0] < 0:
            raise ValueError("labels must be non-negative class indices")
        object.__setattr__(self, "labels", labels)

    def contains(self, y) -> bool:
        if isinstance(y, float) and not float(y).is_integer():
            raise TypeError("label membership needs an integer class index")
        return int(y) in self.labels

    @property
    def size(self) -> int:
        return len(self.labels)


PredictionSet = Interval | LabelSet


def contains(pred_set: PredictionSet, y) -> bool:
    """Membership with closed interval ends."""
    return pred_set.contains(y)


def greedy_label_set(probs, alpha: float) -> LabelSet:
    """Most probable classes, in descending order, until their mass reaches 1 - alpha.

    Ties are broken towards the lower class index.
    """
    p = np.asarray(probs, dtype=np.float64)
    order = np.lexsort((np.arange(p.size), -p))
    target = 1.0 - alpha
    mass = 0.0
    chosen = []
    for k in order:
        chosen.append(int(k))
        mass += p[k]
        # tolerate rounding in the running sum
        if mass >= target - 1e-12:
            break
    return LabelSet(tuple(chosen))


@dataclass
class Terms:
    """Forward quantities on a batch, kept for backpropagation."""

    out: np.ndarray
    acts: list
    unc: np.ndarray
    dunc: np.ndarray
    psi: np.ndarray
    loss: np.ndarray | None = None
    dloss: np.ndarray | None = None
    dec_acts: list | None = None


@dataclass
class SelectiveModel:
    kind: str
    pred_params: MlpParams
    hyper: UlmHyper
    decision_mode: str = "coupled"
    beta_raw: float = field(default_factory=lambda: losses.inv_softplus(BETA_INIT))
    decision_params: MlpParams | None = None
    n_classes: int | None = None
    preprocess: Any = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown model kind {self.kind!r}")
        if self.decision_mode not in DECISION_MODES:
            raise ValueError(f"unknown decision mode {self.decision_mode!r}")
        if self.decision_mode == "separate":
            if self.decision_params is None or self.decision_params.spec.output_dim != 1:
                raise ValueError("separate decision mode needs a scalar-output decision network")
        else:
            self.decision_params = None
        out_dim = self.pred_params.spec.output_dim
        if self.kind == "categorical":
            if self.n_classes is None:
                self.n_classes = out_dim
            if out_dim != self.n_classes or out_dim < 2:
                raise ValueError("categorical head needs one logit per class (>= 2)")
        elif out_dim != 2:
            raise ValueError(f"{self.kind} head needs two outputs, got {out_dim}")

    # -------------------------------------------------------------- parameters

    @property
    def input_dim(self) -> int:
        return self.pred_params.spec.input_dim

    @property
    def beta(self) -> float:
        return float(losses.softplus(self.beta_raw))

    def get_flat(self) -> np.ndarray:
        pred = self.pred_params.flatten()
        if self.decision_mode == "coupled":
            return np.concatenate([pred, [self.beta_raw]])
        return np.concatenate([pred, self.decision_params.flatten()])

    def set_flat(self, flat: np.ndarray) -> None:
        flat = np.asarray(flat, dtype=np.float64)
        n_pred = self.pred_params.spec.n_params
        self.pred_params = MlpParams.unflatten(self.pred_params.spec, flat[:n_pred])
        rest = flat[n_pred:]
        if self.decision_mode == "coupled":
            if rest.size != 1:
                raise ValueError("flat vector has the wrong length")
            self.beta_raw = float(rest[0])
        else:
            self.decision_params = MlpParams.unflatten(self.decision_params.spec, rest)

    # -------------------------------------------------------------- batch maths

    def _uncertainty_terms(self, out):
        if self.kind == "interval":
            return losses.interval_uncertainty(out, self.hyper.alpha)
        if self.kind == "gaussian":
            return losses.gaussian_uncertainty(out)
        return losses.categorical_uncertainty(out)

    def _loss_terms(self, out, y):
        if self.kind == "interval":
            return losses.interval_terms(out, np.asarray(y, dtype=np.float64), self.hyper.alpha)
        if self.kind == "gaussian":
            return losses.gaussian_terms(out, np.asarray(y, dtype=np.float64))
        return losses.categorical_terms(out, y)

    def terms(self, X: np.ndarray, y=None) -> Terms:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        if X.shape[1] != self.input_dim:
            raise ValueError(f"inputs have {X.shape[1]} features, model expects {self.input_dim}")
        acts = forward_cache(self.pred_params, X)
        out = acts[-1]
        unc, dunc = self._uncertainty_terms(out)
        dec_acts = None
        if self.decision_mode == "coupled":
            psi = expit(-self.beta * (unc - self.hyper.delta))
        else:
            dec_acts = forward_cache(self.decision_params, X)
            psi = expit(dec_acts[-1][:, 0])
        t = Terms(out, acts, unc, dunc, psi, dec_acts=dec_acts)
        if y is not None:
            t.loss, t.dloss = self._loss_terms(out, y)
        return t

    def backward(self, t: Terms, g_loss, g_psi) -> np.ndarray:
        """Flat gradient given upstream derivatives w.r.t. per-row loss and psi."""
        up_out = np.zeros_like(t.out)
        if g_loss is not None:
            up_out += g_loss[:, None] * t.dloss
        s = t.psi * (1.0 - t.psi)
        if self.decision_mode == "coupled":
            beta = self.beta
            up_out += (g_psi * (-beta * s))[:, None] * t.dunc
            g_beta = float(np.sum(g_psi * (-(t.unc - self.hyper.delta)) * s))
            dec_grad = np.array([g_beta * float(expit(self.beta_raw))])
        else:
            dec_grad = backward_cache(
                self.decision_params, t.dec_acts, (g_psi * s)[:, None]
            ).flatten()
        pred_grad = backward_cache(self.pred_params, t.acts, up_out).flatten()
        return np.concatenate([pred_grad, dec_grad])

    # --------------------------------------------------------- public queries

    def prepare(self, X_raw) -> np.ndarray:
        """Map raw features into the model's input space."""
        X = np.atleast_2d(np.asarray(X_raw, dtype=np.float64))
        return self.preprocess.apply(X) if self.preprocess is not None else X

    def uncertainty(self, X) -> np.ndarray | float:
        single = np.ndim(X) == 1
        u = self.terms(X).unc
        return float(u[0]) if single else u

    def accept_prob(self, X) -> np.ndarray | float:
        single = np.ndim(X) == 1
        psi = self.terms(X).psi
        return float(psi[0]) if single else psi

    def head(self, X) -> dict[str, np.ndarray]:
        """Decoded prediction head: center/radius, mean/sigma or class probabilities."""
        out = self.terms(X).out
        if self.kind == "interval":
            return {"center": out[:, 0], "radius": losses.softplus(out[:, 1])}
        if self.kind == "gaussian":
            return {"mean": out[:, 0], "sigma": losses.gaussian_sigma(out[:, 1])}
        return {"probs": softmax(out, axis=1)}

    def interval_bounds(self, X, alpha: float | None = None) -> tuple[np.ndarray, np.ndarray]:
        if self.kind == "categorical":
            raise TypeError("categorical models produce label sets, not intervals")
        h = self.head(X)
        if self.kind == "interval":
            return h["center"] - h["radius"], h["center"] + h["radius"]
        a = self.hyper.alpha if alpha is None else alpha
        z = norm.ppf(1.0 - a / 2.0)
        return h["mean"] - z * h["sigma"], h["mean"] + z * h["sigma"]

    def prediction_set(self, x, alpha: float | None = None) -> PredictionSet:
        """Prediction set at a single input.

        Interval models ignore ``alpha``: their level is fixed in training.
        """
        x = np.asarray(x, dtype=np.float64).reshape(1, -1)
        a = self.hyper.alpha if alpha is None else alpha
        if self.kind == "categorical":
            return greedy_label_set(self.head(x)["probs"][0], a)
        lo, hi = self.interval_bounds(x, a)
        return Interval(float(lo[0]), float(hi[0]))

    def hits(self, X, y, alpha: float | None = None) -> np.ndarray:
        """Vectorised ``contains(prediction_set(x_i), y_i)`` as 0/1 floats."""
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        if self.kind == "categorical":
            a = self.hyper.alpha if alpha is None else alpha
            probs = self.head(X)["probs"]
            y = np.asarray(y, dtype=int)
            return np.array(
                [float(greedy_label_set(p, a).contains(int(t))) for p, t in zip(probs, y)]
            )
        lo, hi = self.interval_bounds(X, alpha)
        y = np.asarray(y, dtype=np.float64)
        return ((lo <= y) & (y <= hi)).astype(float)

    # ---------------------------------------------------------- serialization

    def to_dict(self) -> dict:
        return {
            "version": MODEL_VERSION,
            "kind": self.kind,
            "decision_mode": self.decision_mode,
            "n_classes": self.n_classes,
            "hyper": {
                "alpha": self.hyper.alpha,
                "delta": self.hyper.delta,
                "lam": self.hyper.lam,
                "gamma": self.hyper.gamma,
                "t_alpha": self.hyper.t_alpha,
            },
            "prediction_net": self.pred_params.to_dict(),
            "beta_raw": float(self.beta_raw) if self.decision_mode == "coupled" else None,
            "decision_net": (
                self.decision_params.to_dict() if self.decision_params is not None else None
            ),
            "preprocess": self.preprocess.to_dict() if self.preprocess is not None else None,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> SelectiveModel:
        from .datasets import WhitenTransform

        if d.get("version") != MODEL_VERSION:
            raise ValueError(f"unsupported model document version {d.get('version')!r}")
        model = cls(
            kind=d["kind"],
            pred_params=MlpParams.from_dict(d["prediction_net"]),
            hyper=UlmHyper(**d["hyper"]),
            decision_mode=d["decision_mode"],
            decision_params=(
                MlpParams.from_dict(d["decision_net"]) if d.get("decision_net") else None
            ),
            n_classes=d.get("n_classes"),
            preprocess=WhitenTransform.from_dict(d["preprocess"]) if d.get("preprocess") else None,
        )
        if d.get("beta_raw") is not None:
            model.beta_raw = float(d["beta_raw"])
        return model

    @classmethod
    def from_json(cls, text: str) -> SelectiveModel:
        return cls.from_dict(json.loads(text))


def build_model(
    kind: str,
    input_dim: int,
    hyper: UlmHyper,
    hidden: tuple[int, ...] = (15, 15),
    decision_mode: str = "coupled",
    decision_hidden: tuple[int, ...] = (15, 15),
    n_classes: int | None = None,
    seed: int = 0,
    beta_init: float = BETA_INIT,
) -> SelectiveModel:
    """Freshly initialised model. Seeds for the two networks derive from ``seed``."""
    out_dim = n_classes if kind == "categorical" else 2
    if out_dim is None:
        raise ValueError("categorical models need n_classes")
    ss = np.random.SeedSequence(seed)
    pred_seed, dec_seed = (int(s.generate_state(1)[0]) for s in ss.spawn(2))
    pred = init_params(MlpSpec(input_dim, tuple(hidden), out_dim), pred_seed)
    dec = None
    if decision_mode == "separate":
        dec = init_params(MlpSpec(input_dim, tuple(decision_hidden), 1), dec_seed)
    return SelectiveModel(
        kind=kind,
        pred_params=pred,
        hyper=hyper,
        decision_mode=decision_mode,
        beta_raw=losses.inv_softplus(beta_init),
        decision_params=dec,
        n_classes=n_classes if kind == "categorical" else None,
    )

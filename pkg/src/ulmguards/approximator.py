"""Dense ReLU networks with hand-written reverse-mode gradients.

Everything here works on float64 arrays. ``forward`` and ``gradient`` accept
either a single input vector or a batch (rows are observations); for a batch
the gradient is summed over rows.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

JSON_VERSION = 1


@dataclass(frozen=True)
class MlpSpec:
    input_dim: int
    hidden_layers: tuple[int, ...]
    output_dim: int

    def __post_init__(self):
        object.__setattr__(self, "hidden_layers", tuple(int(h) for h in self.hidden_layers))
        dims = (self.input_dim, *self.hidden_layers, self.output_dim)
        if any(int(d) < 1 for d in dims):
            raise ValueError(f"all layer sizes must be >= 1, got {dims}")

    @property
    def layer_dims(self) -> list[tuple[int, int]]:
        dims = [self.input_dim, *self.hidden_layers, self.output_dim]
        return list(zip(dims[:-1], dims[1:]))

    @property
    def n_params(self) -> int:
        return sum((fan_in + 1) * fan_out for fan_in, fan_out in self.layer_dims)

    def to_dict(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "hidden_layers": list(self.hidden_layers),
            "output_dim": self.output_dim,
        }

    @classmethod
    def from_dict(cls, d: dict) -> MlpSpec:
        return cls(int(d["input_dim"]), tuple(d["hidden_layers"]), int(d["output_dim"]))


@dataclass
class MlpParams:
    """Weights ``W[l]`` of shape (fan_in, fan_out) and biases ``b[l]``."""

    spec: MlpSpec
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def flatten(self) -> np.ndarray:
        parts = []
        for w, b in zip(self.weights, self.biases):
            parts.append(w.ravel())
            parts.append(b.ravel())
        return np.concatenate(parts) if parts else np.zeros(0)

    @classmethod
    def unflatten(cls, spec: MlpSpec, flat: np.ndarray) -> MlpParams:
        flat = np.asarray(flat, dtype=np.float64)
        if flat.shape != (spec.n_params,):
            raise ValueError(f"expected {spec.n_params} parameters, got shape {flat.shape}")
        weights, biases = [], []
        pos = 0
        for fan_in, fan_out in spec.layer_dims:
            weights.append(flat[pos:pos + fan_in * fan_out].reshape(fan_in, fan_out).copy())
            pos += fan_in * fan_out
            biases.append(flat[pos:pos + fan_out].copy())
            pos += fan_out
        return cls(spec, weights, biases)

    def copy(self) -> MlpParams:
        return MlpParams(self.spec, [w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def to_dict(self) -> dict:
        return {
            "version": JSON_VERSION,
            "spec": self.spec.to_dict(),
            # repr of a Python float round-trips exactly
            "params": [float(v) for v in self.flatten()],
        }

    @classmethod
    def from_dict(cls, d: dict) -> MlpParams:
        if d.get("version") != JSON_VERSION:
            raise ValueError(f"unsupported parameter document version {d.get('version')!r}")
        spec = MlpSpec.from_dict(d["spec"])
        return cls.unflatten(spec, np.array(d["params"], dtype=np.float64))


def init_params(spec: MlpSpec, seed: int) -> MlpParams:
    """He-style uniform initialisation, zero biases."""
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in spec.layer_dims:
        bound = np.sqrt(6.0 / fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return MlpParams(spec, weights, biases)


def _as_batch(params: MlpParams, x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    X = x[None, :] if single else x
    if X.ndim != 2 or X.shape[1] != params.spec.input_dim:
        raise ValueError(
            f"input has shape {x.shape}, network expects input_dim={params.spec.input_dim}"
        )
    return X, single


def forward_cache(params: MlpParams, X: np.ndarray) -> list[np.ndarray]:
    # activations[0] = X, activations[l] = relu(pre_l), last entry = linear output
    acts = [X]
    h = X
    n_layers = len(params.weights)
    for l, (w, b) in enumerate(zip(params.weights, params.biases)):
        z = h @ w + b
        h = np.maximum(z, 0.0) if l < n_layers - 1 else z
        acts.append(h)
    return acts


def forward(params: MlpParams, x) -> np.ndarray:
    X, single = _as_batch(params, x)
    out = forward_cache(params, X)[-1]
    return out[0] if single else out


def backward_cache(params: MlpParams, acts: list[np.ndarray], upstream: np.ndarray) -> MlpParams:
    n_layers = len(params.weights)
    gw = [None] * n_layers
    gb = [None] * n_layers
    delta = upstream
    for l in range(n_layers - 1, -1, -1):
        gw[l] = acts[l].T @ delta
        gb[l] = delta.sum(axis=0)
        if l > 0:
            delta = (delta @ params.weights[l].T) * (acts[l] > 0.0)
    return MlpParams(params.spec, gw, gb)


def gradient(params: MlpParams, x, upstream) -> MlpParams:
    """Gradient of ``<upstream, forward(params, x)>`` w.r.t. every parameter.

    For batched ``x`` the upstream must be batched too and the result is the
    sum of per-row gradients.
    """
    X, single = _as_batch(params, x)
    U = np.asarray(upstream, dtype=np.float64)
    if single:
        U = U[None, :]
    if U.shape != (X.shape[0], params.spec.output_dim):
        raise ValueError(
            f"upstream has shape {np.shape(upstream)}, expected output_dim={params.spec.output_dim}"
        )
    return backward_cache(params, forward_cache(params, X), U)


@dataclass
class Momentum:
    """Velocity buffer for heavy-ball SGD over a flat parameter vector."""

    beta: float = 0.9
    velocity: np.ndarray | None = field(default=None, repr=False)


def sgd_step(params: np.ndarray | MlpParams, grad, lr: float, momentum: Momentum | None = None):
    """One (momentum) SGD update; ``params - lr * grad`` when ``momentum`` is None.

    Works on flat vectors or :class:`MlpParams` (grad of the same type).
    """
    if lr < 0:
        raise ValueError("learning rate must be non-negative")
    structured = isinstance(params, MlpParams)
    p = params.flatten() if structured else np.asarray(params, dtype=np.float64)
    g = grad.flatten() if isinstance(grad, MlpParams) else np.asarray(grad, dtype=np.float64)
    if g.shape != p.shape:
        raise ValueError(f"gradient shape {g.shape} does not match parameters {p.shape}")
    if not np.all(np.isfinite(g)):
        raise FloatingPointError("non-finite gradient entries")
    if momentum is not None:
        if momentum.velocity is None:
            momentum.velocity = np.zeros_like(p)
        momentum.velocity = momentum.beta * momentum.velocity + g
        step = momentum.velocity
    else:
        step = g
    new = p - lr * step
    return MlpParams.unflatten(params.spec, new) if structured else new

"""Differentiable probability predictors trained on binary cross entropy.

Linear and small feed-forward scorers with hand-written backpropagation,
a logistic output link, and symmetric prediction clipping at 1e-7 (the
loss and the calibration metrics both take logs of predictions). Targets
may be hard labels or soft teacher probabilities; the loss is

    bce(y, z) = -(y * log z + (1 - y) * log(1 - z))

in both cases. Gradient correctness is guarded by a central
finite-difference check rather than trust in the algebra.

All randomness (initialization, epoch shuffles) flows through named
substreams of the training seed, so runs are reproducible bit for bit.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ConfigError, DimensionError, DivergenceError
from .rng import substream

PRED_EPS = 1e-7

Layers = list[tuple[np.ndarray, np.ndarray]]


@dataclass(frozen=True)
class PredictorArch:
    kind: str  # "linear" | "feedforward"
    input_dim: int
    hidden_sizes: tuple[int, ...] = ()
    activation: str = "relu"  # "relu" | "tanh"

    def __post_init__(self) -> None:
        if self.kind not in ("linear", "feedforward"):
            raise ConfigError(f"unknown predictor kind {self.kind!r}")
        if self.input_dim < 1:
            raise ConfigError(f"input_dim must be >= 1, got {self.input_dim}")
        if self.kind == "linear" and self.hidden_sizes:
            raise ConfigError("linear predictors take no hidden sizes")
        if self.kind == "feedforward" and not self.hidden_sizes:
            raise ConfigError("feedforward predictors need at least one hidden layer")
        if any(h < 1 for h in self.hidden_sizes):
            raise ConfigError("hidden sizes must be >= 1")
        if self.activation not in ("relu", "tanh"):
            raise ConfigError(f"unknown activation {self.activation!r}")

    @property
    def layer_dims(self) -> list[tuple[int, int]]:
        dims = [self.input_dim, *self.hidden_sizes, 1]
        return list(zip(dims[:-1], dims[1:]))

    @property
    def num_params(self) -> int:
        return sum(fi * fo + fo for fi, fo in self.layer_dims)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float
    epochs: int
    batch_size: int
    optimizer: str = "sgd"  # "sgd" | "adam" (adaptive moment estimation)
    l2: float = 0.0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be > 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.l2 < 0:
            raise ConfigError("l2 must be >= 0")


def glorot_layers(arch: PredictorArch, seed: int) -> Layers:
    """Uniform +-sqrt(6/(fan_in+fan_out)) weights, zero biases, from the seed's init stream."""
    gen = substream(seed, "init")
    layers: Layers = []
    for fan_in, fan_out in arch.layer_dims:
        bound = math.sqrt(6.0 / (fan_in + fan_out))
        w = gen.uniform(-bound, bound, size=(fan_in, fan_out))
        layers.append((w, np.zeros(fan_out)))
    return layers


def _activate(x: np.ndarray, activation: str) -> np.ndarray:
    if activation == "relu":
        return np.maximum(x, 0.0)
    return np.tanh(x)


def _activate_grad(pre: np.ndarray, post: np.ndarray, activation: str) -> np.ndarray:
    if activation == "relu":
        return (pre > 0.0).astype(float)
    return 1.0 - post * post


def sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x, dtype=float)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


@dataclass
class ForwardCache:
    inputs: np.ndarray
    pres: list[np.ndarray]
    posts: list[np.ndarray]
    logit: np.ndarray
    z: np.ndarray  # clipped probability
    clip_mask: np.ndarray  # True where the clip is active (gradient zero)

    @property
    def hidden(self) -> np.ndarray:
        """Last hidden representation (the inputs for a linear model)."""
        return self.posts[-1] if self.posts else self.inputs


def forward_cache(layers: Layers, activation: str, x: np.ndarray) -> ForwardCache:
    pres: list[np.ndarray] = []
    posts: list[np.ndarray] = []
    h = x
    for w, b in layers[:-1]:
        pre = h @ w + b
        h = _activate(pre, activation)
        pres.append(pre)
        posts.append(h)
    w, b = layers[-1]
    logit = (h @ w + b).ravel()
    raw = sigmoid(logit)
    z = np.clip(raw, PRED_EPS, 1.0 - PRED_EPS)
    return ForwardCache(
        inputs=x, pres=pres, posts=posts, logit=logit, z=z, clip_mask=(raw != z)
    )


def backward_from_logit(
    layers: Layers, activation: str, cache: ForwardCache, g_logit: np.ndarray
) -> tuple[Layers, np.ndarray]:
    """Parameter gradients and input gradient given dLoss/dlogit per example."""
    grads: Layers = [None] * len(layers)  # type: ignore[list-item]
    delta = g_logit[:, None]
    for li in range(len(layers) - 1, -1, -1):
        h_in = cache.posts[li - 1] if li > 0 else cache.inputs
        w, _ = layers[li]
        grads[li] = (h_in.T @ delta, delta.sum(axis=0))
        delta = delta @ w.T
        if li > 0:
            delta = delta * _activate_grad(cache.pres[li - 1], cache.posts[li - 1], activation)
    return grads, delta


def grad_logit_bce(
    cache: ForwardCache, targets: np.ndarray, weights: np.ndarray | None, scale: float
) -> np.ndarray:
    """d(mean weighted bce)/dlogit; zero where the output clip is active."""
    g = (cache.z - targets) * scale
    if weights is not None:
        g = g * weights
    g[cache.clip_mask] = 0.0
    return g


@dataclass
class DifferentiablePredictor:
    """A scorer with explicit parameters and analytic gradients.

    Instances are treated as immutable after construction; training
    returns a new predictor rather than mutating in place.
    """

    arch: PredictorArch
    layers: Layers
    init_seed: int | None = None

    @classmethod
    def initialize(cls, arch: PredictorArch, seed: int) -> "DifferentiablePredictor":
        return cls(arch=arch, layers=glorot_layers(arch, seed), init_seed=seed)

    def _check_dim(self, d: int) -> None:
        if d != self.arch.input_dim:
            raise DimensionError(
                f"feature dimension {d} does not match input_dim {self.arch.input_dim}"
            )

    def predict_batch(self, features: np.ndarray) -> np.ndarray:
        features = np.asarray(features, dtype=float)
        if features.ndim != 2:
            raise DimensionError("predict_batch expects a 2-d feature matrix")
        self._check_dim(features.shape[1])
        return forward_cache(self.layers, self.arch.activation, features).z

    def predict(self, features: Sequence[float] | np.ndarray) -> float:
        x = np.asarray(features, dtype=float)
        if x.ndim != 1:
            raise DimensionError("predict expects a 1-d feature vector")
        self._check_dim(x.shape[0])
        return float(self.predict_batch(x[None, :])[0])

    def __call__(self, features: np.ndarray) -> np.ndarray:
        return self.predict_batch(features)

    # -- flat parameter vector (layout: w0, b0, w1, b1, ... row-major) --

    def get_flat(self) -> np.ndarray:
        return np.concatenate([np.concatenate([w.ravel(), b]) for w, b in self.layers])

    def with_flat(self, flat: np.ndarray) -> "DifferentiablePredictor":
        if flat.shape != (self.arch.num_params,):
            raise DimensionError(
                f"expected {self.arch.num_params} parameters, got {flat.shape}"
            )
        layers: Layers = []
        at = 0
        for fan_in, fan_out in self.arch.layer_dims:
            w = flat[at : at + fan_in * fan_out].reshape(fan_in, fan_out).copy()
            at += fan_in * fan_out
            b = flat[at : at + fan_out].copy()
            at += fan_out
            layers.append((w, b))
        return DifferentiablePredictor(arch=self.arch, layers=layers, init_seed=self.init_seed)

    # -- checkpoint round-trip (bit-exact: floats serialized via repr) --

    def to_checkpoint(self) -> str:
        payload = {
            "arch": {
                "kind": self.arch.kind,
                "input_dim": self.arch.input_dim,
                "hidden_sizes": list(self.arch.hidden_sizes),
                "activation": self.arch.activation,
            },
            "params": self.get_flat().tolist(),
            "init_seed": self.init_seed,
        }
        return json.dumps(payload, sort_keys=True)

    @classmethod
    def from_checkpoint(cls, text: str) -> "DifferentiablePredictor":
        payload = json.loads(text)
        arch = PredictorArch(
            kind=payload["arch"]["kind"],
            input_dim=payload["arch"]["input_dim"],
            hidden_sizes=tuple(payload["arch"]["hidden_sizes"]),
            activation=payload["arch"]["activation"],
        )
        blank = cls(arch=arch, layers=glorot_layers(arch, 0), init_seed=payload["init_seed"])
        return blank.with_flat(np.asarray(payload["params"], dtype=float))


def bce_loss(target: float, prediction: float) -> float:
    """Cross entropy of one (possibly soft) target against one prediction."""
    z = min(max(prediction, PRED_EPS), 1.0 - PRED_EPS)
    return -(target * math.log(z) + (1.0 - target) * math.log(1.0 - z))


def bce_mean(targets: np.ndarray, predictions: np.ndarray, weights: np.ndarray | None = None) -> float:
    z = np.clip(predictions, PRED_EPS, 1.0 - PRED_EPS)
    per = -(targets * np.log(z) + (1.0 - targets) * np.log1p(-z))
    if weights is not None:
        per = per * weights
    return float(per.mean())


def _l2_apply(grads: Layers, layers: Layers, l2: float) -> None:
    # Weight decay on weights only; biases stay unpenalized.
    if l2 > 0:
        for (gw, _), (w, _) in zip(grads, layers):
            gw += l2 * w


class _Optimizer:
    def __init__(self, config: TrainConfig, layers: Layers) -> None:
        self.config = config
        self.t = 0
        if config.optimizer == "adam":
            self.m = [(np.zeros_like(w), np.zeros_like(b)) for w, b in layers]
            self.v = [(np.zeros_like(w), np.zeros_like(b)) for w, b in layers]

    def step(self, layers: Layers, grads: Layers) -> Layers:
        lr = self.config.learning_rate
        if self.config.optimizer == "sgd":
            return [(w - lr * gw, b - lr * gb) for (w, b), (gw, gb) in zip(layers, grads)]
        b1, b2, eps = 0.9, 0.999, 1e-8
        self.t += 1
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        out: Layers = []
        for i, ((w, b), (gw, gb)) in enumerate(zip(layers, grads)):
            mw, mb = self.m[i]
            vw, vb = self.v[i]
            mw = b1 * mw + (1 - b1) * gw
            mb = b1 * mb + (1 - b1) * gb
            vw = b2 * vw + (1 - b2) * gw * gw
            vb = b2 * vb + (1 - b2) * gb * gb
            self.m[i] = (mw, mb)
            self.v[i] = (vw, vb)
            w = w - lr * (mw / c1) / (np.sqrt(vw / c2) + eps)
            b = b - lr * (mb / c1) / (np.sqrt(vb / c2) + eps)
            out.append((w, b))
        return out


def train(
    model: DifferentiablePredictor,
    features: np.ndarray,
    targets: np.ndarray,
    config: TrainConfig,
    sample_weight: np.ndarray | None = None,
) -> tuple[DifferentiablePredictor, list[float]]:
    """Mini-batch training on weighted-mean BCE.

    Returns a new predictor plus the full-dataset loss history
    (entry 0 is the pre-training loss). Raises DivergenceError if the
    loss leaves the finite range.
    """
    features = np.asarray(features, dtype=float)
    targets = np.asarray(targets, dtype=float)
    if features.ndim != 2 or len(features) != len(targets):
        raise DimensionError("features must be (n, d) aligned with targets")
    if len(features) == 0:
        raise ConfigError("training dataset must be nonempty")
    model._check_dim(features.shape[1])
    if np.any((targets < 0) | (targets > 1)):
        raise ConfigError("targets must lie in [0, 1]")
    if sample_weight is not None:
        sample_weight = np.asarray(sample_weight, dtype=float)
        if sample_weight.shape != targets.shape:
            raise DimensionError("sample_weight must align with targets")

    layers = [(w.copy(), b.copy()) for w, b in model.layers]
    opt = _Optimizer(config, layers)
    n = len(features)

    def full_loss(ls: Layers) -> float:
        z = forward_cache(ls, model.arch.activation, features).z
        return bce_mean(targets, z, sample_weight)

    history = [full_loss(layers)]
    for epoch in range(config.epochs):
        perm = substream(config.seed, "shuffle", epoch).permutation(n)
        for start in range(0, n, config.batch_size):
            idx = perm[start : start + config.batch_size]
            cache = forward_cache(layers, model.arch.activation, features[idx])
            g_logit = grad_logit_bce(
                cache,
                targets[idx],
                None if sample_weight is None else sample_weight[idx],
                1.0 / len(idx),
            )
            grads, _ = backward_from_logit(layers, model.arch.activation, cache, g_logit)
            _l2_apply(grads, layers, config.l2)
            layers = opt.step(layers, grads)
        loss = full_loss(layers)
        if not math.isfinite(loss):
            raise DivergenceError(
                f"non-finite training loss at epoch {epoch}; lower the learning rate"
            )
        history.append(loss)
    return (
        DifferentiablePredictor(arch=model.arch, layers=layers, init_seed=model.init_seed),
        history,
    )


def grad_check(
    model: DifferentiablePredictor,
    features: np.ndarray,
    targets: np.ndarray,
    epsilon: float = 3e-5,
    sample_weight: np.ndarray | None = None,
) -> float:
    """Max relative gap between analytic and central finite-difference gradients."""
    if not (1e-6 <= epsilon <= 1e-3):
        raise ConfigError(f"epsilon must be in [1e-6, 1e-3], got {epsilon}")
    features = np.asarray(features, dtype=float)
    targets = np.asarray(targets, dtype=float)
    if len(features) == 0:
        raise ConfigError("grad_check batch must be nonempty")

    cache = forward_cache(model.layers, model.arch.activation, features)
    g_logit = grad_logit_bce(cache, targets, sample_weight, 1.0 / len(features))
    grads, _ = backward_from_logit(model.layers, model.arch.activation, cache, g_logit)
    analytic = np.concatenate([np.concatenate([gw.ravel(), gb]) for gw, gb in grads])

    flat = model.get_flat()
    worst = 0.0
    for j in range(flat.size):
        bumped = flat.copy()
        bumped[j] = flat[j] + epsilon
        up = bce_mean(targets, model.with_flat(bumped).predict_batch(features), sample_weight)
        bumped[j] = flat[j] - epsilon
        down = bce_mean(targets, model.with_flat(bumped).predict_batch(features), sample_weight)
        fd = (up - down) / (2.0 * epsilon)
        rel = abs(analytic[j] - fd) / max(1e-8, abs(analytic[j]) + abs(fd))
        worst = max(worst, rel)
    return worst

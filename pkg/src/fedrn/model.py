"""Small feed-forward classifiers: forward pass, cross-entropy training,
head-only fine-tuning and weighted parameter averaging.

A model is a stack of ReLU dense layers (the feature extractor) followed by a
linear classification head whose output goes through a softmax.  Models are
immutable; every training function returns a new :class:`ModelParams`.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import _backend
from .errors import ContractViolation, NoTrainingData

LOSS_FLOOR = 1e-12


def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=np.float64)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class DenseLayer:
    weight: np.ndarray  # (in_dim, out_dim)
    bias: np.ndarray  # (out_dim,)
    activation: str = "relu"

    def __post_init__(self):
        object.__setattr__(self, "weight", _frozen(self.weight))
        object.__setattr__(self, "bias", _frozen(self.bias))
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[1],):
            raise ContractViolation(
                f"layer shapes {self.weight.shape} / {self.bias.shape} are incompatible"
            )
        if self.activation not in ("relu", "linear"):
            raise ContractViolation(f"unsupported activation {self.activation!r}")

    @property
    def in_dim(self) -> int:
        return self.weight.shape[0]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[1]


@dataclass(frozen=True, eq=False)
class ModelParams:
    """Feature layers (ReLU) plus a linear head producing ``num_classes`` logits."""

    feature_layers: tuple[DenseLayer, ...]
    head: DenseLayer

    def __post_init__(self):
        object.__setattr__(self, "feature_layers", tuple(self.feature_layers))
        layers = self.layers
        for a, b in zip(layers[:-1], layers[1:]):
            if a.out_dim != b.in_dim:
                raise ContractViolation(f"layer dims {a.out_dim} -> {b.in_dim} do not chain")
        if any(l.activation != "relu" for l in self.feature_layers):
            raise ContractViolation("feature layers must use relu")
        if self.head.activation != "linear":
            raise ContractViolation("the head must be linear (softmax is applied on top)")
        if not all(np.isfinite(l.weight).all() and np.isfinite(l.bias).all() for l in layers):
            raise ContractViolation("model parameters must be finite")

    @property
    def layers(self) -> tuple[DenseLayer, ...]:
        return self.feature_layers + (self.head,)

    @property
    def num_classes(self) -> int:
        return self.head.out_dim

    @property
    def input_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def dims(self) -> np.ndarray:
        layers = self.layers
        return np.array([layers[0].in_dim] + [l.out_dim for l in layers], dtype=np.intp)

    @property
    def architecture(self) -> tuple[int, ...]:
        return tuple(int(d) for d in self.dims)

    def flat(self) -> np.ndarray:
        """All parameters in kernel layout (per layer: weight row-major, then bias)."""
        return np.concatenate([a for l in self.layers for a in (l.weight.ravel(), l.bias)])

    @classmethod
    def from_flat(cls, flat: np.ndarray, dims: Sequence[int]) -> "ModelParams":
        layers = []
        pos = 0
        for d_in, d_out in zip(dims[:-1], dims[1:]):
            w = flat[pos:pos + d_in * d_out].reshape(d_in, d_out)
            pos += d_in * d_out
            b = flat[pos:pos + d_out]
            pos += d_out
            layers.append((w, b))
        feats = tuple(DenseLayer(w, b, "relu") for w, b in layers[:-1])
        return cls(feats, DenseLayer(*layers[-1], "linear"))

    def equals(self, other: "ModelParams") -> bool:
        """Exact (bitwise-value) equality of architecture and every scalar."""
        return self.architecture == other.architecture and np.array_equal(self.flat(), other.flat())


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.01
    momentum: float = 0.5
    local_epochs: int = 5
    batch_size: int = 32
    rng_stream: tuple[int, ...] = (0,)

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ContractViolation("learning_rate must be >= 0")
        if not 0 <= self.momentum < 1:
            raise ContractViolation("momentum must lie in [0, 1)")
        if self.local_epochs < 0 or self.batch_size < 1:
            raise ContractViolation("local_epochs must be >= 0 and batch_size >= 1")
        object.__setattr__(self, "rng_stream", tuple(int(s) for s in self.rng_stream))

    def with_stream(self, *stream: int) -> "TrainConfig":
        return TrainConfig(self.learning_rate, self.momentum, self.local_epochs,
                           self.batch_size, tuple(stream))


@dataclass(frozen=True, eq=False)
class Prediction:
    probs: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "probs", _frozen(self.probs))


def init_model(input_dim: int, num_classes: int, hidden: Sequence[int] = (32, 32),
               seed=0) -> ModelParams:
    """He-uniform weights and zero biases, drawn from ``seed``."""
    rng = np.random.default_rng(seed)
    dims = [input_dim, *hidden, num_classes]
    layers = []
    for d_in, d_out in zip(dims[:-1], dims[1:]):
        bound = np.sqrt(6.0 / d_in)
        layers.append((rng.uniform(-bound, bound, size=(d_in, d_out)), np.zeros(d_out)))
    feats = tuple(DenseLayer(w, b, "relu") for w, b in layers[:-1])
    return ModelParams(feats, DenseLayer(*layers[-1], "linear"))


def zeros_like(model: ModelParams) -> ModelParams:
    return ModelParams.from_flat(np.zeros_like(model.flat()), model.dims)


def _as_features(model: ModelParams, X) -> np.ndarray:
    X = np.ascontiguousarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]
    if X.ndim != 2 or X.shape[1] != model.input_dim:
        raise ContractViolation(
            f"features of shape {X.shape} do not match input dim {model.input_dim}"
        )
    return X


def _as_labels(model: ModelParams, y, n: int) -> np.ndarray:
    y = np.ascontiguousarray(y, dtype=np.int64)
    if y.shape != (n,):
        raise ContractViolation(f"expected {n} labels, got shape {y.shape}")
    if n and (y.min() < 0 or y.max() >= model.num_classes):
        raise ContractViolation(f"labels must lie in [0, {model.num_classes})")
    return y


def predict_proba(model: ModelParams, X) -> np.ndarray:
    """Softmax outputs for a batch of feature rows, shape ``(n, num_classes)``."""
    X = _as_features(model, X)
    return _backend.kernels.forward_probs(model.flat(), model.dims, X)


def forward(model: ModelParams, features) -> Prediction:
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 1:
        raise ContractViolation("forward takes a single feature vector")
    return Prediction(predict_proba(model, features)[0])


def per_example_losses(model: ModelParams, X, y) -> np.ndarray:
    """Cross-entropy ``-log p[y_i]`` per example, with probabilities floored at 1e-12."""
    X = _as_features(model, X)
    if X.shape[0] == 0:
        raise ContractViolation("per_example_losses needs at least one example")
    y = _as_labels(model, y, X.shape[0])
    p = predict_proba(model, X)[np.arange(X.shape[0]), y]
    return -np.log(np.maximum(p, LOSS_FLOOR))


def training_accuracy(model: ModelParams, X, y) -> float:
    """Fraction of examples whose argmax prediction equals the given (observed) label."""
    X = _as_features(model, X)
    if X.shape[0] == 0:
        raise ContractViolation("training_accuracy needs at least one example")
    y = _as_labels(model, y, X.shape[0])
    return float(np.mean(predict_proba(model, X).argmax(axis=1) == y))


def _train(model: ModelParams, X, y, cfg: TrainConfig, epochs: int,
           first_trainable: int) -> ModelParams:
    X = _as_features(model, X)
    y = _as_labels(model, y, X.shape[0])
    n = X.shape[0]
    if epochs == 0:
        return model
    rng = np.random.default_rng(cfg.rng_stream)
    orders = np.stack([rng.permutation(n) for _ in range(epochs)]).astype(np.int64)
    flat = model.flat()
    velocity = np.zeros_like(flat)
    _backend.kernels.train_epochs(flat, velocity, model.dims, X, y, orders,
                                  cfg.batch_size, float(cfg.learning_rate),
                                  float(cfg.momentum), first_trainable)
    if not np.isfinite(flat).all():
        raise FloatingPointError("training diverged to non-finite parameters")
    return ModelParams.from_flat(flat, model.dims)


def sgd_train(model: ModelParams, X, y, cfg: TrainConfig) -> ModelParams:
    """``cfg.local_epochs`` epochs of mini-batch SGD with momentum on mean cross-entropy.

    Shuffling depends only on ``cfg.rng_stream``; the last short batch is kept.
    Velocity starts at zero on every call.
    """
    if len(X) == 0:
        raise NoTrainingData("sgd_train called with no examples")
    return _train(model, X, y, cfg, cfg.local_epochs, 0)


def fine_tune_head(model: ModelParams, X, y, cfg: TrainConfig,
                   epochs: int = 1) -> tuple[ModelParams, bool]:
    """Train only the classification head; feature layers are carried over untouched.

    Returns ``(model, tuned)``.  With no examples nothing is trained and
    ``tuned`` is False.
    """
    if len(X) == 0:
        return model, False
    tuned = _train(model, X, y, cfg, epochs, len(model.feature_layers))
    return ModelParams(model.feature_layers, tuned.head), True


def average_params(models: Sequence[ModelParams], weights) -> ModelParams:
    """Scalar-wise weighted sum of parameters (FedAvg aggregation)."""
    if not models:
        raise ContractViolation("average_params needs at least one model")
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != (len(models),):
        raise ContractViolation("one weight per model is required")
    if (weights < 0).any() or abs(weights.sum() - 1.0) > 1e-9:
        raise ContractViolation("weights must be nonnegative and sum to 1")
    arch = models[0].architecture
    if any(m.architecture != arch for m in models[1:]):
        raise ContractViolation("models do not share an architecture")
    stacked = np.stack([m.flat() for m in models])
    if (stacked == stacked[0]).all():
        # a convex combination of one point is that point; skip the rounding of w @ x
        return models[0]
    return ModelParams.from_flat(weights @ stacked, models[0].dims)


def mean_cross_entropy_grad(model: ModelParams, X, y) -> np.ndarray:
    """Analytic gradient of the mean cross-entropy in flat layout (no floor).

    Evaluated with a single full-batch step of the training kernel at unit
    learning rate and zero momentum, so it checks exactly the code path used
    in training.
    """
    X = _as_features(model, X)
    y = _as_labels(model, y, X.shape[0])
    flat = model.flat()
    before = flat.copy()
    velocity = np.zeros_like(flat)
    orders = np.arange(X.shape[0], dtype=np.int64)[None, :]
    _backend.kernels.train_epochs(flat, velocity, model.dims, X, y, orders,
                                  X.shape[0], 1.0, 0.0, 0)
    return before - flat

"""A small fully-connected softmax classifier trained by plain SGD.

Hidden layers use the rectifier max(0, z) with subgradient 0 at z == 0; the
output layer is softmax with mean cross-entropy loss. All operations are pure:
models are treated as immutable values and updates return new models.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .linalg import as_matrix


class NnError(ValueError):
    """Raised for shape mismatches, bad labels, or invalid hyperparameters."""


@dataclass(frozen=True)
class LrSchedule:
    """Exponentially decaying step size: eta0 * decay_base ** (t / decay_period)."""

    eta0: float = 0.1
    decay_base: float = 0.5
    decay_period: int = 10000

    def __post_init__(self):
        if self.eta0 <= 0.0:
            raise NnError("eta0 must be positive")
        if not 0.0 < self.decay_base <= 1.0:
            raise NnError("decay_base must be in (0, 1]")
        if self.decay_period < 1:
            raise NnError("decay_period must be >= 1")


def lr_at(sched: LrSchedule, t: int) -> float:
    if t < 0:
        raise NnError("iteration index must be >= 0")
    return sched.eta0 * sched.decay_base ** (t / sched.decay_period)


@dataclass(frozen=True)
class Layer:
    """One dense layer: weights shaped (out, in) plus a bias vector of length out."""

    weights: np.ndarray
    bias: np.ndarray


@dataclass(frozen=True)
class MlpModel:
    layers: tuple[Layer, ...]

    @property
    def input_dim(self) -> int:
        return self.layers[0].weights.shape[1]

    @property
    def num_classes(self) -> int:
        return self.layers[-1].weights.shape[0]

    def weight_shapes(self) -> tuple[tuple[int, int], ...]:
        return tuple(layer.weights.shape for layer in self.layers)

    def param_vector(self) -> np.ndarray:
        """All parameters flattened into one vector (weights then bias per layer)."""
        parts = []
        for layer in self.layers:
            parts.append(layer.weights.ravel())
            parts.append(layer.bias)
        return np.concatenate(parts)


@dataclass(frozen=True)
class Gradients:
    """Per-layer (d_weights, d_bias), shapes mirroring the model exactly."""

    d_weights: tuple[np.ndarray, ...]
    d_bias: tuple[np.ndarray, ...]

    def param_vector(self) -> np.ndarray:
        parts = []
        for dw, db in zip(self.d_weights, self.d_bias):
            parts.append(dw.ravel())
            parts.append(db)
        return np.concatenate(parts)


@dataclass(frozen=True)
class Batch:
    """A design matrix of shape (b, d) with integer class labels in [0, C)."""

    inputs: np.ndarray
    labels: np.ndarray

    def __len__(self) -> int:
        return self.inputs.shape[0]


def _validate_batch(model: MlpModel, batch: Batch) -> tuple[np.ndarray, np.ndarray]:
    x = as_matrix(batch.inputs, "batch inputs")
    y = np.asarray(batch.labels)
    if y.ndim != 1 or len(y) != x.shape[0]:
        raise NnError(f"labels must be one per row, got {y.shape} for {x.shape[0]} rows")
    if x.shape[1] != model.input_dim:
        raise NnError(
            f"batch input dimension {x.shape[1]} does not match model input {model.input_dim}"
        )
    if y.size == 0:
        raise NnError("batch must contain at least one sample")
    if y.min() < 0 or y.max() >= model.num_classes:
        raise NnError(
            f"label out of range [0, {model.num_classes}): found {int(y.min())}..{int(y.max())}"
        )
    return x, y.astype(np.intp)


def init_mlp(layer_dims, rng: np.random.Generator) -> MlpModel:
    """Uniform init in [-s, s] with s = sqrt(6 / (fan_in + fan_out)); zero biases.

    ``layer_dims`` chains input -> hidden... -> num_classes and must have at
    least two entries. Draws come from ``rng`` in layer order.
    """
    dims = tuple(int(d) for d in layer_dims)
    if len(dims) < 2 or any(d < 1 for d in dims):
        raise NnError(f"layer_dims must be >= 2 positive entries, got {dims}")
    layers = []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        scale = np.sqrt(6.0 / (fan_in + fan_out))
        w = rng.uniform(-scale, scale, size=(fan_out, fan_in))
        layers.append(Layer(weights=w, bias=np.zeros(fan_out)))
    return MlpModel(layers=tuple(layers))


def _forward(model: MlpModel, x: np.ndarray):
    """Returns (activations per layer input, pre-activations, log-probabilities)."""
    acts = [x]
    pre = []
    h = x
    last = len(model.layers) - 1
    for i, layer in enumerate(model.layers):
        z = h @ layer.weights.T + layer.bias
        pre.append(z)
        h = np.maximum(z, 0.0) if i < last else z
        acts.append(h)
    logits = pre[-1]
    zmax = logits.max(axis=1, keepdims=True)
    logp = logits - (zmax + np.log(np.exp(logits - zmax).sum(axis=1, keepdims=True)))
    return acts, pre, logp


def forward_loss_grad(model: MlpModel, batch: Batch) -> tuple[float, Gradients]:
    """Mean cross-entropy over the batch and its exact analytic gradients."""
    x, y = _validate_batch(model, batch)
    acts, pre, logp = _forward(model, x)
    b = x.shape[0]
    rows = np.arange(b)
    loss = float(-logp[rows, y].mean())

    delta = np.exp(logp)
    delta[rows, y] -= 1.0
    delta /= b

    n_layers = len(model.layers)
    d_weights: list[np.ndarray] = [None] * n_layers  # type: ignore[list-item]
    d_bias: list[np.ndarray] = [None] * n_layers  # type: ignore[list-item]
    for i in reversed(range(n_layers)):
        d_weights[i] = delta.T @ acts[i]
        d_bias[i] = delta.sum(axis=0)
        if i > 0:
            delta = (delta @ model.layers[i].weights) * (pre[i - 1] > 0.0)
    if not np.isfinite(loss):
        raise NnError("loss is not finite")
    return loss, Gradients(d_weights=tuple(d_weights), d_bias=tuple(d_bias))


def sgd_step(model: MlpModel, grads: Gradients, eta: float) -> MlpModel:
    """Return a new model with every parameter p replaced by p - eta * g."""
    if eta < 0.0:
        raise NnError("learning rate must be >= 0")
    if len(grads.d_weights) != len(model.layers):
        raise NnError("gradient layer count does not match model")
    layers = []
    for layer, dw, db in zip(model.layers, grads.d_weights, grads.d_bias):
        if dw.shape != layer.weights.shape or db.shape != layer.bias.shape:
            raise NnError(
                f"gradient shape {dw.shape}/{db.shape} does not match layer "
                f"{layer.weights.shape}/{layer.bias.shape}"
            )
        layers.append(Layer(weights=layer.weights - eta * dw, bias=layer.bias - eta * db))
    return MlpModel(layers=tuple(layers))


def predict_logits(model: MlpModel, inputs: np.ndarray) -> np.ndarray:
    x = as_matrix(inputs, "inputs")
    if x.shape[1] != model.input_dim:
        raise NnError(
            f"input dimension {x.shape[1]} does not match model input {model.input_dim}"
        )
    h = x
    last = len(model.layers) - 1
    for i, layer in enumerate(model.layers):
        z = h @ layer.weights.T + layer.bias
        h = np.maximum(z, 0.0) if i < last else z
    return h


def evaluate(model: MlpModel, data) -> tuple[float, float]:
    """(accuracy, mean cross-entropy) on a dataset with .features and .labels.

    Argmax ties resolve to the lowest class index.
    """
    x = as_matrix(data.features, "features")
    y = np.asarray(data.labels)
    if len(y) == 0:
        raise NnError("cannot evaluate on an empty dataset")
    batch = Batch(inputs=x, labels=y)
    _validate_batch(model, batch)
    _, _, logp = _forward(model, x)
    pred = logp.argmax(axis=1)  # argmax picks the lowest index on ties
    accuracy = float((pred == y).mean())
    mean_loss = float(-logp[np.arange(len(y)), y].mean())
    return accuracy, mean_loss

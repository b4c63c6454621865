"""Fully connected ReLU networks with exact backprop.

A model is a list of (weight, bias) layers; weights have shape
(fan_out, fan_in) and activations flow as batch x features. The forward
pass records post-nonlinearity hidden activations transposed to
units x samples, the shape permutation matching consumes. Parameters
flatten to a single float64 vector in layer-major, row-major order
(weights of layer 0, bias of layer 0, weights of layer 1, ...), which is
also the checkpoint and gossip order.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .linalg import RngStream

__all__ = [
    "ActivationTrace",
    "ModelParams",
    "flatten",
    "forward",
    "init_model",
    "layer_dims",
    "loss_and_grad",
    "param_count",
    "unflatten",
]

ACTIVATIONS = ("relu",)
LOSSES = ("cross_entropy", "mse")

LayerArrays = list[tuple[np.ndarray, np.ndarray]]


@dataclass
class ModelParams:
    """Parameters of a fully connected network."""

    layers: LayerArrays
    activation: str = "relu"

    def __post_init__(self) -> None:
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if not self.layers:
            raise ValueError("model must have at least one layer")
        prev = None
        for ix, (w, b) in enumerate(self.layers):
            if w.ndim != 2 or b.ndim != 1 or w.shape[0] != b.shape[0]:
                raise ValueError(f"layer {ix} has inconsistent shapes {w.shape} / {b.shape}")
            if prev is not None and w.shape[1] != prev:
                raise ValueError(f"layer {ix} input width {w.shape[1]} != previous output {prev}")
            prev = w.shape[0]

    def copy(self) -> "ModelParams":
        return ModelParams([(w.copy(), b.copy()) for w, b in self.layers], self.activation)


@dataclass(frozen=True)
class ActivationTrace:
    """Post-ReLU hidden activations, one units x samples array per hidden layer."""

    layers: tuple[np.ndarray, ...] = field(default_factory=tuple)


def layer_dims(model: ModelParams) -> list[int]:
    """Architecture as [input, hidden..., output] widths."""
    dims = [model.layers[0][0].shape[1]]
    dims.extend(w.shape[0] for w, _ in model.layers)
    return dims


def param_count(dims: list[int]) -> int:
    return sum(dims[i + 1] * dims[i] + dims[i + 1] for i in range(len(dims) - 1))


def init_model(dims: list[int], stream: RngStream, activation: str = "relu") -> ModelParams:
    """He-initialized model: W ~ N(0, 2/fan_in), zero biases."""
    if len(dims) < 2 or any(d < 1 for d in dims):
        raise ValueError(f"dims must list at least input and output widths >= 1, got {dims}")
    gen = stream.generator()
    layers = []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        w = gen.normal(0.0, np.sqrt(2.0 / fan_in), (fan_out, fan_in))
        layers.append((w, np.zeros(fan_out)))
    return ModelParams(layers, activation)


def _check_inputs(model: ModelParams, inputs: np.ndarray) -> np.ndarray:
    x = np.asarray(inputs, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError(f"inputs must be batch x features, got shape {x.shape}")
    if x.shape[1] != model.layers[0][0].shape[1]:
        raise ValueError(
            f"input width {x.shape[1]} != model input width {model.layers[0][0].shape[1]}")
    return x


def forward(model: ModelParams, inputs) -> tuple[np.ndarray, ActivationTrace]:
    """Logits (batch x outputs) plus the hidden activation trace."""
    h = _check_inputs(model, inputs)
    hidden = []
    last = len(model.layers) - 1
    for ix, (w, b) in enumerate(model.layers):
        z = h @ w.T + b
        if ix == last:
            h = z
        else:
            h = np.maximum(z, 0.0)
            hidden.append(h.T.copy())
    return h, ActivationTrace(tuple(hidden))


def loss_and_grad(model: ModelParams, inputs, targets, loss: str = "cross_entropy"):
    """Mean loss over the batch and its exact parameter gradients.

    cross_entropy: targets are integer labels in [0, num_outputs); softmax
    cross-entropy averaged over the batch. mse: targets are a batch x outputs
    float array; loss is 0.5 * mean over the batch of the squared error summed
    over outputs (so a linear model gives an exactly quadratic objective).

    Returns (loss, grads) with grads shaped like model.layers.
    """
    if loss not in LOSSES:
        raise ValueError(f"unknown loss {loss!r}")
    x = _check_inputs(model, inputs)
    batch = x.shape[0]
    if batch == 0:
        raise ValueError("empty batch")
    out_dim = model.layers[-1][0].shape[0]

    # forward, keeping pre-activations for the backward pass
    acts = [x]
    pre = []
    h = x
    last = len(model.layers) - 1
    for ix, (w, b) in enumerate(model.layers):
        z = h @ w.T + b
        pre.append(z)
        h = z if ix == last else np.maximum(z, 0.0)
        acts.append(h)
    logits = acts[-1]

    if loss == "cross_entropy":
        y = np.asarray(targets)
        if y.ndim != 1 or y.shape[0] != batch or not np.issubdtype(y.dtype, np.integer):
            raise ValueError("cross_entropy targets must be an integer label vector")
        if y.min() < 0 or y.max() >= out_dim:
            raise ValueError(f"labels must lie in [0, {out_dim})")
        shifted = logits - logits.max(axis=1, keepdims=True)
        log_z = np.log(np.exp(shifted).sum(axis=1))
        value = float(np.mean(log_z - shifted[np.arange(batch), y]))
        delta = np.exp(shifted)
        delta /= delta.sum(axis=1, keepdims=True)
        delta[np.arange(batch), y] -= 1.0
        delta /= batch
    else:
        y = np.asarray(targets, dtype=np.float64)
        if y.shape != logits.shape:
            raise ValueError(f"mse targets must have shape {logits.shape}, got {y.shape}")
        diff = logits - y
        value = float(0.5 * np.sum(diff * diff) / batch)
        delta = diff / batch

    grads: LayerArrays = [None] * len(model.layers)  # type: ignore[list-item]
    for ix in range(last, -1, -1):
        grads[ix] = (delta.T @ acts[ix], delta.sum(axis=0))
        if ix > 0:
            delta = (delta @ model.layers[ix][0]) * (pre[ix - 1] > 0.0)
    return value, grads


def flatten(model_or_layers) -> np.ndarray:
    """Concatenate parameters into one vector in layer-major, row-major order."""
    layers = model_or_layers.layers if isinstance(model_or_layers, ModelParams) else model_or_layers
    parts = []
    for w, b in layers:
        parts.append(np.ravel(w, order="C"))
        parts.append(np.ravel(b, order="C"))
    return np.concatenate(parts)


def unflatten(vec, dims: list[int], activation: str = "relu") -> ModelParams:
    """Inverse of flatten for the architecture given as [input, hidden..., output]."""
    v = np.asarray(vec, dtype=np.float64)
    if v.ndim != 1:
        raise ValueError("parameter vector must be 1-D")
    if v.shape[0] != param_count(dims):
        raise ValueError(f"expected {param_count(dims)} parameters for dims {dims}, got {v.shape[0]}")
    layers = []
    at = 0
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        w = v[at:at + fan_out * fan_in].reshape(fan_out, fan_in).copy()
        at += fan_out * fan_in
        b = v[at:at + fan_out].copy()
        at += fan_out
        layers.append((w, b))
    return ModelParams(layers, activation)

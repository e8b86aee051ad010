"""Minimal dense-MLP engine: forward pass, reverse-mode gradients with
respect to parameters and inputs, SGD and Adam updates.

Everything runs in float64 on plain numpy arrays. Layers are fully
connected with ReLU between all but the last; the last layer is the
classifier head and emits pre-softmax logits, one column per class.
Class labels are 1-based (1..K) at every public boundary.
"""

import hashlib
from dataclasses import dataclass

import numpy as np


class DimensionError(ValueError):
    """Input shape does not match the model."""


class DomainError(ValueError):
    """A label or class id lies outside 1..K."""


@dataclass
class DenseLayer:
    weights: np.ndarray  # [out, in]
    bias: np.ndarray     # [out]

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weights.ndim != 2 or self.bias.shape != (self.weights.shape[0],):
            raise DimensionError(
                f"inconsistent layer shapes: weights {self.weights.shape}, bias {self.bias.shape}"
            )

    def copy(self) -> "DenseLayer":
        return DenseLayer(self.weights.copy(), self.bias.copy())


@dataclass
class MlpModel:
    """Ordered dense layers; the final layer is the classifier head."""

    layers: list[DenseLayer]

    def __post_init__(self):
        if not self.layers:
            raise DimensionError("model needs at least one layer")
        for a, b in zip(self.layers, self.layers[1:]):
            if b.weights.shape[1] != a.weights.shape[0]:
                raise DimensionError(
                    f"layer chain mismatch: {a.weights.shape} -> {b.weights.shape}"
                )

    @property
    def input_dim(self) -> int:
        return self.layers[0].weights.shape[1]

    @property
    def output_dim(self) -> int:
        return self.layers[-1].weights.shape[0]

    @property
    def head_index(self) -> int:
        return len(self.layers) - 1

    def copy(self) -> "MlpModel":
        return MlpModel([layer.copy() for layer in self.layers])

    def parameters(self) -> list[np.ndarray]:
        """Live references, ordered weights-then-bias per layer."""
        out = []
        for layer in self.layers:
            out.append(layer.weights)
            out.append(layer.bias)
        return out

    def flat_parameters(self) -> np.ndarray:
        return np.concatenate([p.ravel() for p in self.parameters()])


def init_mlp(layer_dims: list[int], rng: np.random.Generator) -> MlpModel:
    """Fan-in-scaled uniform init: weights and biases in +-sqrt(1/fan_in)."""
    layers = []
    for fan_in, fan_out in zip(layer_dims, layer_dims[1:]):
        bound = np.sqrt(1.0 / fan_in)
        w = rng.uniform(-bound, bound, size=(fan_out, fan_in))
        b = rng.uniform(-bound, bound, size=fan_out)
        layers.append(DenseLayer(w, b))
    return MlpModel(layers)


def parameter_checksum(model: MlpModel) -> str:
    """SHA-256 over all parameter bytes; detects any mutation."""
    digest = hashlib.sha256()
    for p in model.parameters():
        digest.update(np.ascontiguousarray(p).tobytes())
    return digest.hexdigest()


def _check_input(model: MlpModel, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != model.input_dim:
        raise DimensionError(f"input shape {x.shape} incompatible with input_dim {model.input_dim}")
    return x


def _forward_cached(model: MlpModel, x: np.ndarray):
    """Returns (logits, pre_activations z per layer, activations a entering each layer)."""
    pre = []
    acts = [x]
    h = x
    for i, layer in enumerate(model.layers):
        z = h @ layer.weights.T + layer.bias
        pre.append(z)
        if i < len(model.layers) - 1:
            h = np.maximum(z, 0.0)
            acts.append(h)
    return pre[-1], pre, acts


def forward(model: MlpModel, x: np.ndarray) -> np.ndarray:
    """Logits [batch, K] for inputs [batch, d]; pure, no parameter mutation."""
    x = _check_input(model, x)
    logits, _, _ = _forward_cached(model, x)
    return logits


def _check_labels(labels: np.ndarray, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64).ravel()
    if labels.size and (labels.min() < 1 or labels.max() > num_classes):
        raise DomainError(f"labels must lie in 1..{num_classes}")
    return labels


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def loss_and_param_grad(model: MlpModel, x: np.ndarray, labels: np.ndarray):
    """Mean softmax cross-entropy and its gradient for every parameter.

    Returns (loss, grads) with grads ordered like model.parameters().
    """
    x = _check_input(model, x)
    labels = _check_labels(labels, model.output_dim)
    if labels.shape[0] != x.shape[0]:
        raise DimensionError("batch size of inputs and labels differ")

    logits, pre, acts = _forward_cached(model, x)
    n = x.shape[0]
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1))
    idx = labels - 1
    loss = float(np.mean(log_z - shifted[np.arange(n), idx]))

    dlogits = softmax(logits)
    dlogits[np.arange(n), idx] -= 1.0
    dlogits /= n
    grads = _backprop_params(model, pre, acts, dlogits)
    return loss, grads


def _backprop_params(model: MlpModel, pre, acts, dout):
    grads = [None] * (2 * len(model.layers))
    delta = dout
    for i in range(len(model.layers) - 1, -1, -1):
        a_in = acts[i]
        grads[2 * i] = delta.T @ a_in
        grads[2 * i + 1] = delta.sum(axis=0)
        if i > 0:
            delta = (delta @ model.layers[i].weights) * (pre[i - 1] > 0)
    return grads


def _backprop_input(model: MlpModel, pre, dout):
    delta = dout
    for i in range(len(model.layers) - 1, 0, -1):
        delta = (delta @ model.layers[i].weights) * (pre[i - 1] > 0)
    return delta @ model.layers[0].weights


def class_objective_and_input_grad(model: MlpModel, x: np.ndarray, classes, reg_weight: float):
    """Per-row objective s_c(x) - reg*||x||^2 and its gradient w.r.t. x.

    ``classes`` is a single class id or one id per row (1..K). One
    forward/backward pass serves all rows, so probing every class at once
    costs the same as a batched forward.
    """
    x = _check_input(model, x)
    classes = np.broadcast_to(np.asarray(classes, dtype=np.int64), (x.shape[0],))
    classes = _check_labels(classes, model.output_dim)

    logits, pre, _ = _forward_cached(model, x)
    rows = np.arange(x.shape[0])
    objective = logits[rows, classes - 1] - reg_weight * np.sum(x * x, axis=1)

    dlogits = np.zeros_like(logits)
    dlogits[rows, classes - 1] = 1.0
    grad = _backprop_input(model, pre, dlogits) - 2.0 * reg_weight * x
    return objective, grad


def input_grad(model: MlpModel, x: np.ndarray, target_class, reg_weight: float) -> np.ndarray:
    """Ascent gradient of s_c(x) - reg*||x||^2 with respect to x."""
    if reg_weight < 0:
        raise DomainError("reg_weight must be >= 0")
    _, grad = class_objective_and_input_grad(model, x, target_class, reg_weight)
    return grad


def sgd_step(params: list[np.ndarray], grads: list[np.ndarray], learning_rate: float) -> None:
    """In-place vanilla SGD: p <- p - lr * g."""
    for p, g in zip(params, grads):
        p -= learning_rate * g


@dataclass
class AdamState:
    """Adam moments for one tensor; moments start at zero."""

    learning_rate: float
    m: np.ndarray
    v: np.ndarray
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0

    @classmethod
    def like(cls, x: np.ndarray, learning_rate: float) -> "AdamState":
        return cls(learning_rate, np.zeros_like(x, dtype=np.float64), np.zeros_like(x, dtype=np.float64))


def adam_step(state: AdamState, x: np.ndarray, grad_ascent: np.ndarray) -> np.ndarray:
    """One bias-corrected Adam ascent step; returns the updated tensor."""
    state.step_count += 1
    t = state.step_count
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * grad_ascent
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * grad_ascent * grad_ascent
    m_hat = state.m / (1.0 - state.beta1**t)
    v_hat = state.v / (1.0 - state.beta2**t)
    return x + state.learning_rate * m_hat / (np.sqrt(v_hat) + state.eps)

"""Feed-forward ReLU networks: evaluation, input gradients, training, storage.

A network is a stack of affine layers with ReLU between them and no activation
after the last layer. Inputs are normalized by a per-feature shift/scale that
lives inside the network, so callers always pass raw physical values.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

log = logging.getLogger(__name__)

CLASSIFIER = "classifier-2-logit"
REGRESSOR = "regressor-scalar"
HEADS = (CLASSIFIER, REGRESSOR)

# logits are ordered (unstable, stable); label 1 == stable
MARGIN_VECTOR = np.array([-1.0, 1.0])


class NetworkFormatError(ValueError):
    pass


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class Layer:
    W: np.ndarray
    b: np.ndarray


@dataclass(frozen=True)
class Network:
    layers: tuple[Layer, ...]
    head: str
    input_dim: int
    shift: np.ndarray
    scale: np.ndarray

    def __post_init__(self):
        if self.head not in HEADS:
            raise NetworkFormatError(f"unknown head {self.head!r}")
        if not self.layers:
            raise NetworkFormatError("network has no layers")
        fan_in = self.input_dim
        for i, layer in enumerate(self.layers):
            if layer.W.ndim != 2 or layer.W.shape[1] != fan_in:
                raise NetworkFormatError(
                    f"layer {i}: weight shape {layer.W.shape} does not accept {fan_in} inputs")
            if layer.b.shape != (layer.W.shape[0],):
                raise NetworkFormatError(f"layer {i}: bias shape {layer.b.shape}")
            fan_in = layer.W.shape[0]
        want = 2 if self.head == CLASSIFIER else 1
        if fan_in != want:
            raise NetworkFormatError(f"{self.head} head needs {want} outputs, got {fan_in}")
        if self.shift.shape != (self.input_dim,) or self.scale.shape != (self.input_dim,):
            raise NetworkFormatError("normalization vectors must match input_dim")
        if not np.all(self.scale > 0):
            raise NetworkFormatError("normalization scales must be strictly positive")

    @classmethod
    def from_arrays(cls, weights: Sequence, biases: Sequence, head: str = CLASSIFIER,
                    shift=None, scale=None) -> "Network":
        layers = tuple(Layer(np.asarray(W, dtype=float).reshape(len(b), -1),
                             np.asarray(b, dtype=float).reshape(-1))
                       for W, b in zip(weights, biases))
        d = layers[0].W.shape[1]
        shift = np.zeros(d) if shift is None else np.asarray(shift, dtype=float)
        scale = np.ones(d) if scale is None else np.asarray(scale, dtype=float)
        return cls(layers, head, d, shift, scale)

    @property
    def hidden_sizes(self) -> list[int]:
        return [layer.W.shape[0] for layer in self.layers[:-1]]

    def folded(self) -> list[Layer]:
        """Layers with the input normalization absorbed into the first affine map."""
        first = self.layers[0]
        W = first.W / self.scale
        b = first.b - W @ self.shift
        return [Layer(W, b), *self.layers[1:]]


def _check_input(net: Network, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != net.input_dim:
        raise ValueError(f"expected input of dimension {net.input_dim}, got {x.shape[-1]}")
    return x


def forward_trace(net: Network, x) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """Return (pre-activations, post-activations) for every layer.

    Works on a single vector or a batch (rows). ``post[0]`` is the normalized
    input, ``pre[-1]`` is the network output.
    """
    x = _check_input(net, x)
    h = (x - net.shift) / net.scale
    pre, post = [], [h]
    last = len(net.layers) - 1
    for i, layer in enumerate(net.layers):
        z = h @ layer.W.T + layer.b
        pre.append(z)
        if i < last:
            h = np.maximum(z, 0.0)
            post.append(h)
    return pre, post


def forward(net: Network, x) -> np.ndarray:
    return forward_trace(net, x)[0][-1]


def margin(net: Network, x):
    """logit(stable) - logit(unstable); positive means the stable class wins."""
    if net.head != CLASSIFIER:
        raise ValueError("margin is only defined for a classifier head")
    return forward(net, x) @ MARGIN_VECTOR


def output_vector(net: Network) -> np.ndarray:
    """Linear functional mapping raw network output to the scalar of interest."""
    return MARGIN_VECTOR if net.head == CLASSIFIER else np.ones(1)


def input_gradient(net: Network, x) -> tuple[float, np.ndarray]:
    """Value and reverse-mode gradient of the scalar output (margin or estimate).

    ReLU is differentiated with slope 0 at exactly zero.
    """
    x = _check_input(net, x)
    if x.ndim != 1:
        raise ValueError("input_gradient takes a single input vector")
    pre, _ = forward_trace(net, x)
    c = output_vector(net)
    value = float(pre[-1] @ c)
    g = net.layers[-1].W.T @ c
    for i in range(len(net.layers) - 2, -1, -1):
        g = g * (pre[i] > 0)
        g = net.layers[i].W.T @ g
    return value, g / net.scale


def batch_input_gradient(net: Network, X) -> tuple[np.ndarray, np.ndarray]:
    """Row-wise version of :func:`input_gradient` for a batch of inputs."""
    X = np.atleast_2d(_check_input(net, X))
    pre, _ = forward_trace(net, X)
    c = output_vector(net)
    values = pre[-1] @ c
    G = np.tile(net.layers[-1].W.T @ c, (X.shape[0], 1))
    for i in range(len(net.layers) - 2, -1, -1):
        G = (G * (pre[i] > 0)) @ net.layers[i].W
    return values, G / net.scale


def smoothed_derivatives(net: Network, x, tau: float) -> tuple[float, np.ndarray, np.ndarray]:
    """Value, gradient and exact Hessian of the scalar output with ReLU replaced
    by softplus of temperature ``tau`` (tau * log(1 + exp(z / tau))).

    The Hessian is sum_k J_k^T diag(d_k * s''(z_k)) J_k, with J_k the Jacobian of
    layer k pre-activations and d_k the backpropagated output sensitivity.
    """
    if tau <= 0:
        raise ValueError("temperature must be positive")
    x = _check_input(net, x)
    layers = net.folded()
    c = output_vector(net)
    h = x
    J = np.eye(x.size)
    zs, Js = [], []
    for layer in layers[:-1]:
        z = layer.W @ h + layer.b
        Jz = layer.W @ J
        zs.append(z)
        Js.append(Jz)
        h = tau * np.logaddexp(0.0, z / tau)
        J = Jz * _sigmoid(z / tau)[:, None]
    value = float(c @ (layers[-1].W @ h + layers[-1].b))
    d = layers[-1].W.T @ c              # sensitivity w.r.t. the last hidden activations
    H = np.zeros((x.size, x.size))
    for k in range(len(zs) - 1, -1, -1):
        s = _sigmoid(zs[k] / tau)
        H += Js[k].T @ ((d * s * (1 - s) / tau)[:, None] * Js[k])
        d = d * s
        if k > 0:
            d = layers[k].W.T @ d
    grad = layers[0].W.T @ d if zs else d
    return value, grad, H


def _sigmoid(t):
    return 0.5 * (1.0 + np.tanh(0.5 * t))


# -- training -----------------------------------------------------------------

@dataclass
class TrainingConfig:
    layer_sizes: Sequence[int]
    epochs: int = 200
    batch_size: int = 64
    learning_rate: float = 0.01
    loss: str = "cross-entropy"
    seed: int = 0
    momentum: float = 0.9
    # per-class loss weights (unstable, stable) for the classifier
    class_weight: tuple[float, float] = (1.0, 1.0)

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning rate must be positive")
        if self.loss not in ("cross-entropy", "mean-squared-error"):
            raise ValueError(f"unknown loss {self.loss!r}")


def _init_layers(sizes: Sequence[int], rng: np.random.Generator) -> list[list[np.ndarray]]:
    params = []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        W = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_out, fan_in))
        params.append([W, np.zeros(fan_out)])
    return params


def _loss_and_grads(params, X, y, loss, class_weight):
    hs, zs = [X], []
    for i, (W, b) in enumerate(params):
        z = hs[-1] @ W.T + b
        zs.append(z)
        if i < len(params) - 1:
            hs.append(np.maximum(z, 0.0))
    out = zs[-1]
    n = X.shape[0]
    if loss == "cross-entropy":
        shifted = out - out.max(axis=1, keepdims=True)
        logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        labels = y.astype(int)
        w = np.asarray(class_weight)[labels]
        value = -np.sum(w * logp[np.arange(n), labels]) / n
        delta = np.exp(logp)
        delta[np.arange(n), labels] -= 1.0
        delta *= w[:, None] / n
    else:
        r = out[:, 0] - y
        value = np.mean(r ** 2)
        delta = (2.0 / n) * r[:, None]
    grads = [None] * len(params)
    for i in range(len(params) - 1, -1, -1):
        W, _ = params[i]
        grads[i] = (delta.T @ hs[i], delta.sum(axis=0))
        if i > 0:
            delta = (delta @ W) * (zs[i - 1] > 0)
    return value, grads


def train(X, y, config: TrainingConfig, history: list | None = None) -> Network:
    """Fit a network by minibatch gradient descent with momentum.

    ``config.layer_sizes`` lists hidden widths only; input and output widths
    follow from the data and the loss. Regression targets are standardized
    during training and the affine de-standardization is folded into the last
    layer. Per-epoch mean loss is appended to ``history`` when given.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float).reshape(-1)
    if X.ndim != 2 or X.shape[0] == 0:
        raise ValueError("training set is empty")
    if X.shape[0] != y.shape[0]:
        raise ValueError("features and labels differ in length")
    classify = config.loss == "cross-entropy"
    if classify and not np.all(np.isin(y, (0.0, 1.0))):
        raise ValueError("classifier labels must be 0 or 1")

    shift = X.mean(axis=0)
    scale = X.std(axis=0)
    scale[scale < 1e-12] = 1.0
    Xn = (X - shift) / scale
    if classify:
        target, y_mu, y_sd = y, 0.0, 1.0
    else:
        y_mu, y_sd = y.mean(), y.std() or 1.0
        target = (y - y_mu) / y_sd

    rng = np.random.default_rng(config.seed)
    sizes = [X.shape[1], *config.layer_sizes, 2 if classify else 1]
    params = _init_layers(sizes, rng)
    velocity = [[np.zeros_like(W), np.zeros_like(b)] for W, b in params]
    n = X.shape[0]
    bs = max(1, min(config.batch_size, n))
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, bs):
            idx = order[start:start + bs]
            value, grads = _loss_and_grads(params, Xn[idx], target[idx], config.loss,
                                           config.class_weight)
            if not np.isfinite(value):
                raise TrainingError(f"loss became {value} at epoch {epoch}, batch {start // bs}")
            total += value * len(idx)
            for p, v, g in zip(params, velocity, grads):
                for k in range(2):
                    v[k] = config.momentum * v[k] - config.learning_rate * g[k]
                    p[k] += v[k]
        if history is not None:
            history.append(total / n)
        if epoch % 50 == 0:
            log.debug("epoch %d loss %.6g", epoch, total / n)

    if not classify:
        params[-1][0] = params[-1][0] * y_sd
        params[-1][1] = params[-1][1] * y_sd + y_mu
    head = CLASSIFIER if classify else REGRESSOR
    layers = tuple(Layer(W.copy(), b.copy()) for W, b in params)
    return Network(layers, head, X.shape[1], shift, scale)


# -- storage ------------------------------------------------------------------

def network_to_dict(net: Network) -> dict:
    return {
        "input_dim": net.input_dim,
        "head": net.head,
        "normalization": {"shift": net.shift.tolist(), "scale": net.scale.tolist()},
        "layers": [{"W": layer.W.tolist(), "b": layer.b.tolist()} for layer in net.layers],
    }


def network_from_dict(data: dict) -> Network:
    try:
        layers = []
        for entry in data["layers"]:
            W = np.array(entry["W"], dtype=float)
            b = np.array(entry["b"], dtype=float)
            if W.ndim != 2:
                raise NetworkFormatError("weights must be a 2-D array")
            layers.append(Layer(W, b))
        norm = data["normalization"]
        return Network(tuple(layers), data["head"], int(data["input_dim"]),
                       np.array(norm["shift"], dtype=float),
                       np.array(norm["scale"], dtype=float))
    except (KeyError, TypeError) as exc:
        raise NetworkFormatError(f"malformed network description: {exc}") from exc
    except ValueError as exc:
        if isinstance(exc, NetworkFormatError):
            raise
        raise NetworkFormatError(f"malformed network description: {exc}") from exc


def save_network(net: Network, path) -> None:
    # repr of a float64 round-trips exactly through json
    Path(path).write_text(json.dumps(network_to_dict(net), indent=1))


def load_network(path) -> Network:
    text = Path(path).read_text()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise NetworkFormatError(f"{path}: {exc}") from exc
    return network_from_dict(data)

"""A small fully connected classifier with input gradients and Hessian-vector products.

Hidden layers use a smooth activation (softplus by default) so that the
gradient saliency map is itself differentiable, which the top-K attack needs.
The output layer is affine and produces class logits.

Checkpoint layout (all integers little-endian)::

    bytes 0..7     magic   b"TINYMDL\\0"
    bytes 8..11    uint32  format version (currently 1)
    byte  12       endianness tag of the tensor payload, b"<"
    bytes 13..16   uint32  header length H
    bytes 17..     H bytes of UTF-8 JSON: {"activation", "beta", "dtype", "layer_sizes"}
    then, per layer in order: weight (out x in, row-major) then bias (out),
    float64 little-endian.
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy.special import expit

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"TINYMDL\0"
CHECKPOINT_VERSION = 1
ACTIVATIONS = ("softplus", "square", "identity")
DEFAULT_LAYERS = (64, 256, 128, 10)


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TinyModel:
    weights: list
    biases: list
    activation: str = "softplus"
    beta: float = 1.0

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ValueError("need one bias per weight matrix and at least one layer")
        self.weights = [np.asarray(w, dtype=float) for w in self.weights]
        self.biases = [np.asarray(b, dtype=float) for b in self.biases]
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[0],):
                raise ValueError(f"layer {k}: weight {w.shape} incompatible with bias {b.shape}")
            if k and w.shape[1] != self.weights[k - 1].shape[0]:
                raise ValueError(f"layer {k} expects {w.shape[1]} inputs, "
                                 f"previous layer gives {self.weights[k - 1].shape[0]}")
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise ValueError(f"layer {k} has non-finite parameters")
        if not self.beta > 0:
            raise ValueError("beta must be positive")

    @property
    def layer_sizes(self) -> list:
        return [self.weights[0].shape[1]] + [w.shape[0] for w in self.weights]

    @property
    def n_inputs(self) -> int:
        return self.weights[0].shape[1]

    @property
    def n_classes(self) -> int:
        return self.weights[-1].shape[0]

    def copy(self) -> "TinyModel":
        return replace(self, weights=[w.copy() for w in self.weights],
                       biases=[b.copy() for b in self.biases])


def init_model(layer_sizes: Sequence[int] = DEFAULT_LAYERS, seed: int = 0,
               activation: str = "softplus", beta: float = 1.0) -> TinyModel:
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(layer_sizes[:-1], layer_sizes[1:]):
        weights.append(rng.standard_normal((fan_out, fan_in)) * np.sqrt(2.0 / fan_in))
        biases.append(np.zeros(fan_out))
    return TinyModel(weights, biases, activation=activation, beta=beta)


# -- activations ------------------------------------------------------------

def softplus(u, beta: float = 1.0):
    """ln(1 + exp(beta u)) / beta without overflow."""
    bu = beta * np.asarray(u, dtype=float)
    mid = np.log1p(np.exp(np.clip(bu, -30.0, 30.0))) / beta
    out = np.where(bu > 30.0, bu / beta, np.where(bu < -30.0, np.exp(np.minimum(bu, 0.0)) / beta, mid))
    return out


def _act(model: TinyModel, z):
    if model.activation == "softplus":
        return softplus(z, model.beta)
    if model.activation == "square":
        return z * z
    return z


def _act_d1(model: TinyModel, z):
    if model.activation == "softplus":
        return expit(model.beta * z)
    if model.activation == "square":
        return 2.0 * z
    return np.ones_like(z)


def _act_d2(model: TinyModel, z):
    if model.activation == "softplus":
        s = expit(model.beta * z)
        return model.beta * s * (1.0 - s)
    if model.activation == "square":
        return np.full_like(z, 2.0)
    return np.zeros_like(z)


# -- evaluation -------------------------------------------------------------

def _as_batch(model: TinyModel, x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    X = x[None, :] if single else x
    if X.ndim != 2 or X.shape[1] != model.n_inputs:
        raise ValueError(f"model expects inputs of length {model.n_inputs}, got shape {x.shape}")
    return X, single


def _hidden_pass(model: TinyModel, X: np.ndarray):
    pre, a = [], X
    for w, b in zip(model.weights[:-1], model.biases[:-1]):
        z = a @ w.T + b
        pre.append(z)
        a = _act(model, z)
    return pre, a


def forward(model: TinyModel, x) -> np.ndarray:
    """Class logits for one input (n,) or a batch (B, n)."""
    X, single = _as_batch(model, x)
    _, a = _hidden_pass(model, X)
    logits = a @ model.weights[-1].T + model.biases[-1]
    return logits[0] if single else logits


def predict(model: TinyModel, x):
    logits = forward(model, x)
    return int(np.argmax(logits)) if logits.ndim == 1 else np.argmax(logits, axis=1)


def _class_rows(model: TinyModel, class_index, batch: int) -> np.ndarray:
    cls = np.broadcast_to(np.asarray(class_index, dtype=int), (batch,))
    if np.any((cls < 0) | (cls >= model.n_classes)):
        raise ValueError(f"class index out of range for {model.n_classes} classes")
    return model.weights[-1][cls]


def input_gradient(model: TinyModel, x, class_index) -> np.ndarray:
    """Reverse-mode derivative of one logit with respect to the input."""
    X, single = _as_batch(model, x)
    pre, _ = _hidden_pass(model, X)
    g = _class_rows(model, class_index, X.shape[0])
    for w, z in zip(reversed(model.weights[:-1]), reversed(pre)):
        g = (g * _act_d1(model, z)) @ w
    return g[0] if single else g


def gradient_and_hvp(model: TinyModel, x, class_index, v) -> tuple[np.ndarray, np.ndarray]:
    """Input gradient and Hessian-vector product in one pass.

    The HVP is the forward-mode directional derivative, along ``v``, of the
    reverse-mode gradient computation.
    """
    X, single = _as_batch(model, x)
    V = np.broadcast_to(np.asarray(v, dtype=float), X.shape)
    pre, dpre = [], []
    a, da = X, V
    for w, b in zip(model.weights[:-1], model.biases[:-1]):
        z = a @ w.T + b
        dz = da @ w.T
        pre.append(z)
        dpre.append(dz)
        a = _act(model, z)
        da = _act_d1(model, z) * dz

    g = _class_rows(model, class_index, X.shape[0])
    dg = np.zeros_like(g)
    for w, z, dz in zip(reversed(model.weights[:-1]), reversed(pre), reversed(dpre)):
        d1 = _act_d1(model, z)
        delta = g * d1
        ddelta = dg * d1 + g * _act_d2(model, z) * dz
        g, dg = delta @ w, ddelta @ w
    if single:
        return g[0], dg[0]
    return g, dg


def hessian_vector_product(model: TinyModel, x, class_index, v,
                           method: str = "forward", step: float = 1e-3) -> np.ndarray:
    """H v for the Hessian of one logit with respect to the input.

    ``method="fd"`` uses central differences of the gradient and exists for
    cross-checking.
    """
    if method == "forward":
        return gradient_and_hvp(model, x, class_index, v)[1]
    if method == "fd":
        x = np.asarray(x, dtype=float)
        v = np.asarray(v, dtype=float)
        plus = input_gradient(model, x + step * v, class_index)
        minus = input_gradient(model, x - step * v, class_index)
        return (plus - minus) / (2.0 * step)
    raise ValueError(f"unknown HVP method {method!r}")


# -- training ---------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.05
    momentum: float = 0.9
    epochs: int = 30
    batch_size: int = 64
    weight_decay: float = 5e-4
    seed: int = 0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


@dataclass
class TrainHistory:
    loss: list = field(default_factory=list)
    accuracy: list = field(default_factory=list)

    @property
    def final_accuracy(self) -> Optional[float]:
        return self.accuracy[-1] if self.accuracy else None


def _loss_and_grads(model: TinyModel, X: np.ndarray, y: np.ndarray, weight_decay: float):
    pre, acts = [], [X]
    a = X
    for w, b in zip(model.weights[:-1], model.biases[:-1]):
        z = a @ w.T + b
        pre.append(z)
        a = _act(model, z)
        acts.append(a)
    logits = a @ model.weights[-1].T + model.biases[-1]
    logits = logits - logits.max(axis=1, keepdims=True)
    logp = logits - np.log(np.exp(logits).sum(axis=1, keepdims=True))
    m = X.shape[0]
    loss = -logp[np.arange(m), y].mean()

    delta = np.exp(logp)
    delta[np.arange(m), y] -= 1.0
    delta /= m
    gw, gb = [None] * len(model.weights), [None] * len(model.weights)
    for k in range(len(model.weights) - 1, -1, -1):
        gw[k] = delta.T @ acts[k] + weight_decay * model.weights[k]
        gb[k] = delta.sum(axis=0)
        if k:
            delta = (delta @ model.weights[k]) * _act_d1(model, pre[k - 1])
    return loss, gw, gb


def accuracy(model: TinyModel, X, y) -> float:
    if len(y) == 0:
        return float("nan")
    return float(np.mean(predict(model, X) == np.asarray(y)))


def train(model: TinyModel, inputs, labels, config: TrainConfig) -> tuple[TinyModel, TrainHistory]:
    """Minibatch SGD with momentum on softmax cross-entropy.

    Returns a trained copy; the input model is left untouched. Deterministic
    for a fixed ``config.seed``.
    """
    X = np.asarray(inputs, dtype=float)
    y = np.asarray(labels, dtype=int)
    if X.shape[0] != y.shape[0]:
        raise ValueError("inputs and labels differ in length")
    model = model.copy()
    history = TrainHistory()
    if config.epochs == 0 or X.shape[0] == 0:
        return model, history

    rng = np.random.default_rng(config.seed)
    vel_w = [np.zeros_like(w) for w in model.weights]
    vel_b = [np.zeros_like(b) for b in model.biases]
    for epoch in range(config.epochs):
        order = rng.permutation(X.shape[0])
        total = 0.0
        for start in range(0, X.shape[0], config.batch_size):
            idx = order[start:start + config.batch_size]
            loss, gw, gb = _loss_and_grads(model, X[idx], y[idx], config.weight_decay)
            if not np.isfinite(loss):
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch}, batch starting {start}; "
                    f"try a smaller learning rate than {config.learning_rate}")
            total += loss * len(idx)
            for k in range(len(model.weights)):
                vel_w[k] = config.momentum * vel_w[k] - config.learning_rate * gw[k]
                vel_b[k] = config.momentum * vel_b[k] - config.learning_rate * gb[k]
                model.weights[k] += vel_w[k]
                model.biases[k] += vel_b[k]
        history.loss.append(total / X.shape[0])
        history.accuracy.append(accuracy(model, X, y))
        logger.debug("epoch %d loss %.4f acc %.4f", epoch, history.loss[-1], history.accuracy[-1])
    return model, history


# -- checkpoints ------------------------------------------------------------

def save_model(model: TinyModel, path) -> None:
    header = json.dumps({"activation": model.activation, "beta": model.beta,
                         "dtype": "float64", "layer_sizes": model.layer_sizes},
                        sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        f.write(b"<")
        f.write(struct.pack("<I", len(header)))
        f.write(header)
        for w, b in zip(model.weights, model.biases):
            f.write(w.astype("<f8").tobytes(order="C"))
            f.write(b.astype("<f8").tobytes(order="C"))


def load_model(path) -> TinyModel:
    data = Path(path).read_bytes()
    if data[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a TinyModel checkpoint (bad magic at offset 0)")
    (version,) = struct.unpack_from("<I", data, 8)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    if data[12:13] != b"<":
        raise ValueError(f"{path}: unsupported endianness tag {data[12:13]!r}")
    (hlen,) = struct.unpack_from("<I", data, 13)
    header = json.loads(data[17:17 + hlen].decode("utf-8"))
    sizes = header["layer_sizes"]
    offset = 17 + hlen
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        count = fan_in * fan_out
        if offset + 8 * (count + fan_out) > len(data):
            raise ValueError(f"{path}: truncated checkpoint at offset {offset}")
        weights.append(np.frombuffer(data, "<f8", count, offset).reshape(fan_out, fan_in).copy())
        offset += 8 * count
        biases.append(np.frombuffer(data, "<f8", fan_out, offset).copy())
        offset += 8 * fan_out
    if offset != len(data):
        raise ValueError(f"{path}: {len(data) - offset} trailing bytes after tensors")
    return TinyModel(weights, biases, activation=header["activation"], beta=header["beta"])

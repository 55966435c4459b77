"""Dense float64 MLP engine.

Tensors carry an optional gradient slot; classifiers are fully connected
ReLU networks with a softmax head.  Forward prediction and gradient
evaluation on a frozen model are pure functions of (parameters, input),
and training is seeded so repeated runs are bitwise identical.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from typing import BinaryIO, Iterable, Sequence

import numpy as np

from .errors import (
    ConfigError,
    DataError,
    InvalidInputError,
    ShapeError,
    TrainingError,
)

# Lower clamp for probabilities inside log(); keeps every reported loss finite.
PROB_FLOOR = 1e-12

CHECKPOINT_MAGIC = b"MIANNCP\x00"
CHECKPOINT_VERSION = 1

_OPTIMIZERS = ("sgd", "adam")


class Tensor:
    """Dense float64 array with an optional same-shape gradient."""

    __slots__ = ("values", "requires_grad", "grad")

    def __init__(self, values, requires_grad: bool = False):
        arr = np.array(values, dtype=np.float64, order="C")
        if not np.all(np.isfinite(arr)):
            raise InvalidInputError("tensor values must be finite")
        self.values = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def size(self) -> int:
        return int(self.values.size)

    def set_grad(self, grad) -> None:
        g = np.asarray(grad, dtype=np.float64)
        if g.shape != self.values.shape:
            raise ShapeError(
                f"gradient shape {g.shape} does not match value shape {self.values.shape}"
            )
        self.grad = g

    def copy(self) -> "Tensor":
        t = Tensor(self.values, self.requires_grad)
        if self.grad is not None:
            t.grad = self.grad.copy()
        return t

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


@dataclass(frozen=True)
class LabeledSample:
    """One (features, label) pair; features live in [0, 1]^d."""

    features: np.ndarray
    label: int


@dataclass(frozen=True)
class TrainConfig:
    """Hyperparameters for seeded minibatch training."""

    epochs: int
    batch_size: int
    learning_rate: float
    optimizer: str = "adam"
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_epsilon: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not (self.learning_rate > 0 and math.isfinite(self.learning_rate)):
            raise ConfigError("learning_rate must be positive and finite")
        if self.optimizer not in _OPTIMIZERS:
            raise ConfigError(f"optimizer must be one of {_OPTIMIZERS}")
        if not (0 <= self.adam_beta1 < 1 and 0 <= self.adam_beta2 < 1):
            raise ConfigError("adam betas must lie in [0, 1)")
        if self.adam_epsilon <= 0:
            raise ConfigError("adam_epsilon must be positive")


@dataclass(frozen=True)
class GradientBundle:
    """Exact gradients of the per-sample loss w.r.t. parameters and input."""

    weight_grads: list
    bias_grads: list
    input_grad: Tensor

    def flattened_parameter_grad(self) -> np.ndarray:
        parts = []
        for gw, gb in zip(self.weight_grads, self.bias_grads):
            parts.append(gw.values.ravel())
            parts.append(gb.values.ravel())
        return np.concatenate(parts)

    def parameter_sq_norm(self) -> float:
        total = 0.0
        for gw, gb in zip(self.weight_grads, self.bias_grads):
            total += float(np.sum(gw.values * gw.values))
            total += float(np.sum(gb.values * gb.values))
        return total


def softmax(logits) -> np.ndarray:
    """Numerically stable softmax along the last axis."""
    z = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(z)):
        raise InvalidInputError("softmax input must be finite")
    shifted = z - z.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy_loss(probs, label: int) -> float:
    """-log p[label] with the probability clamped below by PROB_FLOOR."""
    p = np.asarray(probs, dtype=np.float64)
    if p.ndim != 1:
        raise ShapeError("cross_entropy_loss expects a 1-D probability vector")
    if label < 0 or label >= p.shape[0]:
        raise IndexError(f"label {label} out of range for {p.shape[0]} classes")
    return float(-math.log(min(max(float(p[label]), PROB_FLOOR), 1.0)))


class MLPClassifier:
    """Fully connected ReLU network with a softmax output layer."""

    def __init__(self, layer_dims: Sequence[int], weights: list, biases: list):
        dims = [int(d) for d in layer_dims]
        if len(dims) < 2:
            raise ConfigError("layer_dims needs at least an input and an output size")
        if any(d <= 0 for d in dims):
            raise ConfigError("layer dimensions must be positive")
        if len(weights) != len(dims) - 1 or len(biases) != len(dims) - 1:
            raise ShapeError("parameter list length does not match layer_dims")
        for i, (w, b) in enumerate(zip(weights, biases)):
            if w.shape != (dims[i], dims[i + 1]):
                raise ShapeError(
                    f"layer {i} weight shape {w.shape} != ({dims[i]}, {dims[i + 1]})"
                )
            if b.shape != (dims[i + 1],):
                raise ShapeError(f"layer {i} bias shape {b.shape} != ({dims[i + 1]},)")
        self.layer_dims = dims
        self.weights = weights
        self.biases = biases

    @property
    def input_dim(self) -> int:
        return self.layer_dims[0]

    @property
    def n_classes(self) -> int:
        return self.layer_dims[-1]

    @property
    def n_layers(self) -> int:
        return len(self.layer_dims) - 1

    def parameters(self) -> list:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.append(w)
            out.append(b)
        return out

    def parameter_count(self) -> int:
        return sum(t.size for t in self.parameters())

    def copy(self) -> "MLPClassifier":
        return MLPClassifier(
            list(self.layer_dims),
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
        )


def build_mlp(layer_dims: Sequence[int], seed: int) -> MLPClassifier:
    """Seeded init: weights uniform in +/- 1/sqrt(fan_in), biases zero."""
    dims = [int(d) for d in layer_dims]
    if len(dims) < 2:
        raise ConfigError("layer_dims needs at least an input and an output size")
    if any(d <= 0 for d in dims):
        raise ConfigError("layer dimensions must be positive")
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(dims, dims[1:]):
        limit = 1.0 / math.sqrt(fan_in)
        weights.append(Tensor(rng.uniform(-limit, limit, size=(fan_in, fan_out)), True))
        biases.append(Tensor(np.zeros(fan_out), True))
    return MLPClassifier(dims, weights, biases)


def _forward_trace(model: MLPClassifier, X: np.ndarray):
    """Batch forward pass keeping pre-activations and activations."""
    pres = []
    acts = [X]
    a = X
    last = model.n_layers - 1
    for i in range(model.n_layers):
        z = a @ model.weights[i].values + model.biases[i].values
        pres.append(z)
        if i < last:
            a = np.maximum(z, 0.0)
            acts.append(a)
    return pres, acts, softmax(pres[-1])


def _check_input(model: MLPClassifier, x) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 1 or arr.shape[0] != model.input_dim:
        raise ShapeError(
            f"input shape {arr.shape} does not match model input_dim {model.input_dim}"
        )
    if not np.all(np.isfinite(arr)):
        raise InvalidInputError("model input must be finite")
    return arr


def _check_label(model: MLPClassifier, y) -> int:
    label = int(y)
    if label < 0 or label >= model.n_classes:
        raise IndexError(f"label {label} out of range for {model.n_classes} classes")
    return label


def forward_predict(model: MLPClassifier, x) -> np.ndarray:
    """Class-probability vector for one input; sums to 1."""
    arr = _check_input(model, x)
    _, _, probs = _forward_trace(model, arr[None, :])
    return probs[0]


def forward_predict_batch(model: MLPClassifier, X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != model.input_dim:
        raise ShapeError("batch shape does not match model input_dim")
    _, _, probs = _forward_trace(model, X)
    return probs


def _batch_loss_and_grads(model, X, Y, need_params=True, need_input=False):
    """Mean clamped CE over the batch plus exact mean-loss gradients.

    Gradients are of the unclamped cross entropy (standard softmax delta);
    the clamp only bounds the reported value.
    """
    pres, acts, probs = _forward_trace(model, X)
    n = X.shape[0]
    rows = np.arange(n)
    picked = np.clip(probs[rows, Y], PROB_FLOOR, 1.0)
    loss = float(np.mean(-np.log(picked)))
    delta = probs.copy()
    delta[rows, Y] -= 1.0
    delta /= n
    L = model.n_layers
    gws = [None] * L if need_params else None
    gbs = [None] * L if need_params else None
    for i in reversed(range(L)):
        if need_params:
            gws[i] = acts[i].T @ delta
            gbs[i] = delta.sum(axis=0)
        if i > 0:
            delta = (delta @ model.weights[i].values.T) * (pres[i - 1] > 0.0)
        elif need_input:
            delta = delta @ model.weights[0].values.T
    g_input = delta if need_input else None
    return loss, gws, gbs, g_input, probs


def sample_evaluation(model: MLPClassifier, x, y):
    """Single-sample (loss, probs, input gradient); the attack hot path."""
    arr = _check_input(model, x)
    label = _check_label(model, y)
    loss, _, _, g_in, probs = _batch_loss_and_grads(
        model, arr[None, :], np.array([label]), need_params=False, need_input=True
    )
    return loss, probs[0], g_in[0]


def backward_gradients(model: MLPClassifier, x, y) -> GradientBundle:
    """Exact reverse-mode gradients of the per-sample loss.

    Covers every weight, every bias, and the input; shapes mirror the
    differentiated objects.
    """
    arr = _check_input(model, x)
    label = _check_label(model, y)
    _, gws, gbs, g_in, _ = _batch_loss_and_grads(
        model, arr[None, :], np.array([label]), need_params=True, need_input=True
    )
    return GradientBundle(
        weight_grads=[Tensor(g) for g in gws],
        bias_grads=[Tensor(g) for g in gbs],
        input_grad=Tensor(g_in[0]),
    )


def _dataset_arrays(model: MLPClassifier, dataset) -> tuple[np.ndarray, np.ndarray]:
    samples = list(dataset)
    if not samples:
        raise ConfigError("dataset is empty")
    X = np.stack([np.asarray(s.features, dtype=np.float64) for s in samples])
    Y = np.array([int(s.label) for s in samples], dtype=np.int64)
    if X.shape[1] != model.input_dim:
        raise ShapeError(
            f"sample dim {X.shape[1]} does not match model input_dim {model.input_dim}"
        )
    if Y.min() < 0 or Y.max() >= model.n_classes:
        raise IndexError("sample label out of range for model classes")
    return X, Y


class AdamState:
    """Adam moment buffers with bias correction, one pair per parameter."""

    def __init__(self, shapes, beta1=0.9, beta2=0.999, epsilon=1e-8):
        self.m = [np.zeros(s) for s in shapes]
        self.v = [np.zeros(s) for s in shapes]
        self.t = 0
        self.beta1 = beta1
        self.beta2 = beta2
        self.epsilon = epsilon

    def step(self, params: list, grads: list, lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            p -= lr * (m / c1) / (np.sqrt(v / c2) + self.epsilon)


def train(model: MLPClassifier, train_set, config: TrainConfig):
    """Seeded minibatch training; returns (model, per-epoch mean loss history).

    The model is updated in place.  Batches follow a fresh seeded permutation
    each epoch; the final short batch is kept.
    """
    X, Y = _dataset_arrays(model, train_set)
    n = X.shape[0]
    rng = np.random.default_rng(config.seed)
    params = [t.values for t in model.parameters()]
    adam = None
    if config.optimizer == "adam":
        adam = AdamState(
            [p.shape for p in params],
            beta1=config.adam_beta1,
            beta2=config.adam_beta2,
            epsilon=config.adam_epsilon,
        )
    history = []
    for _ in range(config.epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            try:
                loss, gws, gbs, _, _ = _batch_loss_and_grads(model, X[idx], Y[idx])
            except InvalidInputError as exc:
                # overflowed parameters poison the forward pass
                raise TrainingError(f"training diverged: {exc}") from exc
            grads = []
            for gw, gb in zip(gws, gbs):
                grads.append(gw)
                grads.append(gb)
            if adam is not None:
                adam.step(params, grads, config.learning_rate)
            else:
                for p, g in zip(params, grads):
                    p -= config.learning_rate * g
            total += loss * len(idx)
        epoch_loss = total / n
        if not math.isfinite(epoch_loss):
            raise TrainingError("training diverged to a non-finite loss")
        history.append(epoch_loss)
    return model, history


def empirical_risk(model: MLPClassifier, dataset) -> float:
    """Mean cross-entropy loss over the dataset."""
    X, Y = _dataset_arrays(model, dataset)
    _, _, probs = _forward_trace(model, X)
    picked = np.clip(probs[np.arange(len(Y)), Y], PROB_FLOOR, 1.0)
    return float(np.mean(-np.log(picked)))


def classification_accuracy(model: MLPClassifier, dataset) -> float:
    X, Y = _dataset_arrays(model, dataset)
    _, _, probs = _forward_trace(model, X)
    return float(np.mean(np.argmax(probs, axis=1) == Y))


# ---------------------------------------------------------------------------
# Checkpoint format: magic(8) | version u32 | n_dims u32 | dims u32[n] |
# per layer: weight f64 row-major, then bias f64.  Little endian throughout;
# raw float64 bytes make reloads bitwise exact.
# ---------------------------------------------------------------------------


def _read_exact(fh: BinaryIO, n: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise DataError("checkpoint truncated")
    return buf


def write_net_params(fh: BinaryIO, layer_dims, weights: Iterable, biases: Iterable):
    dims = [int(d) for d in layer_dims]
    fh.write(struct.pack("<I", len(dims)))
    fh.write(struct.pack(f"<{len(dims)}I", *dims))
    for w, b in zip(weights, biases):
        fh.write(np.ascontiguousarray(w.values, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(b.values, dtype="<f8").tobytes())


def read_net_params(fh: BinaryIO):
    (n_dims,) = struct.unpack("<I", _read_exact(fh, 4))
    if n_dims < 2 or n_dims > 1024:
        raise DataError(f"checkpoint has implausible layer count {n_dims}")
    dims = list(struct.unpack(f"<{n_dims}I", _read_exact(fh, 4 * n_dims)))
    weights, biases = [], []
    for fan_in, fan_out in zip(dims, dims[1:]):
        w = np.frombuffer(_read_exact(fh, 8 * fan_in * fan_out), dtype="<f8")
        b = np.frombuffer(_read_exact(fh, 8 * fan_out), dtype="<f8")
        weights.append(Tensor(w.reshape(fan_in, fan_out), True))
        biases.append(Tensor(b, True))
    return dims, weights, biases


def save_checkpoint(model: MLPClassifier, path) -> None:
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        write_net_params(fh, model.layer_dims, model.weights, model.biases)


def load_checkpoint(path) -> MLPClassifier:
    with open(path, "rb") as fh:
        magic = _read_exact(fh, len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise DataError("not a model checkpoint (bad magic)")
        (version,) = struct.unpack("<I", _read_exact(fh, 4))
        if version != CHECKPOINT_VERSION:
            raise DataError(f"unsupported checkpoint version {version}")
        dims, weights, biases = read_net_params(fh)
        if fh.read(1):
            raise DataError("trailing bytes after checkpoint payload")
    return MLPClassifier(dims, weights, biases)

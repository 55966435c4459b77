"""Trained membership attackers.

Feature extractors turn (model, sample) pairs into fixed-length vectors;
attackers are binary nets (logistic = no hidden layer, combiner = two ReLU
layers, ensemble = the fixed [6, 40, 40, 20, 10, 1] stack) trained on
min-max scaled features with member = 1, nonmember = 0.
"""

from __future__ import annotations

import csv
import math
import struct
from dataclasses import dataclass, field
from typing import BinaryIO, Sequence

import numpy as np

from .errors import ConfigError, DataError, ShapeError, TrainingError
from .nn_core import (
    AdamState,
    MLPClassifier,
    Tensor,
    backward_gradients,
    cross_entropy_loss,
    read_net_params,
    write_net_params,
    _forward_trace,
)

GRAD_STAT_NAMES = ("l1_norm", "l2_norm", "max_value", "mean", "skewness", "kurtosis", "abs_min")

ENSEMBLE_LAYER_DIMS = (6, 40, 40, 20, 10, 1)

# Order of the per-strategy scores fed to the ensemble attacker.
ENSEMBLE_FEATURE_ORDER = ("softmax", "mentr", "loss", "grad_w_norm", "grad_x_norm", "adv_dist")

ATTACKER_MAGIC = b"MIAATKC\x00"
ATTACKER_VERSION = 1

_MOMENT_FLOOR = 1e-24


@dataclass(frozen=True)
class GradStats:
    """Seven summary statistics of one gradient vector."""

    l1_norm: float
    l2_norm: float
    max_value: float
    mean: float
    skewness: float
    kurtosis: float
    abs_min: float

    def as_array(self) -> np.ndarray:
        return np.array(
            [
                self.l1_norm,
                self.l2_norm,
                self.max_value,
                self.mean,
                self.skewness,
                self.kurtosis,
                self.abs_min,
            ]
        )


@dataclass(frozen=True)
class FeatureVector:
    values: np.ndarray
    extractor: str


def _grad_array(grad) -> np.ndarray:
    values = grad.values if isinstance(grad, Tensor) else grad
    arr = np.asarray(values, dtype=np.float64).ravel()
    if arr.size == 0:
        raise ConfigError("gradient statistics need a non-empty vector")
    return arr


def gradient_statistics(grad) -> GradStats:
    """Population-moment summary; skew/kurtosis 0 for near-constant input,
    kurtosis is excess (normal -> 0)."""
    g = _grad_array(grad)
    mean = float(np.mean(g))
    centered = g - mean
    m2 = float(np.mean(centered**2))
    if m2 < _MOMENT_FLOOR:
        skew = 0.0
        kurt = 0.0
    else:
        skew = float(np.mean(centered**3)) / m2**1.5
        kurt = float(np.mean(centered**4)) / m2**2 - 3.0
    return GradStats(
        l1_norm=float(np.sum(np.abs(g))),
        l2_norm=float(np.sqrt(np.sum(g * g))),
        max_value=float(np.max(g)),
        mean=mean,
        skewness=skew,
        kurtosis=kurt,
        abs_min=float(np.min(np.abs(g))),
    )


# ---------------------------------------------------------------------------
# Feature extractors
# ---------------------------------------------------------------------------


def extract_grad_w_stats(model: MLPClassifier, x, y: int) -> FeatureVector:
    """Statistics of the flattened full parameter gradient."""
    bundle = backward_gradients(model, x, y)
    stats = gradient_statistics(bundle.flattened_parameter_grad())
    return FeatureVector(stats.as_array(), "grad_w_stats")


def extract_grad_x_stats(model: MLPClassifier, x, y: int) -> FeatureVector:
    """Statistics of the input gradient."""
    bundle = backward_gradients(model, x, y)
    stats = gradient_statistics(bundle.input_grad)
    return FeatureVector(stats.as_array(), "grad_x_stats")


def _last_two_layer_outputs(model: MLPClassifier, x) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    _, acts, probs = _forward_trace(model, arr[None, :])
    return np.concatenate([probs[0], acts[-1][0]])


def extract_intermediate_outputs(
    model: MLPClassifier, x, include_hidden: bool = True
) -> FeatureVector:
    """Softmax probabilities plus (by default) the penultimate activation."""
    if include_hidden:
        if model.n_layers < 2:
            raise ConfigError("intermediate outputs need at least one hidden layer")
        return FeatureVector(_last_two_layer_outputs(model, x), "intermediate_outputs")
    arr = np.asarray(x, dtype=np.float64)
    _, _, probs = _forward_trace(model, arr[None, :])
    return FeatureVector(probs[0], "intermediate_outputs")


def extract_wb_features(model: MLPClassifier, x, y: int) -> FeatureVector:
    """White-box concat: last-layer parameter gradient, loss, intermediate
    outputs, one-hot label."""
    if model.n_layers < 2:
        raise ConfigError("white-box features need at least one hidden layer")
    bundle = backward_gradients(model, x, y)
    last_w = bundle.weight_grads[-1].values.ravel()
    last_b = bundle.bias_grads[-1].values.ravel()
    arr = np.asarray(x, dtype=np.float64)
    _, acts, probs = _forward_trace(model, arr[None, :])
    loss = cross_entropy_loss(probs[0], y)
    onehot = np.zeros(model.n_classes)
    onehot[int(y)] = 1.0
    values = np.concatenate(
        [last_w, last_b, [loss], probs[0], acts[-1][0], onehot]
    )
    return FeatureVector(values, "wb_concat")


def assemble_score_features(score_row: dict) -> FeatureVector:
    """Six-score vector for the ensemble, in the fixed strategy order."""
    try:
        values = np.array([float(score_row[k]) for k in ENSEMBLE_FEATURE_ORDER])
    except KeyError as exc:
        raise ConfigError(f"ensemble features need score {exc.args[0]!r}") from exc
    return FeatureVector(values, "six_scores")


# ---------------------------------------------------------------------------
# Scaling
# ---------------------------------------------------------------------------


@dataclass
class MinMaxScaler:
    """Per-column affine map to [0, 1] with clipping outside the fit range.

    Degenerate columns (max == min) map to 0.  Refitting on a transformed
    split reproduces the identity on that split.
    """

    mins: np.ndarray
    maxs: np.ndarray

    @classmethod
    def fit(cls, X) -> "MinMaxScaler":
        arr = np.asarray(X, dtype=np.float64)
        if arr.ndim != 2 or arr.shape[0] == 0:
            raise ShapeError("scaler fit needs a non-empty 2-D matrix")
        return cls(arr.min(axis=0), arr.max(axis=0))

    def transform(self, X) -> np.ndarray:
        arr = np.atleast_2d(np.asarray(X, dtype=np.float64))
        if arr.shape[1] != self.mins.shape[0]:
            raise ShapeError(
                f"scaler expects {self.mins.shape[0]} columns, got {arr.shape[1]}"
            )
        span = self.maxs - self.mins
        safe = np.where(span > 0, span, 1.0)
        out = (arr - self.mins) / safe
        out = np.where(span > 0, out, 0.0)
        return np.clip(out, 0.0, 1.0)


# ---------------------------------------------------------------------------
# Binary nets
# ---------------------------------------------------------------------------


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


class BinaryNet:
    """ReLU hidden layers with a single sigmoid output unit."""

    def __init__(self, layer_dims: Sequence[int], weights: list, biases: list):
        dims = [int(d) for d in layer_dims]
        if len(dims) < 2 or dims[-1] != 1:
            raise ConfigError("binary net needs output width 1")
        if any(d <= 0 for d in dims):
            raise ConfigError("layer dimensions must be positive")
        for i, (w, b) in enumerate(zip(weights, biases)):
            if w.shape != (dims[i], dims[i + 1]) or b.shape != (dims[i + 1],):
                raise ShapeError(f"binary net layer {i} parameter shapes are wrong")
        self.layer_dims = dims
        self.weights = weights
        self.biases = biases

    @classmethod
    def build(cls, layer_dims: Sequence[int], seed: int) -> "BinaryNet":
        dims = [int(d) for d in layer_dims]
        rng = np.random.default_rng(seed)
        weights, biases = [], []
        for fan_in, fan_out in zip(dims, dims[1:]):
            limit = 1.0 / math.sqrt(fan_in)
            weights.append(Tensor(rng.uniform(-limit, limit, (fan_in, fan_out)), True))
            biases.append(Tensor(np.zeros(fan_out), True))
        return cls(dims, weights, biases)

    def parameters(self) -> list:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.append(w)
            out.append(b)
        return out

    def logits(self, X: np.ndarray):
        pres, acts = [], [X]
        a = X
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = a @ w.values + b.values
            pres.append(z)
            if i < last:
                a = np.maximum(z, 0.0)
                acts.append(a)
        return pres, acts

    def scores(self, X) -> np.ndarray:
        arr = np.atleast_2d(np.asarray(X, dtype=np.float64))
        if arr.shape[1] != self.layer_dims[0]:
            raise ShapeError("input width does not match binary net")
        pres, _ = self.logits(arr)
        return _sigmoid(pres[-1][:, 0])


def _binary_loss_and_grads(net: BinaryNet, X: np.ndarray, y: np.ndarray):
    """Mean BCE (stable softplus form) and its parameter gradients."""
    pres, acts = net.logits(X)
    z = pres[-1][:, 0]
    loss = float(np.mean(np.maximum(z, 0.0) - y * z + np.log1p(np.exp(-np.abs(z)))))
    n = X.shape[0]
    delta = ((_sigmoid(z) - y) / n)[:, None]
    L = len(net.weights)
    gws, gbs = [None] * L, [None] * L
    for i in reversed(range(L)):
        gws[i] = acts[i].T @ delta
        gbs[i] = delta.sum(axis=0)
        if i > 0:
            delta = (delta @ net.weights[i].values.T) * (pres[i - 1] > 0.0)
    grads = []
    for gw, gb in zip(gws, gbs):
        grads.append(gw)
        grads.append(gb)
    return loss, grads


def _binary_bce(net: BinaryNet, X: np.ndarray, y: np.ndarray) -> float:
    pres, _ = net.logits(X)
    z = pres[-1][:, 0]
    return float(np.mean(np.maximum(z, 0.0) - y * z + np.log1p(np.exp(-np.abs(z)))))


@dataclass
class TrainedAttacker:
    """Binary net plus the scaler fitted on its training features.

    `history` holds the full-dataset training loss per step (logistic) or
    per epoch (mlp/ensemble); it is not persisted by save_attacker.
    """

    kind: str  # "logistic" or "mlp"
    net: BinaryNet
    scaler: MinMaxScaler
    history: list = field(default_factory=list)

    @property
    def feature_length(self) -> int:
        return self.net.layer_dims[0]


def _feature_matrix(features) -> np.ndarray:
    if isinstance(features, np.ndarray):
        arr = np.asarray(features, dtype=np.float64)
    else:
        rows = [f.values if isinstance(f, FeatureVector) else f for f in features]
        if not rows:
            raise ShapeError("attacker training needs at least one feature vector")
        widths = {np.asarray(r).shape[0] for r in rows}
        if len(widths) != 1:
            raise ShapeError(f"inconsistent feature lengths {sorted(widths)}")
        arr = np.array(rows, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] == 0:
        raise ShapeError("attacker training needs a non-empty feature matrix")
    return arr


def _check_labels(labels, n: int) -> np.ndarray:
    y = np.asarray(labels, dtype=np.float64).ravel()
    if y.shape[0] != n:
        raise ShapeError("label count does not match feature count")
    if not set(np.unique(y)) <= {0.0, 1.0}:
        raise TrainingError("attacker labels must be 0/1")
    if len(np.unique(y)) < 2:
        raise TrainingError("attacker training needs both classes")
    return y


def fit_logistic_attacker(features, labels, seed: int = 0, max_steps: int = 10000):
    """Logistic regression by full-batch gradient descent.

    Zero init, data-scaled step, stop at relative loss improvement < 1e-8.
    """
    X_raw = _feature_matrix(features)
    y = _check_labels(labels, X_raw.shape[0])
    scaler = MinMaxScaler.fit(X_raw)
    X = scaler.transform(X_raw)
    d = X.shape[1]
    net = BinaryNet(
        [d, 1], [Tensor(np.zeros((d, 1)), True)], [Tensor(np.zeros(1), True)]
    )
    params = [t.values for t in net.parameters()]
    # Smoothness of mean BCE is bounded by mean ||x||^2 / 4; stay below 1/L.
    mean_sq = float(np.mean(np.sum(X * X, axis=1))) + 1.0
    lr = 4.0 / mean_sq
    prev = math.inf
    history = []
    for _ in range(max_steps):
        loss, grads = _binary_loss_and_grads(net, X, y)
        history.append(loss)
        if prev - loss < 1e-8 * max(abs(prev), 1.0) and math.isfinite(prev):
            break
        for p, g in zip(params, grads):
            p -= lr * g
        prev = loss
    return TrainedAttacker("logistic", net, scaler, history)


def _train_binary_net(
    net: BinaryNet,
    X: np.ndarray,
    y: np.ndarray,
    seed: int,
    epochs: int,
    learning_rate: float,
    batch_size: int,
    min_delta: float = 1e-6,
    patience: int = 20,
) -> list[float]:
    rng = np.random.default_rng(seed)
    params = [t.values for t in net.parameters()]
    adam = AdamState([p.shape for p in params])
    n = X.shape[0]
    history = []
    best = math.inf
    best_epoch = 0
    for epoch in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            _, grads = _binary_loss_and_grads(net, X[idx], y[idx])
            adam.step(params, grads, learning_rate)
        loss = _binary_bce(net, X, y)
        if not math.isfinite(loss):
            raise TrainingError("attacker training diverged")
        history.append(loss)
        if loss < best - min_delta:
            best = loss
            best_epoch = epoch
        elif epoch - best_epoch >= patience:
            break
    return history


def fit_mlp_attacker(
    features,
    labels,
    seed: int = 0,
    hidden: Sequence[int] = (64, 32),
    epochs: int = 300,
    learning_rate: float = 1e-3,
    batch_size: int = 32,
) -> TrainedAttacker:
    """Two-hidden-layer combiner for wide feature vectors."""
    X_raw = _feature_matrix(features)
    y = _check_labels(labels, X_raw.shape[0])
    scaler = MinMaxScaler.fit(X_raw)
    X = scaler.transform(X_raw)
    net = BinaryNet.build([X.shape[1], *hidden, 1], seed)
    history = _train_binary_net(net, X, y, seed + 1, epochs, learning_rate, batch_size)
    return TrainedAttacker("mlp", net, scaler, history)


def build_and_train_ensemble(
    features,
    labels,
    seed: int = 0,
    epochs: int = 300,
    learning_rate: float = 1e-3,
    batch_size: int = 32,
) -> TrainedAttacker:
    """Ensemble attacker over the six per-strategy scores.

    Architecture is fixed at [6, 40, 40, 20, 10, 1]; Adam for at most
    `epochs` epochs with early stop when the full-set BCE fails to improve
    by 1e-6 for 20 consecutive epochs.
    """
    X_raw = _feature_matrix(features)
    if X_raw.shape[1] != ENSEMBLE_LAYER_DIMS[0]:
        raise ShapeError(
            f"ensemble expects {ENSEMBLE_LAYER_DIMS[0]} features, got {X_raw.shape[1]}"
        )
    if epochs > 300:
        raise ConfigError("ensemble epochs capped at 300")
    y = _check_labels(labels, X_raw.shape[0])
    scaler = MinMaxScaler.fit(X_raw)
    X = scaler.transform(X_raw)
    net = BinaryNet.build(list(ENSEMBLE_LAYER_DIMS), seed)
    history = _train_binary_net(net, X, y, seed + 1, epochs, learning_rate, batch_size)
    return TrainedAttacker("mlp", net, scaler, history)


def attacker_score(attacker: TrainedAttacker, feature_vector) -> float:
    """Membership probability in [0, 1] for one feature vector."""
    values = (
        feature_vector.values
        if isinstance(feature_vector, FeatureVector)
        else np.asarray(feature_vector, dtype=np.float64)
    )
    if values.ndim != 1 or values.shape[0] != attacker.feature_length:
        raise ShapeError(
            f"attacker expects {attacker.feature_length} features, got shape {values.shape}"
        )
    return float(attacker.net.scores(attacker.scaler.transform(values[None, :]))[0])


def attacker_scores(attacker: TrainedAttacker, features) -> np.ndarray:
    """Batch version of attacker_score."""
    X = _feature_matrix(features)
    if X.shape[1] != attacker.feature_length:
        raise ShapeError(
            f"attacker expects {attacker.feature_length} features, got {X.shape[1]}"
        )
    return attacker.net.scores(attacker.scaler.transform(X))


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------

_KIND_CODES = {"logistic": 0, "mlp": 1}
_KIND_NAMES = {v: k for k, v in _KIND_CODES.items()}


def save_attacker(attacker: TrainedAttacker, path) -> None:
    with open(path, "wb") as fh:
        fh.write(ATTACKER_MAGIC)
        fh.write(struct.pack("<I", ATTACKER_VERSION))
        fh.write(struct.pack("<B", _KIND_CODES[attacker.kind]))
        write_net_params(fh, attacker.net.layer_dims, attacker.net.weights, attacker.net.biases)
        fh.write(struct.pack("<I", attacker.scaler.mins.shape[0]))
        fh.write(np.ascontiguousarray(attacker.scaler.mins, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(attacker.scaler.maxs, dtype="<f8").tobytes())


def load_attacker(path) -> TrainedAttacker:
    with open(path, "rb") as fh:
        magic = fh.read(len(ATTACKER_MAGIC))
        if magic != ATTACKER_MAGIC:
            raise DataError("not an attacker checkpoint (bad magic)")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != ATTACKER_VERSION:
            raise DataError(f"unsupported attacker checkpoint version {version}")
        (kind_code,) = struct.unpack("<B", fh.read(1))
        if kind_code not in _KIND_NAMES:
            raise DataError(f"unknown attacker kind code {kind_code}")
        dims, weights, biases = read_net_params(fh)
        raw = fh.read(4)
        if len(raw) != 4:
            raise DataError("attacker checkpoint truncated")
        (n_feat,) = struct.unpack("<I", raw)
        min_bytes = fh.read(8 * n_feat)
        max_bytes = fh.read(8 * n_feat)
        if len(min_bytes) != 8 * n_feat or len(max_bytes) != 8 * n_feat:
            raise DataError("attacker checkpoint truncated")
        mins = np.frombuffer(min_bytes, dtype="<f8")
        maxs = np.frombuffer(max_bytes, dtype="<f8")
    net = BinaryNet(dims, weights, biases)
    return TrainedAttacker(_KIND_NAMES[kind_code], net, MinMaxScaler(mins.copy(), maxs.copy()))


def write_feature_dump(path, sample_ids, features, is_member) -> None:
    """CSV dump: sample_id, one column per feature, is_member."""
    X = _feature_matrix(features)
    ids = list(sample_ids)
    members = list(is_member)
    if len(ids) != X.shape[0] or len(members) != X.shape[0]:
        raise ShapeError("feature dump inputs must have matching lengths")
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["sample_id"] + [f"f{i}" for i in range(X.shape[1])] + ["is_member"])
        for sid, row, m in zip(ids, X, members):
            writer.writerow([sid] + [repr(float(v)) for v in row] + [int(m)])


def read_feature_dump(path):
    """Inverse of write_feature_dump: (ids, matrix, is_member)."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[0] != "sample_id" or header[-1] != "is_member":
            raise DataError(f"unexpected feature CSV header in {path}")
        ids, rows, members = [], [], []
        width = len(header) - 2
        for lineno, row in enumerate(reader, start=2):
            if len(row) != width + 2:
                raise DataError(f"{path}: row {lineno} has {len(row)} fields")
            try:
                ids.append(int(row[0]))
                rows.append([float(v) for v in row[1:-1]])
                members.append(bool(int(row[-1])))
            except ValueError as exc:
                raise DataError(f"{path}: row {lineno}: {exc}") from exc
    return ids, np.array(rows, dtype=np.float64), members

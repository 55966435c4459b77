"""Membership scores: one scalar phi per strategy, oriented so larger
values point toward "member".  The decision rule is phi >= tau.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .adversarial import AttackConfig, find_adversarial
from .errors import DataError
from .nn_core import (
    PROB_FLOOR,
    MLPClassifier,
    backward_gradients,
    cross_entropy_loss,
    forward_predict,
    sample_evaluation,
)

THRESHOLD_STRATEGIES = (
    "softmax",
    "mentr",
    "loss",
    "grad_w_norm",
    "grad_x_norm",
    "adv_dist",
)


@dataclass(frozen=True)
class ScoreRecord:
    sample_id: int
    strategy: str
    score: float
    is_member: bool


@dataclass(frozen=True)
class DecisionThreshold:
    tau: float


def softmax_response(model: MLPClassifier, x) -> float:
    """Largest output probability."""
    return float(np.max(forward_predict(model, x)))


def modified_entropy(model: MLPClassifier, x, y: int) -> float:
    """Label-aware entropy variant; small for confident correct predictions.

    Probabilities are clamped to [PROB_FLOOR, 1 - PROB_FLOOR] inside the
    logs only, so a probability of exactly 1 on the true class gives 0.
    """
    probs = forward_predict(model, x)
    if y < 0 or y >= probs.shape[0]:
        raise IndexError(f"label {y} out of range for {probs.shape[0]} classes")
    clamped = np.clip(probs, PROB_FLOOR, 1.0 - PROB_FLOOR)
    log_p = np.log(clamped)
    log_1mp = np.log(np.clip(1.0 - probs, PROB_FLOOR, 1.0 - PROB_FLOOR))
    total = -(1.0 - probs[y]) * log_p[y]
    mask = np.arange(probs.shape[0]) != y
    total -= float(np.sum(probs[mask] * log_1mp[mask]))
    return float(total)


def mentr_score(model: MLPClassifier, x, y: int) -> float:
    """Negated modified entropy (members score high)."""
    return -modified_entropy(model, x, y)


def loss_score(model: MLPClassifier, x, y: int) -> float:
    """Negated true-label cross entropy."""
    return -cross_entropy_loss(forward_predict(model, x), y)


def grad_w_norm_score(model: MLPClassifier, x, y: int) -> float:
    """Negated SQUARED l2 norm of the full parameter gradient."""
    return -backward_gradients(model, x, y).parameter_sq_norm()


def grad_x_norm_score(model: MLPClassifier, x, y: int) -> float:
    """Negated l2 norm (not squared) of the input gradient."""
    _, _, g = sample_evaluation(model, x, y)
    return -float(np.sqrt(np.sum(g * g)))


def adv_dist_score(model: MLPClassifier, x, y: int, attack: AttackConfig) -> float:
    """Adversarial distance: lp norm of the minimal misclassifying
    perturbation, epsilon when the attack fails, 0 when x already misses."""
    return find_adversarial(model, x, y, attack).distance


def membership_decision(score: float, tau: float) -> bool:
    return score >= tau


def compute_score(
    model: MLPClassifier, x, y: int, strategy: str, attack: AttackConfig = None
) -> float:
    """Dispatch one strategy on one sample."""
    if strategy == "softmax":
        return softmax_response(model, x)
    if strategy == "mentr":
        return mentr_score(model, x, y)
    if strategy == "loss":
        return loss_score(model, x, y)
    if strategy == "grad_w_norm":
        return grad_w_norm_score(model, x, y)
    if strategy == "grad_x_norm":
        return grad_x_norm_score(model, x, y)
    if strategy == "adv_dist":
        if attack is None:
            raise DataError("adv_dist strategy needs an AttackConfig")
        return adv_dist_score(model, x, y, attack)
    raise DataError(f"unknown strategy {strategy!r}")


def write_score_records(records, path) -> None:
    """CSV dump, one row per (sample, strategy); floats as shortest repr."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["sample_id", "strategy", "score", "is_member"])
        for r in records:
            writer.writerow(
                [r.sample_id, r.strategy, repr(float(r.score)), int(r.is_member)]
            )


def read_score_records(path) -> list[ScoreRecord]:
    records = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["sample_id", "strategy", "score", "is_member"]:
            raise DataError(f"unexpected score CSV header in {path}")
        for lineno, row in enumerate(reader, start=2):
            if len(row) != 4:
                raise DataError(f"{path}: row {lineno} has {len(row)} fields, want 4")
            try:
                score = float(row[2])
                records.append(
                    ScoreRecord(int(row[0]), row[1], score, bool(int(row[3])))
                )
            except ValueError as exc:
                raise DataError(f"{path}: row {lineno}: {exc}") from exc
            if not math.isfinite(score):
                raise DataError(f"{path}: row {lineno}: non-finite score")
    return records

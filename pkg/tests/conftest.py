"""Shared fixtures: small trained models and the desk-scale audit corpus."""

import math
import time

import numpy as np
import pytest

import miaudit as mi
from miaudit.cli_runner import generate_synthetic_dataset
from miaudit.nn_core import classification_accuracy

# Desk-scale experiment: 500-sample / 10-class target trained to
# interpolation, scored by all six threshold strategies on members vs a
# same-sized heldout pool.  Several acceptance checks share this corpus.
DESK_SEEDS = (0, 1, 2, 3, 4)
DESK_N_PER_CLASS = 50
DESK_CLASSES = 10
DESK_DIM = 24
DESK_SEPARATION = 0.30
DESK_LAYERS = (DESK_DIM, 128, 128, DESK_CLASSES)
DESK_EPOCHS = 600
DESK_LR = 0.002
DESK_ATTACK = dict(p=math.inf, epsilon=1.0, n_iter=30, n_restarts=1)


def train_desk_target(seed: int):
    train, held, _ = generate_synthetic_dataset(
        DESK_N_PER_CLASS,
        DESK_CLASSES,
        DESK_DIM,
        DESK_SEPARATION,
        seed=seed,
        heldout_per_class=DESK_N_PER_CLASS,
    )
    model = mi.build_mlp(list(DESK_LAYERS), seed=seed + 100)
    mi.train(
        model,
        train.samples(),
        mi.TrainConfig(epochs=DESK_EPOCHS, batch_size=32, learning_rate=DESK_LR, seed=seed + 200),
    )
    return model, train, held


@pytest.fixture(scope="session")
def desk_audit():
    """Per-seed score pools for the six threshold strategies.

    Returns (runs, elapsed_seconds); each run holds train/heldout accuracy
    and member/nonmember score arrays keyed by strategy.
    """
    t0 = time.time()
    runs = []
    for seed in DESK_SEEDS:
        model, train, held = train_desk_target(seed)
        attack = mi.AttackConfig(seed=seed, **DESK_ATTACK)
        member = {}
        nonmember = {}
        for name in mi.THRESHOLD_STRATEGIES:
            member[name] = np.array(
                [mi.compute_score(model, train.X[i], int(train.y[i]), name, attack) for i in range(len(train))]
            )
            nonmember[name] = np.array(
                [mi.compute_score(model, held.X[i], int(held.y[i]), name, attack) for i in range(len(held))]
            )
        runs.append(
            {
                "seed": seed,
                "train_accuracy": classification_accuracy(model, train.samples()),
                "heldout_accuracy": classification_accuracy(model, held.samples()),
                "member": member,
                "nonmember": nonmember,
            }
        )
    return runs, time.time() - t0


@pytest.fixture()
def tiny_model():
    """Deterministic small untrained classifier."""
    return mi.build_mlp([4, 8, 3], seed=7)


@pytest.fixture()
def rng():
    return np.random.default_rng(12345)

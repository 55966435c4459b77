"""Network core: forward math, exact gradients, training, checkpoints."""

import math

import numpy as np
import pytest

import miaudit as mi
from miaudit.errors import ConfigError, DataError, InvalidInputError, ShapeError, TrainingError
from miaudit.nn_core import (
    CHECKPOINT_MAGIC,
    classification_accuracy,
    forward_predict_batch,
    sample_evaluation,
)


def finite_difference_grad(f, x, h=1e-6):
    """Central differences, one coordinate at a time."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.ravel()
    out = g.ravel()
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        hi = f(x)
        flat[i] = old - h
        lo = f(x)
        flat[i] = old
        out[i] = (hi - lo) / (2 * h)
    return g


def rel_err(a, b, floor=1e-5):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom))


def make_blobs(rng, n_per_class, n_classes, dim, sep=1.5):
    """Tiny gaussian-blob dataset squeezed into the unit box."""
    means = rng.normal(0.0, 1.0, (n_classes, dim)) * sep
    X = np.vstack([means[c] + rng.normal(0.0, 1.0, (n_per_class, dim)) for c in range(n_classes)])
    y = np.repeat(np.arange(n_classes), n_per_class)
    lo, hi = X.min(axis=0), X.max(axis=0)
    X = (X - lo) / np.maximum(hi - lo, 1e-12)
    order = rng.permutation(len(y))
    return X[order], y[order]


def as_samples(X, y):
    return [mi.LabeledSample(X[i], int(y[i])) for i in range(len(y))]


class TestSoftmax:
    def test_frozen_example(self):
        out = mi.softmax(np.array([1.0, 2.0, 3.0]))
        want = np.array([0.09003057317038046, 0.24472847105479767, 0.6652409557748219])
        assert np.allclose(out, want, atol=1e-12)

    def test_normalizes_and_positive(self, rng):
        for _ in range(50):
            z = rng.normal(0, 5, rng.integers(2, 9))
            p = mi.softmax(z)
            assert abs(p.sum() - 1.0) < 1e-12
            assert np.all(p >= 0)

    def test_shift_invariance(self, rng):
        z = rng.normal(0, 3, 6)
        assert np.allclose(mi.softmax(z), mi.softmax(z + 123.0), atol=1e-12)

    def test_large_logits_stay_finite(self):
        p = mi.softmax(np.array([800.0, 0.0]))
        assert np.all(np.isfinite(p))
        assert p[0] == 1.0 and p[1] == 0.0

    def test_rejects_non_finite(self):
        with pytest.raises(InvalidInputError):
            mi.softmax(np.array([1.0, np.nan]))


class TestCrossEntropy:
    def test_frozen_example(self):
        probs = np.array([0.7, 0.2, 0.1])
        assert abs(mi.cross_entropy_loss(probs, 0) - 0.35667494393873245) < 1e-12

    def test_clamps_zero_probability(self):
        loss = mi.cross_entropy_loss(np.array([0.0, 1.0]), 0)
        assert math.isfinite(loss)
        assert abs(loss - (-math.log(1e-12))) < 1e-9

    def test_label_out_of_range(self):
        with pytest.raises(IndexError):
            mi.cross_entropy_loss(np.array([0.5, 0.5]), 2)
        with pytest.raises(IndexError):
            mi.cross_entropy_loss(np.array([0.5, 0.5]), -1)


class TestTensor:
    def test_grad_shape_checked(self):
        t = mi.Tensor(np.zeros((2, 3)), requires_grad=True)
        with pytest.raises(ShapeError):
            t.set_grad(np.zeros((3, 2)))
        t.set_grad(np.ones((2, 3)))
        assert np.all(t.grad == 1.0)

    def test_rejects_non_finite(self):
        with pytest.raises(InvalidInputError):
            mi.Tensor(np.array([1.0, np.inf]))


class TestBuildMlp:
    def test_seeded_and_bounded(self):
        a = mi.build_mlp([5, 7, 3], seed=11)
        b = mi.build_mlp([5, 7, 3], seed=11)
        c = mi.build_mlp([5, 7, 3], seed=12)
        for wa, wb in zip(a.parameters(), b.parameters()):
            assert np.array_equal(wa.values, wb.values)
        assert any(
            not np.array_equal(wa.values, wc.values)
            for wa, wc in zip(a.parameters(), c.parameters())
        )
        for W, fan_in in zip(a.weights, [5, 7]):
            assert np.max(np.abs(W.values)) <= 1.0 / math.sqrt(fan_in)
        for bvec in a.biases:
            assert np.all(bvec.values == 0.0)

    def test_layer_dim_validation(self):
        with pytest.raises(ConfigError):
            mi.build_mlp([5], seed=0)
        with pytest.raises(ConfigError):
            mi.build_mlp([5, 0, 3], seed=0)

    def test_deep_model_shapes(self):
        m = mi.build_mlp([4, 9, 6, 3], seed=0)
        assert m.input_dim == 4 and m.n_classes == 3
        assert [w.shape for w in m.weights] == [(4, 9), (9, 6), (6, 3)]
        assert m.parameter_count() == 4 * 9 + 9 + 9 * 6 + 6 + 6 * 3 + 3


class TestForward:
    def test_predict_is_distribution(self, tiny_model, rng):
        for _ in range(20):
            p = mi.forward_predict(tiny_model, rng.uniform(0, 1, 4))
            assert abs(p.sum() - 1.0) < 1e-12
            assert np.all(p >= 0)

    def test_batch_matches_single(self, tiny_model, rng):
        X = rng.uniform(0, 1, (8, 4))
        batch = forward_predict_batch(tiny_model, X)
        for i in range(8):
            assert np.allclose(batch[i], mi.forward_predict(tiny_model, X[i]), atol=1e-14)

    def test_input_validation(self, tiny_model):
        with pytest.raises(ShapeError):
            mi.forward_predict(tiny_model, np.zeros(5))
        with pytest.raises(InvalidInputError):
            mi.forward_predict(tiny_model, np.array([0.1, np.nan, 0.2, 0.3]))


class TestGradients:
    def test_parameter_gradients_match_finite_differences(self, rng):
        # the exhaustive 50-model sweep lives in the acceptance suite
        for dims in ([3, 5, 2], [4, 6, 6, 3]):
            model = mi.build_mlp(dims, seed=int(rng.integers(1000)))
            x = rng.uniform(0.05, 0.95, dims[0])
            y = int(rng.integers(dims[-1]))
            bundle = mi.backward_gradients(model, x, y)
            for li in range(len(model.weights)):
                for tensor, grad in (
                    (model.weights[li], bundle.weight_grads[li]),
                    (model.biases[li], bundle.bias_grads[li]),
                ):
                    def loss_fn(vals, tensor=tensor):
                        saved = tensor.values.copy()
                        tensor.values[...] = vals
                        out = mi.cross_entropy_loss(mi.forward_predict(model, x), y)
                        tensor.values[...] = saved
                        return out

                    fd = finite_difference_grad(loss_fn, tensor.values.copy())
                    assert rel_err(grad.values, fd) < 1e-4

    def test_input_gradient_matches_finite_differences(self, tiny_model, rng):
        x = rng.uniform(0.05, 0.95, 4)
        y = 1
        bundle = mi.backward_gradients(tiny_model, x, y)

        def loss_fn(xv):
            return mi.cross_entropy_loss(mi.forward_predict(tiny_model, xv), y)

        fd = finite_difference_grad(loss_fn, x.copy())
        assert rel_err(bundle.input_grad.values, fd) < 1e-4

    def test_sample_evaluation_consistent(self, tiny_model, rng):
        x = rng.uniform(0, 1, 4)
        loss, probs, g_in = sample_evaluation(tiny_model, x, 2)
        assert abs(loss - mi.cross_entropy_loss(mi.forward_predict(tiny_model, x), 2)) < 1e-12
        assert np.allclose(probs, mi.forward_predict(tiny_model, x), atol=1e-14)
        bundle = mi.backward_gradients(tiny_model, x, 2)
        assert np.allclose(g_in, bundle.input_grad.values, atol=1e-14)

    def test_gradient_bundle_shapes(self, tiny_model):
        bundle = mi.backward_gradients(tiny_model, np.full(4, 0.5), 0)
        assert [g.shape for g in bundle.weight_grads] == [w.shape for w in tiny_model.weights]
        assert [g.shape for g in bundle.bias_grads] == [b.shape for b in tiny_model.biases]
        flat = bundle.flattened_parameter_grad()
        assert flat.shape == (tiny_model.parameter_count(),)
        assert abs(bundle.parameter_sq_norm() - float(np.sum(flat * flat))) < 1e-12


class TestTraining:
    def test_zero_epochs_is_identity(self, rng):
        X, y = make_blobs(rng, 4, 3, 5)
        model = mi.build_mlp([5, 8, 3], seed=1)
        before = [t.values.copy() for t in model.parameters()]
        _, history = mi.train(model, as_samples(X, y), mi.TrainConfig(0, 4, 0.01))
        assert history == []
        for old, t in zip(before, model.parameters()):
            assert np.array_equal(old, t.values)

    def test_bitwise_deterministic(self, rng):
        X, y = make_blobs(rng, 6, 3, 5)
        cfg = mi.TrainConfig(epochs=12, batch_size=4, learning_rate=0.01, seed=5)
        outs = []
        for _ in range(2):
            model = mi.build_mlp([5, 12, 3], seed=2)
            _, history = mi.train(model, as_samples(X, y), cfg)
            outs.append((history, [t.values.copy() for t in model.parameters()]))
        assert outs[0][0] == outs[1][0]
        for a, b in zip(outs[0][1], outs[1][1]):
            assert np.array_equal(a, b)

    def test_interpolates_small_set(self, rng):
        X, y = make_blobs(rng, 8, 3, 6, sep=1.0)
        model = mi.build_mlp([6, 32, 3], seed=3)
        samples = as_samples(X, y)
        _, history = mi.train(
            model, samples, mi.TrainConfig(epochs=300, batch_size=8, learning_rate=0.005, seed=0)
        )
        assert classification_accuracy(model, samples) == 1.0
        assert history[-1] < history[0]
        assert all(math.isfinite(h) for h in history)

    def test_sgd_option(self, rng):
        X, y = make_blobs(rng, 6, 2, 4)
        model = mi.build_mlp([4, 8, 2], seed=4)
        _, history = mi.train(
            model,
            as_samples(X, y),
            mi.TrainConfig(epochs=50, batch_size=4, learning_rate=0.5, optimizer="sgd", seed=1),
        )
        assert history[-1] < history[0]

    def test_risk_decreases(self, rng):
        X, y = make_blobs(rng, 6, 3, 5)
        model = mi.build_mlp([5, 16, 3], seed=9)
        samples = as_samples(X, y)
        before = mi.empirical_risk(model, samples)
        mi.train(model, samples, mi.TrainConfig(epochs=40, batch_size=6, learning_rate=0.01, seed=2))
        assert mi.empirical_risk(model, samples) < before

    def test_empty_dataset_rejected(self):
        model = mi.build_mlp([3, 4, 2], seed=0)
        with pytest.raises(ConfigError):
            mi.train(model, [], mi.TrainConfig(1, 2, 0.01))

    def test_config_validation(self):
        with pytest.raises(ConfigError):
            mi.TrainConfig(epochs=-1, batch_size=2, learning_rate=0.1)
        with pytest.raises(ConfigError):
            mi.TrainConfig(epochs=1, batch_size=0, learning_rate=0.1)
        with pytest.raises(ConfigError):
            mi.TrainConfig(epochs=1, batch_size=2, learning_rate=0.0)
        with pytest.raises(ConfigError):
            mi.TrainConfig(epochs=1, batch_size=2, learning_rate=0.1, optimizer="rmsprop")


class TestEmpiricalRisk:
    def test_frozen_mean(self):
        # logistic slope 10 turns chosen inputs into exact per-sample losses
        # 0.1, 0.2, 0.3, so the mean risk is 0.2
        model = mi.MLPClassifier(
            [1, 2],
            [mi.Tensor(np.array([[10.0, 0.0]]), True)],
            [mi.Tensor(np.zeros(2), True)],
        )
        xs = []
        for target in (0.1, 0.2, 0.3):
            p = math.exp(-target)
            xs.append(math.log(p / (1 - p)) / 10.0)
        samples = [mi.LabeledSample(np.array([v]), 0) for v in xs]
        assert abs(mi.empirical_risk(model, samples) - 0.2) < 1e-12

    def test_matches_per_sample_mean(self, tiny_model, rng):
        X = rng.uniform(0, 1, (9, 4))
        y = rng.integers(0, 3, 9)
        samples = as_samples(X, y)
        manual = np.mean(
            [mi.cross_entropy_loss(mi.forward_predict(tiny_model, X[i]), int(y[i])) for i in range(9)]
        )
        assert abs(mi.empirical_risk(tiny_model, samples) - manual) < 1e-12


class TestCheckpoint:
    def test_roundtrip_bitwise(self, tmp_path, rng):
        model = mi.build_mlp([6, 10, 4], seed=21)
        path = tmp_path / "model.ckpt"
        mi.save_checkpoint(model, path)
        loaded = mi.load_checkpoint(path)
        assert loaded.layer_dims == model.layer_dims
        for a, b in zip(model.parameters(), loaded.parameters()):
            assert np.array_equal(a.values, b.values)
        x = rng.uniform(0, 1, 6)
        assert np.array_equal(mi.forward_predict(model, x), mi.forward_predict(loaded, x))

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.ckpt"
        path.write_bytes(b"NOTAMODL" + b"\x00" * 64)
        with pytest.raises(DataError):
            mi.load_checkpoint(path)

    def test_truncated(self, tmp_path):
        model = mi.build_mlp([3, 4, 2], seed=0)
        path = tmp_path / "model.ckpt"
        mi.save_checkpoint(model, path)
        blob = path.read_bytes()
        path.write_bytes(blob[: len(blob) - 10])
        with pytest.raises(DataError):
            mi.load_checkpoint(path)

    def test_trailing_bytes_rejected(self, tmp_path):
        model = mi.build_mlp([3, 4, 2], seed=0)
        path = tmp_path / "model.ckpt"
        mi.save_checkpoint(model, path)
        path.write_bytes(path.read_bytes() + b"\x00")
        with pytest.raises(DataError):
            mi.load_checkpoint(path)

    def test_magic_prefix(self, tmp_path):
        model = mi.build_mlp([3, 4, 2], seed=0)
        path = tmp_path / "model.ckpt"
        mi.save_checkpoint(model, path)
        assert path.read_bytes()[: len(CHECKPOINT_MAGIC)] == CHECKPOINT_MAGIC


class TestTrainingDivergence:
    def test_non_finite_loss_raises(self, rng):
        X, y = make_blobs(rng, 4, 2, 3)
        model = mi.build_mlp([3, 6, 2], seed=0)
        with pytest.raises(TrainingError), np.errstate(over="ignore", invalid="ignore"):
            # one giant step overflows layer products to inf - inf = nan
            mi.train(
                model,
                as_samples(X, y),
                mi.TrainConfig(epochs=3, batch_size=8, learning_rate=1e200, optimizer="sgd"),
            )

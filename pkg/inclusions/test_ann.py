import json
import unittest

import numpy as np

from inclusions.ann import (
    MlpModel, TrainConfig, EarlyStopper, init_model, forward_pass, predict, predict_batch, loss, gradient,
    flat_gradient, accuracy, train_scg, fit_ann, model_to_dict, model_from_dict,
)
from inclusions.shared import TrainingError


def zero_model(d: int, n: int, hidden: int = 4) -> MlpModel:
    return MlpModel(np.zeros((d, hidden)), np.zeros(hidden), np.zeros((hidden, n)), np.zeros(n),
                    classes=list(range(1, n + 1)))


def bias_model(logits) -> MlpModel:
    model = zero_model(2, len(logits))
    model.b2 = np.asarray(logits, dtype=float)
    return model


def random_model(rng, d: int, n: int, hidden: int) -> MlpModel:
    return MlpModel(rng.normal(size=(d, hidden)), rng.normal(size=hidden), rng.normal(size=(hidden, n)),
                    rng.normal(size=n), classes=list(range(1, n + 1)))


def separable_toy(seed: int = 0, size: int = 20):
    rng = np.random.default_rng(seed)
    points, labels = [], []
    while len(points) < size:
        p = rng.uniform(-2, 2, size=2)
        if abs(p.sum()) < 0.2:
            continue
        points.append(p)
        labels.append(1 if p.sum() < 0 else 2)
    return np.array(points), np.array(labels)


class TestForwardPass(unittest.TestCase):
    def test_zero_model_is_uniform(self):
        p = forward_pass(zero_model(5, 4), np.arange(5.0))
        np.testing.assert_allclose(p, [0.25] * 4)

    def test_probabilities_sum_to_one(self):
        rng = np.random.default_rng(1)
        model = random_model(rng, 6, 3, 8)
        for scale in (1.0, 100.0, 1e4):
            p = forward_pass(model, scale * rng.normal(size=(20, 6)))
            np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)
            self.assertTrue(np.all(p >= 0))

    def test_logit_shift_invariance(self):
        model = random_model(np.random.default_rng(2), 3, 4, 5)
        x = np.array([0.3, -1.0, 2.0])
        shifted = model.with_parameters(model.parameters())
        shifted.b2 = shifted.b2 + 7.5
        np.testing.assert_allclose(forward_pass(model, x), forward_pass(shifted, x), atol=1e-12)

    def test_shape_mismatch(self):
        with self.assertRaises(ValueError):
            forward_pass(zero_model(3, 2), np.zeros(4))


class TestPredict(unittest.TestCase):
    def test_argmax(self):
        self.assertEqual(predict(bias_model(np.log([0.1, 0.7, 0.2])), np.zeros(2)), 2)

    def test_scaled_logits_keep_prediction(self):
        logits = np.array([0.3, -0.2, 1.1, 0.9])
        self.assertEqual(predict(bias_model(logits), np.zeros(2)), predict(bias_model(2 * logits), np.zeros(2)))

    def test_ties_broken_uniformly(self):
        out = predict_batch(zero_model(2, 4), np.zeros((4000, 2)), seed=3)
        counts = np.bincount(out, minlength=5)[1:]
        self.assertTrue(np.all(np.abs(counts - 1000) < 150), counts)

    def test_ties_are_seeded(self):
        model = zero_model(2, 3)
        np.testing.assert_array_equal(predict_batch(model, np.zeros((50, 2)), seed=9),
                                      predict_batch(model, np.zeros((50, 2)), seed=9))


class TestLoss(unittest.TestCase):
    def test_perfect_prediction(self):
        self.assertEqual(loss(bias_model([1000.0, 0.0]), np.zeros((1, 2)), [1]), 0.0)

    def test_uniform_prediction(self):
        self.assertAlmostEqual(loss(zero_model(2, 4), np.zeros((1, 2)), [3]), np.log(4), places=12)

    def test_duplicate_batch(self):
        model = random_model(np.random.default_rng(4), 3, 2, 4)
        x = np.array([[0.1, 0.2, -0.3]])
        self.assertAlmostEqual(loss(model, x, [2]), loss(model, np.vstack([x, x]), [2, 2]), places=14)

    def test_clamped_log(self):
        self.assertTrue(np.isfinite(loss(bias_model([0.0, 1e5]), np.zeros((1, 2)), [1])))

    def test_empty_batch(self):
        with self.assertRaises(ValueError):
            loss(zero_model(2, 2), np.zeros((0, 2)), [])

    def test_unknown_label(self):
        with self.assertRaises(ValueError):
            loss(zero_model(2, 2), np.zeros((1, 2)), [7])


class TestGradient(unittest.TestCase):
    def check_against_finite_differences(self, model, x, labels, step=1e-6):
        theta = model.parameters()
        analytic = flat_gradient(model, x, labels)
        numeric = np.zeros_like(theta)
        for i in range(len(theta)):
            e = np.zeros_like(theta)
            e[i] = step
            numeric[i] = (loss(model.with_parameters(theta + e), x, labels)
                          - loss(model.with_parameters(theta - e), x, labels)) / (2 * step)
        rel = np.linalg.norm(analytic - numeric) / max(np.linalg.norm(analytic), np.linalg.norm(numeric))
        self.assertLessEqual(rel, 1e-6)

    def test_matches_finite_differences(self):
        rng = np.random.default_rng(5)
        for _ in range(100):
            d, n = int(rng.integers(1, 11)), int(rng.integers(2, 5))
            model = random_model(rng, d, n, hidden=5)
            x = rng.normal(size=(6, d))
            labels = rng.integers(1, n + 1, size=6)
            self.check_against_finite_differences(model, x, labels)

    def test_matches_finite_differences_full_width(self):
        rng = np.random.default_rng(6)
        model = init_model(4, [1, 2, 3], hidden=64, seed=1)
        self.check_against_finite_differences(model, rng.normal(size=(5, 4)), [1, 2, 3, 3, 1])

    def test_output_bias_closed_form(self):
        grads = gradient(zero_model(3, 2), np.ones((3, 3)), [1, 1, 2])
        np.testing.assert_allclose(grads["b2"], [0.5 - 2 / 3, 0.5 - 1 / 3])

    def test_vanishes_at_minimum(self):
        """Identical inputs with both labels: the uniform output minimizes the loss."""
        grads = flat_gradient(zero_model(2, 2), np.array([[0.4, -0.1], [0.4, -0.1]]), [1, 2])
        self.assertLessEqual(np.linalg.norm(grads), 1e-8)

    def test_duplicated_batch(self):
        model = random_model(np.random.default_rng(7), 3, 3, 4)
        x = np.random.default_rng(8).normal(size=(4, 3))
        labels = [1, 2, 3, 1]
        np.testing.assert_allclose(flat_gradient(model, x, labels),
                                   flat_gradient(model, np.vstack([x, x]), labels + labels), atol=1e-15)

    def test_non_finite_gradient(self):
        model = zero_model(2, 2)
        model.w1 = np.full((2, 4), np.inf)
        with self.assertRaises(TrainingError):
            gradient(model, np.zeros((1, 2)), [1])


class TestEarlyStopper(unittest.TestCase):
    def test_increasing_validation_loss(self):
        stopper = EarlyStopper(patience=6)
        stopped_at = None
        for epoch in range(1, 50):
            if stopper.update(epoch, float(epoch), f"state-{epoch}"):
                stopped_at = epoch
                break
        self.assertEqual(stopped_at, 7)
        self.assertEqual(stopper.best_epoch, 1)
        self.assertEqual(stopper.best_state, "state-1")

    def test_improvement_resets_patience(self):
        stopper = EarlyStopper(patience=2)
        self.assertFalse(stopper.update(1, 1.0, None))
        self.assertFalse(stopper.update(2, 1.5, None))
        self.assertFalse(stopper.update(3, 0.5, None))
        self.assertFalse(stopper.update(4, 0.7, None))
        self.assertTrue(stopper.update(5, 0.9, None))


class TestTraining(unittest.TestCase):
    def test_separable_toy_reaches_full_accuracy(self):
        x, y = separable_toy()
        model = init_model(2, [1, 2], seed=0)
        trained, history = train_scg(model, (x, y), None, TrainConfig(max_epochs=200))
        self.assertEqual(accuracy(trained, x, y), 1.0)
        self.assertLessEqual(len(history), 200)

    def test_accepted_steps_never_increase_training_loss(self):
        x, y = separable_toy(seed=1, size=30)
        _, history = train_scg(init_model(2, [1, 2], hidden=8, seed=2), (x, y), None, TrainConfig(max_epochs=60))
        accepted = [h["train_loss"] for h in history if h["accepted"]]
        self.assertTrue(all(b <= a for a, b in zip(accepted, accepted[1:])))

    def test_returns_best_validation_snapshot(self):
        x, y = separable_toy(seed=2, size=40)
        xv, yv = separable_toy(seed=3, size=20)
        yv = 3 - yv
        trained, history = train_scg(init_model(2, [1, 2], hidden=8, seed=0), (x, y), (xv, yv),
                                     TrainConfig(max_epochs=100, patience=3))
        final = loss(trained, xv, yv)
        self.assertTrue(all(final <= h["val_loss"] + 1e-15 for h in history))
        self.assertLess(len(history), 100)

    def test_deterministic(self):
        x, y = separable_toy(seed=4)
        config = TrainConfig(max_epochs=30, hidden=16, seed=5)
        a, _ = fit_ann(x, y, config=config)
        b, _ = fit_ann(x, y, config=config)
        np.testing.assert_array_equal(a.parameters(), b.parameters())

    def test_normalization_stored_in_model(self):
        x, y = separable_toy(seed=6)
        model, _ = fit_ann(100.0 * x + 5.0, y, config=TrainConfig(max_epochs=200, normalize=True))
        self.assertIsNotNone(model.mean)
        self.assertEqual(accuracy(model, 100.0 * x + 5.0, y), 1.0)

    def test_config_validation(self):
        with self.assertRaises(ValueError):
            TrainConfig(max_epochs=0)
        with self.assertRaises(ValueError):
            TrainConfig(patience=0)


class TestSerialization(unittest.TestCase):
    def test_json_round_trip(self):
        x, y = separable_toy(seed=7)
        model, _ = fit_ann(x, y, config=TrainConfig(max_epochs=10, hidden=6, normalize=True))
        restored = model_from_dict(json.loads(json.dumps(model_to_dict(model))))
        np.testing.assert_array_equal(restored.parameters(), model.parameters())
        np.testing.assert_array_equal(restored.mean, model.mean)
        self.assertEqual(restored.classes, model.classes)
        np.testing.assert_array_equal(forward_pass(restored, x), forward_pass(model, x))


if __name__ == '__main__':
    unittest.main()

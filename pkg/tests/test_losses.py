import unittest

import numpy as np

from stability_pruner.errors import ConfigError, ShapeError
from stability_pruner.layers import Architecture, LayerSpec
from stability_pruner.losses import (auxiliary_loss, combine, cross_entropy, filter_attraction,
                                     filter_attraction_grad, softmax_cross_entropy, total_loss)
from stability_pruner.model import ModelGraph


def tiny_model(seed: int = 0) -> ModelGraph:
    arch = Architecture.build([LayerSpec.conv2d(2, 3), LayerSpec.relu(), LayerSpec.flatten(), LayerSpec.linear(3)],
                              (1, 5, 5))
    return ModelGraph.initialize(arch, seed=seed, dtype=np.float64)


class TestCrossEntropy(unittest.TestCase):
    def test_uniform_logits(self):
        logits = np.zeros((4, 10))
        self.assertAlmostEqual(cross_entropy(logits, np.arange(4)), np.log(10.0), places=12)

    def test_large_logits_are_stable(self):
        logits = np.array([[1000.0, 0.0], [0.0, 1000.0]])
        loss, grad = softmax_cross_entropy(logits, np.array([0, 1]))
        self.assertAlmostEqual(loss, 0.0, places=12)
        self.assertTrue(np.all(np.isfinite(grad)))

    def test_gradient_rows_sum_to_zero(self):
        logits = np.random.default_rng(1).normal(size=(6, 5))
        _, grad = softmax_cross_entropy(logits, np.array([0, 1, 2, 3, 4, 0]))
        np.testing.assert_allclose(grad.sum(axis=1), 0.0, atol=1e-15)

    def test_bad_labels(self):
        with self.assertRaises(ConfigError):
            cross_entropy(np.zeros((2, 3)), np.array([0, 3]))
        with self.assertRaises(ShapeError):
            cross_entropy(np.zeros((2, 3)), np.array([0]))


class TestFilterAttraction(unittest.TestCase):
    def test_abs_form_values(self):
        w = np.array([-2.0, -1.0, -0.5, 0.0, 0.5, 1.0, 3.0])
        # |-1-w| for w<0, |1-w| otherwise
        self.assertAlmostEqual(filter_attraction(w), 1.0 + 0.0 + 0.5 + 1.0 + 0.5 + 0.0 + 2.0)

    def test_zero_at_attractors(self):
        self.assertEqual(filter_attraction(np.array([-1.0, 1.0, 1.0, -1.0])), 0.0)

    def test_literal_form(self):
        w = np.array([-0.5, 0.5, 2.0])
        self.assertAlmostEqual(filter_attraction(w, "literal"), -0.5 + 0.5 - 1.0)
        np.testing.assert_array_equal(filter_attraction_grad(w, "literal"), [-1.0, -1.0, -1.0])

    def test_abs_subgradient(self):
        w = np.array([-2.0, -1.0, -0.5, 0.0, 0.5, 1.0, 3.0])
        np.testing.assert_array_equal(filter_attraction_grad(w), [-1.0, 0.0, 1.0, -1.0, -1.0, 1.0, 1.0])

    def test_unknown_form(self):
        with self.assertRaises(ConfigError):
            filter_attraction(np.zeros(2), "square")


class TestCombinedLoss(unittest.TestCase):
    def setUp(self):
        self.model = tiny_model()
        self.batch = np.random.default_rng(2).normal(size=(3, 1, 5, 5))
        self.labels = np.array([0, 1, 2])

    def test_auxiliary_loss_sums_conv_layers(self):
        total, per_layer = auxiliary_loss(self.model)
        self.assertEqual(len(per_layer), 1)
        self.assertAlmostEqual(total, filter_attraction(self.model.params["0.weight"]))

    def test_lambda_zero_is_exactly_cross_entropy(self):
        logits, _ = self.model.forward(self.batch, mode="train")
        self.assertEqual(total_loss(self.model, self.batch, self.labels, 0.0), cross_entropy(logits, self.labels))

    def test_total_adds_weighted_aux(self):
        logits, _ = self.model.forward(self.batch, mode="train")
        expected = cross_entropy(logits, self.labels) + 1e-3 * auxiliary_loss(self.model)[0]
        self.assertAlmostEqual(total_loss(self.model, self.batch, self.labels, 1e-3), expected, places=12)

    def test_total_loss_keeps_batchnorm_statistics(self):
        arch = Architecture.build([LayerSpec.conv2d(2, 3), LayerSpec.batchnorm2d(), LayerSpec.relu(),
                                   LayerSpec.flatten(), LayerSpec.linear(3)], (1, 5, 5))
        model = ModelGraph.initialize(arch, seed=4, dtype=np.float64)
        before = {k: v.copy() for k, v in model.buffers.items()}
        eval_logits, _ = model.forward(self.batch)
        total_loss(model, self.batch, self.labels, 1e-3)
        for name, value in before.items():
            np.testing.assert_array_equal(model.buffers[name], value)
        np.testing.assert_array_equal(model.forward(self.batch)[0], eval_logits)

    def test_auxiliary_loss_ignores_filter_order(self):
        model = tiny_model(seed=5)
        total = auxiliary_loss(model)[0]
        model.params["0.weight"] = model.params["0.weight"][::-1].copy()
        self.assertAlmostEqual(auxiliary_loss(model)[0], total, places=12)

    def test_combine(self):
        self.assertEqual(combine(2.0, 10.0, 0.0), 2.0)
        self.assertEqual(combine(2.0, 10.0, 0.5), 7.0)
        with self.assertRaises(ConfigError):
            combine(2.0, 1.0, -1.0)


if __name__ == "__main__":
    unittest.main()

import unittest

import numpy as np

from stability_pruner.ablation import (ARMS, AblationPoint, check_ablation, choose_filters, mean_accuracy,
                                       ordering_holds, run_ablation)
from stability_pruner.dataio import synth_dataset
from stability_pruner.errors import ConfigError
from stability_pruner.layers import Architecture, LayerSpec
from stability_pruner.model import ModelGraph
from stability_pruner.pruner import ImportanceReport, LayerImportance
from stability_pruner.trainer import TrainConfig


def small_model() -> ModelGraph:
    arch = Architecture.build([
        LayerSpec.conv2d(4, 3, padding=1), LayerSpec.relu(), LayerSpec.maxpool2d(2),
        LayerSpec.conv2d(6, 3, padding=1), LayerSpec.relu(), LayerSpec.maxpool2d(2),
        LayerSpec.flatten(), LayerSpec.linear(4),
    ], (1, 8, 8), name="small")
    return ModelGraph.initialize(arch, seed=0)


class TestChooseFilters(unittest.TestCase):
    def setUp(self):
        self.report = ImportanceReport("stability", [LayerImportance(0, np.array([1.0, 3.0, 2.0, 0.5]), np.ones(4))])

    def test_extreme_arms(self):
        self.assertEqual(choose_filters(self.report, 0, 2, "highest_ratio", 0), (1, 2))
        self.assertEqual(choose_filters(self.report, 0, 2, "lowest_ratio", 0), (0, 3))

    def test_random_arm_is_seeded(self):
        a = choose_filters(self.report, 0, 2, "random", 5)
        self.assertEqual(a, choose_filters(self.report, 0, 2, "random", 5))
        self.assertEqual(len(set(a)), 2)

    def test_unknown_arm(self):
        with self.assertRaises(ConfigError):
            choose_filters(self.report, 0, 1, "middle", 0)


class TestRunAblation(unittest.TestCase):
    def setUp(self):
        self.model = small_model()
        self.data = synth_dataset(64, classes=4, seed=0, image_size=8)
        self.aux = TrainConfig.auxiliary(lam=1e-3, batch_size=16)

    def run_points(self, workers: int):
        return run_ablation(self.model, self.data, self.data, self.aux, [3], [0, 2], [0, 1], workers)

    def test_points(self):
        points = self.run_points(1)
        self.assertEqual(len(points), 2 * 2 * len(ARMS))
        self.assertEqual([p.seed for p in points], [0] * 6 + [1] * 6)
        baseline = self.model.accuracy(self.data)
        for p in points:
            if p.k == 0:
                self.assertEqual(p.accuracy, baseline)
            self.assertEqual(p.layers, (3,))
        self.assertEqual(points[0].to_record()["record"], "ablation_point")

    def test_workers_do_not_change_results(self):
        self.assertEqual(self.run_points(1), self.run_points(2))

    def test_original_model_is_untouched(self):
        checksum = self.model.checksum()
        self.run_points(1)
        self.assertEqual(self.model.checksum(), checksum)

    def test_invalid_k_or_layer(self):
        with self.assertRaises(ConfigError):
            check_ablation(self.model, [3], [6])
        with self.assertRaises(ConfigError):
            check_ablation(self.model, [1], [1])
        with self.assertRaises(ConfigError):
            check_ablation(self.model, [], [1])


class TestSummaries(unittest.TestCase):
    def points(self, accuracies):
        return [AblationPoint(seed, 4, arm, acc, (3,))
                for seed, row in enumerate(accuracies) for arm, acc in zip(ARMS, row)]

    def test_mean_accuracy(self):
        means = mean_accuracy(self.points([(0.9, 0.8, 0.5), (0.7, 0.6, 0.3)]))
        self.assertAlmostEqual(means[(4, "highest_ratio")], 0.8)
        self.assertAlmostEqual(means[(4, "lowest_ratio")], 0.4)

    def test_ordering(self):
        self.assertTrue(ordering_holds(self.points([(0.9, 0.8, 0.5)]), [4]))
        self.assertFalse(ordering_holds(self.points([(0.5, 0.8, 0.9)]), [4]))


if __name__ == "__main__":
    unittest.main()

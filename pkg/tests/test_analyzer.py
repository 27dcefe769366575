import unittest

import numpy as np

from stability_pruner.analyzer import (CostAnalyzer, compression_summary, flops_conv, flops_fc, flops_total,
                                       layer_names, layerwise_flops_comparison, memory_report, model_size,
                                       param_count, top_flops_layers, trm_curve)
from stability_pruner.architectures import lenet5, resolve_architecture, vgg16_cifar
from stability_pruner.errors import ConfigError
from stability_pruner.layers import Architecture, LayerKind, LayerSpec
from stability_pruner.model import ModelGraph
from stability_pruner.pruner import PrunedSet, surgery


def within(value: float, target: float, percent: float) -> bool:
    return abs(value - target) <= abs(target) * percent / 100.0


class TestLayerFormulas(unittest.TestCase):
    def test_flops_conv(self):
        self.assertEqual(flops_conv(3, 3, 3, 32, 32, 64), 1_769_472)
        self.assertEqual(flops_conv(1, 5, 5, 24, 24, 20), 288_000)
        self.assertEqual(flops_conv(3, 3, 3, 32, 32, 64, batch_size=2), 2 * 1_769_472)

    def test_flops_fc(self):
        self.assertEqual(flops_fc(800, 500), 400_000)
        self.assertEqual(flops_fc(512, 10), 5_120)
        self.assertEqual(flops_fc(512, 512, 4), 1_048_576)

    def test_non_positive_arguments(self):
        with self.assertRaises(ConfigError):
            flops_conv(0, 3, 3, 32, 32, 64)
        with self.assertRaises(ConfigError):
            flops_fc(10, 10, batch_size=0)
        with self.assertRaises(ConfigError):
            memory_report(lenet5(), batch_size=0)


class TestLeNet(unittest.TestCase):
    def test_total_flops(self):
        self.assertEqual(flops_total(lenet5()), 2_293_000)
        self.assertEqual(flops_total(lenet5(), 3), 3 * 2_293_000)

    def test_params_and_size(self):
        self.assertEqual(param_count(lenet5()), 431_080)
        self.assertEqual(model_size(lenet5()), (431_080, 1_724_320))

    def test_feature_maps_and_trm(self):
        report = memory_report(lenet5(), 1)
        # conv1 11520 + pool 2880 + conv2 3200 + pool 800 + fc 500 + fc 10 elements
        self.assertEqual(report.featuremap_bytes, 4 * 18_910)
        self.assertEqual(report.trm_bytes, 1_724_320 + 4 * 18_910)
        self.assertEqual(report.layers[0].featuremap_bytes, 4 * 20 * 24 * 24)
        self.assertEqual(report.layers[1].featuremap_bytes, 0)
        vgg = memory_report(vgg16_cifar(), 1)
        self.assertEqual(vgg.layers[1].kind, LayerKind.BATCHNORM2D.value)
        self.assertEqual(vgg.layers[1].featuremap_bytes, 0)

    def test_layer_names(self):
        names = layer_names(lenet5())
        self.assertEqual([names[i] for i in (0, 3, 7, 9)], ["conv1", "conv2", "fc1", "fc2"])

    def test_pruned_lenet(self):
        self.assertEqual(flops_total(lenet5((4, 14))), 4 * 25 * 576 + 4 * 25 * 64 * 14 + 224 * 500 + 5_000)

    def test_shapes_match_a_forward_pass(self):
        model = ModelGraph.initialize(lenet5(), seed=0)
        _, cache = model.forward(np.zeros((2, 1, 28, 28), dtype=np.float32))
        report = memory_report(model, 2)
        for layer, output in zip(report.layers, cache.outputs):
            self.assertEqual(layer.output_shape, output.shape[1:])


class TestVgg(unittest.TestCase):
    def setUp(self):
        self.baseline = memory_report(vgg16_cifar(), 1)
        self.prun1 = memory_report(resolve_architecture("vgg16_prun1"), 1)
        self.prun2 = memory_report(resolve_architecture("vgg16_prun2"), 1)

    def test_baseline_totals(self):
        self.assertTrue(within(self.baseline.flops, 313.7e6, 0.5), self.baseline.flops)
        self.assertTrue(within(self.baseline.params, 15.0e6, 1.0), self.baseline.params)
        self.assertTrue(within(self.baseline.model_size_bytes, 60.0e6, 1.0), self.baseline.model_size_bytes)

    def test_pruned_variants(self):
        self.assertTrue(within(self.prun1.flops, 78.0e6, 1.0), self.prun1.flops)
        self.assertTrue(within(self.prun2.flops, 52.0e6, 1.0), self.prun2.flops)
        self.assertTrue(within(self.prun2.params, 0.62e6, 2.0), self.prun2.params)

    def test_compression(self):
        summary = compression_summary(self.baseline, self.prun2)
        self.assertTrue(within(summary.flops_ratio, 6.03, 2.0), summary.flops_ratio)
        self.assertLess(abs(summary.params_pruned_percent - 95.9), 0.5)
        self.assertGreater(summary.trm_ratio, 1.0)
        record = summary.to_record()
        self.assertEqual(record["record"], "compression")
        self.assertEqual(record["flops_before"], self.baseline.flops)

    def test_identical_models(self):
        summary = CostAnalyzer(vgg16_cifar()).compare(vgg16_cifar())
        self.assertEqual(summary.flops_ratio, 1.0)
        self.assertEqual(summary.flops_pruned_percent, 0.0)

    def test_six_most_expensive_conv_layers(self):
        self.assertEqual(set(top_flops_layers(self.baseline, 6)),
                         {"conv1_2", "conv2_2", "conv3_2", "conv3_3", "conv4_2", "conv4_3"})

    def test_layerwise_comparison(self):
        rows = layerwise_flops_comparison(self.baseline, self.prun2)
        self.assertEqual(len(rows), 15)
        self.assertEqual(rows[0]["name"], "conv1_1")
        self.assertTrue(all(row["flops_after"] < row["flops_before"] for row in rows[:-1]))
        self.assertEqual(rows[-1]["flops_after"], rows[-1]["flops_before"])

    def test_layerwise_comparison_needs_matching_layers(self):
        with self.assertRaises(ConfigError):
            layerwise_flops_comparison(self.baseline, memory_report(lenet5(), 1))

    def test_batch_sizes_must_match(self):
        with self.assertRaises(ConfigError):
            compression_summary(self.baseline, memory_report(vgg16_cifar(), 2))


class TestLinearity(unittest.TestCase):
    def test_trm_is_affine_in_batch_size(self):
        for arch in (lenet5(), vgg16_cifar()):
            curve = dict(trm_curve(arch, [1, 8, 64, 512]))
            intercept = model_size(arch)[1]
            slope = curve[1] - intercept
            for batch_size, trm in curve.items():
                self.assertEqual(trm, intercept + slope * batch_size)

    def test_flops_linear_in_batch_size(self):
        analyzer = CostAnalyzer(vgg16_cifar())
        reports = analyzer.reports([1, 2, 3])
        self.assertEqual(reports[2].flops - reports[1].flops, reports[1].flops - reports[0].flops)
        self.assertEqual(reports[1].flops, 2 * reports[0].flops)

    def test_surgery_always_lowers_flops(self):
        rng = np.random.default_rng(3)
        arch = Architecture.build([LayerSpec.conv2d(6, 3), LayerSpec.batchnorm2d(), LayerSpec.relu(),
                                   LayerSpec.conv2d(5, 3), LayerSpec.relu(), LayerSpec.flatten(),
                                   LayerSpec.linear(3)], (2, 9, 9))
        model = ModelGraph.initialize(arch, seed=0)
        for _ in range(10):
            layer = int(rng.choice(arch.conv_indices))
            width = arch.layers[layer].out_channels
            pruned = PrunedSet({layer: tuple(sorted(rng.choice(width, size=int(rng.integers(1, width)),
                                                               replace=False).tolist()))})
            self.assertLess(flops_total(surgery(model, pruned)), flops_total(model))


class TestRecords(unittest.TestCase):
    def test_records(self):
        records = memory_report(lenet5(), 4).to_records()
        self.assertEqual(records[0]["record"], "layer")
        self.assertEqual(records[0]["output_shape"], [20, 24, 24])
        totals = records[-1]
        self.assertEqual(totals["record"], "totals")
        self.assertEqual(totals["flops"], 4 * 2_293_000)
        self.assertEqual(totals["trm_bytes"], totals["model_size_bytes"] + totals["featuremap_bytes"])


if __name__ == "__main__":
    unittest.main()

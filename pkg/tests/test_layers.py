import unittest

import numpy as np

from stability_pruner import layers as L
from stability_pruner.errors import ShapeError
from stability_pruner.layers import Architecture, LayerKind, LayerSpec


def naive_conv(x, weight, bias, stride, pad):
    b, c, h, w = x.shape
    n, _, kh, kw = weight.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    oh, ow = (h + 2 * pad - kh) // stride + 1, (w + 2 * pad - kw) // stride + 1
    out = np.zeros((b, n, oh, ow))
    for i in range(b):
        for f in range(n):
            for y in range(oh):
                for z in range(ow):
                    patch = xp[i, :, y * stride:y * stride + kh, z * stride:z * stride + kw]
                    out[i, f, y, z] = np.sum(patch * weight[f]) + bias[f]
    return out


class TestShapes(unittest.TestCase):
    def test_build_resolves_inputs(self):
        arch = Architecture.build([LayerSpec.conv2d(4, 3), LayerSpec.batchnorm2d(), LayerSpec.relu(),
                                   LayerSpec.maxpool2d(2), LayerSpec.flatten(), LayerSpec.linear(5)], (2, 8, 8))
        conv, bn, _, _, _, fc = arch.layers
        self.assertEqual(conv.in_channels, 2)
        self.assertEqual(bn.channels, 4)
        self.assertEqual(fc.in_features, 4 * 3 * 3)
        self.assertEqual(arch.shapes()[-1], ((36,), (5,)))
        self.assertEqual(arch.num_classes, 5)
        self.assertEqual(arch.conv_indices, [0])
        self.assertEqual(arch.conv_widths(), [4])

    def test_linear_needs_flatten(self):
        with self.assertRaises(ShapeError):
            Architecture.build([LayerSpec.conv2d(4, 3), LayerSpec.linear(5)], (1, 6, 6))

    def test_kernel_larger_than_input(self):
        with self.assertRaises(ShapeError) as ctx:
            Architecture.build([LayerSpec.conv2d(2, 7), LayerSpec.flatten(), LayerSpec.linear(2)], (1, 5, 5))
        self.assertEqual(ctx.exception.layer_index, 0)

    def test_zero_filters_rejected(self):
        with self.assertRaises(ShapeError):
            Architecture.build([LayerSpec.conv2d(0, 3), LayerSpec.flatten(), LayerSpec.linear(2)], (1, 5, 5))

    def test_logits_must_be_flat(self):
        with self.assertRaises(ShapeError):
            Architecture.build([LayerSpec.conv2d(2, 3)], (1, 5, 5))

    def test_param_shapes(self):
        spec = Architecture.build([LayerSpec.conv2d(3, (2, 4)), LayerSpec.flatten(), LayerSpec.linear(2)],
                                  (2, 6, 6)).layers[0]
        self.assertEqual(spec.param_shapes(), {"weight": (3, 2, 2, 4), "bias": (3,)})
        self.assertEqual(LayerSpec.relu().param_shapes(), {})


class TestKernels(unittest.TestCase):
    def setUp(self):
        self.rng = np.random.default_rng(0)

    def test_conv_matches_direct_loops(self):
        for stride, pad, k in ((1, 0, 3), (2, 1, 3), (1, 2, 5), (3, 0, 2)):
            x = self.rng.normal(size=(2, 3, 9, 9))
            w = self.rng.normal(size=(4, 3, k, k))
            b = self.rng.normal(size=4)
            out, _ = L.conv2d_forward(x, w, b, stride, pad)
            np.testing.assert_allclose(out, naive_conv(x, w, b, stride, pad), atol=1e-10)

    def test_col2im_is_adjoint_of_im2col(self):
        x = self.rng.normal(size=(2, 2, 7, 7))
        col, _, _ = L.im2col(x, 3, 3, 2, 1)
        y = self.rng.normal(size=col.shape)
        lhs = np.sum(col * y)
        rhs = np.sum(x * L.col2im(y, x.shape, 3, 3, 2, 1))
        self.assertAlmostEqual(lhs, rhs, places=9)

    def test_maxpool_ties_route_to_first_index(self):
        x = np.ones((1, 1, 2, 2))
        out, cache = L.maxpool2d_forward(x, 2, 2)
        self.assertEqual(out.reshape(-1).tolist(), [1.0])
        dx = L.maxpool2d_backward(np.array([[[[1.0]]]]), cache, 2, 2)
        self.assertEqual(dx.reshape(-1).tolist(), [1.0, 0.0, 0.0, 0.0])

    def test_maxpool_backward_with_overlapping_windows(self):
        x = self.rng.permutation(2 * 3 * 7 * 7).astype(np.float64).reshape(2, 3, 7, 7)
        out, cache = L.maxpool2d_forward(x, 3, 2)
        self.assertEqual(out.shape, (2, 3, 3, 3))
        dout = self.rng.normal(size=out.shape)
        dx = L.maxpool2d_backward(dout, cache, 3, 2)
        expected = np.zeros_like(x)
        for b in range(2):
            for c in range(3):
                for y in range(3):
                    for z in range(3):
                        window = x[b, c, 2 * y:2 * y + 3, 2 * z:2 * z + 3]
                        dy, dz = np.unravel_index(np.argmax(window), window.shape)
                        expected[b, c, 2 * y + dy, 2 * z + dz] += dout[b, c, y, z]
        np.testing.assert_allclose(dx, expected, atol=1e-12)
        self.assertAlmostEqual(dx.sum(), dout.sum(), places=10)

    def test_maxpool_values(self):
        x = np.arange(16, dtype=np.float64).reshape(1, 1, 4, 4)
        out, _ = L.maxpool2d_forward(x, 2, 2)
        self.assertEqual(out.reshape(-1).tolist(), [5.0, 7.0, 13.0, 15.0])

    def test_relu(self):
        out, mask = L.relu_forward(np.array([-1.0, 0.0, 2.0]))
        self.assertEqual(out.tolist(), [0.0, 0.0, 2.0])
        self.assertEqual(L.relu_backward(np.ones(3), mask).tolist(), [0.0, 0.0, 1.0])

    def test_batchnorm_train_updates_running_stats(self):
        spec = LayerSpec(LayerKind.BATCHNORM2D, channels=2)
        x = self.rng.normal(loc=3.0, size=(4, 2, 3, 3))
        mean, var = np.zeros(2), np.ones(2)
        out, _ = L.batchnorm2d_forward(x, np.ones(2), np.zeros(2), mean, var, spec, train=True)
        np.testing.assert_allclose(out.mean(axis=(0, 2, 3)), 0.0, atol=1e-10)
        np.testing.assert_allclose(mean, 0.1 * x.mean(axis=(0, 2, 3)))
        np.testing.assert_allclose(var, 0.9 + 0.1 * x.var(axis=(0, 2, 3), ddof=1))

    def test_batchnorm_eval_uses_running_stats(self):
        spec = LayerSpec(LayerKind.BATCHNORM2D, channels=1)
        x = np.full((1, 1, 2, 2), 5.0)
        mean, var = np.array([1.0]), np.array([4.0])
        out, _ = L.batchnorm2d_forward(x, np.array([2.0]), np.array([1.0]), mean, var, spec, train=False)
        np.testing.assert_allclose(out, 2.0 * 4.0 / np.sqrt(4.0 + 1e-5) + 1.0)
        self.assertEqual(mean.tolist(), [1.0])


if __name__ == "__main__":
    unittest.main()

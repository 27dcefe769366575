import unittest

import numpy as np

from stability_pruner.errors import ConfigError, NumericError, ShapeError
from stability_pruner.tensor import (FLOAT64, Normal, Tensor, Uniform, abs_sum, add, full, matmul, mul, ones,
                                     rng_fill, scale, sub, zeros)


class TestConstructors(unittest.TestCase):
    def test_zeros_ones_full(self):
        z = zeros([2, 3])
        self.assertEqual(z.shape, (2, 3))
        self.assertEqual(z.size, 6)
        self.assertTrue(np.all(z.data == 0.0))
        self.assertEqual(float(ones([4]).data.sum()), 4.0)
        self.assertEqual(full([1], 7.5).data.tolist(), [7.5])

    def test_rejects_bad_dimensions(self):
        for shape in ([0, 3], [2, -1], []):
            with self.assertRaises(ShapeError):
                zeros(shape)

    def test_buffer_is_frozen(self):
        t = Tensor([1.0, 2.0])
        with self.assertRaises(ValueError):
            t.data[0] = 5.0
        copy = t.numpy()
        copy[0] = 5.0
        self.assertEqual(t.data[0], 1.0)

    def test_default_dtype_is_float32(self):
        self.assertEqual(Tensor([1, 2]).dtype, np.float32)
        self.assertEqual(Tensor([1, 2], dtype=FLOAT64).dtype, np.float64)
        with self.assertRaises(ConfigError):
            Tensor([1], dtype=np.int32)


class TestElementwise(unittest.TestCase):
    def test_examples(self):
        self.assertEqual(add(Tensor([1, 2]), Tensor([3, 4])).data.tolist(), [4, 6])
        self.assertEqual(scale(Tensor([1, -2]), 0.5).data.tolist(), [0.5, -1.0])
        self.assertEqual(mul(Tensor([2, 3]), Tensor([0, 1])).data.tolist(), [0, 3])
        self.assertEqual(sub(Tensor([5, 5]), 2).data.tolist(), [3, 3])
        self.assertEqual((Tensor([1, 1]) + Tensor([2, 2])).data.tolist(), [3, 3])

    def test_no_broadcasting(self):
        with self.assertRaises(ShapeError):
            add(Tensor([1, 2]), Tensor([[1, 2]]))
        with self.assertRaises(ShapeError):
            mul(Tensor([1, 2, 3]), Tensor([1, 2]))

    def test_dtype_is_kept(self):
        self.assertEqual(scale(Tensor([1.0]), 0.1).dtype, np.float32)
        self.assertEqual(add(Tensor([1.0], FLOAT64), 1).dtype, np.float64)


class TestMatmul(unittest.TestCase):
    def test_examples(self):
        self.assertEqual(matmul(Tensor([[1, 2]]), Tensor([[3], [4]])).data.tolist(), [[11]])
        a = Tensor([[5, 6], [7, 8]])
        self.assertEqual(matmul(Tensor([[1, 0], [0, 0]]), a).data.tolist(), [[5, 6], [0, 0]])

    def test_identity_is_exact(self):
        a = rng_fill([3, 3], 4, Normal(0.0, 1.0))
        eye = Tensor(np.eye(3))
        self.assertEqual(eye @ a, a)
        self.assertEqual(a @ eye, a)

    def test_dimension_mismatch(self):
        with self.assertRaises(ShapeError):
            matmul(Tensor([[1, 2]]), Tensor([[1, 2]]))
        with self.assertRaises(ShapeError):
            matmul(Tensor([1, 2]), Tensor([[1], [2]]))


class TestAbsSum(unittest.TestCase):
    def test_examples(self):
        self.assertEqual(abs_sum(Tensor([-1, 2, -3])), 6.0)
        self.assertEqual(abs_sum(zeros([5])), 0.0)
        self.assertEqual(abs_sum(Tensor([0.5, 0.5])), 1.0)

    def test_scales_with_factor(self):
        a = rng_fill([50], 1, Normal(0.0, 1.0))
        for c in (-3.0, 0.25, 7.0):
            self.assertAlmostEqual(abs_sum(scale(a, c)) / (abs(c) * abs_sum(a)), 1.0, delta=1e-6)


class TestReshape(unittest.TestCase):
    def test_round_trip_is_bit_exact(self):
        a = rng_fill([2, 3, 4], 9, Normal(0.0, 1.0))
        self.assertEqual(a.reshape([6, 4]).reshape([2, 3, 4]), a)
        self.assertEqual(a.reshape([24]).flat().tolist(), a.flat().tolist())

    def test_wrong_size(self):
        with self.assertRaises(ShapeError):
            zeros([2, 3]).reshape([4, 2])


class TestRngFill(unittest.TestCase):
    def test_deterministic(self):
        a = rng_fill([4, 5], 42, Uniform(-1.0, 1.0))
        b = rng_fill([4, 5], 42, Uniform(-1.0, 1.0))
        self.assertEqual(a.data.tobytes(), b.data.tobytes())

    def test_seeds_differ(self):
        a = rng_fill([16], 1, Normal(0.0, 1.0))
        b = rng_fill([16], 2, Normal(0.0, 1.0))
        self.assertFalse(np.array_equal(a.data, b.data))

    def test_degenerate_uniform(self):
        self.assertTrue(np.all(rng_fill([3, 3], 0, Uniform(0.0, 0.0)).data == 0.0))

    def test_invalid_parameters(self):
        with self.assertRaises(ConfigError):
            rng_fill([2], 0, Uniform(1.0, 0.0))
        with self.assertRaises(ConfigError):
            rng_fill([2], 0, Normal(0.0, -1.0))


class TestValidateFinite(unittest.TestCase):
    def test_finite_passes_through(self):
        t = Tensor([1.0, -2.0])
        self.assertIs(t.validate_finite(), t)

    def test_raises(self):
        with self.assertRaises(NumericError):
            Tensor([1.0, np.nan]).validate_finite("activations")
        with self.assertRaises(NumericError):
            Tensor([np.inf]).validate_finite()


if __name__ == "__main__":
    unittest.main()

import math
import unittest

import numpy as np

from rangeseg_core.errors import EmptyInputError, FormatError, ShapeError
from rangeseg_core.tensor import (Tensor, batch_norm, bilinear_upsample, concat, conv2d, gather_slots, grad_check,
                                  leaky_relu, maxpool_axis, mul, pad_circular_width, sigmoid, softmax, transpose,
                                  tsum, weighted_cross_entropy)


def naive_conv(x, w, stride, padding, dilation, groups):
    batch, cin, height, width = x.shape
    cout, cin_g, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    ho = (height + 2 * padding - dilation * (kh - 1) - 1) // stride + 1
    wo = (width + 2 * padding - dilation * (kw - 1) - 1) // stride + 1
    out = np.zeros((batch, cout, ho, wo))
    per_group = cout // groups
    for b in range(batch):
        for o in range(cout):
            g = o // per_group
            for i in range(ho):
                for j in range(wo):
                    total = 0.0
                    for c in range(cin_g):
                        for p in range(kh):
                            for q in range(kw):
                                total += w[o, c, p, q] * xp[b, g * cin_g + c, i * stride + p * dilation,
                                                            j * stride + q * dilation]
                    out[b, o, i, j] = total
    return out


def weighted_sum(out, rng):
    """Scalar readout with non-uniform output weights."""
    return tsum(mul(out, Tensor(rng.normal(size=out.shape))))


class TestTensor(unittest.TestCase):
    def test_backward_needs_scalar(self):
        x = Tensor(np.ones((2, 2)), requires_grad=True)
        with self.assertRaises(ShapeError):
            mul(x, x).backward()

    def test_gradients_accumulate_over_uses(self):
        x = Tensor(np.array([1.0, -2.0, 3.0]), requires_grad=True)
        tsum(x * x + x).backward()
        np.testing.assert_array_equal(x.grad, 2 * x.data + 1)

    def test_constants_receive_no_gradient(self):
        x = Tensor(np.ones(3), requires_grad=True)
        c = Tensor(np.full(3, 2.0))
        tsum(x * c).backward()
        self.assertIsNone(c.grad)
        np.testing.assert_array_equal(x.grad, [2.0, 2.0, 2.0])

    def test_grad_check_on_square(self):
        x = Tensor(np.random.default_rng(0).normal(size=(4, 3)), requires_grad=True)
        self.assertLess(grad_check(lambda: tsum(x * x), [x]), 1e-8)


class TestElementwise(unittest.TestCase):
    def test_leaky_relu(self):
        x = Tensor(np.array([-2.0, 0.0, 3.0]), requires_grad=True)
        y = leaky_relu(x, 0.01)
        np.testing.assert_allclose(y.data, [-0.02, 0.0, 3.0])
        tsum(y).backward()
        np.testing.assert_array_equal(x.grad, [0.01, 0.01, 1.0])

    def test_sigmoid_is_stable(self):
        y = sigmoid(Tensor(np.array([-1000.0, 0.0, 1000.0])))
        self.assertTrue(np.all(np.isfinite(y.data)))
        self.assertEqual(y.data[1], 0.5)
        self.assertAlmostEqual(y.data[0], 0.0)
        self.assertAlmostEqual(y.data[2], 1.0)

    def test_softmax(self):
        y = softmax(Tensor(np.array([[1000.0, 1000.0], [0.0, math.log(3.0)]])), axis=-1)
        np.testing.assert_allclose(y.data, [[0.5, 0.5], [0.25, 0.75]])
        np.testing.assert_allclose(y.data.sum(axis=-1), 1.0)

    def test_elementwise_gradients(self):
        rng = np.random.default_rng(1)
        x = Tensor(rng.normal(size=(3, 5)), requires_grad=True)
        self.assertLess(grad_check(lambda: weighted_sum(sigmoid(x), np.random.default_rng(2)), [x]), 1e-6)
        self.assertLess(grad_check(lambda: weighted_sum(softmax(x, axis=1), np.random.default_rng(3)), [x]), 1e-6)
        self.assertLess(grad_check(lambda: weighted_sum(leaky_relu(x, 0.1), np.random.default_rng(4)), [x]), 1e-6)


class TestShapeOps(unittest.TestCase):
    def test_maxpool_picks_lowest_index_on_ties(self):
        x = Tensor(np.array([[1.0, 5.0, 5.0, 2.0]]), requires_grad=True)
        out, index = maxpool_axis(x, axis=1)
        self.assertEqual(out.data[0], 5.0)
        self.assertEqual(index[0], 1)
        tsum(out).backward()
        np.testing.assert_array_equal(x.grad, [[0.0, 1.0, 0.0, 0.0]])

    def test_maxpool_ignores_order(self):
        rng = np.random.default_rng(5)
        data = rng.normal(size=(2, 3, 7, 16))
        perm = rng.permutation(16)
        a, _ = maxpool_axis(Tensor(data), axis=3)
        b, _ = maxpool_axis(Tensor(data[..., perm]), axis=3)
        np.testing.assert_array_equal(a.data, b.data)

    def test_shape_gradients(self):
        rng = np.random.default_rng(6)
        x = Tensor(rng.normal(size=(2, 3, 4, 5)), requires_grad=True)
        y = Tensor(rng.normal(size=(2, 2, 4, 5)), requires_grad=True)
        self.assertLess(grad_check(lambda: weighted_sum(maxpool_axis(x, 3)[0], np.random.default_rng(7)), [x]), 1e-6)
        self.assertLess(grad_check(lambda: weighted_sum(concat([x, y], axis=1), np.random.default_rng(8)), [x, y]), 1e-6)
        self.assertLess(grad_check(lambda: weighted_sum(transpose(x, (0, 2, 3, 1)), np.random.default_rng(9)), [x]), 1e-6)
        self.assertLess(grad_check(lambda: weighted_sum(pad_circular_width(x, 2), np.random.default_rng(10)), [x]), 1e-6)

    def test_gather_slots(self):
        x = Tensor(np.arange(12.0).reshape(1, 2, 6), requires_grad=True)
        index = np.array([[0, 1, -1], [5, 5, 2]])
        out = gather_slots(x, index)
        np.testing.assert_array_equal(out.data[0, 0], [[0, 1, 0], [5, 5, 2]])
        tsum(out).backward()
        np.testing.assert_array_equal(x.grad[0, 0], [1, 1, 1, 0, 0, 2])

    def test_circular_pad(self):
        x = Tensor(np.arange(4.0).reshape(1, 1, 1, 4))
        np.testing.assert_array_equal(pad_circular_width(x, 1).data[0, 0, 0], [3, 0, 1, 2, 3, 0])
        with self.assertRaises(ShapeError):
            pad_circular_width(x, 5)


class TestConv2d(unittest.TestCase):
    def test_identity_kernel(self):
        x = Tensor(np.random.default_rng(11).normal(size=(2, 1, 5, 6)))
        w = np.zeros((1, 1, 3, 3))
        w[0, 0, 1, 1] = 1.0
        np.testing.assert_array_equal(conv2d(x, Tensor(w), padding=1).data, x.data)

    def test_ones_kernel_counts_taps(self):
        channels = 4
        out = conv2d(Tensor(np.ones((1, channels, 5, 5))), Tensor(np.ones((2, channels, 3, 3))))
        self.assertEqual(out.shape, (1, 2, 3, 3))
        self.assertTrue(np.all(out.data == 9 * channels))

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(12)
        x = rng.normal(size=(2, 4, 7, 9))
        w = rng.normal(size=(6, 2, 3, 3))
        out = conv2d(Tensor(x), Tensor(w), stride=2, padding=1, dilation=2, groups=2)
        np.testing.assert_allclose(out.data, naive_conv(x, w, 2, 1, 2, 2), atol=1e-12)

    def test_depthwise_matches_loop_oracle(self):
        rng = np.random.default_rng(13)
        x = rng.normal(size=(1, 3, 6, 6))
        w = rng.normal(size=(3, 1, 3, 3))
        out = conv2d(Tensor(x), Tensor(w), padding=1, groups=3)
        np.testing.assert_allclose(out.data, naive_conv(x, w, 1, 1, 1, 3), atol=1e-12)

    def test_mismatched_channels(self):
        with self.assertRaisesRegex(ShapeError, r"\(1, 11, 4, 4\)"):
            conv2d(Tensor(np.ones((1, 11, 4, 4))), Tensor(np.ones((24, 12, 1, 1))))

    def test_gradients(self):
        rng = np.random.default_rng(14)
        x = Tensor(rng.normal(size=(2, 4, 5, 6)), requires_grad=True)
        w = Tensor(rng.normal(size=(4, 2, 3, 3)), requires_grad=True)
        b = Tensor(rng.normal(size=4), requires_grad=True)
        dw = Tensor(rng.normal(size=(4, 1, 3, 3)), requires_grad=True)

        def grouped():
            return weighted_sum(conv2d(x, w, b, stride=2, padding=1, dilation=1, groups=2), np.random.default_rng(15))

        def depthwise():
            return weighted_sum(conv2d(x, dw, padding=2, dilation=2, groups=4), np.random.default_rng(16))

        self.assertLess(grad_check(grouped, [x, w, b]), 1e-6)
        self.assertLess(grad_check(depthwise, [x, dw]), 1e-6)


class TestBatchNorm(unittest.TestCase):
    def setUp(self):
        self.gamma = Tensor(np.ones(3), requires_grad=True)
        self.beta = Tensor(np.zeros(3), requires_grad=True)

    def test_training_normalizes_and_updates_running_stats(self):
        rng = np.random.default_rng(17)
        x = Tensor(rng.normal(2.0, 3.0, size=(4, 3, 5, 5)))
        running_mean, running_var = np.zeros(3), np.ones(3)
        out = batch_norm(x, self.gamma, self.beta, running_mean, running_var, training=True)
        np.testing.assert_allclose(out.data.mean(axis=(0, 2, 3)), 0.0, atol=1e-12)
        np.testing.assert_allclose(out.data.var(axis=(0, 2, 3)), 1.0, atol=1e-3)
        mu = x.data.mean(axis=(0, 2, 3))
        unbiased = x.data.var(axis=(0, 2, 3), ddof=1)
        np.testing.assert_allclose(running_mean, 0.1 * mu)
        np.testing.assert_allclose(running_var, 0.9 + 0.1 * unbiased)

    def test_eval_uses_running_stats(self):
        x = Tensor(np.full((1, 3, 2, 2), 5.0))
        out = batch_norm(x, self.gamma, self.beta, np.full(3, 1.0), np.full(3, 4.0), training=False, eps=0.0)
        np.testing.assert_allclose(out.data, 2.0)

    def test_constant_channel_stays_finite(self):
        out = batch_norm(Tensor(np.full((2, 3, 2, 2), 7.0)), self.gamma, self.beta, np.zeros(3), np.ones(3))
        np.testing.assert_array_equal(out.data, 0.0)

    def test_empty_batch(self):
        with self.assertRaises(EmptyInputError):
            batch_norm(Tensor(np.zeros((0, 3, 2, 2))), self.gamma, self.beta, np.zeros(3), np.ones(3))

    def test_gradients(self):
        rng = np.random.default_rng(18)
        x = Tensor(rng.normal(size=(2, 3, 3, 4)), requires_grad=True)
        gamma = Tensor(rng.uniform(0.5, 1.5, size=3), requires_grad=True)
        beta = Tensor(rng.normal(size=3), requires_grad=True)

        def readout(training):
            return lambda: weighted_sum(batch_norm(x, gamma, beta, np.zeros(3), np.ones(3), training=training),
                                        np.random.default_rng(19))

        self.assertLess(grad_check(readout(True), [x, gamma, beta]), 1e-6)
        self.assertLess(grad_check(readout(False), [x, gamma, beta]), 1e-6)


class TestBilinearUpsample(unittest.TestCase):
    def test_constant_stays_constant(self):
        out = bilinear_upsample(Tensor(np.full((1, 2, 3, 5), 4.5)))
        self.assertEqual(out.shape, (1, 2, 6, 10))
        np.testing.assert_allclose(out.data, 4.5)

    def test_single_pixel(self):
        out = bilinear_upsample(Tensor(np.full((1, 1, 1, 1), 2.0)))
        np.testing.assert_array_equal(out.data, np.full((1, 1, 2, 2), 2.0))

    def test_two_by_two_matches_half_pixel_oracle(self):
        out = bilinear_upsample(Tensor(np.array([[[[0.0, 1.0], [2.0, 3.0]]]])))
        s = np.array([0.0, 0.25, 0.75, 1.0])
        np.testing.assert_allclose(out.data[0, 0], 2 * s[:, None] + s[None, :], atol=1e-15)

    def test_circular_columns_wrap(self):
        x = np.zeros((1, 1, 1, 4))
        x[0, 0, 0, 3] = 1.0
        out = bilinear_upsample(Tensor(x), circular=True)
        self.assertAlmostEqual(out.data[0, 0, 0, 0], 0.25)
        self.assertEqual(bilinear_upsample(Tensor(x)).data[0, 0, 0, 0], 0.0)

    def test_gradients(self):
        x = Tensor(np.random.default_rng(20).normal(size=(1, 2, 3, 4)), requires_grad=True)
        for circular in (False, True):
            self.assertLess(grad_check(lambda: weighted_sum(bilinear_upsample(x, circular=circular),
                                                            np.random.default_rng(21)), [x]), 1e-6)


class TestCrossEntropy(unittest.TestCase):
    def test_uniform_logits_give_log_classes(self):
        loss = weighted_cross_entropy(Tensor(np.zeros((1, 4, 1, 1))), np.zeros((1, 1, 1), dtype=int), np.ones(4), 255)
        self.assertAlmostEqual(loss.item(), math.log(4.0), places=15)
        loss = weighted_cross_entropy(Tensor(np.zeros((2, 4, 3, 5))), np.ones((2, 3, 5), dtype=int), np.ones(4), 255)
        self.assertAlmostEqual(loss.item(), math.log(4.0), places=12)

    def test_shift_invariance(self):
        rng = np.random.default_rng(22)
        logits = rng.normal(size=(2, 3, 4, 4))
        targets = rng.integers(0, 3, size=(2, 4, 4))
        weights = np.array([1.0, 2.0, 0.5])
        a = weighted_cross_entropy(Tensor(logits), targets, weights, 255).item()
        b = weighted_cross_entropy(Tensor(logits + 100.0), targets, weights, 255).item()
        self.assertAlmostEqual(a, b, places=9)

    def test_ignored_pixels_do_not_count(self):
        rng = np.random.default_rng(23)
        logits = rng.normal(size=(1, 3, 2, 2))
        targets = np.array([[[0, 255], [2, 255]]])
        full = weighted_cross_entropy(Tensor(logits), targets, np.ones(3), 255).item()
        changed = logits.copy()
        changed[0, :, 0, 1] += 50.0
        self.assertEqual(full, weighted_cross_entropy(Tensor(changed), targets, np.ones(3), 255).item())

    def test_weights_scale_loss(self):
        rng = np.random.default_rng(24)
        logits = Tensor(rng.normal(size=(1, 3, 3, 3)))
        targets = rng.integers(0, 3, size=(1, 3, 3))
        a = weighted_cross_entropy(logits, targets, np.ones(3), 255).item()
        b = weighted_cross_entropy(logits, targets, np.full(3, 2.0), 255).item()
        self.assertAlmostEqual(b, 2 * a, places=12)

    def test_all_ignored(self):
        with self.assertRaises(EmptyInputError):
            weighted_cross_entropy(Tensor(np.zeros((1, 3, 2, 2))), np.full((1, 2, 2), 255), np.ones(3), 255)

    def test_out_of_range_target(self):
        with self.assertRaises(FormatError):
            weighted_cross_entropy(Tensor(np.zeros((1, 3, 1, 2))), np.array([[[0, 7]]]), np.ones(3), 255)

    def test_gradient(self):
        rng = np.random.default_rng(25)
        logits = Tensor(rng.normal(size=(2, 4, 3, 3)), requires_grad=True)
        targets = rng.integers(0, 4, size=(2, 3, 3))
        targets[0, 0, 0] = 255
        weights = np.array([0.5, 1.0, 2.0, 1.5])
        self.assertLess(grad_check(lambda: weighted_cross_entropy(logits, targets, weights, 255), [logits]), 1e-6)


if __name__ == '__main__':
    unittest.main()

import math

import numpy as np
from django.test import SimpleTestCase

from fedseg.errors import ConfigurationError, DataError, DegenerateBatchError, UsageError
from fedseg.tensor_core import (
    Tape,
    Tensor,
    add,
    backward,
    batch_norm,
    bce_loss,
    concat_channels,
    conv2d,
    max_pool2,
    mul_scalar,
    relu,
    sigmoid,
    sum_all,
    upsample_nearest2,
)

H = 1e-3
TOLERANCE = 1e-3


def gradient_error(build, inputs):
    """Largest analytic vs central-difference gradient mismatch, relative to the gradient scale."""
    tensors = [Tensor(a.copy(), requires_grad=True) for a in inputs]
    with Tape() as tape:
        loss = build(*tensors)
    grads = backward(loss, tape)

    def value(arrays):
        return build(*[Tensor(a) for a in arrays]).item()

    worst = 0.0
    for i, (t, a) in enumerate(zip(tensors, inputs)):
        analytic = grads.get(t.id, np.zeros_like(a))
        numeric = np.zeros_like(a)
        for idx in np.ndindex(a.shape):
            plus = [x.copy() for x in inputs]
            minus = [x.copy() for x in inputs]
            plus[i][idx] += H
            minus[i][idx] -= H
            numeric[idx] = (value(plus) - value(minus)) / (2 * H)
        scale = max(np.abs(analytic).max(), np.abs(numeric).max(), 1e-8)
        worst = max(worst, float(np.abs(analytic - numeric).max() / scale))
    return worst


def away_from_zero(rng, shape):
    x = rng.normal(size=shape)
    x[np.abs(x) < 0.05] = 0.5
    return x


class GradientCheckTests(SimpleTestCase):
    def setUp(self):
        self.rng = np.random.default_rng(1234)

    def assertGradients(self, build, make_inputs, instances=20):
        for _ in range(instances):
            self.assertLess(gradient_error(build, make_inputs()), TOLERANCE)

    def test_conv2d_3x3(self):
        self.assertGradients(
            lambda x, w, b: sum_all(sigmoid(conv2d(x, w, b))),
            lambda: [self.rng.normal(size=(1, 2, 4, 4)), self.rng.normal(size=(2, 2, 3, 3)) * 0.5, self.rng.normal(size=(2,))],
        )

    def test_conv2d_1x1(self):
        self.assertGradients(
            lambda x, w, b: sum_all(sigmoid(conv2d(x, w, b))),
            lambda: [self.rng.normal(size=(2, 3, 3, 3)), self.rng.normal(size=(1, 3, 1, 1)), self.rng.normal(size=(1,))],
        )

    def test_batch_norm_train(self):
        def build(x, gamma, beta):
            out, _ = batch_norm(x, gamma, beta, (np.zeros(2), np.ones(2)), mode="train")
            return sum_all(sigmoid(out))

        self.assertGradients(
            build,
            lambda: [self.rng.normal(size=(2, 2, 3, 3)), self.rng.normal(size=(2,)) + 1.0, self.rng.normal(size=(2,))],
        )

    def test_batch_norm_eval(self):
        running = (np.array([0.2, -0.1]), np.array([1.5, 0.5]))

        def build(x, gamma, beta):
            out, _ = batch_norm(x, gamma, beta, running, mode="eval")
            return sum_all(sigmoid(out))

        self.assertGradients(
            build,
            lambda: [self.rng.normal(size=(2, 2, 3, 3)), self.rng.normal(size=(2,)), self.rng.normal(size=(2,))],
        )

    def test_relu(self):
        self.assertGradients(
            lambda x: sum_all(sigmoid(relu(x))),
            lambda: [away_from_zero(self.rng, (2, 2, 3, 3))],
        )

    def test_max_pool2(self):
        def distinct():
            # values at least 0.05 apart so a perturbation never changes the argmax
            return self.rng.permutation(np.arange(32) * 0.05).reshape(1, 2, 4, 4)

        self.assertGradients(lambda x: sum_all(sigmoid(max_pool2(x))), lambda: [distinct()])

    def test_upsample_nearest2(self):
        self.assertGradients(
            lambda x: sum_all(sigmoid(upsample_nearest2(x))),
            lambda: [self.rng.normal(size=(1, 2, 2, 3))],
        )

    def test_concat_channels(self):
        self.assertGradients(
            lambda a, b: sum_all(sigmoid(concat_channels(a, mul_scalar(b, 2.0)))),
            lambda: [self.rng.normal(size=(1, 1, 2, 2)), self.rng.normal(size=(1, 2, 2, 2))],
        )

    def test_sigmoid(self):
        self.assertGradients(lambda x: sum_all(sigmoid(x)), lambda: [self.rng.normal(size=(3, 4)) * 2])

    def test_bce_loss(self):
        masks = [self.rng.integers(0, 2, size=(1, 1, 3, 3)).astype(np.float64) for _ in range(20)]
        it = iter(masks)

        def make():
            return [self.rng.normal(size=(1, 1, 3, 3))]

        for _ in range(20):
            y = next(it)
            self.assertLess(gradient_error(lambda z: bce_loss(sigmoid(z), y), make()), TOLERANCE)


class ConvolutionTests(SimpleTestCase):
    def test_identity_kernel_reproduces_input(self):
        x = np.random.default_rng(0).normal(size=(2, 1, 5, 5)).astype(np.float32)
        w = np.zeros((1, 1, 3, 3), dtype=np.float32)
        w[0, 0, 1, 1] = 1.0
        out = conv2d(Tensor(x), Tensor(w), Tensor(np.zeros(1, dtype=np.float32)))
        np.testing.assert_allclose(out.data, x, rtol=1e-6, atol=1e-6)

    def test_zero_kernel_yields_bias(self):
        x = np.random.default_rng(0).normal(size=(1, 2, 4, 4)).astype(np.float32)
        w = np.zeros((3, 2, 3, 3), dtype=np.float32)
        bias = np.array([0.5, -1.0, 2.0], dtype=np.float32)
        out = conv2d(Tensor(x), Tensor(w), Tensor(bias))
        self.assertEqual(out.shape, (1, 3, 4, 4))
        for c in range(3):
            self.assertTrue(np.all(out.data[0, c] == bias[c]))

    def test_even_kernel_rejected(self):
        with self.assertRaises(ConfigurationError):
            conv2d(Tensor(np.zeros((1, 1, 4, 4))), Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.zeros(1)))


class BatchNormTests(SimpleTestCase):
    def test_identity_running_stats_in_eval(self):
        x = np.random.default_rng(1).normal(size=(2, 3, 4, 4))
        out, stats = batch_norm(
            Tensor(x), Tensor(np.ones(3)), Tensor(np.zeros(3)), (np.zeros(3), np.ones(3)), mode="eval", eps=1e-5
        )
        np.testing.assert_allclose(out.data, x / math.sqrt(1 + 1e-5), rtol=1e-6)
        np.testing.assert_array_equal(stats[0], np.zeros(3))

    def test_zero_gamma_gives_beta(self):
        x = np.random.default_rng(2).normal(size=(4, 2, 3, 3))
        beta = np.array([0.7, -0.3])
        out, _ = batch_norm(Tensor(x), Tensor(np.zeros(2)), Tensor(beta), (np.zeros(2), np.ones(2)), mode="train")
        for c in range(2):
            np.testing.assert_allclose(out.data[:, c], beta[c])

    def test_train_mode_normalizes_and_updates_running_stats(self):
        x = np.random.default_rng(3).normal(loc=2.0, scale=3.0, size=(4, 2, 5, 5))
        out, (mean, var) = batch_norm(
            Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)), (np.zeros(2), np.ones(2)), mode="train", momentum=0.1
        )
        np.testing.assert_allclose(out.data.mean(axis=(0, 2, 3)), 0.0, atol=1e-9)
        np.testing.assert_allclose(mean, 0.1 * x.mean(axis=(0, 2, 3)))
        count = 4 * 5 * 5
        np.testing.assert_allclose(var, 0.9 + 0.1 * x.var(axis=(0, 2, 3)) * count / (count - 1))

    def test_single_element_per_channel_is_degenerate(self):
        with self.assertRaises(DegenerateBatchError):
            batch_norm(Tensor(np.ones((1, 2, 1, 1))), Tensor(np.ones(2)), Tensor(np.zeros(2)), (np.zeros(2), np.ones(2)))


class ElementwiseTests(SimpleTestCase):
    def test_relu_values(self):
        out = relu(Tensor(np.array([-2.0, 0.0, 3.0])))
        np.testing.assert_array_equal(out.data, [0.0, 0.0, 3.0])

    def test_pool_after_upsample_is_identity(self):
        x = np.random.default_rng(4).normal(size=(2, 3, 3, 5))
        np.testing.assert_array_equal(max_pool2(upsample_nearest2(Tensor(x))).data, x)

    def test_odd_pool_size_rejected(self):
        with self.assertRaises(ConfigurationError):
            max_pool2(Tensor(np.zeros((1, 1, 3, 4))))

    def test_pool_gradient_goes_to_first_maximum(self):
        x = Tensor(np.ones((1, 1, 2, 2)), requires_grad=True)
        with Tape() as tape:
            loss = sum_all(max_pool2(x))
        grads = backward(loss, tape)
        np.testing.assert_array_equal(grads[x.id], [[[[1.0, 0.0], [0.0, 0.0]]]])

    def test_concat_shape_mismatch(self):
        with self.assertRaises(ConfigurationError):
            concat_channels(Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.zeros((1, 1, 4, 4))))


class LossTests(SimpleTestCase):
    def test_half_probability_gives_ln2(self):
        loss = bce_loss(Tensor(np.full((2, 1, 4, 4), 0.5)), np.random.default_rng(5).integers(0, 2, (2, 1, 4, 4)))
        self.assertAlmostEqual(loss.item(), math.log(2), places=12)

    def test_perfect_prediction_is_near_zero(self):
        y = np.random.default_rng(6).integers(0, 2, (1, 1, 4, 4)).astype(np.float64)
        loss = bce_loss(Tensor(y), y)
        self.assertLess(loss.item(), 1e-6)
        self.assertGreaterEqual(loss.item(), 0.0)

    def test_non_binary_target_rejected(self):
        with self.assertRaises(DataError):
            bce_loss(Tensor(np.full((1, 1, 2, 2), 0.5)), np.full((1, 1, 2, 2), 0.3))

    def test_shape_mismatch_rejected(self):
        with self.assertRaises(ConfigurationError):
            bce_loss(Tensor(np.full((1, 1, 2, 2), 0.5)), np.zeros((1, 1, 2, 3)))


class BackwardTests(SimpleTestCase):
    def test_gradient_of_sum_is_ones(self):
        x = Tensor(np.random.default_rng(7).normal(size=(2, 3)), requires_grad=True)
        with Tape() as tape:
            loss = sum_all(x)
        np.testing.assert_array_equal(backward(loss, tape)[x.id], np.ones((2, 3)))

    def test_zero_scaled_loss_gives_zero_gradient(self):
        x = Tensor(np.random.default_rng(8).normal(size=(4,)), requires_grad=True)
        with Tape() as tape:
            loss = mul_scalar(sum_all(sigmoid(x)), 0.0)
        np.testing.assert_array_equal(backward(loss, tape)[x.id], np.zeros(4))

    def test_gradient_is_linear_in_the_loss(self):
        rng = np.random.default_rng(9)
        x_data = rng.normal(size=(1, 2, 4, 4))

        def grads_for(a, b):
            x = Tensor(x_data, requires_grad=True)
            with Tape() as tape:
                l1 = sum_all(sigmoid(x))
                l2 = sum_all(relu(x))
                loss = add(mul_scalar(l1, a), mul_scalar(l2, b))
            return backward(loss, tape)[x.id]

        combined = grads_for(2.0, -3.0)
        np.testing.assert_allclose(combined, 2.0 * grads_for(1.0, 0.0) - 3.0 * grads_for(0.0, 1.0), atol=1e-12)

    def test_non_scalar_root_rejected(self):
        x = Tensor(np.ones((2, 2)), requires_grad=True)
        with Tape() as tape:
            out = sigmoid(x)
        with self.assertRaises(UsageError):
            backward(out, tape)

    def test_nothing_recorded_without_tape(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with Tape() as tape:
            pass
        sigmoid(x)
        self.assertEqual(len(tape), 0)

    def test_float32_inputs_stay_float32(self):
        self.assertEqual(sigmoid(Tensor(np.ones(3, dtype=np.float32))).dtype, np.float32)

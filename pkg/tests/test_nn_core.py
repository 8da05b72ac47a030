import unittest

import numpy as np
import numpy.testing as npt

from fedaudit.enumerations import ActivationKind
from fedaudit.exceptions import InvalidSpec, ShapeMismatch
from fedaudit.hashing_merkle import bit_equal
from fedaudit.nn_core import (
    ActivationLayer, ConvLayer, ConvSpec, FcLayer, FcSpec, activation_apply, activation_grad, check_layer_stack,
    conv_backward, conv_backward_dx_element, conv_dx_rows, conv_expanded_df_element, conv_forward,
    conv_forward_element, conv_grad_f_direct, conv_output_dim, fc_backward, fc_backward_partials, fc_forward,
    fc_grad_theta_element, fc_partial_element, fc_partials, loss_eval, numerical_gradient, ordered_sum,
    receptive_field, split_size, tensor_from_json, tensor_to_json, x_group,
)


def _rel_err(a, b):
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-12))


class TestConvolution(unittest.TestCase):

    def setUp(self):
        self.rng = np.random.default_rng(7)
        self.spec = ConvSpec(n_F=3, alpha_F=3, delta=2, alpha_X=9, eta=0.1)
        self.X = self.rng.standard_normal((9, 9))
        self.filters = self.rng.standard_normal((3, 3, 3))

    #region Shapes
    def test_output_dim(self):
        self.assertEqual(conv_output_dim(ConvSpec(1, 8, 2, 256)), 125)
        self.assertEqual(conv_output_dim(ConvSpec(1, 8, 2, 16)), 5)
        self.assertEqual(conv_output_dim(ConvSpec(1, 5, 3, 5)), 1)

    def test_invalid_spec(self):
        with self.assertRaises(InvalidSpec):
            ConvSpec(1, 9, 1, 8)
        with self.assertRaises(InvalidSpec):
            ConvSpec(1, 2, 0, 8)
        with self.assertRaises(InvalidSpec):
            ConvSpec(0, 2, 1, 8)

    def test_table_setting_shape(self):
        """ 16 filters on 128x128 with stride 2 give (16, 61, 61). """
        spec = ConvSpec(16, 8, 2, 128)
        Y = conv_forward(spec, np.zeros((128, 128)), np.zeros((16, 8, 8)))
        self.assertEqual(Y.shape, (16, 61, 61))

    def test_shape_mismatch(self):
        with self.assertRaises(ShapeMismatch):
            conv_forward(self.spec, np.zeros((8, 8)), self.filters)
        with self.assertRaises(ShapeMismatch):
            conv_backward(self.spec, self.X, self.filters, np.zeros((3, 3, 3)))
    #endregion

    #region Forward
    def test_identity_filter(self):
        spec = ConvSpec(1, 1, 1, 4)
        npt.assert_array_equal(conv_forward(spec, self.X[:4, :4], np.ones((1, 1, 1)))[0], self.X[:4, :4])

    def test_small_example(self):
        spec = ConvSpec(1, 2, 1, 2)
        Y = conv_forward(spec, [[1.0, 2.0], [3.0, 4.0]], [[[1.0, 0.0], [0.0, 1.0]]])
        npt.assert_array_equal(Y, [[[5.0]]])

    def test_forward_element_bit_exact(self):
        """ Every output recomputes bit for bit from its receptive field. """
        Y = conv_forward(self.spec, self.X, self.filters)
        for t in range(3):
            for r in range(self.spec.alpha_Y):
                for c in range(self.spec.alpha_Y):
                    patch = receptive_field(self.spec, self.X, r, c)
                    self.assertTrue(bit_equal(conv_forward_element(patch, self.filters[t]), Y[t, r, c]))

    def test_forward_linear(self):
        X2 = self.rng.standard_normal((9, 9))
        lhs = conv_forward(self.spec, 2.0 * self.X + 3.0 * X2, self.filters)
        rhs = 2.0 * conv_forward(self.spec, self.X, self.filters) + 3.0 * conv_forward(self.spec, X2, self.filters)
        npt.assert_allclose(lhs, rhs, rtol=0, atol=1e-12)
    #endregion

    #region Backward
    def test_zero_grad(self):
        grads = conv_backward(self.spec, self.X, self.filters, np.zeros((3, 4, 4)))
        for part in grads:
            self.assertFalse(np.any(part))

    def test_unit_filter_reduction(self):
        """ A 1x1 filter with stride 1 reduces to elementwise products. """
        spec = ConvSpec(1, 1, 1, 4, eta=0.5)
        X = self.X[:4, :4]
        gy = self.rng.standard_normal((1, 4, 4))
        grads = conv_backward(spec, X, [[[1.5]]], gy)
        npt.assert_array_equal(grads.grad_x, gy[0] * 1.5)
        npt.assert_allclose(grads.grad_f[0, 0, 0], -0.5 * np.sum(gy[0] * X), rtol=1e-12)

    def test_reconstruction(self):
        """ Per-filter input gradients sum to the input gradient. """
        gy = self.rng.standard_normal((3, 4, 4))
        grads = conv_backward(self.spec, self.X, self.filters, gy)
        npt.assert_array_equal(grads.grad_x, ordered_sum(grads.grad_x_per_filter, axis=0))

    def test_expanded_matches_direct(self):
        gy = self.rng.standard_normal((3, 4, 4))
        grads = conv_backward(self.spec, self.X, self.filters, gy)
        npt.assert_allclose(grads.grad_f, conv_grad_f_direct(self.spec, self.X, gy), rtol=1e-9, atol=1e-12)
        self.assertEqual(grads.grad_f_expanded.shape, (3, 3, 3, 4))

    def test_dx_element_bit_exact(self):
        gy = self.rng.standard_normal((3, 4, 4))
        grads = conv_backward(self.spec, self.X, self.filters, gy)
        for t in range(3):
            for i in range(9):
                rows = {u: gy[t, u] for u in conv_dx_rows(self.spec, i)}
                for j in range(9):
                    expected = conv_backward_dx_element(self.spec, rows, self.filters[t], i, j)
                    self.assertTrue(bit_equal(expected, grads.grad_x_per_filter[t, i, j]))

    def test_df_element_bit_exact(self):
        gy = self.rng.standard_normal((3, 4, 4))
        grads = conv_backward(self.spec, self.X, self.filters, gy)
        for t in range(3):
            for i in range(3):
                for j in range(3):
                    for u in range(4):
                        group = x_group(self.spec, self.X, i, j, u)
                        value = conv_expanded_df_element(gy[t, u], group)
                        self.assertTrue(bit_equal(value, grads.grad_f_expanded[t, i, j, u]))

    def test_dx_rows(self):
        """ Rows whose receptive fields cover input row i. """
        self.assertEqual(conv_dx_rows(self.spec, 0), [0])
        self.assertEqual(conv_dx_rows(self.spec, 2), [0, 1])
        self.assertEqual(conv_dx_rows(self.spec, 8), [3])

    def test_finite_difference(self):
        """ Loss through a convolution matches central differences on an 8x8 input. """
        spec = ConvSpec(2, 3, 1, 8, eta=1.0)
        X = self.rng.standard_normal((8, 8))
        filters = self.rng.standard_normal((2, 3, 3))
        target = self.rng.standard_normal((2, 6, 6))

        def loss_of_x(x):
            return loss_eval(conv_forward(spec, x, filters).ravel(), target.ravel())[0]

        def loss_of_f(f):
            return loss_eval(conv_forward(spec, X, f).ravel(), target.ravel())[0]

        _, grad = loss_eval(conv_forward(spec, X, filters).ravel(), target.ravel())
        grads = conv_backward(spec, X, filters, grad.reshape(2, 6, 6))
        self.assertLess(_rel_err(grads.grad_x, numerical_gradient(loss_of_x, X)), 1e-5)
        self.assertLess(_rel_err(-grads.grad_f, numerical_gradient(loss_of_f, filters)), 1e-5)
    #endregion


class TestFullyConnected(unittest.TestCase):

    def setUp(self):
        self.rng = np.random.default_rng(11)
        self.spec = FcSpec(12, 6, self.rng.standard_normal((12, 6)), eta=0.1)
        self.X = self.rng.standard_normal(12)

    def test_small_example(self):
        spec = FcSpec(2, 2, [[1.0, 2.0], [3.0, 4.0]])
        npt.assert_array_equal(fc_forward(spec, [1.0, 1.0]), [4.0, 6.0])

    def test_identity(self):
        spec = FcSpec(3, 3, np.eye(3))
        npt.assert_array_equal(fc_forward(spec, [1.0, 2.0, 3.0]), [1.0, 2.0, 3.0])
        gx, _ = fc_backward(spec, np.zeros(3), [4.0, 5.0, 6.0])
        npt.assert_array_equal(gx, [4.0, 5.0, 6.0])

    def test_theta_shape(self):
        with self.assertRaises(ShapeMismatch):
            FcSpec(2, 3, np.zeros((3, 2)))
        with self.assertRaises(ShapeMismatch):
            fc_forward(self.spec, np.zeros(5))

    def test_grad_theta_entry(self):
        spec = FcSpec(1, 1, [[0.0]], eta=0.1)
        _, gt = fc_backward(spec, [3.0], [2.0])
        self.assertAlmostEqual(gt[0, 0], -0.6)
        self.assertTrue(bit_equal(fc_grad_theta_element(0.1, 2.0, 3.0), gt[0, 0]))

    def test_split_size(self):
        self.assertEqual(split_size(16), (4, 4))
        self.assertEqual(split_size(12), (3, 4))
        self.assertEqual(split_size(7), (1, 7))
        self.assertEqual(split_size(1), (1, 1))
        with self.assertRaises(InvalidSpec):
            split_size(0)

    def test_partials(self):
        """ Hierarchical sums agree with the flat product and recompute bit for bit. """
        n_X, s_X = split_size(12)
        y_prime, Y = fc_partials(self.spec, self.X)
        self.assertEqual(y_prime.shape, (6, n_X))
        npt.assert_allclose(Y, self.spec.theta.T @ self.X, rtol=1e-12)
        for i in range(6):
            for k in range(n_X):
                sub = self.X[k * s_X:(k + 1) * s_X]
                group = self.spec.theta[k * s_X:(k + 1) * s_X, i]
                self.assertTrue(bit_equal(fc_partial_element(sub, group), y_prime[i, k]))

    def test_backward_partials(self):
        gy = self.rng.standard_normal(6)
        n_Y, s_Y = split_size(6)
        gxp, gx = fc_backward_partials(self.spec, gy)
        self.assertEqual(gxp.shape, (12, n_Y))
        npt.assert_allclose(gx, self.spec.theta @ gy, rtol=1e-12)
        for j in range(12):
            for k in range(n_Y):
                value = fc_partial_element(gy[k * s_Y:(k + 1) * s_Y], self.spec.theta[j, k * s_Y:(k + 1) * s_Y])
                self.assertTrue(bit_equal(value, gxp[j, k]))

    def test_finite_difference(self):
        """ A 16 -> 8 layer under MSE matches central differences. """
        spec = FcSpec(16, 8, self.rng.standard_normal((16, 8)), eta=1.0)
        X = self.rng.standard_normal(16)
        target = self.rng.standard_normal(8)
        _, grad = loss_eval(fc_forward(spec, X), target)
        gx, gt = fc_backward(spec, X, grad)
        num_x = numerical_gradient(lambda x: loss_eval(fc_forward(spec, x), target)[0], X)
        num_t = numerical_gradient(lambda t: loss_eval(fc_forward(spec.with_theta(t), X), target)[0], spec.theta)
        self.assertLess(_rel_err(gx, num_x), 1e-5)
        self.assertLess(_rel_err(-gt, num_t), 1e-5)


class TestActivationAndLoss(unittest.TestCase):

    def test_relu(self):
        npt.assert_array_equal(activation_apply(ActivationKind.RELU, [-1.0, 0.0, 2.0]), [0.0, 0.0, 2.0])
        npt.assert_array_equal(activation_grad("relu", [-1.0, 0.0, 2.0], [5.0, 5.0, 5.0]), [0.0, 0.0, 5.0])

    def test_sigmoid(self):
        self.assertEqual(activation_apply("sigmoid", [0.0])[0], 0.5)
        x = np.array([-3.0, -0.2, 0.0, 0.7, 4.0])
        analytic = activation_grad("sigmoid", x, np.ones(5))
        numeric = np.array([(activation_apply("sigmoid", [v + 1e-6])[0] - activation_apply("sigmoid", [v - 1e-6])[0])
                            / 2e-6 for v in x])
        self.assertLess(_rel_err(analytic, numeric), 1e-6)

    def test_elementwise_bit_exact(self):
        """ Applying the activation to one element gives the same bits as the full vector. """
        x = np.random.default_rng(3).standard_normal(20)
        full = activation_apply("sigmoid", x)
        for k in range(20):
            self.assertTrue(bit_equal(activation_apply("sigmoid", x[k:k + 1])[0], full[k]))

    def test_identity(self):
        npt.assert_array_equal(activation_apply("identity", [1.5, -2.0]), [1.5, -2.0])

    def test_grad_shape(self):
        with self.assertRaises(ShapeMismatch):
            activation_grad("relu", [1.0, 2.0], [1.0])

    def test_loss(self):
        loss, grad = loss_eval([1.0, 0.0], [0.0, 0.0])
        self.assertEqual(loss, 0.5)
        npt.assert_array_equal(grad, [1.0, 0.0])
        loss, grad = loss_eval([2.0, 3.0], [2.0, 3.0])
        self.assertEqual(loss, 0.0)
        self.assertFalse(np.any(grad))
        with self.assertRaises(ShapeMismatch):
            loss_eval([1.0], [1.0, 2.0])

    def test_loss_gradient(self):
        yhat = np.array([0.3, -1.2, 2.0])
        y = np.array([0.1, 0.4, -0.5])
        _, grad = loss_eval(yhat, y)
        self.assertLess(_rel_err(grad, numerical_gradient(lambda v: loss_eval(v, y)[0], yhat)), 1e-7)


class TestLayerStack(unittest.TestCase):

    def setUp(self):
        self.conv = ConvLayer(ConvSpec(2, 2, 1, 4), np.ones((2, 2, 2)))
        self.act = ActivationLayer(ActivationKind.RELU, 18)
        self.fc = FcLayer(FcSpec(18, 3, np.zeros((18, 3))))

    def test_valid_stack(self):
        check_layer_stack([self.conv, self.act, self.fc], 16, 3)

    def test_wrong_output(self):
        with self.assertRaises(InvalidSpec):
            check_layer_stack([self.conv, self.act, self.fc], 16, 2)

    def test_chaining(self):
        with self.assertRaises(InvalidSpec):
            check_layer_stack([self.conv, self.fc], 15, 3)

    def test_conv_last(self):
        with self.assertRaises(InvalidSpec):
            check_layer_stack([self.conv], 16, 18)

    def test_conv_not_first(self):
        with self.assertRaises(InvalidSpec):
            check_layer_stack([ActivationLayer(ActivationKind.RELU, 16), self.conv, self.fc], 16, 3)

    def test_with_weights(self):
        updated = self.conv.with_weights(np.zeros((2, 2, 2)))
        self.assertFalse(np.any(updated.weights))
        self.assertIsNone(self.act.weights)

    def test_tensor_json(self):
        a = np.arange(6.0).reshape(2, 3)
        npt.assert_array_equal(tensor_from_json(tensor_to_json(a)), a)
        with self.assertRaises(ShapeMismatch):
            tensor_from_json({"shape": [2, 2], "values": [1.0]})

# This file is part of matcontext, local material recognition in global context.

import unittest

import numpy as np
from hypothesis import assume, given, settings, strategies as st
from numpy.testing import assert_allclose, assert_array_equal

from matcontext.errors import ShapeError
from matcontext.gradcheck import GradReport, check_network, check_operations, gradcheck
from matcontext.graph import Graph, backward
from matcontext.ops import (UNLABELED, ConcatChannels, Conv2d, MaskedCrossEntropy, MaxPool2, Sum, Tanh, avgpool,
                            concat_channels, conv2d, conv_output_extent, conv_transpose2d, maxpool2, softmax_channel)
from matcontext.tensor import random_tensor, tensor


def naive_conv2d(x, w, b, stride, dilation, padding):
    n, c, h, width = x.shape
    k, _, kh, kw = w.shape
    padded = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    ho = (h + 2 * padding - dilation * (kh - 1) - 1) // stride + 1
    wo = (width + 2 * padding - dilation * (kw - 1) - 1) // stride + 1
    out = np.zeros((n, k, ho, wo))
    for ni in range(n):
        for ki in range(k):
            for i in range(ho):
                for j in range(wo):
                    total = b[ki]
                    for ci in range(c):
                        for a in range(kh):
                            for bb in range(kw):
                                total += padded[ni, ci, i * stride + a * dilation, j * stride + bb * dilation] * \
                                    w[ki, ci, a, bb]
                    out[ni, ki, i, j] = total
    return out


class TestTensor(unittest.TestCase):

    def test_tensor_is_immutable(self):
        t = tensor(range(6), shape=(2, 3))
        self.assertEqual(t.shape, (2, 3))
        self.assertEqual(t.dtype, np.float64)
        with self.assertRaises(ValueError):
            t[0, 0] = 1.0

    def test_tensor_rejects_bad_shapes_and_values(self):
        with self.assertRaises(ShapeError):
            tensor(range(5), shape=(2, 3))
        with self.assertRaises(ShapeError):
            tensor(np.zeros((2, 0)))
        with self.assertRaises(ValueError):
            tensor([1.0, float('nan')])

    def test_random_tensor_is_deterministic(self):
        assert_array_equal(random_tensor((2, 3), seed=4), random_tensor((2, 3), seed=4))


class TestConv2d(unittest.TestCase):

    def test_dilated_same_extent(self):
        x = np.zeros((1, 3, 48, 48))
        w = np.zeros((4, 3, 3, 3))
        self.assertEqual(conv2d(x, w, np.zeros(4), dilation=2, padding=2).shape, (1, 4, 48, 48))

    def test_sum_of_ones(self):
        out = conv2d(np.ones((1, 1, 3, 3)), np.ones((1, 1, 3, 3)), np.zeros(1))
        self.assertEqual(out.shape, (1, 1, 1, 1))
        self.assertEqual(float(out[0, 0, 0, 0]), 9.0)

    def test_matches_direct_summation(self):
        rng = np.random.default_rng(0)
        x = rng.standard_normal((1, 2, 6, 6))
        w = rng.standard_normal((3, 2, 3, 3))
        b = rng.standard_normal(3)
        for stride, dilation, padding in ((1, 2, 0), (1, 2, 2), (2, 1, 1), (2, 2, 1)):
            assert_allclose(conv2d(x, w, b, stride, dilation, padding), naive_conv2d(x, w, b, stride, dilation, padding),
                            rtol=0, atol=1e-12)

    def test_pointwise_conv_is_a_matrix_multiply(self):
        rng = np.random.default_rng(1)
        x = rng.standard_normal((2, 3, 4, 5))
        w = rng.standard_normal((4, 3, 1, 1))
        expected = np.einsum('kc,nchw->nkhw', w[:, :, 0, 0], x)
        assert_allclose(conv2d(x, w), expected, rtol=0, atol=1e-12)

    def test_rejects_channel_mismatch(self):
        with self.assertRaisesRegex(ShapeError, 'channels'):
            conv2d(np.zeros((1, 2, 4, 4)), np.zeros((1, 3, 3, 3)))

    def test_rejects_input_smaller_than_kernel(self):
        with self.assertRaises(ShapeError):
            conv2d(np.zeros((1, 1, 4, 4)), np.zeros((1, 1, 3, 3)), dilation=2)
        with self.assertRaises(ShapeError):
            Conv2d(stride=0)

    @settings(max_examples=60, deadline=None)
    @given(st.integers(1, 10), st.integers(1, 10), st.integers(1, 4), st.integers(1, 4),
           st.integers(1, 3), st.integers(1, 3), st.integers(0, 3))
    def test_output_extent_formula(self, h, w, kh, kw, stride, dilation, padding):
        assume(h + 2 * padding >= dilation * (kh - 1) + 1)
        assume(w + 2 * padding >= dilation * (kw - 1) + 1)
        out = conv2d(np.ones((1, 2, h, w)), np.ones((3, 2, kh, kw)), None, stride, dilation, padding)
        expected_h = (h + 2 * padding - dilation * (kh - 1) - 1) // stride + 1
        expected_w = (w + 2 * padding - dilation * (kw - 1) - 1) // stride + 1
        self.assertEqual(out.shape, (1, 3, expected_h, expected_w))
        self.assertEqual(conv_output_extent(h, kh, stride, dilation, padding), expected_h)


class TestConvTranspose2d(unittest.TestCase):

    def test_doubles_extent(self):
        self.assertEqual(conv_transpose2d(np.ones((1, 4, 12, 12)), np.ones((4, 2, 2, 2)), stride=2).shape,
                         (1, 2, 24, 24))

    def test_cropped_even_kernel_doubles_extent(self):
        self.assertEqual(conv_transpose2d(np.ones((1, 2, 6, 6)), np.ones((2, 2, 4, 4)), 2, 1).shape,
                         (1, 2, 12, 12))

    def test_zero_input(self):
        w = np.random.default_rng(2).standard_normal((3, 2, 2, 2))
        assert_array_equal(conv_transpose2d(np.zeros((1, 3, 5, 5)), w, stride=2), np.zeros((1, 2, 10, 10)))

    def test_matches_dense_transposed_jacobian(self):
        rng = np.random.default_rng(3)
        w = rng.standard_normal((1, 1, 2, 2))
        columns = []
        for i in range(16):
            basis = np.zeros(16)
            basis[i] = 1.0
            columns.append(conv2d(basis.reshape(1, 1, 4, 4), w, stride=2).ravel())
        jacobian = np.stack(columns, axis=1)
        y = rng.standard_normal((1, 1, 2, 2))
        expected = (jacobian.T @ y.ravel()).reshape(1, 1, 4, 4)
        assert_allclose(conv_transpose2d(y, w, stride=2), expected, rtol=0, atol=1e-10)

    def test_rejects_channel_mismatch(self):
        with self.assertRaises(ShapeError):
            conv_transpose2d(np.zeros((1, 2, 3, 3)), np.zeros((3, 1, 2, 2)), stride=2)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(1, 4), st.integers(1, 3), st.integers(1, 4), st.integers(0, 2),
           st.integers(1, 3), st.integers(1, 3), st.integers(0, 2 ** 16))
    def test_adjoint_of_conv2d(self, out_extent, stride, kernel, padding, channels, filters, seed):
        extent = (out_extent - 1) * stride + kernel - 2 * padding
        assume(extent >= 1)
        rng = np.random.default_rng(seed)
        x = rng.standard_normal((1, channels, extent, extent))
        w = rng.standard_normal((filters, channels, kernel, kernel))
        y = rng.standard_normal((1, filters, out_extent, out_extent))
        forward = conv2d(x, w, stride=stride, padding=padding)
        self.assertEqual(forward.shape, y.shape)
        adjoint = conv_transpose2d(y, w, stride=stride, padding=padding)
        self.assertEqual(adjoint.shape, x.shape)
        self.assertAlmostEqual(float(np.sum(forward * y)), float(np.sum(x * adjoint)), delta=1e-9)


class TestPoolingAndConcat(unittest.TestCase):

    def test_maxpool_window(self):
        assert_array_equal(maxpool2(np.array([[[[1.0, 2.0], [3.0, 4.0]]]])), [[[[4.0]]]])

    def test_maxpool_constant(self):
        assert_array_equal(maxpool2(np.full((1, 2, 4, 6), 3.5)), np.full((1, 2, 2, 3), 3.5))

    def test_maxpool_matches_window_scan(self):
        x = np.random.default_rng(4).standard_normal((1, 3, 8, 8))
        expected = np.zeros((1, 3, 4, 4))
        for c in range(3):
            for i in range(4):
                for j in range(4):
                    expected[0, c, i, j] = x[0, c, 2 * i:2 * i + 2, 2 * j:2 * j + 2].max()
        assert_array_equal(maxpool2(x), expected)

    def test_maxpool_rejects_odd_extent(self):
        with self.assertRaises(ShapeError):
            maxpool2(np.zeros((1, 1, 3, 4)))

    def test_maxpool_tie_routes_to_first(self):
        op = MaxPool2()
        x = np.ones((1, 1, 2, 2))
        y, cache = op.forward(x)
        (dx,) = op.backward(np.ones_like(y), [x], y, cache)
        assert_array_equal(dx, [[[[1.0, 0.0], [0.0, 0.0]]]])

    def test_avgpool(self):
        x = np.arange(16, dtype=float).reshape(1, 1, 4, 4)
        assert_array_equal(avgpool(x, 2), [[[[2.5, 4.5], [10.5, 12.5]]]])
        with self.assertRaises(ShapeError):
            avgpool(np.zeros((1, 1, 6, 6)), 4)

    def test_concat_order(self):
        a = np.zeros((1, 2, 3, 3))
        b = np.ones((1, 3, 3, 3))
        out = concat_channels(a, b)
        self.assertEqual(out.shape, (1, 5, 3, 3))
        assert_array_equal(out[:, :2], a)
        assert_array_equal(out[:, 2:], b)

    def test_concat_rejects_empty_and_mismatched(self):
        with self.assertRaises(ShapeError):
            concat_channels(np.zeros((1, 2, 3, 3)), np.zeros((1, 0, 3, 3)))
        with self.assertRaises(ShapeError):
            concat_channels(np.zeros((1, 2, 3, 3)), np.zeros((1, 2, 4, 3)))

    def test_concat_gradient_of_sum_is_ones(self):
        g = Graph()
        a = g.parameter('a', np.zeros((1, 2, 3, 3)))
        b = g.parameter('b', np.zeros((1, 3, 3, 3)))
        loss = g.apply(Sum(), g.apply(ConcatChannels(), a, b))
        grads = backward(g, g.forward({}), loss)
        assert_array_equal(grads['a'], np.ones((1, 2, 3, 3)))
        assert_array_equal(grads['b'], np.ones((1, 3, 3, 3)))


class TestSoftmax(unittest.TestCase):

    def test_symmetric_logits(self):
        assert_allclose(softmax_channel(np.zeros((1, 2, 1, 1)))[0, :, 0, 0], [0.5, 0.5])

    def test_large_logits_do_not_overflow(self):
        out = softmax_channel(np.array([1000.0, 0.0]).reshape(1, 2, 1, 1))
        self.assertTrue(np.all(np.isfinite(out)))
        self.assertEqual(float(out[0, 0, 0, 0]), 1.0)
        self.assertLess(float(out[0, 1, 0, 0]), 1e-300)

    def test_normalized(self):
        out = softmax_channel(np.random.default_rng(5).standard_normal((2, 7, 4, 4)) * 10)
        assert_allclose(out.sum(axis=1), 1.0, rtol=0, atol=1e-9)
        self.assertTrue(np.all(out > 0.0))

    def test_rejects_single_channel(self):
        with self.assertRaises(ShapeError):
            softmax_channel(np.zeros((1, 1, 2, 2)))

    @settings(max_examples=40, deadline=None)
    @given(st.floats(-50.0, 50.0), st.integers(0, 2 ** 16))
    def test_shift_invariance(self, shift, seed):
        logits = np.random.default_rng(seed).standard_normal((1, 4, 3, 3))
        assert_allclose(softmax_channel(logits + shift), softmax_channel(logits), rtol=0, atol=1e-9)


class TestBackward(unittest.TestCase):

    def linear_graph(self):
        g = Graph()
        x = g.input('x')
        w = g.parameter('w', np.array([[[[2.0]], [[-1.0]]]]))
        loss = g.apply(Sum(), g.apply(Conv2d(), x, w), name='loss')
        return g, loss

    def test_linear_case(self):
        g, loss = self.linear_graph()
        x = np.random.default_rng(6).standard_normal((1, 2, 3, 3))
        grads = backward(g, g.forward({'x': x}), loss)
        assert_allclose(grads['w'][0, :, 0, 0], x[0].sum(axis=(1, 2)), rtol=1e-12)

    def test_constant_graph_has_zero_gradient(self):
        g = Graph()
        x = g.input('x')
        g.parameter('unused', np.ones((2, 2)))
        loss = g.apply(Sum(), x)
        grads = backward(g, g.forward({'x': np.ones((1, 1, 2, 2))}), loss)
        assert_array_equal(grads['unused'], np.zeros((2, 2)))

    def test_rejects_non_scalar_loss(self):
        g = Graph()
        p = g.parameter('p', np.ones((1, 2, 2, 2)))
        out = g.apply(Tanh(), p)
        with self.assertRaises(ShapeError):
            backward(g, g.forward({}), out)

    def test_bit_identical_runs(self):
        g, loss = self.linear_graph()
        x = np.random.default_rng(7).standard_normal((2, 2, 4, 4))
        first = backward(g, g.forward({'x': x}), loss)
        second = backward(g, g.forward({'x': x}), loss)
        assert_array_equal(first['w'], second['w'])

    def test_graph_rejects_duplicate_and_forward_references(self):
        g = Graph()
        g.parameter('p', np.ones(1))
        with self.assertRaises(ValueError):
            g.parameter('p', np.ones(1))
        with self.assertRaises(ValueError):
            g.apply(Sum(), 5)

    def test_missing_feed(self):
        g, loss = self.linear_graph()
        with self.assertRaises(KeyError):
            g.forward({})

    def test_masked_loss_ignores_unlabeled_logits(self):
        rng = np.random.default_rng(8)
        logits = rng.standard_normal((1, 3, 4, 4))
        labels = rng.integers(0, 3, size=(1, 4, 4))
        labels[0, :2] = UNLABELED
        g = Graph()
        p = g.parameter('logits', logits)
        y = g.input('labels')
        loss = g.apply(MaskedCrossEntropy(), p, y)
        run = g.forward({'labels': labels})
        grad = backward(g, run, loss)['logits']
        assert_array_equal(grad[:, :, :2], 0.0)
        mutated = logits.copy()
        mutated[:, :, :2] = rng.standard_normal((1, 3, 2, 4)) * 100
        again = g.forward({'labels': labels}, {'logits': mutated})
        self.assertEqual(float(run[loss]), float(again[loss]))
        assert_array_equal(backward(g, again, loss)['logits'], grad)


class BrokenTanh(Tanh):

    def backward(self, grad, inputs, output, cache):
        (dx,) = super().backward(grad, inputs, output, cache)
        return (dx + 0.1,)


class TestGradcheck(unittest.TestCase):

    def conv_graph(self, op=None):
        rng = np.random.default_rng(9)
        g = Graph()
        x = g.input('x')
        labels = g.input('labels')
        w = g.parameter('w', rng.standard_normal((3, 2, 3, 3)) * 0.5)
        b = g.parameter('b', rng.standard_normal(3) * 0.1)
        y = g.apply(Conv2d(1, 1, 1), x, w, b)
        if op is not None:
            y = g.apply(op, y)
        loss = g.apply(MaskedCrossEntropy(), y, labels, name='loss')
        label_values = rng.integers(0, 3, size=(1, 5, 5))
        label_values[0, 0] = UNLABELED
        feeds = {'x': rng.standard_normal((1, 2, 5, 5)), 'labels': label_values}
        return g, feeds, loss

    def test_conv_micro_graph_passes(self):
        g, feeds, loss = self.conv_graph()
        reports = gradcheck(g, feeds, loss, epsilon=1e-5, tolerance=1e-5)
        self.assertEqual([r.op_name for r in reports], ['w', 'b'])
        for report in reports:
            self.assertTrue(report.passed, str(report))

    def test_corrupted_gradient_fails(self):
        g, feeds, loss = self.conv_graph(BrokenTanh())
        reports = gradcheck(g, feeds, loss)
        self.assertFalse(all(r.passed for r in reports))

    def test_no_parameters(self):
        g = Graph()
        x = g.input('x')
        loss = g.apply(Sum(), x)
        self.assertEqual(gradcheck(g, {'x': np.ones((1, 1, 2, 2))}, loss), [])

    def test_epsilon_range(self):
        g, feeds, loss = self.conv_graph()
        with self.assertRaises(ValueError):
            gradcheck(g, feeds, loss, epsilon=0.1)
        with self.assertRaises(ValueError):
            gradcheck(g, feeds, loss, epsilon=0.0)

    def test_report_passed_flag(self):
        self.assertTrue(GradReport('w', 1e-6, 1e-5, True).passed)
        self.assertIn('FAILED', str(GradReport('w', 1e-3, 1e-5, False)))

    def test_every_operation(self):
        reports = check_operations(seed=0)
        names = {r.op_name.split('/')[0] for r in reports}
        self.assertEqual(names, {'conv2d', 'conv2d_strided', 'conv_transpose2d', 'maxpool2', 'avgpool',
                                 'concat_channels', 'softmax_channel', 'relu', 'tanh', 'masked_cross_entropy'})
        for report in reports:
            self.assertTrue(report.passed, str(report))

    def test_micro_network(self):
        reports = check_network(seed=0, tolerance=1e-4)
        self.assertTrue(reports)
        for report in reports:
            self.assertTrue(report.passed, str(report))


if __name__ == '__main__':
    unittest.main()

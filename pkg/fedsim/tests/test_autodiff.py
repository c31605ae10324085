import numpy
from django.test import SimpleTestCase

from .. import autodiff
from ..autodiff import Tensor
from ..exceptions import GraphError, NonFiniteError, ShapeError


def _leaf(array, dtype=numpy.float64):
    return Tensor(numpy.asarray(array, dtype=dtype), requires_grad=True, dtype=dtype)


# Forward value of a float64 conv -> relu -> pool -> dense -> cross-entropy network
def _small_net(params, x, y, temperature):
    h = autodiff.conv2d(Tensor(x, dtype=numpy.float64), params["conv.weight"], padding=1)
    h = autodiff.relu(autodiff.bias_add(h, params["conv.bias"]))
    h = autodiff.max_pool2d(h).flatten()
    h = autodiff.bias_add(h @ params["fc.weight"], params["fc.bias"])
    return autodiff.cross_entropy(h, y, temperature=temperature)


class OpTests(SimpleTestCase):
    def test_relu_forward_and_backward(self):
        x = _leaf([-1.0, 0.0, 2.0])
        y = autodiff.relu(x)
        numpy.testing.assert_array_equal(y.data, [0.0, 0.0, 2.0])
        y.sum().backward()
        numpy.testing.assert_array_equal(x.grad, [0.0, 0.0, 1.0])

    def test_identity_matmul(self):
        a = numpy.array([[1.0, 2.0], [3.0, 4.0]])
        out = autodiff.forward_op("matmul", Tensor(a), Tensor(numpy.eye(2)))
        numpy.testing.assert_array_equal(out.data, a)

    def test_conv_of_ones(self):
        x = Tensor(numpy.ones((1, 1, 3, 3)))
        out = autodiff.conv2d(x, Tensor(numpy.ones((1, 1, 3, 3))), padding=1)
        self.assertEqual(out.data[0, 0, 1, 1], 9.0)
        self.assertEqual(out.data[0, 0, 0, 0], 4.0)

    def test_square_sum_gradient(self):
        x = _leaf([1.0, -2.0, 3.0])
        (x * x).sum().backward()
        numpy.testing.assert_allclose(x.grad, [2.0, -4.0, 6.0])

    def test_cross_entropy_gradient_two_classes(self):
        logits = _leaf([[0.0, 0.0]])
        autodiff.cross_entropy(logits, numpy.array([1])).backward()
        numpy.testing.assert_allclose(logits.grad, [[0.5, -0.5]])

    def test_cross_entropy_soft_labels_match_hard_labels(self):
        logits = numpy.array([[1.0, -0.5, 2.0], [0.3, 0.3, -1.0]])
        hard = autodiff.cross_entropy(Tensor(logits), numpy.array([2, 0]))
        soft = autodiff.cross_entropy(Tensor(logits), numpy.eye(3)[[2, 0]])
        self.assertAlmostEqual(hard.item(), soft.item(), places=12)

    def test_max_pool_routes_gradient_to_first_maximum(self):
        x = _leaf(numpy.array([[[[1.0, 5.0], [5.0, 0.0]]]]))
        out = autodiff.max_pool2d(x)
        self.assertEqual(out.data.item(), 5.0)
        out.sum().backward()
        numpy.testing.assert_array_equal(x.grad, [[[[0.0, 1.0], [0.0, 0.0]]]])

    def test_gradients_are_linear_in_the_loss(self):
        x = _leaf([0.5, -1.5])
        (x * x).sum().backward()
        single = x.grad.copy()
        ((x * x).sum() * 3.0).backward()
        numpy.testing.assert_allclose(x.grad, 3.0 * single)

    def test_shape_mismatch_names_the_op(self):
        with self.assertRaisesRegex(ShapeError, "matmul"):
            Tensor(numpy.ones((2, 3))) @ Tensor(numpy.ones((2, 3)))
        with self.assertRaisesRegex(ShapeError, "add"):
            Tensor(numpy.ones(2)) + Tensor(numpy.ones(3))

    def test_non_finite_values_are_reported(self):
        with self.assertRaises(NonFiniteError):
            Tensor(numpy.array([numpy.inf])) * 0.0

    def test_float64_is_preserved(self):
        out = autodiff.relu(_leaf([[1.0, 2.0]]) @ _leaf([[1.0], [1.0]]))
        self.assertEqual(out.dtype, numpy.float64)
        self.assertEqual(autodiff.relu(Tensor([1, 2])).dtype, numpy.float32)


class SoftmaxTests(SimpleTestCase):
    def test_uniform_logits(self):
        numpy.testing.assert_allclose(autodiff.softmax_with_temperature(Tensor([[1.0, 1.0]]), 1.0).data, [[0.5, 0.5]])

    def test_temperature_softens(self):
        probs = autodiff.softmax_with_temperature(Tensor(numpy.array([[100.0, 0.0]])), 100.0).data
        numpy.testing.assert_allclose(probs, [[0.7311, 0.2689]], atol=1e-4)

    def test_huge_temperature_is_uniform(self):
        probs = autodiff.softmax_with_temperature(Tensor(numpy.array([[3.0, -2.0, 7.0]])), 1e9).data
        numpy.testing.assert_allclose(probs, numpy.full((1, 3), 1 / 3), atol=1e-6)

    def test_large_logits_do_not_overflow(self):
        probs = autodiff.softmax_array(numpy.array([[1000.0, 0.0]]))
        numpy.testing.assert_allclose(probs, [[1.0, 0.0]])

    def test_non_positive_temperature(self):
        with self.assertRaises(ValueError):
            autodiff.softmax_with_temperature(Tensor([[1.0, 2.0]]), 0.0)


class GraphTests(SimpleTestCase):
    def test_second_backward_fails(self):
        x = _leaf([1.0, 2.0])
        loss = (x * x).sum()
        loss.backward()
        with self.assertRaises(GraphError):
            loss.backward()

    def test_non_scalar_backward_fails(self):
        with self.assertRaises(GraphError):
            (_leaf([1.0, 2.0]) * 2.0).backward()

    def test_topological_order(self):
        x = _leaf([1.0, 2.0])
        loss = autodiff.relu(x * 2.0).sum()
        graph = autodiff.ComputeGraph.from_root(loss)
        self.assertEqual([node.kind for node in graph.nodes], ["scalar_mul", "relu", "sum"])
        self.assertEqual(graph.leaves, [x])

    def test_shared_input_accumulates(self):
        x = _leaf([2.0])
        (x + x * 3.0).sum().backward()
        numpy.testing.assert_allclose(x.grad, [4.0])

    def test_constant_inputs_get_no_gradient(self):
        x = _leaf([1.0, 2.0])
        w = Tensor(numpy.array([3.0, 4.0]))
        (x * w).sum().backward()
        self.assertIsNone(w.grad)


class FiniteDifferenceTests(SimpleTestCase):
    def test_random_small_networks(self):
        """ Relative error |analytic - numeric| / (|numeric| + 1e-8) below 1e-4 on sampled coordinates

        Central differences use h = 1e-6 in float64, small enough that no ReLU or
        max-pool switch is crossed while roundoff stays near 1e-10.
        """

        for trial in range(20):
            rng = numpy.random.default_rng(trial)
            filters, classes = int(rng.integers(1, 4)), int(rng.integers(2, 5))
            params = {
                "conv.weight": _leaf(rng.normal(0, 0.5, size=(filters, 2, 3, 3))),
                "conv.bias": _leaf(rng.normal(0, 0.1, size=filters)),
                "fc.weight": _leaf(rng.normal(0, 0.5, size=(filters * 9, classes))),
                "fc.bias": _leaf(rng.normal(0, 0.1, size=classes)),
            }
            x = rng.uniform(0, 1, size=(3, 2, 6, 6))
            y = rng.integers(0, classes, size=3)
            temperature = float(rng.choice([1.0, 2.5]))
            _small_net(params, x, y, temperature).backward()

            for name, tensor in params.items():
                for _sample in range(3):
                    index = tuple(int(rng.integers(0, d)) for d in tensor.shape)
                    original = tensor.data[index]
                    h = 1e-6
                    tensor.data[index] = original + h
                    plus = _small_net(params, x, y, temperature).item()
                    tensor.data[index] = original - h
                    minus = _small_net(params, x, y, temperature).item()
                    tensor.data[index] = original
                    numeric = (plus - minus) / (2 * h)
                    analytic = tensor.grad[index]
                    self.assertLess(abs(analytic - numeric) / (abs(numeric) + 1e-8), 1e-4, f"trial {trial}, {name}{index}")

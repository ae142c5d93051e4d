"""
Tests for the tensor value/gradient engine.
"""

import numpy as np
import pytest

from maskcls import engine as E
from maskcls.errors import DomainError, GraphError, ShapeError


def _leaf(values):
    return E.Tensor(np.asarray(values, dtype=float), requires_grad=True)


@pytest.mark.unit
class TestForwardValues:
    """Forward results of individual primitives."""

    def test_add_broadcasts_row(self):
        out = E.add(np.ones((2, 3)), np.arange(3.0))
        np.testing.assert_array_equal(out.data, [[1, 2, 3], [1, 2, 3]])

    def test_div_by_zero_raises(self):
        with pytest.raises(DomainError):
            E.div(np.ones(3), np.array([1.0, 0.0, 2.0]))

    def test_log_of_nonpositive_raises(self):
        with pytest.raises(DomainError):
            E.log(np.array([1.0, 0.0]))

    def test_log_of_empty_raises(self):
        with pytest.raises(DomainError):
            E.log(np.zeros((0,)))

    def test_softmax_rows_sum_to_one(self, rng):
        out = E.softmax(rng.standard_normal((4, 5)) * 50.0, axis=-1)
        np.testing.assert_allclose(out.data.sum(axis=-1), np.ones(4))

    def test_softmax_over_empty_axis_raises(self):
        with pytest.raises(DomainError):
            E.softmax(np.zeros((3, 0)), axis=-1)

    def test_log_softmax_matches_log_of_softmax(self, rng):
        x = rng.standard_normal((3, 4))
        np.testing.assert_allclose(E.log_softmax(x, axis=0).data,
                                   np.log(E.softmax(x, axis=0).data))

    def test_sigmoid_is_stable_for_large_inputs(self):
        out = E.sigmoid(np.array([-800.0, 0.0, 800.0]))
        np.testing.assert_allclose(out.data, [0.0, 0.5, 1.0])

    def test_layer_norm_normalizes_axis(self, rng):
        out = E.layer_norm(rng.standard_normal((3, 16)) * 4 + 2, axis=-1)
        np.testing.assert_allclose(out.data.mean(axis=-1), 0.0, atol=1e-12)
        np.testing.assert_allclose(out.data.var(axis=-1), 1.0, rtol=1e-4)

    def test_clamp_limits_range(self):
        out = E.clamp(np.array([-2.0, 0.5, 3.0]), 0.0, 1.0)
        np.testing.assert_array_equal(out.data, [0.0, 0.5, 1.0])

    def test_matmul_rejects_mismatched_inner_dims(self):
        with pytest.raises(ShapeError):
            E.matmul(np.ones((2, 3)), np.ones((2, 3)))

    def test_conv2d_identity_kernel(self, rng):
        x = rng.standard_normal((1, 2, 4, 4))
        kernel = np.zeros((2, 2, 3, 3))
        kernel[0, 0, 1, 1] = kernel[1, 1, 1, 1] = 1.0
        np.testing.assert_allclose(E.conv2d_3x3(x, kernel).data, x)

    def test_conv2d_stride_two_halves_resolution(self, rng):
        out = E.conv2d_3x3(rng.standard_normal((1, 2, 8, 6)), rng.standard_normal((5, 2, 3, 3)),
                           stride=2)
        assert out.shape == (1, 5, 4, 3)

    def test_conv2d_zero_padding_at_border(self):
        x = np.ones((1, 1, 3, 3))
        out = E.conv2d_3x3(x, np.ones((1, 1, 3, 3)))
        assert out.data[0, 0, 0, 0] == 4.0
        assert out.data[0, 0, 1, 1] == 9.0

    def test_conv2d_1x1_is_channel_mix(self, rng):
        x = rng.standard_normal((1, 3, 2, 2))
        w = rng.standard_normal((4, 3, 1, 1))
        expected = np.einsum("oc,nchw->nohw", w[:, :, 0, 0], x)
        np.testing.assert_allclose(E.conv2d_1x1(x, w).data, expected)

    def test_upsample_then_pool_is_identity(self, rng):
        x = rng.standard_normal((1, 2, 3, 5))
        np.testing.assert_allclose(E.avg_pool_2x2(E.upsample_nearest_2x(x)).data, x)

    def test_avg_pool_rejects_odd_sizes(self):
        with pytest.raises(ShapeError):
            E.avg_pool_2x2(np.ones((1, 1, 3, 4)))

    def test_take_gathers_along_axis(self):
        out = E.take(np.arange(12.0).reshape(3, 4), [3, 0], axis=1)
        np.testing.assert_array_equal(out.data, [[3, 0], [7, 4], [11, 8]])

    def test_non_finite_output_raises(self):
        with pytest.raises(DomainError):
            E.exp(np.array([1000.0]))

    def test_primitive_dispatch_by_name(self):
        out = E.primitive("scale_by_constant", np.ones(3), 2.5)
        np.testing.assert_array_equal(out.data, [2.5, 2.5, 2.5])

    def test_unknown_primitive_raises(self):
        with pytest.raises(ValueError, match="Unknown primitive"):
            E.primitive("fft", np.ones(3))


@pytest.mark.unit
class TestBackward:
    """Reverse-mode sweep behaviour."""

    def test_gradient_of_shared_subexpression_accumulates(self):
        x = _leaf([2.0, 3.0])
        with E.graph_scope():
            y = E.mul(x, x)
            loss = E.sum(E.add(y, x))
            grads = E.backward(loss, accumulate=False)
        np.testing.assert_allclose(grads[x], [5.0, 7.0])

    def test_accumulate_adds_into_leaf_grad(self):
        x = _leaf([1.0, 2.0])
        for _ in range(2):
            with E.graph_scope():
                E.backward(E.sum(E.scale(x, 3.0)))
        np.testing.assert_allclose(x.grad, [6.0, 6.0])

    def test_broadcast_gradient_is_summed_back(self):
        bias = _leaf([0.0, 0.0, 0.0])
        with E.graph_scope():
            loss = E.sum(E.add(np.ones((4, 3)), bias))
            grads = E.backward(loss, accumulate=False)
        np.testing.assert_allclose(grads[bias], [4.0, 4.0, 4.0])

    def test_non_scalar_loss_raises(self):
        x = _leaf([1.0, 2.0])
        with E.graph_scope():
            with pytest.raises(GraphError):
                E.backward(E.scale(x, 2.0))

    def test_no_grad_records_nothing(self):
        x = _leaf([1.0])
        with E.no_grad():
            y = E.scale(x, 2.0)
        assert not y.requires_grad
        assert E.is_grad_enabled()

    def test_constant_loss_cannot_backpropagate(self):
        with pytest.raises(GraphError):
            E.backward(E.sum(E.Tensor(np.ones(3))))

    def test_separately_built_graphs_merge(self):
        a, b = _leaf([1.0]), _leaf([2.0])
        left = E.scale(a, 3.0)
        right = E.scale(b, 5.0)
        grads = E.backward(E.sum(E.mul(left, right)), accumulate=False)
        np.testing.assert_allclose(grads[a], [30.0])
        np.testing.assert_allclose(grads[b], [15.0])

    def test_relu_gradient_masks_inactive(self):
        x = _leaf([-1.0, 2.0])
        with E.graph_scope():
            grads = E.backward(E.sum(E.relu(x)), accumulate=False)
        np.testing.assert_array_equal(grads[x], [0.0, 1.0])

    def test_clamp_gradient_is_zero_outside(self):
        x = _leaf([-1.0, 0.5, 2.0])
        with E.graph_scope():
            grads = E.backward(E.sum(E.clamp(x, 0.0, 1.0)), accumulate=False)
        np.testing.assert_array_equal(grads[x], [0.0, 1.0, 0.0])


@pytest.mark.unit
class TestGradCheck:
    """Finite-difference agreement of analytic gradients."""

    @pytest.mark.parametrize("name,fn,shape", [
        ("softmax", lambda x: E.softmax(x, axis=-1), (3, 4)),
        ("log_softmax", lambda x: E.log_softmax(x, axis=0), (3, 4)),
        ("layer_norm", lambda x: E.layer_norm(x, axis=-1), (2, 6)),
        ("sigmoid", E.sigmoid, (5,)),
        ("upsample", E.upsample_nearest_2x, (1, 1, 2, 3)),
        ("avg_pool", E.avg_pool_2x2, (1, 2, 4, 4)),
        ("transpose", lambda x: E.transpose(x, (2, 0, 1)), (2, 3, 4)),
        ("take_repeated", lambda x: E.take(x, [1, 1, 0], axis=0), (3, 2)),
    ])
    def test_primitive_gradients(self, rng, name, fn, shape):
        weights = rng.uniform(0.5, 1.5, size=fn(np.zeros(shape)).shape)
        err = E.grad_check(lambda x: E.sum(E.mul(fn(x), weights)), rng.standard_normal(shape))
        assert err < 1e-6, name

    def test_conv_gradients_for_input_and_kernel(self, rng):
        x0 = rng.standard_normal((1, 2, 5, 4))
        w0 = rng.standard_normal((3, 2, 3, 3))
        for stride in (1, 2):
            assert E.grad_check(lambda x: E.sum(E.conv2d_3x3(x, w0, stride=stride)), x0) < 1e-6
            assert E.grad_check(lambda w: E.sum(E.conv2d_3x3(x0, w, stride=stride)), w0) < 1e-6

    def test_matmul_gradient(self, rng):
        right = rng.standard_normal((2, 4, 3))
        err = E.grad_check(lambda x: E.sum(E.pow_scalar(E.matmul(x, right), 2.0)),
                           rng.standard_normal((2, 5, 4)))
        assert err < 1e-6

    def test_grad_check_detects_wrong_gradient(self, rng):
        def broken(x):
            out = E.exp(x)
            if out._node is not None:
                out._node.backward_fn = lambda g: (2.0 * g * out.data,)
            return E.sum(out)

        assert E.grad_check(broken, rng.standard_normal(3)) > 0.1

    def test_grad_check_rejects_non_positive_step(self):
        with pytest.raises(DomainError):
            E.grad_check(lambda x: E.sum(x), np.ones(2), h=0.0)

    def test_grad_check_params_restores_values(self, rng):
        params = {"w": _leaf(rng.standard_normal((3, 2)))}
        before = params["w"].data.copy()
        errors = E.grad_check_params(lambda: E.sum(E.pow_scalar(params["w"], 2.0)), params)
        assert errors["w"] < 1e-6
        np.testing.assert_array_equal(params["w"].data, before)

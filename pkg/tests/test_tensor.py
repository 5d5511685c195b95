"""
Tests for the tensor engine and central gradient checking
"""

import numpy as np
import pytest

from core.exceptions import (
    ContractError,
    ConvConfigError,
    DegenerateStatisticsError,
    DimensionError,
    NumericError,
)
from core.gradcheck import check_gradients, numerical_gradient, relative_error
from core.tensor import (
    BACKWARD_RULES,
    BatchNormState,
    Tape,
    Tensor,
    add,
    avg_pool2d,
    backward,
    batch_norm,
    concat,
    conv2d,
    global_avg_pool,
    matmul,
    mean,
    mul,
    reshape,
    select,
    sigmoid,
    softmax_rows,
    stack,
    sum_,
    tanh,
    transpose,
)


def leaf(rng, *shape, name=None, low=-1.0, high=1.0):
    return Tensor(rng.uniform(low, high, shape), requires_grad=True, dtype=np.float64, name=name)


def projected_sum(out: Tensor, projection: np.ndarray) -> Tensor:
    return sum_(mul(out, Tensor(projection, dtype=np.float64)))


def assert_gradients(fn, tensors, tolerance=1e-4):
    reports = check_gradients(fn, {t.name or f"t{i}": [t] for i, t in enumerate(tensors)}, tolerance=tolerance)
    for report in reports:
        assert report.passed, report.describe()


class TestTensor:
    def test_integer_data_defaults_to_float32(self):
        t = Tensor([[1, 2], [3, 4]])
        assert t.dtype == np.float32
        assert t.shape == (2, 2)

    def test_data_is_read_only(self):
        t = Tensor([1.0, 2.0])
        with pytest.raises(ValueError):
            t.data[0] = 5.0

    def test_rank_above_four_rejected(self):
        with pytest.raises(DimensionError):
            Tensor(np.zeros((1, 1, 1, 1, 1)))

    def test_zero_extent_rejected(self):
        with pytest.raises(DimensionError):
            Tensor(np.zeros((2, 0)))

    def test_non_finite_construction_rejected(self):
        with pytest.raises(NumericError):
            Tensor([1.0, np.inf])

    def test_item_needs_single_element(self):
        assert Tensor([[3.5]]).item() == 3.5
        with pytest.raises(ContractError):
            Tensor([1.0, 2.0]).item()

    def test_assign_checks_shape(self):
        t = Tensor([1.0, 2.0])
        t.assign([3.0, 4.0])
        np.testing.assert_array_equal(t.data, [3.0, 4.0])
        with pytest.raises(DimensionError):
            t.assign([1.0, 2.0, 3.0])

    def test_operator_overloads(self):
        a = Tensor([1.0, 2.0])
        b = Tensor([3.0, 5.0])
        np.testing.assert_allclose((a + b).data, [4.0, 7.0])
        np.testing.assert_allclose((b - a).data, [2.0, 3.0])
        np.testing.assert_allclose((a * 2).data, [2.0, 4.0])
        np.testing.assert_allclose((-a).data, [-1.0, -2.0])


class TestTape:
    def test_ops_outside_tape_are_not_tracked(self):
        a = Tensor([1.0, 2.0], requires_grad=True)
        out = mul(a, a)
        assert not out.requires_grad
        with pytest.raises(ContractError):
            backward(sum_(out))

    def test_backward_needs_scalar(self):
        a = Tensor([1.0, 2.0], requires_grad=True)
        with Tape():
            out = mul(a, 3.0)
        with pytest.raises(ContractError):
            backward(out)

    def test_broadcast_gradient_is_reduced(self):
        a = Tensor(np.ones((2, 3)), requires_grad=True)
        b = Tensor(np.ones(3), requires_grad=True)
        with Tape():
            loss = sum_(add(a, b))
        backward(loss)
        np.testing.assert_allclose(a.grad, np.ones((2, 3)))
        np.testing.assert_allclose(b.grad, [2.0, 2.0, 2.0])

    def test_reused_tensor_accumulates(self):
        a = Tensor([3.0], requires_grad=True, dtype=np.float64)
        with Tape():
            loss = sum_(add(mul(a, a), a))
        backward(loss)
        np.testing.assert_allclose(a.grad, [7.0])

    def test_gradients_accumulate_across_passes(self):
        a = Tensor([1.0, 1.0], requires_grad=True)
        for _ in range(2):
            with Tape():
                loss = sum_(mul(a, 2.0))
            backward(loss)
        np.testing.assert_allclose(a.grad, [4.0, 4.0])

    def test_non_finite_result_raises(self):
        big = Tensor([1e38], dtype=np.float32)
        with pytest.raises(NumericError, match="mul produced non-finite values"):
            mul(big, big)


class TestOps:
    def test_softmax_rows_known_values(self):
        out = softmax_rows(Tensor([[1.0, 2.0, 3.0]]))
        np.testing.assert_allclose(out.data[0], [0.09003, 0.24473, 0.66524], atol=1e-5)

    def test_softmax_rows_is_shift_stable(self):
        out = softmax_rows(Tensor([[1000.0, 1000.0], [-1000.0, 0.0]], dtype=np.float64))
        np.testing.assert_allclose(out.data.sum(axis=1), [1.0, 1.0])
        np.testing.assert_allclose(out.data[0], [0.5, 0.5])

    def test_conv_all_ones(self):
        out = conv2d(Tensor(np.ones((1, 3, 3))), Tensor(np.ones((1, 1, 3, 3))))
        np.testing.assert_allclose(out.data[0], [[4, 6, 4], [6, 9, 6], [4, 6, 4]])

    def test_conv_one_by_one_mixes_channels(self):
        x = np.arange(8, dtype=np.float64).reshape(2, 2, 2)
        kernel = np.array([1.0, -1.0]).reshape(1, 2, 1, 1)
        out = conv2d(Tensor(x), Tensor(kernel), padding=0)
        np.testing.assert_allclose(out.data[0], x[0] - x[1])

    def test_conv_rejects_unsupported_configuration(self):
        with pytest.raises(ConvConfigError):
            conv2d(Tensor(np.ones((1, 5, 5))), Tensor(np.ones((1, 1, 5, 5))))

    def test_conv_rejects_channel_mismatch(self):
        with pytest.raises(DimensionError):
            conv2d(Tensor(np.ones((2, 3, 3))), Tensor(np.ones((1, 1, 3, 3))))

    def test_conv_matches_torch(self, rng):
        torch = pytest.importorskip("torch")
        x = rng.standard_normal((2, 3, 5, 5))
        k = rng.standard_normal((4, 3, 3, 3))
        expected = torch.nn.functional.conv2d(torch.tensor(x), torch.tensor(k), padding=1).numpy()
        np.testing.assert_allclose(conv2d(Tensor(x), Tensor(k)).data, expected, atol=1e-10)

    def test_matmul_shape_mismatch(self):
        with pytest.raises(DimensionError):
            matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))

    def test_global_avg_pool_gradient_is_uniform(self):
        x = Tensor(np.ones((2, 3, 4)), requires_grad=True)
        with Tape():
            loss = global_avg_pool(x)
        backward(loss)
        np.testing.assert_allclose(x.grad, np.full((2, 3, 4), 1 / 24))

    def test_avg_pool_needs_even_extents(self):
        with pytest.raises(DimensionError):
            avg_pool2d(Tensor(np.ones((1, 3, 3))))

    def test_batch_norm_degenerate_batch(self):
        state = BatchNormState(1)
        with pytest.raises(DegenerateStatisticsError):
            batch_norm(Tensor(np.ones((1, 1, 1, 1))), Tensor([1.0]), Tensor([0.0]), state, training=True)

    def test_batch_norm_training_moments(self, rng):
        x = Tensor(3.0 * rng.standard_normal((4, 2, 5, 5)) + 2.0, dtype=np.float64)
        gamma, beta = Tensor(np.ones(2), dtype=np.float64), Tensor(np.zeros(2), dtype=np.float64)
        out = batch_norm(x, gamma, beta, BatchNormState(2, dtype=np.float64), training=True).data
        np.testing.assert_allclose(out.mean(axis=(0, 2, 3)), 0.0, atol=1e-10)
        np.testing.assert_allclose(out.var(axis=(0, 2, 3)), 1.0, rtol=1e-5)

    def test_batch_norm_affine_terms(self, rng):
        x = Tensor(3.0 * rng.standard_normal((4, 2, 5, 5)) + 2.0, dtype=np.float64)
        gamma, beta = Tensor(np.full(2, 2.0), dtype=np.float64), Tensor(np.ones(2), dtype=np.float64)
        out = batch_norm(x, gamma, beta, BatchNormState(2, dtype=np.float64), training=True).data
        np.testing.assert_allclose(out.mean(axis=(0, 2, 3)), 1.0, atol=1e-10)
        np.testing.assert_allclose(out.std(axis=(0, 2, 3)), 2.0, rtol=1e-5)

    def test_batch_norm_running_statistics_use_unbiased_variance(self):
        state = BatchNormState(1, dtype=np.float64)
        x = Tensor(np.array([1.0, 3.0]).reshape(2, 1, 1, 1))
        batch_norm(x, Tensor([1.0]), Tensor([0.0]), state, training=True)
        assert state.running_mean[0] == pytest.approx(0.2)
        assert state.running_var[0] == pytest.approx(1.1)

    def test_batch_norm_eval_uses_running_statistics(self):
        state = BatchNormState(1, dtype=np.float64)
        state.running_mean[:] = 2.0
        state.running_var[:] = 4.0
        x = Tensor(np.full((1, 1, 1, 2), 4.0))
        out = batch_norm(x, Tensor([1.0]), Tensor([0.0]), state, training=False)
        np.testing.assert_allclose(out.data, 1.0, atol=1e-5)

    def test_batch_norm_matches_torch(self, rng):
        torch = pytest.importorskip("torch")
        x = rng.standard_normal((3, 2, 4, 4))
        gamma, beta = rng.standard_normal(2), rng.standard_normal(2)
        state = BatchNormState(2, dtype=np.float64)
        out = batch_norm(Tensor(x), Tensor(gamma), Tensor(beta), state, training=True)

        running_mean, running_var = torch.zeros(2, dtype=torch.float64), torch.ones(2, dtype=torch.float64)
        expected = torch.nn.functional.batch_norm(
            torch.tensor(x), running_mean, running_var, torch.tensor(gamma), torch.tensor(beta),
            training=True, momentum=0.1, eps=1e-5,
        )
        np.testing.assert_allclose(out.data, expected.numpy(), atol=1e-10)
        np.testing.assert_allclose(state.running_mean, running_mean.numpy(), atol=1e-12)
        np.testing.assert_allclose(state.running_var, running_var.numpy(), atol=1e-12)


class TestFiniteDifferences:
    def test_relative_error_floor(self):
        assert relative_error(np.array([0.0]), np.array([0.0]))[0] == 0.0
        assert relative_error(np.array([1.0]), np.array([3.0]))[0] == pytest.approx(0.5)

    def test_numerical_gradient_restores_values(self, rng):
        x = leaf(rng, 3, name="x")
        before = x.data.copy()
        grad = numerical_gradient(lambda: sum_(mul(x, x)), x)
        np.testing.assert_allclose(grad, 2 * before, rtol=1e-6)
        np.testing.assert_array_equal(x.data, before)

    def test_matmul(self, rng):
        a, b = leaf(rng, 4, 5, name="a"), leaf(rng, 5, 3, name="b")
        projection = rng.standard_normal((4, 3))
        assert_gradients(lambda: projected_sum(matmul(a, b), projection), [a, b], tolerance=1e-6)

    def test_conv3x3(self, rng):
        x, k = leaf(rng, 2, 3, 4, 4, name="x"), leaf(rng, 2, 3, 3, 3, name="k")
        projection = rng.standard_normal((2, 2, 4, 4))
        assert_gradients(lambda: projected_sum(conv2d(x, k), projection), [x, k], tolerance=1e-6)

    def test_conv1x1_unbatched(self, rng):
        x, k = leaf(rng, 3, 2, 2, name="x"), leaf(rng, 2, 3, 1, 1, name="k")
        projection = rng.standard_normal((2, 2, 2))
        assert_gradients(lambda: projected_sum(conv2d(x, k, padding=0), projection), [x, k], tolerance=1e-6)

    def test_softmax_and_nonlinearities(self, rng):
        m = leaf(rng, 3, 4, name="m")
        projection = rng.standard_normal((3, 4))
        assert_gradients(lambda: projected_sum(softmax_rows(tanh(sigmoid(m))), projection), [m])

    def test_layout_ops(self, rng):
        a, b = leaf(rng, 2, 3, name="a"), leaf(rng, 2, 3, name="b")
        projection = rng.standard_normal((3, 3))

        def loss():
            joined = concat([stack([a, b], axis=0), reshape(a, (1, 2, 3))], axis=0)
            picked = select(joined, 1, axis=1)
            return projected_sum(transpose(picked), projection)

        assert_gradients(loss, [a, b])

    def test_reductions_and_pooling(self, rng):
        x = leaf(rng, 2, 2, 4, 4, name="x")
        projection = rng.standard_normal((2, 2))

        def loss():
            pooled = avg_pool2d(x)
            return add(projected_sum(mean(pooled, axis=(2, 3)), projection), global_avg_pool(x).sum())

        assert_gradients(loss, [x])

    def test_batch_norm_training(self, rng):
        x = leaf(rng, 3, 2, 2, 2, name="x")
        gamma, beta = leaf(rng, 2, name="gamma"), leaf(rng, 2, name="beta")
        state = BatchNormState(2, dtype=np.float64)
        projection = rng.standard_normal((3, 2, 2, 2))
        assert_gradients(lambda: projected_sum(batch_norm(x, gamma, beta, state, True), projection), [x, gamma, beta])

    def test_broken_rule_is_reported_by_group(self, rng, monkeypatch):
        monkeypatch.setitem(BACKWARD_RULES, "tanh", lambda node, grad: (grad,))
        x = leaf(rng, 4, name="x")
        w = leaf(rng, 4, name="w")
        reports = check_gradients(
            lambda: sum_(add(tanh(mul(x, 3.0)), mul(w, w))),
            {"activation_input": [x], "weights": [w]},
        )
        by_group = {r.group: r for r in reports}
        assert not by_group["activation_input"].passed
        assert by_group["weights"].passed
        assert by_group["activation_input"].describe().startswith("FAIL activation_input")

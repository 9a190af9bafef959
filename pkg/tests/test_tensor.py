import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from mmfusion import tensor as T
from mmfusion.errors import ContractError, NumericError
from mmfusion.gradcheck import _op_cases, check_gradients
from mmfusion.tensor import Tensor


def leaf(x):
    return Tensor(np.array(x, dtype=np.float64), requires_grad=True)


class TestBackwardBasics:
    def test_sum_gradient_is_ones(self):
        x = leaf([1.0, -2.0, 3.0])
        T.backward(x.sum())
        np.testing.assert_array_equal(x.grad, [1.0, 1.0, 1.0])

    def test_sigmoid_slope_at_zero(self):
        x = leaf(0.0)
        T.backward(T.sigmoid(x))
        assert x.grad == 0.25

    def test_returns_leaf_map(self):
        a, b = leaf([1.0, 2.0]), leaf([3.0, 4.0])
        grads = T.backward((a * b).sum())
        np.testing.assert_array_equal(grads[a], [3.0, 4.0])
        np.testing.assert_array_equal(grads[b], [1.0, 2.0])

    def test_unreachable_leaf_has_zero_grad(self):
        a, b = leaf([1.0, 2.0]), leaf([5.0])
        T.backward(a.sum())
        np.testing.assert_array_equal(b.grad, [0.0])

    def test_accumulates_twice(self):
        rng = np.random.default_rng(0)
        x = leaf(rng.standard_normal((3, 4)))
        w = leaf(rng.standard_normal((4, 2)))
        T.backward(T.tanh(x @ w).sum())
        once = x.grad.copy()
        T.backward(T.tanh(x @ w).sum())
        np.testing.assert_allclose(x.grad, 2 * once, rtol=0, atol=1e-15)

    def test_zero_grad(self):
        x = leaf([1.0, 2.0])
        T.backward((x * x).sum())
        x.zero_grad()
        np.testing.assert_array_equal(x.grad, [0.0, 0.0])

    def test_shared_subexpression(self):
        x = leaf(3.0)
        y = x * x
        T.backward(y + y)
        assert x.grad == 12.0

    def test_non_scalar_loss_rejected(self):
        x = leaf([1.0, 2.0])
        with pytest.raises(ContractError):
            T.backward(x * 2.0)

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_nan_names_op(self):
        x = leaf([0.0, 1.0])
        loss = T.log(x).sum()
        with pytest.raises(NumericError) as info:
            T.backward(loss)
        assert info.value.op == "log"

    def test_ndarray_on_left_dispatches_to_tensor(self):
        x = leaf([1.0, 2.0])
        y = np.array([3.0, 4.0]) * x
        assert isinstance(y, Tensor)
        T.backward(y.sum())
        np.testing.assert_array_equal(x.grad, [3.0, 4.0])


class TestOpGradients:
    @pytest.mark.parametrize("name", sorted(_op_cases(np.random.default_rng(0))))
    def test_matches_finite_differences(self, name):
        fn, leaves = _op_cases(np.random.default_rng(0))[name]
        assert check_gradients(fn, leaves) < 1e-4

    @settings(max_examples=25, deadline=None)
    @given(arrays(np.float64, (2, 3), elements=st.floats(-2, 2)))
    def test_tanh_sigmoid_chain_random(self, x0):
        x = leaf(x0)
        w = np.linspace(-1, 1, 6).reshape(2, 3)
        err = check_gradients(lambda: (T.sigmoid(T.tanh(x) * 2.0) * w).sum(), [x])
        assert err < 1e-4

    @settings(max_examples=25, deadline=None)
    @given(arrays(np.float64, (2, 5), elements=st.floats(-2, 2)))
    def test_softmax_random(self, x0):
        x = leaf(x0)
        w = np.arange(10.0).reshape(2, 5)
        assert check_gradients(lambda: (T.softmax(x) * w).sum(), [x]) < 1e-4


class TestForwardValues:
    @settings(max_examples=50, deadline=None)
    @given(arrays(np.float64, (3, 6), elements=st.floats(-50, 50)))
    def test_softmax_rows_sum_to_one(self, x):
        p = T.softmax(Tensor(x)).value
        assert np.all(p >= 0)
        np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-9)

    def test_sigmoid_extremes_are_finite(self):
        y = T.sigmoid(Tensor(np.array([-800.0, 0.0, 800.0]))).value
        np.testing.assert_array_equal(y, [0.0, 0.5, 1.0])

    def test_logsumexp_with_masked_entries(self):
        x = Tensor(np.array([[0.0, -np.inf, np.log(3.0)]]))
        np.testing.assert_allclose(T.logsumexp(x).value, [np.log(4.0)], rtol=1e-15)

    def test_logsumexp_all_masked_rejected(self):
        with pytest.raises(NumericError):
            T.logsumexp(Tensor(np.array([[-np.inf, -np.inf]])))

    def test_layer_norm_moments(self):
        x = Tensor(np.random.default_rng(1).standard_normal((4, 8)) * 3 + 1)
        y = T.layer_norm(x, Tensor(np.ones(8)), Tensor(np.zeros(8)), eps=0.0).value
        np.testing.assert_allclose(y.mean(axis=1), 0.0, atol=1e-12)
        np.testing.assert_allclose(y.std(axis=1), 1.0, atol=1e-12)

    def test_matmul_shape_mismatch(self):
        with pytest.raises(ContractError):
            T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))))

    def test_grad_setter_checks_shape(self):
        x = leaf([1.0, 2.0])
        with pytest.raises(ContractError):
            x.grad = np.ones(3)

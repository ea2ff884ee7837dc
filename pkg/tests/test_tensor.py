import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from ssmtrack import tensor as T
from ssmtrack.errors import AxisOutOfRange, NonScalarLoss, ShapeMismatch
from ssmtrack.tensor import Tape, Tensor, grad_check

finite = st.floats(-3, 3, allow_nan=False, allow_infinity=False)


def backprop(f, *xs):
    xs = [Tensor(x, True) for x in xs]
    with Tape() as tape:
        y = f(*xs)
    tape.backward(y)
    return y, [x.grad for x in xs]


class TestForward:
    @given(arrays(float, (3, 4), elements=finite), arrays(float, (3, 4), elements=finite))
    def test_elementwise_match_numpy(self, a, b):
        ta, tb = Tensor(a), Tensor(b)
        np.testing.assert_allclose((ta + tb).data, a + b)
        np.testing.assert_allclose((ta * tb).data, a * b)
        np.testing.assert_allclose((ta - tb).data, a - b)
        np.testing.assert_allclose(T.exp(ta).data, np.exp(a))
        np.testing.assert_allclose(T.tanh(ta).data, np.tanh(a))

    def test_softplus_is_overflow_safe(self):
        x = Tensor(np.array([-1000.0, 0.0, 1000.0]))
        np.testing.assert_allclose(T.softplus(x).data, [0.0, np.log(2.0), 1000.0])

    def test_softmax_rows_sum_to_one(self, rng):
        s = T.softmax(Tensor(rng.normal(size=(5, 7)) * 30), axis=-1).data
        np.testing.assert_allclose(s.sum(-1), 1.0, atol=1e-12)

    def test_matmul_batched(self, rng):
        a, b = rng.normal(size=(2, 3, 4)), rng.normal(size=(4, 5))
        np.testing.assert_allclose((Tensor(a) @ Tensor(b)).data, a @ b)

    def test_suffix_broadcast_only(self):
        with pytest.raises(ShapeMismatch):
            Tensor(np.ones((3, 4))) + Tensor(np.ones((3, 1)))

    def test_expand_is_explicit(self):
        e = T.expand(Tensor(np.ones((3, 1))), (3, 4))
        assert e.shape == (3, 4)

    def test_axis_out_of_range(self):
        with pytest.raises(AxisOutOfRange):
            Tensor(np.ones((2, 2))).sum(axis=3)

    def test_zero_sized_rejected(self):
        with pytest.raises(ShapeMismatch):
            Tensor(np.ones((0, 3)))

    def test_conv1d_same_padding(self):
        x = Tensor(np.arange(5.0).reshape(1, 5, 1))
        k = Tensor(np.array([[1.0, 1.0, 1.0]]))
        np.testing.assert_allclose(T.conv1d_depthwise(x, k).data.ravel(), [1, 3, 6, 9, 7])


class TestBackward:
    def test_non_scalar_loss(self):
        x = Tensor(np.ones(3), True)
        with Tape() as tape:
            y = x * 2.0
        with pytest.raises(NonScalarLoss):
            tape.backward(y)

    def test_grads_accumulate_until_zeroed(self):
        x = Tensor(np.array([1.0, 2.0]), True)
        for _ in range(2):
            with Tape() as tape:
                y = (x * x).sum()
            tape.backward(y)
        np.testing.assert_allclose(x.grad, 2 * 2 * x.data)
        x.zero_grad()
        np.testing.assert_allclose(x.grad, 0.0)

    def test_shared_subexpression(self):
        _, (g,) = backprop(lambda x: (x * x + x).sum(), np.array([3.0]))
        np.testing.assert_allclose(g, [7.0])

    def test_no_tape_no_recording(self):
        x = Tensor(np.ones(2), True)
        y = x * 3.0
        assert not y.requires_grad

    @given(arrays(float, (2, 3), elements=finite))
    def test_sum_of_squares_gradient(self, a):
        _, (g,) = backprop(lambda x: (x * x).sum(), a)
        np.testing.assert_allclose(g, 2 * a)

    @pytest.mark.parametrize("op", [T.sigmoid, T.silu, T.softplus, T.tanh, T.exp])
    def test_unary_grad_check(self, op, rng):
        x = Tensor(rng.normal(size=(3, 4)))
        assert grad_check(lambda t: op(t).sum(), x) <= 1e-6

    def test_layernorm_rmsnorm_grad_check(self, rng):
        g, b = Tensor(rng.normal(size=5)), Tensor(rng.normal(size=5))
        x = Tensor(rng.normal(size=(3, 5)))
        w = rng.normal(size=(3, 5))
        assert grad_check(lambda t: (T.layernorm(t, g, b) * Tensor(w)).sum(), x) <= 1e-6
        assert grad_check(lambda t: (T.rmsnorm(t, g) * Tensor(w)).sum(), x) <= 1e-6

    def test_conv2d_grad_check(self, rng):
        k = Tensor(rng.normal(size=(3, 1, 3, 3)))
        x = Tensor(rng.normal(size=(1, 3, 4, 5)))
        w = Tensor(rng.normal(size=(1, 3, 4, 5)))
        assert grad_check(lambda t: (T.conv2d(t, k, depthwise=True) * w).sum(), x) <= 1e-6

    def test_getitem_and_take_scatter_back(self, rng):
        a = rng.normal(size=(4, 3))
        _, (g,) = backprop(lambda x: T.take(x, np.array([0, 0, 2]), axis=0).sum(), a)
        np.testing.assert_allclose(g[:, 0], [2, 0, 1, 0])


def test_grad_check_reports_wrong_gradient():
    def bad(x):
        out = T.record((x,), np.sum(x.data ** 2), lambda g: (g * x.data,))  # should be 2x
        return out

    assert grad_check(bad, Tensor(np.array([1.0, 2.0]))) > 0.1


def test_tape_is_thread_local():
    import threading

    errs = []

    def work():
        try:
            x = Tensor(np.ones(3), True)
            with Tape() as tape:
                y = (x * 2.0).sum()
            tape.backward(y)
            assert np.allclose(x.grad, 2.0)
        except Exception as e:  # pragma: no cover - surfaced below
            errs.append(e)

    threads = [threading.Thread(target=work) for _ in range(4)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert not errs

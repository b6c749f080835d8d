import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from crossreid import diffcore as dc
from crossreid import gradcheck
from crossreid.diffcore import LSTMParams, NonFiniteError, ShapeError, Tape, Tensor, grad_check


def naive_conv(x, k, b, stride):
    c_out, _, kh, kw = k.shape
    oh = (x.shape[1] - kh) // stride + 1
    ow = (x.shape[2] - kw) // stride + 1
    out = np.zeros((c_out, oh, ow))
    for o in range(c_out):
        for i in range(oh):
            for j in range(ow):
                patch = x[:, i * stride:i * stride + kh, j * stride:j * stride + kw]
                out[o, i, j] = np.sum(patch * k[o]) + b[o]
    return out


def naive_pool(x, size):
    c, h, w = x.shape
    out = np.zeros((c, h // size, w // size))
    for ch in range(c):
        for i in range(h // size):
            for j in range(w // size):
                out[ch, i, j] = x[ch, i * size:(i + 1) * size, j * size:(j + 1) * size].max()
    return out


def naive_lstm(x, h, c, wx, wh, b):
    sig = lambda v: 1.0 / (1.0 + np.exp(-v))
    z = wx @ x + wh @ h + b
    d = h.shape[0]
    i, f, g, o = sig(z[:d]), sig(z[d:2 * d]), np.tanh(z[2 * d:3 * d]), sig(z[3 * d:])
    c_new = f * c + i * g
    return o * np.tanh(c_new), c_new


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


class TestForwardOracles:
    @pytest.mark.parametrize("stride", [1, 2, 3])
    def test_conv2d_matches_loop(self, rng, stride):
        x, k, b = rng.normal(size=(2, 9, 8)), rng.normal(size=(3, 2, 3, 2)), rng.normal(size=3)
        out = dc.conv2d(Tensor(x), Tensor(k), Tensor(b), stride)
        np.testing.assert_allclose(out.values, naive_conv(x, k, b, stride), rtol=1e-12, atol=1e-12)

    @pytest.mark.parametrize("size", [1, 2, 3])
    def test_max_pool_matches_loop(self, rng, size):
        x = rng.normal(size=(2, 7, 6))
        np.testing.assert_array_equal(dc.max_pool2d(Tensor(x), size).values, naive_pool(x, size))

    def test_linear(self, rng):
        x, w, b = rng.normal(size=4), rng.normal(size=(3, 4)), rng.normal(size=3)
        np.testing.assert_allclose(dc.linear(Tensor(x), Tensor(w), Tensor(b)).values, w @ x + b, rtol=1e-13)

    def test_lstm_step_matches_gate_equations(self, rng):
        d, n = 3, 5
        x, h, c = rng.normal(size=n), rng.normal(size=d), rng.normal(size=d)
        wx, wh, b = rng.normal(size=(4 * d, n)), rng.normal(size=(4 * d, d)), rng.normal(size=4 * d)
        h_new, c_new = dc.lstm_step(Tensor(x), Tensor(h), Tensor(c), LSTMParams(Tensor(wx), Tensor(wh), Tensor(b)))
        h_ref, c_ref = naive_lstm(x, h, c, wx, wh, b)
        np.testing.assert_allclose(h_new.values, h_ref, rtol=1e-12)
        np.testing.assert_allclose(c_new.values, c_ref, rtol=1e-12)

    def test_softmax_sums_to_one_and_is_shift_invariant(self, rng):
        z = rng.normal(size=6)
        p = dc.softmax(Tensor(z)).values
        assert p.sum() == pytest.approx(1.0, abs=1e-15)
        np.testing.assert_allclose(dc.softmax(Tensor(z + 1000.0)).values, p, rtol=1e-12)

    def test_sigmoid_stable_at_extremes(self):
        out = dc.sigmoid(Tensor(np.array([-800.0, 0.0, 800.0]))).values
        np.testing.assert_array_equal(out, [0.0, 0.5, 1.0])

    def test_log_floor(self):
        assert dc.log(Tensor(np.array([0.0]))).values[0] == pytest.approx(np.log(1e-12))

    def test_stack_mean(self, rng):
        parts = [rng.normal(size=4) for _ in range(3)]
        np.testing.assert_allclose(dc.stack_mean([Tensor(p) for p in parts]).values, np.mean(parts, axis=0))


class TestTape:
    def test_nothing_recorded_without_tape(self):
        x = Tensor(np.ones(3), requires_grad=True)
        y = dc.square(x)
        assert not y.requires_grad

    def test_constants_not_recorded(self):
        with Tape() as tape:
            dc.square(Tensor(np.ones(3)))
        assert tape.ops() == []

    def test_reverse_order_and_accumulation(self):
        x = Tensor(np.array([3.0, -2.0]), requires_grad=True)
        with Tape() as tape:
            y = dc.total(dc.mul(x, x))  # x used twice
            tape.backward(y)
        assert tape.ops() == ["mul", "sum"]
        np.testing.assert_array_equal(x.grad, [6.0, -4.0])

    def test_non_scalar_backward_needs_seed(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with Tape() as tape:
            y = dc.square(x)
            with pytest.raises(ShapeError):
                tape.backward(y)
            tape.backward(y, seed_grad=np.array([1.0, 2.0, 3.0]))
        np.testing.assert_array_equal(x.grad, [2.0, 4.0, 6.0])

    def test_tape_deactivates_on_exit(self):
        with Tape():
            pass
        assert dc.active_tape() is None


class TestErrors:
    def test_elementwise_shape_mismatch(self):
        with pytest.raises(ShapeError):
            dc.add(Tensor(np.ones(3)), Tensor(np.ones(4)))

    def test_conv_channel_mismatch(self):
        with pytest.raises(ShapeError):
            dc.conv2d(Tensor(np.ones((2, 5, 5))), Tensor(np.ones((1, 3, 3, 3))), Tensor(np.ones(1)))

    def test_conv_kernel_larger_than_input(self):
        with pytest.raises(ShapeError):
            dc.conv2d(Tensor(np.ones((1, 2, 2))), Tensor(np.ones((1, 1, 3, 3))), Tensor(np.ones(1)))

    def test_conv_bad_stride(self):
        with pytest.raises((ShapeError, ValueError)):
            dc.conv2d(Tensor(np.ones((1, 5, 5))), Tensor(np.ones((1, 1, 3, 3))), Tensor(np.ones(1)), 0)

    def test_softmax_rejects_non_finite(self):
        with pytest.raises(NonFiniteError):
            dc.softmax(Tensor(np.array([0.0, np.inf])))

    def test_linear_shape_mismatch(self):
        with pytest.raises(ShapeError):
            dc.linear(Tensor(np.ones(3)), Tensor(np.ones((2, 4))), Tensor(np.ones(2)))


class TestGradCheck:
    @pytest.mark.parametrize("name", sorted(gradcheck.op_cases()))
    def test_op_within_tolerance(self, name):
        fn, inputs = gradcheck.op_cases(0)[name]
        report = grad_check(fn, inputs, gradcheck.OP_TOLERANCE)
        assert report.passed, report.errors

    def test_detects_wrong_gradient(self):
        def bad_square(a):
            return dc._record("bad", (a,), a.values ** 2, lambda g: (g * a.values,))  # missing factor 2

        report = grad_check(bad_square, [Tensor(np.array([1.0, 2.0]), requires_grad=True)])
        assert not report.passed
        assert report.max_error > 0.1

    def test_non_finite_gradient_reports_index(self):
        def blowup(a):
            return dc._record("nan", (a,), a.values * 1.0, lambda g: (np.array([1.0, np.nan]),))

        with pytest.raises(NonFiniteError, match=r"\(1,\)"):
            grad_check(blowup, [Tensor(np.array([1.0, 2.0]), requires_grad=True)])

    def test_relative_error_floor(self):
        assert dc.relative_error(np.array([0.0]), np.array([0.0]))[0] == 0.0
        assert dc.relative_error(np.array([1.0]), np.array([1.0 + 1e-9]))[0] < 1e-9

    def test_promotes_to_float64(self):
        x = Tensor(np.ones(2, dtype=np.float32), requires_grad=True)
        grad_check(dc.tanh, [x])
        assert x.values.dtype == np.float64

    @settings(max_examples=100, deadline=None)
    @given(seed=st.integers(0, 2**31 - 1))
    def test_composite_graph_random_inputs(self, seed):
        rng = np.random.default_rng(seed)
        x = Tensor(rng.normal(size=4), requires_grad=True)
        # weights scaled so tanh stays out of deep saturation, where the true
        # gradient falls below finite-difference round-off
        w = Tensor(rng.normal(scale=0.5, size=(3, 4)), requires_grad=True)
        b = Tensor(rng.normal(size=3), requires_grad=True)

        def f(x, w, b):
            p = dc.softmax(dc.tanh(dc.linear(x, w, b)))
            return dc.scale(dc.log(dc.take(p, 1)), -1.0)

        report = grad_check(f, [x, w, b], 1e-5, seed=seed % 1000)
        assert report.passed, report.errors

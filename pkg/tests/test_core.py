import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from amsnet.core import (Tensor4, check_symmetric, conv2d, conv2d_backward, conv2d_forward,
                         elementwise, grad_check, reduce, avgpool2_forward, avgpool2_backward)
from amsnet.errors import NumericalError, ShapeError
from amsnet.norm import InParams, instance_norm, instance_norm_backward


def conv_loops(x, w):
    B, C, H, W = x.shape
    co, _, k, _ = w.shape
    p = k // 2
    y = np.zeros((B, co, H, W))
    for b in range(B):
        for o in range(co):
            for i in range(H):
                for j in range(W):
                    acc = 0.0
                    for c in range(C):
                        for u in range(k):
                            for v in range(k):
                                ii, jj = i + u - p, j + v - p
                                if 0 <= ii < H and 0 <= jj < W:
                                    acc += w[o, c, u, v] * x[b, c, ii, jj]
                    y[b, o, i, j] = acc
    return y


class TestTensor4:
    def test_rejects_wrong_rank(self):
        with pytest.raises(ShapeError):
            Tensor4(np.zeros((2, 3)))

    def test_grad_shape_checked(self):
        with pytest.raises(ShapeError):
            Tensor4(np.zeros((1, 1, 2, 2)), grad=np.zeros((1, 1, 2, 1)))

    def test_integer_data_becomes_double(self):
        t = Tensor4(np.ones((1, 1, 1, 1), dtype=int))
        assert t.data.dtype == np.float64
        assert t.dims == (1, 1, 1, 1)

    def test_accumulate(self):
        t = Tensor4.zeros((1, 2, 1, 1))
        t.accumulate(np.ones((1, 2, 1, 1)))
        t.accumulate(np.ones((1, 2, 1, 1)))
        assert np.all(t.grad == 2)


class TestElementwise:
    def test_add(self):
        a = Tensor4(np.array([1.0, 2.0]).reshape(1, 1, 1, 2))
        b = Tensor4(np.array([3.0, 4.0]).reshape(1, 1, 1, 2))
        out, _ = elementwise("add", a, b)
        assert out.data.ravel().tolist() == [4.0, 6.0]

    def test_sigmoid_zero(self):
        out, _ = elementwise("sigmoid", Tensor4(np.zeros((1, 1, 1, 1))))
        assert out.data.item() == 0.5

    def test_sigmoid_is_stable_for_large_inputs(self):
        x = Tensor4(np.array([-1000.0, 1000.0]).reshape(1, 1, 1, 2))
        with np.errstate(over="raise"):
            out, _ = elementwise("sigmoid", x)
        assert out.data.ravel().tolist() == [0.0, 1.0]

    def test_ones_mask_is_identity_and_passes_gradient(self, rng):
        a = Tensor4(rng.normal(size=(2, 3, 4, 4)))
        mask = Tensor4(np.ones((1, 3, 1, 1)))
        out, back = elementwise("mul", a, mask)
        assert np.array_equal(out.data, a.data)
        dout = rng.normal(size=a.dims)
        back(dout)
        assert np.array_equal(a.grad, dout)

    def test_broadcast_shapes(self, rng):
        a = Tensor4(rng.normal(size=(2, 3, 4, 4)))
        elementwise("mul", a, Tensor4(np.ones((2, 1, 4, 4))))
        with pytest.raises(ShapeError):
            elementwise("add", a, Tensor4(np.ones((2, 3, 1, 1))))
        with pytest.raises(ShapeError):
            elementwise("add", a, Tensor4(np.ones((1, 1, 4, 4))))

    @pytest.mark.parametrize("op", ["add", "sub", "mul"])
    @pytest.mark.parametrize("bshape", [(2, 3, 2, 2), (1, 3, 1, 1), (2, 1, 2, 2)])
    def test_binary_gradients(self, rng, op, bshape):
        a0 = rng.normal(size=(2, 3, 2, 2))
        b0 = rng.normal(size=bshape)
        w = rng.normal(size=a0.shape)

        def f_a(x):
            a, b = Tensor4(x), Tensor4(b0.copy())
            out, back = elementwise(op, a, b)
            back(w)
            return float(np.sum(w * out.data)), a.grad

        def f_b(x):
            a, b = Tensor4(a0.copy()), Tensor4(x)
            out, back = elementwise(op, a, b)
            back(w)
            return float(np.sum(w * out.data)), b.grad

        assert grad_check(f_a, a0) < 1e-8
        assert grad_check(f_b, b0) < 1e-8

    @pytest.mark.parametrize("op,arg", [("sigmoid", None), ("relu", None), ("scale", 2.5)])
    def test_unary_gradients(self, rng, op, arg):
        x0 = rng.normal(size=(2, 2, 3, 3))
        w = rng.normal(size=x0.shape)

        def f(x):
            a = Tensor4(x)
            out, back = elementwise(op, a, arg)
            back(w)
            return float(np.sum(w * out.data)), a.grad
        assert grad_check(f, x0) < 1e-6


class TestReduce:
    def test_mean_hw(self):
        x = Tensor4(np.array([1.0, 2.0, 3.0, 4.0]).reshape(1, 1, 2, 2))
        out, _ = reduce("mean", x, ["H", "W"])
        assert out.dims == (1, 1, 1, 1)
        assert out.data.item() == 2.5

    def test_max_over_channels(self):
        x = Tensor4(np.array([-1.0, 7.0, 3.0]).reshape(1, 3, 1, 1))
        out, _ = reduce("max", x, ["C"])
        assert out.data.item() == 7.0

    def test_mean_of_constant(self):
        x = Tensor4(np.full((2, 3, 4, 5), 1.75))
        out, _ = reduce("mean", x, ["B", "C", "H", "W"])
        assert out.data.item() == 1.75

    def test_max_tie_routes_to_first(self):
        x = Tensor4(np.array([5.0, 5.0, 1.0]).reshape(1, 3, 1, 1))
        out, back = reduce("max", x, [1])
        back(np.ones((1, 1, 1, 1)))
        assert x.grad.ravel().tolist() == [1.0, 0.0, 0.0]

    def test_empty_axes_and_extent(self):
        with pytest.raises(ShapeError):
            reduce("mean", Tensor4(np.zeros((1, 1, 1, 1))), [])
        with pytest.raises(ShapeError):
            reduce("mean", Tensor4(np.zeros((1, 0, 2, 2))), ["C"])

    @pytest.mark.parametrize("op", ["mean", "max"])
    def test_gradients(self, rng, op):
        x0 = rng.normal(size=(2, 3, 3, 3))
        w = rng.normal(size=(2, 1, 3, 3))

        def f(x):
            t = Tensor4(x)
            out, back = reduce(op, t, ["C"])
            back(w)
            return float(np.sum(w * out.data)), t.grad
        assert grad_check(f, x0) < 1e-6


class TestConv:
    def test_one_by_one_identity(self, rng):
        x = rng.normal(size=(2, 1, 4, 5))
        y, _ = conv2d_forward(x, np.ones((1, 1, 1, 1)))
        assert np.array_equal(y, x)

    def test_average_kernel_on_constant(self):
        c = 3.0
        x = np.full((1, 1, 4, 4), c)
        y, _ = conv2d_forward(x, np.full((1, 1, 3, 3), 1 / 9))
        assert np.allclose(y[0, 0, 1:3, 1:3], c)
        assert y[0, 0, 0, 0] == pytest.approx(c * 4 / 9)
        assert y[0, 0, 0, 1] == pytest.approx(c * 6 / 9)

    @pytest.mark.parametrize("k", [1, 3, 5])
    def test_matches_loop_oracle(self, rng, k):
        x = rng.normal(size=(2, 3, 5, 4))
        w = rng.normal(size=(2, 3, k, k))
        y, _ = conv2d_forward(x, w)
        assert np.allclose(y, conv_loops(x, w), atol=1e-12)

    def test_channel_mismatch(self, rng):
        with pytest.raises(ShapeError):
            conv2d_forward(rng.normal(size=(1, 2, 3, 3)), rng.normal(size=(1, 3, 3, 3)))

    @pytest.mark.parametrize("k", [1, 3])
    def test_kernel_and_input_gradients(self, rng, k):
        x0 = rng.normal(size=(2, 3, 4, 4))
        w0 = rng.normal(size=(2, 3, k, k))
        b0 = rng.normal(size=2)

        def f_w(w):
            y, cache = conv2d_forward(x0, w, b0)
            return float(y.sum()), conv2d_backward(np.ones_like(y), cache)[1]

        def f_x(x):
            y, cache = conv2d_forward(x, w0, b0)
            return float(np.sum(y ** 2)), conv2d_backward(2 * y, cache)[0]

        def f_b(b):
            y, cache = conv2d_forward(x0, w0, b)
            return float(np.sum(y ** 2)), conv2d_backward(2 * y, cache)[2]

        assert grad_check(f_w, w0) < 1e-4
        assert grad_check(f_x, x0) < 1e-4
        assert grad_check(f_b, b0) < 1e-4

    def test_tensor_wrapper_fills_grads(self, rng):
        x = Tensor4(rng.normal(size=(1, 2, 3, 3)))
        k = Tensor4(rng.normal(size=(1, 2, 3, 3)))
        out, back = conv2d(x, k)
        back(np.ones(out.dims))
        assert x.grad.shape == x.dims and k.grad.shape == k.dims


def test_avgpool_gradient(rng):
    x0 = rng.normal(size=(1, 2, 5, 4))
    w = rng.normal(size=(1, 2, 2, 2))

    def f(x):
        return float(np.sum(w * avgpool2_forward(x))), avgpool2_backward(w, x.shape)
    assert grad_check(f, x0) < 1e-8


class TestGradCheck:
    def test_linear(self, rng):
        x = rng.normal(size=(2, 3))
        assert grad_check(lambda v: (float(v.sum()), np.ones_like(v)), x) < 1e-10

    def test_square(self):
        x = np.array([1.0, 2.0])
        f = lambda v: (float(np.sum(v ** 2)), 2 * v)
        assert np.array_equal(f(x)[1], [2.0, 4.0])
        assert grad_check(f, x) < 1e-8

    def test_detects_a_wrong_gradient(self):
        x = np.array([1.0, 2.0])
        assert grad_check(lambda v: (float(np.sum(v ** 2)), v), x) > 0.5

    def test_instance_norm_sum_of_squares(self, rng):
        x0 = rng.normal(size=(2, 3, 4, 4))
        p = InParams(rng.normal(size=3), rng.normal(size=3))

        def f(x):
            y, stats = instance_norm(x, p)
            return float(np.sum(y ** 2)), instance_norm_backward(2 * y, x, p, stats)[0]
        assert grad_check(f, x0) < 1e-4

    def test_non_finite_raises(self):
        with pytest.raises(NumericalError):
            with np.errstate(invalid="ignore", divide="ignore"):
                grad_check(lambda v: (float(np.log(v).sum()), 1 / v), np.array([-1.0]))


def test_check_symmetric():
    m = np.array([[[1.0, 2.0], [2.0 + 1e-12, 1.0]]])
    assert np.array_equal(check_symmetric(m), check_symmetric(m).swapaxes(1, 2))
    with pytest.raises(ShapeError):
        check_symmetric(np.array([[[1.0, 2.0], [3.0, 1.0]]]))
    with pytest.raises(ShapeError):
        check_symmetric(np.eye(2))


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (2, 3, 3, 2), elements=st.floats(-10, 10)))
def test_forward_determinism(x):
    w = np.linspace(-1, 1, 3 * 3 * 3 * 3).reshape(3, 3, 3, 3)
    a, _ = conv2d_forward(x, w)
    b, _ = conv2d_forward(x.copy(), w.copy())
    assert np.array_equal(a, b)

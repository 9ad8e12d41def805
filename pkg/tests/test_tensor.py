import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from evfi import tensor as T
from evfi.gradsuite import primitive_cases
from evfi.tensor import Tensor

finite = st.floats(-50, 50, allow_nan=False, allow_infinity=False)


# -- conv2d -------------------------------------------------------------------

def test_conv_pointwise_identity():
    x = np.random.default_rng(0).normal(size=(2, 3, 5, 4))
    w = np.eye(3).reshape(3, 3, 1, 1)
    out = T.conv2d(Tensor(x), Tensor(w), padding=0)
    np.testing.assert_array_equal(out.data, x)


def test_conv_all_ones_counts_receptive_field():
    out = T.conv2d(Tensor(np.ones((1, 1, 4, 4))), Tensor(np.ones((1, 1, 3, 3))), padding=1).data[0, 0]
    assert out[1, 1] == 9.0 and out[2, 2] == 9.0
    assert out[0, 0] == out[0, 3] == out[3, 0] == out[3, 3] == 4.0


def test_conv_shape_arithmetic():
    out = T.conv2d(Tensor(np.zeros((1, 3, 8, 8))), Tensor(np.zeros((6, 3, 3, 3))), padding=1, stride=1)
    assert out.shape == (1, 6, 8, 8)
    out = T.conv2d(Tensor(np.zeros((1, 3, 8, 8))), Tensor(np.zeros((2, 3, 4, 4))), padding=1, stride=2)
    assert out.shape == (1, 2, 4, 4)


def test_conv_shape_mismatch_raises():
    with pytest.raises(ValueError, match="channel|dimension|groups"):
        T.conv2d(Tensor(np.zeros((1, 3, 8, 8))), Tensor(np.zeros((6, 4, 3, 3))))


def _conv_oracle(x, w, pad):
    n, c, h, wd = x.shape
    o, _, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    out = np.zeros((n, o, h + 2 * pad - k + 1, wd + 2 * pad - k + 1))
    for b in range(n):
        for oc in range(o):
            for i in range(out.shape[2]):
                for j in range(out.shape[3]):
                    out[b, oc, i, j] = np.sum(xp[b, :, i:i + k, j:j + k] * w[oc])
    return out


def test_conv_matches_loop_oracle():
    rng = np.random.default_rng(1)
    x, w = rng.normal(size=(2, 3, 6, 5)), rng.normal(size=(4, 3, 3, 3))
    np.testing.assert_allclose(T.conv2d(Tensor(x), Tensor(w), padding=1).data, _conv_oracle(x, w, 1), atol=1e-12)


def test_depthwise_equals_independent_channel_convs():
    rng = np.random.default_rng(2)
    x, w = rng.normal(size=(1, 3, 4, 4)), rng.normal(size=(3, 1, 3, 3))
    out = T.conv2d(Tensor(x), Tensor(w), padding=1, groups=3).data
    for c in range(3):
        single = _conv_oracle(x[:, c:c + 1], w[c:c + 1], 1)
        np.testing.assert_allclose(out[:, c:c + 1], single, atol=1e-12)


# -- layer norm / softmax / matmul / resize ----------------------------------

def test_layer_norm_constant_input_is_zero():
    out = T.layer_norm(Tensor(np.full((2, 4, 3, 3), 7.0)), 1, Tensor(np.ones(4)), Tensor(np.zeros(4)))
    assert not np.any(out.data)


def test_layer_norm_moments():
    x = np.random.default_rng(3).normal(2.0, 5.0, size=(3, 8, 4, 4))
    out = T.layer_norm(Tensor(x), 1, Tensor(np.ones(8)), Tensor(np.zeros(8))).data
    assert np.abs(out.mean(axis=1)).max() < 1e-6
    assert np.abs(out.var(axis=1) - 1).max() < 1e-3


def test_layer_norm_empty_axis_raises():
    with pytest.raises(ValueError):
        T.layer_norm(Tensor(np.zeros((2, 0))), 1, Tensor(np.ones(0)), Tensor(np.zeros(0)))


def test_softmax_examples():
    np.testing.assert_allclose(T.softmax(Tensor(np.zeros(4))).data, [0.25] * 4)
    np.testing.assert_allclose(T.softmax(Tensor(np.array([0.0, np.log(3.0)]))).data, [0.25, 0.75], atol=1e-15)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 6)), elements=finite))
def test_softmax_normalized(x):
    out = T.softmax(Tensor(x), axis=-1).data
    assert np.all(out >= 0) and np.all(out <= 1)
    np.testing.assert_allclose(out.sum(axis=-1), 1.0, atol=1e-9)


def test_matmul_examples():
    a = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]))
    b = Tensor(np.array([[5.0, 6.0], [7.0, 8.0]]))
    np.testing.assert_array_equal(T.matmul(a, b).data, [[19, 22], [43, 50]])
    np.testing.assert_array_equal(T.matmul(a, Tensor(np.eye(2))).data, a.data)
    assert T.matmul(Tensor(np.zeros((2, 3, 4))), Tensor(np.zeros((2, 4, 5)))).shape == (2, 3, 5)
    with pytest.raises(ValueError):
        T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 5))))


def test_bilinear_identity_and_constant():
    x = np.random.default_rng(4).normal(size=(1, 2, 5, 6))
    np.testing.assert_array_equal(T.bilinear_resize(Tensor(x), 5, 6).data, x)
    out = T.bilinear_resize(Tensor(np.full((1, 1, 3, 3), 0.7)), 7, 5).data
    np.testing.assert_allclose(out, 0.7, atol=1e-15)


def _bilinear_oracle(img, oh, ow):
    h, w = img.shape
    out = np.zeros((oh, ow))
    for i in range(oh):
        for j in range(ow):
            y = min(max((i + 0.5) * h / oh - 0.5, 0), h - 1)
            x = min(max((j + 0.5) * w / ow - 0.5, 0), w - 1)
            y0, x0 = int(np.floor(y)), int(np.floor(x))
            y1, x1 = min(y0 + 1, h - 1), min(x0 + 1, w - 1)
            fy, fx = y - y0, x - x0
            out[i, j] = ((1 - fy) * ((1 - fx) * img[y0, x0] + fx * img[y0, x1])
                         + fy * ((1 - fx) * img[y1, x0] + fx * img[y1, x1]))
    return out


def test_bilinear_matches_scalar_oracle():
    img = np.array([[0.0, 1.0], [2.0, 3.0]])
    out = T.bilinear_resize(Tensor(img[None, None]), 4, 4).data[0, 0]
    np.testing.assert_allclose(out, _bilinear_oracle(img, 4, 4), atol=1e-12)


# -- backward ------------------------------------------------------------------

def test_backward_sum_and_product():
    x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
    y = Tensor(np.linspace(-1, 1, 6).reshape(2, 3), requires_grad=True)
    T.backward(x.sum())
    np.testing.assert_array_equal(x.grad, np.ones((2, 3)))
    x.grad = None
    T.backward((x * y).sum())
    np.testing.assert_array_equal(x.grad, y.data)
    np.testing.assert_array_equal(y.grad, x.data)


def test_backward_fan_out_accumulates():
    x = Tensor(np.array([1.0, 2.0, 3.0]), requires_grad=True)
    loss = (x * 2.0).sum() + (x * x).sum()
    T.backward(loss)
    np.testing.assert_allclose(x.grad, 2.0 + 2 * x.data)


def test_backward_errors():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ValueError):
        T.backward(x * 2.0)
    with pytest.raises(RuntimeError):
        T.backward(Tensor(np.array(1.0)))


def test_no_grad_records_nothing():
    x = Tensor(np.ones(3), requires_grad=True)
    with T.no_grad():
        y = (x * 3.0).sum()
    assert not y.requires_grad


def test_composite_conv_layernorm_softmax():
    rng = np.random.default_rng(5)
    x, w = Tensor(rng.normal(size=(1, 2, 4, 4))), Tensor(rng.normal(size=(3, 2, 3, 3)))
    g, b = Tensor(rng.normal(size=3)), Tensor(rng.normal(size=3))
    r = Tensor(rng.normal(size=(1, 3, 4, 4)))

    def f(x, w, g, b):
        y = T.layer_norm(T.conv2d(x, w, padding=1), 1, g, b)
        return (T.softmax(y, axis=1) * r).sum()

    assert T.grad_check(f, [x, w, g, b]) < 1e-4


# -- grad_check ----------------------------------------------------------------

def test_grad_check_polynomial():
    assert T.grad_check(lambda x: (x * x).sum(), [Tensor(np.array([1.0, 2.0, 3.0]))]) < 1e-8


def test_grad_check_detects_corrupted_rule():
    def bad_square(a):
        return T.make_op(a.data ** 2, (a,), lambda g: (g * 2.2 * a.data,))

    assert T.grad_check(lambda x: bad_square(x).sum(), [Tensor(np.array([1.0, 2.0, 3.0]))]) > 1e-2


def test_grad_check_rejects_non_finite():
    with pytest.raises(FloatingPointError), np.errstate(invalid="ignore"):
        T.grad_check(lambda x: T.log(x).sum(), [Tensor(np.array([-1.0, 2.0]))])


def test_grad_check_eps_range():
    with pytest.raises(ValueError):
        T.grad_check(lambda x: x.sum(), [Tensor(np.ones(2))], eps=1.0)


@pytest.mark.parametrize("case", primitive_cases(np.random.default_rng(11)), ids=lambda c: c[0])
def test_primitive_gradients(case):
    name, fn, inputs = case
    assert T.grad_check(fn, inputs, max_coords=40) < 1e-4, name


def test_norm_gradient_is_zero_at_origin():
    z = Tensor(np.zeros((2, 3)), requires_grad=True)
    T.backward(T.norm(z, axis=1).sum())
    assert not np.any(z.grad)

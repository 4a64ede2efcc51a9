# unips_system/tests/tensor_test.py

import numpy as np
import pytest

from unips_system.core.exceptions import DimensionError, GradientError, ParameterError
from unips_system.core.gradcheck import gradcheck
from unips_system.core.tensor import (
    Tensor,
    backward,
    concat,
    gelu,
    getitem,
    layernorm,
    l2_normalize,
    matmul,
    no_grad,
    softmax,
    upsample_bilinear,
)


def _leaf(shape, seed=0, positive=False):
    rng = np.random.default_rng(seed)
    data = rng.uniform(0.5, 1.5, size=shape) if positive else rng.normal(size=shape)
    return Tensor(data, requires_grad=True)


# --- Gradcheck per operation ---

@pytest.mark.parametrize("op", [
    lambda a, b: (a + b).sum(),
    lambda a, b: (a - b).sum(),
    lambda a, b: (a * b).sum(),
    lambda a, b: (a / b).sum(),
])
def test_binary_ops_gradcheck(op):
    a = _leaf((3, 4), seed=1)
    b = _leaf((3, 4), seed=2, positive=True)
    result = gradcheck(lambda: op(a, b), [a, b])
    assert result.passed, result.per_tensor


def test_broadcast_gradient_is_summed_back_to_input_shape():
    a = _leaf((2, 3, 4), seed=3)
    bias = _leaf((4,), seed=4)
    result = gradcheck(lambda: ((a + bias) * (a + bias)).sum(), [a, bias], names=["a", "bias"])
    assert result.passed, result.per_tensor

    (a + bias).sum().backward()
    assert bias.grad.shape == (4,)
    np.testing.assert_allclose(bias.grad, np.full(4, 6.0))


@pytest.mark.parametrize("op", [
    lambda x: x.exp().sum(),
    lambda x: x.log().sum(),
    lambda x: x.sqrt().sum(),
    lambda x: x.tanh().sum(),
    lambda x: (x ** 3).sum(),
    lambda x: gelu(x).sum(),
    lambda x: x.mean(axis=0).sum(),
    lambda x: x.transpose(1, 0).reshape(-1)[2:5].sum(),
])
def test_unary_ops_gradcheck(op):
    x = _leaf((3, 4), seed=5, positive=True)
    assert gradcheck(lambda: op(x), [x]).passed


def test_matmul_gradcheck_with_batch_broadcast():
    a = _leaf((2, 3, 4), seed=6)
    b = _leaf((4, 5), seed=7)
    assert gradcheck(lambda: (matmul(a, b) ** 2).sum(), [a, b]).passed


def test_matmul_values_and_gradcheck_on_a_rectangular_product():
    identity = matmul(Tensor(np.eye(2)), Tensor([[3.0, 4.0], [5.0, 6.0]]))
    np.testing.assert_array_equal(identity.data, [[3, 4], [5, 6]])
    assert matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]])).data.tolist() == [[11.0]]
    a = _leaf((5, 7), seed=30)
    b = _leaf((7, 3), seed=31)
    weights = Tensor(np.random.default_rng(32).normal(size=(5, 3)))
    result = gradcheck(lambda: (matmul(a, b) * weights).sum(), [a, b], names=["a", "b"])
    assert result.max_relative_error < 1e-3, result.per_tensor


def test_matmul_rejects_mismatched_inner_dimensions():
    with pytest.raises(DimensionError):
        matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))))


def test_softmax_rows_sum_to_one_and_gradcheck():
    x = _leaf((4, 6), seed=8)
    probs = softmax(x, axis=-1)
    np.testing.assert_allclose(probs.data.sum(axis=-1), np.ones(4), atol=1e-6)
    weights = Tensor(np.random.default_rng(9).normal(size=(4, 6)))
    assert gradcheck(lambda: (softmax(x, axis=-1) * weights).sum(), [x]).passed


def test_layernorm_gradcheck_over_input_and_affine():
    x = _leaf((3, 5), seed=10)
    gain = _leaf((5,), seed=11, positive=True)
    bias = _leaf((5,), seed=12)
    weights = Tensor(np.random.default_rng(13).normal(size=(3, 5)))
    result = gradcheck(lambda: (layernorm(x, gain, bias) * weights).sum(), [x, gain, bias])
    assert result.passed, result.per_tensor


def test_layernorm_validates_arguments():
    x = Tensor(np.ones((2, 3)))
    with pytest.raises(DimensionError):
        layernorm(x, np.ones(4), np.zeros(3))
    with pytest.raises(ParameterError):
        layernorm(x, np.ones(3), np.zeros(3), eps=0.0)


def test_l2_normalize_gives_unit_rows():
    x = _leaf((5, 3), seed=14)
    out = l2_normalize(x, axis=-1)
    np.testing.assert_allclose(np.linalg.norm(out.data, axis=-1), np.ones(5), atol=1e-5)
    weights = Tensor(np.random.default_rng(15).normal(size=(5, 3)))
    assert gradcheck(lambda: (l2_normalize(x, axis=-1) * weights).sum(), [x]).passed


def test_concat_and_fancy_index_gradients():
    a = _leaf((2, 3), seed=16)
    b = _leaf((2, 2), seed=17)
    rows = np.array([0, 1, 1])
    cols = np.array([4, 0, 4])

    def fn():
        joined = concat([a, b], axis=-1)
        return (getitem(joined, (rows, cols)) ** 2).sum()

    assert gradcheck(fn, [a, b]).passed


def test_repeated_index_accumulates_gradient():
    x = Tensor(np.arange(4.0), requires_grad=True)
    getitem(x, np.array([1, 1, 3])).sum().backward()
    np.testing.assert_allclose(x.grad, [0.0, 2.0, 0.0, 1.0])


def test_upsample_bilinear_constant_grid_and_gradcheck():
    constant = Tensor(np.full((1, 2, 2, 3), 0.25))
    np.testing.assert_allclose(upsample_bilinear(constant, 4, 6).data, 0.25, atol=1e-7)

    x = _leaf((1, 2, 3, 2), seed=18)
    weights = Tensor(np.random.default_rng(19).normal(size=(1, 4, 5, 2)))
    assert gradcheck(lambda: (upsample_bilinear(x, 4, 5) * weights).sum(), [x]).passed


# --- End to end ---

def test_two_layer_network_gradcheck():
    rng = np.random.default_rng(20)
    x = Tensor(rng.normal(size=(6, 4)))
    w1 = _leaf((4, 8), seed=21)
    w2 = _leaf((8, 3), seed=22)
    target = Tensor(rng.normal(size=(6, 3)))

    def fn():
        hidden = gelu(matmul(x, w1))
        return ((matmul(hidden, w2) - target) ** 2).mean()

    result = gradcheck(fn, [w1, w2], names=["w1", "w2"])
    assert result.passed, result.per_tensor
    assert w1.data.dtype == np.float32


def test_gradients_accumulate_across_backward_calls():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    (x * 3.0).sum().backward()
    (x * 3.0).sum().backward()
    np.testing.assert_allclose(x.grad, [6.0, 6.0])


# --- Contracts ---

def test_backward_on_non_scalar_raises():
    x = _leaf((3,))
    with pytest.raises(GradientError):
        backward(x * 2.0)


def test_backward_off_tape_raises():
    with pytest.raises(GradientError):
        backward(Tensor(np.array(1.0)))


def test_no_grad_records_nothing():
    x = _leaf((3,))
    with no_grad():
        y = (x * 2.0).sum()
    assert not y.requires_grad
    with pytest.raises(GradientError):
        y.backward()


def test_gradcheck_rejects_non_scalar_function():
    x = _leaf((3,))
    with pytest.raises(GradientError):
        gradcheck(lambda: x * 2.0, [x])
    assert x.data.dtype == np.float32

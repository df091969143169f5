import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dynhuman.autodiff.ops import OpSpec
from dynhuman.autodiff import REGISTRY, AdamState, GraphError, NumericFault, Tensor, adam_step, ops

from oracles import gradcheck

REQUIRED = {"add", "mul", "matmul", "conv2d", "transposed_conv2d", "leaky_relu", "sigmoid", "tanh",
            "softmax", "l1", "cross_entropy", "concat", "slice", "bilinear_resize"}


def test_registry_covers_required_ops():
    assert REQUIRED <= set(REGISTRY)


@pytest.mark.parametrize("name", sorted(REGISTRY))
def test_gradcheck(name):
    for seed in (0, 1):
        assert gradcheck(REGISTRY[name], seed) < 1e-4


def test_leaky_relu_value_and_slope():
    x = Tensor(np.array([-1.0]), requires_grad=True)
    y = ops.leaky_relu(x)
    assert y.data[0] == pytest.approx(-0.2)
    y.sum().backward()
    assert x.grad[0] == pytest.approx(0.2)


def test_conv_identity_kernel():
    x = np.random.default_rng(0).normal(size=(1, 1, 5, 6))
    w = np.zeros((1, 1, 3, 3))
    w[0, 0, 1, 1] = 1.0
    np.testing.assert_array_equal(ops.conv2d(Tensor(x), Tensor(w), pad=1).data, x)


def test_conv_hand_example():
    x = np.array([[1.0, 2.0], [3.0, 4.0]])[None, None]
    w = np.array([[1.0, 0.0], [0.0, 1.0]])[None, None]
    np.testing.assert_array_equal(ops.conv2d(Tensor(x), Tensor(w)).data, [[[[5.0]]]])


def test_conv_shape_mismatch():
    with pytest.raises(GraphError):
        ops.conv2d(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 3, 3, 3))))


def test_matmul_shape_mismatch():
    with pytest.raises(GraphError):
        ops.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 2))))


def test_square_grad():
    x = Tensor(np.array(3.0), requires_grad=True)
    ops.mul(x, x).backward()
    assert x.grad == pytest.approx(6.0)


def test_duplicate_input_accumulates():
    x = Tensor(np.array([1.5, -2.0]), requires_grad=True)
    ops.sum(ops.add(x, x)).backward()
    np.testing.assert_array_equal(x.grad, [2.0, 2.0])


def test_backward_non_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(GraphError):
        ops.mul(x, x).backward()


def test_adam_first_step():
    p = {"w": np.array([0.0])}
    adam_step(p, {"w": np.array([1.0])}, AdamState(lr=1e-3))
    assert p["w"][0] == pytest.approx(-9.99999990e-4, abs=1e-15)


def test_adam_zero_grad_noop():
    p = {"w": np.array([0.3, -0.7])}
    st_ = AdamState()
    for _ in range(5):
        adam_step(p, {"w": np.zeros(2)}, st_)
    np.testing.assert_array_equal(p["w"], [0.3, -0.7])


def test_adam_converges_on_quadratic():
    p = {"x": np.array([1.0])}
    st_ = AdamState(lr=1e-2)
    for _ in range(500):
        adam_step(p, {"x": 2 * p["x"]}, st_)
    assert abs(p["x"][0]) < 1e-2


def test_adam_nan_names_parameter():
    with pytest.raises(NumericFault, match="enc.w"):
        adam_step({"enc.w": np.zeros(2)}, {"enc.w": np.array([np.nan, 0.0])}, AdamState())


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(0, 2))
def test_softmax_sums_to_one(seed, axis):
    x = np.random.default_rng(seed).normal(scale=5, size=(3, 4, 5))
    np.testing.assert_allclose(ops.softmax(Tensor(x), axis=axis).data.sum(axis), 1.0, atol=1e-9)


def test_forward_deterministic():
    r = np.random.default_rng(4)
    x, w = r.normal(size=(2, 3, 9, 9)), r.normal(size=(5, 3, 3, 3))
    a = ops.conv2d(Tensor(x), Tensor(w), stride=2, pad=1).data
    b = ops.conv2d(Tensor(x), Tensor(w), stride=2, pad=1).data
    assert a.tobytes() == b.tobytes()


def test_transposed_conv_is_adjoint_of_conv():
    r = np.random.default_rng(5)
    x = r.normal(size=(1, 2, 8, 8))
    w = r.normal(size=(3, 2, 4, 4))
    y = r.normal(size=(1, 3, 4, 4))
    lhs = (ops.conv2d(Tensor(x), Tensor(w), stride=2, pad=1).data * y).sum()
    rhs = (ops.transposed_conv2d(Tensor(y), Tensor(w), stride=2, pad=1).data * x).sum()
    assert lhs == pytest.approx(rhs, rel=1e-12)


@pytest.mark.parametrize("k,stride,pad", [(3, 1, 1), (3, 1, 0), (4, 2, 1), (1, 1, 0), (3, 1, 2), (2, 1, 0)])
def test_conv2d_gradients_across_geometries(k, stride, pad):
    def sample(r):
        return [r.normal(size=(2, 3, 7, 6)), r.normal(size=(4, 3, k, k)), r.normal(size=(4,))], \
            {"stride": stride, "pad": pad}
    spec = OpSpec("conv2d", ops.conv2d, sample)
    assert gradcheck(spec, seed=k + 10 * pad) < 1e-4

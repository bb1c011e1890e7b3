import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cllab import core
from cllab.errors import ContractError, DimensionError, NonFiniteError
from cllab.gradcheck import numerical_gradient, relative_error


def test_dense_identity_and_arithmetic():
    np.testing.assert_array_equal(core.dense_forward(np.array([[1.0, 2.0]]), np.eye(2), np.zeros(2)), [[1, 2]])
    out = core.dense_forward(np.array([[1.0, 1.0]]), np.array([[2.0, 3.0], [4.0, 5.0]]), np.ones(2))
    np.testing.assert_array_equal(out, [[7, 9]])


def test_dense_shape_mismatch():
    with pytest.raises(DimensionError):
        core.dense_forward(np.ones((3, 5)), np.ones((4, 2)), np.zeros(2))


def test_non_finite_input_rejected():
    with pytest.raises(NonFiniteError):
        core.as_tensor(np.array([1.0, np.nan]))


def test_relu_cases():
    np.testing.assert_array_equal(core.relu(np.array([-1.0, 0.0, 2.0])), [0, 0, 2])
    assert not core.relu(-np.ones((3, 3))).any()
    x = np.arange(1.0, 5.0)
    np.testing.assert_array_equal(core.relu(x), x)


def test_conv_all_ones():
    out = core.conv2d_forward(np.ones((1, 1, 3, 3)), np.ones((1, 1, 3, 3)), np.zeros(1))
    np.testing.assert_array_equal(out, [[[[9.0]]]])


def _conv_oracle(x, k, b, stride, pad):
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    n, _, h, w = xp.shape
    co, _, kh, kw = k.shape
    ho, wo = (h - kh) // stride + 1, (w - kw) // stride + 1
    out = np.zeros((n, co, ho, wo))
    for i in range(n):
        for o in range(co):
            for r in range(ho):
                for c in range(wo):
                    win = xp[i, :, r * stride:r * stride + kh, c * stride:c * stride + kw]
                    out[i, o, r, c] = np.sum(win * k[o]) + b[o]
    return out


def test_conv_delta_impulse_reads_flipped_kernel():
    rng = np.random.default_rng(0)
    k = rng.standard_normal((1, 1, 3, 3))
    x = np.zeros((1, 1, 5, 5))
    x[0, 0, 2, 2] = 1.0
    out = core.conv2d_forward(x, k, np.zeros(1))
    # output (r, c) sees the impulse at kernel offset (2 - r, 2 - c)
    np.testing.assert_allclose(out[0, 0], k[0, 0, ::-1, ::-1])


@pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 0), (2, 1)])
def test_conv_matches_loop_oracle(stride, pad):
    rng = np.random.default_rng(stride * 10 + pad)
    x, k, b = rng.standard_normal((2, 3, 6, 7)), rng.standard_normal((4, 3, 3, 3)), rng.standard_normal(4)
    np.testing.assert_allclose(core.conv2d_forward(x, k, b, stride, pad), _conv_oracle(x, k, b, stride, pad),
                               atol=1e-12)


def test_conv_output_shape_and_errors():
    assert core.conv2d_forward(np.ones((1, 1, 4, 4)), np.ones((1, 1, 2, 2)), np.zeros(1), stride=2).shape == (1, 1, 2, 2)
    with pytest.raises(DimensionError):
        core.conv2d_forward(np.ones((1, 1, 2, 2)), np.ones((1, 1, 3, 3)), np.zeros(1))


def test_global_avg_pool():
    assert core.global_avg_pool(np.full((1, 2, 3, 3), 1.5)).tolist() == [[1.5, 1.5]]
    assert core.global_avg_pool(np.array([1.0, 2, 3, 4]).reshape(1, 1, 2, 2))[0, 0] == 2.5
    np.testing.assert_array_equal(core.global_avg_pool(np.full((2, 1, 1, 1), 7.0)), [[7.0], [7.0]])


def test_max_pool_values():
    x = np.arange(16.0).reshape(1, 1, 4, 4)
    out, _ = core.max_pool2d_forward(x)
    np.testing.assert_array_equal(out[0, 0], [[5, 7], [13, 15]])


def test_softmax_ce_closed_forms():
    assert core.softmax_cross_entropy(np.zeros((3, 4)), np.array([0, 1, 2]))[0] == pytest.approx(math.log(4))
    z = np.array([[50.0, 0.0, 0.0]])
    assert core.softmax_cross_entropy(z, np.array([0]))[0] < 1e-6
    loss, _ = core.softmax_cross_entropy(np.array([[1.0, 2.0]]), np.array([1]))
    assert loss == pytest.approx(math.log(1 + math.exp(-1)), abs=1e-12)
    assert loss == pytest.approx(0.3133, abs=1e-4)


def test_softmax_ce_label_out_of_range():
    with pytest.raises(IndexError):
        core.softmax_cross_entropy(np.zeros((1, 2)), np.array([2]))


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 6), st.integers(2, 6), st.integers(0, 2**31 - 1))
def test_softmax_ce_grad_rows_sum_to_zero(batch, classes, seed):
    rng = np.random.default_rng(seed)
    _, g = core.softmax_cross_entropy(rng.standard_normal((batch, classes)) * 5, rng.integers(0, classes, batch))
    np.testing.assert_allclose(g.sum(axis=1), 0.0, atol=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_random_layer_gradients(seed):
    """Randomised shapes; at least 20 trials per layer type."""
    rng = np.random.default_rng(seed)
    b, i, o = rng.integers(1, 5, 3)
    x, w, bias, r = rng.standard_normal((b, i)), rng.standard_normal((i, o)), rng.standard_normal(o), rng.standard_normal((b, o))
    dx, dw, db = core.dense_backward(x, w, r)
    f = lambda: float(np.sum(r * core.dense_forward(x, w, bias)))
    for arr, g in ((x, dx), (w, dw), (bias, db)):
        assert relative_error(g, numerical_gradient(f, arr)) < 1e-5

    cin, cout, size = rng.integers(1, 3), rng.integers(1, 3), rng.integers(3, 6)
    stride, pad = int(rng.integers(1, 3)), int(rng.integers(0, 2))
    x = rng.standard_normal((2, cin, size, size))
    k = rng.standard_normal((cout, cin, 3, 3))
    bias = rng.standard_normal(cout)
    r = rng.standard_normal(core.conv2d_forward(x, k, bias, stride, pad).shape)
    dx, dk, db = core.conv2d_backward(x, k, r, stride, pad)
    f = lambda: float(np.sum(r * core.conv2d_forward(x, k, bias, stride, pad)))
    for arr, g in ((x, dx), (k, dk), (bias, db)):
        assert relative_error(g, numerical_gradient(f, arr)) < 1e-5

    z = rng.standard_normal((3, 4))
    y = rng.integers(0, 4, 3)
    _, g = core.softmax_cross_entropy(z, y)
    assert relative_error(g, numerical_gradient(lambda: core.softmax_cross_entropy(z, y)[0], z)) < 1e-5


def test_relu_conv_pool_keep_activations_nonnegative():
    rng = np.random.default_rng(3)
    a = core.relu(core.conv2d_forward(rng.standard_normal((2, 2, 6, 6)), rng.standard_normal((3, 2, 3, 3)),
                                      rng.standard_normal(3), 1, 1))
    assert (core.max_pool2d_forward(a)[0] >= 0).all() and (core.global_avg_pool(a) >= 0).all()


def test_forward_ops_are_pure():
    rng = np.random.default_rng(1)
    x, k, b = rng.standard_normal((2, 2, 5, 5)), rng.standard_normal((3, 2, 3, 3)), rng.standard_normal(3)
    x0 = x.copy()
    assert np.array_equal(core.conv2d_forward(x, k, b, 1, 1), core.conv2d_forward(x, k, b, 1, 1))
    assert np.array_equal(x, x0)


def test_penalty_only_gradient_is_two_alpha_omega_delta():
    # linear model, CE removed: d/dw alpha * omega * (w_prev - w)^2 = 2 alpha omega (w - w_prev)
    rng = np.random.default_rng(2)
    w, w_prev, omega, alpha = rng.standard_normal(5), rng.standard_normal(5), rng.random(5), 0.7
    f = lambda: float(alpha * np.sum(omega * (w_prev - w) ** 2))
    np.testing.assert_allclose(numerical_gradient(f, w), 2 * alpha * omega * (w - w_prev), rtol=1e-7)


def test_adam_zero_gradient_leaves_params():
    params = {"a": np.array([1.0, -2.0])}
    state = core.AdamState.for_params(params)
    core.adam_step(params, {"a": np.zeros(2)}, state)
    np.testing.assert_array_equal(params["a"], [1.0, -2.0])
    assert state.step == 1


@pytest.mark.parametrize("g", [0.3, -5.0, 1e-3])
def test_adam_first_step_magnitude_is_lr(g):
    params = {"w": np.array([0.0])}
    state = core.AdamState.for_params(params, lr=1e-3)
    core.adam_step(params, {"w": np.array([g])}, state)
    # m_hat = g, v_hat = g^2 -> step = lr * g / (|g| + eps)
    assert params["w"][0] == pytest.approx(-1e-3 * np.sign(g), rel=1e-4)


def test_adam_key_mismatch():
    params = {"a": np.zeros(1)}
    with pytest.raises(ContractError):
        core.adam_step(params, {"b": np.zeros(1)}, core.AdamState.for_params(params))


def test_adam_deterministic():
    rng = np.random.default_rng(0)
    grads = [{"w": rng.standard_normal(4)} for _ in range(5)]
    outs = []
    for _ in range(2):
        params = {"w": np.ones(4)}
        state = core.AdamState.for_params(params)
        for g in grads:
            core.adam_step(params, g, state)
        outs.append(params["w"])
    assert np.array_equal(*outs)

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ctsr import autodiff as ad
from ctsr.autodiff import DimensionError, ParamStore, StateError, Tensor

from _helpers import OP_TOL, check_ops


def T(x, grad=False):
    return Tensor(np.asarray(x, dtype=np.float64), requires_grad=grad)


# ---------------------------------------------------------------------------
# forward examples


def test_conv2d_identity_1x1():
    x = np.random.default_rng(0).standard_normal((2, 3, 4, 3))
    w = np.eye(3).reshape(1, 1, 3, 3)
    out = ad.conv2d(T(x), T(w), T(np.zeros(3)))
    np.testing.assert_array_equal(out.data, x)


def test_conv2d_ones_kernel_counts_neighbours():
    out = ad.conv2d(T(np.ones((1, 4, 4, 1))), T(np.ones((3, 3, 1, 1))), T([0.0]), 1, 1).data[0, :, :, 0]
    expected = np.array([[4, 6, 6, 4], [6, 9, 9, 6], [6, 9, 9, 6], [4, 6, 6, 4]])
    np.testing.assert_array_equal(out, expected)


def test_conv2d_matches_direct_loop():
    rng = np.random.default_rng(1)
    x, w, b = rng.standard_normal((2, 7, 6, 3)), rng.standard_normal((3, 3, 3, 4)), rng.standard_normal(4)
    out = ad.conv2d(T(x), T(w), T(b), 2, 1).data
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    ref = np.zeros((2, 4, 3, 4))
    for n in range(2):
        for i in range(4):
            for j in range(3):
                patch = xp[n, 2 * i:2 * i + 3, 2 * j:2 * j + 3, :]
                ref[n, i, j] = np.tensordot(patch, w, axes=3) + b
    np.testing.assert_allclose(out, ref, atol=1e-12)


@pytest.mark.parametrize("size", [8, 16, 64])
def test_stride2_stem_halves_even_dims(size):
    out = ad.conv2d(T(np.zeros((1, size, size, 2))), T(np.zeros((7, 7, 2, 5))), T(np.zeros(5)), 2, 3)
    assert out.shape == (1, size // 2, size // 2, 5)


def test_stride2_stem_odd_dims_round_up():
    out = ad.conv2d(T(np.zeros((1, 9, 9, 1))), T(np.zeros((7, 7, 1, 1))), T(np.zeros(1)), 2, 3)
    assert out.shape == (1, 5, 5, 1)


def test_conv2d_shape_errors():
    with pytest.raises(DimensionError):
        ad.conv2d(T(np.zeros((1, 4, 4, 2))), T(np.zeros((3, 3, 3, 1))), T(np.zeros(1)))
    with pytest.raises(DimensionError):
        ad.conv2d(T(np.zeros((1, 2, 2, 1))), T(np.zeros((3, 3, 1, 1))), T(np.zeros(1)))
    with pytest.raises(DimensionError):
        ad.conv2d(T(np.zeros((1, 4, 4, 1))), T(np.zeros((3, 3, 1, 2))), T(np.zeros(3)))


def test_conv1d_examples():
    x = np.random.default_rng(2).standard_normal((2, 5, 3))
    out = ad.conv1d(T(x), T(np.eye(3).reshape(1, 3, 3)), T(np.zeros(3)))
    np.testing.assert_array_equal(out.data, x)
    ramp = T(np.array([0.0, 1, 2, 3]).reshape(1, 4, 1))
    diff = ad.conv1d(ramp, T(np.array([1.0, -1.0]).reshape(2, 1, 1)), T([0.0])).data.ravel()
    # cross-correlation: out[i] = x[i] - x[i+1]
    np.testing.assert_array_equal(diff, [-1, -1, -1])


def test_conv1d_asymmetric_padding_keeps_length():
    out = ad.conv1d(T(np.zeros((1, 16, 2))), T(np.zeros((8, 2, 3))), T(np.zeros(3)), 1, (3, 4))
    assert out.shape == (1, 16, 3)


def test_relu_examples():
    np.testing.assert_array_equal(ad.relu(T([-1.0, 0.0, 2.0])).data, [0, 0, 2])
    x = T([0.5, 3.0])
    np.testing.assert_array_equal(ad.relu(x).data, x.data)


def test_relu_gradient_zero_at_zero():
    x = T([-1.0, 0.0, 2.0], grad=True)
    ad.sum_all(ad.relu(x)).backward()
    np.testing.assert_array_equal(x.grad, [0, 0, 1])


def test_linear_examples():
    x = np.random.default_rng(3).standard_normal((4, 3))
    np.testing.assert_array_equal(ad.linear(T(x), T(np.eye(3)), T(np.zeros(3))).data, x)
    np.testing.assert_array_equal(ad.linear(T([[1.0, 2.0]]), T([[1.0], [1.0]]), T([3.0])).data, [[6.0]])
    with pytest.raises(DimensionError):
        ad.linear(T(np.zeros((2, 3))), T(np.zeros((2, 3))), T(np.zeros(3)))


def test_global_avg_pool_examples():
    np.testing.assert_array_equal(ad.global_avg_pool(T(np.full((1, 3, 2, 4), 1.5))).data, np.full((1, 4), 1.5))
    x = np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 2, 2, 1)
    np.testing.assert_array_equal(ad.global_avg_pool(T(x)).data, [[2.5]])


def test_add_examples():
    rng = np.random.default_rng(4)
    a, b = rng.standard_normal((3, 2)), rng.standard_normal((3, 2))
    np.testing.assert_array_equal(ad.add(T(a), T(np.zeros((3, 2)))).data, a)
    np.testing.assert_array_equal(ad.add(T(a), T(b)).data, ad.add(T(b), T(a)).data)
    with pytest.raises(DimensionError):
        ad.add(T(a), T(np.zeros((2, 3))))


def test_softplus_is_stable():
    out = ad.softplus(T([-1000.0, 0.0, 1000.0])).data
    np.testing.assert_allclose(out, [0.0, np.log(2), 1000.0])


def test_template_abs_diff_layout():
    rng = np.random.default_rng(5)
    s, t = rng.standard_normal((2, 5)), rng.standard_normal((3, 4))
    out = ad.template_abs_diff(T(s), T(t)).data
    assert out.shape == (2, 5, 4, 3)
    for n in range(2):
        for k in range(3):
            np.testing.assert_array_equal(out[n, :, :, k], np.abs(s[n][:, None] - t[k][None, :]))


def test_gradients_accumulate_over_shared_inputs():
    x = T([1.0, 2.0], grad=True)
    y = ad.add(x, x)
    ad.sum_all(y).backward()
    np.testing.assert_array_equal(x.grad, [2.0, 2.0])


def test_no_grad_builds_no_graph():
    x = T([1.0, 2.0], grad=True)
    with ad.no_grad():
        y = ad.relu(x)
    assert not y.requires_grad


# ---------------------------------------------------------------------------
# finite-difference harness


def test_finite_difference_linear_function_exact():
    x = T(np.random.default_rng(6).standard_normal(10))
    # central differences have no truncation error on a linear function, so a
    # wide step only reduces round-off
    err = ad.finite_difference_check(lambda t: ad.sum_all(ad.scale(t, 3.0)), x, 1e-2)
    assert err < 1e-10


def test_finite_difference_quadratic():
    x = T(np.random.default_rng(7).standard_normal((3, 4)))
    err = ad.finite_difference_check(lambda t: ad.sum_all(ad.row_norm(t)), x, 1e-5)
    assert err < 1e-7


def test_finite_difference_detects_wrong_gradient():
    x = T([1.0, 2.0])

    def broken(t):
        return ad._result(np.asarray(t.data.sum()), (t,), lambda g: (2 * np.ones_like(t.data) * g,))

    assert ad.finite_difference_check(broken, x) > 0.4


def test_composed_network_gradient():
    rng = np.random.default_rng(8)
    w1, b1 = T(rng.standard_normal((3, 3, 2, 4)) * 0.5), T(rng.standard_normal(4))
    w2, b2 = T(rng.standard_normal((4, 2))), T(rng.standard_normal(2))
    x = T(rng.standard_normal((2, 6, 6, 2)))

    def net(_):
        h = ad.relu(ad.conv2d(x, w1, b1, 2, 1))
        return ad.sum_all(ad.softplus(ad.linear(ad.global_avg_pool(h), w2, b2)))

    for p in (x, w1, b1, w2, b2):
        assert ad.finite_difference_check(net, p, 1e-6) < 1e-4


@pytest.mark.parametrize("seed", range(5))
def test_every_op_gradient(seed):
    errs = check_ops(seed)
    bad = {k: v for k, v in errs.items() if v >= OP_TOL}
    assert not bad, bad


# ---------------------------------------------------------------------------
# AdamW


def _store(value, grad):
    ps = ParamStore({"p": np.array(value, dtype=np.float64)})
    ps["p"].grad = np.array(grad, dtype=np.float64)
    return ps


def test_adamw_zero_grad_zero_decay_is_noop():
    ps = _store([1.0, -2.0], [0.0, 0.0])
    ad.adamw_step(ps, weight_decay=0.0)
    np.testing.assert_array_equal(ps["p"].data, [1.0, -2.0])


def test_adamw_scalar_hand_step():
    lr, b1, b2, eps, wd = 1e-3, 0.9, 0.999, 1e-8, 1e-2
    ps = _store([0.5], [1.0])
    ad.adamw_step(ps, lr, b1, b2, eps, wd)
    m = (1 - b1) * 1.0
    v = (1 - b2) * 1.0
    m_hat, v_hat = m / (1 - b1), v / (1 - b2)
    expected = 0.5 - lr * m_hat / (np.sqrt(v_hat) + eps) - lr * wd * 0.5
    assert abs(ps["p"].data[0] - expected) < 1e-15
    assert ps.step_count == 1
    assert ps["p"].grad is None
    # second step with grad 2
    ps["p"].grad = np.array([2.0])
    ad.adamw_step(ps, lr, b1, b2, eps, wd)
    m2 = b1 * m + (1 - b1) * 2.0
    v2 = b2 * v + (1 - b2) * 4.0
    expected2 = expected - lr * (m2 / (1 - b1**2)) / (np.sqrt(v2 / (1 - b2**2)) + eps) - lr * wd * expected
    assert abs(ps["p"].data[0] - expected2) < 1e-15


def test_adamw_pure_decay():
    ps = _store([2.0, -4.0], [0.0, 0.0])
    ad.adamw_step(ps, lr=0.1, weight_decay=0.5)
    np.testing.assert_allclose(ps["p"].data, np.array([2.0, -4.0]) * (1 - 0.1 * 0.5), rtol=1e-15)


def test_adamw_missing_grad_is_state_error():
    ps = ParamStore({"a": np.zeros(2), "b": np.zeros(2)})
    ps["a"].grad = np.ones(2)
    with pytest.raises(StateError):
        ad.adamw_step(ps)


def test_adamw_deterministic():
    a, b = _store([0.3, 0.1], [0.2, -1.0]), _store([0.3, 0.1], [0.2, -1.0])
    ad.adamw_step(a)
    ad.adamw_step(b)
    assert a["p"].data.tobytes() == b["p"].data.tobytes()


def test_paramstore_invariants():
    ps = ParamStore()
    ps.add("w", np.zeros((2, 3)))
    with pytest.raises(KeyError):
        ps.add("w", np.zeros(1))
    assert ps.m["w"].shape == (2, 3) and ps.n_values() == 6
    assert ps.astype(np.float32)["w"].data.dtype == np.float32


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(-5, 5, allow_nan=False), min_size=2, max_size=12))
def test_forward_is_bit_reproducible(values):
    x = np.array(values).reshape(1, -1, 1)
    w = np.linspace(-1, 1, 3).reshape(3, 1, 1)
    a = ad.conv1d(T(x), T(w), T([0.1]), 1, 1).data
    b = ad.conv1d(T(x), T(w), T([0.1]), 1, 1).data
    assert a.tobytes() == b.tobytes()

import math

import numpy as np
import pytest

import sfda.autodiff as ad
from sfda.errors import ContractError, ShapeError


def test_matmul_identity():
    a = ad.const(np.eye(2))
    b = ad.const([[3.0, 4.0], [5.0, 6.0]])
    out = ad.matmul(a, b)
    np.testing.assert_array_equal(out.data, [[3.0, 4.0], [5.0, 6.0]])


def test_matmul_dot_product():
    out = ad.matmul(ad.const([[1.0, 2.0]]), ad.const([[3.0], [4.0]]))
    np.testing.assert_array_equal(out.data, [[11.0]])


def test_matmul_shape_mismatch_names_both_shapes():
    with pytest.raises(ShapeError) as exc:
        ad.matmul(ad.const(np.zeros((2, 3))), ad.const(np.zeros((2, 3))))
    assert "(2, 3)" in str(exc.value)


def test_matmul_gradient_matches_ones_times_bt():
    rng = np.random.default_rng(0)
    a = ad.param(rng.normal(size=(3, 4)))
    b = ad.const(rng.normal(size=(4, 2)))
    with ad.Tape() as tape:
        loss = ad.sum_all(ad.matmul(a, b))
    ad.backward(loss, tape)
    expected = np.ones((3, 2)) @ b.data.T
    np.testing.assert_allclose(a.grad, expected, rtol=1e-12)
    # same thing via the finite-difference checker
    err = ad.finite_diff_check(lambda x: ad.sum_all(ad.matmul(x, b)), a)
    assert err < 1e-7


def test_softmax_rows_symmetry():
    out = ad.softmax_rows(ad.const([[0.0, 0.0, 0.0]]))
    np.testing.assert_allclose(out.data, [[1 / 3, 1 / 3, 1 / 3]], atol=1e-15)


def test_softmax_rows_direct_value():
    out = ad.softmax_rows(ad.const([[1.0, 0.0]]))
    e = math.exp(1.0)
    np.testing.assert_allclose(out.data, [[e / (e + 1.0), 1.0 / (e + 1.0)]], rtol=1e-12)
    np.testing.assert_allclose(out.data, [[0.73106, 0.26894]], atol=5e-6)


def test_softmax_rows_stabilized_against_overflow():
    out = ad.softmax_rows(ad.const([[1000.0, 0.0]]))
    assert np.all(np.isfinite(out.data))
    np.testing.assert_allclose(out.data[0, 0], 1.0, atol=1e-12)
    np.testing.assert_allclose(out.data[0, 1], 0.0, atol=1e-12)


def test_softmax_rows_sum_to_one_property():
    rng = np.random.default_rng(7)
    for _ in range(100):
        m, n = rng.integers(1, 7), rng.integers(2, 7)
        x = ad.const(rng.normal(scale=rng.uniform(0.1, 5.0), size=(m, n)))
        y = ad.softmax_rows(x)
        np.testing.assert_allclose(y.data.sum(axis=1), 1.0, atol=1e-9)
        assert np.all(y.data > 0.0) and np.all(y.data < 1.0)


def test_relu_values_and_gradient_mask():
    x = ad.param([-1.0, 0.0, 2.0])
    with ad.Tape() as tape:
        out = ad.sum_all(ad.relu(x))
    np.testing.assert_array_equal(
        ad.relu(ad.const([-1.0, 0.0, 2.0])).data, [0.0, 0.0, 2.0]
    )
    ad.backward(out, tape)
    np.testing.assert_array_equal(x.grad, [0.0, 0.0, 1.0])


def test_relu_all_negative_is_zero():
    out = ad.relu(ad.const([-3.0, -0.5]))
    np.testing.assert_array_equal(out.data, [0.0, 0.0])


def test_relu_gradient_matches_finite_differences_away_from_kink():
    rng = np.random.default_rng(3)
    x = ad.param(rng.normal(size=(4, 3)) + 0.2)
    err = ad.finite_diff_check(lambda t: ad.sum_all(ad.relu(t)), x)
    assert err < 1e-7


def test_kl_self_divergence_is_exactly_zero():
    p = ad.const([[0.2, 0.3, 0.5], [0.25, 0.25, 0.5]])
    q = ad.const([[0.2, 0.3, 0.5], [0.25, 0.25, 0.5]])
    assert ad.kl_divergence_rows(p, q).item() == 0.0


def test_kl_hand_value_log2():
    out = ad.kl_divergence_rows(ad.const([[1.0, 0.0]]), ad.const([[0.5, 0.5]]))
    assert out.item() == pytest.approx(math.log(2.0), rel=1e-12)


def test_kl_nonnegative_on_random_rows():
    rng = np.random.default_rng(11)
    for _ in range(100):
        n = rng.integers(2, 6)
        p = rng.random((3, n)) + 1e-3
        p /= p.sum(axis=1, keepdims=True)
        q = rng.random((3, n)) + 1e-3
        q /= q.sum(axis=1, keepdims=True)
        assert ad.kl_divergence_rows(ad.const(p), ad.const(q)).item() >= 0.0


def test_kl_rejects_unnormalized_rows():
    with pytest.raises(ContractError):
        ad.kl_divergence_rows(ad.const([[0.5, 0.4]]), ad.const([[0.5, 0.5]]))
    with pytest.raises(ContractError):
        ad.kl_divergence_rows(ad.const([[0.5, 0.5]]), ad.const([[0.9, 0.2]]))


def test_backward_sum_gives_ones():
    x = ad.param([1.0, -2.0, 3.0])
    with ad.Tape() as tape:
        loss = ad.sum_all(x)
    ad.backward(loss, tape)
    np.testing.assert_array_equal(x.grad, [1.0, 1.0, 1.0])


def test_backward_relu_composite():
    x = ad.param([-1.0, 2.0])
    with ad.Tape() as tape:
        loss = ad.sum_all(ad.relu(x))
    ad.backward(loss, tape)
    np.testing.assert_array_equal(x.grad, [0.0, 1.0])


def test_backward_rejects_non_scalar_loss():
    x = ad.param([1.0, 2.0])
    with ad.Tape() as tape:
        y = ad.relu(x)
    with pytest.raises(ContractError):
        ad.backward(y, tape)


def test_backward_stops_at_detach_boundary():
    x = ad.param([1.0, 2.0])
    with ad.Tape() as tape:
        hidden = ad.scale(x, 3.0)
        cut = hidden.detach()
        loss = ad.sum_all(ad.mul(cut, cut))
    ad.backward(loss, tape)
    assert x.grad is None
    assert hidden.grad is None


def test_finite_diff_sum_of_squares_is_near_exact():
    rng = np.random.default_rng(5)
    x = ad.param(rng.normal(size=(6,)))
    err = ad.finite_diff_check(lambda t: ad.sum_all(ad.mul(t, t)), x)
    assert err < 1e-7


def test_finite_diff_softmax_kl_composite():
    rng = np.random.default_rng(9)
    x = ad.param(rng.normal(size=(3, 4)))
    q = ad.const(ad.softmax_rows(ad.const(rng.normal(size=(3, 4)))).data)

    def f(t):
        return ad.kl_divergence_rows(ad.softmax_rows(t), q)

    assert ad.finite_diff_check(f, x) < 1e-4


def test_finite_diff_excludes_relu_kink_coordinate():
    # coordinate 0 sits exactly on the relu kink; a naive checker would report
    # a huge mismatch (analytic 0 vs central difference 0.5)
    x = ad.param([0.0, 1.0, -2.0])
    err = ad.finite_diff_check(lambda t: ad.sum_all(ad.relu(t)), x)
    assert err < 1e-7


def test_sgd_step_without_momentum():
    p = ad.param([1.0, 2.0])
    p.grad = np.array([0.5, -0.5])
    ad.sgd_step([p], lr=0.1, momentum=0.0, state={})
    np.testing.assert_allclose(p.data, [0.95, 2.05], rtol=1e-12)
    assert p.grad is None


def test_sgd_step_zero_grad_keeps_params():
    p = ad.param([1.0, 2.0])
    p.grad = np.zeros(2)
    ad.sgd_step([p], lr=0.1, momentum=0.9, state={})
    np.testing.assert_array_equal(p.data, [1.0, 2.0])


def test_sgd_two_momentum_steps_on_constant_grad():
    p = ad.param([0.0])
    state = {}
    g = 2.0
    for _ in range(2):
        p.grad = np.array([g])
        ad.sgd_step([p], lr=0.1, momentum=0.9, state=state)
    # v1 = g, v2 = 0.9 g + g = 1.9 g -> total change lr*g*(1 + 1.9)
    assert p.data[0] == pytest.approx(-0.1 * g * 2.9, rel=1e-12)


def test_sgd_missing_grad_is_contract_error():
    p = ad.param([1.0])
    with pytest.raises(ContractError):
        ad.sgd_step([p], lr=0.1, momentum=0.0, state={})


def test_take_gathers_and_scatters():
    x = ad.param([1.0, 2.0, 3.0, 4.0])
    with ad.Tape() as tape:
        picked = ad.take(x, [3, 1, 3])
        loss = ad.sum_all(picked)
    np.testing.assert_array_equal(picked.data, [4.0, 2.0, 4.0])
    ad.backward(loss, tape)
    np.testing.assert_array_equal(x.grad, [0.0, 1.0, 0.0, 2.0])


def test_masked_logsumexp_rows_matches_naive():
    rng = np.random.default_rng(13)
    x = ad.param(rng.normal(size=(4, 5)))
    mask = rng.random((4, 5)) < 0.6
    mask[2] = False  # an empty row yields 0 with no gradient
    out = ad.masked_logsumexp_rows(x, mask)
    for i in range(4):
        sel = x.data[i][mask[i]]
        expected = math.log(np.exp(sel).sum()) if sel.size else 0.0
        assert out.data[i] == pytest.approx(expected, abs=1e-12)

    def f(t):
        return ad.sum_all(ad.masked_logsumexp_rows(t, mask))

    assert ad.finite_diff_check(f, x) < 1e-6


def test_normalize_rows_unit_norm_and_gradient():
    rng = np.random.default_rng(17)
    x = ad.param(rng.normal(size=(3, 4)))
    out = ad.normalize_rows(x)
    np.testing.assert_allclose(np.linalg.norm(out.data, axis=1), 1.0, rtol=1e-12)
    w = ad.const(rng.normal(size=(3, 4)))

    def f(t):
        return ad.sum_all(ad.mul(ad.normalize_rows(t), w))

    assert ad.finite_diff_check(f, x) < 1e-6
    with pytest.raises(ContractError):
        ad.normalize_rows(ad.const(np.zeros((2, 2))))


def test_smooth_l1_values_and_gradient():
    x = ad.const([-2.0, -0.5, 0.5, 2.0])
    out = ad.smooth_l1(x)
    np.testing.assert_allclose(out.data, [1.5, 0.125, 0.125, 1.5], rtol=1e-12)
    rng = np.random.default_rng(19)
    y = ad.param(rng.normal(scale=2.0, size=(8,)))
    assert ad.finite_diff_check(lambda t: ad.sum_all(ad.smooth_l1(t)), y) < 1e-6


def test_values_view_is_row_major_flat():
    t = ad.const([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(t.values, [1.0, 2.0, 3.0, 4.0])
    assert t.size == 4


def test_grad_accumulates_for_repeated_operand():
    x = ad.param([[1.0, 2.0], [3.0, 4.0]])
    with ad.Tape() as tape:
        loss = ad.sum_all(ad.matmul(x, x))
    ad.backward(loss, tape)
    g = np.ones((2, 2))
    expected = g @ x.data.T + x.data.T @ g
    np.testing.assert_allclose(x.grad, expected, rtol=1e-12)

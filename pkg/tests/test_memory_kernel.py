import math

import numpy as np
import pytest
from hypothesis import assume, given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from oldroyd import memory_kernel as mk

params_st = st.builds(mk.KernelParams, gamma=st.floats(0.01, 10.0), delta=st.floats(0.01, 10.0))
k_st = st.floats(1e-3, 0.9)


def seq_st(max_len=300):
    return st.integers(1, max_len).flatmap(
        lambda n: arrays(np.float64, n, elements=st.floats(-1e3, 1e3, allow_nan=False)))


def test_kernel_params_validation_and_physical_form():
    with pytest.raises(ValueError):
        mk.KernelParams(-1.0, 1.0)
    with pytest.raises(ValueError):
        mk.KernelParams(1.0, 0.0)
    mk.KernelParams(0.0, 1.0)  # memory switched off
    params, mu = mk.KernelParams.from_physical(kappa=0.5, lam=2.0, nu=1.5)
    assert mu == pytest.approx(0.5)
    assert params.delta == pytest.approx(0.5)
    assert params.gamma == pytest.approx(2 * (1.5 - 0.25) / 2.0)
    assert params.total_viscosity(mu) == pytest.approx(0.5 + params.gamma / params.delta)
    # the retardation/relaxation parameterization doubles the physical viscosity
    assert params.total_viscosity(mu) == pytest.approx(2 * 1.5)


def test_kernel_eval():
    p = mk.KernelParams(2.0, 3.0)
    assert mk.kernel_eval(0.0, p) == 2.0
    np.testing.assert_allclose(mk.kernel_eval(np.array([0.0, 1.0]), p), [2.0, 2.0 * math.exp(-3.0)])
    with pytest.raises(ValueError):
        mk.kernel_eval(-0.1, p)


def test_quad_direct_small_hand_case():
    p = mk.KernelParams(1.0, math.log(2.0))  # e^{-delta} = 1/2
    # k = 1: q^3 = beta(2) phi1 + beta(1) phi2 + beta(0) phi3 = 1/4 + 2/2 + 3
    assert mk.quad_direct([1.0, 2.0, 3.0], 1.0, p) == pytest.approx(0.25 + 1.0 + 3.0)
    assert mk.quad_direct(np.zeros((0,)), 0.1, p) == 0.0
    assert mk.quad_direct(np.zeros((0, 4)), 0.1, p).shape == (4,)


@settings(max_examples=60, deadline=None)
@given(seq_st(), k_st, params_st)
def test_recursion_matches_direct_sum(seq, k, params):
    st_ = mk.MemoryState.zero((), k, params, keep_history=True)
    for v in seq:
        st_ = mk.memory_advance(st_, v)
    scale = k * params.gamma * float(np.sum(np.abs(seq))) + 1e-300
    assert abs(float(st_.u_beta) - mk.quad_direct(seq, k, params)) <= 1e-12 * scale
    assert abs(float(st_.u_beta) - float(st_.direct())) <= 1e-12 * scale
    assert st_.n == len(seq)


def test_memory_state_vectors_and_errors():
    p = mk.KernelParams(1.0, 1.0)
    s0 = mk.MemoryState.zero(3, 0.1, p)
    s1 = mk.memory_advance(s0, np.ones(3))
    np.testing.assert_allclose(s1.u_beta, 0.1 * np.ones(3))
    with pytest.raises(ValueError):
        mk.memory_advance(s0, np.ones(4))
    with pytest.raises(RuntimeError):
        s1.direct()
    assert np.all(mk.MemoryState.zero(3, 0.1, p, keep_history=True).direct() == 0)


@settings(max_examples=40, deadline=None)
@given(seq_st(50), k_st, params_st)
def test_memory_difference_identity(seq, k, params):
    """(U_beta^n - U_beta^{n-1}) / k = gamma U^n - (1 - e^{-delta k}) / k U_beta^{n-1}."""
    s = mk.MemoryState.zero((), k, params)
    for v in seq:
        nxt = mk.memory_advance(s, v)
        lhs = (float(nxt.u_beta) - float(s.u_beta)) / k
        rhs = float(mk.memory_difference(nxt, s, v, k, params))
        assert lhs == pytest.approx(rhs, rel=1e-9, abs=1e-9 * (abs(v) * params.gamma + abs(float(s.u_beta)) / k))
        s = nxt


def test_memory_difference_rejects_mismatch():
    p = mk.KernelParams(1.0, 1.0)
    a = mk.MemoryState.zero((), 0.1, p)
    with pytest.raises(ValueError):
        mk.memory_difference(a, a, 1.0, 0.1, p)
    with pytest.raises(ValueError):
        mk.memory_difference(mk.memory_advance(a, 1.0), a, 1.0, 0.2, p)


@settings(max_examples=60, deadline=None)
@given(seq_st(80), k_st, params_st)
def test_positivity(seq, k, params):
    val = mk.positivity_functional(seq, k, params)
    scale = k * k * params.gamma * float(np.sum(np.abs(seq))) ** 2
    assert val >= -1e-12 * scale


def test_positivity_direct_formula_small():
    p = mk.KernelParams(1.0, 1.0)
    k = 0.5
    phi = np.array([1.0, -2.0, 0.5])
    q = [mk.quad_direct(phi[:i + 1], k, p) for i in range(3)]
    assert mk.positivity_functional(phi, k, p) == pytest.approx(k * sum(qi * f for qi, f in zip(q, phi)))
    assert mk.positivity_functional([], k, p) == 0.0


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 200), k_st, st.integers(0, 2 ** 32 - 1))
def test_summation_by_parts(n, k, seed):
    rng = np.random.default_rng(seed)
    a, b = rng.standard_normal(n), rng.standard_normal(n)
    res = mk.summation_by_parts_check(a, b, k)
    scale = float(np.max(np.abs(a))) * k * float(np.sum(np.abs(b)))
    assert np.max(np.abs(res)) <= 1e-13 * 4 * scale


def test_summation_by_parts_length_mismatch():
    with pytest.raises(ValueError):
        mk.summation_by_parts_check(np.ones(3), np.ones(4), 0.1)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 150), k_st, st.integers(0, 2 ** 32 - 1))
def test_convolution_inequality_never_violated(n, k, seed):
    rng = np.random.default_rng(seed)
    g = rng.standard_normal(n + 3)
    phi = rng.standard_normal(n)
    lhs, rhs = mk.convolution_inequality_check(g, phi, k)
    assert lhs <= rhs * (1 + 1e-14)


def test_convolution_inequality_direct_small():
    g = np.array([1.0, 0.5, 0.25])
    phi = np.array([1.0, 2.0, 3.0])
    k = 0.1
    conv = [k * sum(g[i - j] * phi[j] for j in range(i + 1)) for i in range(3)]
    lhs, rhs = mk.convolution_inequality_check(g, phi, k)
    assert lhs == pytest.approx(math.sqrt(k * sum(c * c for c in conv)))
    assert rhs == pytest.approx(k * 1.75 * math.sqrt(k * 14.0))
    with pytest.raises(ValueError):
        mk.convolution_inequality_check(g[:2], phi, k)


@settings(max_examples=60, deadline=None)
@given(seq_st(400), k_st)
def test_hat_and_backward_difference_are_inverse(seq, k):
    assume(np.max(np.abs(seq)) > 0)
    hat = mk.hat_transform(seq, k)
    back = mk.backward_difference(hat, k)
    assert np.max(np.abs(back - seq)) <= 1e-14 * np.max(np.abs(hat)) / k + 1e-300
    again = mk.hat_transform(mk.backward_difference(seq, k, initial=0.0), k)
    assert np.max(np.abs(again - seq)) <= 1e-14 * np.max(np.abs(seq)) * len(seq)


def test_hat_works_on_stacked_vectors():
    seq = np.arange(12.0).reshape(4, 3)
    np.testing.assert_allclose(mk.hat_transform(seq, 0.5), 0.5 * np.cumsum(seq, axis=0))
    np.testing.assert_allclose(mk.backward_difference(seq, 0.5, initial=np.ones(3))[0], (seq[0] - 1) / 0.5)


@pytest.mark.parametrize("phi,exact", [
    (lambda s: 1.0, lambda t, g, d: g * (1 - math.exp(-d * t)) / d),
    (lambda s: math.exp(-s), lambda t, g, d: g * (math.exp(-t) - math.exp(-d * t)) / (d - 1)),
])
def test_quadrature_error_is_first_order(phi, exact):
    p = mk.KernelParams(1.5, 2.0)
    errs = [mk.quadrature_error_estimate(phi, 1.0, k, p, exact=exact(1.0, 1.5, 2.0))
            for k in (1 / 40, 1 / 80, 1 / 160, 1 / 320)]
    ratios = [errs[i] / errs[i + 1] for i in range(3)]
    assert all(1.7 <= r <= 2.3 for r in ratios)


def test_quadrature_error_adaptive_fallback_agrees():
    p = mk.KernelParams(1.0, 2.0)
    phi = lambda s: math.exp(-s)  # noqa: E731
    closed = mk.quadrature_error_estimate(phi, 1.0, 0.05, p, exact=(math.exp(-1) - math.exp(-2)))
    assert mk.quadrature_error_estimate(phi, 1.0, 0.05, p) == pytest.approx(closed, rel=1e-9)
    with pytest.raises(ValueError):
        mk.quadrature_error_estimate(phi, 1.03, 0.05, p)

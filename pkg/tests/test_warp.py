import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hdpgpc.gp import GPBelief
from hdpgpc.kernel import KernelParams, sqexp_cov
from hdpgpc.warp import (
    WarpAux,
    _Objective,
    map_warp,
    segment_warp,
    warp_from_aux,
    warp_log_prior,
    warp_objective,
)

from oracles import mvn_logpdf

THETA = KernelParams(1.0, 2.0, 0.05)
VARTHETA = KernelParams(1.0, 4.0, 1.0)


def test_identity_grid():
    np.testing.assert_allclose(warp_from_aux(np.zeros(5)).g, [1, 2, 3, 4, 5])


def test_hand_softmax():
    np.testing.assert_allclose(warp_from_aux([np.log(2), 0, 0]).g, [1.5, 2.25, 3.0], atol=1e-15)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-20, 20), min_size=2, max_size=40), st.floats(0.01, 100))
def test_monotone_with_exact_endpoint(a, scale):
    g = warp_from_aux(np.array(a), grid_scale=scale).g
    assert np.all(np.diff(g) > 0)
    assert g[-1] == len(a) * scale


def test_rejects_short_or_nonfinite():
    with pytest.raises(ValueError):
        warp_from_aux([0.0])
    with pytest.raises(ValueError):
        WarpAux([np.inf, 0.0])


def test_segment_warp_spans_segment():
    t = np.linspace(0.3, 2.7, 13)
    np.testing.assert_allclose(segment_warp(np.zeros(13), t).g, t, atol=1e-14)


def test_log_prior_examples():
    t = np.array([1.0, 2.0, 3.0])
    white = KernelParams(1e-3, 1e-4, 0.7)  # effectively sigma^2 I
    base = warp_log_prior(t, white, t)
    sig2 = 0.7**2 + 1e-6
    assert base - warp_log_prior(t + 0.2, white, t) == pytest.approx(3 * 0.04 / (2 * sig2), rel=1e-6)
    g = np.array([1.1, 1.9, 3.05])
    K = sqexp_cov(t, t, VARTHETA, include_noise=True)
    assert warp_log_prior(g, VARTHETA, t) == pytest.approx(mvn_logpdf(g, t, K), abs=1e-10)


def _belief(t, mean):
    return GPBelief(mean, 1e-4 * np.eye(len(t)), t, THETA)


def _template(t):
    return np.exp(-0.5 * ((t - 12) / 2.5) ** 2) - 0.6 * np.exp(-0.5 * ((t - 22) / 3.0) ** 2)


def test_gradient_matches_finite_differences():
    rng = np.random.default_rng(0)
    t = np.arange(1.0, 31.0)
    y = _template(t) + 0.05 * rng.normal(size=30)
    obj = _Objective(y, t, _belief(t, _template(t)), THETA, VARTHETA, emission_cov=0.01 * np.eye(30))
    a = 0.3 * rng.normal(size=30)
    _, g = obj.value_grad_a(a)
    eps = 1e-6
    fd = np.array([(obj.value_grad_a(a + eps * e)[0] - obj.value_grad_a(a - eps * e)[0]) / (2 * eps)
                   for e in np.eye(30)])
    np.testing.assert_allclose(g, fd, atol=1e-4 * max(1.0, np.abs(fd).max()))


def test_identity_recovered_when_segment_equals_mean():
    t = np.arange(1.0, 31.0)
    res = map_warp(t, _template(t), _belief(t, _template(t)), THETA, VARTHETA)
    assert np.abs(res.warp.g - t).max() <= 0.1
    assert np.all(np.diff(res.warp.g) > 0)


def test_ascent_and_shift_invariance():
    rng = np.random.default_rng(1)
    t = np.arange(1.0, 31.0)
    y = _template(t + 1.0)
    bel = _belief(t, _template(t))
    init = WarpAux(0.2 * rng.normal(size=30))
    res = map_warp(t, y, bel, THETA, VARTHETA, init=init)
    assert res.objective >= warp_objective(t, y, bel, THETA, VARTHETA, init) - 1e-9
    shifted = map_warp(t, y, bel, THETA, VARTHETA, init=WarpAux(init.a + 3.7))
    np.testing.assert_allclose(shifted.warp.g, res.warp.g, atol=1e-12)


def test_recovery_of_smooth_warp_at_20db():
    rng = np.random.default_rng(2)
    Q = 40
    t = np.arange(1.0, Q + 1.0)
    x = _template(t * 0.75 + 2)
    a_true = 0.25 * np.sin(np.linspace(0, np.pi, Q))
    g_true = warp_from_aux(a_true).g
    y_clean = _template(g_true * 0.75 + 2)
    noise_sd = np.sqrt(np.mean(y_clean**2) / 100.0)
    y = y_clean + noise_sd * rng.normal(size=Q)
    theta = KernelParams(1.0, 2.0, noise_sd)
    res = map_warp(t, y, GPBelief(x, 1e-6 * np.eye(Q), t, theta), theta, VARTHETA)
    assert np.sqrt(np.mean((res.warp.g - g_true) ** 2)) <= 0.5


def test_prior_vanishes_with_huge_noise():
    t = np.arange(1.0, 21.0)
    y = _template(t + 0.5)
    bel = _belief(t, _template(t))
    flat = KernelParams(1.0, 4.0, 1e6)
    a = 0.1 * np.sin(np.arange(20.0))
    with_prior = warp_objective(t, y, bel, THETA, flat, a)
    without = warp_objective(t, y, bel, THETA, flat, a, use_prior=False)
    const = warp_objective(t, y, bel, THETA, flat, np.zeros(20)) - warp_objective(
        t, y, bel, THETA, flat, np.zeros(20), use_prior=False)
    assert abs((with_prior - without) - const) < 1e-6

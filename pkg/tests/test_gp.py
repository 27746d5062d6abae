import time

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hdpgpc.gp import GPBelief, InducingSet, gp_condition, predict_at_warp, project_to_inducing
from hdpgpc.kernel import KernelParams, sqexp_cov

from oracles import condition

KP = KernelParams(1.2, 0.9, 0.25)


def test_noiseless_interpolation():
    p = KernelParams(1.0, 1.0, 1e-9)
    t = np.array([0.0, 1.0, 2.5])
    y = np.array([0.5, -0.2, 1.0])
    b = gp_condition(p, t, y, t)
    np.testing.assert_allclose(b.mean, y, atol=1e-6)
    assert np.abs(b.cov).max() < 1e-6


def test_empty_training_set_is_prior():
    ts = np.array([0.0, 0.4])
    b = gp_condition(KP, [], [], ts)
    np.testing.assert_array_equal(b.mean, 0.0)
    np.testing.assert_allclose(b.cov, sqexp_cov(ts, ts, KP))


def _joint_oracle(t_train, y_train, t_test, p):
    allt = np.r_[t_test, t_train]
    K = sqexp_cov(allt, allt, p)
    n = len(t_test)
    K[n:, n:] += p.sigma_n**2 * np.eye(len(t_train))
    return condition(np.zeros(len(allt)), K, np.arange(n, len(allt)), y_train)


def test_condition_matches_schur_oracle():
    b = gp_condition(KP, [0.0, 1.0], [0.7, -0.4], [0.4])
    m, S = _joint_oracle(np.array([0.0, 1.0]), np.array([0.7, -0.4]), np.array([0.4]), KP)
    np.testing.assert_allclose(b.mean, m, atol=1e-10)
    np.testing.assert_allclose(b.cov, S, atol=1e-10)


def test_condition_exchangeable():
    a = gp_condition(KP, [0.0, 1.0], [0.7, -0.4], [0.3, 2.0])
    b = gp_condition(KP, [1.0, 0.0], [-0.4, 0.7], [0.3, 2.0])
    np.testing.assert_allclose(a.mean, b.mean, atol=1e-10)
    np.testing.assert_allclose(a.cov, b.cov, atol=1e-10)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(0, 10), min_size=1, max_size=6), st.lists(st.floats(-3, 3), min_size=6, max_size=6))
def test_predictive_variance_below_prior(tt, yy):
    t = np.array(sorted(set(tt)))
    b = gp_condition(KP, t, np.array(yy[:len(t)]), np.linspace(0, 10, 7))
    assert np.all(np.diag(b.cov) <= KP.sigma_f**2 + 1e-12)


def test_identity_projection():
    rng = np.random.default_rng(0)
    t = np.linspace(0, 3, 5)
    X = rng.normal(size=(5, 5))
    bel = GPBelief(rng.normal(size=5), 0.1 * X @ X.T, t, KP)
    out = project_to_inducing(bel, InducingSet(t, KP))
    np.testing.assert_allclose(out.mean, bel.mean, atol=1e-9)
    np.testing.assert_allclose(out.cov, bel.cov, atol=1e-9)


def test_single_inducing_point_is_kriging():
    t = np.array([0.0, 1.0, 2.0])
    bel = GPBelief(np.array([0.2, 1.0, 0.3]), np.zeros((3, 3)), t, KP)
    out = project_to_inducing(bel, InducingSet([0.6], KP))
    k = sqexp_cov([0.6], t, KP)
    K = sqexp_cov(t, t, KP)
    assert out.mean[0] == pytest.approx(float((k @ np.linalg.solve(K, bel.mean))[0]), abs=1e-8)


def test_projection_round_trip_reproduces_smooth_mean():
    t = np.linspace(0, 10, 40)
    y = np.sin(t / 1.5)
    bel = gp_condition(KP, t, y, t)
    ind = InducingSet(np.linspace(0, 10, 20), KP)
    back = ind.projection(t) @ project_to_inducing(bel, ind).mean
    assert np.abs(back - bel.mean).max() < 1e-3


def _warp_oracle(x_mean, x_cov, t_obs, t_w, p):
    # joint of (f(t_obs), f(t_w)); x = f(t_obs) ~ N(x_mean, x_cov) via law of total variance
    allt = np.r_[t_w, t_obs]
    K = sqexp_cov(allt, allt, p)
    n = len(t_w)
    G = K[:n, n:] @ np.linalg.inv(K[n:, n:])
    mean = G @ x_mean
    cov = K[:n, :n] - G @ K[n:, :n] + G @ x_cov @ G.T + p.sigma_n**2 * np.eye(n)
    return mean, cov


def test_predict_at_warp_identity_cases():
    p = KernelParams(1.0, 1.0, 1e-12)
    t = np.array([0.0, 1.0, 2.0])
    m = np.array([1.0, 2.0, 0.5])
    out = predict_at_warp(GPBelief(m, np.zeros((3, 3)), t, p), t, t)
    np.testing.assert_allclose(out.mean, m, atol=1e-6)
    assert np.abs(out.cov).max() < 1e-6
    C = np.array([[0.5, 0.1, 0.0], [0.1, 0.4, 0.1], [0.0, 0.1, 0.3]])
    out = predict_at_warp(GPBelief(m, C, t, p), t, t)
    np.testing.assert_allclose(out.cov, C, atol=1e-6)


def test_predict_at_warp_matches_dense_joint():
    rng = np.random.default_rng(3)
    t = np.array([0.0, 0.8, 1.9])
    tw = np.array([0.2, 1.1, 1.7])
    X = rng.normal(size=(3, 3))
    bel = GPBelief(rng.normal(size=3), 0.1 * X @ X.T, t, KP)
    out = predict_at_warp(bel, t, tw)
    m, S = _warp_oracle(bel.mean, bel.cov, t, tw, KP)
    np.testing.assert_allclose(out.mean, m, atol=1e-9)
    np.testing.assert_allclose(out.cov, S, atol=1e-9)
    assert np.linalg.eigvalsh(out.cov).min() >= 0


def test_predict_at_warp_requires_matching_support():
    bel = GPBelief(np.zeros(3), np.eye(3), np.arange(3.0), KP)
    with pytest.raises(ValueError):
        predict_at_warp(bel, np.arange(4.0), np.arange(3.0))


def test_condition_runtime_small():
    t0 = time.perf_counter()
    for _ in range(200):
        gp_condition(KP, np.arange(5.0), np.ones(5), [0.5])
    assert time.perf_counter() - t0 < 1.0

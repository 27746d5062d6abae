"""Brute-force references used by the test suite."""

import itertools

import numpy as np


def mvn_logpdf(x, mean, cov):
    d = x - mean
    sign, logdet = np.linalg.slogdet(cov)
    assert sign > 0
    return float(-0.5 * d @ np.linalg.solve(cov, d) - 0.5 * logdet - 0.5 * len(x) * np.log(2 * np.pi))


def condition(mean, cov, idx_obs, values):
    """Condition a joint normal on a subset of coordinates (Schur complement)."""
    idx_obs = np.asarray(idx_obs)
    rest = np.setdiff1d(np.arange(len(mean)), idx_obs)
    Soo = cov[np.ix_(idx_obs, idx_obs)]
    Sro = cov[np.ix_(rest, idx_obs)]
    gain = Sro @ np.linalg.inv(Soo)
    m = mean[rest] + gain @ (values - mean[idx_obs])
    S = cov[np.ix_(rest, rest)] - gain @ Sro.T
    return m, S


def chain_joint(m0, P0, A, Q, Hs, noises):
    """Joint normal of (f_0..f_T, y_1..y_T) for a linear-Gaussian chain."""
    d = len(m0)
    T = len(Hs)
    # f_n = A^n f_0 + sum_{j<=n} A^{n-j} w_j
    nf = d * (T + 1)
    dims = [H.shape[0] for H in Hs]
    ny = sum(dims)
    # express everything as a linear map of the independent sources (f_0, w_1..w_T, v_1..v_T)
    src_cov = [P0] + [Q] * T + list(noises)
    src_dims = [d] * (T + 1) + dims
    ns = sum(src_dims)
    Lmap = np.zeros((nf + ny, ns))
    offs = np.cumsum([0] + src_dims)
    for n in range(T + 1):
        for j in range(n + 1):
            Lmap[n * d:(n + 1) * d, offs[j]:offs[j] + d] = np.linalg.matrix_power(A, n - j)
    row = nf
    for n in range(1, T + 1):
        H = Hs[n - 1]
        Lmap[row:row + dims[n - 1]] = H @ Lmap[n * d:(n + 1) * d]
        k = T + n
        Lmap[row:row + dims[n - 1], offs[k]:offs[k] + dims[n - 1]] = np.eye(dims[n - 1])
        row += dims[n - 1]
    S = np.zeros((ns, ns))
    for k, C in enumerate(src_cov):
        S[offs[k]:offs[k + 1], offs[k]:offs[k + 1]] = C
    mu_src = np.zeros(ns)
    mu_src[:d] = m0
    return Lmap @ mu_src, Lmap @ S @ Lmap.T, nf


def enumerate_paths(log_init, log_trans, log_lik):
    """Exact marginals of a discrete chain by summing over every path."""
    N, K = log_lik.shape
    r = np.zeros((N, K))
    xi = np.zeros((N, K + 1, K))  # row 0 of xi[0] is the initial-state row
    Z = 0.0
    for path in itertools.product(range(K), repeat=N):
        lw = log_init[path[0]] + log_lik[0, path[0]]
        for n in range(1, N):
            lw += log_trans[path[n - 1], path[n]] + log_lik[n, path[n]]
        w = np.exp(lw)
        Z += w
        for n, k in enumerate(path):
            r[n, k] += w
        xi[0, 0, path[0]] += w
        for n in range(1, N):
            xi[n, path[n - 1] + 1, path[n]] += w
    return r / Z, xi / Z, np.log(Z)

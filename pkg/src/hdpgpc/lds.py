"""Per-cluster linear dynamics: MNIW conjugate updates and weighted Kalman passes.

State ``f`` lives on a cluster's inducing locations.  One step of the chain is::

    f_n = A f_{n-1} + w,        w ~ N(0, Q)
    x_n = C f_n + e,            e ~ N(0, E)
    y_n = Khat_n x_n + v,       v ~ N(0, R_n)

where ``Khat_n`` projects inducing values onto the (warped) observation
times and ``R_n`` is the GP conditional covariance plus observation noise.
"""

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import digamma, multigammaln

from .gp import chol_logdet, psd_cholesky
from .kernel import LOG_2PI, chol_solve

__all__ = [
    "MNIWPosterior",
    "SuffStats",
    "FilterStep",
    "ChainBelief",
    "mniw_update",
    "mniw_kl",
    "mniw_logpdf",
    "innovation_weight_cov",
    "kalman_step",
    "kalman_forward",
    "kalman_backward",
    "emission_marginal",
    "transition_stats",
]

R_SKIP = 1e-12


def _sym(S):
    return 0.5 * (S + S.T)


@dataclass(frozen=True)
class MNIWPosterior:
    """Matrix-normal inverse-Wishart: ``A | S ~ MN(M, S, V^{-1})``, ``S ~ IW(dof, Sc)``.

    ``V`` is the column-side precision (``Psi_{m-1,m-1}`` after an update)
    and ``S`` the inverse-Wishart scale.
    """

    M: np.ndarray
    V: np.ndarray
    S: np.ndarray
    dof: float

    def __post_init__(self):
        M, V, S = (np.atleast_2d(np.asarray(x, dtype=float)) for x in (self.M, self.V, self.S))
        d, m = M.shape
        if V.shape != (m, m) or S.shape != (d, d):
            raise ValueError("MNIW shapes disagree")
        if not self.dof > d - 1:
            raise ValueError("dof must exceed dim - 1")
        object.__setattr__(self, "M", M)
        object.__setattr__(self, "V", _sym(V))
        object.__setattr__(self, "S", _sym(S))
        object.__setattr__(self, "dof", float(self.dof))

    @property
    def dim(self):
        return self.M.shape[0]

    def noise_cov(self, convention="scale"):
        """Plug-in noise covariance.

        ``"scale"`` returns the raw scale matrix, ``"mean"`` the IW mean
        ``S / (dof - d - 1)`` and ``"mode"`` the joint MNIW mode
        ``S / (dof + d + m + 1)``.
        """
        if convention == "scale":
            return self.S
        if convention == "mode":
            return self.S / (self.dof + self.dim + self.M.shape[1] + 1.0)
        if convention == "mean":
            denom = self.dof - self.dim - 1.0
            if denom <= 0:
                raise ValueError("IW mean undefined for dof <= dim + 1")
            return self.S / denom
        raise ValueError(f"unknown noise convention {convention!r}")


@dataclass(frozen=True)
class SuffStats:
    """Summed second moments: ``xx = sum E[h h^T]``, ``yx = sum E[z h^T]``, ``yy = sum E[z z^T]``."""

    xx: np.ndarray
    yx: np.ndarray
    yy: np.ndarray

    @classmethod
    def zeros(cls, d, m=None):
        m = d if m is None else m
        return cls(np.zeros((m, m)), np.zeros((d, m)), np.zeros((d, d)))

    def __add__(self, other):
        return SuffStats(self.xx + other.xx, self.yx + other.yx, self.yy + other.yy)

    def scaled(self, w):
        return SuffStats(w * self.xx, w * self.yx, w * self.yy)


def mniw_update(prior, stats, N_k):
    """Conjugate posterior from regression statistics with effective count ``N_k``."""
    if N_k < 0:
        raise ValueError("N_k must be non-negative")
    M, V = prior.M, prior.V
    psi_xx = _sym(stats.xx + V)
    psi_yx = stats.yx + M @ V
    psi_yy = _sym(stats.yy + M @ V @ M.T)
    L = psd_cholesky(psi_xx)
    M_new = chol_solve(L, psi_yx.T).T
    psi_cond = _sym(psi_yy - M_new @ psi_yx.T)
    return MNIWPosterior(M_new, psi_xx, psi_cond + prior.S, N_k + prior.dof)


def _iw_expectations(post):
    """``E[S^{-1}]`` and ``E[log |S|]`` under ``IW(dof, S)``."""
    d = post.dim
    L = psd_cholesky(post.S)
    e_inv = post.dof * chol_solve(L, np.eye(d))
    i = np.arange(1, d + 1)
    e_logdet = chol_logdet(L) - d * math.log(2.0) - digamma((post.dof - i + 1) / 2.0).sum()
    return e_inv, e_logdet


def mniw_kl(q, p):
    """``KL[q || p]`` between two MNIW distributions of equal shape."""
    d, m = q.M.shape
    # inverse-Wishart part, written through the Wishart law of the precision
    Lq, Lp = psd_cholesky(q.S), psd_cholesky(p.S)
    n1, n0 = q.dof, p.dof
    kl_iw = (0.5 * n0 * (chol_logdet(Lq) - chol_logdet(Lp))
             + 0.5 * n1 * np.trace(chol_solve(Lq, p.S)) - 0.5 * n1 * d
             + multigammaln(n0 / 2.0, d) - multigammaln(n1 / 2.0, d)
             + 0.5 * (n1 - n0) * _multidigamma(n1 / 2.0, d))
    e_inv, _ = _iw_expectations(q)
    Lvq, Lvp = psd_cholesky(q.V), psd_cholesky(p.V)
    delta = q.M - p.M
    kl_mn = 0.5 * (d * np.trace(chol_solve(Lvq, p.V)) - d * m
                   + d * (chol_logdet(Lvq) - chol_logdet(Lvp))
                   + np.trace(e_inv @ delta @ p.V @ delta.T))
    return float(kl_iw + kl_mn)


def mniw_logpdf(post, A, Sigma):
    """Joint log density of ``(A, Sigma)`` under ``post``."""
    d, m = post.M.shape
    Ls, Lsig, Lv = psd_cholesky(post.S), psd_cholesky(Sigma), psd_cholesky(post.V)
    nu = post.dof
    log_iw = (0.5 * nu * chol_logdet(Ls) - 0.5 * nu * d * math.log(2.0) - multigammaln(nu / 2.0, d)
              - 0.5 * (nu + d + 1) * chol_logdet(Lsig) - 0.5 * np.trace(chol_solve(Lsig, post.S)))
    D = np.asarray(A, dtype=float) - post.M
    log_mn = (-0.5 * d * m * LOG_2PI - 0.5 * m * chol_logdet(Lsig) + 0.5 * d * chol_logdet(Lv)
              - 0.5 * np.trace(post.V @ D.T @ chol_solve(Lsig, D)))
    return float(log_iw + log_mn)


def _multidigamma(a, d):
    return digamma(a - 0.5 * np.arange(d)).sum()


@dataclass(frozen=True)
class FilterStep:
    mean: np.ndarray        # filtered
    cov: np.ndarray
    pred_mean: np.ndarray   # A mu_{n-1}
    pred_cov: np.ndarray    # P = A Sigma A^T + Q
    loglik: float           # log N(y | predicted, innovation)
    phi: np.ndarray = None  # weighted pseudo-observation covariance (scaled weighting)
    gain: np.ndarray = None


@dataclass
class ChainBelief:
    """Filtered and smoothed chain; index 0 is the initial state ``f_0``."""

    filt_mean: np.ndarray
    filt_cov: np.ndarray
    pred_mean: np.ndarray
    pred_cov: np.ndarray
    mean: np.ndarray
    cov: np.ndarray
    cross: np.ndarray       # cross[n] = Cov(f_n, f_{n-1}), cross[0] unused
    loglik: float = 0.0
    entropy: float = 0.0    # differential entropy of the joint q(f_0..f_N)

    @property
    def n_steps(self):
        return self.mean.shape[0] - 1


def innovation_weight_cov(C, P, E, r):
    """``Phi = (C P C^T + E) / r``: the responsibility-weighted pseudo-observation covariance."""
    return _sym(C @ P @ C.T + E) / r


def kalman_step(mean, cov, A, Q, C, E, y, proj, R, r, weighting="scaled"):
    """One predict/update step with responsibility ``r``.

    ``weighting="scaled"`` divides ``C P C^T + E`` by ``r``; ``"tempered"``
    divides only the emission and observation noise, which raises the
    likelihood to the power ``r``.  Both agree at ``r = 1``.  For
    ``r < 1e-12`` the update is skipped (zero gain).
    """
    pm = A @ mean
    P = _sym(A @ cov @ A.T + Q)
    if r < R_SKIP:
        return FilterStep(pm, P, pm, P, 0.0)
    H = proj @ C
    phi = None
    if weighting == "scaled":
        phi = innovation_weight_cov(C, P, E, r)
        S = proj @ phi @ proj.T + R
    elif weighting == "tempered":
        S = H @ P @ H.T + (proj @ E @ proj.T + R) / r
    else:
        raise ValueError(f"unknown weighting {weighting!r}")
    L = psd_cholesky(S)
    innov = y - H @ pm
    gain = chol_solve(L, H @ P).T
    new_mean = pm + gain @ innov
    new_cov = _sym(P - gain @ H @ P)
    ll = float(-0.5 * innov @ chol_solve(L, innov) - 0.5 * chol_logdet(L) - 0.5 * len(y) * LOG_2PI)
    return FilterStep(new_mean, new_cov, pm, P, ll, phi, gain)


def kalman_forward(prior_mean, prior_cov, A, Q, C, E, observations, weighting="scaled"):
    """Filter a chain.  ``observations`` holds ``(y, proj, R, r)`` or ``None`` per step.

    Returns a list whose entry 0 is the initial state.
    """
    steps = [FilterStep(np.asarray(prior_mean, float), _sym(np.asarray(prior_cov, float)),
                        np.asarray(prior_mean, float), _sym(np.asarray(prior_cov, float)), 0.0)]
    for obs in observations:
        prev = steps[-1]
        if obs is None:
            steps.append(kalman_step(prev.mean, prev.cov, A, Q, C, E, None, None, None, 0.0))
        else:
            y, proj, R, r = obs
            steps.append(kalman_step(prev.mean, prev.cov, A, Q, C, E, y, proj, R, r, weighting))
    return steps


def kalman_backward(steps, A):
    """Rauch-Tung-Striebel smoothing with gain ``J = Sigma A^T P^{-1}``.

    Also returns the joint entropy, accumulated through the backward
    conditionals ``q(f_n | f_{n+1})`` whose covariance is written in the
    Joseph form ``(I - J A) Sigma (I - J A)^T + J Q J^T`` to stay PSD.
    """
    T = len(steps)
    d = steps[0].mean.shape[0]
    filt_mean = np.array([s.mean for s in steps])
    filt_cov = np.array([s.cov for s in steps])
    pred_mean = np.array([s.pred_mean for s in steps])
    pred_cov = np.array([s.pred_cov for s in steps])
    mean = filt_mean.copy()
    cov = filt_cov.copy()
    cross = np.zeros((T, d, d))
    eye = np.eye(d)
    logdet = chol_logdet(psd_cholesky(cov[-1]))
    for n in range(T - 2, -1, -1):
        P = pred_cov[n + 1]
        J = chol_solve(psd_cholesky(P), A @ filt_cov[n]).T
        mean[n] = filt_mean[n] + J @ (mean[n + 1] - pred_mean[n + 1])
        cov[n] = _sym(filt_cov[n] + J @ (cov[n + 1] - P) @ J.T)
        cross[n + 1] = cov[n + 1] @ J.T
        Q = P - A @ filt_cov[n] @ A.T
        IJA = eye - J @ A
        logdet += chol_logdet(psd_cholesky(IJA @ filt_cov[n] @ IJA.T + J @ Q @ J.T))
    entropy = 0.5 * logdet + 0.5 * T * d * (1.0 + LOG_2PI)
    loglik = float(sum(s.loglik for s in steps))
    return ChainBelief(filt_mean, filt_cov, pred_mean, pred_cov, mean, cov, cross, loglik, float(entropy))


def emission_marginal(M_C, S_eps, mean_f, cov_f):
    """Pseudo-observation marginal ``N(M_C mu, S_eps + M_C Sigma M_C^T)``."""
    mean = M_C @ mean_f
    cov = _sym(S_eps + M_C @ cov_f @ M_C.T)
    return mean, cov


def transition_stats(chain, weights):
    """Weighted sums of smoothed moments for the transitions ``n-1 -> n``."""
    mu, S, X = chain.mean, chain.cov, chain.cross
    w = np.asarray(weights, dtype=float)
    Eprev = S[:-1] + np.einsum("ni,nj->nij", mu[:-1], mu[:-1])
    Ecur = S[1:] + np.einsum("ni,nj->nij", mu[1:], mu[1:])
    Ecross = X[1:] + np.einsum("ni,nj->nij", mu[1:], mu[:-1])
    return SuffStats(np.einsum("n,nij->ij", w, Eprev), np.einsum("n,nij->ij", w, Ecross),
                     np.einsum("n,nij->ij", w, Ecur))

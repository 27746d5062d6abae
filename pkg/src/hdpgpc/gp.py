"""GP conditioning, inducing-point projection and prediction at warped inputs.

All solves go through Cholesky factors; nothing here forms an explicit inverse.
"""

from dataclasses import dataclass, field

import numpy as np

from .kernel import KernelParams, chol_solve, jitter_cholesky, kernel_cholesky, sqexp_cov

__all__ = [
    "GPBelief",
    "InducingSet",
    "uniform_inducing",
    "gp_condition",
    "project_to_inducing",
    "predict_at_warp",
]

DEFAULT_P = 32


def _sym(S):
    return 0.5 * (S + S.T)


@dataclass(frozen=True)
class GPBelief:
    """Gaussian belief ``N(mean, cov)`` over function values at ``support``."""

    mean: np.ndarray
    cov: np.ndarray
    support: np.ndarray
    kernel: KernelParams

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=float)
        cov = np.asarray(self.cov, dtype=float)
        support = np.asarray(self.support, dtype=float)
        if mean.shape != support.shape or cov.shape != (len(mean), len(mean)):
            raise ValueError("mean, cov and support shapes disagree")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)
        object.__setattr__(self, "support", support)


@dataclass(frozen=True)
class InducingSet:
    """Fixed inducing locations with a cached factor of the noiseless ``K_pp``.

    ``nugget`` adds ``nugget * sigma_f^2`` to the diagonal of ``K_pp``; dense
    grids of a smooth kernel need it to keep the projection well conditioned.
    """

    locations: np.ndarray
    kernel: KernelParams
    nugget: float = 0.0
    chol: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        loc = np.asarray(self.locations, dtype=float)
        if loc.ndim != 1 or len(loc) == 0:
            raise ValueError("inducing locations must be a non-empty vector")
        if np.any(np.diff(loc) <= 0):
            raise ValueError("inducing locations must be strictly increasing")
        object.__setattr__(self, "locations", loc)
        object.__setattr__(self, "chol", kernel_cholesky(loc, self.kernel, nugget=self.nugget))

    @property
    def size(self):
        return len(self.locations)

    def projection(self, t):
        """``K_{t,p} K_{p,p}^{-1}``, mapping inducing values to inputs ``t``."""
        Ktp = sqexp_cov(t, self.locations, self.kernel)
        return chol_solve(self.chol, Ktp.T).T

    def residual_cov(self, t, include_noise=True):
        """Conditional covariance ``K_tt - K_tp K_pp^{-1} K_pt`` (plus noise)."""
        Ktp = sqexp_cov(t, self.locations, self.kernel)
        Ktt = sqexp_cov(t, t, self.kernel, include_noise=include_noise)
        return _sym(Ktt - Ktp @ chol_solve(self.chol, Ktp.T))


def uniform_inducing(t, kernel, p=DEFAULT_P):
    """Uniform grid of ``min(len(t), p)`` points spanning ``t``."""
    t = np.asarray(t, dtype=float)
    p = min(len(t), p)
    return InducingSet(np.linspace(t[0], t[-1], p), kernel)


def gp_condition(prior_kernel, t_train, y_train, t_test):
    """Predictive belief of the latent function at ``t_test`` given noisy data."""
    t_test = np.asarray(t_test, dtype=float)
    t_train = np.asarray(t_train, dtype=float)
    y_train = np.asarray(y_train, dtype=float)
    if t_train.shape != y_train.shape:
        raise ValueError("t_train and y_train must have equal length")
    Kss = sqexp_cov(t_test, t_test, prior_kernel)
    if len(t_train) == 0:
        return GPBelief(np.zeros(len(t_test)), Kss, t_test, prior_kernel)
    L = kernel_cholesky(t_train, prior_kernel, include_noise=True)
    Kst = sqexp_cov(t_test, t_train, prior_kernel)
    mean = Kst @ chol_solve(L, y_train)
    cov = Kss - Kst @ chol_solve(L, Kst.T)
    return GPBelief(mean, _sym(cov), t_test, prior_kernel)


def _conditional_predict(belief, t_new, include_noise):
    kern = belief.kernel
    L = kernel_cholesky(belief.support, kern)
    Kns = sqexp_cov(t_new, belief.support, kern)
    P = chol_solve(L, Kns.T).T  # K_ns K_ss^{-1}
    Knn = sqexp_cov(t_new, t_new, kern, include_noise=include_noise)
    mean = P @ belief.mean
    cov = Knn - P @ Kns.T + P @ belief.cov @ P.T
    return mean, _sym(cov)


def project_to_inducing(belief_at_q, inducing):
    """Belief implied at the inducing locations by a belief at ``q`` inputs.

    The belief is extended through the GP conditional of the kernel it
    carries, so with ``p = q`` on identical locations the projection is the
    identity, and the inducing mean maps back through ``K_tp K_pp^{-1}``.
    Locations outside the support range still work; they are extrapolated.
    """
    mean, cov = _conditional_predict(belief_at_q, inducing.locations, include_noise=False)
    return GPBelief(mean, cov, inducing.locations, belief_at_q.kernel)


def predict_at_warp(x_belief, t_obs, t_warped):
    """Marginal of the observations at warped inputs given a pseudo-observation belief.

    ``x_belief`` lives on ``t_obs``.  The covariance is the GP conditional at
    ``t_warped`` plus the propagated uncertainty of ``x``; observation noise
    ``sigma_n^2`` enters on the diagonal.
    """
    t_obs = np.asarray(t_obs, dtype=float)
    if t_obs.shape != x_belief.support.shape or not np.allclose(t_obs, x_belief.support):
        raise ValueError("x_belief must be defined on t_obs")
    t_warped = np.asarray(t_warped, dtype=float)
    mean, cov = _conditional_predict(x_belief, t_warped, include_noise=True)
    return GPBelief(mean, cov, t_warped, x_belief.kernel)


def chol_logdet(L):
    return 2.0 * np.log(np.diag(L)).sum()


def psd_cholesky(S):
    """Factor a generic (non-kernel) covariance; jitter only if the plain factor fails."""
    return jitter_cholesky(_sym(np.asarray(S, dtype=float)), floor=np.inf)

"""Global HDP factors: Beta stick posteriors and Dirichlet transition posteriors."""

import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy import optimize
from scipy.special import betaln, digamma, gammaln

from .kernel import ConvergenceWarning

__all__ = [
    "HDPConfig",
    "StickPosterior",
    "TransitionPosterior",
    "expected_beta",
    "update_transition_posterior",
    "expected_log_pi",
    "stick_objective",
    "optimize_sticks",
    "transition_bound",
    "stick_bound",
]

LAMBDA_BOUNDS = (1e-4, 1.0 - 1e-4)
ETA_BOUNDS = (1e-2, 1e4)


@dataclass(frozen=True)
class HDPConfig:
    gamma: float = 10.0
    alpha: float = 20.0

    def __post_init__(self):
        if not (self.gamma > 0 and self.alpha > 0):
            raise ValueError("HDP concentrations must be positive")


@dataclass(frozen=True)
class StickPosterior:
    """``q(v_k) = Beta(lambda_k eta_k, (1 - lambda_k) eta_k)`` for ``k = 1..K``."""

    lam: np.ndarray
    eta: np.ndarray

    def __post_init__(self):
        lam = np.atleast_1d(np.asarray(self.lam, dtype=float))
        eta = np.atleast_1d(np.asarray(self.eta, dtype=float))
        if lam.shape != eta.shape or lam.ndim != 1:
            raise ValueError("lam and eta must be vectors of equal length")
        if np.any((lam <= 0) | (lam >= 1)) or np.any(eta <= 0):
            raise ValueError("need 0 < lam < 1 and eta > 0")
        object.__setattr__(self, "lam", lam)
        object.__setattr__(self, "eta", eta)

    @property
    def K(self):
        return len(self.lam)

    @classmethod
    def prior(cls, K, gamma, eta=None):
        """Sticks at the prior mean ``1 / (1 + gamma)`` with ``eta = 1 + gamma``."""
        return cls(np.full(K, 1.0 / (1.0 + gamma)), np.full(K, 1.0 + gamma if eta is None else eta))

    def extend(self, gamma, eta=None):
        new = StickPosterior.prior(1, gamma, eta)
        return StickPosterior(np.r_[self.lam, new.lam], np.r_[self.eta, new.eta])

    def remove(self, k):
        return StickPosterior(np.delete(self.lam, k), np.delete(self.eta, k))


@dataclass(frozen=True)
class TransitionPosterior:
    """Dirichlet parameters; row 0 is the initial state, last column the inactive mass."""

    kappa: np.ndarray

    def __post_init__(self):
        kappa = np.asarray(self.kappa, dtype=float)
        if kappa.ndim != 2 or kappa.shape[0] != kappa.shape[1]:
            raise ValueError("kappa must be (K+1) x (K+1)")
        if np.any(kappa <= 0):
            raise ValueError("kappa entries must be positive")
        object.__setattr__(self, "kappa", kappa)

    @property
    def K(self):
        return self.kappa.shape[0] - 1


def expected_beta(sticks):
    """``E[beta_k] = lambda_k prod_{j<k}(1 - lambda_j)``, remainder as complement."""
    lam = sticks.lam
    rest = np.cumprod(np.r_[1.0, 1.0 - lam[:-1]])
    beta = lam * rest
    return np.r_[beta, 1.0 - math.fsum(beta)]


def _pad_counts(N, K):
    N = np.asarray(N, dtype=float)
    if N.shape == (K + 1, K):
        N = np.hstack([N, np.zeros((K + 1, 1))])
    if N.shape != (K + 1, K + 1):
        raise ValueError(f"counts must be ({K + 1}, {K}) or ({K + 1}, {K + 1})")
    if np.any(N < 0):
        raise ValueError("transition counts must be non-negative")
    if np.any(N[:, -1] != 0):
        raise ValueError("inactive column must carry no counts")
    return N


def update_transition_posterior(config, sticks, N):
    """``kappa_jk = alpha E[beta_k] + N_jk`` for every row ``j = 0..K``."""
    N = _pad_counts(N, sticks.K)
    return TransitionPosterior(config.alpha * expected_beta(sticks)[None, :] + N)


def expected_log_pi(trans):
    """``E[log pi_jk] = psi(kappa_jk) - psi(sum_k kappa_jk)``."""
    k = trans.kappa
    return digamma(k) - digamma(k.sum(axis=1, keepdims=True))


def transition_bound(config, sticks, trans):
    """``E[log p(pi | beta, alpha)] - E[log q(pi)]`` over rows ``0..K``.

    The prior normaliser uses ``E[beta]`` in place of the intractable
    ``E[log Gamma(alpha beta_k)]``.
    """
    elp = expected_log_pi(trans)
    prior = config.alpha * expected_beta(sticks)
    kap = trans.kappa
    lp = gammaln(config.alpha) - gammaln(prior).sum() + ((prior - 1.0)[None, :] * elp).sum(axis=1)
    lq = gammaln(kap.sum(axis=1)) - gammaln(kap).sum(axis=1) + ((kap - 1.0) * elp).sum(axis=1)
    return float((lp - lq).sum())


def stick_bound(config, sticks):
    """``E[log p(v | gamma)] - E[log q(v)]`` (the negative KL of the sticks)."""
    a = sticks.lam * sticks.eta
    b = (1.0 - sticks.lam) * sticks.eta
    e_log_v = digamma(a) - digamma(sticks.eta)
    e_log_1mv = digamma(b) - digamma(sticks.eta)
    lp = math.log(config.gamma) + (config.gamma - 1.0) * e_log_1mv
    lq = -betaln(a, b) + (a - 1.0) * e_log_v + (b - 1.0) * e_log_1mv
    return float((lp - lq).sum())


def stick_objective(config, trans, sticks):
    """Every bound term that depends on the sticks."""
    return transition_bound(config, sticks, trans) + stick_bound(config, sticks)


def optimize_sticks(config, trans, current, max_iter=200):
    """Bounded ascent on ``(lambda, eta)``; returns ``current`` if nothing better is found."""
    K = current.K
    if trans.K != K:
        raise ValueError("truncation mismatch between sticks and transitions")
    x0 = np.r_[current.lam, np.log(current.eta)]
    bounds = [LAMBDA_BOUNDS] * K + [(math.log(ETA_BOUNDS[0]), math.log(ETA_BOUNDS[1]))] * K

    def neg(x):
        try:
            val = stick_objective(config, trans, StickPosterior(x[:K], np.exp(x[K:])))
        except ValueError:
            return 1e300
        return -val if np.isfinite(val) else 1e300

    f0 = neg(x0)
    x0c = np.clip(x0, [b[0] for b in bounds], [b[1] for b in bounds])
    res = optimize.minimize(neg, x0c, method="L-BFGS-B", bounds=bounds,
                            options={"maxiter": max_iter})
    if not res.success and res.nit >= max_iter:
        warnings.warn(f"stick optimisation stopped early: {res.message}", ConvergenceWarning)
    if not np.isfinite(res.fun) or res.fun >= f0:
        return current
    return StickPosterior(res.x[:K], np.exp(res.x[K:]))

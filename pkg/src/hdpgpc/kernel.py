"""Squared-exponential covariance, jittered factorisation and evidence fitting."""

import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy import linalg, optimize

__all__ = [
    "KernelParams",
    "KernelError",
    "ConvergenceWarning",
    "sqexp_cov",
    "jitter_cholesky",
    "chol_solve",
    "log_marginal_likelihood",
    "fit_hyperparams",
]

JITTER_START = 1e-8
JITTER_MAX = 1e-2
LOG_2PI = math.log(2.0 * math.pi)


class KernelError(np.linalg.LinAlgError):
    """Raised when a covariance cannot be factorised even after jitter escalation."""


class ConvergenceWarning(UserWarning):
    """An optimiser stopped before convergence; the best iterate was kept."""


@dataclass(frozen=True)
class KernelParams:
    """Hyperparameters ``(sigma_f, length_scale, sigma_n)`` of the SE kernel."""

    sigma_f: float
    length_scale: float
    sigma_n: float

    def __post_init__(self):
        for name in ("sigma_f", "length_scale", "sigma_n"):
            v = float(getattr(self, name))
            if not (np.isfinite(v) and v > 0):
                raise ValueError(f"{name} must be finite and > 0, got {v!r}")
            object.__setattr__(self, name, v)

    def to_log(self):
        return np.log([self.sigma_f, self.length_scale, self.sigma_n])

    @classmethod
    def from_log(cls, v):
        v = np.exp(np.asarray(v, dtype=float))
        return cls(float(v[0]), float(v[1]), float(v[2]))

    def as_tuple(self):
        return (self.sigma_f, self.length_scale, self.sigma_n)


def _as_times(t):
    t = np.atleast_1d(np.asarray(t, dtype=float))
    if t.ndim != 1:
        raise ValueError("time vectors must be one-dimensional")
    if not np.all(np.isfinite(t)):
        raise ValueError("time vectors must be finite")
    return t


def sqexp_cov(t1, t2, params, include_noise=False):
    """Covariance matrix ``sigma_f^2 exp(-(t-t')^2 / 2l^2) [+ sigma_n^2 delta]``.

    The noise term is only added when ``t1`` and ``t2`` hold the same content,
    in which case it goes on the diagonal (index identity, not value equality).
    """
    t1 = _as_times(t1)
    t2 = _as_times(t2)
    d = t1[:, None] - t2[None, :]
    K = params.sigma_f**2 * np.exp(-0.5 * (d / params.length_scale) ** 2)
    if include_noise and (t1 is t2 or (t1.shape == t2.shape and np.array_equal(t1, t2))):
        K[np.diag_indices_from(K)] += params.sigma_n**2
    return K


def sqexp_dcov(t1, t2, params):
    """Derivative of the noiseless SE kernel with respect to its first argument."""
    d = _as_times(t1)[:, None] - _as_times(t2)[None, :]
    ell2 = params.length_scale**2
    return -(d / ell2) * params.sigma_f**2 * np.exp(-0.5 * d**2 / ell2)


def jitter_cholesky(K, scale=None, floor=0.0):
    """Lower Cholesky factor of ``K`` with escalating diagonal jitter.

    ``scale`` sets the jitter unit (``sigma_f^2`` for kernel matrices, mean
    diagonal otherwise).  The plain factor is kept when every pivot squared
    is at least ``1e-8 * scale`` (or ``floor``, a nugget already on the
    diagonal, whichever is smaller).  Otherwise ``1e-8 * scale`` is added
    and escalated x10 up to ``1e-2 * scale``.
    """
    K = np.asarray(K, dtype=float)
    if K.size == 0:
        return np.zeros((0, 0))
    if scale is None:
        scale = float(np.mean(np.abs(np.diag(K)))) or 1.0
    eye = np.eye(K.shape[0])
    try:
        L = np.linalg.cholesky(K)
        if np.min(np.diag(L)) ** 2 >= min(JITTER_START * scale, floor if floor > 0 else np.inf):
            return L
    except np.linalg.LinAlgError:
        pass
    jitter = JITTER_START * scale
    while jitter <= JITTER_MAX * scale * (1 + 1e-12):
        try:
            return np.linalg.cholesky(K + jitter * eye)
        except np.linalg.LinAlgError:
            jitter *= 10.0
    raise KernelError("covariance not positive definite after maximum jitter")


def kernel_cholesky(t, params, include_noise=False, nugget=0.0):
    """Factor of ``K(t, t)`` (plus noise), with an optional nugget ``nugget * sigma_f^2`` on the diagonal."""
    K = sqexp_cov(t, t, params, include_noise=include_noise)
    floor = params.sigma_n**2 if include_noise else 0.0
    if nugget > 0:
        K[np.diag_indices_from(K)] += nugget * params.sigma_f**2
        floor += nugget * params.sigma_f**2
    return jitter_cholesky(K, scale=params.sigma_f**2, floor=floor)


def chol_solve(L, b):
    return linalg.cho_solve((L, True), b, check_finite=False)


def log_marginal_likelihood(t, y, params):
    """Log evidence ``log N(y | 0, K + sigma_n^2 I)`` of the zero-mean GP."""
    t = _as_times(t)
    y = np.asarray(y, dtype=float)
    if y.shape != t.shape:
        raise ValueError("t and y must have the same length")
    L = kernel_cholesky(t, params, include_noise=True)
    alpha = chol_solve(L, y)
    return float(-0.5 * y @ alpha - np.log(np.diag(L)).sum() - 0.5 * len(y) * LOG_2PI)


def _lml_and_grad(logp, t, y):
    params = KernelParams.from_log(logp)
    d2 = (t[:, None] - t[None, :]) ** 2
    Kf = params.sigma_f**2 * np.exp(-0.5 * d2 / params.length_scale**2)
    K = Kf + params.sigma_n**2 * np.eye(len(t))
    L = jitter_cholesky(K, scale=params.sigma_f**2, floor=params.sigma_n**2)
    alpha = chol_solve(L, y)
    lml = -0.5 * y @ alpha - np.log(np.diag(L)).sum() - 0.5 * len(y) * LOG_2PI
    W = np.outer(alpha, alpha) - chol_solve(L, np.eye(len(t)))
    dK = (2.0 * Kf, Kf * d2 / params.length_scale**2, 2.0 * params.sigma_n**2 * np.eye(len(t)))
    grad = np.array([0.5 * np.sum(W * D) for D in dK])
    return lml, grad


def fit_hyperparams(t, y, init, bounds=None, max_iter=200):
    """Maximise the log evidence over log-parameters from ``init``.

    ``bounds`` is a sequence of three ``(low, high)`` pairs in natural units;
    the default allows four decades either side of ``init``.  The returned
    parameters never have lower evidence than ``init``.
    """
    t = _as_times(t)
    y = np.asarray(y, dtype=float)
    x0 = init.to_log()
    if bounds is None:
        log_bounds = [(v - 4 * math.log(10), v + 4 * math.log(10)) for v in x0]
    else:
        log_bounds = [(math.log(lo), math.log(hi)) for lo, hi in bounds]
        if any(not (lo <= v <= hi) for v, (lo, hi) in zip(x0, log_bounds)):
            raise ValueError("init lies outside bounds")

    def neg(x):
        try:
            f, g = _lml_and_grad(x, t, y)
        except KernelError:
            return 1e300, np.zeros(3)
        return -f, -g

    f0 = neg(x0)[0]
    res = optimize.minimize(neg, x0, jac=True, method="L-BFGS-B", bounds=log_bounds,
                            options={"maxiter": max_iter})
    if not res.success:
        warnings.warn(f"hyperparameter fit did not converge: {res.message}", ConvergenceWarning)
    if not np.isfinite(res.fun) or res.fun > f0:
        return init
    return KernelParams.from_log(res.x)

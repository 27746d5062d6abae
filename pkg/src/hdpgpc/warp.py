"""Monotone time warps parameterised by a cumulative softmax, and their MAP fit."""

import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy import optimize
from scipy.special import softmax

from .kernel import (
    LOG_2PI,
    ConvergenceWarning,
    KernelError,
    chol_solve,
    jitter_cholesky,
    kernel_cholesky,
    sqexp_cov,
    sqexp_dcov,
)

__all__ = [
    "WarpAux",
    "WarpFunction",
    "WarpResult",
    "warp_from_aux",
    "segment_warp",
    "warp_log_prior",
    "warp_objective",
    "map_warp",
    "expected_log_likelihood",
]

S_FLOOR = 1e-12


@dataclass(frozen=True)
class WarpAux:
    """Unconstrained auxiliary vector ``a``; the warp depends on it only up to a shift."""

    a: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.a, dtype=float)
        if a.ndim != 1 or not np.all(np.isfinite(a)):
            raise ValueError("WarpAux must be a finite vector")
        object.__setattr__(self, "a", a)

    @classmethod
    def identity(cls, Q):
        return cls(np.zeros(Q))


@dataclass(frozen=True)
class WarpFunction:
    g: np.ndarray
    source_grid: np.ndarray


@dataclass(frozen=True)
class WarpResult:
    aux: WarpAux
    warp: WarpFunction
    objective: float
    converged: bool
    n_iter: int


def _cumulative_softmax(a):
    # the floor keeps increments representable for extreme a; inactive for moderate a
    s = np.maximum(softmax(a), S_FLOOR)
    c = np.cumsum(s)
    return s, c / c[-1]  # c[-1] == 1.0 exactly afterwards


def warp_from_aux(a, grid_scale=1.0, offset=0.0, source_grid=None):
    """``g_q = offset + grid_scale * Q * sum_{i<=q} softmax(a)_i``.

    With ``a = 0`` and unit scale this is ``(1, ..., Q)``; the last entry is
    always ``offset + Q * grid_scale``.
    """
    a = a.a if isinstance(a, WarpAux) else np.asarray(a, dtype=float)
    Q = len(a)
    if Q < 2:
        raise ValueError("a warp needs at least two points")
    _, c = _cumulative_softmax(a)
    g = offset + grid_scale * Q * c
    src = np.arange(1, Q + 1) * grid_scale + offset if source_grid is None else source_grid
    return WarpFunction(g, np.asarray(src, dtype=float))


def _segment_frame(t):
    t = np.asarray(t, dtype=float)
    scale = (t[-1] - t[0]) / (len(t) - 1)
    return scale, t[0] - scale


def segment_warp(a, t):
    """Warp mapped onto the physical span of ``t``; ``a = 0`` returns ``t`` for a uniform grid."""
    scale, offset = _segment_frame(t)
    return warp_from_aux(a, scale, offset, source_grid=t)


def warp_log_prior(g, vartheta, t):
    """``log N(g | t, K_vartheta(t, t))``: a GP prior centred on the identity map."""
    g = g.g if isinstance(g, WarpFunction) else np.asarray(g, dtype=float)
    t = np.asarray(t, dtype=float)
    if g.shape != t.shape:
        raise ValueError("g and t must have equal length")
    L = kernel_cholesky(t, vartheta, include_noise=True)
    d = g - t
    return float(-0.5 * d @ chol_solve(L, d) - np.log(np.diag(L)).sum() - 0.5 * len(t) * LOG_2PI)


class _Objective:
    """Expected log-likelihood of ``y`` at warped inputs plus the warp prior.

    For ``x ~ N(m, S)`` on the belief support ``s`` and the kriging
    projector ``H = K(g, s) K_ss^{-1}``::

        y | x ~ N(H x, K_gg + sn^2 I - H K(s, g) + H E H^T)

    and the objective is ``E_x[log p(y | x)] + log p(g | t)``.  ``K_ss^{-1}``
    is only ever applied once through its factor; forming it twice squares
    the condition number.
    """

    def __init__(self, y, t, x_belief, theta, vartheta, emission_cov=None, use_prior=True, nugget=0.0):
        self.y = np.asarray(y, dtype=float)
        self.t = np.asarray(t, dtype=float)
        self.theta = theta
        self.s = x_belief.support
        self.Ls = kernel_cholesky(self.s, theta, nugget=nugget)
        p = len(self.s)
        self.E = np.zeros((p, p)) if emission_cov is None else np.asarray(emission_cov, dtype=float)
        self.m = x_belief.mean
        self.S = x_belief.cov
        self.u = chol_solve(self.Ls, self.m)
        self.scale, self.offset = _segment_frame(self.t)
        self.use_prior = use_prior
        if use_prior:
            self.Lv = kernel_cholesky(self.t, vartheta, include_noise=True)
            self.prior_const = -np.log(np.diag(self.Lv)).sum() - 0.5 * len(self.t) * LOG_2PI

    def _rightP(self, X):
        """``X K_ss^{-1}`` for a q x p matrix ``X``."""
        return chol_solve(self.Ls, X.T).T

    def value_grad_g(self, g, need_grad=True):
        th = self.theta
        q = len(g)
        B = sqexp_cov(g, self.s, th)
        H = self._rightP(B)
        HE = H @ self.E
        R = sqexp_cov(g, g, th, include_noise=True) - H @ B.T + HE @ H.T
        R = 0.5 * (R + R.T)
        L = jitter_cholesky(R, scale=th.sigma_f**2, floor=th.sigma_n**2)
        resid = self.y - H @ self.m
        alpha = chol_solve(L, resid)
        HS = H @ self.S
        RiHS = chol_solve(L, HS)
        val = (-0.5 * resid @ alpha - np.log(np.diag(L)).sum() - 0.5 * q * LOG_2PI
               - 0.5 * np.sum(RiHS * H))
        if self.use_prior:
            d = g - self.t
            Kd = chol_solve(self.Lv, d)
            val += -0.5 * d @ Kd + self.prior_const
        if not need_grad:
            return val, None
        Ri = chol_solve(L, np.eye(q))
        Omega = RiHS @ H.T @ Ri
        G = 0.5 * (np.outer(alpha, alpha) + 0.5 * (Omega + Omega.T) - Ri)
        Y = self._rightP(HE) - H
        M = 2.0 * G @ Y - self._rightP(RiHS) + np.outer(alpha, self.u)
        Dgg = sqexp_dcov(g, g, th)
        Dgs = sqexp_dcov(g, self.s, th)
        grad = 2.0 * np.sum(G * Dgg, axis=1) + np.sum(M * Dgs, axis=1)
        if self.use_prior:
            grad -= Kd
        return val, grad

    def warp(self, a):
        return warp_from_aux(a, self.scale, self.offset, source_grid=self.t).g

    def value_grad_a(self, a):
        s, c = _cumulative_softmax(a)
        g = self.offset + self.scale * len(a) * c
        val, gg = self.value_grad_g(g)
        # dg_i/da_m = scale * Q * s_m * ([m <= i] - c_i)
        tail = np.cumsum(gg[::-1])[::-1]
        grad_a = self.scale * len(a) * s * (tail - gg @ c)
        return val, grad_a


def expected_log_likelihood(y, g, x_belief, theta, emission_cov=None, nugget=0.0):
    """``E_x[log N(y | H x, R)]`` at fixed warped inputs ``g`` (no warp prior)."""
    obj = _Objective(y, g, x_belief, theta, None, emission_cov, use_prior=False, nugget=nugget)
    return float(obj.value_grad_g(np.asarray(g, dtype=float), need_grad=False)[0])


def warp_objective(segment_t, segment_y, x_belief, theta, vartheta, aux, emission_cov=None,
                   use_prior=True, nugget=0.0):
    """Value of the MAP warp objective at ``aux``."""
    obj = _Objective(segment_y, segment_t, x_belief, theta, vartheta, emission_cov, use_prior, nugget)
    a = aux.a if isinstance(aux, WarpAux) else np.asarray(aux, dtype=float)
    return float(obj.value_grad_g(obj.warp(a), need_grad=False)[0])


def map_warp(segment_t, segment_y, x_belief, theta, vartheta, init=None, emission_cov=None,
             max_iter=100, rel_tol=1e-6, use_prior=True, nugget=0.0):
    """Maximum a posteriori warp of one segment against a pseudo-observation belief.

    ``x_belief`` is a belief over pseudo-observations on its own support (the
    inducing locations of a cluster) in the same time frame as
    ``segment_t``.  ``emission_cov`` adds emission noise on that support.
    ``nugget`` regularises the support covariance as in ``InducingSet``.
    Returns the best iterate; ``converged`` is False when the iteration cap hit.
    """
    t = np.asarray(segment_t, dtype=float)
    y = np.asarray(segment_y, dtype=float)
    if len(t) != len(y):
        raise ValueError("segment t and y lengths differ")
    obj = _Objective(y, t, x_belief, theta, vartheta, emission_cov, use_prior, nugget)
    a0 = np.zeros(len(t)) if init is None else np.array(init.a if isinstance(init, WarpAux) else init, float)
    # centre and snap to a dyadic grid so that inits differing by a constant start identically
    a0 = np.round((a0 - a0.mean()) * 2.0**36) / 2.0**36

    def neg(a):
        try:
            v, gr = obj.value_grad_a(a)
        except KernelError:
            return 1e300, np.zeros_like(a)
        return -v, -gr

    f0 = neg(a0)[0]
    res = optimize.minimize(neg, a0, jac=True, method="L-BFGS-B",
                            options={"maxiter": max_iter, "ftol": rel_tol, "gtol": 1e-8})
    a_best, f_best = (res.x, res.fun) if res.fun <= f0 else (a0, f0)
    converged = bool(res.success)
    if not converged and res.nit >= max_iter:
        warnings.warn("warp optimisation hit the iteration cap", ConvergenceWarning)
    a_best = a_best - a_best.mean()
    aux = WarpAux(a_best)
    return WarpResult(aux, WarpFunction(obj.warp(a_best), t), float(-f_best), converged, int(res.nit))


def identity_objective_gap(segment_t, segment_y, x_belief, theta, vartheta):
    """Objective at the identity warp; handy reference for diagnostics."""
    return warp_objective(segment_t, segment_y, x_belief, theta, vartheta, WarpAux.identity(len(segment_t)))


def warp_deviation_rms(warp, t):
    """RMS of ``g - t`` in grid steps."""
    scale = (t[-1] - t[0]) / (len(t) - 1)
    return math.sqrt(float(np.mean((warp.g - t) ** 2))) / scale

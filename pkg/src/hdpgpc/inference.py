"""Coordinate-ascent variational inference: assignments, bound, births, off-line and on-line fits.

Every cluster carries a Gaussian chain ``f_0, f_1, ..., f_N`` on its
inducing locations, one step per segment in arrival order.  Segment ``n``
enters cluster ``k``'s chain with weight ``r_nk``.  Dynamics ``(A, Q)`` and
emission ``(C, E)`` are point estimates at the mode of their MNIW
posteriors, so each block update below is an ascent step on one bound::

    L = sum_k L_k  +  L_HDP  +  H[q(S)]

    L_k = E log p(f_0) + sum_n E log N(f_n | A f_{n-1}, Q) + H[q(F_k)]
          + sum_n r_nk (ell_nk + log p(g_nk)) + log p(A, Q) + log p(C, E)

where ``ell_nk = E_q(f_n) log N(y_n | Khat C f_n, Khat E Khat^T + R)``.
"""

import logging
import math
import warnings
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
from scipy.special import logsumexp

from .gp import GPBelief, InducingSet, chol_logdet, psd_cholesky, uniform_inducing
from .hdp import (
    HDPConfig,
    StickPosterior,
    expected_log_pi,
    optimize_sticks,
    stick_bound,
    transition_bound,
    update_transition_posterior,
)
from .kernel import LOG_2PI, ConvergenceWarning, KernelParams, chol_solve, fit_hyperparams, jitter_cholesky, log_marginal_likelihood, sqexp_cov
from .lds import (
    R_SKIP,
    ChainBelief,
    MNIWPosterior,
    SuffStats,
    kalman_backward,
    kalman_forward,
    kalman_step,
    mniw_logpdf,
    mniw_update,
    transition_stats,
)
from .warp import WarpAux, map_warp, segment_warp, warp_log_prior

__all__ = [
    "InferenceConfig",
    "LDSPriors",
    "ClusterState",
    "ModelState",
    "Responsibilities",
    "data_priors",
    "log_zeta",
    "chain_posterior",
    "update_assignments",
    "elbo",
    "maybe_spawn_cluster",
    "stream_online",
    "fit_online",
    "fit_offline",
    "latest_belief",
    "predict_segment",
    "SegmentPrediction",
]

log = logging.getLogger(__name__)

SUPPORT_NUGGET = 1e-6  # relative diagonal on K_pp; keeps dense inducing grids well conditioned
GUARD_RTOL = 1e-12  # rounding slack when comparing a block update with its predecessor


@dataclass(frozen=True)
class InferenceConfig:
    """Settings for both fitting modes.

    ``theta_init`` entries left as ``None`` are filled from the data
    (``sigma_n = sqrt(mean diag S_eps)``).  ``noise_convention`` picks the
    plug-in for ``Q`` and ``E`` (``"mode"``, ``"mean"`` or ``"scale"``).
    """

    gamma: float = 10.0
    alpha: float = 20.0
    varrho: float = 1.0
    K_init: int = 1
    p_inducing: int = 32
    max_iter: int = 50
    tol: float = 1e-5
    inner_tol: float = 1e-4
    inner_max: int = 3
    theta_init: tuple = (300.0, 1.0, None)
    vartheta: tuple = (1.0, 4.0, 1.0)
    birth_margin: float = 0.0
    calibration: int = 20
    warp_min_r: float = 1e-3
    warp_max_iter: int = 30
    warp_rounds: int = 5
    init_varrho: float = 0.5
    noise_convention: str = "mode"
    prior_strength: Optional[float] = None
    seed: int = 0

    def __post_init__(self):
        if self.tol <= 0 or self.inner_tol <= 0:
            raise ValueError("tolerances must be positive")
        if self.K_init < 1 or self.p_inducing < 1 or self.max_iter < 1:
            raise ValueError("K_init, p_inducing and max_iter must be >= 1")
        if self.noise_convention not in ("mode", "mean", "scale"):
            raise ValueError(f"unknown noise convention {self.noise_convention!r}")

    @property
    def hdp(self):
        return HDPConfig(self.gamma, self.alpha)

    @property
    def vartheta_params(self):
        return KernelParams(*self.vartheta)

    def to_dict(self):
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in self.__dict__.items()}

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        for key in ("theta_init", "vartheta"):
            if key in d and d[key] is not None:
                d[key] = tuple(d[key])
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class LDSPriors:
    """Shared MNIW priors for dynamics and emission plus the kernel initialiser."""

    dyn: MNIWPosterior
    emis: MNIWPosterior
    theta_init: KernelParams

    @property
    def p(self):
        return self.dyn.dim


@dataclass
class ClusterState:
    theta: KernelParams
    inducing: InducingSet
    dyn: MNIWPosterior
    emis: MNIWPosterior
    A: np.ndarray
    Q: np.ndarray
    C: np.ndarray
    E: np.ndarray
    K0: np.ndarray
    chain: Optional[ChainBelief] = None
    N_k: float = 0.0
    born: int = 0
    # running state for the on-line pass
    filt_mean: Optional[np.ndarray] = None
    filt_cov: Optional[np.ndarray] = None
    dyn_stats: Optional[SuffStats] = None
    emis_stats: Optional[SuffStats] = None
    n_trans: int = 0

    @property
    def p(self):
        return self.inducing.size

    def set_posteriors(self, dyn, emis, convention):
        self.dyn, self.emis = dyn, emis
        self.A, self.Q = dyn.M, dyn.noise_cov(convention)
        self.C, self.E = emis.M, emis.noise_cov(convention)

    def belief_at(self, mean, cov):
        """Pseudo-observation belief ``N(C mu, C Sigma C^T)`` on the inducing support."""
        return GPBelief(self.C @ mean, self.C @ cov @ self.C.T, self.inducing.locations, self.theta)


@dataclass
class Responsibilities:
    """``r[n, k]`` and ``xi[n, j, k]``; row ``j = 0`` of ``xi`` is the initial state."""

    r: np.ndarray
    xi: np.ndarray
    log_norm: float = 0.0

    def __post_init__(self):
        if self.r.ndim != 2 or self.xi.shape != (self.r.shape[0], self.r.shape[1] + 1, self.r.shape[1]):
            raise ValueError("r must be N x K and xi N x (K+1) x K")

    @property
    def counts(self):
        """``N_jk = sum_n xi_njk`` as a (K+1) x K matrix."""
        return self.xi.sum(axis=0)


@dataclass
class ModelState:
    config: InferenceConfig
    priors: LDSPriors
    clusters: list
    sticks: StickPosterior
    trans: object
    resp: Responsibilities
    warps: list                      # warps[n][k] -> auxiliary vector or None
    ll: np.ndarray = None            # expected log-likelihoods ell_nk
    lpg: np.ndarray = None           # warp log priors
    elbo_trace: list = field(default_factory=list)
    converged: bool = False
    n_iter: int = 0
    mode: str = "offline"
    rejections: dict = field(default_factory=dict)

    @property
    def K(self):
        return len(self.clusters)

    @property
    def N(self):
        return self.resp.r.shape[0]

    @property
    def r(self):
        return self.resp.r

    def assignments(self):
        return np.argmax(self.resp.r, axis=1)

    def _reject(self, what):
        self.rejections[what] = self.rejections.get(what, 0) + 1


# ---------------------------------------------------------------- priors


def _resample(seg, p):
    t = seg.t - seg.t[0]
    return np.interp(np.linspace(0.0, t[-1], p), t, seg.y)


def data_priors(segments, config):
    """Data-driven MNIW priors on a ``p``-point normalised grid.

    ``S_eps = varrho * diag(mean_n y_n^2)`` (uncentred second moment) and
    ``S_omega = varrho * diag(mean_n (y_n - y_{n-1})^2)`` are computed from
    segments resampled onto ``p`` points.  Both regressions are centred on the identity with
    ``V = (p + 2) diag(mean y^2)`` and ``p + 2`` degrees of freedom.
    """
    if len(segments) == 0:
        raise ValueError("need at least one segment")
    p = min(config.p_inducing, min(len(s) for s in segments))
    Y = np.array([_resample(s, p) for s in segments])
    scale = max(float(np.mean(Y**2)), 1e-12)
    floor = 1e-6 * scale
    second = np.maximum(np.mean(Y**2, axis=0), floor)
    roll = np.maximum(np.mean(np.diff(Y, axis=0) ** 2, axis=0), floor) if len(Y) > 1 else second
    strength = config.prior_strength if config.prior_strength is not None else p + 2.0
    S_eps = config.varrho * np.diag(second)
    S_omega = config.varrho * np.diag(roll)
    V = strength * np.diag(second)
    dof = p + 2.0
    dyn = MNIWPosterior(np.eye(p), V, S_omega, dof)
    emis = MNIWPosterior(np.eye(p), V, S_eps, dof)
    sf, ell, sn = config.theta_init
    theta0 = KernelParams(sf, ell, math.sqrt(float(np.mean(np.diag(S_eps)))) if sn is None else sn)
    return LDSPriors(dyn, emis, theta0)


# ---------------------------------------------------------------- clusters


def _rel(seg):
    return seg.t - seg.t[0]


def _fit_kernel(t, y, init):
    """Evidence fit from ``init`` and from a data-scaled start; the better optimum wins."""
    y = y - y.mean()
    dt = (t[-1] - t[0]) / (len(t) - 1)
    starts = [init, KernelParams(max(float(y.std()), 1e-6), 3.0 * dt, init.sigma_n)]
    best, best_val = init, -np.inf
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ConvergenceWarning)
        for x0 in starts:
            th = fit_hyperparams(t, y, x0)
            val = log_marginal_likelihood(t, y, th)
            if val > best_val:
                best, best_val = th, val
    return best


def new_cluster(seg, priors, config, born=0, fit=True):
    """Fresh cluster seeded from one segment: kernel by evidence, LDS at the prior."""
    t = _rel(seg)
    theta = priors.theta_init
    if fit:
        theta = _fit_kernel(t, seg.y, priors.theta_init)
    inducing = InducingSet(np.linspace(0.0, t[-1], priors.p), theta, nugget=SUPPORT_NUGGET)
    K0 = sqexp_cov(inducing.locations, inducing.locations, theta)
    K0[np.diag_indices_from(K0)] += SUPPORT_NUGGET * theta.sigma_f**2
    c = ClusterState(theta, inducing, priors.dyn, priors.emis, None, None, None, None, K0, born=born)
    c.set_posteriors(priors.dyn, priors.emis, config.noise_convention)
    return c


def _observation(cluster, g):
    return cluster.inducing.projection(g), cluster.inducing.residual_cov(g, include_noise=True)


def _ell(cluster, y, g, mean, cov):
    """``E_{f ~ N(mean, cov)} log N(y | Khat C f, Khat E Khat^T + R)``."""
    proj, R = _observation(cluster, g)
    H = proj @ cluster.C
    Rt = R + proj @ cluster.E @ proj.T
    Rt = 0.5 * (Rt + Rt.T)
    th = cluster.theta
    L = jitter_cholesky(Rt, scale=th.sigma_f**2, floor=th.sigma_n**2)
    resid = y - H @ mean
    HS = H @ cov
    return float(-0.5 * resid @ chol_solve(L, resid) - np.log(np.diag(L)).sum() - 0.5 * len(y) * LOG_2PI
                 - 0.5 * np.sum(chol_solve(L, HS) * H))


def _warp_g(model, n, k, seg):
    a = model.warps[n][k] if k < len(model.warps[n]) else None
    t = _rel(seg)
    return t if a is None else segment_warp(a, t).g


def log_zeta(segment, cluster, warp, elog_pi_jk, step=-1):
    """``E[log pi_jk]`` plus the expected log-likelihood of ``segment`` under ``cluster``.

    ``warp`` is a warped time vector (or ``WarpFunction``) in the segment's
    relative frame, ``step`` indexes the cluster's smoothed chain.
    """
    g = getattr(warp, "g", warp)
    g = _rel(segment) if g is None else np.asarray(g, dtype=float)
    ch = cluster.chain
    if ch is None:
        raise ValueError("cluster has no chain belief")
    return float(elog_pi_jk) + _ell(cluster, segment.y, g, ch.mean[step], ch.cov[step])


# ---------------------------------------------------------------- assignments


def chain_posterior(log_init, log_trans, log_lik):
    """Forward-backward on a K-state chain.

    Returns ``(r, xi, log Z)`` with ``xi[0, 0] = r[0]`` (initial row) and
    ``xi[n, j + 1, k]`` the pairwise marginal of states ``(j, k)`` at
    ``(n - 1, n)``.  Rows of ``log_lik`` that are entirely ``-inf`` are
    replaced by uniform potentials with a warning.
    """
    log_lik = np.array(log_lik, dtype=float)
    N, K = log_lik.shape
    bad = ~np.isfinite(log_lik).any(axis=1)
    if np.any(bad):
        warnings.warn(f"segments {np.flatnonzero(bad).tolist()} impossible under every cluster; "
                      "assigned uniformly", RuntimeWarning)
        log_lik[bad] = 0.0
    la = np.empty((N, K))
    la[0] = log_init + log_lik[0]
    for n in range(1, N):
        la[n] = logsumexp(la[n - 1][:, None] + log_trans, axis=0) + log_lik[n]
    log_z = float(logsumexp(la[-1]))
    lb = np.zeros((N, K))
    for n in range(N - 2, -1, -1):
        lb[n] = logsumexp(log_trans + (log_lik[n + 1] + lb[n + 1])[None, :], axis=1)
    r = np.exp(la + lb - log_z)
    r /= r.sum(axis=1, keepdims=True)
    xi = np.zeros((N, K + 1, K))
    xi[0, 0] = r[0]
    for n in range(1, N):
        w = np.exp(la[n - 1][:, None] + log_trans + (log_lik[n] + lb[n])[None, :] - log_z)
        xi[n, 1:] = w / w.sum()
    return r, xi, log_z


def _chain_entropy(resp):
    r, xi = resp.r, resp.xi
    with np.errstate(divide="ignore", invalid="ignore"):
        h0 = -np.sum(np.where(r[0] > 0, r[0] * np.log(r[0]), 0.0))
        cond = np.where(xi[1:, 1:] > 0, xi[1:, 1:] * np.log(xi[1:, 1:] / r[:-1, :, None]), 0.0)
    return float(h0 - cond.sum())


def update_assignments(model, segments=None):
    """Chain-structured ``q(S)`` from current potentials ``ell + log p(g)`` and ``E log pi``."""
    if segments is not None:
        _refresh_ll(model, segments)
    elp = expected_log_pi(model.trans)
    pot = model.ll + model.lpg
    r, xi, log_z = chain_posterior(elp[0, :model.K], elp[1:, :model.K], pot)
    return Responsibilities(r, xi, log_z)


# ---------------------------------------------------------------- bound


def _refresh_ll(model, segments, ks=None):
    ks = range(model.K) if ks is None else ks
    vt = model.config.vartheta_params
    for k in ks:
        c = model.clusters[k]
        for n, seg in enumerate(segments):
            g = _warp_g(model, n, k, seg)
            model.ll[n, k] = _ell(c, seg.y, g, c.chain.mean[n + 1], c.chain.cov[n + 1])
            model.lpg[n, k] = warp_log_prior(g, vt, _rel(seg))


def _cluster_bound(model, k):
    c = model.clusters[k]
    ch = c.chain
    p = c.p
    L0 = psd_cholesky(c.K0)
    m0, S0 = ch.mean[0], ch.cov[0]
    lp0 = -0.5 * (np.trace(chol_solve(L0, S0 + np.outer(m0, m0))) + chol_logdet(L0) + p * LOG_2PI)
    T = ch.n_steps
    st = transition_stats(ch, np.ones(T))
    LQ = psd_cholesky(c.Q)
    A = c.A
    quad = st.yy - A @ st.yx.T - st.yx @ A.T + A @ st.xx @ A.T
    lpt = -0.5 * (np.trace(chol_solve(LQ, quad)) + T * chol_logdet(LQ) + T * p * LOG_2PI)
    data = float(np.sum(model.resp.r[:, k] * (model.ll[:, k] + model.lpg[:, k])))
    lphi = mniw_logpdf(model.priors.dyn, c.A, c.Q) + mniw_logpdf(model.priors.emis, c.C, c.E)
    return float(lp0 + lpt + ch.entropy + data + lphi)


def _hdp_terms(model):
    elp = expected_log_pi(model.trans)
    data = float(np.sum(model.resp.counts * elp[:, :model.K]))
    cfg = model.config.hdp
    return data + transition_bound(cfg, model.sticks, model.trans) + stick_bound(cfg, model.sticks)


def _bound(model):
    l_obs = sum(_cluster_bound(model, k) for k in range(model.K))
    l_hdp = _hdp_terms(model)
    ent = _chain_entropy(model.resp)
    return {"total": l_obs + l_hdp + ent, "L_OBS": l_obs, "L_HDP": l_hdp, "entropy": ent}


def elbo(model, segments):
    """Evidence lower bound and its parts; ``total = L_OBS + L_HDP + entropy``."""
    _refresh_ll(model, segments)
    return _bound(model)


# ---------------------------------------------------------------- local updates


def _smooth(model, k, segments):
    c = model.clusters[k]
    obs = []
    for n, seg in enumerate(segments):
        r = model.resp.r[n, k]
        if r < R_SKIP:
            obs.append(None)
            continue
        proj, R = _observation(c, _warp_g(model, n, k, seg))
        obs.append((seg.y, proj, R, r))
    steps = kalman_forward(np.zeros(c.p), c.K0, c.A, c.Q, c.C, c.E, obs, weighting="tempered")
    return kalman_backward(steps, c.A)


def _emission_stats(model, k, segments):
    """Regression moments of ``x_n`` on ``f_n`` under ``q(f_n) p(x_n | f_n, y_n)``, weighted by ``r``."""
    c = model.clusters[k]
    p = c.p
    st = SuffStats.zeros(p)
    LE = psd_cholesky(c.E)
    Ei = chol_solve(LE, np.eye(p))
    EiC = Ei @ c.C
    for n, seg in enumerate(segments):
        r = model.resp.r[n, k]
        if r < R_SKIP:
            continue
        proj, R = _observation(c, _warp_g(model, n, k, seg))
        LR = psd_cholesky(R)
        KtRi = chol_solve(LR, proj).T
        Lam = Ei + KtRi @ proj
        LL = psd_cholesky(Lam)
        Laminv = chol_solve(LL, np.eye(p))
        G = Laminv @ EiC
        b = Laminv @ (KtRi @ seg.y)
        mu, S = c.chain.mean[n + 1], c.chain.cov[n + 1]
        Eff = S + np.outer(mu, mu)
        Gmu = G @ mu
        Exf = G @ Eff + np.outer(b, mu)
        Exx = G @ Eff @ G.T + np.outer(Gmu, b) + np.outer(b, Gmu) + np.outer(b, b) + Laminv
        st = st + SuffStats(Eff, Exf, 0.5 * (Exx + Exx.T)).scaled(r)
    return st


def _m_step(model, k, segments):
    c = model.clusters[k]
    T = c.chain.n_steps
    dyn = mniw_update(model.priors.dyn, transition_stats(c.chain, np.ones(T)), T)
    emis = mniw_update(model.priors.emis, _emission_stats(model, k, segments), float(model.resp.r[:, k].sum()))
    c.set_posteriors(dyn, emis, model.config.noise_convention)


def _update_warps(model, k, segments):
    c = model.clusters[k]
    vt = model.config.vartheta_params
    changed = False
    for n, seg in enumerate(segments):
        if model.resp.r[n, k] < model.config.warp_min_r:
            continue  # keep the last warp; identity if never optimised
        t = _rel(seg)
        bel = c.belief_at(c.chain.mean[n + 1], c.chain.cov[n + 1])
        a0 = model.warps[n][k]
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", ConvergenceWarning)
            res = map_warp(t, seg.y, bel, c.theta, vt, init=a0, emission_cov=c.E,
                           max_iter=model.config.warp_max_iter, nugget=SUPPORT_NUGGET)
        old = model.ll[n, k] + model.lpg[n, k]
        if res.objective > old:
            model.warps[n][k] = res.aux.a
            model.ll[n, k] = _ell(c, seg.y, res.warp.g, c.chain.mean[n + 1], c.chain.cov[n + 1])
            model.lpg[n, k] = warp_log_prior(res.warp.g, vt, t)
            changed = True
    return changed


def _guarded(model, k, segments, update, name):
    """Apply a per-cluster block update; roll it back if the cluster bound drops."""
    c = model.clusters[k]
    before = _cluster_bound(model, k)
    saved = (c.chain, c.dyn, c.emis, c.A, c.Q, c.C, c.E, model.ll[:, k].copy(), model.lpg[:, k].copy(),
             [w[k] for w in model.warps])
    update()
    _refresh_ll(model, segments, [k])
    after = _cluster_bound(model, k)
    if after >= before - GUARD_RTOL * abs(before):
        return after
    c.chain, c.dyn, c.emis, c.A, c.Q, c.C, c.E, llk, lpk, wk = saved
    model.ll[:, k], model.lpg[:, k] = llk, lpk
    for w, a in zip(model.warps, wk):
        w[k] = a
    model._reject(name)
    log.debug("rejected %s update for cluster %d (%.6g < %.6g)", name, k, after, before)
    return before


def _local_pass(model, k, segments, warp=True):
    c = model.clusters[k]

    def smooth():
        c.chain = _smooth(model, k, segments)

    def mstep():
        _m_step(model, k, segments)

    def align():
        _update_warps(model, k, segments)

    _guarded(model, k, segments, smooth, "chain")
    _guarded(model, k, segments, mstep, "phi")
    # the chain is re-fit to the new parameters before warping against it
    out = _guarded(model, k, segments, smooth, "chain")
    return _guarded(model, k, segments, align, "warp") if warp else out


def _global_update(model):
    counts = model.resp.counts
    model.trans = update_transition_posterior(model.config.hdp, model.sticks, counts)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ConvergenceWarning)
        model.sticks = optimize_sticks(model.config.hdp, model.trans, model.sticks)
    model.trans = update_transition_posterior(model.config.hdp, model.sticks, counts)
    for k, c in enumerate(model.clusters):
        c.N_k = float(model.resp.r[:, k].sum())


# ---------------------------------------------------------------- births


def _transition_term(elp, k, prev_r):
    """``E[log pi]`` into column ``k``: the initial row, or averaged over the previous assignment."""
    if prev_r is None:
        return float(elp[0, k])
    return float(prev_r @ elp[1:len(prev_r) + 1, k])


def _fresh_candidate(seg, priors, config):
    """New cluster seeded from ``seg`` and its prior predictive log-likelihood (identity warp)."""
    cand = new_cluster(seg, priors, config)
    t = _rel(seg)
    proj, R = _observation(cand, t)
    st = kalman_step(np.zeros(cand.p), cand.K0, cand.A, cand.Q, cand.C, cand.E, seg.y, proj, R, 1.0,
                     weighting="tempered")
    return cand, st.loglik + warp_log_prior(t, config.vartheta_params, t)


def _trial_log_pi(model):
    """``E[log pi]`` as it would be right after adding one cluster."""
    cfg = model.config.hdp
    sticks = model.sticks.extend(model.config.gamma)
    K = model.K
    counts = np.zeros((K + 2, K + 1))
    counts[:K + 1, :K] = model.resp.counts
    return expected_log_pi(update_transition_posterior(cfg, sticks, counts))


def _spawn_if_better(model, seg, data, n, prev_r):
    """Birth test under the extended truncation; ``data`` holds existing clusters' scores."""
    cand, fresh = _fresh_candidate(seg, model.priors, model.config)
    elp = _trial_log_pi(model)
    best = max(d + _transition_term(elp, k, prev_r) for k, d in enumerate(data))
    score = fresh + _transition_term(elp, model.K, prev_r)
    if score <= best + model.config.birth_margin:
        return False, fresh
    _append_cluster(model, cand, n)
    return True, fresh


def maybe_spawn_cluster(model, segment, current_best_logzeta, n=None, prev_r=None):
    """Add a cluster seeded from ``segment`` if a fresh cluster explains it better.

    The fresh score is the prior predictive log-likelihood of the segment
    under a new cluster (kernel fitted on the segment, identity warp) plus
    the expected log weight the new cluster would receive once the
    truncation is extended.  It must beat ``current_best_logzeta`` by
    ``config.birth_margin``.  Returns ``(model, spawned)``; at most one
    cluster is added per call.
    """
    cand, fresh = _fresh_candidate(segment, model.priors, model.config)
    elp = _trial_log_pi(model) if model.K else None
    trans = 0.0 if elp is None else _transition_term(elp, model.K, prev_r)
    if model.K and fresh + trans <= current_best_logzeta + model.config.birth_margin:
        return model, False
    _append_cluster(model, cand, model.N if n is None else n)
    return model, True


def _append_cluster(model, cand, n):
    cand.born = n
    model.clusters.append(cand)
    cfg = model.config
    model.sticks = (StickPosterior.prior(1, cfg.gamma) if model.sticks is None
                    else model.sticks.extend(cfg.gamma))
    N = model.resp.r.shape[0]
    K = model.K
    r = np.zeros((N, K))
    r[:, :K - 1] = model.resp.r
    xi = np.zeros((N, K + 1, K))
    xi[:, :K, :K - 1] = model.resp.xi
    model.resp = Responsibilities(r, xi)
    for w in model.warps:
        w.append(None)
    if model.ll is not None:
        model.ll = np.hstack([model.ll, np.zeros((N, 1))])
        model.lpg = np.hstack([model.lpg, np.zeros((N, 1))])
    model.trans = update_transition_posterior(cfg.hdp, model.sticks, model.resp.counts)
    cand.filt_mean, cand.filt_cov = np.zeros(cand.p), cand.K0.copy()
    cand.dyn_stats, cand.emis_stats = SuffStats.zeros(cand.p), SuffStats.zeros(cand.p)


# ---------------------------------------------------------------- on-line


def _empty_model(config, priors):
    return ModelState(config, priors, [], None, None,
                      Responsibilities(np.zeros((0, 0)), np.zeros((0, 1, 0))), [], mode="online")


def _grow_rows(model):
    N, K = model.resp.r.shape
    model.resp = Responsibilities(np.vstack([model.resp.r, np.zeros((1, K))]),
                                  np.concatenate([model.resp.xi, np.zeros((1, K + 1, K))]))
    model.warps.append([None] * K)


def _emission_moments(c, y, proj, R, mu, S):
    p = c.p
    Ei = chol_solve(psd_cholesky(c.E), np.eye(p))
    KtRi = chol_solve(psd_cholesky(R), proj).T
    Laminv = chol_solve(psd_cholesky(Ei + KtRi @ proj), np.eye(p))
    G = Laminv @ Ei @ c.C
    b = Laminv @ (KtRi @ y)
    Eff = S + np.outer(mu, mu)
    Gmu = G @ mu
    Exf = G @ Eff + np.outer(b, mu)
    Exx = G @ Eff @ G.T + np.outer(Gmu, b) + np.outer(b, Gmu) + np.outer(b, b) + Laminv
    return SuffStats(Eff, Exf, 0.5 * (Exx + Exx.T))


def _online_update_clusters(model, n, seg):
    cfg = model.config
    for k, c in enumerate(model.clusters):
        r = float(model.resp.r[n, k])
        proj, R = _observation(c, _warp_g(model, n, k, seg))
        mu0, S0 = c.filt_mean, c.filt_cov
        st = kalman_step(mu0, S0, c.A, c.Q, c.C, c.E, seg.y, proj, R, r, weighting="tempered")
        # lag-one smoothing of (f_{n-1}, f_n) given the data so far
        J = chol_solve(psd_cholesky(st.pred_cov), c.A @ S0).T
        m_prev = mu0 + J @ (st.mean - st.pred_mean)
        S_prev = S0 + J @ (st.cov - st.pred_cov) @ J.T
        cross = st.cov @ J.T
        c.dyn_stats = c.dyn_stats + SuffStats(S_prev + np.outer(m_prev, m_prev),
                                              cross + np.outer(st.mean, m_prev),
                                              st.cov + np.outer(st.mean, st.mean))
        c.n_trans += 1
        if r >= R_SKIP:
            c.emis_stats = c.emis_stats + _emission_moments(c, seg.y, proj, R, st.mean, st.cov).scaled(r)
        c.N_k += r
        c.filt_mean, c.filt_cov = st.mean, st.cov
        c.set_posteriors(mniw_update(model.priors.dyn, c.dyn_stats, c.n_trans),
                         mniw_update(model.priors.emis, c.emis_stats, c.N_k), cfg.noise_convention)


def _online_step(model, n, seg):
    """Warps, birth check, responsibilities, chain step and globals for one new segment."""
    cfg = model.config
    vt = cfg.vartheta_params
    t = _rel(seg)
    _grow_rows(model)
    prev_r = model.resp.r[n - 1].copy() if n > 0 else None

    data = []
    for k, c in enumerate(model.clusters):
        bel = c.belief_at(c.A @ c.filt_mean, c.A @ c.filt_cov @ c.A.T + c.Q)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", ConvergenceWarning)
            res = map_warp(t, seg.y, bel, c.theta, vt, emission_cov=c.E, max_iter=cfg.warp_max_iter,
                           nugget=SUPPORT_NUGGET)
        proj, R = _observation(c, res.warp.g)
        st = kalman_step(c.filt_mean, c.filt_cov, c.A, c.Q, c.C, c.E, seg.y, proj, R, 1.0, weighting="tempered")
        data.append(st.loglik + warp_log_prior(res.warp.g, vt, t))
        model.warps[n][k] = res.aux.a

    if model.K == 0:
        cand, fresh = _fresh_candidate(seg, model.priors, cfg)
        _append_cluster(model, cand, n)
        data.append(fresh)
    else:
        spawned, fresh = _spawn_if_better(model, seg, data, n, prev_r)
        if spawned:
            data.append(fresh)
            prev_r = None if prev_r is None else np.r_[prev_r, 0.0]

    K = model.K
    data = np.array(data)
    elp = expected_log_pi(model.trans)
    if prev_r is None:
        logits = elp[0, :K] + data
        w = np.exp(logits - logsumexp(logits))
        model.resp.xi[n, 0, :] = w
        model.resp.r[n] = w
    else:
        with np.errstate(divide="ignore"):
            lx = np.log(prev_r)[:, None] + elp[1:K + 1, :K] + data[None, :]
        xi = np.exp(lx - logsumexp(lx))
        model.resp.xi[n, 1:, :] = xi
        model.resp.r[n] = xi.sum(axis=0)

    _online_update_clusters(model, n, seg)
    counts = model.resp.counts
    model.trans = update_transition_posterior(cfg.hdp, model.sticks, counts)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ConvergenceWarning)
        model.sticks = optimize_sticks(cfg.hdp, model.trans, model.sticks)
    model.trans = update_transition_posterior(cfg.hdp, model.sticks, counts)


def _seed_clusters(model, segments):
    """Farthest-first seeds for ``K_init > 1`` among the calibration segments."""
    K = min(model.config.K_init, len(segments))
    if K <= 1:
        return
    p = model.priors.p
    Y = np.array([_resample(s, p) for s in segments])
    chosen = [0]
    d = np.linalg.norm(Y - Y[0], axis=1)
    while len(chosen) < K:
        nxt = int(np.argmax(d))
        chosen.append(nxt)
        d = np.minimum(d, np.linalg.norm(Y - Y[nxt], axis=1))
    for i in chosen:
        _append_cluster(model, new_cluster(segments[i], model.priors, model.config), 0)


def stream_online(segment_stream, config=None, priors=None):
    """Single pass over a stream; yields ``(n, model)`` after every segment.

    Priors are calibrated on the first ``config.calibration`` segments
    unless given.  Responsibilities of past segments are never revised.
    """
    import itertools

    config = config or InferenceConfig(varrho=0.5)
    it = iter(segment_stream)
    head = list(itertools.islice(it, max(1, config.calibration)))
    if not head:
        raise ValueError("need at least one segment")
    priors = priors or data_priors(head, config)
    model = _empty_model(config, priors)
    _seed_clusters(model, head)
    for n, seg in enumerate(itertools.chain(head, it)):
        _online_step(model, n, seg)
        yield seg, model


def _finalize(model, segments):
    """Smooth every cluster chain with the frozen assignments so the bound can be evaluated."""
    N, K = model.resp.r.shape
    model.ll, model.lpg = np.zeros((N, K)), np.zeros((N, K))
    for k, c in enumerate(model.clusters):
        c.chain = _smooth(model, k, segments)
        c.N_k = float(model.resp.r[:, k].sum())
    _refresh_ll(model, segments)


def fit_online(segment_stream, config=None, priors=None):
    """On-line variational inference: one pass, frozen past responsibilities."""
    seen = []
    model = None
    for seg, model in stream_online(segment_stream, config, priors):
        seen.append(seg)
    _finalize(model, seen)
    model.elbo_trace = [_bound(model)["total"]]
    model.converged = True
    model.n_iter = 1
    return model


# ---------------------------------------------------------------- off-line


def fit_offline(segments, config=None):
    """Off-line variational inference.

    An on-line pass provides the initial truncation, assignments and
    warps; then local factors (chain, MNIW plug-ins, warps) are iterated
    per cluster to convergence of ``L_OBS`` before ``q(S)`` and the HDP
    globals are refreshed.  Warps move during the first
    ``config.warp_rounds`` iterations only: template drift and warps trade
    off along a flat ridge that coordinate ascent crawls along.  Stops when
    the relative change of the bound drops below ``config.tol`` or after
    ``config.max_iter`` iterations.
    """
    config = config or InferenceConfig()
    segments = list(segments)
    priors = data_priors(segments, config)
    init_cfg = replace(config, varrho=config.init_varrho)
    model = fit_online(segments, init_cfg, data_priors(segments, init_cfg))
    model.config, model.priors = config, priors
    model.mode = "offline"
    model.converged = False
    bound = _bound(model)["total"]
    model.elbo_trace = [bound]
    for it in range(1, config.max_iter + 1):
        for inner in range(config.inner_max):
            before = sum(_cluster_bound(model, k) for k in range(model.K))
            # warps are the expensive block; they move once per outer iteration
            align = inner == 0 and it <= config.warp_rounds
            after = sum(_local_pass(model, k, segments, warp=align) for k in range(model.K))
            if abs(after - before) <= config.inner_tol * abs(before):
                break
        model.resp = update_assignments(model)
        _global_update(model)
        new = _bound(model)["total"]
        model.elbo_trace.append(new)
        model.n_iter = it
        log.info("iteration %d: bound %.6f (K=%d)", it, new, model.K)
        if abs(new - bound) <= config.tol * abs(bound):
            model.converged = True
            break
        bound = new
    if not model.converged:
        warnings.warn("off-line inference hit the iteration cap", ConvergenceWarning)
    return model


# ---------------------------------------------------------------- prediction


def latest_belief(cluster):
    """Most recent smoothed (or filtered) belief over the cluster's inducing values."""
    if cluster.chain is not None:
        return cluster.chain.mean[-1], cluster.chain.cov[-1]
    return cluster.filt_mean, cluster.filt_cov


@dataclass
class SegmentPrediction:
    scores: np.ndarray      # predictive log-likelihood plus warp log prior, per cluster
    r: np.ndarray           # responsibilities including the transition term
    warps: list             # MAP warped times per cluster (relative frame)


def predict_segment(model, segment, prev=None):
    """Score an unseen segment against every cluster's one-step-ahead prediction.

    ``prev`` is the cluster of the preceding segment (``None`` uses the
    initial-state row).  Nothing in ``model`` is modified.
    """
    if model.K == 0:
        raise ValueError("model has no clusters")
    cfg = model.config
    vt = cfg.vartheta_params
    t = _rel(segment)
    scores, warps = np.empty(model.K), []
    for k, c in enumerate(model.clusters):
        mean, cov = latest_belief(c)
        bel = c.belief_at(c.A @ mean, c.A @ cov @ c.A.T + c.Q)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", ConvergenceWarning)
            res = map_warp(t, segment.y, bel, c.theta, vt, emission_cov=c.E, max_iter=cfg.warp_max_iter,
                           nugget=SUPPORT_NUGGET)
        proj, R = _observation(c, res.warp.g)
        st = kalman_step(mean, cov, c.A, c.Q, c.C, c.E, segment.y, proj, R, 1.0, weighting="tempered")
        scores[k] = st.loglik + warp_log_prior(res.warp.g, vt, t)
        warps.append(res.warp.g)
    elp = expected_log_pi(model.trans)
    logits = scores + elp[0 if prev is None else prev + 1, :model.K]
    return SegmentPrediction(scores, np.exp(logits - logsumexp(logits)), warps)

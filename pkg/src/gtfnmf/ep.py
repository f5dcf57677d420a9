"""Power expectation propagation with Kalman smoothing.

Each likelihood term is approximated by independent Gaussian sites on every
subband and modulator value at that step.  Because the prior blocks are
independent and each site touches a single block, filtering and smoothing
run block-by-block (batched over blocks of equal state dimension) without
any loss relative to working on the full stacked state.

Tilted moments come from derivatives of ``log Z_k`` with respect to the
cavity means.  The subbands are integrated out analytically, leaving an
N-dimensional integral over the modulators that is evaluated by quadrature.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from ._validation import check_mask, check_signal, check_unit_interval
from .cubature import QuadratureRule, default_rule
from .exceptions import ConfigurationError, DivergenceError
from .model import ModelSpec, softplus, softplus_grad
from .posterior import PosteriorMarginals

logger = logging.getLogger(__name__)

LOG2PI = math.log(2 * math.pi)
VARIANTS = ("exact", "appendix")
G_DERIVATIVES = ("pathwise", "score")
_CHUNK_ELEMS = 2_000_000
EVIDENCE_FAIL_FRACTION = 0.01


@dataclass(frozen=True)
class EpConfig:
    """Power ``eta``, damping ``rho``, iteration budget and quadrature choice.

    ``variant`` selects the z-marginalised likelihood: ``"exact"`` uses
    mean ``sum_d a_d mu_d`` and variance ``sigma^2/eta + sum_d a_d^2 zeta_d``;
    ``"appendix"`` is the literal printed form with mean
    ``sum_d sum_n W psi mu_d`` and variance ``sigma^2 + sum_d sum_n W^2 psi^2 zeta_d``.
    The exact form is the default because it matches Monte Carlo estimates of
    ``Z_k`` under the model likelihood; the printed one does not once
    ``N > 1`` or ``eta < 1``.
    """

    power: float = 0.75
    damping: float = 0.1
    iterations: int = 20
    rule: QuadratureRule | None = None
    tol: float = 1e-6
    variant: str = "exact"
    g_derivatives: str = "pathwise"

    def __post_init__(self):
        check_unit_interval(self.power, "power (eta)")
        check_unit_interval(self.damping, "damping (rho)")
        if int(self.iterations) < 1:
            raise ConfigurationError("iterations must be >= 1")
        if self.variant not in VARIANTS:
            raise ConfigurationError(f"variant must be one of {VARIANTS}")
        if self.g_derivatives not in G_DERIVATIVES:
            raise ConfigurationError(f"g_derivatives must be one of {G_DERIVATIVES}")


@dataclass
class SiteArray:
    """Site natural parameters, shape (T, D + N): subbands then modulators."""

    nu: np.ndarray
    tau: np.ndarray

    @classmethod
    def zeros(cls, T, S):
        return cls(np.zeros((T, S)), np.zeros((T, S)))

    def copy(self):
        return SiteArray(self.nu.copy(), self.tau.copy())


@dataclass
class Cavity:
    mean: np.ndarray
    var: np.ndarray
    ok: np.ndarray


@dataclass
class TiltedMoments:
    log_z: np.ndarray  # (B,)
    d1: np.ndarray  # (B, S) dlogZ / d cavity mean
    d2: np.ndarray  # (B, S) d2logZ / d cavity mean^2
    ok: np.ndarray  # (B,)


def cavity(mean, var, nu, tau, eta) -> Cavity:
    """Remove ``eta`` times the site from marginals ``(mean, var)``."""
    mean, var = np.asarray(mean, dtype=float), np.asarray(var, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        prec = 1.0 / var - eta * np.asarray(tau, dtype=float)
        nat = mean / var - eta * np.asarray(nu, dtype=float)
        ok = (var > 0) & (prec > 0) & np.isfinite(prec) & np.isfinite(nat)
        cvar = np.where(ok, 1.0 / np.where(ok, prec, 1.0), np.nan)
        cmean = np.where(ok, nat * cvar, np.nan)
    return Cavity(cmean, cvar, ok)


def log_Z_and_derivs(cav_mean, cav_var, y, W, noise_var, eta, rule: QuadratureRule,
                     amplitudes=None, variant="exact", g_derivatives="pathwise") -> TiltedMoments:
    """``log Z_k`` and its first two derivatives w.r.t. every cavity mean.

    Inputs are batched: ``cav_mean`` and ``cav_var`` are (B, D + N) and ``y`` is
    (B,).  Rows whose quadrature estimate of ``Z`` is not positive (possible
    with negative weights) are flagged in ``ok``.

    Modulator derivatives are ``"pathwise"`` (differentiate the integrand,
    so they are the exact derivatives of the quadrature estimate) or
    ``"score"`` (Gaussian score weights ``(g - mu)/zeta``, which agree only
    up to quadrature error).
    """
    if g_derivatives not in G_DERIVATIVES:
        raise ConfigurationError(f"g_derivatives must be one of {G_DERIVATIVES}")
    cav_mean = np.atleast_2d(np.asarray(cav_mean, dtype=float))
    cav_var = np.atleast_2d(np.asarray(cav_var, dtype=float))
    y = np.atleast_1d(np.asarray(y, dtype=float))
    W = np.atleast_2d(np.asarray(W, dtype=float))
    D, N = W.shape
    B = cav_mean.shape[0]
    if cav_mean.shape[1] != D + N:
        raise ConfigurationError("cavity width does not match W")
    out_lz = np.empty(B)
    out_d1 = np.empty((B, D + N))
    out_d2 = np.empty((B, D + N))
    out_ok = np.empty(B, dtype=bool)
    K = 1 if amplitudes is not None else rule.size
    step = max(1, _CHUNK_ELEMS // (K * (D + N)))
    for s in range(0, B, step):
        sl = slice(s, min(B, s + step))
        res = _tilted_chunk(cav_mean[sl], cav_var[sl], y[sl], W, noise_var, eta, rule, amplitudes,
                            variant, g_derivatives)
        out_lz[sl], out_d1[sl], out_d2[sl], out_ok[sl] = res
    return TiltedMoments(out_lz, out_d1, out_d2, out_ok)


def _tilted_chunk(cm, cv, y, W, noise_var, eta, rule, amplitudes, variant, g_derivatives="pathwise"):
    D, N = W.shape
    B = cm.shape[0]
    mz, vz = cm[:, :D], cv[:, :D]
    mg, vg = cm[:, D:], cv[:, D:]
    log_const = 0.5 * (1.0 - eta) * math.log(2 * math.pi * noise_var) - 0.5 * math.log(eta) if noise_var > 0 else 0.0
    base_var = noise_var / eta if variant == "exact" else noise_var
    linear = amplitudes is not None
    if linear:
        w = np.ones(1)
        coef = np.broadcast_to(np.asarray(amplitudes, dtype=float), (B, 1, D))
        zvar_w = coef**2
    else:
        u, w = rule.nodes, rule.weights
        with np.errstate(invalid="ignore"):
            sg = np.sqrt(vg)
        g = mg[:, None, :] + sg[:, None, :] * u[None, :, :]  # (B, K, N)
        psi = softplus(g)
        power = psi @ W.T  # (B, K, D)
        if variant == "exact":
            coef = np.sqrt(power)
            zvar_w = power
        else:
            coef = power
            zvar_w = (psi**2) @ (W**2).T
    m_y = np.einsum("bkd,bd->bk", coef, mz)
    v_y = base_var + np.einsum("bkd,bd->bk", zvar_w, vz)
    resid = y[:, None] - m_y
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        logn = -0.5 * (LOG2PI + np.log(v_y) + resid**2 / v_y)
        shift = np.max(logn, axis=1, keepdims=True)
        e = w[None, :] * np.exp(logn - shift)  # weighted, scaled integrand
        Zt = e.sum(axis=1)
        ok = np.isfinite(Zt) & (Zt > 0) & np.all(np.isfinite(cm), axis=1) & np.all(cv > 0, axis=1)
        Zs = np.where(ok, Zt, 1.0)[:, None]
        r = resid / v_y
        # subbands: d m_y / d mu_d = coef_d, v_y does not depend on mu_d
        dz1 = np.einsum("bk,bkd->bd", e * r, coef) / Zs
        dz2 = np.einsum("bk,bkd->bd", e * (r**2 - 1.0 / v_y), coef**2) / Zs
        if linear:
            dg1 = dg2 = np.zeros((B, N))
        elif g_derivatives == "score":
            dg1 = np.einsum("bk,kn->bn", e, u) / Zs / sg
            dg2 = np.einsum("bk,kn->bn", e, u**2 - 1.0) / Zs / vg
        else:
            dl1, dl2 = _pathwise_log_derivs(g, psi, coef, mz, vz, W, r, v_y, variant)
            dg1 = np.einsum("bk,bkn->bn", e, dl1) / Zs
            dg2 = np.einsum("bk,bkn->bn", e, dl1**2 + dl2) / Zs
        log_z = np.log(Zs[:, 0]) + shift[:, 0] + log_const
    d1 = np.concatenate([dz1, dg1], axis=1)
    d2 = np.concatenate([dz2 - dz1**2, dg2 - dg1**2], axis=1)
    ok &= np.all(np.isfinite(d1), axis=1) & np.all(np.isfinite(d2), axis=1)
    return np.where(ok, log_z, np.nan), d1, d2, ok


def _pathwise_log_derivs(g, psi, coef, mz, vz, W, r, v_y, variant):
    """First and diagonal second derivatives of ``log N(y | m_y(g), v_y(g))`` in each g_n."""
    s1 = softplus_grad(g)
    s2 = s1 * (1.0 - s1)
    if variant == "exact":
        # coef_d = sqrt(P_d): d coef / d g_n = W_dn psi'_n / (2 coef_d)
        live = coef > 1e-100
        inv = np.where(live, 0.5 / np.where(live, coef, 1.0), 0.0)
        alpha = inv  # (B, K, D)
        beta = 2.0 * inv**3  # 1 / (4 coef^3)
        a_w = (mz[:, None, :] * alpha) @ W
        b_w = (mz[:, None, :] * beta) @ (W**2)
        dm = s1 * a_w
        d2m = s2 * a_w - s1**2 * b_w
        zw = vz @ W  # (B, N)
        dv = s1 * zw[:, None, :]
        d2v = s2 * zw[:, None, :]
    else:
        a_w = mz @ W
        dm = s1 * a_w[:, None, :]
        d2m = s2 * a_w[:, None, :]
        zw2 = (vz @ (W**2))[:, None, :]
        dv = 2.0 * psi * s1 * zw2
        d2v = 2.0 * (s1**2 + psi * s2) * zw2
    rr = r[:, :, None]
    vv = v_y[:, :, None]
    Acoef = rr
    Bcoef = 0.5 * (rr**2 - 1.0 / vv)
    dl1 = Acoef * dm + Bcoef * dv
    dA = -dm / vv - rr * dv / vv
    dB = -rr * dm / vv - rr**2 * dv / vv + dv / (2.0 * vv**2)
    dl2 = dA * dm + Acoef * d2m + dB * dv + Bcoef * d2v
    return dl1, dl2


def site_update(d1, d2, cav_mean, cav_var, old_nu, old_tau, damping, eta):
    """Damped natural-parameter site update; returns ``(nu, tau, updated, clipped)``.

    Entries where ``1 + zeta c <= 0`` or the result is non-finite keep their
    previous value (``updated`` is False).  A negative new precision, which
    arises for modulators where the tilted density is not log-concave, is
    clipped to zero while the location term is still updated (``clipped``).
    """
    d1, d2 = np.asarray(d1, dtype=float), np.asarray(d2, dtype=float)
    denom = 1.0 + cav_var * d2
    with np.errstate(divide="ignore", invalid="ignore"):
        tau_t = -d2 / denom
        nu_t = (d1 - cav_mean * d2) / denom
        tau = (1.0 - damping) * old_tau + (damping / eta) * tau_t
        nu = (1.0 - damping) * old_nu + (damping / eta) * nu_t
    good = (denom > 0) & np.isfinite(tau) & np.isfinite(nu)
    clipped = good & (tau < 0)
    tau = np.where(clipped, 0.0, tau)
    return np.where(good, nu, old_nu), np.where(good, tau, old_tau), good, clipped


class BlockGroups:
    """Independent latent blocks batched by state dimension."""

    def __init__(self, ss, D, N):
        self.D, self.N, self.S = D, N, D + N
        by_dim = {}
        for b in ss.blocks:
            latent = b.index if b.kind == "z" else D + b.index
            by_dim.setdefault(b.dim, []).append((latent, b))
        self.groups = []
        for dim, items in sorted(by_dim.items()):
            idx = np.array([i for i, _ in items])
            self.groups.append(dict(
                dim=dim, idx=idx,
                A=np.stack([b.A for _, b in items]),
                Q=np.stack([b.Q for _, b in items]),
                P0=np.stack([b.Pinf for _, b in items]),
                h=np.stack([b.h for _, b in items]),
                blocks=[b for _, b in items],
            ))


def _forward(bg: BlockGroups, sites: SiteArray, obs, site_fn=None):
    """Filter with fixed sites, or set sites on the fly through ``site_fn``.

    Returns per-group filtered means/covariances and the predictive latent
    marginals (T, S) used as cavities by single-sweep EP and for the evidence.
    """
    T, S = sites.nu.shape
    pm = np.zeros((T, S))
    pv = np.zeros((T, S))
    store = []
    for G in bg.groups:
        nb, d = G["A"].shape[0], G["dim"]
        store.append((np.empty((T, nb, d)), np.empty((T, nb, d, d))))
    states = [(np.zeros((G["A"].shape[0], G["dim"])), G["P0"].copy()) for G in bg.groups]
    for k in range(T):
        Us = []
        for gi, G in enumerate(bg.groups):
            m, P = states[gi]
            if k > 0:
                A = G["A"]
                m = np.einsum("bij,bj->bi", A, m)
                P = A @ P @ np.swapaxes(A, 1, 2) + G["Q"]
            U = np.einsum("bij,bj->bi", P, G["h"])
            pm[k, G["idx"]] = np.einsum("bi,bi->b", G["h"], m)
            pv[k, G["idx"]] = np.einsum("bi,bi->b", G["h"], U)
            Us.append(U)
            states[gi] = (m, P)
        if obs[k]:
            if site_fn is not None:
                site_fn(k, pm[k], pv[k])
            nu_k, tau_k = sites.nu[k], sites.tau[k]
            for gi, G in enumerate(bg.groups):
                m, P = states[gi]
                U = Us[gi]
                nu, tau = nu_k[G["idx"]], tau_k[G["idx"]]
                mu, s2 = pm[k, G["idx"]], pv[k, G["idx"]]
                denom = 1.0 + s2 * tau
                m = m + U * ((nu - tau * mu) / denom)[:, None]
                P = P - np.einsum("bi,bj->bij", U, U) * (tau / denom)[:, None, None]
                P = 0.5 * (P + np.swapaxes(P, 1, 2))
                states[gi] = (m, P)
        for gi in range(len(bg.groups)):
            store[gi][0][k], store[gi][1][k] = states[gi]
    return store, pm, pv


def _backward(bg: BlockGroups, store):
    """RTS smoothing per group; returns smoothed latent means/variances (T, S)."""
    T = store[0][0].shape[0]
    sm = np.zeros((T, bg.S))
    sv = np.zeros((T, bg.S))
    for gi, G in enumerate(bg.groups):
        mf, Pf = store[gi]
        A, Q, h = G["A"], G["Q"], G["h"]
        At = np.swapaxes(A, 1, 2)
        ms, Ps = mf[-1].copy(), Pf[-1].copy()
        sm[T - 1, G["idx"]] = np.einsum("bi,bi->b", h, ms)
        sv[T - 1, G["idx"]] = np.einsum("bi,bij,bj->b", h, Ps, h)
        for k in range(T - 2, -1, -1):
            m, P = mf[k], Pf[k]
            Ppred = A @ P @ At + Q
            Gk = np.swapaxes(np.linalg.solve(Ppred, A @ P), 1, 2)
            ms = m + np.einsum("bij,bj->bi", Gk, ms - np.einsum("bij,bj->bi", A, m))
            Ps = P + Gk @ (Ps - Ppred) @ np.swapaxes(Gk, 1, 2)
            Ps = 0.5 * (Ps + np.swapaxes(Ps, 1, 2))
            sm[k, G["idx"]] = np.einsum("bi,bi->b", h, ms)
            sv[k, G["idx"]] = np.einsum("bi,bij,bj->b", h, Ps, h)
    return sm, np.maximum(sv, 0.0)


class _SiteRefresher:
    """Cavity -> tilted moments -> damped site update over a batch of steps."""

    def __init__(self, spec: ModelSpec, y, cfg: EpConfig, rule):
        self.spec, self.y, self.cfg, self.rule = spec, y, cfg, rule
        self.skipped = 0
        self.clipped = 0
        self.attempted = 0

    def moments(self, cmean, cvar, steps):
        s = self.spec
        return log_Z_and_derivs(cmean, cvar, self.y[steps], s.W, s.noise_var, self.cfg.power,
                                self.rule, s.amplitudes, self.cfg.variant, self.cfg.g_derivatives)

    def evidence(self, pred_mean, pred_var, steps) -> float:
        """``sum_k log E[p(y_k | x)]`` under the predictive marginals, at full power.

        Steps whose ``log Z`` fails are left out; past
        :data:`EVIDENCE_FAIL_FRACTION` of them the result is ``-inf``.
        """
        if steps.size == 0:
            return 0.0
        s = self.spec
        tm = log_Z_and_derivs(pred_mean, np.maximum(pred_var, 1e-300), self.y[steps], s.W, s.noise_var, 1.0,
                              self.rule, s.amplitudes, self.cfg.variant, self.cfg.g_derivatives)
        failed = int(steps.size - np.count_nonzero(tm.ok))
        if failed > EVIDENCE_FAIL_FRACTION * steps.size:
            logger.warning("log Z failed at %d of %d steps; evidence set to -inf", failed, steps.size)
            return -math.inf
        return float(np.sum(tm.log_z[tm.ok]))

    def refresh(self, sites: SiteArray, mean, var, steps, damping):
        eta = self.cfg.power
        cav = cavity(mean, var, sites.nu[steps], sites.tau[steps], eta)
        safe_mean = np.where(cav.ok, cav.mean, mean)
        safe_var = np.where(cav.ok, cav.var, np.maximum(var, 1e-12))
        tm = self.moments(safe_mean, safe_var, steps)
        nu, tau, good, clipped = site_update(tm.d1, tm.d2, safe_mean, safe_var,
                                             sites.nu[steps], sites.tau[steps], damping, eta)
        good &= cav.ok & tm.ok[:, None]
        old_nu, old_tau = sites.nu[steps], sites.tau[steps]
        new_nu = np.where(good, nu, old_nu)
        new_tau = np.where(good, tau, old_tau)
        change = 0.0
        if new_nu.size:
            change = float(max(np.max(np.abs(new_nu - old_nu)), np.max(np.abs(new_tau - old_tau))))
        sites.nu[steps], sites.tau[steps] = new_nu, new_tau
        self.attempted += good.size
        self.skipped += int(good.size - np.count_nonzero(good))
        self.clipped += int(np.count_nonzero(clipped & good))
        return change, tm


def _check_finite(store, iteration):
    for mf, Pf in store:
        bad = ~np.all(np.isfinite(mf.reshape(mf.shape[0], -1)), axis=1)
        bad |= ~np.all(np.isfinite(Pf.reshape(Pf.shape[0], -1)), axis=1)
        if np.any(bad):
            k = int(np.argmax(bad))
            raise DivergenceError(f"EP diverged at iteration {iteration}, step {k}", iteration, k)


def ep_smoother(spec: ModelSpec, y, cfg: EpConfig | None = None, mask=None, sites: SiteArray | None = None):
    """Power EP with Kalman smoothing; returns ``(PosteriorMarginals, SiteArray)``.

    The first forward sweep sets sites by assumed density filtering (cavity =
    predictive marginal, undamped).  Each backward sweep smooths, forms cavities
    from the smoothed marginals and refreshes every observed site with
    damping.  ``mask`` marks observed samples; missing steps keep empty sites.
    """
    cfg = EpConfig() if cfg is None else cfg
    y = check_signal(y)
    T = y.size
    obs = check_mask(mask, T)
    ss = spec.state_space()
    bg = BlockGroups(ss, spec.D, spec.N)
    rule = cfg.rule if cfg.rule is not None else default_rule(spec.N)
    if rule.dim != spec.N and spec.amplitudes is None:
        raise ConfigurationError(f"quadrature rule has dimension {rule.dim}, model has N={spec.N}")
    ref = _SiteRefresher(spec, y, cfg, rule)
    warm = sites is not None
    sites = SiteArray.zeros(T, bg.S) if sites is None else sites.copy()
    steps = np.flatnonzero(obs)

    def adf_site(k, mu, var):
        ref.refresh(sites, mu[None], var[None], np.array([k]), 1.0)

    n_done = 0
    pm = pv = None
    for it in range(int(cfg.iterations)):
        first = it == 0 and not warm
        store, pm, pv = _forward(bg, sites, obs, adf_site if first else None)
        _check_finite(store, it)
        sm, sv = _backward(bg, store)
        n_done = it + 1
        change, _ = ref.refresh(sites, sm[steps], sv[steps], steps, cfg.damping)
        logger.debug("EP iteration %d: max site change %.3g", it + 1, change)
        if change < cfg.tol:
            break
    log_marginal = ref.evidence(pm[steps], pv[steps], steps)
    if ref.skipped:
        logger.info("EP skipped %d of %d site updates", ref.skipped, ref.attempted)
    post = PosteriorMarginals(mean=sm, var=sv, D=spec.D, N=spec.N, log_marginal=log_marginal,
                              backend="ep", iterations=n_done, skipped=ref.skipped,
                              site_updates=ref.attempted, clamped=ref.clipped)
    return post, sites


def adf_log_marginal(spec: ModelSpec, y, cfg: EpConfig | None = None, mask=None) -> float:
    """Single-sweep EP (assumed density filtering) approximation of ``log p(y)``.

    The sum of ``log E[p(y_k | x)]`` under the predictive marginals of the
    filter, which is exact for a linear model with one channel.  Sites are
    set with power ``cfg.power``; the evidence terms always use the full
    likelihood.
    """
    cfg = EpConfig() if cfg is None else cfg
    y = check_signal(y)
    T = y.size
    obs = check_mask(mask, T)
    ss = spec.state_space()
    bg = BlockGroups(ss, spec.D, spec.N)
    rule = cfg.rule if cfg.rule is not None else default_rule(spec.N)
    ref = _SiteRefresher(spec, y, cfg, rule)
    sites = SiteArray.zeros(T, bg.S)

    def adf_site(k, mu, var):
        ref.refresh(sites, mu[None], var[None], np.array([k]), 1.0)

    store, pm, pv = _forward(bg, sites, obs, adf_site)
    _check_finite(store, 0)
    steps = np.flatnonzero(obs)
    return ref.evidence(pm[steps], pv[steps], steps)

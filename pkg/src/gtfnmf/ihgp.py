"""Infinite-horizon EP: steady-state gains instead of covariance recursions.

For every latent block a bank of steady-state quantities is precomputed over
a grid of site precisions ``tau``.  During filtering and smoothing only the
state means are propagated; gains and marginal variances are looked up for
the current site precision.  Per step the stored posterior data is one mean
vector, so memory is O(T M) and time O(T M^2) for dense blocks.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from ._validation import check_mask, check_signal
from .cubature import default_rule
from .ep import BlockGroups, EpConfig, SiteArray, _SiteRefresher
from .exceptions import ConfigurationError, DivergenceError, StabilityError
from .model import ModelSpec
from .posterior import PosteriorMarginals

logger = logging.getLogger(__name__)

DARE_TOL = 1e-9
_BACK_CHUNK = 4096


def _riccati_map(P, A, Q, h, r):
    s = float(h @ P @ h) + r
    Ph = P @ h
    return A @ (P - np.outer(Ph, Ph) / s) @ A.T + Q


def dare_residual(P, A, Q, h, r) -> float:
    """Relative residual of the filter Riccati equation at ``P``."""
    R = _riccati_map(P, A, Q, h, r) - P
    return float(np.linalg.norm(R) / max(1.0, np.linalg.norm(P)))


def dare_steady(A, Q, h, noise_variance, max_iter=10_000, P_init=None):
    """Steady predictive covariance ``P`` and gain ``K`` of a scalar-observation filter.

    ``P = A (P - P h'(h P h' + r)^-1 h P) A' + Q``.  A direct Schur-based
    solve provides the starting point and the Riccati map is iterated until
    the relative residual falls below 1e-9.
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    h = np.atleast_1d(np.asarray(h, dtype=float))
    r = float(noise_variance)
    if not r > 0:
        raise ConfigurationError("noise_variance must be > 0")
    P = None
    try:
        with warnings.catch_warnings():
            # ill-conditioned solves are caught by the residual polish below
            warnings.simplefilter("ignore", scipy.linalg.LinAlgWarning)
            P = scipy.linalg.solve_discrete_are(A.T, h[:, None], Q, np.array([[r]]))
        P = 0.5 * (P + P.T)
        if not np.all(np.isfinite(P)):
            P = None
    except (np.linalg.LinAlgError, ValueError):
        P = None
    if P is None:
        P = np.array(P_init if P_init is not None else Q, dtype=float)
    for _ in range(max_iter):
        if dare_residual(P, A, Q, h, r) < DARE_TOL:
            break
        P = _riccati_map(P, A, Q, h, r)
        P = 0.5 * (P + P.T)
    else:
        if dare_residual(P, A, Q, h, r) >= DARE_TOL:
            raise StabilityError(f"Riccati iteration did not converge in {max_iter} steps")
    K = P @ h / (float(h @ P @ h) + r)
    return P, K


@dataclass
class SteadyBank:
    """Steady-state filter/smoother quantities over a site-precision grid.

    Entry 0 is ``tau = 0`` (no information); entries 1..n are log-spaced.
    Arrays are stacked over the blocks of one group; ``scale`` converts a
    precision into the grid's dimensionless units ``tau * prior_variance``.
    """

    grid: np.ndarray  # (J,) dimensionless, grid[0] = 0
    scale: np.ndarray  # (nb,)
    pred_h: np.ndarray  # (nb, J, d): steady predictive covariance times h'
    pred_var: np.ndarray  # (nb, J)
    smooth_gain: np.ndarray  # (nb, J, d, d)
    smooth_var: np.ndarray  # (nb, J)
    memory: np.ndarray  # (nb,) prior correlation time in steps
    residual: float = 0.0

    @property
    def taus(self):
        return self.grid[None, :] / self.scale[:, None]

    def locate(self, tau):
        """Bracketing indices and weights for per-block precisions ``tau``."""
        x = np.maximum(np.asarray(tau, dtype=float), 0.0) * self.scale
        g = self.grid
        n = g.size - 1
        lo, hi = g[1], g[n]
        ratio = np.log(g[2] / g[1]) if n > 1 else 1.0
        clamped = x > hi
        with np.errstate(divide="ignore"):
            p = np.log(np.maximum(x, lo) / lo) / ratio
        j0 = np.minimum(1 + np.floor(p).astype(int), n)
        w = np.where(j0 < n, p - np.floor(p), 0.0)
        below = x < lo
        j0 = np.where(below, 0, j0)
        w = np.where(below, x / lo, w)
        w = np.where(clamped, 0.0, w)
        j0 = np.where(clamped, n, j0)
        j1 = np.minimum(j0 + 1, n)
        return j0, j1, w, clamped

    def interp(self, name, j0, j1, w, blocks=None):
        """Cubic Hermite interpolation in log precision (linear on the first segment).

        ``name`` is one of ``pred_h``, ``pred_var``, ``smooth_gain``, ``smooth_var``.
        ``blocks`` indexes the block axis and defaults to every block, so
        ``j0``/``j1``/``w`` broadcast against it.
        """
        arr = getattr(self, name)
        slope = self._slopes(name)
        b = np.arange(arr.shape[0]) if blocks is None else blocks
        t = np.asarray(w).reshape(np.shape(w) + (1,) * (arr.ndim - 2))
        f0, f1 = arr[b, j0], arr[b, j1]
        m0, m1 = slope[b, j0], slope[b, j1]
        t2, t3 = t * t, t * t * t
        cubic = (2 * t3 - 3 * t2 + 1) * f0 + (t3 - 2 * t2 + t) * m0 + (3 * t2 - 2 * t3) * f1 + (t3 - t2) * m1
        first = (np.asarray(j0) == 0).reshape(t.shape)
        return np.where(first, (1.0 - t) * f0 + t * f1, cubic)

    def _slopes(self, name):
        cache = self.__dict__.setdefault("_slope_cache", {})
        if name not in cache:
            arr = getattr(self, name)
            sl = np.zeros_like(arr)
            log_part = arr[:, 1:]
            d = np.gradient(log_part, axis=1) if log_part.shape[1] > 1 else np.zeros_like(log_part)
            sl[:, 1:] = d
            cache[name] = sl
        return cache[name]


def build_bank(blocks, n_grid=64, span=(1e-4, 1e8)) -> SteadyBank:
    """Steady-state bank for a list of blocks of equal state dimension."""
    if n_grid < 2:
        raise ConfigurationError("n_grid must be >= 2")
    grid = np.concatenate([[0.0], np.geomspace(span[0], span[1], n_grid)])
    nb, d, J = len(blocks), blocks[0].dim, grid.size
    pred_h = np.empty((nb, J, d))
    pvar = np.empty((nb, J))
    Gs = np.empty((nb, J, d, d))
    svar = np.empty((nb, J))
    scale = np.empty(nb)
    memory = np.empty(nb)
    worst = 0.0
    for i, b in enumerate(blocks):
        A, Q, h, Pinf = b.A, b.Q, b.h, b.Pinf
        v = float(h @ Pinf @ h)
        if not v > 0:
            raise ConfigurationError("block with zero prior variance")
        scale[i] = v
        rho = float(np.max(np.abs(np.linalg.eigvals(A))))
        memory[i] = 1.0 / max(-np.log(rho), 1e-12) if rho > 0 else 1.0
        P_prev = Pinf
        for j, x in enumerate(grid):
            if x == 0:
                P = Pinf
            else:
                P, _ = dare_steady(A, Q, h, v / x, P_init=P_prev)
                worst = max(worst, dare_residual(P, A, Q, h, v / x))
            tau = x / v
            Ph = P @ h
            s = float(h @ Ph)
            bj = Ph / (1.0 + tau * s)
            Pf = P - np.outer(bj, Ph) * tau
            Pf = 0.5 * (Pf + Pf.T)
            G = np.linalg.solve(P, A @ Pf).T
            # steady smoother covariance: Ps = Pf + G (Ps - P) G'
            Ps = scipy.linalg.solve_discrete_lyapunov(G, Pf - G @ P @ G.T)
            pred_h[i, j], pvar[i, j], Gs[i, j] = Ph, s, G
            svar[i, j] = max(float(h @ Ps @ h), 0.0)
            P_prev = P
    return SteadyBank(grid=grid, scale=scale, pred_h=pred_h, pred_var=pvar,
                      smooth_gain=Gs, smooth_var=svar, memory=memory, residual=worst)


def ihgp_ep_smoother(spec: ModelSpec, y, cfg: EpConfig | None = None, mask=None,
                     n_grid: int = 64, span=(1e-4, 1e8), sites: SiteArray | None = None):
    """Power EP with steady-state gains; returns ``(PosteriorMarginals, SiteArray)``.

    Site handling matches :func:`gtfnmf.ep.ep_smoother`.  Steady quantities
    are looked up at an effective precision.  Each block carries a scalar
    AR(1) surrogate of its predictive variance (prior variance, per-step
    correlation ``exp(-1/memory)``) that absorbs the actual site precisions;
    the effective precision is the constant precision whose steady state
    would produce the same one-step variance change, ``1/x_f - 1/x_pred``.
    It equals the site precision when that is constant, follows the recent
    average when it fluctuates (strongly so for the modulators), and relaxes
    towards zero across missing data.  The current site then enters through
    the exact rank-one update against the steady predictive covariance, and
    the smoothed variance is corrected for the difference between the
    current site and the effective one.  Precisions above the bank are
    clamped to its top entry and counted in ``clamped``.
    """
    cfg = EpConfig() if cfg is None else cfg
    y = check_signal(y)
    T = y.size
    obs = check_mask(mask, T)
    ss = spec.state_space()
    bg = BlockGroups(ss, spec.D, spec.N)
    banks = [build_bank(G["blocks"], n_grid, span) for G in bg.groups]
    rho2 = np.empty(bg.S)
    scale = np.empty(bg.S)
    for G, bank in zip(bg.groups, banks):
        rho2[G["idx"]] = np.exp(-2.0 / np.maximum(bank.memory, 1.0))
        scale[G["idx"]] = bank.scale
    rule = cfg.rule if cfg.rule is not None else default_rule(spec.N)
    ref = _SiteRefresher(spec, y, cfg, rule)
    warm = sites is not None
    sites = SiteArray.zeros(T, bg.S) if sites is None else sites.copy()
    steps = np.flatnonzero(obs)
    clamp_count = [0]

    def forward(adf):
        pm = np.zeros((T, bg.S))
        pv = np.zeros((T, bg.S))
        eff = np.zeros((T, bg.S))  # effective precision after absorbing step k
        means = [np.empty((T, G["A"].shape[0], G["dim"])) for G in bg.groups]
        ms = [np.zeros((G["A"].shape[0], G["dim"])) for G in bg.groups]
        avg = np.zeros(bg.S)
        x = np.ones(bg.S)  # surrogate predictive variance / prior variance
        for k in range(T):
            Phs = []
            for gi, G in enumerate(bg.groups):
                if k > 0:
                    ms[gi] = np.einsum("bij,bj->bi", G["A"], ms[gi])
                bank = banks[gi]
                j0, j1, w, cl = bank.locate(avg[G["idx"]])
                clamp_count[0] += int(np.count_nonzero(cl))
                pm[k, G["idx"]] = np.einsum("bi,bi->b", G["h"], ms[gi])
                pv[k, G["idx"]] = bank.interp("pred_var", j0, j1, w)
                Phs.append(bank.interp("pred_h", j0, j1, w))
            if obs[k]:
                if adf:
                    ref.refresh(sites, pm[k][None], pv[k][None], np.array([k]), 1.0)
                nu_k, tau_k = sites.nu[k], sites.tau[k]
                for gi, G in enumerate(bg.groups):
                    idx = G["idx"]
                    denom = 1.0 + tau_k[idx] * pv[k, idx]
                    ms[gi] = ms[gi] + Phs[gi] * ((nu_k[idx] - tau_k[idx] * pm[k, idx]) / denom)[:, None]
                tau_now = tau_k
            else:
                tau_now = np.zeros(bg.S)
            xf = x / (1.0 + tau_now * scale * x)
            x = rho2 * xf + (1.0 - rho2)
            avg = (1.0 / xf - 1.0 / x) / scale
            eff[k] = avg
            for gi in range(len(bg.groups)):
                means[gi][k] = ms[gi]
        return means, pm, pv, eff

    def backward(means, eff):
        sm = np.zeros((T, bg.S))
        sv = np.zeros((T, bg.S))
        for gi, G in enumerate(bg.groups):
            bank, mf, A, h, idx = banks[gi], means[gi], G["A"], G["h"], G["idx"]
            blk = np.arange(idx.size)
            m = mf[T - 1].copy()
            sm[T - 1, idx] = np.einsum("bi,bi->b", h, m)
            # gains are looked up chunk by chunk so the transient stays bounded
            for stop in range(T, 0, -_BACK_CHUNK):
                start = max(0, stop - _BACK_CHUNK)
                j0, j1, w, _ = bank.locate(eff[start:stop][:, idx])
                Gk = bank.interp("smooth_gain", j0, j1, w, blk)
                base = bank.interp("smooth_var", j0, j1, w, blk)
                own = np.where(obs[start:stop, None], sites.tau[start:stop][:, idx], 0.0)
                with np.errstate(divide="ignore"):
                    prec = 1.0 / base + own - eff[start:stop][:, idx]
                sv[start:stop, idx] = np.where(prec > 0, 1.0 / np.where(prec > 0, prec, 1.0), base)
                for k in range(min(stop, T - 1) - 1, start - 1, -1):
                    m = mf[k] + np.einsum("bij,bj->bi", Gk[k - start], m - np.einsum("bij,bj->bi", A, mf[k]))
                    sm[k, idx] = np.einsum("bi,bi->b", h, m)
        return sm, sv

    n_done = 0
    pm = pv = None
    for it in range(int(cfg.iterations)):
        means, pm, pv, eff = forward(it == 0 and not warm)
        if not all(np.all(np.isfinite(mf)) for mf in means):
            bad = min(int(np.argmax(~np.all(np.isfinite(mf.reshape(T, -1)), axis=1))) for mf in means
                      if not np.all(np.isfinite(mf)))
            raise DivergenceError(f"IHGP diverged at iteration {it}, step {bad}", it, bad)
        sm, sv = backward(means, eff)
        n_done = it + 1
        change, _ = ref.refresh(sites, sm[steps], sv[steps], steps, cfg.damping)
        logger.debug("IHGP iteration %d: max site change %.3g", it + 1, change)
        if change < cfg.tol:
            break
    log_marginal = ref.evidence(pm[steps], pv[steps], steps)
    if clamp_count[0]:
        logger.info("IHGP clamped %d site precisions to the bank range", clamp_count[0])
    post = PosteriorMarginals(mean=sm, var=sv, D=spec.D, N=spec.N, log_marginal=log_marginal,
                              backend="ihgp", iterations=n_done, skipped=ref.skipped,
                              site_updates=ref.attempted, clamped=clamp_count[0],
                              info={"dare_residual": max(b.residual for b in banks),
                                    "site_clipped": ref.clipped})
    return post, sites

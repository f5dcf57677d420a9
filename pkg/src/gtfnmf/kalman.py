"""Linear-Gaussian filtering and smoothing primitives."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .exceptions import ConfigurationError, ParameterError, StabilityError

LOG2PI = math.log(2 * math.pi)


@dataclass
class GaussianState:
    """``x ~ N(m, P)``."""

    m: np.ndarray
    P: np.ndarray

    def copy(self) -> "GaussianState":
        return GaussianState(self.m.copy(), self.P.copy())


def symmetrize(P):
    return 0.5 * (P + np.swapaxes(P, -1, -2))


def psd_solve(S, B):
    """Solve ``S X = B`` for symmetric PSD ``S`` with one jittered retry."""
    S = symmetrize(np.asarray(S, dtype=float))
    try:
        c = np.linalg.cholesky(S)
    except np.linalg.LinAlgError:
        n = S.shape[-1]
        jitter = 1e-10 * max(np.trace(S), 1e-300) / n
        try:
            c = np.linalg.cholesky(S + jitter * np.eye(n))
        except np.linalg.LinAlgError as exc:
            raise StabilityError("matrix is not positive definite even after jitter") from exc
    z = np.linalg.solve(c, B)
    return np.linalg.solve(c.T, z)


def kf_predict(state: GaussianState, A, Q) -> GaussianState:
    m = A @ state.m
    P = symmetrize(A @ state.P @ A.T + Q)
    return GaussianState(m, P)


def kf_update_sites(state: GaussianState, H, nu, tau) -> GaussianState:
    """Condition on Gaussian sites: pseudo-observation ``nu/tau`` with variance ``1/tau``.

    Rows with ``tau == 0`` carry no information and are dropped; the remaining
    rows are absorbed in one joint solve.
    """
    H = np.atleast_2d(np.asarray(H, dtype=float))
    nu = np.atleast_1d(np.asarray(nu, dtype=float))
    tau = np.atleast_1d(np.asarray(tau, dtype=float))
    if H.shape[0] != nu.size or nu.size != tau.size:
        raise ConfigurationError("H, nu and tau must have matching row counts")
    if np.any(tau < 0) or not np.all(np.isfinite(tau)):
        raise ParameterError("site precisions must be finite and nonnegative")
    keep = tau > 0
    if not np.any(keep):
        return state.copy()
    H, nu, tau = H[keep], nu[keep], tau[keep]
    U = state.P @ H.T
    S = H @ U + np.diag(1.0 / tau)
    K = psd_solve(S, U.T).T
    m = state.m + K @ (nu / tau - H @ state.m)
    P = symmetrize(state.P - K @ U.T)
    return GaussianState(m, P)


def kf_update_scalar(state: GaussianState, h, y, r):
    """Scalar observation ``y = h x + N(0, r)``; returns the state and log-likelihood term."""
    U = state.P @ h
    s = float(h @ U) + r
    if not s > 0:
        raise StabilityError(f"innovation variance {s!r} is not positive")
    v = float(y - h @ state.m)
    K = U / s
    m = state.m + K * v
    P = symmetrize(state.P - np.outer(K, U))
    return GaussianState(m, P), -0.5 * (LOG2PI + math.log(s) + v * v / s)


def rts_step(filtered: GaussianState, predicted_next: GaussianState,
             smoothed_next: GaussianState, A, Q=None) -> GaussianState:
    """One Rauch-Tung-Striebel backward step.

    ``predicted_next`` must be ``A filtered A' + Q``; ``Q`` is accepted for
    signature symmetry and only used when ``predicted_next`` is ``None``.
    """
    if predicted_next is None:
        predicted_next = kf_predict(filtered, A, Q)
    G = psd_solve(predicted_next.P, A @ filtered.P).T
    m = filtered.m + G @ (smoothed_next.m - predicted_next.m)
    P = symmetrize(filtered.P + G @ (smoothed_next.P - predicted_next.P) @ G.T)
    return GaussianState(m, P)


def latent_marginal(state: GaussianState, h):
    h = np.asarray(h, dtype=float)
    mu = float(h @ state.m)
    var = float(h @ state.P @ h)
    return mu, max(var, 0.0)


@dataclass
class SmootherResult:
    means: np.ndarray  # (T, M)
    covs: np.ndarray  # (T, M, M)
    loglik: float


def kalman_smoother(A, Q, P0, h, noise_var, y, mask=None) -> SmootherResult:
    """Exact filter + RTS smoother for ``y_k = h x_k + N(0, noise_var)``.

    Steps where ``mask`` is False (missing data) are prediction-only.
    """
    y = np.asarray(y, dtype=float)
    T = y.size
    M = A.shape[0]
    h = np.asarray(h, dtype=float)
    obs = np.ones(T, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    mf = np.empty((T, M))
    Pf = np.empty((T, M, M))
    loglik = 0.0
    state = GaussianState(np.zeros(M), np.array(P0, dtype=float))
    for k in range(T):
        if k > 0:
            state = kf_predict(state, A, Q)
        if obs[k]:
            state, ll = kf_update_scalar(state, h, y[k], noise_var)
            loglik += ll
        mf[k] = state.m
        Pf[k] = state.P
    ms = mf.copy()
    Ps = Pf.copy()
    for k in range(T - 2, -1, -1):
        filt = GaussianState(mf[k], Pf[k])
        pred = kf_predict(filt, A, Q)
        sm = rts_step(filt, pred, GaussianState(ms[k + 1], Ps[k + 1]), A)
        ms[k] = sm.m
        Ps[k] = sm.P
    return SmootherResult(ms, Ps, loglik)

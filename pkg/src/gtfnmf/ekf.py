"""Globally iterated extended Kalman filter and RTS smoother."""

from __future__ import annotations

import logging
import math

import numpy as np

from ._validation import check_mask, check_signal
from .exceptions import ConfigurationError, DivergenceError, StabilityError
from .kalman import symmetrize
from .model import ModelSpec, measurement_jacobian, measurement_mean
from .posterior import PosteriorMarginals

logger = logging.getLogger(__name__)

LOG2PI = math.log(2 * math.pi)


def _latent_marginals(means, covs, H):
    mu = means @ H.T
    var = np.einsum("sm,tmn,sn->ts", H, covs, H)
    return mu, np.maximum(var, 0.0)


def iekf_smoother(spec: ModelSpec, y, iterations: int = 1, mask=None) -> PosteriorMarginals:
    """Extended Kalman smoothing, relinearised around the previous smoothed path.

    The first pass linearises at each step's predictive mean.  Later passes
    re-run the filter from the prior, with Jacobians taken at the smoothed
    means of the pass before (a Gauss-Newton step on the whole trajectory).
    The reported ``log_marginal`` is the usual innovation-form sum of the
    final forward pass.
    """
    y = check_signal(y)
    if int(iterations) < 1:
        raise ConfigurationError("iterations must be >= 1")
    T = y.size
    obs = check_mask(mask, T)
    ss = spec.state_space()
    layout = ss.layout
    A, Q, r = ss.A, ss.Q, spec.noise_var
    M = ss.dim
    H = layout.H
    lin_points = None
    mf = np.empty((T, M))
    Pf = np.empty((T, M, M))
    for it in range(int(iterations)):
        m = np.zeros(M)
        P = ss.P0.copy()
        loglik = 0.0
        for k in range(T):
            if k > 0:
                m = A @ m
                P = symmetrize(A @ P @ A.T + Q)
            if obs[k]:
                xbar = m if lin_points is None else lin_points[k]
                Hx = measurement_jacobian(xbar, spec, layout)
                v = y[k] - measurement_mean(xbar, spec, layout) - Hx @ (m - xbar)
                U = P @ Hx
                S = float(Hx @ U) + r
                if not S > 0:
                    raise StabilityError(f"EKF innovation variance {S!r} is not positive at step {k}")
                K = U / S
                m = m + K * v
                P = symmetrize(P - np.outer(K, U))
                loglik -= 0.5 * (LOG2PI + math.log(S) + v * v / S)
            mf[k] = m
            Pf[k] = P
        if not (np.all(np.isfinite(m)) and np.all(np.isfinite(P))):
            bad = int(np.argmax(~np.all(np.isfinite(mf), axis=1)))
            raise DivergenceError(f"EKF diverged at iteration {it}, step {bad}", it, bad)
        ms, Ps = _rts(mf, Pf, A, Q)
        lin_points = ms
        logger.debug("EKF iteration %d: loglik %.6g", it + 1, loglik)
    mu, var = _latent_marginals(ms, Ps, H)
    return PosteriorMarginals(mean=mu, var=var, D=spec.D, N=spec.N, log_marginal=float(loglik),
                              backend="ekf", iterations=int(iterations))


def _rts(mf, Pf, A, Q):
    T = mf.shape[0]
    ms = mf.copy()
    Ps = Pf.copy()
    for k in range(T - 2, -1, -1):
        Ppred = symmetrize(A @ Pf[k] @ A.T + Q)
        try:
            G = np.linalg.solve(Ppred, A @ Pf[k]).T
        except np.linalg.LinAlgError:
            n = Ppred.shape[0]
            Ppred = Ppred + 1e-10 * np.trace(Ppred) / n * np.eye(n)
            G = np.linalg.solve(Ppred, A @ Pf[k]).T
        ms[k] = mf[k] + G @ (ms[k + 1] - A @ mf[k])
        Ps[k] = symmetrize(Pf[k] + G @ (Ps[k + 1] - Ppred) @ G.T)
    return ms, Ps

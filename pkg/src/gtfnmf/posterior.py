"""Posterior marginals shared by every inference backend, and signal reconstruction."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from .cubature import QuadratureRule, default_rule
from .model import ModelSpec, channel_power

_CHUNK_ELEMS = 4_000_000


@dataclass
class PosteriorMarginals:
    """Per-step Gaussian marginals of every latent (subbands first).

    ``mean`` and ``var`` have shape (T, D + N).
    """

    mean: np.ndarray
    var: np.ndarray
    D: int
    N: int
    log_marginal: float = float("nan")
    backend: str = ""
    iterations: int = 0
    skipped: int = 0
    site_updates: int = 0
    clamped: int = 0
    info: dict = field(default_factory=dict)

    @property
    def T(self) -> int:
        return self.mean.shape[0]

    @property
    def z_mean(self):
        return self.mean[:, : self.D]

    @property
    def z_var(self):
        return self.var[:, : self.D]

    @property
    def g_mean(self):
        return self.mean[:, self.D:]

    @property
    def g_var(self):
        return self.var[:, self.D:]


def _chunks(T, per_step):
    step = max(1, _CHUNK_ELEMS // max(per_step, 1))
    for start in range(0, T, step):
        yield slice(start, min(T, start + step))


def amplitude_moments(post: PosteriorMarginals, spec: ModelSpec, rule: QuadratureRule | None = None):
    """``E[a_d]`` (T, D) and ``E[a_d a_e]`` (T, D, D) under the modulator marginals."""
    T, D = post.T, spec.D
    if spec.amplitudes is not None:
        a = np.broadcast_to(spec.amplitudes, (T, D)).copy()
        return a, a[:, :, None] * a[:, None, :]
    rule = default_rule(spec.N) if rule is None else rule
    Ea = np.empty((T, D))
    Eaa = np.empty((T, D, D))
    w = rule.weights
    for sl in _chunks(T, rule.size * D * D):
        g = post.g_mean[sl, None, :] + np.sqrt(np.maximum(post.g_var[sl, None, :], 0.0)) * rule.nodes
        a = np.sqrt(channel_power(g, spec.W))  # (B, K, D)
        wa = a * w[:, None]
        Ea[sl] = wa.sum(axis=1)
        Eaa[sl] = np.swapaxes(wa, 1, 2) @ a
    return Ea, Eaa


def predictive_signal(post: PosteriorMarginals, spec: ModelSpec, rule: QuadratureRule | None = None):
    """Mean and variance of the noise-free measurement ``sum_d a_d z_d``.

    Uses factorised marginals: modulators independent of subbands and
    subbands of each other, which is exact for the site-based backends.
    """
    Ea, Eaa = amplitude_moments(post, spec, rule)
    mz, vz = post.z_mean, np.maximum(post.z_var, 0.0)
    mean = np.sum(Ea * mz, axis=1)
    cov_a = Eaa - Ea[:, :, None] * Ea[:, None, :]
    var = np.einsum("td,td->t", (cov_a @ mz[:, :, None])[:, :, 0], mz) + np.sum(np.diagonal(Eaa, axis1=1, axis2=2) * vz, axis=1)
    return mean, np.maximum(var, 0.0)


def select(post: PosteriorMarginals, z_idx, g_idx) -> PosteriorMarginals:
    """Marginals of a subset of subbands and modulators, e.g. one source of a mixture."""
    cols = np.concatenate([np.asarray(z_idx, dtype=int), post.D + np.asarray(g_idx, dtype=int)])
    return dataclasses.replace(post, mean=post.mean[:, cols], var=post.var[:, cols], D=len(z_idx),
                               N=len(g_idx), info=dict(post.info))


def amplitude_envelopes(post: PosteriorMarginals, spec: ModelSpec, rule: QuadratureRule | None = None):
    """Posterior mean amplitude per channel, shape (T, D)."""
    return amplitude_moments(post, spec, rule)[0]

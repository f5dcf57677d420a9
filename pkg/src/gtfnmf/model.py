"""The GTF-NMF generative model.

``y_k = sum_d a_d(t_k) z_d(t_k) + sigma_y eps_k`` with squared amplitudes
``a_d^2 = sum_n W[d, n] softplus(g_n)``.  Subbands ``z_d`` are quasi-periodic
GPs, modulators ``g_n`` are Matérn GPs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ._validation import check_nonnegative_matrix
from .exceptions import ConfigurationError, ParameterError
from .kernels import DiscreteModel, KernelSpec, MaternFamily, kernel_sde, stack_model

AMPLITUDE_FLOOR = 1e-12


def softplus(g):
    """``log(1 + exp(g))`` without overflow."""
    g = np.asarray(g, dtype=float)
    return np.maximum(g, 0.0) + np.log1p(np.exp(-np.abs(g)))


def softplus_grad(g):
    """Logistic sigmoid, the derivative of :func:`softplus`."""
    g = np.asarray(g, dtype=float)
    e = np.exp(-np.abs(g))
    return np.where(g >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def softplus_inv(x, floor=1e-6):
    """Inverse softplus ``log(exp(x) - 1)`` with inputs floored at ``floor``."""
    x = np.maximum(np.asarray(x, dtype=float), floor)
    return x + np.log(-np.expm1(-x))


@dataclass(frozen=True, eq=False)
class ModelSpec:
    """Hyperparameters of one GTF-NMF model.

    Lengthscales in the kernel specs are in seconds and subband frequencies in
    rad/sample.  When ``amplitudes`` is given the model is the linear
    time-frequency model with those fixed channel amplitudes and the
    modulators are decoupled from the data.
    """

    W: np.ndarray
    subband_kernels: tuple
    modulator_kernels: tuple
    noise_var: float
    dt: float = 1.0 / 16000
    amplitudes: np.ndarray | None = None
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        W = check_nonnegative_matrix(self.W)
        object.__setattr__(self, "W", W)
        object.__setattr__(self, "subband_kernels", tuple(self.subband_kernels))
        object.__setattr__(self, "modulator_kernels", tuple(self.modulator_kernels))
        D, N = W.shape
        if D < 1 or N < 1:
            raise ConfigurationError("W must be at least 1x1")
        if len(self.subband_kernels) != D or len(self.modulator_kernels) != N:
            raise ConfigurationError(
                f"W is {D}x{N} but got {len(self.subband_kernels)} subband and "
                f"{len(self.modulator_kernels)} modulator kernels")
        if any(k.cosine_freq is None for k in self.subband_kernels):
            raise ConfigurationError("subband kernels need a cosine frequency")
        if any(k.cosine_freq is not None for k in self.modulator_kernels):
            raise ConfigurationError("modulator kernels must be pure Matérn")
        if not (np.isfinite(self.noise_var) and self.noise_var >= 0):
            raise ParameterError(f"noise_var must be >= 0, got {self.noise_var!r}")
        if not (np.isfinite(self.dt) and self.dt > 0):
            raise ParameterError(f"dt must be > 0, got {self.dt!r}")
        if self.amplitudes is not None:
            a = np.asarray(self.amplitudes, dtype=float).ravel()
            if a.shape != (D,) or np.any(a < 0):
                raise ConfigurationError("amplitudes must be D nonnegative values")
            object.__setattr__(self, "amplitudes", a)

    @property
    def D(self) -> int:
        return self.W.shape[0]

    @property
    def N(self) -> int:
        return self.W.shape[1]

    @property
    def is_linear(self) -> bool:
        return self.amplitudes is not None

    def state_space(self) -> DiscreteModel:
        """Discretised stacked model in sample units (step 1)."""
        if "ss" not in self._cache:
            scale = 1.0 / self.dt
            subs = [kernel_sde(k.rescaled(scale)) for k in self.subband_kernels]
            mods = [kernel_sde(k.rescaled(scale)) for k in self.modulator_kernels]
            self._cache["ss"] = stack_model(subs, mods, 1.0)
        return self._cache["ss"]

    def with_noise(self, noise_var: float) -> "ModelSpec":
        return ModelSpec(W=self.W, subband_kernels=self.subband_kernels,
                         modulator_kernels=self.modulator_kernels, noise_var=noise_var,
                         dt=self.dt, amplitudes=self.amplitudes)

    @classmethod
    def from_arrays(cls, freqs, sub_lengthscales, sub_variances, mod_lengthscales,
                    mod_variances, W, noise_var, dt=1.0 / 16000,
                    sub_family="matern12", mod_family="matern52", amplitudes=None):
        """Build a spec from per-channel parameter arrays."""
        freqs = np.atleast_1d(np.asarray(freqs, dtype=float))
        D = freqs.size
        sub_l = np.broadcast_to(np.asarray(sub_lengthscales, dtype=float), (D,))
        sub_v = np.broadcast_to(np.asarray(sub_variances, dtype=float), (D,))
        W = check_nonnegative_matrix(W)
        N = W.shape[1]
        mod_l = np.broadcast_to(np.asarray(mod_lengthscales, dtype=float), (N,))
        mod_v = np.broadcast_to(np.asarray(mod_variances, dtype=float), (N,))
        sf, mf = MaternFamily.parse(sub_family), MaternFamily.parse(mod_family)
        subs = tuple(KernelSpec(sf, float(l), float(v), float(w)) for w, l, v in zip(freqs, sub_l, sub_v))
        mods = tuple(KernelSpec(mf, float(l), float(v)) for l, v in zip(mod_l, mod_v))
        return cls(W=W, subband_kernels=subs, modulator_kernels=mods, noise_var=float(noise_var),
                   dt=float(dt), amplitudes=amplitudes)


@dataclass(frozen=True, eq=False)
class LatentSample:
    Z: np.ndarray  # (D, T)
    G: np.ndarray  # (N, T)
    y: np.ndarray  # (T,)
    seed: int | None
    f: np.ndarray | None = None  # noiseless signal


def channel_power(g, W):
    """Squared amplitudes ``softplus(g) @ W.T`` for any leading batch shape."""
    return softplus(g) @ np.asarray(W).T


def amplitude(g, W, d=None):
    """Channel amplitude(s) ``sqrt(sum_n W[d, n] softplus(g_n))``.

    ``d`` is a 0-based channel index; ``None`` returns every channel.
    """
    W = np.asarray(W, dtype=float)
    if d is not None:
        if not 0 <= d < W.shape[0]:
            raise ConfigurationError(f"channel {d} out of range for D={W.shape[0]}")
        return float(np.sqrt(softplus(np.asarray(g, dtype=float)) @ W[d]))
    return np.sqrt(channel_power(g, W))


def _read_latents(x, spec, layout):
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != layout.Hz.shape[1] or layout.D != spec.D or layout.N != spec.N:
        raise ConfigurationError("state/layout/spec dimensions disagree")
    return x @ layout.Hz.T, x @ layout.Hg.T


def _amplitudes(g, spec):
    if spec.amplitudes is not None:
        return np.broadcast_to(spec.amplitudes, g.shape[:-1] + (spec.D,))
    return np.sqrt(channel_power(g, spec.W))


def measurement_mean(x, spec: ModelSpec, layout=None):
    """Noise-free measurement ``h(x) = sum_d a_d(g) z_d``; ``x`` may be batched."""
    layout = spec.state_space().layout if layout is None else layout
    z, g = _read_latents(x, spec, layout)
    return np.sum(_amplitudes(g, spec) * z, axis=-1)


def measurement_jacobian(x, spec: ModelSpec, layout=None):
    """Row vector ``dh/dx`` over all state coordinates."""
    layout = spec.state_space().layout if layout is None else layout
    z, g = _read_latents(x, spec, layout)
    a = _amplitudes(g, spec)
    J = a @ layout.Hz
    if spec.amplitudes is None:
        inv = np.where(a > 0, 1.0 / (2.0 * np.maximum(a, AMPLITUDE_FLOOR)), 0.0)
        dg = softplus_grad(g) * ((z * inv) @ spec.W)
        J = J + dg @ layout.Hg
    return J


def _sqrt_psd(S):
    w, V = np.linalg.eigh(0.5 * (S + S.T))
    return V * np.sqrt(np.clip(w, 0.0, None))


def sample_generative(spec: ModelSpec, T: int, seed=None) -> LatentSample:
    """Exact draw of latents and observations from the prior and likelihood."""
    T = int(T)
    if T < 1:
        raise ConfigurationError("T must be >= 1")
    ss = spec.state_space()
    rng = np.random.default_rng(seed)
    M = ss.dim
    X = np.empty((T, M))
    eps = rng.standard_normal((T, M))
    X[0] = _sqrt_psd(ss.P0) @ eps[0]
    LQ = _sqrt_psd(ss.Q)
    noise = eps[1:] @ LQ.T
    A = ss.A
    for k in range(1, T):
        X[k] = A @ X[k - 1] + noise[k - 1]
    f = measurement_mean(X, spec, ss.layout)
    y = f + np.sqrt(spec.noise_var) * rng.standard_normal(T)
    return LatentSample(Z=(X @ ss.layout.Hz.T).T, G=(X @ ss.layout.Hg.T).T, y=y, seed=seed, f=f)

"""State-space (SDE) representations of the model's GP priors.

Every prior is a linear time-invariant SDE ``dx/dt = F x + L w`` with white
noise spectral density ``Qc``.  Subband priors are the product of a cosine
kernel and a Matérn kernel, realised through a Kronecker sum of the two
feedback matrices.  Blocks are stacked block-diagonally and discretised on a
uniform grid.

Time units are whatever the caller uses consistently for lengthscales, lags
and the discretisation step; :class:`gtfnmf.model.ModelSpec` works in samples
so that frequencies are in rad/sample and the step is one.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.linalg import expm

from .exceptions import ConfigurationError, ParameterError, StabilityError


class MaternFamily(str, enum.Enum):
    MATERN12 = "matern12"
    MATERN32 = "matern32"
    MATERN52 = "matern52"

    @property
    def order(self) -> int:
        return {"matern12": 1, "matern32": 2, "matern52": 3}[self.value]

    @property
    def nu(self) -> float:
        return self.order - 0.5

    @classmethod
    def parse(cls, value) -> "MaternFamily":
        if isinstance(value, cls):
            return value
        key = str(value).lower().replace("-", "").replace("/", "").replace("_", "").replace(".", "")
        aliases = {
            "matern12": cls.MATERN12, "exponential": cls.MATERN12, "exp": cls.MATERN12,
            "matern32": cls.MATERN32, "matern52": cls.MATERN52,
        }
        if key not in aliases:
            raise ParameterError(f"unknown Matérn family {value!r}")
        return aliases[key]


@dataclass(frozen=True)
class KernelSpec:
    """One GP prior: a Matérn kernel, optionally times a cosine.

    ``cosine_freq`` of ``None`` gives a pure Matérn prior (modulators);
    otherwise the prior is ``variance * cos(freq * tau) * matern(tau)``.
    """

    family: MaternFamily = MaternFamily.MATERN12
    lengthscale: float = 1.0
    variance: float = 1.0
    cosine_freq: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "family", MaternFamily.parse(self.family))
        if not (np.isfinite(self.lengthscale) and self.lengthscale > 0):
            raise ParameterError(f"lengthscale must be > 0, got {self.lengthscale!r}")
        if not (np.isfinite(self.variance) and self.variance > 0):
            raise ParameterError(f"variance must be > 0, got {self.variance!r}")
        if self.cosine_freq is not None:
            _check_frequency(self.cosine_freq)

    def rescaled(self, factor: float) -> "KernelSpec":
        """Copy with the lengthscale multiplied by ``factor`` (unit change)."""
        return replace(self, lengthscale=self.lengthscale * factor)

    def analytic(self, tau):
        """Closed-form covariance at lag ``tau``, used as a reference."""
        r = np.abs(np.asarray(tau, dtype=float))
        lam = math.sqrt(2 * self.family.nu) / self.lengthscale
        if self.family is MaternFamily.MATERN12:
            k = np.exp(-lam * r)
        elif self.family is MaternFamily.MATERN32:
            k = (1 + lam * r) * np.exp(-lam * r)
        else:
            k = (1 + lam * r + (lam * r) ** 2 / 3) * np.exp(-lam * r)
        if self.cosine_freq is not None:
            k = k * np.cos(self.cosine_freq * r)
        return self.variance * k


@dataclass(frozen=True, eq=False)
class LtiSde:
    """Continuous-time blocks of a stationary linear SDE."""

    F: np.ndarray
    L: np.ndarray
    Qc: np.ndarray
    Pinf: np.ndarray
    h: np.ndarray

    @property
    def dim(self) -> int:
        return self.F.shape[0]

    @property
    def variance(self) -> float:
        return float(self.h @ self.Pinf @ self.h)


@dataclass(frozen=True, eq=False)
class Block:
    """One latent function's slice of a stacked discrete model."""

    kind: str  # "z" or "g"
    index: int
    sl: slice
    A: np.ndarray
    Q: np.ndarray
    Pinf: np.ndarray
    h: np.ndarray

    @property
    def dim(self) -> int:
        return self.A.shape[0]


@dataclass(frozen=True, eq=False)
class Layout:
    """Maps latent functions to state coordinates."""

    z_slices: tuple
    g_slices: tuple
    Hz: np.ndarray  # (D, M) rows selecting each subband
    Hg: np.ndarray  # (N, M) rows selecting each modulator

    @property
    def D(self) -> int:
        return len(self.z_slices)

    @property
    def N(self) -> int:
        return len(self.g_slices)

    @property
    def H(self) -> np.ndarray:
        """All latent rows, subbands first."""
        return np.vstack([self.Hz, self.Hg])


@dataclass(frozen=True, eq=False)
class DiscreteModel:
    A: np.ndarray
    Q: np.ndarray
    P0: np.ndarray
    layout: Layout
    dt: float
    blocks: tuple = field(default=())

    @property
    def dim(self) -> int:
        return self.A.shape[0]


def _check_frequency(omega):
    if not (np.isfinite(omega) and 0.0 <= omega <= math.pi):
        raise ParameterError(f"frequency must lie in [0, pi] rad/sample, got {omega!r}")


def matern_sde(spec: KernelSpec) -> LtiSde:
    """Companion-form SDE of a Matérn-1/2, 3/2 or 5/2 kernel."""
    if not isinstance(spec, KernelSpec):
        raise ConfigurationError("matern_sde expects a KernelSpec")
    lam = math.sqrt(2 * spec.family.nu) / spec.lengthscale
    s2 = spec.variance
    p = spec.family.order
    if p == 1:
        F = np.array([[-lam]])
        q = 2 * lam * s2
    elif p == 2:
        F = np.array([[0.0, 1.0], [-lam**2, -2 * lam]])
        q = 4 * lam**3 * s2
    else:
        F = np.array([[0.0, 1.0, 0.0], [0.0, 0.0, 1.0], [-lam**3, -3 * lam**2, -3 * lam]])
        q = 16.0 / 3.0 * lam**5 * s2
    L = np.zeros((p, 1))
    L[-1, 0] = 1.0
    Qc = np.array([[q]])
    h = np.zeros(p)
    h[0] = 1.0
    return LtiSde(F=F, L=L, Qc=Qc, Pinf=solve_lyapunov(F, L, Qc), h=h)


def matern_pinf_closed_form(spec: KernelSpec) -> np.ndarray:
    """Published stationary covariances of the Matérn SDEs."""
    lam = math.sqrt(2 * spec.family.nu) / spec.lengthscale
    s2 = spec.variance
    p = spec.family.order
    if p == 1:
        return np.array([[s2]])
    if p == 2:
        return np.diag([s2, lam**2 * s2])
    k = lam**2 * s2 / 3
    return np.array([[s2, 0.0, -k], [0.0, k, 0.0], [-k, 0.0, lam**4 * s2]])


def cosine_sde(omega: float) -> LtiSde:
    """Noise-free rotation SDE whose first coordinate is ``cos(omega t)``."""
    _check_frequency(omega)
    F = np.array([[0.0, -omega], [omega, 0.0]])
    return LtiSde(F=F, L=np.eye(2), Qc=np.zeros((2, 2)), Pinf=np.eye(2), h=np.array([1.0, 0.0]))


def subband_sde(omega: float, matern: LtiSde) -> LtiSde:
    """Quasi-periodic subband prior: cosine (+) Matérn via Kronecker algebra."""
    cos = cosine_sde(omega)
    m = matern.dim
    F = np.kron(cos.F, np.eye(m)) + np.kron(np.eye(2), matern.F)
    L = np.kron(cos.L, matern.L)
    Qc = np.kron(np.eye(2), matern.Qc)
    h = np.kron(cos.h, matern.h)
    return LtiSde(F=F, L=L, Qc=Qc, Pinf=solve_lyapunov(F, L, Qc), h=h)


def kernel_sde(spec: KernelSpec) -> LtiSde:
    base = matern_sde(spec)
    if spec.cosine_freq is None:
        return base
    return subband_sde(spec.cosine_freq, base)


def solve_lyapunov(F, L, Qc) -> np.ndarray:
    """Solve ``F P + P F' + L Qc L' = 0`` by a Kronecker-vectorised solve."""
    F = np.atleast_2d(np.asarray(F, dtype=float))
    L = np.atleast_2d(np.asarray(L, dtype=float))
    Qc = np.atleast_2d(np.asarray(Qc, dtype=float))
    n = F.shape[0]
    eig = np.linalg.eigvals(F)
    if np.max(eig.real) >= 0:
        raise StabilityError(f"F is not Hurwitz (max Re eig = {np.max(eig.real):.3g})")
    I = np.eye(n)
    lhs = np.kron(I, F) + np.kron(F, I)
    rhs = -(L @ Qc @ L.T).reshape(-1, order="F")
    P = np.linalg.solve(lhs, rhs).reshape((n, n), order="F")
    return 0.5 * (P + P.T)


def discretize(F, Pinf, dt):
    """Transition ``A = expm(F dt)`` and process noise ``Q = Pinf - A Pinf A'``."""
    if not (np.isfinite(dt) and dt > 0):
        raise ParameterError(f"dt must be > 0, got {dt!r}")
    A = expm(np.asarray(F, dtype=float) * dt)
    Q = Pinf - A @ Pinf @ A.T
    return A, _psd_clip(Q)


def _psd_clip(Q):
    Q = 0.5 * (Q + Q.T)
    w, V = np.linalg.eigh(Q)
    if np.min(w) >= 0:
        return Q
    w = np.clip(w, 0.0, None)
    return 0.5 * ((V * w) @ V.T + ((V * w) @ V.T).T)


def kernel_covariance(sde: LtiSde, tau) -> np.ndarray:
    """Stationary covariance ``h Pinf expm(F' tau) h'`` at lag(s) ``tau``."""
    taus = np.atleast_1d(np.asarray(tau, dtype=float))
    if np.any(taus < 0):
        raise ParameterError("lags must be nonnegative")
    ph = sde.Pinf @ sde.h
    out = np.array([sde.h @ expm(sde.F * t) @ ph for t in taus])
    return out if np.ndim(tau) else out[0]


def _stack(sdes, kinds, dt):
    sizes = [s.dim for s in sdes]
    M = int(sum(sizes))
    A = np.zeros((M, M))
    Q = np.zeros((M, M))
    P0 = np.zeros((M, M))
    blocks = []
    offset = 0
    counters = {"z": 0, "g": 0}
    for sde, kind in zip(sdes, kinds):
        sl = slice(offset, offset + sde.dim)
        Ab, Qb = discretize(sde.F, sde.Pinf, dt)
        A[sl, sl] = Ab
        Q[sl, sl] = Qb
        P0[sl, sl] = sde.Pinf
        blocks.append(Block(kind=kind, index=counters[kind], sl=sl, A=Ab, Q=Qb, Pinf=sde.Pinf, h=sde.h))
        counters[kind] += 1
        offset += sde.dim
    rows = {"z": [], "g": []}
    slices = {"z": [], "g": []}
    for b in blocks:
        r = np.zeros(M)
        r[b.sl] = b.h
        rows[b.kind].append(r)
        slices[b.kind].append(b.sl)
    Hz = np.array(rows["z"]).reshape(-1, M)
    Hg = np.array(rows["g"]).reshape(-1, M)
    layout = Layout(z_slices=tuple(slices["z"]), g_slices=tuple(slices["g"]), Hz=Hz, Hg=Hg)
    return DiscreteModel(A=A, Q=Q, P0=P0, layout=layout, dt=float(dt), blocks=tuple(blocks))


def stack_model(subbands, modulators, dt) -> DiscreteModel:
    """Block-diagonal discrete model: subband blocks first, then modulators."""
    subbands, modulators = list(subbands), list(modulators)
    if not subbands or not modulators:
        raise ConfigurationError("stack_model needs at least one subband and one modulator")
    if not (np.isfinite(dt) and dt > 0):
        raise ParameterError(f"dt must be > 0, got {dt!r}")
    return _stack(subbands + modulators, ["z"] * len(subbands) + ["g"] * len(modulators), dt)


def stack_subbands(subbands, dt) -> DiscreteModel:
    """Subband-only model for the linear time-frequency analysis."""
    subbands = list(subbands)
    if not subbands:
        raise ConfigurationError("at least one subband is required")
    return _stack(subbands, ["z"] * len(subbands), dt)

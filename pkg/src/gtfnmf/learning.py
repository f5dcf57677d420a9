"""Hyperparameter initialisation and tuning.

The pipeline follows the usual recipe for these models: fit a spectral
mixture to the signal's periodogram, compute a probabilistic spectrogram
with the resulting linear time-frequency model, factorise it with NMF, map
the temporal basis to modulator space and finally tune everything on the
single-sweep EP estimate of the log marginal likelihood.
"""

from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.optimize
import scipy.signal

from ._validation import check_mask, check_nonnegative_matrix, check_positive, check_signal
from .ep import EpConfig, adf_log_marginal
from .exceptions import ConfigurationError, DegenerateInputError, InitializationError, ParameterError
from .kalman import kalman_smoother
from .kernels import KernelSpec, MaternFamily, kernel_sde, stack_subbands
from .model import ModelSpec, softplus_inv

logger = logging.getLogger(__name__)

MIN_INIT_LENGTH = 1024
PARAM_GROUPS = ("freqs", "sub_lengthscales", "sub_variances", "mod_lengthscales",
                "mod_variances", "W", "noise_var")


@dataclass
class HyperParams:
    """All tunable quantities of one model.

    Frequencies are in rad/sample, lengthscales in seconds.  ``pack`` returns
    the logarithm of every entry (all are positive), in the order of
    :data:`PARAM_GROUPS`.  Zero weights are packed at a floor of 1e-300 so the
    round trip stays finite.
    """

    freqs: np.ndarray
    sub_lengthscales: np.ndarray
    sub_variances: np.ndarray
    mod_lengthscales: np.ndarray
    mod_variances: np.ndarray
    W: np.ndarray
    noise_var: float
    dt: float = 1.0 / 16000
    sub_family: str = "matern12"
    mod_family: str = "matern52"
    amplitudes: np.ndarray | None = None

    def __post_init__(self):
        f = lambda a: np.atleast_1d(np.asarray(a, dtype=float)).copy()
        self.freqs = f(self.freqs)
        D = self.freqs.size
        self.sub_lengthscales = np.broadcast_to(f(self.sub_lengthscales), (D,)).copy()
        self.sub_variances = np.broadcast_to(f(self.sub_variances), (D,)).copy()
        self.W = check_nonnegative_matrix(self.W).copy()
        if self.W.shape[0] != D:
            raise ConfigurationError(f"W has {self.W.shape[0]} rows for {D} subbands")
        N = self.W.shape[1]
        self.mod_lengthscales = np.broadcast_to(f(self.mod_lengthscales), (N,)).copy()
        self.mod_variances = np.broadcast_to(f(self.mod_variances), (N,)).copy()
        self.noise_var = float(self.noise_var)
        if np.any(self.freqs <= 0) or np.any(self.freqs >= math.pi):
            raise ParameterError("frequencies must lie in (0, pi) rad/sample")
        for name in ("sub_lengthscales", "sub_variances", "mod_lengthscales", "mod_variances"):
            if np.any(~np.isfinite(getattr(self, name))) or np.any(getattr(self, name) <= 0):
                raise ParameterError(f"{name} must be positive")
        check_positive(self.noise_var, "noise_var")
        if self.amplitudes is not None:
            self.amplitudes = np.asarray(self.amplitudes, dtype=float).ravel().copy()

    @property
    def D(self):
        return self.freqs.size

    @property
    def N(self):
        return self.W.shape[1]

    def _groups(self):
        return [self.freqs, self.sub_lengthscales, self.sub_variances, self.mod_lengthscales,
                self.mod_variances, self.W.ravel(), np.array([self.noise_var])]

    def pack(self) -> np.ndarray:
        return np.log(np.maximum(np.concatenate(self._groups()), 1e-300))

    def unpack(self, theta) -> "HyperParams":
        """New instance with the values of a packed vector (same shapes as ``self``)."""
        theta = np.asarray(theta, dtype=float)
        sizes = [g.size for g in self._groups()]
        if theta.size != sum(sizes):
            raise ConfigurationError(f"packed vector has {theta.size} entries, expected {sum(sizes)}")
        parts = np.split(np.exp(theta), np.cumsum(sizes)[:-1])
        return dataclasses.replace(self, freqs=parts[0], sub_lengthscales=parts[1], sub_variances=parts[2],
                                   mod_lengthscales=parts[3], mod_variances=parts[4],
                                   W=parts[5].reshape(self.W.shape), noise_var=float(parts[6][0]))

    def mask(self, free) -> np.ndarray:
        """Boolean vector over packed entries, True for entries in the ``free`` groups."""
        free = set(free)
        unknown = free - set(PARAM_GROUPS)
        if unknown:
            raise ConfigurationError(f"unknown parameter groups {sorted(unknown)}")
        return np.concatenate([np.full(g.size, name in free) for name, g in zip(PARAM_GROUPS, self._groups())])

    def to_spec(self) -> ModelSpec:
        return ModelSpec.from_arrays(self.freqs, self.sub_lengthscales, self.sub_variances,
                                     self.mod_lengthscales, self.mod_variances, self.W, self.noise_var,
                                     dt=self.dt, sub_family=self.sub_family, mod_family=self.mod_family,
                                     amplitudes=self.amplitudes)

    @classmethod
    def from_spec(cls, spec: ModelSpec) -> "HyperParams":
        return cls(freqs=[k.cosine_freq for k in spec.subband_kernels],
                   sub_lengthscales=[k.lengthscale for k in spec.subband_kernels],
                   sub_variances=[k.variance for k in spec.subband_kernels],
                   mod_lengthscales=[k.lengthscale for k in spec.modulator_kernels],
                   mod_variances=[k.variance for k in spec.modulator_kernels],
                   W=spec.W, noise_var=spec.noise_var, dt=spec.dt,
                   sub_family=spec.subband_kernels[0].family.value,
                   mod_family=spec.modulator_kernels[0].family.value,
                   amplitudes=spec.amplitudes)

    def to_dict(self) -> dict:
        out = {}
        for f_ in dataclasses.fields(self):
            v = getattr(self, f_.name)
            out[f_.name] = v.tolist() if isinstance(v, np.ndarray) else v
        return out

    @classmethod
    def from_dict(cls, d) -> "HyperParams":
        names = {f_.name for f_ in dataclasses.fields(cls)}
        extra = set(d) - names
        if extra:
            raise ConfigurationError(f"unknown hyperparameter fields {sorted(extra)}")
        return cls(**d)

    @staticmethod
    def concatenate(parts) -> "HyperParams":
        """One model whose channels and modulators are those of ``parts`` side by side.

        Weights become block diagonal, so each part's modulators only drive
        its own channels.  Used to model a mixture of independently trained
        sources.
        """
        parts = list(parts)
        if not parts:
            raise ConfigurationError("nothing to concatenate")
        W = np.zeros((sum(p.D for p in parts), sum(p.N for p in parts)))
        r = c = 0
        for p in parts:
            W[r:r + p.D, c:c + p.N] = p.W
            r, c = r + p.D, c + p.N
        cat = lambda name: np.concatenate([getattr(p, name) for p in parts])
        noise = float(np.mean([p.noise_var for p in parts]))
        return HyperParams(cat("freqs"), cat("sub_lengthscales"), cat("sub_variances"),
                           cat("mod_lengthscales"), cat("mod_variances"), W, noise, dt=parts[0].dt,
                           sub_family=parts[0].sub_family, mod_family=parts[0].mod_family)


# --- frequency-domain fit -----------------------------------------------------

def _hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f) / 700.0)


def _mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m) / 2595.0) - 1.0)


def lorentzian_psd(theta, freqs, lams, variances):
    """One-sided spectral density on ``[0, pi]`` of a sum of cosine-exponential kernels.

    Each channel ``s^2 cos(w t) exp(-lam |t|)`` contributes a Lorentzian pair
    centred at ``+-w``; normalised so that the density integrates to the
    variance over ``[0, pi]`` for narrow channels.
    """
    theta = np.asarray(theta, dtype=float)[:, None]
    lam = np.asarray(lams)[None, :]
    w = np.asarray(freqs)[None, :]
    pair = lam / (lam**2 + (theta - w) ** 2) + lam / (lam**2 + (theta + w) ** 2)
    return (pair * (np.asarray(variances)[None, :] / math.pi)).sum(axis=1)


def init_subbands(y, D, sample_rate, spacing="mel", fmin=40.0, fmax_ratio=0.9,
                  nperseg=1024, sweeps=3, bw_range=10.0, log_floor=1e-4):
    """Fit ``D`` spectral-mixture channels to the Welch periodogram of ``y``.

    Returns a dict with ``freqs`` (rad/sample, ascending), ``lengthscales``
    (seconds) and ``variances``.  Channels start ``spacing``-spaced ("mel" or
    "linear") on ``[fmin, fmax_ratio * Nyquist]`` Hz with bandwidths from the
    neighbour spacing and variances from the local spectral mass, and are then
    refined one coordinate at a time on the squared log-spectral error.
    Linear spacing uses the midpoints of ``D`` equal bands over the whole
    band ``(0, Nyquist)`` instead, which suits broadband signals.
    Bandwidths stay within a factor ``bw_range`` of their initial value, which
    stops a channel from collapsing onto a single periodogram bin.
    """
    y = check_signal(y)
    D = int(D)
    if D < 1:
        raise ConfigurationError("D must be >= 1")
    if y.size < MIN_INIT_LENGTH:
        raise ConfigurationError(f"need at least {MIN_INIT_LENGTH} samples, got {y.size}")
    if not np.any(y):
        raise DegenerateInputError("signal is silent")
    fs = check_positive(sample_rate, "sample_rate")
    f_hz, pxx = scipy.signal.welch(y, fs=fs, nperseg=min(nperseg, y.size))
    theta = 2 * math.pi * f_hz / fs
    dens = pxx * fs / (2 * math.pi)  # one-sided density per rad/sample
    fmax = fmax_ratio * fs / 2
    if spacing == "mel":
        centres = _mel_to_hz(np.linspace(_hz_to_mel(fmin), _hz_to_mel(fmax), D))
    elif spacing == "linear":
        # midpoints of D equal bands covering (0, Nyquist)
        centres = (np.arange(D) + 0.5) * (fs / 2) / D
    else:
        raise ConfigurationError("spacing must be 'mel' or 'linear'")
    w = 2 * math.pi * centres / fs
    gaps = np.diff(w) if D > 1 else np.array([w[0]])
    half = 0.5 * np.concatenate([[gaps[0]], 0.5 * (gaps[:-1] + gaps[1:]), [gaps[-1]]]) if D > 1 else gaps
    lam = np.maximum(half, 1e-4)
    lam0 = lam.copy()
    edges = np.concatenate([[0.0], 0.5 * (w[:-1] + w[1:]), [math.pi]])
    dth = theta[1] - theta[0]
    var = np.array([dens[(theta >= edges[d]) & (theta < edges[d + 1])].sum() * dth for d in range(D)])
    floor = max(float(np.max(dens)) * log_floor, 1e-300)
    var_floor = float(np.sum(dens) * dth) * 1e-10 + 1e-300
    var = np.maximum(var, var_floor)
    logp = np.log(dens + floor)

    def loss(w_, lam_, var_):
        return float(np.mean((np.log(lorentzian_psd(theta, w_, lam_, var_) + floor) - logp) ** 2))

    for _ in range(int(sweeps)):
        for d in range(D):
            lo = w[d - 1] if d > 0 else 1e-4
            hi = w[d + 1] if d < D - 1 else math.pi - 1e-4

            def fw(x):
                w2 = w.copy()
                w2[d] = x
                return loss(w2, lam, var)

            w[d] = _scan_then_refine(fw, lo + 1e-6, hi - 1e-6, w[d])

            def fl(x):
                l2 = lam.copy()
                l2[d] = math.exp(x)
                return loss(w, l2, var)

            lam[d] = math.exp(scipy.optimize.minimize_scalar(
                fl, bounds=(math.log(lam0[d] / bw_range), math.log(min(lam0[d] * bw_range, math.pi))),
                method="bounded").x)

            def fv(x):
                v2 = var.copy()
                v2[d] = math.exp(x)
                return loss(w, lam, v2)

            c = math.log(var[d])
            lo_v = max(c - 15, math.log(var_floor))
            var[d] = math.exp(scipy.optimize.minimize_scalar(fv, bounds=(lo_v, c + 15), method="bounded").x)
    order = np.argsort(w)
    return {"freqs": w[order], "lengthscales": (1.0 / lam[order]) / fs, "variances": var[order]}


def _scan_then_refine(f, lo, hi, x0, n=24):
    """Grid scan then bounded Brent refinement; keeps ``x0`` unless beaten."""
    if hi <= lo:
        return x0
    xs = np.linspace(lo, hi, n)
    vals = np.array([f(x) for x in xs])
    i = int(np.argmin(vals))
    a, b = xs[max(i - 1, 0)], xs[min(i + 1, n - 1)]
    res = scipy.optimize.minimize_scalar(f, bounds=(a, b), method="bounded")
    best = min([(res.fun, res.x), (vals[i], xs[i]), (f(x0), x0)])
    return float(best[1])


# --- probabilistic spectrogram ------------------------------------------------

def linear_tf_spectrogram(y, freqs, lengthscales, variances, noise_var, dt=1.0 / 16000,
                          family="matern12", mask=None):
    """``E[z_d^2]`` under the linear model ``y = sum_d z_d + noise``, shape (D, T)."""
    y = check_signal(y)
    check_positive(noise_var, "noise_var")
    fam = MaternFamily.parse(family)
    scale = 1.0 / dt
    sdes = [kernel_sde(KernelSpec(fam, float(l), float(v), float(w)).rescaled(scale))
            for w, l, v in zip(np.atleast_1d(freqs), np.atleast_1d(lengthscales), np.atleast_1d(variances))]
    ss = stack_subbands(sdes, 1.0)
    Hz = ss.layout.Hz
    h = Hz.sum(axis=0)
    res = kalman_smoother(ss.A, ss.Q, ss.P0, h, noise_var, y, check_mask(mask, y.size))
    mean = res.means @ Hz.T
    var = np.einsum("dm,tmn,dn->td", Hz, res.covs, Hz)
    return (mean**2 + np.maximum(var, 0.0)).T


# --- NMF ----------------------------------------------------------------------

@dataclass
class NmfResult:
    W: np.ndarray
    G: np.ndarray
    objective: list = field(default_factory=list)

    def __iter__(self):  # allows ``W, G = nmf_multiplicative(...)``
        return iter((self.W, self.G))


def nmf_multiplicative(A, N, iterations=500, seed=0, tol=0.0, inner=10, eps=1e-12) -> NmfResult:
    """Euclidean NMF ``A ~ W G`` by multiplicative updates.

    Each iteration applies ``inner`` multiplicative updates to ``G`` and then
    to ``W``; the products involving the fixed factor are computed once per
    iteration, which makes the repeats cheap.  Every single update is the
    standard monotone one, so ``objective`` (``0.5 ||A - W G||_F^2`` after
    each iteration) is non-increasing.  Iteration stops early when the
    relative decrease falls below ``tol``.
    """
    A = check_nonnegative_matrix(A, "A")
    D, T = A.shape
    N = int(N)
    if not 1 <= N <= D:
        raise ConfigurationError(f"need 1 <= N <= D, got N={N}, D={D}")
    if int(inner) < 1:
        raise ConfigurationError("inner must be >= 1")
    rng = np.random.default_rng(seed)
    s = math.sqrt(max(A.mean(), eps) / N)
    W = s * rng.uniform(0.5, 1.5, (D, N))
    G = s * rng.uniform(0.5, 1.5, (N, T))
    hist = []
    prev = np.inf
    for _ in range(int(iterations)):
        WtA, WtW = W.T @ A, W.T @ W
        for _ in range(int(inner)):
            G *= WtA / (WtW @ G + eps)
        AGt, GGt = A @ G.T, G @ G.T
        for _ in range(int(inner)):
            W *= AGt / (W @ GGt + eps)
        obj = 0.5 * float(np.sum((A - W @ G) ** 2))
        hist.append(obj)
        if tol > 0 and prev - obj <= tol * prev:
            break
        prev = obj
    # put the scale in G so columns of W have unit maximum
    c = np.maximum(W.max(axis=0), eps)
    return NmfResult(W / c, G * c[:, None], hist)


# --- modulators ---------------------------------------------------------------

def init_modulators(G, dt=1.0 / 16000, floor=1e-6, family="matern52"):
    """Lengthscales, variances and starting trajectories for the modulators.

    The trajectories are ``softplus^-1(G)``; each lengthscale is the lag at
    which the row's autocorrelation first drops below that of the kernel at
    one lengthscale.
    """
    G = np.atleast_2d(np.asarray(G, dtype=float))
    if np.any(G < 0) or not np.all(np.isfinite(G)):
        raise ParameterError("G must be finite and nonnegative")
    g0 = softplus_inv(G, floor=floor)
    fam = MaternFamily.parse(family)
    target = float(KernelSpec(fam, 1.0, 1.0).analytic(1.0))
    T = G.shape[1]
    ls = np.empty(G.shape[0])
    for n, row in enumerate(g0):
        x = row - row.mean()
        den = float(x @ x)
        if den <= 0 or T < 3:
            ls[n] = T * dt
            continue
        spec = np.fft.rfft(x, 2 * T)
        ac = np.fft.irfft(spec * np.conj(spec))[:T] / den
        below = np.flatnonzero(ac < target)
        lag = below[0] if below.size else T
        ls[n] = max(int(lag), 1) * dt
    var = np.maximum(g0.var(axis=1), 1e-2)
    return {"lengthscales": ls, "variances": var, "trajectories": g0}


def initialize(y, D=16, N=3, sample_rate=16000.0, noise_var=None, spacing="mel",
               nmf_iterations=500, seed=0, sub_family="matern12", mod_family="matern52"):
    """Full initialisation pipeline; returns ``(HyperParams, g_trajectories)``."""
    y = check_signal(y)
    dt = 1.0 / check_positive(sample_rate, "sample_rate")
    sb = init_subbands(y, D, sample_rate, spacing=spacing)
    nv = float(noise_var) if noise_var is not None else max(1e-4 * float(np.var(y)), 1e-8)
    A = linear_tf_spectrogram(y, sb["freqs"], sb["lengthscales"], sb["variances"], nv, dt, sub_family)
    peak = max(float(A.max()), 1e-300)
    Wn, Gn = nmf_multiplicative(A / peak, min(N, D), nmf_iterations, seed)
    # E[z_d^2] of the linear model ~ a_d^2 * variance_d, with variances rescaled to peak 1 below
    Wn = Wn * peak / sb["variances"][:, None] * np.max(sb["variances"])
    mods = init_modulators(Gn, dt, family=mod_family)
    hp = HyperParams(sb["freqs"], sb["lengthscales"], sb["variances"] / np.max(sb["variances"]),
                     mods["lengthscales"], mods["variances"], np.maximum(Wn, 1e-6), nv, dt=dt,
                     sub_family=sub_family, mod_family=mod_family)
    return hp, mods["trajectories"]


# --- marginal-likelihood tuning -------------------------------------------------

@dataclass
class OptimResult:
    hyper: HyperParams
    objective: float
    initial_objective: float
    evaluations: int
    history: list = field(default_factory=list)


def optimize_hypers(hyper: HyperParams, y, free=("noise_var",), ep=None, max_evals=200, mask=None,
                    xatol=1e-3, fatol=1e-3) -> OptimResult:
    """Maximise the ADF log marginal likelihood over the ``free`` parameter groups.

    Nelder-Mead on the packed log-parameters; entries outside ``free`` keep
    their values.  The best point seen is returned, so the result is never
    worse than the start.
    """
    y = check_signal(y)
    ep = EpConfig(iterations=1) if ep is None else ep
    theta0 = hyper.pack()
    sel = hyper.mask(free)
    if not np.any(sel):
        raise ConfigurationError("no free parameters")
    best = {"f": -np.inf, "theta": theta0.copy()}
    history = []

    def objective(x):
        theta = theta0.copy()
        theta[sel] = x
        try:
            hp = hyper.unpack(theta)
            val = adf_log_marginal(hp.to_spec(), y, ep, mask)
        except (ParameterError, ConfigurationError, FloatingPointError, ArithmeticError):
            val = -np.inf
        if not np.isfinite(val):
            val = -np.inf
        history.append(val)
        if val > best["f"]:
            best["f"], best["theta"] = val, theta
        return -val if np.isfinite(val) else 1e300

    f0 = objective(theta0[sel])
    if not np.isfinite(history[0]):
        raise InitializationError("objective is not finite at the initial hyperparameters")
    scipy.optimize.minimize(objective, theta0[sel], method="Nelder-Mead",
                            options={"maxfev": int(max_evals), "xatol": xatol, "fatol": fatol})
    logger.info("optimize_hypers: %d evaluations, log p %.6g -> %.6g", len(history), -f0, best["f"])
    return OptimResult(hyper=hyper.unpack(best["theta"]), objective=float(best["f"]),
                       initial_objective=float(history[0]), evaluations=len(history), history=history)

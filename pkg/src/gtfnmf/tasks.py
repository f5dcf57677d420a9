"""Task pipelines shared by the CLI and the experiment tests.

Every task returns its outputs together with a :class:`RunReport`, which is
also what the CLI writes next to the output files.
"""

from __future__ import annotations

import json
import logging
import math
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .audio import AudioBuffer, export_csv, gap_mask, matrix_columns, metrics, write_wav
from .ekf import iekf_smoother
from .ep import EpConfig, ep_smoother
from .exceptions import ConfigurationError, DegenerateInputError, ResourceError
from .ihgp import ihgp_ep_smoother
from .learning import HyperParams, initialize, optimize_hypers
from .model import ModelSpec, sample_generative
from .posterior import PosteriorMarginals, amplitude_moments, predictive_signal, select

logger = logging.getLogger(__name__)

BACKENDS = ("ep", "ekf", "ihgp")
EP_STATE_WARNING = 80
DEFAULT_STATE_CAP = 160


@dataclass
class RunReport:
    task: str
    backend: str = ""
    theta: dict = field(default_factory=dict)
    metrics: dict = field(default_factory=dict)
    timing: dict = field(default_factory=dict)
    counts: dict = field(default_factory=dict)
    outputs: list = field(default_factory=list)
    settings: dict = field(default_factory=dict)
    notes: list = field(default_factory=list)

    def to_text(self) -> str:
        lines = [f"task = {self.task}"]
        if self.backend:
            lines.append(f"backend = {self.backend}")
        for title, d in (("settings", self.settings), ("metrics", self.metrics),
                         ("timing", self.timing), ("counts", self.counts)):
            if d:
                lines.append(f"[{title}]")
                lines += [f"{k} = {_fmt(v)}" for k, v in d.items()]
        if self.outputs:
            lines.append("[outputs]")
            lines += [f"file = {p}" for p in self.outputs]
        if self.notes:
            lines.append("[notes]")
            lines += [f"note = {n}" for n in self.notes]
        if self.theta:
            lines.append("[theta]")
            lines.append("json = " + json.dumps(self.theta))
        return "\n".join(lines) + "\n"

    def write(self, path):
        Path(path).write_text(self.to_text(), encoding="utf-8")
        return path

    def add_counts(self, post: PosteriorMarginals, prefix=""):
        self.counts[prefix + "iterations"] = post.iterations
        self.counts[prefix + "site_updates"] = post.site_updates
        self.counts[prefix + "skipped_updates"] = post.skipped
        self.counts[prefix + "clamped"] = post.clamped


def _fmt(v):
    if isinstance(v, float):
        return "inf" if math.isinf(v) else f"{v:.6g}"
    return str(v)


# --- inference dispatch -------------------------------------------------------

def infer(spec: ModelSpec, y, backend="ep", cfg: EpConfig | None = None, mask=None) -> PosteriorMarginals:
    """Posterior marginals from the chosen backend (``ekf`` uses ``cfg.iterations`` passes)."""
    cfg = EpConfig() if cfg is None else cfg
    if backend == "ep":
        return ep_smoother(spec, y, cfg, mask)[0]
    if backend == "ihgp":
        return ihgp_ep_smoother(spec, y, cfg, mask)[0]
    if backend == "ekf":
        return iekf_smoother(spec, y, cfg.iterations, mask)
    raise ConfigurationError(f"backend must be one of {BACKENDS}, got {backend!r}")


# --- presets ------------------------------------------------------------------

SIM_FREQS_HZ = (300.0, 900.0, 1800.0, 3000.0, 4500.0)
SIM_W = np.array([
    [0.006227, 0.010157],
    [0.024833, 0.019136],
    [0.006447, 0.015261],
    [0.016455, 0.008153],
    [0.023099, 0.006955],
])


def sim_preset(noise_var=1e-4, sample_rate=16000.0) -> ModelSpec:
    """D=5, N=2 model used for the simulated-data experiment (fixed by hand)."""
    fs = float(sample_rate)
    freqs = 2 * math.pi * np.array(SIM_FREQS_HZ) / fs
    return ModelSpec.from_arrays(freqs, 0.004, 1.0, [0.02, 0.05], 4.0, SIM_W, noise_var, dt=1.0 / fs)


def harmonic_preset(f0=220.0, harmonics=6, n_mod=2, noise_var=1e-4, sample_rate=16000.0,
                    sub_lengthscale=0.1, mod_lengthscales=None, mod_variance=1.0,
                    weight=0.05) -> ModelSpec:
    """Harmonic source: channels at ``f0 * h`` with weights decaying in ``h``.

    Modulator ``n`` mainly drives every ``n_mod``-th harmonic, a crude
    stand-in for a note whose spectral shape changes over time.  Modulator
    lengthscales default to a geometric ramp from 40 ms to 100 ms.
    """
    fs = float(sample_rate)
    h = np.arange(1, harmonics + 1)
    freqs = 2 * math.pi * f0 * h / fs
    if freqs[-1] >= math.pi:
        raise ConfigurationError("highest harmonic exceeds the Nyquist frequency")
    W = np.full((harmonics, n_mod), 0.2)
    W[np.arange(harmonics), (h - 1) % n_mod] = 1.0
    W *= weight / h[:, None] ** 0.5
    if mod_lengthscales is None:
        mod_lengthscales = np.geomspace(0.04, 0.1, n_mod) if n_mod > 1 else 0.04
    ml = np.broadcast_to(np.asarray(mod_lengthscales, dtype=float), (n_mod,))
    return ModelSpec.from_arrays(freqs, sub_lengthscale, 1.0, ml, mod_variance, W, noise_var, dt=1.0 / fs)


SPEECH_FREQS_HZ = (250.0, 500.0, 900.0, 1400.0, 2300.0, 3300.0)
SPEECH_W = np.array([
    [0.30, 0.05, 0.10],
    [0.25, 0.20, 0.05],
    [0.05, 0.30, 0.10],
    [0.10, 0.15, 0.20],
    [0.02, 0.05, 0.25],
    [0.01, 0.02, 0.15],
])


def speech_like_preset(noise_var=1e-4, sample_rate=16000.0) -> ModelSpec:
    """Formant-like stand-in for speech: D=6 broad channels, N=3 syllable-rate modulators."""
    fs = float(sample_rate)
    freqs = 2 * math.pi * np.array(SPEECH_FREQS_HZ) / fs
    return ModelSpec.from_arrays(freqs, 0.008, 1.0, [0.03, 0.06, 0.12], 2.0, SPEECH_W * 0.02,
                                 noise_var, dt=1.0 / fs)


def spec_from_hyper(hp: HyperParams, noise_var=None) -> ModelSpec:
    spec = hp.to_spec()
    return spec if noise_var is None else spec.with_noise(noise_var)


# --- tasks --------------------------------------------------------------------

def task_simulate(spec: ModelSpec, T, seed=0, out_dir=None, prefix="sim"):
    """Draw from the generative model; writes the WAV and latent CSVs when ``out_dir`` is set."""
    t0 = time.perf_counter()
    sample = sample_generative(spec, T, seed)
    report = RunReport("simulate", settings={"T": int(T), "seed": seed, "D": spec.D, "N": spec.N,
                                             "noise_var": spec.noise_var})
    report.theta = HyperParams.from_spec(spec).to_dict()
    peak = float(np.max(np.abs(sample.y))) if T else 0.0
    report.metrics["peak"] = peak
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        fs = 1.0 / spec.dt
        gain = 0.99 / peak if peak > 0.99 else 1.0
        if gain != 1.0:
            report.notes.append("WAV is scaled by wav_gain to fit [-1, 1]; CSV holds unscaled values")
        report.settings["wav_gain"] = gain
        write_wav(out / f"{prefix}.wav", sample.y * gain, fs)
        export_csv(out / f"{prefix}_signal.csv", {"y": sample.y, "f": sample.f})
        export_csv(out / f"{prefix}_subbands.csv", matrix_columns("z", sample.Z.T))
        export_csv(out / f"{prefix}_modulators.csv", matrix_columns("g", sample.G.T))
        report.outputs += [str(out / f"{prefix}{s}") for s in (".wav", "_signal.csv", "_subbands.csv", "_modulators.csv")]
    report.timing["total_s"] = time.perf_counter() - t0
    return sample, report


def task_denoise(noisy, spec: ModelSpec, noise_var, backend="ep", cfg=None, clean=None):
    """Posterior mean of the noise-free signal; metrics against ``clean`` when given."""
    y = _samples(noisy)
    if not noise_var > 0:
        raise ConfigurationError("noise_var must be > 0")
    spec = spec.with_noise(noise_var)
    t0 = time.perf_counter()
    post = infer(spec, y, backend, cfg)
    est, _ = predictive_signal(post, spec)
    report = RunReport("denoise", backend, settings={"noise_var": noise_var, "T": y.size})
    report.timing["inference_s"] = time.perf_counter() - t0
    report.add_counts(post)
    report.theta = HyperParams.from_spec(spec).to_dict()
    if clean is not None:
        m = metrics(_samples(clean), est)
        report.metrics.update(snr_db=m.snr_db, rmse=m.rmse)
        report.metrics["input_snr_db"] = metrics(_samples(clean), y).snr_db
    return est, report


@dataclass
class InpaintResult:
    mean: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    var: np.ndarray


def task_inpaint(y, mask, spec: ModelSpec, backend="ep", cfg=None, clean=None):
    """Fill missing samples from the smoother's predictive distribution.

    ``mask`` is True on observed samples.  Intervals are ``mean +- 1.96 sd``
    of the noise-free measurement.  With ``clean`` the report carries the
    SNR over the missing samples (``gap_snr_db``) and overall.
    """
    y = _samples(y)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != y.shape:
        raise ConfigurationError("mask length differs from the signal")
    if not mask.any():
        raise DegenerateInputError("every sample is missing")
    t0 = time.perf_counter()
    post = infer(spec, np.where(mask, y, 0.0), backend, cfg, mask)
    mean, var = predictive_signal(post, spec)
    sd = np.sqrt(var)
    res = InpaintResult(mean, mean - 1.96 * sd, mean + 1.96 * sd, var)
    report = RunReport("inpaint", backend, settings={"T": y.size, "missing": int((~mask).sum())})
    report.timing["inference_s"] = time.perf_counter() - t0
    report.add_counts(post)
    report.theta = HyperParams.from_spec(spec).to_dict()
    if clean is not None:
        c = _samples(clean)
        if (~mask).any():
            report.metrics["gap_snr_db"] = metrics(c[~mask], mean[~mask]).snr_db
            report.metrics["gap_rmse"] = metrics(c[~mask], mean[~mask]).rmse
        report.metrics["snr_db"] = metrics(c, mean).snr_db
    return res, report


def task_separate(mixture, sources, noise_var=None, backend="ihgp", cfg=None, state_cap=DEFAULT_STATE_CAP,
                  references=None):
    """Separate a mixture given one hyperparameter set per source.

    The source models are placed side by side in one state space and the
    measurement mean of each source's channels is returned.  Dense backends
    are refused above ``state_cap`` state dimensions.
    """
    y = _samples(mixture)
    sources = list(sources)
    if len(sources) < 2:
        raise ConfigurationError("separation needs at least two source models")
    hp = HyperParams.concatenate(sources)
    spec = hp.to_spec() if noise_var is None else hp.to_spec().with_noise(noise_var)
    M = spec.state_space().dim
    if backend != "ihgp" and M > state_cap:
        raise ResourceError(f"combined state dimension {M} exceeds the cap {state_cap}; use the ihgp backend")
    if backend == "ep" and M > EP_STATE_WARNING:
        warnings.warn(f"full EP on a state of dimension {M} is slow; ihgp is recommended", RuntimeWarning)
    t0 = time.perf_counter()
    post = infer(spec, y, backend, cfg)
    outs = []
    zs = gs = 0
    for s in sources:
        sub = select(post, np.arange(zs, zs + s.D), np.arange(gs, gs + s.N))
        outs.append(predictive_signal(sub, s.to_spec())[0])
        zs, gs = zs + s.D, gs + s.N
    report = RunReport("separate", backend, settings={"T": y.size, "sources": len(sources), "state_dim": M})
    report.timing["inference_s"] = time.perf_counter() - t0
    report.add_counts(post)
    report.theta = hp.to_dict()
    if references is not None:
        for i, (r, e) in enumerate(zip(references, outs)):
            m = metrics(_samples(r), e)
            report.metrics[f"source{i + 1}_snr_db"] = m.snr_db
    return outs, report


def task_train(y, D=16, N=3, sample_rate=16000.0, noise_var=None, optimize=False, free=("noise_var",),
               max_evals=100, cfg=None, seed=0, spacing="mel"):
    """Initialise hyperparameters from a signal and optionally tune them."""
    y = _samples(y)
    t0 = time.perf_counter()
    hp, _ = initialize(y, D, N, sample_rate, noise_var=noise_var, seed=seed, spacing=spacing)
    report = RunReport("train", settings={"D": D, "N": N, "T": y.size, "optimize": bool(optimize)})
    report.timing["init_s"] = time.perf_counter() - t0
    if optimize:
        t1 = time.perf_counter()
        ep = EpConfig(power=cfg.power, damping=cfg.damping, iterations=1) if cfg is not None else None
        res = optimize_hypers(hp, y, free=free, ep=ep, max_evals=max_evals)
        hp = res.hyper
        report.metrics.update(initial_log_marginal=res.initial_objective, log_marginal=res.objective)
        report.counts["evaluations"] = res.evaluations
        report.timing["optimize_s"] = time.perf_counter() - t1
    report.theta = hp.to_dict()
    return hp, report


def task_analyze(y, spec: ModelSpec, backend="ep", cfg=None, mask=None, out_dir=None, prefix="analysis"):
    """Posterior marginals and amplitude envelopes, exported as CSV."""
    y = _samples(y)
    t0 = time.perf_counter()
    post = infer(spec, y, backend, cfg, mask)
    Ea, _ = amplitude_moments(post, spec)
    mean, var = predictive_signal(post, spec)
    report = RunReport("analyze", backend, settings={"T": y.size, "D": spec.D, "N": spec.N})
    report.timing["inference_s"] = time.perf_counter() - t0
    report.add_counts(post)
    report.metrics["log_marginal"] = post.log_marginal
    report.theta = HyperParams.from_spec(spec).to_dict()
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        cols = {}
        cols.update(matrix_columns("z_mean", post.z_mean))
        cols.update(matrix_columns("z_var", post.z_var))
        cols.update(matrix_columns("g_mean", post.g_mean))
        cols.update(matrix_columns("g_var", post.g_var))
        export_csv(out / f"{prefix}_marginals.csv", cols)
        export_csv(out / f"{prefix}_spectrogram.csv", matrix_columns("a", Ea))
        export_csv(out / f"{prefix}_signal.csv", {"y": y, "mean": mean, "var": var})
        report.outputs += [str(out / f"{prefix}{s}.csv") for s in ("_marginals", "_spectrogram", "_signal")]
    return post, report


# --- benchmark ----------------------------------------------------------------

METHODS = (("EP1", "ep", 1), ("EP20", "ep", 20), ("IHGP1", "ihgp", 1), ("IHGP20", "ihgp", 20),
           ("EKF1", "ekf", 1), ("EKF20", "ekf", 20))


def method_cfg(iterations, cfg=None):
    base = EpConfig() if cfg is None else cfg
    return EpConfig(power=base.power, damping=base.damping, iterations=iterations, rule=base.rule,
                    tol=base.tol, variant=base.variant, g_derivatives=base.g_derivatives)


def bench_sim(T=5000, seed=7, methods=METHODS, cfg=None):
    """RMSE of each method on data drawn from :func:`sim_preset`."""
    spec = sim_preset()
    sample = sample_generative(spec, T, seed)
    out = {}
    for name, backend, iters in methods:
        post = infer(spec, sample.y, backend, method_cfg(iters, cfg))
        out[name] = metrics(sample.f, predictive_signal(post, spec)[0]).rmse
    return out


MISSING_NOISE_VAR = 1e-2
MISSING_SEEDS = (11, 12, 13, 14)


def missing_data_signal(T=4000, seed=11, gap_ms=20.0, period_ms=100.0, spec=None):
    """Harmonic test signal with 20 ms gaps every 100 ms: ``(spec, clean, y, mask)``."""
    spec = harmonic_preset(noise_var=MISSING_NOISE_VAR) if spec is None else spec
    sample = sample_generative(spec, T, seed)
    fs = 1.0 / spec.dt
    mask = gap_mask(T, round(gap_ms * 1e-3 * fs), round(period_ms * 1e-3 * fs))
    if mask.all():
        raise ConfigurationError(f"T={T} is too short for a {gap_ms:g} ms gap every {period_ms:g} ms")
    return spec, sample.f, sample.y, mask


def bench_missing(T=4000, seeds=MISSING_SEEDS, methods=METHODS, cfg=None):
    """Mean gap-region SNR (dB) of each method over the harmonic test signals."""
    scores = {name: [] for name, _, _ in methods}
    for seed in seeds:
        spec, clean, y, mask = missing_data_signal(T, seed)
        for name, backend, iters in methods:
            res, rep = task_inpaint(y, mask, spec, backend, method_cfg(iters, cfg), clean=clean)
            scores[name].append(rep.metrics["gap_snr_db"])
    return {k: float(np.mean(v)) for k, v in scores.items()}


def bench_table(sim=None, missing=None) -> str:
    """Plain-text table with one column per method."""
    names = [m[0] for m in METHODS]
    lines = ["task      " + "".join(f"{n:>10}" for n in names)]
    if sim is not None:
        lines.append("sim RMSE  " + "".join(f"{sim.get(n, float('nan')):>10.4f}" for n in names))
    if missing is not None:
        lines.append("mis SNR   " + "".join(f"{missing.get(n, float('nan')):>10.3f}" for n in names))
    return "\n".join(lines) + "\n"


def _samples(x):
    if isinstance(x, AudioBuffer):
        return x.samples
    return np.asarray(x, dtype=float).ravel()

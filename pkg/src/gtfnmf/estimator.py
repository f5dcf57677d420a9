"""scikit-learn style wrapper around initialisation, tuning and inference."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import check_signal
from .audio import AudioBuffer
from .ep import EpConfig
from .learning import HyperParams, initialize, optimize_hypers
from .model import sample_generative
from .posterior import amplitude_moments, predictive_signal
from .tasks import infer


class GTFNMF(BaseEstimator, TransformerMixin):
    """Gaussian time-frequency NMF model of a mono signal.

    ``fit`` initialises the hyperparameters from the signal (periodogram fit,
    linear time-frequency analysis, NMF) and, when ``optimize`` is set, tunes
    the ``free`` groups on the ADF evidence.  ``transform`` returns posterior
    mean amplitude envelopes (T, D); ``predict`` the reconstructed signal.
    Fitted attributes end in an underscore.
    """

    def __init__(self, n_subbands=16, n_modulators=3, sample_rate=16000.0, backend="ep", power=0.75,
                 damping=0.1, iterations=20, noise_var=None, optimize=False, free=("noise_var",),
                 max_evals=100, spacing="mel", seed=0):
        self.n_subbands = n_subbands
        self.n_modulators = n_modulators
        self.sample_rate = sample_rate
        self.backend = backend
        self.power = power
        self.damping = damping
        self.iterations = iterations
        self.noise_var = noise_var
        self.optimize = optimize
        self.free = free
        self.max_evals = max_evals
        self.spacing = spacing
        self.seed = seed

    def _cfg(self, iterations=None):
        return EpConfig(power=self.power, damping=self.damping,
                        iterations=self.iterations if iterations is None else iterations)

    def fit(self, X, y=None):
        x, fs = _signal(X, self.sample_rate)
        hp, _ = initialize(x, self.n_subbands, self.n_modulators, fs, noise_var=self.noise_var,
                           spacing=self.spacing, seed=self.seed)
        if self.optimize:
            res = optimize_hypers(hp, x, free=self.free, ep=self._cfg(1), max_evals=self.max_evals)
            hp = res.hyper
            self.log_marginal_ = res.objective
        self.hyperparams_ = hp
        self.spec_ = hp.to_spec()
        return self

    @classmethod
    def from_hyperparams(cls, hp: HyperParams, **kwargs) -> "GTFNMF":
        """Estimator with fixed, already known hyperparameters (no fitting needed)."""
        est = cls(n_subbands=hp.D, n_modulators=hp.N, sample_rate=1.0 / hp.dt, **kwargs)
        est.hyperparams_ = hp
        est.spec_ = hp.to_spec()
        return est

    def infer(self, X, mask=None):
        """Posterior marginals of every latent function."""
        check_is_fitted(self, "spec_")
        x, _ = _signal(X, self.sample_rate)
        return infer(self.spec_, x, self.backend, self._cfg(), mask)

    def transform(self, X, mask=None):
        post = self.infer(X, mask)
        return amplitude_moments(post, self.spec_)[0]

    def predict(self, X, mask=None, return_std=False):
        post = self.infer(X, mask)
        mean, var = predictive_signal(post, self.spec_)
        return (mean, np.sqrt(var)) if return_std else mean

    def score(self, X, y=None):
        """Approximate log marginal likelihood per sample."""
        x, _ = _signal(X, self.sample_rate)
        return self.infer(x).log_marginal / x.size

    def sample(self, T, seed=None):
        """Draw ``(signal, subbands, modulators)`` from the fitted model."""
        check_is_fitted(self, "spec_")
        s = sample_generative(self.spec_, int(T), self.seed if seed is None else seed)
        return s.y, s.Z.T, s.G.T


def _signal(X, default_rate):
    if isinstance(X, AudioBuffer):
        return X.samples, X.sample_rate
    return check_signal(np.asarray(X, dtype=float).ravel()), float(default_rate)

"""Gaussian time-frequency NMF: state-space GP audio models with EP, EKF and infinite-horizon inference."""

from .audio import AudioBuffer, metrics, read_wav, rmse, snr_db, write_wav
from .ekf import iekf_smoother
from .ep import EpConfig, SiteArray, adf_log_marginal, ep_smoother
from .estimator import GTFNMF
from .exceptions import (AudioFormatError, ConfigurationError, DegenerateInputError, DivergenceError, GTFError,
                         InitializationError, ParameterError, ResourceError, StabilityError)
from .ihgp import dare_steady, ihgp_ep_smoother
from .kalman import kalman_smoother
from .kernels import KernelSpec, MaternFamily
from .learning import HyperParams, initialize, nmf_multiplicative, optimize_hypers
from .model import ModelSpec, sample_generative
from .posterior import PosteriorMarginals, amplitude_moments, predictive_signal
from .tasks import RunReport, infer

__version__ = "0.1.0"

__all__ = [
    "AudioBuffer", "AudioFormatError", "ConfigurationError", "DegenerateInputError", "DivergenceError",
    "EpConfig", "GTFError", "GTFNMF", "HyperParams", "InitializationError", "KernelSpec", "MaternFamily",
    "ModelSpec", "ParameterError", "PosteriorMarginals", "ResourceError", "RunReport", "SiteArray",
    "StabilityError", "adf_log_marginal", "amplitude_moments", "dare_steady", "ep_smoother",
    "iekf_smoother", "ihgp_ep_smoother", "infer", "initialize", "kalman_smoother", "metrics",
    "nmf_multiplicative", "optimize_hypers", "predictive_signal", "read_wav", "rmse", "sample_generative",
    "snr_db", "write_wav",
]

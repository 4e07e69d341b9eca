"""Shortest-path diffusion on image spectra: geodesics between Gaussians, frequency-space
corruption filters, a reverse sampler, and Monte Carlo verification tools."""
from .corruption import FilterSchedule, build_schedule, calibrate_c1_for_m, corrupt, dft2, idft2
from .diffusion import (
    GaussianOracleDenoiser,
    LinearFrequencyDenoiser,
    SigmaVariant,
    TrainState,
    gaussian_oracle_denoiser,
    reverse_step,
    sample,
    train,
    train_step,
)
from .errors import SPDError
from .linalg import geodesic, geodesic_ode_residual, path_length
from .spectrum import PowerSpectrum, SpectrumFit, compute_power_spectrum, fit_spectrum, model_spectrum
from .verify import McReport, check_forward_covariance, check_frequency_ordering, compare_path_lengths

__version__ = "0.1.0"

__all__ = [
    "FilterSchedule",
    "GaussianOracleDenoiser",
    "LinearFrequencyDenoiser",
    "McReport",
    "PowerSpectrum",
    "SPDError",
    "SigmaVariant",
    "SpectrumFit",
    "TrainState",
    "build_schedule",
    "calibrate_c1_for_m",
    "check_forward_covariance",
    "check_frequency_ordering",
    "compare_path_lengths",
    "compute_power_spectrum",
    "corrupt",
    "dft2",
    "fit_spectrum",
    "gaussian_oracle_denoiser",
    "geodesic",
    "geodesic_ode_residual",
    "idft2",
    "model_spectrum",
    "path_length",
    "reverse_step",
    "sample",
    "train",
    "train_step",
]

"""Gain statistics of avalanche photodiodes at low gain.

McIntyre gain distributions, a Monte Carlo avalanche model to check them,
pulse-height spectra through a charge-sensitive readout, and fits of all of
these to data.
"""

__version__ = "0.1.0"

from .errors import ApdGainError, ValidationError
from .gainstats import (
    GainDistribution,
    McIntyreParams,
    TruncationPolicy,
    convolve_n,
    enf_empirical,
    enf_theory,
    mcintyre_pmf,
    moments,
)
from .avalanche import AvalancheConfig, mean_gain_from_coefficients, sample_gain_histogram, solve_beta_L
from .spectrum import DeviceModel, Histogram, histogram, synthesize_pulses, theoretical_spectrum, v_out
from .inference import EnfPoint, FitResult, GainCurvePoint, calibrate_gain, fit_k, fit_spectrum
from .ingest import PulseTiming, Readout, extract_pulse_heights, parse_trace, render_staircase

__all__ = [
    "ApdGainError",
    "AvalancheConfig",
    "DeviceModel",
    "EnfPoint",
    "FitResult",
    "GainCurvePoint",
    "GainDistribution",
    "Histogram",
    "McIntyreParams",
    "PulseTiming",
    "Readout",
    "TruncationPolicy",
    "ValidationError",
    "calibrate_gain",
    "convolve_n",
    "enf_empirical",
    "enf_theory",
    "extract_pulse_heights",
    "fit_k",
    "fit_spectrum",
    "histogram",
    "mcintyre_pmf",
    "mean_gain_from_coefficients",
    "moments",
    "parse_trace",
    "render_staircase",
    "sample_gain_histogram",
    "solve_beta_L",
    "synthesize_pulses",
    "theoretical_spectrum",
    "v_out",
]

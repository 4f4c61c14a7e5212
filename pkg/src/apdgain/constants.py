"""Physical constants and the reference operating point of the measured device.

All charge conversions in the package go through :data:`ELEMENTARY_CHARGE`.
"""

from scipy import constants as _codata

#: Elementary charge in coulombs (CODATA, exact since the 2019 SI redefinition).
ELEMENTARY_CHARGE = _codata.e

# Reference Si APD measured at 77 K under pure hole injection.
REF_K = 0.9218
REF_K_STDERR = 0.03064
REF_GAINS = (3.7, 13.2)

# Readout chain.
FEEDBACK_CAPACITANCE = 0.07e-12  # F
VOLTAGE_GAIN = 100.0
SIGMA_READ = 4.2  # electrons r.m.s., charge-sensitive amplifier
SIGMA_POST = 0.4  # electrons r.m.s., post amplifier
SINGLE_CARRIER_VOLTAGE_QUOTED = 2.3e-6  # V, rounded figure for m = 1

# Illumination and timing.
N_BAR = 0.1  # mean primaries per pulse in the low-gain runs
N_BAR_DIM = 0.07  # lower figure also reported for the gain-distribution runs
N_BAR_GAIN_CURVE = 48.0  # primaries per pulse for the gain-vs-bias scan
DARK_RATE = 0.04  # dark primaries per pulse
REPETITION_RATE = 200.0  # Hz
PULSE_WIDTH = 0.5e-3  # s
SAMPLING_RATE = 200.0  # Hz
UNITY_GAIN_BIAS = 18.5  # V

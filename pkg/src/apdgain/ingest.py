"""Voltage traces from an integrating amplifier, and charge steps extracted from them.

The amplifier integrates collected charge on its feedback capacitor, so its
output is a staircase: one step per light pulse, flat between pulses apart
from slow drift, and occasionally pulled back to baseline by a discharge
reset.  :func:`render_staircase` builds such traces from synthesized pulses
and :func:`extract_pulse_heights` undoes them.
"""

from dataclasses import dataclass
import csv
import io
import math
import os
import warnings

import numpy as np

from . import constants
from .errors import (
    InvalidParameterError,
    NonMonotonicTimeError,
    ParseError,
    WindowTooShortError,
)
from .spectrum import electrons_to_volts, volts_to_electrons

MAX_BAD_FRACTION = 1e-3
# a negative step larger than this many single-electron voltages is a reset
RESET_THRESHOLD_ELECTRONS = 20.0
DRIFT_WINDOW = 50
# reset instant as a fraction of the pulse period (inside the flat part)
_RESET_PHASE = 0.75


class TraceWarning(UserWarning):
    pass


@dataclass(frozen=True)
class TraceRecord:
    timestamp: float
    voltage: float


@dataclass(frozen=True)
class PulseTiming:
    repetition_rate: float = constants.REPETITION_RATE
    pulse_width: float = constants.PULSE_WIDTH
    sampling_rate: float = constants.SAMPLING_RATE

    def __post_init__(self):
        for name in ("repetition_rate", "pulse_width", "sampling_rate"):
            value = getattr(self, name)
            if not (math.isfinite(value) and value > 0.0):
                raise InvalidParameterError(f"{name} must be > 0, got {value!r}")
        if self.pulse_width >= 1.0 / self.repetition_rate:
            raise InvalidParameterError("pulse_width must be shorter than the pulse period")

    @property
    def period(self):
        return 1.0 / self.repetition_rate

    def to_dict(self):
        return {
            "repetition_rate": self.repetition_rate,
            "pulse_width": self.pulse_width,
            "sampling_rate": self.sampling_rate,
        }


@dataclass(frozen=True)
class Readout:
    C_f: float = constants.FEEDBACK_CAPACITANCE
    voltage_gain: float = constants.VOLTAGE_GAIN

    def __post_init__(self):
        for name in ("C_f", "voltage_gain"):
            value = getattr(self, name)
            if not (math.isfinite(value) and value > 0.0):
                raise InvalidParameterError(f"{name} must be > 0, got {value!r}")

    def to_dict(self):
        return {"C_f": self.C_f, "voltage_gain": self.voltage_gain}


class Trace:
    """Timestamps and voltages as parallel arrays; indexing yields :class:`TraceRecord`."""

    def __init__(self, timestamps, voltages, bad_lines=()):
        self.timestamps = np.asarray(timestamps, dtype=np.float64)
        self.voltages = np.asarray(voltages, dtype=np.float64)
        if self.timestamps.shape != self.voltages.shape or self.timestamps.ndim != 1:
            raise InvalidParameterError("timestamps and voltages must be 1-d and equally long")
        self.bad_lines = list(bad_lines)

    def __len__(self):
        return self.timestamps.size

    def __getitem__(self, i):
        return TraceRecord(float(self.timestamps[i]), float(self.voltages[i]))

    def __iter__(self):
        for t, v in zip(self.timestamps, self.voltages):
            yield TraceRecord(float(t), float(v))

    @property
    def duration(self):
        """Time covered, counting each sample as one sampling interval wide."""
        if len(self) < 2:
            return 0.0
        dt = np.median(np.diff(self.timestamps))
        return float(self.timestamps[-1] - self.timestamps[0] + dt)

    def to_csv(self, stream):
        stream.write("timestamp,voltage\n")
        stream.writelines(f"{t!r},{v!r}\n" for t, v in zip(self.timestamps.tolist(), self.voltages.tolist()))


def _lines(source):
    if isinstance(source, (str, os.PathLike)):
        with open(source, newline="") as fh:
            yield from fh
    else:
        yield from source


def parse_trace(source, format="csv", max_bad_fraction=MAX_BAD_FRACTION):
    """Read a two-column ``timestamp,voltage`` CSV.

    ``source`` is a path or an open text stream.  A non-numeric first line is
    taken as a header.  Blank lines and ``#`` comments are skipped.  Other
    lines that do not hold exactly two finite numbers are collected with
    their line numbers; more than ``max_bad_fraction`` of them is fatal.
    """
    if format != "csv":
        raise InvalidParameterError(f"unsupported trace format {format!r}")
    times, volts, bad = [], [], []
    seen = 0
    for lineno, row in enumerate(csv.reader(_lines(source)), start=1):
        if not row or (len(row) == 1 and not row[0].strip()) or row[0].lstrip().startswith("#"):
            continue
        try:
            if len(row) != 2:
                raise ValueError
            t, v = float(row[0]), float(row[1])
            if not (math.isfinite(t) and math.isfinite(v)):
                raise ValueError
        except ValueError:
            if seen == 0 and lineno == 1:
                continue  # header
            seen += 1
            bad.append((lineno, ",".join(row)))
            continue
        seen += 1
        times.append(t)
        volts.append(v)

    if seen == 0:
        warnings.warn("trace is empty", TraceWarning, stacklevel=2)
        return Trace([], [])
    if bad:
        where = ", ".join(str(n) for n, _ in bad[:20]) + (" ..." if len(bad) > 20 else "")
        if len(bad) > max_bad_fraction * seen:
            raise ParseError(f"{len(bad)} malformed of {seen} lines (lines {where})", bad)
        warnings.warn(f"skipped {len(bad)} malformed lines (lines {where})", TraceWarning, stacklevel=2)

    t = np.array(times)
    back = np.flatnonzero(np.diff(t) <= 0.0)
    if back.size:
        raise NonMonotonicTimeError(
            f"timestamps not strictly increasing at record {int(back[0]) + 1} "
            f"({t[back[0]]!r} then {t[back[0] + 1]!r})"
        )
    return Trace(t, np.array(volts), bad)


def render_staircase(electrons, timing=PulseTiming(), readout=Readout(), drift_rate=0.0,
                     reset_every=None, t0=0.0):
    """Ideal amplifier output for a sequence of per-pulse charges.

    The first period is baseline only; pulse ``i`` starts at
    ``t0 + (i + 1) / repetition_rate`` and its charge ramps in linearly over
    the pulse width.  Samples sit at the centres of the sampling intervals.
    ``drift_rate`` (electrons per second) adds a linear ramp.  With
    ``reset_every = r`` the integrated charge is discharged to zero during
    every ``r``-th period, after its pulse has settled.
    """
    e = np.asarray(electrons, dtype=np.float64)
    period = timing.period
    n_periods = e.size + 1
    n_samples = int(round(n_periods * period * timing.sampling_rate))
    rel = (np.arange(n_samples) + 0.5) / timing.sampling_rate
    p = np.minimum((rel // period).astype(np.int64), n_periods - 1)
    phase = rel - p * period

    # settled[p] = total charge after the pulse of period p has fully arrived
    settled = np.concatenate(([0.0], np.cumsum(e)))
    before = np.where(p >= 1, settled[np.maximum(p - 1, 0)], 0.0)
    this = np.where(p >= 1, e[np.maximum(p - 1, 0)], 0.0)
    charge = before + this * np.clip(phase / timing.pulse_width, 0.0, 1.0)

    if reset_every:
        r = int(reset_every)
        if r < 1:
            raise InvalidParameterError("reset_every must be >= 1")
        reset_periods = np.arange(r, n_periods, r)
        reset_times = (reset_periods + _RESET_PHASE) * period
        last = np.searchsorted(reset_times, rel, side="right") - 1
        charge = charge - np.where(last >= 0, settled[reset_periods[np.maximum(last, 0)]], 0.0)

    level = charge + drift_rate * rel
    return Trace(t0 + rel, electrons_to_volts(level, readout.C_f, readout.voltage_gain))


@dataclass(frozen=True, eq=False)
class PulseHeights:
    pulse_index: np.ndarray
    electrons: np.ndarray
    dropped: tuple = ()  # pulse indices discarded as discharge resets
    drift_corrected: bool = True

    def __len__(self):
        return self.electrons.size

    def to_csv(self, stream):
        stream.write("pulse_index,electrons\n")
        stream.writelines(f"{i},{e!r}\n" for i, e in zip(self.pulse_index.tolist(), self.electrons.tolist()))


def _segments(p, plateau, level, threshold):
    """Runs of consecutive plateau samples within one period, split at resets."""
    idx = np.flatnonzero(plateau)
    if idx.size == 0:
        return np.empty(0, np.int64), np.empty(0, np.int64)
    brk = (np.diff(idx) != 1) | (np.diff(p[idx]) != 0) | (np.diff(level[idx]) < -threshold)
    starts = idx[np.concatenate(([True], brk))]
    stops = idx[np.concatenate((brk, [True]))]
    return starts, stops


def extract_pulse_heights(trace, timing=PulseTiming(), readout=Readout(), window=DRIFT_WINDOW,
                          offset=None, reset_threshold=RESET_THRESHOLD_ELECTRONS):
    """Per-pulse charge in electrons from an integrating-amplifier trace.

    Samples inside a pulse transition are ignored.  For each pulse the
    levels of the flat stretches either side of it are extrapolated to the
    middle of the transition using the local drift slope, and their
    difference is converted to electrons with ``C_f / (q * voltage_gain)``.
    The drift slope is a centred moving median of ``window`` within-plateau
    slopes (a median so that an undetected small reset does not leak into
    neighbouring pulses); it needs at least two samples per plateau, so at one sample per
    pulse no drift correction is possible and the raw consecutive-sample
    differences are returned with a warning.

    Steps more negative than ``reset_threshold`` electrons are discharge
    resets: within a plateau they split it, and a pulse whose height comes
    out that negative is dropped.

    ``offset`` is the start of the first (baseline) period; by default half a
    sampling interval before the first sample.
    """
    n = len(trace)
    if n < 3:
        raise WindowTooShortError(f"need at least 3 samples, got {n}")
    if int(window) != window or window < 1:
        raise InvalidParameterError(f"window must be a positive integer, got {window!r}")
    window = int(window)
    t = trace.timestamps
    level = volts_to_electrons(trace.voltages, readout.C_f, readout.voltage_gain)
    t0 = t[0] - 0.5 / timing.sampling_rate if offset is None else float(offset)
    period = timing.period

    rel = t - t0
    p = np.floor(rel / period + 1e-9).astype(np.int64)
    phase = rel - p * period
    plateau = phase >= timing.pulse_width * (1.0 - 1e-9)
    starts, stops = _segments(p, plateau, level, reset_threshold)

    # slopes inside plateaus, away from transitions and resets
    inner = np.zeros(n, dtype=bool)
    for a, b in zip(starts, stops):
        inner[a:b] = True
    k = np.flatnonzero(inner)
    slopes = (level[k + 1] - level[k]) / (t[k + 1] - t[k])
    slope_t = 0.5 * (t[k] + t[k + 1])
    corrected = slopes.size > 0
    if not corrected:
        warnings.warn("one sample per plateau: drift cannot be estimated, heights are raw differences",
                      TraceWarning, stacklevel=2)
    elif slopes.size < window:
        raise WindowTooShortError(f"{slopes.size} drift samples, window needs {window}")

    seg_p = p[starts]
    # first segment of each period and last segment of each period
    first = {}
    last = {}
    for s, e_, q in zip(starts, stops, seg_p):
        first.setdefault(int(q), int(s))
        last[int(q)] = int(e_)
    periods = sorted(q for q in first if q - 1 in last)
    if not periods:
        return PulseHeights(np.empty(0, np.int64), np.empty(0), (), corrected)
    periods = np.array(periods, dtype=np.int64)
    a = np.array([last[q - 1] for q in periods])
    b = np.array([first[q] for q in periods])
    tau = t0 + periods * period + 0.5 * timing.pulse_width

    if corrected:
        centre = np.searchsorted(slope_t, tau)
        lo = np.clip(centre - window // 2, 0, slopes.size - window)
        drift = np.median(slopes[lo[:, None] + np.arange(window)], axis=1)
        heights = (level[b] - drift * (t[b] - tau)) - (level[a] + drift * (tau - t[a]))
    else:
        heights = level[b] - level[a]

    index = periods - 1
    keep = heights >= -reset_threshold
    return PulseHeights(index[keep], heights[keep], tuple(int(i) for i in index[~keep]), corrected)


def trace_to_csv_text(trace):
    buf = io.StringIO()
    trace.to_csv(buf)
    return buf.getvalue()

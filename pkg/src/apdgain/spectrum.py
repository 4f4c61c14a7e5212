"""Forward model of the readout chain: APD -> charge-sensitive amplifier -> digitizer.

Electrons are the canonical analysis unit.  Volts appear only at the I/O
boundary via ``V = voltage_gain * q * m / C_f``.
"""

from dataclasses import dataclass, field, replace
import csv
import io
import json
import math

import numba as nb
import numpy as np
from scipy.special import ndtr

from . import constants, rng
from .errors import GridTooCoarseError, InvalidParameterError
from .gainstats import (
    GainDistribution,
    McIntyreParams,
    mcintyre_head,
    mcintyre_pmf,
    poisson_weights,
)

DEFAULT_N_MAX = 3
# Gaussian kernels are cut at this many sigma; the neglected mass is ~1e-32
_KERNEL_HALF_WIDTH = 12.0


@dataclass(frozen=True)
class DeviceModel:
    """Everything between the light pulse and the recorded voltage."""

    n_bar: float = constants.N_BAR
    dark_rate: float = constants.DARK_RATE
    gain: McIntyreParams = field(default_factory=lambda: McIntyreParams(constants.REF_K, 3.7))
    C_f: float = constants.FEEDBACK_CAPACITANCE
    voltage_gain: float = constants.VOLTAGE_GAIN
    sigma_read: float = constants.SIGMA_READ
    sigma_post: float = constants.SIGMA_POST
    dark_multiplied: bool = True

    def __post_init__(self):
        for name in ("n_bar", "dark_rate", "sigma_read", "sigma_post"):
            value = getattr(self, name)
            if not (math.isfinite(value) and value >= 0.0):
                raise InvalidParameterError(f"{name} must be >= 0, got {value!r}")
        for name in ("C_f", "voltage_gain"):
            value = getattr(self, name)
            if not (math.isfinite(value) and value > 0.0):
                raise InvalidParameterError(f"{name} must be > 0, got {value!r}")
        if not isinstance(self.gain, McIntyreParams):
            raise InvalidParameterError("gain must be McIntyreParams")

    @property
    def sigma(self):
        """Total input-referred noise; the two amplifier stages add in quadrature."""
        return math.hypot(self.sigma_read, self.sigma_post)

    def with_params(self, **values):
        """Copy with any of ``n_bar, dark_rate, sigma_read, sigma_post, k, M`` replaced."""
        gain_kw = {key: values.pop(key) for key in ("k", "M") if key in values}
        gain = replace(self.gain, **gain_kw) if gain_kw else self.gain
        return replace(self, gain=gain, **values)

    def to_dict(self):
        return {
            "n_bar": self.n_bar,
            "dark_rate": self.dark_rate,
            "k": self.gain.k,
            "M": self.gain.M,
            "C_f": self.C_f,
            "voltage_gain": self.voltage_gain,
            "sigma_read": self.sigma_read,
            "sigma_post": self.sigma_post,
            "dark_multiplied": self.dark_multiplied,
        }

    @classmethod
    def from_dict(cls, data):
        data = dict(data)
        gain = McIntyreParams(data.pop("k"), data.pop("M"))
        return cls(gain=gain, **data)


def preset(name, M=3.7):
    """Operating points of the measured device.

    ``"nominal"`` uses 0.1 primaries per pulse, the value given for the
    low-gain runs; ``"dim"`` uses 0.07, the other value reported for the same
    measurements.  The two disagree and both are kept.
    """
    n_bar = {"nominal": constants.N_BAR, "dim": constants.N_BAR_DIM}
    if name not in n_bar:
        raise InvalidParameterError(f"unknown preset {name!r}; choose from {sorted(n_bar)}")
    return DeviceModel(n_bar=n_bar[name], gain=McIntyreParams(constants.REF_K, M))


def v_out(m, C_f=constants.FEEDBACK_CAPACITANCE, voltage_gain=1.0):
    """Amplifier output in volts for ``m`` carriers collected on ``C_f``."""
    m = np.asarray(m, dtype=np.float64)
    if np.any(m < 0):
        raise InvalidParameterError("carrier count must be >= 0")
    out = voltage_gain * constants.ELEMENTARY_CHARGE * m / C_f
    return float(out) if out.ndim == 0 else out


def electrons_to_volts(electrons, C_f=constants.FEEDBACK_CAPACITANCE, voltage_gain=1.0):
    """Like :func:`v_out` but for noisy, possibly negative, electron readings."""
    return voltage_gain * constants.ELEMENTARY_CHARGE * np.asarray(electrons, dtype=np.float64) / C_f


def volts_to_electrons(volts, C_f=constants.FEEDBACK_CAPACITANCE, voltage_gain=1.0):
    return np.asarray(volts, dtype=np.float64) * C_f / (constants.ELEMENTARY_CHARGE * voltage_gain)


# --------------------------------------------------------------------------
# pulses

@dataclass(frozen=True)
class PulseRecord:
    pulse_index: int
    primaries: int
    carriers_out: int
    electrons_observed: float
    v_out: float


_PULSE_COLUMNS = ("pulse_index", "primaries", "carriers_out", "electrons_observed", "v_out")


@dataclass(frozen=True, eq=False)
class PulseTable:
    """Columnar sequence of :class:`PulseRecord`."""

    pulse_index: np.ndarray
    primaries: np.ndarray
    carriers_out: np.ndarray
    electrons_observed: np.ndarray
    v_out: np.ndarray

    def __len__(self):
        return self.pulse_index.size

    def __getitem__(self, i):
        return PulseRecord(
            int(self.pulse_index[i]), int(self.primaries[i]), int(self.carriers_out[i]),
            float(self.electrons_observed[i]), float(self.v_out[i]),
        )

    def records(self):
        for i in range(len(self)):
            yield self[i]

    def to_csv(self, stream):
        stream.write(",".join(_PULSE_COLUMNS) + "\n")
        for i in range(len(self)):
            stream.write(
                f"{int(self.pulse_index[i])},{int(self.primaries[i])},{int(self.carriers_out[i])},"
                f"{float(self.electrons_observed[i])!r},{float(self.v_out[i])!r}\n"
            )

    @classmethod
    def from_csv(cls, stream):
        reader = csv.reader(stream)
        header = next(reader)
        if tuple(h.strip() for h in header) != _PULSE_COLUMNS:
            raise InvalidParameterError(f"unexpected pulse CSV header {header}")
        rows = [r for r in reader if r]
        cols = list(zip(*rows)) if rows else [()] * 5
        return cls(
            np.array(cols[0], dtype=np.int64), np.array(cols[1], dtype=np.int64),
            np.array(cols[2], dtype=np.int64), np.array(cols[3], dtype=np.float64),
            np.array(cols[4], dtype=np.float64),
        )


@nb.njit(nogil=True, cache=True)
def _synth_range(seed, start, stop, n_bar, dark_rate, dark_multiplied, cdf, sigma,
                 primaries, carriers, observed):
    state = np.empty(rng.STATE_SIZE, dtype=np.uint64)
    top = cdf.shape[0] - 1
    for i in range(start, stop):
        rng.stream_init(state, seed, rng.STREAM_PULSES, np.uint64(i))
        n_sig = rng.next_poisson(state, n_bar)
        n_dark = rng.next_poisson(state, dark_rate)
        n_mult = n_sig + n_dark if dark_multiplied else n_sig
        total = 0 if dark_multiplied else n_dark
        for _ in range(n_mult):
            u = rng.next_uniform(state)
            m = np.searchsorted(cdf, u)
            total += m if m <= top else top
        noise = sigma * rng.next_normal(state) if sigma > 0.0 else 0.0
        j = i - start
        primaries[j] = n_sig + n_dark
        carriers[j] = total
        observed[j] = total + noise


def synthesize_pulses(device, n_pulses, seed=0, workers=1, trunc=None):
    """Simulate ``n_pulses`` readouts of the device.

    Per pulse: Poisson signal and dark primaries, an independent McIntyre gain
    for every multiplied primary, and Gaussian readout noise.  Pulse ``i``
    draws only from stream ``(seed, i)``, so the output is identical for any
    ``workers``.
    """
    n_pulses = int(n_pulses)
    if n_pulses < 0:
        raise InvalidParameterError("n_pulses must be >= 0")
    seed = rng.as_seed(seed)
    cdf = mcintyre_pmf(device.gain, trunc).cdf()
    primaries = np.empty(n_pulses, dtype=np.int64)
    carriers = np.empty(n_pulses, dtype=np.int64)
    observed = np.empty(n_pulses, dtype=np.float64)

    def run(bounds):
        a, b = bounds
        _synth_range(
            seed, np.int64(a), np.int64(b), float(device.n_bar), float(device.dark_rate),
            bool(device.dark_multiplied), cdf, float(device.sigma),
            primaries[a:b], carriers[a:b], observed[a:b],
        )

    workers = max(1, min(int(workers), max(n_pulses, 1)))
    edges = np.linspace(0, n_pulses, workers + 1).round().astype(np.int64)
    ranges = [(int(a), int(b)) for a, b in zip(edges[:-1], edges[1:])]
    if workers == 1:
        run(ranges[0])
    else:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(run, ranges))
    volts = electrons_to_volts(observed, device.C_f, device.voltage_gain)
    return PulseTable(np.arange(n_pulses, dtype=np.int64), primaries, carriers, observed, volts)


# --------------------------------------------------------------------------
# theoretical spectrum

@dataclass(frozen=True, eq=False)
class CarrierMixture:
    """Discrete distribution of collected carriers per pulse (before noise)."""

    pmf: np.ndarray
    component_weights: dict
    omitted_mass: float  # Poisson orders above n_max
    truncation_mass: float  # gain-tail mass lost by truncation


def carrier_mixture(device, n_max=DEFAULT_N_MAX, trunc=None, m_limit=None):
    """Poisson mixture of n-fold convolved gain pmfs, ``n = 0..n_max``.

    With multiplied dark carriers the primaries are Poisson with mean
    ``n_bar + dark_rate``.  Otherwise dark primaries contribute one carrier
    each and are convolved in as a separate Poisson term.

    If ``m_limit`` is given the mixture is only built on ``0..m_limit``; the
    values there are exact and the rest is reported as truncation mass.
    """
    if int(n_max) != n_max or n_max < 1:
        raise InvalidParameterError(f"n_max must be an integer >= 1, got {n_max!r}")
    n_max = int(n_max)
    if m_limit is None:
        single = mcintyre_pmf(device.gain, trunc)
    else:
        single = mcintyre_head(device.gain, max(1, int(m_limit)))
    mean_mult = device.n_bar + (device.dark_rate if device.dark_multiplied else 0.0)
    weights = poisson_weights(mean_mult, n_max)

    parts = [np.array([1.0])]
    current = GainDistribution(np.array([1.0]), origin="analytic")
    lost = [0.0]
    for _ in range(n_max):
        current = _add_one(current, single, m_limit)
        parts.append(np.asarray(current.pmf))
        lost.append(current.truncation_mass)
    size = max(p.size for p in parts)
    pmf = np.zeros(size)
    for w, p in zip(weights, parts):
        pmf[: p.size] += w * p
    trunc_mass = float(sum(w * t for w, t in zip(weights, lost)))
    covered = math.fsum(weights)

    if not device.dark_multiplied and device.dark_rate > 0.0:
        dark = poisson_weights(device.dark_rate, n_max)
        full = np.convolve(pmf, dark)
        trunc_mass *= math.fsum(dark)
        covered *= math.fsum(dark)
        if m_limit is not None and full.size > m_limit + 1:
            trunc_mass += math.fsum(full[m_limit + 1:])
            full = full[: m_limit + 1]
        pmf = full
    return CarrierMixture(
        pmf=pmf,
        component_weights={n: float(w) for n, w in enumerate(weights)},
        omitted_mass=max(0.0, 1.0 - covered),
        truncation_mass=trunc_mass,
    )


def _add_one(dist, single, m_limit=None):
    """Distribution of ``dist`` plus one more independent gain draw."""
    out = np.convolve(np.asarray(dist.pmf), np.asarray(single.pmf))
    if m_limit is not None:
        # both inputs are exact heads, so the convolution is exact up to m_limit
        out = np.clip(out[: m_limit + 1], 0.0, 1.0)
        return GainDistribution(out, origin="analytic",
                                truncation_mass=max(0.0, 1.0 - math.fsum(out)))
    kept = (1.0 - dist.truncation_mass) * (1.0 - single.truncation_mass)
    return GainDistribution(np.clip(out, 0.0, 1.0), origin="analytic",
                            truncation_mass=max(0.0, 1.0 - kept))


def _gauss_mixture(x, q, sigma, what):
    """Evaluate ``sum_m q[m] K((x - m)/sigma)`` with K the normal pdf, cdf or sf.

    Only carriers within ``_KERNEL_HALF_WIDTH`` sigma of each x are summed;
    the ones further out contribute all or none of their mass.
    """
    x = np.asarray(x, dtype=np.float64)
    L = q.size
    cum = np.concatenate(([0.0], np.cumsum(q)))
    # tail[j] = sum of q[j:], accumulated from the far end to keep small tails exact
    tail = np.concatenate((np.cumsum(q[::-1])[::-1], [0.0]))
    half = _KERNEL_HALF_WIDTH * sigma
    width = int(math.ceil(2.0 * half)) + 2
    offsets = np.arange(width)
    out = np.empty_like(x)
    block = max(1, 2_000_000 // width)
    for s in range(0, x.size, block):
        xs = x[s:s + block]
        lo = np.clip(np.ceil(xs - half), 0, L).astype(np.int64)
        hi = np.clip(np.floor(xs + half) + 1, 0, L).astype(np.int64)
        j = lo[:, None] + offsets[None, :]
        inside = j < hi[:, None]
        jj = np.minimum(j, L - 1)
        z = (xs[:, None] - jj) / sigma
        if what == "pdf":
            k = np.exp(-0.5 * z * z) / (sigma * math.sqrt(2.0 * math.pi))
            out[s:s + block] = np.where(inside, q[jj] * k, 0.0).sum(axis=1)
        elif what == "cdf":
            k = ndtr(z)
            out[s:s + block] = cum[lo] + np.where(inside, q[jj] * k, 0.0).sum(axis=1)
        else:
            k = ndtr(-z)
            out[s:s + block] = tail[hi] + np.where(inside, q[jj] * k, 0.0).sum(axis=1)
    return out


def mixture_cdf(x, q, sigma):
    """CDF of carrier pmf ``q`` smeared by Gaussian noise of width ``sigma``."""
    x = np.asarray(x, dtype=np.float64)
    if sigma > 0.0:
        return _gauss_mixture(x, q, sigma, "cdf")
    cum = np.cumsum(q)
    idx = np.floor(x).astype(np.int64)
    return np.where(idx < 0, 0.0, cum[np.clip(idx, 0, q.size - 1)])


def mixture_sf(x, q, sigma):
    """Mass of the smeared pmf above ``x``; accurate where it is small."""
    x = np.asarray(x, dtype=np.float64)
    if sigma > 0.0:
        return _gauss_mixture(x, q, sigma, "sf")
    tail = np.concatenate((np.cumsum(q[::-1])[::-1], [0.0]))
    idx = np.floor(x).astype(np.int64) + 1
    return tail[np.clip(idx, 0, q.size)]


@dataclass(frozen=True, eq=False)
class SpectrumDensity:
    grid: np.ndarray
    density: np.ndarray
    component_weights: dict
    omitted_mass: float
    units: str = "electrons"

    def integral(self):
        return float(np.trapezoid(self.density, self.grid))

    def to_dict(self):
        return {
            "units": self.units,
            "component_weights": {str(n): w for n, w in self.component_weights.items()},
            "omitted_mass": self.omitted_mass,
            "x": self.grid.tolist(),
            "density": self.density.tolist(),
        }


def theoretical_spectrum(device, grid, n_max=DEFAULT_N_MAX, trunc=None):
    """Observed pulse-height density on ``grid`` (electron units).

    The zero-primary term is the readout-noise pedestal at 0.  With zero
    noise the discrete carrier masses are deposited on the nearest grid node.
    """
    grid = np.asarray(grid, dtype=np.float64)
    if grid.ndim != 1 or grid.size < 2 or np.any(np.diff(grid) <= 0):
        raise InvalidParameterError("grid must be strictly increasing with at least 2 points")
    mix = carrier_mixture(device, n_max, trunc)
    sigma = device.sigma
    if sigma > 0.0:
        step = float(np.max(np.diff(grid)))
        if step > sigma / 4.0:
            raise GridTooCoarseError(f"grid spacing {step:g} exceeds sigma/4 = {sigma / 4:g}")
        density = _gauss_mixture(grid, mix.pmf, sigma, "pdf")
    else:
        density = np.zeros_like(grid)
        m = np.arange(mix.pmf.size, dtype=np.float64)
        keep = (m >= grid[0]) & (m <= grid[-1])
        nearest = np.abs(grid[None, :] - m[keep, None]).argmin(axis=1) if keep.any() else []
        # trapezoid weights so that the numeric integral equals the deposited mass
        widths = np.empty_like(grid)
        widths[1:-1] = 0.5 * (grid[2:] - grid[:-2])
        widths[0] = 0.5 * (grid[1] - grid[0])
        widths[-1] = 0.5 * (grid[-1] - grid[-2])
        np.add.at(density, nearest, mix.pmf[keep] / widths[nearest])
    return SpectrumDensity(grid, density, mix.component_weights, mix.omitted_mass)


def bin_probabilities(device, edges, n_max=DEFAULT_N_MAX, trunc=None, mixture=None):
    """Probability of each bin plus underflow (first) and overflow (last).

    Exact integrals of the smeared mixture over the bins.  Bins below the
    median are differences of the CDF and bins above it differences of the
    survival function, so small tail probabilities keep full relative
    precision.  Carriers far enough above the last edge only feed the
    overflow, so the mixture is built just past it.
    """
    edges = np.asarray(edges, dtype=np.float64)
    if mixture is None:
        m_limit = max(1, int(math.ceil(edges[-1] + _KERNEL_HALF_WIDTH * device.sigma)) + 1)
        mixture = carrier_mixture(device, n_max, trunc, m_limit=m_limit)
    F = mixture_cdf(edges, mixture.pmf, device.sigma)
    S = mixture_sf(edges, mixture.pmf, device.sigma)
    # first edge at or past the median
    split = int(np.searchsorted(F - S, 0.0))
    below = np.arange(1, edges.size) <= split
    probs = np.empty(edges.size + 1)
    probs[0] = F[0]
    probs[1:-1] = np.where(below, np.diff(F), -np.diff(S))
    probs[-1] = S[-1] + mixture.truncation_mass
    return np.clip(probs, 0.0, None)


# --------------------------------------------------------------------------
# histograms

@dataclass(frozen=True, eq=False)
class Histogram:
    bin_edges: np.ndarray
    counts: np.ndarray
    underflow: int = 0
    overflow: int = 0
    units: str = "electrons"

    def __post_init__(self):
        edges = np.asarray(self.bin_edges, dtype=np.float64)
        counts = np.asarray(self.counts, dtype=np.int64)
        if edges.ndim != 1 or edges.size < 2 or np.any(np.diff(edges) <= 0):
            raise InvalidParameterError("bin_edges must be strictly increasing with at least 2 entries")
        if counts.shape != (edges.size - 1,):
            raise InvalidParameterError("need len(counts) == len(bin_edges) - 1")
        if np.any(counts < 0) or self.underflow < 0 or self.overflow < 0:
            raise InvalidParameterError("counts must be non-negative")
        if self.units not in ("electrons", "volts"):
            raise InvalidParameterError(f"units must be 'electrons' or 'volts', got {self.units!r}")
        object.__setattr__(self, "bin_edges", edges)
        object.__setattr__(self, "counts", counts)

    @property
    def total(self):
        return int(self.counts.sum()) + int(self.underflow) + int(self.overflow)

    @property
    def centers(self):
        return 0.5 * (self.bin_edges[1:] + self.bin_edges[:-1])

    def all_counts(self):
        """Counts with underflow prepended and overflow appended."""
        return np.concatenate(([self.underflow], self.counts, [self.overflow]))

    def scaled(self, factor):
        factor = int(factor)
        return replace(self, counts=self.counts * factor, underflow=self.underflow * factor,
                       overflow=self.overflow * factor)

    def to_dict(self):
        return {
            "units": self.units,
            "bin_edges": self.bin_edges.tolist(),
            "counts": self.counts.tolist(),
            "underflow": int(self.underflow),
            "overflow": int(self.overflow),
        }

    def to_json(self, **kwargs):
        return json.dumps(self.to_dict(), **kwargs)

    @classmethod
    def from_dict(cls, data):
        return cls(np.asarray(data["bin_edges"], dtype=np.float64),
                   np.asarray(data["counts"], dtype=np.int64),
                   int(data.get("underflow", 0)), int(data.get("overflow", 0)),
                   data.get("units", "electrons"))


def histogram(values, binning):
    """Bin ``values`` into half-open bins ``[e_i, e_{i+1})``.

    Values below the first edge go to ``underflow``; values at or above the
    last edge go to ``overflow``.
    """
    edges = np.asarray(binning, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64).reshape(-1)
    if np.any(np.isnan(values)):
        raise InvalidParameterError("cannot histogram NaN values")
    nbins = edges.size - 1
    idx = np.searchsorted(edges, values, side="right") - 1
    under = int(np.count_nonzero(idx < 0))
    over = int(np.count_nonzero(idx >= nbins))
    inside = idx[(idx >= 0) & (idx < nbins)]
    counts = np.bincount(inside, minlength=nbins) if nbins > 0 else np.zeros(0, dtype=np.int64)
    return Histogram(edges, counts, under, over)


def default_edges(values, width=1.0, pad=0.5):
    """Unit-width bins centred on integers and spanning ``values``."""
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        return np.array([-pad, width - pad])
    lo = math.floor(values.min()) - pad
    hi = math.ceil(values.max()) + pad + width
    n = int(round((hi - lo) / width))
    return lo + width * np.arange(n + 1)


def pulses_to_csv_text(table):
    buf = io.StringIO()
    table.to_csv(buf)
    return buf.getvalue()

import io
import math

import numpy as np
import pytest
from scipy.stats import norm

from apdgain import constants
from apdgain.errors import GridTooCoarseError, InvalidParameterError
from apdgain.gainstats import McIntyreParams, mcintyre_pmf
from apdgain.inference import binned_chi2
from apdgain.spectrum import (
    DeviceModel,
    Histogram,
    PulseTable,
    bin_probabilities,
    carrier_mixture,
    default_edges,
    histogram,
    preset,
    synthesize_pulses,
    theoretical_spectrum,
    v_out,
    volts_to_electrons,
)


def test_single_carrier_voltage():
    v = v_out(1, 0.07e-12, 1.0)
    assert v == pytest.approx(constants.ELEMENTARY_CHARGE / 0.07e-12, rel=1e-15)
    assert v == pytest.approx(2.2888e-6, rel=1e-4)
    assert abs(v - constants.SINGLE_CARRIER_VOLTAGE_QUOTED) / constants.SINGLE_CARRIER_VOLTAGE_QUOTED < 0.01


def test_readout_is_linear_and_invertible():
    m = np.array([0, 1, 5, 100])
    v = v_out(m, 0.07e-12, 100.0)
    assert np.allclose(v, 100.0 * m * v_out(1, 0.07e-12, 1.0))
    assert np.allclose(volts_to_electrons(v, 0.07e-12, 100.0), m)
    with pytest.raises(InvalidParameterError):
        v_out(-1)


def test_device_model_round_trip_and_validation():
    dev = DeviceModel()
    assert dev.sigma == pytest.approx(math.hypot(4.2, 0.4))
    assert DeviceModel.from_dict(dev.to_dict()) == dev
    changed = dev.with_params(k=0.5, M=2.0, n_bar=0.3)
    assert changed.gain == McIntyreParams(0.5, 2.0) and changed.n_bar == 0.3
    assert dev.gain.M == 3.7
    with pytest.raises(InvalidParameterError):
        DeviceModel(n_bar=-0.1)
    with pytest.raises(InvalidParameterError):
        DeviceModel(C_f=0.0)


def test_presets():
    assert preset("nominal").n_bar == 0.1
    assert preset("dim", 13.2).n_bar == 0.07
    assert preset("dim", 13.2).gain.M == 13.2
    with pytest.raises(InvalidParameterError):
        preset("other")


def test_mixture_without_light_is_pedestal():
    mix = carrier_mixture(DeviceModel(n_bar=0.0, dark_rate=0.0))
    assert mix.pmf[0] == 1.0 and np.all(mix.pmf[1:] == 0.0)
    assert mix.omitted_mass == 0.0


def test_mixture_single_carrier_term():
    dev = DeviceModel(n_bar=0.1, dark_rate=0.0)
    mix = carrier_mixture(dev)
    single = mcintyre_pmf(dev.gain).pmf
    p1 = 0.1 * math.exp(-0.1)
    assert mix.component_weights[1] == pytest.approx(p1, rel=1e-15)
    # at m = 1 only the one-primary term contributes
    assert mix.pmf[1] == pytest.approx(p1 * single[1], rel=1e-12)
    assert mix.pmf[0] == pytest.approx(math.exp(-0.1), rel=1e-15)


def test_mixture_mean_and_missing_mass():
    dev = DeviceModel()
    mix = carrier_mixture(dev, n_max=8)
    mean = float(np.sum(np.arange(mix.pmf.size) * mix.pmf))
    assert mean == pytest.approx((dev.n_bar + dev.dark_rate) * dev.gain.M, rel=1e-6)
    mix3 = carrier_mixture(dev, n_max=3)
    assert mix3.omitted_mass == pytest.approx(1 - sum(mix3.component_weights.values()), abs=1e-16)
    assert 0 < mix3.omitted_mass < 1e-4


def test_unmultiplied_dark_carriers():
    dev = DeviceModel(dark_multiplied=False)
    mix = carrier_mixture(dev, n_max=6)
    mean = float(np.sum(np.arange(mix.pmf.size) * mix.pmf))
    assert mean == pytest.approx(dev.n_bar * dev.gain.M + dev.dark_rate, rel=1e-6)


def test_truncated_mixture_matches_full():
    dev = DeviceModel(gain=McIntyreParams(0.9218, 13.2))
    full = carrier_mixture(dev)
    head = carrier_mixture(dev, m_limit=60)
    assert np.allclose(head.pmf, full.pmf[:61], rtol=1e-13, atol=1e-300)
    assert head.truncation_mass == pytest.approx(math.fsum(full.pmf[61:]) + full.truncation_mass, rel=1e-9)


@pytest.mark.parametrize("M", [3.7, 13.2])
def test_density_integrates_to_covered_mass(M):
    dev = DeviceModel(gain=McIntyreParams(0.9218, M))
    grid = np.arange(-60.0, 3000.0, 0.25)
    dens = theoretical_spectrum(dev, grid)
    assert np.all(dens.density >= 0.0)
    assert dens.integral() == pytest.approx(1.0 - dens.omitted_mass, abs=1e-6)


def test_density_shape_pedestal_and_decaying_tail():
    dev = DeviceModel(gain=McIntyreParams(0.9218, 13.2))
    grid = np.arange(-20.0, 200.0, 0.5)
    d = theoretical_spectrum(dev, grid).density
    assert grid[np.argmax(d)] == pytest.approx(0.0, abs=0.5)
    tail = d[grid >= 15.0]
    assert np.all(np.diff(tail) < 0)


def test_grid_too_coarse():
    with pytest.raises(GridTooCoarseError):
        theoretical_spectrum(DeviceModel(), np.arange(-10.0, 10.0, 2.0))


def test_noise_free_density_is_discrete():
    dev = DeviceModel(sigma_read=0.0, sigma_post=0.0)
    grid = np.arange(-2.0, 300.0, 1.0)
    dens = theoretical_spectrum(dev, grid)
    assert dens.integral() == pytest.approx(1.0 - dens.omitted_mass, abs=1e-6)


def test_pedestal_bins_are_gaussian():
    dev = DeviceModel(n_bar=0.0, dark_rate=0.0)
    edges = np.arange(-10.5, 11.0, 1.0)
    probs = bin_probabilities(dev, edges)
    ref = np.diff(np.concatenate(([0.0], norm.cdf(edges, scale=dev.sigma), [1.0])))
    assert np.allclose(probs, ref, rtol=1e-12, atol=1e-17)


def test_bin_probabilities_sum_and_match_density():
    dev = DeviceModel()
    edges = np.arange(-30.5, 120.5, 1.0)
    probs = bin_probabilities(dev, edges)
    mix = carrier_mixture(dev)
    assert math.fsum(probs) == pytest.approx(1.0 - mix.omitted_mass, abs=1e-12)
    fine = np.linspace(-30.5, 119.5, 15001)
    dens = theoretical_spectrum(dev, fine).density
    cum = np.concatenate(([0.0], np.cumsum(0.5 * (dens[1:] + dens[:-1]) * 0.01)))
    by_density = np.diff(cum[::100])
    assert np.allclose(probs[1:-1], by_density, atol=1e-7)


def test_tail_bins_keep_relative_precision():
    # far-tail bins must vary smoothly, not at the rounding level of the CDF
    dev = DeviceModel(gain=McIntyreParams(0.98, 3.75))
    edges = np.arange(-20.5, 111.5, 1.0)
    probs = [bin_probabilities(dev.with_params(k=0.98 + i * 1e-9), edges)[-5] for i in range(4)]
    assert abs(np.diff(probs, 3)[0]) / probs[0] < 1e-11


def test_synthesis_is_deterministic_across_workers():
    dev = DeviceModel()
    a = synthesize_pulses(dev, 20_000, seed=3, workers=1)
    b = synthesize_pulses(dev, 20_000, seed=3, workers=3)
    for col in ("primaries", "carriers_out", "electrons_observed", "v_out"):
        assert np.array_equal(getattr(a, col), getattr(b, col))
    c = synthesize_pulses(dev, 20_000, seed=4)
    assert not np.array_equal(a.electrons_observed, c.electrons_observed)


def test_synthesized_statistics():
    dev = DeviceModel()
    table = synthesize_pulses(dev, 50_000, seed=8)
    lam = dev.n_bar + dev.dark_rate
    assert table.primaries.mean() == pytest.approx(lam, abs=4 * math.sqrt(lam / 50_000))
    assert np.all(table.carriers_out[table.primaries == 0] == 0)
    noise = table.electrons_observed - table.carriers_out
    assert noise.std() == pytest.approx(dev.sigma, rel=0.02)
    assert np.allclose(table.v_out, 100.0 * constants.ELEMENTARY_CHARGE * table.electrons_observed / 0.07e-12)


def test_pulse_table_csv_round_trip():
    table = synthesize_pulses(DeviceModel(), 200, seed=1)
    buf = io.StringIO()
    table.to_csv(buf)
    back = PulseTable.from_csv(io.StringIO(buf.getvalue()))
    assert np.array_equal(back.electrons_observed, table.electrons_observed)
    assert np.array_equal(back.pulse_index, np.arange(200))
    assert buf.getvalue().splitlines()[0] == "pulse_index,primaries,carriers_out,electrons_observed,v_out"


def test_synthesized_spectrum_fits_theory():
    dev = DeviceModel()
    table = synthesize_pulses(dev, 20_000, seed=5)
    edges = np.arange(-20.5, 80.5, 1.0)
    hist = histogram(table.electrons_observed, edges)
    _, _, p = binned_chi2(hist, bin_probabilities(dev, edges))
    assert p > 0.01


def test_histogram_binning_rules():
    h = histogram([-1.0, 0.0, 0.5, 1.0, 2.0, 3.0], [0.0, 1.0, 2.0])
    assert h.underflow == 1
    assert h.counts.tolist() == [2, 1]
    assert h.overflow == 2  # the last edge itself counts as overflow
    assert h.total == 6
    assert h.all_counts().tolist() == [1, 2, 1, 2]
    assert h.scaled(3).all_counts().tolist() == [3, 6, 3, 6]
    assert Histogram.from_dict(h.to_dict()).all_counts().tolist() == h.all_counts().tolist()
    with pytest.raises(InvalidParameterError):
        histogram([np.nan], [0.0, 1.0])
    with pytest.raises(InvalidParameterError):
        Histogram(np.array([0.0, 0.0]), np.array([1]))


def test_default_edges_are_unit_bins_on_integers():
    edges = default_edges([-3.2, 7.9])
    assert edges[0] == -4.5 and edges[-1] >= 8.5
    assert np.allclose(np.diff(edges), 1.0)

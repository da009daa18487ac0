import numpy as np
import pytest

from cohisac.clocks import (
    ClockParams,
    ClockTrack,
    check_small_cfo,
    differential,
    ideal_clocks,
    rng_for,
    sample_clock,
    sample_clocks,
)
from cohisac.geometry import Waveform

F0 = 26.5e9


def test_ideal_params_give_zero_track():
    tr = sample_clock(ClockParams.ideal(), 16, 0)
    assert tr.to == 0.0
    np.testing.assert_array_equal(tr.cfo, np.zeros(16))


def test_ar1_stationary_std():
    # innovation std sigma0 * 0.01 = 1e-6 -> stationary 1e-6 / sqrt(1 - 0.99^2) = 7.09e-6
    tr = sample_clock(ClockParams(seed=3), 100_000, 0)
    tail = tr.cfo[5000:]
    expected = 1e-4 * 0.01 / np.sqrt(1 - 0.99**2)
    assert expected == pytest.approx(7.09e-6, rel=1e-3)
    assert np.std(tail) == pytest.approx(expected, rel=0.1)


def test_ar1_lag1_autocorrelation():
    tr = sample_clock(ClockParams(seed=5), 200_000, 1)
    x = tr.cfo[5000:]
    r1 = np.corrcoef(x[:-1], x[1:])[0, 1]
    # standard error of a lag-1 estimate for an AR(1) series: sqrt((1 - a^2) / n)
    se = np.sqrt((1 - 0.99**2) / x.size)
    assert abs(r1 - 0.99) < 3 * se + 1e-3


def test_initial_cfo_spread():
    first = np.array([sample_clock(ClockParams(seed=s), 1, 0).cfo[0] for s in range(2000)])
    assert np.std(first) == pytest.approx(1e-4, rel=0.1)


def test_timing_offset_uniform_bounds():
    p = ClockParams(seed=2)
    tos = np.array([sample_clock(ClockParams(seed=s), 1, 0).to for s in range(500)])
    assert tos.min() >= 0 and tos.max() <= p.to_max
    assert tos.mean() == pytest.approx(p.to_max / 2, rel=0.1)


def test_determinism_and_stream_independence():
    p = ClockParams(seed=9)
    a = sample_clocks(p, 32, 3)
    b = sample_clocks(p, 32, 4)  # adding a device must not change the others
    for x, y in zip(a, b[:3]):
        assert x.to == y.to
        np.testing.assert_array_equal(x.cfo, y.cfo)
    assert a[0].to != a[1].to


def test_rng_for_keys():
    assert rng_for(1, "x", 2).random() == rng_for(1, "x", 2).random()
    assert rng_for(1, "x", 2).random() != rng_for(1, "y", 2).random()


def test_differential_examples():
    k = 5
    same = ClockTrack(3e-9, np.linspace(0, 1e-6, k))
    dto, dcfo, po = differential(same, same, F0)
    assert dto == 0 and po == 0
    np.testing.assert_array_equal(dcfo, 0)
    n = ClockTrack(10e-9, np.zeros(k))
    m = ClockTrack(4e-9, np.zeros(k))
    dto, _, po = differential(n, m, F0)
    assert dto == pytest.approx(6e-9)
    assert po == pytest.approx(2 * np.pi * 159)


def test_differential_antisymmetry():
    p = ClockParams(seed=4)
    a, b = sample_clocks(p, 10, 2)
    d1, c1, p1 = differential(a, b, F0)
    d2, c2, p2 = differential(b, a, F0)
    assert d1 == -d2 and p1 == -p2
    np.testing.assert_array_equal(c1, -c2)


def test_differential_length_mismatch():
    with pytest.raises(ValueError):
        differential(ClockTrack(0, np.zeros(3)), ClockTrack(0, np.zeros(4)), F0)


def test_small_cfo_check():
    wf = Waveform(device_count=2)
    assert check_small_cfo(wf, ideal_clocks(4, 2)).ok
    beta = 0.5 * wf.subcarrier_spacing / F0
    rep = check_small_cfo(wf, [ClockTrack(0, np.full(4, beta)), ClockTrack(0, np.zeros(4))])
    assert not rep.ok
    assert rep.worst_ratio == pytest.approx(0.5)
    assert rep.worst_pair in [(0, 1), (1, 0)]


def test_small_cfo_default_parameters_violate():
    # f0 * sigma0 = 2.65 MHz, several times the 390.6 kHz subcarrier spacing
    wf = Waveform(device_count=2)
    assert F0 * 1e-4 == pytest.approx(2.65e6)
    rep = check_small_cfo(wf, sample_clocks(ClockParams(seed=0), 8, 2))
    assert not rep.ok


def test_invalid_params():
    with pytest.raises(ValueError):
        ClockParams(ar_coefficient=1.0)
    with pytest.raises(ValueError):
        ClockParams(to_max=-1)
    with pytest.raises(ValueError):
        sample_clock(ClockParams(), 0, 0)

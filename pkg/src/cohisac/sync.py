"""Over-the-air synchronization from the direct (LOS) path of each device pair.

The LOS delay re-references the delay axis (removing the differential timing
offset) and the LOS carrier phase, taken per slow-time slice, removes the
differential CFO and phase offset.  Optionally the LOS itself is then
cancelled from the CIR so its range sidelobes do not leak into the scene.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize_scalar

from .channel import CIRCube, Scenario, delay_to_cir, interpolate_subcarriers
from .geometry import beam_gain, los_tof, steering_from_direction, tx_beamformer, unit_vectors
from .imaging import interpolation_kernel


class SyncFailure(RuntimeError):
    pass


@dataclass
class SyncEstimate:
    """Per-pair LOS delay (s) and unit-modulus LOS phase track (K,)."""

    los_tof: dict = field(default_factory=dict)
    los_phase: dict = field(default_factory=dict)
    los_steering: dict = field(default_factory=dict)  # Rx response along the LOS, if known

    def __contains__(self, pair):
        return tuple(pair) in self.los_tof


def _los_power(cir: CIRCube, p: int, rx_steering=None) -> np.ndarray:
    """Delay profile averaged over slow time: sum_l |h|^2, or |a^H h|^2 / L if steering given."""
    h = cir.values[p]
    if rx_steering is None:
        return np.mean(np.sum(np.abs(h) ** 2, axis=1), axis=0)
    a = np.asarray(rx_steering)
    return np.mean(np.abs(np.einsum("kld,l->kd", h, a.conj())) ** 2, axis=0) / a.size


def estimate_los_tof(cir: CIRCube, pair, first_peak: bool = False,
                     threshold_db: float = 6.0, sidelobe_db: float = 10.0,
                     rx_steering=None) -> float:
    """Delay of the LOS peak on the CIR grid.

    Strongest-peak mode returns the global argmax.  First-peak mode returns the
    earliest local maximum that is ``threshold_db`` above the median floor and
    within ``sidelobe_db`` of the strongest peak.  With ``rx_steering`` (the
    known Rx response along the direct path) the antennas are combined toward
    the LOS first, which suppresses echoes arriving from other directions.
    """
    p = cir.pair_index(pair)
    pw = _los_power(cir, p, rx_steering)
    floor = np.median(pw)
    thr = floor * 10 ** (threshold_db / 10)
    if not np.any(pw > thr) or pw.max() <= 0:
        raise SyncFailure(f"no LOS peak above threshold for pair {tuple(pair)}")
    if not first_peak:
        return float(cir.delays[int(np.argmax(pw))])
    thr = max(thr, pw.max() * 10 ** (-sidelobe_db / 10))
    inner = (pw[1:-1] >= pw[:-2]) & (pw[1:-1] >= pw[2:]) & (pw[1:-1] >= thr)
    idx = np.flatnonzero(inner) + 1
    if idx.size == 0:
        return float(cir.delays[int(np.argmax(pw))])
    return float(cir.delays[idx[0]])


def estimate_los_phase(cir: CIRCube, pair, tau_hat: float, rx_steering: np.ndarray) -> np.ndarray:
    """Unit-modulus LOS phase per slow-time slice, antennas combined on the LOS response."""
    p = cir.pair_index(pair)
    d = int(round((tau_hat - cir.origin) / cir.delay_step))
    h = cir.values[p, :, :, d]  # (K, L)
    mag = np.abs(h)
    unit = np.divide(h, mag, out=np.zeros_like(h), where=mag > 0)
    z = unit @ np.conj(rx_steering)
    return z / np.maximum(np.abs(z), np.finfo(float).tiny)


def phase_crlb(snr_linear: float, L: int, M: int, N: int) -> float:
    """High-SNR bound on the LOS phase-error variance (rad^2).

    ``snr_linear`` is chi^2 sigma_s^2 |rho|^2 / sigma_z^2, so the bound reads
    M / (L N snr).
    """
    if snr_linear <= 0 or L <= 0 or M <= 0 or N <= 0:
        raise ValueError("inputs must be positive")
    return M / (L * N * snr_linear)


def los_steering(scenario: Scenario, n: int, m: int) -> np.ndarray:
    f0 = scenario.waveform.carrier_frequency
    tx, rx = scenario.devices[n], scenario.devices[m]
    if n == m:
        return steering_from_direction(rx, rx.boresight, f0)
    u, _ = unit_vectors(tx, rx.position)
    return steering_from_direction(rx, u, f0)


def los_beam_phase(scenario: Scenario, n: int, m: int) -> complex:
    """Unit phasor of the Tx beamforming gain along the direct path."""
    f0 = scenario.waveform.carrier_frequency
    tx, rx = scenario.devices[n], scenario.devices[m]
    u, _ = unit_vectors(tx, rx.position)
    chi = beam_gain(steering_from_direction(tx, u, f0), tx_beamformer(tx, scenario.focus, f0))
    return chi / abs(chi) if abs(chi) > 0 else 1.0 + 0j


def estimate_sync(cir: CIRCube, scenario: Scenario, first_peak: bool = False,
                  refine: bool = True, spatial: bool = True) -> SyncEstimate:
    """LOS delay/phase for every pair; monostatic pairs share one clock and need none.

    ``spatial`` combines antennas toward the known LOS direction before the
    delay search.  With ``refine`` the grid LOS delay is refined to sub-sample
    precision by :func:`fit_los`; the phase is still read at the nearest grid
    sample.
    """
    est = SyncEstimate()
    K = cir.values.shape[1]
    for n, m in cir.pairs:
        if n == m:
            est.los_tof[(n, m)] = 0.0
            est.los_phase[(n, m)] = np.ones(K, dtype=complex)
            continue
        a = los_steering(scenario, n, m)
        est.los_steering[(n, m)] = a
        tau = estimate_los_tof(cir, (n, m), first_peak=first_peak,
                               rx_steering=a if spatial else None)
        est.los_tof[(n, m)] = tau
        phase = estimate_los_phase(cir, (n, m), tau, a)
        # the Tx beam gain toward the Rx is known from geometry; take it out so
        # that all pairs share the same phase reference e^{-j2pi f0 tau_los}
        est.los_phase[(n, m)] = phase * np.conj(los_beam_phase(scenario, n, m))
        if refine:
            est.los_tof[(n, m)] = fit_los(cir, (n, m), tau, a)[0]
    return est


def ideal_sync(scenario: Scenario, cir: CIRCube, on_grid: bool = False) -> SyncEstimate:
    """Sync estimate from true geometry, for clock-free reference runs.

    ``on_grid`` rounds the LOS delay to the CIR grid, mimicking an unrefined estimate.
    """
    est = SyncEstimate()
    f0 = scenario.waveform.carrier_frequency
    K = cir.values.shape[1]
    for n, m in cir.pairs:
        tau = 0.0 if n == m else los_tof(scenario.devices[n], scenario.devices[m])
        est.los_phase[(n, m)] = np.full(K, np.exp(-2j * np.pi * f0 * tau))
        if n != m:
            est.los_steering[(n, m)] = los_steering(scenario, n, m)
        if on_grid:
            tau = cir.origin + cir.delay_step * round((tau - cir.origin) / cir.delay_step)
        est.los_tof[(n, m)] = tau
    return est


def _unit_path_cir(cir: CIRCube, tx_index: int, tau: float, window, oversample: int) -> np.ndarray:
    """This pair's estimator response to a unit path at ``tau``, on the CIR window."""
    wf = cir.waveform
    idx = wf.subcarriers(tx_index)
    pil = np.exp(-2j * np.pi * wf.baseband_frequencies(idx) * tau)
    full = pil if len(idx) == wf.subcarrier_count else interpolate_subcarriers(pil, idx, wf.subcarrier_count)
    return delay_to_cir(full, wf, oversample, window)


def _oversample(cir: CIRCube) -> int:
    return int(round(1.0 / (cir.delay_step * cir.waveform.bandwidth)))


def fit_los(cir: CIRCube, pair, tau_hat: float, rx_steering=None, half_width: int = 6):
    """Sub-sample LOS delay by matching the estimator's own unit-path response.

    Maximizes sum_{k,l} |g_tau^H y_{k,l}|^2 / |g_tau|^2 over a window of
    +-``half_width`` samples around ``tau_hat``.  With ``rx_steering`` the
    antennas are first combined toward the LOS and the fitted amplitude is
    constrained to c_k * a_l.  Returns (tau, amplitudes (K, L)).
    """
    p = cir.pair_index(pair)
    n = pair[0]
    os_ = _oversample(cir)
    start = int(round(cir.origin / cir.delay_step))
    d0 = int(round((tau_hat - cir.origin) / cir.delay_step))
    lo, hi = max(d0 - half_width, 0), min(d0 + half_width + 1, cir.delay_count)
    seg = cir.values[p, :, :, lo:hi]
    a = None if rx_steering is None else np.asarray(rx_steering)
    y = seg.reshape(-1, hi - lo) if a is None else np.einsum("kld,l->kd", seg, a.conj()) / np.sqrt(a.size)
    win = (start + lo, start + hi)

    def neg_energy(u):
        g = _unit_path_cir(cir, n, tau_hat + u * cir.delay_step, win, os_)
        return -np.sum(np.abs(y @ np.conj(g)) ** 2) / np.vdot(g, g).real

    res = minimize_scalar(neg_energy, bounds=(-1.0, 1.0), method="bounded", options={"xatol": 1e-9})
    tau = tau_hat + float(res.x) * cir.delay_step
    g = _unit_path_cir(cir, n, tau, win, os_)
    amp = (seg @ np.conj(g)) / np.vdot(g, g).real  # (K, L)
    if a is not None:
        amp = np.outer(amp @ a.conj() / a.size, a)
    return tau, amp


def cancel_los(cir: CIRCube, pair, tau_hat: float, rx_steering=None, half_width: int = 6) -> float:
    """Fit and subtract the LOS path of one pair in place; returns the fitted delay."""
    tau, amp = fit_los(cir, pair, tau_hat, rx_steering, half_width)
    start = int(round(cir.origin / cir.delay_step))
    full = _unit_path_cir(cir, pair[0], tau, (start, start + cir.delay_count), _oversample(cir))
    cir.values[cir.pair_index(pair)] -= amp[:, :, None] * full[None, None, :]
    return tau


def _shift(x: np.ndarray, pos: float) -> np.ndarray:
    """out[..., i] = x(i + pos) along the last axis; band-limited interpolation, zero outside."""
    D = x.shape[-1]
    j = int(np.floor(pos))
    mu = pos - j
    if mu < 1e-12:
        offsets, w = np.zeros(1, dtype=int), np.ones((1, 1))
    else:
        offsets, w = interpolation_kernel(np.array([mu]))
    out = np.zeros_like(x)
    for off, wt in zip(offsets, w[0]):
        s = j + int(off)
        lo, hi = max(0, -s), min(D, D - s)
        if hi > lo:
            out[..., lo:hi] += wt * x[..., lo + s:hi + s]
    return out


def compensate(cir: CIRCube, sync: SyncEstimate, origin_samples: int = -8,
               remove_los: bool = False) -> CIRCube:
    """Re-reference each pair's delay axis to its LOS and counter-rotate the LOS phase.

    The output shares one grid for all pairs whose sample ``-origin_samples``
    is the LOS delay.  A fractional LOS delay (from refinement or geometry) is
    applied as a band-limited sub-sample shift; samples shifted in from outside
    the input window are zero.  ``remove_los`` subtracts the fitted direct path
    of every bistatic pair first.
    """
    work = CIRCube(cir.values.copy(), cir.delay_step, cir.origin, cir.pairs, cir.waveform,
                   cir.scenario_hash)
    out = np.zeros_like(work.values)
    for p, pair in enumerate(cir.pairs):
        if pair not in sync:
            raise KeyError(f"missing sync estimate for pair {pair}")
        tau = sync.los_tof[pair]
        if remove_los and pair[0] != pair[1]:
            cancel_los(work, pair, tau, sync.los_steering.get(pair))
        pos = (tau - cir.origin) / cir.delay_step + origin_samples
        out[p] = _shift(work.values[p], pos) * np.conj(sync.los_phase[pair])[:, None, None]
    return CIRCube(out, cir.delay_step, origin_samples * cir.delay_step, cir.pairs,
                   cir.waveform, cir.scenario_hash)


def write_sync_report(path, sync: SyncEstimate, crlb: dict | None = None) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["tx", "rx", "los_tof_s", "mean_los_phase_rad", "phase_crlb_rad2"])
        for pair, tau in sync.los_tof.items():
            ph = float(np.angle(np.mean(sync.los_phase[pair])))
            w.writerow([pair[0], pair[1], f"{tau:.6e}", f"{ph:.6f}",
                        "" if not crlb else f"{crlb.get(pair, float('nan')):.3e}"])

"""Pilot-level channel synthesis and LS channel-impulse-response estimation.

The received preamble is synthesized directly at the pilot subcarriers of
each transmitter; no sample-level OFDM waveform is generated.  Estimation
divides out the pilots, interpolates onto the full subcarrier raster and
inverse transforms onto an oversampled delay grid.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .clocks import ClockParams, ClockTrack, differential, rng_for
from .geometry import (
    C0,
    Device,
    Target,
    Waveform,
    amplitude,
    beam_gain,
    doppler_shift,
    los_amplitude,
    pairs,
    steering_from_direction,
    steering_vector,
    tof,
    tx_beamformer,
    unit_vectors,
)


@dataclass
class Scenario:
    devices: list[Device]
    targets: list[Target] = field(default_factory=list)
    waveform: Waveform = field(default_factory=Waveform)
    clock_params: ClockParams = field(default_factory=ClockParams)
    snr_db: float | None = None  # per-antenna SNR of target 1; None means noiseless
    include_los: bool = True
    seed: int = 0
    focus: np.ndarray = field(default_factory=lambda: np.array([0.0, 5.0]))
    noise_variance: float | None = None  # overrides snr_db when set
    self_coupling: float = 0.0  # monostatic leakage amplitude at zero delay
    tx_cfo_delay: bool = False  # scale propagation delays by (1 + Tx CFO)

    def __post_init__(self):
        if not self.devices:
            raise ValueError("scenario needs at least one device")
        if self.waveform.device_count != len(self.devices):
            raise ValueError(
                f"waveform.device_count={self.waveform.device_count} but "
                f"{len(self.devices)} devices given"
            )
        self.focus = np.asarray(self.focus, dtype=float)

    @property
    def pairs(self) -> list[tuple[int, int]]:
        return pairs(self.devices)

    def describe(self) -> dict:
        """JSON-safe summary, used for hashing and sidecar metadata."""
        wf = self.waveform
        return {
            "devices": [
                [*d.position.tolist(), d.orientation, d.antenna_count, d.antenna_spacing]
                for d in self.devices
            ],
            "targets": [
                [*t.position.tolist(), *t.velocity.tolist(), t.rcs, t.phase] for t in self.targets
            ],
            "waveform": [
                wf.carrier_frequency, wf.bandwidth, wf.subcarrier_count, wf.device_count,
                wf.repetition_interval, wf.slow_time_count, wf.pilot_power,
            ],
            "clocks": [
                self.clock_params.to_max, self.clock_params.cfo_std,
                self.clock_params.ar_coefficient, self.clock_params.innovation_scale,
                self.clock_params.seed,
            ],
            "snr_db": self.snr_db,
            "include_los": self.include_los,
            "seed": self.seed,
            "focus": self.focus.tolist(),
            "noise_variance": self.noise_variance,
            "self_coupling": self.self_coupling,
            "tx_cfo_delay": self.tx_cfo_delay,
        }

    def hash(self) -> str:
        blob = json.dumps(self.describe(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class PilotObservation:
    """Received pilot samples per pair, each of shape (K, L, |M_n|)."""

    values: list[np.ndarray]
    pilots: list[np.ndarray]
    subcarriers: list[np.ndarray]
    pairs: list[tuple[int, int]]
    waveform: Waveform
    noise_variance: np.ndarray  # per pair, per pilot sample (before LS)
    scenario_hash: str = ""


@dataclass
class CIRCube:
    """CIR samples [pair, k, antenna, delay]; sample d sits at origin + d * delay_step."""

    values: np.ndarray
    delay_step: float
    origin: float
    pairs: list[tuple[int, int]]
    waveform: Waveform
    scenario_hash: str = ""

    @property
    def delay_count(self) -> int:
        return self.values.shape[-1]

    @property
    def delays(self) -> np.ndarray:
        return self.origin + self.delay_step * np.arange(self.delay_count)

    def pair_index(self, pair) -> int:
        return self.pairs.index(tuple(pair))

    def dump(self, path) -> None:
        """Write little-endian complex64 samples plus a JSON sidecar."""
        path = Path(path)
        np.ascontiguousarray(self.values, dtype="<c8").tofile(path)
        meta = {
            "shape": list(self.values.shape),
            "axes": ["pair", "slow_time", "antenna", "delay"],
            "dtype": "complex64-le",
            "delay_step": self.delay_step,
            "origin": self.origin,
            "pairs": [list(p) for p in self.pairs],
            "scenario_hash": self.scenario_hash,
        }
        path.with_suffix(path.suffix + ".json").write_text(json.dumps(meta, indent=2))

    @classmethod
    def load(cls, path, waveform: Waveform) -> "CIRCube":
        path = Path(path)
        meta = json.loads(path.with_suffix(path.suffix + ".json").read_text())
        values = np.fromfile(path, dtype="<c8").reshape(meta["shape"]).astype(complex)
        return cls(
            values, meta["delay_step"], meta["origin"],
            [tuple(p) for p in meta["pairs"]], waveform, meta["scenario_hash"],
        )


def pilot_symbols(seed: int, device_index: int, count: int) -> np.ndarray:
    rng = rng_for(seed, "pilot", device_index)
    return np.exp(2j * np.pi * rng.uniform(size=count))


@dataclass
class _Path:
    gain: complex  # chi * rho * exp(j theta)
    steering: np.ndarray  # Rx array response, (L,)
    delay: float  # true propagation delay
    doppler: float


def _paths(scenario: Scenario, n: int, m: int) -> list[_Path]:
    wf = scenario.waveform
    f0 = wf.carrier_frequency
    tx, rx = scenario.devices[n], scenario.devices[m]
    b = tx_beamformer(tx, scenario.focus, f0)
    out = []
    if scenario.include_los:
        if n != m:
            u, _ = unit_vectors(tx, rx.position)
            chi = beam_gain(steering_from_direction(tx, u, f0), b)
            a_rx = steering_from_direction(rx, u, f0)
            out.append(_Path(chi * los_amplitude(tx, rx, f0), a_rx, tof(tx, rx, rx.position), 0.0))
        elif scenario.self_coupling > 0:
            a = steering_from_direction(tx, tx.boresight, f0)
            chi = beam_gain(a, b)
            out.append(_Path(chi * scenario.self_coupling, a, 0.0, 0.0))
    for tgt in scenario.targets:
        chi = beam_gain(steering_vector(tx, tgt.position, f0, role="tx"), b)
        rho = amplitude(tx, rx, tgt, f0)
        out.append(_Path(
            chi * rho * np.exp(1j * tgt.phase),
            steering_vector(rx, tgt.position, f0, role="rx"),
            float(tof(tx, rx, tgt.position)),
            float(doppler_shift(tx, rx, tgt.position, tgt.velocity, f0)),
        ))
    return out


def pair_noise_variance(scenario: Scenario, n: int, m: int) -> float:
    """Per-antenna, per-pilot noise variance for the pair (0 if noiseless)."""
    if scenario.noise_variance is not None:
        return float(scenario.noise_variance)
    if scenario.snr_db is None:
        return 0.0
    if not scenario.targets:
        raise ValueError("snr_db is referenced to target 1; set noise_variance for empty scenes")
    wf = scenario.waveform
    rho = amplitude(scenario.devices[n], scenario.devices[m], scenario.targets[0], wf.carrier_frequency)
    return wf.pilot_power * rho**2 / 10 ** (scenario.snr_db / 10)


def synthesize_channel(scenario: Scenario, clocks: list[ClockTrack]) -> PilotObservation:
    """Received pilot samples y = H * s + w at every Tx pilot subcarrier."""
    wf = scenario.waveform
    f0, T, K = wf.carrier_frequency, wf.repetition_interval, wf.slow_time_count
    if len(clocks) != len(scenario.devices):
        raise ValueError("need one clock track per device")
    kT = np.arange(K) * T
    values, pilots, subs, nvar = [], [], [], []
    for p, (n, m) in enumerate(scenario.pairs):
        idx = wf.subcarriers(n)
        fb = wf.baseband_frequencies(idx)
        s = pilot_symbols(scenario.seed, n, wf.subcarrier_count)[idx]
        dto, dcfo, _ = differential(clocks[n], clocks[m], f0)
        beta_tx = clocks[n].cfo
        # common per-pair phase: DCFO rotation along slow time
        common = np.exp(2j * np.pi * f0 * dcfo * kT)  # (K,)
        L = scenario.devices[m].antenna_count
        H = np.zeros((K, L, len(idx)), dtype=complex)
        for path in _paths(scenario, n, m):
            scale = 1.0 + beta_tx if scenario.tx_cfo_delay else np.ones(K)
            app = scale * path.delay - dto  # apparent delay per k, (K,)
            # exp(-j2pi (f0 + f_i) tau_app): carrier and baseband share the delay
            ph = np.exp(-2j * np.pi * (f0 + fb[None, :]) * app[:, None])  # (K, Mn)
            slow = np.exp(-2j * np.pi * path.doppler * kT)  # (K,)
            H += path.gain * (ph * slow[:, None])[:, None, :] * path.steering[None, :, None]
        H *= common[:, None, None]
        y = H * (np.sqrt(wf.pilot_power) * s)[None, None, :]
        var = pair_noise_variance(scenario, n, m)
        if var > 0:
            for k in range(K):
                rng = rng_for(scenario.seed, "noise", p, k)
                w = rng.standard_normal((2, L, len(idx)))
                y[k] += np.sqrt(var / 2) * (w[0] + 1j * w[1])
        values.append(y)
        pilots.append(np.sqrt(wf.pilot_power) * s)
        subs.append(idx)
        nvar.append(var)
    return PilotObservation(values, pilots, subs, scenario.pairs, wf, np.array(nvar), scenario.hash())


def interpolation_weights(pilot_idx: np.ndarray, M: int):
    """Left/right pilot positions and weights for linear interpolation onto 0..M-1.

    Outside the pilot span the nearest pilot is held constant.
    """
    pilot_idx = np.asarray(pilot_idx)
    if pilot_idx.size == 0 or np.any(np.diff(pilot_idx) <= 0):
        raise ValueError("pilot subcarriers must be non-empty and strictly increasing")
    if pilot_idx[0] < 0 or pilot_idx[-1] >= M:
        raise ValueError("pilot subcarrier out of range")
    i = np.arange(M)
    pos = np.searchsorted(pilot_idx, i, side="right") - 1
    last = len(pilot_idx) - 1
    left = np.clip(pos, 0, last)
    right = np.clip(pos + 1, 0, last)
    right = np.where(pos < 0, 0, right)
    xl, xr = pilot_idx[left], pilot_idx[right]
    span = np.where(right > left, xr - xl, 1)
    w = np.where(right > left, (i - xl) / span, 0.0)
    return left, right, w


def interpolate_subcarriers(H: np.ndarray, pilot_idx: np.ndarray, M: int) -> np.ndarray:
    left, right, w = interpolation_weights(pilot_idx, M)
    return H[..., left] * (1 - w) + H[..., right] * w


def delay_to_cir(H_full: np.ndarray, waveform: Waveform, oversample: int = 2,
                 window: tuple[int, int] | None = None) -> np.ndarray:
    """Unitary zero-padded inverse DFT of centred-band spectra onto the delay grid.

    ``window`` is a half-open range of delay sample indices (may start negative);
    default is the whole unambiguous span [0, M * oversample).
    """
    M = waveform.subcarrier_count
    Lp = M * oversample
    step = 1.0 / (oversample * waveform.bandwidth)
    half = M // 2
    X = np.zeros(H_full.shape[:-1] + (Lp,), dtype=complex)
    X[..., (np.arange(M) - half) % Lp] = H_full
    x = np.fft.ifft(X, axis=-1) * np.sqrt(Lp)
    start, stop = (0, Lp) if window is None else window
    d = np.arange(start, stop)
    t = d * step
    # residual half-bin offset of the centred raster (zero for odd M)
    c0 = (half - (M - 1) / 2) * waveform.subcarrier_spacing
    return x[..., d % Lp] * np.exp(2j * np.pi * c0 * t)


def estimate_cir(obs: PilotObservation, oversample: int = 2,
                 window: tuple[int, int] | None = None) -> CIRCube:
    """LS estimate at pilots, linear interpolation, inverse DFT to the delay domain."""
    wf = obs.waveform
    M = wf.subcarrier_count
    out = []
    for y, s, idx in zip(obs.values, obs.pilots, obs.subcarriers):
        if len(s) != y.shape[-1] or len(idx) != len(s):
            raise ValueError("pilot set does not match observation")
        H = y / s
        H_full = H if len(idx) == M else interpolate_subcarriers(H, idx, M)
        out.append(delay_to_cir(H_full, wf, oversample, window))
    step = 1.0 / (oversample * wf.bandwidth)
    origin = (0 if window is None else window[0]) * step
    return CIRCube(np.stack(out), step, origin, list(obs.pairs), wf, obs.scenario_hash)


def delay_window(scenario: Scenario, max_range: float, oversample: int = 2,
                 guard: int = 24) -> tuple[int, int]:
    """Delay-sample range covering every path up to ``max_range`` metres round trip/2."""
    step = 1.0 / (oversample * scenario.waveform.bandwidth)
    to = scenario.clock_params.to_max
    lo = -int(np.ceil(to / step)) - guard
    hi = int(np.ceil((2 * max_range / C0 + to) / step)) + guard
    return lo, hi

"""Scene geometry: device arrays, point targets and propagation quantities.

Positions and velocities are plain 2-element float arrays (x, y) in metres
and metres per second. Most functions accept a stack of points with shape
``(..., 2)`` so the imaging code can evaluate whole pixel grids at once.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

C0 = 299_792_458.0  # speed of light, m/s


class DegenerateGeometryError(ValueError):
    """A point coincides with a device phase centre."""


def vec2(v) -> np.ndarray:
    arr = np.asarray(v, dtype=float).reshape(2)
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"non-finite vector {v!r}")
    return arr


@dataclass
class Device:
    """ISAC node with a uniform linear array.

    Antenna ``l`` sits at ``position + l * spacing * (cos(orientation), sin(orientation))``;
    antenna 0 is the phase reference.
    """

    position: np.ndarray
    orientation: float = 0.0
    antenna_count: int = 32
    antenna_spacing: float = C0 / 26.5e9 / 2

    def __post_init__(self):
        self.position = vec2(self.position)
        if self.antenna_count < 1:
            raise ValueError("antenna_count must be >= 1")
        if self.antenna_spacing <= 0:
            raise ValueError("antenna_spacing must be positive")

    @property
    def axis(self) -> np.ndarray:
        return np.array([np.cos(self.orientation), np.sin(self.orientation)])

    @property
    def boresight(self) -> np.ndarray:
        return np.array([-np.sin(self.orientation), np.cos(self.orientation)])

    def antenna_offsets(self) -> np.ndarray:
        """Antenna positions relative to the phase centre, shape (L, 2)."""
        ell = np.arange(self.antenna_count)
        return np.outer(ell * self.antenna_spacing, self.axis)

    def antenna_positions(self) -> np.ndarray:
        return self.position + self.antenna_offsets()


@dataclass
class Target:
    position: np.ndarray
    velocity: np.ndarray = field(default_factory=lambda: np.zeros(2))
    rcs: float = 1.0
    phase: float = 0.0

    def __post_init__(self):
        self.position = vec2(self.position)
        self.velocity = vec2(self.velocity)
        if self.rcs < 0:
            raise ValueError("rcs must be non-negative")
        self.phase = float(np.mod(self.phase, 2 * np.pi))


@dataclass
class Waveform:
    """OFDM pilot parameters shared by all devices.

    Device ``n`` (0-based) owns subcarriers ``i`` with ``i % device_count == n``.
    """

    carrier_frequency: float = 26.5e9
    bandwidth: float = 400e6
    subcarrier_count: int = 1024
    device_count: int = 1
    repetition_interval: float = 0.5e-3
    slow_time_count: int = 64
    pilot_power: float = 1.0

    def __post_init__(self):
        if self.subcarrier_count < 1 or self.device_count < 1 or self.slow_time_count < 1:
            raise ValueError("counts must be positive")
        if self.subcarrier_count < self.device_count:
            raise ValueError("need at least one subcarrier per device")
        if self.repetition_interval <= self.symbol_duration:
            raise ValueError("repetition interval must exceed the OFDM symbol duration")

    @property
    def subcarrier_spacing(self) -> float:
        return self.bandwidth / self.subcarrier_count

    @property
    def symbol_duration(self) -> float:
        return 1.0 / self.subcarrier_spacing

    @property
    def wavelength(self) -> float:
        return C0 / self.carrier_frequency

    @property
    def doppler_resolution(self) -> float:
        return 1.0 / (self.slow_time_count * self.repetition_interval)

    def subcarriers(self, device_index: int) -> np.ndarray:
        return np.arange(device_index, self.subcarrier_count, self.device_count)

    def baseband_frequencies(self, indices=None) -> np.ndarray:
        """Subcarrier offsets from the carrier; the band is centred on f0."""
        if indices is None:
            indices = np.arange(self.subcarrier_count)
        return (np.asarray(indices) - (self.subcarrier_count - 1) / 2) * self.subcarrier_spacing


def _norm(v: np.ndarray) -> np.ndarray:
    return np.linalg.norm(v, axis=-1)


def unit_vectors(device: Device, point) -> tuple[np.ndarray, np.ndarray]:
    """Return (u_tx, u_rx): device-to-point and point-to-device unit vectors."""
    diff = np.asarray(point, dtype=float) - device.position
    dist = _norm(diff)[..., None]
    if np.any(dist == 0):
        raise DegenerateGeometryError("point coincides with device position")
    u_tx = diff / dist
    return u_tx, -u_tx


def tof(tx: Device, rx: Device, point, velocity=(0.0, 0.0), t: float = 0.0):
    """Bistatic time of flight Tx -> point -> Rx for a point moving at ``velocity``."""
    pos = np.asarray(point, dtype=float) + np.asarray(velocity, dtype=float) * t
    return (_norm(pos - tx.position) + _norm(rx.position - pos)) / C0


def los_tof(tx: Device, rx: Device) -> float:
    return float(_norm(rx.position - tx.position) / C0)


def regression_row(tx: Device, rx: Device, point, f0: float) -> np.ndarray:
    """(f0/c)(u_tx - u_rx): maps a velocity to the pair's Doppler shift."""
    u_tx, _ = unit_vectors(tx, point)
    _, u_rx = unit_vectors(rx, point)
    return f0 / C0 * (u_tx - u_rx)


def doppler_shift(tx: Device, rx: Device, point, velocity, f0: float):
    """Doppler shift in Hz; a positive value enters the signal as exp(-j2pi f_D k T)."""
    row = regression_row(tx, rx, point, f0)
    return np.sum(row * np.asarray(velocity, dtype=float), axis=-1)


def amplitude(tx: Device, rx: Device, target: Target, f0: float) -> float:
    lam = C0 / f0
    d_tx = float(_norm(target.position - tx.position))
    d_rx = float(_norm(rx.position - target.position))
    if d_tx == 0 or d_rx == 0:
        raise DegenerateGeometryError("target coincides with a device")
    return float(np.sqrt(lam**2 * target.rcs / ((4 * np.pi) ** 3 * d_tx**2 * d_rx**2)))


def los_amplitude(tx: Device, rx: Device, f0: float) -> float:
    """Free-space amplitude of the direct Tx-Rx path."""
    d = float(_norm(rx.position - tx.position))
    if d == 0:
        raise DegenerateGeometryError("bistatic LOS needs distinct devices")
    return C0 / f0 / (4 * np.pi * d)


def steering_from_direction(device: Device, u, f0: float) -> np.ndarray:
    """Array response for unit direction(s) ``u``; shape (..., L)."""
    proj = np.asarray(u, dtype=float) @ device.antenna_offsets().T
    return np.exp(-2j * np.pi * f0 / C0 * proj)


def steering_vector(device: Device, point, f0: float, role: str = "rx") -> np.ndarray:
    """Far-field array response toward ``point`` for the Tx or Rx role."""
    u_tx, u_rx = unit_vectors(device, point)
    if role == "tx":
        u = u_tx
    elif role == "rx":
        u = u_rx
    else:
        raise ValueError(f"unknown role {role!r}")
    return steering_from_direction(device, u, f0)


def tx_beamformer(device: Device, focus, f0: float) -> np.ndarray:
    """Unit-norm matched beamformer toward ``focus``.

    The weights conjugate the phase progression of the array response so the
    gain a^H b equals sqrt(L) toward ``focus``.
    """
    a = steering_vector(device, focus, f0, role="tx")
    return a / np.sqrt(device.antenna_count)


def beam_gain(a: np.ndarray, b: np.ndarray) -> complex:
    """Tx gain a^H b along response ``a`` for beamformer ``b``."""
    return complex(np.vdot(a, b))


def pairs(devices) -> list[tuple[int, int]]:
    """All ordered (tx, rx) index pairs, tx-major."""
    n = len(devices)
    return [(i, j) for i in range(n) for j in range(n)]


def linear_array(xs, y: float = 0.0, **kwargs) -> list[Device]:
    """Devices placed along a horizontal line, arrays along x facing +y."""
    return [Device(position=(x, y), **kwargs) for x in xs]

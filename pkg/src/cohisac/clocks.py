"""Per-device clock errors: timing offset plus an AR(1) normalized CFO track."""

from __future__ import annotations

import zlib
from dataclasses import dataclass

import numpy as np


def rng_for(seed: int, tag: str, *keys: int) -> np.random.Generator:
    """Independent generator for (seed, tag, keys...).

    Streams are keyed rather than drawn sequentially so adding a device or a
    slow-time slice never perturbs the draws of the others.
    """
    entropy = [int(seed) & 0xFFFFFFFF, zlib.crc32(tag.encode()), *[int(k) for k in keys]]
    return np.random.default_rng(np.random.SeedSequence(entropy))


@dataclass
class ClockParams:
    to_max: float = 10 / 400e6
    cfo_std: float = 1e-4
    ar_coefficient: float = 0.99
    innovation_scale: float = 0.01
    seed: int = 0

    def __post_init__(self):
        if self.to_max < 0 or self.cfo_std < 0:
            raise ValueError("to_max and cfo_std must be non-negative")
        if abs(self.ar_coefficient) >= 1:
            raise ValueError("|ar_coefficient| must be < 1")

    @classmethod
    def ideal(cls) -> "ClockParams":
        return cls(to_max=0.0, cfo_std=0.0)


@dataclass
class ClockTrack:
    to: float
    cfo: np.ndarray

    def __len__(self):
        return len(self.cfo)


def sample_clock(params: ClockParams, K: int, device_index: int) -> ClockTrack:
    if K < 1:
        raise ValueError("K must be >= 1")
    rng = rng_for(params.seed, "clock", device_index)
    to = float(rng.uniform(0.0, params.to_max)) if params.to_max > 0 else 0.0
    w = rng.normal(0.0, 1.0, size=K) * params.cfo_std
    beta = np.empty(K)
    beta[0] = w[0]
    for k in range(1, K):
        beta[k] = params.ar_coefficient * beta[k - 1] + params.innovation_scale * w[k]
    return ClockTrack(to=to, cfo=beta)


def sample_clocks(params: ClockParams, K: int, count: int) -> list[ClockTrack]:
    return [sample_clock(params, K, n) for n in range(count)]


def ideal_clocks(K: int, count: int) -> list[ClockTrack]:
    return [ClockTrack(0.0, np.zeros(K)) for _ in range(count)]


def differential(clock_n: ClockTrack, clock_m: ClockTrack, f0: float):
    """(DTO, DCFO track, PO) for the Tx ``n`` / Rx ``m`` pair."""
    if len(clock_n) != len(clock_m):
        raise ValueError("clock tracks have different lengths")
    dto = clock_n.to - clock_m.to
    return dto, clock_n.cfo - clock_m.cfo, 2 * np.pi * f0 * dto


@dataclass
class SmallCfoReport:
    ok: bool
    worst_ratio: float
    worst_pair: tuple[int, int] | None
    worst_k: int | None


def check_small_cfo(waveform, tracks, margin: float = 0.01) -> SmallCfoReport:
    """Test |f0 * DCFO| < margin * subcarrier spacing over all pairs and slow times."""
    df = waveform.subcarrier_spacing
    worst = (0.0, None, None)
    for n, cn in enumerate(tracks):
        for m, cm in enumerate(tracks):
            if n == m:
                continue
            r = np.abs(waveform.carrier_frequency * (cn.cfo - cm.cfo)) / df
            k = int(np.argmax(r))
            if r[k] > worst[0]:
                worst = (float(r[k]), (n, m), k)
    return SmallCfoReport(worst[0] < margin, *worst)

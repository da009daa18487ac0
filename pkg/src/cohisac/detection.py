"""Doppler spectra of pair images, CFAR peak picking, target counting and
coarse localization by iterative ambiguity-function subtraction."""

from __future__ import annotations

import csv
import warnings
from collections import Counter
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy import integrate, optimize, stats

from .imaging import SAF, ComplexImage, PixelGrid


@dataclass(frozen=True)
class AreaOfInterest:
    center: tuple
    half_x: float
    half_y: float

    def __post_init__(self):
        if self.half_x <= 0 or self.half_y <= 0:
            raise ValueError("area of interest needs positive extents")

    def mask(self, grid: PixelGrid) -> np.ndarray:
        pts = grid.points()
        tol = 1e-9 * grid.pixel_size  # pixel centres on the edge count as inside
        return ((np.abs(pts[..., 0] - self.center[0]) <= self.half_x + tol)
                & (np.abs(pts[..., 1] - self.center[1]) <= self.half_y + tol))

    def grid(self, pixel_size: float) -> PixelGrid:
        return PixelGrid.centered(self.center, self.half_x, self.half_y, pixel_size)


@dataclass
class DopplerSpectrum:
    frequencies: np.ndarray  # Hz, ascending, [-1/(2T), 1/(2T))
    power: np.ndarray
    resolution: float  # 1/(KT)
    oversample: int


@dataclass
class DopplerPeakSet:
    peaks: dict  # pair -> list[(frequency Hz, magnitude)]
    count: int
    resolution: float

    @property
    def counts(self) -> dict:
        return {p: len(v) for p, v in self.peaks.items()}

    def frequencies(self, pair) -> np.ndarray:
        return np.array([f for f, _ in self.peaks[pair]])


@dataclass
class CoarseLocations:
    positions: list
    peak_values: list = field(default_factory=list)
    incomplete: bool = False


def slow_time_window(name: str | None, K: int) -> np.ndarray:
    if name in (None, "rect", "none"):
        return np.ones(K)
    if name == "hann":
        return np.hanning(K + 2)[1:-1]
    if name == "hamming":
        return np.hamming(K)
    raise ValueError(f"unknown slow-time window {name!r}")


def doppler_spectrum(stack, T: float, aoi_mask=None, oversample: int = 4,
                     window: str | None = None) -> DopplerSpectrum:
    """S(nu) = sum_x |sum_k w_k I(x, kT) exp(+j2pi nu k T)|^2 on a zero-padded axis.

    ``stack`` is a (K, ny, nx) image stack (ComplexImage or array) or a (K, P)
    matrix of pixel series.  A component exp(-j2pi f k T) peaks at +f.
    """
    vals = stack.values if isinstance(stack, ComplexImage) else np.asarray(stack)
    K = vals.shape[0]
    if K < 2:
        raise ValueError("need at least two slow-time samples")
    X = vals.reshape(K, -1)
    if aoi_mask is not None:
        X = X[:, np.asarray(aoi_mask).reshape(-1)]
    if X.shape[1] == 0:
        raise ValueError("area of interest contains no pixels")
    n = K * oversample
    X = X * slow_time_window(window, K)[:, None]
    F = np.fft.ifft(X, n=n, axis=0) * n  # sum_k x_k exp(+j2pi i k / n)
    power = np.fft.fftshift(np.sum(np.abs(F) ** 2, axis=1))
    freqs = np.fft.fftshift(np.fft.fftfreq(n, d=T))
    return DopplerSpectrum(freqs, power, 1.0 / (K * T), oversample)


@lru_cache(maxsize=64)
def cfar_factor(train: int, pfa: float, mode: str = "ca") -> float:
    """Threshold multiplier on the (mean) training power for exponential noise.

    "ca" averages both sides: closed form n(Pfa^{-1/n} - 1), n = 2*train.
    "so"/"go" take the smaller/greater of the two one-sided means; their
    false-alarm probability E[exp(-a Z)] is integrated numerically and solved
    for the multiplier.
    """
    if not 0 < pfa < 1 or train < 1:
        raise ValueError("need 0 < pfa < 1 and train >= 1")
    if mode == "ca":
        n = 2 * train
        return n * (pfa ** (-1.0 / n) - 1.0)
    if mode not in ("so", "go"):
        raise ValueError(f"unknown CFAR mode {mode!r}")
    side = stats.gamma(train, scale=1.0 / train)  # one-sided mean of unit exponentials

    def density(z):
        f, F = side.pdf(z), side.cdf(z)
        return 2 * f * (1 - F) if mode == "so" else 2 * f * F

    def excess(log_a):
        a = np.exp(log_a)
        val, _ = integrate.quad(lambda z: np.exp(-a * z) * density(z), 0, np.inf, limit=200)
        return np.log(val) - np.log(pfa)

    return float(np.exp(optimize.brentq(excess, -5.0, 10.0, xtol=1e-12)))


def ca_cfar(x: np.ndarray, guard: int = 2, train: int = 8, pfa: float = 1e-3,
            stride: int = 1, mode: str = "ca") -> np.ndarray:
    """Circular cell-averaging CFAR threshold for each cell of ``x``.

    Training cells sit at distances (guard+1 .. guard+train)*stride on both
    sides, so ``stride`` = oversampling factor keeps them uncorrelated.
    ``mode`` "so" uses the smaller of the two one-sided averages, which keeps
    a strong neighbouring peak inside one training window from masking a
    weaker one; "go" uses the greater.
    """
    x = np.asarray(x, dtype=float)
    alpha = cfar_factor(train, pfa, mode)
    offs = np.arange(guard + 1, guard + train + 1) * stride
    lead = np.zeros_like(x)
    lag = np.zeros_like(x)
    for o in offs:
        lead += np.roll(x, -o)
        lag += np.roll(x, o)
    if mode == "ca":
        est = (lead + lag) / (2 * train)
    elif mode == "so":
        est = np.minimum(lead, lag) / train
    else:
        est = np.maximum(lead, lag) / train
    return alpha * est


def _refine(power: np.ndarray, i: int) -> float:
    """Sub-bin offset of a peak from a parabola through log power at i-1, i, i+1."""
    n = power.size
    a, b, c = (np.log(max(power[(i + d) % n], 1e-300)) for d in (-1, 0, 1))
    den = a - 2 * b + c
    return 0.0 if den >= 0 else float(np.clip(0.5 * (a - c) / den, -0.5, 0.5))


def detect_peaks(spec: DopplerSpectrum, guard: int = 2, train: int = 8, pfa: float = 1e-3,
                 dynamic_range_db: float | None = 25.0, exclude_zero: bool = False,
                 mode: str = "so"):
    """CFAR-detected local maxima, refined and merged closer than one resolution cell.

    Guard/training sizes are in native Doppler bins.  Peaks more than
    ``dynamic_range_db`` below the strongest one are discarded.
    """
    p = spec.power
    if not np.any(p > 0):
        return []
    thr = ca_cfar(p, guard, train, pfa, stride=spec.oversample, mode=mode)
    left, right = np.roll(p, 1), np.roll(p, -1)
    cand = np.flatnonzero((p > thr) & (p >= left) & (p > right))
    if dynamic_range_db is not None:
        cand = cand[p[cand] >= p.max() * 10 ** (-dynamic_range_db / 10)]
    step = spec.frequencies[1] - spec.frequencies[0]
    span = step * p.size
    peaks = []
    for i in cand:
        f = spec.frequencies[i] + _refine(p, i) * step
        f = (f + span / 2) % span - span / 2
        if exclude_zero and abs(f) < spec.resolution / 2:
            continue
        peaks.append((float(f), float(p[i])))
    # merge: strongest first, drop anything within one resolution cell (circularly)
    peaks.sort(key=lambda t: -t[1])
    kept = []
    for f, mag in peaks:
        if all(abs((f - g + span / 2) % span - span / 2) >= spec.resolution for g, _ in kept):
            kept.append((f, mag))
    kept.sort(key=lambda t: t[0])
    return kept


def estimate_target_count(counts) -> int:
    """Mode of the per-pair peak counts; ties go to the larger count."""
    counts = list(counts.values()) if isinstance(counts, dict) else list(counts)
    if not counts:
        raise ValueError("need at least one pair")
    tally = Counter(counts)
    best = max(tally.values())
    return max(c for c, v in tally.items() if v == best)


def detect_doppler_peaks(spectra: dict, **kwargs) -> DopplerPeakSet:
    peaks = {pair: detect_peaks(spec, **kwargs) for pair, spec in spectra.items()}
    res = next(iter(spectra.values())).resolution
    return DopplerPeakSet(peaks, estimate_target_count({p: len(v) for p, v in peaks.items()}), res)


def coarse_localize(image: np.ndarray, grid: PixelGrid, saf: SAF, count: int,
                    min_ratio: float = 0.05) -> CoarseLocations:
    """Iteratively pick the strongest pixel and subtract the scaled SAF magnitude there.

    Stops early (``incomplete``) when the residual peak falls below
    ``min_ratio`` times the first peak.
    """
    if abs(saf.grid.pixel_size - grid.pixel_size) > 1e-12 * grid.pixel_size:
        raise ValueError("SAF and image must share the pixel size")
    res = np.abs(np.asarray(image, dtype=float)).copy()
    H = np.abs(saf.values) / np.abs(saf.values).max()
    hr, hc = saf.grid.index_of(saf.reference_point)
    ny, nx = res.shape
    out = CoarseLocations([], [])
    first = None
    for _ in range(count):
        r, c = np.unravel_index(np.argmax(res), res.shape)
        v = res[r, c]
        if first is None:
            first = v
        if v <= 0 or v < min_ratio * first:
            out.incomplete = True
            warnings.warn(f"only {len(out.positions)} of {count} targets found above the residual floor")
            break
        out.positions.append(grid.point_at(r, c))
        out.peak_values.append(float(v))
        # overlap of the SAF (centred on (r, c)) with the image
        r0, r1 = max(0, r - hr), min(ny, r - hr + H.shape[0])
        c0, c1 = max(0, c - hc), min(nx, c - hc + H.shape[1])
        sub = H[r0 - (r - hr):r1 - (r - hr), c0 - (c - hc):c1 - (c - hc)]
        res[r0:r1, c0:c1] = np.maximum(0.0, res[r0:r1, c0:c1] - v * sub)
    return out


def write_spectra_csv(path, spectra: dict) -> None:
    pairs = list(spectra)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["frequency_hz", *[f"pair_{n}_{m}" for n, m in pairs]])
        freqs = spectra[pairs[0]].frequencies
        for i, f in enumerate(freqs):
            w.writerow([f"{f:.4f}", *[f"{spectra[p].power[i]:.6e}" for p in pairs]])


def image_peaks(image: np.ndarray, grid: PixelGrid, count: int, guard: int = 2, train: int = 4,
                pfa: float = 1e-3) -> list:
    """Strongest ``count`` local maxima of a magnitude image.

    Maxima passing a 2-D cell-averaging CFAR test (square ring of training
    cells around a guard square) are ranked first; if fewer than ``count``
    pass, the strongest remaining local maxima fill the list.
    """
    from scipy.ndimage import maximum_filter, uniform_filter

    mag = np.abs(np.asarray(image, dtype=float))
    if count <= 0:
        return []
    local = (mag == maximum_filter(mag, size=3, mode="nearest")) & (mag > 0)
    outer, inner = 2 * (guard + train) + 1, 2 * guard + 1
    p = mag**2
    ring = (uniform_filter(p, outer, mode="wrap") * outer**2
            - uniform_filter(p, inner, mode="wrap") * inner**2) / (outer**2 - inner**2)
    n_train = outer**2 - inner**2
    alpha = n_train * (pfa ** (-1.0 / n_train) - 1.0)
    rows, cols = np.nonzero(local)
    order = np.lexsort((cols, rows, -mag[rows, cols]))  # strongest first, ties by raster order
    passed = [(r, c) for r, c in zip(rows[order], cols[order]) if p[r, c] > alpha * ring[r, c]]
    rest = [(r, c) for r, c in zip(rows[order], cols[order]) if p[r, c] <= alpha * ring[r, c]]
    return [grid.point_at(r, c) for r, c in (passed + rest)[:count]]

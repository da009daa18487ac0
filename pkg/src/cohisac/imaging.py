"""Back-projection image formation on a pixel grid.

Each (tx, rx) pair gives a low-resolution image by sampling its
synchronized CIR at the pixel's differential delay (nearest grid sample),
counter-rotating the carrier phase and beamforming over the Rx antennas.
Pairs are combined coherently; slow time is integrated either coherently
(after Doppler pre-compensation) or by magnitude.

Pixels are processed in fixed-size chunks so the result does not depend on
the number of worker threads.
"""

from __future__ import annotations

import json
import os
from collections import OrderedDict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .channel import CIRCube, Scenario, estimate_cir, synthesize_channel
from .clocks import ClockParams, ideal_clocks
from .geometry import C0, Device, Target, Waveform, los_tof, steering_vector, tx_beamformer

CHUNK = 16384  # pixels per work item; fixed so results never depend on workers


def default_workers() -> int:
    try:
        return max(1, int(os.environ.get("COHISAC_WORKERS", "1")))
    except ValueError:
        return 1


@dataclass(frozen=True)
class PixelGrid:
    x_min: float
    x_max: float
    y_min: float
    y_max: float
    pixel_size: float

    def __post_init__(self):
        if self.pixel_size <= 0:
            raise ValueError("pixel_size must be positive")
        if self.x_max <= self.x_min or self.y_max <= self.y_min:
            raise ValueError("grid extents must be positive")

    @classmethod
    def centered(cls, center, half_width_x: float, half_width_y: float, pixel_size: float) -> "PixelGrid":
        """Odd-sized grid whose middle pixel centre is exactly ``center``."""
        nx = int(round(half_width_x / pixel_size))
        ny = int(round(half_width_y / pixel_size))
        cx, cy = float(center[0]), float(center[1])
        return cls(cx - (nx + 0.5) * pixel_size, cx + (nx + 0.5) * pixel_size,
                   cy - (ny + 0.5) * pixel_size, cy + (ny + 0.5) * pixel_size, pixel_size)

    @property
    def nx(self) -> int:
        return max(1, int(round((self.x_max - self.x_min) / self.pixel_size)))

    @property
    def ny(self) -> int:
        return max(1, int(round((self.y_max - self.y_min) / self.pixel_size)))

    @property
    def shape(self) -> tuple[int, int]:
        return self.ny, self.nx

    @property
    def size(self) -> int:
        return self.nx * self.ny

    @property
    def xs(self) -> np.ndarray:
        return self.x_min + (np.arange(self.nx) + 0.5) * self.pixel_size

    @property
    def ys(self) -> np.ndarray:
        return self.y_min + (np.arange(self.ny) + 0.5) * self.pixel_size

    def points(self) -> np.ndarray:
        """Pixel centres, shape (ny, nx, 2)."""
        X, Y = np.meshgrid(self.xs, self.ys)
        return np.stack([X, Y], axis=-1)

    def index_of(self, point) -> tuple[int, int]:
        """(row, col) of the pixel containing ``point`` (clamped to the grid)."""
        col = int(np.clip(np.floor((point[0] - self.x_min) / self.pixel_size), 0, self.nx - 1))
        row = int(np.clip(np.floor((point[1] - self.y_min) / self.pixel_size), 0, self.ny - 1))
        return row, col

    def point_at(self, row: int, col: int) -> np.ndarray:
        return np.array([self.xs[col], self.ys[row]])

    def as_dict(self) -> dict:
        return {"x_min": self.x_min, "x_max": self.x_max, "y_min": self.y_min,
                "y_max": self.y_max, "pixel_size": self.pixel_size, "nx": self.nx, "ny": self.ny}


@dataclass
class ComplexImage:
    """Image values [..., y, x]; leading axes (if any) index slow time."""

    grid: PixelGrid
    values: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.values.shape[-2:] != self.grid.shape:
            raise ValueError(f"image shape {self.values.shape} does not match grid {self.grid.shape}")

    def magnitude(self) -> np.ndarray:
        return np.abs(self.values)

    def peak(self) -> tuple[int, int]:
        mag = np.abs(self.values)
        if mag.ndim != 2:
            raise ValueError("peak() needs a 2-D image")
        return tuple(int(i) for i in np.unravel_index(np.argmax(mag), mag.shape))


# ---------------------------------------------------------------------------
# geometry caches

_CACHE_LIMIT = 24
_cache: "OrderedDict[tuple, np.ndarray]" = OrderedDict()


def _device_key(d: Device) -> tuple:
    return (*d.position.tolist(), d.orientation, d.antenna_count, d.antenna_spacing)


def _cached(key, fn):
    if key in _cache:
        _cache.move_to_end(key)
        return _cache[key]
    val = fn()
    _cache[key] = val
    while len(_cache) > _CACHE_LIMIT:
        _cache.popitem(last=False)
    return val


def clear_cache() -> None:
    _cache.clear()


def _rx_steering_conj(rx: Device, grid: PixelGrid, f0: float) -> np.ndarray:
    key = ("steer", _device_key(rx), grid, f0)
    return _cached(key, lambda: np.conj(
        steering_vector(rx, grid.points().reshape(-1, 2), f0, role="rx")))


def _tx_phase_conj(tx: Device, grid: PixelGrid, f0: float, focus) -> np.ndarray:
    """conj of the unit phasor of the Tx beam gain toward each pixel, shape (P,)."""
    key = ("txph", _device_key(tx), grid, f0, tuple(np.asarray(focus, dtype=float)))

    def build():
        a = steering_vector(tx, grid.points().reshape(-1, 2), f0, role="tx")
        chi = a.conj() @ tx_beamformer(tx, focus, f0)
        mag = np.abs(chi)
        return np.divide(chi.conj(), mag, out=np.zeros_like(chi), where=mag > 1e-12)

    return _cached(key, build)


def pixel_delays(tx: Device, rx: Device, grid: PixelGrid, differential: bool = True) -> np.ndarray:
    """Static test TOF of every pixel, minus the LOS TOF when ``differential``; shape (P,)."""
    pts = grid.points().reshape(-1, 2)
    tau = (np.linalg.norm(pts - tx.position, axis=1) + np.linalg.norm(rx.position - pts, axis=1)) / C0
    if differential:
        tau = tau - los_tof(tx, rx)
    return tau


# ---------------------------------------------------------------------------
# core


SINC_TAPS = 12
SINC_BETA = 8.6  # Kaiser shape; ~85 dB stop band with 12 taps on a 2x oversampled grid


def interpolation_kernel(frac: np.ndarray, taps: int = SINC_TAPS, beta: float = SINC_BETA):
    """Kaiser-windowed sinc weights for fractional positions ``frac`` in [0, 1).

    Returns (offsets (taps,), weights (P, taps)); sample ``floor(u) + offsets[t]``
    gets weight ``weights[:, t]``.  Rows are normalized to unit sum.
    """
    offsets = np.arange(taps) - (taps // 2 - 1)
    x = offsets[None, :] - np.asarray(frac, dtype=float)[:, None]
    half = taps / 2
    win = np.i0(beta * np.sqrt(np.clip(1 - (x / half) ** 2, 0, None))) / np.i0(beta)
    w = np.sinc(x) * win
    return offsets, w / w.sum(axis=1, keepdims=True)


def _bp_chunk(h, base, weights, offsets, phase, steer_conj, out):
    """out[:, p] = phase[p] sum_t w[p,t] sum_l steer_conj[p,l] h[:, l, base[p] + offsets[t]].

    Pixels are grouped by ``base`` so each group is one matrix product.
    ``base < 0`` marks pixels outside the delay span (left at zero).
    """
    J, L, _ = h.shape
    T = offsets.size
    order = np.argsort(base, kind="stable")
    order = order[base[order] >= 0]
    if order.size == 0:
        return
    ds = base[order]
    bounds = np.flatnonzero(np.diff(ds)) + 1
    starts = np.concatenate([[0], bounds])
    stops = np.concatenate([bounds, [ds.size]])
    for s, e in zip(starts, stops):
        sel = order[s:e]
        d = ds[s]
        if T == 1:
            out[:, sel] = h[:, :, d + offsets[0]] @ steer_conj[sel].T
        else:
            blk = h[:, :, d + offsets[0]:d + offsets[-1] + 1].reshape(J, L * T)
            B = (steer_conj[sel][:, :, None] * weights[sel][:, None, :]).reshape(len(sel), L * T)
            out[:, sel] = blk @ B.T
    out *= phase[None, :]


def _backproject(h: np.ndarray, origin: float, step: float, delay: np.ndarray,
                 steer_conj: np.ndarray, f0: float, workers: int | None = None,
                 pixel_phasor: np.ndarray | None = None, interp: str = "nearest"):
    """Back-project CIR rows ``h`` (J, L, D) onto pixels with test delays ``delay`` (P,).

    ``interp`` is "nearest" (nearest delay sample) or "sinc" (windowed-sinc
    band-limited interpolation between samples).  Returns (J, P) values and
    the number of pixels whose delay falls outside the CIR span.
    """
    J, _, D = h.shape
    P = delay.size
    u = (delay - origin) / step
    if interp == "nearest":
        base = np.rint(u).astype(np.int64)
        offsets, weights = np.zeros(1, dtype=np.int64), np.ones((P, 1))
    elif interp == "sinc":
        base = np.floor(u).astype(np.int64)
        offsets, weights = interpolation_kernel(u - base)
    else:
        raise ValueError(f"unknown delay interpolation {interp!r}")
    outside = (base + offsets[0] < 0) | (base + offsets[-1] >= D)
    base[outside] = -1
    phase = np.exp(2j * np.pi * f0 * delay)
    if pixel_phasor is not None:
        phase = phase * pixel_phasor
    out = np.zeros((J, P), dtype=complex)
    chunks = [(s, min(s + CHUNK, P)) for s in range(0, P, CHUNK)]

    def run(c):
        s, e = c
        buf = np.zeros((J, e - s), dtype=complex)
        _bp_chunk(h, base[s:e], weights[s:e], offsets, phase[s:e], steer_conj[s:e], buf)
        out[:, s:e] = buf

    workers = default_workers() if workers is None else max(1, int(workers))
    if workers == 1 or len(chunks) == 1:
        for c in chunks:
            run(c)
    else:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            list(ex.map(run, chunks))
    return out, int(np.count_nonzero(outside))


def doppler_weights(doppler_hz: float, K: int, T: float) -> np.ndarray:
    """Slow-time weights exp(+j2pi f k T) that undo a Doppler shift ``f``."""
    return np.exp(2j * np.pi * doppler_hz * np.arange(K) * T)


@dataclass(frozen=True)
class BPConfig:
    """Back-projection options shared by all pair images.

    focus: point the Tx beamformers aim at; when set, the phase of the Tx beam
        gain toward each pixel is removed so that pairs with different
        transmitters add in phase.
    interp: "nearest" delay sample or "sinc" band-limited interpolation.
    workers: thread count (None: environment default).
    """

    focus: tuple | None = None
    interp: str = "nearest"
    workers: int | None = None


_DEFAULT_CFG = BPConfig()


def _slow_time_rows(h, K, T, k, weights, doppler_precomp):
    if weights is not None:
        w = np.asarray(weights, dtype=complex)
        if w.shape != (K,):
            raise ValueError(f"weights must have shape ({K},)")
        if doppler_precomp is not None:
            w = w * doppler_weights(doppler_precomp, K, T)
        return np.tensordot(w, h, axes=(0, 0))[None], None
    if k is not None:
        if not 0 <= k < K:
            raise IndexError(f"slow-time index {k} out of range")
        rows = h[k:k + 1]
        if doppler_precomp is not None:
            rows = rows * np.exp(2j * np.pi * doppler_precomp * k * T)
        return rows, [k, k]
    rows = h
    if doppler_precomp is not None:
        rows = rows * doppler_weights(doppler_precomp, K, T)[:, None, None]
    return rows, [0, K - 1]


def backproject_pair(dcir: CIRCube, devices, pair, grid: PixelGrid, k=None,
                     doppler_precomp: float | None = None, weights=None,
                     cfg: BPConfig | None = None) -> ComplexImage:
    """Low-resolution image of one pair from a synchronized CIR.

    ``k`` selects one slow-time slice (2-D result).  ``weights`` (K,) instead
    forms sum_k w_k I(x, kT).  With neither, the full (K, ny, nx) stack is
    returned.  ``doppler_precomp`` multiplies slice k by exp(+j2pi f k T).
    """
    cfg = cfg or _DEFAULT_CFG
    n, m = pair
    wf = dcir.waveform
    K = dcir.values.shape[1]
    rows, ks = _slow_time_rows(dcir.values[dcir.pair_index(pair)], K, wf.repetition_interval,
                               k, weights, doppler_precomp)
    tx, rx = devices[n], devices[m]
    f0 = wf.carrier_frequency
    delay = pixel_delays(tx, rx, grid, differential=True)
    txph = None if cfg.focus is None else _tx_phase_conj(tx, grid, f0, cfg.focus)
    vals, clipped = _backproject(rows, dcir.origin, dcir.delay_step, delay,
                                 _rx_steering_conj(rx, grid, f0), f0, cfg.workers, txph, cfg.interp)
    shape = grid.shape if (weights is not None or k is not None) else (K, *grid.shape)
    return ComplexImage(grid, vals.reshape(shape),
                        {"pair": [n, m], "k_range": ks, "clipped": clipped,
                         "scenario_hash": dcir.scenario_hash})


def backproject_raw(cir: CIRCube, devices, pair, grid: PixelGrid, k: int = 0,
                    cfg: BPConfig | None = None) -> ComplexImage:
    """Image from an unsynchronized CIR using absolute test delays.

    Only meaningful with ideal clocks; with clock errors it shows what goes
    wrong without over-the-air synchronization.
    """
    cfg = cfg or _DEFAULT_CFG
    n, m = pair
    p = cir.pair_index(pair)
    f0 = cir.waveform.carrier_frequency
    delay = pixel_delays(devices[n], devices[m], grid, differential=False)
    txph = None if cfg.focus is None else _tx_phase_conj(devices[n], grid, f0, cfg.focus)
    vals, clipped = _backproject(cir.values[p, k:k + 1], cir.origin, cir.delay_step, delay,
                                 _rx_steering_conj(devices[m], grid, f0), f0, cfg.workers,
                                 txph, cfg.interp)
    return ComplexImage(grid, vals.reshape(grid.shape), {"pair": [n, m], "k_range": [k, k],
                                                         "clipped": clipped, "raw": True})


def combine_smi(images) -> ComplexImage:
    """Pixelwise coherent sum over pair images on a shared grid."""
    images = list(images)
    if not images:
        raise ValueError("no images to combine")
    grid = images[0].grid
    total = np.zeros_like(images[0].values, dtype=complex)
    clipped = 0
    for im in images:
        if im.grid != grid:
            raise ValueError("grid mismatch")
        if im.values.shape != total.shape:
            raise ValueError("image stack shapes differ")
        total = total + im.values
        clipped += im.meta.get("clipped", 0)
    return ComplexImage(grid, total, {"pairs": len(images), "clipped": clipped})


def integrate_slow_time(stack, mode: str = "coherent"):
    """Sum a (K, ny, nx) image stack over slow time, coherently or by magnitude."""
    if isinstance(stack, ComplexImage):
        grid, vals = stack.grid, stack.values
    else:
        grid, vals = None, np.asarray(stack)
    if vals.ndim != 3 or vals.shape[0] == 0:
        raise ValueError("need a non-empty (K, ny, nx) stack")
    if mode == "coherent":
        out = vals.sum(axis=0)
    elif mode == "magnitude":
        out = np.abs(vals).sum(axis=0)
    else:
        raise ValueError(f"unknown integration mode {mode!r}")
    return ComplexImage(grid, out, {"integration": mode}) if grid is not None else out


def combined_image(dcir: CIRCube, devices, grid: PixelGrid, k=None, pairs=None,
                   cfg: BPConfig | None = None) -> ComplexImage:
    """Multistatic image I(x, kT): one slice for integer ``k``, else the (K, ny, nx) stack."""
    pairs = dcir.pairs if pairs is None else pairs
    return combine_smi(backproject_pair(dcir, devices, pr, grid, k=k, cfg=cfg) for pr in pairs)


def smi_image(dcir: CIRCube, devices, grid: PixelGrid, pairs=None,
              cfg: BPConfig | None = None) -> np.ndarray:
    """Baseline final image: magnitude integration of the combined per-slice images."""
    return integrate_slow_time(combined_image(dcir, devices, grid, None, pairs, cfg), "magnitude").values


def precompensated_image(dcir: CIRCube, devices, grid: PixelGrid, dopplers: dict,
                         window=None, cfg: BPConfig | None = None) -> ComplexImage:
    """Target-specific image: coherent slow-time sum after per-pair Doppler pre-compensation.

    ``dopplers`` maps each pair to the Doppler frequency (Hz) of the intended
    target; pairs missing from the map are skipped.
    """
    K = dcir.values.shape[1]
    w = np.ones(K) if window is None else np.asarray(window, dtype=float)
    return combine_smi(backproject_pair(dcir, devices, pr, grid, weights=w, doppler_precomp=f, cfg=cfg)
                       for pr, f in dopplers.items())


# ---------------------------------------------------------------------------
# spatial ambiguity function


@dataclass
class SAF:
    grid: PixelGrid
    values: np.ndarray
    mainlobe_rho_x: float
    mainlobe_rho_y: float
    reference_point: np.ndarray = field(default_factory=lambda: np.zeros(2))


def _crossing_width(profile: np.ndarray, center: int, spacing: float, level: float) -> float:
    """Full width where ``profile`` (peak at ``center``) stays above ``level``; linear interpolation."""
    def side(direction):
        i = center
        while 0 <= i + direction < profile.size and profile[i + direction] >= level:
            i += direction
        j = i + direction
        if not 0 <= j < profile.size:
            return np.inf
        a, b = profile[i], profile[j]
        return (abs(i - center) + (a - level) / (a - b)) * spacing

    return side(-1) + side(1)


def mainlobe_widths(values: np.ndarray, grid: PixelGrid, center=None, level: float = 1 / np.sqrt(2)):
    mag = np.abs(values)
    mag = mag / mag.max()
    r, c = (np.unravel_index(np.argmax(mag), mag.shape) if center is None else center)
    return (_crossing_width(mag[r, :], c, grid.pixel_size, level),
            _crossing_width(mag[:, c], r, grid.pixel_size, level))


_saf_cache: "OrderedDict[tuple, SAF]" = OrderedDict()


def compute_saf(devices, waveform: Waveform, grid: PixelGrid, reference_point,
                focus=None, oversample: int = 2, interp: str = "nearest", workers=None) -> SAF:
    """Image of a unit static point target at ``reference_point`` (noiseless, ideal clocks, no LOS).

    The result is normalized to unit peak magnitude.  ``grid`` is usually
    built with :meth:`PixelGrid.centered` around the reference point.
    """
    from .sync import compensate, ideal_sync  # local import: sync imports channel only

    ref = np.asarray(reference_point, dtype=float)
    focus = ref if focus is None else np.asarray(focus, dtype=float)
    key = (tuple(_device_key(d) for d in devices), repr(waveform), grid, tuple(ref), tuple(focus),
           oversample, interp)
    if key in _saf_cache:
        return _saf_cache[key]
    wf = Waveform(waveform.carrier_frequency, waveform.bandwidth, waveform.subcarrier_count,
                  len(devices), waveform.repetition_interval, 1, waveform.pilot_power)
    sc = Scenario(list(devices), [Target(ref, (0, 0), 1.0, 0.0)], wf, ClockParams.ideal(),
                  include_los=False, focus=focus)
    step = 1.0 / (oversample * wf.bandwidth)
    span = max(np.ptp(pixel_delays(devices[n], devices[m], grid, False)) for n, m in sc.pairs)
    tmax = max(float(np.max(pixel_delays(devices[n], devices[m], grid, False))) for n, m in sc.pairs)
    lo = -64
    hi = int(np.ceil((tmax + span) / step)) + 64
    cir = estimate_cir(synthesize_channel(sc, ideal_clocks(1, len(devices))), oversample, (lo, hi))
    dcir = compensate(cir, ideal_sync(sc, cir), origin_samples=-64)
    cfg = BPConfig(tuple(focus), interp, workers)
    img = combined_image(dcir, devices, grid, k=0, cfg=cfg)
    vals = img.values / np.abs(img.values).max()
    rx, ry = mainlobe_widths(vals, grid, grid.index_of(ref))
    saf = SAF(grid, vals, rx, ry, ref)
    _saf_cache[key] = saf
    while len(_saf_cache) > 8:
        _saf_cache.popitem(last=False)
    return saf


# ---------------------------------------------------------------------------
# export


def save_image(path, image: ComplexImage, normalization: float = 1.0, with_complex: bool = False,
               extra: dict | None = None) -> None:
    """Write float32 magnitude (and optionally complex64) little-endian row-major, plus JSON sidecar."""
    path = Path(path)
    vals = np.asarray(image.values)
    if vals.ndim != 2:
        raise ValueError("only 2-D images can be exported")
    (np.abs(vals) / normalization).astype("<f4").tofile(path)
    meta = {"grid": image.grid.as_dict(), "dtype": "float32-le", "layout": "row-major [y][x]",
            "normalization": normalization, **{k: v for k, v in image.meta.items()}}
    if with_complex:
        cpath = path.with_suffix(".c64")
        (vals / normalization).astype("<c8").tofile(cpath)
        meta["complex_file"] = cpath.name
    if extra:
        meta.update(extra)
    path.with_suffix(path.suffix + ".json").write_text(json.dumps(meta, indent=2, default=str))


def load_image(path) -> tuple[np.ndarray, dict]:
    path = Path(path)
    meta = json.loads(path.with_suffix(path.suffix + ".json").read_text())
    g = meta["grid"]
    return np.fromfile(path, dtype="<f4").reshape(g["ny"], g["nx"]), meta


def render_png(path, magnitude: np.ndarray, floor_db: float = -40.0) -> None:
    """Grayscale dB rendering; the top row of the PNG is the largest y."""
    from PIL import Image

    mag = np.abs(np.asarray(magnitude)).astype(float)
    peak = mag.max()
    db = 20 * np.log10(np.maximum(mag / peak, 1e-30)) if peak > 0 else np.full(mag.shape, floor_db)
    scaled = np.clip((db - floor_db) / -floor_db, 0, 1)
    Image.fromarray(np.flipud((scaled * 255).round().astype(np.uint8))).save(path)

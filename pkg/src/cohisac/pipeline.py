"""End-to-end processing: shared front end, the Doppler pre-compensation
pipeline ("dpc"), the SMI and ISAFS baselines, metrics and Monte Carlo runs.

Stages of the dpc pipeline:

A. per-pair low-resolution image stacks -> slow-time Doppler spectra -> peaks, target count
B. magnitude-integrated multistatic image -> coarse locations (iterative SAF subtraction)
C. Doppler-space association -> velocity vectors
D. per-pair Doppler re-synthesis from the current location and velocity
E. Doppler pre-compensated, coherently integrated target image -> refined location

C-E are repeated ``iterations`` times.
"""

from __future__ import annotations

import csv
import time
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

from .association import AssociationInfeasible, AssociationResult, associate, regression_matrix, solve_assignment
from .channel import Scenario, delay_window, estimate_cir, synthesize_channel
from .clocks import ClockParams, check_small_cfo, rng_for, sample_clocks
from .detection import (
    AreaOfInterest,
    DopplerPeakSet,
    coarse_localize,
    detect_doppler_peaks,
    doppler_spectrum,
    image_peaks,
)
from .geometry import Target, Waveform, linear_array
from .imaging import BPConfig, ComplexImage, PixelGrid, backproject_pair, compute_saf, precompensated_image
from .sync import SyncFailure, compensate, estimate_sync

METHODS = ("dpc", "smi", "isafs")


class StageError(RuntimeError):
    """A pipeline stage failed; ``stage`` names it and ``__cause__`` holds the original error."""

    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"[{stage}] {cause}")
        self.stage = stage
        self.cause = cause


@dataclass
class PipelineConfig:
    iterations: int = 2
    aoi_center: tuple | None = None  # default: the scenario's beam focus
    aoi_half_x: float = 0.3
    aoi_half_y: float = 0.3
    pixel_size: float = 0.005  # stages A/B, baselines and target images
    fine_pixel: float = 0.001  # local refinement around each target-image peak
    doppler_stride: int = 2  # pixel decimation of the stage-A stacks
    oversample: int = 2
    range_margin: float = 0.5  # delay window beyond the farthest AoI corner (m)
    doppler_oversample: int = 4
    doppler_window: str | None = "hann"
    cfar_guard: int = 2
    cfar_train: int = 8
    cfar_pfa: float = 1e-3
    cfar_mode: str = "so"
    dynamic_range_db: float | None = 25.0
    saf_min_ratio: float = 0.05
    prefilter: bool = False
    first_peak: bool = False
    remove_los: bool = True
    interp: str = "nearest"
    workers: int | None = None
    methods: tuple = METHODS

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.pixel_size <= 0 or self.fine_pixel <= 0 or self.doppler_stride < 1:
            raise ValueError("pixel sizes and stride must be positive")
        unknown = set(self.methods) - set(METHODS)
        if unknown:
            raise ValueError(f"unknown methods {sorted(unknown)}")

    def aoi(self, scenario: Scenario) -> AreaOfInterest:
        c = scenario.focus if self.aoi_center is None else self.aoi_center
        return AreaOfInterest(tuple(float(v) for v in c), self.aoi_half_x, self.aoi_half_y)

    def bp(self, scenario: Scenario) -> BPConfig:
        return BPConfig(tuple(float(v) for v in scenario.focus), self.interp, self.workers)


@dataclass
class MethodReport:
    method: str
    locations: list
    velocities: list | None = None
    q_hat: int = 0
    coarse_locations: list = field(default_factory=list)
    association: AssociationResult | None = None
    images: dict = field(default_factory=dict)  # target index -> ComplexImage
    metrics: dict = field(default_factory=dict)
    timings: dict = field(default_factory=dict)
    error: str | None = None
    failed_stage: str | None = None

    def summary(self) -> dict:
        out = {"method": self.method, "q_hat": self.q_hat,
               "locations_m": [np.round(x, 6).tolist() for x in self.locations],
               "coarse_locations_m": [np.round(x, 6).tolist() for x in self.coarse_locations],
               "metrics": self.metrics, "timings_s": self.timings}
        if self.velocities is not None:
            out["velocities_mps"] = [np.round(v, 6).tolist() for v in self.velocities]
        if self.error:
            out.update(error=self.error, failed_stage=self.failed_stage)
        return out


@dataclass
class FrontEnd:
    """Everything the three methods share: synchronized CIR, pair image stacks, SMI image."""

    scenario: Scenario
    config: PipelineConfig
    dcir: object
    sync: object
    grid: PixelGrid
    stacks: dict  # pair -> (K, ny, nx)
    smi: np.ndarray
    peaks: DopplerPeakSet
    spectra: dict
    cfo_ok: bool
    timings: dict


def _timed(timings: dict, name: str):
    class _T:
        def __enter__(self):
            self.t = time.perf_counter()

        def __exit__(self, *exc):
            timings[name] = timings.get(name, 0.0) + time.perf_counter() - self.t
    return _T()


def max_range(scenario: Scenario, aoi: AreaOfInterest, margin: float) -> float:
    """Largest bistatic half path to any AoI corner, plus ``margin``."""
    cx, cy = aoi.center
    corners = [np.array([cx + sx * aoi.half_x, cy + sy * aoi.half_y]) for sx in (-1, 1) for sy in (-1, 1)]
    worst = max(0.5 * (np.linalg.norm(x - a.position) + np.linalg.norm(x - b.position))
                for x in corners for a in scenario.devices for b in scenario.devices)
    return float(worst + margin)


def front_end(scenario: Scenario, config: PipelineConfig) -> FrontEnd:
    """Synthesis, CIR estimation, sync, pair image stacks, stage A and the SMI image."""
    t: dict = {}
    wf = scenario.waveform
    aoi = config.aoi(scenario)
    with _timed(t, "synthesis"):
        clocks = sample_clocks(scenario.clock_params, wf.slow_time_count, len(scenario.devices))
        obs = synthesize_channel(scenario, clocks)
        cir = estimate_cir(obs, config.oversample,
                           delay_window(scenario, max_range(scenario, aoi, config.range_margin),
                                        config.oversample))
    cfo_ok = check_small_cfo(wf, clocks).ok
    with _timed(t, "sync"):
        try:
            sync = estimate_sync(cir, scenario, first_peak=config.first_peak)
        except SyncFailure as exc:
            raise StageError("sync", exc) from exc
        dcir = compensate(cir, sync, remove_los=config.remove_los and scenario.include_los)
    grid = aoi.grid(config.pixel_size)
    bp = config.bp(scenario)
    stacks = {}
    with _timed(t, "backprojection"):
        for pr in dcir.pairs:
            stacks[pr] = backproject_pair(dcir, scenario.devices, pr, grid, cfg=bp).values
    with _timed(t, "doppler"):
        s = config.doppler_stride
        spectra = {pr: doppler_spectrum(st[:, ::s, ::s], wf.repetition_interval,
                                        oversample=config.doppler_oversample,
                                        window=config.doppler_window)
                   for pr, st in stacks.items()}
        peaks = detect_doppler_peaks(spectra, guard=config.cfar_guard, train=config.cfar_train,
                                     pfa=config.cfar_pfa, dynamic_range_db=config.dynamic_range_db,
                                     mode=config.cfar_mode)
    with _timed(t, "smi_image"):
        total = sum(stacks.values())
        smi = np.abs(total).sum(axis=0)
    return FrontEnd(scenario, config, dcir, sync, grid, stacks, smi, peaks, spectra, cfo_ok, t)


def _saf(fe: FrontEnd):
    g = fe.grid
    ref = np.array(fe.config.aoi(fe.scenario).center)
    saf_grid = PixelGrid.centered(ref, g.x_max - g.x_min, g.y_max - g.y_min, g.pixel_size)
    return compute_saf(fe.scenario.devices, fe.scenario.waveform, saf_grid, ref,
                       focus=fe.scenario.focus, oversample=fe.config.oversample,
                       interp=fe.config.interp, workers=fe.config.workers)


def fine_dopplers(devices, pairs, x, v, f0: float) -> dict:
    """Doppler shift of every pair re-synthesized from location ``x`` and velocity ``v``."""
    U = regression_matrix(devices, pairs, x, f0)
    return {pr: float(f) for pr, f in zip(pairs, U @ np.asarray(v))}


def target_image(fe: FrontEnd, dopplers: dict, grid: PixelGrid | None = None) -> ComplexImage:
    return precompensated_image(fe.dcir, fe.scenario.devices, grid or fe.grid, dopplers,
                                cfg=fe.config.bp(fe.scenario))


def _refine_peak(fe: FrontEnd, dopplers: dict, image: ComplexImage) -> np.ndarray:
    """Argmax of the target image, then of a fine local grid around it."""
    r, c = image.peak()
    x0 = image.grid.point_at(r, c)
    px = fe.config.fine_pixel
    if px >= image.grid.pixel_size:
        return x0
    local = PixelGrid.centered(x0, image.grid.pixel_size, image.grid.pixel_size, px)
    fine = target_image(fe, dopplers, local)
    return local.point_at(*fine.peak())


def run_dpc(fe: FrontEnd) -> MethodReport:
    """Stages B-E on a prepared front end."""
    cfg, sc = fe.config, fe.scenario
    f0 = sc.waveform.carrier_frequency
    rep = MethodReport("dpc", [], q_hat=fe.peaks.count, timings=dict(fe.timings))
    if fe.peaks.count == 0:
        rep.error, rep.failed_stage = "no Doppler peaks detected", "doppler"
        return rep
    with _timed(rep.timings, "coarse"):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            coarse = coarse_localize(fe.smi, fe.grid, _saf(fe), fe.peaks.count, cfg.saf_min_ratio)
    rep.coarse_locations = [np.array(x) for x in coarse.positions]
    locs = [np.array(x) for x in coarse.positions]
    rep.locations = list(locs)
    pairs = fe.dcir.pairs
    for it in range(cfg.iterations):
        with _timed(rep.timings, "association"):
            try:
                assoc = associate(fe.peaks.peaks, locs, sc.devices, pairs, f0, fe.peaks.resolution,
                                  prefilter=cfg.prefilter)
            except AssociationInfeasible as exc:
                rep.error, rep.failed_stage = str(exc), "association"
                return rep
        rep.association = assoc
        rep.velocities = [np.array(v) for v in assoc.velocities]
        with _timed(rep.timings, "target_imaging"):
            new = []
            for q, (x, v) in enumerate(zip(locs, assoc.velocities)):
                dop = fine_dopplers(sc.devices, pairs, x, v, f0)
                img = target_image(fe, dop)
                img.meta.update(target=q, iteration=it, dopplers_hz={f"{a}-{b}": f for (a, b), f in dop.items()})
                rep.images[q] = img
                new.append(_refine_peak(fe, dop, img))
        locs = new
        rep.locations = list(locs)
    return rep


def run_smi(fe: FrontEnd) -> MethodReport:
    rep = MethodReport("smi", [], q_hat=fe.peaks.count, timings=dict(fe.timings))
    with _timed(rep.timings, "peaks"):
        rep.locations = [np.array(x) for x in image_peaks(fe.smi, fe.grid, fe.peaks.count)]
    return rep


def run_isafs(fe: FrontEnd) -> MethodReport:
    rep = MethodReport("isafs", [], q_hat=fe.peaks.count, timings=dict(fe.timings))
    with _timed(rep.timings, "coarse"):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            coarse = coarse_localize(fe.smi, fe.grid, _saf(fe), fe.peaks.count, fe.config.saf_min_ratio)
    rep.locations = [np.array(x) for x in coarse.positions]
    return rep


_RUNNERS = {"dpc": run_dpc, "smi": run_smi, "isafs": run_isafs}


def run(scenario: Scenario, config: PipelineConfig | None = None) -> dict:
    """All configured methods on one scenario; returns method -> MethodReport with metrics."""
    config = config or PipelineConfig()
    fe = front_end(scenario, config)
    out = {}
    for m in config.methods:
        rep = _RUNNERS[m](fe)
        if scenario.targets:
            rep.metrics = evaluate(rep, scenario.targets)
        rep.metrics["small_cfo_ok"] = fe.cfo_ok
        out[m] = rep
    return out


# ---------------------------------------------------------------------------
# metrics


def match_truth(estimates, truths) -> list:
    """(truth index, estimate index) pairs minimizing the total Euclidean distance.

    With fewer estimates than truths, the unmatched truths are paired with
    their nearest estimate so every truth contributes to the error.
    """
    E = np.array([np.asarray(x, float) for x in estimates]).reshape(-1, 2)
    X = np.array([np.asarray(x, float) for x in truths]).reshape(-1, 2)
    if len(E) == 0 or len(X) == 0:
        return []
    D = np.linalg.norm(E[:, None, :] - X[None, :, :], axis=2)  # (est, truth)
    if len(E) >= len(X):
        rows = solve_assignment(D)
        return [(q, int(rows[q])) for q in range(len(X))]
    cols = solve_assignment(D.T)  # each estimate -> distinct truth
    pairs = {int(cols[e]): e for e in range(len(E))}
    for q in range(len(X)):
        if q not in pairs:
            pairs[q] = int(np.argmin(D[:, q]))
    return sorted(pairs.items())


def evaluate(rep: MethodReport, targets) -> dict:
    """Localization RMSE, per-component velocity RMSE and swap flag against ground truth."""
    truths = [t.position for t in targets]
    match = match_truth(rep.locations, truths)
    out = {"targets": len(targets), "estimates": len(rep.locations),
           "missed": max(0, len(targets) - len(rep.locations))}
    if not match:
        out.update(loc_rmse_m=float("nan"))
        return out
    err2 = [np.sum((rep.locations[e] - truths[q]) ** 2) for q, e in match]
    out["loc_rmse_m"] = float(np.sqrt(np.mean(err2)))
    if rep.velocities is not None and len(rep.velocities) == len(rep.locations):
        ev = np.array([rep.velocities[e] - targets[q].velocity for q, e in match])
        out["vel_rmse_x_mps"] = float(np.sqrt(np.mean(ev[:, 0] ** 2)))
        out["vel_rmse_y_mps"] = float(np.sqrt(np.mean(ev[:, 1] ** 2)))
        dv = rep.association.velocity_resolution if rep.association else None
        out["swap"] = bool(velocity_swap(match, rep.velocities, [t.velocity for t in targets], dv))
    return out


def velocity_swap(match, velocities, truths, dv=None) -> bool:
    """True when location matching and velocity matching disagree and the
    location-matched velocity error exceeds the velocity resolution in some component.

    ``dv`` is a per-estimate list of resolution vectors (m/s); without it any
    disagreement counts.
    """
    if len(match) < 2:
        return False
    est = [e for _, e in match]
    V = np.array([np.asarray(velocities[e]) for e in est])
    T = np.array([np.asarray(truths[q]) for q, _ in match])
    D = np.linalg.norm(V[:, None, :] - T[None, :, :], axis=2)
    by_vel = solve_assignment(D)  # truth slot -> estimate slot
    if np.array_equal(by_vel, np.arange(len(match))):
        return False
    for i, (q, e) in enumerate(match):
        err = np.abs(V[i] - T[i])
        tol = np.zeros(2) if dv is None else np.nan_to_num(np.asarray(dv[e]), nan=0.0)
        if np.any(err > tol):
            return True
    return False


# ---------------------------------------------------------------------------
# Monte Carlo


@dataclass
class MonteCarloSpec:
    device_xs: tuple = (-1.5, -0.5, 0.0, 1.5)
    snr_db: tuple = (-5.0, 0.0, 5.0)
    trials: int = 20
    seed: int = 0
    x1: tuple = (1.0, 5.0)
    v1: tuple = (0.0, 3.0)
    distance_rho: tuple | None = None  # (lo, hi) separation in units of rho_xy; default U(min rho, 3 max rho)
    speed_range: tuple = (1.0, 5.0)
    angle_range: tuple = (np.pi / 4, 7 * np.pi / 8)
    rcs_ratio_range: tuple = (0.2, 1.0)
    antenna_count: int = 32
    full_clocks: bool = True

    def __post_init__(self):
        if self.trials < 1:
            raise ValueError("trials must be >= 1")


def resolution(devices, waveform: Waveform, point, focus=None, half=0.15, pixel=0.001):
    """(rho_x, rho_y) of the array at ``point`` from a numerically computed SAF."""
    grid = PixelGrid.centered(point, half / 3, half, pixel)
    saf = compute_saf(devices, waveform, grid, point, focus=focus)
    return saf.mainlobe_rho_x, saf.mainlobe_rho_y


def draw_trial(spec: MonteCarloSpec, trial: int, rho: tuple) -> tuple[list[Target], dict]:
    """Two targets: fixed first target, randomized offset/velocity/RCS for the second."""
    rng = rng_for(spec.seed, "montecarlo", trial)
    if spec.distance_rho is None:
        d = rng.uniform(min(rho), 3 * max(rho))
    else:
        rxy = 0.5 * (rho[0] + rho[1])
        d = rng.uniform(spec.distance_rho[0] * rxy, spec.distance_rho[1] * rxy)
    ang = rng.uniform(0, 2 * np.pi)
    speed = rng.uniform(*spec.speed_range)
    vang = rng.uniform(*spec.angle_range)
    ratio = rng.uniform(*spec.rcs_ratio_range)
    ph = rng.uniform(0, 2 * np.pi, size=2)
    x1 = np.array(spec.x1, float)
    x2 = x1 + d * np.array([np.cos(ang), np.sin(ang)])
    v2 = speed * np.array([np.cos(vang), np.sin(vang)])
    targets = [Target(x1, spec.v1, 1.0, ph[0]), Target(x2, v2, ratio, ph[1])]
    return targets, {"distance_m": float(d), "rcs_ratio": float(ratio),
                     "noise_seed": int(rng.integers(2**31)), "clock_seed": int(rng.integers(2**31))}


MC_FIELDS = ["trial", "snr_db", "method", "distance_m", "distance_norm", "rcs_ratio", "q_hat",
             "loc_rmse_m", "vel_rmse_x_mps", "vel_rmse_y_mps", "swap", "error", "runtime_s"]


def monte_carlo(spec: MonteCarloSpec, config: PipelineConfig | None = None, csv_path=None,
                progress=None) -> list[dict]:
    """Run ``spec.trials`` randomized two-target trials per SNR; one row per (trial, SNR, method)."""
    config = config or PipelineConfig(aoi_center=spec.x1)
    devices = linear_array(spec.device_xs, antenna_count=spec.antenna_count)
    wf = Waveform(device_count=len(devices))
    focus = np.array(spec.x1, float)
    rho = resolution(devices, wf, focus, focus)
    rxy = 0.5 * (rho[0] + rho[1])
    rows = []
    for snr in spec.snr_db:
        for trial in range(spec.trials):
            targets, info = draw_trial(spec, trial, rho)
            clocks = ClockParams(seed=info["clock_seed"]) if spec.full_clocks else ClockParams.ideal()
            sc = Scenario(devices, targets, wf, clocks, snr_db=snr, focus=focus, seed=info["noise_seed"])
            t0 = time.perf_counter()
            try:
                reports = run(sc, config)
                err = ""
            except StageError as exc:
                reports, err = {}, str(exc)
            dt = time.perf_counter() - t0
            for m in config.methods:
                rep = reports.get(m)
                met = rep.metrics if rep else {}
                rows.append({
                    "trial": trial, "snr_db": snr, "method": m,
                    "distance_m": info["distance_m"], "distance_norm": info["distance_m"] / rxy,
                    "rcs_ratio": info["rcs_ratio"], "q_hat": rep.q_hat if rep else 0,
                    "loc_rmse_m": met.get("loc_rmse_m", float("nan")),
                    "vel_rmse_x_mps": met.get("vel_rmse_x_mps", float("nan")),
                    "vel_rmse_y_mps": met.get("vel_rmse_y_mps", float("nan")),
                    "swap": met.get("swap", ""), "error": err or (rep.error or "" if rep else ""),
                    "runtime_s": dt,
                })
            if progress:
                progress(snr, trial, rows[-len(config.methods):])
    if csv_path is not None:
        write_rows(csv_path, rows)
    return rows


def write_rows(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=MC_FIELDS)
        w.writeheader()
        for r in rows:
            w.writerow({k: (f"{v:.6g}" if isinstance(v, float) else v) for k, v in r.items()})


def summarize(rows, method: str, key: str = "loc_rmse_m") -> dict:
    vals = np.array([r[key] for r in rows if r["method"] == method], dtype=float)
    vals = vals[np.isfinite(vals)]
    if vals.size == 0:
        return {"n": 0}
    return {"n": int(vals.size), "median": float(np.median(vals)),
            "p95": float(np.percentile(vals, 95)), "mean": float(np.mean(vals))}


def swap_rate(rows, method: str = "dpc") -> float:
    flags = [r["swap"] for r in rows if r["method"] == method and r["swap"] != ""]
    return float(np.mean(flags)) if flags else float("nan")


def report_dict(reports: dict, scenario: Scenario, config: PipelineConfig) -> dict:
    return {"scenario_hash": scenario.hash(), "config": asdict(config),
            "methods": {m: r.summary() for m, r in reports.items()}}

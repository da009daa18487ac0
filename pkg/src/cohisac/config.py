"""Scenario/pipeline configuration files (JSON syntax, SI units in unit-suffixed keys).

Example::

    {
      "seed": 0,
      "devices": [{"position_m": [-1.5, 0.0]}, {"position_m": [1.5, 0.0]}],
      "targets": [{"position_m": [1.0, 5.0], "velocity_mps": [0.0, 3.0]}],
      "waveform": {"carrier_frequency_hz": 26.5e9, "bandwidth_hz": 4e8},
      "clocks": {"timing_offset_max_s": 2.5e-8, "cfo_std": 1e-4},
      "noise": {"snr_db": 0.0},
      "grid": {"focus_m": [1.0, 5.0], "aoi_half_x_m": 0.3, "pixel_size_m": 0.005},
      "pipeline": {"iterations": 2}
    }

Every section is optional except ``devices``.  Unknown keys are rejected so
typos surface as errors instead of silently using defaults.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .channel import Scenario
from .clocks import ClockParams
from .geometry import Device, Target, Waveform
from .pipeline import MonteCarloSpec, PipelineConfig


class ConfigError(ValueError):
    pass


# config key -> constructor keyword, per section
DEVICE_KEYS = {"position_m": "position", "orientation_rad": "orientation",
               "antenna_count": "antenna_count", "antenna_spacing_m": "antenna_spacing"}
TARGET_KEYS = {"position_m": "position", "velocity_mps": "velocity", "rcs_m2": "rcs",
               "phase_rad": "phase"}
WAVEFORM_KEYS = {"carrier_frequency_hz": "carrier_frequency", "bandwidth_hz": "bandwidth",
                 "subcarrier_count": "subcarrier_count",
                 "repetition_interval_s": "repetition_interval",
                 "slow_time_count": "slow_time_count", "pilot_power_w": "pilot_power"}
CLOCK_KEYS = {"timing_offset_max_s": "to_max", "cfo_std": "cfo_std",
              "ar_coefficient": "ar_coefficient", "innovation_scale": "innovation_scale"}
NOISE_KEYS = {"snr_db": "snr_db", "noise_variance_w": "noise_variance",
              "include_los": "include_los", "self_coupling": "self_coupling",
              "tx_cfo_delay": "tx_cfo_delay"}
GRID_KEYS = {"aoi_center_m": "aoi_center", "aoi_half_x_m": "aoi_half_x",
             "aoi_half_y_m": "aoi_half_y", "pixel_size_m": "pixel_size",
             "fine_pixel_m": "fine_pixel", "doppler_stride": "doppler_stride"}
PIPELINE_KEYS = {"iterations": "iterations", "oversample": "oversample",
                 "range_margin_m": "range_margin", "doppler_oversample": "doppler_oversample",
                 "doppler_window": "doppler_window", "cfar_guard": "cfar_guard",
                 "cfar_train": "cfar_train", "cfar_pfa": "cfar_pfa", "cfar_mode": "cfar_mode",
                 "dynamic_range_db": "dynamic_range_db", "saf_min_ratio": "saf_min_ratio",
                 "prefilter": "prefilter", "first_peak": "first_peak", "remove_los": "remove_los",
                 "interp": "interp", "methods": "methods"}
MONTECARLO_KEYS = {"snr_db": "snr_db", "trials": "trials", "x1_m": "x1", "v1_mps": "v1",
                   "distance_rho": "distance_rho", "speed_range_mps": "speed_range",
                   "angle_range_rad": "angle_range", "rcs_ratio_range": "rcs_ratio_range",
                   "full_clocks": "full_clocks"}
TOP_KEYS = {"seed", "devices", "targets", "waveform", "clocks", "noise", "grid", "pipeline",
            "montecarlo"}


@dataclass
class RunConfig:
    scenario: Scenario
    pipeline: PipelineConfig
    montecarlo: MonteCarloSpec
    source: dict


def _translate(section: dict, mapping: dict, where: str) -> dict:
    if not isinstance(section, dict):
        raise ConfigError(f"{where}: expected an object")
    unknown = set(section) - set(mapping)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    out = {}
    for k, v in section.items():
        out[mapping[k]] = tuple(v) if isinstance(v, list) else v
    return out


def _build(cls, kwargs, where):
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def parse_config(data: dict, seed: int | None = None) -> RunConfig:
    """Validate a decoded config object and build the scenario, pipeline and Monte Carlo settings."""
    if not isinstance(data, dict):
        raise ConfigError("config must be a JSON object")
    unknown = set(data) - TOP_KEYS
    if unknown:
        raise ConfigError(f"unknown sections {sorted(unknown)}")
    seed = int(data.get("seed", 0) if seed is None else seed)
    devs = data.get("devices")
    if not devs:
        raise ConfigError("devices: at least one device is required")
    devices = [_build(Device, _translate(d, DEVICE_KEYS, f"devices[{i}]"), f"devices[{i}]")
               for i, d in enumerate(devs)]
    targets = [_build(Target, _translate(t, TARGET_KEYS, f"targets[{i}]"), f"targets[{i}]")
               for i, t in enumerate(data.get("targets", []))]
    wf_kw = _translate(data.get("waveform", {}), WAVEFORM_KEYS, "waveform")
    wf = _build(Waveform, {**wf_kw, "device_count": len(devices)}, "waveform")
    clk_section = dict(data.get("clocks", {}))
    ideal = clk_section.pop("ideal", False)
    clk_kw = _translate(clk_section, CLOCK_KEYS, "clocks")
    clocks = ClockParams.ideal() if ideal else _build(ClockParams, {**clk_kw, "seed": seed}, "clocks")
    noise = _translate(data.get("noise", {}), NOISE_KEYS, "noise")
    grid = _translate(data.get("grid", {}), {**GRID_KEYS, "focus_m": "focus"}, "grid")
    focus = grid.pop("focus", None)
    if focus is None:
        focus = grid.get("aoi_center") or (targets[0].position if targets else (0.0, 5.0))
    focus = np.asarray(focus, dtype=float)
    if focus.shape != (2,) or not np.all(np.isfinite(focus)):
        raise ConfigError("grid.focus_m must be a finite 2-vector")
    scenario = _build(Scenario, {"devices": devices, "targets": targets, "waveform": wf,
                                 "clock_params": clocks, "seed": seed, "focus": focus, **noise},
                      "scenario")
    pipe_kw = _translate(data.get("pipeline", {}), PIPELINE_KEYS, "pipeline")
    pipeline = _build(PipelineConfig, {**grid, **pipe_kw}, "pipeline")
    mc_kw = _translate(data.get("montecarlo", {}), MONTECARLO_KEYS, "montecarlo")
    xs = tuple(float(d.position[0]) for d in devices)
    mc = _build(MonteCarloSpec, {"device_xs": xs, "seed": seed,
                                 "antenna_count": devices[0].antenna_count, **mc_kw}, "montecarlo")
    return RunConfig(scenario, pipeline, mc, data)


def load_config(path, seed: int | None = None) -> RunConfig:
    try:
        data = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return parse_config(data, seed)

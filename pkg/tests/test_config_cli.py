import json

import numpy as np
import pytest

from cohisac.cli import EXIT_CONFIG, EXIT_OK, EXIT_SYNC, main
from cohisac.config import ConfigError, load_config, parse_config
from cohisac.channel import CIRCube
from cohisac.imaging import load_image

MOVERS = {
    "seed": 1,
    "devices": [{"position_m": [-0.25, 0.0]}, {"position_m": [0.25, 0.0]}],
    "targets": [
        {"position_m": [1.0, 5.0], "velocity_mps": [0.0, 3.0], "phase_rad": 0.3},
        {"position_m": [1.1, 5.0], "velocity_mps": [0.0, -3.0], "phase_rad": 1.9},
    ],
    "noise": {"snr_db": None},
    "grid": {"focus_m": [1.05, 5.0], "aoi_half_x_m": 0.3, "aoi_half_y_m": 0.3},
    "pipeline": {"iterations": 2},
}

SMALL = {
    "seed": 5,
    "devices": [{"position_m": [-1.5, 0.0], "antenna_count": 8},
                {"position_m": [1.5, 0.0], "antenna_count": 8}],
    "targets": [{"position_m": [0.5, 5.0]}],
    "waveform": {"subcarrier_count": 256, "slow_time_count": 4},
    "grid": {"aoi_half_x_m": 0.05, "aoi_half_y_m": 0.1, "pixel_size_m": 0.01},
}


def _write(tmp_path, data, name="cfg.json"):
    path = tmp_path / name
    path.write_text(json.dumps(data))
    return str(path)


def test_parse_defaults_and_units():
    cfg = parse_config(SMALL)
    sc = cfg.scenario
    assert len(sc.devices) == 2 and sc.devices[0].antenna_count == 8
    assert sc.waveform.subcarrier_count == 256 and sc.waveform.carrier_frequency == 26.5e9
    np.testing.assert_array_equal(sc.focus, [0.5, 5.0])
    assert cfg.pipeline.pixel_size == 0.01 and cfg.pipeline.aoi_half_y == 0.1
    assert cfg.montecarlo.device_xs == (-1.5, 1.5) and cfg.montecarlo.antenna_count == 8
    assert sc.clock_params.seed == 5


def test_seed_override():
    assert parse_config(SMALL, seed=9).scenario.seed == 9
    assert parse_config(SMALL, seed=9).scenario.clock_params.seed == 9


def test_ideal_clocks_flag():
    cfg = parse_config({**SMALL, "clocks": {"ideal": True}})
    assert cfg.scenario.clock_params.to_max == 0


@pytest.mark.parametrize("bad", [
    {**SMALL, "targetz": []},
    {**SMALL, "waveform": {"bandwith_hz": 1e8}},
    {**SMALL, "devices": []},
    {**SMALL, "grid": {"focus_m": [1.0]}},
    {**SMALL, "pipeline": {"iterations": 0}},
    {**SMALL, "pipeline": {"methods": ["music"]}},
    {**SMALL, "devices": [{"position_m": [0, 0, 0, 0]}]},
    [],
])
def test_bad_configs_rejected(bad):
    with pytest.raises(ConfigError):
        parse_config(bad)


def test_load_config_errors(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.json")
    path = tmp_path / "broken.json"
    path.write_text("{not json")
    with pytest.raises(ConfigError):
        load_config(path)


def test_cli_config_error_exit(tmp_path):
    path = _write(tmp_path, {**SMALL, "extra": 1})
    assert main(["simulate", path, "--out", str(tmp_path / "c.bin")]) == EXIT_CONFIG


def test_cli_simulate_and_sync_report(tmp_path):
    path = _write(tmp_path, SMALL)
    assert main(["simulate", path, "--out", str(tmp_path / "c.bin")]) == EXIT_OK
    cube = CIRCube.load(tmp_path / "c.bin", parse_config(SMALL).scenario.waveform)
    assert cube.values.shape[:3] == (4, 4, 8)
    assert main(["sync-report", path, "--out", str(tmp_path / "s.csv")]) == EXIT_OK
    lines = (tmp_path / "s.csv").read_text().strip().splitlines()
    assert len(lines) == 5


def test_cli_seed_changes_output(tmp_path):
    path = _write(tmp_path, {**SMALL, "noise": {"snr_db": 10.0}})
    main(["simulate", path, "--out", str(tmp_path / "a.bin")])
    main(["simulate", path, "--out", str(tmp_path / "b.bin"), "--seed", "6"])
    main(["simulate", path, "--out", str(tmp_path / "c.bin"), "--seed", "5"])
    wf = parse_config(SMALL).scenario.waveform
    a, b, c = (CIRCube.load(tmp_path / f"{n}.bin", wf).values for n in "abc")
    np.testing.assert_array_equal(a, c)
    assert not np.array_equal(a, b)


def test_cli_sync_failure_exit(tmp_path):
    noise_only = {
        "devices": [{"position_m": [-0.25, 0.0]}, {"position_m": [0.25, 0.0]}],
        "waveform": {"slow_time_count": 16},
        "noise": {"include_los": False, "noise_variance_w": 1e-12},
        "grid": {"focus_m": [0.0, 5.0], "aoi_half_x_m": 0.05, "aoi_half_y_m": 0.05},
    }
    path = _write(tmp_path, noise_only)
    assert main(["sync-report", path, "--out", str(tmp_path / "s.csv")]) == EXIT_SYNC
    assert main(["pipeline", path, "--out", str(tmp_path / "out")]) == EXIT_SYNC


def test_cli_image_saf_render(tmp_path, capsys):
    path = _write(tmp_path, SMALL)
    assert main(["image", path, "--out", str(tmp_path / "im.f32"), "--png", str(tmp_path / "im.png")]) == 0
    mag, meta = load_image(tmp_path / "im.f32")
    assert mag.shape == (21, 11)
    assert meta["integration"] == "magnitude"
    assert main(["image", path, "--out", str(tmp_path / "k.f32"), "--pair", "0", "1", "--k", "0"]) == 0
    assert (tmp_path / "k.c64").exists()
    capsys.readouterr()
    assert main(["saf", path, "--out", str(tmp_path / "saf.f32"), "--half-x", "0.02",
                 "--half-y", "0.1", "--pixel", "0.002"]) == 0
    widths = json.loads(capsys.readouterr().out)
    assert 0 < widths["rho_x_m"] < widths["rho_y_m"]
    assert main(["render", str(tmp_path / "saf.f32"), "--out", str(tmp_path / "saf.png")]) == 0
    assert (tmp_path / "saf.png").stat().st_size > 0


def test_cli_pipeline_outputs(tmp_path, capsys):
    path = _write(tmp_path, MOVERS)
    out = tmp_path / "run"
    assert main(["pipeline", path, "--out", str(out), "--png"]) == EXIT_OK
    metrics = json.loads(capsys.readouterr().out)
    assert metrics["dpc"]["loc_rmse_m"] < 0.005
    report = json.loads((out / "report.json").read_text())
    assert report["methods"]["dpc"]["q_hat"] == 2
    for name in ("doppler_spectra.csv", "association.csv", "target_0.f32", "target_0.c64",
                 "target_1.png"):
        assert (out / name).exists(), name

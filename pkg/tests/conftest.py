import numpy as np
import pytest

from cohisac.geometry import Waveform, linear_array

F0 = 26.5e9

# criterion id -> (passed, detail); filled by the acceptance module
ACCEPTANCE: dict = {}


def small_waveform(n_devices, K=8, M=256, **kw):
    return Waveform(device_count=n_devices, slow_time_count=K, subcarrier_count=M, **kw)


@pytest.fixture
def record_criterion():
    def record(cid, passed, detail=""):
        ACCEPTANCE[cid] = (bool(passed), detail)
    return record


@pytest.fixture
def pair_devices():
    return linear_array([-1.5, 1.5], antenna_count=8)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for cid in sorted(ACCEPTANCE, key=lambda c: (int("".join(ch for ch in c if ch.isdigit()) or 0), c)):
        ok, detail = ACCEPTANCE[cid]
        terminalreporter.write_line(f"criterion {cid}: {'PASS' if ok else 'FAIL'}  {detail}")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)

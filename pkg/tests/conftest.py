import os
import time

import numpy as np
import pytest

from unstable_lab import harness
from unstable_lab.config import ExperimentConfig, apply_overrides
from unstable_lab.l96 import ModelConfig, generate_propagators
from unstable_lab.lyapunov import blv_run, blv_spinup, random_frame


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number")


@pytest.fixture(scope="session")
def l96_props():
    """Short attractor propagator sequence shared by unit tests."""
    return generate_propagators(ModelConfig(K=2000, spinup_steps=500, seed=3))


@pytest.fixture(scope="session")
def l96_blv(l96_props):
    """BLV run over steps 1000..2000 after spinning up on the first 1000."""
    B, _ = blv_spinup(l96_props, random_frame(10, 0), 1000, angle_tol=1e-6)
    return blv_run(l96_props.window(1000), B)


@pytest.fixture(scope="session")
def default_run(tmp_path_factory):
    """Default-configuration pipeline in a private cache, with cold-start timings.

    Trusted window of 1e5 QR steps after a 1e4-step spin-up.
    """
    root = tmp_path_factory.mktemp("default_run")
    old = os.environ.get("UNSTABLE_LAB_CACHE")
    os.environ["UNSTABLE_LAB_CACHE"] = str(root / "cache")
    try:
        config = apply_overrides(ExperimentConfig(), [f"output_dir={root / 'out'}"])
        t0 = time.perf_counter()
        lyap = harness.cmd_lyapunov(config)
        t_lyap = time.perf_counter() - t0
        art = harness.lyapunov_artifacts(config)
        yield {"config": config, "lyapunov": lyap, "artifacts": art, "lyapunov_seconds": t_lyap,
               "out": root / "out"}
    finally:
        if old is None:
            os.environ.pop("UNSTABLE_LAB_CACHE", None)
        else:
            os.environ["UNSTABLE_LAB_CACHE"] = old


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


_criteria = {}


def pytest_runtest_makereport(item, call):
    marker = item.get_closest_marker("criterion")
    if marker is None or call.when != "call":
        return
    n = marker.args[0]
    ok = call.excinfo is None
    detail = "; ".join(f"{k}={v}" for k, v in item.user_properties)
    _criteria.setdefault(n, []).append((item.name, ok, detail))


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for n in sorted(_criteria):
        parts = _criteria[n]
        status = "PASS" if all(ok for _, ok, _ in parts) else "FAIL"
        tr.write_line(f"criterion {n}: {status}")
        for name, ok, detail in parts:
            tr.write_line(f"    {'ok  ' if ok else 'fail'} {name}  {detail}")

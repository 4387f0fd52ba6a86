import os
import time
import warnings
from types import SimpleNamespace

import numpy as np
import pytest

from fftcs import double_integrator_spec, run
from fftcs.config import bundled_config, spec_from_config
from fftcs.montecarlo import validate

warnings.filterwarnings("ignore", category=UserWarning)

THREADS = int(os.environ.get("FFTCS_THREADS", "1"))


@pytest.fixture(scope="session")
def eta1_spec():
    return double_integrator_spec(eta=1.0)


@pytest.fixture(scope="session")
def eta1_run(eta1_spec):
    return run(eta1_spec, threads=THREADS)


@pytest.fixture(scope="session")
def eta1_report(eta1_spec, eta1_run):
    return validate(eta1_spec.dynamics, eta1_run, eta1_spec)


def _mult_spec(mode):
    return spec_from_config(bundled_config("multiplicative"), mode=mode)


@pytest.fixture(scope="session")
def mult_runs():
    out = {}
    for mode in ("full", "frozen"):
        spec = _mult_spec(mode)
        res = run(spec, threads=THREADS)
        out[mode] = (spec, res, validate(spec.dynamics, res, spec))
    return out


@pytest.fixture(scope="session")
def sweep():
    etas = (0.0, 0.2, 0.5, 0.8, 1.0, 2.0, 10.0)
    t0 = time.perf_counter()
    runs = {eta: run(double_integrator_spec(eta=eta), threads=THREADS) for eta in etas}
    return SimpleNamespace(runs=runs, seconds=time.perf_counter() - t0)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    from helpers import ACCEPTANCE
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)

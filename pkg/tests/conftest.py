"""Shared fixtures: closed-loop runs are expensive, so each config runs once per session."""
import dataclasses
import time

import numpy as np
import pytest

from iidob.config import default_config
from iidob.runner import build_scenario, run

_RUNS = {}
_ACCEPTANCE_LINES = []


def timed_run(key, cfg, scenario=None):
    """Run ``cfg`` once per session; returns (result, cpu seconds, wall seconds)."""
    if key not in _RUNS:
        c0, w0 = time.process_time(), time.perf_counter()
        res = run(cfg, scenario)
        _RUNS[key] = (res, time.process_time() - c0, time.perf_counter() - w0)
    return _RUNS[key]


def poisoned_scenario(cfg):
    """Scenario whose disturbance derivative is NaN everywhere."""
    sc = build_scenario(cfg)
    l = sc.model.l
    sig = dataclasses.replace(sc.disturbance, wdot=lambda t: np.full(l, np.nan))
    return dataclasses.replace(sc, disturbance=sig)


def example1_oracle():
    return timed_run("ex1-oracle", default_config("example1", oracle=True))


def report_line(text):
    _ACCEPTANCE_LINES.append(text)
    print(text)


@pytest.fixture(scope="session")
def ex1_oracle():
    return example1_oracle()


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE_LINES:
            terminalreporter.write_line(line)

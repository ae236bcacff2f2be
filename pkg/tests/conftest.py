from __future__ import annotations

import math

import numpy as np
import pytest

from svoacc.core import CALIBRATED_PARAMS, SimConfig, TrajectorySeries
from svoacc.ingest import reference_scenario


def idm_oracle(v0, a_max, b, s0, tau, delta, v, v_lead, s):
    """Scalar re-derivation of the IDM law, kept apart from the package code."""
    s_star = s0 + v * tau + v * (v - v_lead) / (2.0 * math.sqrt(a_max * b))
    return a_max * (1.0 - (v / v0) ** delta - (s_star / s) ** 2)


@pytest.fixture(scope="session")
def short_scenario():
    return reference_scenario(duration=2.0)


@pytest.fixture
def calibrated():
    return CALIBRATED_PARAMS


@pytest.fixture
def cfg():
    return SimConfig()


def constant_series(vid, value, n, dt=0.1, spacing=None):
    speeds = np.full(n, float(value))
    spacings = None if spacing is None else np.full(n, float(spacing))
    return TrajectorySeries(vid, dt, 0.0, speeds, spacings)


# acceptance lines collected by tests/test_acceptance.py, printed after the run
ACCEPTANCE_LINES: list = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)

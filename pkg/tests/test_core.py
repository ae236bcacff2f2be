from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from svoacc.core import (
    ConfigurationError,
    IdmParams,
    ParameterError,
    PlatoonState,
    SimConfig,
    SvoAngle,
    TrajectorySeries,
    check_platoon_state,
    check_trajectory,
    validate_trajectory,
)


def test_valid_series_is_ok():
    s = TrajectorySeries(2, 0.1, 0.0, [1.0, 2.0], [5.0, 5.0])
    assert validate_trajectory(s).ok


def test_zero_dt_reported():
    res = validate_trajectory(TrajectorySeries(2, 0.0, 0.0, [1.0, 2.0], [5.0, 5.0]))
    assert not res.ok
    assert [v.rule for v in res.violations] == ["dt > 0"]


def test_negative_spacing_reports_first_index():
    res = validate_trajectory(TrajectorySeries(2, 0.1, 0.0, [1.0] * 5, [5.0, 5.0, 5.0, -1.0, -2.0]))
    (v,) = res.violations
    assert v.rule == "all spacings > 0" and v.index == 3


def test_nan_and_inf_are_violations_not_errors():
    res = validate_trajectory(TrajectorySeries(1, float("nan"), 0.0, [1.0, float("inf"), float("nan")]))
    rules = {v.rule: v.index for v in res.violations}
    assert "dt finite" in rules
    assert rules["speeds finite"] == 1


def test_length_and_sign_rules():
    res = validate_trajectory(TrajectorySeries(2, 0.1, 0.0, [-1.0], [1.0, 2.0]))
    rules = {v.rule for v in res.violations}
    assert {"length >= 2", "all speeds >= 0", "speeds and spacings have equal length"} <= rules


def test_check_trajectory_raises():
    with pytest.raises(ConfigurationError):
        check_trajectory(TrajectorySeries(1, 0.1, 0.0, [1.0]))


@given(st.lists(st.floats(allow_nan=True, allow_infinity=True), min_size=0, max_size=20),
       st.floats(allow_nan=True, allow_infinity=True))
@settings(max_examples=200, deadline=None)
def test_validate_is_total(speeds, dt):
    res = validate_trajectory(TrajectorySeries(1, dt, 0.0, speeds))
    assert isinstance(res.ok, bool)


def test_series_is_read_only():
    s = TrajectorySeries(1, 0.1, 0.0, [1.0, 2.0])
    with pytest.raises(ValueError):
        s.speeds[0] = 5.0


def test_platoon_from_spacings_is_consistent():
    st_ = PlatoonState.from_spacings([1, 1, 1], [5.0, 7.5], vehicle_length=4.5, leader_position=100.0)
    assert st_.consistency_error(4.5) == 0.0
    assert check_platoon_state(st_, 4.5) is st_
    np.testing.assert_array_equal(st_.positions, [100.0, 90.5, 78.5])


def test_platoon_state_rejects_inconsistency():
    bad = PlatoonState(0.0, [10.0, 0.0], [1.0, 1.0], [5.0])
    with pytest.raises(ConfigurationError):
        check_platoon_state(bad, 4.5)
    with pytest.raises(ConfigurationError):
        check_platoon_state(PlatoonState(0.0, [10.0, 0.5], [1.0, -1.0], [5.0]), 4.5)


@pytest.mark.parametrize("field", IdmParams.FIELDS)
def test_idm_params_must_be_positive(field):
    kwargs = dict(v0=5, a_max=1, b=1, s0=2, tau=1, delta=4)
    kwargs[field] = 0.0
    with pytest.raises(ParameterError):
        IdmParams(**kwargs)


def test_svo_angle_range():
    assert SvoAngle(math.pi / 2).phi == math.pi / 2
    for bad in (-0.1, 2.0, float("nan")):
        with pytest.raises(ConfigurationError):
            SvoAngle(bad)


def test_sim_config_validation():
    assert SimConfig().n_steps == 1200
    assert SimConfig(horizon=0).n_steps == 0
    with pytest.raises(ConfigurationError):
        SimConfig(dt=0)
    with pytest.raises(ConfigurationError):
        SimConfig(horizon=0.05)
    with pytest.raises(ConfigurationError):
        SimConfig(min_spacing_floor=0)

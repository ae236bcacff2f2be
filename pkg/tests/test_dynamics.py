from __future__ import annotations

import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import constant_series, idm_oracle
from svoacc.core import (
    ConfigurationError,
    IdmParams,
    PlatoonState,
    PlaybackExhaustedError,
    SimConfig,
    TrajectorySeries,
)
from svoacc.dynamics import (
    AccelerationLaw,
    IdmLaw,
    PlaybackLaw,
    desired_spacing,
    equilibrium_spacing,
    euler_update,
    idm_accel_with_grad,
    idm_acceleration,
    rollout,
    step,
)


def test_idm_calibrated_v3_free_road(calibrated):
    p = calibrated[3]
    expected = idm_oracle(*p.as_tuple(), 0.0, 0.0, 30.0)
    assert expected == pytest.approx(1.1781, abs=1e-4)
    assert idm_acceleration(p, 0.0, 0.0, 30.0) == pytest.approx(expected, rel=1e-12)


def test_idm_calibrated_v4_closing(calibrated):
    p = calibrated[4]
    assert desired_spacing(p, 2.0, 1.0) == pytest.approx(6.50443, abs=1e-4)
    expected = idm_oracle(*p.as_tuple(), 2.0, 1.0, 10.0)
    assert expected == pytest.approx(0.74236, abs=1e-4)
    assert idm_acceleration(p, 2.0, 1.0, 10.0) == pytest.approx(expected, rel=1e-12)


def test_desired_spacing_special_cases(calibrated):
    p = calibrated[5]
    assert desired_spacing(p, 0.0, 3.0) == p.s0
    assert desired_spacing(p, 2.0, 2.0) == p.s0 + 2.0 * p.tau
    assert desired_spacing(p, 1.0, 5.0) < p.s0


def test_idm_tends_to_zero_at_desired_speed(calibrated):
    p = calibrated[3]
    a = idm_acceleration(p, p.v0, p.v0, 1e6)
    assert -1e-9 < a <= 0.0


def test_idm_rejects_bad_params():
    with pytest.raises(TypeError):
        idm_acceleration((5, 1, 1, 2, 1, 4), 1.0, 1.0, 10.0)


@given(st.floats(0.05, 4.9), st.floats(0.5, 1.5))
@settings(max_examples=200, deadline=None)
def test_idm_sign_around_equilibrium(v, factor):
    p = IdmParams(5.0, 1.31, 3.0, 3.0, 1.5, 5.0)
    s_eq = equilibrium_spacing(p, v)
    a = idm_acceleration(p, v, v, s_eq * factor)
    if factor > 1.0 + 1e-9:
        assert a > 0
    elif factor < 1.0 - 1e-9:
        assert a < 0


def test_idm_partials_match_differences(calibrated):
    p = calibrated[4].as_tuple()
    v, vl, s = 2.3, 1.7, 8.0
    _, dv, dvl, ds = idm_accel_with_grad(p, np.array(v), np.array(vl), np.array(s))
    h = 1e-6
    f = lambda *x: idm_oracle(*p, *x)
    assert dv == pytest.approx((f(v + h, vl, s) - f(v - h, vl, s)) / (2 * h), rel=1e-6)
    assert dvl == pytest.approx((f(v, vl + h, s) - f(v, vl - h, s)) / (2 * h), rel=1e-6)
    assert ds == pytest.approx((f(v, vl, s + h) - f(v, vl, s - h)) / (2 * h), rel=1e-6)


def test_euler_examples():
    v, s, _ = euler_update(np.array([2.0, 2.0]), np.array([10.0]), np.array([0.0, 0.5]), 2.0, 0.1, 0.1)
    assert v[1] == pytest.approx(2.05)
    v, s, _ = euler_update(np.array([3.0, 3.0]), np.array([10.0]), np.zeros(2), 3.0, 0.1, 0.1)
    assert s[0] == 10.0
    v, s, _ = euler_update(np.array([4.0, 2.0]), np.array([10.0]), np.zeros(2), 4.0, 0.5, 0.1)
    assert s[0] == pytest.approx(11.0)


def test_euler_floors_speed_and_clamps_spacing():
    v, s, info = euler_update(np.array([0.0, 1.0]), np.array([0.05]), np.array([0.0, -20.0]), 0.0, 0.1, 0.1)
    assert v[1] == 0.0
    assert s[0] == 0.1 and info["clamped"][0] and info["collided"][0]


def _two_car(lead_speed, follower_params, s0, n, dt=0.1, v_follow=None):
    lead = constant_series(1, lead_speed, n + 1, dt)
    v_follow = lead_speed if v_follow is None else v_follow
    state = PlatoonState.from_spacings([lead_speed, v_follow], [s0])
    laws = [PlaybackLaw(lead), IdmLaw(follower_params)]
    return state, laws


def test_step_advances_time_and_positions(calibrated, cfg):
    state, laws = _two_car(2.0, calibrated[5], 10.0, 10)
    nxt = step(state, laws, cfg)
    assert nxt.time == pytest.approx(0.1)
    assert nxt.positions[0] == pytest.approx(0.2)
    assert nxt.consistency_error(cfg.vehicle_length) <= 1e-9


def test_step_requires_playback_leader(calibrated, cfg):
    state, laws = _two_car(2.0, calibrated[5], 10.0, 10)
    with pytest.raises(ConfigurationError):
        step(state, [IdmLaw(calibrated[5]), IdmLaw(calibrated[5])], cfg)


def test_playback_exhaustion(calibrated):
    state, laws = _two_car(2.0, calibrated[5], 10.0, 5)
    with pytest.raises(PlaybackExhaustedError):
        rollout(state, laws, SimConfig(horizon=1.0))


def test_rollout_dt_must_match(calibrated):
    state, laws = _two_car(2.0, calibrated[5], 10.0, 50, dt=0.2)
    with pytest.raises(ConfigurationError):
        rollout(state, laws, SimConfig(horizon=1.0))


def test_zero_horizon_rollout(calibrated):
    state, laws = _two_car(2.0, calibrated[5], 10.0, 5)
    r = rollout(state, laws, SimConfig(horizon=0))
    assert len(r.states) == 1 and r.accelerations.shape == (2, 0)


def test_time_stamps_are_exact_multiples(calibrated):
    state, laws = _two_car(2.0, calibrated[5], 10.0, 1000)
    r = rollout(state, laws, SimConfig(horizon=100.0))
    np.testing.assert_array_equal(r.times, np.arange(1001) * 0.1)


class Coast(AccelerationLaw):
    kind = "coast"

    def acceleration(self, k, state, i, history):
        return 0.0


def test_equal_speed_fixed_point():
    n = 5
    lead = constant_series(1, 3.0, 10_001)
    state = PlatoonState.from_spacings([3.0] * n, [12.0] * (n - 1))
    r = rollout(state, [PlaybackLaw(lead)] + [Coast()] * (n - 1), SimConfig(horizon=1000.0))
    assert np.max(np.abs(r.spacings - 12.0)) <= 1e-9


def test_equilibrium_follower_holds_speed(calibrated):
    p = calibrated[5]
    s_eq = equilibrium_spacing(p, 2.0)
    # independent check: the oracle acceleration at the solved spacing is zero
    assert idm_oracle(*p.as_tuple(), 2.0, 2.0, s_eq) == pytest.approx(0.0, abs=1e-12)
    state, laws = _two_car(2.0, p, s_eq, 1000)
    r = rollout(state, laws, SimConfig(horizon=100.0))
    assert np.max(np.abs(r.speeds[:, 1] - 2.0)) <= 0.05


def test_rollout_is_deterministic(short_scenario):
    sc = short_scenario
    laws = [PlaybackLaw(sc.leader)] + [IdmLaw(p) for p in (sc.follower_params[0],) + sc.follower_params]
    a = rollout(sc.initial, laws, sc.cfg)
    b = rollout(sc.initial, laws, sc.cfg)
    np.testing.assert_array_equal(a.speeds, b.speeds)
    np.testing.assert_array_equal(a.accelerations, b.accelerations)


@given(st.integers(0, 2**31 - 1))
@settings(max_examples=25, deadline=None)
def test_speeds_never_negative_and_positions_consistent(seed):
    rng = np.random.default_rng(seed)
    n = 4
    lead = TrajectorySeries(1, 0.1, 0.0, np.abs(rng.normal(2.0, 1.5, 201)))
    state = PlatoonState.from_spacings(rng.uniform(0, 4, n), rng.uniform(0.2, 20, n - 1))
    params = [IdmParams(5.0, rng.uniform(0.5, 2), rng.uniform(0.5, 3), 3.0, 1.5, rng.uniform(1, 5))
              for _ in range(n - 1)]
    r = rollout(state, [PlaybackLaw(lead)] + [IdmLaw(p) for p in params], SimConfig(horizon=20.0))
    assert np.all(r.speeds >= 0)
    assert np.all(r.spacings >= 0.1)
    assert max(s.consistency_error(4.5) for s in r.states) <= 1e-9

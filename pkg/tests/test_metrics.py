from __future__ import annotations

import math

import numpy as np
import pytest

from svoacc.core import CALIBRATED_PARAMS, EmptyInputError, PlatoonState, ShapeError, SimConfig, TrajectorySeries
from svoacc.dynamics import IdmLaw, PlaybackLaw, equilibrium_spacing, rollout
from svoacc.ingest import reference_scenario
from svoacc.metrics import (
    NearZeroBaselineWarning,
    UndefinedBaselineError,
    average_speed,
    bar_rows,
    build_table,
    energy_indicator,
    format_phi,
    percent_change,
    write_plot_data,
)
from svoacc.training import u_self


def test_energy_indicator_is_u_self():
    assert energy_indicator is u_self
    assert energy_indicator(np.zeros(5), 0.1) == 0.0
    assert energy_indicator(np.ones(3), 1.0) == 1.5


def test_average_speed():
    assert average_speed(np.full(7, 2.0)) == 2.0
    assert average_speed([1, 3]) == 2.0
    assert average_speed([1.79] * 50 + [3.63] * 50) == pytest.approx(2.71, abs=1e-12)
    with pytest.raises(EmptyInputError):
        average_speed([])


def test_percent_change_headline_example():
    # 1.79 to 2.71 m/s, printed as 51.40 %
    assert percent_change(1.79, 2.71) == pytest.approx(51.40, abs=0.005)
    assert percent_change(2.0, 2.0) == 0.0
    with pytest.raises(UndefinedBaselineError):
        percent_change(0.0, 1.0)
    with pytest.raises(ZeroDivisionError):
        percent_change(0.0, 1.0)


def test_format_phi():
    assert format_phi(0.0) == "0"
    assert format_phi(math.pi / 4) == "pi/4"
    assert format_phi(math.pi / 2) == "pi/2"
    assert format_phi(0.3) == "0.3000"


@pytest.fixture
def rollouts():
    scenario = reference_scenario(duration=10.0)
    out = {}
    for phi, row in ((0.0, 3), (math.pi / 4, 4), (math.pi / 2, 5)):
        laws = [PlaybackLaw(scenario.leader), IdmLaw(CALIBRATED_PARAMS[row])] + \
               [IdmLaw(p) for p in scenario.follower_params]
        out[phi] = rollout(scenario.initial, laws, scenario.cfg)
    return out


def test_build_table_cells_and_percentages(rollouts):
    table = build_table(rollouts)
    assert table.vehicle_ids == (2, 3, 4, 5)
    assert table.phis == (0.0, math.pi / 4, math.pi / 2)
    for vid in table.vehicle_ids:
        base = table.cells[vid][0.0]
        assert table.energy_pct[vid][0.0] == 0.0
        assert table.speed_pct[vid][0.0] == 0.0
        for phi in table.phis:
            cell = table.cells[vid][phi]
            r = rollouts[phi]
            assert cell.energy == u_self(r.accelerations[vid - 1], r.dt)
            assert cell.avg_speed == float(np.mean(r.speeds[:, vid - 1]))
            # percentages are recomputable from the raw cells
            assert table.energy_pct[vid][phi] == pytest.approx(
                100 * (cell.energy - base.energy) / base.energy, abs=0.005)
            assert table.speed_pct[vid][phi] == pytest.approx(
                100 * (cell.avg_speed - base.avg_speed) / base.avg_speed, abs=0.005)
    text = table.to_text()
    assert "pi/4" in text and "%" in text
    assert table.to_csv().splitlines()[0] == "vehicle_id,phi,energy,avg_speed,energy_pct,speed_pct"
    assert len(bar_rows(table)) == 8


def test_single_phi_gives_zero_percentages(rollouts):
    table = build_table({0.0: rollouts[0.0]})
    assert all(v == 0.0 for row in table.energy_pct.values() for v in row.values())
    assert all(v == 0.0 for row in table.speed_pct.values() for v in row.values())


def test_near_zero_baseline_warns():
    # a constant-speed platoon has zero acceleration, hence a zero energy baseline
    cfg = SimConfig(horizon=2.0)
    p = CALIBRATED_PARAMS[5]
    lead = TrajectorySeries(1, cfg.dt, 0.0, np.full(cfg.n_steps + 1, 2.0))
    s_eq = equilibrium_spacing(p, 2.0)
    init = PlatoonState.from_spacings([2.0, 2.0, 2.0], [s_eq, s_eq], cfg.vehicle_length)
    flat = rollout(init, [PlaybackLaw(lead), IdmLaw(p), IdmLaw(p)], cfg)
    with pytest.warns(NearZeroBaselineWarning):
        table = build_table({0.0: flat, 1.0: flat})
    assert table.warnings
    assert "warning:" in table.to_text()


def test_build_table_errors(rollouts):
    with pytest.raises(EmptyInputError):
        build_table({})
    with pytest.raises(ShapeError):
        build_table({math.pi / 4: rollouts[math.pi / 4]})
    with pytest.raises(ShapeError):
        build_table(rollouts, vehicle_ids=(9,))


def test_write_plot_data(tmp_path, rollouts):
    table = build_table(rollouts)
    traj, bars = write_plot_data(rollouts, table, tmp_path)
    lines = traj.read_text().splitlines()
    assert lines[0] == "phi,time_s,vehicle_id,speed_mps,spacing_m"
    n_steps = len(rollouts[0.0].states)
    assert len(lines) == 1 + 3 * n_steps * 5
    assert len(bars.read_text().splitlines()) == 1 + 8

"""Grid-search calibration of follower IDM parameters against recorded spacing."""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, replace
from typing import List, Optional, Sequence, Tuple

import numpy as np
from joblib import Parallel, delayed

from .core import (
    ConfigurationError,
    EmptyInputError,
    IdmParams,
    PlatoonState,
    ShapeError,
    SimConfig,
    TrajectorySeries,
    check_finite_array,
    check_trajectory,
)
from .dynamics import IdmLaw, PlaybackLaw, euler_update, idm_accel_arrays, step

# Grid points are simulated in blocks of this size. The block boundaries do
# not depend on n_jobs, so serial and parallel runs do identical arithmetic.
CHUNK_SIZE = 1024


def _axis(start, stop, step_size):
    count = int(round((stop - start) / step_size)) + 1
    return tuple(float(x) for x in np.round(start + step_size * np.arange(count), 10))


@dataclass(frozen=True)
class GridSpec:
    v0: Tuple[float, ...] = (5.0,)
    a_max: Tuple[float, ...] = _axis(0.5, 2.0, 0.05)
    b: Tuple[float, ...] = _axis(0.5, 3.0, 0.25)
    s0: Tuple[float, ...] = (3.0,)
    tau: Tuple[float, ...] = (1.5,)
    delta: Tuple[float, ...] = _axis(1.0, 5.0, 0.25)

    def __post_init__(self):
        for name in IdmParams.FIELDS:
            values = tuple(float(x) for x in np.atleast_1d(getattr(self, name)))
            if not values:
                raise ConfigurationError(f"grid axis {name} is empty")
            arr = np.array(values)
            if not np.all(np.isfinite(arr)) or np.any(arr <= 0):
                raise ConfigurationError(f"grid axis {name} must hold finite positive values")
            if np.any(np.diff(arr) <= 0):
                raise ConfigurationError(f"grid axis {name} must be strictly ascending")
            object.__setattr__(self, name, values)

    @property
    def size(self) -> int:
        return math.prod(len(getattr(self, name)) for name in IdmParams.FIELDS)

    def points(self) -> np.ndarray:
        """All grid points, shape ``(size, 6)``, in lexicographic order."""
        axes = [getattr(self, name) for name in IdmParams.FIELDS]
        return np.array(list(itertools.product(*axes)), dtype=float).reshape(-1, 6)

    @classmethod
    def single(cls, params: IdmParams) -> "GridSpec":
        return cls(**{name: (value,) for name, value in params.as_dict().items()})


@dataclass(frozen=True)
class CalibrationReport:
    best_params: IdmParams
    rmse: float
    evaluated_count: int
    runner_ups: tuple = ()  # ((IdmParams, rmse), ...) in ranking order

    def __str__(self):
        lines = [f"{'rank':>4} " + " ".join(f"{n:>7}" for n in IdmParams.FIELDS) + f" {'rmse_m':>12}"]
        ranked = [(self.best_params, self.rmse)] + list(self.runner_ups)
        for rank, (p, r) in enumerate(ranked, start=1):
            lines.append(f"{rank:>4} " + " ".join(f"{x:7.3f}" for x in p.as_tuple()) + f" {r:12.6g}")
        lines.append(f"evaluated {self.evaluated_count} grid points")
        return "\n".join(lines)

    def as_dict(self) -> dict:
        out = {name: value for name, value in self.best_params.as_dict().items()}
        out["rmse"] = self.rmse
        out["evaluated_count"] = self.evaluated_count
        return out


def spacing_rmse(predicted, actual) -> float:
    predicted = check_finite_array(predicted, "predicted")
    actual = check_finite_array(actual, "actual")
    if len(predicted) != len(actual):
        raise ShapeError(f"predicted and actual differ in length ({len(predicted)} vs {len(actual)})")
    if len(predicted) == 0:
        raise EmptyInputError("spacing_rmse needs at least one sample")
    return float(np.sqrt(np.mean((predicted - actual) ** 2)))


def _follower_config(lead: TrajectorySeries, cfg: SimConfig) -> SimConfig:
    if not math.isclose(lead.dt, cfg.dt, rel_tol=1e-9):
        raise ConfigurationError(f"lead series dt {lead.dt} differs from simulation dt {cfg.dt}")
    return replace(cfg, horizon=(len(lead) - 1) * cfg.dt)


def simulate_follower(params: IdmParams, lead: TrajectorySeries, initial_state, cfg: SimConfig) -> np.ndarray:
    """Spacing of one IDM follower driven behind the recorded leader.

    ``initial_state`` is the follower's ``(speed, spacing)`` at the first lead
    sample. The returned array has one entry per lead timestamp.
    """
    check_trajectory(lead)
    v_init, s_init = (float(x) for x in initial_state)
    if not s_init >= cfg.min_spacing_floor:
        raise ConfigurationError("initial spacing is below the spacing floor")
    sim_cfg = _follower_config(lead, cfg)
    state = PlatoonState.from_spacings([lead.speeds[0], v_init], [s_init],
                                       cfg.vehicle_length, time=lead.t0)
    laws = [PlaybackLaw(lead), IdmLaw(params)]
    out = [state.spacings[0]]
    for _ in range(sim_cfg.n_steps):
        state = step(state, laws, sim_cfg)
        out.append(state.spacings[0])
    return np.array(out)


def _chunk_rmse(points: np.ndarray, lead_speeds: np.ndarray, actual: np.ndarray,
                v_init: float, s_init: float, dt: float, floor: float) -> np.ndarray:
    """Spacing RMSE for a block of grid points, all simulated together."""
    g = len(points)
    params = tuple(points[:, j] for j in range(6))
    v = np.empty((g, 2))
    v[:, 0] = lead_speeds[0]
    v[:, 1] = v_init
    s = np.full((g, 1), s_init)
    sq = (s[:, 0] - actual[0]) ** 2
    accels = np.zeros((g, 2))
    for k in range(len(lead_speeds) - 1):
        accels[:, 1] = idm_accel_arrays(params, v[:, 1], v[:, 0], s[:, 0])
        v, s, _ = euler_update(v, s, accels, lead_speeds[k + 1], dt, floor)
        sq = sq + (s[:, 0] - actual[k + 1]) ** 2
    return np.sqrt(sq / len(actual))


def _check_aligned(lead: TrajectorySeries, follower: TrajectorySeries):
    check_trajectory(lead)
    check_trajectory(follower)
    if follower.spacings is None:
        raise ConfigurationError("the follower series must carry spacings")
    if len(lead) != len(follower):
        raise ShapeError("lead and follower series differ in length")
    if not (math.isclose(lead.dt, follower.dt, rel_tol=1e-9)
            and math.isclose(lead.t0, follower.t0, rel_tol=0, abs_tol=1e-9 * lead.dt)):
        raise ConfigurationError("lead and follower series are not time-aligned")


def grid_search_calibrate(grid: GridSpec, lead: TrajectorySeries, follower_observed: TrajectorySeries,
                          cfg: SimConfig, n_jobs: int = 1, top_k: int = 5) -> CalibrationReport:
    """Exhaustive search for the grid point with the smallest spacing RMSE.

    Ties go to the lexicographically smallest ``(v0, a_max, b, s0, tau,
    delta)``. The winner and runner-ups are re-simulated one by one with
    :func:`simulate_follower`, and those values are what the report holds.
    """
    if grid is None or grid.size == 0:
        raise ConfigurationError("empty calibration grid")
    _check_aligned(lead, follower_observed)
    _follower_config(lead, cfg)
    actual = np.asarray(follower_observed.spacings, dtype=float)
    v_init, s_init = float(follower_observed.speeds[0]), float(actual[0])
    if not s_init >= cfg.min_spacing_floor:
        raise ConfigurationError("initial spacing is below the spacing floor")

    points = grid.points()
    lead_speeds = np.asarray(lead.speeds, dtype=float)
    chunks = [points[i:i + CHUNK_SIZE] for i in range(0, len(points), CHUNK_SIZE)]
    args = (lead_speeds, actual, v_init, s_init, cfg.dt, cfg.min_spacing_floor)
    if n_jobs == 1 or len(chunks) == 1:
        parts = [_chunk_rmse(c, *args) for c in chunks]
    else:
        parts = Parallel(n_jobs=n_jobs)(delayed(_chunk_rmse)(c, *args) for c in chunks)
    batch = np.concatenate(parts)
    batch = np.where(np.isfinite(batch), batch, np.inf)

    # Shortlist from the batched values, then rank on exact single rollouts so
    # that last-ulp differences between the two paths cannot reorder near ties.
    order = np.lexsort((np.arange(len(batch)), batch))
    want = min(len(batch), top_k + 1)
    cutoff = batch[order[want - 1]]
    shortlist = [int(i) for i in order if batch[i] <= cutoff * (1 + 1e-9) + 1e-12]
    ranked = []
    for i in shortlist:
        p = IdmParams(*points[i])
        try:
            r = spacing_rmse(simulate_follower(p, lead, (v_init, s_init), cfg), actual)
        except ConfigurationError:
            r = math.inf
        ranked.append((r, p.as_tuple(), p))
    ranked.sort(key=lambda item: (item[0], item[1]))
    best_rmse, _, best = ranked[0]
    runner_ups = tuple((p, r) for r, _, p in ranked[1:top_k + 1])
    return CalibrationReport(best, best_rmse, len(points), runner_ups)


def calibrate_platoon(grid: GridSpec, series_list: Sequence[TrajectorySeries], cfg: SimConfig,
                      n_jobs: int = 1) -> List[CalibrationReport]:
    """Calibrate every vehicle against its predecessor's recorded speed."""
    if len(series_list) < 2:
        raise ConfigurationError("need at least a leader and one follower")
    return [grid_search_calibrate(grid, series_list[i - 1], series_list[i], cfg, n_jobs)
            for i in range(1, len(series_list))]

"""Trajectory CSV loading, resampling, smoothing and synthetic scenarios."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Union

import numpy as np

from .core import (
    DEFAULT_DT,
    DEFAULT_MIN_SPACING,
    DEFAULT_VEHICLE_LENGTH,
    CALIBRATED_PARAMS,
    ConfigurationError,
    IdmParams,
    ParseError,
    PlatoonState,
    SimConfig,
    TrajectorySeries,
    check_trajectory,
    validate_trajectory,
)
from .dynamics import IdmLaw, PlaybackLaw, RolloutResult, equilibrium_spacing, rollout

CSV_COLUMNS = ("time_s", "vehicle_id", "speed_mps", "spacing_m")


# CSV -----------------------------------------------------------------------

def _parse_float(text, row, column):
    try:
        value = float(text)
    except ValueError:
        raise ParseError(f"column {column}: cannot parse {text!r} as a number", row) from None
    if not math.isfinite(value):
        raise ParseError(f"column {column}: non-finite value {text!r}", row)
    return value


def _round_dt(dt: float) -> float:
    # undo the rounding noise of differencing absolute time stamps
    return float(f"{dt:.12g}")


def load_csv(path, resample_dt: Optional[float] = None, rel_tol: float = 1e-6) -> List[TrajectorySeries]:
    """Read a platoon CSV into one validated series per vehicle, sorted by id.

    Rows must be grouped by vehicle with ascending time. Non-uniform sampling
    raises :class:`ParseError` naming the offending row unless
    ``resample_dt`` is given, in which case each vehicle is linearly
    interpolated onto ``t0 + k * resample_dt``.
    """
    path = Path(path)
    groups = {}
    order = []
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise ParseError("empty file", 1) from None
        missing = [c for c in CSV_COLUMNS if c not in header]
        if missing:
            raise ParseError(f"missing columns: {', '.join(missing)}", 1)
        col = {c: header.index(c) for c in CSV_COLUMNS}
        for row_no, row in enumerate(reader, start=2):
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) < len(header):
                raise ParseError(f"expected {len(header)} fields, got {len(row)}", row_no)
            t = _parse_float(row[col["time_s"]], row_no, "time_s")
            try:
                vid = int(row[col["vehicle_id"]])
            except ValueError:
                raise ParseError(f"vehicle_id {row[col['vehicle_id']]!r} is not an integer", row_no) from None
            v = _parse_float(row[col["speed_mps"]], row_no, "speed_mps")
            s_text = row[col["spacing_m"]].strip()
            s = None if s_text == "" else _parse_float(s_text, row_no, "spacing_m")
            if vid in groups and order[-1] != vid:
                raise ParseError(f"rows of vehicle {vid} are not contiguous", row_no)
            if vid not in groups:
                groups[vid] = []
                order.append(vid)
            groups[vid].append((row_no, t, v, s))

    series = []
    for vid in sorted(groups):
        series.append(_group_to_series(vid, groups[vid], resample_dt, rel_tol))
    return series


def _group_to_series(vid, rows, resample_dt, rel_tol):
    times = np.array([r[1] for r in rows])
    speeds = np.array([r[2] for r in rows])
    has_spacing = [r[3] is not None for r in rows]
    if any(has_spacing) and not all(has_spacing):
        bad = rows[has_spacing.index(not has_spacing[0])][0]
        raise ParseError(f"vehicle {vid}: spacing_m present on some rows only", bad)
    spacings = np.array([r[3] for r in rows]) if has_spacing[0] else None
    if len(rows) < 2:
        raise ParseError(f"vehicle {vid} has fewer than 2 samples", rows[0][0])
    diffs = np.diff(times)
    nonmono = np.flatnonzero(diffs <= 0)
    if nonmono.size:
        raise ParseError(f"vehicle {vid}: time is not strictly increasing", rows[nonmono[0] + 1][0])
    if resample_dt is None:
        dt = _round_dt(diffs[0])
        off = np.flatnonzero(np.abs(diffs - dt) > rel_tol * max(dt, 1.0))
        if off.size:
            raise ParseError(f"vehicle {vid}: non-uniform sampling (gap of {diffs[off[0]]!r} s, "
                             f"expected {dt!r} s)", rows[off[0] + 1][0])
        out = TrajectorySeries(vid, dt, float(times[0]), speeds, spacings)
    else:
        dt = float(resample_dt)
        grid = _grid(times[0], times[-1] - times[0], dt)
        out = TrajectorySeries(vid, dt, float(times[0]), np.interp(grid, times, speeds),
                               None if spacings is None else np.interp(grid, times, spacings))
    result = validate_trajectory(out)
    if not result.ok:
        raise ParseError(f"vehicle {vid}: {result}", rows[0][0])
    return out


def save_csv(path, series_list: Sequence[TrajectorySeries]) -> Path:
    """Write series in the schema :func:`load_csv` reads; floats round-trip exactly."""
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        for s in sorted(series_list, key=lambda s: s.vehicle_id):
            for k in range(len(s.speeds)):
                spacing = "" if s.spacings is None else repr(float(s.spacings[k]))
                writer.writerow([repr(float(s.t0 + k * s.dt)), s.vehicle_id,
                                 repr(float(s.speeds[k])), spacing])
    return path


# resampling / smoothing ----------------------------------------------------

def _grid(t0, span, dt):
    n = int(math.floor(span / dt + 1e-9)) + 1
    return t0 + np.arange(n) * dt


def resample(series: TrajectorySeries, dt_out: float) -> TrajectorySeries:
    """Linear interpolation onto ``t0 + k * dt_out`` within the original span."""
    if not (math.isfinite(dt_out) and dt_out > 0):
        raise ConfigurationError("dt_out must be > 0")
    if len(series.speeds) < 2:
        raise ConfigurationError("need at least 2 samples to resample")
    if dt_out == series.dt:
        return series
    span = series.duration
    if dt_out >= span:
        raise ConfigurationError(f"dt_out {dt_out} >= series span {span}: degenerate output")
    src = np.arange(len(series.speeds)) * series.dt
    grid = _grid(0.0, span, dt_out)
    grid[-1] = min(grid[-1], src[-1])

    def interp(values):
        return None if values is None else np.interp(grid, src, values)

    return TrajectorySeries(series.vehicle_id, float(dt_out), series.t0,
                            interp(series.speeds), interp(series.spacings))


def _moving_average(values, window):
    half = window // 2
    csum = np.concatenate([[0.0], np.cumsum(values)])
    n = len(values)
    lo = np.maximum(np.arange(n) - half, 0)
    hi = np.minimum(np.arange(n) + half + 1, n)
    return (csum[hi] - csum[lo]) / (hi - lo)


def smooth(series: TrajectorySeries, window: int) -> TrajectorySeries:
    """Centred moving average; edge samples average the part of the window that exists."""
    if int(window) != window or window < 1 or window % 2 == 0:
        raise ConfigurationError(f"window must be a positive odd integer, got {window!r}")
    if window > len(series.speeds):
        raise ConfigurationError("window longer than the series")
    window = int(window)
    if window == 1:
        return series
    spacings = None if series.spacings is None else _moving_average(series.spacings, window)
    return TrajectorySeries(series.vehicle_id, series.dt, series.t0,
                            _moving_average(series.speeds, window), spacings)


# synthetic scenarios -------------------------------------------------------

@dataclass(frozen=True)
class Sinusoid:
    """Leader speed ``mean - amplitude * cos(2 pi t / period + phase)``.

    ``phase = 0`` starts in the trough, ``phase = pi`` on the crest.
    """

    mean: float = 2.5
    amplitude: float = 1.5
    period: float = 60.0
    phase: float = 0.0

    def speeds(self, times):
        return self.mean - self.amplitude * np.cos(2.0 * math.pi * np.asarray(times) / self.period + self.phase)


@dataclass(frozen=True)
class Piecewise:
    segments: tuple  # ((duration_s, speed_mps), ...)

    def speeds(self, times):
        ends = np.cumsum([d for d, _ in self.segments])
        values = np.array([v for _, v in self.segments], dtype=float)
        idx = np.minimum(np.searchsorted(ends, times, side="right"), len(values) - 1)
        return values[idx]


@dataclass(frozen=True)
class CsvProfile:
    path: str
    vehicle_id: int = 1


DEFAULT_AV_PARAMS = CALIBRATED_PARAMS[3]


@dataclass(frozen=True)
class ScenarioSpec:
    n_vehicles: int = 5
    leader: Union[Sinusoid, Piecewise, CsvProfile] = Sinusoid()
    initial_spacings: Optional[tuple] = None
    follower_params: tuple = (CALIBRATED_PARAMS[3], CALIBRATED_PARAMS[4], CALIBRATED_PARAMS[5])
    av_params: IdmParams = DEFAULT_AV_PARAMS
    duration: float = 120.0
    dt: float = DEFAULT_DT
    seed: int = 0
    leader_noise: float = 0.0
    vehicle_length: float = DEFAULT_VEHICLE_LENGTH
    min_spacing_floor: float = DEFAULT_MIN_SPACING

    def validate(self) -> "ScenarioSpec":
        if self.n_vehicles < 2:
            raise ConfigurationError("n_vehicles must be >= 2")
        if not (math.isfinite(self.duration) and self.duration > 0):
            raise ConfigurationError("duration must be > 0")
        if not (math.isfinite(self.dt) and 0 < self.dt <= self.duration):
            raise ConfigurationError("dt must be in (0, duration]")
        if self.leader_noise < 0:
            raise ConfigurationError("leader_noise must be >= 0")
        if isinstance(self.leader, Sinusoid):
            if self.leader.amplitude < 0 or self.leader.amplitude > self.leader.mean:
                raise ConfigurationError("sinusoid amplitude must lie in [0, mean]")
            if self.leader.period <= 0:
                raise ConfigurationError("sinusoid period must be > 0")
        elif isinstance(self.leader, Piecewise):
            if not self.leader.segments or any(d <= 0 or v < 0 for d, v in self.leader.segments):
                raise ConfigurationError("piecewise segments need positive durations and non-negative speeds")
        elif not isinstance(self.leader, CsvProfile):
            raise ConfigurationError(f"unknown leader profile {self.leader!r}")
        if len(self.follower_params) != max(self.n_vehicles - 2, 0):
            raise ConfigurationError(f"need {self.n_vehicles - 2} follower parameter sets, "
                                     f"got {len(self.follower_params)}")
        if self.initial_spacings is not None:
            if len(self.initial_spacings) != self.n_vehicles - 1:
                raise ConfigurationError(f"need {self.n_vehicles - 1} initial spacings")
            if any(not (s >= self.min_spacing_floor) for s in self.initial_spacings):
                raise ConfigurationError("initial spacings must be >= the spacing floor")
        return self

    @property
    def sim_config(self) -> SimConfig:
        return SimConfig(dt=self.dt, horizon=self.duration, vehicle_length=self.vehicle_length,
                         min_spacing_floor=self.min_spacing_floor)


@dataclass(frozen=True, eq=False)
class Scenario:
    """Everything a training or evaluation rollout needs.

    Unpacks as ``(leader, initial, follower_params, a_true)``.
    """

    leader: TrajectorySeries
    initial: PlatoonState
    follower_params: tuple
    a_true: np.ndarray
    cfg: SimConfig
    reference: Optional[RolloutResult] = None

    def __iter__(self):
        return iter((self.leader, self.initial, self.follower_params, self.a_true))

    @property
    def n_vehicles(self) -> int:
        return self.initial.n_vehicles

    def series(self) -> List[TrajectorySeries]:
        """Per-vehicle records of the reference rollout (the CSV content)."""
        if self.reference is None:
            raise ConfigurationError("scenario has no reference rollout")
        speeds, spacings = self.reference.speeds, self.reference.spacings
        out = [TrajectorySeries(1, self.cfg.dt, self.initial.time, speeds[:, 0])]
        for i in range(1, self.n_vehicles):
            out.append(TrajectorySeries(i + 1, self.cfg.dt, self.initial.time,
                                        speeds[:, i], spacings[:, i - 1]))
        return out


def _leader_speeds(spec: ScenarioSpec, n_samples: int):
    times = np.arange(n_samples) * spec.dt
    if isinstance(spec.leader, CsvProfile):
        series = {s.vehicle_id: s for s in load_csv(spec.leader.path, resample_dt=spec.dt)}
        if spec.leader.vehicle_id not in series:
            raise ConfigurationError(f"vehicle {spec.leader.vehicle_id} not in {spec.leader.path}")
        v = np.asarray(series[spec.leader.vehicle_id].speeds)
        if len(v) < n_samples:
            raise ConfigurationError("leader CSV is shorter than the requested duration")
        v = v[:n_samples].copy()
    else:
        v = spec.leader.speeds(times)
    if spec.leader_noise > 0:
        rng = np.random.default_rng(spec.seed)
        v = v + rng.normal(0.0, spec.leader_noise, size=n_samples)
    return np.maximum(v, 0.0)


def _default_spacings(spec: ScenarioSpec, v_init: float):
    params = (spec.av_params,) + tuple(spec.follower_params)
    return tuple(max(equilibrium_spacing(p, v_init), spec.min_spacing_floor) for p in params)


def gen_synthetic(spec: ScenarioSpec) -> Scenario:
    """Deterministic scenario: played-back leader, IDM in every other slot.

    The vehicle-2 slot is driven by ``spec.av_params``; its realised
    acceleration (finite difference of its speed record) is the imitation
    target ``a_true``.
    """
    spec.validate()
    cfg = spec.sim_config
    n_steps = cfg.n_steps
    v_lead = _leader_speeds(spec, n_steps + 1)
    leader = check_trajectory(TrajectorySeries(1, spec.dt, 0.0, v_lead))
    v_init = float(v_lead[0])
    spacings = spec.initial_spacings or _default_spacings(spec, v_init)
    if spec.n_vehicles == 2:
        spacings = spacings[:1]
    initial = PlatoonState.from_spacings([v_init] * spec.n_vehicles, spacings, cfg.vehicle_length)
    params = (spec.av_params,) + tuple(spec.follower_params)
    laws = [PlaybackLaw(leader)] + [IdmLaw(p) for p in params[: spec.n_vehicles - 1]]
    ref = rollout(initial, laws, cfg)
    a_true = np.diff(ref.speeds[:, 1]) / cfg.dt if spec.n_vehicles > 1 else np.zeros(n_steps)
    a_true.setflags(write=False)
    return Scenario(leader, initial, tuple(spec.follower_params), a_true, cfg, ref)


def reference_spec(**overrides) -> ScenarioSpec:
    """The bundled five-vehicle reference scenario."""
    return ScenarioSpec(**overrides).validate()


def reference_scenario(**overrides) -> Scenario:
    return gen_synthetic(reference_spec(**overrides))


def scenario_from_series(series_list: Sequence[TrajectorySeries], follower_params: Sequence[IdmParams],
                         vehicle_length: float = DEFAULT_VEHICLE_LENGTH,
                         min_spacing_floor: float = DEFAULT_MIN_SPACING,
                         duration: Optional[float] = None) -> Scenario:
    """Build a scenario from recorded platoon data (vehicle 1 leads, vehicle 2 is the AV slot).

    ``a_true`` is the finite-difference acceleration of vehicle 2's record.
    """
    series_list = sorted(series_list, key=lambda s: s.vehicle_id)
    if len(series_list) < 2:
        raise ConfigurationError("need at least two vehicles")
    dt, t0 = series_list[0].dt, series_list[0].t0
    n = min(len(s.speeds) for s in series_list)
    for s in series_list:
        check_trajectory(s)
        if s.dt != dt or s.t0 != t0:
            raise ConfigurationError("all vehicles must share dt and start time")
    for s in series_list[1:]:
        if s.spacings is None:
            raise ConfigurationError(f"vehicle {s.vehicle_id} lacks spacings")
    if len(follower_params) != len(series_list) - 2:
        raise ConfigurationError(f"need {len(series_list) - 2} follower parameter sets")
    horizon = (n - 1) * dt if duration is None else duration
    cfg = SimConfig(dt=dt, horizon=horizon, vehicle_length=vehicle_length,
                    min_spacing_floor=min_spacing_floor)
    leader = series_list[0]
    speeds = [float(s.speeds[0]) for s in series_list]
    spacings = [float(s.spacings[0]) for s in series_list[1:]]
    initial = PlatoonState.from_spacings(speeds, spacings, vehicle_length, time=t0)
    a_true = np.diff(np.asarray(series_list[1].speeds[: cfg.n_steps + 1])) / dt
    a_true.setflags(write=False)
    return Scenario(leader, initial, tuple(follower_params), a_true, cfg,
                    _recorded_rollout(series_list, cfg.n_steps + 1, cfg))


def _recorded_rollout(series_list, n_samples, cfg: SimConfig) -> RolloutResult:
    """Wrap recorded data as a rollout so it can serve as the scenario reference."""
    speeds = np.column_stack([np.asarray(s.speeds[:n_samples]) for s in series_list])
    spacings = np.column_stack([np.asarray(s.spacings[:n_samples]) for s in series_list[1:]])
    t0 = series_list[0].t0
    leader_x = np.concatenate([[0.0], np.cumsum(speeds[:-1, 0]) * cfg.dt])
    states = tuple(PlatoonState.from_spacings(speeds[k], spacings[k], cfg.vehicle_length,
                                              leader_x[k], t0 + k * cfg.dt)
                   for k in range(n_samples))
    accels = (np.diff(speeds, axis=0) / cfg.dt).T
    accels.setflags(write=False)
    return RolloutResult(states, accels)

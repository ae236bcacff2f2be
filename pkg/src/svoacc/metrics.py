"""Per-vehicle energy and speed summaries and percentage-change tables across SVO angles."""
from __future__ import annotations

import csv
import io
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional

import numpy as np

from .core import EmptyInputError, ShapeError, SvoAccError, as_phi, check_finite_array
from .dynamics import RolloutResult
from .training import u_self

# Baselines smaller than this make percentages meaningless.
NEAR_ZERO_BASELINE = 1e-3

energy_indicator = u_self


class UndefinedBaselineError(SvoAccError, ZeroDivisionError):
    pass


class NearZeroBaselineWarning(UserWarning):
    pass


def average_speed(v) -> float:
    v = check_finite_array(v, "speeds")
    if v.size == 0:
        raise EmptyInputError("average_speed needs at least one sample")
    return float(np.mean(v))


def percent_change(baseline: float, value: float) -> float:
    baseline, value = float(baseline), float(value)
    if baseline == 0:
        raise UndefinedBaselineError("percentage change relative to a zero baseline is undefined")
    return 100.0 * (value - baseline) / baseline


def format_phi(phi: float) -> str:
    """Short label such as ``0``, ``pi/4`` or ``0.3000``."""
    for num, den in ((0, 1), (1, 6), (1, 4), (1, 3), (1, 2)):
        if math.isclose(phi, num * math.pi / den, rel_tol=0, abs_tol=1e-12):
            return "0" if num == 0 else f"pi/{den}"
    return f"{phi:.4f}"


@dataclass(frozen=True)
class Cell:
    energy: float
    avg_speed: float


@dataclass
class EvaluationTable:
    """Raw cells ``cells[vehicle_id][phi]`` plus percentages against ``baseline_phi``.

    A percentage is ``None`` when its baseline is exactly zero.
    """

    phis: tuple
    baseline_phi: float
    vehicle_ids: tuple
    cells: Dict[int, Dict[float, Cell]]
    energy_pct: Dict[int, Dict[float, Optional[float]]] = field(default_factory=dict)
    speed_pct: Dict[int, Dict[float, Optional[float]]] = field(default_factory=dict)
    warnings: List[str] = field(default_factory=list)

    def rows(self) -> List[dict]:
        """One flat record per (vehicle, phi)."""
        out = []
        for vid in self.vehicle_ids:
            for phi in self.phis:
                cell = self.cells[vid][phi]
                out.append({
                    "vehicle_id": vid,
                    "phi": phi,
                    "phi_label": format_phi(phi),
                    "energy": cell.energy,
                    "avg_speed": cell.avg_speed,
                    "energy_pct": self.energy_pct[vid][phi],
                    "speed_pct": self.speed_pct[vid][phi],
                })
        return out

    def to_text(self) -> str:
        def pct(x):
            return "undefined" if x is None else f"{x:+.2f}%"

        header = f"{'vehicle':>7} {'phi':>6} {'energy':>12} {'avg_speed':>10} {'energy_chg':>12} {'speed_chg':>10}"
        lines = [header]
        for r in self.rows():
            lines.append(f"{r['vehicle_id']:>7} {r['phi_label']:>6} {r['energy']:12.4f} {r['avg_speed']:10.4f} "
                         f"{pct(r['energy_pct']):>12} {pct(r['speed_pct']):>10}")
        for w in self.warnings:
            lines.append(f"warning: {w}")
        return "\n".join(lines)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["vehicle_id", "phi", "energy", "avg_speed", "energy_pct", "speed_pct"])
        for r in self.rows():
            writer.writerow([r["vehicle_id"], repr(r["phi"]), repr(r["energy"]), repr(r["avg_speed"]),
                             "" if r["energy_pct"] is None else repr(r["energy_pct"]),
                             "" if r["speed_pct"] is None else repr(r["speed_pct"])])
        return buf.getvalue()


def _pct_or_none(baseline, value):
    try:
        return percent_change(baseline, value)
    except UndefinedBaselineError:
        return None


def build_table(rollouts: Mapping[float, RolloutResult], baseline_phi=0.0,
                vehicle_ids: Optional[tuple] = None) -> EvaluationTable:
    """Summarise controlled vehicles (ids 2..n by default; the leader is id 1)."""
    if not rollouts:
        raise EmptyInputError("no rollouts to tabulate")
    by_phi = {as_phi(p): r for p, r in rollouts.items()}
    phis = tuple(sorted(by_phi))
    base = as_phi(baseline_phi)
    if base not in by_phi:
        raise ShapeError(f"baseline phi {base!r} has no rollout")
    shapes = {(r.accelerations.shape, len(r.states)) for r in by_phi.values()}
    if len(shapes) != 1:
        raise ShapeError("rollouts differ in horizon or platoon size")
    n = next(iter(by_phi.values())).n_vehicles
    if vehicle_ids is None:
        vehicle_ids = tuple(range(2, n + 1))

    cells: Dict[int, Dict[float, Cell]] = {}
    for vid in vehicle_ids:
        if not 1 <= vid <= n:
            raise ShapeError(f"vehicle id {vid} outside 1..{n}")
        cells[vid] = {}
        for phi in phis:
            r = by_phi[phi]
            cells[vid][phi] = Cell(energy_indicator(r.accelerations[vid - 1], r.dt),
                                   average_speed(r.speeds[:, vid - 1]))

    table = EvaluationTable(phis, base, tuple(vehicle_ids), cells)
    for vid in vehicle_ids:
        b = cells[vid][base]
        for name, value in (("energy", b.energy), ("avg_speed", b.avg_speed)):
            if abs(value) < NEAR_ZERO_BASELINE:
                msg = (f"vehicle {vid}: baseline {name} {value:.3g} is below {NEAR_ZERO_BASELINE:g}; "
                       f"percentages are unstable")
                table.warnings.append(msg)
                warnings.warn(msg, NearZeroBaselineWarning, stacklevel=2)
        table.energy_pct[vid] = {phi: _pct_or_none(b.energy, cells[vid][phi].energy) for phi in phis}
        table.speed_pct[vid] = {phi: _pct_or_none(b.avg_speed, cells[vid][phi].avg_speed) for phi in phis}
    return table


def trajectory_rows(rollouts: Mapping[float, RolloutResult]) -> List[list]:
    """Long-format ``phi, time, vehicle_id, speed, spacing`` rows for trajectory plots."""
    out = []
    for phi in sorted(rollouts):
        r = rollouts[phi]
        speeds, spacings, times = r.speeds, r.spacings, r.times
        for k, t in enumerate(times):
            for i in range(speeds.shape[1]):
                s = spacings[k, i - 1] if i > 0 else float("nan")
                out.append([phi, t, i + 1, speeds[k, i], s])
    return out


def bar_rows(table: EvaluationTable) -> List[list]:
    """``vehicle_id, phi, energy_pct, speed_pct`` rows for grouped bar charts."""
    return [[r["vehicle_id"], r["phi_label"], r["energy_pct"], r["speed_pct"]] for r in table.rows()
            if r["phi"] != table.baseline_phi]


def write_plot_data(rollouts: Mapping[float, RolloutResult], table: EvaluationTable, out_dir) -> List[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    traj = out_dir / "trajectories.csv"
    with traj.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["phi", "time_s", "vehicle_id", "speed_mps", "spacing_m"])
        for row in trajectory_rows(rollouts):
            writer.writerow([repr(float(x)) if isinstance(x, (float, np.floating)) else x for x in row])
    bars = out_dir / "bars.csv"
    with bars.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["vehicle_id", "phi", "energy_pct", "speed_pct"])
        for vid, label, e, s in bar_rows(table):
            writer.writerow([vid, label, "" if e is None else repr(e), "" if s is None else repr(s)])
    return [traj, bars]

"""Shared domain types, defaults and validation helpers."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

DEFAULT_DT = 0.1
DEFAULT_VEHICLE_LENGTH = 4.5
DEFAULT_MIN_SPACING = 0.1
CONSISTENCY_TOL = 1e-9


class SvoAccError(Exception):
    """Base class for errors raised by this package."""


class ConfigurationError(SvoAccError, ValueError):
    pass


class ShapeError(SvoAccError, ValueError):
    pass


class ParameterError(SvoAccError, ValueError):
    pass


class EmptyInputError(SvoAccError, ValueError):
    pass


class PlaybackExhaustedError(SvoAccError, IndexError):
    pass


class ParseError(SvoAccError, ValueError):
    def __init__(self, message: str, row: Optional[int] = None):
        if row is not None:
            message = f"row {row}: {message}"
        super().__init__(message)
        self.row = row


class FormatError(SvoAccError, ValueError):
    pass


class DivergenceError(SvoAccError, ArithmeticError):
    def __init__(self, epoch: int, message: str = "non-finite loss"):
        super().__init__(f"epoch {epoch}: {message}")
        self.epoch = epoch


def _as_readonly(values, dtype=float) -> np.ndarray:
    arr = np.array(values, dtype=dtype)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class TrajectorySeries:
    """Uniformly sampled speed (and spacing) record of one vehicle.

    ``spacings`` is the gap to the predecessor's rear bumper and is ``None``
    for the platoon leader. Construction does not validate; call
    :func:`validate_trajectory` or :func:`check_trajectory`.
    """

    vehicle_id: int
    dt: float
    t0: float
    speeds: np.ndarray
    spacings: Optional[np.ndarray] = None

    def __post_init__(self):
        object.__setattr__(self, "speeds", _as_readonly(self.speeds))
        if self.spacings is not None:
            object.__setattr__(self, "spacings", _as_readonly(self.spacings))

    def __len__(self):
        return len(self.speeds)

    @property
    def times(self) -> np.ndarray:
        return self.t0 + np.arange(len(self.speeds)) * self.dt

    @property
    def duration(self) -> float:
        return (len(self.speeds) - 1) * self.dt

    def __eq__(self, other):
        if not isinstance(other, TrajectorySeries):
            return NotImplemented
        if (self.vehicle_id, self.dt, self.t0) != (other.vehicle_id, other.dt, other.t0):
            return False
        if (self.spacings is None) != (other.spacings is None):
            return False
        same = np.array_equal(self.speeds, other.speeds)
        if self.spacings is not None:
            same = same and np.array_equal(self.spacings, other.spacings)
        return bool(same)

    __hash__ = None


@dataclass(frozen=True)
class Violation:
    rule: str
    index: Optional[int] = None

    def __str__(self):
        return self.rule if self.index is None else f"{self.rule} (index {self.index})"


@dataclass(frozen=True)
class ValidationResult:
    violations: tuple = ()

    @property
    def ok(self) -> bool:
        return not self.violations

    def __bool__(self):
        return self.ok

    def __str__(self):
        return "ok" if self.ok else "; ".join(str(v) for v in self.violations)


def _first_bad(mask: np.ndarray) -> Optional[int]:
    idx = np.flatnonzero(mask)
    return int(idx[0]) if idx.size else None


def validate_trajectory(series: TrajectorySeries) -> ValidationResult:
    """Check every ``TrajectorySeries`` invariant.

    Never raises on numeric content: NaN and infinities are reported as
    violations, with the index of the first offending sample.
    """
    out = []
    try:
        dt = float(series.dt)
    except (TypeError, ValueError):
        dt = math.nan
    if not math.isfinite(dt):
        out.append(Violation("dt finite"))
    elif not dt > 0:
        out.append(Violation("dt > 0"))
    try:
        t0_ok = math.isfinite(float(series.t0))
    except (TypeError, ValueError):
        t0_ok = False
    if not t0_ok:
        out.append(Violation("t0 finite"))

    speeds = np.asarray(series.speeds, dtype=float).ravel()
    if len(speeds) < 2:
        out.append(Violation("length >= 2"))
    bad = _first_bad(~np.isfinite(speeds))
    if bad is not None:
        out.append(Violation("speeds finite", bad))
    with np.errstate(invalid="ignore"):
        bad = _first_bad(speeds < 0)
    if bad is not None:
        out.append(Violation("all speeds >= 0", bad))

    if series.spacings is not None:
        spacings = np.asarray(series.spacings, dtype=float).ravel()
        if len(spacings) != len(speeds):
            out.append(Violation("speeds and spacings have equal length"))
        bad = _first_bad(~np.isfinite(spacings))
        if bad is not None:
            out.append(Violation("spacings finite", bad))
        with np.errstate(invalid="ignore"):
            bad = _first_bad(spacings <= 0)
        if bad is not None:
            out.append(Violation("all spacings > 0", bad))
    return ValidationResult(tuple(out))


def check_trajectory(series: TrajectorySeries) -> TrajectorySeries:
    """Return ``series`` unchanged or raise :class:`ConfigurationError`."""
    result = validate_trajectory(series)
    if not result.ok:
        raise ConfigurationError(f"invalid trajectory for vehicle {series.vehicle_id}: {result}")
    return series


@dataclass(frozen=True)
class PlatoonState:
    """Positions, speeds and spacings of an ``n``-vehicle platoon.

    Index 0 is the leader. ``spacings[i - 1]`` is the gap in front of
    vehicle ``i``, so ``len(spacings) == n - 1``.
    """

    time: float
    positions: np.ndarray
    speeds: np.ndarray
    spacings: np.ndarray

    def __post_init__(self):
        for name in ("positions", "speeds", "spacings"):
            object.__setattr__(self, name, _as_readonly(getattr(self, name)))

    @property
    def n_vehicles(self) -> int:
        return len(self.speeds)

    @classmethod
    def from_spacings(cls, speeds, spacings, vehicle_length=DEFAULT_VEHICLE_LENGTH,
                      leader_position=0.0, time=0.0) -> "PlatoonState":
        speeds = np.asarray(speeds, dtype=float)
        spacings = np.asarray(spacings, dtype=float)
        positions = reconcile_positions(leader_position, spacings, vehicle_length)
        return cls(time, positions, speeds, spacings)

    def consistency_error(self, vehicle_length: float) -> float:
        """Largest ``|s_i - (x_{i-1} - x_i - L)|`` over the platoon."""
        if self.n_vehicles < 2:
            return 0.0
        implied = self.positions[:-1] - self.positions[1:] - vehicle_length
        return float(np.max(np.abs(self.spacings - implied)))


def reconcile_positions(leader_position: float, spacings, vehicle_length: float) -> np.ndarray:
    positions = np.empty(len(spacings) + 1)
    positions[0] = leader_position
    for i, s in enumerate(spacings, start=1):
        positions[i] = positions[i - 1] - vehicle_length - s
    return positions


def check_platoon_state(state: PlatoonState, vehicle_length: float) -> PlatoonState:
    n = state.n_vehicles
    if len(state.positions) != n or len(state.spacings) != n - 1:
        raise ShapeError("platoon state arrays have inconsistent lengths")
    arrays = np.concatenate([state.positions, state.speeds, state.spacings])
    if not np.all(np.isfinite(arrays)):
        raise ConfigurationError("platoon state contains non-finite values")
    if np.any(state.speeds < 0):
        raise ConfigurationError("platoon state has a negative speed")
    if n > 1 and np.any(np.diff(state.positions) >= 0):
        raise ConfigurationError("positions must be strictly decreasing along the platoon")
    if state.consistency_error(vehicle_length) > CONSISTENCY_TOL:
        raise ConfigurationError("spacings disagree with positions and vehicle length")
    return state


@dataclass(frozen=True)
class IdmParams:
    v0: float
    a_max: float
    b: float
    s0: float
    tau: float
    delta: float

    FIELDS = ("v0", "a_max", "b", "s0", "tau", "delta")

    def __post_init__(self):
        for name in self.FIELDS:
            value = float(getattr(self, name))
            if not (math.isfinite(value) and value > 0):
                raise ParameterError(f"IDM parameter {name} must be finite and > 0, got {value!r}")
            object.__setattr__(self, name, value)

    def as_tuple(self) -> tuple:
        return tuple(getattr(self, name) for name in self.FIELDS)

    def as_dict(self) -> dict:
        return {name: getattr(self, name) for name in self.FIELDS}


# Calibrated follower rows (vehicles 3, 4, 5) used by the reference scenario.
CALIBRATED_PARAMS = {
    3: IdmParams(v0=5.00, a_max=1.19, b=0.50, s0=3.00, tau=1.50, delta=2.81),
    4: IdmParams(v0=5.00, a_max=1.31, b=3.00, s0=3.00, tau=1.50, delta=5.00),
    5: IdmParams(v0=5.00, a_max=1.70, b=0.50, s0=3.00, tau=1.50, delta=5.00),
}


@dataclass(frozen=True)
class SvoAngle:
    phi: float

    def __post_init__(self):
        phi = float(self.phi)
        # tolerate a few ulps above pi/2 from parsed expressions
        if not math.isfinite(phi) or phi < 0 or phi > math.pi / 2 + 1e-12:
            raise ConfigurationError(f"SVO angle must lie in [0, pi/2], got {phi!r}")
        object.__setattr__(self, "phi", min(phi, math.pi / 2))

    def __float__(self):
        return self.phi


def as_phi(value) -> float:
    return SvoAngle(float(value)).phi


@dataclass(frozen=True)
class SimConfig:
    dt: float = DEFAULT_DT
    horizon: float = 120.0
    vehicle_length: float = DEFAULT_VEHICLE_LENGTH
    min_spacing_floor: float = DEFAULT_MIN_SPACING
    speed_floor: float = 0.0

    def __post_init__(self):
        if not (math.isfinite(self.dt) and self.dt > 0):
            raise ConfigurationError("dt must be > 0")
        if not (math.isfinite(self.horizon) and self.horizon >= 0):
            raise ConfigurationError("horizon must be >= 0")
        if 0 < self.horizon < self.dt:
            raise ConfigurationError("horizon must be 0 or at least dt")
        if not self.vehicle_length > 0:
            raise ConfigurationError("vehicle_length must be > 0")
        if not self.min_spacing_floor > 0:
            raise ConfigurationError("min_spacing_floor must be > 0")

    @property
    def n_steps(self) -> int:
        return int(round(self.horizon / self.dt))


def check_finite_array(values, name: str, ndim: Optional[int] = 1) -> np.ndarray:
    arr = np.asarray(values, dtype=float)
    if ndim is not None and arr.ndim != ndim:
        raise ShapeError(f"{name} must be {ndim}-dimensional, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ConfigurationError(f"{name} contains non-finite values")
    return arr


def check_positive(value: float, name: str) -> float:
    value = float(value)
    if not (math.isfinite(value) and value > 0):
        raise ConfigurationError(f"{name} must be > 0, got {value!r}")
    return value


def check_same_length(a: Sequence, b: Sequence, names=("a", "b")):
    if len(a) != len(b):
        raise ShapeError(f"{names[0]} and {names[1]} differ in length ({len(a)} vs {len(b)})")

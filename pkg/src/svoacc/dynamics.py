"""Platoon stepping with forward Euler and pluggable acceleration laws."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from .core import (
    ConfigurationError,
    IdmParams,
    PlatoonState,
    PlaybackExhaustedError,
    ShapeError,
    SimConfig,
    TrajectorySeries,
    as_phi,
    check_platoon_state,
)


def desired_spacing(params: IdmParams, v: float, v_lead: float) -> float:
    """IDM desired gap ``s0 + v*tau + v*(v - v_lead) / (2*sqrt(a_max*b))``.

    Can drop below ``s0`` while the follower is slower than its leader.
    """
    if not isinstance(params, IdmParams):
        raise TypeError("params must be IdmParams")
    return float(_desired_spacing(params.a_max, params.b, params.s0, params.tau, v, v_lead))


def idm_acceleration(params: IdmParams, v: float, v_lead: float, s: float) -> float:
    if not isinstance(params, IdmParams):
        raise TypeError("params must be IdmParams")
    return float(idm_accel_arrays(params.as_tuple(), v, v_lead, s))


def equilibrium_spacing(params: IdmParams, v: float) -> float:
    """Spacing at which a follower cruising at ``v`` behind a leader at ``v`` has zero acceleration."""
    ratio = (v / params.v0) ** params.delta
    if ratio >= 1:
        raise ConfigurationError("no finite equilibrium spacing at or above the desired speed")
    return params.s0 + v * params.tau if v == 0 else desired_spacing(params, v, v) / math.sqrt(1.0 - ratio)


def _desired_spacing(a_max, b, s0, tau, v, v_lead):
    return s0 + v * tau + v * (v - v_lead) / (2.0 * np.sqrt(a_max * b))


def idm_accel_arrays(params, v, v_lead, s):
    """Vectorised IDM acceleration; ``params`` is a 6-tuple of scalars or arrays."""
    v0, a_max, b, s0, tau, delta = params
    s_star = _desired_spacing(a_max, b, s0, tau, v, v_lead)
    return a_max * (1.0 - (v / v0) ** delta - (s_star / s) ** 2)


def idm_accel_with_grad(params, v, v_lead, s):
    """IDM acceleration and its partials with respect to ``(v, v_lead, s)``."""
    v0, a_max, b, s0, tau, delta = params
    root = 2.0 * np.sqrt(a_max * b)
    s_star = s0 + v * tau + v * (v - v_lead) / root
    ratio = v / v0
    free = ratio ** delta
    inter = (s_star / s) ** 2
    acc = a_max * (1.0 - free - inter)
    # d/dv (v/v0)^delta; subgradient 0 at v = 0 when delta < 1
    moving = v > 0
    dfree = np.where(moving, delta * free / np.where(moving, v, 1.0),
                     np.where(delta == 1.0, 1.0 / v0, 0.0))
    ds_star_dv = tau + (2.0 * v - v_lead) / root
    ds_star_dvl = -v / root
    k = 2.0 * s_star / (s * s)
    d_v = -a_max * (dfree + k * ds_star_dv)
    d_vl = -a_max * k * ds_star_dvl
    d_s = a_max * 2.0 * inter / s
    return acc, d_v, d_vl, d_s


def euler_update(speeds, spacings, accels, lead_next, dt, floor):
    """One synchronous Euler step on arrays whose last axis is the platoon.

    Args:
        speeds: ``(..., n)`` speeds at time t.
        spacings: ``(..., n-1)`` spacings at time t.
        accels: ``(..., n)`` accelerations; column 0 is ignored.
        lead_next: ``(...)`` leader speed at t + dt (played back, not integrated).
        dt: step length.
        floor: spacing floor.

    Returns:
        ``(new_speeds, new_spacings, info)`` where ``info`` holds the masks the
        reverse pass needs: ``raw`` (unfloored speeds), ``clamped``, ``capped``
        and ``collided``.
    """
    raw = speeds + accels * dt
    new_v = np.maximum(raw, 0.0)
    new_v[..., 0] = lead_next
    s_pre = spacings + (speeds[..., :-1] - speeds[..., 1:]) * dt
    clamped = s_pre < floor
    collided = s_pre <= 0.0
    new_s = np.where(clamped, floor, s_pre)
    # a vehicle pushed onto the floor cannot outrun the one it is stuck behind
    capped = np.zeros_like(clamped)
    for i in (range(1, new_v.shape[-1]) if clamped.any() else ()):
        cap = clamped[..., i - 1] & (new_v[..., i] > new_v[..., i - 1])
        if np.any(cap):
            new_v[..., i] = np.where(cap, new_v[..., i - 1], new_v[..., i])
        capped[..., i - 1] = cap
    info = {"raw": raw, "clamped": clamped, "capped": capped, "collided": collided}
    return new_v, new_s, info


class AccelerationLaw:
    kind = "abstract"

    def acceleration(self, k: int, state: PlatoonState, i: int, history) -> float:
        raise NotImplementedError


@dataclass
class PlaybackLaw(AccelerationLaw):
    """Replays a recorded speed series; only valid for the leader."""

    series: TrajectorySeries
    kind = "playback"

    def index(self, time: float) -> int:
        return int(round((time - self.series.t0) / self.series.dt))

    def speed_at(self, k: int) -> float:
        if k < 0 or k >= len(self.series.speeds):
            raise PlaybackExhaustedError(
                f"playback of vehicle {self.series.vehicle_id} has no sample {k} "
                f"(length {len(self.series.speeds)})")
        return float(self.series.speeds[k])

    def acceleration(self, k, state, i, history):
        return (self.speed_at(k + 1) - self.speed_at(k)) / self.series.dt


@dataclass
class IdmLaw(AccelerationLaw):
    params: IdmParams
    kind = "idm"

    def acceleration(self, k, state, i, history):
        return float(idm_accel_arrays(self.params.as_tuple(), state.speeds[i],
                                      state.speeds[i - 1], state.spacings[i - 1]))


@dataclass
class NeuralLaw(AccelerationLaw):
    """Acceleration from the sequence controller, conditioned on an SVO angle."""

    params: object
    phi: float
    kind = "neural"

    def __post_init__(self):
        self.phi = as_phi(self.phi)

    def acceleration(self, k, state, i, history):
        from .controller import predict_accel, window_from_history
        window = window_from_history(history, self.params.seq_len)
        return predict_accel(self.params, window, self.phi)


def observation(state: PlatoonState, i: int) -> tuple:
    """``(spacing, closing speed, own speed)`` seen by vehicle ``i``."""
    return (float(state.spacings[i - 1]), float(state.speeds[i - 1] - state.speeds[i]),
            float(state.speeds[i]))


@dataclass(frozen=True)
class RolloutResult:
    states: tuple
    accelerations: np.ndarray  # (n_vehicles, n_steps)
    collision: bool = False
    collision_time: Optional[float] = None

    @property
    def times(self) -> np.ndarray:
        return np.array([s.time for s in self.states])

    @property
    def speeds(self) -> np.ndarray:
        return np.array([s.speeds for s in self.states])

    @property
    def spacings(self) -> np.ndarray:
        return np.array([s.spacings for s in self.states])

    @property
    def n_vehicles(self) -> int:
        return self.states[0].n_vehicles

    @property
    def dt(self) -> float:
        if len(self.states) < 2:
            return float("nan")
        return self.states[1].time - self.states[0].time


def _check_laws(state: PlatoonState, laws: Sequence[AccelerationLaw], cfg: Optional[SimConfig] = None):
    if len(laws) != state.n_vehicles:
        raise ShapeError(f"need one law per vehicle ({state.n_vehicles}), got {len(laws)}")
    if not isinstance(laws[0], PlaybackLaw):
        raise ConfigurationError("the leader must use a playback law")
    if cfg is not None and not math.isclose(laws[0].series.dt, cfg.dt, rel_tol=1e-9):
        raise ConfigurationError(f"leader record dt {laws[0].series.dt} differs from simulation dt {cfg.dt}")
    for law in laws[1:]:
        if isinstance(law, PlaybackLaw):
            raise ConfigurationError("playback is only supported for the leader")


def _idm_plan(laws):
    """Indices of IDM-driven vehicles and their parameters as stacked arrays."""
    idx = np.array([i for i, law in enumerate(laws) if isinstance(law, IdmLaw)], dtype=int)
    params = tuple(np.array([laws[i].params.as_tuple()[j] for i in idx]) for j in range(6))
    return idx, params


def _step(state, laws, cfg, k, histories, new_time, plan=None):
    n = state.n_vehicles
    idx, params = plan if plan is not None else _idm_plan(laws)
    accels = np.zeros(n)
    accels[0] = laws[0].acceleration(k, state, 0, None)
    if len(idx):
        v = state.speeds
        accels[idx] = idm_accel_arrays(params, v[idx], v[idx - 1], state.spacings[idx - 1])
    for i in range(1, n):
        if not isinstance(laws[i], IdmLaw):
            accels[i] = laws[i].acceleration(k, state, i, histories.get(i))
    if not math.isfinite(accels.sum()):
        raise ConfigurationError(f"non-finite acceleration at step {k}")
    lead_next = laws[0].speed_at(k + 1)
    new_v, new_s, info = euler_update(np.array(state.speeds), np.array(state.spacings),
                                      accels, lead_next, cfg.dt, cfg.min_spacing_floor)
    positions = [float(state.positions[0] + state.speeds[0] * cfg.dt)]
    for s in new_s.tolist():
        positions.append(positions[-1] - cfg.vehicle_length - s)
    new_state = PlatoonState(new_time, positions, new_v, new_s)
    return new_state, accels, bool(np.any(info["collided"]))


def step(state: PlatoonState, laws: Sequence[AccelerationLaw], cfg: SimConfig,
         history: Optional[dict] = None) -> PlatoonState:
    """Advance the platoon by one ``cfg.dt``.

    ``history`` maps a neural vehicle's index to its past observations; when
    omitted the current observation alone forms the (padded) window.
    """
    _check_laws(state, laws, cfg)
    k = laws[0].index(state.time)
    histories = {}
    for i, law in enumerate(laws):
        if isinstance(law, NeuralLaw):
            histories[i] = list((history or {}).get(i, [])) or [observation(state, i)]
    new_time = laws[0].series.t0 + (k + 1) * cfg.dt
    return _step(state, laws, cfg, k, histories, new_time)[0]


def rollout(initial: PlatoonState, laws: Sequence[AccelerationLaw], cfg: SimConfig) -> RolloutResult:
    """Apply :func:`step` for ``cfg.n_steps`` steps and record every state."""
    _check_laws(initial, laws, cfg)
    check_platoon_state(initial, cfg.vehicle_length)
    k0 = laws[0].index(initial.time)
    n_steps = cfg.n_steps
    if k0 + n_steps >= len(laws[0].series.speeds):
        raise PlaybackExhaustedError(
            f"leader playback covers {len(laws[0].series.speeds)} samples, "
            f"rollout needs {k0 + n_steps + 1}")
    t0 = initial.time
    histories = {i: [observation(initial, i)] for i, law in enumerate(laws)
                 if isinstance(law, NeuralLaw)}
    states = [initial]
    accels = np.zeros((initial.n_vehicles, n_steps))
    collision_time = None
    state = initial
    plan = _idm_plan(laws)
    for j in range(n_steps):
        # time stamps are t0 + k*dt, never accumulated by repeated addition
        state, acc, collided = _step(state, laws, cfg, k0 + j, histories, t0 + (j + 1) * cfg.dt, plan)
        accels[:, j] = acc
        if collided and collision_time is None:
            collision_time = state.time
        for i, h in histories.items():
            h.append(observation(state, i))
        states.append(state)
    accels.setflags(write=False)
    return RolloutResult(tuple(states), accels, collision_time is not None, collision_time)

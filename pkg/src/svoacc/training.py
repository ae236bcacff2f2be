"""Composite SVO loss, reverse-mode gradient through the rollout, and training."""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from .controller import (
    ControllerParams,
    encode_phi,
    init_params,
    lstm_cell,
    lstm_cell_backward,
)
from .core import (
    ConfigurationError,
    DivergenceError,
    ShapeError,
    SvoAngle,
    as_phi,
    check_positive,
    check_same_length,
)
from .dynamics import IdmLaw, NeuralLaw, PlaybackLaw, RolloutResult, euler_update, idm_accel_with_grad, rollout

DEFAULT_PHI_SET = (0.0, math.pi / 4, math.pi / 2)
DEFAULT_V_TARGET = 5.0


svo_weights = encode_phi


# individual loss terms --------------------------------------------------

def loss_prediction(a_pred, a_true, dt: float) -> float:
    """Rectangle-rule ``sum (a_pred - a_true)^2 * dt``."""
    check_positive(dt, "dt")
    a_pred = np.asarray(a_pred, dtype=float)
    a_true = np.asarray(a_true, dtype=float)
    check_same_length(a_pred, a_true, ("a_pred", "a_true"))
    return float(np.sum((a_pred - a_true) ** 2) * dt)


def u_self(a_av, dt: float) -> float:
    """Energy indicator ``sum 0.5 * a^2 * dt`` (unit-free)."""
    check_positive(dt, "dt")
    a = np.asarray(a_av, dtype=float)
    return float(np.sum(0.5 * a * a) * dt)


def u_collective(v3, v0: float, dt: float) -> float:
    """``sum 0.5 * (v3 - v0)^2 * dt``: deviation of the first follower from the target speed."""
    check_positive(dt, "dt")
    d = np.asarray(v3, dtype=float) - v0
    return float(np.sum(0.5 * d * d) * dt)


def loss_cost(u_s: float, u_c: float, phi) -> float:
    cos_phi, sin_phi = svo_weights(phi)
    return cos_phi * u_s + sin_phi * u_c


def loss_smoothness(a_av, dt: float) -> float:
    """Squared jerk, ``sum ((a[k+1] - a[k]) / dt)^2 * dt``."""
    check_positive(dt, "dt")
    a = np.asarray(a_av, dtype=float)
    if a.ndim != 1 or len(a) < 2:
        raise ShapeError("smoothness needs at least two accelerations")
    jerk = np.diff(a) / dt
    return float(np.sum(jerk * jerk) * dt)


def _pair_terms(u_s, u_c, pairs, mode):
    for p, q in pairs:
        ds = u_s[p] - u_s[q]
        dc = u_c[q] - u_c[p]
        if mode == "hinge":
            ds, dc = max(ds, 0.0), max(dc, 0.0)
        yield p, q, ds, dc


def loss_trend(u_self_by_phi, u_collective_by_phi, pairs, mode: str = "hinge") -> float:
    """Penalty for utilities that do not follow the expected ordering in phi.

    For each ``(phi1, phi2)`` with ``phi1 < phi2``: self utility should not
    fall and collective utility should not rise. ``mode="hinge"`` penalises
    only violations; ``mode="symmetric"`` penalises any difference.
    """
    if mode not in ("hinge", "symmetric"):
        raise ConfigurationError(f"unknown trend mode {mode!r}")
    total = 0.0
    try:
        for _, _, ds, dc in _pair_terms(u_self_by_phi, u_collective_by_phi, pairs, mode):
            total += ds * ds + dc * dc
    except KeyError as exc:
        raise ConfigurationError(f"no utilities for phi {exc.args[0]!r}") from None
    return total


# configuration ----------------------------------------------------------

@dataclass(frozen=True)
class LossWeights:
    """Loss weights; the trend term ramps linearly from 0 to 1 over ``ramp_fraction`` of the epochs.

    The defaults drop the imitation term: any weight on it ties the
    phi = 0 policy to the recorded IDM behaviour and erases the spread
    between SVO settings on the reference scenario.
    """

    alpha: float = 0.0
    beta: float = 1.0
    gamma: float = 0.01
    ramp_fraction: float = 0.5

    def __post_init__(self):
        w = (self.alpha, self.beta, self.gamma)
        if any(not math.isfinite(x) or x < 0 for x in w) or not any(x > 0 for x in w):
            raise ConfigurationError("loss weights must be >= 0 and not all zero")
        if not (0 <= self.ramp_fraction <= 1):
            raise ConfigurationError("ramp_fraction must lie in [0, 1]")

    def trend_ramp(self, epoch: int, epochs: int) -> float:
        if self.ramp_fraction == 0:
            return 1.0
        return min(1.0, max(epoch, 0) / (self.ramp_fraction * max(epochs, 1)))


@dataclass(frozen=True, eq=False)
class TrainConfig:
    scenario: object
    epochs: int = 200
    lr: float = 0.02
    seed: int = 0
    phi_set: tuple = DEFAULT_PHI_SET
    phi_pairs: Optional[tuple] = None
    v_target: float = DEFAULT_V_TARGET
    hidden_dim: int = 32
    seq_len: int = 10
    a_lim: float = 3.0
    optimizer: str = "adam"
    trend_mode: str = "hinge"
    collective: str = "first"
    lr_schedule: str = "cosine"
    clip_norm: Optional[float] = None

    def __post_init__(self):
        if int(self.epochs) < 1:
            raise ConfigurationError("epochs must be >= 1")
        if not (math.isfinite(self.lr) and self.lr >= 0):
            raise ConfigurationError("learning rate must be >= 0")
        phis = tuple(as_phi(p) for p in self.phi_set)
        if not phis:
            raise ConfigurationError("phi_set must not be empty")
        if len(set(phis)) != len(phis):
            raise ConfigurationError("phi_set has duplicates")
        object.__setattr__(self, "phi_set", phis)
        pairs = self.phi_pairs
        if pairs is None:
            ordered = sorted(phis)
            pairs = tuple(zip(ordered[:-1], ordered[1:]))
        pairs = tuple((as_phi(a), as_phi(b)) for a, b in pairs)
        for a, b in pairs:
            if not a < b:
                raise ConfigurationError(f"phi pair ({a}, {b}) must satisfy phi1 < phi2")
            if a not in phis or b not in phis:
                raise ConfigurationError(f"phi pair ({a}, {b}) refers to a phi outside phi_set")
        object.__setattr__(self, "phi_pairs", pairs)
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigurationError(f"unknown optimizer {self.optimizer!r}")
        if self.trend_mode not in ("hinge", "symmetric"):
            raise ConfigurationError(f"unknown trend mode {self.trend_mode!r}")
        if self.collective not in ("first", "mean"):
            raise ConfigurationError(f"unknown collective mode {self.collective!r}")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ConfigurationError(f"unknown learning-rate schedule {self.lr_schedule!r}")
        if self.clip_norm is not None and not self.clip_norm > 0:
            raise ConfigurationError("clip_norm must be > 0")
        if self.scenario.n_vehicles < 3:
            raise ConfigurationError("training needs at least one follower behind the AV")
        if len(self.scenario.a_true) != self.scenario.cfg.n_steps:
            raise ShapeError("a_true length must equal the number of simulation steps")

    def describe(self) -> dict:
        """Every setting except the scenario, as plain JSON-friendly values."""
        return {
            "epochs": int(self.epochs), "lr": self.lr, "seed": self.seed,
            "phi_set": list(self.phi_set), "phi_pairs": [list(p) for p in self.phi_pairs],
            "v_target": self.v_target, "hidden_dim": self.hidden_dim, "seq_len": self.seq_len,
            "a_lim": self.a_lim, "optimizer": self.optimizer, "trend_mode": self.trend_mode,
            "collective": self.collective, "lr_schedule": self.lr_schedule,
            "clip_norm": self.clip_norm,
        }

    def learning_rate(self, epoch: int) -> float:
        """Step size for ``epoch``; the cosine schedule decays from ``lr`` to 0 over the run."""
        if self.lr_schedule == "constant" or self.epochs <= 1:
            return self.lr
        return 0.5 * self.lr * (1.0 + math.cos(math.pi * epoch / (self.epochs - 1)))


@dataclass(frozen=True)
class LossBreakdown:
    prediction: float
    cost: float
    smoothness: float
    trend: float
    total: float
    u_self: tuple        # per phi, in phi_set order
    u_collective: tuple
    phis: tuple
    alpha: float
    beta: float
    gamma: float
    ramp: float

    def recombine(self) -> float:
        return (self.alpha * self.prediction + self.beta * self.cost
                + self.gamma * (self.smoothness + self.ramp * self.trend))


# batched differentiable rollout ----------------------------------------

# Smallest per-feature input scale (m, m/s, m/s). A nearly constant record
# would otherwise blow tiny fluctuations up into stiff closed-loop feedback.
MIN_INPUT_SCALE = np.array([1.0, 0.5, 0.5])


def observation_stats(obs) -> Tuple[np.ndarray, np.ndarray]:
    """Per-feature mean and standard deviation, floored at ``MIN_INPUT_SCALE``."""
    obs = np.asarray(obs, dtype=float)
    offset = obs.mean(axis=0)
    scale = np.maximum(obs.std(axis=0), MIN_INPUT_SCALE)
    return offset, scale


def scenario_observations(scenario) -> np.ndarray:
    """Vehicle-2 observations of the scenario's reference record, or of its initial state."""
    if getattr(scenario, "reference", None) is not None:
        v = scenario.reference.speeds
        s = scenario.reference.spacings
        return np.column_stack([s[:, 0], v[:, 0] - v[:, 1], v[:, 1]])
    st = scenario.initial
    return np.array([[st.spacings[0], st.speeds[0] - st.speeds[1], st.speeds[1]]])


def _leader_window(scenario):
    leader = scenario.leader
    k0 = int(round((scenario.initial.time - leader.t0) / leader.dt))
    n = scenario.cfg.n_steps
    v = np.asarray(leader.speeds[k0:k0 + n + 1], dtype=float)
    if len(v) != n + 1:
        raise ConfigurationError("leader record does not cover the simulation horizon")
    return v


def _forward(params: ControllerParams, scenario, phis, keep_tape: bool):
    cfg = scenario.cfg
    dt, floor = cfg.dt, cfg.min_spacing_floor
    K = cfg.n_steps
    B = len(phis)
    H, L = params.hidden_dim, params.seq_len
    n = scenario.n_vehicles
    lead = _leader_window(scenario)
    fp = np.array([p.as_tuple() for p in scenario.follower_params], dtype=float)  # (n-2, 6)
    idm = tuple(fp[:, j] for j in range(6))
    trig = np.array([svo_weights(p) for p in phis])  # (B, 2)
    w_h = params.w_head[:H]
    phi_term = trig @ params.w_head[H:] + params.b_head

    v = np.tile(np.asarray(scenario.initial.speeds, dtype=float), (B, 1))
    s = np.tile(np.asarray(scenario.initial.spacings, dtype=float), (B, 1))
    speeds = np.empty((B, K + 1, n))
    speeds[:, 0] = v
    a_av = np.empty((B, K))
    hs = np.zeros((L, B, H))
    cs = np.zeros((L, B, H))
    zeros = np.zeros((1, B, H))
    tape = {"pad": [], "steps": []}

    def tick(x):
        nonlocal hs, cs
        xr = np.broadcast_to(x, (L, B, 3))
        h_prev = np.concatenate([hs[1:], zeros])
        c_prev = np.concatenate([cs[1:], zeros])
        hs, cs, cache = lstm_cell(xr, h_prev, c_prev, params.w_ih, params.w_hh, params.b)
        return cache

    collided = False
    for k in range(K):
        obs = np.stack([s[:, 0], v[:, 0] - v[:, 1], v[:, 1]], axis=1)
        x = (obs - params.offset) / params.scale
        if k == 0:
            for _ in range(L - 1):
                cache = tick(x)
                if keep_tape:
                    tape["pad"].append(cache)
        cache = tick(x)
        h_out = hs[0]
        th = np.tanh(h_out @ w_h + phi_term)
        a_av[:, k] = params.a_lim * th
        acc_idm, d_v, d_vl, d_s = idm_accel_with_grad(idm, v[:, 2:], v[:, 1:-1], s[:, 1:])
        accels = np.zeros((B, n))
        accels[:, 1] = a_av[:, k]
        accels[:, 2:] = acc_idm
        v_next, s_next, info = euler_update(v, s, accels, lead[k + 1], dt, floor)
        collided = collided or bool(np.any(info["collided"]))
        if keep_tape:
            tape["steps"].append((cache, h_out, th, d_v, d_vl, d_s,
                                  info["raw"] > 0, info["clamped"], info["capped"]))
        v, s = v_next, s_next
        speeds[:, k + 1] = v
    return a_av, speeds, tape, trig, collided


def _collective_speeds(speeds, mode):
    if mode == "first":
        return speeds[:, 1:, 2]
    return speeds[:, 1:, 2:]


def _assemble(a_av, speeds, trig, cfg: TrainConfig, weights: LossWeights, ramp):
    scen = cfg.scenario
    dt = scen.cfg.dt
    phis = cfg.phi_set
    us, uc, pred, smooth = [], [], [], []
    coll = _collective_speeds(speeds, cfg.collective)
    for b in range(len(phis)):
        us.append(u_self(a_av[b], dt))
        if cfg.collective == "first":
            uc.append(u_collective(coll[b], cfg.v_target, dt))
        else:
            uc.append(float(np.mean([u_collective(coll[b][:, j], cfg.v_target, dt)
                                     for j in range(coll.shape[2])])))
        pred.append(loss_prediction(a_av[b], scen.a_true, dt))
        smooth.append(loss_smoothness(a_av[b], dt) if len(a_av[b]) >= 2 else 0.0)
    us_map = dict(zip(phis, us))
    uc_map = dict(zip(phis, uc))
    trend = loss_trend(us_map, uc_map, cfg.phi_pairs, cfg.trend_mode)
    prediction = float(sum(pred))
    cost = float(sum(loss_cost(us[b], uc[b], phis[b]) for b in range(len(phis))))
    smoothness = float(sum(smooth))
    total = (weights.alpha * prediction + weights.beta * cost
             + weights.gamma * (smoothness + ramp * trend))
    return LossBreakdown(prediction, cost, smoothness, trend, total, tuple(us), tuple(uc), phis,
                         weights.alpha, weights.beta, weights.gamma, ramp), us_map, uc_map


def _backward(params, cfg: TrainConfig, weights, ramp, a_av, speeds, tape, trig, us_map, uc_map):
    scen = cfg.scenario
    dt = scen.cfg.dt
    phis = cfg.phi_set
    B, K = a_av.shape
    H, L = params.hidden_dim, params.seq_len
    n = scen.n_vehicles
    index = {p: b for b, p in enumerate(phis)}

    # adjoints of the per-phi utilities
    d_us = weights.beta * trig[:, 0].copy()
    d_uc = weights.beta * trig[:, 1].copy()
    g = weights.gamma * ramp
    if g != 0.0:
        for p, q, ds, dc in _pair_terms(us_map, uc_map, cfg.phi_pairs, cfg.trend_mode):
            d_us[index[p]] += 2.0 * g * ds
            d_us[index[q]] -= 2.0 * g * ds
            d_uc[index[q]] += 2.0 * g * dc
            d_uc[index[p]] -= 2.0 * g * dc

    # direct adjoints of the AV acceleration series
    da = 2.0 * weights.alpha * (a_av - np.asarray(scen.a_true)[None, :]) * dt
    da += d_us[:, None] * a_av * dt
    if K >= 2:
        jerk = np.diff(a_av, axis=1) / dt
        dj = 2.0 * weights.gamma * jerk  # d/d(jerk) of sum jerk^2 dt, times 1/dt per side
        da[:, 1:] += dj
        da[:, :-1] -= dj

    # direct adjoints of speeds at states 1..K
    dspeed = np.zeros((B, K + 1, n))
    if cfg.collective == "first":
        dspeed[:, 1:, 2] = d_uc[:, None] * (speeds[:, 1:, 2] - cfg.v_target) * dt
    else:
        m = n - 2
        dspeed[:, 1:, 2:] = d_uc[:, None, None] * (speeds[:, 1:, 2:] - cfg.v_target) * dt / m

    d_wih = np.zeros_like(params.w_ih)
    d_whh = np.zeros_like(params.w_hh)
    d_b = np.zeros_like(params.b)
    d_whead = np.zeros_like(params.w_head)
    d_bhead = 0.0
    w_h = params.w_head[:H]
    inv_scale = 1.0 / params.scale
    dh_carry = np.zeros((L, B, H))
    dc_carry = np.zeros((L, B, H))

    def lstm_back(cache, dh, dc):
        nonlocal d_wih, d_whh, d_b, dh_carry, dc_carry
        dx, dh_prev, dc_prev, dwi, dwh, db_ = lstm_cell_backward(dh, dc, cache, params.w_ih, params.w_hh)
        d_wih += dwi
        d_whh += dwh
        d_b += db_
        dh_carry = np.zeros((L, B, H))
        dc_carry = np.zeros((L, B, H))
        dh_carry[1:] = dh_prev[:-1]
        dc_carry[1:] = dc_prev[:-1]
        return dx.sum(axis=0)

    gv = dspeed[:, K].copy()
    gs = np.zeros((B, n - 1))
    for k in range(K - 1, -1, -1):
        cache, h_out, th, d_v, d_vl, d_s, moving, clamped, capped = tape["steps"][k]
        gvn = gv.copy()
        for i in range(n - 1, 0, -1):
            cap = capped[:, i - 1]
            if np.any(cap):
                gvn[:, i - 1] += np.where(cap, gvn[:, i], 0.0)
                gvn[:, i] = np.where(cap, 0.0, gvn[:, i])
        gvn[:, 0] = 0.0
        graw = np.where(moving, gvn, 0.0)
        ga = graw * dt
        gv_k = graw.copy()
        gs_pre = np.where(clamped, 0.0, gs)
        gs_k = gs_pre.copy()
        gv_k[:, :-1] += gs_pre * dt
        gv_k[:, 1:] -= gs_pre * dt
        gi = ga[:, 2:]
        gv_k[:, 2:] += gi * d_v
        gv_k[:, 1:-1] += gi * d_vl
        gs_k[:, 1:] += gi * d_s

        gz = (ga[:, 1] + da[:, k]) * params.a_lim * (1.0 - th * th)
        d_whead[:H] += gz @ h_out
        d_whead[H:] += gz @ trig
        d_bhead += float(gz.sum())
        dh = dh_carry.copy()
        dh[0] += gz[:, None] * w_h[None, :]
        dx = lstm_back(cache, dh, dc_carry)
        dobs = dx * inv_scale
        gs_k[:, 0] += dobs[:, 0]
        gv_k[:, 1] += dobs[:, 2] - dobs[:, 1]
        gv_k[:, 0] = 0.0

        gv = gv_k + dspeed[:, k]
        gs = gs_k
    for cache in reversed(tape["pad"]):
        lstm_back(cache, dh_carry, dc_carry)

    return np.concatenate([d_wih.ravel(), d_whh.ravel(), d_b, d_whead, [d_bhead]])


def _check_params(params: ControllerParams, cfg: TrainConfig):
    if not isinstance(params, ControllerParams):
        raise TypeError("params must be ControllerParams")


def evaluate_loss(params: ControllerParams, cfg: TrainConfig, weights: LossWeights,
                  epoch: int = 0) -> LossBreakdown:
    """All loss components for one parameter setting, jointly over ``cfg.phi_set``."""
    _check_params(params, cfg)
    ramp = weights.trend_ramp(epoch, cfg.epochs)
    a_av, speeds, _, trig, _ = _forward(params, cfg.scenario, cfg.phi_set, keep_tape=False)
    return _assemble(a_av, speeds, trig, cfg, weights, ramp)[0]


def loss_and_gradient(params: ControllerParams, cfg: TrainConfig, weights: LossWeights,
                      epoch: int = 0) -> Tuple[LossBreakdown, np.ndarray]:
    _check_params(params, cfg)
    ramp = weights.trend_ramp(epoch, cfg.epochs)
    a_av, speeds, tape, trig, _ = _forward(params, cfg.scenario, cfg.phi_set, keep_tape=True)
    breakdown, us_map, uc_map = _assemble(a_av, speeds, trig, cfg, weights, ramp)
    grad = _backward(params, cfg, weights, ramp, a_av, speeds, tape, trig, us_map, uc_map)
    return breakdown, grad


def gradient(params: ControllerParams, cfg: TrainConfig, weights: LossWeights, epoch: int = 0) -> np.ndarray:
    """Gradient of the total loss, flattened in ``ControllerParams.to_vector`` order.

    Reverse mode through every controller call and every Euler step; clamp
    points (speed floor, spacing floor, hinge kink) contribute subgradient 0.
    """
    return loss_and_gradient(params, cfg, weights, epoch)[1]


def simulated_av_accelerations(params: ControllerParams, cfg: TrainConfig) -> np.ndarray:
    """AV accelerations per phi from the batched training rollout, shape ``(len(phi_set), n_steps)``."""
    return _forward(params, cfg.scenario, cfg.phi_set, keep_tape=False)[0]


class Adam:
    def __init__(self, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = self.v = None
        self.t = 0

    def step(self, theta, grad, lr=None):
        lr = self.lr if lr is None else lr
        if self.m is None:
            self.m = np.zeros_like(theta)
            self.v = np.zeros_like(theta)
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        m_hat = self.m / (1 - self.beta1 ** self.t)
        v_hat = self.v / (1 - self.beta2 ** self.t)
        return theta - lr * m_hat / (np.sqrt(v_hat) + self.eps)


class SGD:
    def __init__(self, lr):
        self.lr = lr

    def step(self, theta, grad, lr=None):
        return theta - (self.lr if lr is None else lr) * grad


def initial_params(cfg: TrainConfig) -> ControllerParams:
    offset, scale = observation_stats(scenario_observations(cfg.scenario))
    return init_params(cfg.hidden_dim, cfg.seq_len, cfg.a_lim, cfg.seed, offset, scale)


def train(cfg: TrainConfig, weights: Optional[LossWeights] = None,
          callback: Optional[Callable[[int, LossBreakdown], None]] = None):
    """Full-batch descent on the composite loss.

    Returns ``(params, history)``; ``history[e]`` is the breakdown at the
    parameters used in epoch ``e`` (before that epoch's update).
    """
    weights = weights or LossWeights()
    params = initial_params(cfg)
    theta = params.to_vector()
    opt = Adam(cfg.lr) if cfg.optimizer == "adam" else SGD(cfg.lr)
    history: List[LossBreakdown] = []
    for epoch in range(int(cfg.epochs)):
        breakdown, grad = loss_and_gradient(params, cfg, weights, epoch)
        if not (math.isfinite(breakdown.total) and np.all(np.isfinite(grad))):
            raise DivergenceError(epoch)
        history.append(breakdown)
        if callback is not None:
            callback(epoch, breakdown)
        if cfg.clip_norm is not None:
            norm = float(np.linalg.norm(grad))
            if norm > cfg.clip_norm:
                grad = grad * (cfg.clip_norm / norm)
        if cfg.lr > 0:
            theta = opt.step(theta, grad, cfg.learning_rate(epoch))
            params = params.with_vector(theta)
    return params, history


def controller_laws(params: ControllerParams, scenario, phi) -> list:
    """Acceleration laws for a platoon with the neural AV in slot 2."""
    return ([PlaybackLaw(scenario.leader), NeuralLaw(params, phi)]
            + [IdmLaw(p) for p in scenario.follower_params])


def rollout_controller(params: ControllerParams, scenario, phi) -> RolloutResult:
    return rollout(scenario.initial, controller_laws(params, scenario, phi), scenario.cfg)

"""Intelligent Driver Model lanes with explicit Euler steps and their gradients.

Vehicles are stored downstream-first, so vehicle ``i`` follows ``i - 1``.
The array functions take ``params`` as an ``(n, 6)`` matrix with columns in
``IdmParams.FIELDS`` order.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .core import CollisionError, IdmParams, MicroLaneState, SolverConfig, VehicleState, VirtualLeader

S_MIN, T_PREF, A_MAX, A_PREF, V_TARG, LENGTH = range(6)


@dataclass
class LeaderInfo:
    """State of whatever is ahead of vehicle 0 (``None`` fields mean free road)."""

    p: Optional[float] = None
    v: float = 0.0
    length: float = 0.0

    @property
    def free(self) -> bool:
        return self.p is None


def lead_info(lane: MicroLaneState) -> LeaderInfo:
    lb = lane.lead_boundary
    if isinstance(lb, VirtualLeader):
        return LeaderInfo(lb.p, lb.v, 0.0)
    return LeaderInfo()


def lane_arrays(lane: MicroLaneState):
    """``(p, v, params, ids)`` arrays for a lane."""
    n = len(lane.vehicles)
    p = np.fromiter((veh.p for veh in lane.vehicles), float, n)
    v = np.fromiter((veh.v for veh in lane.vehicles), float, n)
    params = np.array([veh.params.as_array() for veh in lane.vehicles]).reshape(n, 6)
    ids = [veh.id for veh in lane.vehicles]
    return p, v, params, ids


@dataclass
class IdmTerms:
    """Intermediate quantities of one acceleration evaluation."""

    accel: np.ndarray
    gap: np.ndarray
    s_opt: np.ndarray
    has_leader: np.ndarray
    lead_v: np.ndarray
    root: np.ndarray


def _leader_arrays(p, v, params, lead: LeaderInfo):
    n = p.shape[0]
    lp = np.empty(n)
    lv = np.empty(n)
    ll = np.empty(n)
    has = np.ones(n, bool)
    if n:
        lp[1:], lv[1:], ll[1:] = p[:-1], v[:-1], params[:-1, LENGTH]
        if lead.free:
            has[0] = False
            lp[0], lv[0], ll[0] = np.inf, v[0], 0.0
        else:
            lp[0], lv[0], ll[0] = lead.p, lead.v, lead.length
    return lp, lv, ll, has


def idm_terms(p, v, params, lead: LeaderInfo, delta: float, ids=None) -> IdmTerms:
    """Vectorized IDM acceleration for a lane; raises on a non-positive gap."""
    lp, lv, ll, has = _leader_arrays(p, v, params, lead)
    gap = lp - p - ll
    bad = has & ~(gap > 0)
    if np.any(bad):
        i = int(np.flatnonzero(bad)[0])
        _raise_collision(i, ids, gap[i])
    root = np.sqrt(params[:, A_MAX] * params[:, A_PREF])
    s_opt = params[:, S_MIN] + v * params[:, T_PREF] + v * (v - lv) / (2.0 * root)
    interaction = np.where(has, (s_opt / np.where(has, gap, 1.0)) ** 2, 0.0)
    accel = params[:, A_MAX] * (1.0 - (v / params[:, V_TARG]) ** delta - interaction)
    return IdmTerms(accel, gap, s_opt, has, lv, root)


def _raise_collision(i, ids, gap):
    follower = ids[i] if ids else i
    leader = (ids[i - 1] if ids else i - 1) if i > 0 else "lead boundary"
    raise CollisionError(f"collision: vehicle {follower} behind {leader} with gap {gap:.6g}", (leader, follower))


def idm_acceleration(ego: VehicleState, leader, config: SolverConfig) -> float:
    """Acceleration of ``ego`` behind ``leader``.

    ``leader`` may be a ``VehicleState``, a ``VirtualLeader`` or ``None`` for
    a free road.
    """
    if leader is None:
        lead = LeaderInfo()
    elif isinstance(leader, VirtualLeader):
        lead = LeaderInfo(leader.p, leader.v, 0.0)
    else:
        lead = LeaderInfo(leader.p, leader.v, leader.params.length)
    t = idm_terms(
        np.array([ego.p]), np.array([ego.v]), ego.params.as_array()[None, :], lead, config.delta_exponent,
        ids=[ego.id],
    )
    return float(t.accel[0])


@dataclass
class MicroStepCache:
    terms: IdmTerms
    v_active: np.ndarray  # 1 where v + a*dt > 0, else 0 (clamped branch)
    controlled: Optional[int]
    dt: float


def euler_step(p, v, params, lead: LeaderInfo, cfg: SolverConfig, ids=None,
               control: Optional[tuple] = None, check=True):
    """One explicit Euler step on arrays.

    ``control`` is ``(index, accel)`` replacing the IDM law of one vehicle.
    Returns ``(p_next, v_next, cache)``.
    """
    dt = cfg.dt
    terms = idm_terms(p, v, params, lead, cfg.delta_exponent, ids)
    a = terms.accel
    ctrl_idx = None
    if control is not None:
        ctrl_idx = int(control[0])
        a = a.copy()
        a[ctrl_idx] = control[1]
    v_raw = v + a * dt
    v_next = np.maximum(v_raw, 0.0)
    p_next = p + v * dt
    if check and p.shape[0]:
        gap = np.empty(p.shape[0])
        gap[1:] = p_next[:-1] - p_next[1:] - params[:-1, LENGTH]
        if lead.free:
            gap[0] = np.inf
        else:
            gap[0] = lead.p - p_next[0] - lead.length
        bad = ~(gap > 0)
        if np.any(bad):
            i = int(np.flatnonzero(bad)[0])
            _raise_collision(i, ids, gap[i])
    return p_next, v_next, MicroStepCache(terms, (v_raw > 0).astype(float), ctrl_idx, dt)


def accel_partials(p, v, params, cache: MicroStepCache, delta: float):
    """Partials of the IDM acceleration.

    Returns ``(da_dp_self, da_dv_self, da_dp_lead, da_dv_lead)``; lead terms
    are zero for a free road. Vehicle 0's lead terms refer to the lead
    boundary, which carries no state.
    """
    t = cache.terms
    amax = params[:, A_MAX]
    gap = np.where(t.has_leader, t.gap, 1.0)
    s = t.s_opt
    has = t.has_leader.astype(float)
    inter_ds = -2.0 * s / gap**2 * has  # d(-(s/gap)^2)/ds
    inter_dgap = 2.0 * s**2 / gap**3 * has
    ds_dv_self = params[:, T_PREF] + (2.0 * v - t.lead_v) / (2.0 * t.root)
    ds_dv_lead = -v / (2.0 * t.root)
    vt = params[:, V_TARG]
    free_dv = -delta * v ** (delta - 1.0) / vt**delta if delta != 1 else -np.ones_like(v) / vt
    da_dp_self = -amax * inter_dgap
    da_dp_lead = amax * inter_dgap
    da_dv_self = amax * (free_dv + inter_ds * ds_dv_self)
    da_dv_lead = amax * inter_ds * ds_dv_lead
    if cache.controlled is not None:
        k = cache.controlled
        da_dp_self[k] = da_dv_self[k] = da_dp_lead[k] = da_dv_lead[k] = 0.0
    return da_dp_self, da_dv_self, da_dp_lead, da_dv_lead


def euler_vjp(p, v, params, cache: MicroStepCache, mu_p, mu_v, delta: float):
    """Adjoint of ``euler_step`` for the state arrays.

    Returns ``(lam_p, lam_v, lam_accel)`` where ``lam_accel`` is the adjoint
    of the (possibly overridden) acceleration of each vehicle.
    """
    dt = cache.dt
    m = cache.v_active
    lam_accel = mu_v * m * dt
    dps, dvs, dpl, dvl = accel_partials(p, v, params, cache, delta)
    lam_p = mu_p + lam_accel * dps
    lam_v = mu_p * dt + mu_v * m + lam_accel * dvs
    lam_p[:-1] += lam_accel[1:] * dpl[1:]
    lam_v[:-1] += lam_accel[1:] * dvl[1:]
    return lam_p, lam_v, lam_accel


def micro_step(lane: MicroLaneState, config: SolverConfig, control: Optional[tuple] = None) -> MicroLaneState:
    """Advance every vehicle of a lane by one Euler step.

    Vehicles past the lane end are kept but flagged ``exiting``.
    """
    p, v, params, ids = lane_arrays(lane)
    p2, v2, _ = euler_step(p, v, params, lead_info(lane), config, ids, control)
    vehicles = [
        VehicleState(float(pn), float(vn), veh.params, veh.id, exiting=bool(pn > lane.length))
        for veh, pn, vn in zip(lane.vehicles, p2, v2)
    ]
    return lane.with_vehicles(vehicles)


@dataclass(frozen=True)
class IdmStepJacobians:
    """Per-vehicle 2x2 blocks ``d(p_i, v_i)(t+1) / d(p_j, v_j)(t)``.

    ``self_blocks[i]`` is for ``j = i``, ``leader_blocks[i]`` for ``j = i - 1``
    (zero for vehicle 0, whose leader is not a state).
    """

    self_blocks: np.ndarray
    leader_blocks: np.ndarray

    def dense(self) -> np.ndarray:
        n = self.self_blocks.shape[0]
        out = np.zeros((2 * n, 2 * n))
        for i in range(n):
            out[2 * i:2 * i + 2, 2 * i:2 * i + 2] = self.self_blocks[i]
            if i:
                out[2 * i:2 * i + 2, 2 * i - 2:2 * i] = self.leader_blocks[i]
        return out


def idm_step_jacobians(lane: MicroLaneState, config: SolverConfig) -> IdmStepJacobians:
    p, v, params, ids = lane_arrays(lane)
    _, _, cache = euler_step(p, v, params, lead_info(lane), config, ids)
    dps, dvs, dpl, dvl = accel_partials(p, v, params, cache, config.delta_exponent)
    dt = config.dt
    m = cache.v_active
    n = p.shape[0]
    S = np.zeros((n, 2, 2))
    L = np.zeros((n, 2, 2))
    S[:, 0, 0] = 1.0
    S[:, 0, 1] = dt
    S[:, 1, 0] = m * dt * dps
    S[:, 1, 1] = m * (1.0 + dt * dvs)
    L[1:, 1, 0] = (m * dt * dpl)[1:]
    L[1:, 1, 1] = (m * dt * dvl)[1:]
    return IdmStepJacobians(S, L)


def equilibrium_gap(v: float, params: IdmParams, delta: float = 4.0) -> float:
    """Bumper-to-bumper gap at which a follower at speed ``v`` behind an equal-speed leader has ``a = 0``."""
    s = params.s_min + v * params.t_pref
    free = 1.0 - (v / params.v_targ) ** delta
    if free <= 0:
        raise ValueError("no equilibrium gap at or above the target speed")
    return s / np.sqrt(free)


def sample_params(rng: np.random.Generator, ranges: dict) -> IdmParams:
    """Draw per-vehicle parameters uniformly from ``ranges``."""
    vals = {}
    for name in IdmParams.FIELDS:
        lo, hi = ranges[name]
        vals[name] = float(lo) if lo == hi else float(rng.uniform(lo, hi))
    return IdmParams(**vals)

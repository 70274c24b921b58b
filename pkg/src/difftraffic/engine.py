"""Network simulation with a recorded tape, and the reverse sweep over it.

A step from state ``S_k`` to ``S_{k+1}`` runs, in order:

1. the Godunov update of every macro lane (all from ``S_k``);
2. macro to micro conversions: capacitors integrate the outflow of the
   upstream lane and queue new vehicles, which enter the micro lane when the
   entry gap is safe;
3. the Euler update of every micro lane (pace car acceleration applied);
4. micro to macro conversions: vehicles past the end of a micro lane are
   mixed into the downstream macro cell that contains them;
5. density clamping into ``[0, 1]``.

The tape keeps a full checkpoint of ``S_k`` plus the per-step quantities the
adjoint needs; Jacobian blocks are rebuilt from them during ``backward``.
"""

from __future__ import annotations

import copy
import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import arz, idm
from .core import (
    BoundaryKind,
    ConversionMode,
    Controls,
    IdmParams,
    PaceCarControl,
    SignalPlan,
    MacroLaneState,
    MicroLaneState,
    Scenario,
    ScenarioError,
    SolverConfig,
    VehicleState,
    validate_scenario,
)
from .coupling import deposit, deposit_vjp

log = logging.getLogger("difftraffic")

_FLOOR_TOL = 1e-9


# -- signal timing ------------------------------------------------------------


def _sig(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def signal_weight(plan, approach: str, t: float, width: float):
    """Smooth green indicator of ``approach`` at time ``t``.

    Returns ``(g, dg_du)`` where ``u`` is the vector of WE green durations
    (NS gets the rest of each fixed cycle). The plan repeats after its last
    phase.
    """
    we = np.array([a for a, _ in plan.phases])
    cyc = plan.cycle_lengths
    starts = np.concatenate(([0.0], np.cumsum(cyc)[:-1]))
    tau = math.fmod(t, float(cyc.sum()))
    if approach.upper() == "WE":
        a = _sig((tau - starts) / width)
        b = _sig((starts + we - tau) / width)
        return float(np.sum(a * b)), a * b * (1.0 - b) / width
    a = _sig((tau - starts - we) / width)
    b = _sig((starts + cyc - tau) / width)
    return float(np.sum(a * b)), -a * (1.0 - a) * b / width


# -- state ------------------------------------------------------------------------


@dataclass
class MicroArrays:
    p: np.ndarray
    v: np.ndarray
    params: np.ndarray
    ids: list

    def copy(self) -> "MicroArrays":
        return MicroArrays(self.p.copy(), self.v.copy(), self.params.copy(), list(self.ids))

    def take(self, sl) -> "MicroArrays":
        return MicroArrays(self.p[sl], self.v[sl], self.params[sl], self.ids[sl])


@dataclass
class Pending:
    id: int
    v: float
    params: np.ndarray
    emit_step: int


@dataclass
class SimState:
    """Mutable working state of a run; checkpoints are deep copies."""

    step: int
    macro: dict
    micro: dict
    acc: dict
    emitted: dict
    crossings: dict
    queue: dict
    outflow: dict
    inflow: dict
    exited: int
    next_id: int
    clamp_count: int
    rng_state: dict = field(default_factory=dict)

    def copy(self) -> "SimState":
        return SimState(
            self.step,
            {k: (r.copy(), y.copy()) for k, (r, y) in self.macro.items()},
            {k: m.copy() for k, m in self.micro.items()},
            dict(self.acc),
            dict(self.emitted),
            {k: list(v) for k, v in self.crossings.items()},
            {k: list(v) for k, v in self.queue.items()},
            dict(self.outflow),
            dict(self.inflow),
            self.exited,
            self.next_id,
            self.clamp_count,
            copy.deepcopy(self.rng_state),
        )

    def nbytes(self) -> int:
        n = sum(r.nbytes + y.nbytes for r, y in self.macro.values())
        n += sum(m.p.nbytes + m.v.nbytes + m.params.nbytes + 8 * len(m.ids) for m in self.micro.values())
        n += sum(len(q) * 64 for q in self.queue.values())
        return n

    def digest(self, h) -> None:
        for k in sorted(self.macro):
            h.update(k.encode())
            h.update(self.macro[k][0].tobytes())
            h.update(self.macro[k][1].tobytes())
        for k in sorted(self.micro):
            m = self.micro[k]
            h.update(k.encode())
            h.update(m.p.tobytes())
            h.update(m.v.tobytes())
            h.update(np.asarray(m.ids, dtype=np.int64).tobytes())
        h.update(repr(sorted(self.acc.items())).encode())
        h.update(repr([(k, [(p.id, p.v) for p in q]) for k, q in sorted(self.queue.items())]).encode())


def states_equal(a: SimState, b: SimState) -> bool:
    ha, hb = hashlib.sha256(), hashlib.sha256()
    a.digest(ha)
    b.digest(hb)
    return ha.digest() == hb.digest() and a.step == b.step


@dataclass
class NetworkState:
    """Public snapshot of a network: lanes by id plus interface bookkeeping."""

    step: int
    time: float
    lanes: dict
    queues: dict
    accumulators: dict
    emitted: dict
    outflow: dict
    inflow: dict
    exited: int
    clamp_count: int

    def lane(self, lane_id):
        return self.lanes[lane_id]

    def mass_audit(self, config: SolverConfig) -> float:
        """Vehicles in the network plus vehicles that left it, minus those that entered."""
        L = config.mean_vehicle_length
        total = 0.0
        for lane in self.lanes.values():
            if isinstance(lane, MacroLaneState):
                total += float(np.sum(lane.rho)) * lane.dx / L
            else:
                total += len(lane.vehicles)
        total += sum(len(q) for q in self.queues.values())
        total += sum(self.accumulators[i] - self.emitted[i] for i in self.accumulators)
        total += sum(self.outflow.values()) + self.exited - sum(self.inflow.values())
        return total


# -- network plan ------------------------------------------------------------------


@dataclass
class _Plan:
    scenario: Scenario
    config: SolverConfig
    macro_ids: list
    micro_ids: list
    lanes: dict
    up_link: dict
    down_link: dict
    ifaces: list  # (index, upstream macro, downstream micro)
    iface_of_micro: dict
    absorb: dict  # micro id -> downstream macro id
    signal_lanes: dict  # macro id -> approach


def _plan(scenario: Scenario) -> _Plan:
    problems = validate_scenario(scenario)
    if problems:
        raise ScenarioError("; ".join(problems))
    topo = scenario.topology
    order = topo.topological_order()
    lanes = {lane.id: lane for lane in scenario.lanes}
    macro_ids = [i for i in order if lanes[i].kind == "macro"]
    micro_ids = [i for i in order if lanes[i].kind == "micro"]
    up_link = {l.downstream: l.upstream for l in scenario.links}
    down_link = {l.upstream: l.downstream for l in scenario.links}
    ifaces = []
    for link in scenario.links:
        if lanes[link.upstream].kind == "macro" and lanes[link.downstream].kind == "micro":
            ifaces.append((len(ifaces), link.upstream, link.downstream))
    absorb = {
        l.upstream: l.downstream
        for l in scenario.links
        if lanes[l.upstream].kind == "micro" and lanes[l.downstream].kind == "macro"
    }
    signal_lanes = {
        i: lanes[i].downstream_boundary.approach
        for i in macro_ids
        if lanes[i].downstream_boundary.kind is BoundaryKind.SIGNAL
    }
    if signal_lanes and scenario.controls.signal is None:
        raise ScenarioError("signal boundaries need a signal plan in controls")
    return _Plan(scenario, scenario.config, macro_ids, micro_ids, lanes, up_link, down_link, ifaces,
                 {d: i for i, _, d in ifaces}, absorb, signal_lanes)


def initial_state(scenario: Scenario, plan: Optional[_Plan] = None) -> SimState:
    plan = plan or _plan(scenario)
    macro = {i: (np.array(plan.lanes[i].rho, dtype=float), np.array(plan.lanes[i].y, dtype=float))
             for i in plan.macro_ids}
    micro = {}
    next_id = 0
    for i in plan.micro_ids:
        for veh in plan.lanes[i].vehicles:
            if veh.id is not None:
                next_id = max(next_id, int(veh.id) + 1)
    for i in plan.micro_ids:
        lane = plan.lanes[i]
        ids = []
        for veh in lane.vehicles:
            if veh.id is None:
                ids.append(next_id)
                next_id += 1
            else:
                ids.append(int(veh.id))
        p, v, params, _ = idm.lane_arrays(lane)
        micro[i] = MicroArrays(p, v, params, ids)
    rng_state = {}
    if plan.config.conversion_mode is ConversionMode.STOCHASTIC:
        for k, _, _ in plan.ifaces:
            rng_state[k] = np.random.default_rng([plan.config.rng_seed, k, 7919]).bit_generator.state
    return SimState(
        0, macro, micro,
        {k: 0.0 for k, _, _ in plan.ifaces},
        {k: 0 for k, _, _ in plan.ifaces},
        {k: [] for k, _, _ in plan.ifaces},
        {k: [] for k, _, _ in plan.ifaces},
        {i: 0.0 for i in plan.macro_ids},
        {i: 0.0 for i in plan.macro_ids},
        0, next_id, 0, rng_state,
    )


def to_network_state(plan: _Plan, st: SimState) -> NetworkState:
    lanes = {}
    for i in plan.macro_ids:
        lanes[i] = plan.lanes[i].with_state(*st.macro[i])
    for i in plan.micro_ids:
        m = st.micro[i]
        vehicles = [
            VehicleState(float(p), float(v), IdmParams.from_array(prm), vid)
            for p, v, prm, vid in zip(m.p, m.v, m.params, m.ids)
        ]
        lanes[i] = plan.lanes[i].with_vehicles(vehicles)
    queues = {
        k: [VehicleState(0.0, q.v, IdmParams.from_array(q.params), q.id) for q in qs]
        for k, qs in st.queue.items()
    }
    return NetworkState(st.step, st.step * plan.config.dt, lanes, queues, dict(st.acc), dict(st.emitted),
                        dict(st.outflow), dict(st.inflow), st.exited, st.clamp_count)


# -- tape ------------------------------------------------------------------------------


@dataclass
class StepRecord:
    macro_cache: dict = field(default_factory=dict)
    macro_mid: dict = field(default_factory=dict)
    deposits: dict = field(default_factory=dict)  # macro id -> list of (cell, ids, drho, vbar)
    exit_v: dict = field(default_factory=dict)  # vehicle id -> post-step speed, absorbed vehicles
    clamp: dict = field(default_factory=dict)
    emissions: list = field(default_factory=list)  # (iface, vehicle id)
    iface_flow: dict = field(default_factory=dict)  # iface -> (rho, y, u) of the feeding cell
    micro_pre: dict = field(default_factory=dict)
    micro_cache: dict = field(default_factory=dict)
    placed: dict = field(default_factory=dict)
    exited: dict = field(default_factory=dict)
    signal: dict = field(default_factory=dict)  # macro id -> (g, dg_du)
    control_index: dict = field(default_factory=dict)
    emission_intervals: dict = field(default_factory=dict)  # vehicle id -> (k1, k2], 1-based steps


@dataclass
class StepTape:
    """Checkpoints ``S_0..S_K`` and per-step records of one run."""

    scenario: Scenario
    checkpoints: list
    records: list
    config_hash: str
    hash: str = ""

    def __len__(self) -> int:
        return len(self.records)

    def compute_hash(self) -> str:
        h = hashlib.sha256(self.config_hash.encode())
        for cp in self.checkpoints:
            cp.digest(h)
        return h.hexdigest()

    def nbytes(self) -> int:
        """Accounted bytes held by checkpoints and records."""
        total = sum(cp.nbytes() for cp in self.checkpoints)
        for rec in self.records:
            for c in rec.macro_cache.values():
                total += sum(getattr(c.batch, f).nbytes for f in c.batch.__dataclass_fields__)
                total += c.scale.nbytes + c.f_rho.nbytes + c.f_y.nbytes
            for m in rec.micro_pre.values():
                total += m.p.nbytes + m.v.nbytes + m.params.nbytes + 8 * len(m.ids)
            for mc in rec.micro_cache.values():
                t = mc.terms
                total += sum(a.nbytes for a in (t.accel, t.gap, t.s_opt, t.has_leader, t.lead_v, t.root))
                total += mc.v_active.nbytes
        return total


def config_hash(scenario: Scenario) -> str:
    return hashlib.sha256(repr(scenario.config).encode()).hexdigest()


# -- forward ---------------------------------------------------------------------------


def _pace(plan: _Plan):
    pc = plan.scenario.controls.pace_car
    if pc is None:
        return None
    return pc


def _emission_params(plan: _Plan, iface: int, index: int, lane_id: str) -> np.ndarray:
    rng = np.random.default_rng([plan.config.rng_seed, iface, index])
    return idm.sample_params(rng, plan.lanes[lane_id].ranges).as_array()


def _entry_gap_ok(m: MicroArrays, q: Pending, delta: float) -> bool:
    if m.p.shape[0] == 0:
        return True
    gap = m.p[-1] - m.params[-1, idm.LENGTH]
    if gap <= 0:
        return False
    prm = q.params
    root = math.sqrt(prm[idm.A_MAX] * prm[idm.A_PREF])
    s_opt = prm[idm.S_MIN] + q.v * prm[idm.T_PREF] + q.v * (q.v - m.v[-1]) / (2 * root)
    return gap >= max(s_opt, prm[idm.S_MIN])


def _step(plan: _Plan, st: SimState, record: bool) -> tuple:
    cfg = plan.config
    dt = cfg.dt
    k = st.step
    t = k * dt
    L = cfg.mean_vehicle_length
    rec = StepRecord() if record else None
    sig = plan.scenario.controls.signal
    new_macro = {}
    # 1. macro lanes
    for i in plan.macro_ids:
        lane = plan.lanes[i]
        g = 1.0
        if i in plan.signal_lanes:
            g, dg = signal_weight(sig, plan.signal_lanes[i], t, dt)
            if record:
                rec.signal[i] = (g, dg)
        bs = arz.boundary_setup(lane, g, upstream_linked=i in plan.up_link, downstream_linked=i in plan.down_link)
        rho, y = st.macro[i]
        rn, yn, cache = arz.godunov_step(rho, y, lane.dx, lane.u_max, bs, cfg, i)
        new_macro[i] = [rn, yn]
        if i not in plan.down_link:
            st.outflow[i] += cache.f_rho[-1] * cache.scale[-1] * dt / L
        if i not in plan.up_link:
            st.inflow[i] += cache.f_rho[0] * cache.scale[0] * dt / L
        if record:
            rec.macro_cache[i] = cache
    # 2. macro -> micro
    for iface, up, down in plan.ifaces:
        rho, y = st.macro[up]
        lane = plan.lanes[up]
        r_last, y_last = float(rho[-1]), float(y[-1])
        u_last = float(arz.velocities(np.array([r_last]), np.array([y_last]), lane.u_max, cfg.gamma, cfg.eps_rho)[0])
        f_last = r_last * u_last if r_last > cfg.eps_rho else 0.0
        st.acc[iface] += f_last / L * dt
        whole = int(math.floor(st.acc[iface] + _FLOOR_TOL))
        st.crossings[iface].extend([k + 1] * (whole - len(st.crossings[iface])))
        if cfg.conversion_mode is ConversionMode.STOCHASTIC:
            gen = np.random.default_rng()
            gen.bit_generator.state = st.rng_state[iface]
            lam = f_last / L * dt
            count = int(gen.poisson(lam)) if lam > 0 else 0
            st.rng_state[iface] = gen.bit_generator.state
        else:
            count = whole - st.emitted[iface]
        if record:
            rec.iface_flow[iface] = (r_last, y_last, u_last)
        for _ in range(count):
            unit = st.emitted[iface] + 1
            vid = st.next_id
            st.next_id += 1
            st.queue[iface].append(Pending(vid, u_last, _emission_params(plan, iface, unit - 1, down), k))
            st.emitted[iface] = unit
            if record:
                rec.emissions.append((iface, vid))
                cross = st.crossings[iface]
                # stochastic releases can run ahead of the expected count
                start = cross[min(unit - 2, len(cross) - 1)] if unit > 1 and cross else 0
                end = cross[unit - 1] if unit <= len(cross) else k + 1
                rec.emission_intervals[vid] = (start, end)
        m = st.micro[down]
        q = st.queue[iface]
        placed = 0
        while q and _entry_gap_ok(m, q[0], cfg.delta_exponent):
            veh = q.pop(0)
            m = MicroArrays(np.append(m.p, 0.0), np.append(m.v, veh.v), np.vstack([m.params, veh.params]),
                            m.ids + [veh.id])
            placed += 1
        st.micro[down] = m
        if record:
            rec.placed[down] = placed
    # 3. micro lanes
    pc = plan.scenario.controls.pace_car
    exits = {}
    for i in plan.micro_ids:
        m = st.micro[i]
        control = None
        if pc is not None and pc.lane == i and pc.vehicle in m.ids:
            idx = m.ids.index(pc.vehicle)
            a = pc.accel[k] if k < len(pc.accel) else 0.0
            control = (idx, a)
        lane = plan.lanes[i]
        pn, vn, mcache = idm.euler_step(m.p, m.v, m.params, idm.lead_info(lane), cfg, m.ids, control)
        if record:
            rec.micro_pre[i] = m
            rec.micro_cache[i] = mcache
            rec.control_index[i] = None if control is None else control[0]
        n_exit = int(np.count_nonzero(pn > lane.length))
        if n_exit and not np.all(pn[:n_exit] > lane.length):
            raise RuntimeError(f"vehicle ordering broken on lane {i}")
        exits[i] = (pn[:n_exit], vn[:n_exit], m.ids[:n_exit])
        st.micro[i] = MicroArrays(pn[n_exit:], vn[n_exit:], m.params[n_exit:], m.ids[n_exit:])
        if record:
            rec.exited[i] = n_exit
    # 4. micro -> macro
    for i in plan.micro_ids:
        pe, ve, ide = exits[i]
        if len(ide) == 0:
            continue
        if i not in plan.absorb:
            st.exited += len(ide)
            continue
        d = plan.absorb[i]
        dl = plan.lanes[d]
        rho, y = new_macro[d]
        if record and d not in rec.macro_mid:
            rec.macro_mid[d] = (rho.copy(), y.copy())
        cells = np.clip(np.floor((pe - plan.lanes[i].length) / dl.dx).astype(int), 0, dl.num_cells - 1)
        for c in np.unique(cells):
            sel = cells == c
            drho = float(np.count_nonzero(sel)) * L / dl.dx
            vbar = float(np.mean(ve[sel]))
            rho[c], y[c] = deposit(rho[c], y[c], drho, vbar, dl.u_max, cfg.gamma)
            if record:
                ids_c = [vid for vid, s_ in zip(ide, sel) if s_]
                rec.deposits.setdefault(d, []).append((int(c), ids_c, drho, vbar))
                for vid, vv in zip(ids_c, ve[sel]):
                    rec.exit_v[vid] = float(vv)
    # 5. clamp
    for i in plan.macro_ids:
        rho, y = new_macro[i]
        rho, y, active, n = arz.clamp_density(rho, y)
        if n:
            st.clamp_count += n
            if record:
                rec.clamp[i] = active.astype(float)
        st.macro[i] = (rho, y)
    st.step = k + 1
    return st, rec


def simulate_and_record(scenario: Scenario, steps: int, record: bool = True):
    """Run ``steps`` steps. Returns ``(NetworkState, StepTape)``.

    With ``record=False`` the tape holds only the first and last states.
    Errors raised mid-run carry the partial tape as ``exc.tape``.
    """
    plan = _plan(scenario)
    st = initial_state(scenario, plan)
    tape = StepTape(scenario, [st.copy()], [], config_hash(scenario))
    try:
        for _ in range(int(steps)):
            st, rec = _step(plan, st, record)
            if record:
                tape.records.append(rec)
                tape.checkpoints.append(st.copy())
    except Exception as exc:
        exc.tape = tape
        raise
    if not record:
        tape.checkpoints.append(st.copy())
    tape.hash = tape.compute_hash()
    if st.clamp_count:
        log.info("density clamped %d times", st.clamp_count)
    return to_network_state(plan, st), tape


def simulate(scenario: Scenario, steps: int) -> NetworkState:
    return simulate_and_record(scenario, steps, record=False)[0]


def replay_step(tape: StepTape, k: int) -> SimState:
    """Re-run step ``k`` from its checkpoint."""
    plan = _plan(tape.scenario)
    st, _ = _step(plan, tape.checkpoints[k].copy(), record=False)
    return st


def trajectory(tape: StepTape) -> list:
    plan = _plan(tape.scenario)
    return [to_network_state(plan, cp) for cp in tape.checkpoints]


# -- gradients -----------------------------------------------------------------------


@dataclass
class StateGradient:
    """Adjoint seed over a network state.

    ``macro[lane]`` is ``(n, 2)`` over ``(rho, y)``; ``micro[lane]`` maps a
    vehicle id to ``(dL/dp, dL/dv)``; ``outflow[lane]`` seeds the cumulative
    vehicles that left a macro lane through its downstream end.
    """

    macro: dict = field(default_factory=dict)
    micro: dict = field(default_factory=dict)
    outflow: dict = field(default_factory=dict)

    def scaled(self, a: float) -> "StateGradient":
        return StateGradient(
            {k: a * np.asarray(v) for k, v in self.macro.items()},
            {k: {i: a * np.asarray(g) for i, g in d.items()} for k, d in self.micro.items()},
            {k: a * v for k, v in self.outflow.items()},
        )


@dataclass
class GradientBundle:
    """Gradients with respect to the inputs of a run.

    ``macro[lane]``: ``(n, 2)`` for initial ``(rho, y)``.
    ``micro[lane]``: ``(n, 2)`` for initial ``(p, v)``, rows in lane order.
    ``controls``: ``pace_car`` per-step accelerations, ``signal`` per-phase WE greens.
    ``params``: e.g. ``{"u_max": {lane: value}}``.
    """

    macro: dict = field(default_factory=dict)
    micro: dict = field(default_factory=dict)
    controls: dict = field(default_factory=dict)
    params: dict = field(default_factory=dict)

    def to_json(self) -> str:
        def pack(a):
            a = np.asarray(a, dtype=float)
            return {"shape": list(a.shape), "data": a.ravel().tolist()}

        doc = {
            "macro": {k: pack(v) for k, v in self.macro.items()},
            "micro": {k: pack(v) for k, v in self.micro.items()},
            "controls": {k: pack(v) for k, v in self.controls.items()},
            "params": {k: {lk: float(lv) for lk, lv in v.items()} for k, v in self.params.items()},
        }
        return json.dumps(doc)

    @classmethod
    def from_json(cls, text: str) -> "GradientBundle":
        doc = json.loads(text)

        def unpack(d):
            return np.asarray(d["data"], dtype=float).reshape(d["shape"])

        return cls(
            {k: unpack(v) for k, v in doc["macro"].items()},
            {k: unpack(v) for k, v in doc["micro"].items()},
            {k: unpack(v) for k, v in doc["controls"].items()},
            {k: dict(v) for k, v in doc["params"].items()},
        )

    def flat(self) -> np.ndarray:
        parts = [np.asarray(self.macro[k]).ravel() for k in self.macro]
        parts += [np.asarray(self.micro[k]).ravel() for k in self.micro]
        parts += [np.asarray(self.controls[k]).ravel() for k in sorted(self.controls)]
        for name in sorted(self.params):
            parts += [np.array([self.params[name][k]]) for k in self.params[name]]
        return np.concatenate(parts) if parts else np.zeros(0)


def _clip(x, c):
    return x if c is None else np.clip(x, -c, c)


def backward(tape: StepTape, loss_grad: StateGradient, step_grads: Optional[Callable] = None,
             conversion_surrogate: Optional[bool] = None, verify: bool = True) -> GradientBundle:
    """Reverse sweep over ``tape`` seeded with ``loss_grad`` on the final state.

    ``step_grads(k, state)`` may return a ``StateGradient`` for every state
    ``S_k`` (``k = 0..K``), for losses summed over frames. With
    ``conversion_surrogate`` (default from the config) the ancillary weight
    rules also route density gradients through vehicle conversions: the
    weight of an absorbed vehicle receives the density adjoint of its cell,
    and the weight of an emitted vehicle receives the sensitivity to
    entering one unit of accumulated flux earlier.
    """
    if verify and tape.hash and tape.compute_hash() != tape.hash:
        raise RuntimeError("tape checkpoints do not match the recorded hash")
    if len(tape.checkpoints) != len(tape.records) + 1:
        raise RuntimeError("tape is incomplete")
    plan = _plan(tape.scenario)
    cfg = plan.config
    surrogate = cfg.conversion_surrogate if conversion_surrogate is None else conversion_surrogate
    clip = cfg.grad_clip
    dt = cfg.dt
    L = cfg.mean_vehicle_length
    K = len(tape.records)
    want_u = "u_max" in cfg.grad_params

    lam_macro = {}
    lam_micro = {}
    lam_out = {i: 0.0 for i in plan.macro_ids}
    g_umax = {i: 0.0 for i in plan.macro_ids}
    g_pace = np.zeros(K)
    sig = plan.scenario.controls.signal
    g_sig = np.zeros(len(sig.phases)) if sig is not None else None
    lam_emit = {}  # vehicle id -> adjoint of its emission speed
    weight_grad = {}  # vehicle id -> adjoint of its ancillary weight
    surrogate_buf = {}  # (iface, 1-based step) -> accumulated weight gradient

    def seed(k, grad):
        st = tape.checkpoints[k]
        for i in plan.macro_ids:
            n = st.macro[i][0].shape[0]
            lam_macro.setdefault(i, np.zeros((n, 2)))
            if grad is not None and i in grad.macro:
                lam_macro[i] = lam_macro[i] + np.asarray(grad.macro[i], dtype=float).reshape(n, 2)
        for i in plan.micro_ids:
            m = st.micro[i]
            n = len(m.ids)
            if i not in lam_micro:
                lam_micro[i] = (np.zeros(n), np.zeros(n))
            if grad is not None and i in grad.micro:
                lp, lv = lam_micro[i]
                pos = {vid: j for j, vid in enumerate(m.ids)}
                for vid, gv in grad.micro[i].items():
                    if vid in pos:
                        lp[pos[vid]] += gv[0]
                        lv[pos[vid]] += gv[1]
        if grad is not None:
            for i, v in grad.outflow.items():
                lam_out[i] += v

    seed(K, loss_grad)
    if step_grads is not None:
        seed(K, step_grads(K, tape.checkpoints[K]))

    for k in range(K - 1, -1, -1):
        rec = tape.records[k]
        pre = tape.checkpoints[k]
        # 5. clamp
        for i, mask in rec.clamp.items():
            lam_macro[i][:, 0] *= mask
        # 4. deposits
        lam_exit_v = {}
        for d, items in rec.deposits.items():
            mid_rho, _ = rec.macro_mid[d]
            lane = plan.lanes[d]
            lam = lam_macro[d]
            for c, ids_c, drho, vbar in reversed(items):
                l_r0, l_y0, l_dr, l_vb, l_u = deposit_vjp(mid_rho[c], drho, vbar, lane.u_max, cfg.gamma,
                                                          lam[c, 0], lam[c, 1])
                lam[c, 0], lam[c, 1] = l_r0, l_y0
                g_umax[d] += l_u
                for vid in ids_c:
                    lam_exit_v[vid] = l_vb / len(ids_c)
                    if surrogate:
                        weight_grad[vid] = weight_grad.get(vid, 0.0) + l_dr * L / lane.dx
        # 3. micro lanes
        emitted_now = {vid: iface for iface, vid in rec.emissions}
        for i in plan.micro_ids:
            m = rec.micro_pre[i]
            n_exit = rec.exited[i]
            lp_next, lv_next = lam_micro[i]
            lp = np.concatenate((np.zeros(n_exit), lp_next))
            lv = np.concatenate(([lam_exit_v.get(vid, 0.0) for vid in m.ids[:n_exit]], lv_next))
            lp, lv, lacc = idm.euler_vjp(m.p, m.v, m.params, rec.micro_cache[i], lp, lv, cfg.delta_exponent)
            ci = rec.control_index.get(i)
            if ci is not None:
                g_pace[k] += lacc[ci]
            n_placed = rec.placed.get(i, 0)
            n_keep = len(m.ids) - n_placed
            for j in range(n_keep, len(m.ids)):
                vid = m.ids[j]
                lam_emit[vid] = lam_emit.get(vid, 0.0) + lv[j]
                if surrogate and vid in emitted_now:
                    # entering earlier by one unit of accumulated flux
                    r_last, _, u_last = rec.iface_flow[emitted_now[vid]]
                    rate = r_last * u_last / L
                    if rate > cfg.eps_rho:
                        a_e = rec.micro_cache[i].terms.accel[j]
                        weight_grad[vid] = weight_grad.get(vid, 0.0) + (lp[j] * m.v[j] + lv[j] * a_e) / rate
            lam_micro[i] = (_clip(lp[:n_keep], clip), _clip(lv[:n_keep], clip))
        # 2. emissions: partials with respect to S_k, added after the macro pull-back
        direct = {}
        for iface, vid in rec.emissions:
            _, up, _ = plan.ifaces[iface]
            lv = lam_emit.pop(vid, 0.0)
            r_last, y_last, _ = rec.iface_flow[iface]
            du_dr, du_dy, du_du = arz.velocity_gradient(r_last, y_last, plan.lanes[up].u_max, cfg.gamma, cfg.eps_rho)
            acc = direct.setdefault(up, np.zeros(2))
            acc += lv * np.array([float(du_dr), float(du_dy)])
            g_umax[up] += lv * float(du_du)
            gw = weight_grad.pop(vid, 0.0)
            if surrogate and gw != 0.0:
                k1, k2 = rec.emission_intervals[vid]
                for s in range(k1 + 1, k2 + 1):
                    surrogate_buf[(iface, s)] = surrogate_buf.get((iface, s), 0.0) + gw
        for iface, up, _ in plan.ifaces:
            gw = surrogate_buf.pop((iface, k + 1), 0.0)
            if gw:
                _, _, u_last = rec.iface_flow[iface]
                acc = direct.setdefault(up, np.zeros(2))
                acc[0] += gw * u_last * dt / L
        # 1. macro lanes
        for i in plan.macro_ids:
            lane = plan.lanes[i]
            cache = rec.macro_cache[i]
            l_out = lam_out[i] * dt / L if i not in plan.down_link else 0.0
            lam, l_u, l_scale = arz.godunov_vjp(cache, lam_macro[i], lane.u_max, cfg, lam_out=l_out)
            if i in direct:
                lam[-1] += direct[i]
            g_umax[i] += l_u
            if i in rec.signal:
                g_sig += l_scale[-1] * rec.signal[i][1]
            lam_macro[i] = _clip(lam, clip)
        if step_grads is not None:
            seed(k, step_grads(k, pre))

    bundle = GradientBundle()
    st0 = tape.checkpoints[0]
    ordered = [lane.id for lane in plan.scenario.lanes]
    for i in (j for j in ordered if j in st0.macro):
        bundle.macro[i] = lam_macro[i] if i in lam_macro else np.zeros((st0.macro[i][0].shape[0], 2))
    for i in (j for j in ordered if j in st0.micro):
        lp, lv = lam_micro.get(i, (np.zeros(len(st0.micro[i].ids)),) * 2)
        bundle.micro[i] = np.stack([lp, lv], axis=1) if len(lp) else np.zeros((0, 2))
    if plan.scenario.controls.pace_car is not None:
        bundle.controls["pace_car"] = g_pace
    if g_sig is not None:
        bundle.controls["signal"] = g_sig
    if want_u:
        bundle.params["u_max"] = {i: g_umax[i] for i in ordered if i in g_umax}
    return bundle


# -- input vectors and finite differences ---------------------------------------------


def input_vector(scenario: Scenario, controls: bool = True) -> np.ndarray:
    """Flatten the differentiable inputs in ``GradientBundle.flat`` order."""
    parts = []
    for lane in scenario.lanes:
        if lane.kind == "macro":
            parts.append(np.stack([lane.rho, lane.y], 1).ravel())
    for lane in scenario.lanes:
        if lane.kind == "micro":
            parts.append(np.array([[veh.p, veh.v] for veh in lane.vehicles]).reshape(-1))
    if controls:
        c = scenario.controls
        if c.pace_car is not None:
            parts.append(np.array(c.pace_car.accel, dtype=float))
        if c.signal is not None:
            parts.append(np.array([a for a, _ in c.signal.phases]))
    if "u_max" in scenario.config.grad_params:
        parts.append(np.array([lane.u_max for lane in scenario.lanes if lane.kind == "macro"]))
    return np.concatenate(parts) if parts else np.zeros(0)


def with_inputs(scenario: Scenario, x: np.ndarray, controls: bool = True) -> Scenario:
    """Inverse of ``input_vector``."""
    x = np.asarray(x, dtype=float)
    pos = 0
    lanes = {lane.id: lane for lane in scenario.lanes}
    for lane in scenario.lanes:
        if lane.kind == "macro":
            n = lane.num_cells
            blk = x[pos:pos + 2 * n].reshape(n, 2)
            lanes[lane.id] = lane.with_state(blk[:, 0].copy(), blk[:, 1].copy())
            pos += 2 * n
    for lane in scenario.lanes:
        if lane.kind == "micro":
            n = len(lane.vehicles)
            blk = x[pos:pos + 2 * n].reshape(n, 2)
            lanes[lane.id] = lane.with_vehicles(
                [VehicleState(float(b[0]), float(b[1]), veh.params, veh.id) for veh, b in zip(lane.vehicles, blk)]
            )
            pos += 2 * n
    ctrl = scenario.controls
    if controls:
        pc, sg = ctrl.pace_car, ctrl.signal
        if pc is not None:
            n = len(pc.accel)
            pc = PaceCarControl(pc.lane, pc.vehicle, tuple(x[pos:pos + n]), pc.bounds)
            pos += n
        if sg is not None:
            n = len(sg.phases)
            we = x[pos:pos + n]
            sg = SignalPlan(tuple((float(w), float(a + b - w)) for w, (a, b) in zip(we, sg.phases)), sg.min_green)
            pos += n
        ctrl = Controls(pc, sg)
    if "u_max" in scenario.config.grad_params:
        for lane in scenario.lanes:
            if lane.kind == "macro":
                cur = lanes[lane.id]
                lanes[lane.id] = MacroLaneState(cur.id, cur.rho, cur.y, cur.dx, float(x[pos]),
                                                cur.upstream_boundary, cur.downstream_boundary)
                pos += 1
    if pos != x.size:
        raise ValueError("input vector has the wrong length")
    return Scenario(scenario.config, tuple(lanes[lane.id] for lane in scenario.lanes), scenario.links, ctrl)


def _bundle_from_flat(scenario: Scenario, g: np.ndarray, controls: bool = True) -> GradientBundle:
    b = GradientBundle()
    pos = 0
    for lane in scenario.lanes:
        if lane.kind == "macro":
            n = lane.num_cells
            b.macro[lane.id] = g[pos:pos + 2 * n].reshape(n, 2)
            pos += 2 * n
    for lane in scenario.lanes:
        if lane.kind == "micro":
            n = len(lane.vehicles)
            b.micro[lane.id] = g[pos:pos + 2 * n].reshape(n, 2)
            pos += 2 * n
    if controls:
        c = scenario.controls
        if c.pace_car is not None:
            n = len(c.pace_car.accel)
            b.controls["pace_car"] = g[pos:pos + n]
            pos += n
        if c.signal is not None:
            n = len(c.signal.phases)
            b.controls["signal"] = g[pos:pos + n]
            pos += n
    if "u_max" in scenario.config.grad_params:
        b.params["u_max"] = {}
        for lane in scenario.lanes:
            if lane.kind == "macro":
                b.params["u_max"][lane.id] = float(g[pos])
                pos += 1
    return b


def finite_diff_gradient(scenario: Scenario, loss: Callable, h: float = 1e-6, steps: int = 1,
                         coords: Optional[np.ndarray] = None, controls: bool = True) -> GradientBundle:
    """Central differences of ``loss(final NetworkState)`` over every input.

    ``coords`` restricts the probe to a subset of flat indices (others are 0).
    Costs two forward runs per probed coordinate.
    """
    x0 = input_vector(scenario, controls)
    g = np.zeros_like(x0)
    idx = range(x0.size) if coords is None else coords
    for j in idx:
        xp = x0.copy()
        xm = x0.copy()
        xp[j] += h
        xm[j] -= h
        fp = loss(simulate(with_inputs(scenario, xp, controls), steps))
        fm = loss(simulate(with_inputs(scenario, xm, controls), steps))
        g[j] = (fp - fm) / (2 * h)
    return _bundle_from_flat(scenario, g, controls)


def directional_fd(scenario: Scenario, loss: Callable, direction: np.ndarray, h: float, steps: int,
                   controls: bool = True) -> float:
    x0 = input_vector(scenario, controls)
    fp = loss(simulate(with_inputs(scenario, x0 + h * direction, controls), steps))
    fm = loss(simulate(with_inputs(scenario, x0 - h * direction, controls), steps))
    return (fp - fm) / (2 * h)

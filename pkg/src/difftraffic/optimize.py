"""Gradient-based state estimation and control on top of the adjoint engine."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import arz
from .core import (
    CollisionError,
    Controls,
    CflViolation,
    MacroLaneState,
    MicroLaneState,
    PaceCarControl,
    Scenario,
    ScenarioError,
    SignalPlan,
    VehicleState,
    validate_scenario,
)
from .engine import (
    GradientBundle,
    NetworkState,
    StateGradient,
    backward,
    simulate,
    simulate_and_record,
)

log = logging.getLogger("difftraffic")

_SIM_ERRORS = (CollisionError, CflViolation, ScenarioError, FloatingPointError, ValueError)


@dataclass
class History:
    """Per-iteration record: value, gradient norm, step size."""

    rows: list = field(default_factory=list)

    def add(self, it, value, gnorm, step):
        self.rows.append((int(it), float(value), float(gnorm), float(step)))

    @property
    def values(self) -> np.ndarray:
        return np.array([r[1] for r in self.rows])

    def write_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["iteration", "value", "grad_norm", "step_size"])
            for it, val, gn, st in self.rows:
                w.writerow([it, f"{val:.17g}", f"{gn:.17g}", f"{st:.17g}"])


def projected_ascent(x0, f_and_grad: Callable, project: Callable, step: float, iterations: int,
                     maximize: bool = True, target: Optional[float] = None, armijo: float = 1e-4,
                     max_halvings: int = 40, grow: float = 2.0, spectral: bool = False, memory: int = 1):
    """Projected gradient ascent (or descent) with backtracking halving.

    ``f_and_grad(x)`` returns ``(f, g)`` or raises one of the simulation
    errors, in which case the trial point is rejected and the step halved.
    After an accepted step the trial step grows by ``grow``; with
    ``spectral`` it is instead reset to the Barzilai-Borwein length
    ``|dx|^2 / |dx . dg|``. With ``memory > 1`` the sufficient-increase
    test compares against the worst of the last ``memory`` accepted values
    (nonmonotone line search). Returns ``(best_x, best_f, History)``; the
    history stores the best-so-far value at each iteration.
    """
    sign = 1.0 if maximize else -1.0
    x = project(np.asarray(x0, dtype=float))
    f, g = f_and_grad(x)
    hist = History()
    hist.add(0, f, np.linalg.norm(g), step)
    best_x, best_f = x.copy(), f
    recent = [f]
    for it in range(1, iterations + 1):
        if target is not None and sign * (best_f - target) >= 0:
            break
        if not np.any(g):
            break
        accepted = False
        for _ in range(max_halvings):
            x_new = project(x + sign * step * g)
            d = x_new - x
            if not np.any(d):
                step *= 0.5
                continue
            try:
                f_new, g_new = f_and_grad(x_new)
            except _SIM_ERRORS as exc:
                log.debug("iterate %d rejected: %s", it, exc)
                step *= 0.5
                continue
            ref = min(recent) if maximize else max(recent)
            if np.isfinite(f_new) and sign * (f_new - ref) >= armijo * sign * float(g @ d):
                accepted = True
                break
            step *= 0.5
        if not accepted:
            break
        dg = g_new - g
        x, f, g = x_new, f_new, g_new
        recent = (recent + [f])[-memory:]
        curv = abs(float(d @ dg))
        if spectral and curv > 0:
            step = float(d @ d) / curv
        else:
            step *= grow
        if sign * (f - best_f) > 0:
            best_x, best_f = x.copy(), f
        hist.add(it, best_f, np.linalg.norm(g), step)
    return best_x, best_f, hist


# -- estimation ----------------------------------------------------------------


def estimation_loss(estimate_final, target_final) -> float:
    """Mean squared difference of two state vectors."""
    a = np.asarray(estimate_final, dtype=float)
    b = np.asarray(target_final, dtype=float)
    if a.shape != b.shape:
        raise ValueError(f"state shapes differ: {a.shape} vs {b.shape}")
    return float(np.mean((a - b) ** 2)) if a.size else 0.0


def state_pairs(est: NetworkState, target: NetworkState):
    """Aligned state vectors of two network states.

    Macro lanes contribute ``(rho, y)`` per cell, micro lanes ``(p, v)`` for
    every vehicle id present in both.
    """
    a, b = [], []
    for lid, lane in target.lanes.items():
        other = est.lanes[lid]
        if isinstance(lane, MacroLaneState):
            a.append(np.stack([other.rho, other.y], 1).ravel())
            b.append(np.stack([lane.rho, lane.y], 1).ravel())
        else:
            tv = {veh.id: veh for veh in lane.vehicles}
            for veh in other.vehicles:
                if veh.id in tv:
                    a.append(np.array([veh.p, veh.v]))
                    b.append(np.array([tv[veh.id].p, tv[veh.id].v]))
    cat = lambda xs: np.concatenate(xs) if xs else np.zeros(0)  # noqa: E731
    return cat(a), cat(b)


def estimation_loss_states(est: NetworkState, target: NetworkState) -> float:
    return estimation_loss(*state_pairs(est, target))


def estimation_loss_grad(est: NetworkState, target: NetworkState) -> tuple:
    """Loss value and its ``StateGradient`` on ``est``."""
    a, b = state_pairs(est, target)
    n = max(a.size, 1)
    g = StateGradient()
    for lid, lane in target.lanes.items():
        other = est.lanes[lid]
        if isinstance(lane, MacroLaneState):
            g.macro[lid] = 2.0 / n * (np.stack([other.rho, other.y], 1) - np.stack([lane.rho, lane.y], 1))
        else:
            tv = {veh.id: veh for veh in lane.vehicles}
            g.micro[lid] = {
                veh.id: 2.0 / n * np.array([veh.p - tv[veh.id].p, veh.v - tv[veh.id].v])
                for veh in other.vehicles if veh.id in tv
            }
    return estimation_loss(a, b), g


@dataclass
class EstimationProblem:
    """Recover the initial state of ``scenario`` from ``target``.

    Only the lanes' initial states are unknown; geometry, boundaries and
    vehicle parameters come from ``scenario``.
    """

    scenario: Scenario
    target: NetworkState
    steps: int
    iterations: int = 500
    step_size: float = 0.05
    rho_floor: float = 1e-3
    min_gap: float = 0.5
    tolerance: float = 0.0
    gradient_modes: tuple = (True, False)  # surrogate flag per restart, cycled


class _Layout:
    """Maps a scenario's initial state to a normalized decision vector.

    Macro cells use ``(rho, w)`` with ``w = u / u_eq(rho)``, so the admissible
    set is the box ``[rho_floor, 1] x [0, 1]``. Vehicles use ``p / length``
    and ``v / v_targ``.
    """

    def __init__(self, scenario: Scenario):
        self.scenario = scenario
        self.gamma = scenario.config.gamma
        self.blocks = []
        scale = []
        for lane in scenario.lanes:
            if isinstance(lane, MacroLaneState):
                self.blocks.append(("macro", lane.id, lane.num_cells))
                scale += [1.0, 1.0] * lane.num_cells
            else:
                self.blocks.append(("micro", lane.id, len(lane.vehicles)))
                vt = max([veh.params.v_targ for veh in lane.vehicles], default=1.0)
                scale += [lane.length, vt] * len(lane.vehicles)
        self.scale = np.array(scale)
        self._exact = {}  # encoded vector -> scenario, so decoding an encoded state is exact

    def _ueq(self, lane, rho):
        return lane.u_max * (1.0 - rho**self.gamma)

    def to_z(self, scenario) -> np.ndarray:
        parts = []
        for kind, lid, n in self.blocks:
            lane = scenario.lane(lid)
            if kind == "macro":
                rho = np.asarray(lane.rho, dtype=float)
                ueq = self._ueq(lane, rho)
                with np.errstate(divide="ignore", invalid="ignore"):
                    w = np.where(rho * ueq > 0, lane.y / (rho * ueq) + 1.0, 1.0)
                parts.append(np.stack([rho, w], 1).ravel())
            else:
                parts.append(np.array([[v.p, v.v] for v in lane.vehicles]).reshape(-1))
        x = np.concatenate(parts) if parts else np.zeros(0)
        z = x / self.scale
        self._exact[z.tobytes()] = scenario
        return z

    def scenario_at(self, z) -> Scenario:
        hit = self._exact.get(np.asarray(z, dtype=float).tobytes())
        if hit is not None:
            return hit
        x = z * self.scale
        sc = self.scenario
        pos = 0
        for kind, lid, n in self.blocks:
            lane = sc.lane(lid)
            blk = x[pos:pos + 2 * n].reshape(n, 2)
            pos += 2 * n
            if kind == "macro":
                rho = blk[:, 0].copy()
                y = rho * (blk[:, 1] - 1.0) * self._ueq(lane, rho)
                sc = sc.replace_lane(lane.with_state(rho, y))
            else:
                sc = sc.replace_lane(lane.with_vehicles(
                    [VehicleState(float(b[0]), float(b[1]), v.params, v.id) for v, b in zip(lane.vehicles, blk)]
                ))
        return sc

    def grad_z(self, bundle: GradientBundle, z: np.ndarray) -> np.ndarray:
        """Chain ``dL/d(rho, y)`` and ``dL/d(p, v)`` to ``dL/dz``."""
        parts = []
        pos = 0
        for kind, lid, n in self.blocks:
            lane = self.scenario.lane(lid)
            if kind == "macro":
                G = np.asarray(bundle.macro[lid], dtype=float).reshape(n, 2)
                blk = z[pos:pos + 2 * n].reshape(n, 2)
                rho, w = blk[:, 0], blk[:, 1]
                ueq = self._ueq(lane, rho)
                with np.errstate(divide="ignore", invalid="ignore"):
                    dueq = np.where(rho > 0, -lane.u_max * self.gamma * rho ** (self.gamma - 1.0), 0.0)
                out = np.empty((n, 2))
                out[:, 0] = G[:, 0] + G[:, 1] * (w - 1.0) * (ueq + rho * dueq)
                out[:, 1] = G[:, 1] * rho * ueq
                parts.append(out.ravel())
            else:
                parts.append(np.asarray(bundle.micro[lid], dtype=float).ravel() * self.scale[pos:pos + 2 * n])
            pos += 2 * n
        return np.concatenate(parts) if parts else np.zeros(0)


def project_state(layout: _Layout, z: np.ndarray, rho_floor: float = 1e-3, min_gap: float = 0.5) -> np.ndarray:
    """Clip a decision vector back into the admissible set.

    Densities go to ``[rho_floor, 1]`` and ``w`` to ``[0, 1]`` (so
    ``0 <= u <= u_eq`` and shocks stay below jam density). Vehicle speeds
    stay non-negative and positions keep their order with ``min_gap``.
    """
    z = np.array(z, dtype=float)
    pos = 0
    for kind, lid, n in layout.blocks:
        lane = layout.scenario.lane(lid)
        if kind == "macro":
            blk = z[pos:pos + 2 * n].reshape(n, 2)
            blk[:, 0] = np.clip(blk[:, 0], rho_floor, 1.0)
            blk[:, 1] = np.clip(blk[:, 1], 0.0, 1.0)
        else:
            blk = z[pos:pos + 2 * n].reshape(n, 2) * layout.scale[pos:pos + 2 * n].reshape(n, 2)
            blk[:, 1] = np.maximum(blk[:, 1], 0.0)
            lengths = [v.params.length for v in lane.vehicles]
            for i in range(n):
                hi = lane.length if i == 0 else blk[i - 1, 0] - lengths[i - 1] - min_gap
                if lane.lead_boundary is not None and i == 0:
                    hi = min(hi, lane.lead_boundary.p - min_gap)
                blk[i, 0] = min(max(blk[i, 0], 0.0), hi)
            blk = blk / layout.scale[pos:pos + 2 * n].reshape(n, 2)
        z[pos:pos + 2 * n] = blk.ravel()
        pos += 2 * n
    return z


def estimate_initial_state(problem: EstimationProblem, initial_guess: Optional[Scenario] = None):
    """Projected gradient descent on the initial state.

    When the line search stalls (typically at a jump caused by a discrete
    emission), descent restarts from the best point with the next gradient
    estimator in ``problem.gradient_modes``: ``True`` adds the conversion
    surrogate, ``False`` is the pathwise gradient. It stops once a full
    cycle brings no improvement or the iteration budget is spent.
    Returns ``(scenario at the best estimate, History)``.
    """
    layout = _Layout(problem.scenario)
    start = initial_guess or problem.scenario

    def make_fg(surrogate):
        def fg(z):
            sc = layout.scenario_at(z)
            problems = validate_scenario(sc)
            if problems:
                raise ScenarioError(problems[0])
            fin, tape = simulate_and_record(sc, problem.steps)
            f, seed = estimation_loss_grad(fin, problem.target)
            b = backward(tape, seed, conversion_surrogate=surrogate, verify=False)
            return f, layout.grad_z(b, z)
        return fg

    proj = lambda z: project_state(layout, z, problem.rho_floor, problem.min_gap)  # noqa: E731
    best = proj(layout.to_z(start))
    modes = tuple(problem.gradient_modes) or (False,)
    best_f, _ = make_fg(modes[0])(best)
    target = problem.tolerance * best_f if problem.tolerance else None
    hist = History()
    hist.add(0, best_f, float("nan"), problem.step_size)
    used, idle, r = 0, 0, 0
    while used < problem.iterations and idle < len(modes):
        if target is not None and best_f <= target:
            break
        x, f, h = projected_ascent(best, make_fg(modes[r % len(modes)]), proj, problem.step_size,
                                   problem.iterations - used, maximize=False, target=target,
                                   spectral=True, memory=10)
        for it, val, gn, st in h.rows[1:]:
            hist.add(used + it, min(val, best_f), gn, st)
        used += max(len(h.rows) - 1, 0)
        if f < best_f:
            best, best_f, idle = x, f, 0
        else:
            idle += 1
        r += 1
    return layout.scenario_at(best), hist


# -- pace car ------------------------------------------------------------------------


def pace_car_reward(speeds, v_targ, c_max: float = 100.0) -> float:
    """Sum over frames and followers of ``c_max - (v_targ - v)**2``.

    ``speeds`` is ``(frames, followers)``; ``v_targ`` a scalar or one value
    per frame.
    """
    v = np.asarray(speeds, dtype=float)
    if v.ndim == 1:
        v = v[:, None]
    vt = np.broadcast_to(np.asarray(v_targ, dtype=float).reshape(-1, 1) if np.ndim(v_targ) else v_targ, v.shape)
    return float(np.sum(c_max - (vt - v) ** 2))


@dataclass
class PaceCarProblem:
    scenario: Scenario
    v_targ: np.ndarray  # one target per frame 1..K
    c_max: float = 100.0
    iterations: int = 100
    step_size: float = 0.01

    @property
    def frames(self) -> int:
        return len(self.v_targ)


def _follower_speeds(tape, lane_id, pace_id):
    out = []
    for cp in tape.checkpoints[1:]:
        m = cp.micro[lane_id]
        out.append([v for v, vid in zip(m.v, m.ids) if vid != pace_id])
    return out


def pace_car_rollout(problem: PaceCarProblem, accel) -> tuple:
    """Reward and its gradient with respect to the acceleration schedule."""
    pc = problem.scenario.controls.pace_car
    ctrl = PaceCarControl(pc.lane, pc.vehicle, tuple(np.asarray(accel, dtype=float)), pc.bounds)
    sc = Scenario(problem.scenario.config, problem.scenario.lanes, problem.scenario.links,
                  Controls(ctrl, problem.scenario.controls.signal))
    K = problem.frames
    _, tape = simulate_and_record(sc, K)
    speeds = _follower_speeds(tape, pc.lane, pc.vehicle)
    reward = sum(float(np.sum(problem.c_max - (problem.v_targ[k] - np.asarray(s)) ** 2))
                 for k, s in enumerate(speeds))

    def step_grads(k, st):
        if k == 0:
            return None
        m = st.micro[pc.lane]
        vt = problem.v_targ[k - 1]
        return StateGradient(micro={pc.lane: {
            vid: np.array([0.0, 2.0 * (vt - v)]) for v, vid in zip(m.v, m.ids) if vid != pc.vehicle
        }})

    b = backward(tape, StateGradient(), step_grads=step_grads, verify=False)
    return reward, b.controls["pace_car"][:K]


def optimize_pace_car(problem: PaceCarProblem, initial=None):
    """Gradient ascent on the pace car's per-frame acceleration.

    Returns ``(best schedule, History)``.
    """
    lo, hi = problem.scenario.controls.pace_car.bounds
    x0 = np.zeros(problem.frames) if initial is None else np.asarray(initial, dtype=float)
    best, _, hist = projected_ascent(
        x0, lambda a: pace_car_rollout(problem, a), lambda a: np.clip(a, lo, hi),
        problem.step_size, problem.iterations, maximize=True,
    )
    return best, hist


# -- signal timing ------------------------------------------------------------------------


def signal_reward(flow: float, queue: float, c1: float = 1.0, c2: float = -1.0) -> float:
    return c1 * flow + c2 * queue


@dataclass
class SignalProblem:
    scenario: Scenario
    steps: int
    c1: float = 1.0
    c2: float = -1.0
    threshold: Optional[float] = None  # default u_max / 10 per lane
    width: Optional[float] = None  # sigmoid width, default threshold / 5
    iterations: int = 60
    step_size: float = 0.5


@dataclass
class SignalEvaluation:
    reward: float
    flow: float
    queue_smooth: float
    queue_hard: int
    grad: np.ndarray


def _queue_terms(problem, lane, rho, y):
    cfg = problem.scenario.config
    thr = problem.threshold if problem.threshold is not None else lane.u_max / 10.0
    width = problem.width if problem.width is not None else thr / 5.0
    u = arz.velocities(rho, y, lane.u_max, cfg.gamma, cfg.eps_rho)
    s = 0.5 * (1.0 + np.tanh(0.5 * (thr - u) / width))
    ds_du = -s * (1.0 - s) / width
    return s, ds_du, int(np.count_nonzero(u < thr))


def signal_rollout(problem: SignalProblem, we_greens) -> SignalEvaluation:
    plan = problem.scenario.controls.signal
    cycles = plan.cycle_lengths
    phases = tuple((float(w), float(c - w)) for w, c in zip(we_greens, cycles))
    sc = Scenario(problem.scenario.config, problem.scenario.lanes, problem.scenario.links,
                  Controls(problem.scenario.controls.pace_car, SignalPlan(phases, plan.min_green)))
    fin, tape = simulate_and_record(sc, problem.steps)
    cfg = sc.config
    lanes = {l.id: l for l in sc.lanes if isinstance(l, MacroLaneState) and l.downstream_boundary.kind.value == "signal"}
    flow = sum(fin.outflow[i] for i in lanes)
    q_s, q_h = 0.0, 0
    for cp in tape.checkpoints[1:]:
        for i, lane in lanes.items():
            s, _, h = _queue_terms(problem, lane, *cp.macro[i])
            q_s += float(np.sum(s))
            q_h += h

    def step_grads(k, st):
        if k == 0:
            return None
        g = StateGradient()
        for i, lane in lanes.items():
            rho, y = st.macro[i]
            _, ds_du, _ = _queue_terms(problem, lane, rho, y)
            du_dr, du_dy, _ = arz.velocity_gradient(rho, y, lane.u_max, cfg.gamma, cfg.eps_rho)
            g.macro[i] = problem.c2 * np.stack([ds_du * du_dr, ds_du * du_dy], 1)
        return g

    seed = StateGradient(outflow={i: problem.c1 for i in lanes})
    b = backward(tape, seed, step_grads=step_grads, verify=False)
    return SignalEvaluation(signal_reward(flow, q_s, problem.c1, problem.c2), flow, q_s, q_h, b.controls["signal"])


def optimize_signal_timing(problem: SignalProblem, initial=None):
    """Gradient ascent on per-phase WE green durations.

    Each phase keeps its cycle length; greens stay within
    ``[min_green, cycle - min_green]``. Returns ``(best greens, History)``.
    """
    plan = problem.scenario.controls.signal
    cyc = plan.cycle_lengths
    lo = np.full(len(cyc), plan.min_green)
    hi = cyc - plan.min_green
    x0 = np.array([a for a, _ in plan.phases]) if initial is None else np.asarray(initial, dtype=float)

    def fg(x):
        ev = signal_rollout(problem, x)
        return ev.reward, ev.grad

    best, _, hist = projected_ascent(x0, fg, lambda x: np.clip(x, lo, hi), problem.step_size,
                                     problem.iterations, maximize=True)
    return best, hist

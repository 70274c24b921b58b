"""Ready-made networks used by the demos, benchmarks and tests."""

from __future__ import annotations

import numpy as np

from .core import (
    BoundaryCondition,
    Controls,
    IdmParams,
    Link,
    MacroLaneState,
    MicroLaneState,
    PaceCarControl,
    Scenario,
    SignalPlan,
    SolverConfig,
    VehicleState,
)
from .idm import equilibrium_gap, sample_params


def random_cells(rng: np.random.Generator, n: int, u_max: float, gamma: float = 0.5,
                 rho_range=(0.1, 0.5), speed_frac=(0.5, 0.95)):
    """Admissible random ``(rho, y)`` with ``u`` a fraction of ``u_eq(rho)``."""
    rho = rng.uniform(*rho_range, n)
    u_eq = u_max * (1 - rho**gamma)
    u = rng.uniform(*speed_frac, n) * u_eq
    return rho, rho * (u - u_eq)


def equilibrium_cell(rho: float, u_max: float, gamma: float = 0.5):
    return (rho, 0.0)


def macro_lane_scenario(n_cells=10, dx=50.0, u_max=30.0, seed=0, dt=0.1, upstream=None, downstream=None,
                        **cfg) -> Scenario:
    rng = np.random.default_rng(seed)
    config = SolverConfig(dt=dt, rng_seed=seed, **cfg)
    rho, y = random_cells(rng, n_cells, u_max, config.gamma)
    lane = MacroLaneState("macro", rho, y, dx, u_max,
                          upstream or BoundaryCondition.outflow(), downstream or BoundaryCondition.outflow())
    return Scenario(config, (lane,))


def closed_macro_lane(n_cells=20, seed=0, dx=50.0, u_max=30.0, dt=0.1) -> Scenario:
    return macro_lane_scenario(n_cells, dx, u_max, seed, dt, BoundaryCondition.wall(), BoundaryCondition.wall())


def random_platoon(rng, n, front=None, v_range=(8.0, 20.0), gap_range=(10.0, 40.0), ranges=None):
    from .core import DEFAULT_PARAM_RANGES

    ranges = ranges or DEFAULT_PARAM_RANGES
    vehicles = []
    p = front if front is not None else 0.0
    for i in range(n):
        prm = sample_params(rng, ranges)
        vehicles.append(VehicleState(p, float(rng.uniform(*v_range)), prm, i))
        p -= prm.length + float(rng.uniform(*gap_range))
    return vehicles


def hybrid_chain(seed=0, n_up=10, n_down=10, dx=50.0, micro_length=300.0, n_vehicles=5, u_max=30.0,
                 dt=0.1, inflow=(0.3, None), **cfg) -> Scenario:
    """Macro lane feeding a micro lane feeding a macro lane.

    The upstream lane has an inflow boundary, the downstream one an open
    outflow end, so vehicles can cross both interfaces.
    """
    rng = np.random.default_rng(seed)
    config = SolverConfig(dt=dt, rng_seed=seed, **cfg)
    g = config.gamma
    r_up, y_up = random_cells(rng, n_up, u_max, g, (0.15, 0.45))
    r_dn, y_dn = random_cells(rng, n_down, u_max, g, (0.05, 0.3))
    r_in = inflow[0]
    y_in = inflow[1] if inflow[1] is not None else r_in * (0.8 - 1.0) * u_max * (1 - r_in**g)
    up = MacroLaneState("up", r_up, y_up, dx, u_max, BoundaryCondition.inflow(r_in, y_in),
                        BoundaryCondition.outflow())
    vehicles = random_platoon(rng, n_vehicles, front=micro_length - 20.0, v_range=(10.0, 18.0),
                              gap_range=(25.0, 45.0))
    vehicles = [v for v in vehicles if v.p >= 0]
    mid = MicroLaneState("mid", micro_length, vehicles)
    down = MacroLaneState("down", r_dn, y_dn, dx, u_max, BoundaryCondition.outflow(), BoundaryCondition.outflow())
    return Scenario(config, (up, mid, down), (Link("up", "mid"), Link("mid", "down")))


def pace_car_scenario(n_followers=5, frames=100, v0=20.0, dt=0.1, seed=0, accel=None, bounds=(-3.0, 3.0),
                      length=1e5, follower_v_targ=40.0) -> Scenario:
    """Pace car (id 0) leading identical followers at equilibrium spacing."""
    prm = IdmParams(s_min=2.0, t_pref=1.2, a_max=1.5, a_pref=2.0, v_targ=follower_v_targ, length=5.0)
    gap = equilibrium_gap(v0, prm)
    p0 = 1000.0
    lead_prm = IdmParams(s_min=2.0, t_pref=1.2, a_max=1.5, a_pref=2.0, v_targ=v0, length=5.0)
    vehicles = [VehicleState(p0, v0, lead_prm, 0)]
    for i in range(1, n_followers + 1):
        vehicles.append(VehicleState(p0 - i * (gap + prm.length), v0, prm, i))
    lane = MicroLaneState("road", length, vehicles)
    accel = tuple(accel) if accel is not None else (0.0,) * frames
    controls = Controls(pace_car=PaceCarControl("road", 0, accel, bounds))
    return Scenario(SolverConfig(dt=dt, rng_seed=seed), (lane,), (), controls)


def signal_toy(demand_we=0.25, demand_ns=0.25, phases=((15.0, 15.0),) * 4, n_cells=10, dx=20.0, u_max=15.0,
               dt=0.1, rho0=None, min_green=2.0, seed=0) -> Scenario:
    """Two approaches (WE and NS) meeting at one signalized stop line.

    Each approach is a macro lane fed at its upstream end with density
    ``demand_*`` moving at the equilibrium speed. Cells start at ``rho0``
    (default: the approach's own demand) in equilibrium.
    """
    config = SolverConfig(dt=dt, rng_seed=seed)
    lanes = []
    for name, d in (("WE", demand_we), ("NS", demand_ns)):
        rho = np.full(n_cells, d if rho0 is None else rho0)
        lanes.append(MacroLaneState(name.lower(), rho, np.zeros(n_cells), dx, u_max,
                                    BoundaryCondition.inflow(d, 0.0), BoundaryCondition.signal(name)))
    return Scenario(config, tuple(lanes), (), Controls(signal=SignalPlan(tuple(phases), min_green)))


def eps_network(eps: float, total_vehicles: int = 10_000, vehicles_per_patch: int = 20,
                vehicles_per_macro_lane: int = 500, seed: int = 0, dt: float = 0.1,
                rho: float = 0.2, u_max: float = 30.0, dx: float = 50.0) -> Scenario:
    """Independent corridors carrying ``total_vehicles`` vehicle equivalents.

    A fraction ``eps`` of the vehicles lives in micro patches of fixed size,
    the rest in macro lanes of fixed capacity. ``eps = 0`` is pure macro and
    ``eps = 1`` pure micro.
    """
    rng = np.random.default_rng(seed)
    config = SolverConfig(dt=dt, rng_seed=seed)
    L = config.mean_vehicle_length
    n_micro = int(round(eps * total_vehicles))
    n_macro = total_vehicles - n_micro
    lanes = []
    speed = u_max * (1 - rho**config.gamma)
    cells_per_lane = max(1, int(round(vehicles_per_macro_lane * L / (rho * dx))))
    k = 0
    while n_macro > 0:
        veh = min(n_macro, vehicles_per_macro_lane)
        n_cells = max(1, int(round(veh * L / (rho * dx)))) if veh < vehicles_per_macro_lane else cells_per_lane
        lanes.append(MacroLaneState(f"macro{k}", np.full(n_cells, rho), np.zeros(n_cells), dx, u_max,
                                    BoundaryCondition.inflow(rho, 0.0), BoundaryCondition.outflow()))
        n_macro -= veh
        k += 1
    gap = L / rho - L
    k = 0
    while n_micro > 0:
        veh = min(n_micro, vehicles_per_patch)
        prm = IdmParams(s_min=2.0, t_pref=1.0, a_max=1.5, a_pref=2.0, v_targ=speed, length=L)
        front = veh * (gap + L) + 10.0
        vehicles = [VehicleState(front - i * (gap + L), speed * 0.95, prm, i) for i in range(veh)]
        lanes.append(MicroLaneState(f"micro{k}", 1e7, vehicles))
        n_micro -= veh
        k += 1
    return Scenario(config, tuple(lanes))


def random_initial_guess(truth: Scenario, seed: int, jitter_p: float = 8.0, jitter_v=(0.7, 1.3)) -> Scenario:
    """Random starting point for initial-state estimation.

    Macro lanes get fresh random cells; vehicles keep their ids and
    parameters with positions shifted by up to ``jitter_p`` (order kept)
    and speeds scaled by a factor in ``jitter_v``.
    """
    rng = np.random.default_rng(seed)
    out = truth
    for lane in truth.lanes:
        if isinstance(lane, MacroLaneState):
            rho, y = random_cells(rng, lane.num_cells, lane.u_max, truth.config.gamma)
            out = out.replace_lane(lane.with_state(rho, y))
        else:
            vs = []
            hi = lane.length
            for veh in lane.vehicles:
                p = min(max(veh.p + rng.uniform(-jitter_p, jitter_p), 0.0), hi)
                vs.append(VehicleState(p, veh.v * rng.uniform(*jitter_v), veh.params, veh.id))
                hi = p - veh.params.length - 1.0
            out = out.replace_lane(lane.with_vehicles(vs))
    return out

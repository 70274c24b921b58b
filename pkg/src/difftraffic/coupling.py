"""Conversions between macroscopic flow and discrete vehicles.

Macro to micro: a flux capacitor integrates the outflow of the upstream lane
and releases one vehicle per whole unit crossed (or a Poisson number in the
stochastic mode). Micro to macro: vehicles leaving a micro lane are mixed
into the downstream cell that contains them, conserving both density and
momentum ``rho * u``.

Densities are normalized (cars per car length); ``mean_vehicle_length``
converts to vehicles per meter.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .core import CellState, IdmParams, SolverConfig, VehicleState

_FLOOR_TOL = 1e-9


@dataclass(frozen=True)
class EmissionRecord:
    """One emitted vehicle.

    ``interval`` is the half-open range of accumulation steps ``(k1, k2]``
    whose flux produced the vehicle; ``step`` is when it was released.
    """

    step: int
    time: float
    vehicle_id: object
    v: float
    interval: tuple

    @property
    def steps(self) -> range:
        return range(self.interval[0] + 1, self.interval[1] + 1)


@dataclass
class FluxCapacitor:
    """Accumulated macro outflow at one macro to micro interface.

    The update functions modify the capacitor in place and also return it.
    """

    accumulator: float = 0.0
    emitted_count: int = 0
    emission_log: list = field(default_factory=list)
    steps: int = 0
    crossings: list = field(default_factory=list)  # step at which unit j+1 was reached
    history: list = field(default_factory=list)  # (rho, v) fed at every step

    def crossing_step(self, unit: int) -> Optional[int]:
        """Step at which the accumulator first reached ``unit`` (1-based)."""
        return self.crossings[unit - 1] if unit <= len(self.crossings) else None


def _default_spawn(index: int, v: float) -> VehicleState:
    return VehicleState(0.0, v, IdmParams(), id=index)


def _advance(cap: FluxCapacitor, rho: float, v: float, config: SolverConfig):
    rate = rho * v / config.mean_vehicle_length
    if rate < 0:
        raise ValueError("negative flux at a capacitor")
    cap.steps += 1
    cap.accumulator += rate * config.dt
    whole = int(np.floor(cap.accumulator + _FLOOR_TOL))
    cap.crossings.extend([cap.steps] * (whole - len(cap.crossings)))
    cap.history.append((rho, v))
    return cap, cap.steps


def _interval_for(cap: FluxCapacitor, unit: int, step: int) -> tuple:
    start = cap.crossing_step(unit - 1) if unit > 1 else 0
    end = cap.crossing_step(unit)
    return (start if start is not None else 0, end if end is not None else step)


def _emit(cap, count, v, config, spawn, step):
    spawn = spawn or _default_spawn
    vehicles = []
    for _ in range(count):
        unit = cap.emitted_count + 1
        veh = spawn(unit - 1, v)
        vehicles.append(veh)
        cap.emission_log.append(
            EmissionRecord(step, step * config.dt, veh.id, float(v), _interval_for(cap, unit, step))
        )
        cap.emitted_count = unit
    return cap, vehicles


def capacitor_accumulate(cap: FluxCapacitor, rho: float, v: float, config: SolverConfig,
                         spawn: Optional[Callable] = None):
    """Integrate one step of flux ``rho * v`` and release whole vehicles.

    ``rho`` is normalized density, ``v`` the macro velocity. Emitted vehicles
    carry ``v``. ``spawn(index, v)`` builds each vehicle (default: standard
    parameters at ``p = 0``). Steps are counted from 1.
    """
    cap, step = _advance(cap, rho, v, config)
    count = len(cap.crossings) - cap.emitted_count
    return _emit(cap, count, v, config, spawn, step)


def poisson_emit(cap: FluxCapacitor, rho: float, v: float, rng: np.random.Generator, config: SolverConfig,
                 spawn: Optional[Callable] = None):
    """Stochastic release: ``k ~ Poisson(rho * v * dt)`` vehicles this step.

    The deterministic accumulator still advances so emission ``j`` can be
    attributed to the interval in which the expected count reached ``j``.
    """
    lam = rho * v * config.dt / config.mean_vehicle_length
    cap, step = _advance(cap, rho, v, config)
    k = int(rng.poisson(lam)) if lam > 0 else 0
    return _emit(cap, k, v, config, spawn, step)


def emission_log_csv(cap: FluxCapacitor) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["step", "time", "vehicle_id", "v"])
    for r in cap.emission_log:
        w.writerow([r.step, repr(float(r.time)), r.vehicle_id, repr(float(r.v))])
    return buf.getvalue()


def backward_through_emission(grad_w: dict, cap: FluxCapacitor, config: SolverConfig) -> np.ndarray:
    """Distribute per-vehicle weight gradients over accumulation steps.

    ``grad_w`` maps vehicle id to ``dL/dw``. Returns ``dL/drho`` per step
    (index ``k - 1`` for step ``k``), each contribution being
    ``grad_w * v(t) * dt / mean_vehicle_length``.
    """
    out = np.zeros(cap.steps)
    by_id = {r.vehicle_id: r for r in cap.emission_log}
    for vid, g in grad_w.items():
        if vid not in by_id:
            raise KeyError(f"no emission record for vehicle {vid}")
        rec = by_id[vid]
        for k in rec.steps:
            out[k - 1] += g * cap.history[k - 1][1] * config.dt / config.mean_vehicle_length
    return out


# -- micro to macro ---------------------------------------------------------------


@dataclass(frozen=True)
class AggregationWindow:
    """Interval ``(l, r]`` of a micro lane mapped to one macro cell."""

    l: float
    r: float
    u_max: float
    weights: Optional[tuple] = None

    def __post_init__(self):
        if not self.r > self.l:
            raise ValueError("aggregation window needs r > l")


def window_members(vehicles: Sequence[VehicleState], window: AggregationWindow) -> list:
    return [i for i, veh in enumerate(vehicles) if window.l < veh.p <= window.r]


def aggregate_micro_to_macro(vehicles: Sequence[VehicleState], window: AggregationWindow,
                             config: SolverConfig) -> CellState:
    """Cell state equivalent to the vehicles inside ``window``.

    Empty windows give the vacuum state ``(0, 0)``.
    """
    members = window_members(vehicles, window)
    if not members:
        return CellState(0.0, 0.0)
    w = window.weights or (1.0,) * len(vehicles)
    count = sum(w[i] for i in members)
    rho = count * config.mean_vehicle_length / (window.r - window.l)
    vbar = float(np.mean([vehicles[i].v for i in members]))
    return CellState(rho, rho * (vbar - window.u_max * (1.0 - rho**config.gamma)))


def backward_through_aggregation(grad_cell, window: AggregationWindow, members: Sequence,
                                 config: SolverConfig) -> dict:
    """Per-member gradients ``{member: (dL/dw, dL/dv)}``.

    ``grad_cell`` is ``(dL/drho, dL/du)`` for the aggregated cell.
    """
    if len(members) == 0:
        return {}
    g_rho, g_u = float(grad_cell[0]), float(grad_cell[1])
    gw = g_rho * config.mean_vehicle_length / (window.r - window.l)
    gv = g_u / len(members)
    return {m: (gw, gv) for m in members}


def _h(rho, u_max, gamma):
    """Equilibrium flow ``rho * u_eq(rho)``."""
    return u_max * (rho - rho ** (1.0 + gamma))


def _h_prime(rho, u_max, gamma):
    return u_max * (1.0 - (1.0 + gamma) * rho**gamma)


def deposit(rho0, y0, drho, vbar, u_max, gamma):
    """Mix arriving vehicles (density ``drho``, mean speed ``vbar``) into a cell.

    Density adds and so does ``rho * u``; ``y`` follows from both.
    """
    rho1 = rho0 + drho
    y1 = y0 + _h(rho0, u_max, gamma) + drho * vbar - _h(rho1, u_max, gamma)
    return rho1, y1


def deposit_vjp(rho0, drho, vbar, u_max, gamma, lam_rho, lam_y):
    """Adjoints ``(rho0, y0, drho, vbar, u_max)`` of ``deposit``."""
    rho1 = rho0 + drho
    hp1 = _h_prime(rho1, u_max, gamma)
    l_rho0 = lam_rho + lam_y * (_h_prime(rho0, u_max, gamma) - hp1)
    l_y0 = lam_y
    l_drho = lam_rho + lam_y * (vbar - hp1)
    l_vbar = lam_y * drho
    l_umax = lam_y * (_h(rho0, 1.0, gamma) - _h(rho1, 1.0, gamma))
    return l_rho0, l_y0, l_drho, l_vbar, l_umax

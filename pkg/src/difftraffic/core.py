"""Shared domain types, network topology and scenario validation.

All types here are immutable value objects. Numeric arrays held by lane
states are made read-only at construction, so a scenario can be shared
between simulation runs (for instance the probes of a finite-difference
oracle) without defensive copies.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np

EPS_RHO = 1e-8


class ConversionMode(str, enum.Enum):
    DETERMINISTIC = "deterministic"
    STOCHASTIC = "stochastic"


class ScenarioError(ValueError):
    """Raised for malformed scenario input (bad keys, wrong types)."""


class CflViolation(RuntimeError):
    """A macro step would exceed the CFL bound ``dt * max|lambda| <= dx``."""


class CollisionError(RuntimeError):
    """Two vehicles overlap (non-positive bumper-to-bumper gap)."""

    def __init__(self, message: str, pair: tuple = ()):
        super().__init__(message)
        self.pair = pair


@dataclass(frozen=True)
class SolverConfig:
    """Global solver settings for one run.

    Attributes:
        dt: Constant time step [s].
        gamma: ARZ equilibrium-velocity exponent, in (0, 1).
        delta_exponent: IDM free-road exponent.
        grad_clip: Optional elementwise cap applied to adjoints each step.
        rng_seed: Seed for vehicle parameter draws and Poisson emission.
        conversion_mode: Deterministic flux capacitor or Poisson emission.
        eps_rho: Vacuum threshold on normalized density.
        mean_vehicle_length: Converts normalized density (cars per car
            length) to vehicles per meter at lane interfaces [m].
        conversion_surrogate: Include the ancillary-weight gradient rules
            for emission and aggregation in backward passes.
        grad_params: Scalar parameters to differentiate, e.g. ``("u_max",)``.
    """

    dt: float = 0.1
    gamma: float = 0.5
    delta_exponent: float = 4.0
    grad_clip: Optional[float] = None
    rng_seed: int = 0
    conversion_mode: ConversionMode = ConversionMode.DETERMINISTIC
    eps_rho: float = EPS_RHO
    mean_vehicle_length: float = 5.0
    conversion_surrogate: bool = True
    grad_params: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "conversion_mode", ConversionMode(self.conversion_mode))
        object.__setattr__(self, "grad_params", tuple(self.grad_params))


class CellState(tuple):
    """Conserved ARZ quantities of one cell: density and relative flow."""

    __slots__ = ()

    def __new__(cls, rho: float, y: float):
        return tuple.__new__(cls, (float(rho), float(y)))

    @property
    def rho(self) -> float:
        return self[0]

    @property
    def y(self) -> float:
        return self[1]

    def __repr__(self):
        return f"CellState(rho={self[0]!r}, y={self[1]!r})"

    def __getnewargs__(self):
        return (self[0], self[1])


VACUUM = CellState(0.0, 0.0)


@dataclass(frozen=True)
class IdmParams:
    s_min: float = 2.0
    t_pref: float = 1.5
    a_max: float = 1.5
    a_pref: float = 2.0
    v_targ: float = 30.0
    length: float = 5.0

    FIELDS = ("s_min", "t_pref", "a_max", "a_pref", "v_targ", "length")

    def as_array(self) -> np.ndarray:
        return np.array([getattr(self, k) for k in self.FIELDS], dtype=float)

    @classmethod
    def from_array(cls, arr) -> "IdmParams":
        return cls(*(float(x) for x in arr))


@dataclass(frozen=True)
class VehicleState:
    p: float
    v: float
    params: IdmParams = field(default_factory=IdmParams)
    id: Optional[int] = None
    exiting: bool = False


class BoundaryKind(str, enum.Enum):
    INFLOW = "inflow"
    OUTFLOW = "outflow"
    WALL = "wall"
    SIGNAL = "signal"


@dataclass(frozen=True)
class BoundaryCondition:
    """Ghost-cell rule at one lane end.

    ``inflow`` prescribes the ghost state ``q``; ``outflow`` copies the edge
    cell; ``wall`` forces zero flux; ``signal`` is an outflow whose flux is
    weighted by the green-light window of ``approach``.
    """

    kind: BoundaryKind = BoundaryKind.OUTFLOW
    q: Optional[CellState] = None
    approach: Optional[str] = None

    def __post_init__(self):
        object.__setattr__(self, "kind", BoundaryKind(self.kind))
        if self.q is not None and not isinstance(self.q, CellState):
            object.__setattr__(self, "q", CellState(*self.q))

    @classmethod
    def inflow(cls, rho: float, y: float) -> "BoundaryCondition":
        return cls(BoundaryKind.INFLOW, CellState(rho, y))

    @classmethod
    def outflow(cls) -> "BoundaryCondition":
        return cls(BoundaryKind.OUTFLOW)

    @classmethod
    def wall(cls) -> "BoundaryCondition":
        return cls(BoundaryKind.WALL)

    @classmethod
    def signal(cls, approach: str) -> "BoundaryCondition":
        return cls(BoundaryKind.SIGNAL, approach=approach)


def _frozen(arr) -> np.ndarray:
    out = np.array(arr, dtype=float)
    out.setflags(write=False)
    return out


@dataclass(frozen=True, eq=False)
class MacroLaneState:
    """A macroscopic lane: cell-averaged ``(rho, y)`` plus geometry."""

    id: str
    rho: np.ndarray
    y: np.ndarray
    dx: float
    u_max: float
    upstream_boundary: BoundaryCondition = field(default_factory=BoundaryCondition.outflow)
    downstream_boundary: BoundaryCondition = field(default_factory=BoundaryCondition.outflow)

    def __post_init__(self):
        object.__setattr__(self, "id", str(self.id))
        object.__setattr__(self, "rho", _frozen(self.rho))
        object.__setattr__(self, "y", _frozen(self.y))
        if self.rho.shape != self.y.shape or self.rho.ndim != 1:
            raise ScenarioError(f"lane {self.id}: rho and y must be 1-D arrays of equal length")

    kind = "macro"

    @classmethod
    def from_cells(cls, id, cells, dx, u_max, **kw) -> "MacroLaneState":
        cells = [CellState(*c) for c in cells]
        return cls(id, [c.rho for c in cells], [c.y for c in cells], dx, u_max, **kw)

    @property
    def cells(self) -> list:
        return [CellState(r, y) for r, y in zip(self.rho, self.y)]

    @property
    def num_cells(self) -> int:
        return len(self.rho)

    @property
    def length(self) -> float:
        return self.num_cells * self.dx

    def with_state(self, rho, y) -> "MacroLaneState":
        return MacroLaneState(
            self.id, rho, y, self.dx, self.u_max, self.upstream_boundary, self.downstream_boundary
        )

    def __eq__(self, other):
        if not isinstance(other, MacroLaneState):
            return NotImplemented
        return (
            self.id == other.id
            and np.array_equal(self.rho, other.rho)
            and np.array_equal(self.y, other.y)
            and self.dx == other.dx
            and self.u_max == other.u_max
            and self.upstream_boundary == other.upstream_boundary
            and self.downstream_boundary == other.downstream_boundary
        )


@dataclass(frozen=True)
class VirtualLeader:
    """A fixed obstacle ahead of the lane's first vehicle (zero length)."""

    p: float
    v: float = 0.0


LeadBoundary = Optional[VirtualLeader]  # None means a free road

DEFAULT_PARAM_RANGES = {
    "s_min": (2.0, 2.0),
    "t_pref": (1.0, 1.5),
    "a_max": (1.0, 2.0),
    "a_pref": (1.5, 2.5),
    "v_targ": (25.0, 32.0),
    "length": (5.0, 5.0),
}


@dataclass(frozen=True)
class MicroLaneState:
    """A microscopic lane. ``vehicles[0]`` is furthest downstream."""

    id: str
    length: float
    vehicles: tuple = ()
    lead_boundary: LeadBoundary = None
    param_ranges: tuple = tuple(sorted(DEFAULT_PARAM_RANGES.items()))

    kind = "micro"

    def __post_init__(self):
        object.__setattr__(self, "id", str(self.id))
        object.__setattr__(self, "vehicles", tuple(self.vehicles))
        ranges = dict(DEFAULT_PARAM_RANGES)
        ranges.update({k: tuple(v) for k, v in dict(self.param_ranges).items()})
        object.__setattr__(self, "param_ranges", tuple(sorted(ranges.items())))

    @property
    def ranges(self) -> dict:
        return dict(self.param_ranges)

    def with_vehicles(self, vehicles) -> "MicroLaneState":
        return MicroLaneState(self.id, self.length, tuple(vehicles), self.lead_boundary, self.param_ranges)


Lane = Union[MacroLaneState, MicroLaneState]


@dataclass(frozen=True)
class Link:
    upstream: str
    downstream: str


@dataclass(frozen=True)
class PaceCarControl:
    """Per-step acceleration of a designated vehicle, replacing its IDM law."""

    lane: str
    vehicle: int
    accel: tuple
    bounds: tuple = (-3.0, 3.0)

    def __post_init__(self):
        object.__setattr__(self, "accel", tuple(float(a) for a in self.accel))
        object.__setattr__(self, "bounds", tuple(float(b) for b in self.bounds))


@dataclass(frozen=True)
class SignalPlan:
    """Two-light signal: each phase gives WE green first, then NS green.

    ``phases`` holds ``(t_we, t_ns)`` green durations in seconds. The cycle
    length of phase k is ``t_we + t_ns``.
    """

    phases: tuple
    min_green: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "phases", tuple((float(a), float(b)) for a, b in self.phases))

    @property
    def cycle_lengths(self) -> np.ndarray:
        return np.array([a + b for a, b in self.phases])


@dataclass(frozen=True)
class Controls:
    pace_car: Optional[PaceCarControl] = None
    signal: Optional[SignalPlan] = None


@dataclass(frozen=True)
class NetworkTopology:
    """Lane kinds plus the ordered links between lane ends."""

    lanes: tuple
    links: tuple

    @property
    def kinds(self) -> dict:
        return {lane.id: lane.kind for lane in self.lanes}

    def upstream_of(self, lane_id: str) -> Optional[str]:
        for link in self.links:
            if link.downstream == lane_id:
                return link.upstream
        return None

    def downstream_of(self, lane_id: str) -> Optional[str]:
        for link in self.links:
            if link.upstream == lane_id:
                return link.downstream
        return None

    def topological_order(self) -> list:
        """Lane ids ordered so every link points forward. Raises on cycles."""
        ids = [lane.id for lane in self.lanes]
        indeg = {i: 0 for i in ids}
        for link in self.links:
            indeg[link.downstream] += 1
        ready = [i for i in ids if indeg[i] == 0]
        order = []
        while ready:
            cur = ready.pop(0)
            order.append(cur)
            for link in self.links:
                if link.upstream == cur:
                    indeg[link.downstream] -= 1
                    if indeg[link.downstream] == 0:
                        ready.append(link.downstream)
        if len(order) != len(ids):
            raise ScenarioError("links contain a cycle")
        return order


@dataclass(frozen=True)
class Scenario:
    config: SolverConfig
    lanes: tuple
    links: tuple = ()
    controls: Controls = field(default_factory=Controls)

    def __post_init__(self):
        object.__setattr__(self, "lanes", tuple(self.lanes))
        object.__setattr__(self, "links", tuple(self.links))

    @property
    def topology(self) -> NetworkTopology:
        return NetworkTopology(self.lanes, self.links)

    def lane(self, lane_id: str) -> Lane:
        for lane in self.lanes:
            if lane.id == lane_id:
                return lane
        raise KeyError(lane_id)

    def replace_lane(self, new_lane: Lane) -> "Scenario":
        lanes = tuple(new_lane if lane.id == new_lane.id else lane for lane in self.lanes)
        return Scenario(self.config, lanes, self.links, self.controls)


def _admissible_velocity(rho, y, u_max, gamma, eps):
    if rho <= eps:
        return u_max
    return y / rho + u_max * (1.0 - rho**gamma)


def _check_cell(where: str, rho, y, u_max, gamma, eps, out: list, tol=1e-9):
    if not (math.isfinite(rho) and math.isfinite(y)):
        out.append(f"{where}: non-finite state")
        return
    if rho < 0 or rho > 1:
        out.append(f"{where}: rho out of [0,1]")
        return
    u = _admissible_velocity(rho, y, u_max, gamma, eps)
    if u < -tol or u > u_max * (1 + tol) + tol:
        out.append(f"{where}: velocity out of [0,u_max]")


def validate_scenario(scenario: Scenario) -> list:
    """Check every type invariant and topology rule.

    Returns a list of human-readable violations; empty when the scenario is
    runnable. Never raises for invalid content.
    """
    out = []
    cfg = scenario.config
    if not cfg.dt > 0:
        out.append("dt must be positive")
    if not 0 < cfg.gamma < 1:
        out.append("gamma out of (0,1)")
    if not cfg.delta_exponent > 0:
        out.append("delta_exponent must be positive")
    if not cfg.mean_vehicle_length > 0:
        out.append("mean_vehicle_length must be positive")
    if cfg.grad_clip is not None and not cfg.grad_clip > 0:
        out.append("grad_clip must be positive when set")
    for name in cfg.grad_params:
        if name != "u_max":
            out.append(f"unsupported gradient parameter {name!r}")
    gamma = cfg.gamma if 0 < cfg.gamma < 1 else 0.5

    ids = [lane.id for lane in scenario.lanes]
    if len(set(ids)) != len(ids):
        out.append("duplicate lane ids")
    lanes = {lane.id: lane for lane in scenario.lanes}

    for lane in scenario.lanes:
        if isinstance(lane, MacroLaneState):
            if not lane.dx > 0:
                out.append(f"lane {lane.id}: dx must be positive")
            if not lane.u_max > 0:
                out.append(f"lane {lane.id}: u_max must be positive")
            if lane.num_cells == 0:
                out.append(f"lane {lane.id}: no cells")
            if lane.dx > 0 and lane.u_max > 0:
                for i, (r, y) in enumerate(zip(lane.rho, lane.y)):
                    _check_cell(f"lane {lane.id} cell {i}", r, y, lane.u_max, gamma, cfg.eps_rho, out)
                speed = lane.u_max
                for r, y in zip(lane.rho, lane.y):
                    if 0 <= r <= 1 and math.isfinite(y):
                        u = _admissible_velocity(r, y, lane.u_max, gamma, cfg.eps_rho)
                        lam1 = u - gamma * lane.u_max * max(r, 0.0) ** gamma
                        speed = max(speed, abs(u), abs(lam1))
                if cfg.dt > 0 and cfg.dt * speed > lane.dx * (1 + 1e-12):
                    out.append(f"CFL violation on lane {lane.id}")
            for side, bc in (("upstream", lane.upstream_boundary), ("downstream", lane.downstream_boundary)):
                if bc.kind is BoundaryKind.INFLOW:
                    if bc.q is None:
                        out.append(f"lane {lane.id}: {side} inflow without state")
                    elif lane.u_max > 0:
                        _check_cell(
                            f"lane {lane.id} {side} inflow", bc.q.rho, bc.q.y, lane.u_max, gamma, cfg.eps_rho, out
                        )
                if bc.kind is BoundaryKind.SIGNAL:
                    if side != "downstream":
                        out.append(f"lane {lane.id}: signal boundary must be downstream")
                    if bc.approach not in ("WE", "NS"):
                        out.append(f"lane {lane.id}: signal approach must be WE or NS")
                    if scenario.controls.signal is None:
                        out.append(f"lane {lane.id}: signal boundary without a signal plan")
        elif isinstance(lane, MicroLaneState):
            if not lane.length > 0:
                out.append(f"lane {lane.id}: length must be positive")
            for key, (lo, hi) in lane.ranges.items():
                if not (0 < lo <= hi):
                    out.append(f"lane {lane.id}: bad parameter range for {key}")
            prev = None
            for k, veh in enumerate(lane.vehicles):
                for name in IdmParams.FIELDS:
                    if not getattr(veh.params, name) > 0:
                        out.append(f"lane {lane.id} vehicle {k}: {name} must be positive")
                if veh.v < 0:
                    out.append(f"lane {lane.id} vehicle {k}: negative velocity")
                if not (0 <= veh.p <= lane.length):
                    out.append(f"lane {lane.id} vehicle {k}: position outside lane")
                if prev is not None and prev.p - veh.p - prev.params.length <= 0:
                    out.append(f"lane {lane.id} vehicle {k}: non-positive gap to leader")
                prev = veh
            if lane.lead_boundary is not None and lane.vehicles:
                if lane.lead_boundary.p - lane.vehicles[0].p <= 0:
                    out.append(f"lane {lane.id}: non-positive gap to virtual leader")
        else:
            out.append(f"unknown lane type {type(lane).__name__}")

    seen_up, seen_down = set(), set()
    for link in scenario.links:
        if link.upstream not in lanes or link.downstream not in lanes:
            out.append(f"link {link.upstream}->{link.downstream}: unknown lane")
            continue
        ku, kd = lanes[link.upstream].kind, lanes[link.downstream].kind
        if ku == kd:
            out.append(f"link {link.upstream}->{link.downstream}: must join macro and micro lanes")
        if link.upstream in seen_up:
            out.append(f"lane {link.upstream}: more than one downstream link")
        if link.downstream in seen_down:
            out.append(f"lane {link.downstream}: more than one upstream link")
        seen_up.add(link.upstream)
        seen_down.add(link.downstream)
        up = lanes[link.upstream]
        if isinstance(up, MacroLaneState) and up.downstream_boundary.kind in (
            BoundaryKind.WALL,
            BoundaryKind.SIGNAL,
            BoundaryKind.INFLOW,
        ):
            out.append(f"lane {up.id}: linked downstream end must be outflow")
    if all(link.upstream in lanes and link.downstream in lanes for link in scenario.links):
        try:
            scenario.topology.topological_order()
        except ScenarioError as exc:
            out.append(str(exc))

    ctl = scenario.controls
    if ctl.pace_car is not None:
        pc = ctl.pace_car
        lane = lanes.get(pc.lane)
        if not isinstance(lane, MicroLaneState):
            out.append("pace car lane must be a micro lane")
        elif not 0 <= pc.vehicle < len(lane.vehicles):
            out.append("pace car vehicle index out of range")
        lo, hi = pc.bounds
        if not (math.isfinite(lo) and math.isfinite(hi) and lo < hi):
            out.append("pace car bounds must be finite with lo < hi")
        if not all(math.isfinite(a) for a in pc.accel):
            out.append("pace car accelerations must be finite")
    if ctl.signal is not None:
        for k, (a, b) in enumerate(ctl.signal.phases):
            if not (a >= 0 and b >= 0 and a + b > 0):
                out.append(f"signal phase {k}: durations must be non-negative with positive cycle")
    return out

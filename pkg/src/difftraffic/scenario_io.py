"""JSON scenario files.

Layout (field names match the dataclass fields)::

    {
      "config":   {"dt": 0.1, "gamma": 0.5, "delta_exponent": 4.0, "grad_clip": null,
                   "rng_seed": 0, "conversion_mode": "deterministic", "eps_rho": 1e-8,
                   "mean_vehicle_length": 5.0, "conversion_surrogate": true, "grad_params": []},
      "lanes":    [{"kind": "macro", "id": "up", "rho": [...], "y": [...], "dx": 50.0, "u_max": 30.0,
                    "upstream_boundary": {"kind": "inflow", "q": [0.3, -1.8]},
                    "downstream_boundary": {"kind": "outflow"}},
                   {"kind": "micro", "id": "mid", "length": 300.0, "lead_boundary": null,
                    "param_ranges": {"t_pref": [1.0, 1.5], ...}}],
      "links":    [{"upstream": "up", "downstream": "mid"}],
      "vehicles": {"mid": [{"p": 280.0, "v": 12.0, "id": 0,
                            "params": {"s_min": 2.0, "t_pref": 1.2, "a_max": 1.5,
                                       "a_pref": 2.0, "v_targ": 30.0, "length": 5.0}}]},
      "controls": {"pace_car": {"lane": "mid", "vehicle": 0, "accel": [...], "bounds": [-3, 3]},
                   "signal": {"phases": [[15.0, 15.0]], "min_green": 2.0}}
    }

Densities ``rho`` are normalized (cars per car length); multiply by
``1 / mean_vehicle_length`` for vehicles per meter. ``y = rho * (u - u_eq)``.
Boundary ``q`` is ``[rho, y]``; signal boundaries carry ``"approach": "WE"``
or ``"NS"``. ``config``, ``links``, ``vehicles`` and ``controls`` may be
omitted; everything else is required. Vehicles are listed downstream first.
"""

from __future__ import annotations

import json
from dataclasses import fields

from .core import (
    DEFAULT_PARAM_RANGES,
    BoundaryCondition,
    ConversionMode,
    Controls,
    IdmParams,
    Link,
    MacroLaneState,
    MicroLaneState,
    PaceCarControl,
    Scenario,
    ScenarioError,
    SignalPlan,
    SolverConfig,
    VehicleState,
    VirtualLeader,
)

TOP_KEYS = ("config", "lanes", "links", "vehicles", "controls")


class ScenarioFormatError(ScenarioError):
    """Malformed scenario document; ``key`` is the dotted path at fault."""

    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


def _req(obj, key, path):
    if not isinstance(obj, dict):
        raise ScenarioFormatError(path, "expected an object")
    if key not in obj:
        raise ScenarioFormatError(f"{path}.{key}" if path else key, "missing key")
    return obj[key]


def _num(val, path, allow_none=False):
    if val is None and allow_none:
        return None
    if isinstance(val, bool) or not isinstance(val, (int, float)):
        raise ScenarioFormatError(path, f"expected a number, got {val!r}")
    return float(val)


def _nums(val, path):
    if not isinstance(val, list):
        raise ScenarioFormatError(path, "expected a list of numbers")
    return [_num(x, f"{path}[{i}]") for i, x in enumerate(val)]


def _unknown(obj, allowed, path):
    extra = sorted(set(obj) - set(allowed))
    if extra:
        key = f"{path}.{extra[0]}" if path else extra[0]
        raise ScenarioFormatError(key, "unknown key")


def _config(obj) -> SolverConfig:
    if not isinstance(obj, dict):
        raise ScenarioFormatError("config", "expected an object")
    names = [f.name for f in fields(SolverConfig)]
    _unknown(obj, names, "config")
    kw = {}
    for k, v in obj.items():
        path = f"config.{k}"
        if k == "conversion_mode":
            try:
                kw[k] = ConversionMode(v)
            except ValueError:
                raise ScenarioFormatError(path, f"unknown mode {v!r}") from None
        elif k in ("rng_seed",):
            if isinstance(v, bool) or not isinstance(v, int):
                raise ScenarioFormatError(path, "expected an integer")
            kw[k] = v
        elif k == "conversion_surrogate":
            if not isinstance(v, bool):
                raise ScenarioFormatError(path, "expected true or false")
            kw[k] = v
        elif k == "grad_params":
            if not isinstance(v, list) or not all(isinstance(x, str) for x in v):
                raise ScenarioFormatError(path, "expected a list of names")
            kw[k] = tuple(v)
        else:
            kw[k] = _num(v, path, allow_none=(k == "grad_clip"))
    try:
        return SolverConfig(**kw)
    except (TypeError, ValueError) as exc:
        raise ScenarioFormatError("config", str(exc)) from None


def _boundary(obj, path) -> BoundaryCondition:
    kind = _req(obj, "kind", path)
    _unknown(obj, ("kind", "q", "approach"), path)
    if kind == "inflow":
        q = _nums(_req(obj, "q", path), f"{path}.q")
        if len(q) != 2:
            raise ScenarioFormatError(f"{path}.q", "expected [rho, y]")
        return BoundaryCondition.inflow(*q)
    if kind == "outflow":
        return BoundaryCondition.outflow()
    if kind == "wall":
        return BoundaryCondition.wall()
    if kind == "signal":
        return BoundaryCondition.signal(str(_req(obj, "approach", path)))
    raise ScenarioFormatError(f"{path}.kind", f"unknown boundary {kind!r}")


def _params(obj, path) -> IdmParams:
    if not isinstance(obj, dict):
        raise ScenarioFormatError(path, "expected an object")
    names = [f.name for f in fields(IdmParams)]
    _unknown(obj, names, path)
    return IdmParams(**{k: _num(v, f"{path}.{k}") for k, v in obj.items()})


def _vehicles(obj, path) -> list:
    if not isinstance(obj, list):
        raise ScenarioFormatError(path, "expected a list")
    out = []
    for j, v in enumerate(obj):
        vp = f"{path}[{j}]"
        _unknown(v if isinstance(v, dict) else {}, ("p", "v", "params", "id"), vp)
        vid = v.get("id") if isinstance(v, dict) else None
        if vid is not None and (isinstance(vid, bool) or not isinstance(vid, int)):
            raise ScenarioFormatError(f"{vp}.id", "expected an integer")
        prm = _params(v["params"], f"{vp}.params") if isinstance(v, dict) and "params" in v else IdmParams()
        out.append(VehicleState(_num(_req(v, "p", vp), f"{vp}.p"), _num(_req(v, "v", vp), f"{vp}.v"), prm, vid))
    return out


def _lane(obj, path, vehicles):
    kind = _req(obj, "kind", path)
    lid = str(_req(obj, "id", path))
    if kind == "macro":
        _unknown(obj, ("kind", "id", "rho", "y", "dx", "u_max", "upstream_boundary", "downstream_boundary"), path)
        rho = _nums(_req(obj, "rho", path), f"{path}.rho")
        y = _nums(_req(obj, "y", path), f"{path}.y")
        if len(rho) != len(y):
            raise ScenarioFormatError(f"{path}.y", "length differs from rho")
        up = _boundary(obj.get("upstream_boundary", {"kind": "outflow"}), f"{path}.upstream_boundary")
        down = _boundary(obj.get("downstream_boundary", {"kind": "outflow"}), f"{path}.downstream_boundary")
        return MacroLaneState(lid, rho, y, _num(_req(obj, "dx", path), f"{path}.dx"),
                              _num(_req(obj, "u_max", path), f"{path}.u_max"), up, down)
    if kind == "micro":
        _unknown(obj, ("kind", "id", "length", "lead_boundary", "param_ranges"), path)
        lb = obj.get("lead_boundary")
        lead = None
        if lb is not None:
            _unknown(lb, ("p", "v"), f"{path}.lead_boundary")
            lead = VirtualLeader(_num(_req(lb, "p", f"{path}.lead_boundary"), f"{path}.lead_boundary.p"),
                                 _num(lb.get("v", 0.0), f"{path}.lead_boundary.v"))
        ranges = {}
        for k, v in (obj.get("param_ranges") or {}).items():
            rp = f"{path}.param_ranges.{k}"
            if k not in DEFAULT_PARAM_RANGES:
                raise ScenarioFormatError(rp, "unknown key")
            pair = _nums(v, rp)
            if len(pair) != 2 or pair[0] > pair[1]:
                raise ScenarioFormatError(rp, "expected [low, high]")
            ranges[k] = tuple(pair)
        return MicroLaneState(lid, _num(_req(obj, "length", path), f"{path}.length"),
                              vehicles.get(lid, ()), lead, tuple(sorted(ranges.items())))
    raise ScenarioFormatError(f"{path}.kind", f"unknown lane kind {kind!r}")


def _controls(obj) -> Controls:
    if obj is None:
        return Controls()
    if not isinstance(obj, dict):
        raise ScenarioFormatError("controls", "expected an object")
    _unknown(obj, ("pace_car", "signal"), "controls")
    pc = obj.get("pace_car")
    pace = None
    if pc is not None:
        p = "controls.pace_car"
        _unknown(pc, ("lane", "vehicle", "accel", "bounds"), p)
        vid = _req(pc, "vehicle", p)
        if isinstance(vid, bool) or not isinstance(vid, int):
            raise ScenarioFormatError(f"{p}.vehicle", "expected an integer")
        bounds = _nums(pc.get("bounds", [-3.0, 3.0]), f"{p}.bounds")
        pace = PaceCarControl(str(_req(pc, "lane", p)), vid, _nums(_req(pc, "accel", p), f"{p}.accel"), bounds)
    sg = obj.get("signal")
    signal = None
    if sg is not None:
        p = "controls.signal"
        _unknown(sg, ("phases", "min_green"), p)
        phases = _req(sg, "phases", p)
        if not isinstance(phases, list):
            raise ScenarioFormatError(f"{p}.phases", "expected a list")
        ph = []
        for i, pair in enumerate(phases):
            vals = _nums(pair, f"{p}.phases[{i}]")
            if len(vals) != 2:
                raise ScenarioFormatError(f"{p}.phases[{i}]", "expected [t_we, t_ns]")
            ph.append(tuple(vals))
        signal = SignalPlan(tuple(ph), _num(sg.get("min_green", 1.0), f"{p}.min_green"))
    return Controls(pace, signal)


def scenario_from_dict(doc: dict) -> Scenario:
    """Build a ``Scenario`` from a parsed document; raises ``ScenarioFormatError``."""
    if not isinstance(doc, dict):
        raise ScenarioFormatError("<root>", "expected an object")
    _unknown(doc, TOP_KEYS, "")
    config = _config(doc.get("config", {}))
    raw_veh = doc.get("vehicles") or {}
    if not isinstance(raw_veh, dict):
        raise ScenarioFormatError("vehicles", "expected an object keyed by lane id")
    vehicles = {str(k): _vehicles(v, f"vehicles.{k}") for k, v in raw_veh.items()}
    lanes_doc = _req(doc, "lanes", "")
    if not isinstance(lanes_doc, list):
        raise ScenarioFormatError("lanes", "expected a list")
    lanes = tuple(_lane(obj, f"lanes[{i}]", vehicles) for i, obj in enumerate(lanes_doc))
    micro_ids = {lane.id for lane in lanes if isinstance(lane, MicroLaneState)}
    for k in vehicles:
        if k not in micro_ids:
            raise ScenarioFormatError(f"vehicles.{k}", "no micro lane with this id")
    links = []
    for i, ln in enumerate(doc.get("links") or []):
        p = f"links[{i}]"
        _unknown(ln, ("upstream", "downstream"), p)
        links.append(Link(str(_req(ln, "upstream", p)), str(_req(ln, "downstream", p))))
    try:
        return Scenario(config, lanes, tuple(links), _controls(doc.get("controls")))
    except ScenarioFormatError:
        raise
    except (TypeError, ValueError) as exc:
        raise ScenarioFormatError("lanes", str(exc)) from None


def parse_scenario(text: str) -> Scenario:
    """Parse a JSON document. Syntax errors report line and column."""
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ScenarioFormatError(f"line {exc.lineno} column {exc.colno}", exc.msg) from None
    return scenario_from_dict(doc)


def load_scenario(path) -> Scenario:
    with open(path, encoding="utf-8") as fh:
        return parse_scenario(fh.read())


def _boundary_dict(b: BoundaryCondition) -> dict:
    out = {"kind": b.kind.value}
    if b.q is not None:
        out["q"] = [float(b.q[0]), float(b.q[1])]
    if b.approach is not None:
        out["approach"] = b.approach
    return out


def _params_dict(p: IdmParams) -> dict:
    return {f.name: float(getattr(p, f.name)) for f in fields(IdmParams)}


def scenario_to_dict(sc: Scenario) -> dict:
    cfg = sc.config
    config = {}
    for f in fields(SolverConfig):
        v = getattr(cfg, f.name)
        if f.name == "conversion_mode":
            v = ConversionMode(v).value
        elif f.name == "grad_params":
            v = list(v)
        config[f.name] = v
    lanes, vehicles = [], {}
    for lane in sc.lanes:
        if isinstance(lane, MacroLaneState):
            lanes.append({
                "kind": "macro", "id": lane.id, "rho": [float(x) for x in lane.rho], "y": [float(x) for x in lane.y],
                "dx": float(lane.dx), "u_max": float(lane.u_max),
                "upstream_boundary": _boundary_dict(lane.upstream_boundary),
                "downstream_boundary": _boundary_dict(lane.downstream_boundary),
            })
        else:
            lb = lane.lead_boundary
            lanes.append({
                "kind": "micro", "id": lane.id, "length": float(lane.length),
                "lead_boundary": None if lb is None else {"p": float(lb.p), "v": float(lb.v)},
                "param_ranges": {k: [float(a), float(b)] for k, (a, b) in lane.param_ranges},
            })
            vehicles[lane.id] = [
                {"p": float(v.p), "v": float(v.v), "id": v.id, "params": _params_dict(v.params)} for v in lane.vehicles
            ]
    pc, sg = sc.controls.pace_car, sc.controls.signal
    controls = {
        "pace_car": None if pc is None else {"lane": pc.lane, "vehicle": pc.vehicle, "accel": list(pc.accel),
                                             "bounds": list(pc.bounds)},
        "signal": None if sg is None else {"phases": [list(p) for p in sg.phases], "min_green": float(sg.min_green)},
    }
    return {
        "config": config,
        "lanes": lanes,
        "links": [{"upstream": ln.upstream, "downstream": ln.downstream} for ln in sc.links],
        "vehicles": vehicles,
        "controls": controls,
    }


def dumps_scenario(sc: Scenario) -> str:
    return json.dumps(scenario_to_dict(sc), indent=1) + "\n"


def save_scenario(sc: Scenario, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(dumps_scenario(sc))

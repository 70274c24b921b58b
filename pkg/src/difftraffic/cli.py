"""Command-line entry point: ``difftraffic <subcommand> ...``.

Exit codes: 0 success, 1 simulation or optimization failure, 2 input error.
Set ``DIFFTRAFFIC_LOG`` to a logging level name (``DEBUG``, ``INFO``, ...)
for diagnostics on stderr.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import bench as bench_mod
from .core import CflViolation, CollisionError, ConversionMode, MacroLaneState, Scenario, ScenarioError
from .engine import (
    StateGradient,
    backward,
    finite_diff_gradient,
    input_vector,
    simulate,
    simulate_and_record,
    with_inputs,
)
from .optimize import (
    EstimationProblem,
    PaceCarProblem,
    SignalProblem,
    estimate_initial_state,
    optimize_pace_car,
    optimize_signal_timing,
    pace_car_rollout,
    signal_rollout,
)
from .scenario_io import ScenarioFormatError, dumps_scenario, load_scenario
from .scenarios import random_initial_guess

REPORT_SCHEMA = 1
log = logging.getLogger("difftraffic")


class InputError(Exception):
    """Bad command-line input; exit code 2."""


def _f(x) -> str:
    return f"{float(x):.17g}"


def _write_json(path: Path, doc) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(doc, fh, indent=1, default=_json_default)
        fh.write("\n")


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer, np.bool_)):
        return o.item()
    if isinstance(o, ConversionMode):
        return o.value
    raise TypeError(f"not serializable: {type(o).__name__}")


def _load(args) -> Scenario:
    if not args.scenario:
        raise InputError("--scenario is required")
    try:
        sc = load_scenario(args.scenario)
    except OSError as exc:
        raise InputError(f"cannot read scenario: {exc}") from None
    cfg = sc.config
    changes = {}
    if getattr(args, "seed", None) is not None:
        changes["rng_seed"] = args.seed
    if getattr(args, "mode", None) is not None:
        changes["conversion_mode"] = ConversionMode.STOCHASTIC if args.mode == "stoch" else ConversionMode.DETERMINISTIC
    if changes:
        sc = Scenario(dataclasses.replace(cfg, **changes), sc.lanes, sc.links, sc.controls)
    return sc


def _out_dir(args) -> Path:
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _config_echo(sc: Scenario) -> dict:
    return {f.name: getattr(sc.config, f.name) for f in dataclasses.fields(sc.config)}


# -- simulate -------------------------------------------------------------------------

TRAJECTORY_COLUMNS = ("step", "time", "lane", "kind", "index", "vehicle_id", "rho", "y", "u", "p", "v")


def _trajectory_rows(k, t, state, scenario):
    from .arz import velocities

    cfg = scenario.config
    for lane in scenario.lanes:
        cur = state.lanes[lane.id]
        if isinstance(lane, MacroLaneState):
            u = velocities(cur.rho, cur.y, lane.u_max, cfg.gamma, cfg.eps_rho)
            for c in range(lane.num_cells):
                yield (k, _f(t), lane.id, "cell", c, "", _f(cur.rho[c]), _f(cur.y[c]), _f(u[c]), "", "")
        else:
            for j, veh in enumerate(cur.vehicles):
                yield (k, _f(t), lane.id, "vehicle", j, veh.id, "", "", "", _f(veh.p), _f(veh.v))


def cmd_simulate(args) -> int:
    sc = _load(args)
    out = _out_dir(args)
    steps = args.steps
    t0 = time.perf_counter()
    try:
        final, tape = simulate_and_record(sc, steps)
    except (CflViolation, CollisionError) as exc:
        log.error("simulation failed: %s", exc)
        _write_json(out / "report.json", {"schema_version": REPORT_SCHEMA, "status": "failed", "error": str(exc)})
        print(f"error: {exc}", file=sys.stderr)
        return 1
    elapsed = time.perf_counter() - t0
    from .engine import trajectory

    states = trajectory(tape)
    with open(out / "trajectory.csv", "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRAJECTORY_COLUMNS)
        for k, st in enumerate(states):
            w.writerows(_trajectory_rows(k, k * sc.config.dt, st, sc))
    audit0 = states[0].mass_audit(sc.config)
    audit1 = final.mass_audit(sc.config)
    lanes = {}
    for lane in sc.lanes:
        cur = final.lanes[lane.id]
        if isinstance(lane, MacroLaneState):
            lanes[lane.id] = {"kind": "macro", "cells": lane.num_cells,
                              "mass": float(np.sum(cur.rho) * lane.dx / sc.config.mean_vehicle_length),
                              "outflow": float(final.outflow.get(lane.id, 0.0))}
        else:
            lanes[lane.id] = {"kind": "micro", "vehicles": len(cur.vehicles)}
    report = {
        "schema_version": REPORT_SCHEMA,
        "status": "ok",
        "steps": steps,
        "forward_seconds": elapsed,
        "steps_per_sec": steps / elapsed if elapsed > 0 else None,
        "lanes": lanes,
        "warnings": {"density_clamps": int(final.clamp_count),
                     "mass_drift_vehicles": float(audit1 - audit0)},
        "config": _config_echo(sc),
    }
    _write_json(out / "report.json", report)
    print(f"simulated {steps} steps in {elapsed:.3f} s; wrote {out / 'trajectory.csv'}")
    return 0


# -- gradcheck ------------------------------------------------------------------------


def _loss(name: str):
    """``loss(final)`` and its seed ``StateGradient``."""

    def value(st):
        tot = 0.0
        for lane in st.lanes.values():
            if isinstance(lane, MacroLaneState):
                tot += float(np.sum(lane.rho)) if name == "sum_rho" else 0.5 * float(np.sum(lane.rho**2 + lane.y**2))
            elif name == "sum_sq":
                tot += 0.5 * sum(v.p**2 + v.v**2 for v in lane.vehicles)
        return tot

    def seed(st):
        g = StateGradient()
        for lid, lane in st.lanes.items():
            if isinstance(lane, MacroLaneState):
                if name == "sum_rho":
                    g.macro[lid] = np.stack([np.ones_like(lane.rho), np.zeros_like(lane.y)], 1)
                else:
                    g.macro[lid] = np.stack([lane.rho, lane.y], 1)
            elif name == "sum_sq":
                g.micro[lid] = {v.id: np.array([v.p, v.v]) for v in lane.vehicles}
        return g

    if name not in ("sum_rho", "sum_sq"):
        raise InputError(f"unknown loss {name!r}")
    return value, seed


def _blocks(sc: Scenario) -> list:
    """``(name, start, size)`` in input-vector order."""
    out, pos = [], 0
    for lane in sc.lanes:
        if isinstance(lane, MacroLaneState):
            out.append((f"macro:{lane.id}", pos, 2 * lane.num_cells))
            pos += 2 * lane.num_cells
    for lane in sc.lanes:
        if not isinstance(lane, MacroLaneState):
            out.append((f"micro:{lane.id}", pos, 2 * len(lane.vehicles)))
            pos += 2 * len(lane.vehicles)
    if sc.controls.pace_car is not None:
        n = len(sc.controls.pace_car.accel)
        out.append(("controls:pace_car", pos, n))
        pos += n
    if sc.controls.signal is not None:
        n = len(sc.controls.signal.phases)
        out.append(("controls:signal", pos, n))
        pos += n
    if "u_max" in sc.config.grad_params:
        n = sum(isinstance(lane, MacroLaneState) for lane in sc.lanes)
        out.append(("params:u_max", pos, n))
    return out


def gradcheck(sc: Scenario, steps: int, loss_name: str = "sum_sq", trials: int = 10, h: float = 1e-6,
              tolerance: float = 1e-4, seed: int = 0, kink_tol: float = 1e-3) -> dict:
    """Compare ``backward`` with central differences on sampled coordinates.

    ``trials`` coordinates are drawn per block (all of them if the block is
    smaller). A coordinate whose one-sided differences disagree by more than
    ``kink_tol`` (relative) sits on a case switch or clamp and is excluded.
    A difference at the central difference's roundoff level maps to ``tolerance``.
    """
    value, seed_fn = _loss(loss_name)
    final, tape = simulate_and_record(sc, steps)
    f0 = value(final)
    analytic = backward(tape, seed_fn(final), conversion_surrogate=False).flat()
    x0 = input_vector(sc)
    rng = np.random.default_rng(seed)

    def f_at(x):
        return value(simulate(with_inputs(sc, x), steps))

    rows = []
    for name, start, size in _blocks(sc):
        if trials <= 0 or size == 0:
            continue
        idx = np.sort(rng.choice(size, size=min(trials, size), replace=False)) + start
        errs, excluded = [], []
        for j in idx:
            e = np.zeros_like(x0)
            e[j] = h
            fp, fm = f_at(x0 + e), f_at(x0 - e)
            fwd, bwd = (fp - f0) / h, (f0 - fm) / h
            if abs(fwd - bwd) > kink_tol * max(abs(fwd), abs(bwd), 1.0):
                excluded.append(int(j))
                continue
            fd = (fp - fm) / (2 * h)
            a = analytic[j]
            noise = 64 * np.finfo(float).eps * max(abs(fp), abs(fm), 1.0) / h  # FD roundoff
            errs.append(abs(a - fd) / max(abs(a), abs(fd), noise / tolerance))
        max_err = max(errs) if errs else 0.0
        rows.append({"block": name, "checked": len(errs), "excluded": excluded, "max_rel_err": float(max_err),
                     "flagged_excluded": bool(excluded), "pass": bool(max_err <= tolerance)})
    return {"schema_version": REPORT_SCHEMA, "loss": loss_name, "steps": steps, "h": h, "tolerance": tolerance,
            "trials": trials, "blocks": rows, "pass": bool(all(r["pass"] for r in rows))}


def cmd_gradcheck(args) -> int:
    sc = _load(args)
    out = _out_dir(args)
    tol = args.tolerance if args.tolerance is not None else 1e-4
    h = args.h if args.h is not None else 1e-6
    try:
        verdict = gradcheck(sc, args.steps, args.loss, args.trials, h, tol, args.seed or 0)
    except (CflViolation, CollisionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    _write_json(out / "gradcheck.json", verdict)
    print(f"{'block':24s} {'checked':>7s} {'excluded':>8s} {'max_rel_err':>12s} result")
    for r in verdict["blocks"]:
        print(f"{r['block']:24s} {r['checked']:7d} {len(r['excluded']):8d} {r['max_rel_err']:12.3e} "
              f"{'PASS' if r['pass'] else 'FAIL'}")
    print("PASS" if verdict["pass"] else "FAIL")
    return 0 if verdict["pass"] else 1


# -- bench ----------------------------------------------------------------------------


def _parse_scale(text: str):
    try:
        cells, steps = text.lower().split("x")
        return int(cells), int(steps)
    except ValueError:
        raise InputError(f"--scale expects CELLSxSTEPS, got {text!r}") from None


def cmd_bench(args) -> int:
    out = _out_dir(args)
    scales = [_parse_scale(s) for s in args.scale] if args.scale else list(bench_mod.SCALE_LABELS)
    report = {"schema_version": REPORT_SCHEMA, "threads": args.threads, "timing": [], "eps_sweep": None}
    with open(out / "timing.csv", "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["cells", "steps", "dim", "forward_s", "recorded_s", "backward_s", "fd_total_s", "speedup",
                    "bp_over_fw", "cv_max"])
        for cells, steps in scales:
            t = bench_mod.gradient_timing(cells, steps, args.repeats, args.fd_sample, args.seed or 0)
            s = t.summary()
            report["timing"].append(s)
            w.writerow([cells, steps, t.dim, _f(np.median(t.forward)), _f(np.median(t.recorded)),
                        _f(np.median(t.backward)), _f(np.median(t.fd_total)), _f(t.speedup), _f(t.bp_over_fw),
                        _f(max(t.cv.values()))])
            print(f"{cells} cells / {steps} steps: speedup {t.speedup:.1f}x, backward/forward "
                  f"{t.bp_over_fw:.2f}, max CV {max(t.cv.values()):.3f}")
    ok = True
    if not args.no_sweep:
        rows = bench_mod.eps_sweep(steps=args.sweep_steps, repeats=args.sweep_repeats)
        mono = bench_mod.monotone_non_increasing(rows)
        report["eps_sweep"] = {"rows": [dataclasses.asdict(r) for r in rows], "monotone_non_increasing": mono}
        with open(out / "eps_sweep.csv", "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["eps", "lanes", "steps_per_sec"])
            for r in rows:
                w.writerow([_f(r.eps), r.lanes, _f(r.steps_per_sec)])
                print(f"eps {r.eps:<5} {r.steps_per_sec:8.1f} steps/s")
        print("eps sweep monotone non-increasing:", mono)
        ok = mono
    _write_json(out / "bench.json", report)
    return 0 if ok or not args.strict else 1


# -- estimate / control ---------------------------------------------------------------


def _load_problem(path) -> dict:
    if not path:
        raise InputError("--problem is required")
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise InputError(f"cannot read problem file: {exc}") from None
    except json.JSONDecodeError as exc:
        raise InputError(f"problem file line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    if not isinstance(doc, dict):
        raise InputError("problem file: expected an object")
    return doc


def _key(doc, key, kind=float):
    if key not in doc:
        raise InputError(f"problem file: missing key '{key}'")
    try:
        return kind(doc[key])
    except (TypeError, ValueError):
        raise InputError(f"problem file: bad value for key '{key}'") from None


def cmd_estimate(args) -> int:
    truth = _load(args)
    spec = _load_problem(args.problem)
    out = _out_dir(args)
    steps = _key(spec, "steps", int)
    if args.steps is not None:
        steps = args.steps
    guess_seed = int(spec.get("guess_seed", args.seed if args.seed is not None else 1))
    tol = args.tolerance if args.tolerance is not None else float(spec.get("tolerance", 0.0))
    try:
        target = simulate(truth, steps)
        guess = random_initial_guess(truth, guess_seed)
        problem = EstimationProblem(truth, target, steps, iterations=int(spec.get("iterations", 500)),
                                    step_size=float(spec.get("step_size", 0.05)), tolerance=tol)
        est, hist = estimate_initial_state(problem, guess)
    except (CflViolation, CollisionError, ScenarioError) as exc:
        print(f"error: estimation failed: {exc}", file=sys.stderr)
        return 1
    hist.write_csv(out / "history.csv")
    with open(out / "estimate.json", "w", encoding="utf-8", newline="\n") as fh:
        fh.write(dumps_scenario(est))
    v = hist.values
    report = {"schema_version": REPORT_SCHEMA, "iterations": len(v) - 1, "initial_loss": v[0], "final_loss": v[-1],
              "reduction": v[0] / v[-1] if v[-1] > 0 else float("inf"), "config": _config_echo(truth)}
    _write_json(out / "report.json", report)
    print(f"loss {v[0]:.6g} -> {v[-1]:.6g} in {len(v) - 1} iterations")
    return 0


def _v_targ(spec, frames):
    vt = spec.get("v_targ")
    if vt is None:
        raise InputError("problem file: missing key 'v_targ'")
    if isinstance(vt, dict):
        before, after = _key(vt, "before"), _key(vt, "after")
        at = _key(vt, "at", int)
        return np.array([before] * at + [after] * (frames - at), dtype=float)
    if isinstance(vt, (int, float)):
        return np.full(frames, float(vt))
    arr = np.asarray(vt, dtype=float)
    if arr.size != frames:
        raise InputError("problem file: 'v_targ' needs one value per frame")
    return arr


def cmd_control(args) -> int:
    sc = _load(args)
    spec = _load_problem(args.problem)
    out = _out_dir(args)
    kind = _key(spec, "kind", str)
    try:
        if kind == "pace_car":
            if sc.controls.pace_car is None:
                raise InputError("scenario has no pace_car control")
            frames = _key(spec, "frames", int)
            prob = PaceCarProblem(sc, _v_targ(spec, frames), float(spec.get("c_max", 100.0)),
                                  int(spec.get("iterations", 100)), float(spec.get("step_size", 0.01)))
            best, hist = optimize_pace_car(prob)
            zero, _ = pace_car_rollout(prob, np.zeros(frames))
            solution = {"accel": best.tolist()}
            extra = {"zero_control_reward": zero}
        elif kind == "signal":
            if sc.controls.signal is None:
                raise InputError("scenario has no signal control")
            steps = _key(spec, "steps", int)
            prob = SignalProblem(sc, steps, float(spec.get("c1", 1.0)), float(spec.get("c2", -1.0)),
                                 spec.get("threshold"), spec.get("width"), int(spec.get("iterations", 60)),
                                 float(spec.get("step_size", 0.5)))
            best, hist = optimize_signal_timing(prob)
            ev = signal_rollout(prob, best)
            cyc = sc.controls.signal.cycle_lengths
            solution = {"we_green": best.tolist(), "ns_green": (cyc - best).tolist()}
            extra = {"flow": ev.flow, "queue_smooth": ev.queue_smooth, "queue_cells": ev.queue_hard}
        else:
            raise InputError(f"problem file: unknown kind {kind!r}")
    except (CflViolation, CollisionError) as exc:
        print(f"error: control optimization failed: {exc}", file=sys.stderr)
        return 1
    hist.write_csv(out / "history.csv")
    _write_json(out / "solution.json", solution)
    v = hist.values
    report = {"schema_version": REPORT_SCHEMA, "kind": kind, "iterations": len(v) - 1, "initial_reward": v[0],
              "final_reward": v[-1], **extra, "config": _config_echo(sc)}
    _write_json(out / "report.json", report)
    print(f"reward {v[0]:.6g} -> {v[-1]:.6g} in {len(v) - 1} iterations")
    return 0


# -- entry ----------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="difftraffic", description="Differentiable hybrid traffic simulation.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, scenario_required=True):
        sp.add_argument("--scenario", required=scenario_required, help="scenario JSON file")
        sp.add_argument("--out", default=".", help="output directory")
        sp.add_argument("--seed", type=int, default=None, help="override the scenario rng seed")
        sp.add_argument("--mode", choices=("det", "stoch"), default=None, help="conversion mode override")
        sp.add_argument("--threads", type=int, default=1, help="BLAS/OpenMP threads (default 1)")

    s = sub.add_parser("simulate", help="run a scenario and write the trajectory")
    common(s)
    s.add_argument("--steps", type=int, required=True)
    s.set_defaults(func=cmd_simulate)

    g = sub.add_parser("gradcheck", help="compare analytical gradients with finite differences")
    common(g)
    g.add_argument("--steps", type=int, default=10)
    g.add_argument("--loss", choices=("sum_sq", "sum_rho"), default="sum_sq")
    g.add_argument("--trials", type=int, default=10, help="coordinates checked per input block")
    g.add_argument("--h", type=float, default=None)
    g.add_argument("--tolerance", type=float, default=None)
    g.set_defaults(func=cmd_gradcheck)

    b = sub.add_parser("bench", help="gradient timing table and micro-fraction sweep")
    common(b, scenario_required=False)
    b.add_argument("--scale", action="append", help="CELLSxSTEPS, repeatable (default 10x1000 and 50x5000)")
    b.add_argument("--repeats", type=int, default=5)
    b.add_argument("--fd-sample", type=int, default=2, help="coordinates probed to extrapolate the FD cost")
    b.add_argument("--sweep-steps", type=int, default=10)
    b.add_argument("--sweep-repeats", type=int, default=30)
    b.add_argument("--no-sweep", action="store_true")
    b.add_argument("--strict", action="store_true", help="exit 1 when the sweep is not monotone")
    b.set_defaults(func=cmd_bench)

    e = sub.add_parser("estimate", help="estimate the initial state that produced a final state")
    common(e)
    e.add_argument("--problem", required=True, help="problem JSON file")
    e.add_argument("--steps", type=int, default=None)
    e.add_argument("--tolerance", type=float, default=None, help="stop when loss <= tolerance * initial")
    e.set_defaults(func=cmd_estimate)

    c = sub.add_parser("control", help="optimize pace-car or signal controls")
    common(c)
    c.add_argument("--problem", required=True, help="problem JSON file")
    c.set_defaults(func=cmd_control)
    return p


def main(argv=None) -> int:
    level = os.environ.get("DIFFTRAFFIC_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse uses exit code 2 for usage errors
        return int(exc.code or 0)
    try:
        with threadpool_limits(limits=max(1, args.threads)):
            return args.func(args)
    except ScenarioFormatError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (InputError, ScenarioError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

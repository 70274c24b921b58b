"""Timing of analytical versus finite-difference gradients, and the
micro-fraction sweep.

All timings use ``time.perf_counter`` with the garbage collector paused,
as ``timeit`` does. The finite-difference total is
extrapolated from a probe of ``fd_sample`` coordinates: each probe costs two
forward runs exactly like every other coordinate, so the full cost is the
probe time scaled by ``dim / fd_sample``.
"""

from __future__ import annotations

import contextlib
import gc
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .core import BoundaryCondition
from .engine import StateGradient, backward, finite_diff_gradient, input_vector, simulate, simulate_and_record
from .scenarios import eps_network, macro_lane_scenario

SCALE_LABELS = ((10, 1000), (50, 5000))
EPS_VALUES = (0.01, 0.02, 0.05, 0.1, 0.2, 0.5)


@contextlib.contextmanager
def _gc_paused():
    enabled = gc.isenabled()
    gc.collect()
    gc.disable()
    try:
        yield
    finally:
        if enabled:
            gc.enable()


def _sum_rho(lane_id):
    return lambda st: float(np.sum(st.lanes[lane_id].rho))


def _cv(xs) -> float:
    xs = np.asarray(xs, dtype=float)
    return float(np.std(xs, ddof=1) / np.mean(xs)) if xs.size > 1 and np.mean(xs) > 0 else 0.0


@dataclass
class GradientTiming:
    n_cells: int
    steps: int
    dim: int
    fd_sample: int
    forward: list = field(default_factory=list)  # plain simulate
    recorded: list = field(default_factory=list)  # simulate with tape
    backward: list = field(default_factory=list)
    fd_total: list = field(default_factory=list)  # extrapolated full FD gradient

    def _med(self, xs):
        return float(np.median(xs))

    @property
    def analytical(self) -> float:
        return self._med(np.add(self.recorded, self.backward))

    @property
    def speedup(self) -> float:
        return self._med(self.fd_total) / self.analytical

    @property
    def bp_over_fw(self) -> float:
        return self._med(self.backward) / self._med(self.forward)

    @property
    def cv(self) -> dict:
        return {k: _cv(getattr(self, k)) for k in ("forward", "recorded", "backward", "fd_total")}

    def summary(self) -> dict:
        out = asdict(self)
        out.update(analytical=self.analytical, speedup=self.speedup, bp_over_fw=self.bp_over_fw, cv=self.cv)
        return out


def gradient_timing(n_cells: int, steps: int, repeats: int = 5, fd_sample: int = 2, seed: int = 0,
                    h: float = 1e-6) -> GradientTiming:
    """Forward, taped forward, backward and extrapolated FD timings on one macro lane."""
    sc = macro_lane_scenario(n_cells, seed=seed, upstream=BoundaryCondition.wall(),
                             downstream=BoundaryCondition.wall())
    lane_id = sc.lanes[0].id
    loss = _sum_rho(lane_id)
    dim = input_vector(sc).size
    rng = np.random.default_rng(seed)
    res = GradientTiming(n_cells, steps, dim, fd_sample)
    seed_grad = StateGradient(macro={lane_id: np.stack([np.ones(n_cells), np.zeros(n_cells)], 1)})
    simulate(sc, min(steps, 10))  # warm-up
    for _ in range(repeats):
        with _gc_paused():
            t0 = time.perf_counter()
            simulate(sc, steps)
            res.forward.append(time.perf_counter() - t0)
        with _gc_paused():
            t0 = time.perf_counter()
            _, tape = simulate_and_record(sc, steps)
            res.recorded.append(time.perf_counter() - t0)
            t0 = time.perf_counter()
            backward(tape, seed_grad, verify=False)
            res.backward.append(time.perf_counter() - t0)
        del tape
        coords = rng.choice(dim, size=min(fd_sample, dim), replace=False)
        with _gc_paused():
            t0 = time.perf_counter()
            finite_diff_gradient(sc, loss, h, steps, coords=coords)
            res.fd_total.append((time.perf_counter() - t0) * dim / len(coords))
    return res


@dataclass
class EpsRow:
    eps: float
    lanes: int
    steps_per_sec: float
    samples: list


def eps_sweep(eps_values=EPS_VALUES, steps: int = 10, repeats: int = 30, total_vehicles: int = 10_000):
    """Steps per second against the micro fraction.

    Repeats are interleaved: each round times every ``eps`` once. Host speed
    drifts between rounds, so log-times are modelled as an ``eps`` effect
    plus a round effect. Each round is divided by its geometric mean, the
    median over rounds gives the ``eps`` effect, and the median round level
    restores the scale. ``samples`` keeps the raw per-round rates.
    """
    scenarios = [eps_network(eps, total_vehicles=total_vehicles) for eps in eps_values]
    for sc in scenarios:
        simulate(sc, 1)
    times = np.empty((repeats, len(scenarios)))
    for r in range(repeats):
        for j, sc in enumerate(scenarios):
            with _gc_paused():
                t0 = time.perf_counter()
                simulate(sc, steps)
                times[r, j] = time.perf_counter() - t0
    logs = np.log(times)
    level = logs.mean(axis=1, keepdims=True)
    per_step = np.exp(np.median(logs - level, axis=0) + np.median(level)) / steps
    return [EpsRow(eps, len(sc.lanes), float(1.0 / t), [float(steps / x) for x in times[:, j]])
            for j, (eps, sc, t) in enumerate(zip(eps_values, scenarios, per_step))]


def monotone_non_increasing(rows) -> bool:
    rates = [r.steps_per_sec for r in rows]
    return all(b <= a for a, b in zip(rates, rates[1:]))

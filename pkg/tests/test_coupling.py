import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from difftraffic.core import IdmParams, SolverConfig, VehicleState
from difftraffic.coupling import (
    AggregationWindow,
    FluxCapacitor,
    aggregate_micro_to_macro,
    backward_through_aggregation,
    backward_through_emission,
    capacitor_accumulate,
    deposit,
    deposit_vjp,
    emission_log_csv,
    poisson_emit,
    window_members,
)

UNIT = SolverConfig(dt=0.1, mean_vehicle_length=1.0)


def _run(rho, v, steps, cfg=UNIT):
    cap = FluxCapacitor()
    emitted = []
    for _ in range(steps):
        cap, out = capacitor_accumulate(cap, rho, v, cfg)
        emitted.append(len(out))
    return cap, emitted


def test_first_emission_at_step_20():
    cap, emitted = _run(0.05, 10.0, 40)  # rho * v = 0.5 veh/s
    assert emitted.index(1) == 19  # step 20, 1-based
    rec = cap.emission_log[0]
    assert rec.step == 20 and rec.time == pytest.approx(2.0)
    assert rec.interval == (0, 20)
    assert rec.v == 10.0
    assert cap.emission_log[1].interval == (20, 40)


def test_same_rate_in_normalized_units():
    # rho = 0.25 cars per car length at 10 m/s with 5 m cars is 0.5 veh/s
    _, emitted = _run(0.25, 10.0, 20, SolverConfig(dt=0.1))
    assert emitted.index(1) == 19


def test_zero_density_never_emits():
    cap, emitted = _run(0.0, 20.0, 1000)
    assert sum(emitted) == 0 and cap.accumulator == 0.0


def test_two_units_in_one_step():
    cap, out = capacitor_accumulate(FluxCapacitor(), 2.3, 10.0, UNIT)
    assert len(out) == 2
    assert cap.emitted_count == 2
    # both units were reached in step 1; the second interval (1, 1] is empty
    assert [r.interval for r in cap.emission_log] == [(0, 1), (1, 1)]


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(0.0, 3.0), min_size=1, max_size=200))
def test_count_is_floor_of_accumulator(rates):
    cap = FluxCapacitor()
    for r in rates:
        cap, _ = capacitor_accumulate(cap, r, 10.0, UNIT)
        assert cap.emitted_count == int(np.floor(cap.accumulator + 1e-9))
    # intervals tile the history without gaps
    ends = [r.interval for r in cap.emission_log]
    for (a0, b0), (a1, b1) in zip(ends, ends[1:]):
        assert a1 == b0
        assert b1 >= a1


def test_emission_csv_columns():
    cap, _ = _run(0.05, 10.0, 20)
    lines = emission_log_csv(cap).splitlines()
    assert lines[0] == "step,time,vehicle_id,v"
    assert lines[1].startswith("20,2.0,0,10.0")


def test_spawn_hook_sets_params():
    prm = IdmParams(v_targ=22.0)
    cap, out = capacitor_accumulate(FluxCapacitor(), 1.0, 10.0, UNIT, spawn=lambda i, v: VehicleState(0.0, v, prm, 100 + i))
    assert out[0].params == prm and out[0].id == 100 and out[0].v == 10.0


@pytest.mark.parametrize("lam", [0.01, 0.05, 0.2])
def test_poisson_mean_within_three_sigma(lam):
    rng = np.random.default_rng(2024)
    cap = FluxCapacitor()
    n = 100_000
    total = 0
    for _ in range(n):
        cap, out = poisson_emit(cap, lam, 1.0, rng, SolverConfig(dt=1.0, mean_vehicle_length=1.0))
        total += len(out)
    mean = total / n
    assert abs(mean - lam) <= 3 * np.sqrt(lam / n)
    assert cap.accumulator == pytest.approx(lam * n, rel=1e-9)


def test_poisson_zero_rate_and_determinism():
    rng = np.random.default_rng(0)
    cap = FluxCapacitor()
    for _ in range(1000):
        cap, out = poisson_emit(cap, 0.0, 10.0, rng, UNIT)
        assert out == []

    def seq(seed):
        g = np.random.default_rng(seed)
        c = FluxCapacitor()
        return [len(poisson_emit(c, 0.3, 10.0, g, UNIT)[1]) for _ in range(500)]

    assert seq(5) == seq(5)


def test_poisson_interval_bookkeeping():
    rng = np.random.default_rng(1)
    cap = FluxCapacitor()
    for _ in range(2000):
        cap, _ = poisson_emit(cap, 0.05, 10.0, rng, UNIT)
    for rec in cap.emission_log:
        k1, k2 = rec.interval
        assert 0 <= k1 <= k2 <= rec.step


def test_aggregation_example():
    vs = [VehicleState(p, v, IdmParams(length=1.0)) for p, v in ((9.5, 3.0), (4.0, 2.0), (1.0, 1.0))]
    win = AggregationWindow(0.0, 10.0, u_max=10.0)
    cell = aggregate_micro_to_macro(vs, win, UNIT)
    assert cell.rho == pytest.approx(0.3, abs=1e-15)
    u = cell.y / cell.rho + 10.0 * (1 - 0.3**0.5)
    assert u == pytest.approx(2.0, abs=1e-12)


def test_aggregation_empty_and_half_open():
    win = AggregationWindow(0.0, 10.0, u_max=10.0)
    assert tuple(aggregate_micro_to_macro([], win, UNIT)) == (0.0, 0.0)
    vs = [VehicleState(10.0, 1.0), VehicleState(0.0, 1.0)]
    assert window_members(vs, win) == [0]
    with pytest.raises(ValueError):
        AggregationWindow(1.0, 1.0, 10.0)


def test_aggregation_gradients():
    win = AggregationWindow(0.0, 10.0, u_max=10.0)
    g = backward_through_aggregation((0.7, 0.0), win, [0, 1, 2], UNIT)
    assert all(gw == pytest.approx(0.07, abs=1e-15) for gw, _ in g.values())
    g = backward_through_aggregation((0.0, 2.0), win, [0, 1, 2, 3], UNIT)
    assert all(gv == 0.5 for _, gv in g.values())
    assert backward_through_aggregation((1.0, 1.0), win, [], UNIT) == {}


def test_aggregation_weight_gradient_matches_formula():
    # d rho / d w_i for the implemented formula, via a perturbed weight
    vs = [VehicleState(p, 1.0) for p in (1.0, 4.0, 9.5)]
    win = AggregationWindow(0.0, 10.0, 10.0)
    cfg = SolverConfig(mean_vehicle_length=5.0)
    h = 1e-6
    rho_p = aggregate_micro_to_macro(vs, AggregationWindow(0.0, 10.0, 10.0, (1.0 + h, 1.0, 1.0)), cfg).rho
    rho_m = aggregate_micro_to_macro(vs, AggregationWindow(0.0, 10.0, 10.0, (1.0 - h, 1.0, 1.0)), cfg).rho
    g = backward_through_aggregation((1.0, 0.0), win, [0, 1, 2], cfg)
    assert g[0][0] == pytest.approx((rho_p - rho_m) / (2 * h), rel=1e-8)


def test_emission_gradient_telescopes():
    cap, _ = _run(0.05, 10.0, 20)
    vid = cap.emission_log[0].vehicle_id
    g = backward_through_emission({vid: 1.0}, cap, UNIT)
    assert np.allclose(g, 10.0 * 0.1)
    assert g.sum() == pytest.approx(10.0 * 0.1 * 20)
    assert np.all(backward_through_emission({vid: 0.0}, cap, UNIT) == 0)
    assert np.all(backward_through_emission({vid: -2.0}, cap, UNIT) < 0)


def test_emission_gradient_missing_record():
    cap, _ = _run(0.05, 10.0, 20)
    with pytest.raises(KeyError):
        backward_through_emission({999: 1.0}, cap, UNIT)


@settings(max_examples=200, deadline=None)
@given(st.floats(0.0, 0.9), st.floats(-5.0, 0.0), st.floats(0.0, 0.09), st.floats(0.0, 30.0))
def test_deposit_conserves_mass_and_momentum(rho0, y_frac, drho, vbar):
    U, g = 30.0, 0.5
    y0 = y_frac * rho0
    rho1, y1 = deposit(rho0, y0, drho, vbar, U, g)
    assert rho1 == pytest.approx(rho0 + drho, abs=1e-15)
    mom0 = y0 + U * (rho0 - rho0**1.5)  # rho * u
    mom1 = y1 + U * (rho1 - rho1**1.5)
    assert mom1 == pytest.approx(mom0 + drho * vbar, abs=1e-12)


def test_deposit_vjp_matches_fd():
    rng = np.random.default_rng(0)
    for _ in range(50):
        rho0, drho, vbar, U = rng.uniform(0.05, 0.8), rng.uniform(0.0, 0.1), rng.uniform(0, 25), rng.uniform(20, 35)
        y0 = -rng.uniform(0, 2) * rho0
        lr, ly = rng.normal(size=2)
        a = deposit_vjp(rho0, drho, vbar, U, 0.5, lr, ly)
        x = np.array([rho0, y0, drho, vbar, U])

        def f(z):
            r1, y1 = deposit(z[0], z[1], z[2], z[3], z[4], 0.5)
            return lr * r1 + ly * y1

        h = 1e-6
        fd = [(f(x + h * e) - f(x - h * e)) / (2 * h) for e in np.eye(5)]
        np.testing.assert_allclose(a, fd, rtol=1e-6, atol=1e-8)

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import difftraffic.optimize as opt
from difftraffic import arz
from difftraffic.core import validate_scenario
from difftraffic.engine import simulate, simulate_and_record
from difftraffic.optimize import (
    EstimationProblem,
    PaceCarProblem,
    SignalProblem,
    _Layout,
    estimate_initial_state,
    estimation_loss,
    estimation_loss_states,
    optimize_pace_car,
    optimize_signal_timing,
    pace_car_reward,
    pace_car_rollout,
    projected_ascent,
    signal_reward,
    signal_rollout,
)
from difftraffic.scenarios import hybrid_chain, macro_lane_scenario, pace_car_scenario, random_initial_guess, signal_toy


def test_estimation_loss_examples():
    a = np.arange(12.0)
    assert estimation_loss(a, a) == 0.0
    assert estimation_loss(a + 1.0, a) == 1.0
    with pytest.raises(ValueError):
        estimation_loss(np.zeros(3), np.zeros(4))


def test_loss_at_truth_is_zero_and_exits_immediately():
    sc = hybrid_chain(seed=1)
    target = simulate(sc, 100)
    assert estimation_loss_states(simulate(sc, 100), target) == 0.0
    est, hist = estimate_initial_state(EstimationProblem(sc, target, 100, iterations=50))
    assert hist.values[-1] == 0.0
    assert len(hist.rows) == 1
    assert est == sc


def test_estimation_history_non_increasing_and_iterates_valid(monkeypatch):
    truth = macro_lane_scenario(10, seed=2)
    target = simulate(truth, 100)
    seen = []
    real = opt.validate_scenario

    def spy(sc):
        out = real(sc)
        seen.append(out)
        return out

    monkeypatch.setattr(opt, "validate_scenario", spy)
    prob = EstimationProblem(truth, target, 100, iterations=25)
    est, hist = estimate_initial_state(prob, random_initial_guess(truth, 102))
    v = hist.values
    assert np.all(np.diff(v) <= 0)
    assert v[-1] < 0.5 * v[0]
    assert seen and all(s == [] for s in seen)
    assert validate_scenario(est) == []


def test_first_gradient_matches_fd_direction():
    truth = macro_lane_scenario(10, seed=3)
    steps = 100
    target = simulate(truth, steps)
    guess = random_initial_guess(truth, 103)
    lay = _Layout(truth)
    z = lay.to_z(guess)

    def f(zz):
        return estimation_loss_states(simulate(lay.scenario_at(zz), steps), target)

    fin, tape = simulate_and_record(lay.scenario_at(z), steps)
    _, seed = opt.estimation_loss_grad(fin, target)
    g = lay.grad_z(opt.backward(tape, seed, conversion_surrogate=False), z)
    h = 1e-6
    fd = np.array([(f(z + h * e) - f(z - h * e)) / (2 * h) for e in np.eye(z.size)])
    cos = g @ fd / (np.linalg.norm(g) * np.linalg.norm(fd))
    assert cos > 0.99


def test_projected_ascent_rejects_failing_iterates():
    calls = []

    def fg(x):
        calls.append(x.copy())
        if x[0] > 1.0:
            raise opt.CflViolation("too fast")
        return -float((x[0] - 3.0) ** 2), np.array([-2.0 * (x[0] - 3.0)])

    best, f, hist = projected_ascent(np.array([0.0]), fg, lambda x: x, 4.0, 20)
    assert best[0] <= 1.0 and f == pytest.approx(-4.0, abs=1e-6)
    assert np.all(np.diff(hist.values) >= 0)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=2, max_size=6), st.floats(0.01, 2.0), st.booleans())
def test_projected_ascent_best_so_far_is_monotone(c, step, spectral):
    c = np.array(c)

    def fg(x):
        return -float(np.sum((x - c) ** 2)) + float(np.sum(np.sin(3 * x))), -2 * (x - c) + 3 * np.cos(3 * x)

    _, f, hist = projected_ascent(np.zeros_like(c), fg, lambda x: np.clip(x, -2, 2), step, 30,
                                  spectral=spectral, memory=5 if spectral else 1)
    v = hist.values
    assert np.all(np.diff(v) >= 0) and v[-1] == f


def test_pace_car_reward_examples():
    assert pace_car_reward(np.full((7, 3), 12.0), 12.0, 100.0) == 7 * 3 * 100.0
    assert pace_car_reward([[8.0]], 10.0, 10.0) == 6.0
    assert pace_car_reward(np.array([[1.0, 2.0], [3.0, 4.0]]), [1.0, 4.0], 0.0) == -(0 + 1 + 1 + 0)


def test_pace_car_episode_matches_resummation():
    sc = pace_car_scenario(3, 30, v0=20.0)
    vt = np.full(30, 15.0)
    rng = np.random.default_rng(0)
    accel = rng.uniform(-1, 1, 30)
    reward, _ = pace_car_rollout(PaceCarProblem(sc, vt), accel)
    sc2 = pace_car_scenario(3, 30, v0=20.0, accel=accel)
    _, tape = simulate_and_record(sc2, 30)
    speeds = [[v for v, i in zip(cp.micro["road"].v, cp.micro["road"].ids) if i != 0] for cp in tape.checkpoints[1:]]
    assert reward == pytest.approx(pace_car_reward(speeds, vt, 100.0), rel=1e-12)


def test_pace_car_gradient_matches_fd():
    sc = pace_car_scenario(2, 20, v0=20.0)
    prob = PaceCarProblem(sc, np.linspace(20, 14, 20))
    a = np.random.default_rng(1).uniform(-1, 1, 20)
    _, g = pace_car_rollout(prob, a)
    h = 1e-6
    fd = [(pace_car_rollout(prob, a + h * e)[0] - pace_car_rollout(prob, a - h * e)[0]) / (2 * h) for e in np.eye(20)]
    np.testing.assert_allclose(g, fd, rtol=1e-5, atol=1e-6)


def test_pace_car_equilibrium_is_stationary():
    sc = pace_car_scenario(5, 50, v0=20.0)
    _, g = pace_car_rollout(PaceCarProblem(sc, np.full(50, 20.0)), np.zeros(50))
    assert np.linalg.norm(g) < 1e-6


def test_pace_car_optimizer_improves_and_stays_in_bounds():
    sc = pace_car_scenario(2, 40, v0=20.0)
    prob = PaceCarProblem(sc, np.r_[np.full(20, 20.0), np.full(20, 14.0)], iterations=15)
    best, hist = optimize_pace_car(prob)
    assert hist.values[-1] > hist.values[0]
    assert np.all(np.diff(hist.values) >= 0)
    assert np.all(best >= -3.0) and np.all(best <= 3.0)
    assert best[20:].mean() < 0


def test_signal_reward_examples():
    assert signal_reward(12.5, 0.0) == 12.5
    assert signal_reward(0.0, 20) == -20
    assert signal_reward(3.0, 2.0, 2.0, -0.5) == 5.0


def test_signal_rollout_matches_hand_audit():
    sc = signal_toy(0.09, 0.09, phases=((15.0, 15.0),))
    prob = SignalProblem(sc, 300)
    ev = signal_rollout(prob, [12.0])
    sc2 = signal_toy(0.09, 0.09, phases=((12.0, 18.0),))
    fin, tape = simulate_and_record(sc2, 300)
    L = sc.config.mean_vehicle_length
    flow = 0.0
    for lane in sc2.lanes:
        flow += (np.sum(lane.rho) - np.sum(fin.lanes[lane.id].rho)) * lane.dx / L + fin.inflow[lane.id]
    assert ev.flow == pytest.approx(flow, rel=1e-9)
    hard = 0
    for cp in tape.checkpoints[1:]:
        for lane in sc2.lanes:
            u = arz.velocities(*cp.macro[lane.id], lane.u_max, sc.config.gamma, sc.config.eps_rho)
            hard += int(np.sum(u < lane.u_max / 10))
    assert ev.queue_hard == hard


def test_signal_gradient_matches_fd():
    sc = signal_toy(0.09, 0.09, phases=((15.0, 15.0),))
    prob = SignalProblem(sc, 300)
    g = signal_rollout(prob, [12.3]).grad[0]
    h = 1e-4
    fd = (signal_rollout(prob, [12.3 + h]).reward - signal_rollout(prob, [12.3 - h]).reward) / (2 * h)
    assert g == pytest.approx(fd, rel=1e-3)


def test_signal_we_only_saturates():
    sc = signal_toy(0.09, 0.0, phases=((15.0, 15.0),))
    best, hist = optimize_signal_timing(SignalProblem(sc, 900, iterations=20))
    assert best[0] == pytest.approx(28.0)
    assert np.all(np.diff(hist.values) >= 0)

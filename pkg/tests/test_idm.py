import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from difftraffic.core import CollisionError, IdmParams, MicroLaneState, SolverConfig, VehicleState, VirtualLeader
from difftraffic.idm import (
    equilibrium_gap,
    euler_step,
    euler_vjp,
    idm_acceleration,
    idm_step_jacobians,
    lane_arrays,
    lead_info,
    micro_step,
)

CFG = SolverConfig(dt=0.1)
HAND = IdmParams(s_min=2, t_pref=1, a_max=1, a_pref=1, v_targ=10, length=5)


def test_standstill_at_minimum_gap_has_zero_accel():
    ego = VehicleState(0.0, 0.0, HAND)
    leader = VehicleState(2.0 + 5.0, 0.0, HAND)
    assert idm_acceleration(ego, leader, CFG) == pytest.approx(0.0, abs=1e-15)


def test_free_road_at_target_speed():
    ego = VehicleState(0.0, 10.0, HAND)
    assert idm_acceleration(ego, None, CFG) == 0.0


def test_hand_evaluated_pair():
    ego = VehicleState(0.0, 5.0, HAND)
    leader = VehicleState(15.0, 5.0, HAND)  # gap 10 after the leader's length
    assert idm_acceleration(ego, leader, CFG) == pytest.approx(0.4475, abs=1e-14)
    lane = MicroLaneState("u", 1000.0, [leader, ego], VirtualLeader(500.0, 5.0))
    nxt = micro_step(lane, CFG)
    assert nxt.vehicles[1].v == pytest.approx(5 + 0.4475 * 0.1, abs=1e-14)


def test_virtual_leader_has_no_length():
    ego = VehicleState(0.0, 5.0, HAND)
    a_virtual = idm_acceleration(ego, VirtualLeader(10.0, 5.0), CFG)
    a_real = idm_acceleration(ego, VehicleState(10.0, 5.0, HAND.__class__(length=0.0, **{
        k: getattr(HAND, k) for k in ("s_min", "t_pref", "a_max", "a_pref", "v_targ")})), CFG)
    assert a_virtual == a_real == pytest.approx(0.4475, abs=1e-14)


def test_non_positive_gap_raises():
    ego = VehicleState(0.0, 5.0, HAND)
    with pytest.raises(CollisionError):
        idm_acceleration(ego, VehicleState(5.0, 0.0, HAND), CFG)


def test_free_vehicle_advances_at_target_speed():
    lane = MicroLaneState("u", 1000.0, [VehicleState(3.0, 10.0, HAND)])
    nxt = micro_step(lane, CFG)
    assert nxt.vehicles[0].p == pytest.approx(4.0, abs=1e-14)
    assert nxt.vehicles[0].v == 10.0


def test_equilibrium_platoon_keeps_gaps():
    v = 8.0
    gap = equilibrium_gap(v, HAND)
    ps = [100.0 - i * (gap + HAND.length) for i in range(5)]
    leader = VirtualLeader(ps[0] + gap, v)
    lane = MicroLaneState("u", 1e6, [VehicleState(p, v, HAND, i) for i, p in enumerate(ps)], None)
    # a virtual leader moving at v is modelled by shifting it each step
    for _ in range(50):
        lane = MicroLaneState("u", 1e6, lane.vehicles, leader)
        before = np.diff([veh.p for veh in lane.vehicles])
        lane = micro_step(lane, CFG)
        after = np.diff([veh.p for veh in lane.vehicles])
        np.testing.assert_allclose(after, before, atol=1e-12)
        leader = VirtualLeader(leader.p + v * CFG.dt, v)


def test_exiting_flag_and_collision_pair():
    lane = MicroLaneState("u", 10.0, [VehicleState(9.5, 10.0, HAND, 7)])
    assert micro_step(lane, CFG).vehicles[0].exiting
    crash = MicroLaneState("u", 100.0, [VehicleState(50.0, 0.0, HAND, 1), VehicleState(44.0, 30.0, HAND, 2)])
    with pytest.raises(CollisionError) as exc:
        micro_step(crash, SolverConfig(dt=1.0))
    assert exc.value.pair == (1, 2)


def test_position_blocks_are_exact():
    lane = _random_platoon(np.random.default_rng(0))
    J = idm_step_jacobians(lane, CFG)
    assert np.all(J.self_blocks[:, 0, 0] == 1.0)
    assert np.all(J.self_blocks[:, 0, 1] == CFG.dt)
    assert np.all(J.leader_blocks[0] == 0)


def _random_platoon(rng, n=10):
    vehicles = []
    p = 500.0
    for i in range(n):
        prm = IdmParams(2.0, rng.uniform(1, 1.5), rng.uniform(1, 2), rng.uniform(1.5, 2.5), rng.uniform(25, 32), 5.0)
        vehicles.append(VehicleState(p, rng.uniform(2, 25), prm, i))
        p -= 5.0 + rng.uniform(5.0, 40.0)
    return MicroLaneState("u", 1e4, vehicles)


def _flat_step(lane, z):
    vs = [VehicleState(z[2 * i], z[2 * i + 1], veh.params, veh.id) for i, veh in enumerate(lane.vehicles)]
    nxt = micro_step(lane.with_vehicles(vs), CFG)
    return np.array([x for veh in nxt.vehicles for x in (veh.p, veh.v)])


def test_random_platoon_jacobians_match_fd():
    rng = np.random.default_rng(11)
    done = 0
    while done < 100:
        lane = _random_platoon(rng)
        p, v, params, ids = lane_arrays(lane)
        _, v_next, cache = euler_step(p, v, params, lead_info(lane), CFG, ids)
        v_raw = v + cache.terms.accel * CFG.dt
        if np.any(np.abs(v_raw) < 1e-6):
            continue
        z = np.array([x for veh in lane.vehicles for x in (veh.p, veh.v)])
        h = 1e-6
        fd = np.stack([(_flat_step(lane, z + h * e) - _flat_step(lane, z - h * e)) / (2 * h) for e in np.eye(z.size)], 1)
        J = idm_step_jacobians(lane, CFG).dense()
        np.testing.assert_allclose(J, fd, rtol=1e-5, atol=1e-7)
        # sparsity: lower block-bidiagonal
        mask = np.zeros_like(J, bool)
        for i in range(len(ids)):
            mask[2 * i:2 * i + 2, max(0, 2 * i - 2):2 * i + 2] = True
        assert np.all(J[~mask] == 0)
        done += 1


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000))
def test_vjp_matches_dense_transpose(seed):
    rng = np.random.default_rng(seed)
    lane = _random_platoon(rng, n=6)
    p, v, params, ids = lane_arrays(lane)
    _, _, cache = euler_step(p, v, params, lead_info(lane), CFG, ids)
    mu = rng.normal(size=12)
    lp, lv, _ = euler_vjp(p, v, params, cache, mu[0::2].copy(), mu[1::2].copy(), CFG.delta_exponent)
    J = idm_step_jacobians(lane, CFG).dense()
    ref = J.T @ mu
    np.testing.assert_allclose(lp, ref[0::2], rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(lv, ref[1::2], rtol=1e-12, atol=1e-12)


def test_clamped_velocity_has_zero_gradient():
    # hard braking behind a stopped obstacle drives v below zero
    lane = MicroLaneState("u", 1e3, [VehicleState(0.0, 0.5, HAND, 0)], VirtualLeader(2.05, 0.0))
    nxt = micro_step(lane, SolverConfig(dt=1.0))
    assert nxt.vehicles[0].v == 0.0
    J = idm_step_jacobians(lane, SolverConfig(dt=1.0))
    assert np.all(J.self_blocks[0, 1] == 0.0)

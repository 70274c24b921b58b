"""A controlled lead car slows a platoon down when the speed limit drops.

    python3 demos/04_pace_car.py
"""

import numpy as np

from difftraffic.engine import simulate_and_record
from difftraffic.optimize import PaceCarProblem, optimize_pace_car, pace_car_rollout
from difftraffic.scenarios import pace_car_scenario


def follower_speeds(accel):
    sc = pace_car_scenario(5, len(accel), v0=30.0, accel=accel)
    _, tape = simulate_and_record(sc, len(accel))
    return np.array([[v for v, i in zip(cp.micro["road"].v, cp.micro["road"].ids) if i != 0]
                     for cp in tape.checkpoints[1:]])


def main():
    sc = pace_car_scenario(5, 100, v0=30.0)
    v_targ = np.r_[np.full(50, 30.0), np.full(50, 10.0)]
    problem = PaceCarProblem(sc, v_targ, iterations=100)
    zero, _ = pace_car_rollout(problem, np.zeros(100))
    best, hist = optimize_pace_car(problem)
    print(f"Target speed 30 m/s for 5 s, then 10 m/s. Reward with no control {zero:.0f}, "
          f"optimized {hist.values[-1]:.0f} after {len(hist.rows) - 1} iterations.")
    print("\nPace car acceleration by second (m/s^2):")
    print(" ", np.array2string(best.reshape(10, 10).mean(1), precision=2))
    v = follower_speeds(best)
    print("\nMean follower speed at the end of each second (m/s):")
    print("  optimized:", np.array2string(v[9::10].mean(1), precision=1))
    print("  no control:", np.array2string(follower_speeds(np.zeros(100))[9::10].mean(1), precision=1))


if __name__ == "__main__":
    main()

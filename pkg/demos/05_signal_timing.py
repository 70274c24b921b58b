"""Split a 30 s signal cycle between two approaches.

    python3 demos/05_signal_timing.py          # quick: about 10 s
    python3 demos/05_signal_timing.py --full   # symmetric case from both sides, a few minutes
"""

import argparse

from difftraffic.optimize import SignalProblem, optimize_signal_timing, signal_rollout
from difftraffic.scenarios import signal_toy


def solve(demand_we, demand_ns, start, iterations):
    sc = signal_toy(demand_we, demand_ns, phases=((15.0, 15.0),))
    prob = SignalProblem(sc, 900, iterations=iterations)
    greens, hist = optimize_signal_timing(prob, initial=[start])
    ev = signal_rollout(prob, greens)
    print(f"demand WE {demand_we:.2f} NS {demand_ns:.2f}, start WE {start:4.1f} s -> WE {greens[0]:5.2f} s "
          f"NS {30 - greens[0]:5.2f} s   flow {ev.flow:6.2f} veh, queued cell-steps {ev.queue_hard}, "
          f"reward {hist.values[0]:.2f} -> {hist.values[-1]:.2f}")


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--full", action="store_true")
    args = ap.parse_args()
    print("All traffic arrives from the west: WE green grows to its upper bound.")
    solve(0.09, 0.0, 15.0, 20)
    print("\nEqual demand: the split settles near 50/50.")
    starts = (6.0, 24.0) if args.full else (6.0,)
    for s in starts:
        solve(0.09, 0.09, s, 60 if args.full else 8)


if __name__ == "__main__":
    main()

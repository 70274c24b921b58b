"""Analytical gradients against finite differences, and the cost of micro lanes.

    python3 demos/06_benchmark.py           # 10 cells x 1K steps
    python3 demos/06_benchmark.py --large   # adds 50 cells x 5K steps (about a minute)

Timings run on one thread and depend on host load.
"""

import argparse

from threadpoolctl import threadpool_limits

from difftraffic.bench import eps_sweep, gradient_timing, monotone_non_increasing


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--large", action="store_true")
    args = ap.parse_args()
    scales = [(10, 1000)] + ([(50, 5000)] if args.large else [])
    with threadpool_limits(1):
        print(f"{'scale':>10s} {'forward':>9s} {'taped fw':>9s} {'backward':>9s} {'FD total':>10s} {'speedup':>8s}")
        for cells, steps in scales:
            t = gradient_timing(cells, steps, repeats=3)
            med = lambda xs: sorted(xs)[len(xs) // 2]  # noqa: E731
            print(f"{cells:>4d}/{steps:<5d} {med(t.forward):8.3f}s {med(t.recorded):8.3f}s {med(t.backward):8.3f}s "
                  f"{med(t.fd_total):9.2f}s {t.speedup:7.0f}x")
        print("\nSteps per second with a fraction eps of 10K vehicles simulated as individual cars:")
        rows = eps_sweep()
        for r in rows:
            print(f"  eps {r.eps:4.2f}: {r.steps_per_sec:6.1f} steps/s ({r.lanes} lanes)")
        print("  monotone non-increasing:", monotone_non_increasing(rows))


if __name__ == "__main__":
    main()

"""Recover an initial state from the state it produced 10 s later.

    python3 demos/03_estimation.py
"""

from difftraffic.engine import simulate
from difftraffic.optimize import EstimationProblem, estimate_initial_state
from difftraffic.scenarios import hybrid_chain, macro_lane_scenario, random_initial_guess


def run(name, truth, tol, seed):
    target = simulate(truth, 100)
    problem = EstimationProblem(truth, target, 100, iterations=500, tolerance=tol)
    _, hist = estimate_initial_state(problem, random_initial_guess(truth, seed + 100))
    v = hist.values
    marks = sorted({0, len(v) // 4, len(v) // 2, len(v) - 1})
    trail = "  ".join(f"it {i}: {v[i]:.3g}" for i in marks)
    print(f"{name:22s} seed {seed}: {trail}   reduction {v[0] / v[-1]:.0f}x")


def main():
    print("Macro lane, 10 cells, target reduction 1e3:")
    for s in (1, 2, 3):
        run("macro lane", macro_lane_scenario(10, seed=s), 1e-3, s)
    print("\nMacro-micro-macro chain, target reduction 1e2:")
    for s in (1, 2, 3):
        run("hybrid chain", hybrid_chain(seed=s), 1e-2, s)


if __name__ == "__main__":
    main()

"""Riemann problems, their gradients, and a conservative finite-volume lane.

    python3 demos/01_riemann_and_fvm.py
"""

import numpy as np

from difftraffic import arz
from difftraffic.engine import simulate
from difftraffic.scenarios import closed_macro_lane

U, G = 30.0, 0.5


def cell(rho, u):
    return (rho, rho * (u - U * (1 - rho**G)))


PAIRS = {
    "free left, jammed right (shock)": (cell(0.2, 20.0), cell(0.8, 2.0)),
    "jammed left, free right (rarefaction)": (cell(0.8, 4.0), cell(0.2, 20.0)),
    "equal speeds (contact)": (cell(0.3, 10.0), cell(0.6, 10.0)),
    "vacuum on the right": (cell(0.5, 8.0), (0.0, 0.0)),
}


def fd_left(ql, qr, h=1e-7):
    ql = np.array(ql)
    cols = []
    for e in np.eye(2):
        hi = np.array(arz.solve_riemann(tuple(ql + h * e), qr, U, G).q0)
        lo = np.array(arz.solve_riemann(tuple(ql - h * e), qr, U, G).q0)
        cols.append((hi - lo) / (2 * h))
    return np.stack(cols, 1)


def main():
    print("Interface states of the ARZ Riemann problem (u_max = 30 m/s, gamma = 0.5)\n")
    for name, (ql, qr) in PAIRS.items():
        sol = arz.solve_riemann(ql, qr, U, G)
        gr = arz.riemann_gradients(sol, ql, qr, U, G)
        err = np.max(np.abs(gr.d_q0_d_ql - fd_left(ql, qr)))
        print(f"{name:40s} case {sol.case_tag.name:18s} q0 = ({sol.q0.rho:.4f}, {sol.q0.y:+.4f})"
              f"   |dq0/dql - FD| = {err:.1e}")

    sc = closed_macro_lane(20, seed=4)
    lane = sc.lanes[0]
    m0 = float(np.sum(lane.rho)) * lane.dx
    print("\nA 20-cell lane closed by walls at both ends keeps its mass:")
    for steps in (10, 100, 1000):
        fin = simulate(sc, steps).lanes["macro"]
        print(f"  after {steps:5d} steps: sum(rho)*dx drift = {float(np.sum(fin.rho)) * lane.dx - m0:+.2e}")
    print("  density profile at step 1000:", np.array2string(fin.rho, precision=2, max_line_width=200))


if __name__ == "__main__":
    main()

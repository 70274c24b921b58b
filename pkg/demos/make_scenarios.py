"""Regenerate the bundled scenario files and problem files.

    python3 demos/make_scenarios.py
"""

import json
from pathlib import Path

import numpy as np

from difftraffic.core import MicroLaneState, Scenario, SolverConfig
from difftraffic.scenario_io import save_scenario
from difftraffic.scenarios import (
    closed_macro_lane,
    hybrid_chain,
    macro_lane_scenario,
    pace_car_scenario,
    random_platoon,
    signal_toy,
)

HERE = Path(__file__).resolve().parent


def main():
    sc_dir, pb_dir = HERE / "scenarios", HERE / "problems"
    sc_dir.mkdir(exist_ok=True)
    pb_dir.mkdir(exist_ok=True)
    rng = np.random.default_rng(3)
    platoon = Scenario(SolverConfig(), (MicroLaneState("road", 1e4, random_platoon(rng, 10, front=500.0)),))
    scenarios = {
        "macro_lane": macro_lane_scenario(10, seed=1),
        "closed_lane": closed_macro_lane(),
        "hybrid_chain": hybrid_chain(seed=1),
        "platoon": platoon,
        "pace_car": pace_car_scenario(5, 100, v0=30.0),
        "pace_car_toy": pace_car_scenario(1, 10),
        "signal_symmetric": signal_toy(0.09, 0.09, phases=((15.0, 15.0),)),
        "signal_we_only": signal_toy(0.09, 0.0, phases=((15.0, 15.0),)),
    }
    for name, sc in scenarios.items():
        save_scenario(sc, sc_dir / f"{name}.json")
    problems = {
        "estimate_macro": {"steps": 100, "iterations": 500, "tolerance": 1e-3, "guess_seed": 101},
        "estimate_chain": {"steps": 100, "iterations": 500, "tolerance": 1e-2, "guess_seed": 101},
        "pace_car_step": {"kind": "pace_car", "frames": 100, "v_targ": {"before": 30.0, "after": 10.0, "at": 50},
                          "c_max": 100.0, "iterations": 100},
        "signal": {"kind": "signal", "steps": 900, "c1": 1.0, "c2": -1.0, "iterations": 60},
    }
    for name, doc in problems.items():
        with open(pb_dir / f"{name}.json", "w", encoding="utf-8", newline="\n") as fh:
            json.dump(doc, fh, indent=1)
            fh.write("\n")


if __name__ == "__main__":
    main()

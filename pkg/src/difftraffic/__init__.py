"""Differentiable hybrid macro/micro traffic simulation."""

import sys

from .core import (
    BoundaryCondition,
    CellState,
    CflViolation,
    CollisionError,
    ConversionMode,
    Controls,
    IdmParams,
    Link,
    MacroLaneState,
    MicroLaneState,
    PaceCarControl,
    Scenario,
    ScenarioError,
    SignalPlan,
    SolverConfig,
    VehicleState,
    VirtualLeader,
    validate_scenario,
)
from .engine import (
    GradientBundle,
    NetworkState,
    StateGradient,
    StepTape,
    backward,
    directional_fd,
    finite_diff_gradient,
    simulate,
    simulate_and_record,
)
from .optimize import (
    EstimationProblem,
    PaceCarProblem,
    SignalProblem,
    estimate_initial_state,
    estimation_loss,
    optimize_pace_car,
    optimize_signal_timing,
    pace_car_reward,
    signal_reward,
)
from .scenario_io import ScenarioFormatError, dumps_scenario, load_scenario, parse_scenario, save_scenario

__version__ = "0.1.0"

__all__ = [n for n, v in list(globals().items()) if not n.startswith("_") and not isinstance(v, type(sys))]

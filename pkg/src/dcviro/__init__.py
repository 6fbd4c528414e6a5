"""Distributed visual-inertial-ranging odometry on SE_K(3) for robot teams."""

from .lie import ExtendedPose, adjoint, sek3_exp, sek3_log, so3_exp, so3_log
from .state import RobotState, apply_correction, compute_error, initial_state
from .propagation import ImuSample, NoiseParams, propagate
from .sim import Scenario, default_scenario, load_scenario, simulate
from .harness import RunConfig, aggregate, run_monte_carlo, run_single

__all__ = [
    "ExtendedPose", "adjoint", "sek3_exp", "sek3_log", "so3_exp", "so3_log",
    "RobotState", "apply_correction", "compute_error", "initial_state",
    "ImuSample", "NoiseParams", "propagate",
    "Scenario", "default_scenario", "load_scenario", "simulate",
    "RunConfig", "aggregate", "run_monte_carlo", "run_single",
]

__version__ = "0.1.0"

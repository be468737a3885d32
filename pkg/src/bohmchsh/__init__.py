"""Bohmian trajectories in a split/recombine/split Stern-Gerlach CHSH test."""

from .spin_analytic import (
    Direction,
    TwoQubitState,
    chsh,
    chsh_optimal_angles,
    correlation,
    singlet,
    spin_component,
    valuation_table,
)
from .field_engine import GridSpec, PhysParams, SpinorField, StageSchedule, init_state
from .harness import ExperimentConfig, run_config1, run_config2, run_config3

__version__ = "0.1.0"

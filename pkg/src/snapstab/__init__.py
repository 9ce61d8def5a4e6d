"""Self-stabilizing atomic snapshot objects over a simulated crash-prone network."""
from __future__ import annotations

from .core import BOTTOM, ConfigurationError, Entry, array_leq, merge, vector_clock
from .harness import Scenario, Workload, run_scenario, sweep

__all__ = [
    "BOTTOM",
    "ConfigurationError",
    "Entry",
    "Scenario",
    "Workload",
    "array_leq",
    "merge",
    "run_scenario",
    "sweep",
    "vector_clock",
]

"""Lyapunov vectors, unfiltered error growth and Kalman-filter bounds for Lorenz-96."""
from .errors import (ConditioningError, ConfigurationError, ConvergenceError, DegeneracyError,
                     InvalidDimensionError, UnstableLabError)
from .l96 import ModelConfig, PropagatorSequence, generate_propagators

__all__ = [
    "ConditioningError", "ConfigurationError", "ConvergenceError", "DegeneracyError",
    "InvalidDimensionError", "UnstableLabError", "ModelConfig", "PropagatorSequence",
    "generate_propagators",
]

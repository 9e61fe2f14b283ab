"""Non-homogeneous subordinators: simulation, inverse processes, fractional
equations, subordinate propagators and subordinate Brownian motion."""

from .bernstein import (
    DIVERGENT,
    HorizonError,
    LevyFamily,
    QuadratureError,
    TimeVaryingIndex,
    custom,
    drift_only,
    eval_f,
    eval_Pi,
    eval_tail,
    gamma_like,
    multistable,
    tempered_stable,
)
from .config import ConfigError, ExperimentConfig, parse_config
from .paths import SubordinatorPath, sample_increments, simulate_path
from .rng import RngStream

__version__ = "0.1.0"

__all__ = [
    "DIVERGENT",
    "ConfigError",
    "ExperimentConfig",
    "HorizonError",
    "LevyFamily",
    "QuadratureError",
    "RngStream",
    "SubordinatorPath",
    "TimeVaryingIndex",
    "custom",
    "drift_only",
    "eval_Pi",
    "eval_f",
    "eval_tail",
    "gamma_like",
    "multistable",
    "parse_config",
    "sample_increments",
    "simulate_path",
    "tempered_stable",
]

"""Marked self-exciting point processes driven by a jump-SDE intensity."""

__version__ = "0.1.0"

from .errors import (DimensionError, DomainError, ExciterError, FitError, FormatError,
                     InsufficientDataError, IntegrationError, SimulationError, StabilityError,
                     UnsupportedConfigurationError)
from .model import (ConstantExponential, ConstantLognormal, Empirical, ExpRegimeDrift,
                    IntensityScaledLognormal, LinearDrift, MarkedPath, ModelSpec, VariantMask,
                    pack_params, unpack_params)
from .simulate import SimConfig, simulate_path, simulate_paths, replay, intensity_at
from .likelihood import log_likelihood, compensator
from .moments import (stability_report, mean_curve, second_moment_curve, autocovariance,
                      autocovariance_stationary, stationary_second_moment)
from .estimate import OptimizerSettings, FitResult, fit, nest_start, penalized_objective, stderr_fd

__all__ = [
    "ExciterError", "DimensionError", "DomainError", "FitError", "FormatError",
    "InsufficientDataError", "IntegrationError", "SimulationError", "StabilityError",
    "UnsupportedConfigurationError",
    "ConstantExponential", "ConstantLognormal", "Empirical", "IntensityScaledLognormal",
    "LinearDrift", "ExpRegimeDrift", "ModelSpec", "VariantMask", "MarkedPath",
    "pack_params", "unpack_params",
    "SimConfig", "simulate_path", "simulate_paths", "replay", "intensity_at",
    "log_likelihood", "compensator",
    "stability_report", "mean_curve", "second_moment_curve", "autocovariance",
    "autocovariance_stationary", "stationary_second_moment",
    "OptimizerSettings", "FitResult", "fit", "nest_start", "penalized_objective", "stderr_fd",
]

"""Feedback cooling of a levitated nanoparticle: models, controller synthesis,
signal processing, simulation and calibration."""
from .errors import CalibrationError, ConvergenceError, InstabilityError, StabilizabilityError
from .model import (
    ActuatorCalibration,
    GasEnvironment,
    NoiseParams,
    ParticleParams,
    PhysicalSystem,
    StateSpace,
    TrapParams,
    build_state_space,
    drag_coefficient,
)

__version__ = "0.1.0"

__all__ = [
    "ActuatorCalibration",
    "CalibrationError",
    "ConvergenceError",
    "GasEnvironment",
    "InstabilityError",
    "NoiseParams",
    "ParticleParams",
    "PhysicalSystem",
    "StabilizabilityError",
    "StateSpace",
    "TrapParams",
    "build_state_space",
    "drag_coefficient",
    "__version__",
]

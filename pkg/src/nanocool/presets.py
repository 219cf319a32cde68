"""Published experimental values and the default system built from them."""
from __future__ import annotations

import numpy as np

from .model import (
    ActuatorCalibration,
    GasEnvironment,
    NoiseParams,
    ParticleParams,
    PhysicalSystem,
    TrapParams,
    mbar,
)

TRAP_FREQUENCIES_HZ = (96.24e3, 101.49e3, 31.52e3)
PARTICLE_RADIUS = 71.5e-9
PARTICLE_MASS = 3.37e-18
ROOM_TEMPERATURE = 293.0

C_VM = (6.87e5, 7.08e5, 1.07e6)  # V/m
C_VM_ERR = (0.72e5, 0.75e5, 0.11e6)
C_NV = ((2.83e-16, 2.18e-16), (2.21e-16, 2.36e-16))  # N/V
C_NV_ERR = ((0.14e-16, 0.13e-16), (0.13e-16, 0.12e-16))

SAMPLE_TIME = 64e-9
ADC_SAMPLE_TIME = 8e-9
ELECTRONIC_DELAY = 0.639e-6
AMPLIFIER_GAIN = 5.0

# LQR column of the published gain table, rows (x, y) x columns (x, y).
TABLE_KP = np.array([[-3.40e-10, 7.99e-10], [1.46e-9, -1.15e-9]])  # N/m
TABLE_KD = np.array([[-2.19e-13, 1.86e-13], [1.96e-13, 2.32e-13]])  # N s/m
TABLE_KP_DIGITAL = np.array([[-0.35, 0.80], [1.50, -1.15]])
TABLE_KD_DIGITAL = np.array([[136.45, -119.14], [-122.22, -148.23]])

DELAY_SWEEP_GAIN = (9.17e-9, 8.97e-9)  # N/m, x and y
MIN_TEMPERATURES = (0.58, 0.55, 3.63)  # K at the lowest pressure

# Detector noise floors (m/sqrt(Hz)); not published, chosen so the simulated
# loop lands near the reported minimum temperatures.
DEFAULT_SIGMA = (1.0e-11, 0.98e-11, 1.55e-10)

# Quantum-limited scenario: backward detection favours z.
QUANTUM_EFFICIENCY = (0.1, 0.08, 0.3)
QUANTUM_BACKACTION = (2.0e-43, 2.0e-43, 2.0e-43)  # N^2/Hz


def published_particle() -> ParticleParams:
    return ParticleParams(radius=PARTICLE_RADIUS, mass=PARTICLE_MASS)


def published_trap() -> TrapParams:
    return TrapParams.from_hz(TRAP_FREQUENCIES_HZ)


def published_actuator(z_relative_strength: float = 1.0) -> ActuatorCalibration:
    return ActuatorCalibration(c_nv=C_NV, z_relative_strength=z_relative_strength)


def published_system(
    pressure_mbar: float = 1.2,
    temperature: float = ROOM_TEMPERATURE,
    sigma=DEFAULT_SIGMA,
    gamma: float | None = None,
) -> PhysicalSystem:
    return PhysicalSystem(
        particle=published_particle(),
        trap=published_trap(),
        env=GasEnvironment(pressure=mbar(pressure_mbar), temperature=temperature),
        actuator=published_actuator(),
        noise=NoiseParams(measurement_sigma=tuple(sigma)),
        gamma_override=gamma,
    )


def quantum_system(
    pressure_mbar: float = 1e-10,
    efficiency=QUANTUM_EFFICIENCY,
    backaction=QUANTUM_BACKACTION,
) -> PhysicalSystem:
    return PhysicalSystem(
        particle=published_particle(),
        trap=published_trap(),
        env=GasEnvironment(pressure=mbar(pressure_mbar), temperature=ROOM_TEMPERATURE),
        actuator=published_actuator(),
        noise=NoiseParams(
            detection_efficiency=tuple(efficiency),
            quantum_enabled=True,
            backaction_force_psd=tuple(backaction),
        ),
    )

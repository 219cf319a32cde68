"""Physical parameters and the continuous-time state-space model.

State ordering is ``[x, y, z, vx, vy, vz]`` throughout the package. All
quantities are SI; trap frequencies are angular (rad/s).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import constants

K_B = constants.k
HBAR = constants.hbar
AIR_MOLAR_MASS = 28.97e-3  # kg/mol
AIR_VISCOSITY = 1.81e-5  # Pa s, 293 K

AXES = ("x", "y", "z")


def _finite(name, value):
    arr = np.asarray(value, dtype=float)
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} must be finite, got {value!r}")
    return arr


@dataclass(frozen=True)
class ParticleParams:
    """Spherical particle. ``mass`` defaults to ``density * 4/3 pi r^3``."""

    radius: float
    density: float = 2200.0
    mass: float | None = None
    charge_count: int = 0

    def __post_init__(self):
        _finite("radius", self.radius)
        if self.radius <= 0:
            raise ValueError("radius must be positive")
        if self.mass is None:
            object.__setattr__(
                self, "mass", self.density * 4.0 / 3.0 * math.pi * self.radius**3
            )
        _finite("mass", self.mass)
        if self.mass <= 0:
            raise ValueError("mass must be positive")


@dataclass(frozen=True)
class TrapParams:
    """Harmonic trap; ``omega`` holds angular frequencies (rad/s)."""

    omega: tuple[float, float, float]

    def __post_init__(self):
        w = _finite("omega", self.omega)
        if w.shape != (3,) or np.any(w <= 0):
            raise ValueError("omega must be three strictly positive angular frequencies")
        object.__setattr__(self, "omega", tuple(float(v) for v in w))

    @classmethod
    def from_hz(cls, freqs_hz) -> "TrapParams":
        return cls(tuple(2.0 * math.pi * float(f) for f in freqs_hz))

    @property
    def omega_array(self) -> np.ndarray:
        return np.array(self.omega)


@dataclass(frozen=True)
class GasEnvironment:
    pressure: float  # Pa
    temperature: float = 293.0
    gas_molar_mass: float = AIR_MOLAR_MASS
    gas_viscosity: float = AIR_VISCOSITY

    def __post_init__(self):
        _finite("pressure", self.pressure)
        _finite("temperature", self.temperature)
        if self.pressure < 0:
            raise ValueError("pressure must be non-negative")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")


@dataclass(frozen=True)
class NoiseParams:
    """Measurement and (optionally) quantum backaction noise.

    ``measurement_sigma`` is the white position-noise intensity in m/sqrt(Hz),
    i.e. ``<zeta(t) zeta(t')> = sigma**2 delta(t - t')``. With
    ``quantum_enabled`` the imprecision and backaction PSDs obey
    ``S_imp * S_ba = hbar**2 / (4 eta)``; give one side and the other is derived.
    A zero ``measurement_sigma`` entry is completed from ``backaction_force_psd``.
    """

    measurement_sigma: tuple[float, float, float] = (0.0, 0.0, 0.0)
    detection_efficiency: tuple[float, float, float] = (1.0, 1.0, 1.0)
    quantum_enabled: bool = False
    backaction_force_psd: tuple[float, float, float] = (0.0, 0.0, 0.0)
    closure_rtol: float = 1e-6

    def __post_init__(self):
        sigma = _finite("measurement_sigma", self.measurement_sigma)
        eta = _finite("detection_efficiency", self.detection_efficiency)
        s_ba = _finite("backaction_force_psd", self.backaction_force_psd)
        if sigma.shape != (3,) or eta.shape != (3,) or s_ba.shape != (3,):
            raise ValueError("noise parameters are 3-vectors")
        if np.any(sigma < 0) or np.any(s_ba < 0):
            raise ValueError("noise intensities must be non-negative")
        if np.any(eta < 0) or np.any(eta > 1):
            raise ValueError("detection efficiencies must lie in [0, 1]")
        if self.quantum_enabled:
            sigma, s_ba = sigma.copy(), s_ba.copy()
            for i in range(3):
                if eta[i] == 0:
                    continue
                product = HBAR**2 / (4.0 * eta[i])
                if sigma[i] > 0 and s_ba[i] > 0:
                    got = sigma[i] ** 2 * s_ba[i]
                    if abs(got - product) > self.closure_rtol * product:
                        raise ValueError(
                            f"axis {AXES[i]}: S_imp*S_ba = {got:.3e} violates the "
                            f"quantum-limit closure hbar^2/(4 eta) = {product:.3e}"
                        )
                elif sigma[i] > 0:
                    s_ba[i] = product / sigma[i] ** 2
                elif s_ba[i] > 0:
                    sigma[i] = math.sqrt(product / s_ba[i])
                else:
                    raise ValueError(
                        f"axis {AXES[i]}: quantum noise needs sigma or backaction PSD"
                    )
        object.__setattr__(self, "measurement_sigma", tuple(float(v) for v in sigma))
        object.__setattr__(self, "detection_efficiency", tuple(float(v) for v in eta))
        object.__setattr__(self, "backaction_force_psd", tuple(float(v) for v in s_ba))

    @property
    def imprecision_psd(self) -> np.ndarray:
        return np.asarray(self.measurement_sigma) ** 2

    @property
    def backaction(self) -> np.ndarray:
        if not self.quantum_enabled:
            return np.zeros(3)
        return np.asarray(self.backaction_force_psd)


@dataclass(frozen=True)
class ActuatorCalibration:
    """Electrode transduction coefficients.

    ``c_nv[i][j]`` is the force (N) along axis ``i`` per volt on electrode
    ``j`` for the transverse pair. ``c_nv_z`` is rarely calibrated; when absent
    the z actuator strength is ``z_relative_strength / m`` (a placeholder).
    """

    c_nv: tuple[tuple[float, float], tuple[float, float]]
    c_nv_z: float | None = None
    sign_convention: tuple[tuple[float, float], tuple[float, float]] = ((-1.0, 1.0), (1.0, 1.0))
    z_relative_strength: float = 1.0

    def __post_init__(self):
        c = _finite("c_nv", self.c_nv)
        if c.shape != (2, 2) or np.any(c <= 0):
            raise ValueError("c_nv must be a 2x2 matrix of positive magnitudes")
        if self.c_nv_z is not None and (not math.isfinite(self.c_nv_z) or self.c_nv_z <= 0):
            raise ValueError("c_nv_z must be positive when given")
        s = np.asarray(self.sign_convention, dtype=float)
        if s.shape != (2, 2) or not np.all(np.abs(s) == 1):
            raise ValueError("sign_convention entries must be +1 or -1")
        object.__setattr__(self, "c_nv", tuple(tuple(float(v) for v in row) for row in c))
        object.__setattr__(self, "sign_convention", tuple(tuple(float(v) for v in row) for row in s))

    @property
    def reference(self) -> float:
        """Normalization coefficient ``C_NV^xx``."""
        return self.c_nv[0][0]


@dataclass(frozen=True)
class StateSpace:
    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    process_noise_psd: np.ndarray
    mass: float = 1.0
    omega: tuple[float, float, float] = (1.0, 1.0, 1.0)
    gamma: float = 0.0
    temperature: float = 0.0

    @property
    def n_states(self) -> int:
        return self.A.shape[0]


@dataclass(frozen=True)
class PhysicalSystem:
    """Everything needed to build the plant for one pressure point."""

    particle: ParticleParams
    trap: TrapParams
    env: GasEnvironment
    actuator: ActuatorCalibration
    noise: NoiseParams = field(default_factory=NoiseParams)
    gamma_override: float | None = None

    @property
    def gamma(self) -> float:
        if self.gamma_override is not None:
            return self.gamma_override
        return drag_coefficient(self.env, self.particle)

    @property
    def mass(self) -> float:
        return self.particle.mass

    @property
    def omega(self) -> np.ndarray:
        return self.trap.omega_array

    def with_pressure(self, pressure: float) -> "PhysicalSystem":
        return replace(self, env=replace(self.env, pressure=pressure), gamma_override=None)

    def state_space(self) -> StateSpace:
        return build_state_space(
            self.trap, self.gamma, self.actuator, self.particle, self.env, self.noise
        )


def mean_molecular_speed(env: GasEnvironment) -> float:
    m_gas = env.gas_molar_mass / constants.N_A
    return math.sqrt(8.0 * K_B * env.temperature / (math.pi * m_gas))


def drag_coefficient(env: GasEnvironment, particle: ParticleParams) -> float:
    """Free-molecular gas damping rate ``15.8 r^2 p / (m vbar)`` in 1/s."""
    _finite("pressure", env.pressure)
    _finite("radius", particle.radius)
    vbar = mean_molecular_speed(env)
    return 15.8 * particle.radius**2 * env.pressure / (particle.mass * vbar)


def actuator_matrix(calib: ActuatorCalibration, particle: ParticleParams) -> np.ndarray:
    """3x3 block ``B_xyz`` mapping the normalized control force to acceleration.

    The transverse block is the coefficient matrix divided by ``C_NV^xx`` and
    the mass, with the electrode orientation signs applied. The z entry uses
    ``c_nv_z`` under the same normalization when it is known.
    """
    c = np.asarray(calib.c_nv)
    ratios = np.abs(c) / calib.reference
    b_xy = np.asarray(calib.sign_convention) * ratios / particle.mass
    if calib.c_nv_z is not None:
        b_z = calib.c_nv_z / calib.reference / particle.mass
    else:
        b_z = calib.z_relative_strength / particle.mass
    out = np.zeros((3, 3))
    out[:2, :2] = b_xy
    out[2, 2] = b_z
    return out


def build_state_space(
    trap: TrapParams,
    gamma: float,
    actuator: ActuatorCalibration,
    particle: ParticleParams,
    env: GasEnvironment,
    noise: NoiseParams | None = None,
) -> StateSpace:
    _finite("gamma", gamma)
    if gamma < 0:
        raise ValueError("gamma must be non-negative")
    w = trap.omega_array
    m = particle.mass
    A = np.zeros((6, 6))
    A[:3, 3:] = np.eye(3)
    A[3:, :3] = -np.diag(w**2)
    A[3:, 3:] = -gamma * np.eye(3)
    B = np.zeros((6, 3))
    B[3:, :] = actuator_matrix(actuator, particle)
    C = np.hstack([np.eye(3), np.zeros((3, 3))])
    W = np.zeros((6, 6))
    force_psd = np.full(3, 2.0 * m * gamma * K_B * env.temperature)
    if noise is not None:
        force_psd = force_psd + noise.backaction
    W[3:, 3:] = np.diag(force_psd / m**2)
    return StateSpace(
        A=A,
        B=B,
        C=C,
        process_noise_psd=W,
        mass=m,
        omega=trap.omega,
        gamma=float(gamma),
        temperature=env.temperature,
    )


def mbar(p_mbar: float) -> float:
    """mbar to Pa."""
    return 100.0 * p_mbar

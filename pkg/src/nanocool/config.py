"""Experiment configuration: YAML with an explicit unit on every physical quantity.

Quantities are strings such as ``"96.24 kHz"`` or ``"1.2 mbar"``; bare
numbers are rejected for dimensional fields. Trap frequencies given in Hz are
stored as angular frequencies.
"""
from __future__ import annotations

import json
import math
import re
from pathlib import Path
from typing import Annotated, Literal, Union

import yaml
from pydantic import BaseModel, BeforeValidator, ConfigDict, Field, ValidationError, model_validator

PREFIXES = {
    "": 1.0, "f": 1e-15, "p": 1e-12, "n": 1e-9, "u": 1e-6, "µ": 1e-6, "μ": 1e-6,
    "m": 1e-3, "c": 1e-2, "h": 1e2, "k": 1e3, "M": 1e6, "G": 1e9,
}

# base unit -> (dimension, factor to SI)
UNITS = {
    "m": ("length", 1.0),
    "g": ("mass", 1e-3),
    "s": ("time", 1.0),
    "Hz": ("frequency", 1.0),
    "rad/s": ("angular_frequency", 1.0),
    "Pa": ("pressure", 1.0),
    "bar": ("pressure", 1e5),
    "Torr": ("pressure", 133.322368),
    "K": ("temperature", 1.0),
    "N/V": ("force_per_volt", 1.0),
    "V/m": ("volt_per_metre", 1.0),
    "N/m": ("stiffness", 1.0),
    "m/sqrt(Hz)": ("position_noise", 1.0),
    "m/rtHz": ("position_noise", 1.0),
    "N^2/Hz": ("force_psd", 1.0),
    "kg/m^3": ("density", 1.0),
    "V": ("voltage", 1.0),
}

_NUMBER = re.compile(r"^\s*([-+]?(?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?)\s*(.*?)\s*$")


class ConfigError(ValueError):
    """Invalid configuration; ``errors`` lists every problem found."""

    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("; ".join(self.errors))


def parse_quantity(value, dimension: str) -> float:
    """SI value of ``"<number> <unit>"`` for the given dimension.

    ``dimension="angular_frequency"`` also accepts Hz-type units and
    multiplies by 2 pi.
    """
    if isinstance(value, bool) or not isinstance(value, str):
        raise ValueError(f"expected a quantity with a unit for {dimension}, got {value!r}")
    m = _NUMBER.match(value)
    if not m or not m.group(2):
        raise ValueError(f"{value!r} lacks a unit (expected {dimension})")
    number, unit = float(m.group(1)), m.group(2).replace(" ", "")
    found = None
    if unit in UNITS:
        found = (UNITS[unit], 1.0)
    elif unit[:1] in PREFIXES and unit[1:] in UNITS:
        found = (UNITS[unit[1:]], PREFIXES[unit[:1]])
    if found is None:
        raise ValueError(f"unknown unit {unit!r} in {value!r}")
    (dim, factor), prefix = found
    si = number * factor * prefix
    if dim == dimension:
        return si
    if dimension == "angular_frequency" and dim == "frequency":
        return 2.0 * math.pi * si
    if dimension == "frequency" and dim == "angular_frequency":
        return si / (2.0 * math.pi)
    raise ValueError(f"{value!r} has dimension {dim}, expected {dimension}")


def _q(dimension):
    return BeforeValidator(lambda v: parse_quantity(v, dimension))


Length = Annotated[float, _q("length")]
Mass = Annotated[float, _q("mass")]
Time = Annotated[float, _q("time")]
Frequency = Annotated[float, _q("frequency")]
AngularFrequency = Annotated[float, _q("angular_frequency")]
Pressure = Annotated[float, _q("pressure")]
Temperature = Annotated[float, _q("temperature")]
ForcePerVolt = Annotated[float, _q("force_per_volt")]
VoltPerMetre = Annotated[float, _q("volt_per_metre")]
Stiffness = Annotated[float, _q("stiffness")]
PositionNoise = Annotated[float, _q("position_noise")]
ForcePsd = Annotated[float, _q("force_psd")]
Density = Annotated[float, _q("density")]
Voltage = Annotated[float, _q("voltage")]

Axis = Literal["x", "y", "z"]


class Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class ParticleSection(Strict):
    radius: Length = 71.5e-9
    mass: Mass | None = 3.37e-18
    density: Density = 2200.0


class TrapSection(Strict):
    frequencies: tuple[AngularFrequency, AngularFrequency, AngularFrequency] = tuple(
        2 * math.pi * f for f in (96.24e3, 101.49e3, 31.52e3)
    )


class EnvironmentSection(Strict):
    pressure: Pressure = 120.0
    temperature: Temperature = 293.0


class ActuatorSection(Strict):
    c_nv: tuple[tuple[ForcePerVolt, ForcePerVolt], tuple[ForcePerVolt, ForcePerVolt]] = (
        (2.83e-16, 2.18e-16), (2.21e-16, 2.36e-16))
    c_nv_z: ForcePerVolt | None = None
    z_relative_strength: float = 1.0


class NoiseSection(Strict):
    measurement_sigma: tuple[PositionNoise, PositionNoise, PositionNoise] | None = None
    detection_efficiency: tuple[float, float, float] = (1.0, 1.0, 1.0)
    quantum_enabled: bool = False
    backaction_force_psd: tuple[ForcePsd, ForcePsd, ForcePsd] = (0.0, 0.0, 0.0)


class SystemSection(Strict):
    particle: ParticleSection = ParticleSection()
    trap: TrapSection = TrapSection()
    environment: EnvironmentSection = EnvironmentSection()
    actuator: ActuatorSection = ActuatorSection()
    noise: NoiseSection = NoiseSection()
    gamma_override: Annotated[float, _q("angular_frequency")] | None = None


class ExplicitGains(Strict):
    xy: tuple[tuple[float, float, float, float], tuple[float, float, float, float]]
    z: tuple[float, float] = (0.0, 0.0)


class WeightsSection(Strict):
    layout: Literal["energy", "position"] = "energy"
    effort: float = Field(100.0, gt=0)


class ControllerSection(Strict):
    source: Literal["table", "design", "explicit"] = "table"
    weights: WeightsSection = WeightsSection()
    input_rule: Literal["rectangle", "zoh"] = "rectangle"
    # design on the undamped plant (one gain set for all pressures) or at the configured damping
    design_damping: Literal["undamped", "pressure"] = "undamped"
    cold_damping_z: bool = True
    gains: ExplicitGains | None = None
    fixed_point: tuple[int, int] | None = None  # (integer_bits, fraction_bits)

    @model_validator(mode="after")
    def _explicit_needs_gains(self):
        if self.source == "explicit" and self.gains is None:
            raise ValueError("controller.source 'explicit' requires controller.gains")
        return self


class ChainSection(Strict):
    T_s: Time = 64e-9
    dt_physics: Time = 8e-9
    electronic_delay: Time = 0.639e-6
    amplifier_gain: float = Field(5.0, gt=0)
    notch_q: float = Field(5.0, gt=0)
    dc_cutoff: Frequency = 1e3
    adc_bits: int = Field(0, ge=0)
    delays: tuple[int, int, int] | None = None
    detector_gain: tuple[VoltPerMetre, VoltPerMetre, VoltPerMetre] = (6.87e5, 7.08e5, 1.07e6)
    feedback_sign: Literal[-1, 1] = -1


class FreeScenario(Strict):
    kind: Literal["free"]
    trace_length: Time = 50e-3
    n_traces: int = Field(1, ge=1)
    sample_interval: Time = 1e-6


class LoopScenario(Strict):
    kind: Literal["loop"]
    trace_length: Time = 5e-3
    n_traces: int = Field(2, ge=1)
    burn_in: Time = 1e-3
    record_every: int = Field(16, ge=1)


class DelaySweepScenario(Strict):
    kind: Literal["delay-sweep"]
    gains: tuple[Stiffness, ...] = (9.17e-9, 8.97e-9)
    axes: tuple[Axis, ...] = ("x", "y")
    phi_points: int = Field(20, ge=2)
    phi_max: float = 2 * math.pi
    repeats: int = Field(10, ge=2)
    trace_length: Time = 50e-3

    @model_validator(mode="after")
    def _match(self):
        if len(self.gains) != len(self.axes):
            raise ValueError("delay-sweep needs one gain per axis")
        return self


class PressureSweepScenario(Strict):
    kind: Literal["pressure-sweep"]
    pressures: tuple[Pressure, ...] = (1e2, 1e1, 1.0, 1e-1, 1e-2)
    trace_length: Time = 5e-3
    n_traces: int = Field(2, ge=2)
    burn_in: Time = 1e-3

    @model_validator(mode="after")
    def _positive(self):
        if any(p <= 0 for p in self.pressures):
            raise ValueError("pressures must be positive")
        return self


class QuantumScenario(Strict):
    kind: Literal["quantum"]
    n_runs: int = Field(30, ge=2)
    duration: Time = 0.1


class CalibrateScenario(Strict):
    kind: Literal["calibrate"]
    n_traces: int = Field(100, ge=1)
    trace_length: Time = 50e-3
    sample_interval: Time = 1e-6
    drive_amplitudes: tuple[Voltage, ...] = (6.0, 8.0, 10.0, 12.0, 14.0)
    drive_offset: float = 0.013  # relative detuning of the drive from resonance
    drive_duration: Time = 50e-3
    drive_traces: int = Field(100, ge=1)  # records averaged per drive amplitude


class DesignScenario(Strict):
    kind: Literal["design"]


Scenario = Annotated[
    Union[FreeScenario, LoopScenario, DelaySweepScenario, PressureSweepScenario,
          QuantumScenario, CalibrateScenario, DesignScenario],
    Field(discriminator="kind"),
]


class OutputSection(Strict):
    directory: str = "out"
    format: Literal["csv", "json"] = "csv"


class ExperimentConfig(Strict):
    seed: int = Field(0, ge=0, lt=2**64)
    system: SystemSection = SystemSection()
    controller: ControllerSection = ControllerSection()
    chain: ChainSection = ChainSection()
    scenario: Scenario
    output: OutputSection = OutputSection()


def _format_errors(exc: ValidationError):
    out = []
    for e in exc.errors():
        loc = ".".join(str(p) for p in e["loc"])
        out.append(f"{loc}: {e['msg']}")
    return out


def validate_config(data: dict) -> ExperimentConfig:
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as exc:
        raise ConfigError(_format_errors(exc)) from None


def load_raw(path) -> dict:
    """Raw mapping from a YAML config or from a run manifest (JSON)."""
    text = Path(path).read_text()
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError([f"unreadable config: {exc}"]) from None
    if not isinstance(data, dict):
        raise ConfigError(["config must be a mapping"])
    if "manifest_version" in data:
        raw = dict(data["config"])
        raw["seed"] = data["seed"]
        return raw
    return data


def parse_config(path) -> ExperimentConfig:
    """Load and validate a config file; every problem is reported at once."""
    return validate_config(load_raw(path))


def dump_manifest(raw: dict, seed: int, versions: dict) -> str:
    return json.dumps({"manifest_version": 1, "seed": seed, "versions": versions, "config": raw}, indent=2)

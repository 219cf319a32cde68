from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from ..dsp import BiquadCoeffs


@dataclass(frozen=True)
class SimConfig:
    """Timing, length and seeding of a simulation.

    ``sample_interval`` is the recording step of free runs (their exact
    transition can step at any interval); closed loops record every
    ``record_every`` controller steps.
    """

    T_s: float = 64e-9
    dt_physics: float = 8e-9
    duration: float | None = None
    seed: int = 0
    trace_length: float = 50e-3
    n_traces: int = 1
    electronic_delay: float = 0.639e-6
    amplifier_gain: float = 5.0
    decimation: int = 8
    adc_bits: int = 0
    adc_range: float = 1.0  # V, full scale is +-adc_range
    sample_interval: float = 1e-6
    burn_in: float = 0.0
    record_every: int = 16
    energy_bound: float = 1e6  # instability guard, in units of k_B T per mode
    threads: int = 1

    def __post_init__(self):
        for name in ("T_s", "dt_physics", "trace_length", "sample_interval", "amplifier_gain"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v > 0):
                raise ValueError(f"{name} must be positive")
        ratio = self.T_s / self.dt_physics
        if abs(ratio - round(ratio)) > 1e-9 * ratio or round(ratio) < 1:
            raise ValueError("T_s must be an integer multiple of dt_physics")
        if int(round(ratio)) != self.decimation:
            raise ValueError(f"decimation {self.decimation} must equal T_s / dt_physics = {ratio:g}")
        if self.duration is not None and self.duration < self.trace_length:
            raise ValueError("duration must be at least trace_length")
        if self.n_traces < 1 or self.record_every < 1 or self.threads < 1:
            raise ValueError("n_traces, record_every and threads must be >= 1")
        if self.adc_bits < 0 or self.electronic_delay < 0 or self.burn_in < 0:
            raise ValueError("adc_bits, electronic_delay and burn_in must be non-negative")

    @property
    def output_delay_steps(self) -> int:
        return int(round(self.electronic_delay / self.dt_physics))

    @property
    def fractional_delay(self) -> float:
        """Unrealized remainder of the electronic delay (s)."""
        return self.electronic_delay - self.output_delay_steps * self.dt_physics


IDENTITY_STAGE = (1.0, 0.0, 0.0, 0.0, 0.0)


@dataclass(frozen=True)
class FeedbackChainConfig:
    """Digital feedback electronics.

    ``gains`` is 3x6 over ``[x_a, x_b, x_z, x_a(n-N_a), x_b(n-N_b), x_z(n-N_z)]``
    with the transverse controller in rows 0-1 and the z controller in row 2.
    ``routing[c]`` is the mechanical axis read by detector channel ``c``;
    ``c_vm`` is the true detector gain (V/m) of each channel.
    The voltage applied to electrode ``c`` is ``feedback_sign * G_amp * u_c``.
    """

    gains: np.ndarray
    delays: tuple[int, int, int] = (0, 0, 0)
    filters: tuple[tuple[BiquadCoeffs, ...], ...] = ((), (), ())
    c_vm: tuple[float, float, float] = (1.0, 1.0, 1.0)
    routing: tuple[int, int, int] = (0, 1, 2)
    feedback_sign: float = -1.0

    def __post_init__(self):
        g = np.array(self.gains, dtype=float)
        if g.shape != (3, 6):
            raise ValueError("gains must be 3x6 (2x4 transverse block plus 1x2 z row)")
        if not np.all(np.isfinite(g)):
            raise ValueError("gains must be finite")
        if np.any(g[:2, [2, 5]]) or np.any(g[2, [0, 1, 3, 4]]):
            raise ValueError("transverse and z controllers must not share channels")
        if len(self.delays) != 3 or any(int(d) < 0 for d in self.delays):
            raise ValueError("delay lengths must be three non-negative integers")
        if len(self.filters) != 3 or sorted(self.routing) != [0, 1, 2]:
            raise ValueError("need one filter cascade per channel and a permutation routing")
        g.setflags(write=False)
        object.__setattr__(self, "gains", g)
        object.__setattr__(self, "delays", tuple(int(d) for d in self.delays))

    @classmethod
    def from_blocks(cls, xy, z=(0.0, 0.0), **kw) -> "FeedbackChainConfig":
        xy = np.asarray(xy, dtype=float)
        if xy.shape != (2, 4):
            raise ValueError("transverse gain block must be 2x4")
        g = np.zeros((3, 6))
        g[:2, [0, 1, 3, 4]] = xy
        g[2, 2], g[2, 5] = z
        return cls(gains=g, **kw)

    def filter_array(self) -> np.ndarray:
        n = max(1, max(len(f) for f in self.filters))
        out = np.tile(np.array(IDENTITY_STAGE), (3, n, 1))
        for c, stages in enumerate(self.filters):
            for k, s in enumerate(stages):
                out[c, k] = (s.b0, s.b1, s.b2, s.a1, s.a2)
        return out


TRACE_COLUMNS = ("time_s", "x_m", "y_m", "z_m", "det_x_V", "det_y_V", "det_z_V", "u_a_V", "u_b_V", "u_z_V")


@dataclass
class TraceSet:
    """Recorded channels, shape ``(n_traces, 3, n_samples)`` each."""

    positions: np.ndarray
    detector: np.ndarray
    control: np.ndarray
    sample_rate: float
    velocities: np.ndarray | None = None
    statistics: "LoopStatistics | None" = None
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        shapes = {self.positions.shape, self.detector.shape, self.control.shape}
        if len(shapes) != 1:
            raise ValueError(f"channel shapes differ: {shapes}")
        if self.positions.ndim != 3 or self.positions.shape[1] != 3:
            raise ValueError("channels must have shape (n_traces, 3, n_samples)")

    @property
    def n_traces(self) -> int:
        return self.positions.shape[0]

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.positions.shape[2]) / self.sample_rate

    def to_csv(self, path, trace: int = 0):
        t = self.times
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(TRACE_COLUMNS)
            rows = np.column_stack([t, self.positions[trace].T, self.detector[trace].T, self.control[trace].T])
            for r in rows:
                w.writerow([f"{v:.15g}" for v in r])


@dataclass
class LoopStatistics:
    """Per-axis second moments accumulated during a closed-loop run."""

    var_x: np.ndarray
    var_v: np.ndarray
    t_eff: np.ndarray
    t_eff_err: np.ndarray
    n_samples: int


def _write_rows(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow([f"{v:.15g}" for v in r])


@dataclass
class DelaySweepResult:
    """T_eff against delay phase; columns of the 2-D arrays follow ``axes``."""

    phi: np.ndarray  # requested phase grid, rad
    phi_realized: np.ndarray  # (n_phi, n_axes), Omega * effective delay
    t_eff: np.ndarray  # (n_phi, n_axes) mean over repeats, K
    t_eff_err: np.ndarray  # standard error over repeats, K
    oracle: np.ndarray  # linear-response prediction, K
    axes: tuple[int, ...] = (0,)
    gains: tuple[float, ...] = (0.0,)
    metadata: dict = field(default_factory=dict)

    def to_csv(self, path):
        names = ["xyz"[a] for a in self.axes]
        header = (["phi_rad"] + [f"T_eff_{n}_K" for n in names] + [f"stderr_{n}_K" for n in names]
                  + [f"T_oracle_{n}_K" for n in names] + [f"phi_realized_{n}_rad" for n in names])
        rows = np.column_stack([self.phi, self.t_eff, self.t_eff_err, self.oracle, self.phi_realized])
        _write_rows(path, header, rows)


@dataclass
class PressureSweepResult:
    pressure_mbar: np.ndarray
    t_eff: np.ndarray  # (n_pressures, 3), nan where unstable
    t_eff_err: np.ndarray
    oracle: np.ndarray  # (n_pressures, 3) frequency-domain prediction
    unstable: np.ndarray  # bool per pressure
    metadata: dict = field(default_factory=dict)

    def to_csv(self, path):
        rows = [
            [p, *t, *e, *o, float(u)]
            for p, t, e, o, u in zip(self.pressure_mbar, self.t_eff, self.t_eff_err, self.oracle, self.unstable)
        ]
        _write_rows(path, ["pressure_mbar", "T_eff_x_K", "T_eff_y_K", "T_eff_z_K",
                           "stderr_x_K", "stderr_y_K", "stderr_z_K",
                           "T_oracle_x_K", "T_oracle_y_K", "T_oracle_z_K", "unstable"], rows)


@dataclass
class QuantumResult:
    occupation: np.ndarray  # (n_runs, 3)
    mean: np.ndarray
    std: np.ndarray
    predicted: np.ndarray  # algebraic steady-state occupation per axis
    metadata: dict = field(default_factory=dict)

    def to_csv(self, path):
        rows = [[i, self.mean[i], self.std[i], self.predicted[i]] for i in range(3)]
        _write_rows(path, ["axis", "n_mean", "n_std", "n_lqg"], rows)

    def runs_to_csv(self, path):
        _write_rows(path, ["run", "n_x", "n_y", "n_z"],
                    [[i, *r] for i, r in enumerate(self.occupation)])

"""Detector and electrode calibration, and conversion of regulator gains to the
digital gains (and fixed-point words) used by the feedback electronics."""
from __future__ import annotations

import json
import math
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np
from sklearn.base import BaseEstimator

from .dsp import PsdEstimate, fit_lorentzian, welch_psd
from .errors import CalibrationError, InstabilityError
from .model import K_B, AXES, ActuatorCalibration, GasEnvironment, ParticleParams, drag_coefficient


@dataclass(frozen=True)
class DetectorCalibration:
    c_vm: tuple[float, float, float]
    c_vm_err: tuple[float, float, float]
    omega: tuple[float, float, float] = (math.nan,) * 3
    omega_err: tuple[float, float, float] = (math.nan,) * 3
    gamma: tuple[float, float, float] = (math.nan,) * 3
    gamma_err: tuple[float, float, float] = (math.nan,) * 3
    residual: tuple[float, float, float] = (math.nan,) * 3
    warnings: tuple[str, ...] = ()

    def __post_init__(self):
        c = np.asarray(self.c_vm, dtype=float)
        e = np.asarray(self.c_vm_err, dtype=float)
        if c.shape != (3,) or np.any(~(c > 0)):
            raise ValueError("c_vm must be three positive values")
        if e.shape != (3,) or np.any(~(e > 0)):
            raise ValueError("c_vm uncertainties must be positive")

    @classmethod
    def nominal(cls, c_vm, c_vm_err=None) -> "DetectorCalibration":
        c = tuple(float(v) for v in c_vm)
        err = c_vm_err if c_vm_err is not None else tuple(1e-3 * v for v in c)
        return cls(c_vm=c, c_vm_err=tuple(float(v) for v in err))


@dataclass(frozen=True)
class DriveConfig:
    electrode: int
    omega_drive: float  # rad/s
    amplitude: float  # V
    duration: float  # s, tau_el
    axis: int = 0
    phase: float = 0.0

    def __post_init__(self):
        if self.electrode not in (0, 1, 2):
            raise ValueError("electrode must be 0 (a), 1 (b) or 2 (z)")
        if not self.duration > 0:
            raise ValueError("duration must be positive")
        if not self.omega_drive > 0:
            raise ValueError("drive frequency must be positive")
        if self.amplitude < 0:
            raise ValueError("drive amplitude must be non-negative")


@dataclass(frozen=True)
class ElectrodeCalibration:
    coefficient: float  # N/V
    stderr: float
    amplitudes: np.ndarray
    forces: np.ndarray
    force_err: np.ndarray


@dataclass(frozen=True)
class DigitalGains:
    """Dimensionless gains of the digital controller.

    ``proportional[i, j]`` and ``derivative[i, j]`` multiply the filtered
    (respectively delayed) signal of channel ``j`` in the output of channel
    ``i``; ``z`` holds the z-channel ``(proportional, derivative)`` pair.
    """

    proportional: np.ndarray
    derivative: np.ndarray
    z: np.ndarray = field(default_factory=lambda: np.zeros(2))
    integer_bits: int | None = None
    fraction_bits: int | None = None
    quantization_error: np.ndarray | None = None

    @property
    def matrix(self) -> np.ndarray:
        """3x6 gain over ``[x_a, x_b, x_z, x_a(n-N_a), x_b(n-N_b), x_z(n-N_z)]``."""
        g = np.zeros((3, 6))
        g[:2, :2] = self.proportional
        g[:2, 3:5] = self.derivative
        g[2, 2], g[2, 5] = self.z
        return g

    @classmethod
    def from_matrix(cls, g) -> "DigitalGains":
        g = np.asarray(g, dtype=float)
        return cls(g[:2, :2].copy(), g[:2, 3:5].copy(), np.array([g[2, 2], g[2, 5]]))


# ---------------------------------------------------------------------------
# detector


def _c_from_fit(fit, mass, temperature):
    c2 = fit.amplitude_factor(mass, temperature)
    var_a = fit.covariance[0, 0] / fit.amplitude**2
    var_g = fit.covariance[2, 2] / fit.gamma**2
    cov_ag = fit.covariance[0, 2] / (fit.amplitude * fit.gamma)
    rel = 0.5 * math.sqrt(max(var_a + var_g - 2 * cov_ag, 0.0))
    c = math.sqrt(c2)
    return c, max(rel * c, np.finfo(float).eps * c)


def calibrate_detector(
    traces,
    f_s: float,
    env: GasEnvironment,
    particle: ParticleParams,
    omega_guess,
    gamma_guess: float | None = None,
    segment_length: int | None = None,
    background: bool = True,
    gamma_tolerance: float = 0.5,
) -> DetectorCalibration:
    """Calibrate the three detector channels from thermal voltage records.

    ``traces`` has shape ``(n_traces, 3, n_samples)`` (volts) or is a
    sequence of three :class:`PsdEstimate` objects. Each averaged PSD is
    fitted with the damped-oscillator line shape; the detector gain follows
    from the fitted amplitude at known mass and temperature.
    """
    if isinstance(traces, (list, tuple)) and traces and isinstance(traces[0], PsdEstimate):
        psds = list(traces)
    else:
        arr = np.asarray(traces, dtype=float)
        if arr.ndim != 3 or arr.shape[1] != 3:
            raise ValueError("traces must have shape (n_traces, 3, n_samples)")
        psds = [welch_psd(arr[:, i, :], f_s, segment_length) for i in range(3)]
    gamma_p = drag_coefficient(env, particle)
    g0 = gamma_guess if gamma_guess is not None else gamma_p
    out = {k: [] for k in ("c", "ce", "w", "we", "g", "ge", "r")}
    notes = []
    for i, psd in enumerate(psds):
        fit = fit_lorentzian(psd, float(omega_guess[i]), g0, background=background)
        c, ce = _c_from_fit(fit, particle.mass, env.temperature)
        se = fit.stderr
        out["c"].append(c)
        out["ce"].append(ce)
        out["w"].append(fit.omega0)
        out["we"].append(float(se[1]))
        out["g"].append(fit.gamma)
        out["ge"].append(float(se[2]))
        out["r"].append(fit.residual)
        if gamma_p > 0 and abs(fit.gamma - gamma_p) > gamma_tolerance * gamma_p:
            msg = (
                f"axis {AXES[i]}: fitted damping {fit.gamma:.4g} 1/s differs from the "
                f"pressure estimate {gamma_p:.4g} 1/s by more than {gamma_tolerance:.0%}"
            )
            notes.append(msg)
            warnings.warn(msg, RuntimeWarning, stacklevel=2)
    return DetectorCalibration(
        c_vm=tuple(out["c"]), c_vm_err=tuple(out["ce"]), omega=tuple(out["w"]),
        omega_err=tuple(out["we"]), gamma=tuple(out["g"]), gamma_err=tuple(out["ge"]),
        residual=tuple(out["r"]), warnings=tuple(notes),
    )


class DetectorCalibrator(BaseEstimator):
    """Estimator form of :func:`calibrate_detector`; ``fit(traces)`` sets ``calibration_``."""

    def __init__(self, f_s=1e6, env=None, particle=None, omega_guess=None, gamma_guess=None,
                 segment_length=None, background=True):
        self.f_s = f_s
        self.env = env
        self.particle = particle
        self.omega_guess = omega_guess
        self.gamma_guess = gamma_guess
        self.segment_length = segment_length
        self.background = background

    def fit(self, traces, y=None):
        self.calibration_ = calibrate_detector(
            traces, self.f_s, self.env, self.particle, self.omega_guess,
            self.gamma_guess, self.segment_length, self.background,
        )
        self.c_vm_ = np.asarray(self.calibration_.c_vm)
        return self

    def transform(self, traces):
        """Convert voltage traces ``(n, 3, samples)`` to metres."""
        return np.asarray(traces, dtype=float) / self.c_vm_[None, :, None]


# ---------------------------------------------------------------------------
# electrodes


def susceptibility(omega, omega0: float, gamma: float, mass: float):
    return 1.0 / (mass * (omega0**2 - np.asarray(omega) ** 2 + 1j * gamma * np.asarray(omega)))


def drive_force(
    trace,
    f_s: float,
    drive: DriveConfig,
    c_vm: float,
    omega0: float,
    gamma: float,
    mass: float,
    peak_halfwidth: float = 6.0,
    baseline_band: float = 60.0,
    min_snr: float | None = 10.0,
):
    """Force amplitude (N) of a sinusoidal drive seen in one detector record.

    The whole record is one Hann-windowed periodogram (a 2-D ``trace`` is an
    ensemble of records whose periodograms are averaged). A thermal line shape
    (with the calibrated ``omega0``, ``gamma``) plus a constant floor is
    least-squares fitted to the bins outside ``+-peak_halfwidth / tau`` of
    the drive and within ``+-baseline_band / tau``; the excess power inside
    the window is the drive line, ``a^2 / 2`` for amplitude ``a``.
    Returns ``(F0, sigma_F0, snr)``.
    """
    x = np.asarray(trace, dtype=float)
    n = x.shape[-1]
    tau = n / f_s
    psd = welch_psd(x, f_s, segment_length=n, window="hann").single_sided()
    f, p = psd.frequencies, psd.values
    df = f[1] - f[0]
    f_dr = drive.omega_drive / (2 * np.pi)
    dist = np.abs(f - f_dr)
    inner = dist <= peak_halfwidth / tau
    outer = (dist > peak_halfwidth / tau) & (dist <= baseline_band / tau)
    if inner.sum() < 3 or outer.sum() < 4:
        raise CalibrationError("record too short to separate the drive line from the baseline")
    w = 2 * np.pi * f
    shape = 1.0 / ((w**2 - omega0**2) ** 2 + gamma**2 * w**2)
    basis = np.column_stack([shape, np.ones_like(shape)])
    coef, *_ = np.linalg.lstsq(basis[outer], p[outer], rcond=None)
    base = basis @ coef
    power = float(np.sum(p[inner] - base[inner]) * df)
    # baseline scatter propagated over the window
    scatter = float(np.std(p[outer] - base[outer]))
    power_err = scatter * df * math.sqrt(inner.sum())
    snr = power / power_err if power_err > 0 else math.inf
    if min_snr is not None and drive.amplitude > 0 and snr < min_snr:
        raise CalibrationError(
            f"drive line SNR {snr:.2f} below {min_snr}; increase the record length tau_el "
            f"(currently {tau:.3g} s) or the drive amplitude"
        )
    chi = abs(susceptibility(drive.omega_drive, omega0, gamma, mass))
    amp_v = math.sqrt(max(2.0 * power, 0.0))
    f0 = amp_v / (c_vm * chi)
    f0_err = (power_err / max(amp_v, 1e-300)) / (c_vm * chi) if amp_v > 0 else math.sqrt(2 * power_err) / (c_vm * chi)
    return f0, f0_err, snr


def calibrate_electrode(
    traces,
    drives,
    detector_cal: DetectorCalibration,
    mass: float,
    f_s: float,
    peak_halfwidth: float = 6.0,
    min_snr: float | None = 10.0,
) -> ElectrodeCalibration:
    """Transduction coefficient from records at several drive amplitudes.

    ``traces[k]`` is the detector record (volts, axis ``drives[k].axis``),
    or an ``(n_records, n_samples)`` ensemble of them, taken while electrode ``drives[k].electrode`` is driven with
    ``drives[k].amplitude`` volts. The coefficient is the slope of force
    against amplitude through the origin.
    """
    if len(traces) != len(drives) or not drives:
        raise ValueError("need one drive description per trace")
    forces, errs, amps = [], [], []
    for tr, d in zip(traces, drives):
        i = d.axis
        f0, fe, _ = drive_force(
            tr, f_s, d, detector_cal.c_vm[i], detector_cal.omega[i], detector_cal.gamma[i],
            mass, peak_halfwidth=peak_halfwidth, min_snr=min_snr,
        )
        forces.append(f0)
        errs.append(fe)
        amps.append(d.amplitude)
    V, F = np.array(amps), np.array(forces)
    sv = float(V @ V)
    if sv == 0:
        raise CalibrationError("all drive amplitudes are zero; slope undefined")
    slope = float(V @ F) / sv
    n = len(V)
    resid = F - slope * V
    s2 = float(resid @ resid) / max(n - 1, 1)
    s2 = max(s2, float(np.mean(np.square(errs))))
    return ElectrodeCalibration(slope, math.sqrt(s2 / sv), V, F, np.array(errs))


class ElectrodeCalibrator(BaseEstimator):
    def __init__(self, detector_cal=None, mass=1.0, f_s=1e6, peak_halfwidth=6.0, min_snr=10.0):
        self.detector_cal = detector_cal
        self.mass = mass
        self.f_s = f_s
        self.peak_halfwidth = peak_halfwidth
        self.min_snr = min_snr

    def fit(self, traces, drives):
        res = calibrate_electrode(traces, drives, self.detector_cal, self.mass, self.f_s,
                                  self.peak_halfwidth, self.min_snr)
        self.result_ = res
        self.coefficient_, self.stderr_ = res.coefficient, res.stderr
        return self

    def predict(self, amplitudes):
        return self.coefficient_ * np.asarray(amplitudes, dtype=float)


# ---------------------------------------------------------------------------
# gain conversion


def _c_vm_vector(detector_cal):
    if detector_cal is None:
        raise ValueError("a detector calibration is required")
    c = np.asarray(detector_cal.c_vm if isinstance(detector_cal, DetectorCalibration) else detector_cal, dtype=float)
    if c.shape != (3,) or np.any(~np.isfinite(c)) or np.any(c <= 0):
        raise ValueError(f"detector gains must be three positive values, got {c}")
    return c


def digital_gains(K_d, detector_cal, actuator: ActuatorCalibration, amplifier_gain: float, omega) -> DigitalGains:
    """Digital gains from a 3x6 regulator gain (proportional | derivative).

    ``k_p^d[i, j] = K_p[i, j] / (G C_ref C_Vm[j])`` and
    ``k_d^d[i, j] = -Omega_j K_d[i, j] / (G C_ref C_Vm[j])``, where the
    reference coefficient normalizes the actuator matrix and ``j`` is the
    measured channel. The derivative form assumes the delayed position
    ``x(t - pi / (2 Omega_j))`` stands in for ``-v_j / Omega_j``.
    """
    if not amplifier_gain > 0:
        raise ValueError("amplifier gain must be positive")
    c = _c_vm_vector(detector_cal)
    w = np.asarray(omega, dtype=float)
    K = np.asarray(K_d, dtype=float)
    scale = amplifier_gain * actuator.reference * c  # per measured channel
    kp = K[:, :3] / scale[None, :]
    kd = -w[None, :] * K[:, 3:] / scale[None, :]
    return DigitalGains(kp[:2, :2], kd[:2, :2], np.array([kp[2, 2], kd[2, 2]]))


def physical_gains(gains: DigitalGains, detector_cal, actuator: ActuatorCalibration, amplifier_gain: float, omega) -> np.ndarray:
    """Inverse of :func:`digital_gains` (3x6 regulator gain)."""
    c = _c_vm_vector(detector_cal)
    w = np.asarray(omega, dtype=float)
    scale = amplifier_gain * actuator.reference * c
    g = gains.matrix
    K = np.zeros((3, 6))
    K[:, :3] = g[:, :3] * scale[None, :]
    K[:, 3:] = -g[:, 3:] * scale[None, :] / w[None, :]
    return K


def to_fixed_point(gains, integer_bits: int = 9, fraction_bits: int = 7, stability_check=None) -> DigitalGains:
    """Round gains to signed fixed point (``integer_bits`` includes the sign bit).

    ``stability_check`` is an optional callable receiving the quantized
    :class:`DigitalGains` and returning a spectral radius; a value >= 1 raises
    :class:`InstabilityError`.
    """
    if integer_bits < 1 or fraction_bits < 0:
        raise ValueError("need at least the sign bit and a non-negative fraction width")
    g = gains if isinstance(gains, DigitalGains) else DigitalGains.from_matrix(gains)
    lsb = 2.0**-fraction_bits
    lo, hi = -(2.0 ** (integer_bits - 1)), 2.0 ** (integer_bits - 1) - lsb
    names = {
        "proportional": [["k_p,aa", "k_p,ab"], ["k_p,ba", "k_p,bb"]],
        "derivative": [["k_d,aa", "k_d,ab"], ["k_d,ba", "k_d,bb"]],
        "z": ["k_p,z", "k_d,z"],
    }
    out = {}
    for key in ("proportional", "derivative", "z"):
        v = np.asarray(getattr(g, key), dtype=float)
        q = np.round(v / lsb) * lsb
        bad = np.argwhere((q < lo) | (q > hi))
        if bad.size:
            idx = tuple(bad[0])
            label = np.asarray(names[key], dtype=object)[idx]
            raise OverflowError(
                f"gain {label} = {v[idx]:.6g} does not fit Q{integer_bits}.{fraction_bits} "
                f"(range [{lo}, {hi}])"
            )
        out[key] = q
    err = DigitalGains(out["proportional"], out["derivative"], out["z"]).matrix - g.matrix
    res = DigitalGains(out["proportional"], out["derivative"], out["z"], integer_bits, fraction_bits, err)
    if stability_check is not None:
        radius = float(stability_check(res))
        if radius >= 1.0:
            raise InstabilityError(f"quantized gains give spectral radius {radius:.6f} >= 1", radius)
    return res


def calibration_report(path, detector: DetectorCalibration | None = None, electrodes: dict | None = None, metadata: dict | None = None):
    """Write a JSON report of calibration results."""
    def clean(obj):
        if isinstance(obj, np.ndarray):
            return obj.tolist()
        if isinstance(obj, dict):
            return {k: clean(v) for k, v in obj.items()}
        if isinstance(obj, (list, tuple)):
            return [clean(v) for v in obj]
        if isinstance(obj, np.generic):
            return obj.item()
        return obj

    report = {"metadata": metadata or {}}
    if detector is not None:
        report["detector"] = clean(asdict(detector))
    if electrodes:
        report["electrodes"] = {k: clean(asdict(v)) for k, v in electrodes.items()}
    with open(path, "w") as fh:
        json.dump(report, fh, indent=2)
    return report

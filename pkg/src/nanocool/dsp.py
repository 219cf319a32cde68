"""Digital filters, delay lines and spectral analysis of position records.

PSDs are double-sided per Hz internally: ``values[k]`` is ``S(f_k)`` with
``var = integral over (-inf, inf) of S(f) df``. Only non-negative
frequencies are stored; a single-sided view doubles every bin except DC and
Nyquist.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize, signal
from sklearn.base import BaseEstimator

from .errors import ConvergenceError
from .model import HBAR, K_B


@dataclass(frozen=True)
class BiquadCoeffs:
    b0: float
    b1: float
    b2: float
    a1: float
    a2: float
    f_s: float

    def __post_init__(self):
        if not self.f_s > 0:
            raise ValueError("f_s must be positive")
        poles = np.roots([1.0, self.a1, self.a2]) if self.a2 != 0 or self.a1 != 0 else np.zeros(0)
        if np.any(np.abs(poles) >= 1.0):
            raise ValueError(f"biquad poles {poles} are not inside the unit circle")

    @property
    def b(self) -> np.ndarray:
        return np.array([self.b0, self.b1, self.b2])

    @property
    def a(self) -> np.ndarray:
        return np.array([1.0, self.a1, self.a2])

    def response(self, f) -> np.ndarray:
        """Complex frequency response at ``f`` (Hz)."""
        z1 = np.exp(-2j * np.pi * np.asarray(f, dtype=float) / self.f_s)
        return (self.b0 + self.b1 * z1 + self.b2 * z1**2) / (1.0 + self.a1 * z1 + self.a2 * z1**2)


def _check_band(f, f_s, name):
    if not f_s > 0:
        raise ValueError("f_s must be positive")
    if not 0 < f < f_s / 2:
        raise ValueError(f"{name}={f} Hz must lie strictly between 0 and Nyquist ({f_s / 2} Hz)")


def design_notch(f0: float, quality: float, f_s: float) -> BiquadCoeffs:
    """Bilinear-transform notch (audio-cookbook prototype), zero exactly at ``f0``."""
    _check_band(f0, f_s, "f0")
    if not quality > 0:
        raise ValueError("quality must be positive")
    w0 = 2.0 * math.pi * f0 / f_s
    alpha = math.sin(w0) / (2.0 * quality)
    a0 = 1.0 + alpha
    c = -2.0 * math.cos(w0)
    return BiquadCoeffs(1.0 / a0, c / a0, 1.0 / a0, c / a0, (1.0 - alpha) / a0, f_s)


def design_dc_block(f_c: float, f_s: float) -> BiquadCoeffs:
    """First-order bilinear high-pass with corner ``f_c``, as a degenerate biquad."""
    _check_band(f_c, f_s, "f_c")
    k = math.tan(math.pi * f_c / f_s)
    b0 = 1.0 / (1.0 + k)
    return BiquadCoeffs(b0, -b0, 0.0, (k - 1.0) / (k + 1.0), 0.0, f_s)


def cascade_response(stages, f) -> np.ndarray:
    out = np.ones(np.shape(f), dtype=complex)
    for st in stages:
        out = out * st.response(f)
    return out


def biquad_process(coeffs: BiquadCoeffs, x) -> np.ndarray:
    """Filter ``x`` from rest (direct form II transposed)."""
    return signal.lfilter(coeffs.b, coeffs.a, np.asarray(x, dtype=float))


class Biquad:
    """Stateful direct-form II transposed section for sample-by-sample use."""

    def __init__(self, coeffs: BiquadCoeffs):
        self.coeffs = coeffs
        self.s1 = 0.0
        self.s2 = 0.0

    def step(self, x: float) -> float:
        c = self.coeffs
        y = c.b0 * x + self.s1
        self.s1 = c.b1 * x - c.a1 * y + self.s2
        self.s2 = c.b2 * x - c.a2 * y
        return y

    def reset(self):
        self.s1 = self.s2 = 0.0


class DelayLine:
    """Integer-sample delay; ``step(x)`` returns the input from ``length`` steps ago."""

    def __init__(self, length: int):
        length = int(length)
        if length < 0:
            raise ValueError("delay length must be non-negative")
        self.length = length
        self._buf = np.zeros(max(length, 1))
        self._pos = 0

    def step(self, x: float) -> float:
        if self.length == 0:
            return x
        out = self._buf[self._pos]
        self._buf[self._pos] = x
        self._pos = (self._pos + 1) % self.length
        return out

    def process(self, x) -> np.ndarray:
        return np.array([self.step(v) for v in np.asarray(x, dtype=float)])


# ---------------------------------------------------------------------------
# spectra


@dataclass(frozen=True)
class PsdEstimate:
    frequencies: np.ndarray
    values: np.ndarray
    convention: str = "double"
    n_segments: int = 1
    segment_length: int = 0
    f_s: float = 0.0
    window: str = "hann"
    units: str = "m^2/Hz"
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.convention not in ("double", "single"):
            raise ValueError("convention must be 'double' or 'single'")
        if np.any(np.asarray(self.values) < 0):
            raise ValueError("PSD values must be non-negative")

    def _fold(self):
        w = np.full(len(self.frequencies), 2.0)
        w[self.frequencies == 0] = 1.0
        if self.f_s and np.isclose(self.frequencies[-1], self.f_s / 2):
            w[-1] = 1.0
        return w

    def double_sided(self) -> "PsdEstimate":
        if self.convention == "double":
            return self
        return _replace(self, values=self.values / self._fold(), convention="double")

    def single_sided(self) -> "PsdEstimate":
        if self.convention == "single":
            return self
        return _replace(self, values=self.values * self._fold(), convention="single")

    def scaled(self, factor: float, units: str) -> "PsdEstimate":
        return _replace(self, values=self.values * factor, units=units)

    def band(self, f_lo: float, f_hi: float) -> "PsdEstimate":
        sel = (self.frequencies >= f_lo) & (self.frequencies <= f_hi)
        return _replace(self, frequencies=self.frequencies[sel], values=self.values[sel])

    def variance(self) -> float:
        """Total power (trapezoid over the stored band, both sides)."""
        s = self.single_sided()
        return float(np.trapezoid(s.values, s.frequencies))

    def to_csv(self, path, convention: str = "single"):
        psd = self.single_sided() if convention == "single" else self.double_sided()
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["frequency_hz", f"psd_{psd.convention}_sided_{psd.units.replace('/', '_per_')}"])
            for f, v in zip(psd.frequencies, psd.values):
                w.writerow([f"{f:.15g}", f"{v:.15g}"])


def _replace(psd, **kw):
    from dataclasses import replace

    return replace(psd, **kw)


def welch_psd(trace, f_s: float, segment_length: int | None = None, window="hann", overlap: float = 0.5) -> PsdEstimate:
    """Averaged periodogram. A 2-D input is treated as an ensemble of traces."""
    x = np.asarray(trace, dtype=float)
    if x.size == 0:
        raise ValueError("empty trace")
    x = np.atleast_2d(x)
    n = x.shape[1]
    nper = n if segment_length is None else int(segment_length)
    if nper > n:
        raise ValueError(f"trace length {n} is shorter than segment_length {nper}")
    noverlap = int(nper * overlap)
    f, p = signal.welch(
        x, fs=f_s, window=window, nperseg=nper, noverlap=noverlap,
        detrend=False, return_onesided=True, scaling="density", axis=-1,
    )
    p = p.mean(axis=0)
    per_trace = 1 + (n - nper) // max(nper - noverlap, 1)
    single = PsdEstimate(
        frequencies=f, values=p, convention="single", n_segments=per_trace * x.shape[0],
        segment_length=nper, f_s=f_s, window=str(window), units="V^2/Hz",
    )
    return single.double_sided()


def lorentzian_psd(f, omega0: float, gamma: float, temperature: float, mass: float, scale: float = 1.0, form: str = "exact"):
    """Double-sided thermal position PSD per Hz at frequencies ``f`` (Hz).

    ``scale`` multiplies the result (e.g. a detector gain squared).
    ``form="exact"`` uses ``gamma^2 Omega^2`` in the denominator,
    ``"resonant"`` the narrow-line approximation ``gamma^2 Omega_0^2``.
    """
    w = 2.0 * np.pi * np.asarray(f, dtype=float)
    damp = w if form == "exact" else omega0
    if form not in ("exact", "resonant"):
        raise ValueError(f"unknown form {form!r}")
    return scale * 2.0 * gamma * K_B * temperature / (mass * ((w**2 - omega0**2) ** 2 + gamma**2 * damp**2))


@dataclass(frozen=True)
class LorentzianFit:
    amplitude: float  # A in A / ((w^2 - w0^2)^2 + g^2 w^2), double-sided
    omega0: float
    gamma: float
    background: float
    covariance: np.ndarray
    residual: float

    @property
    def stderr(self) -> np.ndarray:
        return np.sqrt(np.diag(self.covariance))

    def amplitude_factor(self, mass: float, temperature: float) -> float:
        """Square of the calibration factor, ``A m / (2 gamma k_B T)``."""
        return self.amplitude * mass / (2.0 * self.gamma * K_B * temperature)


def fit_lorentzian(
    psd: PsdEstimate,
    omega0_guess: float,
    gamma_guess: float,
    band: tuple[float, float] | None = None,
    background: bool = False,
    form: str = "exact",
) -> LorentzianFit:
    """Log-domain least-squares fit of a damped-oscillator PSD.

    ``band`` is in Hz and defaults to ``f0 +- max(20 gamma, 0.3 f0) / 2 pi``.
    Parameters are fitted as ``(log A, w0/w0_guess, log g, log bg)``.
    """
    p = psd.double_sided()
    f0 = omega0_guess / (2 * np.pi)
    if band is None:
        half = max(20.0 * gamma_guess, 0.3 * omega0_guess) / (2 * np.pi)
        band = (max(f0 - half, 0.0), f0 + half)
    sel = (p.frequencies >= band[0]) & (p.frequencies <= band[1]) & (p.values > 0)
    f, y = p.frequencies[sel], p.values[sel]
    if len(f) < 5:
        raise ValueError("too few PSD bins inside the fit band")
    w = 2 * np.pi * f
    logy = np.log(y)
    k0 = int(np.argmin(np.abs(w - omega0_guess)))
    a_guess = y[k0] * (gamma_guess * omega0_guess) ** 2
    bg_guess = max(float(np.min(y)) * 0.1, 1e-300)

    def model(theta):
        # trial steps may stray far; clip the log-parameters so exp stays finite
        amp = np.exp(min(theta[0], 700.0))
        w0 = theta[1] * omega0_guess
        g = np.exp(min(theta[2], 700.0))
        damp = w if form == "exact" else w0
        out = amp / ((w**2 - w0**2) ** 2 + g**2 * damp**2)
        if background:
            out = out + np.exp(min(theta[3], 700.0))
        return out

    def resid(theta):
        return np.log(model(theta)) - logy

    x0 = [math.log(a_guess), 1.0, math.log(gamma_guess)]
    if background:
        x0.append(math.log(bg_guess))
    sol = optimize.least_squares(resid, x0, method="lm", xtol=1e-15, ftol=1e-15, gtol=1e-15, max_nfev=20000)
    if not sol.success or not np.all(np.isfinite(sol.x)):
        raise ConvergenceError(f"Lorentzian fit failed: {sol.message}", last_norm=float(np.linalg.norm(sol.fun)))
    dof = max(len(f) - len(x0), 1)
    s2 = float(sol.fun @ sol.fun) / dof
    J = sol.jac
    try:
        cov_t = np.linalg.inv(J.T @ J) * s2
    except np.linalg.LinAlgError:
        cov_t = np.full((len(x0), len(x0)), np.inf)
    amp, w0, g = math.exp(sol.x[0]), sol.x[1] * omega0_guess, math.exp(sol.x[2])
    bg = math.exp(sol.x[3]) if background else 0.0
    # Jacobian of the physical parameters w.r.t. the fitted ones
    d = np.array([amp, omega0_guess, g] + ([bg] if background else []))
    cov = cov_t * d[:, None] * d[None, :]
    if not background:
        cov = np.pad(cov, ((0, 1), (0, 1)))
    return LorentzianFit(amp, w0, g, bg, cov, float(math.sqrt(s2)))


class LorentzianFitter(BaseEstimator):
    """Estimator wrapper: ``fit(psd)`` sets ``omega0_``, ``gamma_``, ``amplitude_``."""

    def __init__(self, omega0_guess=1.0, gamma_guess=1.0, band=None, background=False, form="exact"):
        self.omega0_guess = omega0_guess
        self.gamma_guess = gamma_guess
        self.band = band
        self.background = background
        self.form = form

    def fit(self, psd: PsdEstimate, y=None):
        res = fit_lorentzian(psd, self.omega0_guess, self.gamma_guess, self.band, self.background, self.form)
        self.result_ = res
        self.omega0_, self.gamma_, self.amplitude_ = res.omega0, res.gamma, res.amplitude
        return self

    def predict(self, f):
        r = self.result_
        w = 2 * np.pi * np.asarray(f, dtype=float)
        damp = w if self.form == "exact" else r.omega0
        return r.amplitude / ((w**2 - r.omega0**2) ** 2 + r.gamma**2 * damp**2) + r.background


# ---------------------------------------------------------------------------
# temperature


def effective_temperature(data, omega_i: float, mass: float, mode: str = "equipartition") -> float:
    """Mode temperature from a displacement PSD or from ``(var_x, var_v)``.

    ``mode="equipartition"`` returns ``m (Omega_i^2 <x^2> + <v^2>) / (2 k_B)``
    with the variances integrated from the PSD (velocity from the
    ``Omega^2``-weighted integral). ``"paper-literal"`` additionally subtracts
    the zero-point offset ``hbar Omega_i / (2 k_B)``.
    """
    if isinstance(data, PsdEstimate):
        if not data.units.startswith("m^2"):
            raise ValueError(f"PSD has units {data.units!r}; apply a detector calibration to get m^2/Hz first")
        s = data.single_sided()
        f, v = s.frequencies, s.values
        var_x = float(np.trapezoid(v, f))
        var_v = float(np.trapezoid((2 * np.pi * f) ** 2 * v, f))
    else:
        var_x, var_v = (float(v) for v in data)
    t = mass * (omega_i**2 * var_x + var_v) / (2.0 * K_B)
    if mode == "equipartition":
        return t
    if mode == "paper-literal":
        return t - HBAR * omega_i / (2.0 * K_B)
    raise ValueError(f"unknown mode {mode!r}")


def occupancy(t_eff, omega: float):
    """Mean phonon number ``k_B T / (hbar Omega) - 1/2``, floored at zero."""
    t = np.asarray(t_eff, dtype=float)
    if np.any(t < 0):
        raise ValueError("temperature must be non-negative")
    n = np.maximum(K_B * t / (HBAR * omega) - 0.5, 0.0)
    return float(n) if n.ndim == 0 else n


def temperature_from_occupancy(n, omega: float):
    return HBAR * omega * (2.0 * np.asarray(n, dtype=float) + 1.0) / (2.0 * K_B)

import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from nanocool import presets
from nanocool.calib import (
    DetectorCalibration,
    DetectorCalibrator,
    DigitalGains,
    DriveConfig,
    ElectrodeCalibrator,
    calibrate_detector,
    calibrate_electrode,
    calibration_report,
    digital_gains,
    drive_force,
    physical_gains,
    susceptibility,
    to_fixed_point,
)
from nanocool.dsp import PsdEstimate, lorentzian_psd
from nanocool.errors import CalibrationError, InstabilityError
from nanocool.model import GasEnvironment, drag_coefficient, mbar

OMEGA = np.array([2 * math.pi * f for f in presets.TRAP_FREQUENCIES_HZ])
NOMINAL = DetectorCalibration.nominal(presets.C_VM)


def _table_regulator():
    K = np.zeros((3, 6))
    K[:2, :2] = presets.TABLE_KP
    K[:2, 3:5] = presets.TABLE_KD
    return K


# -- gain conversion -------------------------------------------------------


def test_table_regulator_to_digital_frozen():
    # -3.40e-10 / (5 * 2.83e-16 * 6.87e5) and 2.19e-13 * Omega_x / (same)
    d = digital_gains(_table_regulator(), NOMINAL, presets.published_actuator(), 5.0, OMEGA)
    assert d.proportional[0, 0] == pytest.approx(-0.3497564563498799, rel=1e-12)
    assert d.derivative[0, 0] == pytest.approx(136.22801252733908, rel=1e-12)


def test_table_regulator_matches_table_digital_column():
    d = digital_gains(_table_regulator(), NOMINAL, presets.published_actuator(), 5.0, OMEGA)
    np.testing.assert_allclose(d.proportional, presets.TABLE_KP_DIGITAL, rtol=0.02)
    np.testing.assert_allclose(d.derivative, presets.TABLE_KD_DIGITAL, rtol=0.02)


@given(st.lists(st.floats(-1e-8, 1e-8), min_size=18, max_size=18), st.floats(0.5, 20))
def test_digital_physical_round_trip(vals, amp):
    K = np.array(vals).reshape(3, 6)
    K[:2, [2, 5]] = 0
    K[2, [0, 1, 3, 4]] = 0
    d = digital_gains(K, NOMINAL, presets.published_actuator(), amp, OMEGA)
    back = physical_gains(d, NOMINAL, presets.published_actuator(), amp, OMEGA)
    np.testing.assert_allclose(back, K, rtol=1e-12, atol=1e-30)


def test_digital_gains_need_positive_inputs():
    with pytest.raises(ValueError):
        digital_gains(np.zeros((3, 6)), NOMINAL, presets.published_actuator(), 0.0, OMEGA)
    with pytest.raises(ValueError):
        digital_gains(np.zeros((3, 6)), (1.0, -1.0, 1.0), presets.published_actuator(), 5.0, OMEGA)
    with pytest.raises(ValueError):
        digital_gains(np.zeros((3, 6)), None, presets.published_actuator(), 5.0, OMEGA)


def test_fixed_point_frozen_word():
    g = DigitalGains(presets.TABLE_KP_DIGITAL, presets.TABLE_KD_DIGITAL)
    q = to_fixed_point(g, 9, 7)
    # 136.45 * 128 = 17465.6 -> 17466 / 128
    assert q.derivative[0, 0] == 136.453125
    assert q.integer_bits == 9 and q.fraction_bits == 7


@given(st.lists(st.floats(-255.0, 255.0), min_size=6, max_size=6), st.integers(0, 12))
def test_fixed_point_error_bound(vals, frac):
    v = np.array(vals)
    g = DigitalGains(v[:4].reshape(2, 2), v[:4].reshape(2, 2)[::-1], v[4:])
    q = to_fixed_point(g, 10, frac)
    lsb = 2.0**-frac
    assert np.max(np.abs(q.quantization_error)) <= lsb / 2 + 1e-12
    words = q.matrix / lsb
    np.testing.assert_array_equal(words, np.round(words))


def test_fixed_point_overflow_names_entry():
    g = DigitalGains(np.array([[0.0, 300.0], [0.0, 0.0]]), np.zeros((2, 2)))
    with pytest.raises(OverflowError, match="k_p,ab"):
        to_fixed_point(g, 9, 7)


def test_fixed_point_range_edges():
    ok = DigitalGains(np.array([[-256.0, 255.99]], dtype=float).repeat(2, 0), np.zeros((2, 2)))
    to_fixed_point(ok, 9, 7)
    with pytest.raises(OverflowError):
        to_fixed_point(DigitalGains(np.full((2, 2), 255.999), np.zeros((2, 2))), 9, 7)
    with pytest.raises(ValueError):
        to_fixed_point(ok, 0, 7)


def test_fixed_point_stability_check():
    g = DigitalGains(np.ones((2, 2)), np.ones((2, 2)))
    assert to_fixed_point(g, stability_check=lambda q: 0.5).proportional[0, 0] == 1.0
    with pytest.raises(InstabilityError):
        to_fixed_point(g, stability_check=lambda q: 1.0)


def test_gain_matrix_layout():
    d = DigitalGains(np.array([[1, 2], [3, 4.0]]), np.array([[5, 6], [7, 8.0]]), np.array([9, 10.0]))
    g = d.matrix
    assert g[0, 1] == 2 and g[1, 3] == 7 and g[2, 2] == 9 and g[2, 5] == 10
    assert g[0, 2] == 0 and g[2, 0] == 0
    again = DigitalGains.from_matrix(g)
    np.testing.assert_array_equal(again.matrix, g)


# -- detector ---------------------------------------------------------------


def _thermal_psds(rng, c_vm, env, mass, noise=0.03):
    gam = drag_coefficient(env, presets.published_particle())
    out = []
    for w0, c in zip(OMEGA, c_vm):
        f = np.linspace(w0 / (2 * math.pi) * 0.5, w0 / (2 * math.pi) * 1.5, 4000)
        v = lorentzian_psd(f, w0, gam, env.temperature, mass, c**2)
        out.append(PsdEstimate(f, v * (1 + noise * rng.standard_normal(f.size)).clip(0.2), units="V^2/Hz"))
    return out, gam


def test_detector_round_trip_from_spectra(rng):
    env = GasEnvironment(pressure=mbar(1.2))
    psds, gam = _thermal_psds(rng, presets.C_VM, env, presets.PARTICLE_MASS)
    cal = calibrate_detector(psds, 1e6, env, presets.published_particle(), OMEGA * 1.002)
    np.testing.assert_allclose(cal.c_vm, presets.C_VM, rtol=0.01)
    np.testing.assert_allclose(cal.omega, OMEGA, rtol=1e-4)
    np.testing.assert_allclose(cal.gamma, gam, rtol=0.03)
    assert all(e > 0 for e in cal.c_vm_err)
    assert cal.warnings == ()


def test_detector_warns_on_inconsistent_damping(rng):
    env = GasEnvironment(pressure=mbar(1.2))
    psds, _ = _thermal_psds(rng, presets.C_VM, env, presets.PARTICLE_MASS)
    wrong = GasEnvironment(pressure=mbar(12.0))
    with pytest.warns(RuntimeWarning, match="damping"):
        cal = calibrate_detector(psds, 1e6, wrong, presets.published_particle(), OMEGA)
    assert len(cal.warnings) == 3


def test_detector_calibrator_estimator(rng):
    env = GasEnvironment(pressure=mbar(1.2))
    psds, _ = _thermal_psds(rng, presets.C_VM, env, presets.PARTICLE_MASS, noise=0.0)
    est = DetectorCalibrator(env=env, particle=presets.published_particle(), omega_guess=OMEGA).fit(psds)
    np.testing.assert_allclose(est.c_vm_, presets.C_VM, rtol=1e-6)
    volts = np.ones((2, 3, 5)) * np.array(presets.C_VM)[None, :, None]
    np.testing.assert_allclose(est.transform(volts), 1.0)


def test_detector_rejects_bad_shape():
    with pytest.raises(ValueError, match="shape"):
        calibrate_detector(np.zeros((4, 2, 100)), 1e6, GasEnvironment(pressure=100.0), presets.published_particle(), OMEGA)


def test_detector_calibration_validation():
    with pytest.raises(ValueError):
        DetectorCalibration((1.0, 0.0, 1.0), (1.0, 1.0, 1.0))
    with pytest.raises(ValueError):
        DetectorCalibration((1.0, 1.0, 1.0), (1.0, -1.0, 1.0))


# -- electrodes ------------------------------------------------------------


def _driven_ensemble(rng, f0, c_vm, w0, gamma, mass, w_dr, n_rec=20, n=20000, f_s=1e6, floor=1e-3):
    t = np.arange(n) / f_s
    amp_v = c_vm * abs(susceptibility(w_dr, w0, gamma, mass)) * f0
    return amp_v * np.cos(w_dr * t)[None, :] + floor * rng.standard_normal((n_rec, n))


def test_drive_force_recovers_amplitude(rng):
    w0, gam, m, c = OMEGA[0], 6.2e3, presets.PARTICLE_MASS, presets.C_VM[0]
    w_dr = w0 * 1.013
    trace = _driven_ensemble(rng, 2e-15, c, w0, gam, m, w_dr)
    d = DriveConfig(electrode=0, omega_drive=w_dr, amplitude=1.0, duration=0.02)
    f0, err, snr = drive_force(trace, 1e6, d, c, w0, gam, m)
    assert f0 == pytest.approx(2e-15, rel=0.01)
    assert snr > 10 and err > 0


def test_drive_force_low_snr_names_remedy(rng):
    w0, gam, m, c = OMEGA[0], 6.2e3, presets.PARTICLE_MASS, presets.C_VM[0]
    w_dr = w0 * 1.013
    trace = _driven_ensemble(rng, 1e-19, c, w0, gam, m, w_dr, n_rec=1)
    d = DriveConfig(electrode=0, omega_drive=w_dr, amplitude=1.0, duration=0.02)
    with pytest.raises(CalibrationError, match="tau_el"):
        drive_force(trace, 1e6, d, c, w0, gam, m)


def test_electrode_slope(rng):
    w0, gam, m, c = OMEGA[1], 6.2e3, presets.PARTICLE_MASS, presets.C_VM[1]
    w_dr = w0 * 1.013
    cal = DetectorCalibration(presets.C_VM, presets.C_VM_ERR, omega=tuple(OMEGA), gamma=(gam,) * 3)
    amps = [2.0, 4.0, 6.0]
    coeff = 2.21e-16
    traces = [_driven_ensemble(rng, coeff * a, c, w0, gam, m, w_dr) for a in amps]
    drives = [DriveConfig(0, w_dr, a, 0.02, axis=1) for a in amps]
    res = calibrate_electrode(traces, drives, cal, m, 1e6)
    assert res.coefficient == pytest.approx(coeff, rel=0.01)
    est = ElectrodeCalibrator(cal, m, 1e6).fit(traces, drives)
    assert est.coefficient_ == res.coefficient
    np.testing.assert_allclose(est.predict([1.0, 2.0]), [coeff, 2 * coeff], rtol=0.01)


def test_electrode_input_checks():
    cal = DetectorCalibration(presets.C_VM, presets.C_VM_ERR, omega=tuple(OMEGA), gamma=(1.0,) * 3)
    with pytest.raises(ValueError):
        calibrate_electrode([np.zeros(10)], [], cal, 1.0, 1e6)
    with pytest.raises(ValueError):
        DriveConfig(electrode=3, omega_drive=1.0, amplitude=1.0, duration=1.0)
    with pytest.raises(ValueError):
        DriveConfig(electrode=0, omega_drive=1.0, amplitude=1.0, duration=0.0)


def test_calibration_report(tmp_path):
    import json

    path = tmp_path / "cal.json"
    calibration_report(path, detector=NOMINAL, metadata={"seed": 1})
    data = json.loads(path.read_text())
    assert data["detector"]["c_vm"] == list(presets.C_VM)
    assert data["metadata"]["seed"] == 1

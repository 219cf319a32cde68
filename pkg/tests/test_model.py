import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from nanocool import presets
from nanocool.model import (
    HBAR,
    K_B,
    ActuatorCalibration,
    GasEnvironment,
    NoiseParams,
    ParticleParams,
    TrapParams,
    actuator_matrix,
    drag_coefficient,
    mbar,
)


def test_mass_from_radius_and_density():
    # 2200 kg/m^3 * 4/3 pi (71.5 nm)^3, evaluated by hand
    p = ParticleParams(radius=71.5e-9)
    assert p.mass == pytest.approx(3.3685e-18, rel=1e-4)
    assert p.mass == pytest.approx(presets.PARTICLE_MASS, rel=0.01)


def test_trap_from_hz_is_angular():
    t = TrapParams.from_hz((96.24e3, 101.49e3, 31.52e3))
    assert t.omega_array[0] == pytest.approx(2 * math.pi * 96.24e3)


@pytest.mark.parametrize("bad", [(1.0, 2.0), (1.0, -1.0, 2.0), (0.0, 1.0, 1.0), (np.nan, 1.0, 1.0)])
def test_trap_rejects_bad_frequencies(bad):
    with pytest.raises(ValueError):
        TrapParams(omega=bad)


def test_particle_rejects_nonpositive():
    with pytest.raises(ValueError):
        ParticleParams(radius=-1e-9)
    with pytest.raises(ValueError):
        ParticleParams(radius=1e-7, mass=0.0)


def test_drag_at_1p2_mbar_gives_kilohertz_linewidth():
    g = drag_coefficient(GasEnvironment(pressure=mbar(1.2)), presets.published_particle())
    # 15.8 r^2 p / (m vbar) with vbar ~ 463 m/s for air at 293 K
    assert g == pytest.approx(15.8 * 71.5e-9**2 * 120 / (3.37e-18 * 463.0), rel=0.01)


@given(st.floats(1e-10, 10.0), st.floats(1.5, 20.0))
def test_drag_linear_in_pressure(p, k):
    part = presets.published_particle()
    g1 = drag_coefficient(GasEnvironment(pressure=p), part)
    g2 = drag_coefficient(GasEnvironment(pressure=k * p), part)
    assert g2 == pytest.approx(k * g1, rel=1e-12)


def test_state_space_layout(published_system):
    ss = published_system.state_space()
    w = published_system.omega
    assert ss.A.shape == (6, 6) and ss.B.shape == (6, 3) and ss.C.shape == (3, 6)
    np.testing.assert_array_equal(ss.A[:3, 3:], np.eye(3))
    np.testing.assert_allclose(np.diag(ss.A[3:, :3]), -(w**2))
    np.testing.assert_array_equal(ss.B[:3], 0.0)
    np.testing.assert_array_equal(ss.C, np.hstack([np.eye(3), np.zeros((3, 3))]))
    # force PSD 2 m gamma k_B T over m^2 in the velocity block
    g, m = published_system.gamma, published_system.mass
    assert ss.process_noise_psd[3, 3] == pytest.approx(2 * g * K_B * 293 / m, rel=1e-12)


def test_undamped_eigenvalues_are_trap_frequencies(undamped_system):
    ev = np.linalg.eigvals(undamped_system.state_space().A)
    np.testing.assert_allclose(np.sort(np.abs(ev.imag))[::2], np.sort(undamped_system.omega), rtol=1e-12)
    np.testing.assert_allclose(ev.real, 0.0, atol=1e-6)


def test_actuator_matrix_normalized_by_xx():
    act = presets.published_actuator()
    m = presets.PARTICLE_MASS
    B = actuator_matrix(act, presets.published_particle())
    assert B[0, 0] == pytest.approx(-1 / m)
    assert B[0, 1] == pytest.approx(2.18 / 2.83 / m)
    assert B[1, 0] == pytest.approx(2.21 / 2.83 / m)
    assert B[1, 1] == pytest.approx(2.36 / 2.83 / m)
    assert act.reference == max(max(r) for r in act.c_nv)


@given(st.floats(0.1, 10.0))
def test_actuator_matrix_scale_invariant(k):
    c = np.asarray(presets.C_NV)
    part = presets.published_particle()
    B1 = actuator_matrix(ActuatorCalibration(c_nv=c), part)
    B2 = actuator_matrix(ActuatorCalibration(c_nv=k * c), part)
    np.testing.assert_allclose(B1, B2, rtol=1e-12)


def test_actuator_rejects_nonpositive():
    with pytest.raises(ValueError):
        ActuatorCalibration(c_nv=((1e-16, 0.0), (1e-16, 1e-16)))


def test_quantum_closure_derives_backaction():
    eta = (0.1, 0.5, 1.0)
    n = NoiseParams(measurement_sigma=(1e-12, 1e-12, 1e-12), detection_efficiency=eta, quantum_enabled=True)
    for i in range(3):
        assert n.imprecision_psd[i] * n.backaction[i] == pytest.approx(HBAR**2 / (4 * eta[i]), rel=1e-12)


def test_quantum_closure_derives_sigma():
    n = NoiseParams(detection_efficiency=(0.3,) * 3, quantum_enabled=True, backaction_force_psd=(2e-43,) * 3)
    assert n.measurement_sigma[0] ** 2 * 2e-43 == pytest.approx(HBAR**2 / 1.2, rel=1e-12)


def test_quantum_closure_violation_rejected():
    with pytest.raises(ValueError, match="closure"):
        NoiseParams(measurement_sigma=(1e-12,) * 3, quantum_enabled=True, backaction_force_psd=(1e-40,) * 3)


def test_classical_noise_has_no_backaction():
    n = NoiseParams(measurement_sigma=(1e-11,) * 3, backaction_force_psd=(1e-40,) * 3)
    np.testing.assert_array_equal(n.backaction, 0.0)


def test_efficiency_range_checked():
    with pytest.raises(ValueError):
        NoiseParams(detection_efficiency=(1.2, 1.0, 1.0))


def test_with_pressure_rescales_gamma(published_system):
    low = published_system.with_pressure(mbar(1.2e-3))
    assert low.gamma == pytest.approx(published_system.gamma * 1e-3, rel=1e-12)

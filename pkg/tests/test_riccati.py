import math

import numpy as np
import pytest
from hypothesis import assume, given
from hypothesis import strategies as st
from scipy import linalg

from nanocool.errors import ConvergenceError, InstabilityError, StabilizabilityError
from nanocool.model import StateSpace
from nanocool.riccati import (
    CostWeights,
    DiscreteLQR,
    DiscreteStateSpace,
    KalmanFilter,
    care,
    care_residual,
    cost_weights,
    dare,
    dare_residual,
    design_controller,
    discretize,
    expm_series,
    kalman_steady_gain,
    structure_mask,
    van_loan_covariance,
)


def _oscillator(w, gamma=0.0, q=0.0):
    A = np.array([[0.0, 1.0], [-w * w, -gamma]])
    B = np.array([[0.0], [1.0]])
    return StateSpace(A=A, B=B, C=np.array([[1.0, 0.0]]), process_noise_psd=np.diag([0.0, q]))


def _dss(A, B, C=None, Qw=None):
    n = A.shape[0]
    return DiscreteStateSpace(A_d=A, B_d=B, C_d=np.eye(n) if C is None else C, T_s=1.0,
                              process_covariance=np.eye(n) if Qw is None else Qw)


# -- scalar closed forms ---------------------------------------------------


def test_scalar_dare_closed_form():
    # s^2 - a^2 s... for a = 0.5, b = q = r = 1: s = (1/4 + sqrt(1/16 + 4)) / 2
    s = dare(np.array([[0.5]]), np.array([[1.0]]), np.array([[1.0]]), np.array([[1.0]]))
    assert s[0, 0] == pytest.approx((0.25 + math.sqrt(0.0625 + 4)) / 2, abs=1e-12)
    assert s[0, 0] == pytest.approx(1.13278, abs=1e-5)


def test_scalar_care_closed_form():
    s = care(np.array([[0.0]]), np.array([[1.0]]), np.array([[1.0]]), np.array([[1.0]]))
    assert s[0, 0] == pytest.approx(1.0, abs=1e-12)
    # a = 1: s = a + sqrt(a^2 + q b^2 / r) = 1 + sqrt(2)
    s = care(np.array([[1.0]]), np.array([[1.0]]), np.array([[1.0]]), np.array([[1.0]]))
    assert s[0, 0] == pytest.approx(1 + math.sqrt(2), abs=1e-12)


def test_scalar_kalman_is_golden_ratio():
    # random walk with unit process and measurement noise: P^2 = P + 1
    kg = kalman_steady_gain(_dss(np.eye(1), np.zeros((1, 1))), np.eye(1))
    phi = (1 + math.sqrt(5)) / 2
    assert kg.P[0, 0] == pytest.approx(phi, abs=1e-12)
    assert kg.L[0, 0] == pytest.approx(phi / (phi + 1), abs=1e-12)


def test_dare_zero_weight_is_zero():
    S = dare(np.diag([0.5, 0.2]), np.eye(2), np.zeros((2, 2)), np.eye(2))
    np.testing.assert_array_equal(S, 0.0)


def test_care_imaginary_axis_rejected():
    # undamped oscillator without position or velocity weight or actuation on the mode
    A = np.array([[0.0, 1.0], [-1.0, 0.0]])
    with pytest.raises(StabilizabilityError):
        care(A, np.zeros((2, 1)), np.zeros((2, 2)), np.eye(1))


def test_dare_unstabilizable_raises():
    A = np.diag([2.0, 0.5])
    B = np.array([[0.0], [1.0]])
    with pytest.raises((ConvergenceError, StabilizabilityError, np.linalg.LinAlgError)):
        dare(A, B, np.eye(2), np.eye(1))


# -- discretization --------------------------------------------------------


def test_discretize_rotation_block():
    w, T = 2 * math.pi * 96.24e3, 64e-9
    d = discretize(_oscillator(w), T)
    c, s = math.cos(w * T), math.sin(w * T)
    np.testing.assert_allclose(d.A_d, [[c, s / w], [-w * s, c]], rtol=1e-13, atol=1e-20)
    # held unit acceleration: x = (1 - cos) / w^2, v = sin / w
    np.testing.assert_allclose(d.B_d[:, 0], [(1 - c) / w**2, s / w], rtol=1e-10)


def test_rectangle_input_rule():
    d = discretize(_oscillator(3.0), 0.01, input_rule="rectangle")
    np.testing.assert_allclose(d.B_d, [[0.0], [0.01]])


def test_van_loan_undamped_closed_form():
    w, T, q = 5.0, 0.3, 2.0
    Q = van_loan_covariance(np.array([[0.0, 1.0], [-w * w, 0.0]]), np.diag([0.0, q]), T)
    s2 = math.sin(2 * w * T)
    expect = np.array([
        [q / (2 * w**2) * (T - s2 / (2 * w)), q * math.sin(w * T) ** 2 / (2 * w**2)],
        [q * math.sin(w * T) ** 2 / (2 * w**2), q / 2 * (T + s2 / (2 * w))],
    ])
    np.testing.assert_allclose(Q, expect, rtol=1e-12)


def test_euler_noise_rule():
    d = discretize(_oscillator(3.0, q=2.0), 1e-3, noise_rule="euler")
    np.testing.assert_allclose(d.process_covariance, np.diag([0.0, 2e-3]))


def test_discretize_rejects_bad_step():
    with pytest.raises(ValueError):
        discretize(_oscillator(1.0), 0.0)
    with pytest.raises(ValueError):
        discretize(_oscillator(1.0), 1.0, input_rule="tustin")


@given(st.integers(1, 6), st.floats(0.01, 30.0), st.integers(0, 2**31 - 1))
def test_expm_matches_pade(n, scale, seed):
    M = np.random.default_rng(seed).standard_normal((n, n)) * scale / n
    E = expm_series(M)
    ref = linalg.expm(M)
    np.testing.assert_allclose(E, ref, rtol=1e-9, atol=1e-12 * np.abs(ref).max())


@given(st.floats(1.0, 1e3), st.floats(0.0, 0.5), st.floats(1e-4, 1.0))
def test_van_loan_preserves_stationary_covariance(w, zeta, wt):
    # exact discretization: Phi P Phi^T + Qd = P for the stationary P
    gamma = 2 * zeta * w + 1e-3 * w
    q = 1.0
    A = np.array([[0.0, 1.0], [-w * w, -gamma]])
    W = np.diag([0.0, q])
    T = wt / w
    P = np.diag([q / (2 * gamma * w * w), q / (2 * gamma)])
    Phi = expm_series(A * T)
    Qd = van_loan_covariance(A, W, T)
    np.testing.assert_allclose(Phi @ P @ Phi.T + Qd, P, rtol=1e-8, atol=1e-12 * P.max())


# -- random stabilizable systems -------------------------------------------


def _random_problem(seed, n, m):
    rng = np.random.default_rng(seed)
    A = rng.standard_normal((n, n)) / math.sqrt(n) * rng.uniform(0.5, 1.5)
    B = rng.standard_normal((n, m))
    G = rng.standard_normal((n, n))
    Q = G @ G.T + 1e-3 * np.eye(n)
    H = rng.standard_normal((m, m))
    R = H @ H.T + 0.1 * np.eye(m)
    return A, B, Q, R


@given(st.integers(0, 2**31 - 1), st.integers(1, 6), st.integers(1, 3))
def test_dare_residual_random(seed, n, m):
    A, B, Q, R = _random_problem(seed, n, m)
    S = dare(A, B, Q, R)
    assert dare_residual(A, B, Q, R, S) < 1e-9
    assert np.all(np.linalg.eigvalsh(S) > -1e-9 * np.abs(S).max())
    K = np.linalg.solve(R + B.T @ S @ B, B.T @ S @ A)
    assert np.max(np.abs(np.linalg.eigvals(A - B @ K))) < 1


@given(st.integers(0, 2**31 - 1), st.integers(1, 6), st.integers(1, 3))
def test_care_residual_random(seed, n, m):
    A, B, Q, R = _random_problem(seed, n, m)
    S = care(A, B, Q, R)
    assert care_residual(A, B, Q, R, S) < 1e-9
    K = np.linalg.solve(R, B.T @ S)
    assert np.max(np.linalg.eigvals(A - B @ K).real) < 0


@given(st.integers(0, 2**31 - 1), st.floats(1e-3, 1e3))
def test_dare_scales_with_weights(seed, k):
    A, B, Q, R = _random_problem(seed, 3, 2)
    S1 = dare(A, B, Q, R)
    S2 = dare(A, B, k * Q, k * R)
    np.testing.assert_allclose(S2, k * S1, rtol=1e-7, atol=1e-9 * k * np.abs(S1).max())


@given(st.integers(0, 2**31 - 1))
def test_dare_monotone_in_state_weight(seed):
    A, B, Q, R = _random_problem(seed, 3, 1)
    S1 = dare(A, B, Q, R)
    S2 = dare(A, B, 2 * Q, R)
    assert np.linalg.eigvalsh(S2 - S1).min() > -1e-8 * np.abs(S2).max()


# -- the published plant ---------------------------------------------------


def test_published_system_residuals(undamped_system):
    ss = undamped_system.state_space()
    w = cost_weights(undamped_system.omega, undamped_system.mass)
    g = design_controller(ss, 64e-9, w, mask=structure_mask(False))
    d = discretize(ss, 64e-9, input_rule="rectangle")
    assert dare_residual(d.A_d, d.B_d, w.Q, w.R, g.S_d) < 1e-9
    assert care_residual(ss.A, ss.B, w.Q, w.R, g.S) < 1e-9


def test_continuous_limit(undamped_system):
    ss = undamped_system.state_space()
    mask = structure_mask(False)
    g = design_controller(ss, 1e-11, mask=mask)
    big = np.abs(g.K) > 1e-6 * np.abs(g.K).max(axis=1, keepdims=True)
    np.testing.assert_allclose(g.K_d[big], g.K[big], rtol=1e-2)


def test_cost_weights_layout():
    w = np.array([1.0, 2.0, 4.0])
    cw = cost_weights(w, 2.0)
    np.testing.assert_allclose(np.diag(cw.Q), [2, 8, 32, 2, 2, 2])
    np.testing.assert_allclose(np.diag(cw.R), [50, 12.5, 3.125])
    np.testing.assert_allclose(np.diag(cost_weights(w, 2.0, "position").Q)[3:], 0.0)
    with pytest.raises(ValueError):
        cost_weights(w, 2.0, "kinetic")


def test_cost_weights_validation():
    with pytest.raises(ValueError):
        CostWeights(Q=np.array([[1.0, 2.0], [0.0, 1.0]]), R=np.eye(1))
    with pytest.raises(ValueError):
        CostWeights(Q=np.eye(2), R=np.zeros((1, 1)))
    with pytest.raises(ValueError):
        CostWeights(Q=-np.eye(2), R=np.eye(1))


def test_structure_mask_decouples_z():
    m = structure_mask()
    assert m[0, 2] and m[1, 5] and m[2, 0] and m[2, 4]
    assert m[2, 2] and not m[2, 5]
    assert not structure_mask(False)[2, 2]


def test_masked_design_respects_mask(undamped_system):
    g = design_controller(undamped_system.state_space(), 64e-9)
    np.testing.assert_array_equal(g.K_d[structure_mask()], 0.0)


def test_mask_can_destabilize():
    # a mask removing the only useful input leaves an unstable mode
    A = np.diag([1.5])
    d = _dss(A, np.eye(1))
    lqr = DiscreteLQR(Q=np.eye(1), R=np.eye(1), mask=np.array([[True]]))
    with pytest.raises(InstabilityError):
        lqr.fit(d)


def test_lqr_estimator_predict():
    d = _dss(np.array([[0.5]]), np.eye(1))
    lqr = DiscreteLQR(Q=np.eye(1), R=np.eye(1)).fit(d)
    s = (0.25 + math.sqrt(0.0625 + 4)) / 2
    assert lqr.K_[0, 0] == pytest.approx(0.5 * s / (1 + s))
    np.testing.assert_allclose(lqr.predict([[2.0]]), [[-2 * lqr.K_[0, 0]]])
    assert lqr.get_params()["Q"] is not None


def test_kalman_filter_converges_to_steady_gain(rng):
    A = np.array([[0.99, 0.1], [-0.1, 0.99]])
    C = np.array([[1.0, 0.0]])
    d = _dss(A, np.zeros((2, 1)), C, 0.01 * np.eye(2))
    kf = KalmanFilter(measurement_covariance=np.eye(1) * 0.1, P0=10 * np.eye(2)).fit(d)
    kf.transform(rng.standard_normal((400, 1)))
    P_post_steady = (np.eye(2) - kf.L_ @ C) @ kf.P_
    np.testing.assert_allclose(kf.covariances_[-1], P_post_steady, rtol=1e-6)


def test_kalman_undetectable_raises():
    A = np.diag([1.2, 0.5])
    C = np.array([[0.0, 1.0]])
    with pytest.raises(StabilizabilityError):
        kalman_steady_gain(_dss(A, np.zeros((2, 1)), C, np.eye(2)), np.eye(1))

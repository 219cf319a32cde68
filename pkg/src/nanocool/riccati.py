"""Controller and estimator synthesis.

Continuous LQR via the Hamiltonian Schur method, exact discretization by a
balanced Taylor series, discrete LQR via structure-preserving doubling, and
the steady-state Kalman filter as the dual problem.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .errors import ConvergenceError, InstabilityError, StabilizabilityError
from .model import StateSpace


@dataclass(frozen=True)
class DiscreteStateSpace:
    A_d: np.ndarray
    B_d: np.ndarray
    C_d: np.ndarray
    T_s: float
    process_covariance: np.ndarray
    input_rule: str = "zoh"
    noise_rule: str = "van_loan"

    @property
    def n_states(self) -> int:
        return self.A_d.shape[0]


@dataclass(frozen=True)
class CostWeights:
    Q: np.ndarray
    R: np.ndarray

    def __post_init__(self):
        Q = np.atleast_2d(np.asarray(self.Q, dtype=float))
        R = np.atleast_2d(np.asarray(self.R, dtype=float))
        if not np.allclose(Q, Q.T, rtol=1e-12, atol=0):
            raise ValueError("Q must be symmetric")
        if not np.allclose(R, R.T, rtol=1e-12, atol=0):
            raise ValueError("R must be symmetric")
        if np.linalg.eigvalsh(Q).min() < -1e-12 * max(np.abs(Q).max(), 1e-300):
            raise ValueError("Q must be positive semidefinite")
        try:
            np.linalg.cholesky(R)
        except np.linalg.LinAlgError:
            raise ValueError("R must be positive definite") from None
        object.__setattr__(self, "Q", Q)
        object.__setattr__(self, "R", R)


@dataclass(frozen=True)
class ControllerGains:
    K: np.ndarray | None
    K_d: np.ndarray
    S: np.ndarray | None
    S_d: np.ndarray
    structure_mask: np.ndarray = field(default_factory=lambda: np.zeros((3, 6), bool))

    @property
    def proportional(self) -> np.ndarray:
        return self.K_d[:, :3]

    @property
    def derivative(self) -> np.ndarray:
        return self.K_d[:, 3:]


@dataclass(frozen=True)
class KalmanGain:
    L: np.ndarray
    P: np.ndarray


# ---------------------------------------------------------------------------
# matrix exponential and discretization


def _balance(M):
    _, (scale, _) = linalg.matrix_balance(M, permute=False, separate=True)
    return scale


def expm_series(M, tol: float = 1e-15, max_terms: int = 200) -> np.ndarray:
    """Matrix exponential as a truncated Taylor series.

    The matrix is first diagonally balanced and, if needed, scaled by a power
    of two (undone by repeated squaring) so the series converges quickly.
    Terms are summed until a term's norm drops below ``tol`` relative to the
    partial sum.
    """
    M = np.asarray(M, dtype=float)
    n = M.shape[0]
    if not np.all(np.isfinite(M)):
        raise ValueError("matrix must be finite")
    s = _balance(M)
    Mb = M * s[None, :] / s[:, None]
    norm = np.linalg.norm(Mb, 1)
    squarings = max(0, int(math.ceil(math.log2(norm / 0.5)))) if norm > 0.5 else 0
    Mb = Mb / 2.0**squarings
    term = np.eye(n)
    total = np.eye(n)
    term_norm = 1.0
    for k in range(1, max_terms + 1):
        term = term @ Mb / k
        total = total + term
        term_norm = np.linalg.norm(term, 1)
        if term_norm <= tol * np.linalg.norm(total, 1):
            break
    else:
        raise ConvergenceError(
            f"exponential series did not converge in {max_terms} terms "
            f"(last term norm {term_norm:.3e})",
            last_norm=term_norm,
        )
    for _ in range(squarings):
        total = total @ total
    return total * s[:, None] / s[None, :]


def discretize(
    ss: StateSpace,
    T_s: float,
    tol: float = 1e-15,
    input_rule: str = "zoh",
    noise_rule: str = "van_loan",
) -> DiscreteStateSpace:
    """Sampled-data model with the input held over each period.

    ``input_rule="zoh"`` integrates the held input exactly,
    ``B_d = sum_k T^(k+1) A^k B / (k+1)!`` (equal to ``(A_d - I) A^-1 B`` for
    invertible ``A``); ``"rectangle"`` uses the first-order ``B_d = T B``.
    ``noise_rule="van_loan"`` gives the exact one-step disturbance
    covariance, ``"euler"`` the first-order ``W T``.
    """
    if not T_s > 0:
        raise ValueError("T_s must be positive")
    if not tol > 0:
        raise ValueError("tol must be positive")
    A, B, W = ss.A, ss.B, ss.process_noise_psd
    n, m = B.shape
    if input_rule == "zoh":
        aug = np.zeros((n + m, n + m))
        aug[:n, :n] = A * T_s
        aug[:n, n:] = B * T_s
        E = expm_series(aug, tol=tol)
        A_d, B_d = E[:n, :n], E[:n, n:]
    elif input_rule == "rectangle":
        A_d = expm_series(A * T_s, tol=tol)
        B_d = B * T_s
    else:
        raise ValueError(f"unknown input_rule {input_rule!r}")
    if noise_rule == "van_loan":
        Qd = van_loan_covariance(A, W, T_s, tol=tol)
    elif noise_rule == "euler":
        Qd = W * T_s
    else:
        raise ValueError(f"unknown noise_rule {noise_rule!r}")
    return DiscreteStateSpace(
        A_d=A_d,
        B_d=B_d,
        C_d=ss.C.copy(),
        T_s=float(T_s),
        process_covariance=Qd,
        input_rule=input_rule,
        noise_rule=noise_rule,
    )


def van_loan_covariance(A, W, T_s, tol=1e-15) -> np.ndarray:
    """Covariance of ``int_0^T e^{A s} w(s) ds`` for white ``w`` of intensity ``W``."""
    n = A.shape[0]
    if not np.any(W):
        return np.zeros((n, n))
    M = np.zeros((2 * n, 2 * n))
    M[:n, :n] = -A * T_s
    M[:n, n:] = W * T_s
    M[n:, n:] = A.T * T_s
    E = expm_series(M, tol=tol)
    Qd = E[n:, n:].T @ E[:n, n:]
    return 0.5 * (Qd + Qd.T)


# ---------------------------------------------------------------------------
# Riccati solvers


def _scaling(A, B, Q, R):
    d = _balance(A) if A.shape[0] > 1 else np.ones(1)
    Bs = B / d[:, None]
    col = np.linalg.norm(Bs, axis=0)
    e = np.where(col > 0, 1.0 / np.where(col > 0, col, 1.0), 1.0)
    Qs = Q * d[:, None] * d[None, :]
    Rs = R * e[:, None] * e[None, :]
    c = np.linalg.norm(Qs)
    c = 1.0 / c if c > 0 else 1.0 / np.linalg.norm(Rs)
    return d, e, c


def dare_residual(A, B, Q, R, S) -> float:
    """Relative Frobenius residual of the discrete Riccati equation."""
    BtSA = B.T @ S @ A
    res = A.T @ S @ A - S + Q - BtSA.T @ np.linalg.solve(R + B.T @ S @ B, BtSA)
    scale = max(np.linalg.norm(S), np.linalg.norm(Q))
    return float(np.linalg.norm(res) / scale) if scale > 0 else float(np.linalg.norm(res))


def care_residual(A, B, Q, R, S) -> float:
    res = S @ A + A.T @ S + Q - S @ B @ np.linalg.solve(R, B.T @ S)
    scale = max(np.linalg.norm(S), np.linalg.norm(Q))
    return float(np.linalg.norm(res) / scale) if scale > 0 else float(np.linalg.norm(res))


def _sda(A, G, H, tol, max_iter):
    n = A.shape[0]
    I = np.eye(n)
    for _ in range(max_iter):
        W = I + G @ H
        WA = np.linalg.solve(W, A)
        WG = np.linalg.solve(W, G)
        H_next = H + A.T @ H @ WA
        G = G + A @ WG @ A.T
        A = A @ WA
        G = 0.5 * (G + G.T)
        H_next = 0.5 * (H_next + H_next.T)
        if not np.all(np.isfinite(H_next)):
            return None
        delta = np.linalg.norm(H_next - H)
        H = H_next
        if delta <= tol * max(np.linalg.norm(H), 1e-300):
            return H
    return None


def _riccati_fixed_point(A, B, Q, R, tol, max_iter):
    S = Q.copy()
    history = []
    for k in range(max_iter):
        BtSA = B.T @ S @ A
        S_next = A.T @ S @ A + Q - BtSA.T @ np.linalg.solve(R + B.T @ S @ B, BtSA)
        S_next = 0.5 * (S_next + S_next.T)
        delta = np.linalg.norm(S_next - S) / max(np.linalg.norm(S_next), 1e-300)
        if k % 100 == 0:
            history.append(delta)
        if not np.all(np.isfinite(S_next)) or (len(history) > 3 and history[-1] > 1e6 * history[1]):
            raise ConvergenceError("Riccati fixed-point iteration diverged", history=history)
        S = S_next
        if delta < tol:
            return S
    raise ConvergenceError(
        f"Riccati fixed-point iteration did not converge in {max_iter} steps",
        last_norm=history[-1] if history else None,
        history=history,
    )


def dare(A, B, Q, R, tol: float = 1e-14, max_iter: int = 200, rtol_residual: float = 1e-10):
    """Stabilizing solution of the discrete algebraic Riccati equation.

    Structure-preserving doubling on a balanced problem, with one Hewer
    (Newton) refinement when the residual is not yet small, and plain
    fixed-point iteration as a fallback.
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.atleast_2d(np.asarray(B, dtype=float))
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    R = np.atleast_2d(np.asarray(R, dtype=float))
    if not np.any(Q):
        return np.zeros_like(A)
    d, e, c = _scaling(A, B, Q, R)
    As = A * d[None, :] / d[:, None]
    Bs = B * e[None, :] / d[:, None]
    Qs = Q * d[:, None] * d[None, :] * c
    Rs = R * e[:, None] * e[None, :] * c
    G = Bs @ np.linalg.solve(Rs, Bs.T)
    # overflow is detected explicitly; an unstabilizable pair ends in ConvergenceError
    with np.errstate(over="ignore", invalid="ignore"):
        Ss = _sda(As, 0.5 * (G + G.T), Qs, tol, max_iter)
        if Ss is not None and dare_residual(As, Bs, Qs, Rs, Ss) > rtol_residual:
            Ss = _hewer_step(As, Bs, Qs, Rs, Ss)
        if Ss is None or not dare_residual(As, Bs, Qs, Rs, Ss) <= rtol_residual:
            Ss = _riccati_fixed_point(As, Bs, Qs, Rs, tol=1e-15, max_iter=200_000)
    S = Ss / d[:, None] / d[None, :] / c
    return 0.5 * (S + S.T)


def _hewer_step(A, B, Q, R, S):
    K = np.linalg.solve(R + B.T @ S @ B, B.T @ S @ A)
    Ac = A - B @ K
    if np.max(np.abs(np.linalg.eigvals(Ac))) >= 1:
        return S
    S_new = linalg.solve_discrete_lyapunov(Ac.T, Q + K.T @ R @ K)
    return 0.5 * (S_new + S_new.T)


def care(A, B, Q, R, newton_steps: int = 2):
    """Stabilizing solution of the continuous algebraic Riccati equation."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.atleast_2d(np.asarray(B, dtype=float))
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    R = np.atleast_2d(np.asarray(R, dtype=float))
    n = A.shape[0]
    d, e, c = _scaling(A, B, Q, R)
    As = A * d[None, :] / d[:, None]
    Bs = B * e[None, :] / d[:, None]
    Qs = Q * d[:, None] * d[None, :] * c
    Rs = R * e[:, None] * e[None, :] * c
    G = Bs @ np.linalg.solve(Rs, Bs.T)
    H = np.block([[As, -G], [-Qs, -As.T]])
    eig = np.linalg.eigvals(H)
    if np.min(np.abs(eig.real)) < 1e-11 * np.linalg.norm(H, 1):
        raise StabilizabilityError(
            "Hamiltonian has eigenvalues on the imaginary axis; "
            "(A, B) is not stabilizable or (A, Q) is not detectable"
        )
    _, U, sdim = linalg.schur(H, output="real", sort="lhp")
    if sdim != n:
        raise StabilizabilityError("stable invariant subspace has the wrong dimension")
    U11, U21 = U[:n, :n], U[n:, :n]
    Ss = np.linalg.solve(U11.T, U21.T).T
    Ss = 0.5 * (Ss + Ss.T)
    for _ in range(newton_steps):
        Ac = As - G @ Ss
        X = linalg.solve_continuous_lyapunov(Ac.T, -(Qs + Ss @ G @ Ss))
        Ss = 0.5 * (X + X.T)
    S = Ss / d[:, None] / d[None, :] / c
    return 0.5 * (S + S.T)


# ---------------------------------------------------------------------------
# operations on system objects


def solve_care(ss: StateSpace, weights: CostWeights):
    """Continuous LQR: returns ``(S, K)`` with ``K = R^-1 B^T S``."""
    S = care(ss.A, ss.B, weights.Q, weights.R)
    K = np.linalg.solve(weights.R, ss.B.T @ S)
    eig = np.linalg.eigvals(ss.A - ss.B @ K)
    if np.any(eig.real >= 0):
        raise StabilizabilityError(f"A - BK is not Hurwitz: {eig[eig.real >= 0]}")
    return S, K


def solve_dare(dss: DiscreteStateSpace, weights: CostWeights) -> np.ndarray:
    return dare(dss.A_d, dss.B_d, weights.Q, weights.R)


def structure_mask(cold_damping_z: bool = True) -> np.ndarray:
    """Entries of the 3x6 gain forced to zero (True) by the actuator layout.

    The transverse controller and the z controller are decoupled; with
    ``cold_damping_z`` the z position gain is removed too.
    """
    mask = np.zeros((3, 6), dtype=bool)
    for row in (0, 1):
        mask[row, 2] = mask[row, 5] = True
    mask[2, [0, 1, 3, 4]] = True
    if cold_damping_z:
        mask[2, 2] = True
    return mask


def lqr_gain_discrete(dss: DiscreteStateSpace, S_d, weights: CostWeights, mask=None) -> np.ndarray:
    A, B, R = dss.A_d, dss.B_d, weights.R
    K = np.linalg.solve(R + B.T @ S_d @ B, B.T @ S_d @ A)
    if mask is not None:
        K = np.where(np.asarray(mask, dtype=bool), 0.0, K)
    eig = np.linalg.eigvals(A - B @ K)
    bad = eig[np.abs(eig) >= 1.0]
    if bad.size:
        raise InstabilityError(f"closed loop has modes outside the unit circle: {bad}", bad)
    return K


def kalman_steady_gain(dss: DiscreteStateSpace, measurement_covariance, process_covariance=None) -> KalmanGain:
    """Steady-state filter for ``x+ = x- + L (y - C x-)``.

    ``P`` is the a-priori error covariance solving the filter Riccati equation.
    """
    Rm = np.atleast_2d(np.asarray(measurement_covariance, dtype=float))
    Qw = dss.process_covariance if process_covariance is None else np.asarray(process_covariance)
    A, C = dss.A_d, dss.C_d
    try:
        P = dare(A.T, C.T, Qw, Rm)
    except ConvergenceError as exc:
        raise StabilizabilityError(f"(A_d, C_d) is not detectable: {exc}") from exc
    L = P @ C.T @ np.linalg.inv(C @ P @ C.T + Rm)
    eig = np.linalg.eigvals(A - L @ C @ A)
    if np.any(np.abs(eig) >= 1.0):
        raise StabilizabilityError("estimator is unstable; (A_d, C_d) not detectable")
    return KalmanGain(L=L, P=P)


def cost_weights(omega, mass, layout: str = "energy", effort: float = 100.0) -> CostWeights:
    """Default regulator weights in energy units.

    ``layout="energy"`` weights the full mechanical energy,
    ``Q = m diag(Omega^2, 1)``; ``"position"`` drops the velocity block. The
    effort weight is ``R = effort / m * diag(Omega^-2)``.
    """
    w = np.asarray(omega, dtype=float)
    if layout == "energy":
        q = np.concatenate([w**2, np.ones(3)])
    elif layout == "position":
        q = np.concatenate([w**2, np.zeros(3)])
    else:
        raise ValueError(f"unknown layout {layout!r}")
    return CostWeights(Q=mass * np.diag(q), R=effort / mass * np.diag(w**-2.0))


def design_controller(
    ss: StateSpace,
    T_s: float,
    weights: CostWeights | None = None,
    mask=None,
    input_rule: str = "rectangle",
) -> ControllerGains:
    """Continuous and discrete LQR gains for ``ss`` sampled at ``T_s``.

    The continuous gain uses the same weight matrices; only their ratio
    matters for ``K``.
    """
    if weights is None:
        weights = cost_weights(ss.omega, ss.mass)
    if mask is None:
        mask = structure_mask()
    dss = discretize(ss, T_s, input_rule=input_rule)
    S_d = solve_dare(dss, weights)
    K_d = lqr_gain_discrete(dss, S_d, weights, mask)
    try:
        S, K = solve_care(ss, weights)
    except StabilizabilityError:
        S = K = None
    return ControllerGains(K=K, K_d=K_d, S=S, S_d=S_d, structure_mask=np.asarray(mask, bool))


# ---------------------------------------------------------------------------
# estimator-style wrappers


class DiscreteLQR(BaseEstimator):
    """Discrete LQR fitted to a :class:`DiscreteStateSpace`.

    ``predict`` maps states (rows) to the optimal inputs ``u = -K x``.
    """

    def __init__(self, Q=None, R=None, mask=None):
        self.Q = Q
        self.R = R
        self.mask = mask

    def fit(self, dss: DiscreteStateSpace, y=None):
        weights = CostWeights(self.Q, self.R)
        self.S_ = solve_dare(dss, weights)
        self.K_ = lqr_gain_discrete(dss, self.S_, weights, self.mask)
        self.closed_loop_radius_ = float(np.max(np.abs(np.linalg.eigvals(dss.A_d - dss.B_d @ self.K_))))
        return self

    def predict(self, X):
        check_is_fitted(self, "K_")
        return -np.atleast_2d(X) @ self.K_.T


class KalmanFilter(BaseEstimator):
    """Discrete Kalman filter with Joseph-form covariance updates.

    ``fit`` computes the steady-state gain; ``transform`` runs the
    time-varying recursion over a measurement sequence and returns the
    a-posteriori estimates.
    """

    def __init__(self, measurement_covariance=None, x0=None, P0=None):
        self.measurement_covariance = measurement_covariance
        self.x0 = x0
        self.P0 = P0

    def fit(self, dss: DiscreteStateSpace, y=None):
        self.dss_ = dss
        gain = kalman_steady_gain(dss, self.measurement_covariance)
        self.L_, self.P_ = gain.L, gain.P
        return self

    def transform(self, Y, U=None):
        check_is_fitted(self, "L_")
        dss = self.dss_
        A, B, C = dss.A_d, dss.B_d, dss.C_d
        Qw = dss.process_covariance
        Rm = np.atleast_2d(np.asarray(self.measurement_covariance, dtype=float))
        Y = np.atleast_2d(np.asarray(Y, dtype=float))
        n = A.shape[0]
        x = np.zeros(n) if self.x0 is None else np.asarray(self.x0, dtype=float)
        P = self.P_.copy() if self.P0 is None else np.asarray(self.P0, dtype=float)
        I = np.eye(n)
        out = np.empty((Y.shape[0], n))
        self.covariances_ = np.empty((Y.shape[0], n, n))
        for k, y in enumerate(Y):
            # x, P are a-priori here
            L = P @ C.T @ np.linalg.inv(C @ P @ C.T + Rm)
            x = x + L @ (y - C @ x)
            J = I - L @ C
            P = J @ P @ J.T + L @ Rm @ L.T
            out[k] = x
            self.covariances_[k] = P
            u = np.zeros(B.shape[1]) if U is None else U[k]
            x = A @ x + B @ u
            P = A @ P @ A.T + Qw
        return out

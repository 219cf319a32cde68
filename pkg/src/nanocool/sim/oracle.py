"""Frequency-domain predictions for the sampled feedback loop and the
algebraic steady state of the LQG loop; used to cross-check simulations."""
from __future__ import annotations

import numpy as np
from scipy import linalg

from ..model import HBAR, K_B, PhysicalSystem, actuator_matrix
from .config import FeedbackChainConfig, SimConfig


def _biquad_z(stage, w, T):
    z1 = np.exp(-1j * w * T)
    return (stage.b0 + stage.b1 * z1 + stage.b2 * z1**2) / (1.0 + stage.a1 * z1 + stage.a2 * z1**2)


def chain_factors(chain: FeedbackChainConfig, config: SimConfig, w):
    """Per-frequency pieces of the loop: averaging, filters and output hold.

    Returns ``(avg, filt, hold)`` with ``avg`` and ``hold`` shaped like ``w``
    and ``filt`` shaped ``(3,) + w.shape`` (filter cascade per channel).
    """
    w = np.asarray(w, dtype=float)
    dt, T = config.dt_physics, config.T_s
    dec = config.decimation
    avg = np.mean([np.exp(-1j * w * j * dt) for j in range(dec)], axis=0)
    wz = np.where(w == 0, 1.0, w)
    zoh = np.where(w == 0, 1.0, (1 - np.exp(-1j * wz * T)) / (1j * wz * T))
    hold = np.exp(-1j * w * (1 + config.output_delay_steps) * dt) * zoh
    filt = np.ones((3,) + w.shape, dtype=complex)
    for c, stages in enumerate(chain.filters):
        for s in stages:
            filt[c] = filt[c] * _biquad_z(s, w, T)
    return avg, filt, hold


def loop_transfer(system: PhysicalSystem, chain: FeedbackChainConfig, config: SimConfig, w):
    """Feedback force per unit displacement ``H_x`` and per unit detector
    noise volt ``H_n``, each of shape ``w.shape + (3, 3)``."""
    w = np.atleast_1d(np.asarray(w, dtype=float))
    avg, filt, hold = chain_factors(chain, config, w)
    m = system.mass
    G = chain.gains
    u_scale = chain.feedback_sign * config.amplifier_gain * system.actuator.reference
    B = actuator_matrix(system.actuator, system.particle)
    N = np.asarray(chain.delays)
    # gain from channel voltage to command voltage
    Gm = np.empty(w.shape + (3, 3), dtype=complex)
    for r in range(3):
        for c in range(3):
            Gm[..., r, c] = filt[c] * (G[r, c] + G[r, 3 + c] * np.exp(-1j * w * N[c] * config.T_s))
    P = np.zeros((3, 3))
    for c, ax in enumerate(chain.routing):
        P[c, ax] = chain.c_vm[c]
    Hn = (m * u_scale) * hold[:, None, None] * np.einsum("ij,fjk->fik", B, Gm)
    Hx = Hn * avg[:, None, None] @ P
    return Hx, Hn


def _frequency_grid(system, config, n_side=3000):
    f_max = 0.5 / config.T_s
    w0 = system.omega
    inner = max(system.gamma, 1.0) * 1e-2
    offs = np.logspace(np.log10(inner), np.log10(2 * np.pi * f_max), n_side)
    pts = [np.linspace(0, 2 * np.pi * f_max, 4001)]
    for w in w0:
        pts.append(w + offs)
        pts.append(w - offs)
    g = np.concatenate(pts)
    g = g[(g >= 0) & (g <= 2 * np.pi * f_max)]
    return np.unique(g)


def loop_temperature_oracle(system: PhysicalSystem, chain: FeedbackChainConfig, config: SimConfig, w=None):
    """Steady-state mode temperatures of the linearized sampled loop.

    Integrates ``m (Omega_i^2 + w^2) S_ii(w) / (2 k_B)`` with the closed-loop
    displacement spectrum driven by the thermal (plus backaction) force and
    the detector noise fed back through the chain.
    """
    if w is None:
        w = _frequency_grid(system, config)
    m, gam = system.mass, system.gamma
    Om = system.omega
    Hx, Hn = loop_transfer(system, chain, config, w)
    M = np.zeros(w.shape + (3, 3), dtype=complex)
    for i in range(3):
        M[:, i, i] = m * (Om[i] ** 2 - w**2 + 1j * gam * w)
    Tm = np.linalg.inv(M - Hx)
    s_th = 2 * m * gam * K_B * system.env.temperature + system.noise.backaction
    sig = np.asarray(system.noise.measurement_sigma)
    s_n = np.array([(chain.c_vm[c] * sig[ax]) ** 2 for c, ax in enumerate(chain.routing)])
    src = np.einsum("fij,j,fkj->fik", Hn, s_n, Hn.conj())
    src = src + np.diag(s_th)[None]
    Sx = np.einsum("fij,fjk,flk->fil", Tm, src, Tm.conj()).real
    diag = np.stack([Sx[:, i, i] for i in range(3)], axis=1)
    weight = (Om[None, :] ** 2 + w[:, None] ** 2) * diag
    # two-sided integral over f = w / 2 pi
    integral = 2 * np.trapezoid(weight, w, axis=0) / (2 * np.pi)
    return m * integral / (2 * K_B)


def narrowband_temperature(system: PhysicalSystem, axis: int, H, force_noise_psd: float = 0.0):
    """Single-axis linear response: ``(gamma T + S_F / (2 m k_B)) / (gamma + gamma_fb)``
    with ``gamma_fb = -Im H(Omega) / (m Omega)`` for a feedback force ``H x``."""
    m, gam, T = system.mass, system.gamma, system.env.temperature
    w = system.omega[axis]
    g_fb = -np.imag(H) / (m * w)
    return (gam * T + force_noise_psd / (2 * m * K_B)) / (gam + g_fb)


def lqg_steady_covariance(A, B, C, K, L, Qw, Rm, joint=False):
    """Stationary covariance of the plant state under an a-posteriori Kalman
    filter with ``u = -K x_hat``.

    With ``e`` the a-priori estimation error, ``[x; e]`` evolves as
    ``[[A - BK, BK(I - LC)], [0, A(I - LC)]]`` driven by ``w`` and ``v``.
    ``joint=True`` returns the covariance of ``[x; e]`` instead of ``x``.
    """
    n = A.shape[0]
    I = np.eye(n)
    J = I - L @ C
    F = np.block([[A - B @ K, B @ K @ J], [np.zeros((n, n)), A @ J]])
    G = np.block([[I, -B @ K @ L], [I, -A @ L]])
    W = linalg.block_diag(Qw, Rm)
    if np.max(np.abs(np.linalg.eigvals(F))) >= 1:
        raise ValueError("closed LQG loop is unstable")
    P = linalg.solve_discrete_lyapunov(F, G @ W @ G.T)
    P = 0.5 * (P + P.T)
    return P if joint else P[:n, :n]


def occupation_from_scaled(cov):
    """Per-axis ``n`` from a covariance in zero-point units (x0, Omega x0)."""
    d = np.diag(cov)
    return (d[:3] + d[3:6]) / 4.0 - 0.5


def zero_point_scaling(system: PhysicalSystem) -> np.ndarray:
    x0 = np.sqrt(HBAR / (2 * system.mass * system.omega))
    return np.concatenate([x0, x0 * system.omega])

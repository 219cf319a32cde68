"""Simulation entry points: free runs, the digital feedback loop, delay and
pressure sweeps, and the quantum-limited LQG loop."""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .. import presets
from ..calib import DigitalGains
from ..dsp import design_dc_block, design_notch
from ..errors import InstabilityError
from ..model import K_B, AXES, PhysicalSystem, actuator_matrix, mbar
from ..riccati import (
    ControllerGains,
    CostWeights,
    DiscreteStateSpace,
    KalmanGain,
    cost_weights,
    discretize,
    expm_series,
    kalman_steady_gain,
    lqr_gain_discrete,
    solve_dare,
    structure_mask,
    van_loan_covariance,
)
from . import kernels
from .config import (
    DelaySweepResult,
    FeedbackChainConfig,
    LoopStatistics,
    PressureSweepResult,
    QuantumResult,
    SimConfig,
    TraceSet,
)
from .oracle import (
    chain_factors,
    loop_temperature_oracle,
    lqg_steady_covariance,
    narrowband_temperature,
    occupation_from_scaled,
    zero_point_scaling,
)

CHUNK = 1 << 18
N_BLOCKS = 10


@dataclass(frozen=True)
class Drive:
    """Sinusoidal force ``amplitude * cos(omega t + phase)`` on one axis."""

    axis: int
    amplitude: float  # N
    omega: float  # rad/s
    phase: float = 0.0


# ---------------------------------------------------------------------------
# helpers


def _chol2(S):
    l00 = math.sqrt(max(S[0, 0], 0.0))
    l10 = S[1, 0] / l00 if l00 > 0 else 0.0
    l11 = math.sqrt(max(S[1, 1] - l10 * l10, 0.0))
    return np.array([[l00, 0.0], [l10, l11]])


def force_psd(system: PhysicalSystem) -> np.ndarray:
    """Per-axis stochastic force PSD (thermal plus backaction), N^2/Hz."""
    return 2 * system.mass * system.gamma * K_B * system.env.temperature + system.noise.backaction


def axis_transitions(system: PhysicalSystem, dt: float):
    """Exact one-step transition, held-input response and noise factor per axis."""
    Phi = np.zeros((3, 2, 2))
    Gam = np.zeros((3, 2))
    Lc = np.zeros((3, 2, 2))
    sf = force_psd(system)
    for i, w in enumerate(system.omega):
        A = np.array([[0.0, 1.0], [-w * w, -system.gamma]])
        aug = np.zeros((3, 3))
        aug[:2, :2] = A * dt
        aug[1, 2] = dt
        E = expm_series(aug)
        Phi[i], Gam[i] = E[:2, :2], E[:2, 2]
        W = np.diag([0.0, sf[i] / system.mass**2])
        Lc[i] = _chol2(van_loan_covariance(A, W, dt))
    return Phi, Gam, Lc


def stationary_std(system: PhysicalSystem) -> np.ndarray:
    """Std of (x, v) per axis in free equilibrium, zeros if undamped."""
    out = np.zeros((3, 2))
    if system.gamma <= 0:
        return out
    sf = force_psd(system)
    var_v = sf / (2 * system.gamma * system.mass**2)
    out[:, 0] = np.sqrt(var_v) / system.omega
    out[:, 1] = np.sqrt(var_v)
    return out


def _seeds(seed, n):
    return np.random.SeedSequence(seed).spawn(n)


def _map(fn, items, threads):
    if threads <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=threads) as ex:
        return list(ex.map(fn, items))


def _initial(system, rng, initial_state):
    if initial_state is not None:
        xs = np.array(initial_state, dtype=float).reshape(3, 2)
        return xs.copy()
    return stationary_std(system) * rng.standard_normal((3, 2))


# ---------------------------------------------------------------------------
# free runs


def simulate_free(
    system: PhysicalSystem,
    config: SimConfig,
    initial_state=None,
    drives: tuple[Drive, ...] = (),
    detector_gain=presets.C_VM,
) -> TraceSet:
    """Uncontrolled motion sampled every ``config.sample_interval``.

    Each trace starts from an independent draw of the free stationary state
    (or ``initial_state``, shape (3, 2)). Drives add their exact steady-state
    response. Detector traces are ``detector_gain * x`` plus white noise of
    intensity ``sigma^2`` averaged over each sample interval.
    """
    dt = config.sample_interval
    n = int(round(config.trace_length / dt))
    Phi, _, Lc = axis_transitions(system, dt)
    sigma = np.asarray(system.noise.measurement_sigma)
    c_vm = np.asarray(detector_gain, dtype=float)
    t = np.arange(1, n + 1) * dt

    def one(ss):
        rng = np.random.Generator(np.random.PCG64(ss))
        xs = _initial(system, rng, initial_state)
        out_x = np.empty((3, n))
        out_v = np.empty((3, n))
        for s in range(0, n, CHUNK):
            m = min(CHUNK, n - s)
            xi = rng.standard_normal((m, 3, 2))
            kernels.free_chunk(xs, Phi, Lc, xi, out_x, out_v, s)
        for d in drives:
            chi = 1.0 / (system.mass * (system.omega[d.axis] ** 2 - d.omega**2 + 1j * system.gamma * d.omega))
            z = chi * d.amplitude * np.exp(1j * (d.omega * t + d.phase))
            out_x[d.axis] += z.real
            out_v[d.axis] += (1j * d.omega * z).real
        det = c_vm[:, None] * out_x + (c_vm * sigma / math.sqrt(dt))[:, None] * rng.standard_normal((3, n))
        return out_x, out_v, det

    res = _map(one, _seeds(config.seed, config.n_traces), config.threads)
    pos = np.stack([r[0] for r in res])
    return TraceSet(
        positions=pos,
        detector=np.stack([r[2] for r in res]),
        control=np.zeros_like(pos),
        sample_rate=1.0 / dt,
        velocities=np.stack([r[1] for r in res]),
        metadata={"kind": "free", "seed": config.seed, "gamma": system.gamma,
                  "pressure_pa": system.env.pressure, "detector_gain": c_vm.tolist()},
    )


# ---------------------------------------------------------------------------
# feedback chain


def default_filters(system: PhysicalSystem, config: SimConfig, notch_q: float = 5.0, dc_cutoff: float = 1e3):
    """DC block plus notches: the transverse channels reject the z line, the
    z channel rejects both transverse lines."""
    f_s = 1.0 / config.T_s
    f = system.omega / (2 * np.pi)
    dc = design_dc_block(dc_cutoff, f_s)
    xy = (dc, design_notch(f[2], notch_q, f_s))
    z = (dc, design_notch(f[0], notch_q, f_s), design_notch(f[1], notch_q, f_s))
    return (xy, xy, z)


def quarter_period_delays(system, config, filters, routing=(0, 1, 2), target=math.pi / 2):
    """Delay-line lengths bringing each channel's total phase lag at its
    resonance closest to ``target`` (sampling, filters, output hold included)."""
    dummy = FeedbackChainConfig(np.zeros((3, 6)), filters=filters, routing=routing)
    out = []
    for c, ax in enumerate(routing):
        w = np.array([system.omega[ax]])
        avg, filt, hold = chain_factors(dummy, config, w)
        lag = -np.angle(avg[0] * filt[c, 0] * hold[0])
        n = round((target - lag) / (w[0] * config.T_s))
        out.append(max(int(n), 0))
    return tuple(out)


def default_chain(
    system: PhysicalSystem,
    gains,
    config: SimConfig,
    c_vm=presets.C_VM,
    notch_q: float = 5.0,
    dc_cutoff: float = 1e3,
    delays=None,
    feedback_sign: float = -1.0,
) -> FeedbackChainConfig:
    g = gains.matrix if isinstance(gains, DigitalGains) else np.asarray(gains, dtype=float)
    filters = default_filters(system, config, notch_q, dc_cutoff)
    if delays is None:
        delays = quarter_period_delays(system, config, filters)
    return FeedbackChainConfig(gains=g, delays=tuple(delays), filters=filters,
                               c_vm=tuple(float(v) for v in c_vm), feedback_sign=feedback_sign)


def _loop_statistics(system, acc, cnt):
    """T_eff per axis from block sums; error from the spread of block values."""
    ok = cnt > 0
    acc, cnt = acc[ok], cnt[ok]
    w2 = system.omega**2
    m = system.mass
    var = acc.sum(axis=0) / cnt.sum()
    t = m * (w2 * var[:, 0] + var[:, 1]) / (2 * K_B)
    blocks = m * (w2[None] * acc[:, :, 0] + acc[:, :, 1]) / cnt[:, None] / (2 * K_B)
    err = blocks.std(axis=0, ddof=1) / math.sqrt(len(blocks)) if len(blocks) > 1 else np.full(3, np.nan)
    return LoopStatistics(var[:, 0], var[:, 1], t, err, int(cnt.sum()))


def run_closed_loop(
    system: PhysicalSystem,
    chain: FeedbackChainConfig,
    config: SimConfig,
    initial_state=None,
) -> TraceSet:
    """Physics at ``dt_physics`` with the sampled digital controller in the loop.

    Raises :class:`InstabilityError` (carrying the partial statistics in
    ``.partial``) when the mode energy exceeds ``config.energy_bound`` k_B T.
    """
    dt = config.dt_physics
    n = int(round(config.trace_length / dt))
    burn = int(round(config.burn_in / dt))
    if burn >= n:
        raise ValueError("burn_in must be shorter than trace_length")
    Phi, Gam, Lc = axis_transitions(system, dt)
    sigma = np.asarray(system.noise.measurement_sigma)
    routing = np.asarray(chain.routing, dtype=np.int64)
    c_vm = np.asarray(chain.c_vm, dtype=float)
    sig_adc = c_vm * sigma[routing] / math.sqrt(dt)
    lsb = 2 * config.adc_range / 2**config.adc_bits if config.adc_bits > 0 else 0.0
    bq = chain.filter_array()
    delays = np.asarray(chain.delays, dtype=np.int64)
    Bact = actuator_matrix(system.actuator, system.particle)
    u_scale = chain.feedback_sign * config.amplifier_gain * system.actuator.reference
    T_ref = system.env.temperature
    e_norm = np.stack([system.mass * system.omega**2, np.full(3, system.mass)], axis=1) / (2 * K_B * T_ref)
    e_bound = 3 * config.energy_bound
    n_ctrl = n // config.decimation
    n_rec = n_ctrl // config.record_every
    block_len = max((n - burn) // N_BLOCKS, 1)

    def one(ss):
        rng = np.random.Generator(np.random.PCG64(ss))
        xs = _initial(system, rng, initial_state)
        bq_state = np.zeros(bq.shape[:2] + (2,))
        dl_buf = np.zeros((3, max(1, int(delays.max()))))
        dl_pos = np.zeros(3, dtype=np.int64)
        ring = np.zeros((config.output_delay_steps, 3))
        vcmd = np.zeros(3)
        dec_acc = np.zeros(3)
        state = np.zeros(5, dtype=np.int64)
        rec_t = np.zeros(n_rec, dtype=np.int64)
        rec = [np.zeros((3, n_rec)) for _ in range(4)]
        last_det = np.zeros(3)
        acc = np.zeros((N_BLOCKS, 3, 2))
        cnt = np.zeros(N_BLOCKS, dtype=np.int64)
        for s in range(0, n, CHUNK):
            m = min(CHUNK, n - s)
            xi = rng.standard_normal((m, 3, 2))
            zeta = rng.standard_normal((m, 3))
            kernels.loop_chunk(
                xs, Phi, Gam, Lc, xi, zeta, sig_adc, c_vm, routing, lsb, config.adc_range,
                bq, bq_state, dl_buf, dl_pos, delays, chain.gains, ring, vcmd, Bact, u_scale,
                config.decimation, dec_acc, state, config.record_every, rec_t, rec[0], rec[1],
                rec[2], rec[3], last_det, acc, cnt, burn, block_len, e_norm, e_bound,
            )
            if state[kernels.UNSTABLE]:
                break
        return rec, acc, cnt, bool(state[kernels.UNSTABLE]), int(state[kernels.STEP])

    res = _map(one, _seeds(config.seed, config.n_traces), config.threads)
    acc = np.concatenate([r[1] for r in res])
    cnt = np.concatenate([r[2] for r in res])
    stats = _loop_statistics(system, acc, cnt) if cnt.sum() > 0 else None
    meta = {
        "kind": "loop", "seed": config.seed, "gamma": system.gamma,
        "pressure_pa": system.env.pressure, "delays": list(chain.delays),
        "output_delay_steps": config.output_delay_steps,
        "fractional_delay_s": config.fractional_delay,
    }
    traces = TraceSet(
        positions=np.stack([r[0][0] for r in res]),
        velocities=np.stack([r[0][1] for r in res]),
        detector=np.stack([r[0][2] for r in res]),
        control=np.stack([r[0][3] for r in res]),
        sample_rate=1.0 / (config.T_s * config.record_every),
        statistics=stats,
        metadata=meta,
    )
    bad = [i for i, r in enumerate(res) if r[3]]
    if bad:
        err = InstabilityError(
            f"closed loop diverged in trace(s) {bad} after {res[bad[0]][4]} steps "
            f"(energy above {config.energy_bound:g} k_B T)"
        )
        err.partial = traces
        raise err
    return traces


# ---------------------------------------------------------------------------
# sweeps


def delayed_feedback_oracle(system: PhysicalSystem, axis: int, gain: float, delay: float, dt: float = 0.0):
    """Small-gain temperature for the force ``gain * x(t - delay)``.

    A per-step hold of length ``dt`` contributes an extra ``dt / 2`` of delay.
    """
    w = system.omega[axis]
    H = gain * np.exp(-1j * w * (delay + dt / 2))
    s_n = gain**2 * system.noise.measurement_sigma[axis] ** 2
    return narrowband_temperature(system, axis, H, s_n)


def run_delay_sweep(
    system: PhysicalSystem,
    gains,
    phi_grid,
    config: SimConfig,
    axes=(0,),
    repeats: int = 10,
    burn_in: float | None = None,
) -> DelaySweepResult:
    """Pure delayed-position feedback ``F = G x(t - tau)`` on each axis in turn.

    The phase ``phi = Omega tau`` cannot go below the electronic minimum
    ``Omega tau_e``. ``repeats`` independent runs of ``config.trace_length``
    per point give the standard error.
    """
    phi = np.asarray(phi_grid, dtype=float)
    gains = np.broadcast_to(np.asarray(gains, dtype=float), (len(axes),))
    if phi.ndim != 1 or len(phi) == 0 or np.any(np.diff(phi) <= 0):
        raise ValueError("phi grid must be strictly increasing")
    dt = config.dt_physics
    n = int(round(config.trace_length / dt))
    for ax in axes:
        floor = system.omega[ax] * config.electronic_delay
        if phi[0] < floor * (1 - 1e-9):
            raise ValueError(
                f"phase {phi[0]:.4f} rad below the electronic minimum "
                f"Omega_{AXES[ax]} tau_e = {floor:.4f} rad"
            )
    Phi, Gam, Lc = axis_transitions(system, dt)
    sigma = np.asarray(system.noise.measurement_sigma)
    jobs = []
    seeds = _seeds(config.seed, len(phi) * len(axes) * repeats)
    meta_phi = np.zeros((len(phi), len(axes)))
    oracle = np.zeros((len(phi), len(axes)))
    burns = np.zeros((len(phi), len(axes)), dtype=np.int64)
    for a, ax in enumerate(axes):
        w = system.omega[ax]
        for p, ph in enumerate(phi):
            D = max(int(round(ph / (w * dt) - 0.5)), 0)
            meta_phi[p, a] = w * (D + 0.5) * dt
            oracle[p, a] = delayed_feedback_oracle(system, ax, gains[a], D * dt, dt)
            g_tot = system.gamma * system.env.temperature / max(oracle[p, a], 1e-300)
            b = burn_in if burn_in is not None else min(10.0 / max(g_tot, 1.0), 0.5 * config.trace_length)
            burns[p, a] = int(round(b / dt))
            for r in range(repeats):
                jobs.append((p, a, ax, D, seeds[len(jobs)]))

    def one(job):
        p, a, ax, D, ss = job
        rng = np.random.Generator(np.random.PCG64(ss))
        xs = stationary_std(system)[ax] * rng.standard_normal(2)
        hist = np.zeros(D)
        state = np.zeros(2, dtype=np.int64)
        acc = np.zeros((N_BLOCKS, 2))
        cnt = np.zeros(N_BLOCKS, dtype=np.int64)
        burn = int(burns[p, a])
        block_len = max((n - burn) // N_BLOCKS, 1)
        coupling = gains[a] / system.mass
        noise_amp = sigma[ax] / math.sqrt(dt)
        for s in range(0, n, CHUNK):
            m = min(CHUNK, n - s)
            xi = rng.standard_normal((m, 2))
            zeta = rng.standard_normal(m)
            kernels.delay_chunk(xs, Phi[ax], Gam[ax], Lc[ax], xi, zeta, hist, state, coupling,
                                noise_amp, acc, cnt, burn, block_len)
        var = acc.sum(axis=0) / cnt.sum()
        return system.mass * (system.omega[ax] ** 2 * var[0] + var[1]) / (2 * K_B)

    temps = np.array(_map(one, jobs, config.threads)).reshape(len(axes), len(phi), repeats)
    temps = np.transpose(temps, (1, 0, 2))
    mean = temps.mean(axis=2)
    err = temps.std(axis=2, ddof=1) / math.sqrt(repeats) if repeats > 1 else np.full_like(mean, np.nan)
    return DelaySweepResult(
        phi=phi, phi_realized=meta_phi, t_eff=mean, t_eff_err=err, oracle=oracle,
        axes=tuple(axes), gains=tuple(float(g) for g in gains),
        metadata={"seed": config.seed, "repeats": repeats, "dt_physics": dt,
                  "trace_length": config.trace_length, "runs": temps.tolist()},
    )


def run_pressure_sweep(
    system: PhysicalSystem,
    chain: FeedbackChainConfig,
    pressures_mbar,
    config: SimConfig,
) -> PressureSweepResult:
    """Closed loop with fixed gains at each pressure; unstable points are
    recorded as NaN rather than aborting the sweep."""
    p = np.asarray(pressures_mbar, dtype=float)
    if np.any(p <= 0):
        raise ValueError("pressures must be positive")
    seeds = np.random.SeedSequence(config.seed).generate_state(len(p), dtype=np.uint64)
    t = np.full((len(p), 3), np.nan)
    e = np.full((len(p), 3), np.nan)
    o = np.full((len(p), 3), np.nan)
    unstable = np.zeros(len(p), dtype=bool)
    from dataclasses import replace

    for k, pk in enumerate(p):
        sp = system.with_pressure(mbar(pk))
        cfg = replace(config, seed=int(seeds[k]))
        try:
            o[k] = loop_temperature_oracle(sp, chain, cfg)
        except np.linalg.LinAlgError:
            pass
        try:
            st = run_closed_loop(sp, chain, cfg).statistics
            t[k], e[k] = st.t_eff, st.t_eff_err
        except InstabilityError:
            unstable[k] = True
    return PressureSweepResult(p, t, e, o, unstable,
                               metadata={"seed": config.seed, "seeds": [int(s) for s in seeds],
                                         "delays": list(chain.delays)})


# ---------------------------------------------------------------------------
# quantum-limited LQG


def _scaled(dss: DiscreteStateSpace, S):
    Si = 1.0 / S
    return DiscreteStateSpace(
        A_d=dss.A_d * Si[:, None] * S[None, :],
        B_d=dss.B_d * Si[:, None],
        C_d=dss.C_d * S[None, :],
        T_s=dss.T_s,
        process_covariance=dss.process_covariance * Si[:, None] * Si[None, :],
        input_rule=dss.input_rule,
        noise_rule=dss.noise_rule,
    )


def quantum_design(system: PhysicalSystem, T_s: float, weights: CostWeights | None = None, mask=None):
    """Regulator and steady-state Kalman filter for the sampled plant (exact
    hold), solved in zero-point units. Returns ``(ControllerGains, KalmanGain)``
    in SI units."""
    S = zero_point_scaling(system)
    dss = discretize(system.state_space(), T_s, input_rule="zoh")
    sd = _scaled(dss, S)
    if weights is None:
        weights = cost_weights(system.omega, system.mass)
    if mask is None:
        mask = structure_mask(cold_damping_z=False)
    ws = CostWeights(weights.Q * S[:, None] * S[None, :], weights.R)
    S_d = solve_dare(sd, ws)
    K_s = lqr_gain_discrete(sd, S_d, ws, mask)
    Rm = np.diag(np.asarray(system.noise.measurement_sigma) ** 2 / T_s)
    kg = kalman_steady_gain(sd, Rm)
    reg = ControllerGains(K=None, K_d=K_s / S[None, :], S=None,
                          S_d=S_d / S[:, None] / S[None, :], structure_mask=np.asarray(mask))
    est = KalmanGain(L=kg.L * S[:, None], P=kg.P * S[:, None] * S[None, :])
    return reg, est


def run_quantum(
    system: PhysicalSystem,
    estimator: KalmanGain | None,
    regulator: ControllerGains | None,
    config: SimConfig,
    n_runs: int = 30,
    duration: float = 0.1,
    burn_in: float = 0.0,
) -> QuantumResult:
    """Monte-Carlo occupation of each mode under Kalman-filter LQG control.

    Physics, measurement and control all run at ``config.T_s`` with the
    control held over each period. The algebraic steady state of the same
    discrete loop is returned alongside as ``predicted``.
    """
    sigma = np.asarray(system.noise.measurement_sigma)
    if np.any(sigma <= 0):
        raise ValueError("LQG needs a positive measurement imprecision on every axis")
    if system.noise.quantum_enabled and np.any(np.asarray(system.noise.detection_efficiency) <= 0):
        raise ValueError("detection efficiency must be positive on measured axes")
    T_s = config.T_s
    if estimator is None or regulator is None:
        reg, est = quantum_design(system, T_s)
        regulator = regulator or reg
        estimator = estimator or est
    S = zero_point_scaling(system)
    sd = _scaled(discretize(system.state_space(), T_s, input_rule="zoh"), S)
    K = regulator.K_d * S[None, :]
    L = estimator.L / S[:, None]
    Rm = np.diag(sigma**2 / T_s)
    Qw = sd.process_covariance
    lam, V = np.linalg.eigh(Qw)
    Lw = V * np.sqrt(np.clip(lam, 0, None))[None, :]
    r_std = np.sqrt(np.diag(Rm))
    joint = lqg_steady_covariance(sd.A_d, sd.B_d, sd.C_d, K, L, Qw, Rm, joint=True)
    predicted = occupation_from_scaled(joint[:6, :6])
    lam0, V0 = np.linalg.eigh(joint)
    init = V0 * np.sqrt(np.clip(lam0, 0, None))[None, :]
    n = int(round(duration / T_s))
    burn = int(round(burn_in / T_s))

    def one(ss):
        rng = np.random.Generator(np.random.PCG64(ss))
        # start in the joint stationary state of plant and estimation error
        z = init @ rng.standard_normal(12)
        x = z[:6].copy()
        xpri = x - z[6:]
        acc = np.zeros(6)
        cnt = np.zeros(1, dtype=np.int64)
        state = np.zeros(1, dtype=np.int64)
        for s in range(0, n, CHUNK):
            m = min(CHUNK, n - s)
            xi = rng.standard_normal((m, 6))
            zeta = rng.standard_normal((m, 3))
            kernels.lqg_chunk(x, xpri, sd.A_d, sd.B_d, sd.C_d, L, K, Lw, r_std, xi, zeta, acc, cnt, state, burn)
        return occupation_from_scaled(np.diag(acc / cnt[0]))

    occ = np.array(_map(one, _seeds(config.seed, n_runs), config.threads))
    return QuantumResult(
        occupation=occ, mean=occ.mean(axis=0), std=occ.std(axis=0, ddof=1), predicted=predicted,
        metadata={"seed": config.seed, "n_runs": n_runs, "duration": duration, "burn_in": burn_in,
                  "pressure_pa": system.env.pressure,
                  "efficiency": list(system.noise.detection_efficiency),
                  "backaction_psd": list(system.noise.backaction_force_psd),
                  "imprecision_sigma": sigma.tolist()},
    )

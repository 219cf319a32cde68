import math
from dataclasses import replace

import numpy as np
import pytest
from scipy import linalg

from nanocool import presets
from nanocool.calib import DigitalGains
from nanocool.errors import InstabilityError
from nanocool.model import K_B
from nanocool.sim import (
    Drive,
    FeedbackChainConfig,
    SimConfig,
    axis_transitions,
    default_chain,
    delayed_feedback_oracle,
    loop_temperature_oracle,
    quantum_design,
    quarter_period_delays,
    run_closed_loop,
    run_delay_sweep,
    run_pressure_sweep,
    run_quantum,
    simulate_free,
)
from nanocool.sim.runner import stationary_std

TABLE_GAINS = DigitalGains(presets.TABLE_KP_DIGITAL, presets.TABLE_KD_DIGITAL, np.array([0.0, -12.332]))


def test_config_validation():
    with pytest.raises(ValueError, match="integer multiple"):
        SimConfig(T_s=64e-9, dt_physics=7e-9)
    with pytest.raises(ValueError, match="decimation"):
        SimConfig(T_s=64e-9, dt_physics=16e-9)
    with pytest.raises(ValueError):
        SimConfig(trace_length=-1.0)
    with pytest.raises(ValueError):
        SimConfig(duration=1e-3, trace_length=2e-3)
    assert SimConfig().output_delay_steps == 80


def test_chain_validation():
    with pytest.raises(ValueError, match="3x6"):
        FeedbackChainConfig(gains=np.zeros((2, 6)))
    g = np.zeros((3, 6))
    g[0, 2] = 1.0
    with pytest.raises(ValueError, match="share"):
        FeedbackChainConfig(gains=g)
    with pytest.raises(ValueError):
        FeedbackChainConfig(gains=np.zeros((3, 6)), delays=(1, -1, 0))


def test_exact_transition_matches_expm(published_system):
    dt = 8e-9
    Phi, Gam, _ = axis_transitions(published_system, dt)
    for i, w in enumerate(published_system.omega):
        A = np.array([[0.0, 1.0], [-w * w, -published_system.gamma]])
        np.testing.assert_allclose(Phi[i], linalg.expm(A * dt), rtol=1e-12, atol=1e-18)
        # held unit acceleration: integral of expm(A s) e_v ds
        E = linalg.expm(np.block([[A * dt, np.array([[0.0], [dt]])], [np.zeros((1, 3))]]))
        np.testing.assert_allclose(Gam[i], E[:2, 2], rtol=1e-12, atol=1e-30)


def test_free_run_equipartition(published_system):
    cfg = SimConfig(trace_length=5e-3, n_traces=40, sample_interval=2e-6, seed=11)
    tr = simulate_free(published_system, cfg)
    T = published_system.env.temperature
    m = published_system.mass
    var_x = tr.positions.var(axis=(0, 2))
    var_v = tr.velocities.var(axis=(0, 2))
    np.testing.assert_allclose(var_x * m * published_system.omega**2 / (K_B * T), 1.0, rtol=0.1)
    np.testing.assert_allclose(var_v * m / (K_B * T), 1.0, rtol=0.1)
    assert tr.detector.shape == tr.positions.shape == (40, 3, 2500)


def test_free_run_is_reproducible(published_system):
    cfg = SimConfig(trace_length=1e-3, n_traces=3, seed=5)
    a = simulate_free(published_system, cfg)
    b = simulate_free(published_system, replace(cfg, threads=2))
    np.testing.assert_array_equal(a.detector, b.detector)
    c = simulate_free(published_system, replace(cfg, seed=6))
    assert not np.array_equal(a.detector, c.detector)


def test_drive_adds_steady_response(published_system):
    cfg = SimConfig(trace_length=1e-3, n_traces=1, seed=2)
    w = published_system.omega[0] * 1.01
    quiet = simulate_free(published_system, cfg)
    driven = simulate_free(published_system, cfg, drives=(Drive(0, 1e-14, w),))
    diff = driven.positions[0, 0] - quiet.positions[0, 0]
    m, w0, g = published_system.mass, published_system.omega[0], published_system.gamma
    amp = 1e-14 / (m * abs(w0**2 - w**2 + 1j * g * w))
    assert np.max(np.abs(diff)) == pytest.approx(amp, rel=1e-3)
    np.testing.assert_array_equal(driven.positions[0, 1], quiet.positions[0, 1])


def test_stationary_std_vanishes_without_damping(undamped_system):
    assert np.all(stationary_std(undamped_system) == 0)


def test_quarter_period_delays(published_system):
    cfg = SimConfig()
    chain = default_chain(published_system, TABLE_GAINS, cfg)
    assert chain.delays == quarter_period_delays(published_system, cfg, chain.filters)
    # the delay line supplies most of the quarter period at 64 ns steps
    for d, w in zip(chain.delays, published_system.omega):
        assert 0 <= d * cfg.T_s <= math.pi / (2 * w)


@pytest.fixture(scope="module")
def cold_loop():
    system = presets.published_system(1e-4)
    cfg = SimConfig(trace_length=4e-3, n_traces=2, burn_in=1e-3, seed=3)
    chain = default_chain(system, TABLE_GAINS, cfg)
    return system, chain, cfg, run_closed_loop(system, chain, cfg)


def test_closed_loop_against_spectral_oracle(cold_loop):
    system, chain, cfg, tr = cold_loop
    oracle = loop_temperature_oracle(system, chain, cfg)
    st = tr.statistics
    # x and y settle fast; z has few correlation times in 4 ms
    np.testing.assert_allclose(st.t_eff[:2], oracle[:2], rtol=0.15)
    assert abs(st.t_eff[2] - oracle[2]) < 4 * st.t_eff_err[2] + 0.15 * oracle[2]
    assert np.all(st.t_eff < 5.0)


def test_closed_loop_records(cold_loop):
    system, chain, cfg, tr = cold_loop
    assert tr.sample_rate == pytest.approx(1 / (cfg.T_s * cfg.record_every))
    assert tr.positions.shape[0] == 2
    assert np.any(tr.control != 0)


def test_instability_keeps_partial_results():
    system = presets.published_system(1e-4)
    cfg = SimConfig(trace_length=2e-3, n_traces=1, seed=1)
    chain = default_chain(system, TABLE_GAINS, cfg, feedback_sign=1.0)
    with pytest.raises(InstabilityError) as info:
        run_closed_loop(system, chain, cfg)
    partial = info.value.partial
    assert partial.positions.shape[0] == 1
    assert "diverged" in str(info.value)


def test_pressure_sweep_flags_instability():
    system = presets.published_system(1e-4)
    cfg = SimConfig(trace_length=2e-3, n_traces=2, burn_in=5e-4, seed=1)
    chain = default_chain(system, TABLE_GAINS, cfg, feedback_sign=1.0)
    res = run_pressure_sweep(system, chain, [1e-3], cfg)
    assert res.unstable.tolist() == [True]
    assert np.all(np.isnan(res.t_eff))
    with pytest.raises(ValueError):
        run_pressure_sweep(system, chain, [0.0], cfg)


def test_delay_oracle_phase_dependence(published_system):
    g = presets.DELAY_SWEEP_GAIN[0]
    w = published_system.omega[0]
    t_quarter = delayed_feedback_oracle(published_system, 0, g, math.pi / (2 * w))
    t_three = delayed_feedback_oracle(published_system, 0, g, 3 * math.pi / (2 * w))
    t_zero = delayed_feedback_oracle(published_system, 0, g, 0.0)
    # cooling at a quarter period, heating (or instability) at three quarters
    assert t_quarter < 293.0 < t_zero * 1.001
    assert t_three < 0 or t_three > 293.0


def test_delay_sweep_short_run():
    system = presets.published_system(1.2)
    w = system.omega[0]
    phi = np.array([1.0, math.pi / 2, 2.0])
    cfg = SimConfig(trace_length=5e-3, seed=4)
    res = run_delay_sweep(system, presets.DELAY_SWEEP_GAIN[0], phi, cfg, axes=(0,), repeats=3)
    assert res.t_eff.shape == (3, 1)
    # three short repeats: compare within the reported standard error
    assert np.all(np.abs(res.t_eff - res.oracle) < 4 * res.t_eff_err + 0.05 * res.oracle)
    assert np.all(np.abs(res.phi_realized[:, 0] - phi) <= w * cfg.dt_physics)
    with pytest.raises(ValueError, match="electronic minimum"):
        run_delay_sweep(system, 1e-9, np.array([0.01, 1.0]), cfg, axes=(0,), repeats=2)


def test_quantum_steady_state_frozen():
    qs = presets.quantum_system()
    reg, est = quantum_design(qs, 64e-9)
    res = run_quantum(qs, est, reg, SimConfig(seed=1), n_runs=4, duration=0.02)
    np.testing.assert_allclose(res.predicted, [1.1406, 1.3339, 0.4997], atol=5e-4)
    np.testing.assert_allclose(res.mean, res.predicted, rtol=0.3)
    assert np.all(res.predicted < 1.5)


def test_quantum_needs_imprecision(published_system):
    zero = replace(published_system, noise=replace(published_system.noise, measurement_sigma=(0.0, 0.0, 0.0)))
    with pytest.raises(ValueError, match="imprecision"):
        run_quantum(zero, None, None, SimConfig(), n_runs=2, duration=1e-4)

"""Scenario execution behind the command line: builds the system from a
validated config, runs one scenario and returns tables plus a summary."""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import presets
from .calib import (
    DetectorCalibration,
    DigitalGains,
    DriveConfig,
    calibrate_detector,
    calibrate_electrode,
    digital_gains,
    to_fixed_point,
)
from .config import ExperimentConfig
from .dsp import fit_lorentzian, welch_psd
from .model import (
    K_B,
    ActuatorCalibration,
    GasEnvironment,
    NoiseParams,
    ParticleParams,
    PhysicalSystem,
    TrapParams,
)
from .riccati import cost_weights, design_controller, structure_mask
from .sim import (
    Drive,
    SimConfig,
    default_chain,
    loop_temperature_oracle,
    quantum_design,
    run_closed_loop,
    run_delay_sweep,
    run_pressure_sweep,
    run_quantum,
    simulate_free,
)

AXIS_INDEX = {"x": 0, "y": 1, "z": 2}
GAIN_ROWS = ("k_p,xx", "k_p,xy", "k_p,yx", "k_p,yy", "k_d,xx", "k_d,xy", "k_d,yx", "k_d,yy", "k_p,z", "k_d,z")


@dataclass
class ScenarioOutput:
    """``tables`` maps a file stem to ``(header, rows)``."""

    tables: dict = field(default_factory=dict)
    summary: dict = field(default_factory=dict)
    unstable: bool = False
    message: str = ""


def build_system(cfg: ExperimentConfig) -> PhysicalSystem:
    s = cfg.system
    noise = s.noise
    sigma = noise.measurement_sigma
    if sigma is None:
        sigma = (0.0, 0.0, 0.0) if noise.quantum_enabled else presets.DEFAULT_SIGMA
    return PhysicalSystem(
        particle=ParticleParams(radius=s.particle.radius, density=s.particle.density, mass=s.particle.mass),
        trap=TrapParams(omega=tuple(s.trap.frequencies)),
        env=GasEnvironment(pressure=s.environment.pressure, temperature=s.environment.temperature),
        actuator=ActuatorCalibration(c_nv=s.actuator.c_nv, c_nv_z=s.actuator.c_nv_z,
                                     z_relative_strength=s.actuator.z_relative_strength),
        noise=NoiseParams(measurement_sigma=tuple(sigma), detection_efficiency=noise.detection_efficiency,
                          quantum_enabled=noise.quantum_enabled, backaction_force_psd=noise.backaction_force_psd),
        gamma_override=s.gamma_override,
    )


def sim_config(cfg: ExperimentConfig, threads: int = 1, **kw) -> SimConfig:
    ch = cfg.chain
    ratio = ch.T_s / ch.dt_physics
    return SimConfig(T_s=ch.T_s, dt_physics=ch.dt_physics, electronic_delay=ch.electronic_delay,
                     amplifier_gain=ch.amplifier_gain, decimation=int(round(ratio)),
                     adc_bits=ch.adc_bits, seed=cfg.seed, threads=threads, **kw)


def _mask(cfg):
    return structure_mask(cold_damping_z=cfg.controller.cold_damping_z)


def design(cfg: ExperimentConfig, system: PhysicalSystem):
    """Regulator design and its digital conversion for the configured chain."""
    c = cfg.controller
    if c.design_damping == "undamped":
        system = replace(system, gamma_override=0.0)
    weights = cost_weights(system.omega, system.mass, layout=c.weights.layout, effort=c.weights.effort)
    gains = design_controller(system.state_space(), cfg.chain.T_s, weights, _mask(cfg), input_rule=c.input_rule)
    det = DetectorCalibration.nominal(cfg.chain.detector_gain)
    dig = digital_gains(gains.K_d, det, system.actuator, cfg.chain.amplifier_gain, system.omega)
    return gains, dig


def controller_gains(cfg: ExperimentConfig, system: PhysicalSystem) -> DigitalGains:
    c = cfg.controller
    if c.source == "explicit":
        xy = np.asarray(c.gains.xy, dtype=float)
        dig = DigitalGains(xy[:, :2], xy[:, 2:], np.asarray(c.gains.z, dtype=float))
    else:
        _, designed = design(cfg, system)
        if c.source == "table":
            dig = DigitalGains(presets.TABLE_KP_DIGITAL.copy(), presets.TABLE_KD_DIGITAL.copy(), designed.z)
        else:
            dig = designed
    if c.fixed_point is not None:
        dig = to_fixed_point(dig, *c.fixed_point)
    return dig


def _chain(cfg, system, gains, config):
    ch = cfg.chain
    return default_chain(system, gains, config, c_vm=ch.detector_gain, notch_q=ch.notch_q,
                         dc_cutoff=ch.dc_cutoff, delays=ch.delays, feedback_sign=ch.feedback_sign)


def _axes_dict(values):
    return {a: float(v) for a, v in zip("xyz", values)}


def _gain_list(dig: DigitalGains):
    return [*np.ravel(dig.proportional), *np.ravel(dig.derivative), *dig.z]


def _segment(traces):
    # whole records when the ensemble already averages the periodogram
    n = traces.shape[-1]
    return n if traces.shape[0] >= 16 else max(n // 8, 256)


# ---------------------------------------------------------------------------


def run_free(cfg, system, threads):
    sc = cfg.scenario
    config = sim_config(cfg, threads, trace_length=sc.trace_length, n_traces=sc.n_traces,
                        sample_interval=sc.sample_interval)
    tr = simulate_free(system, config, detector_gain=cfg.chain.detector_gain)
    f_s = tr.sample_rate
    out = ScenarioOutput()
    var = tr.positions.var(axis=(0, 2))
    expected = K_B * system.env.temperature / (system.mass * system.omega**2)
    fits = {}
    for i, a in enumerate("xyz"):
        psd = welch_psd(tr.positions[:, i, :], f_s, segment_length=_segment(tr.positions))
        psd = psd.scaled(1.0, "m^2/Hz")
        fit = fit_lorentzian(psd, system.omega[i], max(system.gamma, 1.0))
        fits[a] = {"omega0_rad_s": fit.omega0, "f0_hz": fit.omega0 / (2 * math.pi), "gamma_1_s": fit.gamma,
                   "omega0_stderr": float(fit.stderr[1]), "gamma_stderr": float(fit.stderr[2])}
        ss = psd.single_sided()
        out.tables[f"psd_{a}"] = (["frequency_hz", "psd_single_sided_m2_per_hz"],
                                  np.column_stack([ss.frequencies, ss.values]))
    t = tr.times
    out.tables["trace"] = (["time_s", "x_m", "y_m", "z_m", "det_x_V", "det_y_V", "det_z_V"],
                           np.column_stack([t, tr.positions[0].T, tr.detector[0].T]))
    out.summary = {
        "variance_m2": _axes_dict(var),
        "equipartition_ratio": _axes_dict(var / expected),
        "t_eff_K": _axes_dict(system.mass * system.omega**2 * var / K_B),
        "gamma_injected_1_s": system.gamma,
        "lorentzian_fit": fits,
    }
    return out


def _loop_summary(system, chain, config, stats):
    oracle = loop_temperature_oracle(system, chain, config)
    return {
        "t_eff_K": _axes_dict(stats.t_eff),
        "t_eff_stderr_K": _axes_dict(stats.t_eff_err),
        "t_oracle_K": _axes_dict(oracle),
        "delays": list(chain.delays),
        "samples": stats.n_samples,
    }


def run_loop(cfg, system, threads):
    from .errors import InstabilityError

    sc = cfg.scenario
    config = sim_config(cfg, threads, trace_length=sc.trace_length, n_traces=sc.n_traces,
                        burn_in=sc.burn_in, record_every=sc.record_every)
    dig = controller_gains(cfg, system)
    chain = _chain(cfg, system, dig, config)
    out = ScenarioOutput()
    try:
        tr = run_closed_loop(system, chain, config)
    except InstabilityError as exc:
        tr = exc.partial
        out.unstable, out.message = True, str(exc)
    rows = np.column_stack([tr.times, tr.positions[0].T, tr.detector[0].T, tr.control[0].T])
    out.tables["trace"] = (["time_s", "x_m", "y_m", "z_m", "det_x_V", "det_y_V", "det_z_V",
                            "u_a_V", "u_b_V", "u_z_V"], rows)
    out.summary = {"digital_gains": dict(zip(GAIN_ROWS, _gain_list(dig))), "pressure_pa": system.env.pressure}
    if tr.statistics is not None:
        out.summary.update(_loop_summary(system, chain, config, tr.statistics))
    return out


def run_delay(cfg, system, threads):
    sc = cfg.scenario
    axes = tuple(AXIS_INDEX[a] for a in sc.axes)
    config = sim_config(cfg, threads, trace_length=sc.trace_length)
    floor = max(system.omega[a] * cfg.chain.electronic_delay for a in axes)
    phi = np.linspace(floor, sc.phi_max, sc.phi_points)
    res = run_delay_sweep(system, sc.gains, phi, config, axes=axes, repeats=sc.repeats)
    names = [a for a in sc.axes]
    header = (["phi_rad"] + [f"T_eff_{n}_K" for n in names] + [f"stderr_{n}_K" for n in names]
              + [f"T_oracle_{n}_K" for n in names] + [f"phi_realized_{n}_rad" for n in names])
    rows = np.column_stack([res.phi, res.t_eff, res.t_eff_err, res.oracle, res.phi_realized])
    out = ScenarioOutput(tables={"delay_sweep": (header, rows)})
    summ = {}
    for k, n in enumerate(names):
        j, h = int(np.argmin(res.t_eff[:, k])), int(np.argmax(res.t_eff[:, k]))
        summ[n] = {"t_min_K": float(res.t_eff[j, k]), "phi_min_rad": float(res.phi[j]),
                   "t_max_K": float(res.t_eff[h, k]), "phi_max_rad": float(res.phi[h]),
                   "gain_N_per_m": float(res.gains[k])}
    out.summary = {"axes": summ, "repeats": sc.repeats, "pressure_pa": system.env.pressure}
    return out


def run_pressure(cfg, system, threads):
    sc = cfg.scenario
    config = sim_config(cfg, threads, trace_length=sc.trace_length, n_traces=sc.n_traces, burn_in=sc.burn_in)
    dig = controller_gains(cfg, system)
    chain = _chain(cfg, system, dig, config)
    p_mbar = np.asarray(sc.pressures) / 100.0
    res = run_pressure_sweep(system, chain, p_mbar, config)
    header = ["pressure_mbar", "T_eff_x_K", "T_eff_y_K", "T_eff_z_K", "stderr_x_K", "stderr_y_K", "stderr_z_K",
              "T_oracle_x_K", "T_oracle_y_K", "T_oracle_z_K", "unstable"]
    rows = np.column_stack([res.pressure_mbar, res.t_eff, res.t_eff_err, res.oracle, res.unstable.astype(float)])
    out = ScenarioOutput(tables={"pressure_sweep": (header, rows)})
    out.unstable = bool(res.unstable.any())
    if out.unstable:
        out.message = f"loop unstable at {res.pressure_mbar[res.unstable].tolist()} mbar"
    j = int(np.argmin(res.pressure_mbar))
    out.summary = {"lowest_pressure_mbar": float(res.pressure_mbar[j]),
                   "t_eff_lowest_K": _axes_dict(res.t_eff[j]),
                   "unstable_pressures_mbar": res.pressure_mbar[res.unstable].tolist(),
                   "delays": list(chain.delays),
                   "digital_gains": dict(zip(GAIN_ROWS, _gain_list(dig)))}
    return out


def run_quantum_scenario(cfg, system, threads):
    sc = cfg.scenario
    config = sim_config(cfg, threads)
    weights = cost_weights(system.omega, system.mass, cfg.controller.weights.layout, cfg.controller.weights.effort)
    reg, est = quantum_design(system, cfg.chain.T_s, weights)
    res = run_quantum(system, est, reg, config, n_runs=sc.n_runs, duration=sc.duration)
    rows = [[i, res.mean[i], res.std[i], res.predicted[i]] for i in range(3)]
    out = ScenarioOutput(tables={
        "quantum": (["axis", "n_mean", "n_std", "n_lqg"], rows),
        "quantum_runs": (["run", "n_x", "n_y", "n_z"], [[i, *r] for i, r in enumerate(res.occupation)]),
    })
    out.summary = {"n_mean": _axes_dict(res.mean), "n_std": _axes_dict(res.std),
                   "n_lqg": _axes_dict(res.predicted), "n_runs": sc.n_runs, "duration_s": sc.duration,
                   "measurement_sigma": _axes_dict(system.noise.measurement_sigma),
                   "backaction_psd": _axes_dict(system.noise.backaction)}
    return out


def synthetic_calibration(system, detector_gain, config: SimConfig, sc, seed: int):
    """Generate thermal and driven records with known gains and calibrate them.

    Returns ``(DetectorCalibration, {"xx": ElectrodeCalibration, ...})``.
    """
    thermal = replace(config, n_traces=sc.n_traces, trace_length=sc.trace_length,
                      sample_interval=sc.sample_interval, seed=seed)
    tr = simulate_free(system, thermal, detector_gain=detector_gain)
    omega_guess = system.omega * (1 + 2e-3)
    det = calibrate_detector(tr.detector, tr.sample_rate, system.env, system.particle, omega_guess,
                             segment_length=_segment(tr.detector))
    seeds = np.random.SeedSequence(seed).generate_state(8 * len(sc.drive_amplitudes), dtype=np.uint64)
    electrodes = {}
    k = 0
    for i, a in enumerate("xy"):
        for j, e in enumerate("ab"):
            coeff = system.actuator.c_nv[i][j]
            w_dr = system.omega[i] * (1 + sc.drive_offset)
            traces, drives = [], []
            for amp in sc.drive_amplitudes:
                cfg1 = replace(thermal, n_traces=sc.drive_traces, trace_length=sc.drive_duration,
                               seed=int(seeds[k]))
                k += 1
                rec = simulate_free(system, cfg1, drives=(Drive(i, coeff * amp, w_dr),), detector_gain=detector_gain)
                traces.append(rec.detector[:, i])
                drives.append(DriveConfig(electrode=j, omega_drive=w_dr, amplitude=amp,
                                          duration=sc.drive_duration, axis=i))
            electrodes[a + e] = calibrate_electrode(traces, drives, det, system.mass, rec.sample_rate)
    return det, electrodes


def run_calibrate(cfg, system, threads):
    sc = cfg.scenario
    config = sim_config(cfg, threads)
    det, electrodes = synthetic_calibration(system, cfg.chain.detector_gain, config, sc, cfg.seed)
    truth = np.asarray(cfg.chain.detector_gain)
    rows = [[a, det.c_vm[i], det.c_vm_err[i], truth[i], det.omega[i], det.gamma[i]] for i, a in enumerate("xyz")]
    e_rows = []
    for i, a in enumerate("xy"):
        for j, e in enumerate("ab"):
            r = electrodes[a + e]
            e_rows.append([a + e, r.coefficient, r.stderr, system.actuator.c_nv[i][j]])
    out = ScenarioOutput(tables={
        "detector_calibration": (["axis", "c_vm_V_per_m", "stderr_V_per_m", "true_V_per_m", "omega0_rad_s",
                                  "gamma_1_s"], rows),
        "electrode_calibration": (["coefficient", "c_nv_N_per_V", "stderr_N_per_V", "true_N_per_V"], e_rows),
    })
    out.summary = {
        "c_vm": _axes_dict(det.c_vm),
        "c_vm_relative_error": _axes_dict(np.asarray(det.c_vm) / truth - 1),
        "c_nv": {r[0]: r[1] for r in e_rows},
        "c_nv_relative_error": {r[0]: r[1] / r[3] - 1 for r in e_rows},
        "warnings": list(det.warnings),
    }
    return out


def run_design(cfg, system, threads):
    gains, dig = design(cfg, system)
    if cfg.controller.design_damping == "undamped":
        system = replace(system, gamma_override=0.0)
    fixed = None
    if cfg.controller.fixed_point is not None:
        fixed = to_fixed_point(dig, *cfg.controller.fixed_point)
    K = gains.K_d
    lqr = [*np.ravel(K[:2, :2]), *np.ravel(K[:2, 3:5]), K[2, 2], K[2, 5]]
    units = ["N/m"] * 4 + ["N s/m"] * 4 + ["N/m", "N s/m"]
    digital = _gain_list(dig)
    quant = _gain_list(fixed) if fixed is not None else [math.nan] * len(digital)
    rows = [[n, v, u, d, q] for n, v, u, d, q in zip(GAIN_ROWS, lqr, units, digital, quant)]
    out = ScenarioOutput(tables={"gain_table": (["gain", "lqr_value", "lqr_units", "digital", "fixed_point"], rows)})
    out.summary = {
        "lqr": dict(zip(GAIN_ROWS, lqr)),
        "digital": dict(zip(GAIN_ROWS, digital)),
        "T_s": cfg.chain.T_s,
        "input_rule": cfg.controller.input_rule,
        "gamma_1_s": system.gamma,
    }
    if gains.K is not None:
        out.summary["continuous_lqr"] = np.asarray(gains.K).tolist()
    return out


RUNNERS = {
    "free": run_free,
    "loop": run_loop,
    "delay-sweep": run_delay,
    "pressure-sweep": run_pressure,
    "quantum": run_quantum_scenario,
    "calibrate": run_calibrate,
    "design": run_design,
}


def execute_scenario(cfg: ExperimentConfig, threads: int = 1) -> ScenarioOutput:
    system = build_system(cfg)
    return RUNNERS[cfg.scenario.kind](cfg, system, threads)

from .config import (
    DelaySweepResult,
    FeedbackChainConfig,
    LoopStatistics,
    PressureSweepResult,
    QuantumResult,
    SimConfig,
    TraceSet,
)
from .oracle import loop_temperature_oracle, lqg_steady_covariance
from .runner import (
    Drive,
    axis_transitions,
    default_chain,
    default_filters,
    delayed_feedback_oracle,
    quantum_design,
    quarter_period_delays,
    run_closed_loop,
    run_delay_sweep,
    run_pressure_sweep,
    run_quantum,
    simulate_free,
)

__all__ = [
    "DelaySweepResult",
    "Drive",
    "FeedbackChainConfig",
    "LoopStatistics",
    "PressureSweepResult",
    "QuantumResult",
    "SimConfig",
    "TraceSet",
    "axis_transitions",
    "default_chain",
    "default_filters",
    "delayed_feedback_oracle",
    "loop_temperature_oracle",
    "lqg_steady_covariance",
    "quantum_design",
    "quarter_period_delays",
    "run_closed_loop",
    "run_delay_sweep",
    "run_pressure_sweep",
    "run_quantum",
    "simulate_free",
]

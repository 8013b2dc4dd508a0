//! Stochastic simulation of the link and of its phase stabilisation.

mod interference;
mod phase;
mod protocol;

pub use interference::{interfere, port_means, GateDetector};
pub use phase::{
    coarse_feedback, fine_feedback, phase_drift_step, simulate_stabilization, wrap, PhaseState, PhaseTrace,
    ReferenceCounts, Stage, StabilizerConfig, TraceStats,
};
pub use protocol::{
    run_protocol, ClickStats, GroundTruth, MonteCarloConfig, PhaseNoise, SimOutcome, SimSummary, MIN_SLOTS,
};

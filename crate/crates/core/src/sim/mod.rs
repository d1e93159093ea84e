//! Simulated clients and scenario scripts that drive a kernel over the
//! public WebSocket protocol.

mod runner;
mod script;
mod trace;

use thiserror::Error;

pub use runner::{
    run_scenario, run_scenario_blocking, ExpectOutcome, LatencyStats, RunOptions, ScenarioReport, SIM_EPOCH_MS,
};
pub use script::{ClockMode, EmitTemplate, Expectation, ScenarioScript, SimClient, Step, TraceStep};
pub use trace::{
    generate_watch_trace, generate_watch_trace_along, point_along, trace_speeds, InvalidSpec, SimulatedTrace, TraceKind,
};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("client {client:?}: connection failed: {reason}")]
    ConnectionFailed { client: String, reason: String },
    #[error("script error{}: {reason}", step.map(|s| format!(" at step {s}")).unwrap_or_default())]
    ScriptError { step: Option<usize>, reason: String },
}

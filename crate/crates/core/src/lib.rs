//! Ratio consensus for open multi-agent systems over directed, time-varying
//! networks.
//!
//! Agents may join and leave between rounds. Each agent keeps a mass pair
//! `(x, y)` and estimates the average of the currently active agents' joining
//! masses as `z = x / y`. One-bit acknowledgements let every sender count the
//! out-neighbors that will still be present next round, so outgoing weights
//! always sum to one and departing agents can take their joining mass with
//! them.
//!
//! - [`topology`]: potential graph, activation, strong connectivity checks.
//! - [`protocol`]: per-agent weight, broadcast and update rules.
//! - [`scenario`]: churn scenarios, file format, event sampling.
//! - [`engine`]: round loop, metrics, matrix-form verification.
//! - [`output`]: CSV writers.

pub mod engine;
pub mod output;
pub mod protocol;
pub mod scenario;
pub mod topology;

pub use engine::{run, EngineError, MetricsRecord, RunOptions, RunOutput, WorldState};
pub use scenario::{paper_scenario, parse_scenario, Scenario, ScenarioError};
pub use topology::{ActivationVector, AgentId, OpenDigraph, Round};

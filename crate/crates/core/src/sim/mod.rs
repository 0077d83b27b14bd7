//! Simulation engine, configuration, ledger and run outputs.

pub mod config;
pub mod engine;
pub mod events;
pub mod ledger;
pub mod run;

pub use config::SimConfig;
pub use engine::{Scenario, Simulation, StepTiming};
pub use events::{Event, EventLog};
pub use ledger::{fare_cents, operator_share_cents, Ledger, MetricsRow};
pub use run::{simulate, simulate_scenario, RunOutput, RunSummary};

//! Scenario harness and acceptance checks for the virtualized-QP simulator.

pub mod check;
pub mod config;
pub mod metrics;
pub mod scenarios;

pub use config::{Baseline, Mode, Scenario, ScenarioConfig, ScenarioError};
pub use metrics::MetricRow;

//! Closed-loop benchmark harness for the hybrid controller: scenario
//! configs, simulation, timing, grid-lookup baseline and CSV reports.

pub mod config;
pub mod error;
pub mod lookup;
pub mod report;
pub mod scenario;
pub mod sim;
pub mod timing;

pub use config::ScenarioConfig;
pub use error::{BenchError, Result};
pub use sim::{simulate, Controller, SimReport, Tag, Termination};
pub use timing::{time_controller, uptime_division, TimingStats};

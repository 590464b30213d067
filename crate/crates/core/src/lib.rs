//! Multi-rate 802.11 throughput and airtime model with proportional-fair
//! contention window allocation.
//!
//! - [`phy`]: timing constants and per-station frame durations.
//! - [`model`]: closed-form slot probabilities, throughput, airtime, utility.
//! - [`optimizer`]: equal-airtime solver, window mapping and rounding, DCF
//!   baseline.
//! - [`sim`]: slot-level Monte Carlo simulator (p-persistent and backoff).
//! - [`controller`]: access-point control loop emulation.
//! - [`experiments`]: scenario files and the commands behind the CLI.


pub mod controller;
pub mod error;
pub mod exec;
pub mod experiments;
pub mod model;
pub mod optimizer;
pub mod phy;
pub mod scenario;
pub mod sim;

pub use error::{Error, Result};
pub use exec::Exec;
pub use model::{AttemptVector, Network, PerStationMetrics, SlotDistribution, Utility};
pub use optimizer::{solve_equal_airtime, Allocation, SolverConfig};
pub use phy::{PhyProfile, StationSpec};

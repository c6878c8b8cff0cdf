//! Scenario engine for the mecsched scheduling stack: synthetic vehicular
//! mobility over a hexagonal cell deployment, stochastic job arrivals, PV
//! harvesting, the per-slot control pipeline, baseline policies, metrics,
//! and a deterministic batch runner.
//!
//! The library half is consumed by the `mecsched` binary; everything here is
//! also usable directly from tests and other tools.

pub mod config;
pub mod metrics;
pub mod mobility;
pub mod sweep;
pub mod trace;
pub mod world;

pub use config::{parse_config, Policy, ScenarioConfig};
pub use metrics::MetricsReport;
pub use sweep::{run_sweep, RunManifest};
pub use world::World;

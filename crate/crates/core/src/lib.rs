//! Scheduling algorithms for a cluster of renewable-powered edge servers.
//!
//! Each server (co-located with a radio access point) runs vehicle-offloaded
//! jobs on harvested energy, topping up from the grid when the harvest falls
//! short. Every control slot the cluster runs two phases:
//!
//! 1. a per-server receding-horizon workload schedule ([`mpc`]), which also
//!    yields residual green-power / compute / memory estimates, and
//! 2. a distributed agreement on how much workload to hand to each neighbor
//!    ([`consensus`]), discretized into per-job migrations ([`rounding`]).
//!
//! The crate is `no_std`-compatible (`alloc` is required; enable the `libm`
//! feature when building without `std`).

#![cfg_attr(not(feature = "std"), no_std)]

#[cfg(all(not(feature = "std"), not(feature = "libm")))]
compile_error!("enable the `std` feature or the `libm` feature");

extern crate alloc;

pub mod consensus;
pub mod model;
pub mod mpc;
pub mod rounding;

mod numeric;

pub use model::{EnergyLedger, Job, JobId, JobType, NodeConfig, NodeId, SlotContext};

use core::fmt;

/// Contract violations surfaced by the algorithm entry points.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// An input violated a documented precondition.
    Precondition(&'static str),
    /// A weight matrix had a non-positive diagonal entry.
    SingularWeights,
    /// Neighbor lists are not symmetric or reference unknown nodes.
    BadTopology,
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Precondition(what) => write!(f, "precondition violated: {what}"),
            Error::SingularWeights => write!(f, "weight matrix has a non-positive diagonal entry"),
            Error::BadTopology => write!(f, "neighbor lists are not symmetric"),
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for Error {}

//! Replaying recorded vehicle traces instead of synthetic mobility.
//!
//! The hook exists so a measurement campaign can drive the same pipeline,
//! but no trace format is wired up yet: implementations must supply every
//! vehicle's position for every slot themselves.

/// A source of vehicle positions indexed by slot.
///
/// `positions(slot)` returns one `(x, y)` per vehicle, in a fixed vehicle
/// order that must not change across slots. Coordinates use the same meters
/// as the cell lattice.
pub trait MobilityTrace {
    fn n_vehicles(&self) -> usize;
    fn positions(&self, slot: u64) -> Vec<(f64, f64)>;
}

/// Placeholder for a file-backed trace.
///
/// Parsing real trace files (SUMO exports, GPS logs) is out of scope for
/// now; constructing this type states the intent and fails loudly.
#[derive(Debug, Clone, Copy)]
pub struct FileTrace;

impl FileTrace {
    pub fn open(_path: &str) -> Self {
        unimplemented!("trace replay is not wired up yet; use the synthetic mobility model")
    }
}

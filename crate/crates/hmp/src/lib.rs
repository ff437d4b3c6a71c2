//! Distributed single-shot Transformer inference across heterogeneous,
//! memory-constrained workers: hybrid tensor/sequence parallelism over ring
//! collectives with tile-based compute/communication overlap, plus the
//! profiling and planning machinery that balances workload across devices.

pub mod cli;
pub mod collectives;
pub mod engine;
pub mod error;
pub mod memory;
pub mod model;
pub mod planner;
pub mod profiler;
pub mod rng;
pub mod runtime;
pub mod tensor;
pub mod throttle;
pub mod transport;

pub use error::{Error, Result};

#[cfg(test)]
pub(crate) mod test_sync {
    use std::sync::Mutex;

    /// Serializes timing-sensitive tests; parallel busy-wait tests starve
    /// each other on small CI machines.
    pub static TIMING: Mutex<()> = Mutex::new(());

    pub fn timing_lock() -> std::sync::MutexGuard<'static, ()> {
        TIMING.lock().unwrap_or_else(|e| e.into_inner())
    }
}

//! Crate-wide error type with the diagnostics the CLI maps to exit codes.

use std::fmt;
use std::io;

use crate::tensor::ShapeError;

/// Memory shortfall on one device, reported when planning fails.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MemoryDeficit {
    pub device_id: usize,
    /// Bytes the plan would place on the device.
    pub required_bytes: u64,
    pub budget_bytes: u64,
    pub deficit_bytes: u64,
}

#[derive(Debug)]
pub enum Error {
    /// Tensor shape violation surfaced through a public operation.
    Shape(ShapeError),
    /// Invalid configuration (model, plan, cluster, CLI arguments).
    Config(String),
    /// Filesystem and serialization failures.
    Io { context: String, source: io::Error },
    /// Malformed checkpoint or JSON artifact.
    Format(String),
    /// Wire-protocol violation: unexpected frame, id, origin or payload size.
    Protocol(String),
    /// A collective aborted; `rank` attributes the failing peer when known.
    Collective { primitive: &'static str, rank: Option<usize>, detail: String },
    /// A peer did not respond within the configured timeout.
    PeerTimeout { rank: usize, waited_ms: u64 },
    /// Could not reach a worker at startup.
    Connect { device_id: usize, address: String, detail: String },
    /// Memory budget exceeded at `site` (shard load or activation).
    BudgetExceeded { site: String, requested: u64, resident: u64, budget: u64 },
    /// Workload planning cannot satisfy every device's memory constraint.
    Infeasible { violations: Vec<MemoryDeficit> },
    /// Profiling produced unusable measurements.
    Profile(String),
    /// Distributed output diverged from the reference forward pass.
    Verify { max_rel_error: f64, tolerance: f64 },
    /// A worker reported a failure; `detail` carries its own error text.
    Worker { device_id: usize, detail: String },
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Shape(e) => write!(f, "shape error: {e}"),
            Self::Config(msg) => write!(f, "invalid configuration: {msg}"),
            Self::Io { context, source } => write!(f, "i/o error ({context}): {source}"),
            Self::Format(msg) => write!(f, "format error: {msg}"),
            Self::Protocol(msg) => write!(f, "protocol error: {msg}"),
            Self::Collective { primitive, rank, detail } => match rank {
                Some(r) => write!(f, "{primitive} aborted (peer rank {r}): {detail}"),
                None => write!(f, "{primitive} aborted: {detail}"),
            },
            Self::PeerTimeout { rank, waited_ms } => {
                write!(f, "no response from rank {rank} within {waited_ms} ms")
            }
            Self::Connect { device_id, address, detail } => {
                write!(f, "cannot reach worker {device_id} at {address}: {detail}")
            }
            Self::BudgetExceeded { site, requested, resident, budget } => write!(
                f,
                "memory budget exceeded at {site}: requested {requested} B with {resident} B \
                 resident, budget {budget} B"
            ),
            Self::Infeasible { violations } => {
                write!(f, "infeasible plan: ")?;
                for (i, v) in violations.iter().enumerate() {
                    if i > 0 {
                        write!(f, "; ")?;
                    }
                    write!(
                        f,
                        "device {} needs {} B over its {} B budget (deficit {} B)",
                        v.device_id, v.required_bytes, v.budget_bytes, v.deficit_bytes
                    )?;
                }
                Ok(())
            }
            Self::Profile(msg) => write!(f, "profile error: {msg}"),
            Self::Verify { max_rel_error, tolerance } => write!(
                f,
                "verification failed: max relative error {max_rel_error:.3e} exceeds {tolerance:.1e}"
            ),
            Self::Worker { device_id, detail } => {
                write!(f, "worker {device_id} failed: {detail}")
            }
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Self::Io { source, .. } => Some(source),
            _ => None,
        }
    }
}

impl From<ShapeError> for Error {
    fn from(e: ShapeError) -> Self {
        Self::Shape(e)
    }
}

impl Error {
    pub fn io(context: impl Into<String>, source: io::Error) -> Self {
        Self::Io { context: context.into(), source }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

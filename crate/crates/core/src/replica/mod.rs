//! Replica roles. A primary intercepts application writes, assigns them
//! monotonically increasing indices, records per-block authentication
//! state, and replicates before completing flagged writes; backups apply
//! the stream in index order and acknowledge cumulatively. Both sides
//! serialize same-block I/O through a conflict gate so the disk sees at
//! most one operation per block at a time.

mod gate;
mod node;

pub use gate::{ConflictGate, GateOp, OpToken};
pub use node::{AppError, AppOpId, CheckFailed, Counters, Effect, Mutation, Replica};

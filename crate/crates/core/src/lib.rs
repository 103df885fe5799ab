//! Event-driven asynchronous tasks.
//!
//! Tasks are submitted with a list of event dependencies and run on a worker
//! pool once every dependency is satisfied. Events are fired to one rank or
//! to all ranks and are matched against waiting tasks in submission order.

pub mod matcher;
pub mod runtime;
pub mod scheduler;
pub mod transport;
pub mod types;

pub use types::*;

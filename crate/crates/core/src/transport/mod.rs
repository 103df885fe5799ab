//! Point-to-point delivery of frames between ranks.
//!
//! A transport must deliver every frame exactly once and keep frames from one
//! sender to one receiver in send order. Nothing is promised across pairs.
//! Two implementations share the [`Transport`] trait: an in-process
//! [`loopback`] hub with an optional seeded delivery schedule, and [`tcp`]
//! with one process (or thread) per rank on a full mesh.

pub mod frame;
pub mod loopback;
pub mod roster;
pub mod tcp;

use std::str::FromStr;
use std::time::Duration;

use thiserror::Error;

pub use frame::{decode_frame, encode_frame, Control, Frame};
pub use loopback::{Delivery, LoopbackHub, LoopbackTransport};
pub use roster::{RankRoster, RosterEntry};
pub use tcp::TcpTransport;

/// Environment variable that picks the transport when the configuration does not.
pub const TRANSPORT_ENV: &str = "EDAT_TRANSPORT";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TransportError {
    #[error("rank {rank} is not part of a world of {world_size} ranks")]
    UnknownRank { rank: usize, world_size: usize },
    #[error("transport closed")]
    TransportClosed,
    #[error("address payloads cannot leave their rank")]
    AddressNotSerializable,
    #[error("malformed frame: {0}")]
    MalformedFrame(String),
    #[error("no frames are queued")]
    NothingQueued,
    #[error("invalid roster: {0}")]
    RosterInvalid(String),
    #[error("cannot bind {0}")]
    BindFailure(String),
    #[error("i/o error: {0}")]
    Io(String),
}

/// Moves frames between the ranks of one world.
pub trait Transport: Send + Sync {
    fn rank(&self) -> usize;

    fn world_size(&self) -> usize;

    /// Queues `frame` for `target` without waiting for it to be delivered.
    fn send(&self, target: usize, frame: Frame) -> Result<(), TransportError>;

    /// Frames received since the last call. Waits at most `timeout` when
    /// nothing is available.
    fn poll(&self, timeout: Duration) -> Result<Vec<Frame>, TransportError>;

    /// Leaves the world gracefully. Further sends are dropped.
    fn shutdown(&self);

    /// Leaves without a goodbye, as a crash would. Peers see
    /// [`TransportError::TransportClosed`].
    fn abort(&self) {
        self.shutdown();
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TransportKind {
    #[default]
    Loopback,
    Tcp,
}

impl TransportKind {
    /// Reads [`TRANSPORT_ENV`], if set.
    pub fn from_env() -> Option<Result<Self, String>> {
        std::env::var(TRANSPORT_ENV).ok().map(|v| v.parse())
    }
}

impl FromStr for TransportKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "loopback" => Ok(TransportKind::Loopback),
            "tcp" => Ok(TransportKind::Tcp),
            other => Err(format!("unknown transport {other:?}, expected loopback or tcp")),
        }
    }
}

impl std::fmt::Display for TransportKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TransportKind::Loopback => "loopback",
            TransportKind::Tcp => "tcp",
        })
    }
}

pub(crate) fn check_rank(rank: usize, world_size: usize) -> Result<(), TransportError> {
    if rank < world_size {
        Ok(())
    } else {
        Err(TransportError::UnknownRank { rank, world_size })
    }
}

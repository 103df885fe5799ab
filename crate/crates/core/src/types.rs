//! Domain types shared by the matcher, scheduler, transport and runtime.
//!
//! Everything here is immutable once constructed. Payload bytes live in a
//! reference-counted [`Bytes`] buffer, so cloning an [`Event`] for a broadcast
//! or for a persistent re-enqueue never copies the data.

use std::any::Any;
use std::fmt;
use std::sync::Arc;

use bytes::Bytes;
use thiserror::Error;

/// Errors raised while building or resolving core types.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CoreError {
    #[error("rank {rank} is out of range for a world of {world_size} ranks")]
    ConcreteOutOfRange { rank: usize, world_size: usize },
    #[error("EDAT_ANY is a match-time wildcard and cannot be resolved to a rank")]
    AnyNotResolvable,
    #[error("event identifiers must be non-empty")]
    EmptyIdentifier,
    #[error("payload of kind {kind:?} with {count} elements needs {expected} bytes, got {actual}")]
    PayloadLength {
        kind: PayloadKind,
        count: usize,
        expected: usize,
        actual: usize,
    },
    #[error("unknown payload kind tag {0}")]
    UnknownPayloadKind(u8),
    #[error("bool payload byte {0} is neither 0 nor 1")]
    InvalidBool(u8),
    #[error("address payloads can only be built from a handle")]
    AddressFromBytes,
}

/// Where an event comes from or goes to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum RankSpec {
    Concrete(usize),
    /// The local rank.
    SelfRank,
    /// Wildcard source; only meaningful in a dependency.
    Any,
    /// Every rank: a broadcast when firing, one event per rank when depending.
    All,
}

impl From<usize> for RankSpec {
    fn from(rank: usize) -> Self {
        RankSpec::Concrete(rank)
    }
}

impl fmt::Display for RankSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RankSpec::Concrete(r) => write!(f, "{r}"),
            RankSpec::SelfRank => f.write_str("SELF"),
            RankSpec::Any => f.write_str("ANY"),
            RankSpec::All => f.write_str("ALL"),
        }
    }
}

/// Resolves a rank specifier to the concrete ranks it denotes.
pub fn resolve_rank(
    spec: RankSpec,
    local_rank: usize,
    world_size: usize,
) -> Result<Vec<usize>, CoreError> {
    debug_assert!(world_size >= 1 && local_rank < world_size);
    match spec {
        RankSpec::Concrete(rank) if rank < world_size => Ok(vec![rank]),
        RankSpec::Concrete(rank) => Err(CoreError::ConcreteOutOfRange { rank, world_size }),
        RankSpec::SelfRank => Ok(vec![local_rank]),
        RankSpec::All => Ok((0..world_size).collect()),
        RankSpec::Any => Err(CoreError::AnyNotResolvable),
    }
}

/// Element type of an event payload. The discriminant is the wire tag.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum PayloadKind {
    None = 0,
    Byte = 1,
    Bool = 2,
    Int = 3,
    Long = 4,
    Float = 5,
    Double = 6,
    Address = 7,
}

impl PayloadKind {
    /// Width of one element in bytes.
    pub const fn width(self) -> usize {
        match self {
            PayloadKind::None => 0,
            PayloadKind::Byte | PayloadKind::Bool => 1,
            PayloadKind::Int | PayloadKind::Float => 4,
            PayloadKind::Long | PayloadKind::Double | PayloadKind::Address => 8,
        }
    }

    pub const fn tag(self) -> u8 {
        self as u8
    }

    pub fn from_tag(tag: u8) -> Result<Self, CoreError> {
        Ok(match tag {
            0 => PayloadKind::None,
            1 => PayloadKind::Byte,
            2 => PayloadKind::Bool,
            3 => PayloadKind::Int,
            4 => PayloadKind::Long,
            5 => PayloadKind::Float,
            6 => PayloadKind::Double,
            7 => PayloadKind::Address,
            other => return Err(CoreError::UnknownPayloadKind(other)),
        })
    }
}

/// Opaque shared handle carried by an `Address` payload.
pub type AddressHandle = Arc<dyn Any + Send + Sync>;

/// A flat array of one element kind, snapshotted when it is built.
#[derive(Clone)]
pub struct Payload {
    kind: PayloadKind,
    count: usize,
    bytes: Bytes,
    handle: Option<AddressHandle>,
}

macro_rules! numeric_payload {
    ($ctor:ident, $getter:ident, $ty:ty, $kind:expr) => {
        pub fn $ctor(values: &[$ty]) -> Self {
            let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
            Payload {
                kind: $kind,
                count: values.len(),
                bytes: Bytes::from(bytes),
                handle: None,
            }
        }

        pub fn $getter(&self) -> Option<Vec<$ty>> {
            const W: usize = std::mem::size_of::<$ty>();
            (self.kind == $kind).then(|| {
                self.bytes
                    .chunks_exact(W)
                    .map(|c| <$ty>::from_le_bytes(c.try_into().expect("chunk width")))
                    .collect()
            })
        }
    };
}

impl Payload {
    pub fn none() -> Self {
        Payload {
            kind: PayloadKind::None,
            count: 0,
            bytes: Bytes::new(),
            handle: None,
        }
    }

    pub fn bytes(values: &[u8]) -> Self {
        Payload {
            kind: PayloadKind::Byte,
            count: values.len(),
            bytes: Bytes::copy_from_slice(values),
            handle: None,
        }
    }

    pub fn bools(values: &[bool]) -> Self {
        Payload {
            kind: PayloadKind::Bool,
            count: values.len(),
            bytes: values.iter().map(|&b| b as u8).collect::<Vec<_>>().into(),
            handle: None,
        }
    }

    numeric_payload!(ints, as_ints, i32, PayloadKind::Int);
    numeric_payload!(longs, as_longs, i64, PayloadKind::Long);
    numeric_payload!(floats, as_floats, f32, PayloadKind::Float);
    numeric_payload!(doubles, as_doubles, f64, PayloadKind::Double);

    /// A reference to rank-local data. Only legal for events whose every
    /// target is the firing rank.
    pub fn address<T: Any + Send + Sync>(handle: Arc<T>) -> Self {
        let handle: AddressHandle = handle;
        let word = (Arc::as_ptr(&handle) as *const () as usize as u64).to_le_bytes();
        Payload {
            kind: PayloadKind::Address,
            count: 1,
            bytes: Bytes::copy_from_slice(&word),
            handle: Some(handle),
        }
    }

    /// Rebuilds a payload from raw little-endian element bytes.
    pub fn from_raw(kind: PayloadKind, count: usize, bytes: Bytes) -> Result<Self, CoreError> {
        if kind == PayloadKind::Address {
            return Err(CoreError::AddressFromBytes);
        }
        let expected = count * kind.width();
        if bytes.len() != expected || (kind == PayloadKind::None && count != 0) {
            return Err(CoreError::PayloadLength {
                kind,
                count,
                expected,
                actual: bytes.len(),
            });
        }
        if kind == PayloadKind::Bool {
            if let Some(&bad) = bytes.iter().find(|&&b| b > 1) {
                return Err(CoreError::InvalidBool(bad));
            }
        }
        Ok(Payload {
            kind,
            count,
            bytes,
            handle: None,
        })
    }

    pub fn kind(&self) -> PayloadKind {
        self.kind
    }

    pub fn element_count(&self) -> usize {
        self.count
    }

    pub fn data(&self) -> &[u8] {
        &self.bytes
    }

    pub fn raw_bytes(&self) -> &Bytes {
        &self.bytes
    }

    pub fn as_bools(&self) -> Option<Vec<bool>> {
        (self.kind == PayloadKind::Bool).then(|| self.bytes.iter().map(|&b| b != 0).collect())
    }

    pub fn as_bytes(&self) -> Option<&[u8]> {
        (self.kind == PayloadKind::Byte).then_some(&self.bytes[..])
    }

    /// The shared handle of an `Address` payload, downcast to `T`.
    pub fn as_address<T: Any + Send + Sync>(&self) -> Option<Arc<T>> {
        self.handle.clone()?.downcast::<T>().ok()
    }

    pub fn is_address(&self) -> bool {
        self.kind == PayloadKind::Address
    }
}

impl PartialEq for Payload {
    fn eq(&self, other: &Self) -> bool {
        let handles_match = match (&self.handle, &other.handle) {
            (None, None) => true,
            (Some(a), Some(b)) => Arc::ptr_eq(a, b),
            _ => false,
        };
        self.kind == other.kind
            && self.count == other.count
            && self.bytes == other.bytes
            && handles_match
    }
}

impl fmt::Debug for Payload {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Payload")
            .field("kind", &self.kind)
            .field("count", &self.count)
            .field("bytes", &self.bytes.len())
            .finish()
    }
}

impl Default for Payload {
    fn default() -> Self {
        Payload::none()
    }
}

/// An identifier-labelled message delivered to a task.
#[derive(Clone, Debug, PartialEq)]
pub struct Event {
    pub source_rank: usize,
    pub identifier: Arc<str>,
    pub payload: Payload,
    pub persistent: bool,
    /// Position in the ordered stream from `source_rank` to the receiver.
    pub sequence: u64,
}

impl Event {
    pub fn new(
        source_rank: usize,
        identifier: impl Into<Arc<str>>,
        payload: Payload,
        persistent: bool,
        sequence: u64,
    ) -> Result<Self, CoreError> {
        let identifier = identifier.into();
        if identifier.is_empty() {
            return Err(CoreError::EmptyIdentifier);
        }
        Ok(Event {
            source_rank,
            identifier,
            payload,
            persistent,
            sequence,
        })
    }

    pub fn kind(&self) -> PayloadKind {
        self.payload.kind()
    }

    pub fn element_count(&self) -> usize {
        self.payload.element_count()
    }

    pub fn data(&self) -> &[u8] {
        self.payload.data()
    }

    pub fn ints(&self) -> Option<Vec<i32>> {
        self.payload.as_ints()
    }

    pub fn longs(&self) -> Option<Vec<i64>> {
        self.payload.as_longs()
    }

    pub fn doubles(&self) -> Option<Vec<f64>> {
        self.payload.as_doubles()
    }
}

/// A `(source, identifier)` pair a task needs an event for.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct DependencyDescriptor {
    pub source: RankSpec,
    pub identifier: Arc<str>,
}

impl DependencyDescriptor {
    pub fn new(source: impl Into<RankSpec>, identifier: impl Into<Arc<str>>) -> Self {
        DependencyDescriptor {
            source: source.into(),
            identifier: identifier.into(),
        }
    }
}

/// Shorthand for [`DependencyDescriptor::new`].
pub fn dep(source: impl Into<RankSpec>, identifier: &str) -> DependencyDescriptor {
    DependencyDescriptor::new(source, identifier)
}

/// Source of a dependency after `SELF` and `ALL` have been resolved.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum MatchSource {
    Rank(usize),
    Any,
}

/// A dependency as the matcher sees it.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct ResolvedDependency {
    pub source: MatchSource,
    pub identifier: Arc<str>,
}

impl ResolvedDependency {
    pub fn new(source: MatchSource, identifier: impl Into<Arc<str>>) -> Self {
        ResolvedDependency {
            source,
            identifier: identifier.into(),
        }
    }

    /// Whether `event` can fill this dependency.
    pub fn matches(&self, event: &Event) -> bool {
        *self.identifier == *event.identifier
            && match self.source {
                MatchSource::Rank(r) => r == event.source_rank,
                MatchSource::Any => true,
            }
    }
}

/// Resolves `SELF`, checks concrete ranks and expands each `ALL` in place to
/// one dependency per rank `0..world_size`.
pub fn expand_dependencies(
    deps: &[DependencyDescriptor],
    local_rank: usize,
    world_size: usize,
) -> Result<Vec<ResolvedDependency>, CoreError> {
    let mut out = Vec::with_capacity(deps.len());
    for d in deps {
        if d.identifier.is_empty() {
            return Err(CoreError::EmptyIdentifier);
        }
        match d.source {
            RankSpec::Any => out.push(ResolvedDependency::new(MatchSource::Any, d.identifier.clone())),
            spec => out.extend(
                resolve_rank(spec, local_rank, world_size)?
                    .into_iter()
                    .map(|r| ResolvedDependency::new(MatchSource::Rank(r), d.identifier.clone())),
            ),
        }
    }
    Ok(out)
}

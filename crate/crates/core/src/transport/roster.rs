//! The list of endpoints that make up a TCP world.
//!
//! A roster file has one `rank host port` line per rank. Blank lines and
//! lines starting with `#` are ignored. Ranks must cover `0..P` exactly once.

use std::fmt::Write as _;
use std::net::TcpListener;
use std::path::Path;

use super::TransportError;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RosterEntry {
    pub rank: usize,
    pub host: String,
    pub port: u16,
}

impl RosterEntry {
    pub fn address(&self) -> String {
        format!("{}:{}", self.host, self.port)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RankRoster {
    entries: Vec<RosterEntry>,
}

fn invalid(msg: impl Into<String>) -> TransportError {
    TransportError::RosterInvalid(msg.into())
}

impl RankRoster {
    /// Builds a roster from entries in any order.
    pub fn new(mut entries: Vec<RosterEntry>) -> Result<Self, TransportError> {
        if entries.is_empty() {
            return Err(invalid("roster has no ranks"));
        }
        entries.sort_by_key(|e| e.rank);
        for (i, e) in entries.iter().enumerate() {
            if e.rank != i {
                return Err(if e.rank < i {
                    invalid(format!("rank {} listed twice", e.rank))
                } else {
                    invalid(format!("rank {i} missing"))
                });
            }
            if e.host.is_empty() {
                return Err(invalid(format!("rank {i} has an empty host")));
            }
        }
        Ok(RankRoster { entries })
    }

    pub fn parse(text: &str) -> Result<Self, TransportError> {
        let mut entries = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            let [rank, host, port] = fields[..] else {
                return Err(invalid(format!(
                    "line {}: expected `rank host port`, got {line:?}",
                    lineno + 1
                )));
            };
            let rank = rank
                .parse()
                .map_err(|_| invalid(format!("line {}: bad rank {rank:?}", lineno + 1)))?;
            let port = port
                .parse()
                .map_err(|_| invalid(format!("line {}: bad port {port:?}", lineno + 1)))?;
            entries.push(RosterEntry {
                rank,
                host: host.to_string(),
                port,
            });
        }
        Self::new(entries)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self, TransportError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| invalid(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// `127.0.0.1` with the given ports, rank `i` on `ports[i]`.
    pub fn localhost(ports: &[u16]) -> Result<Self, TransportError> {
        Self::new(
            ports
                .iter()
                .enumerate()
                .map(|(rank, &port)| RosterEntry {
                    rank,
                    host: "127.0.0.1".into(),
                    port,
                })
                .collect(),
        )
    }

    /// A localhost roster on ports the OS reports as free right now.
    pub fn free_localhost(world_size: usize) -> Result<Self, TransportError> {
        let listeners = (0..world_size)
            .map(|_| TcpListener::bind("127.0.0.1:0"))
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| TransportError::BindFailure(e.to_string()))?;
        let ports = listeners
            .iter()
            .map(|l| l.local_addr().map(|a| a.port()))
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| TransportError::BindFailure(e.to_string()))?;
        Self::localhost(&ports)
    }

    pub fn world_size(&self) -> usize {
        self.entries.len()
    }

    pub fn entry(&self, rank: usize) -> Result<&RosterEntry, TransportError> {
        self.entries.get(rank).ok_or(TransportError::UnknownRank {
            rank,
            world_size: self.entries.len(),
        })
    }

    pub fn entries(&self) -> &[RosterEntry] {
        &self.entries
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            let _ = writeln!(out, "{} {} {}", e.rank, e.host, e.port);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_round_trip() {
        let text = "# world\n1 127.0.0.1 9001\n\n0 localhost 9000\n";
        let r = RankRoster::parse(text).unwrap();
        assert_eq!(r.world_size(), 2);
        assert_eq!(r.entry(0).unwrap().address(), "localhost:9000");
        assert_eq!(RankRoster::parse(&r.to_text()).unwrap(), r);
    }

    #[test]
    fn rejects_bad_rosters() {
        for text in ["", "0 h 1\n0 h 2", "1 h 1", "0 h", "0 h x", "z h 1", "0 h 1 extra"] {
            assert!(
                matches!(RankRoster::parse(text), Err(TransportError::RosterInvalid(_))),
                "{text:?}"
            );
        }
    }

    #[test]
    fn unknown_entry() {
        let r = RankRoster::localhost(&[1, 2]).unwrap();
        assert_eq!(
            r.entry(2),
            Err(TransportError::UnknownRank {
                rank: 2,
                world_size: 2
            })
        );
    }
}

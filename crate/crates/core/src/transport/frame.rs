//! Wire encoding of events and termination-control messages.
//!
//! Every frame starts with a fixed 24-byte little-endian header:
//!
//! | offset | size | field                                  |
//! |--------|------|----------------------------------------|
//! | 0      | 2    | magic `0xED 0xA7`                      |
//! | 2      | 1    | version (`1`)                          |
//! | 3      | 1    | frame kind: 0 = event, 1 = termination |
//! | 4      | 4    | source rank                            |
//! | 8      | 8    | sequence                               |
//! | 16     | 1    | persistent flag (0/1)                  |
//! | 17     | 1    | payload kind tag                       |
//! | 18     | 2    | identifier length                      |
//! | 20     | 4    | element count                          |
//!
//! followed by the identifier bytes and `element_count × width` payload
//! bytes. Frames are self-delimiting, so a byte stream needs no extra length
//! prefix.
//!
//! Termination frames carry an empty identifier, the round number in the
//! sequence field and three `Long` elements: a control code (0 white token,
//! 1 black token, 2 terminate, 3 goodbye), the token deficit and the token's
//! fired total.

use std::io::{self, Read};

use bytes::Bytes;

use crate::runtime::termination::{TerminationToken, TokenColor};
use crate::transport::TransportError;
use crate::types::{Event, Payload, PayloadKind};

pub const MAGIC: [u8; 2] = [0xED, 0xA7];
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 24;
pub const MAX_IDENTIFIER_LEN: usize = u16::MAX as usize;

const KIND_EVENT: u8 = 0;
const KIND_TERMINATION: u8 = 1;

/// Termination-protocol messages exchanged between ranks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Control {
    Token(TerminationToken),
    /// Sent by rank 0 to every other rank once termination is proven.
    Terminate { round: u64 },
    /// Last frame a rank sends on a connection before closing it.
    Goodbye,
}

/// A unit of transport traffic.
#[derive(Debug, Clone, PartialEq)]
pub enum Frame {
    Event(Event),
    Control { source: usize, message: Control },
}

impl Frame {
    pub fn source(&self) -> usize {
        match self {
            Frame::Event(e) => e.source_rank,
            Frame::Control { source, .. } => *source,
        }
    }

    pub fn encode(&self) -> Result<Vec<u8>, TransportError> {
        match self {
            Frame::Event(e) => encode_frame(e),
            Frame::Control { source, message } => Ok(encode_control(*source, message)),
        }
    }

    /// Decodes exactly one frame occupying all of `bytes`.
    pub fn decode(bytes: &[u8]) -> Result<Frame, TransportError> {
        let header = Header::parse(bytes)?;
        let total = HEADER_LEN + header.body_len()?;
        if bytes.len() != total {
            return Err(malformed(format!(
                "frame declares {total} bytes but buffer holds {}",
                bytes.len()
            )));
        }
        header.finish(&bytes[HEADER_LEN..])
    }
}

fn malformed(msg: impl Into<String>) -> TransportError {
    TransportError::MalformedFrame(msg.into())
}

fn write_header(
    out: &mut Vec<u8>,
    kind: u8,
    source: usize,
    sequence: u64,
    persistent: bool,
    payload_kind: PayloadKind,
    identifier_len: usize,
    element_count: usize,
) {
    out.extend_from_slice(&MAGIC);
    out.push(VERSION);
    out.push(kind);
    out.extend_from_slice(&(source as u32).to_le_bytes());
    out.extend_from_slice(&sequence.to_le_bytes());
    out.push(persistent as u8);
    out.push(payload_kind.tag());
    out.extend_from_slice(&(identifier_len as u16).to_le_bytes());
    out.extend_from_slice(&(element_count as u32).to_le_bytes());
}

/// Encodes an event frame.
pub fn encode_frame(event: &Event) -> Result<Vec<u8>, TransportError> {
    if event.payload.is_address() {
        return Err(TransportError::AddressNotSerializable);
    }
    let id = event.identifier.as_bytes();
    if id.len() > MAX_IDENTIFIER_LEN {
        return Err(malformed(format!("identifier of {} bytes exceeds 65535", id.len())));
    }
    if event.source_rank > u32::MAX as usize || event.element_count() > u32::MAX as usize {
        return Err(malformed("source rank or element count exceeds 32 bits"));
    }
    let data = event.data();
    let mut out = Vec::with_capacity(HEADER_LEN + id.len() + data.len());
    write_header(
        &mut out,
        KIND_EVENT,
        event.source_rank,
        event.sequence,
        event.persistent,
        event.kind(),
        id.len(),
        event.element_count(),
    );
    out.extend_from_slice(id);
    out.extend_from_slice(data);
    Ok(out)
}

/// Decodes a buffer holding exactly one event frame.
pub fn decode_frame(bytes: &[u8]) -> Result<Event, TransportError> {
    match Frame::decode(bytes)? {
        Frame::Event(e) => Ok(e),
        Frame::Control { .. } => Err(malformed("expected an event frame, found a termination frame")),
    }
}

fn encode_control(source: usize, message: &Control) -> Vec<u8> {
    let (code, round, deficit, fired) = match *message {
        Control::Token(t) => (
            match t.color {
                TokenColor::White => 0,
                TokenColor::Black => 1,
            },
            t.round,
            t.global_deficit,
            t.fired_total as i64,
        ),
        Control::Terminate { round } => (2, round, 0, 0),
        Control::Goodbye => (3, 0, 0, 0),
    };
    let mut out = Vec::with_capacity(HEADER_LEN + 24);
    write_header(&mut out, KIND_TERMINATION, source, round, false, PayloadKind::Long, 0, 3);
    for v in [code, deficit, fired] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

struct Header {
    kind: u8,
    source: usize,
    sequence: u64,
    persistent: bool,
    payload_kind: PayloadKind,
    identifier_len: usize,
    element_count: usize,
}

impl Header {
    fn parse(bytes: &[u8]) -> Result<Header, TransportError> {
        if bytes.len() < HEADER_LEN {
            return Err(malformed(format!("truncated header: {} bytes", bytes.len())));
        }
        if bytes[0..2] != MAGIC {
            return Err(malformed(format!("bad magic {:02x}{:02x}", bytes[0], bytes[1])));
        }
        if bytes[2] != VERSION {
            return Err(malformed(format!("unsupported version {}", bytes[2])));
        }
        let kind = bytes[3];
        if kind != KIND_EVENT && kind != KIND_TERMINATION {
            return Err(malformed(format!("unknown frame kind {kind}")));
        }
        let persistent = match bytes[16] {
            0 => false,
            1 => true,
            b => return Err(malformed(format!("persistent flag {b} is not 0/1"))),
        };
        let payload_kind =
            PayloadKind::from_tag(bytes[17]).map_err(|e| malformed(e.to_string()))?;
        if payload_kind == PayloadKind::Address {
            return Err(TransportError::AddressNotSerializable);
        }
        Ok(Header {
            kind,
            source: u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize,
            sequence: u64::from_le_bytes(bytes[8..16].try_into().unwrap()),
            persistent,
            payload_kind,
            identifier_len: u16::from_le_bytes(bytes[18..20].try_into().unwrap()) as usize,
            element_count: u32::from_le_bytes(bytes[20..24].try_into().unwrap()) as usize,
        })
    }

    fn body_len(&self) -> Result<usize, TransportError> {
        self.element_count
            .checked_mul(self.payload_kind.width())
            .and_then(|p| p.checked_add(self.identifier_len))
            .ok_or_else(|| malformed("frame length overflows"))
    }

    fn finish(self, body: &[u8]) -> Result<Frame, TransportError> {
        let (id, data) = body.split_at(self.identifier_len);
        if self.kind == KIND_TERMINATION {
            return self.finish_control(id, data);
        }
        let identifier =
            std::str::from_utf8(id).map_err(|_| malformed("identifier is not valid UTF-8"))?;
        let payload = Payload::from_raw(
            self.payload_kind,
            self.element_count,
            Bytes::copy_from_slice(data),
        )
        .map_err(|e| malformed(e.to_string()))?;
        let event = Event::new(self.source, identifier, payload, self.persistent, self.sequence)
            .map_err(|e| malformed(e.to_string()))?;
        Ok(Frame::Event(event))
    }

    fn finish_control(self, id: &[u8], data: &[u8]) -> Result<Frame, TransportError> {
        if !id.is_empty() || self.payload_kind != PayloadKind::Long || self.element_count != 3 {
            return Err(malformed("termination frame must carry three longs and no identifier"));
        }
        let word = |i: usize| i64::from_le_bytes(data[i * 8..i * 8 + 8].try_into().unwrap());
        let (code, deficit, fired) = (word(0), word(1), word(2));
        let message = match code {
            0 | 1 => Control::Token(TerminationToken {
                color: if code == 0 {
                    TokenColor::White
                } else {
                    TokenColor::Black
                },
                global_deficit: deficit,
                fired_total: fired as u64,
                round: self.sequence,
            }),
            2 => Control::Terminate {
                round: self.sequence,
            },
            3 => Control::Goodbye,
            other => return Err(malformed(format!("unknown termination code {other}"))),
        };
        Ok(Frame::Control {
            source: self.source,
            message,
        })
    }
}

/// Reads one frame from a byte stream. `Ok(None)` means the stream ended
/// cleanly on a frame boundary.
pub fn read_frame(reader: &mut impl Read) -> Result<Option<Frame>, TransportError> {
    let mut header = [0u8; HEADER_LEN];
    let mut got = 0;
    while got < HEADER_LEN {
        match reader.read(&mut header[got..]) {
            Ok(0) if got == 0 => return Ok(None),
            Ok(0) => return Err(malformed("stream ended inside a frame header")),
            Ok(n) => got += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(TransportError::Io(e.to_string())),
        }
    }
    let parsed = Header::parse(&header)?;
    let mut body = vec![0u8; parsed.body_len()?];
    reader.read_exact(&mut body).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => malformed("stream ended inside a frame body"),
        _ => TransportError::Io(e.to_string()),
    })?;
    parsed.finish(&body).map(Some)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn int_event_layout() {
        let e = Event::new(2, "x", Payload::ints(&[33]), false, 5).unwrap();
        let bytes = encode_frame(&e).unwrap();
        // 24-byte header + 1 identifier byte + 4 payload bytes
        assert_eq!(bytes.len(), 29);
        assert_eq!(&bytes[0..4], &[0xED, 0xA7, 1, 0]);
        assert_eq!(&bytes[4..8], &2u32.to_le_bytes());
        assert_eq!(&bytes[8..16], &5u64.to_le_bytes());
        assert_eq!(bytes[16], 0);
        assert_eq!(bytes[17], 3);
        assert_eq!(&bytes[18..20], &1u16.to_le_bytes());
        assert_eq!(&bytes[20..24], &1u32.to_le_bytes());
        assert_eq!(bytes[24], b'x');
        assert_eq!(&bytes[25..29], &33i32.to_le_bytes());
        assert_eq!(decode_frame(&bytes).unwrap(), e);
    }

    #[test]
    fn none_payload_is_empty() {
        let e = Event::new(0, "event1", Payload::none(), true, 0).unwrap();
        let bytes = encode_frame(&e).unwrap();
        assert_eq!(bytes.len(), HEADER_LEN + 6);
        assert_eq!(decode_frame(&bytes).unwrap(), e);
    }

    #[test]
    fn rejects_bad_input() {
        let e = Event::new(0, "abc", Payload::longs(&[1, 2]), false, 0).unwrap();
        let good = encode_frame(&e).unwrap();
        assert!(matches!(decode_frame(&good[..good.len() - 1]), Err(TransportError::MalformedFrame(_))));
        assert!(matches!(decode_frame(&good[..10]), Err(TransportError::MalformedFrame(_))));
        let mut extra = good.clone();
        extra.push(0);
        assert!(decode_frame(&extra).is_err());
        let mut bad = good.clone();
        bad[0] = 0;
        assert!(decode_frame(&bad).is_err());
        let mut bad = good.clone();
        bad[2] = 9;
        assert!(decode_frame(&bad).is_err());
        let mut bad = good;
        bad[17] = 7;
        assert_eq!(decode_frame(&bad), Err(TransportError::AddressNotSerializable));
    }

    #[test]
    fn address_payload_not_encodable() {
        let e = Event::new(0, "data", Payload::address(std::sync::Arc::new(5u8)), false, 0).unwrap();
        assert_eq!(encode_frame(&e), Err(TransportError::AddressNotSerializable));
    }

    #[test]
    fn control_frames_round_trip() {
        for message in [
            Control::Token(TerminationToken {
                color: TokenColor::Black,
                global_deficit: -3,
                fired_total: 17,
                round: 9,
            }),
            Control::Terminate { round: 4 },
            Control::Goodbye,
        ] {
            let f = Frame::Control { source: 3, message };
            assert_eq!(Frame::decode(&f.encode().unwrap()).unwrap(), f);
        }
    }

    #[test]
    fn stream_reader_splits_frames() {
        let a = Frame::Event(Event::new(1, "a", Payload::doubles(&[1.5]), false, 0).unwrap());
        let b = Frame::Control {
            source: 1,
            message: Control::Goodbye,
        };
        let mut buf = a.encode().unwrap();
        buf.extend(b.encode().unwrap());
        let mut cur = std::io::Cursor::new(buf);
        assert_eq!(read_frame(&mut cur).unwrap(), Some(a));
        assert_eq!(read_frame(&mut cur).unwrap(), Some(b));
        assert_eq!(read_frame(&mut cur).unwrap(), None);
    }

    fn arb_payload() -> impl Strategy<Value = Payload> {
        prop_oneof![
            Just(Payload::none()),
            proptest::collection::vec(any::<u8>(), 0..40).prop_map(|v| Payload::bytes(&v)),
            proptest::collection::vec(any::<bool>(), 0..40).prop_map(|v| Payload::bools(&v)),
            proptest::collection::vec(any::<i32>(), 0..40).prop_map(|v| Payload::ints(&v)),
            proptest::collection::vec(any::<i64>(), 0..40).prop_map(|v| Payload::longs(&v)),
            proptest::collection::vec(any::<f32>(), 0..40).prop_map(|v| Payload::floats(&v)),
            proptest::collection::vec(any::<f64>(), 0..40).prop_map(|v| Payload::doubles(&v)),
        ]
    }

    proptest! {
        #[test]
        fn event_round_trip(
            src in 0usize..1 << 20,
            id in "[a-zA-Z0-9_é]{1,24}",
            payload in arb_payload(),
            persistent in any::<bool>(),
            seq in any::<u64>(),
        ) {
            let e = Event::new(src, id.as_str(), payload, persistent, seq).unwrap();
            let bytes = encode_frame(&e).unwrap();
            prop_assert_eq!(bytes.len(), HEADER_LEN + id.len() + e.data().len());
            let back = decode_frame(&bytes).unwrap();
            prop_assert_eq!(encode_frame(&back).unwrap(), bytes);
            prop_assert_eq!(back, e);
        }
    }
}

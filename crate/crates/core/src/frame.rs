//! Wire format of the five basketball-routing messages.
//!
//! Every field is 16 bits wide except `hopCount`, which is 32 bits. Fields
//! are written big-endian, preceded by a 16-bit message type code:
//!
//! ```text
//! SrcBcast  | type | broadcastNodeID |                                      4 bytes
//! DstBcast  | type | broadcastNodeID |                                      4 bytes
//! Response  | type | broadcastNodeID | responseNodeID | dstRSSI |           8 bytes
//! Routing   | type | sourceNodeID | destNodeID | sendNodeID | recvNodeID |
//!           | hopCount (32) |                                              14 bytes
//! Ack       | type | responseNodeID |                                       4 bytes
//! ```
//!
//! Type codes 1..=5 and the byte order are conventions of this crate; the
//! message layout itself carries no sequence number.

use std::fmt;

use thiserror::Error;

/// A 16-bit node address.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, serde::Serialize, serde::Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub u16);

impl NodeId {
    /// Reserved broadcast address; never assigned to a node.
    pub const BROADCAST: NodeId = NodeId(u16::MAX);

    pub fn is_broadcast(self) -> bool {
        self == Self::BROADCAST
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Received signal strength in whole dBm. Larger is stronger.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Rssi(pub i16);

impl Rssi {
    pub fn dbm(self) -> f64 {
        f64::from(self.0)
    }

    /// Rounds a real-valued dBm figure to the nearest whole dBm, saturating
    /// at the 16-bit range.
    pub fn from_dbm(dbm: f64) -> Rssi {
        let r = dbm.round();
        Rssi(r.clamp(f64::from(i16::MIN), f64::from(i16::MAX)) as i16)
    }

    pub fn offset(self, db: i16) -> Rssi {
        Rssi(self.0.saturating_add(db))
    }
}

impl fmt::Display for Rssi {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} dBm", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MessageType {
    SrcBcast,
    DstBcast,
    Response,
    Routing,
    Ack,
}

impl MessageType {
    pub const ALL: [MessageType; 5] = [
        MessageType::SrcBcast,
        MessageType::DstBcast,
        MessageType::Response,
        MessageType::Routing,
        MessageType::Ack,
    ];

    pub fn code(self) -> u16 {
        match self {
            MessageType::SrcBcast => 1,
            MessageType::DstBcast => 2,
            MessageType::Response => 3,
            MessageType::Routing => 4,
            MessageType::Ack => 5,
        }
    }

    pub fn from_code(code: u16) -> Option<MessageType> {
        Self::ALL.into_iter().find(|t| t.code() == code)
    }

    /// Fixed encoded length in bytes, type field included.
    pub fn wire_len(self) -> usize {
        match self {
            MessageType::SrcBcast | MessageType::DstBcast | MessageType::Ack => 4,
            MessageType::Response => 8,
            MessageType::Routing => 14,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            MessageType::SrcBcast => "SrcBcast",
            MessageType::DstBcast => "DstBcast",
            MessageType::Response => "Response",
            MessageType::Routing => "Routing",
            MessageType::Ack => "Ack",
        }
    }
}

impl fmt::Display for MessageType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Frame {
    /// Relay solicitation (RTS).
    SrcBcast { broadcast: NodeId },
    /// Destination location beacon.
    DstBcast { broadcast: NodeId },
    /// A candidate relay answering an RTS.
    Response {
        broadcast: NodeId,
        responder: NodeId,
        dst_rssi: Rssi,
    },
    /// Data.
    Routing {
        source: NodeId,
        dest: NodeId,
        send: NodeId,
        recv: NodeId,
        hop_count: u32,
    },
    /// Acknowledges a data frame.
    Ack { responder: NodeId },
}

impl Frame {
    pub fn message_type(&self) -> MessageType {
        match self {
            Frame::SrcBcast { .. } => MessageType::SrcBcast,
            Frame::DstBcast { .. } => MessageType::DstBcast,
            Frame::Response { .. } => MessageType::Response,
            Frame::Routing { .. } => MessageType::Routing,
            Frame::Ack { .. } => MessageType::Ack,
        }
    }

    pub fn encoded_len(&self) -> usize {
        self.message_type().wire_len()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.encoded_len());
        out.extend_from_slice(&self.message_type().code().to_be_bytes());
        match *self {
            Frame::SrcBcast { broadcast } | Frame::DstBcast { broadcast } => {
                out.extend_from_slice(&broadcast.0.to_be_bytes());
            }
            Frame::Response {
                broadcast,
                responder,
                dst_rssi,
            } => {
                out.extend_from_slice(&broadcast.0.to_be_bytes());
                out.extend_from_slice(&responder.0.to_be_bytes());
                out.extend_from_slice(&dst_rssi.0.to_be_bytes());
            }
            Frame::Routing {
                source,
                dest,
                send,
                recv,
                hop_count,
            } => {
                for id in [source, dest, send, recv] {
                    out.extend_from_slice(&id.0.to_be_bytes());
                }
                out.extend_from_slice(&hop_count.to_be_bytes());
            }
            Frame::Ack { responder } => {
                out.extend_from_slice(&responder.0.to_be_bytes());
            }
        }
        debug_assert_eq!(out.len(), self.encoded_len());
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Frame, DecodeError> {
        if bytes.len() < 2 {
            return Err(DecodeError::TruncatedFrame {
                expected: 2,
                actual: bytes.len(),
            });
        }
        let code = u16::from_be_bytes([bytes[0], bytes[1]]);
        let ty = MessageType::from_code(code).ok_or(DecodeError::UnknownType(code))?;
        let expected = ty.wire_len();
        if bytes.len() < expected {
            return Err(DecodeError::TruncatedFrame {
                expected,
                actual: bytes.len(),
            });
        }
        if bytes.len() > expected {
            return Err(DecodeError::TrailingBytes {
                expected,
                actual: bytes.len(),
            });
        }

        let word = |i: usize| u16::from_be_bytes([bytes[2 + 2 * i], bytes[3 + 2 * i]]);
        let id = |i: usize| NodeId(word(i));
        Ok(match ty {
            MessageType::SrcBcast => Frame::SrcBcast { broadcast: id(0) },
            MessageType::DstBcast => Frame::DstBcast { broadcast: id(0) },
            MessageType::Response => Frame::Response {
                broadcast: id(0),
                responder: id(1),
                dst_rssi: Rssi(word(2) as i16),
            },
            MessageType::Routing => Frame::Routing {
                source: id(0),
                dest: id(1),
                send: id(2),
                recv: id(3),
                hop_count: u32::from_be_bytes([bytes[10], bytes[11], bytes[12], bytes[13]]),
            },
            MessageType::Ack => Frame::Ack { responder: id(0) },
        })
    }
}

/// Free-function form of [`Frame::encode`].
pub fn encode_frame(frame: &Frame) -> Vec<u8> {
    frame.encode()
}

/// Free-function form of [`Frame::decode`].
pub fn decode_frame(bytes: &[u8]) -> Result<Frame, DecodeError> {
    Frame::decode(bytes)
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DecodeError {
    #[error("unknown message type code {0}")]
    UnknownType(u16),
    #[error("truncated frame: need {expected} bytes, got {actual}")]
    TruncatedFrame { expected: usize, actual: usize },
    #[error("trailing bytes: frame is {expected} bytes, got {actual}")]
    TrailingBytes { expected: usize, actual: usize },
}

//! Active-message byte format and fixed-MTU packetization.
//!
//! Every message starts with a 96-byte little-endian header: a 32-byte
//! fixed part followed by a 64-byte region holding up to sixteen `u32`
//! arguments (unused slots are zero). The payload follows the header.
//!
//! ```text
//!  0  version u8          1  kind u8        2  variant u8     3  opcode u8
//!  4  src u16             6  dst u16        8  arg_count u8   9  flags u8
//! 10  reserved u16       12  payload_len u32
//! 16  dest_offset u64    24  token u64
//! 32  args [u32; 16]
//! ```
//!
//! A message is cut into packets of at most `mtu` body bytes. Each packet
//! carries 18 bytes of framing (`seq u64, index u32, count u32,
//! frag_len u16`) when it is serialized onto a byte stream.

use bytes::{Buf, BufMut, Bytes, BytesMut};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::addressing::NodeId;

pub const WIRE_VERSION: u8 = 0x01;
pub const HEADER_LEN: usize = 96;
pub const MAX_ARGS: usize = 16;
pub const PACKET_FRAMING_LEN: usize = 18;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum WireError {
    #[error("{0} arguments exceed the limit of 16")]
    TooManyArgs(usize),
    #[error("header declares {declared} payload bytes but {actual} were supplied")]
    PayloadMismatch { declared: u32, actual: usize },
    #[error("short messages cannot carry a payload")]
    ShortWithPayload,
    #[error("input of {0} bytes is too short")]
    Truncated(usize),
    #[error("unsupported wire version {0:#04x}")]
    BadVersion(u8),
    #[error("invalid {field} value {value}")]
    BadField { field: &'static str, value: u8 },
    #[error("mtu of {0} bytes cannot hold the 96-byte header")]
    MtuTooSmall(usize),
    #[error("mtu of {0} bytes exceeds the 16-bit fragment length")]
    MtuTooLarge(usize),
    #[error("expected packet {expected} of seq {seq}, got {got}")]
    GapDetected { seq: u64, expected: u32, got: u32 },
    #[error("packet of seq {got} interleaved into seq {current}")]
    MixedSeq { current: u64, got: u64 },
    #[error("no packets to reassemble")]
    Empty,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MessageKind {
    Request,
    Reply,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    /// Arguments only.
    Short,
    /// Payload lands in the receiver's private scratch buffer.
    Medium,
    /// Payload lands at `dest_offset` in the receiver's shared segment.
    Long,
}

/// Binds a reply to its request: the requesting node in the top 16 bits and
/// a 48-bit per-node counter below.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Token(pub u64);

impl Token {
    const COUNTER_BITS: u32 = 48;

    pub fn new(node: NodeId, counter: u64) -> Self {
        Token(((node.0 as u64) << Self::COUNTER_BITS) | (counter & ((1 << Self::COUNTER_BITS) - 1)))
    }

    pub fn node(self) -> NodeId {
        NodeId((self.0 >> Self::COUNTER_BITS) as u16)
    }

    pub fn counter(self) -> u64 {
        self.0 & ((1 << Self::COUNTER_BITS) - 1)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MessageHeader {
    pub version: u8,
    pub kind: MessageKind,
    pub variant: Variant,
    pub opcode: u8,
    pub src: NodeId,
    pub dst: NodeId,
    pub flags: u8,
    pub payload_len: u32,
    /// Only meaningful for [`Variant::Long`]; zero otherwise.
    pub dest_offset: u64,
    pub token: Token,
    pub args: Vec<u32>,
}

impl MessageHeader {
    pub fn new(kind: MessageKind, variant: Variant, opcode: u8, src: NodeId, dst: NodeId) -> Self {
        MessageHeader {
            version: WIRE_VERSION,
            kind,
            variant,
            opcode,
            src,
            dst,
            flags: 0,
            payload_len: 0,
            dest_offset: 0,
            token: Token::default(),
            args: Vec::new(),
        }
    }

    pub fn arg_count(&self) -> usize {
        self.args.len()
    }

    pub fn arg(&self, i: usize) -> u32 {
        self.args.get(i).copied().unwrap_or(0)
    }

    /// Total encoded length of a message with this header.
    pub fn message_len(&self) -> usize {
        HEADER_LEN + self.payload_len as usize
    }
}

fn kind_code(kind: MessageKind) -> u8 {
    match kind {
        MessageKind::Request => 0,
        MessageKind::Reply => 1,
    }
}

fn variant_code(variant: Variant) -> u8 {
    match variant {
        Variant::Short => 0,
        Variant::Medium => 1,
        Variant::Long => 2,
    }
}

pub fn encode_message(header: &MessageHeader, payload: &[u8]) -> Result<Bytes, WireError> {
    if header.args.len() > MAX_ARGS {
        return Err(WireError::TooManyArgs(header.args.len()));
    }
    if header.payload_len as usize != payload.len() {
        return Err(WireError::PayloadMismatch {
            declared: header.payload_len,
            actual: payload.len(),
        });
    }
    if header.variant == Variant::Short && !payload.is_empty() {
        return Err(WireError::ShortWithPayload);
    }

    let mut buf = BytesMut::with_capacity(HEADER_LEN + payload.len());
    buf.put_u8(header.version);
    buf.put_u8(kind_code(header.kind));
    buf.put_u8(variant_code(header.variant));
    buf.put_u8(header.opcode);
    buf.put_u16_le(header.src.0);
    buf.put_u16_le(header.dst.0);
    buf.put_u8(header.args.len() as u8);
    buf.put_u8(header.flags);
    buf.put_u16_le(0);
    buf.put_u32_le(header.payload_len);
    buf.put_u64_le(header.dest_offset);
    buf.put_u64_le(header.token.0);
    for i in 0..MAX_ARGS {
        buf.put_u32_le(header.arg(i));
    }
    debug_assert_eq!(buf.len(), HEADER_LEN);
    buf.put_slice(payload);
    Ok(buf.freeze())
}

/// Parses a header and returns it with the payload bytes that follow.
pub fn decode_message(bytes: &[u8]) -> Result<(MessageHeader, Bytes), WireError> {
    let (header, payload) = decode_shared(Bytes::copy_from_slice(bytes))?;
    Ok((header, payload))
}

fn decode_shared(bytes: Bytes) -> Result<(MessageHeader, Bytes), WireError> {
    if bytes.len() < HEADER_LEN {
        return Err(WireError::Truncated(bytes.len()));
    }
    let mut cur = &bytes[..HEADER_LEN];
    let version = cur.get_u8();
    if version != WIRE_VERSION {
        return Err(WireError::BadVersion(version));
    }
    let kind = match cur.get_u8() {
        0 => MessageKind::Request,
        1 => MessageKind::Reply,
        v => return Err(WireError::BadField { field: "kind", value: v }),
    };
    let variant = match cur.get_u8() {
        0 => Variant::Short,
        1 => Variant::Medium,
        2 => Variant::Long,
        v => return Err(WireError::BadField { field: "variant", value: v }),
    };
    let opcode = cur.get_u8();
    let src = NodeId(cur.get_u16_le());
    let dst = NodeId(cur.get_u16_le());
    let arg_count = cur.get_u8() as usize;
    if arg_count > MAX_ARGS {
        return Err(WireError::TooManyArgs(arg_count));
    }
    let flags = cur.get_u8();
    let _reserved = cur.get_u16_le();
    let payload_len = cur.get_u32_le();
    let dest_offset = cur.get_u64_le();
    let token = Token(cur.get_u64_le());
    let mut args = Vec::with_capacity(arg_count);
    for i in 0..MAX_ARGS {
        let a = cur.get_u32_le();
        if i < arg_count {
            args.push(a);
        }
    }
    if variant == Variant::Short && payload_len != 0 {
        return Err(WireError::ShortWithPayload);
    }
    let total = HEADER_LEN + payload_len as usize;
    if bytes.len() < total {
        return Err(WireError::Truncated(bytes.len()));
    }
    let header = MessageHeader {
        version,
        kind,
        variant,
        opcode,
        src,
        dst,
        flags,
        payload_len,
        dest_offset,
        token,
        args,
    };
    Ok((header, bytes.slice(HEADER_LEN..total)))
}

/// One link-level transfer unit.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Packet {
    pub seq: u64,
    pub index: u32,
    pub count: u32,
    pub body: Bytes,
}

impl Packet {
    pub fn frag_len(&self) -> u16 {
        self.body.len() as u16
    }

    pub fn is_first(&self) -> bool {
        self.index == 0
    }

    pub fn is_last(&self) -> bool {
        self.index + 1 == self.count
    }

    /// Serializes framing plus body, as carried by stream transports.
    pub fn to_bytes(&self) -> Bytes {
        let mut buf = BytesMut::with_capacity(PACKET_FRAMING_LEN + self.body.len());
        buf.put_u64_le(self.seq);
        buf.put_u32_le(self.index);
        buf.put_u32_le(self.count);
        buf.put_u16_le(self.frag_len());
        buf.put_slice(&self.body);
        buf.freeze()
    }

    pub fn from_bytes(bytes: Bytes) -> Result<Packet, WireError> {
        if bytes.len() < PACKET_FRAMING_LEN {
            return Err(WireError::Truncated(bytes.len()));
        }
        let mut cur = &bytes[..PACKET_FRAMING_LEN];
        let seq = cur.get_u64_le();
        let index = cur.get_u32_le();
        let count = cur.get_u32_le();
        let frag_len = cur.get_u16_le() as usize;
        if bytes.len() < PACKET_FRAMING_LEN + frag_len {
            return Err(WireError::Truncated(bytes.len()));
        }
        if index >= count {
            return Err(WireError::GapDetected { seq, expected: count.saturating_sub(1), got: index });
        }
        let body = bytes.slice(PACKET_FRAMING_LEN..PACKET_FRAMING_LEN + frag_len);
        Ok(Packet { seq, index, count, body })
    }
}

/// Number of packets needed for a message of `message_len` bytes.
pub fn packet_count(message_len: usize, mtu: usize) -> usize {
    message_len.div_ceil(mtu).max(1)
}

pub fn check_mtu(mtu: usize) -> Result<(), WireError> {
    if mtu < HEADER_LEN {
        Err(WireError::MtuTooSmall(mtu))
    } else if mtu > u16::MAX as usize {
        Err(WireError::MtuTooLarge(mtu))
    } else {
        Ok(())
    }
}

pub fn packetize(message: &Bytes, seq: u64, mtu: usize) -> Result<Vec<Packet>, WireError> {
    check_mtu(mtu)?;
    let count = packet_count(message.len(), mtu);
    let packets = (0..count)
        .map(|i| {
            let start = i * mtu;
            let end = (start + mtu).min(message.len());
            Packet { seq, index: i as u32, count: count as u32, body: message.slice(start..end) }
        })
        .collect();
    Ok(packets)
}

/// Incremental inverse of [`packetize`] for one in-order packet stream.
#[derive(Debug, Default)]
pub struct Reassembler {
    current: Option<(u64, u32, BytesMut)>,
}

impl Reassembler {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn in_progress(&self) -> bool {
        self.current.is_some()
    }

    /// Feeds the next packet; returns the message once its last packet lands.
    pub fn push(&mut self, packet: Packet) -> Result<Option<(MessageHeader, Bytes)>, WireError> {
        match &mut self.current {
            None => {
                if packet.index != 0 {
                    return Err(WireError::GapDetected { seq: packet.seq, expected: 0, got: packet.index });
                }
                if packet.count == 1 {
                    return decode_shared(packet.body).map(Some);
                }
                let mut buf = BytesMut::with_capacity(packet.body.len() * packet.count as usize);
                buf.extend_from_slice(&packet.body);
                self.current = Some((packet.seq, 1, buf));
                Ok(None)
            }
            Some((seq, next, buf)) => {
                if packet.seq != *seq {
                    return Err(WireError::MixedSeq { current: *seq, got: packet.seq });
                }
                if packet.index != *next {
                    return Err(WireError::GapDetected { seq: *seq, expected: *next, got: packet.index });
                }
                buf.extend_from_slice(&packet.body);
                *next += 1;
                if packet.is_last() {
                    let (_, _, buf) = self.current.take().expect("in-progress message");
                    decode_shared(buf.freeze()).map(Some)
                } else {
                    Ok(None)
                }
            }
        }
    }
}

/// Reassembles exactly one message from its packets in arrival order.
pub fn reassemble<I>(packets: I) -> Result<(MessageHeader, Bytes), WireError>
where
    I: IntoIterator<Item = Packet>,
{
    let mut r = Reassembler::new();
    let mut last_seq = None;
    for p in packets {
        last_seq = Some(p.seq);
        if let Some(msg) = r.push(p)? {
            return Ok(msg);
        }
    }
    match (r.current.as_ref(), last_seq) {
        (Some((seq, next, _)), _) => Err(WireError::GapDetected { seq: *seq, expected: *next, got: u32::MAX }),
        (None, _) => Err(WireError::Empty),
    }
}

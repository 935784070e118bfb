//! Frame encoding, decoding and classification.
//!
//! Type codes follow the QUIC transport registry. A STREAM frame's type byte
//! is `0x08 | OFF << 2 | LEN << 1 | FIN`.

use std::ops::RangeInclusive;

use thiserror::Error;

use crate::codec::{put_varint, ConnectionId, Reader, VarInt};
use crate::streams::{Dir, StreamId};

pub mod ty {
    pub const PADDING: u64 = 0x00;
    pub const PING: u64 = 0x01;
    pub const ACK: u64 = 0x02;
    pub const ACK_ECN: u64 = 0x03;
    pub const RESET_STREAM: u64 = 0x04;
    pub const STOP_SENDING: u64 = 0x05;
    pub const CRYPTO: u64 = 0x06;
    pub const NEW_TOKEN: u64 = 0x07;
    pub const STREAM: u64 = 0x08;
    pub const MAX_DATA: u64 = 0x10;
    pub const MAX_STREAM_DATA: u64 = 0x11;
    pub const MAX_STREAMS_BIDI: u64 = 0x12;
    pub const MAX_STREAMS_UNI: u64 = 0x13;
    pub const NEW_CONNECTION_ID: u64 = 0x18;
    pub const RETIRE_CONNECTION_ID: u64 = 0x19;
    pub const PATH_CHALLENGE: u64 = 0x1a;
    pub const PATH_RESPONSE: u64 = 0x1b;
    pub const CONNECTION_CLOSE: u64 = 0x1c;
    pub const CONNECTION_CLOSE_APP: u64 = 0x1d;
    pub const DATAGRAM: u64 = 0x30;
    pub const DATAGRAM_LEN: u64 = 0x31;
}

const STREAM_OFF: u8 = 0x04;
const STREAM_LEN: u8 = 0x02;
const STREAM_FIN: u8 = 0x01;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FrameError {
    #[error("unknown frame type {0:#x}")]
    UnknownFrameType(u64),
    #[error("malformed frame of type {frame_type:#x}: {reason}")]
    MalformedFrame { frame_type: u64, reason: String },
}

impl FrameError {
    fn malformed(frame_type: u64, reason: impl Into<String>) -> Self {
        FrameError::MalformedFrame {
            frame_type,
            reason: reason.into(),
        }
    }

    pub fn frame_type(&self) -> u64 {
        match self {
            FrameError::UnknownFrameType(t) => *t,
            FrameError::MalformedFrame { frame_type, .. } => *frame_type,
        }
    }
}

/// Acknowledged packet numbers as inclusive ranges, largest first.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AckFrame {
    /// Ack delay in units of `2^ack_delay_exponent` microseconds.
    pub delay: u64,
    pub ranges: Vec<RangeInclusive<u64>>,
}

impl AckFrame {
    pub fn largest(&self) -> u64 {
        *self.ranges[0].end()
    }

    pub fn contains(&self, pn: u64) -> bool {
        self.ranges.iter().any(|r| r.contains(&pn))
    }

    /// Every acknowledged packet number, smallest first.
    pub fn packet_numbers(&self) -> impl Iterator<Item = u64> + '_ {
        self.ranges.iter().rev().flat_map(|r| r.clone())
    }

    fn encode(&self, out: &mut Vec<u8>) {
        let first = &self.ranges[0];
        put_varint(out, ty::ACK);
        put_varint(out, *first.end());
        put_varint(out, self.delay);
        put_varint(out, self.ranges.len() as u64 - 1);
        put_varint(out, first.end() - first.start());
        let mut smallest = *first.start();
        for r in &self.ranges[1..] {
            put_varint(out, smallest - r.end() - 2);
            put_varint(out, r.end() - r.start());
            smallest = *r.start();
        }
    }

    /// Wire size of an ACK frame holding `ranges`.
    pub fn encoded_len(delay: u64, ranges: &[RangeInclusive<u64>]) -> usize {
        let vl = |v: u64| VarInt::from_u64(v).map_or(8, |v| v.size());
        let first = &ranges[0];
        let mut n = 1 + vl(*first.end()) + vl(delay) + vl(ranges.len() as u64 - 1)
            + vl(first.end() - first.start());
        let mut smallest = *first.start();
        for r in &ranges[1..] {
            n += vl(smallest - r.end() - 2) + vl(r.end() - r.start());
            smallest = *r.start();
        }
        n
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StreamFrame {
    pub id: StreamId,
    pub offset: u64,
    pub fin: bool,
    pub data: Vec<u8>,
    /// Whether the Length field is present. Without it the data runs to the
    /// end of the packet, so only the last frame of a payload may omit it.
    pub has_length: bool,
}

impl StreamFrame {
    /// Bytes taken by everything except the data.
    pub fn header_len(id: StreamId, offset: u64, data_len: usize, has_length: bool) -> usize {
        let vl = |v: u64| VarInt::from_u64(v).map_or(8, |v| v.size());
        1 + vl(id.0)
            + if offset > 0 { vl(offset) } else { 0 }
            + if has_length { vl(data_len as u64) } else { 0 }
    }

    pub fn end(&self) -> u64 {
        self.offset + self.data.len() as u64
    }

    pub fn type_byte(&self) -> u8 {
        let mut t = ty::STREAM as u8;
        if self.offset > 0 {
            t |= STREAM_OFF;
        }
        if self.has_length {
            t |= STREAM_LEN;
        }
        if self.fin {
            t |= STREAM_FIN;
        }
        t
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CloseLayer {
    /// A transport error; carries the type of the frame that triggered it.
    Transport { frame_type: u64 },
    Application,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConnectionClose {
    pub layer: CloseLayer,
    pub error_code: u64,
    pub reason: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Frame {
    /// A run of PADDING bytes.
    Padding(usize),
    Ping,
    Ack(AckFrame),
    ResetStream {
        id: StreamId,
        error_code: u64,
        final_size: u64,
    },
    StopSending {
        id: StreamId,
        error_code: u64,
    },
    Crypto {
        offset: u64,
        data: Vec<u8>,
    },
    NewToken(Vec<u8>),
    Stream(StreamFrame),
    MaxData(u64),
    MaxStreamData {
        id: StreamId,
        limit: u64,
    },
    /// Cumulative count of streams of `dir` the peer may open.
    MaxStreams {
        dir: Dir,
        limit: u64,
    },
    NewConnectionId {
        seq: u64,
        retire_prior_to: u64,
        cid: ConnectionId,
        reset_token: [u8; 16],
    },
    RetireConnectionId(u64),
    PathChallenge([u8; 8]),
    PathResponse([u8; 8]),
    ConnectionClose(ConnectionClose),
    Datagram(Vec<u8>),
}

impl Frame {
    pub fn name(&self) -> &'static str {
        match self {
            Frame::Padding(_) => "padding",
            Frame::Ping => "ping",
            Frame::Ack(_) => "ack",
            Frame::ResetStream { .. } => "reset_stream",
            Frame::StopSending { .. } => "stop_sending",
            Frame::Crypto { .. } => "crypto",
            Frame::NewToken(_) => "new_token",
            Frame::Stream(_) => "stream",
            Frame::MaxData(_) => "max_data",
            Frame::MaxStreamData { .. } => "max_stream_data",
            Frame::MaxStreams { .. } => "max_streams",
            Frame::NewConnectionId { .. } => "new_connection_id",
            Frame::RetireConnectionId(_) => "retire_connection_id",
            Frame::PathChallenge(_) => "path_challenge",
            Frame::PathResponse(_) => "path_response",
            Frame::ConnectionClose(_) => "connection_close",
            Frame::Datagram(_) => "datagram",
        }
    }

    /// False exactly for PADDING, ACK and CONNECTION_CLOSE.
    pub fn is_ack_eliciting(&self) -> bool {
        !matches!(
            self,
            Frame::Padding(_) | Frame::Ack(_) | Frame::ConnectionClose(_)
        )
    }

    /// True exactly for PATH_CHALLENGE, PATH_RESPONSE, NEW_CONNECTION_ID and
    /// PADDING; every other frame is non-probing.
    pub fn is_probing(&self) -> bool {
        matches!(
            self,
            Frame::PathChallenge(_)
                | Frame::PathResponse(_)
                | Frame::NewConnectionId { .. }
                | Frame::Padding(_)
        )
    }

    /// Charged against connection and stream flow-control credit.
    pub fn is_flow_controlled(&self) -> bool {
        matches!(self, Frame::Stream(_))
    }

    /// Whether the information in this frame is re-sent when its packet is
    /// declared lost. ACK state regenerates, PADDING is filler, DATAGRAM is
    /// unreliable by definition and path probes carry fresh payloads.
    pub fn is_retransmittable(&self) -> bool {
        !matches!(
            self,
            Frame::Padding(_)
                | Frame::Ack(_)
                | Frame::Datagram(_)
                | Frame::PathChallenge(_)
                | Frame::PathResponse(_)
                | Frame::ConnectionClose(_)
        )
    }

    /// Packets carrying anything other than ACK and CONNECTION_CLOSE count
    /// towards bytes in flight.
    pub fn counts_in_flight(&self) -> bool {
        !matches!(self, Frame::Ack(_) | Frame::ConnectionClose(_))
    }

    pub fn encode(&self, out: &mut Vec<u8>) {
        match self {
            Frame::Padding(n) => out.resize(out.len() + n, 0),
            Frame::Ping => put_varint(out, ty::PING),
            Frame::Ack(ack) => ack.encode(out),
            Frame::ResetStream {
                id,
                error_code,
                final_size,
            } => {
                put_varint(out, ty::RESET_STREAM);
                put_varint(out, id.0);
                put_varint(out, *error_code);
                put_varint(out, *final_size);
            }
            Frame::StopSending { id, error_code } => {
                put_varint(out, ty::STOP_SENDING);
                put_varint(out, id.0);
                put_varint(out, *error_code);
            }
            Frame::Crypto { offset, data } => {
                put_varint(out, ty::CRYPTO);
                put_varint(out, *offset);
                put_varint(out, data.len() as u64);
                out.extend_from_slice(data);
            }
            Frame::NewToken(token) => {
                put_varint(out, ty::NEW_TOKEN);
                put_varint(out, token.len() as u64);
                out.extend_from_slice(token);
            }
            Frame::Stream(s) => {
                out.push(s.type_byte());
                put_varint(out, s.id.0);
                if s.offset > 0 {
                    put_varint(out, s.offset);
                }
                if s.has_length {
                    put_varint(out, s.data.len() as u64);
                }
                out.extend_from_slice(&s.data);
            }
            Frame::MaxData(v) => {
                put_varint(out, ty::MAX_DATA);
                put_varint(out, *v);
            }
            Frame::MaxStreamData { id, limit } => {
                put_varint(out, ty::MAX_STREAM_DATA);
                put_varint(out, id.0);
                put_varint(out, *limit);
            }
            Frame::MaxStreams { dir, limit } => {
                put_varint(
                    out,
                    match dir {
                        Dir::Bidi => ty::MAX_STREAMS_BIDI,
                        Dir::Uni => ty::MAX_STREAMS_UNI,
                    },
                );
                put_varint(out, *limit);
            }
            Frame::NewConnectionId {
                seq,
                retire_prior_to,
                cid,
                reset_token,
            } => {
                put_varint(out, ty::NEW_CONNECTION_ID);
                put_varint(out, *seq);
                put_varint(out, *retire_prior_to);
                out.push(cid.len() as u8);
                out.extend_from_slice(cid.as_bytes());
                out.extend_from_slice(reset_token);
            }
            Frame::RetireConnectionId(seq) => {
                put_varint(out, ty::RETIRE_CONNECTION_ID);
                put_varint(out, *seq);
            }
            Frame::PathChallenge(data) => {
                put_varint(out, ty::PATH_CHALLENGE);
                out.extend_from_slice(data);
            }
            Frame::PathResponse(data) => {
                put_varint(out, ty::PATH_RESPONSE);
                out.extend_from_slice(data);
            }
            Frame::ConnectionClose(c) => {
                match c.layer {
                    CloseLayer::Transport { frame_type } => {
                        put_varint(out, ty::CONNECTION_CLOSE);
                        put_varint(out, c.error_code);
                        put_varint(out, frame_type);
                    }
                    CloseLayer::Application => {
                        put_varint(out, ty::CONNECTION_CLOSE_APP);
                        put_varint(out, c.error_code);
                    }
                }
                put_varint(out, c.reason.len() as u64);
                out.extend_from_slice(&c.reason);
            }
            Frame::Datagram(data) => {
                put_varint(out, ty::DATAGRAM_LEN);
                put_varint(out, data.len() as u64);
                out.extend_from_slice(data);
            }
        }
    }

    pub fn encoded_len(&self) -> usize {
        match self {
            Frame::Padding(n) => *n,
            Frame::Stream(s) => {
                StreamFrame::header_len(s.id, s.offset, s.data.len(), s.has_length) + s.data.len()
            }
            Frame::Ack(a) => AckFrame::encoded_len(a.delay, &a.ranges),
            other => {
                let mut v = Vec::new();
                other.encode(&mut v);
                v.len()
            }
        }
    }
}

/// Encodes `frames` back to back.
pub fn encode_frames(frames: &[Frame]) -> Vec<u8> {
    let mut out = Vec::new();
    for f in frames {
        f.encode(&mut out);
    }
    out
}

pub fn encode_frame(frame: &Frame) -> Vec<u8> {
    let mut out = Vec::new();
    frame.encode(&mut out);
    out
}

/// Decodes a whole packet payload. Runs of PADDING collapse into a single
/// `Padding(count)` entry.
/// Like [`decode_frames`] but keeps each frame's offset in `payload`, and
/// reports the offset of the frame that failed to decode.
pub fn decode_frames_at(payload: &[u8]) -> Result<Vec<(usize, Frame)>, (usize, FrameError)> {
    let mut r = Reader::new(payload);
    let mut frames: Vec<(usize, Frame)> = Vec::new();
    while !r.is_empty() {
        let at = r.position();
        let frame = decode_one(&mut r).map_err(|e| (at, e))?;
        match (frames.last_mut(), &frame) {
            (Some((_, Frame::Padding(n))), Frame::Padding(m)) => *n += m,
            _ => frames.push((at, frame)),
        }
    }
    Ok(frames)
}

pub fn decode_frames(payload: &[u8]) -> Result<Vec<Frame>, FrameError> {
    let mut r = Reader::new(payload);
    let mut frames = Vec::new();
    while !r.is_empty() {
        let frame = decode_one(&mut r)?;
        match (frames.last_mut(), &frame) {
            (Some(Frame::Padding(n)), Frame::Padding(m)) => *n += m,
            _ => frames.push(frame),
        }
    }
    Ok(frames)
}

fn decode_one(r: &mut Reader<'_>) -> Result<Frame, FrameError> {
    let frame_type = r
        .varint()
        .map_err(|_| FrameError::malformed(0, "truncated frame type"))?;
    let bad = |reason: &str| FrameError::malformed(frame_type, reason);
    macro_rules! v {
        () => {
            r.varint().map_err(|_| bad("truncated field"))?
        };
    }
    macro_rules! bytes {
        ($n:expr) => {{
            let n = $n;
            if n > r.remaining() as u64 {
                return Err(bad("length exceeds payload"));
            }
            r.bytes(n as usize).map_err(|_| bad("truncated data"))?.to_vec()
        }};
    }
    let frame = match frame_type {
        ty::PADDING => {
            let mut n = 1;
            while r.peek_u8().ok() == Some(0) {
                r.u8().ok();
                n += 1;
            }
            Frame::Padding(n)
        }
        ty::PING => Frame::Ping,
        ty::ACK | ty::ACK_ECN => {
            let largest = v!();
            let delay = v!();
            let count = v!();
            let first = v!();
            if first > largest {
                return Err(bad("first ack range exceeds largest acknowledged"));
            }
            let mut ranges = vec![(largest - first)..=largest];
            let mut smallest = largest - first;
            // each additional range needs at least two bytes
            if count > r.remaining() as u64 / 2 {
                return Err(bad("ack range count exceeds payload"));
            }
            for _ in 0..count {
                let gap = v!();
                let len = v!();
                let end = smallest
                    .checked_sub(gap)
                    .and_then(|v| v.checked_sub(2))
                    .ok_or_else(|| bad("ack gap underflow"))?;
                let start = end.checked_sub(len).ok_or_else(|| bad("ack range underflow"))?;
                ranges.push(start..=end);
                smallest = start;
            }
            if frame_type == ty::ACK_ECN {
                // ECN counts are read and discarded
                for _ in 0..3 {
                    v!();
                }
            }
            Frame::Ack(AckFrame { delay, ranges })
        }
        ty::RESET_STREAM => Frame::ResetStream {
            id: StreamId(v!()),
            error_code: v!(),
            final_size: v!(),
        },
        ty::STOP_SENDING => Frame::StopSending {
            id: StreamId(v!()),
            error_code: v!(),
        },
        ty::CRYPTO => {
            let offset = v!();
            let len = v!();
            let data = bytes!(len);
            if offset + data.len() as u64 > VarInt::MAX.into_inner() {
                return Err(bad("crypto data beyond maximum offset"));
            }
            Frame::Crypto { offset, data }
        }
        ty::NEW_TOKEN => {
            let len = v!();
            if len == 0 {
                return Err(bad("empty token"));
            }
            Frame::NewToken(bytes!(len))
        }
        0x08..=0x0f => {
            let bits = frame_type as u8;
            let id = StreamId(v!());
            let offset = if bits & STREAM_OFF != 0 { v!() } else { 0 };
            let has_length = bits & STREAM_LEN != 0;
            let data = if has_length {
                bytes!(v!())
            } else {
                r.bytes(r.remaining()).expect("remaining").to_vec()
            };
            if offset + data.len() as u64 > VarInt::MAX.into_inner() {
                return Err(bad("stream data beyond maximum offset"));
            }
            Frame::Stream(StreamFrame {
                id,
                offset,
                fin: bits & STREAM_FIN != 0,
                data,
                has_length,
            })
        }
        ty::MAX_DATA => Frame::MaxData(v!()),
        ty::MAX_STREAM_DATA => Frame::MaxStreamData {
            id: StreamId(v!()),
            limit: v!(),
        },
        ty::MAX_STREAMS_BIDI | ty::MAX_STREAMS_UNI => {
            let limit = v!();
            if limit > 1 << 60 {
                return Err(bad("stream limit above 2^60"));
            }
            Frame::MaxStreams {
                dir: if frame_type == ty::MAX_STREAMS_BIDI {
                    Dir::Bidi
                } else {
                    Dir::Uni
                },
                limit,
            }
        }
        ty::NEW_CONNECTION_ID => {
            let seq = v!();
            let retire_prior_to = v!();
            if retire_prior_to > seq {
                return Err(bad("retire_prior_to exceeds sequence number"));
            }
            let len = r.u8().map_err(|_| bad("truncated cid length"))? as usize;
            if !(1..=20).contains(&len) {
                return Err(bad("connection id length out of range"));
            }
            let cid = ConnectionId::new(&bytes!(len as u64)).expect("length checked");
            let reset_token = r.array::<16>().map_err(|_| bad("truncated reset token"))?;
            Frame::NewConnectionId {
                seq,
                retire_prior_to,
                cid,
                reset_token,
            }
        }
        ty::RETIRE_CONNECTION_ID => Frame::RetireConnectionId(v!()),
        ty::PATH_CHALLENGE => {
            Frame::PathChallenge(r.array::<8>().map_err(|_| bad("challenge is 8 bytes"))?)
        }
        ty::PATH_RESPONSE => {
            Frame::PathResponse(r.array::<8>().map_err(|_| bad("response is 8 bytes"))?)
        }
        ty::CONNECTION_CLOSE | ty::CONNECTION_CLOSE_APP => {
            let error_code = v!();
            let layer = if frame_type == ty::CONNECTION_CLOSE {
                CloseLayer::Transport { frame_type: v!() }
            } else {
                CloseLayer::Application
            };
            let len = v!();
            Frame::ConnectionClose(ConnectionClose {
                layer,
                error_code,
                reason: bytes!(len),
            })
        }
        ty::DATAGRAM => Frame::Datagram(r.bytes(r.remaining()).expect("remaining").to_vec()),
        ty::DATAGRAM_LEN => {
            let len = v!();
            Frame::Datagram(bytes!(len))
        }
        other => return Err(FrameError::UnknownFrameType(other)),
    };
    Ok(frame)
}

//! Bit-exact wire encoding: variable-length integers, long and short packet
//! headers, packet number truncation and coalesced datagram splitting.

mod coalesce;
mod header;
mod packet_number;
mod varint;

pub use coalesce::split_coalesced;
pub use header::{
    Header, LongHeader, LongPacketType, PacketShell, RetryHeader, ShellKind, ShortHeader,
    TruncatedPn, VersionNegotiation,
};
pub use packet_number::{decode_packet_number, encode_packet_number, truncate_packet_number};
pub(crate) use packet_number::recover as recover_packet_number;
pub use varint::{decode_varint, encode_varint, VarInt};

use std::fmt;
use thiserror::Error;

/// QUIC version 1.
pub const VERSION_1: u32 = 0x0000_0001;
/// QUIC version 2.
pub const VERSION_2: u32 = 0x6b33_43cf;

/// Versions whose long-header wire image this crate understands.
pub fn is_known_version(v: u32) -> bool {
    v == VERSION_1 || v == VERSION_2
}

pub fn version_name(v: u32) -> String {
    match v {
        VERSION_1 => "v1".into(),
        VERSION_2 => "v2".into(),
        0 => "negotiation".into(),
        other => format!("{other:#010x}"),
    }
}

pub const MAX_CID_LEN: usize = 20;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CodecError {
    #[error("value {0} is outside the varint range")]
    Range(u64),
    #[error("truncated input at offset {offset}: {needed} more bytes required")]
    TruncatedInput { offset: usize, needed: usize },
    #[error("connection id of {0} bytes exceeds the 20 byte maximum")]
    CidTooLong(usize),
    #[error("fixed bit is not set")]
    FixedBitUnset,
    #[error("reserved header bits are set")]
    ReservedBits,
    #[error("malformed datagram: {0}")]
    MalformedDatagram(&'static str),
    #[error("unsupported version {0:#010x}")]
    UnsupportedVersion(u32),
}

pub type Result<T, E = CodecError> = std::result::Result<T, E>;

/// A connection identifier of 0 to 20 bytes.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct ConnectionId {
    len: u8,
    bytes: [u8; MAX_CID_LEN],
}

impl ConnectionId {
    pub const EMPTY: ConnectionId = ConnectionId { len: 0, bytes: [0; MAX_CID_LEN] };

    pub fn new(bytes: &[u8]) -> Result<Self> {
        if bytes.len() > MAX_CID_LEN {
            return Err(CodecError::CidTooLong(bytes.len()));
        }
        let mut cid = Self::EMPTY;
        cid.len = bytes.len() as u8;
        cid.bytes[..bytes.len()].copy_from_slice(bytes);
        Ok(cid)
    }

    /// Random id of `len` bytes (`len` is clamped to 20).
    pub fn random<R: rand::RngCore + ?Sized>(rng: &mut R, len: usize) -> Self {
        let mut cid = Self::EMPTY;
        cid.len = len.min(MAX_CID_LEN) as u8;
        rng.fill_bytes(&mut cid.bytes[..cid.len as usize]);
        cid
    }

    pub fn len(&self) -> usize {
        self.len as usize
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.bytes[..self.len as usize]
    }
}

impl fmt::Debug for ConnectionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", hex::encode(self.as_bytes()))
    }
}

impl fmt::Display for ConnectionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

/// Forward-only cursor over a byte slice.
#[derive(Debug, Clone)]
pub struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub fn position(&self) -> usize {
        self.pos
    }

    pub fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub fn is_empty(&self) -> bool {
        self.remaining() == 0
    }

    pub fn rest(&self) -> &'a [u8] {
        &self.buf[self.pos..]
    }

    fn need(&self, n: usize) -> Result<()> {
        if self.remaining() < n {
            Err(CodecError::TruncatedInput {
                offset: self.pos,
                needed: n - self.remaining(),
            })
        } else {
            Ok(())
        }
    }

    pub fn peek_u8(&self) -> Result<u8> {
        self.need(1)?;
        Ok(self.buf[self.pos])
    }

    pub fn u8(&mut self) -> Result<u8> {
        let b = self.peek_u8()?;
        self.pos += 1;
        Ok(b)
    }

    pub fn u16(&mut self) -> Result<u16> {
        let b = self.bytes(2)?;
        Ok(u16::from_be_bytes([b[0], b[1]]))
    }

    pub fn u24(&mut self) -> Result<u32> {
        let b = self.bytes(3)?;
        Ok(u32::from_be_bytes([0, b[0], b[1], b[2]]))
    }

    pub fn u32(&mut self) -> Result<u32> {
        let b = self.bytes(4)?;
        Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
    }

    pub fn u64(&mut self) -> Result<u64> {
        let b = self.bytes(8)?;
        Ok(u64::from_be_bytes(b.try_into().expect("8 bytes")))
    }

    pub fn bytes(&mut self, n: usize) -> Result<&'a [u8]> {
        self.need(n)?;
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    pub fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.bytes(N)?.try_into().expect("length checked"))
    }

    pub fn varint(&mut self) -> Result<u64> {
        let (v, n) = decode_varint(self.rest()).map_err(|e| match e {
            CodecError::TruncatedInput { needed, .. } => CodecError::TruncatedInput {
                offset: self.pos,
                needed,
            },
            other => other,
        })?;
        self.pos += n;
        Ok(v)
    }

    /// A length-prefixed (u8) connection id.
    pub fn cid(&mut self) -> Result<ConnectionId> {
        let len = self.u8()? as usize;
        if len > MAX_CID_LEN {
            return Err(CodecError::CidTooLong(len));
        }
        ConnectionId::new(self.bytes(len)?)
    }

    pub fn skip(&mut self, n: usize) -> Result<()> {
        self.bytes(n).map(|_| ())
    }
}

/// Appends `v` as a varint. Panics on values of 2^62 or more, which callers
/// never construct for wire fields.
pub fn put_varint(out: &mut Vec<u8>, v: u64) {
    VarInt::from_u64(v)
        .expect("wire integers are below 2^62")
        .encode(out);
}

pub(crate) fn put_cid(out: &mut Vec<u8>, cid: &ConnectionId) {
    out.push(cid.len() as u8);
    out.extend_from_slice(cid.as_bytes());
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cid_bounds() {
        assert!(ConnectionId::new(&[0; 20]).is_ok());
        assert_eq!(ConnectionId::new(&[0; 21]), Err(CodecError::CidTooLong(21)));
        let c = ConnectionId::new(&[0xab, 0xcd]).unwrap();
        assert_eq!(c.to_string(), "abcd");
    }

    #[test]
    fn reader_reports_offsets() {
        let mut r = Reader::new(&[1, 2, 3]);
        assert_eq!(r.u16().unwrap(), 0x0102);
        assert_eq!(
            r.u32(),
            Err(CodecError::TruncatedInput { offset: 2, needed: 3 })
        );
    }
}

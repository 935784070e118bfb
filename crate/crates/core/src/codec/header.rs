//! Long and short packet headers.
//!
//! ```text
//! Long:  1 F TT RR PP | Version (32) | DCID Len (8) | DCID | SCID Len (8) | SCID | ...
//! Short: 0 1 S RR K PP | DCID | Packet Number (8..32)
//! ```
//!
//! `F` is the fixed bit, `TT` the long packet type, `RR` reserved bits,
//! `PP` the packet number length minus one, `S` the spin bit and `K` the key
//! phase. The reserved and length bits are covered by header protection.

use super::{
    is_known_version, put_cid, put_varint, CodecError, ConnectionId, Reader, Result, VERSION_2,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LongPacketType {
    Initial,
    ZeroRtt,
    Handshake,
    Retry,
}

impl LongPacketType {
    /// The two type bits for this packet type under `version`.
    pub fn to_bits(self, version: u32) -> u8 {
        use LongPacketType::*;
        if version == VERSION_2 {
            match self {
                Retry => 0,
                Initial => 1,
                ZeroRtt => 2,
                Handshake => 3,
            }
        } else {
            match self {
                Initial => 0,
                ZeroRtt => 1,
                Handshake => 2,
                Retry => 3,
            }
        }
    }

    pub fn from_bits(bits: u8, version: u32) -> Self {
        use LongPacketType::*;
        let order = if version == VERSION_2 {
            [Retry, Initial, ZeroRtt, Handshake]
        } else {
            [Initial, ZeroRtt, Handshake, Retry]
        };
        order[(bits & 0b11) as usize]
    }

    pub fn name(self) -> &'static str {
        match self {
            LongPacketType::Initial => "initial",
            LongPacketType::ZeroRtt => "0rtt",
            LongPacketType::Handshake => "handshake",
            LongPacketType::Retry => "retry",
        }
    }
}

/// A packet number as it appears on the wire: the low `len` bytes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TruncatedPn {
    pub value: u32,
    pub len: u8,
}

impl TruncatedPn {
    pub fn write(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.value.to_be_bytes()[4 - self.len as usize..]);
    }
}

/// Initial, 0-RTT or Handshake header.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LongHeader {
    pub ty: LongPacketType,
    pub version: u32,
    pub dcid: ConnectionId,
    pub scid: ConnectionId,
    /// Only carried by Initial packets.
    pub token: Vec<u8>,
    /// Length of the packet number plus the protected payload.
    pub length: u64,
    pub pn: TruncatedPn,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RetryHeader {
    pub version: u32,
    pub dcid: ConnectionId,
    pub scid: ConnectionId,
    pub token: Vec<u8>,
    pub integrity_tag: [u8; 16],
}

/// Version Negotiation packet. Carries no protection at all.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VersionNegotiation {
    /// The seven bits after the header form bit; ignored by receivers.
    pub unused: u8,
    pub dcid: ConnectionId,
    pub scid: ConnectionId,
    pub versions: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShortHeader {
    pub spin: bool,
    pub key_phase: bool,
    pub dcid: ConnectionId,
    pub pn: TruncatedPn,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Header {
    Long(LongHeader),
    Retry(RetryHeader),
    VersionNegotiation(VersionNegotiation),
    Short(ShortHeader),
}

impl Header {
    /// Encodes the header in cleartext. Returns the offset of the packet
    /// number field (zero for Retry and Version Negotiation).
    pub fn encode(&self, out: &mut Vec<u8>) -> usize {
        let start = out.len();
        match self {
            Header::Long(h) => {
                debug_assert!(h.ty != LongPacketType::Retry);
                out.push(0xc0 | (h.ty.to_bits(h.version) << 4) | (h.pn.len - 1));
                out.extend_from_slice(&h.version.to_be_bytes());
                put_cid(out, &h.dcid);
                put_cid(out, &h.scid);
                if h.ty == LongPacketType::Initial {
                    put_varint(out, h.token.len() as u64);
                    out.extend_from_slice(&h.token);
                }
                put_varint(out, h.length);
                let pn_offset = out.len() - start;
                h.pn.write(out);
                pn_offset
            }
            Header::Retry(h) => {
                out.push(0xc0 | (LongPacketType::Retry.to_bits(h.version) << 4));
                out.extend_from_slice(&h.version.to_be_bytes());
                put_cid(out, &h.dcid);
                put_cid(out, &h.scid);
                out.extend_from_slice(&h.token);
                out.extend_from_slice(&h.integrity_tag);
                0
            }
            Header::VersionNegotiation(h) => {
                out.push(0x80 | (h.unused & 0x7f));
                out.extend_from_slice(&0u32.to_be_bytes());
                put_cid(out, &h.dcid);
                put_cid(out, &h.scid);
                for v in &h.versions {
                    out.extend_from_slice(&v.to_be_bytes());
                }
                0
            }
            Header::Short(h) => {
                let mut first = 0x40 | (h.pn.len - 1);
                if h.spin {
                    first |= 0x20;
                }
                if h.key_phase {
                    first |= 0x04;
                }
                out.push(first);
                out.extend_from_slice(h.dcid.as_bytes());
                let pn_offset = out.len() - start;
                h.pn.write(out);
                pn_offset
            }
        }
    }

    /// Decodes a header whose protection has already been removed.
    /// Returns the header and the number of bytes it occupies.
    pub fn decode(buf: &[u8], short_dcid_len: usize) -> Result<(Header, usize)> {
        let shell = PacketShell::parse(buf, short_dcid_len)?;
        let first = shell.first_byte;
        let read_pn = |len: u8| -> Result<TruncatedPn> {
            let mut r = Reader::new(buf);
            r.skip(shell.pn_offset)?;
            let bytes = r.bytes(len as usize)?;
            Ok(TruncatedPn {
                value: bytes.iter().fold(0u32, |acc, &b| (acc << 8) | u32::from(b)),
                len,
            })
        };
        match shell.kind {
            ShellKind::Short => {
                if first & 0x18 != 0 {
                    return Err(CodecError::ReservedBits);
                }
                let pn = read_pn((first & 0x03) + 1)?;
                let len = shell.pn_offset + pn.len as usize;
                Ok((
                    Header::Short(ShortHeader {
                        spin: first & 0x20 != 0,
                        key_phase: first & 0x04 != 0,
                        dcid: shell.dcid,
                        pn,
                    }),
                    len,
                ))
            }
            ShellKind::Long {
                ty,
                version,
                scid,
                token,
                length,
            } => {
                if first & 0x0c != 0 {
                    return Err(CodecError::ReservedBits);
                }
                let pn = read_pn((first & 0x03) + 1)?;
                let len = shell.pn_offset + pn.len as usize;
                Ok((
                    Header::Long(LongHeader {
                        ty,
                        version,
                        dcid: shell.dcid,
                        scid,
                        token,
                        length,
                        pn,
                    }),
                    len,
                ))
            }
            ShellKind::Retry {
                version,
                scid,
                token,
                integrity_tag,
            } => Ok((
                Header::Retry(RetryHeader {
                    version,
                    dcid: shell.dcid,
                    scid,
                    token,
                    integrity_tag,
                }),
                shell.len,
            )),
            ShellKind::VersionNegotiation { scid, versions } => Ok((
                Header::VersionNegotiation(VersionNegotiation {
                    unused: first & 0x7f,
                    dcid: shell.dcid,
                    scid,
                    versions,
                }),
                shell.len,
            )),
            ShellKind::UnsupportedVersion { version, .. } => {
                Err(CodecError::UnsupportedVersion(version))
            }
        }
    }
}

/// The parts of a packet readable without removing header protection.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PacketShell {
    pub kind: ShellKind,
    pub first_byte: u8,
    pub dcid: ConnectionId,
    /// Offset of the packet number field; zero when there is none.
    pub pn_offset: usize,
    /// Bytes of the datagram this packet occupies.
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ShellKind {
    Short,
    Long {
        ty: LongPacketType,
        version: u32,
        scid: ConnectionId,
        token: Vec<u8>,
        length: u64,
    },
    Retry {
        version: u32,
        scid: ConnectionId,
        token: Vec<u8>,
        integrity_tag: [u8; 16],
    },
    VersionNegotiation {
        scid: ConnectionId,
        versions: Vec<u32>,
    },
    /// A long header of a version we cannot parse past the connection ids.
    UnsupportedVersion { version: u32, scid: ConnectionId },
}

impl PacketShell {
    pub fn parse(buf: &[u8], short_dcid_len: usize) -> Result<Self> {
        let mut r = Reader::new(buf);
        let first = r.u8()?;
        if first & 0x80 == 0 {
            let dcid = ConnectionId::new(r.bytes(short_dcid_len)?)?;
            if first & 0x40 == 0 {
                return Err(CodecError::FixedBitUnset);
            }
            return Ok(PacketShell {
                kind: ShellKind::Short,
                first_byte: first,
                dcid,
                pn_offset: r.position(),
                len: buf.len(),
            });
        }
        let version = r.u32()?;
        let dcid = r.cid()?;
        let scid = r.cid()?;
        if version == 0 {
            let rest = r.rest();
            if rest.is_empty() || rest.len() % 4 != 0 {
                return Err(CodecError::MalformedDatagram(
                    "version negotiation list is not a whole number of versions",
                ));
            }
            let versions = rest
                .chunks_exact(4)
                .map(|c| u32::from_be_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            return Ok(PacketShell {
                kind: ShellKind::VersionNegotiation { scid, versions },
                first_byte: first,
                dcid,
                pn_offset: 0,
                len: buf.len(),
            });
        }
        if !is_known_version(version) {
            return Ok(PacketShell {
                kind: ShellKind::UnsupportedVersion { version, scid },
                first_byte: first,
                dcid,
                pn_offset: 0,
                len: buf.len(),
            });
        }
        if first & 0x40 == 0 {
            return Err(CodecError::FixedBitUnset);
        }
        let ty = LongPacketType::from_bits(first >> 4, version);
        if ty == LongPacketType::Retry {
            let rest = r.rest();
            if rest.len() < 16 {
                return Err(CodecError::TruncatedInput {
                    offset: r.position(),
                    needed: 16 - rest.len(),
                });
            }
            let (token, tag) = rest.split_at(rest.len() - 16);
            return Ok(PacketShell {
                kind: ShellKind::Retry {
                    version,
                    scid,
                    token: token.to_vec(),
                    integrity_tag: tag.try_into().expect("16 bytes"),
                },
                first_byte: first,
                dcid,
                pn_offset: 0,
                len: buf.len(),
            });
        }
        let token = if ty == LongPacketType::Initial {
            let n = r.varint()?;
            if n > r.remaining() as u64 {
                return Err(CodecError::MalformedDatagram("token length exceeds datagram"));
            }
            r.bytes(n as usize)?.to_vec()
        } else {
            Vec::new()
        };
        let length = r.varint()?;
        let pn_offset = r.position();
        if length > r.remaining() as u64 {
            return Err(CodecError::MalformedDatagram("length field exceeds datagram"));
        }
        Ok(PacketShell {
            kind: ShellKind::Long {
                ty,
                version,
                scid,
                token,
                length,
            },
            first_byte: first,
            dcid,
            pn_offset,
            len: pn_offset + length as usize,
        })
    }

    pub fn version(&self) -> Option<u32> {
        match &self.kind {
            ShellKind::Short => None,
            ShellKind::Long { version, .. }
            | ShellKind::Retry { version, .. }
            | ShellKind::UnsupportedVersion { version, .. } => Some(*version),
            ShellKind::VersionNegotiation { .. } => Some(0),
        }
    }

    pub fn scid(&self) -> Option<ConnectionId> {
        match &self.kind {
            ShellKind::Short => None,
            ShellKind::Long { scid, .. }
            | ShellKind::Retry { scid, .. }
            | ShellKind::UnsupportedVersion { scid, .. }
            | ShellKind::VersionNegotiation { scid, .. } => Some(*scid),
        }
    }

    pub fn long_type(&self) -> Option<LongPacketType> {
        match &self.kind {
            ShellKind::Long { ty, .. } => Some(*ty),
            ShellKind::Retry { .. } => Some(LongPacketType::Retry),
            _ => None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::VERSION_1;
    use proptest::prelude::*;

    fn cid(bytes: &[u8]) -> ConnectionId {
        ConnectionId::new(bytes).unwrap()
    }

    #[test]
    fn version_two_remaps_types() {
        for ty in [
            LongPacketType::Initial,
            LongPacketType::ZeroRtt,
            LongPacketType::Handshake,
            LongPacketType::Retry,
        ] {
            for v in [VERSION_1, VERSION_2] {
                assert_eq!(LongPacketType::from_bits(ty.to_bits(v), v), ty);
            }
        }
        assert_eq!(LongPacketType::Initial.to_bits(VERSION_1), 0);
        assert_eq!(LongPacketType::Initial.to_bits(VERSION_2), 1);
        assert_eq!(LongPacketType::Retry.to_bits(VERSION_2), 0);
    }

    #[test]
    fn initial_layout() {
        let h = Header::Long(LongHeader {
            ty: LongPacketType::Initial,
            version: VERSION_1,
            dcid: cid(&[1, 2, 3, 4, 5, 6, 7, 8]),
            scid: cid(&[9]),
            token: vec![0xaa, 0xbb],
            length: 3,
            pn: TruncatedPn { value: 7, len: 2 },
        });
        let mut out = Vec::new();
        let pn_offset = h.encode(&mut out);
        assert_eq!(out[0], 0xc1);
        assert_eq!(&out[1..5], &[0, 0, 0, 1]);
        assert_eq!(out[5], 8);
        assert_eq!(out[14], 1);
        assert_eq!(out[16], 2); // token length
        assert_eq!(pn_offset, 20);
        assert_eq!(&out[20..22], &[0, 7]);
    }

    #[test]
    fn vn_has_zero_version_and_no_fixed_bit_requirement() {
        let h = Header::VersionNegotiation(VersionNegotiation {
            unused: 0x15,
            dcid: cid(&[1; 8]),
            scid: cid(&[2; 8]),
            versions: vec![VERSION_2, VERSION_1],
        });
        let mut out = Vec::new();
        h.encode(&mut out);
        assert_eq!(out[0] & 0x40, 0);
        assert_eq!(&out[1..5], &[0, 0, 0, 0]);
        assert_eq!(Header::decode(&out, 8).unwrap(), (h, out.len()));
    }

    #[test]
    fn short_with_fixed_bit_clear_is_rejected() {
        let buf = [0x00, 1, 2, 3, 4, 5, 6, 7, 8, 0];
        assert_eq!(PacketShell::parse(&buf, 8), Err(CodecError::FixedBitUnset));
    }

    #[test]
    fn unknown_version_exposes_cids() {
        let mut buf = vec![0xc0, 0x0a, 0x0a, 0x0a, 0x0a, 2, 1, 2, 1, 3];
        buf.extend_from_slice(&[0; 40]);
        let shell = PacketShell::parse(&buf, 8).unwrap();
        assert_eq!(
            shell.kind,
            ShellKind::UnsupportedVersion {
                version: 0x0a0a0a0a,
                scid: cid(&[3])
            }
        );
        assert_eq!(shell.dcid, cid(&[1, 2]));
    }

    fn arb_cid() -> impl Strategy<Value = ConnectionId> {
        proptest::collection::vec(any::<u8>(), 0..=20).prop_map(|b| cid(&b))
    }

    fn arb_pn() -> impl Strategy<Value = TruncatedPn> {
        (1u8..=4, any::<u32>()).prop_map(|(len, v)| TruncatedPn {
            value: if len == 4 { v } else { v & ((1 << (8 * len)) - 1) },
            len,
        })
    }

    fn arb_header() -> impl Strategy<Value = Header> {
        let version = prop_oneof![Just(VERSION_1), Just(VERSION_2)];
        let long = (
            prop_oneof![
                Just(LongPacketType::Initial),
                Just(LongPacketType::ZeroRtt),
                Just(LongPacketType::Handshake)
            ],
            version.clone(),
            arb_cid(),
            arb_cid(),
            proptest::collection::vec(any::<u8>(), 0..30),
            arb_pn(),
            0u64..200,
        )
            .prop_map(|(ty, version, dcid, scid, token, pn, extra)| {
                Header::Long(LongHeader {
                    ty,
                    version,
                    dcid,
                    scid,
                    token: if ty == LongPacketType::Initial { token } else { Vec::new() },
                    length: pn.len as u64 + extra,
                    pn,
                })
            });
        let retry = (
            version,
            arb_cid(),
            arb_cid(),
            proptest::collection::vec(any::<u8>(), 0..30),
            any::<[u8; 16]>(),
        )
            .prop_map(|(version, dcid, scid, token, integrity_tag)| {
                Header::Retry(RetryHeader {
                    version,
                    dcid,
                    scid,
                    token,
                    integrity_tag,
                })
            });
        let short = (any::<bool>(), any::<bool>(), proptest::collection::vec(any::<u8>(), 8), arb_pn())
            .prop_map(|(spin, key_phase, d, pn)| {
                Header::Short(ShortHeader {
                    spin,
                    key_phase,
                    dcid: cid(&d),
                    pn,
                })
            });
        prop_oneof![long, retry, short]
    }

    proptest! {
        #[test]
        fn header_roundtrip(h in arb_header()) {
            let mut out = Vec::new();
            h.encode(&mut out);
            // long headers claim `length` bytes after the length field
            if let Header::Long(l) = &h {
                out.resize(out.len() + (l.length - l.pn.len as u64) as usize, 0);
            }
            let (decoded, _) = Header::decode(&out, 8).unwrap();
            prop_assert_eq!(decoded, h);
        }

        #[test]
        fn shell_parse_never_panics(bytes in proptest::collection::vec(any::<u8>(), 0..64)) {
            let _ = PacketShell::parse(&bytes, 8);
            let _ = Header::decode(&bytes, 8);
        }
    }
}

//! Offline packet dissection for the `decode` command.
//!
//! Initial packets are always readable because their keys derive from the
//! destination connection id. Other packets need the protection suite and,
//! for suites that mask headers or encrypt, a key.

use std::fmt::Write as _;

use thiserror::Error;

use crate::codec::{version_name, CodecError, ConnectionId, Header, LongPacketType, PacketShell, ShellKind};
use crate::frames::{decode_frames_at, CloseLayer, Frame};
use crate::protection::{
    derive_initial_keys, open_payload, remove_header_protection, retry_integrity_tag, NullSuite, PacketKey,
    ProtectionError, SuiteKind, Unmasked, TAG_LEN,
};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("error at byte {offset}: {message}")]
pub struct InspectError {
    pub offset: usize,
    pub message: String,
}

#[derive(Debug, Clone, Default)]
pub struct DecodeOptions {
    /// Connection id length assumed for short headers.
    pub dcid_len: usize,
    /// Suite of Handshake, 0-RTT and 1-RTT packets. Initial packets always
    /// use integrity-only protection.
    pub suite: Option<SuiteKind>,
    /// For Initial and Retry packets, the client's original destination
    /// connection id. For other packets, the 32-byte traffic secret.
    pub key_seed: Option<Vec<u8>>,
}

/// Accepts hex with optional `0x` prefix, whitespace and colons.
pub fn parse_hex(text: &str) -> Result<Vec<u8>, InspectError> {
    let cleaned: String = text
        .trim()
        .trim_start_matches("0x")
        .chars()
        .filter(|c| !c.is_whitespace() && *c != ':')
        .collect();
    hex::decode(&cleaned).map_err(|e| {
        let offset = match e {
            hex::FromHexError::InvalidHexCharacter { index, .. } => index / 2,
            _ => cleaned.len() / 2,
        };
        InspectError {
            offset,
            message: format!("invalid hex: {e}"),
        }
    })
}

fn codec_err(base: usize, e: CodecError) -> InspectError {
    let offset = match e {
        CodecError::TruncatedInput { offset, .. } => base + offset,
        _ => base,
    };
    InspectError {
        offset,
        message: e.to_string(),
    }
}

fn cid(c: &ConnectionId) -> String {
    if c.is_empty() {
        "(empty)".into()
    } else {
        hex::encode(c.as_bytes())
    }
}

/// Dissects every packet in a datagram.
pub fn decode_datagram(data: &[u8], opts: &DecodeOptions) -> Result<String, InspectError> {
    if data.is_empty() {
        return Err(InspectError {
            offset: 0,
            message: "empty input".into(),
        });
    }
    let mut out = String::new();
    let mut at = 0;
    let mut index = 0;
    while at < data.len() {
        let rest = &data[at..];
        let shell = PacketShell::parse(rest, opts.dcid_len).map_err(|e| codec_err(at, e))?;
        let len = shell.len.min(rest.len());
        if index > 0 {
            out.push('\n');
        }
        writeln!(out, "packet {index} at byte {at}, {len} bytes").unwrap();
        decode_packet(&mut out, &rest[..len], &shell, at, opts)?;
        at += len;
        index += 1;
        if len == 0 {
            break;
        }
    }
    Ok(out)
}

fn decode_packet(
    out: &mut String,
    pkt: &[u8],
    shell: &PacketShell,
    base: usize,
    opts: &DecodeOptions,
) -> Result<(), InspectError> {
    let first = shell.first_byte;
    match &shell.kind {
        ShellKind::VersionNegotiation { scid, versions } => {
            writeln!(out, "  Version Negotiation packet (no protection)").unwrap();
            writeln!(out, "  Header Form: 1 (long)").unwrap();
            writeln!(out, "  Unused: {:#04x}", first & 0x7f).unwrap();
            writeln!(out, "  Version: 0x00000000").unwrap();
            writeln!(out, "  Destination Connection ID ({}): {}", shell.dcid.len(), cid(&shell.dcid)).unwrap();
            writeln!(out, "  Source Connection ID ({}): {}", scid.len(), cid(scid)).unwrap();
            for v in versions {
                writeln!(out, "  Supported Version: {v:#010x} ({})", version_name(*v)).unwrap();
            }
            Ok(())
        }
        ShellKind::UnsupportedVersion { version, scid } => {
            writeln!(out, "  Long header of unknown version {version:#010x}").unwrap();
            writeln!(out, "  Destination Connection ID ({}): {}", shell.dcid.len(), cid(&shell.dcid)).unwrap();
            writeln!(out, "  Source Connection ID ({}): {}", scid.len(), cid(scid)).unwrap();
            writeln!(out, "  note: the rest of the packet is version-specific and not dissected").unwrap();
            Ok(())
        }
        ShellKind::Retry {
            version,
            scid,
            token,
            integrity_tag,
        } => {
            writeln!(out, "  Retry packet (integrity tag only, no encryption)").unwrap();
            writeln!(out, "  Header Form: 1 (long)").unwrap();
            writeln!(out, "  Version: {version:#010x} ({})", version_name(*version)).unwrap();
            writeln!(out, "  Destination Connection ID ({}): {}", shell.dcid.len(), cid(&shell.dcid)).unwrap();
            writeln!(out, "  Source Connection ID ({}): {}", scid.len(), cid(scid)).unwrap();
            writeln!(out, "  Retry Token ({} bytes): {}", token.len(), hex::encode(token)).unwrap();
            writeln!(out, "  Retry Integrity Tag: {}", hex::encode(integrity_tag)).unwrap();
            match &opts.key_seed {
                Some(odcid) => {
                    let ok = retry_integrity_tag(*version, odcid, &pkt[..pkt.len() - TAG_LEN]) == *integrity_tag;
                    writeln!(out, "  note: integrity tag {}", if ok { "verified" } else { "does NOT verify" }).unwrap();
                }
                None => writeln!(out, "  note: pass the original destination connection id as --key-seed to check the tag").unwrap(),
            }
            Ok(())
        }
        ShellKind::Long { ty, version, scid, token, length } => {
            writeln!(out, "  {} packet", long_name(*ty)).unwrap();
            writeln!(out, "  Header Form: 1 (long)").unwrap();
            writeln!(out, "  Fixed Bit: {}", (first >> 6) & 1).unwrap();
            writeln!(out, "  Long Packet Type: {}", ty.to_bits(*version)).unwrap();
            writeln!(out, "  Version: {version:#010x} ({})", version_name(*version)).unwrap();
            writeln!(out, "  Destination Connection ID ({}): {}", shell.dcid.len(), cid(&shell.dcid)).unwrap();
            writeln!(out, "  Source Connection ID ({}): {}", scid.len(), cid(scid)).unwrap();
            if *ty == LongPacketType::Initial {
                writeln!(out, "  Token Length: {}", token.len()).unwrap();
                if !token.is_empty() {
                    writeln!(out, "  Token: {}", hex::encode(token)).unwrap();
                }
            }
            writeln!(out, "  Length: {length}").unwrap();
            if *ty == LongPacketType::Initial {
                let seed = opts.key_seed.clone().unwrap_or_else(|| shell.dcid.as_bytes().to_vec());
                let keys = derive_initial_keys(&seed, *version);
                dissect(out, pkt, base, opts.dcid_len, &NullSuite, &[("client", keys.client), ("server", keys.server)])
            } else {
                protected(out, pkt, base, opts, *version)
            }
        }
        ShellKind::Short => {
            writeln!(out, "  1-RTT packet (short header)").unwrap();
            writeln!(out, "  Header Form: 0 (short)").unwrap();
            writeln!(out, "  Fixed Bit: {}", (first >> 6) & 1).unwrap();
            writeln!(out, "  Destination Connection ID ({}): {}", shell.dcid.len(), cid(&shell.dcid)).unwrap();
            protected(out, pkt, base, opts, crate::codec::VERSION_1)
        }
    }
}

fn long_name(ty: LongPacketType) -> &'static str {
    match ty {
        LongPacketType::Initial => "Initial",
        LongPacketType::ZeroRtt => "0-RTT",
        LongPacketType::Handshake => "Handshake",
        LongPacketType::Retry => "Retry",
    }
}

fn protected(
    out: &mut String,
    pkt: &[u8],
    base: usize,
    opts: &DecodeOptions,
    version: u32,
) -> Result<(), InspectError> {
    let Some(suite) = opts.suite else {
        writeln!(out, "  note: header protection hides the packet number and the payload is protected;").unwrap();
        writeln!(out, "        pass --suite (and --key-seed for the toy suite) to dissect further").unwrap();
        return Ok(());
    };
    let key = match &opts.key_seed {
        Some(seed) => match <[u8; 32]>::try_from(seed.as_slice()) {
            Ok(secret) => Some(PacketKey::from_secret(secret, version)),
            Err(_) => {
                return Err(InspectError {
                    offset: base,
                    message: format!("--key-seed must be a 32-byte traffic secret here, got {} bytes", seed.len()),
                })
            }
        },
        None => None,
    };
    match (suite, key) {
        (_, Some(k)) => dissect(out, pkt, base, opts.dcid_len, suite.suite(), &[("given", k)]),
        (SuiteKind::Null, None) => {
            // The null suite never masks headers or encrypts, so everything
            // but the tag is readable without a key.
            let mut buf = pkt.to_vec();
            let unmasked = remove_header_protection(&NullSuite, &[], &mut buf, opts.dcid_len, None)
                .map_err(|e| prot_err(base, e))?;
            header_fields(out, &unmasked);
            if buf.len() < unmasked.header_len + TAG_LEN {
                return Err(InspectError {
                    offset: base + unmasked.header_len,
                    message: "payload shorter than the integrity tag".into(),
                });
            }
            let payload = &buf[unmasked.header_len..buf.len() - TAG_LEN];
            writeln!(out, "  note: null suite; integrity tag not checked without --key-seed").unwrap();
            frames(out, payload, base + unmasked.header_len)
        }
        (SuiteKind::Toy, None) => {
            writeln!(out, "  note: toy suite masks the header and encrypts the payload; pass --key-seed").unwrap();
            Ok(())
        }
    }
}

fn prot_err(base: usize, e: ProtectionError) -> InspectError {
    match e {
        ProtectionError::Codec(c) => codec_err(base, c),
        other => InspectError {
            offset: base,
            message: other.to_string(),
        },
    }
}

fn header_fields(out: &mut String, u: &Unmasked) {
    match &u.header {
        Header::Long(h) => {
            writeln!(out, "  Packet Number Length: {}", h.pn.len).unwrap();
        }
        Header::Short(h) => {
            writeln!(out, "  Spin Bit: {}", u8::from(h.spin)).unwrap();
            writeln!(out, "  Key Phase: {}", u8::from(h.key_phase)).unwrap();
            writeln!(out, "  Packet Number Length: {}", h.pn.len).unwrap();
        }
        _ => {}
    }
    writeln!(out, "  Packet Number: {}", u.pn).unwrap();
}

fn dissect(
    out: &mut String,
    pkt: &[u8],
    base: usize,
    dcid_len: usize,
    suite: &dyn crate::protection::ProtectionSuite,
    keys: &[(&str, PacketKey)],
) -> Result<(), InspectError> {
    let mut last_err = None;
    for (who, k) in keys {
        let mut buf = pkt.to_vec();
        let unmasked = match remove_header_protection(suite, &k.hp, &mut buf, dcid_len, None) {
            Ok(u) => u,
            Err(e) => {
                last_err = Some(prot_err(base, e));
                continue;
            }
        };
        match open_payload(suite, k, &buf, &unmasked) {
            Ok(payload) => {
                header_fields(out, &unmasked);
                writeln!(out, "  Protection: verified with {who} keys").unwrap();
                return frames(out, &payload, base + unmasked.header_len);
            }
            Err(e) => last_err = Some(prot_err(base + unmasked.header_len, e)),
        }
    }
    Err(last_err.unwrap_or(InspectError {
        offset: base,
        message: "no keys to try".into(),
    }))
}

fn frames(out: &mut String, payload: &[u8], base: usize) -> Result<(), InspectError> {
    let list = decode_frames_at(payload).map_err(|(at, e)| InspectError {
        offset: base + at,
        message: e.to_string(),
    })?;
    writeln!(out, "  Frames ({}):", list.len()).unwrap();
    for (at, f) in list {
        writeln!(out, "    [{}] {}", base + at, describe(&f)).unwrap();
    }
    Ok(())
}

fn describe(f: &Frame) -> String {
    match f {
        Frame::Padding(n) => format!("PADDING x{n}"),
        Frame::Ping => "PING".into(),
        Frame::Ack(a) => {
            let ranges: Vec<String> = a
                .ranges
                .iter()
                .map(|r| {
                    if r.start() == r.end() {
                        r.start().to_string()
                    } else {
                        format!("{}-{}", r.start(), r.end())
                    }
                })
                .collect();
            format!(
                "ACK Largest Acknowledged={} ACK Delay={} ACK Range Count={} Ranges=[{}]",
                a.largest(),
                a.delay,
                a.ranges.len() - 1,
                ranges.join(", ")
            )
        }
        Frame::ResetStream { id, error_code, final_size } => {
            format!("RESET_STREAM Stream ID={} Error Code={error_code} Final Size={final_size}", id.0)
        }
        Frame::StopSending { id, error_code } => format!("STOP_SENDING Stream ID={} Error Code={error_code}", id.0),
        Frame::Crypto { offset, data } => format!("CRYPTO Offset={offset} Length={}", data.len()),
        Frame::NewToken(t) => format!("NEW_TOKEN Token Length={}", t.len()),
        Frame::Stream(s) => format!(
            "STREAM Stream ID={} Offset={} Length={} Fin={}",
            s.id.0,
            s.offset,
            s.data.len(),
            u8::from(s.fin)
        ),
        Frame::MaxData(v) => format!("MAX_DATA Maximum Data={v}"),
        Frame::MaxStreamData { id, limit } => format!("MAX_STREAM_DATA Stream ID={} Maximum Stream Data={limit}", id.0),
        Frame::MaxStreams { dir, limit } => format!("MAX_STREAMS ({dir:?}) Maximum Streams={limit}"),
        Frame::NewConnectionId {
            seq,
            retire_prior_to,
            cid: c,
            reset_token,
        } => format!(
            "NEW_CONNECTION_ID Sequence Number={seq} Retire Prior To={retire_prior_to} Connection ID={} Stateless Reset Token={}",
            cid(c),
            hex::encode(reset_token)
        ),
        Frame::RetireConnectionId(seq) => format!("RETIRE_CONNECTION_ID Sequence Number={seq}"),
        Frame::PathChallenge(d) => format!("PATH_CHALLENGE Data={}", hex::encode(d)),
        Frame::PathResponse(d) => format!("PATH_RESPONSE Data={}", hex::encode(d)),
        Frame::ConnectionClose(c) => format!(
            "CONNECTION_CLOSE ({}) Error Code={} Reason Phrase={:?}",
            match c.layer {
                CloseLayer::Transport { .. } => "transport",
                CloseLayer::Application => "application",
            },
            c.error_code,
            String::from_utf8_lossy(&c.reason)
        ),
        Frame::Datagram(d) => format!("DATAGRAM Length={}", d.len()),
    }
}

//! Packet and header protection.
//!
//! Real AEAD ciphers are replaced by two stand-in suites that honour the same
//! contract: `open` inverts `seal` and rejects any change to the ciphertext,
//! tag or associated data. Neither offers real confidentiality or strength.
//!
//! * [`NullSuite`] leaves the payload readable and appends a keyed 16-byte
//!   checksum. Its header mask is all zeros, so captures stay legible.
//! * [`ToySuite`] XORs the payload with a keyed keystream and masks header
//!   fields with a keyed function of the ciphertext sample.
//!
//! Initial and Retry packets only ever get integrity protection, whatever
//! suite is configured. Version Negotiation packets get none.

use std::fmt;

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::codec::{Header, LongHeader, PacketShell, ShellKind};
use crate::codec::recover_packet_number as recover;
use crate::codec::{CodecError, VERSION_2};

pub const TAG_LEN: usize = 16;
pub const SAMPLE_LEN: usize = 16;
/// The header-protection sample starts this many bytes past the start of
/// the packet number field.
pub const SAMPLE_OFFSET: usize = 4;

const INITIAL_SALT_V1: [u8; 20] = [
    0x38, 0x76, 0x2c, 0xf7, 0xf5, 0x59, 0x34, 0xb3, 0x4d, 0x17, 0x9a, 0xe6, 0xa4, 0xc8, 0x0c, 0xad,
    0xcc, 0xbb, 0x7f, 0x0a,
];
const INITIAL_SALT_V2: [u8; 20] = [
    0x0d, 0xed, 0xe3, 0xde, 0xf7, 0x00, 0xa6, 0xdb, 0x81, 0x93, 0x81, 0xbe, 0x6e, 0x26, 0x9d, 0xcb,
    0xf9, 0xbd, 0x2e, 0xd9,
];

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ProtectionError {
    #[error("packet failed integrity check")]
    IntegrityFailure,
    #[error("keys for this packet are not available")]
    KeysUnavailable,
    #[error("packet too short to sample for header protection")]
    TooShort,
    #[error(transparent)]
    Codec(#[from] CodecError),
}

pub(crate) fn hash(parts: &[&[u8]]) -> [u8; 32] {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u32).to_be_bytes());
        h.update(p);
    }
    h.finalize().into()
}

pub trait ProtectionSuite: fmt::Debug + Send + Sync {
    fn name(&self) -> &'static str;
    /// Returns ciphertext followed by a [`TAG_LEN`]-byte tag.
    fn seal(&self, key: &[u8], nonce: &[u8; 12], ad: &[u8], plaintext: &[u8]) -> Vec<u8>;
    fn open(&self, key: &[u8], nonce: &[u8; 12], ad: &[u8], sealed: &[u8]) -> Result<Vec<u8>, ProtectionError>;
    /// Five mask bytes: one for the first header byte, four for the packet
    /// number.
    fn header_mask(&self, hp_key: &[u8], sample: &[u8; SAMPLE_LEN]) -> [u8; 5];
}

fn tag(key: &[u8], nonce: &[u8; 12], ad: &[u8], body: &[u8]) -> [u8; TAG_LEN] {
    let h = hash(&[b"tag", key, nonce, ad, body]);
    h[..TAG_LEN].try_into().expect("16 bytes")
}

fn split_tag(sealed: &[u8]) -> Result<(&[u8], &[u8]), ProtectionError> {
    if sealed.len() < TAG_LEN {
        return Err(ProtectionError::IntegrityFailure);
    }
    Ok(sealed.split_at(sealed.len() - TAG_LEN))
}

fn tags_equal(a: &[u8], b: &[u8]) -> bool {
    // compare every byte regardless of where the first difference is
    a.len() == b.len() && a.iter().zip(b).fold(0u8, |acc, (x, y)| acc | (x ^ y)) == 0
}

#[derive(Debug, Clone, Copy, Default)]
pub struct NullSuite;

impl ProtectionSuite for NullSuite {
    fn name(&self) -> &'static str {
        "null"
    }

    fn seal(&self, key: &[u8], nonce: &[u8; 12], ad: &[u8], plaintext: &[u8]) -> Vec<u8> {
        let mut out = plaintext.to_vec();
        out.extend_from_slice(&tag(key, nonce, ad, plaintext));
        out
    }

    fn open(&self, key: &[u8], nonce: &[u8; 12], ad: &[u8], sealed: &[u8]) -> Result<Vec<u8>, ProtectionError> {
        let (body, t) = split_tag(sealed)?;
        if !tags_equal(&tag(key, nonce, ad, body), t) {
            return Err(ProtectionError::IntegrityFailure);
        }
        Ok(body.to_vec())
    }

    fn header_mask(&self, _hp_key: &[u8], _sample: &[u8; SAMPLE_LEN]) -> [u8; 5] {
        [0; 5]
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ToySuite;

impl ToySuite {
    fn keystream_xor(key: &[u8], nonce: &[u8; 12], data: &mut [u8]) {
        for (i, block) in data.chunks_mut(32).enumerate() {
            let ks = hash(&[b"stream", key, nonce, &(i as u32).to_be_bytes()]);
            for (b, k) in block.iter_mut().zip(ks) {
                *b ^= k;
            }
        }
    }
}

impl ProtectionSuite for ToySuite {
    fn name(&self) -> &'static str {
        "toy"
    }

    fn seal(&self, key: &[u8], nonce: &[u8; 12], ad: &[u8], plaintext: &[u8]) -> Vec<u8> {
        let mut out = plaintext.to_vec();
        Self::keystream_xor(key, nonce, &mut out);
        let t = tag(key, nonce, ad, &out);
        out.extend_from_slice(&t);
        out
    }

    fn open(&self, key: &[u8], nonce: &[u8; 12], ad: &[u8], sealed: &[u8]) -> Result<Vec<u8>, ProtectionError> {
        let (body, t) = split_tag(sealed)?;
        if !tags_equal(&tag(key, nonce, ad, body), t) {
            return Err(ProtectionError::IntegrityFailure);
        }
        let mut out = body.to_vec();
        Self::keystream_xor(key, nonce, &mut out);
        Ok(out)
    }

    fn header_mask(&self, hp_key: &[u8], sample: &[u8; SAMPLE_LEN]) -> [u8; 5] {
        let h = hash(&[b"hp", hp_key, sample]);
        h[..5].try_into().expect("5 bytes")
    }
}

/// Suite selection by configuration name.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SuiteKind {
    #[default]
    Null,
    Toy,
}

impl SuiteKind {
    pub fn from_name(name: &str) -> Option<Self> {
        match name {
            "null" => Some(SuiteKind::Null),
            "toy" => Some(SuiteKind::Toy),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        self.suite().name()
    }

    pub fn suite(self) -> &'static dyn ProtectionSuite {
        match self {
            SuiteKind::Null => &NullSuite,
            SuiteKind::Toy => &ToySuite,
        }
    }
}

fn label(version: u32, base: &str) -> String {
    if version == VERSION_2 {
        format!("quicv2 {base}")
    } else {
        format!("quic {base}")
    }
}

/// Expands `secret` into a labelled 32-byte value.
pub fn expand(secret: &[u8], label_str: &str, version: u32) -> [u8; 32] {
    hash(&[b"expand", secret, &version.to_be_bytes(), label_str.as_bytes()])
}

/// Keys for one direction and one generation.
#[derive(Clone, PartialEq, Eq)]
pub struct PacketKey {
    secret: [u8; 32],
    version: u32,
    pub key: [u8; 32],
    pub iv: [u8; 12],
    pub hp: [u8; 32],
}

impl fmt::Debug for PacketKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "PacketKey({})", hex::encode(&self.key[..4]))
    }
}

impl PacketKey {
    pub fn from_secret(secret: [u8; 32], version: u32) -> Self {
        let iv_full = expand(&secret, &label(version, "iv"), version);
        PacketKey {
            secret,
            version,
            key: expand(&secret, &label(version, "key"), version),
            iv: iv_full[..12].try_into().expect("12 bytes"),
            hp: expand(&secret, &label(version, "hp"), version),
        }
    }

    pub fn secret(&self) -> &[u8; 32] {
        &self.secret
    }

    /// Keys for the following key phase. The header protection key stays
    /// the same across generations.
    pub fn next_generation(&self) -> PacketKey {
        let secret = expand(&self.secret, &label(self.version, "ku"), self.version);
        let mut next = PacketKey::from_secret(secret, self.version);
        next.hp = self.hp;
        next
    }

    pub fn nonce(&self, pn: u64) -> [u8; 12] {
        let mut n = self.iv;
        for (b, p) in n[4..].iter_mut().zip(pn.to_be_bytes()) {
            *b ^= p;
        }
        n
    }
}

/// Sending and receiving keys for one packet number space.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KeyPair {
    pub local: PacketKey,
    pub remote: PacketKey,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InitialKeys {
    pub client: PacketKey,
    pub server: PacketKey,
}

impl InitialKeys {
    pub fn for_client(&self) -> KeyPair {
        KeyPair {
            local: self.client.clone(),
            remote: self.server.clone(),
        }
    }

    pub fn for_server(&self) -> KeyPair {
        KeyPair {
            local: self.server.clone(),
            remote: self.client.clone(),
        }
    }
}

fn initial_salt(version: u32) -> &'static [u8] {
    if version == VERSION_2 {
        &INITIAL_SALT_V2
    } else {
        &INITIAL_SALT_V1
    }
}

/// Initial keys are a public function of the client's first destination
/// connection id and the version's salt.
pub fn derive_initial_keys(dcid: &[u8], version: u32) -> InitialKeys {
    let initial = hash(&[initial_salt(version), dcid]);
    InitialKeys {
        client: PacketKey::from_secret(expand(&initial, "client in", version), version),
        server: PacketKey::from_secret(expand(&initial, "server in", version), version),
    }
}

/// The integrity tag of a Retry packet: a keyed checksum over the original
/// destination connection id followed by the Retry packet without its tag.
pub fn retry_integrity_tag(version: u32, odcid: &[u8], retry_without_tag: &[u8]) -> [u8; TAG_LEN] {
    let key = expand(initial_salt(version), "retry", version);
    let mut pseudo = vec![odcid.len() as u8];
    pseudo.extend_from_slice(odcid);
    pseudo.extend_from_slice(retry_without_tag);
    let sealed = NullSuite.seal(&key, &[0; 12], &pseudo, &[]);
    sealed.try_into().expect("tag only")
}

/// Builds a protected packet. Long headers get their Length field filled in;
/// payloads too short to yield a header-protection sample are padded with
/// zero bytes, which decode as PADDING.
pub fn protect(
    suite: &dyn ProtectionSuite,
    key: &PacketKey,
    header: &Header,
    payload: &[u8],
    full_pn: u64,
) -> Vec<u8> {
    let (pn_len, long) = match header {
        Header::Long(h) => (h.pn.len as usize, true),
        Header::Short(h) => (h.pn.len as usize, false),
        _ => panic!("only packets with a packet number are protected"),
    };
    let min_payload = (SAMPLE_OFFSET + SAMPLE_LEN).saturating_sub(pn_len + TAG_LEN);
    let mut payload = payload.to_vec();
    if payload.len() < min_payload {
        payload.resize(min_payload, 0);
    }
    let header = match header {
        Header::Long(h) => Header::Long(LongHeader {
            length: (pn_len + payload.len() + TAG_LEN) as u64,
            ..h.clone()
        }),
        other => other.clone(),
    };
    let mut out = Vec::with_capacity(64 + payload.len());
    let pn_offset = header.encode(&mut out);
    let sealed = suite.seal(&key.key, &key.nonce(full_pn), &out, &payload);
    out.extend_from_slice(&sealed);
    let sample: [u8; SAMPLE_LEN] = out[pn_offset + SAMPLE_OFFSET..pn_offset + SAMPLE_OFFSET + SAMPLE_LEN]
        .try_into()
        .expect("sample");
    let mask = suite.header_mask(&key.hp, &sample);
    out[0] ^= mask[0] & if long { 0x0f } else { 0x1f };
    for i in 0..pn_len {
        out[pn_offset + i] ^= mask[1 + i];
    }
    out
}

/// A packet whose header protection has been removed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Unmasked {
    pub header: Header,
    pub header_len: usize,
    pub pn: u64,
}

/// Removes header protection from `packet` in place and recovers the full
/// packet number. `packet` must span exactly one packet.
pub fn remove_header_protection(
    suite: &dyn ProtectionSuite,
    hp: &[u8],
    packet: &mut [u8],
    short_dcid_len: usize,
    largest_received: Option<u64>,
) -> Result<Unmasked, ProtectionError> {
    let shell = PacketShell::parse(packet, short_dcid_len)?;
    let long = match shell.kind {
        ShellKind::Short => false,
        ShellKind::Long { .. } => true,
        _ => return Err(CodecError::MalformedDatagram("packet has no packet number").into()),
    };
    let pn_offset = shell.pn_offset;
    if packet.len() < pn_offset + SAMPLE_OFFSET + SAMPLE_LEN {
        return Err(ProtectionError::TooShort);
    }
    let sample: [u8; SAMPLE_LEN] = packet[pn_offset + SAMPLE_OFFSET..pn_offset + SAMPLE_OFFSET + SAMPLE_LEN]
        .try_into()
        .expect("sample");
    let mask = suite.header_mask(hp, &sample);
    packet[0] ^= mask[0] & if long { 0x0f } else { 0x1f };
    let pn_len = (packet[0] & 0x03) as usize + 1;
    for i in 0..pn_len {
        packet[pn_offset + i] ^= mask[1 + i];
    }
    let (header, header_len) = Header::decode(packet, short_dcid_len)?;
    let truncated = match &header {
        Header::Long(h) => h.pn,
        Header::Short(h) => h.pn,
        _ => unreachable!("checked above"),
    };
    let pn = recover(u64::from(truncated.value), truncated.len, largest_received);
    Ok(Unmasked {
        header,
        header_len,
        pn,
    })
}

/// Opens the payload of a packet whose header is already unmasked.
pub fn open_payload(
    suite: &dyn ProtectionSuite,
    key: &PacketKey,
    packet: &[u8],
    unmasked: &Unmasked,
) -> Result<Vec<u8>, ProtectionError> {
    let (ad, sealed) = packet.split_at(unmasked.header_len);
    suite.open(&key.key, &key.nonce(unmasked.pn), ad, sealed)
}

/// Header removal and payload opening in one step.
pub fn unprotect(
    suite: &dyn ProtectionSuite,
    key: &PacketKey,
    packet: &[u8],
    short_dcid_len: usize,
    largest_received: Option<u64>,
) -> Result<(Header, Vec<u8>, u64), ProtectionError> {
    let mut buf = packet.to_vec();
    let unmasked = remove_header_protection(suite, &key.hp, &mut buf, short_dcid_len, largest_received)?;
    let payload = open_payload(suite, key, &buf, &unmasked)?;
    Ok((unmasked.header, payload, unmasked.pn))
}

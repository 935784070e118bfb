//! Transport parameters: encoding as id/length/value triples of varints,
//! and reconciliation of both sides' sets into the limits a sender obeys.

use crate::codec::{put_varint, ConnectionId, Reader};
use crate::error::{code, TransportError};
use crate::streams::Side;

pub mod id {
    pub const ORIGINAL_DESTINATION_CID: u64 = 0x00;
    pub const MAX_IDLE_TIMEOUT: u64 = 0x01;
    pub const STATELESS_RESET_TOKEN: u64 = 0x02;
    pub const INITIAL_MAX_DATA: u64 = 0x04;
    pub const INITIAL_MAX_STREAM_DATA_BIDI_LOCAL: u64 = 0x05;
    pub const INITIAL_MAX_STREAM_DATA_BIDI_REMOTE: u64 = 0x06;
    pub const INITIAL_MAX_STREAM_DATA_UNI: u64 = 0x07;
    pub const INITIAL_MAX_STREAMS_BIDI: u64 = 0x08;
    pub const INITIAL_MAX_STREAMS_UNI: u64 = 0x09;
    pub const ACK_DELAY_EXPONENT: u64 = 0x0a;
    pub const MAX_ACK_DELAY: u64 = 0x0b;
    pub const ACTIVE_CONNECTION_ID_LIMIT: u64 = 0x0e;
    pub const INITIAL_SOURCE_CID: u64 = 0x0f;
    pub const RETRY_SOURCE_CID: u64 = 0x10;
    pub const VERSION_INFORMATION: u64 = 0x11;
    pub const MAX_DATAGRAM_FRAME_SIZE: u64 = 0x20;
    /// Private-use id: the server allows 0-RTT on sessions resumed from
    /// this connection.
    pub const EARLY_DATA_ALLOWED: u64 = 0x2ab1;
}

pub const DEFAULT_MAX_ACK_DELAY_MS: u64 = 25;
pub const DEFAULT_ACK_DELAY_EXPONENT: u64 = 3;
pub const DEFAULT_ACTIVE_CID_LIMIT: u64 = 2;

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct VersionInformation {
    pub chosen: u32,
    /// Versions the sender supports, most preferred first.
    pub available: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TransportParameters {
    /// Zero disables the idle timeout from this side.
    pub max_idle_timeout_ms: u64,
    pub initial_max_data: u64,
    pub initial_max_stream_data_bidi_local: u64,
    pub initial_max_stream_data_bidi_remote: u64,
    pub initial_max_stream_data_uni: u64,
    pub initial_max_streams_bidi: u64,
    pub initial_max_streams_uni: u64,
    pub max_ack_delay_ms: u64,
    pub ack_delay_exponent: u64,
    pub active_connection_id_limit: u64,
    /// Zero means DATAGRAM frames are not supported.
    pub max_datagram_frame_size: u64,
    pub version_information: Option<VersionInformation>,
    pub initial_source_cid: Option<ConnectionId>,
    pub original_destination_cid: Option<ConnectionId>,
    pub retry_source_cid: Option<ConnectionId>,
    pub stateless_reset_token: Option<[u8; 16]>,
    pub early_data_allowed: bool,
}

impl Default for TransportParameters {
    fn default() -> Self {
        TransportParameters {
            max_idle_timeout_ms: 0,
            initial_max_data: 0,
            initial_max_stream_data_bidi_local: 0,
            initial_max_stream_data_bidi_remote: 0,
            initial_max_stream_data_uni: 0,
            initial_max_streams_bidi: 0,
            initial_max_streams_uni: 0,
            max_ack_delay_ms: DEFAULT_MAX_ACK_DELAY_MS,
            ack_delay_exponent: DEFAULT_ACK_DELAY_EXPONENT,
            active_connection_id_limit: DEFAULT_ACTIVE_CID_LIMIT,
            max_datagram_frame_size: 0,
            version_information: None,
            initial_source_cid: None,
            original_destination_cid: None,
            retry_source_cid: None,
            stateless_reset_token: None,
            early_data_allowed: false,
        }
    }
}

fn tp_error(reason: impl Into<String>) -> TransportError {
    TransportError::new(code::TRANSPORT_PARAMETER_ERROR, reason)
}

fn put_param(out: &mut Vec<u8>, id: u64, value: &[u8]) {
    put_varint(out, id);
    put_varint(out, value.len() as u64);
    out.extend_from_slice(value);
}

fn put_int_param(out: &mut Vec<u8>, id: u64, v: u64) {
    let mut value = Vec::new();
    put_varint(&mut value, v);
    put_param(out, id, &value);
}

impl TransportParameters {
    /// Parameters equal to their defaults are omitted, so the default set
    /// encodes to nothing.
    pub fn encode(&self) -> Vec<u8> {
        let d = TransportParameters::default();
        let mut out = Vec::new();
        let ints = [
            (id::MAX_IDLE_TIMEOUT, self.max_idle_timeout_ms, d.max_idle_timeout_ms),
            (id::INITIAL_MAX_DATA, self.initial_max_data, d.initial_max_data),
            (
                id::INITIAL_MAX_STREAM_DATA_BIDI_LOCAL,
                self.initial_max_stream_data_bidi_local,
                d.initial_max_stream_data_bidi_local,
            ),
            (
                id::INITIAL_MAX_STREAM_DATA_BIDI_REMOTE,
                self.initial_max_stream_data_bidi_remote,
                d.initial_max_stream_data_bidi_remote,
            ),
            (id::INITIAL_MAX_STREAM_DATA_UNI, self.initial_max_stream_data_uni, d.initial_max_stream_data_uni),
            (id::INITIAL_MAX_STREAMS_BIDI, self.initial_max_streams_bidi, d.initial_max_streams_bidi),
            (id::INITIAL_MAX_STREAMS_UNI, self.initial_max_streams_uni, d.initial_max_streams_uni),
            (id::ACK_DELAY_EXPONENT, self.ack_delay_exponent, d.ack_delay_exponent),
            (id::MAX_ACK_DELAY, self.max_ack_delay_ms, d.max_ack_delay_ms),
            (id::ACTIVE_CONNECTION_ID_LIMIT, self.active_connection_id_limit, d.active_connection_id_limit),
            (id::MAX_DATAGRAM_FRAME_SIZE, self.max_datagram_frame_size, d.max_datagram_frame_size),
        ];
        for (pid, v, default) in ints {
            if v != default {
                put_int_param(&mut out, pid, v);
            }
        }
        for (pid, cid) in [
            (id::ORIGINAL_DESTINATION_CID, &self.original_destination_cid),
            (id::INITIAL_SOURCE_CID, &self.initial_source_cid),
            (id::RETRY_SOURCE_CID, &self.retry_source_cid),
        ] {
            if let Some(cid) = cid {
                put_param(&mut out, pid, cid.as_bytes());
            }
        }
        if let Some(token) = &self.stateless_reset_token {
            put_param(&mut out, id::STATELESS_RESET_TOKEN, token);
        }
        if let Some(vi) = &self.version_information {
            let mut value = vi.chosen.to_be_bytes().to_vec();
            for v in &vi.available {
                value.extend_from_slice(&v.to_be_bytes());
            }
            put_param(&mut out, id::VERSION_INFORMATION, &value);
        }
        if self.early_data_allowed {
            put_param(&mut out, id::EARLY_DATA_ALLOWED, &[]);
        }
        out
    }

    /// Decodes a parameter block. Unknown ids are skipped; repeated ids and
    /// out-of-range values are errors.
    pub fn decode(buf: &[u8]) -> Result<Self, TransportError> {
        let mut p = TransportParameters::default();
        let mut seen = std::collections::BTreeSet::new();
        let mut r = Reader::new(buf);
        while !r.is_empty() {
            let pid = r.varint().map_err(|_| tp_error("truncated parameter id"))?;
            let len = r.varint().map_err(|_| tp_error("truncated parameter length"))?;
            if len > r.remaining() as u64 {
                return Err(tp_error(format!("parameter {pid:#x} overruns block")));
            }
            let value = r.bytes(len as usize).expect("length checked");
            if !seen.insert(pid) {
                return Err(tp_error(format!("parameter {pid:#x} repeated")));
            }
            let int = || -> Result<u64, TransportError> {
                let mut vr = Reader::new(value);
                let v = vr.varint().map_err(|_| tp_error(format!("parameter {pid:#x} malformed")))?;
                if !vr.is_empty() {
                    return Err(tp_error(format!("parameter {pid:#x} has trailing bytes")));
                }
                Ok(v)
            };
            let cid = || ConnectionId::new(value).map_err(|_| tp_error("connection id too long"));
            match pid {
                id::MAX_IDLE_TIMEOUT => p.max_idle_timeout_ms = int()?,
                id::INITIAL_MAX_DATA => p.initial_max_data = int()?,
                id::INITIAL_MAX_STREAM_DATA_BIDI_LOCAL => p.initial_max_stream_data_bidi_local = int()?,
                id::INITIAL_MAX_STREAM_DATA_BIDI_REMOTE => p.initial_max_stream_data_bidi_remote = int()?,
                id::INITIAL_MAX_STREAM_DATA_UNI => p.initial_max_stream_data_uni = int()?,
                id::INITIAL_MAX_STREAMS_BIDI => p.initial_max_streams_bidi = int()?,
                id::INITIAL_MAX_STREAMS_UNI => p.initial_max_streams_uni = int()?,
                id::ACK_DELAY_EXPONENT => p.ack_delay_exponent = int()?,
                id::MAX_ACK_DELAY => p.max_ack_delay_ms = int()?,
                id::ACTIVE_CONNECTION_ID_LIMIT => p.active_connection_id_limit = int()?,
                id::MAX_DATAGRAM_FRAME_SIZE => p.max_datagram_frame_size = int()?,
                id::ORIGINAL_DESTINATION_CID => p.original_destination_cid = Some(cid()?),
                id::INITIAL_SOURCE_CID => p.initial_source_cid = Some(cid()?),
                id::RETRY_SOURCE_CID => p.retry_source_cid = Some(cid()?),
                id::STATELESS_RESET_TOKEN => {
                    p.stateless_reset_token =
                        Some(value.try_into().map_err(|_| tp_error("reset token must be 16 bytes"))?)
                }
                id::VERSION_INFORMATION => {
                    if value.len() < 4 || value.len() % 4 != 0 {
                        return Err(tp_error("malformed version information"));
                    }
                    let mut words = value.chunks(4).map(|c| u32::from_be_bytes(c.try_into().expect("4")));
                    let chosen = words.next().expect("non-empty");
                    p.version_information = Some(VersionInformation {
                        chosen,
                        available: words.collect(),
                    });
                }
                id::EARLY_DATA_ALLOWED => {
                    if !value.is_empty() {
                        return Err(tp_error("early data flag carries no value"));
                    }
                    p.early_data_allowed = true;
                }
                _ => {}
            }
        }
        if p.ack_delay_exponent > 20 {
            return Err(tp_error("ack_delay_exponent above 20"));
        }
        if p.max_ack_delay_ms >= 1 << 14 {
            return Err(tp_error("max_ack_delay too large"));
        }
        if p.active_connection_id_limit < 2 {
            return Err(tp_error("active_connection_id_limit below 2"));
        }
        if p.initial_max_streams_bidi > 1 << 60 || p.initial_max_streams_uni > 1 << 60 {
            return Err(tp_error("stream limit above 2^60"));
        }
        Ok(p)
    }

    /// The subset a client remembers for 0-RTT on a later connection.
    pub fn remembered(&self) -> TransportParameters {
        TransportParameters {
            max_idle_timeout_ms: self.max_idle_timeout_ms,
            initial_max_data: self.initial_max_data,
            initial_max_stream_data_bidi_local: self.initial_max_stream_data_bidi_local,
            initial_max_stream_data_bidi_remote: self.initial_max_stream_data_bidi_remote,
            initial_max_stream_data_uni: self.initial_max_stream_data_uni,
            initial_max_streams_bidi: self.initial_max_streams_bidi,
            initial_max_streams_uni: self.initial_max_streams_uni,
            active_connection_id_limit: self.active_connection_id_limit,
            max_datagram_frame_size: self.max_datagram_frame_size,
            early_data_allowed: self.early_data_allowed,
            ..TransportParameters::default()
        }
    }
}

/// Connection ids each side observed during the handshake, which the peer's
/// parameters must echo.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ObservedCids {
    /// Destination id of the client's first Initial.
    pub original_destination: ConnectionId,
    /// Source id of the peer's first packet.
    pub peer_initial_source: ConnectionId,
    /// Source id of the Retry packet, if one was received.
    pub retry_source: Option<ConnectionId>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EffectiveLimits {
    /// `None` when both sides disabled the idle timeout.
    pub idle_timeout_ms: Option<u64>,
    pub send_max_data: u64,
    /// Peer's window on bidirectional streams the peer opens.
    pub send_max_stream_data_bidi_local: u64,
    /// Peer's window on bidirectional streams we open.
    pub send_max_stream_data_bidi_remote: u64,
    pub send_max_stream_data_uni: u64,
    pub send_max_streams_bidi: u64,
    pub send_max_streams_uni: u64,
    pub datagrams_enabled: bool,
    pub peer_max_datagram_frame_size: u64,
    pub peer_max_ack_delay_ms: u64,
    pub peer_ack_delay_exponent: u64,
    pub peer_active_cid_limit: u64,
}

/// Lower of the two non-zero idle timeouts.
pub fn effective_idle_timeout(a: u64, b: u64) -> Option<u64> {
    match (a, b) {
        (0, 0) => None,
        (0, x) | (x, 0) => Some(x),
        (x, y) => Some(x.min(y)),
    }
}

/// Combines both parameter sets. Limits on what we send come from the
/// peer's set; `peer_side` says which role the peer plays so the right
/// connection id echoes can be checked.
pub fn reconcile(
    local: &TransportParameters,
    peer: &TransportParameters,
    peer_side: Side,
    observed: &ObservedCids,
) -> Result<EffectiveLimits, TransportError> {
    if peer.initial_source_cid != Some(observed.peer_initial_source) {
        return Err(tp_error("initial_source_connection_id mismatch"));
    }
    match peer_side {
        Side::Server => {
            if peer.original_destination_cid != Some(observed.original_destination) {
                return Err(tp_error("original_destination_connection_id mismatch"));
            }
            if peer.retry_source_cid != observed.retry_source {
                return Err(tp_error("retry_source_connection_id mismatch"));
            }
        }
        Side::Client => {
            if peer.original_destination_cid.is_some()
                || peer.retry_source_cid.is_some()
                || peer.stateless_reset_token.is_some()
            {
                return Err(tp_error("client sent a server-only parameter"));
            }
        }
    }
    Ok(EffectiveLimits {
        idle_timeout_ms: effective_idle_timeout(local.max_idle_timeout_ms, peer.max_idle_timeout_ms),
        send_max_data: peer.initial_max_data,
        send_max_stream_data_bidi_local: peer.initial_max_stream_data_bidi_local,
        send_max_stream_data_bidi_remote: peer.initial_max_stream_data_bidi_remote,
        send_max_stream_data_uni: peer.initial_max_stream_data_uni,
        send_max_streams_bidi: peer.initial_max_streams_bidi,
        send_max_streams_uni: peer.initial_max_streams_uni,
        datagrams_enabled: local.max_datagram_frame_size > 0 && peer.max_datagram_frame_size > 0,
        peer_max_datagram_frame_size: peer.max_datagram_frame_size,
        peer_max_ack_delay_ms: peer.max_ack_delay_ms,
        peer_ack_delay_exponent: peer.ack_delay_exponent,
        peer_active_cid_limit: peer.active_connection_id_limit,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cid(b: u8) -> ConnectionId {
        ConnectionId::new(&[b; 8]).unwrap()
    }

    fn observed() -> ObservedCids {
        ObservedCids {
            original_destination: cid(1),
            peer_initial_source: cid(2),
            retry_source: None,
        }
    }

    fn server_params() -> TransportParameters {
        TransportParameters {
            max_idle_timeout_ms: 10_000,
            initial_source_cid: Some(cid(2)),
            original_destination_cid: Some(cid(1)),
            stateless_reset_token: Some([9; 16]),
            ..Default::default()
        }
    }

    #[test]
    fn default_encodes_empty() {
        assert!(TransportParameters::default().encode().is_empty());
        assert_eq!(TransportParameters::decode(&[]).unwrap(), TransportParameters::default());
    }

    #[test]
    fn unknown_ids_skipped() {
        let mut buf = vec![];
        put_param(&mut buf, 0x3fff, b"whatever");
        put_int_param(&mut buf, id::INITIAL_MAX_DATA, 77);
        let p = TransportParameters::decode(&buf).unwrap();
        assert_eq!(p.initial_max_data, 77);
    }

    #[test]
    fn repeated_id_rejected() {
        let mut buf = vec![];
        put_int_param(&mut buf, id::INITIAL_MAX_DATA, 1);
        put_int_param(&mut buf, id::INITIAL_MAX_DATA, 2);
        assert!(TransportParameters::decode(&buf).is_err());
    }

    #[test]
    fn idle_timeout_min_rule() {
        let local = TransportParameters {
            max_idle_timeout_ms: 30_000,
            ..Default::default()
        };
        let lim = reconcile(&local, &server_params(), Side::Server, &observed()).unwrap();
        assert_eq!(lim.idle_timeout_ms, Some(10_000));
        assert_eq!(effective_idle_timeout(0, 0), None);
        assert_eq!(effective_idle_timeout(0, 5), Some(5));
        for (a, b) in [(1, 2), (0, 9), (7, 7), (100, 3)] {
            assert_eq!(effective_idle_timeout(a, b), effective_idle_timeout(b, a));
        }
    }

    #[test]
    fn datagrams_need_both_sides() {
        let local = TransportParameters {
            max_datagram_frame_size: 1200,
            ..Default::default()
        };
        let lim = reconcile(&local, &server_params(), Side::Server, &observed()).unwrap();
        assert!(!lim.datagrams_enabled);
        let peer = TransportParameters {
            max_datagram_frame_size: 1200,
            ..server_params()
        };
        assert!(reconcile(&local, &peer, Side::Server, &observed()).unwrap().datagrams_enabled);
    }

    #[test]
    fn cid_echo_checked() {
        let peer = TransportParameters {
            original_destination_cid: Some(cid(5)),
            ..server_params()
        };
        let err = reconcile(&TransportParameters::default(), &peer, Side::Server, &observed()).unwrap_err();
        assert_eq!(err.code, code::TRANSPORT_PARAMETER_ERROR);
        let with_retry = ObservedCids {
            retry_source: Some(cid(3)),
            ..observed()
        };
        assert!(reconcile(&TransportParameters::default(), &server_params(), Side::Server, &with_retry).is_err());
    }

    #[test]
    fn client_may_not_send_server_params() {
        let peer = TransportParameters {
            initial_source_cid: Some(cid(2)),
            stateless_reset_token: Some([0; 16]),
            ..Default::default()
        };
        assert!(reconcile(&TransportParameters::default(), &peer, Side::Client, &observed()).is_err());
    }

    fn arb_params() -> impl Strategy<Value = TransportParameters> {
        let v = || 0u64..(1 << 40);
        let ocid = || proptest::option::of(proptest::collection::vec(any::<u8>(), 0..=20).prop_map(|b| ConnectionId::new(&b).unwrap()));
        (
            (v(), v(), v(), v(), v(), 0u64..=(1 << 60), 0u64..=(1 << 60)),
            (0u64..(1 << 14), 0u64..=20, 2u64..100, v()),
            (
                proptest::option::of((any::<u32>(), proptest::collection::vec(any::<u32>(), 0..4))),
                ocid(),
                ocid(),
                ocid(),
                proptest::option::of(any::<[u8; 16]>()),
                any::<bool>(),
            ),
        )
            .prop_map(|(a, b, c)| TransportParameters {
                max_idle_timeout_ms: a.0,
                initial_max_data: a.1,
                initial_max_stream_data_bidi_local: a.2,
                initial_max_stream_data_bidi_remote: a.3,
                initial_max_stream_data_uni: a.4,
                initial_max_streams_bidi: a.5,
                initial_max_streams_uni: a.6,
                max_ack_delay_ms: b.0,
                ack_delay_exponent: b.1,
                active_connection_id_limit: b.2,
                max_datagram_frame_size: b.3,
                version_information: c.0.map(|(chosen, available)| VersionInformation { chosen, available }),
                initial_source_cid: c.1,
                original_destination_cid: c.2,
                retry_source_cid: c.3,
                stateless_reset_token: c.4,
                early_data_allowed: c.5,
            })
    }

    proptest! {
        #[test]
        fn roundtrip(p in arb_params()) {
            prop_assert_eq!(TransportParameters::decode(&p.encode()).unwrap(), p);
        }

        #[test]
        fn decode_never_panics(bytes in proptest::collection::vec(any::<u8>(), 0..64)) {
            let _ = TransportParameters::decode(&bytes);
        }
    }
}

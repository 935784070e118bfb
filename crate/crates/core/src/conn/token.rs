//! Address validation tokens and stateless reset tokens.

use std::time::Duration;

use crate::codec::{put_cid, ConnectionId, Reader};
use crate::protection::hash;
use crate::simnet::Addr;
use crate::time::Instant;

use super::handshake::ct_eq;

/// Retry tokens only need to survive one round trip.
pub const RETRY_TOKEN_LIFETIME: Duration = Duration::from_secs(10);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenOrigin {
    Retry,
    NewToken,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AddressToken {
    pub origin: TokenOrigin,
    pub issued_at: Instant,
    pub client: Addr,
    /// Destination id of the client's first Initial (Retry tokens only).
    pub original_dcid: ConnectionId,
    /// Source id the Retry packet carried (Retry tokens only).
    pub retry_scid: ConnectionId,
}

impl AddressToken {
    pub fn seal(&self, key: &[u8; 32]) -> Vec<u8> {
        let mut body = vec![match self.origin {
            TokenOrigin::Retry => 0,
            TokenOrigin::NewToken => 1,
        }];
        body.extend_from_slice(&self.issued_at.as_micros().to_be_bytes());
        body.extend_from_slice(&self.client.host.to_be_bytes());
        body.extend_from_slice(&self.client.port.to_be_bytes());
        put_cid(&mut body, &self.original_dcid);
        put_cid(&mut body, &self.retry_scid);
        let mac = hash(&[b"token", key, &body]);
        body.extend_from_slice(&mac[..16]);
        body
    }

    pub fn open(key: &[u8; 32], bytes: &[u8]) -> Option<AddressToken> {
        if bytes.len() < 16 {
            return None;
        }
        let (body, mac) = bytes.split_at(bytes.len() - 16);
        if !ct_eq(&hash(&[b"token", key, body])[..16], mac) {
            return None;
        }
        let mut r = Reader::new(body);
        let origin = match r.u8().ok()? {
            0 => TokenOrigin::Retry,
            1 => TokenOrigin::NewToken,
            _ => return None,
        };
        let issued_at = Instant::from_micros(r.u64().ok()?);
        let host = r.u32().ok()?;
        let port = r.u16().ok()?;
        let original_dcid = r.cid().ok()?;
        let retry_scid = r.cid().ok()?;
        r.is_empty().then_some(AddressToken {
            origin,
            issued_at,
            client: Addr { host, port },
            original_dcid,
            retry_scid,
        })
    }

    /// Retry tokens bind host and port; NEW_TOKEN tokens only the host,
    /// since a later connection usually comes from a fresh port.
    pub fn is_valid(&self, now: Instant, lifetime: Duration, from: Addr) -> bool {
        let lifetime = match self.origin {
            TokenOrigin::Retry => lifetime.min(RETRY_TOKEN_LIFETIME),
            TokenOrigin::NewToken => lifetime,
        };
        let fresh = now.saturating_duration_since(self.issued_at) <= lifetime && now >= self.issued_at;
        let bound = match self.origin {
            TokenOrigin::Retry => self.client == from,
            TokenOrigin::NewToken => self.client.host == from.host,
        };
        fresh && bound
    }
}

pub fn reset_token(key: &[u8; 32], cid: &ConnectionId) -> [u8; 16] {
    hash(&[b"reset", key, cid.as_bytes()])[..16].try_into().expect("16 bytes")
}

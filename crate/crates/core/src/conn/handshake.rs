//! A two-flight handshake standing in for TLS 1.3.
//!
//! Messages are `[type u8][length u24][body]` records carried on the CRYPTO
//! streams. Secrets come from SHA-256 over the two randoms and the running
//! transcript; Finished carries a keyed checksum of every prior message.
//!
//! ```text
//! Client                                   Server
//! ClientHello            (Initial)  ->
//!                                   <-  ServerHello          (Initial)
//!                                   <-  EncryptedExtensions  (Handshake)
//!                                   <-  Finished             (Handshake)
//! Finished               (Handshake) ->
//!                                   <-  NewSessionTicket     (1-RTT)
//! ```

use std::collections::VecDeque;

use rand::RngCore;

use crate::codec::Reader;
use crate::error::{code, TransportError};
use crate::protection::{hash, SuiteKind};
use crate::streams::Side;
use crate::time::Instant;

pub const CLIENT_HELLO: u8 = 1;
pub const SERVER_HELLO: u8 = 2;
pub const NEW_SESSION_TICKET: u8 = 4;
pub const ENCRYPTED_EXTENSIONS: u8 = 8;
pub const FINISHED: u8 = 20;

// TLS alert numbers, carried as CRYPTO_ERROR + alert.
const ALERT_UNEXPECTED_MESSAGE: u64 = 10;
const ALERT_HANDSHAKE_FAILURE: u64 = 40;
const ALERT_BAD_CERTIFICATE: u64 = 42;
const ALERT_DECODE_ERROR: u64 = 50;
const ALERT_DECRYPT_ERROR: u64 = 51;

const MAX_MESSAGE: usize = 16 * 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Level {
    Initial,
    ZeroRtt,
    Handshake,
    OneRtt,
}

fn level_index(level: Level) -> usize {
    match level {
        Level::Initial => 0,
        Level::ZeroRtt => 1,
        Level::Handshake => 2,
        Level::OneRtt => 3,
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClientHello {
    pub random: [u8; 32],
    pub suite: SuiteKind,
    pub server_name: String,
    pub tparams: Vec<u8>,
    pub early_data: bool,
    pub ticket: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ServerHello {
    pub random: [u8; 32],
    pub suite: SuiteKind,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncryptedExtensions {
    pub tparams: Vec<u8>,
    pub early_data_accepted: bool,
    pub server_identity: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NewSessionTicket {
    pub lifetime_s: u32,
    pub ticket: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Message {
    ClientHello(ClientHello),
    ServerHello(ServerHello),
    EncryptedExtensions(EncryptedExtensions),
    Finished([u8; 32]),
    NewSessionTicket(NewSessionTicket),
}

fn suite_byte(s: SuiteKind) -> u8 {
    match s {
        SuiteKind::Null => 0,
        SuiteKind::Toy => 1,
    }
}

fn decode_error(what: &str) -> TransportError {
    TransportError::new(code::CRYPTO_ERROR + ALERT_DECODE_ERROR, format!("bad handshake message: {what}"))
}

fn put_short_bytes(out: &mut Vec<u8>, b: &[u8]) {
    out.push(b.len() as u8);
    out.extend_from_slice(b);
}

fn put_long_bytes(out: &mut Vec<u8>, b: &[u8]) {
    out.extend_from_slice(&(b.len() as u16).to_be_bytes());
    out.extend_from_slice(b);
}

impl Message {
    pub fn type_byte(&self) -> u8 {
        match self {
            Message::ClientHello(_) => CLIENT_HELLO,
            Message::ServerHello(_) => SERVER_HELLO,
            Message::EncryptedExtensions(_) => ENCRYPTED_EXTENSIONS,
            Message::Finished(_) => FINISHED,
            Message::NewSessionTicket(_) => NEW_SESSION_TICKET,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Message::ClientHello(_) => "ClientHello",
            Message::ServerHello(_) => "ServerHello",
            Message::EncryptedExtensions(_) => "EncryptedExtensions",
            Message::Finished(_) => "Finished",
            Message::NewSessionTicket(_) => "NewSessionTicket",
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut body = Vec::new();
        match self {
            Message::ClientHello(m) => {
                body.extend_from_slice(&m.random);
                body.push(suite_byte(m.suite));
                put_short_bytes(&mut body, m.server_name.as_bytes());
                put_long_bytes(&mut body, &m.tparams);
                body.push(m.early_data as u8);
                put_long_bytes(&mut body, &m.ticket);
            }
            Message::ServerHello(m) => {
                body.extend_from_slice(&m.random);
                body.push(suite_byte(m.suite));
            }
            Message::EncryptedExtensions(m) => {
                put_long_bytes(&mut body, &m.tparams);
                body.push(m.early_data_accepted as u8);
                put_short_bytes(&mut body, m.server_identity.as_bytes());
            }
            Message::Finished(v) => body.extend_from_slice(v),
            Message::NewSessionTicket(m) => {
                body.extend_from_slice(&m.lifetime_s.to_be_bytes());
                put_long_bytes(&mut body, &m.ticket);
            }
        }
        let mut out = vec![self.type_byte()];
        out.extend_from_slice(&(body.len() as u32).to_be_bytes()[1..]);
        out.extend_from_slice(&body);
        out
    }

    pub fn decode(ty: u8, body: &[u8]) -> Result<Message, TransportError> {
        let mut r = Reader::new(body);
        let e = |_| decode_error("truncated");
        let suite = |b: u8| match b {
            0 => Ok(SuiteKind::Null),
            1 => Ok(SuiteKind::Toy),
            _ => Err(decode_error("unknown suite")),
        };
        let text = |b: &[u8]| String::from_utf8(b.to_vec()).map_err(|_| decode_error("identity not utf-8"));
        let msg = match ty {
            CLIENT_HELLO => {
                let random = r.array::<32>().map_err(e)?;
                let s = suite(r.u8().map_err(e)?)?;
                let n = r.u8().map_err(e)? as usize;
                let server_name = text(r.bytes(n).map_err(e)?)?;
                let n = r.u16().map_err(e)? as usize;
                let tparams = r.bytes(n).map_err(e)?.to_vec();
                let early_data = r.u8().map_err(e)? != 0;
                let n = r.u16().map_err(e)? as usize;
                let ticket = r.bytes(n).map_err(e)?.to_vec();
                Message::ClientHello(ClientHello {
                    random,
                    suite: s,
                    server_name,
                    tparams,
                    early_data,
                    ticket,
                })
            }
            SERVER_HELLO => {
                let random = r.array::<32>().map_err(e)?;
                let s = suite(r.u8().map_err(e)?)?;
                Message::ServerHello(ServerHello { random, suite: s })
            }
            ENCRYPTED_EXTENSIONS => {
                let n = r.u16().map_err(e)? as usize;
                let tparams = r.bytes(n).map_err(e)?.to_vec();
                let early_data_accepted = r.u8().map_err(e)? != 0;
                let n = r.u8().map_err(e)? as usize;
                let server_identity = text(r.bytes(n).map_err(e)?)?;
                Message::EncryptedExtensions(EncryptedExtensions {
                    tparams,
                    early_data_accepted,
                    server_identity,
                })
            }
            FINISHED => Message::Finished(r.array::<32>().map_err(e)?),
            NEW_SESSION_TICKET => {
                let lifetime_s = r.u32().map_err(e)?;
                let n = r.u16().map_err(e)? as usize;
                let ticket = r.bytes(n).map_err(e)?.to_vec();
                Message::NewSessionTicket(NewSessionTicket { lifetime_s, ticket })
            }
            other => return Err(decode_error(&format!("unknown message type {other}"))),
        };
        if !r.is_empty() {
            return Err(decode_error("trailing bytes"));
        }
        Ok(msg)
    }
}

/// Splits complete messages off the front of `buf`.
fn take_message(buf: &mut Vec<u8>) -> Result<Option<(Vec<u8>, Message)>, TransportError> {
    if buf.len() < 4 {
        return Ok(None);
    }
    let len = u32::from_be_bytes([0, buf[1], buf[2], buf[3]]) as usize;
    if len > MAX_MESSAGE {
        return Err(decode_error("message too long"));
    }
    if buf.len() < 4 + len {
        return Ok(None);
    }
    let raw: Vec<u8> = buf.drain(..4 + len).collect();
    let msg = Message::decode(raw[0], &raw[4..])?;
    Ok(Some((raw, msg)))
}

/// Secrets for one encryption level. Either side may be absent, e.g. 0-RTT
/// keys exist only for the client's sending and the server's receiving.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KeyChange {
    pub level: Level,
    pub local: Option<[u8; 32]>,
    pub remote: Option<[u8; 32]>,
}

/// What a client remembers to resume with a server.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ResumptionState {
    pub ticket: Vec<u8>,
    pub secret: [u8; 32],
}

/// Contents of a ticket the server issued, after its MAC checked out.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TicketContents {
    pub secret: [u8; 32],
    pub issued_at: Instant,
    pub suite: SuiteKind,
    pub tparams: Vec<u8>,
}

pub fn seal_ticket(key: &[u8; 32], contents: &TicketContents) -> Vec<u8> {
    let mut body = contents.secret.to_vec();
    body.extend_from_slice(&contents.issued_at.as_micros().to_be_bytes());
    body.push(suite_byte(contents.suite));
    put_long_bytes(&mut body, &contents.tparams);
    // Synthetic nonce: deterministic, yet distinct for distinct contents.
    let nonce: [u8; 16] = hash(&[b"ticket iv", key, &body])[..16].try_into().expect("16 bytes");
    ticket_keystream(key, &nonce, &mut body);
    let mut out = nonce.to_vec();
    out.extend_from_slice(&body);
    let mac = hash(&[b"ticket", key, &out]);
    out.extend_from_slice(&mac[..16]);
    out
}

fn ticket_keystream(key: &[u8; 32], nonce: &[u8; 16], data: &mut [u8]) {
    for (i, chunk) in data.chunks_mut(32).enumerate() {
        let block = hash(&[b"ticket ks", key, nonce, &(i as u64).to_be_bytes()]);
        for (b, k) in chunk.iter_mut().zip(block) {
            *b ^= k;
        }
    }
}

pub fn open_ticket(key: &[u8; 32], ticket: &[u8]) -> Option<TicketContents> {
    if ticket.len() < 32 {
        return None;
    }
    let (sealed, mac) = ticket.split_at(ticket.len() - 16);
    if !ct_eq(&hash(&[b"ticket", key, sealed])[..16], mac) {
        return None;
    }
    let nonce: [u8; 16] = sealed[..16].try_into().expect("16 bytes");
    let mut body = sealed[16..].to_vec();
    ticket_keystream(key, &nonce, &mut body);
    let mut r = Reader::new(&body);
    let secret = r.array::<32>().ok()?;
    let issued_at = Instant::from_micros(r.u64().ok()?);
    let suite = match r.u8().ok()? {
        0 => SuiteKind::Null,
        1 => SuiteKind::Toy,
        _ => return None,
    };
    let n = r.u16().ok()? as usize;
    let tparams = r.bytes(n).ok()?.to_vec();
    Some(TicketContents {
        secret,
        issued_at,
        suite,
        tparams,
    })
}

/// Comparison whose duration does not depend on where the inputs differ.
pub fn ct_eq(a: &[u8], b: &[u8]) -> bool {
    a.len() == b.len() && a.iter().zip(b).fold(0u8, |acc, (x, y)| acc | (x ^ y)) == 0
}

pub fn early_secret(resumption: &[u8; 32], client_random: &[u8; 32]) -> [u8; 32] {
    hash(&[b"early", resumption, client_random])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum HsState {
    ClientWaitServerHello,
    ClientWaitEncryptedExtensions,
    ClientWaitFinished,
    ServerWaitClientHello,
    /// ClientHello parsed; waiting for the connection to call `accept`.
    ServerAccepting,
    ServerWaitFinished,
    Done,
}

#[derive(Debug)]
pub struct Handshake {
    side: Side,
    suite: SuiteKind,
    /// Client: the identity it expects. Server: its own identity.
    identity: String,
    state: HsState,
    transcript: Vec<u8>,
    client_random: [u8; 32],
    hs_secret: [u8; 32],
    client_hs: [u8; 32],
    server_hs: [u8; 32],
    buffers: [Vec<u8>; 4],
    outputs: VecDeque<(Level, Vec<u8>)>,
    keys: VecDeque<KeyChange>,
    client_hello: Option<ClientHello>,
    peer_tparams: Option<Vec<u8>>,
    early_requested: bool,
    early_accepted: bool,
    resumption: Option<ResumptionState>,
    resumption_secret: Option<[u8; 32]>,
    tickets: VecDeque<NewSessionTicket>,
    log: VecDeque<(Level, &'static str, bool)>,
}

impl Handshake {
    fn blank(side: Side, suite: SuiteKind, identity: String, state: HsState) -> Self {
        Handshake {
            side,
            suite,
            identity,
            state,
            transcript: Vec::new(),
            client_random: [0; 32],
            hs_secret: [0; 32],
            client_hs: [0; 32],
            server_hs: [0; 32],
            buffers: Default::default(),
            outputs: VecDeque::new(),
            keys: VecDeque::new(),
            client_hello: None,
            peer_tparams: None,
            early_requested: false,
            early_accepted: false,
            resumption: None,
            resumption_secret: None,
            tickets: VecDeque::new(),
            log: VecDeque::new(),
        }
    }

    /// Starts a client handshake and queues the ClientHello. With
    /// `resumption` and `early_data`, 0-RTT keys are made available at once.
    pub fn client<R: RngCore>(
        rng: &mut R,
        suite: SuiteKind,
        server_name: &str,
        tparams: Vec<u8>,
        resumption: Option<ResumptionState>,
        early_data: bool,
    ) -> Self {
        let mut hs = Handshake::blank(Side::Client, suite, server_name.to_string(), HsState::ClientWaitServerHello);
        rng.fill_bytes(&mut hs.client_random);
        let early = early_data && resumption.is_some();
        let ch = Message::ClientHello(ClientHello {
            random: hs.client_random,
            suite,
            server_name: server_name.to_string(),
            tparams,
            early_data: early,
            ticket: resumption.as_ref().map(|r| r.ticket.clone()).unwrap_or_default(),
        });
        hs.emit(Level::Initial, &ch);
        if early {
            let secret = early_secret(&resumption.as_ref().expect("checked").secret, &hs.client_random);
            hs.keys.push_back(KeyChange {
                level: Level::ZeroRtt,
                local: Some(secret),
                remote: None,
            });
        }
        hs.early_requested = early;
        hs.resumption = resumption;
        hs
    }

    pub fn server(suite: SuiteKind, identity: &str) -> Self {
        Handshake::blank(Side::Server, suite, identity.to_string(), HsState::ServerWaitClientHello)
    }

    fn emit(&mut self, level: Level, msg: &Message) {
        let bytes = msg.encode();
        if !matches!(msg, Message::NewSessionTicket(_)) {
            self.transcript.extend_from_slice(&bytes);
        }
        self.log.push_back((level, msg.name(), true));
        self.outputs.push_back((level, bytes));
    }

    fn transcript_hash(&self) -> [u8; 32] {
        hash(&[&self.transcript])
    }

    fn derive_handshake_secrets(&mut self, server_random: &[u8; 32]) {
        self.hs_secret = hash(&[b"hs", &self.client_random, server_random, &[suite_byte(self.suite)]]);
        self.client_hs = hash(&[b"c hs traffic", &self.hs_secret]);
        self.server_hs = hash(&[b"s hs traffic", &self.hs_secret]);
    }

    fn app_secrets(&self) -> ([u8; 32], [u8; 32]) {
        let th = self.transcript_hash();
        (
            hash(&[b"c ap traffic", &self.hs_secret, &th]),
            hash(&[b"s ap traffic", &self.hs_secret, &th]),
        )
    }

    fn finished_value(&self, base: &[u8; 32]) -> [u8; 32] {
        hash(&[b"finished", base, &self.transcript_hash()])
    }

    pub fn side(&self) -> Side {
        self.side
    }

    pub fn is_complete(&self) -> bool {
        self.state == HsState::Done
    }

    pub fn poll_output(&mut self) -> Option<(Level, Vec<u8>)> {
        self.outputs.pop_front()
    }

    pub fn poll_keys(&mut self) -> Option<KeyChange> {
        self.keys.pop_front()
    }

    pub fn poll_ticket(&mut self) -> Option<NewSessionTicket> {
        self.tickets.pop_front()
    }

    /// Messages sent (`true`) or received, in order, for tracing.
    pub fn poll_log(&mut self) -> Option<(Level, &'static str, bool)> {
        self.log.pop_front()
    }

    /// Server: the ClientHello awaiting `accept`.
    pub fn client_hello(&self) -> Option<&ClientHello> {
        (self.state == HsState::ServerAccepting).then_some(self.client_hello.as_ref()).flatten()
    }

    pub fn peer_tparams(&self) -> Option<&[u8]> {
        self.peer_tparams.as_deref()
    }

    pub fn early_data_requested(&self) -> bool {
        self.early_requested
    }

    pub fn early_data_accepted(&self) -> bool {
        self.early_accepted
    }

    pub fn resumption_secret(&self) -> Option<[u8; 32]> {
        self.resumption_secret
    }

    /// Feeds handshake bytes received at `level`.
    pub fn read(&mut self, level: Level, data: &[u8]) -> Result<(), TransportError> {
        let idx = level_index(level);
        self.buffers[idx].extend_from_slice(data);
        loop {
            if self.state == HsState::ServerAccepting {
                return Ok(());
            }
            let mut buf = std::mem::take(&mut self.buffers[idx]);
            let next = take_message(&mut buf);
            self.buffers[idx] = buf;
            let Some((raw, msg)) = next? else {
                return Ok(());
            };
            self.log.push_back((level, msg.name(), false));
            self.process(level, raw, msg)?;
        }
    }

    fn unexpected(&self, msg: &Message) -> TransportError {
        TransportError::new(
            code::CRYPTO_ERROR + ALERT_UNEXPECTED_MESSAGE,
            format!("unexpected {} in state {:?}", msg.name(), self.state),
        )
    }

    fn process(&mut self, level: Level, raw: Vec<u8>, msg: Message) -> Result<(), TransportError> {
        match (self.state, level, msg) {
            (HsState::ServerWaitClientHello, Level::Initial, Message::ClientHello(ch)) => {
                self.transcript.extend_from_slice(&raw);
                self.client_random = ch.random;
                self.peer_tparams = Some(ch.tparams.clone());
                self.early_requested = ch.early_data;
                self.client_hello = Some(ch);
                self.state = HsState::ServerAccepting;
                Ok(())
            }
            (HsState::ClientWaitServerHello, Level::Initial, Message::ServerHello(sh)) => {
                if sh.suite != self.suite {
                    return Err(TransportError::new(
                        code::CRYPTO_ERROR + ALERT_HANDSHAKE_FAILURE,
                        "server chose a suite that was not offered",
                    ));
                }
                self.transcript.extend_from_slice(&raw);
                self.derive_handshake_secrets(&sh.random);
                self.keys.push_back(KeyChange {
                    level: Level::Handshake,
                    local: Some(self.client_hs),
                    remote: Some(self.server_hs),
                });
                self.state = HsState::ClientWaitEncryptedExtensions;
                Ok(())
            }
            (HsState::ClientWaitEncryptedExtensions, Level::Handshake, Message::EncryptedExtensions(ee)) => {
                if ee.server_identity != self.identity {
                    return Err(TransportError::new(
                        code::CRYPTO_ERROR + ALERT_BAD_CERTIFICATE,
                        format!("server identity {:?} does not match {:?}", ee.server_identity, self.identity),
                    ));
                }
                self.transcript.extend_from_slice(&raw);
                self.early_accepted = self.early_requested && ee.early_data_accepted;
                self.peer_tparams = Some(ee.tparams);
                self.state = HsState::ClientWaitFinished;
                Ok(())
            }
            (HsState::ClientWaitFinished, Level::Handshake, Message::Finished(v)) => {
                if !ct_eq(&v, &self.finished_value(&self.server_hs)) {
                    return Err(TransportError::new(
                        code::CRYPTO_ERROR + ALERT_DECRYPT_ERROR,
                        "server Finished does not match transcript",
                    ));
                }
                self.transcript.extend_from_slice(&raw);
                let (c_ap, s_ap) = self.app_secrets();
                self.keys.push_back(KeyChange {
                    level: Level::OneRtt,
                    local: Some(c_ap),
                    remote: Some(s_ap),
                });
                let fin = Message::Finished(self.finished_value(&self.client_hs));
                self.emit(Level::Handshake, &fin);
                self.resumption_secret = Some(hash(&[b"res", &self.hs_secret, &self.transcript_hash()]));
                self.state = HsState::Done;
                Ok(())
            }
            (HsState::ServerWaitFinished, Level::Handshake, Message::Finished(v)) => {
                if !ct_eq(&v, &self.finished_value(&self.client_hs)) {
                    return Err(TransportError::new(
                        code::CRYPTO_ERROR + ALERT_DECRYPT_ERROR,
                        "client Finished does not match transcript",
                    ));
                }
                self.transcript.extend_from_slice(&raw);
                self.resumption_secret = Some(hash(&[b"res", &self.hs_secret, &self.transcript_hash()]));
                self.state = HsState::Done;
                Ok(())
            }
            (HsState::Done, Level::OneRtt, Message::NewSessionTicket(t)) if self.side == Side::Client => {
                self.tickets.push_back(t);
                Ok(())
            }
            (_, _, msg) => Err(self.unexpected(&msg)),
        }
    }

    /// Server: answers the pending ClientHello. `early` carries the
    /// resumption secret when 0-RTT is accepted.
    pub fn accept<R: RngCore>(
        &mut self,
        rng: &mut R,
        tparams: Vec<u8>,
        early: Option<[u8; 32]>,
    ) -> Result<(), TransportError> {
        let ch = match (self.state, &self.client_hello) {
            (HsState::ServerAccepting, Some(ch)) => ch.clone(),
            _ => return Err(TransportError::new(code::INTERNAL_ERROR, "no ClientHello to accept")),
        };
        if ch.suite != self.suite {
            return Err(TransportError::new(
                code::CRYPTO_ERROR + ALERT_HANDSHAKE_FAILURE,
                format!("client offered suite {}, server requires {}", ch.suite.name(), self.suite.name()),
            ));
        }
        if ch.server_name != self.identity {
            return Err(TransportError::new(
                code::CRYPTO_ERROR + ALERT_HANDSHAKE_FAILURE,
                format!("unknown server name {:?}", ch.server_name),
            ));
        }
        let mut server_random = [0u8; 32];
        rng.fill_bytes(&mut server_random);
        self.emit(Level::Initial, &Message::ServerHello(ServerHello {
            random: server_random,
            suite: self.suite,
        }));
        self.derive_handshake_secrets(&server_random);
        self.keys.push_back(KeyChange {
            level: Level::Handshake,
            local: Some(self.server_hs),
            remote: Some(self.client_hs),
        });
        self.early_accepted = ch.early_data && early.is_some();
        if self.early_accepted {
            self.keys.push_back(KeyChange {
                level: Level::ZeroRtt,
                local: None,
                remote: Some(early_secret(&early.expect("checked"), &ch.random)),
            });
        }
        self.emit(Level::Handshake, &Message::EncryptedExtensions(EncryptedExtensions {
            tparams,
            early_data_accepted: self.early_accepted,
            server_identity: self.identity.clone(),
        }));
        let fin = Message::Finished(self.finished_value(&self.server_hs));
        self.emit(Level::Handshake, &fin);
        let (c_ap, s_ap) = self.app_secrets();
        self.keys.push_back(KeyChange {
            level: Level::OneRtt,
            local: Some(s_ap),
            remote: Some(c_ap),
        });
        self.state = HsState::ServerWaitFinished;
        Ok(())
    }

    /// Server, after completion: queues a NewSessionTicket.
    pub fn send_ticket(&mut self, lifetime_s: u32, ticket: Vec<u8>) {
        debug_assert!(self.side == Side::Server && self.is_complete());
        self.emit(Level::OneRtt, &Message::NewSessionTicket(NewSessionTicket { lifetime_s, ticket }));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn pump(from: &mut Handshake, to: &mut Handshake) -> Result<(), TransportError> {
        while let Some((level, bytes)) = from.poll_output() {
            // Deliver in small pieces to exercise reassembly of records.
            for chunk in bytes.chunks(7) {
                to.read(level, chunk)?;
            }
        }
        Ok(())
    }

    fn keys(hs: &mut Handshake) -> Vec<KeyChange> {
        std::iter::from_fn(|| hs.poll_keys()).collect()
    }

    #[test]
    fn full_handshake_agrees_on_secrets() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut c = Handshake::client(&mut rng, SuiteKind::Toy, "srv", vec![1, 2], None, false);
        let mut s = Handshake::server(SuiteKind::Toy, "srv");
        pump(&mut c, &mut s).unwrap();
        assert_eq!(s.client_hello().unwrap().tparams, vec![1, 2]);
        s.accept(&mut rng, vec![3], None).unwrap();
        pump(&mut s, &mut c).unwrap();
        assert!(c.is_complete());
        assert_eq!(c.peer_tparams(), Some(&[3u8][..]));
        pump(&mut c, &mut s).unwrap();
        assert!(s.is_complete());
        let ck = keys(&mut c);
        let sk = keys(&mut s);
        for level in [Level::Handshake, Level::OneRtt] {
            let a = ck.iter().find(|k| k.level == level).unwrap();
            let b = sk.iter().find(|k| k.level == level).unwrap();
            assert_eq!(a.local, b.remote);
            assert_eq!(a.remote, b.local);
        }
        assert_eq!(c.resumption_secret(), s.resumption_secret());
    }

    #[test]
    fn identity_mismatch_fails() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut c = Handshake::client(&mut rng, SuiteKind::Null, "expected", vec![], None, false);
        let mut s = Handshake::server(SuiteKind::Null, "expected");
        pump(&mut c, &mut s).unwrap();
        s.identity = "impostor".into();
        s.client_hello.as_mut().unwrap().server_name = "impostor".into();
        s.accept(&mut rng, vec![], None).unwrap();
        let err = pump(&mut s, &mut c).unwrap_err();
        assert_eq!(err.code, code::CRYPTO_ERROR + ALERT_BAD_CERTIFICATE);
    }

    #[test]
    fn tampered_finished_fails() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut c = Handshake::client(&mut rng, SuiteKind::Null, "s", vec![], None, false);
        let mut s = Handshake::server(SuiteKind::Null, "s");
        pump(&mut c, &mut s).unwrap();
        s.accept(&mut rng, vec![], None).unwrap();
        let mut out: Vec<_> = std::iter::from_fn(|| s.poll_output()).collect();
        let last = out.last_mut().unwrap();
        let n = last.1.len();
        last.1[n - 1] ^= 1;
        let r: Result<(), _> = out.into_iter().try_for_each(|(l, b)| c.read(l, &b));
        assert_eq!(r.unwrap_err().code, code::CRYPTO_ERROR + ALERT_DECRYPT_ERROR);
    }

    #[test]
    fn early_data_keys_match() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let res = ResumptionState {
            ticket: vec![9; 20],
            secret: [5; 32],
        };
        let mut c = Handshake::client(&mut rng, SuiteKind::Null, "s", vec![], Some(res), true);
        let mut s = Handshake::server(SuiteKind::Null, "s");
        pump(&mut c, &mut s).unwrap();
        assert!(s.client_hello().unwrap().early_data);
        s.accept(&mut rng, vec![], Some([5; 32])).unwrap();
        let c0 = keys(&mut c).into_iter().find(|k| k.level == Level::ZeroRtt).unwrap();
        let s0 = keys(&mut s).into_iter().find(|k| k.level == Level::ZeroRtt).unwrap();
        assert_eq!(c0.local, s0.remote);
        pump(&mut s, &mut c).unwrap();
        assert!(c.early_data_accepted());
    }

    #[test]
    fn ticket_mac() {
        let key = [7u8; 32];
        let t = TicketContents {
            secret: [1; 32],
            issued_at: Instant::from_millis(5),
            suite: SuiteKind::Toy,
            tparams: vec![1, 2, 3],
        };
        let sealed = seal_ticket(&key, &t);
        assert_eq!(open_ticket(&key, &sealed), Some(t));
        let mut bad = sealed.clone();
        bad[0] ^= 1;
        assert_eq!(open_ticket(&key, &bad), None);
        assert_eq!(open_ticket(&[8; 32], &sealed), None);
    }

    #[test]
    fn message_roundtrip() {
        let msgs = [
            Message::ServerHello(ServerHello {
                random: [3; 32],
                suite: SuiteKind::Null,
            }),
            Message::Finished([4; 32]),
            Message::NewSessionTicket(NewSessionTicket {
                lifetime_s: 86400,
                ticket: vec![1; 40],
            }),
        ];
        for m in msgs {
            let mut buf = m.encode();
            let (_, back) = take_message(&mut buf).unwrap().unwrap();
            assert_eq!(back, m);
            assert!(buf.is_empty());
        }
    }
}

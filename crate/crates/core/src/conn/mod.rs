//! Connection state machine.
//!
//! A [`Connection`] is driven from outside: feed it datagrams with
//! [`Connection::handle_datagram`], drain outgoing datagrams with
//! [`Connection::poll_transmit`], and fire [`Connection::handle_timeout`] at
//! the instant [`Connection::poll_timeout`] names. It never reads a clock.

mod crypto;
pub mod handshake;
mod recv;
mod send;
pub mod token;

use std::collections::{BTreeMap, VecDeque};
use std::time::Duration;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};
use thiserror::Error;

use crate::codec::{is_known_version, ConnectionId};
use crate::congestion::{CongestionController, ControllerKind, Pacer, DEFAULT_MAX_DATAGRAM_SIZE};
use crate::error::{code, TransportError};
use crate::flow::{Scope, DEFAULT_CONNECTION_WINDOW, DEFAULT_STREAM_WINDOW};
use crate::frames::{CloseLayer, ConnectionClose, Frame};
use crate::protection::{derive_initial_keys, KeyPair, PacketKey, SuiteKind};
use crate::recovery::{
    persistent_congestion, AckTracker, LossParams, LossTrigger, RttEstimator, SentFrame, SentPacket, SpaceId,
    INITIAL_RTT,
};
use crate::simnet::Addr;
use crate::streams::{Dir, Side, StreamError, StreamEvent, StreamId, StreamLimits, Streams};
use crate::time::Instant;
use crate::trace::{Category, TraceRecord, Tracer};
use crate::tparams::{reconcile, EffectiveLimits, ObservedCids, TransportParameters, VersionInformation};

use crypto::{CryptoRecv, CryptoSend};
use handshake::{Handshake, KeyChange, Level, ResumptionState};
pub use token::{reset_token, AddressToken, TokenOrigin};

/// Smallest datagram that may carry a client Initial.
pub const MIN_INITIAL_SIZE: usize = 1200;
/// Smallest datagram a stateless reset can be disguised as.
pub const MIN_STATELESS_RESET: usize = 21;
const MAX_BUFFERED_PACKETS: usize = 16;
const PMTU_ATTEMPTS: u8 = 3;
const MAX_PROBE_RESPONSES: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum State {
    Idle,
    Handshaking,
    Established,
    Closing,
    Draining,
    Closed,
}

impl State {
    pub fn name(self) -> &'static str {
        match self {
            State::Idle => "idle",
            State::Handshaking => "handshaking",
            State::Established => "established",
            State::Closing => "closing",
            State::Draining => "draining",
            State::Closed => "closed",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CloseReason {
    Local { code: u64, app: bool, reason: String },
    Peer { code: u64, app: bool, reason: String },
    IdleTimeout,
    StatelessReset,
    /// The server answered with a Version Negotiation packet.
    VersionNegotiation { offered: Vec<u32> },
}

impl CloseReason {
    pub fn name(&self) -> &'static str {
        match self {
            CloseReason::Local { .. } => "local_close",
            CloseReason::Peer { .. } => "peer_close",
            CloseReason::IdleTimeout => "idle_timeout",
            CloseReason::StatelessReset => "stateless_reset",
            CloseReason::VersionNegotiation { .. } => "version_negotiation",
        }
    }

    /// Anything but a graceful close or a quiet idle timeout.
    pub fn is_error(&self) -> bool {
        match self {
            CloseReason::Local { code, .. } | CloseReason::Peer { code, .. } => *code != 0,
            CloseReason::IdleTimeout => false,
            CloseReason::StatelessReset | CloseReason::VersionNegotiation { .. } => true,
        }
    }
}

/// Everything a client keeps to resume a session with 0-RTT.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StoredSession {
    pub server_name: String,
    pub version: u32,
    pub suite: SuiteKind,
    pub ticket: Vec<u8>,
    pub resumption_secret: [u8; 32],
    pub params: TransportParameters,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Event {
    HandshakeComplete,
    HandshakeConfirmed,
    /// The application asked for 0-RTT; that data can be replayed.
    ReplayExposure,
    ZeroRttAccepted,
    ZeroRttRejected,
    Stream(StreamEvent),
    Datagram(Vec<u8>),
    DatagramLost { len: usize },
    NewToken(Vec<u8>),
    SessionTicket(StoredSession),
    PathValidated { local: Addr, remote: Addr },
    PathValidationFailed { local: Addr, remote: Addr },
    Closed(CloseReason),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ApiError {
    #[error("peer does not accept datagrams")]
    DatagramsUnsupported,
    #[error("datagram of {size} bytes exceeds limit {max}")]
    DatagramTooLarge { size: usize, max: usize },
    #[error("no 0-RTT or 1-RTT keys yet")]
    NotReady,
    #[error("connection id limit reached")]
    CidLimitReached,
    #[error("connection is not established")]
    NotEstablished,
    #[error("operation not valid for this endpoint role")]
    WrongRole,
    #[error("a path change is already in progress")]
    MigrationInProgress,
    #[error(transparent)]
    Stream(#[from] StreamError),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ConfigError {
    #[error("no versions configured")]
    NoVersions,
    #[error("unknown version {0:#010x}")]
    UnknownVersion(u32),
    #[error("connection id length {0} outside 8..=20")]
    CidLength(usize),
    #[error("path MTU ceiling {0} outside 1200..=16383")]
    PmtuCeiling(u16),
}

/// Endpoint configuration. Role-specific fields are ignored by the other
/// role.
#[derive(Debug, Clone)]
pub struct Config {
    /// Supported versions, most preferred first.
    pub versions: Vec<u32>,
    /// Whether versions 1 and 2 may be switched between inside the first
    /// flight.
    pub compatible_versions: bool,
    pub suite: SuiteKind,
    pub controller: ControllerKind,
    pub transport: TransportParameters,
    /// Server: its own identity. Client: the identity it expects.
    pub identity: String,
    /// Keys tokens, tickets and stateless reset tokens.
    pub static_key: [u8; 32],
    pub cid_len: usize,
    /// Upper bound for path MTU probing; 1200 disables probing.
    pub pmtu_ceiling: u16,
    pub accept_early_data: bool,
    pub token_lifetime: Duration,
    pub ticket_lifetime: Duration,
    /// Cap on connection ids issued to the peer at once.
    pub max_local_cids: u64,
}

pub fn default_transport() -> TransportParameters {
    TransportParameters {
        max_idle_timeout_ms: 30_000,
        initial_max_data: DEFAULT_CONNECTION_WINDOW,
        initial_max_stream_data_bidi_local: DEFAULT_STREAM_WINDOW,
        initial_max_stream_data_bidi_remote: DEFAULT_STREAM_WINDOW,
        initial_max_stream_data_uni: DEFAULT_STREAM_WINDOW,
        initial_max_streams_bidi: 100,
        initial_max_streams_uni: 100,
        active_connection_id_limit: 4,
        max_datagram_frame_size: 65_535,
        ..TransportParameters::default()
    }
}

impl Default for Config {
    fn default() -> Self {
        Config {
            versions: vec![crate::VERSION_1],
            compatible_versions: true,
            suite: SuiteKind::Null,
            controller: ControllerKind::NewReno,
            transport: default_transport(),
            identity: "server.test".into(),
            static_key: [0x5a; 32],
            cid_len: 8,
            pmtu_ceiling: 1200,
            accept_early_data: true,
            token_lifetime: Duration::from_secs(24 * 3600),
            ticket_lifetime: Duration::from_secs(24 * 3600),
            max_local_cids: 8,
        }
    }
}

impl Config {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.versions.is_empty() {
            return Err(ConfigError::NoVersions);
        }
        if let Some(v) = self.versions.iter().find(|v| !is_known_version(**v)) {
            return Err(ConfigError::UnknownVersion(*v));
        }
        if !(8..=20).contains(&self.cid_len) {
            return Err(ConfigError::CidLength(self.cid_len));
        }
        if !(1200..=16383).contains(&self.pmtu_ceiling) {
            return Err(ConfigError::PmtuCeiling(self.pmtu_ceiling));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default)]
pub struct ClientOptions {
    pub session: Option<StoredSession>,
    pub token: Option<Vec<u8>>,
    pub early_data: bool,
    /// Version of the first Initial; defaults to the most preferred one.
    pub version: Option<u32>,
    pub seed: u64,
}

/// What the server endpoint learned from the Initial that creates a
/// connection.
#[derive(Debug, Clone)]
pub struct ServerOptions {
    pub version: u32,
    pub original_dcid: ConnectionId,
    /// Destination id of this Initial: the original one, or the Retry's.
    pub initial_dcid: ConnectionId,
    pub client_scid: ConnectionId,
    pub retry_scid: Option<ConnectionId>,
    pub address_validated: bool,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PacketKind {
    Initial,
    ZeroRtt,
    Handshake,
    OneRtt,
}

impl PacketKind {
    pub fn name(self) -> &'static str {
        match self {
            PacketKind::Initial => "initial",
            PacketKind::ZeroRtt => "0rtt",
            PacketKind::Handshake => "handshake",
            PacketKind::OneRtt => "1rtt",
        }
    }

    pub fn space(self) -> SpaceId {
        match self {
            PacketKind::Initial => SpaceId::Initial,
            PacketKind::Handshake => SpaceId::Handshake,
            PacketKind::ZeroRtt | PacketKind::OneRtt => SpaceId::Data,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PacketInfo {
    pub kind: PacketKind,
    pub pn: u64,
    pub size: usize,
    pub frames: Vec<&'static str>,
    pub ack_eliciting: bool,
    pub pmtu_probe: bool,
}

/// One outgoing UDP datagram.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Transmit {
    pub src: Addr,
    pub dst: Addr,
    pub data: Vec<u8>,
    /// Packets coalesced into `data`; empty for stateless packets.
    pub packets: Vec<PacketInfo>,
}

#[derive(Debug)]
struct Space {
    keys: Option<KeyPair>,
    next_pn: u64,
    ack: AckTracker,
    sent: crate::recovery::SentLog,
    crypto_send: CryptoSend,
    crypto_recv: CryptoRecv,
    probes: u8,
    discarded: bool,
}

impl Space {
    fn new(max_ack_delay: Duration, immediate: bool) -> Self {
        Space {
            keys: None,
            next_pn: 0,
            ack: AckTracker::new(max_ack_delay, immediate),
            sent: crate::recovery::SentLog::new(),
            crypto_send: CryptoSend::default(),
            crypto_recv: CryptoRecv::default(),
            probes: 0,
            discarded: false,
        }
    }
}

#[derive(Debug)]
struct OneRttKeys {
    phase: bool,
    local: PacketKey,
    remote: PacketKey,
    prev_remote: Option<PacketKey>,
    /// First packet number received under the current phase.
    phase_start: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ZeroRttState {
    None,
    Attempted,
    Accepted,
    Rejected,
}

#[derive(Debug, Clone)]
struct Challenge {
    data: [u8; 8],
    deadline: Instant,
}

/// A network path as seen from this endpoint.
#[derive(Debug, Clone)]
pub struct Path {
    pub local: Addr,
    pub remote: Addr,
    pub validated: bool,
    /// Sends are capped at three times the bytes received until validated.
    pub amplification_limited: bool,
    pub sent: u64,
    pub received: u64,
    pub mtu: u16,
    challenge: Option<Challenge>,
    challenge_pending: bool,
    responses: Vec<[u8; 8]>,
    /// Reset congestion and RTT state once validated.
    reset_on_validate: bool,
}

impl Path {
    fn new(local: Addr, remote: Addr, validated: bool, amplification_limited: bool) -> Self {
        Path {
            local,
            remote,
            validated,
            amplification_limited,
            sent: 0,
            received: 0,
            mtu: DEFAULT_MAX_DATAGRAM_SIZE as u16,
            challenge: None,
            challenge_pending: false,
            responses: Vec::new(),
            reset_on_validate: false,
        }
    }

    /// Bytes that may still be sent on this path.
    pub fn allowance(&self) -> u64 {
        if self.validated || !self.amplification_limited {
            u64::MAX
        } else {
            (3 * self.received).saturating_sub(self.sent)
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct PmtuProbe {
    size: u16,
    deadline: Instant,
}

#[derive(Debug, Clone)]
struct Pmtu {
    enabled: bool,
    lo: u16,
    hi: u16,
    attempts: u8,
    probe: Option<PmtuProbe>,
    steps: u32,
    done: bool,
    /// No ordinary packet has been declared lost since the probe went out,
    /// so losing the probe says something about its size.
    clean_since_probe: bool,
    /// Send an ordinary ack-eliciting packet right after the probe, so a
    /// lost probe is detected by acknowledgment even on an idle connection.
    sentinel: bool,
}

impl Pmtu {
    fn new(ceiling: u16) -> Self {
        Pmtu {
            enabled: false,
            lo: DEFAULT_MAX_DATAGRAM_SIZE as u16,
            hi: ceiling,
            attempts: 0,
            probe: None,
            steps: 0,
            done: ceiling <= DEFAULT_MAX_DATAGRAM_SIZE as u16,
            clean_since_probe: false,
            sentinel: false,
        }
    }

    fn target(&self) -> Option<u16> {
        (!self.done && self.lo < self.hi).then(|| self.lo + (self.hi - self.lo).div_ceil(2))
    }
}

#[derive(Debug, Clone)]
struct LocalCid {
    seq: u64,
    cid: ConnectionId,
    reset_token: [u8; 16],
    retired: bool,
}

#[derive(Debug, Clone)]
struct RemoteCid {
    seq: u64,
    cid: ConnectionId,
    reset_token: Option<[u8; 16]>,
    retired: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum TimerKind {
    Loss(SpaceId),
    Pto(SpaceId),
}

#[derive(Debug)]
struct Closing {
    frame: ConnectionClose,
    deadline: Instant,
    send_pending: bool,
}

#[derive(Debug)]
struct Buffered {
    local: Addr,
    remote: Addr,
    packet: Vec<u8>,
}

pub struct Connection {
    side: Side,
    cfg: Config,
    state: State,
    version: u32,
    rng: ChaCha8Rng,
    tracer: Tracer,
    events: VecDeque<Event>,

    original_dcid: ConnectionId,
    initial_dcid: ConnectionId,
    retry_scid: Option<ConnectionId>,
    token: Vec<u8>,
    received_server_packet: bool,
    peer_initial_scid: Option<ConnectionId>,
    local_cids: Vec<LocalCid>,
    next_local_seq: u64,
    remote_cids: Vec<RemoteCid>,
    active_remote: u64,
    retire_queue: VecDeque<u64>,
    new_cid_queue: VecDeque<u64>,

    spaces: [Space; 3],
    initial_alt: Option<(u32, KeyPair)>,
    zero_rtt: Option<PacketKey>,
    zero_rtt_state: ZeroRttState,
    one_rtt: Option<OneRttKeys>,
    first_1rtt_pn: Option<u64>,
    handshake: Handshake,
    handshake_complete: bool,
    handshake_confirmed: bool,
    discard_handshake_after_send: bool,
    /// Client: elicit an ACK for a 1-RTT packet to confirm the handshake.
    confirm_ping: bool,
    keys_changed: bool,
    buffered: Vec<Buffered>,

    local_tp: TransportParameters,
    peer_tp: Option<TransportParameters>,
    limits: Option<EffectiveLimits>,
    remembered: Option<TransportParameters>,

    streams: Streams,
    stream_high: BTreeMap<StreamId, u64>,
    datagrams_out: VecDeque<Vec<u8>>,
    new_token_out: Option<Vec<u8>>,
    packet_kind: Option<PacketKind>,

    rtt: RttEstimator,
    loss: LossParams,
    cc: Box<dyn CongestionController>,
    pacer: Pacer,
    bytes_in_flight: u64,
    pto_count: u32,
    loss_timer: Option<(Instant, TimerKind)>,
    pacing_until: Option<Instant>,
    last_cwnd: u64,

    path: Path,
    fallback: Option<Path>,
    probe_responses: Vec<(Addr, Addr, [u8; 8])>,
    pmtu: Pmtu,

    last_activity: Instant,
    eliciting_since_recv: bool,
    closing: Option<Closing>,
    close_reason: Option<CloseReason>,
}

impl std::fmt::Debug for Connection {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Connection")
            .field("side", &self.side)
            .field("state", &self.state)
            .field("version", &format_args!("{:#010x}", self.version))
            .finish_non_exhaustive()
    }
}

fn stream_limits(local: &TransportParameters, peer: &TransportParameters) -> StreamLimits {
    StreamLimits {
        local_bidi_local: local.initial_max_stream_data_bidi_local,
        local_bidi_remote: local.initial_max_stream_data_bidi_remote,
        local_uni: local.initial_max_stream_data_uni,
        peer_bidi_local: peer.initial_max_stream_data_bidi_local,
        peer_bidi_remote: peer.initial_max_stream_data_bidi_remote,
        peer_uni: peer.initial_max_stream_data_uni,
        local_max_streams_bidi: local.initial_max_streams_bidi,
        local_max_streams_uni: local.initial_max_streams_uni,
        peer_max_streams_bidi: peer.initial_max_streams_bidi,
        peer_max_streams_uni: peer.initial_max_streams_uni,
    }
}

fn addr_json(a: Addr) -> String {
    a.to_string()
}

impl Connection {
    fn new(
        side: Side,
        cfg: Config,
        now: Instant,
        version: u32,
        seed: u64,
        local_tp: TransportParameters,
        handshake: Handshake,
        path: Path,
    ) -> Self {
        let max_ack_delay = Duration::from_millis(local_tp.max_ack_delay_ms);
        let limits = stream_limits(&local_tp, &TransportParameters {
            initial_max_data: 0,
            ..TransportParameters::default()
        });
        let streams = Streams::new(side, limits, 0, local_tp.initial_max_data);
        let cc = cfg.controller.build(DEFAULT_MAX_DATAGRAM_SIZE);
        let last_cwnd = cc.window();
        let pmtu = Pmtu::new(cfg.pmtu_ceiling);
        Connection {
            side,
            state: State::Handshaking,
            version,
            rng: ChaCha8Rng::seed_from_u64(seed),
            tracer: Tracer::new(side),
            events: VecDeque::new(),
            original_dcid: ConnectionId::EMPTY,
            initial_dcid: ConnectionId::EMPTY,
            retry_scid: None,
            token: Vec::new(),
            received_server_packet: false,
            peer_initial_scid: None,
            local_cids: Vec::new(),
            next_local_seq: 1,
            remote_cids: Vec::new(),
            active_remote: 0,
            retire_queue: VecDeque::new(),
            new_cid_queue: VecDeque::new(),
            spaces: [
                Space::new(Duration::ZERO, true),
                Space::new(Duration::ZERO, true),
                Space::new(max_ack_delay, false),
            ],
            initial_alt: None,
            zero_rtt: None,
            zero_rtt_state: ZeroRttState::None,
            one_rtt: None,
            first_1rtt_pn: None,
            handshake,
            handshake_complete: false,
            handshake_confirmed: false,
            discard_handshake_after_send: false,
            confirm_ping: false,
            keys_changed: false,
            buffered: Vec::new(),
            local_tp,
            peer_tp: None,
            limits: None,
            remembered: None,
            streams,
            stream_high: BTreeMap::new(),
            datagrams_out: VecDeque::new(),
            new_token_out: None,
            packet_kind: None,
            rtt: RttEstimator::new(INITIAL_RTT),
            loss: LossParams::default(),
            cc,
            pacer: Pacer::new(DEFAULT_MAX_DATAGRAM_SIZE),
            bytes_in_flight: 0,
            pto_count: 0,
            loss_timer: None,
            pacing_until: None,
            last_cwnd,
            path,
            fallback: None,
            probe_responses: Vec::new(),
            pmtu,
            last_activity: now,
            eliciting_since_recv: false,
            closing: None,
            close_reason: None,
            cfg,
        }
    }

    /// Starts a client connection. The first datagram comes out of
    /// [`Connection::poll_transmit`].
    pub fn connect(cfg: Config, now: Instant, local: Addr, remote: Addr, opts: ClientOptions) -> Result<Self, ConfigError> {
        cfg.validate()?;
        let version = opts.version.unwrap_or(cfg.versions[0]);
        if !is_known_version(version) {
            return Err(ConfigError::UnknownVersion(version));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        let odcid = ConnectionId::random(&mut rng, cfg.cid_len.max(8));
        let scid = ConnectionId::random(&mut rng, cfg.cid_len);
        let mut local_tp = cfg.transport.clone();
        local_tp.initial_source_cid = Some(scid);
        local_tp.original_destination_cid = None;
        local_tp.retry_source_cid = None;
        local_tp.stateless_reset_token = None;
        local_tp.early_data_allowed = false;
        local_tp.version_information = Some(VersionInformation {
            chosen: version,
            available: cfg.versions.clone(),
        });
        let session = opts.session.filter(|s| s.server_name == cfg.identity && s.suite == cfg.suite);
        let early = opts.early_data && session.as_ref().is_some_and(|s| s.params.early_data_allowed && s.version == version);
        let resumption = session.as_ref().map(|s| ResumptionState {
            ticket: s.ticket.clone(),
            secret: s.resumption_secret,
        });
        let hs = Handshake::client(&mut rng, cfg.suite, &cfg.identity, local_tp.encode(), resumption, early);
        let seed = rng.next_u64();
        let static_key = cfg.static_key;
        let path = Path::new(local, remote, true, false);
        let mut c = Connection::new(Side::Client, cfg, now, version, seed, local_tp, hs, path);
        c.original_dcid = odcid;
        c.initial_dcid = odcid;
        c.token = opts.token.unwrap_or_default();
        c.local_cids.push(LocalCid {
            seq: 0,
            cid: scid,
            reset_token: reset_token(&static_key, &scid),
            retired: false,
        });
        c.remote_cids.push(RemoteCid {
            seq: 0,
            cid: odcid,
            reset_token: None,
            retired: false,
        });
        c.spaces[0].keys = Some(derive_initial_keys(odcid.as_bytes(), version).for_client());
        c.trace(now, Category::Transport, "connection_started", json!({
            "version": format!("{version:#010x}"),
            "odcid": hex::encode(odcid.as_bytes()),
            "scid": hex::encode(scid.as_bytes()),
            "local": addr_json(local),
            "remote": addr_json(remote),
            "token": !c.token.is_empty(),
        }));
        if let Some(s) = session.filter(|_| early) {
            c.apply_remembered(&s.params);
            c.remembered = Some(s.params);
            c.zero_rtt_state = ZeroRttState::Attempted;
            c.events.push_back(Event::ReplayExposure);
            c.trace(now, Category::Security, "replay_exposure_warning", json!({}));
        }
        c.trace(now, Category::Transport, "connection_state_updated", json!({"old": "idle", "new": "handshaking"}));
        if let Err(e) = c.process_handshake(now) {
            c.close_on_error(now, e);
        }
        c.set_loss_timer(now);
        Ok(c)
    }

    /// Creates the server side of a connection for a client Initial the
    /// endpoint decided to accept. The Initial itself must then be fed to
    /// [`Connection::handle_datagram`].
    pub fn accept(cfg: Config, now: Instant, local: Addr, remote: Addr, opts: ServerOptions) -> Result<Self, ConfigError> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        let scid = ConnectionId::random(&mut rng, cfg.cid_len);
        let static_key = cfg.static_key;
        let mut local_tp = cfg.transport.clone();
        local_tp.initial_source_cid = Some(scid);
        local_tp.original_destination_cid = Some(opts.original_dcid);
        local_tp.retry_source_cid = opts.retry_scid;
        local_tp.stateless_reset_token = Some(reset_token(&static_key, &scid));
        local_tp.early_data_allowed = cfg.accept_early_data;
        let hs = Handshake::server(cfg.suite, &cfg.identity);
        let seed = rng.next_u64();
        let path = Path::new(local, remote, opts.address_validated, true);
        let mut c = Connection::new(Side::Server, cfg, now, opts.version, seed, local_tp, hs, path);
        c.original_dcid = opts.original_dcid;
        c.initial_dcid = opts.initial_dcid;
        c.retry_scid = opts.retry_scid;
        c.peer_initial_scid = Some(opts.client_scid);
        c.local_cids.push(LocalCid {
            seq: 0,
            cid: scid,
            reset_token: reset_token(&static_key, &scid),
            retired: false,
        });
        c.remote_cids.push(RemoteCid {
            seq: 0,
            cid: opts.client_scid,
            reset_token: None,
            retired: false,
        });
        c.spaces[0].keys = Some(derive_initial_keys(opts.initial_dcid.as_bytes(), opts.version).for_server());
        c.trace(now, Category::Transport, "connection_started", json!({
            "version": format!("{:#010x}", opts.version),
            "odcid": hex::encode(opts.original_dcid.as_bytes()),
            "scid": hex::encode(scid.as_bytes()),
            "local": addr_json(local),
            "remote": addr_json(remote),
            "address_validated": opts.address_validated,
            "retry": opts.retry_scid.is_some(),
        }));
        c.trace(now, Category::Transport, "connection_state_updated", json!({"old": "idle", "new": "handshaking"}));
        Ok(c)
    }

    // ----- accessors -----

    pub fn side(&self) -> Side {
        self.side
    }

    pub fn state(&self) -> State {
        self.state
    }

    pub fn version(&self) -> u32 {
        self.version
    }

    pub fn is_handshake_complete(&self) -> bool {
        self.handshake_complete
    }

    pub fn is_handshake_confirmed(&self) -> bool {
        self.handshake_confirmed
    }

    pub fn is_closed(&self) -> bool {
        self.state == State::Closed
    }

    pub fn close_reason(&self) -> Option<&CloseReason> {
        self.close_reason.as_ref()
    }

    pub fn rtt(&self) -> &RttEstimator {
        &self.rtt
    }

    pub fn congestion_window(&self) -> u64 {
        self.cc.window()
    }

    pub fn bytes_in_flight(&self) -> u64 {
        self.bytes_in_flight
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn streams(&self) -> &Streams {
        &self.streams
    }

    pub fn limits(&self) -> Option<&EffectiveLimits> {
        self.limits.as_ref()
    }

    pub fn peer_params(&self) -> Option<&TransportParameters> {
        self.peer_tp.as_ref()
    }

    pub fn path_mtu(&self) -> u16 {
        self.path.mtu
    }

    /// Local connection ids not yet retired, as (sequence, id).
    pub fn local_cids(&self) -> Vec<(u64, ConnectionId)> {
        self.local_cids.iter().filter(|c| !c.retired).map(|c| (c.seq, c.cid)).collect()
    }

    pub fn remote_cid(&self) -> ConnectionId {
        self.remote_cids
            .iter()
            .find(|c| c.seq == self.active_remote)
            .map_or(ConnectionId::EMPTY, |c| c.cid)
    }

    /// Whether a packet addressed to `dcid` belongs here.
    pub fn owns_cid(&self, dcid: &ConnectionId) -> bool {
        if self.local_cids.iter().any(|c| !c.retired && c.cid == *dcid) {
            return true;
        }
        self.side == Side::Server && !self.spaces[0].discarded && *dcid == self.initial_dcid
    }

    /// Whether the trailing bytes of `datagram` carry a reset token the peer
    /// gave us. Compared in constant time.
    pub fn is_stateless_reset(&self, datagram: &[u8]) -> bool {
        if datagram.len() < MIN_STATELESS_RESET {
            return false;
        }
        let tail = &datagram[datagram.len() - 16..];
        let mut hit = false;
        for c in &self.remote_cids {
            if let Some(t) = c.reset_token {
                hit |= handshake::ct_eq(&t, tail);
            }
        }
        hit
    }

    pub fn poll_event(&mut self) -> Option<Event> {
        self.events.pop_front()
    }

    pub fn drain_trace(&mut self, out: &mut Vec<TraceRecord>) {
        self.tracer.drain_into(out);
    }

    fn trace(&mut self, now: Instant, category: Category, event: &str, data: Value) {
        self.tracer.emit(now, category, event, data);
    }

    fn space(&mut self, id: SpaceId) -> &mut Space {
        &mut self.spaces[id as usize]
    }

    fn srtt(&self) -> Option<Duration> {
        self.rtt.has_sample().then(|| self.rtt.smoothed())
    }

    fn peer_max_ack_delay(&self) -> Duration {
        let ms = self
            .limits
            .as_ref()
            .map(|l| l.peer_max_ack_delay_ms)
            .or_else(|| self.remembered.as_ref().map(|p| p.max_ack_delay_ms))
            .unwrap_or(crate::tparams::DEFAULT_MAX_ACK_DELAY_MS);
        Duration::from_millis(ms)
    }

    fn pto_period(&self, space: SpaceId) -> Duration {
        let base = self.rtt.pto_base();
        if space == SpaceId::Data {
            base + self.peer_max_ack_delay()
        } else {
            base
        }
    }

    fn set_state(&mut self, now: Instant, new: State) {
        if self.state != new {
            let old = self.state;
            self.state = new;
            self.trace(now, Category::Transport, "connection_state_updated", json!({"old": old.name(), "new": new.name()}));
        }
    }

    // ----- application interface -----

    pub fn open_stream(&mut self, dir: Dir) -> Result<StreamId, ApiError> {
        if !self.can_send_app_data() {
            return Err(ApiError::NotReady);
        }
        Ok(self.streams.open(dir)?)
    }

    pub fn write(&mut self, id: StreamId, data: &[u8]) -> Result<(), ApiError> {
        Ok(self.streams.write(id, data)?)
    }

    pub fn finish(&mut self, id: StreamId) -> Result<(), ApiError> {
        Ok(self.streams.finish(id)?)
    }

    pub fn reset_stream(&mut self, id: StreamId, error_code: u64) -> Result<(), ApiError> {
        Ok(self.streams.reset(id, error_code)?)
    }

    pub fn stop_sending(&mut self, id: StreamId, error_code: u64) -> Result<(), ApiError> {
        Ok(self.streams.stop_sending(id, error_code)?)
    }

    pub fn set_priority(&mut self, id: StreamId, priority: i32) -> Result<(), ApiError> {
        Ok(self.streams.set_priority(id, priority)?)
    }

    fn can_send_app_data(&self) -> bool {
        matches!(self.state, State::Handshaking | State::Established)
            && (self.one_rtt.is_some() || (self.side == Side::Client && self.zero_rtt.is_some()))
    }

    /// Largest DATAGRAM payload the peer accepts, once known.
    pub fn max_datagram_size(&self) -> Option<usize> {
        let local = self.local_tp.max_datagram_frame_size;
        let peer = match (&self.limits, &self.remembered) {
            (Some(l), _) => l.peer_max_datagram_frame_size,
            (None, Some(r)) => r.max_datagram_frame_size,
            (None, None) => return None,
        };
        if local == 0 || peer == 0 {
            return None;
        }
        // Frame type and length prefix come out of the peer's budget.
        Some((peer.saturating_sub(3) as usize).min(DEFAULT_MAX_DATAGRAM_SIZE as usize - 64))
    }

    /// Queues an unreliable datagram. It is never retransmitted and does not
    /// consume flow-control credit.
    pub fn send_datagram(&mut self, data: Vec<u8>) -> Result<(), ApiError> {
        if !self.can_send_app_data() {
            return Err(ApiError::NotReady);
        }
        let max = self.max_datagram_size().ok_or(ApiError::DatagramsUnsupported)?;
        if data.len() > max {
            return Err(ApiError::DatagramTooLarge { size: data.len(), max });
        }
        self.datagrams_out.push_back(data);
        Ok(())
    }

    /// Datagrams queued but not yet sent.
    pub fn datagrams_pending(&self) -> usize {
        self.datagrams_out.len()
    }

    /// Whether path MTU discovery is off or has finished.
    pub fn pmtu_settled(&self) -> bool {
        self.pmtu.done || self.cfg.pmtu_ceiling <= DEFAULT_MAX_DATAGRAM_SIZE as u16
    }

    /// Closes the connection with an application error code.
    pub fn close(&mut self, now: Instant, error_code: u64, reason: &str) {
        if matches!(self.state, State::Closing | State::Draining | State::Closed) {
            return;
        }
        let frame = ConnectionClose {
            layer: CloseLayer::Application,
            error_code,
            reason: reason.as_bytes().to_vec(),
        };
        self.enter_closing(now, frame, CloseReason::Local {
            code: error_code,
            app: true,
            reason: reason.to_string(),
        });
    }

    fn close_on_error(&mut self, now: Instant, e: TransportError) {
        if matches!(self.state, State::Closing | State::Draining | State::Closed) {
            return;
        }
        if e.code == code::FLOW_CONTROL_ERROR {
            self.trace(now, Category::Flow, "flow_violation", json!({"reason": e.reason}));
        }
        let frame = ConnectionClose {
            layer: CloseLayer::Transport { frame_type: e.frame_type },
            error_code: e.code,
            reason: e.reason.as_bytes().to_vec(),
        };
        self.enter_closing(now, frame, CloseReason::Local {
            code: e.code,
            app: false,
            reason: e.reason,
        });
    }

    fn enter_closing(&mut self, now: Instant, frame: ConnectionClose, reason: CloseReason) {
        let deadline = now + 3 * self.pto_period(SpaceId::Data);
        self.closing = Some(Closing {
            frame,
            deadline,
            send_pending: true,
        });
        self.set_state(now, State::Closing);
        self.finish_close(now, reason);
    }

    fn finish_close(&mut self, now: Instant, reason: CloseReason) {
        let (code, app, text) = match &reason {
            CloseReason::Local { code, app, reason } | CloseReason::Peer { code, app, reason } => (*code, *app, reason.clone()),
            _ => (0, false, String::new()),
        };
        self.trace(now, Category::Transport, "connection_closed", json!({
            "reason": reason.name(),
            "code": code,
            "app": app,
            "text": text,
            "error": reason.is_error(),
        }));
        self.emit_flow_summary(now);
        self.close_reason = Some(reason.clone());
        self.events.push_back(Event::Closed(reason));
        self.loss_timer = None;
    }

    fn emit_flow_summary(&mut self, now: Instant) {
        let sent = self.streams.conn_send.used();
        let received = self.streams.conn_recv.highest();
        self.trace(now, Category::Flow, "flow_summary", json!({"conn_sent": sent, "conn_received": received}));
        for (id, (sent, received)) in self.streams.tallies() {
            self.trace(now, Category::Flow, "stream_tally", json!({"stream": id.0, "sent": sent, "received": received}));
        }
    }

    /// Drops straight to Closed without telling the peer.
    fn close_silently(&mut self, now: Instant, reason: CloseReason) {
        if self.state == State::Closed {
            return;
        }
        let was_open = !matches!(self.state, State::Closing | State::Draining);
        self.set_state(now, State::Closed);
        self.closing = None;
        if was_open {
            self.finish_close(now, reason);
        }
    }

    /// Starts using a new local address. Only clients migrate. Without
    /// `keep_fallback` there is nothing to return to if validation fails.
    pub fn migrate(&mut self, now: Instant, new_local: Addr, keep_fallback: bool) -> Result<(), ApiError> {
        if self.side != Side::Client {
            return Err(ApiError::WrongRole);
        }
        if self.state != State::Established || !self.handshake_confirmed {
            return Err(ApiError::NotEstablished);
        }
        if self.path.challenge.is_some() {
            return Err(ApiError::MigrationInProgress);
        }
        let old = self.path.clone();
        // A fresh connection id keeps the two paths unlinkable.
        if let Some(next) = self
            .remote_cids
            .iter()
            .filter(|c| !c.retired && c.seq != self.active_remote)
            .map(|c| c.seq)
            .min()
        {
            let prev = self.active_remote;
            self.retire_remote(prev);
            self.active_remote = next;
        }
        let mut p = Path::new(new_local, old.remote, false, false);
        p.reset_on_validate = new_local.host != old.local.host;
        self.path = p;
        self.start_challenge(now);
        self.fallback = keep_fallback.then_some(old.clone());
        self.pmtu = Pmtu::new(self.cfg.pmtu_ceiling);
        self.pmtu.enabled = self.cfg.pmtu_ceiling > DEFAULT_MAX_DATAGRAM_SIZE as u16;
        self.trace(now, Category::Transport, "migration_started", json!({
            "from": addr_json(old.local),
            "to": addr_json(new_local),
            "port_only": !self.path.reset_on_validate,
        }));
        Ok(())
    }

    fn retire_remote(&mut self, seq: u64) {
        if let Some(c) = self.remote_cids.iter_mut().find(|c| c.seq == seq && !c.retired) {
            c.retired = true;
            self.retire_queue.push_back(seq);
        }
    }

    fn start_challenge(&mut self, now: Instant) {
        let mut data = [0u8; 8];
        self.rng.fill_bytes(&mut data);
        let deadline = now + self.validation_timeout();
        self.path.challenge = Some(Challenge { data, deadline });
        self.path.challenge_pending = true;
    }

    fn validation_timeout(&self) -> Duration {
        let fresh = RttEstimator::new(INITIAL_RTT).pto_base();
        3 * self.pto_period(SpaceId::Data).max(fresh)
    }

    /// Issues one more connection id to the peer.
    pub fn issue_new_cid(&mut self) -> Result<(u64, ConnectionId), ApiError> {
        if !self.handshake_complete || matches!(self.state, State::Closing | State::Draining | State::Closed) {
            return Err(ApiError::NotEstablished);
        }
        let peer_limit = self.limits.as_ref().map_or(2, |l| l.peer_active_cid_limit);
        let active = self.local_cids.iter().filter(|c| !c.retired).count() as u64;
        if active >= peer_limit.min(self.cfg.max_local_cids) {
            return Err(ApiError::CidLimitReached);
        }
        let cid = ConnectionId::random(&mut self.rng, self.cfg.cid_len);
        let seq = self.next_local_seq;
        self.next_local_seq += 1;
        self.local_cids.push(LocalCid {
            seq,
            cid,
            reset_token: reset_token(&self.cfg.static_key, &cid),
            retired: false,
        });
        self.new_cid_queue.push_back(seq);
        Ok((seq, cid))
    }

    fn issue_cids_to_limit(&mut self, now: Instant) {
        while let Ok((seq, cid)) = self.issue_new_cid() {
            self.trace(now, Category::Transport, "cid_issued", json!({"seq": seq, "cid": hex::encode(cid.as_bytes())}));
        }
    }

    /// Rotates 1-RTT keys. Only allowed once the handshake is confirmed.
    pub fn initiate_key_update(&mut self, now: Instant) -> Result<(), ApiError> {
        if !self.handshake_confirmed {
            return Err(ApiError::NotEstablished);
        }
        let largest = self.spaces[2].ack.largest_received();
        let Some(k) = self.one_rtt.as_mut() else {
            return Err(ApiError::NotReady);
        };
        let next_local = k.local.next_generation();
        let next_remote = k.remote.next_generation();
        k.prev_remote = Some(std::mem::replace(&mut k.remote, next_remote));
        k.local = next_local;
        k.phase = !k.phase;
        k.phase_start = Some(largest.map_or(0, |l| l + 1));
        let phase = k.phase;
        self.trace(now, Category::Security, "key_updated", json!({"initiator": "local", "phase": phase}));
        Ok(())
    }

    // ----- handshake plumbing -----

    fn apply_remembered(&mut self, p: &TransportParameters) {
        let limits = stream_limits(&self.local_tp, p);
        self.streams.set_peer_limits(&limits, p.initial_max_data);
    }

    fn process_handshake(&mut self, now: Instant) -> Result<(), TransportError> {
        if self.side == Side::Server && self.handshake.client_hello().is_some() {
            self.server_accept(now)?;
        }
        self.drain_handshake_output(now);
        if self.handshake.is_complete() && !self.handshake_complete {
            self.on_handshake_complete(now)?;
            self.drain_handshake_output(now);
        }
        while let Some(t) = self.handshake.poll_ticket() {
            let (Some(params), Some(secret)) = (self.peer_tp.clone(), self.handshake.resumption_secret()) else {
                continue;
            };
            let session = StoredSession {
                server_name: self.cfg.identity.clone(),
                version: self.version,
                suite: self.cfg.suite,
                ticket: t.ticket,
                resumption_secret: secret,
                params: params.remembered(),
            };
            self.trace(now, Category::Security, "session_ticket_received", json!({"lifetime_s": t.lifetime_s}));
            self.events.push_back(Event::SessionTicket(session));
        }
        Ok(())
    }

    fn drain_handshake_output(&mut self, now: Instant) {
        while let Some((level, name, sent)) = self.handshake.poll_log() {
            self.trace(now, Category::Security, "handshake_message", json!({
                "message": name,
                "level": format!("{level:?}").to_lowercase(),
                "direction": if sent { "sent" } else { "received" },
            }));
        }
        while let Some((level, bytes)) = self.handshake.poll_output() {
            let space = match level {
                Level::Initial => SpaceId::Initial,
                Level::Handshake => SpaceId::Handshake,
                Level::ZeroRtt | Level::OneRtt => SpaceId::Data,
            };
            self.space(space).crypto_send.write(&bytes);
        }
        while let Some(k) = self.handshake.poll_keys() {
            self.install_keys(now, k);
        }
    }

    fn install_keys(&mut self, now: Instant, k: KeyChange) {
        let v = self.version;
        let key = |s: Option<[u8; 32]>| s.map(|s| PacketKey::from_secret(s, v));
        match k.level {
            Level::Handshake => {
                self.spaces[1].keys = Some(KeyPair {
                    local: key(k.local).expect("both directions"),
                    remote: key(k.remote).expect("both directions"),
                });
            }
            Level::ZeroRtt => {
                self.zero_rtt = key(k.local).or(key(k.remote));
            }
            Level::OneRtt => {
                self.one_rtt = Some(OneRttKeys {
                    phase: false,
                    local: key(k.local).expect("both directions"),
                    remote: key(k.remote).expect("both directions"),
                    prev_remote: None,
                    phase_start: None,
                });
                if self.side == Side::Client {
                    // 0-RTT stops once 1-RTT keys exist.
                    self.zero_rtt = None;
                }
            }
            Level::Initial => {}
        }
        self.keys_changed = true;
        self.trace(now, Category::Security, "keys_installed", json!({"level": format!("{:?}", k.level).to_lowercase()}));
    }

    fn server_accept(&mut self, now: Instant) -> Result<(), TransportError> {
        let ch = self.handshake.client_hello().cloned().expect("checked by caller");
        let peer = TransportParameters::decode(&ch.tparams)?;
        let original = self.version;
        let mut chosen = original;
        if let Some(vi) = &peer.version_information {
            if vi.chosen != original {
                return Err(TransportError::new(
                    code::VERSION_NEGOTIATION_ERROR,
                    "chosen version does not match the Initial",
                ));
            }
            if self.cfg.compatible_versions {
                if let Some(v) = self
                    .cfg
                    .versions
                    .iter()
                    .copied()
                    .find(|v| *v == original || vi.available.contains(v))
                {
                    chosen = v;
                }
            }
        }
        if !self.cfg.versions.contains(&chosen) {
            return Err(TransportError::new(code::VERSION_NEGOTIATION_ERROR, "no mutually supported version"));
        }
        if chosen != original {
            let old = self.spaces[0].keys.take().expect("initial keys");
            self.initial_alt = Some((original, old));
            self.version = chosen;
            self.spaces[0].keys = Some(derive_initial_keys(self.initial_dcid.as_bytes(), chosen).for_server());
            self.trace(now, Category::Transport, "version_negotiated", json!({
                "method": "compatible",
                "original": format!("{original:#010x}"),
                "chosen": format!("{chosen:#010x}"),
            }));
        }
        let early = if ch.early_data && self.cfg.accept_early_data && chosen == original {
            handshake::open_ticket(&self.cfg.static_key, &ch.ticket)
                .filter(|t| {
                    t.suite == self.cfg.suite
                        && now.saturating_duration_since(t.issued_at) <= self.cfg.ticket_lifetime
                })
                .map(|t| t.secret)
        } else {
            None
        };
        self.local_tp.version_information = Some(VersionInformation {
            chosen,
            available: self.cfg.versions.clone(),
        });
        let tp = self.local_tp.encode();
        self.handshake.accept(&mut self.rng, tp, early)?;
        let observed = ObservedCids {
            original_destination: self.original_dcid,
            peer_initial_source: self.peer_initial_scid.expect("set at accept"),
            retry_source: None,
        };
        let limits = reconcile(&self.local_tp, &peer, Side::Client, &observed)?;
        self.apply_limits(&peer, limits);
        self.peer_tp = Some(peer);
        self.zero_rtt_state = match (ch.early_data, early.is_some()) {
            (true, true) => ZeroRttState::Accepted,
            (true, false) => ZeroRttState::Rejected,
            _ => ZeroRttState::None,
        };
        if ch.early_data {
            self.trace(now, Category::Security, "early_data", json!({"accepted": early.is_some()}));
        }
        Ok(())
    }

    fn apply_limits(&mut self, peer: &TransportParameters, limits: EffectiveLimits) {
        let sl = stream_limits(&self.local_tp, peer);
        self.streams.set_peer_limits(&sl, limits.send_max_data);
        self.limits = Some(limits);
    }

    fn on_handshake_complete(&mut self, now: Instant) -> Result<(), TransportError> {
        self.handshake_complete = true;
        if self.side == Side::Client {
            let bytes = self.handshake.peer_tparams().expect("complete").to_vec();
            let peer = TransportParameters::decode(&bytes)?;
            let observed = ObservedCids {
                original_destination: self.original_dcid,
                peer_initial_source: self.peer_initial_scid.unwrap_or(ConnectionId::EMPTY),
                retry_source: self.retry_scid,
            };
            // Parameters are only authenticated now; a mismatch ends the
            // connection at once.
            let limits = reconcile(&self.local_tp, &peer, Side::Server, &observed)?;
            if let Some(vi) = &peer.version_information {
                if vi.chosen != self.version {
                    return Err(TransportError::new(
                        code::VERSION_NEGOTIATION_ERROR,
                        "server version_information disagrees with negotiated version",
                    ));
                }
            }
            if let Some(c) = self.remote_cids.iter_mut().find(|c| c.seq == 0) {
                c.reset_token = peer.stateless_reset_token;
            }
            self.apply_limits(&peer, limits);
            self.peer_tp = Some(peer);
            match self.zero_rtt_state {
                ZeroRttState::Attempted if self.handshake.early_data_accepted() => {
                    self.zero_rtt_state = ZeroRttState::Accepted;
                    self.events.push_back(Event::ZeroRttAccepted);
                    self.trace(now, Category::Security, "early_data", json!({"accepted": true}));
                }
                ZeroRttState::Attempted => {
                    self.zero_rtt_state = ZeroRttState::Rejected;
                    self.requeue_zero_rtt(now);
                    self.events.push_back(Event::ZeroRttRejected);
                    self.trace(now, Category::Security, "early_data", json!({"accepted": false}));
                }
                _ => {}
            }
        }
        if self.side == Side::Client {
            self.confirm_ping = true;
        }
        self.set_state(now, State::Established);
        let idle = self.limits.as_ref().and_then(|l| l.idle_timeout_ms);
        self.trace(now, Category::Transport, "handshake_complete", json!({
            "version": format!("{:#010x}", self.version),
            "idle_timeout_ms": idle,
        }));
        self.events.push_back(Event::HandshakeComplete);
        if self.side == Side::Server {
            self.discard_handshake_after_send = true;
            let token = AddressToken {
                origin: TokenOrigin::NewToken,
                issued_at: now,
                client: self.path.remote,
                original_dcid: ConnectionId::EMPTY,
                retry_scid: ConnectionId::EMPTY,
            };
            self.new_token_out = Some(token.seal(&self.cfg.static_key));
            let ticket = handshake::seal_ticket(&self.cfg.static_key, &handshake::TicketContents {
                secret: self.handshake.resumption_secret().expect("complete"),
                issued_at: now,
                suite: self.cfg.suite,
                tparams: self.local_tp.remembered().encode(),
            });
            self.handshake.send_ticket(self.cfg.ticket_lifetime.as_secs() as u32, ticket);
            self.on_confirmed(now);
        }
        Ok(())
    }

    fn on_confirmed(&mut self, now: Instant) {
        if self.handshake_confirmed {
            return;
        }
        self.handshake_confirmed = true;
        self.trace(now, Category::Transport, "handshake_confirmed", json!({}));
        self.events.push_back(Event::HandshakeConfirmed);
        if self.side == Side::Client {
            self.discard_space(now, SpaceId::Handshake);
        }
        self.issue_cids_to_limit(now);
        self.pmtu.enabled = self.cfg.pmtu_ceiling > DEFAULT_MAX_DATAGRAM_SIZE as u16;
    }

    /// Client: 0-RTT was refused, so everything it carried goes out again
    /// under 1-RTT keys. Not a congestion signal.
    fn requeue_zero_rtt(&mut self, now: Instant) {
        let packets = self.spaces[2].sent.drain();
        for p in packets {
            if p.in_flight && !p.pmtu_probe {
                self.bytes_in_flight = self.bytes_in_flight.saturating_sub(p.size as u64);
            }
            self.on_frames_lost(now, SpaceId::Data, &p);
        }
    }

    fn discard_space(&mut self, now: Instant, id: SpaceId) {
        if self.spaces[id as usize].discarded {
            return;
        }
        let packets = {
            let s = self.space(id);
            s.keys = None;
            s.discarded = true;
            s.probes = 0;
            s.crypto_send = CryptoSend::default();
            s.sent.drain()
        };
        for p in packets {
            if p.in_flight && !p.pmtu_probe {
                self.bytes_in_flight = self.bytes_in_flight.saturating_sub(p.size as u64);
            }
        }
        if id == SpaceId::Initial {
            self.initial_alt = None;
        }
        self.pto_count = 0;
        self.buffered.retain(|b| {
            let long_ty = crate::codec::PacketShell::parse(&b.packet, 0).ok().and_then(|s| s.long_type());
            !matches!(
                (id, long_ty),
                (SpaceId::Initial, Some(crate::codec::LongPacketType::Initial))
                    | (SpaceId::Handshake, Some(crate::codec::LongPacketType::Handshake))
            )
        });
        self.trace(now, Category::Security, "keys_discarded", json!({"space": id.name()}));
    }

    // ----- recovery -----

    fn trace_cwnd(&mut self, now: Instant, reason: &str) {
        let w = self.cc.window();
        if w != self.last_cwnd {
            self.last_cwnd = w;
            let ssthresh = self.cc.ssthresh();
            let inflight = self.bytes_in_flight;
            self.trace(now, Category::Recovery, "cwnd_updated", json!({
                "cwnd": w,
                "ssthresh": ssthresh,
                "bytes_in_flight": inflight,
                "reason": reason,
            }));
        }
    }

    fn on_packets_lost(&mut self, now: Instant, space: SpaceId, lost: Vec<(SentPacket, LossTrigger)>) {
        if lost.is_empty() {
            return;
        }
        let mut newest: Option<Instant> = None;
        let mut congestion: Vec<SentPacket> = Vec::new();
        if lost.iter().any(|(p, _)| !p.pmtu_probe) {
            self.pmtu.clean_since_probe = false;
        }
        for (p, trigger) in lost {
            self.trace(now, Category::Recovery, "packet_lost", json!({
                "space": space.name(),
                "pn": p.pn,
                "size": p.size,
                "trigger": trigger.name(),
                "pmtu_probe": p.pmtu_probe,
            }));
            if p.pmtu_probe {
                self.on_pmtu_lost(now, p.size);
                continue;
            }
            if p.in_flight {
                self.bytes_in_flight = self.bytes_in_flight.saturating_sub(p.size as u64);
                newest = Some(newest.map_or(p.time_sent, |t: Instant| t.max(p.time_sent)));
            }
            self.on_frames_lost(now, space, &p);
            if p.in_flight {
                congestion.push(p);
            }
        }
        if let Some(t) = newest {
            self.cc.on_congestion_event(t, now);
            let period = self.pto_period(space);
            let refs: Vec<&SentPacket> = congestion.iter().collect();
            let first = self.rtt.first_sample_at();
            if persistent_congestion(&refs, self.spaces[space as usize].sent.acked(), period, first) {
                self.cc.on_persistent_congestion();
                self.trace(now, Category::Recovery, "persistent_congestion", json!({}));
                self.trace_cwnd(now, "persistent_congestion");
            } else {
                self.trace_cwnd(now, "loss");
            }
        }
    }

    fn on_frames_lost(&mut self, now: Instant, space: SpaceId, p: &SentPacket) {
        for f in &p.frames {
            match f {
                SentFrame::Crypto { offset, len } => self.space(space).crypto_send.on_lost(*offset, *len),
                SentFrame::Stream { id, offset, len, fin } => self.streams.on_stream_lost(*id, *offset, *len, *fin),
                SentFrame::ResetStream { id } => self.streams.on_reset_lost(*id),
                SentFrame::StopSending { id } => self.streams.on_stop_sending_lost(*id),
                SentFrame::MaxData => self.streams.on_max_data_lost(),
                SentFrame::MaxStreamData { id } => self.streams.on_max_stream_data_lost(*id),
                SentFrame::MaxStreams { dir } => self.streams.on_max_streams_lost(*dir),
                SentFrame::NewConnectionId { seq } => {
                    if self.local_cids.iter().any(|c| c.seq == *seq && !c.retired) {
                        self.new_cid_queue.push_back(*seq);
                    }
                }
                SentFrame::RetireConnectionId { seq } => self.retire_queue.push_back(*seq),
                SentFrame::NewToken { token } => {
                    if self.new_token_out.is_none() {
                        self.new_token_out = Some(token.clone());
                    }
                }
                SentFrame::PathChallenge { data } => {
                    if self.path.challenge.as_ref().is_some_and(|c| c.data == *data) {
                        self.path.challenge_pending = true;
                    }
                }
                SentFrame::Datagram { len } => {
                    self.trace(now, Category::Transport, "datagram_lost", json!({"len": len, "pn": p.pn}));
                    self.events.push_back(Event::DatagramLost { len: *len });
                }
                SentFrame::Ping => {
                    if self.side == Side::Client && self.handshake_complete && !self.handshake_confirmed {
                        self.confirm_ping = true;
                    }
                }
                SentFrame::Ack { .. }
                | SentFrame::Padding
                | SentFrame::PathResponse
                | SentFrame::ConnectionClose => {}
            }
        }
    }

    pub(crate) fn set_loss_timer(&mut self, now: Instant) {
        self.loss_timer = self.compute_loss_timer(now);
    }

    fn compute_loss_timer(&self, now: Instant) -> Option<(Instant, TimerKind)> {
        if matches!(self.state, State::Closing | State::Draining | State::Closed) {
            return None;
        }
        let earliest_loss = SpaceId::ALL
            .iter()
            .filter_map(|s| self.spaces[*s as usize].sent.loss_time().map(|t| (t, *s)))
            .min();
        if let Some((t, s)) = earliest_loss {
            return Some((t, TimerKind::Loss(s)));
        }
        // A server blocked by the amplification limit could not send a
        // probe anyway.
        if self.side == Side::Server && self.path.allowance() < MIN_INITIAL_SIZE as u64 {
            return None;
        }
        let any_in_flight = SpaceId::ALL
            .iter()
            .any(|s| self.spaces[*s as usize].sent.eliciting_in_flight() > 0);
        let peer_validated = self.side == Side::Server || self.handshake_complete;
        let backoff = 1u32 << self.pto_count.min(16);
        if !any_in_flight {
            if peer_validated {
                return None;
            }
            // Client anti-deadlock probe.
            let space = if self.spaces[1].keys.is_some() {
                SpaceId::Handshake
            } else {
                SpaceId::Initial
            };
            return Some((now + self.pto_period(space) * backoff, TimerKind::Pto(space)));
        }
        let mut best: Option<(Instant, TimerKind)> = None;
        for s in SpaceId::ALL {
            let sp = &self.spaces[s as usize];
            if sp.sent.eliciting_in_flight() == 0 {
                continue;
            }
            // Clients have no HANDSHAKE_DONE to wait for; they probe 1-RTT
            // as soon as they hold the keys.
            if s == SpaceId::Data && !self.handshake_complete {
                continue;
            }
            let Some(last) = sp.sent.last_eliciting_sent() else { continue };
            let t = last + self.pto_period(s) * backoff;
            if best.is_none_or(|(b, _)| t < b) {
                best = Some((t, TimerKind::Pto(s)));
            }
        }
        best
    }

    fn on_loss_timeout(&mut self, now: Instant, kind: TimerKind) {
        match kind {
            TimerKind::Loss(space) => {
                let lost = {
                    let (rtt, loss) = (&self.rtt, self.loss);
                    self.spaces[space as usize].sent.detect_lost(rtt, &loss, now)
                };
                self.on_packets_lost(now, space, lost);
            }
            TimerKind::Pto(space) => {
                self.pto_count += 1;
                let count = self.pto_count;
                self.trace(now, Category::Recovery, "pto_fired", json!({"space": space.name(), "count": count}));
                self.cc.on_pto_expiry(now);
                self.arm_probe(space);
                if space != SpaceId::Data {
                    let other = if space == SpaceId::Initial {
                        SpaceId::Handshake
                    } else {
                        SpaceId::Initial
                    };
                    if self.spaces[other as usize].sent.eliciting_in_flight() > 0 {
                        self.arm_probe(other);
                    }
                }
            }
        }
    }

    fn arm_probe(&mut self, space: SpaceId) {
        let s = self.space(space);
        if s.discarded {
            return;
        }
        s.probes = s.probes.saturating_add(1).min(2);
        if space != SpaceId::Data {
            s.crypto_send.requeue_unacked();
        }
    }

    // ----- timers -----

    fn idle_deadline(&self) -> Option<Instant> {
        let ms = match &self.limits {
            Some(l) => l.idle_timeout_ms?,
            None => match self.local_tp.max_idle_timeout_ms {
                0 => return None,
                x => x,
            },
        };
        Some(self.last_activity + Duration::from_millis(ms))
    }

    pub fn poll_timeout(&self) -> Option<Instant> {
        match self.state {
            State::Closed | State::Idle => return None,
            State::Closing | State::Draining => return self.closing.as_ref().map(|c| c.deadline),
            _ => {}
        }
        let mut t: Option<Instant> = None;
        let mut consider = |x: Option<Instant>| {
            if let Some(x) = x {
                t = Some(t.map_or(x, |t| t.min(x)));
            }
        };
        consider(self.loss_timer.map(|(t, _)| t));
        consider(self.idle_deadline());
        for s in &self.spaces {
            if s.keys.is_some() || (!s.discarded && std::ptr::eq(s, &self.spaces[2])) {
                consider(s.ack.ack_deadline());
            }
        }
        consider(self.pacing_until);
        consider(self.path.challenge.as_ref().map(|c| c.deadline));
        consider(self.pmtu.probe.map(|p| p.deadline));
        t
    }

    pub fn handle_timeout(&mut self, now: Instant) {
        match self.state {
            State::Closed | State::Idle => return,
            State::Closing | State::Draining => {
                if self.closing.as_ref().is_some_and(|c| c.deadline <= now) {
                    self.set_state(now, State::Closed);
                    self.closing = None;
                }
                return;
            }
            _ => {}
        }
        if self.pacing_until.is_some_and(|t| t <= now) {
            self.pacing_until = None;
        }
        if self.idle_deadline().is_some_and(|t| t <= now) {
            self.trace(now, Category::Transport, "idle_timeout", json!({}));
            self.close_silently(now, CloseReason::IdleTimeout);
            return;
        }
        if let Some((t, kind)) = self.loss_timer {
            if t <= now {
                self.loss_timer = None;
                self.on_loss_timeout(now, kind);
            }
        }
        if self.path.challenge.as_ref().is_some_and(|c| c.deadline <= now) {
            self.on_path_validation_failed(now);
        }
        if self.pmtu.probe.is_some_and(|p| p.deadline <= now) {
            self.on_pmtu_timeout(now);
        }
        if self.state != State::Closed {
            self.set_loss_timer(now);
        }
    }

    // ----- paths -----

    fn on_path_validated(&mut self, now: Instant) {
        self.path.validated = true;
        self.path.challenge = None;
        self.path.challenge_pending = false;
        let reset = self.path.reset_on_validate;
        self.path.reset_on_validate = false;
        let (local, remote) = (self.path.local, self.path.remote);
        self.fallback = None;
        self.trace(now, Category::Transport, "path_validated", json!({
            "local": addr_json(local),
            "remote": addr_json(remote),
            "reset": reset,
        }));
        if reset {
            self.cc.on_path_reset();
            self.rtt.reset();
            self.pacer.reset(now);
            self.trace(now, Category::Recovery, "rtt_reset", json!({
                "smoothed_us": self.rtt.smoothed().as_micros() as u64,
            }));
            self.last_cwnd = 0;
            self.trace_cwnd(now, "path_reset");
        }
        self.events.push_back(Event::PathValidated { local, remote });
    }

    fn on_path_validation_failed(&mut self, now: Instant) {
        let (local, remote) = (self.path.local, self.path.remote);
        self.path.challenge = None;
        self.path.challenge_pending = false;
        self.trace(now, Category::Transport, "path_validation_failed", json!({
            "local": addr_json(local),
            "remote": addr_json(remote),
        }));
        self.events.push_back(Event::PathValidationFailed { local, remote });
        match self.fallback.take() {
            Some(old) => {
                self.trace(now, Category::Transport, "path_reverted", json!({
                    "local": addr_json(old.local),
                    "remote": addr_json(old.remote),
                }));
                self.path = old;
            }
            None => {
                self.close_on_error(now, TransportError::new(code::NO_VIABLE_PATH, "path validation failed"));
            }
        }
    }

    fn on_pmtu_timeout(&mut self, now: Instant) {
        let Some(p) = self.pmtu.probe.take() else { return };
        if self.pmtu.attempts >= PMTU_ATTEMPTS {
            let attempts = self.pmtu.attempts;
            self.pmtu.hi = p.size - 1;
            self.pmtu.attempts = 0;
            self.trace(now, Category::Transport, "pmtu_probe_failed", json!({"size": p.size, "attempts": attempts}));
            self.check_pmtu_done(now);
        }
    }

    /// A probe lost while everything around it got through is too big; no
    /// need to retry it.
    fn on_pmtu_lost(&mut self, now: Instant, size: usize) {
        let Some(p) = self.pmtu.probe else { return };
        if p.size as usize != size || !self.pmtu.clean_since_probe {
            return;
        }
        self.pmtu.probe = None;
        self.pmtu.hi = p.size - 1;
        self.pmtu.attempts = 0;
        self.trace(now, Category::Transport, "pmtu_probe_failed", json!({"size": p.size, "attempts": 1}));
        self.check_pmtu_done(now);
    }

    fn on_pmtu_acked(&mut self, now: Instant, size: usize) {
        let size = size as u16;
        if self.pmtu.probe.is_some_and(|p| p.size == size) {
            self.pmtu.probe = None;
        }
        self.pmtu.attempts = 0;
        if size > self.pmtu.lo {
            self.pmtu.lo = size;
            self.path.mtu = size;
            self.cc.set_max_datagram_size(size as u64);
            self.pacer.set_max_datagram_size(size as u64);
            self.trace(now, Category::Transport, "pmtu_updated", json!({"mtu": size}));
        }
        self.check_pmtu_done(now);
    }

    fn check_pmtu_done(&mut self, now: Instant) {
        if !self.pmtu.done && self.pmtu.lo >= self.pmtu.hi {
            self.pmtu.done = true;
            self.pmtu.probe = None;
            let (mtu, steps) = (self.pmtu.lo, self.pmtu.steps);
            self.trace(now, Category::Transport, "pmtu_search_complete", json!({"mtu": mtu, "steps": steps}));
        }
    }

    // ----- stream events -----

    fn drain_stream_events(&mut self, now: Instant) {
        while let Some(ev) = self.streams.poll_event() {
            match &ev {
                StreamEvent::Readable { id, data } => {
                    let zero_rtt = self.packet_kind == Some(PacketKind::ZeroRtt);
                    self.trace(now, Category::Transport, "stream_data_delivered", json!({
                        "stream": id.0,
                        "len": data.len(),
                        "zero_rtt": zero_rtt,
                    }));
                }
                StreamEvent::Blocked(scope) => {
                    let (scope, stream) = match scope {
                        Scope::Connection => ("connection", None),
                        Scope::Stream(id) => ("stream", Some(*id)),
                    };
                    self.trace(now, Category::Flow, "flow_blocked", json!({"scope": scope, "stream": stream}));
                }
                StreamEvent::Closed { id, sent, received } => {
                    self.trace(now, Category::Flow, "stream_closed", json!({
                        "stream": id.0,
                        "sent": sent,
                        "received": received,
                    }));
                }
                StreamEvent::Reset { id, error_code, final_size } => {
                    self.trace(now, Category::Transport, "stream_reset_received", json!({
                        "stream": id.0,
                        "code": error_code,
                        "final_size": final_size,
                    }));
                }
                StreamEvent::Finished { id, final_size } => {
                    self.trace(now, Category::Transport, "stream_finished", json!({
                        "stream": id.0,
                        "final_size": final_size,
                    }));
                }
                _ => {}
            }
            self.events.push_back(Event::Stream(ev));
        }
    }
}

#[cfg(test)]
mod tests;

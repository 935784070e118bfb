//! Scenario documents and the runner that turns one into a trace.
//!
//! A scenario is a JSON object; every field has a default, so `{}` is a
//! valid scenario (a plain handshake over a 50 ms lossless link). Unknown
//! fields are rejected.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::codec::{is_known_version, version_name, VERSION_1, VERSION_2};
use crate::congestion::ControllerKind;
use crate::conn::{default_transport, ClientOptions, CloseReason, Config, Connection, Event, PacketKind};
use crate::endpoint::{App, ClientEndpoint, ServerEndpoint};
use crate::protection::SuiteKind;
use crate::simnet::{Addr, Command, LinkConfig, Node, World};
use crate::streams::{Dir, Side, StreamEvent, StreamId};
use crate::time::Instant;
use crate::trace::{Category, TraceHeader, TraceRecord, Tracer};

pub const SCENARIO_SCHEMA_VERSION: u32 = 1;

pub const CLIENT_ADDR: Addr = Addr { host: 1, port: 50_000 };
pub const SERVER_ADDR: Addr = Addr { host: 2, port: 443 };

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Scenario {
    pub schema_version: u32,
    pub name: String,
    pub seed: u64,
    #[serde(alias = "stopAfter_ms", alias = "stopAfterMs")]
    pub stop_after_ms: u64,
    pub link: LinkSpec,
    pub client: ClientSpec,
    pub server: ServerSpec,
    pub app: AppSpec,
    pub events: Vec<EventSpec>,
    /// Datagrams to discard on purpose, matched by the packets they carry.
    pub drops: Vec<DropSpec>,
}

impl Default for Scenario {
    fn default() -> Self {
        Scenario {
            schema_version: SCENARIO_SCHEMA_VERSION,
            name: String::new(),
            seed: 0,
            stop_after_ms: 60_000,
            link: LinkSpec::default(),
            client: ClientSpec::default(),
            server: ServerSpec::default(),
            app: AppSpec::default(),
            events: Vec::new(),
            drops: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LinkSpec {
    /// One-way delay.
    pub delay_ms: f64,
    pub jitter_ms: f64,
    pub loss_pct: f64,
    pub reorder_pct: f64,
    /// How many places a reordered datagram may overtake.
    pub reorder_depth: u64,
    pub mtu: u64,
}

impl Default for LinkSpec {
    fn default() -> Self {
        LinkSpec {
            delay_ms: 50.0,
            jitter_ms: 0.0,
            loss_pct: 0.0,
            reorder_pct: 0.0,
            reorder_depth: 1,
            mtu: 1500,
        }
    }
}

/// A version given as `"v1"`, `"v2"`, a hex string or a number.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum VersionSpec {
    Number(u32),
    Name(String),
}

impl VersionSpec {
    pub fn resolve(&self) -> Option<u32> {
        match self {
            VersionSpec::Number(n) => Some(*n),
            VersionSpec::Name(s) => match s.as_str() {
                "v1" => Some(VERSION_1),
                "v2" => Some(VERSION_2),
                s => u32::from_str_radix(s.trim_start_matches("0x"), 16).ok(),
            },
        }
    }
}

fn default_versions() -> Vec<VersionSpec> {
    vec![VersionSpec::Name("v1".into())]
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TransportSpec {
    pub max_data: Option<u64>,
    /// Applies to all three per-stream limits.
    pub max_stream_data: Option<u64>,
    pub max_streams_bidi: Option<u64>,
    pub max_streams_uni: Option<u64>,
    pub idle_timeout_ms: Option<u64>,
    pub max_datagram_frame_size: Option<u64>,
    pub max_ack_delay_ms: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClientSpec {
    pub versions: Vec<VersionSpec>,
    pub suite: String,
    /// Run a priming connection first and resume its session.
    #[serde(alias = "storedSession")]
    pub stored_session: bool,
    #[serde(alias = "earlyDataBytes")]
    pub early_data_bytes: u64,
    pub compatible_versions: bool,
    pub controller: String,
    pub pmtu_ceiling: u16,
    /// Test hook: the client goes silent after sending this many datagrams.
    pub silent_after_datagrams: Option<u64>,
    pub transport: TransportSpec,
}

impl Default for ClientSpec {
    fn default() -> Self {
        ClientSpec {
            versions: default_versions(),
            suite: "null".into(),
            stored_session: false,
            early_data_bytes: 0,
            compatible_versions: true,
            controller: "newreno".into(),
            pmtu_ceiling: 1200,
            silent_after_datagrams: None,
            transport: TransportSpec::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ServerSpec {
    pub versions: Vec<VersionSpec>,
    pub suite: String,
    #[serde(alias = "retryRequired")]
    pub retry_required: bool,
    #[serde(alias = "tokenLifetime_s")]
    pub token_lifetime_s: u64,
    pub compatible_versions: bool,
    pub accept_early_data: bool,
    pub controller: String,
    pub pmtu_ceiling: u16,
    pub transport: TransportSpec,
}

impl Default for ServerSpec {
    fn default() -> Self {
        ServerSpec {
            versions: default_versions(),
            suite: "null".into(),
            retry_required: false,
            token_lifetime_s: 86_400,
            compatible_versions: true,
            accept_early_data: true,
            controller: "newreno".into(),
            pmtu_ceiling: 1200,
            transport: TransportSpec::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StreamCount {
    pub bidi: u64,
    pub uni: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AppSpec {
    #[serde(alias = "bulkBytesPerStream")]
    pub bulk_bytes_per_stream: u64,
    #[serde(alias = "streamCount")]
    pub stream_count: StreamCount,
    /// Payload size of each DATAGRAM frame the client sends.
    pub datagrams: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MigrateKind {
    #[serde(alias = "newHost")]
    NewHost,
    #[serde(alias = "newPortOnly")]
    NewPortOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    Migrate(MigrateKind),
    #[serde(alias = "closeImmediate")]
    CloseImmediate,
    #[serde(alias = "dropState")]
    DropState,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EventSpec {
    pub at_ms: u64,
    pub action: Action,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropSpace {
    Initial,
    Handshake,
    /// 0-RTT and 1-RTT packets.
    Application,
}

/// Discards the first datagram `from` sends that carries packet `pn` of
/// `space`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DropSpec {
    pub from: Side,
    pub space: DropSpace,
    pub pn: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ScenarioError {
    #[error("parse error: {0}")]
    Parse(String),
    #[error("{field}: {message}")]
    Invalid { field: String, message: String },
}

fn invalid(field: &str, message: impl Into<String>) -> ScenarioError {
    ScenarioError::Invalid {
        field: field.into(),
        message: message.into(),
    }
}

impl Scenario {
    /// Parses and validates a scenario document.
    pub fn from_json(text: &str) -> Result<Self, ScenarioError> {
        let s: Scenario = serde_json::from_str(text).map_err(|e| ScenarioError::Parse(e.to_string()))?;
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        if self.schema_version != SCENARIO_SCHEMA_VERSION {
            return Err(invalid("schema_version", format!("unsupported schema version {}", self.schema_version)));
        }
        let l = &self.link;
        if !(0.0..=100.0).contains(&l.loss_pct) {
            return Err(invalid("link.loss_pct", "must be within 0..=100"));
        }
        if !(0.0..=100.0).contains(&l.reorder_pct) {
            return Err(invalid("link.reorder_pct", "must be within 0..=100"));
        }
        if !(1..=16).contains(&l.reorder_depth) {
            return Err(invalid("link.reorder_depth", "must be within 1..=16"));
        }
        if !(l.delay_ms >= 0.0 && l.delay_ms.is_finite()) {
            return Err(invalid("link.delay_ms", "must be a non-negative number"));
        }
        if !(l.jitter_ms >= 0.0 && l.jitter_ms.is_finite()) {
            return Err(invalid("link.jitter_ms", "must be a non-negative number"));
        }
        if l.mtu < 1200 {
            return Err(invalid("link.mtu", "mtu must be ≥ 1200"));
        }
        if l.mtu > 65_527 {
            return Err(invalid("link.mtu", "mtu must be ≤ 65527"));
        }
        if self.stop_after_ms == 0 {
            return Err(invalid("stop_after_ms", "must be positive"));
        }
        self.client_config()?;
        self.server_config()?;
        for (i, e) in self.events.iter().enumerate() {
            if e.at_ms > self.stop_after_ms {
                return Err(invalid(&format!("events[{i}].at_ms"), "later than stop_after_ms"));
            }
        }
        Ok(())
    }

    fn versions(field: &str, v: &[VersionSpec]) -> Result<Vec<u32>, ScenarioError> {
        if v.is_empty() {
            return Err(invalid(field, "at least one version is required"));
        }
        v.iter()
            .enumerate()
            .map(|(i, s)| match s.resolve() {
                Some(n) if is_known_version(n) => Ok(n),
                _ => Err(invalid(&format!("{field}[{i}]"), format!("unknown version {s:?}"))),
            })
            .collect()
    }

    fn base_config(
        side: &str,
        versions: &[VersionSpec],
        suite: &str,
        controller: &str,
        pmtu_ceiling: u16,
        compatible: bool,
        t: &TransportSpec,
    ) -> Result<Config, ScenarioError> {
        let mut cfg = Config {
            versions: Self::versions(&format!("{side}.versions"), versions)?,
            suite: SuiteKind::from_name(suite)
                .ok_or_else(|| invalid(&format!("{side}.suite"), format!("unknown suite {suite:?}")))?,
            controller: ControllerKind::from_name(controller)
                .ok_or_else(|| invalid(&format!("{side}.controller"), format!("unknown controller {controller:?}")))?,
            compatible_versions: compatible,
            pmtu_ceiling,
            transport: default_transport(),
            ..Config::default()
        };
        let tp = &mut cfg.transport;
        if let Some(v) = t.max_data {
            tp.initial_max_data = v;
        }
        if let Some(v) = t.max_stream_data {
            tp.initial_max_stream_data_bidi_local = v;
            tp.initial_max_stream_data_bidi_remote = v;
            tp.initial_max_stream_data_uni = v;
        }
        if let Some(v) = t.max_streams_bidi {
            tp.initial_max_streams_bidi = v;
        }
        if let Some(v) = t.max_streams_uni {
            tp.initial_max_streams_uni = v;
        }
        if let Some(v) = t.idle_timeout_ms {
            tp.max_idle_timeout_ms = v;
        }
        if let Some(v) = t.max_datagram_frame_size {
            tp.max_datagram_frame_size = v;
        }
        if let Some(v) = t.max_ack_delay_ms {
            if v >= 1 << 14 {
                return Err(invalid(&format!("{side}.transport.max_ack_delay_ms"), "must be below 16384"));
            }
            tp.max_ack_delay_ms = v;
        }
        cfg.validate().map_err(|e| invalid(side, e.to_string()))?;
        Ok(cfg)
    }

    pub fn client_config(&self) -> Result<Config, ScenarioError> {
        let c = &self.client;
        Self::base_config(
            "client",
            &c.versions,
            &c.suite,
            &c.controller,
            c.pmtu_ceiling,
            c.compatible_versions,
            &c.transport,
        )
    }

    pub fn server_config(&self) -> Result<Config, ScenarioError> {
        let s = &self.server;
        let mut cfg = Self::base_config(
            "server",
            &s.versions,
            &s.suite,
            &s.controller,
            s.pmtu_ceiling,
            s.compatible_versions,
            &s.transport,
        )?;
        cfg.token_lifetime = Duration::from_secs(s.token_lifetime_s);
        cfg.accept_early_data = s.accept_early_data;
        Ok(cfg)
    }

    pub fn link_config(&self) -> LinkConfig {
        let ms = |v: f64| Duration::from_micros((v * 1000.0).round() as u64);
        LinkConfig {
            delay: ms(self.link.delay_ms),
            jitter: ms(self.link.jitter_ms),
            loss: self.link.loss_pct / 100.0,
            reorder: self.link.reorder_pct / 100.0,
            reorder_depth: self.link.reorder_depth as usize,
            mtu: self.link.mtu as usize,
        }
    }
}

/// Byte `offset` of the payload on stream `id`.
pub fn pattern_byte(id: u64, offset: u64) -> u8 {
    ((offset.wrapping_mul(31).wrapping_add(id.wrapping_mul(7))) % 251) as u8
}

pub fn pattern(id: u64, start: u64, len: u64) -> Vec<u8> {
    (start..start + len).map(|o| pattern_byte(id, o)).collect()
}

/// The client side of a scenario's application: early data, bulk streams
/// and datagrams, then a graceful close once everything settled.
#[derive(Debug, Clone)]
pub struct ClientApp {
    spec: AppSpec,
    early_data_bytes: u64,
    /// Do not close before this instant (scheduled events still pending).
    hold_until: Instant,
    wait_for_ticket: bool,
    started: bool,
    early_pending: bool,
    to_open: VecDeque<Dir>,
    pub early_stream: Option<StreamId>,
    pub opened: Vec<StreamId>,
    pub closed: BTreeSet<StreamId>,
    pub datagrams_queued: usize,
    pub datagram_errors: usize,
    pub got_ticket: bool,
    pub done: bool,
}

impl ClientApp {
    pub fn new(spec: AppSpec, early_data_bytes: u64, hold_until: Instant) -> Self {
        ClientApp {
            spec,
            early_data_bytes,
            hold_until,
            wait_for_ticket: false,
            started: false,
            early_pending: false,
            to_open: VecDeque::new(),
            early_stream: None,
            opened: Vec::new(),
            closed: BTreeSet::new(),
            datagrams_queued: 0,
            datagram_errors: 0,
            got_ticket: false,
            done: false,
        }
    }

    fn write_stream(conn: &mut Connection, id: StreamId, len: u64) {
        let data = pattern(id.0, 0, len);
        // Failures surface later as incomplete streams.
        let _ = conn.write(id, &data).and_then(|_| conn.finish(id));
    }

    fn open_pending(&mut self, conn: &mut Connection) {
        if self.early_pending {
            if let Ok(id) = conn.open_stream(Dir::Bidi) {
                Self::write_stream(conn, id, self.early_data_bytes);
                self.early_stream = Some(id);
                self.opened.push(id);
                self.early_pending = false;
            }
        }
        while let Some(dir) = self.to_open.front().copied() {
            let Ok(id) = conn.open_stream(dir) else { break };
            self.to_open.pop_front();
            Self::write_stream(conn, id, self.spec.bulk_bytes_per_stream);
            self.opened.push(id);
        }
    }

    fn settled(&self, now: Instant, conn: &Connection) -> bool {
        self.started
            && !self.early_pending
            && self.to_open.is_empty()
            && self.opened.iter().all(|id| self.closed.contains(id))
            && conn.datagrams_pending() == 0
            && conn.bytes_in_flight() == 0
            && conn.is_handshake_confirmed()
            && conn.path().validated
            && conn.pmtu_settled()
            && now >= self.hold_until
            && (!self.wait_for_ticket || self.got_ticket)
    }
}

impl App for ClientApp {
    fn on_start(&mut self, _now: Instant, conn: &mut Connection) {
        let keep = (self.spec.clone(), self.early_data_bytes, self.hold_until, self.wait_for_ticket);
        *self = ClientApp::new(keep.0, keep.1, keep.2);
        self.wait_for_ticket = keep.3;
        if self.early_data_bytes > 0 {
            self.early_pending = true;
            self.open_pending(conn);
        }
    }

    fn on_event(&mut self, _now: Instant, conn: &mut Connection, event: &Event) {
        match event {
            Event::HandshakeComplete if !self.started => {
                self.started = true;
                for _ in 0..self.spec.stream_count.bidi {
                    self.to_open.push_back(Dir::Bidi);
                }
                for _ in 0..self.spec.stream_count.uni {
                    self.to_open.push_back(Dir::Uni);
                }
                self.open_pending(conn);
                for (i, size) in self.spec.datagrams.iter().enumerate() {
                    let payload = pattern(u64::MAX - i as u64, 0, *size as u64);
                    match conn.send_datagram(payload) {
                        Ok(()) => self.datagrams_queued += 1,
                        Err(_) => self.datagram_errors += 1,
                    }
                }
            }
            Event::SessionTicket(_) => self.got_ticket = true,
            Event::Stream(StreamEvent::Closed { id, .. }) => {
                self.closed.insert(*id);
            }
            _ => {}
        }
    }

    fn poll(&mut self, now: Instant, conn: &mut Connection) {
        if conn.is_closed() || self.done {
            return;
        }
        self.open_pending(conn);
        if self.settled(now, conn) {
            self.done = true;
            conn.close(now, 0, "done");
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct StreamTally {
    pub bytes: u64,
    pub finished: bool,
    /// Bytes that differ from the expected pattern.
    pub mismatched: u64,
}

/// Checks every byte the client sends against the pattern and closes the
/// server half of each finished bidirectional stream.
#[derive(Debug, Clone, Default)]
pub struct ServerApp {
    pub streams: BTreeMap<u64, StreamTally>,
    pub datagrams: Vec<usize>,
    /// Instants at which stream data arrived in 0-RTT packets is not visible
    /// here; the trace records it.
    pub first_data_at: Option<Instant>,
}

impl App for ServerApp {
    fn on_event(&mut self, now: Instant, conn: &mut Connection, event: &Event) {
        match event {
            Event::Stream(StreamEvent::Readable { id, data }) => {
                self.first_data_at.get_or_insert(now);
                let t = self.streams.entry(id.0).or_default();
                let expected = pattern(id.0, t.bytes, data.len() as u64);
                t.mismatched += expected.iter().zip(data).filter(|(a, b)| a != b).count() as u64;
                t.bytes += data.len() as u64;
            }
            Event::Stream(StreamEvent::Finished { id, .. }) => {
                self.streams.entry(id.0).or_default().finished = true;
                if id.dir() == Dir::Bidi {
                    let _ = conn.finish(*id);
                }
            }
            Event::Datagram(d) => self.datagrams.push(d.len()),
            _ => {}
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    /// The client closed (or was closed) gracefully and every byte matched.
    Completed,
    /// The deadline passed with the connection still open.
    Stopped,
    ConnectionError,
}

impl Outcome {
    pub fn exit_code(self) -> i32 {
        match self {
            Outcome::Completed | Outcome::Stopped => 0,
            Outcome::ConnectionError => 2,
        }
    }
}

#[derive(Debug)]
pub struct RunResult {
    pub header: TraceHeader,
    pub trace: Vec<TraceRecord>,
    pub summary: Summary,
    pub outcome: Outcome,
    pub client: ClientApp,
    pub server: ServerApp,
    /// Session and token the client resumed with, if any.
    pub resumed: bool,
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub seed: Option<u64>,
    pub stop_after_ms: Option<u64>,
}

fn drop_filter(rules: Vec<DropSpec>) -> crate::simnet::Filter {
    let mut fired = vec![false; rules.len()];
    Box::new(move |side, _, t| {
        let mut hit = false;
        for (i, r) in rules.iter().enumerate() {
            if fired[i] || r.from != side {
                continue;
            }
            let matches = t.packets.iter().any(|p| {
                p.pn == r.pn
                    && match r.space {
                        DropSpace::Initial => p.kind == PacketKind::Initial,
                        DropSpace::Handshake => p.kind == PacketKind::Handshake,
                        DropSpace::Application => matches!(p.kind, PacketKind::ZeroRtt | PacketKind::OneRtt),
                    }
            });
            if matches {
                fired[i] = true;
                hit = true;
            }
        }
        hit
    })
}

/// Runs a handshake-only connection to collect a session ticket and an
/// address token. Loss-free, so resumption does not depend on luck.
fn prime(s: &Scenario, client_cfg: &Config, server_cfg: &Config, seed: u64) -> (Option<crate::conn::StoredSession>, Option<Vec<u8>>) {
    let mut app = ClientApp::new(AppSpec::default(), 0, Instant::ZERO);
    app.wait_for_ticket = true;
    let opts = ClientOptions {
        seed: seed ^ 0x7072_696d,
        ..ClientOptions::default()
    };
    let Ok(mut client) = ClientEndpoint::connect(client_cfg.clone(), Instant::ZERO, CLIENT_ADDR, SERVER_ADDR, opts, app) else {
        return (None, None);
    };
    let mut server = ServerEndpoint::new(
        server_cfg.clone(),
        SERVER_ADDR,
        s.server.retry_required,
        seed ^ 0x7365_7276,
        Box::new(ServerApp::default),
    );
    let link = LinkConfig {
        loss: 0.0,
        reorder: 0.0,
        jitter: Duration::ZERO,
        ..s.link_config()
    };
    let mut world = World::new(link, seed ^ 0x6c69_6e6b);
    world.run_until(&mut [&mut client as &mut dyn Node, &mut server], Instant::from_secs(60));
    (client.sessions().last().cloned(), client.tokens().last().cloned())
}

/// A scenario wired up and ready to run. Tests may add filters to the
/// world or inspect the endpoints before calling [`Prepared::run`].
pub struct Prepared {
    pub world: World,
    pub client: ClientEndpoint<ClientApp>,
    pub server: ServerEndpoint<ServerApp>,
    pub seed: u64,
    pub stop: Instant,
    pub name: String,
    pub resumed: bool,
}

/// Runs a validated scenario to completion or to its deadline.
pub fn run(s: &Scenario, opts: &RunOptions) -> RunResult {
    prepare(s, opts).run()
}

/// Builds the endpoints and the world for a validated scenario.
pub fn prepare(s: &Scenario, opts: &RunOptions) -> Prepared {
    let seed = opts.seed.unwrap_or(s.seed);
    let stop = Instant::from_millis(opts.stop_after_ms.unwrap_or(s.stop_after_ms));
    let client_cfg = s.client_config().expect("validated scenario");
    let server_cfg = s.server_config().expect("validated scenario");

    let (session, token) = if s.client.stored_session {
        prime(s, &client_cfg, &server_cfg, seed)
    } else {
        (None, None)
    };
    let resumed = session.is_some();

    let hold_until = Instant::from_millis(s.events.iter().map(|e| e.at_ms).max().unwrap_or(0));
    let app = ClientApp::new(s.app.clone(), s.client.early_data_bytes, hold_until);
    let copts = ClientOptions {
        session,
        token,
        early_data: s.client.early_data_bytes > 0,
        version: None,
        seed,
    };
    let client = ClientEndpoint::connect(client_cfg, Instant::ZERO, CLIENT_ADDR, SERVER_ADDR, copts, app)
        .expect("validated scenario");
    let server = ServerEndpoint::new(
        server_cfg,
        SERVER_ADDR,
        s.server.retry_required,
        seed.wrapping_add(1),
        Box::new(ServerApp::default),
    );
    let mut world = World::new(s.link_config(), seed);
    if let Some(n) = s.client.silent_after_datagrams {
        world.add_filter(Box::new(move |side, index, _| side == Side::Client && index >= n));
    }
    if !s.drops.is_empty() {
        world.add_filter(drop_filter(s.drops.clone()));
    }
    let mut events = s.events.clone();
    events.sort_by_key(|e| e.at_ms);
    let mut addr = CLIENT_ADDR;
    for e in &events {
        let at = Instant::from_millis(e.at_ms);
        match e.action {
            Action::Migrate(kind) => {
                addr = match kind {
                    MigrateKind::NewHost => Addr {
                        host: addr.host + 100,
                        port: addr.port,
                    },
                    MigrateKind::NewPortOnly => Addr {
                        host: addr.host,
                        port: addr.port + 1,
                    },
                };
                world.schedule(at, 0, Command::Migrate {
                    new_local: addr,
                    keep_fallback: false,
                });
            }
            Action::CloseImmediate => world.schedule(at, 0, Command::CloseImmediate),
            Action::DropState => world.schedule(at, 1, Command::DropState),
        }
    }

    Prepared {
        world,
        client,
        server,
        seed,
        stop,
        name: if s.name.is_empty() { "unnamed".to_string() } else { s.name.clone() },
        resumed,
    }
}

impl Prepared {
    pub fn run(self) -> RunResult {
        let Prepared {
            mut world,
            mut client,
            mut server,
            seed,
            stop,
            name,
            resumed,
        } = self;
        world.run_until(&mut [&mut client as &mut dyn Node, &mut server], stop);
        let mut trace = world.take_trace();

        let client_app = client.app().clone();
        let server_app = server.connections().next().map(|(_, a)| a.clone()).unwrap_or_default();
        let mismatched: u64 = server_app.streams.values().map(|t| t.mismatched).sum();
        let conn = client.conn();
        let (outcome, detail) = match conn.close_reason() {
            None => (Outcome::Stopped, "deadline reached".to_string()),
            Some(r @ (CloseReason::Local { code: 0, .. } | CloseReason::Peer { code: 0, .. })) if mismatched == 0 => {
                (Outcome::Completed, r.name().to_string())
            }
            Some(r) if mismatched > 0 => (Outcome::ConnectionError, format!("{}; {mismatched} corrupted bytes", r.name())),
            Some(r) => (Outcome::ConnectionError, describe(r)),
        };
        let mut tracer = Tracer::new(Side::Client);
        tracer.emit(world.now(), Category::Transport, "run_finished", json!({
            "outcome": match outcome {
                Outcome::Completed => "completed",
                Outcome::Stopped => "stopped",
                Outcome::ConnectionError => "connection_error",
            },
            "detail": detail,
            "version": version_name(conn.version()),
            "mismatched_bytes": mismatched,
        }));
        tracer.drain_into(&mut trace);
        let summary = Summary::from_trace(&trace);
        RunResult {
            header: TraceHeader::new(seed, name),
            trace,
            summary,
            outcome,
            client: client_app,
            server: server_app,
            resumed,
        }
    }
}

fn describe(r: &CloseReason) -> String {
    match r {
        CloseReason::Local { code, reason, .. } | CloseReason::Peer { code, reason, .. } => {
            format!("{} code {code}: {reason}", r.name())
        }
        other => other.name().to_string(),
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ByteCounts {
    pub client_sent: u64,
    pub client_received: u64,
    pub server_sent: u64,
    pub server_received: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct RttSummary {
    pub latest_us: u64,
    pub min_us: u64,
    pub smoothed_us: u64,
    pub rttvar_us: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MigrationSummary {
    pub at_ms: f64,
    pub from: String,
    pub to: String,
    pub port_only: bool,
    /// `validated`, `failed` or `pending`.
    pub outcome: String,
    pub congestion_reset: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct DatagramCounts {
    pub sent: u64,
    pub received: u64,
    pub lost: u64,
}

/// Run report. Built from trace records only, so it can be recomputed from
/// a saved trace.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct Summary {
    pub outcome: String,
    pub detail: String,
    pub duration_ms: f64,
    pub handshake_complete_ms: Option<f64>,
    /// Handshake duration in units of the first RTT sample.
    pub handshake_rtts: Option<u64>,
    pub version: Option<String>,
    pub bytes: ByteCounts,
    /// STREAM frames carrying bytes sent before, on both sides.
    pub retransmissions: u64,
    pub losses: BTreeMap<String, u64>,
    pub pto_count: u64,
    pub rtt: Option<RttSummary>,
    pub migrations: Vec<MigrationSummary>,
    pub datagrams: DatagramCounts,
    pub flow_violations: u64,
    pub path_mtu: Option<u64>,
}

fn ms(us: u64) -> f64 {
    us as f64 / 1000.0
}

impl Summary {
    pub fn from_trace(trace: &[TraceRecord]) -> Summary {
        let mut s = Summary {
            losses: [("packetThreshold".to_string(), 0), ("timeThreshold".to_string(), 0)].into(),
            ..Summary::default()
        };
        let mut start = None;
        let mut first_sample = None;
        let mut sent_ids: BTreeMap<u64, Side> = BTreeMap::new();
        for r in trace {
            let client = r.endpoint == Side::Client;
            s.duration_ms = s.duration_ms.max(ms(r.time_us));
            match r.event.as_str() {
                "connection_started" if client => {
                    start.get_or_insert(r.time_us);
                }
                "handshake_complete" if client => {
                    s.handshake_complete_ms = Some(ms(r.time_us));
                    s.version = r.str("version").map(str::to_string);
                    if let (Some(st), Some(rtt)) = (start, first_sample) {
                        let took = r.time_us - st;
                        s.handshake_rtts = Some(((took as f64) / (rtt as f64)).round() as u64);
                    }
                }
                "rtt_updated" if client => {
                    let latest = r.u64("latest_us").unwrap_or(0);
                    first_sample.get_or_insert(latest);
                    s.rtt = Some(RttSummary {
                        latest_us: latest,
                        min_us: r.u64("min_us").unwrap_or(0),
                        smoothed_us: r.u64("smoothed_us").unwrap_or(0),
                        rttvar_us: r.u64("rttvar_us").unwrap_or(0),
                    });
                }
                "udp_sent" => {
                    let size = r.u64("size").unwrap_or(0);
                    sent_ids.insert(r.u64("id").unwrap_or(0), r.endpoint);
                    if client {
                        s.bytes.client_sent += size;
                    } else {
                        s.bytes.server_sent += size;
                    }
                }
                "udp_delivered" => {
                    let size = r.u64("size").unwrap_or(0);
                    if client {
                        s.bytes.client_received += size;
                    } else {
                        s.bytes.server_received += size;
                    }
                }
                "stream_data_sent" if r.bool("retransmit") == Some(true) => s.retransmissions += 1,
                "packet_lost" => {
                    if let Some(t) = r.str("trigger") {
                        *s.losses.entry(t.to_string()).or_default() += 1;
                    }
                }
                "pto_fired" => s.pto_count += 1,
                "migration_started" if client => s.migrations.push(MigrationSummary {
                    at_ms: ms(r.time_us),
                    from: r.str("from").unwrap_or_default().to_string(),
                    to: r.str("to").unwrap_or_default().to_string(),
                    port_only: r.bool("port_only").unwrap_or(false),
                    outcome: "pending".into(),
                    congestion_reset: false,
                }),
                "path_validated" if client => {
                    if let Some(m) = s.migrations.last_mut().filter(|m| m.outcome == "pending") {
                        m.outcome = "validated".into();
                        m.congestion_reset = r.bool("reset").unwrap_or(false);
                    }
                }
                "path_validation_failed" if client => {
                    if let Some(m) = s.migrations.last_mut().filter(|m| m.outcome == "pending") {
                        m.outcome = "failed".into();
                    }
                }
                "datagram_sent" if client => s.datagrams.sent += 1,
                "datagram_received" if !client => s.datagrams.received += 1,
                "datagram_lost" if client => s.datagrams.lost += 1,
                "flow_violation" => s.flow_violations += 1,
                "pmtu_updated" if client => s.path_mtu = r.u64("mtu"),
                "run_finished" => {
                    s.outcome = r.str("outcome").unwrap_or_default().to_string();
                    s.detail = r.str("detail").unwrap_or_default().to_string();
                }
                _ => {}
            }
        }
        s
    }
}

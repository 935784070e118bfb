//! Endpoints: the layer that owns connections and answers datagrams no
//! connection claims.
//!
//! The server endpoint routes by destination connection id, answers
//! unsupported versions with Version Negotiation, enforces Retry when asked
//! to, and sends stateless resets for short-header packets it cannot route.
//! The client endpoint wraps one connection and restarts it when a Version
//! Negotiation packet names a version both sides support.

use std::collections::VecDeque;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use crate::codec::{is_known_version, ConnectionId, Header, LongPacketType, PacketShell, RetryHeader, ShellKind, VersionNegotiation};
use crate::conn::{
    reset_token, AddressToken, ClientOptions, CloseReason, Config, Connection, Event, ServerOptions, StoredSession,
    TokenOrigin, Transmit, MIN_INITIAL_SIZE, MIN_STATELESS_RESET,
};
use crate::protection::retry_integrity_tag;
use crate::simnet::{Addr, Command, Node};
use crate::streams::Side;
use crate::time::Instant;
use crate::trace::{Category, TraceRecord, Tracer};

/// Application logic riding on a connection. Every hook may drive the
/// connection's stream and datagram API.
pub trait App {
    /// A connection was created (again, after a version restart).
    fn on_start(&mut self, _now: Instant, _conn: &mut Connection) {}
    fn on_event(&mut self, _now: Instant, _conn: &mut Connection, _event: &Event) {}
    /// Runs after every batch of input.
    fn poll(&mut self, _now: Instant, _conn: &mut Connection) {}
}

/// Does nothing.
#[derive(Debug, Default, Clone, Copy)]
pub struct NoApp;

impl App for NoApp {}

fn service<A: App>(now: Instant, conn: &mut Connection, app: &mut A) {
    while let Some(ev) = conn.poll_event() {
        app.on_event(now, conn, &ev);
    }
    app.poll(now, conn);
    // The app may have produced events of its own (e.g. a close).
    while let Some(ev) = conn.poll_event() {
        app.on_event(now, conn, &ev);
    }
}

pub struct ServerEndpoint<A: App> {
    cfg: Config,
    local: Addr,
    retry_required: bool,
    conns: Vec<(Connection, A)>,
    factory: Box<dyn FnMut() -> A>,
    stateless: VecDeque<Transmit>,
    rng: ChaCha8Rng,
    tracer: Tracer,
}

impl<A: App> std::fmt::Debug for ServerEndpoint<A> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ServerEndpoint")
            .field("local", &self.local)
            .field("connections", &self.conns.len())
            .finish_non_exhaustive()
    }
}

impl<A: App> ServerEndpoint<A> {
    pub fn new(cfg: Config, local: Addr, retry_required: bool, seed: u64, factory: Box<dyn FnMut() -> A>) -> Self {
        ServerEndpoint {
            cfg,
            local,
            retry_required,
            conns: Vec::new(),
            factory,
            stateless: VecDeque::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            tracer: Tracer::new(Side::Server),
        }
    }

    pub fn connections(&self) -> impl Iterator<Item = &(Connection, A)> {
        self.conns.iter()
    }

    pub fn connections_mut(&mut self) -> impl Iterator<Item = &mut (Connection, A)> {
        self.conns.iter_mut()
    }

    /// Forgets every connection, as after a crash. The static key survives,
    /// so stray packets still earn a valid stateless reset.
    pub fn drop_state(&mut self, now: Instant) {
        self.tracer.emit(now, Category::Transport, "state_dropped", json!({"connections": self.conns.len()}));
        for (c, _) in &mut self.conns {
            c.drain_trace(&mut Vec::new());
        }
        self.conns.clear();
    }

    fn trace(&mut self, now: Instant, category: Category, event: &str, data: serde_json::Value) {
        self.tracer.emit(now, category, event, data);
    }

    fn route(&self, dcid: &ConnectionId) -> Option<usize> {
        self.conns.iter().position(|(c, _)| !c.is_closed() && c.owns_cid(dcid))
    }

    fn understands(&self, version: u32) -> bool {
        self.cfg.versions.contains(&version) || (self.cfg.compatible_versions && is_known_version(version))
    }

    pub fn handle_datagram(&mut self, now: Instant, local: Addr, remote: Addr, data: &[u8]) {
        let shell = match PacketShell::parse(data, self.cfg.cid_len) {
            Ok(s) => s,
            Err(e) => {
                self.trace(now, Category::Transport, "datagram_dropped", json!({
                    "reason": "unparseable",
                    "detail": e.to_string(),
                    "size": data.len(),
                }));
                return;
            }
        };
        if let Some(i) = self.route(&shell.dcid) {
            let (conn, app) = &mut self.conns[i];
            conn.handle_datagram(now, local, remote, data);
            service(now, conn, app);
            return;
        }
        match shell.kind {
            ShellKind::Short => self.stateless_reset(now, local, remote, &shell.dcid, data.len()),
            ShellKind::UnsupportedVersion { version, scid } => {
                self.version_negotiation(now, local, remote, version, shell.dcid, scid, data.len())
            }
            ShellKind::Long {
                ty: LongPacketType::Initial,
                version,
                scid,
                token,
                ..
            } => {
                if data.len() < MIN_INITIAL_SIZE {
                    self.trace(now, Category::Security, "datagram_dropped", json!({
                        "reason": "initial_too_small",
                        "size": data.len(),
                    }));
                } else if !self.understands(version) {
                    self.version_negotiation(now, local, remote, version, shell.dcid, scid, data.len());
                } else {
                    self.on_new_initial(now, local, remote, version, shell.dcid, scid, &token, data);
                }
            }
            ShellKind::Long { version, scid, .. } if !self.understands(version) => {
                self.version_negotiation(now, local, remote, version, shell.dcid, scid, data.len())
            }
            _ => self.trace(now, Category::Transport, "datagram_dropped", json!({
                "reason": "unknown_connection",
                "size": data.len(),
            })),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn version_negotiation(
        &mut self,
        now: Instant,
        local: Addr,
        remote: Addr,
        version: u32,
        dcid: ConnectionId,
        scid: ConnectionId,
        size: usize,
    ) {
        if size < MIN_INITIAL_SIZE {
            self.trace(now, Category::Transport, "datagram_dropped", json!({
                "reason": "unsupported_version",
                "size": size,
            }));
            return;
        }
        let mut out = Vec::new();
        Header::VersionNegotiation(VersionNegotiation {
            unused: self.rng.gen::<u8>() & 0x7f,
            dcid: scid,
            scid: dcid,
            versions: self.cfg.versions.clone(),
        })
        .encode(&mut out);
        self.trace(now, Category::Transport, "version_negotiation_sent", json!({
            "client_version": format!("{version:#010x}"),
            "offered": self.cfg.versions.iter().map(|v| format!("{v:#010x}")).collect::<Vec<_>>(),
            "size": out.len(),
        }));
        self.stateless.push_back(Transmit {
            src: local,
            dst: remote,
            data: out,
            packets: Vec::new(),
        });
    }

    #[allow(clippy::too_many_arguments)]
    fn on_new_initial(
        &mut self,
        now: Instant,
        local: Addr,
        remote: Addr,
        version: u32,
        dcid: ConnectionId,
        scid: ConnectionId,
        token: &[u8],
        data: &[u8],
    ) {
        let mut original_dcid = dcid;
        let mut retry_scid = None;
        let mut validated = false;
        if !token.is_empty() {
            match AddressToken::open(&self.cfg.static_key, token) {
                Some(t) if t.is_valid(now, self.cfg.token_lifetime, remote) => match t.origin {
                    TokenOrigin::Retry if t.retry_scid == dcid => {
                        validated = true;
                        original_dcid = t.original_dcid;
                        retry_scid = Some(dcid);
                    }
                    TokenOrigin::Retry => {}
                    TokenOrigin::NewToken => validated = true,
                },
                _ => {}
            }
            self.trace(now, Category::Security, "token_checked", json!({"valid": validated}));
        }
        if self.retry_required && !validated {
            self.send_retry(now, local, remote, version, dcid, scid);
            return;
        }
        let opts = ServerOptions {
            version,
            original_dcid,
            initial_dcid: dcid,
            client_scid: scid,
            retry_scid,
            address_validated: validated,
            seed: self.rng.next_u64(),
        };
        let mut conn = match Connection::accept(self.cfg.clone(), now, local, remote, opts) {
            Ok(c) => c,
            Err(e) => {
                self.trace(now, Category::Transport, "datagram_dropped", json!({
                    "reason": "config",
                    "detail": e.to_string(),
                }));
                return;
            }
        };
        let mut app = (self.factory)();
        app.on_start(now, &mut conn);
        conn.handle_datagram(now, local, remote, data);
        service(now, &mut conn, &mut app);
        self.conns.push((conn, app));
    }

    fn send_retry(&mut self, now: Instant, local: Addr, remote: Addr, version: u32, dcid: ConnectionId, scid: ConnectionId) {
        let new_scid = ConnectionId::random(&mut self.rng, self.cfg.cid_len);
        let token = AddressToken {
            origin: TokenOrigin::Retry,
            issued_at: now,
            client: remote,
            original_dcid: dcid,
            retry_scid: new_scid,
        }
        .seal(&self.cfg.static_key);
        let mut out = Vec::new();
        Header::Retry(RetryHeader {
            version,
            dcid: scid,
            scid: new_scid,
            token,
            integrity_tag: [0; 16],
        })
        .encode(&mut out);
        let body = out.len() - 16;
        let tag = retry_integrity_tag(version, dcid.as_bytes(), &out[..body]);
        out[body..].copy_from_slice(&tag);
        self.trace(now, Category::Security, "retry_sent", json!({
            "odcid": hex::encode(dcid.as_bytes()),
            "scid": hex::encode(new_scid.as_bytes()),
            "size": out.len(),
        }));
        self.stateless.push_back(Transmit {
            src: local,
            dst: remote,
            data: out,
            packets: Vec::new(),
        });
    }

    fn stateless_reset(&mut self, now: Instant, local: Addr, remote: Addr, dcid: &ConnectionId, size: usize) {
        // Always smaller than the trigger, so two endpoints without state
        // cannot keep resetting each other.
        if size <= MIN_STATELESS_RESET {
            self.trace(now, Category::Transport, "datagram_dropped", json!({
                "reason": "unroutable",
                "size": size,
            }));
            return;
        }
        let len = self.rng.gen_range(MIN_STATELESS_RESET..size);
        let mut out = vec![0u8; len - 16];
        self.rng.fill_bytes(&mut out);
        out[0] = 0x40 | (out[0] & 0x3f);
        out.extend_from_slice(&reset_token(&self.cfg.static_key, dcid));
        self.trace(now, Category::Security, "stateless_reset_sent", json!({
            "dcid": hex::encode(dcid.as_bytes()),
            "size": len,
        }));
        self.stateless.push_back(Transmit {
            src: local,
            dst: remote,
            data: out,
            packets: Vec::new(),
        });
    }

    pub fn poll_transmit(&mut self, now: Instant) -> Option<Transmit> {
        if let Some(t) = self.stateless.pop_front() {
            return Some(t);
        }
        self.conns.iter_mut().find_map(|(c, _)| c.poll_transmit(now))
    }

    pub fn poll_timeout(&self) -> Option<Instant> {
        self.conns.iter().filter_map(|(c, _)| c.poll_timeout()).min()
    }

    pub fn handle_timeout(&mut self, now: Instant) {
        for (c, app) in &mut self.conns {
            if c.poll_timeout().is_some_and(|t| t <= now) {
                c.handle_timeout(now);
                service(now, c, app);
            }
        }
    }

    pub fn close_all(&mut self, now: Instant) {
        for (c, app) in &mut self.conns {
            c.close(now, 0, "close_immediate");
            service(now, c, app);
        }
    }

    pub fn drain_trace(&mut self, out: &mut Vec<TraceRecord>) {
        self.tracer.drain_into(out);
        for (c, _) in &mut self.conns {
            c.drain_trace(out);
        }
    }
}

impl<A: App> Node for ServerEndpoint<A> {
    fn side(&self) -> Side {
        Side::Server
    }

    fn addresses(&self) -> Vec<Addr> {
        vec![self.local]
    }

    fn handle_datagram(&mut self, now: Instant, local: Addr, remote: Addr, data: &[u8]) {
        ServerEndpoint::handle_datagram(self, now, local, remote, data)
    }

    fn poll_transmit(&mut self, now: Instant) -> Option<Transmit> {
        ServerEndpoint::poll_transmit(self, now)
    }

    fn poll_timeout(&self) -> Option<Instant> {
        ServerEndpoint::poll_timeout(self)
    }

    fn handle_timeout(&mut self, now: Instant) {
        ServerEndpoint::handle_timeout(self, now)
    }

    fn command(&mut self, now: Instant, cmd: &Command) {
        match cmd {
            Command::DropState => self.drop_state(now),
            Command::CloseImmediate => self.close_all(now),
            Command::Migrate { .. } => {
                self.trace(now, Category::Transport, "command_ignored", json!({"command": "migrate"}));
            }
        }
    }

    fn drain_trace(&mut self, out: &mut Vec<TraceRecord>) {
        ServerEndpoint::drain_trace(self, out)
    }
}

pub struct ClientEndpoint<A: App> {
    cfg: Config,
    local: Addr,
    remote: Addr,
    conn: Connection,
    app: A,
    early_data: bool,
    session: Option<StoredSession>,
    tried: Vec<u32>,
    rng: ChaCha8Rng,
    tracer: Tracer,
    tokens: Vec<Vec<u8>>,
    sessions: Vec<StoredSession>,
    restarts: u32,
}

impl<A: App> std::fmt::Debug for ClientEndpoint<A> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ClientEndpoint")
            .field("local", &self.local)
            .field("remote", &self.remote)
            .field("conn", &self.conn)
            .finish_non_exhaustive()
    }
}

impl<A: App> ClientEndpoint<A> {
    pub fn connect(
        cfg: Config,
        now: Instant,
        local: Addr,
        remote: Addr,
        opts: ClientOptions,
        mut app: A,
    ) -> Result<Self, crate::conn::ConfigError> {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        let first = ClientOptions {
            seed: rng.next_u64(),
            ..opts.clone()
        };
        let mut conn = Connection::connect(cfg.clone(), now, local, remote, first)?;
        let tried = vec![conn.version()];
        app.on_start(now, &mut conn);
        service(now, &mut conn, &mut app);
        Ok(ClientEndpoint {
            cfg,
            local,
            remote,
            conn,
            app,
            early_data: opts.early_data,
            session: opts.session,
            tried,
            rng,
            tracer: Tracer::new(Side::Client),
            tokens: opts.token.into_iter().collect(),
            sessions: Vec::new(),
            restarts: 0,
        })
    }

    pub fn conn(&self) -> &Connection {
        &self.conn
    }

    pub fn conn_mut(&mut self) -> &mut Connection {
        &mut self.conn
    }

    pub fn app(&self) -> &A {
        &self.app
    }

    pub fn app_mut(&mut self) -> &mut A {
        &mut self.app
    }

    /// Address validation tokens received, oldest first.
    pub fn tokens(&self) -> &[Vec<u8>] {
        &self.tokens
    }

    pub fn sessions(&self) -> &[StoredSession] {
        &self.sessions
    }

    /// How many times the connection was restarted after Version
    /// Negotiation.
    pub fn restarts(&self) -> u32 {
        self.restarts
    }

    fn service(&mut self, now: Instant) {
        let mut restart = None;
        while let Some(ev) = self.conn.poll_event() {
            match &ev {
                Event::NewToken(t) => self.tokens.push(t.clone()),
                Event::SessionTicket(s) => self.sessions.push(s.clone()),
                Event::Closed(CloseReason::VersionNegotiation { offered }) => restart = Some(offered.clone()),
                _ => {}
            }
            self.app.on_event(now, &mut self.conn, &ev);
        }
        self.app.poll(now, &mut self.conn);
        if let Some(offered) = restart {
            self.restart(now, &offered);
        }
    }

    fn restart(&mut self, now: Instant, offered: &[u32]) {
        let original = self.conn.version();
        let Some(v) = self
            .cfg
            .versions
            .iter()
            .copied()
            .find(|v| offered.contains(v) && !self.tried.contains(v))
        else {
            self.tracer.emit(now, Category::Transport, "version_negotiation_failed", json!({
                "offered": offered.iter().map(|v| format!("{v:#010x}")).collect::<Vec<_>>(),
            }));
            return;
        };
        self.tried.push(v);
        self.restarts += 1;
        self.tracer.emit(now, Category::Transport, "version_negotiated", json!({
            "method": "incompatible",
            "original": format!("{original:#010x}"),
            "chosen": format!("{v:#010x}"),
        }));
        let opts = ClientOptions {
            session: self.session.clone(),
            token: self.tokens.last().cloned(),
            early_data: self.early_data,
            version: Some(v),
            seed: self.rng.next_u64(),
        };
        let mut old = Connection::connect(self.cfg.clone(), now, self.local, self.remote, opts)
            .expect("configuration already validated");
        std::mem::swap(&mut self.conn, &mut old);
        let mut pending = Vec::new();
        old.drain_trace(&mut pending);
        self.tracer.drain_into(&mut pending);
        for r in pending {
            self.tracer.emit(r.time(), r.category, &r.event, serde_json::Value::Object(r.data));
        }
        self.app.on_start(now, &mut self.conn);
        service(now, &mut self.conn, &mut self.app);
    }
}

impl<A: App> Node for ClientEndpoint<A> {
    fn side(&self) -> Side {
        Side::Client
    }

    fn addresses(&self) -> Vec<Addr> {
        vec![self.local]
    }

    fn handle_datagram(&mut self, now: Instant, local: Addr, remote: Addr, data: &[u8]) {
        self.conn.handle_datagram(now, local, remote, data);
        self.service(now);
    }

    fn poll_transmit(&mut self, now: Instant) -> Option<Transmit> {
        self.conn.poll_transmit(now)
    }

    fn poll_timeout(&self) -> Option<Instant> {
        self.conn.poll_timeout()
    }

    fn handle_timeout(&mut self, now: Instant) {
        self.conn.handle_timeout(now);
        self.service(now);
    }

    fn command(&mut self, now: Instant, cmd: &Command) {
        match cmd {
            Command::Migrate { new_local, keep_fallback } => {
                let r = self.conn.migrate(now, *new_local, *keep_fallback);
                if let Err(e) = r {
                    self.tracer.emit(now, Category::Transport, "migration_refused", json!({"reason": e.to_string()}));
                } else {
                    self.local = *new_local;
                }
            }
            Command::CloseImmediate => self.conn.close(now, 0, "close_immediate"),
            Command::DropState => {
                self.tracer.emit(now, Category::Transport, "command_ignored", json!({"command": "drop_state"}));
            }
        }
        self.service(now);
    }

    fn drain_trace(&mut self, out: &mut Vec<TraceRecord>) {
        self.tracer.drain_into(out);
        self.conn.drain_trace(out);
    }
}

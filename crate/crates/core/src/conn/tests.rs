use super::*;
use crate::codec::{PacketShell, ShellKind};

const C_ADDR: Addr = Addr { host: 1, port: 5000 };
const S_ADDR: Addr = Addr { host: 2, port: 443 };
const DELAY: Duration = Duration::from_millis(10);

/// Two connections joined by a lossless fixed-delay link.
struct Pair {
    now: Instant,
    client: Connection,
    server: Option<Connection>,
    server_cfg: Config,
    in_flight: Vec<(Instant, bool, Transmit)>,
    /// Drops datagrams for which this returns true: (to_server, index).
    drop: Box<dyn FnMut(bool, usize, &Transmit) -> bool>,
    sent: [usize; 2],
}

impl Pair {
    fn new(client_cfg: Config, server_cfg: Config, opts: ClientOptions) -> Self {
        let now = Instant::ZERO;
        let client = Connection::connect(client_cfg, now, C_ADDR, S_ADDR, opts).unwrap();
        Pair {
            now,
            client,
            server: None,
            server_cfg,
            in_flight: Vec::new(),
            drop: Box::new(|_, _, _| false),
            sent: [0, 0],
        }
    }

    fn accept(&mut self, t: &Transmit) {
        let shell = PacketShell::parse(&t.data, 8).unwrap();
        let ShellKind::Long { version, scid, .. } = shell.kind else { panic!("expected Initial") };
        let opts = ServerOptions {
            version,
            original_dcid: shell.dcid,
            initial_dcid: shell.dcid,
            client_scid: scid,
            retry_scid: None,
            address_validated: false,
            seed: 7,
        };
        self.server = Some(Connection::accept(self.server_cfg.clone(), self.now, t.dst, t.src, opts).unwrap());
    }

    fn flush(&mut self) {
        loop {
            let mut any = false;
            while let Some(t) = self.client.poll_transmit(self.now) {
                any = true;
                let i = self.sent[0];
                self.sent[0] += 1;
                if !(self.drop)(true, i, &t) {
                    self.in_flight.push((self.now + DELAY, true, t));
                }
            }
            if let Some(s) = self.server.as_mut() {
                while let Some(t) = s.poll_transmit(self.now) {
                    any = true;
                    let i = self.sent[1];
                    self.sent[1] += 1;
                    if !(self.drop)(false, i, &t) {
                        self.in_flight.push((self.now + DELAY, false, t));
                    }
                }
            }
            if !any {
                break;
            }
        }
    }

    fn step(&mut self) -> bool {
        self.step_until(Instant::from_micros(u64::MAX))
    }

    fn step_until(&mut self, limit: Instant) -> bool {
        self.flush();
        let next_arrival = self.in_flight.iter().map(|(t, _, _)| *t).min();
        let timers = [
            self.client.poll_timeout(),
            self.server.as_ref().and_then(Connection::poll_timeout),
        ];
        let next_timer = timers.iter().flatten().copied().min();
        let next = match (next_arrival, next_timer) {
            (Some(a), Some(b)) => a.min(b),
            (a, b) => match a.or(b) {
                Some(x) => x,
                None => return false,
            },
        };
        if next > limit {
            self.now = limit;
            return false;
        }
        self.now = self.now.max(next);
        let (due, rest): (Vec<_>, Vec<_>) = std::mem::take(&mut self.in_flight).into_iter().partition(|(t, _, _)| *t <= self.now);
        self.in_flight = rest;
        for (_, to_server, t) in due {
            if to_server {
                if self.server.is_none() {
                    self.accept(&t);
                }
                let now = self.now;
                self.server.as_mut().unwrap().handle_datagram(now, t.dst, t.src, &t.data);
            } else {
                self.client.handle_datagram(self.now, t.dst, t.src, &t.data);
            }
        }
        if self.client.poll_timeout().is_some_and(|t| t <= self.now) {
            self.client.handle_timeout(self.now);
        }
        if let Some(s) = self.server.as_mut() {
            if s.poll_timeout().is_some_and(|t| t <= self.now) {
                s.handle_timeout(self.now);
            }
        }
        true
    }

    fn run_until(&mut self, limit: Instant, mut done: impl FnMut(&mut Pair) -> bool) {
        while self.now < limit && !done(self) {
            if !self.step_until(limit) {
                break;
            }
        }
    }

    fn server(&mut self) -> &mut Connection {
        self.server.as_mut().unwrap()
    }
}

fn events(c: &mut Connection) -> Vec<Event> {
    std::iter::from_fn(|| c.poll_event()).collect()
}

fn confirmed(p: &mut Pair) -> bool {
    p.client.is_handshake_confirmed() && p.server.as_ref().is_some_and(Connection::is_handshake_confirmed)
}

#[test]
fn handshake_completes_and_both_sides_confirm() {
    let mut p = Pair::new(Config::default(), Config::default(), ClientOptions::default());
    p.run_until(Instant::from_millis(2_000), confirmed);
    assert!(confirmed(&mut p), "client {:?}", p.client.state());
    assert_eq!(p.client.state(), State::Established);
    assert_eq!(p.server().state(), State::Established);
    let ev = events(&mut p.client);
    assert!(ev.contains(&Event::HandshakeComplete));
    assert!(ev.iter().any(|e| matches!(e, Event::SessionTicket(_))));
    assert!(ev.iter().any(|e| matches!(e, Event::NewToken(_))));
}

#[test]
fn first_client_datagram_is_padded() {
    let mut c = Connection::connect(Config::default(), Instant::ZERO, C_ADDR, S_ADDR, ClientOptions::default()).unwrap();
    let t = c.poll_transmit(Instant::ZERO).unwrap();
    assert!(t.data.len() >= MIN_INITIAL_SIZE);
    assert_eq!(t.packets[0].kind, PacketKind::Initial);
}

#[test]
fn stream_transfer_round_trip() {
    let mut p = Pair::new(Config::default(), Config::default(), ClientOptions::default());
    p.run_until(Instant::from_millis(2_000), confirmed);
    let id = p.client.open_stream(Dir::Bidi).unwrap();
    let payload: Vec<u8> = (0..200_000u32).map(|i| (i % 251) as u8).collect();
    p.client.write(id, &payload).unwrap();
    p.client.finish(id).unwrap();
    let mut got = Vec::new();
    let mut fin = false;
    let limit = p.now + Duration::from_secs(10);
    while p.now < limit && !fin {
        if !p.step() {
            break;
        }
        for e in events(p.server()) {
            match e {
                Event::Stream(StreamEvent::Readable { data, .. }) => got.extend_from_slice(&data),
                Event::Stream(StreamEvent::Finished { .. }) => fin = true,
                _ => {}
            }
        }
    }
    assert!(fin);
    assert_eq!(got, payload);
}

#[test]
fn lost_packets_are_recovered() {
    let mut p = Pair::new(Config::default(), Config::default(), ClientOptions::default());
    p.drop = Box::new(|to_server, i, _| !to_server && (i == 0 || i == 3) || to_server && i == 2);
    p.run_until(Instant::from_millis(5_000), confirmed);
    assert!(confirmed(&mut p));
}

#[test]
fn datagrams_are_delivered() {
    let mut p = Pair::new(Config::default(), Config::default(), ClientOptions::default());
    p.run_until(Instant::from_millis(2_000), confirmed);
    p.client.send_datagram(b"hello".to_vec()).unwrap();
    let limit = p.now + Duration::from_millis(100);
    let mut got = Vec::new();
    p.run_until(limit, |p| {
        got.extend(events(p.server()).into_iter().filter(|e| matches!(e, Event::Datagram(_))));
        !got.is_empty()
    });
    assert_eq!(got, vec![Event::Datagram(b"hello".to_vec())]);
}

#[test]
fn graceful_close_reaches_peer() {
    let mut p = Pair::new(Config::default(), Config::default(), ClientOptions::default());
    p.run_until(Instant::from_millis(2_000), confirmed);
    let now = p.now;
    p.client.close(now, 0, "bye");
    p.run_until(now + Duration::from_secs(5), |p| p.client.is_closed() && p.server().is_closed());
    assert_eq!(p.server().close_reason(), Some(&CloseReason::Peer {
        code: 0,
        app: true,
        reason: "bye".into(),
    }));
    assert!(p.client.is_closed());
}

#[test]
fn idle_timeout_closes_quietly() {
    let mut cfg = Config::default();
    cfg.transport.max_idle_timeout_ms = 1_000;
    let mut p = Pair::new(cfg.clone(), cfg, ClientOptions::default());
    p.run_until(Instant::from_millis(2_000), confirmed);
    p.run_until(Instant::from_millis(10_000), |p| p.client.is_closed());
    assert_eq!(p.client.close_reason(), Some(&CloseReason::IdleTimeout));
}

#[test]
fn resumed_session_sends_zero_rtt() {
    let mut p = Pair::new(Config::default(), Config::default(), ClientOptions::default());
    p.run_until(Instant::from_millis(2_000), confirmed);
    let session = events(&mut p.client)
        .into_iter()
        .find_map(|e| match e {
            Event::SessionTicket(s) => Some(s),
            _ => None,
        })
        .expect("ticket");
    let opts = ClientOptions {
        session: Some(session),
        early_data: true,
        seed: 99,
        ..ClientOptions::default()
    };
    let mut p = Pair::new(Config::default(), Config::default(), opts);
    let id = p.client.open_stream(Dir::Bidi).unwrap();
    p.client.write(id, b"early").unwrap();
    p.client.finish(id).unwrap();
    let first = p.client.poll_transmit(Instant::ZERO).unwrap();
    assert!(first.packets.iter().any(|pk| pk.kind == PacketKind::ZeroRtt), "{:?}", first.packets);
    p.in_flight.push((Instant::ZERO + DELAY, true, first));
    p.run_until(Instant::from_millis(2_000), confirmed);
    let ev = events(&mut p.client);
    assert!(ev.contains(&Event::ZeroRttAccepted), "{ev:?}");
    let sev = events(p.server());
    assert!(sev.iter().any(|e| matches!(e, Event::Stream(StreamEvent::Readable { data, .. }) if data == b"early")));
}

#[test]
fn key_update_keeps_connection_alive() {
    let mut p = Pair::new(Config::default(), Config::default(), ClientOptions::default());
    p.run_until(Instant::from_millis(2_000), confirmed);
    let now = p.now;
    p.client.initiate_key_update(now).unwrap();
    p.client.send_datagram(vec![1; 10]).unwrap();
    let limit = p.now + Duration::from_millis(200);
    p.run_until(limit, |_| false);
    assert!(events(p.server()).contains(&Event::Datagram(vec![1; 10])));
    p.server().send_datagram(vec![2; 10]).unwrap();
    let limit = p.now + Duration::from_millis(200);
    p.run_until(limit, |_| false);
    assert!(events(&mut p.client).contains(&Event::Datagram(vec![2; 10])));
}

#[test]
#[ignore]
fn dump_handshake_trace() {
    let mut p = Pair::new(Config::default(), Config::default(), ClientOptions::default());
    p.run_until(Instant::from_millis(2_000), confirmed);
    let mut out = Vec::new();
    p.client.drain_trace(&mut out);
    if let Some(s) = p.server.as_mut() {
        s.drain_trace(&mut out);
    }
    out.sort_by_key(|r| r.time_us);
    for r in out {
        println!("{} {:?} {} {}", r.time_us, r.endpoint, r.event, serde_json::Value::Object(r.data));
    }
}

#[test]
#[ignore]
fn dump_key_update_trace() {
    let mut p = Pair::new(Config::default(), Config::default(), ClientOptions::default());
    p.run_until(Instant::from_millis(2_000), confirmed);
    let now = p.now;
    p.client.initiate_key_update(now).unwrap();
    p.client.send_datagram(vec![1; 10]).unwrap();
    let limit = p.now + Duration::from_millis(200);
    p.run_until(limit, |_| false);
    let mut out = Vec::new();
    p.client.drain_trace(&mut out);
    p.server().drain_trace(&mut out);
    out.sort_by_key(|r| r.time_us);
    for r in out.iter().filter(|r| r.time_us >= now.as_micros()) {
        println!("{} {:?} {} {}", r.time_us, r.endpoint, r.event, serde_json::Value::Object(r.data.clone()));
    }
}

//! Deterministic discrete-event network.
//!
//! A [`World`] owns the links and the event queue; endpoints implement
//! [`Node`] and are lent to [`World::run_until`]. Events run in
//! (time, insertion order). Endpoint timers are polled lazily and lose ties
//! against queued events at the same instant.
//!
//! Every datagram handed to the network produces one `udp_sent` record and
//! exactly one of `udp_delivered`, `udp_lost`, `mtu_drop`, `udp_filtered` or
//! `udp_unroutable`, all carrying the same `id`.

use std::collections::{BTreeMap, VecDeque};
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::conn::Transmit;
use crate::streams::Side;
use crate::time::Instant;
use crate::trace::{Category, TraceRecord, Tracer};

/// A simulated UDP endpoint address.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Addr {
    pub host: u32,
    pub port: u16,
}

impl std::fmt::Display for Addr {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "h{}:{}", self.host, self.port)
    }
}

/// Properties shared by both directions of the link.
#[derive(Debug, Clone, PartialEq)]
pub struct LinkConfig {
    pub delay: Duration,
    /// Delivery time is `delay` plus a uniform offset in `[-jitter, jitter]`.
    pub jitter: Duration,
    /// Probability in `[0, 1]`.
    pub loss: f64,
    /// Probability in `[0, 1]` that a datagram overtakes datagrams sent
    /// just before it in the same direction.
    pub reorder: f64,
    /// How many places a reordered datagram may overtake, at least 1.
    pub reorder_depth: usize,
    pub mtu: usize,
}

impl Default for LinkConfig {
    fn default() -> Self {
        LinkConfig {
            delay: Duration::from_millis(50),
            jitter: Duration::ZERO,
            loss: 0.0,
            reorder: 0.0,
            reorder_depth: 1,
            mtu: 1500,
        }
    }
}

/// Out-of-band instruction delivered to a node at a scheduled instant.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Command {
    /// The node now sends from `new_local`; the world rebinds the address.
    Migrate { new_local: Addr, keep_fallback: bool },
    CloseImmediate,
    DropState,
}

/// An endpoint attached to a world.
pub trait Node {
    fn side(&self) -> Side;
    /// Addresses the node listens on at the start of a run.
    fn addresses(&self) -> Vec<Addr>;
    fn handle_datagram(&mut self, now: Instant, local: Addr, remote: Addr, data: &[u8]);
    fn poll_transmit(&mut self, now: Instant) -> Option<Transmit>;
    fn poll_timeout(&self) -> Option<Instant>;
    fn handle_timeout(&mut self, now: Instant);
    fn command(&mut self, now: Instant, cmd: &Command);
    fn drain_trace(&mut self, out: &mut Vec<TraceRecord>);
}

/// Decides whether to discard a datagram before the link sees it. Gets the
/// sending side, the per-side datagram index and the datagram.
pub type Filter = Box<dyn FnMut(Side, u64, &Transmit) -> bool>;

#[derive(Debug)]
enum Pending {
    Deliver { id: u64, from: usize, src: Addr, dst: Addr, data: Vec<u8> },
    Command { node: usize, cmd: Command },
}

pub struct World {
    now: Instant,
    seq: u64,
    queue: BTreeMap<(Instant, u64), Pending>,
    link: LinkConfig,
    rngs: Vec<ChaCha8Rng>,
    seed: u64,
    bindings: BTreeMap<Addr, usize>,
    /// Queue keys of the most recent deliveries scheduled per sending node,
    /// oldest first, at most `reorder_depth` of them.
    recent: Vec<VecDeque<(Instant, u64)>>,
    sent_count: Vec<u64>,
    filters: Vec<Filter>,
    trace: Vec<TraceRecord>,
    tracers: [Tracer; 2],
    next_id: u64,
    bound: bool,
}

impl std::fmt::Debug for World {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("World")
            .field("now", &self.now)
            .field("queued", &self.queue.len())
            .field("link", &self.link)
            .finish_non_exhaustive()
    }
}

impl World {
    pub fn new(link: LinkConfig, seed: u64) -> Self {
        World {
            now: Instant::ZERO,
            seq: 0,
            queue: BTreeMap::new(),
            link,
            rngs: Vec::new(),
            seed,
            bindings: BTreeMap::new(),
            recent: Vec::new(),
            sent_count: Vec::new(),
            filters: Vec::new(),
            trace: Vec::new(),
            tracers: [Tracer::new(Side::Client), Tracer::new(Side::Server)],
            next_id: 0,
            bound: false,
        }
    }

    pub fn now(&self) -> Instant {
        self.now
    }

    pub fn link(&self) -> &LinkConfig {
        &self.link
    }

    pub fn add_filter(&mut self, f: Filter) {
        self.filters.push(f);
    }

    /// Queues `cmd` for node `node` (its index in the slice given to
    /// [`World::run_until`]).
    pub fn schedule(&mut self, at: Instant, node: usize, cmd: Command) {
        let key = (at, self.next_seq());
        self.queue.insert(key, Pending::Command { node, cmd });
    }

    pub fn trace(&self) -> &[TraceRecord] {
        &self.trace
    }

    pub fn take_trace(&mut self) -> Vec<TraceRecord> {
        std::mem::take(&mut self.trace)
    }

    fn next_seq(&mut self) -> u64 {
        self.seq += 1;
        self.seq
    }

    fn bind(&mut self, nodes: &[&mut dyn Node]) {
        if self.bound {
            return;
        }
        self.bound = true;
        for (i, n) in nodes.iter().enumerate() {
            for a in n.addresses() {
                self.bindings.insert(a, i);
            }
            // Each sending node draws from its own stream so that traffic in
            // one direction never perturbs the other.
            self.rngs.push(ChaCha8Rng::seed_from_u64(self.seed ^ (0x9e37_79b9_7f4a_7c15u64.wrapping_mul(i as u64 + 1))));
            self.recent.push(VecDeque::new());
            self.sent_count.push(0);
        }
    }

    fn emit(&mut self, side: Side, event: &str, data: serde_json::Value) {
        let t = &mut self.tracers[side as usize];
        t.emit(self.now, Category::Simnet, event, data);
        t.drain_into(&mut self.trace);
    }

    /// Runs until `deadline` or until no event or timer remains. Returns
    /// true if the world went quiet before the deadline.
    pub fn run_until(&mut self, nodes: &mut [&mut dyn Node], deadline: Instant) -> bool {
        self.bind(nodes);
        loop {
            self.flush(nodes);
            let next_event = self.queue.keys().next().map(|k| k.0);
            let next_timer = nodes.iter().filter_map(|n| n.poll_timeout()).min();
            let next = match (next_event, next_timer) {
                (Some(a), Some(b)) => a.min(b),
                (Some(a), None) => a,
                (None, Some(b)) => b,
                (None, None) => return true,
            };
            if next > deadline {
                self.now = self.now.max(deadline);
                return false;
            }
            self.now = self.now.max(next);
            if next_event.is_some_and(|t| t <= self.now) {
                let (_, ev) = self.queue.pop_first().expect("non-empty");
                self.process(nodes, ev);
            } else {
                for i in 0..nodes.len() {
                    if nodes[i].poll_timeout().is_some_and(|t| t <= self.now) {
                        nodes[i].handle_timeout(self.now);
                        nodes[i].drain_trace(&mut self.trace);
                    }
                }
            }
        }
    }

    fn process(&mut self, nodes: &mut [&mut dyn Node], ev: Pending) {
        match ev {
            Pending::Deliver { id, from, src, dst, data } => {
                let side = nodes[from].side();
                match self.bindings.get(&dst).copied() {
                    Some(to) => {
                        let to_side = nodes[to].side();
                        self.emit(to_side, "udp_delivered", json!({"id": id, "size": data.len()}));
                        nodes[to].handle_datagram(self.now, dst, src, &data);
                        nodes[to].drain_trace(&mut self.trace);
                    }
                    None => self.emit(side, "udp_unroutable", json!({"id": id, "dst": dst.to_string()})),
                }
            }
            Pending::Command { node, cmd } => {
                if let Command::Migrate { new_local, keep_fallback } = &cmd {
                    let side = nodes[node].side();
                    if !keep_fallback {
                        self.bindings.retain(|_, n| *n != node);
                    }
                    self.bindings.insert(*new_local, node);
                    self.emit(side, "address_bound", json!({"addr": new_local.to_string()}));
                }
                nodes[node].command(self.now, &cmd);
                nodes[node].drain_trace(&mut self.trace);
            }
        }
    }

    fn flush(&mut self, nodes: &mut [&mut dyn Node]) {
        for i in 0..nodes.len() {
            while let Some(t) = nodes[i].poll_transmit(self.now) {
                nodes[i].drain_trace(&mut self.trace);
                self.send(i, nodes[i].side(), t);
            }
            nodes[i].drain_trace(&mut self.trace);
        }
    }

    fn send(&mut self, from: usize, side: Side, t: Transmit) {
        let id = self.next_id;
        self.next_id += 1;
        let index = self.sent_count[from];
        self.sent_count[from] += 1;
        let size = t.data.len();
        self.emit(side, "udp_sent", json!({
            "id": id,
            "size": size,
            "src": t.src.to_string(),
            "dst": t.dst.to_string(),
        }));
        if self.filters.iter_mut().any(|f| f(side, index, &t)) {
            self.emit(side, "udp_filtered", json!({"id": id}));
            return;
        }
        if size > self.link.mtu {
            self.emit(side, "mtu_drop", json!({"id": id, "size": size, "mtu": self.link.mtu}));
            return;
        }
        let rng = &mut self.rngs[from];
        let lost = rng.gen_bool(self.link.loss.clamp(0.0, 1.0));
        let swap = rng.gen_bool(self.link.reorder.clamp(0.0, 1.0));
        let jitter = self.link.jitter.as_micros() as i64;
        let offset = if jitter > 0 { rng.gen_range(-jitter..=jitter) } else { 0 };
        if lost {
            self.emit(side, "udp_lost", json!({"id": id}));
            return;
        }
        let delay = (self.link.delay.as_micros() as i64 + offset).max(0) as u64;
        let at = self.now + Duration::from_micros(delay);
        let key = (at, self.next_seq());
        let pending = Pending::Deliver { id, from, src: t.src, dst: t.dst, data: t.data };
        if swap {
            let queue = &self.queue;
            let recent = &mut self.recent[from];
            recent.retain(|k| queue.contains_key(k) && k.0 <= at);
            if !recent.is_empty() {
                let jump = if recent.len() > 1 { self.rngs[from].gen_range(1..=recent.len()) } else { 1 };
                // The new datagram takes the slot of the one `jump` places
                // back; each datagram after that moves one slot later.
                let mut slots: Vec<(Instant, u64)> = recent.iter().skip(recent.len() - jump).copied().collect();
                slots.push(key);
                let mut moved: Vec<Pending> = slots[..jump].iter().map(|k| self.queue.remove(k).expect("present")).collect();
                let with = match &moved[0] {
                    Pending::Deliver { id, .. } => *id,
                    Pending::Command { .. } => unreachable!("only deliveries are tracked"),
                };
                moved.insert(0, pending);
                for (k, p) in slots.into_iter().zip(moved) {
                    self.queue.insert(k, p);
                }
                self.emit(side, "udp_reordered", json!({"id": id, "with": with, "depth": jump}));
                // A reordered run is not reordered again.
                self.recent[from].clear();
                return;
            }
        }
        self.queue.insert(key, pending);
        let recent = &mut self.recent[from];
        recent.push_back(key);
        while recent.len() > self.link.reorder_depth.max(1) {
            recent.pop_front();
        }
    }
}

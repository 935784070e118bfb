//! Congestion control and pacing.
//!
//! Controllers see generic signals (sent, acknowledged, lost, PTO expiry,
//! path change) and answer whether a packet may be sent. Bytes in flight
//! are tracked by the caller and passed in.

use std::fmt::Debug;
use std::time::Duration;

use crate::time::{micros, Instant};

pub const DEFAULT_MAX_DATAGRAM_SIZE: u64 = 1200;
pub const INITIAL_WINDOW_PACKETS: u64 = 10;
pub const MINIMUM_WINDOW_PACKETS: u64 = 2;
pub const PACING_BURST_PACKETS: u64 = 10;

pub trait CongestionController: Debug + Send {
    fn name(&self) -> &'static str;
    /// `in_flight` is the byte count before this packet.
    fn on_packet_sent(&mut self, in_flight: u64, bytes: u64, now: Instant);
    /// One acknowledged in-flight packet.
    fn on_ack(&mut self, bytes: u64, time_sent: Instant, now: Instant);
    /// A loss event; `newest_lost_sent` is the send time of the most
    /// recently sent lost packet.
    fn on_congestion_event(&mut self, newest_lost_sent: Instant, now: Instant);
    fn on_persistent_congestion(&mut self);
    fn on_pto_expiry(&mut self, _now: Instant) {}
    /// Back to the initial state, after moving to a new network path.
    fn on_path_reset(&mut self);
    fn window(&self) -> u64;
    fn ssthresh(&self) -> Option<u64>;
    fn initial_window(&self) -> u64;
    /// May a packet of `size` bytes go out with `in_flight` bytes already
    /// outstanding? PTO probes are always allowed.
    fn can_send(&self, in_flight: u64, size: u64, is_probe: bool) -> bool;
    fn set_max_datagram_size(&mut self, size: u64);
}

/// NewReno-style slow start and congestion avoidance with halving on loss.
#[derive(Debug, Clone)]
pub struct NewReno {
    mds: u64,
    cwnd: u64,
    ssthresh: Option<u64>,
    recovery_start: Option<Instant>,
    /// Packets that may exceed the window on entering recovery.
    recovery_allowance: u32,
    acked_in_ca: u64,
}

impl NewReno {
    pub fn new(max_datagram_size: u64) -> Self {
        NewReno {
            mds: max_datagram_size,
            cwnd: INITIAL_WINDOW_PACKETS * max_datagram_size,
            ssthresh: None,
            recovery_start: None,
            recovery_allowance: 0,
            acked_in_ca: 0,
        }
    }

    fn floor(&self) -> u64 {
        MINIMUM_WINDOW_PACKETS * self.mds
    }

    fn in_recovery(&self, time_sent: Instant) -> bool {
        self.recovery_start.is_some_and(|s| time_sent <= s)
    }
}

impl Default for NewReno {
    fn default() -> Self {
        NewReno::new(DEFAULT_MAX_DATAGRAM_SIZE)
    }
}

impl CongestionController for NewReno {
    fn name(&self) -> &'static str {
        "newreno"
    }

    fn on_packet_sent(&mut self, in_flight: u64, bytes: u64, _now: Instant) {
        if in_flight + bytes > self.cwnd && self.recovery_allowance > 0 {
            self.recovery_allowance -= 1;
        }
    }

    fn on_ack(&mut self, bytes: u64, time_sent: Instant, _now: Instant) {
        if self.in_recovery(time_sent) {
            return;
        }
        self.recovery_allowance = 0;
        match self.ssthresh {
            Some(ss) if self.cwnd >= ss => {
                self.acked_in_ca += bytes;
                if self.acked_in_ca >= self.cwnd {
                    self.acked_in_ca -= self.cwnd;
                    self.cwnd += self.mds;
                }
            }
            _ => self.cwnd += bytes,
        }
    }

    fn on_congestion_event(&mut self, newest_lost_sent: Instant, now: Instant) {
        if self.in_recovery(newest_lost_sent) {
            return;
        }
        self.recovery_start = Some(now);
        self.cwnd = (self.cwnd / 2).max(self.floor());
        self.ssthresh = Some(self.cwnd);
        self.acked_in_ca = 0;
        self.recovery_allowance = 1;
    }

    fn on_persistent_congestion(&mut self) {
        self.cwnd = self.floor();
        self.recovery_start = None;
        self.acked_in_ca = 0;
    }

    fn on_path_reset(&mut self) {
        *self = NewReno::new(self.mds);
    }

    fn window(&self) -> u64 {
        self.cwnd
    }

    fn ssthresh(&self) -> Option<u64> {
        self.ssthresh
    }

    fn initial_window(&self) -> u64 {
        INITIAL_WINDOW_PACKETS * self.mds
    }

    fn can_send(&self, in_flight: u64, size: u64, is_probe: bool) -> bool {
        is_probe || in_flight + size <= self.cwnd || self.recovery_allowance > 0
    }

    fn set_max_datagram_size(&mut self, size: u64) {
        self.mds = size;
        self.cwnd = self.cwnd.max(self.floor());
    }
}

/// A window that never moves, for tests that want congestion control out
/// of the way.
#[derive(Debug, Clone)]
pub struct FixedWindow {
    window: u64,
}

impl FixedWindow {
    pub fn new(window: u64) -> Self {
        FixedWindow { window }
    }
}

impl CongestionController for FixedWindow {
    fn name(&self) -> &'static str {
        "fixed"
    }
    fn on_packet_sent(&mut self, _: u64, _: u64, _: Instant) {}
    fn on_ack(&mut self, _: u64, _: Instant, _: Instant) {}
    fn on_congestion_event(&mut self, _: Instant, _: Instant) {}
    fn on_persistent_congestion(&mut self) {}
    fn on_path_reset(&mut self) {}
    fn window(&self) -> u64 {
        self.window
    }
    fn ssthresh(&self) -> Option<u64> {
        None
    }
    fn initial_window(&self) -> u64 {
        self.window
    }
    fn can_send(&self, in_flight: u64, size: u64, is_probe: bool) -> bool {
        is_probe || in_flight + size <= self.window
    }
    fn set_max_datagram_size(&mut self, _: u64) {}
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ControllerKind {
    #[default]
    NewReno,
    Fixed,
}

impl ControllerKind {
    pub fn from_name(name: &str) -> Option<Self> {
        match name {
            "newreno" => Some(ControllerKind::NewReno),
            "fixed" => Some(ControllerKind::Fixed),
            _ => None,
        }
    }

    pub fn build(self, max_datagram_size: u64) -> Box<dyn CongestionController> {
        match self {
            ControllerKind::NewReno => Box::new(NewReno::new(max_datagram_size)),
            ControllerKind::Fixed => Box::new(FixedWindow::new(64 * max_datagram_size)),
        }
    }
}

/// `srtt * size / cwnd`: the gap between packets that spreads one window
/// evenly over one round trip.
pub fn pacing_interval(srtt: Duration, size: u64, cwnd: u64) -> Duration {
    Duration::from_micros((micros(srtt) as u128 * size as u128 / cwnd.max(1) as u128) as u64)
}

/// Token bucket refilled at `cwnd / srtt` bytes per unit time, holding at
/// most a burst of [`PACING_BURST_PACKETS`] full-size packets. ACK-only
/// packets do not consult it.
#[derive(Debug, Clone)]
pub struct Pacer {
    tokens: f64,
    capacity: f64,
    last: Instant,
}

impl Pacer {
    pub fn new(max_datagram_size: u64) -> Self {
        let capacity = (PACING_BURST_PACKETS * max_datagram_size) as f64;
        Pacer {
            tokens: capacity,
            capacity,
            last: Instant::ZERO,
        }
    }

    fn refill(&mut self, now: Instant, srtt: Duration, cwnd: u64) {
        let elapsed = micros(now.saturating_duration_since(self.last)) as f64;
        self.last = self.last.max(now);
        let rate = cwnd as f64 / micros(srtt).max(1) as f64;
        self.tokens = (self.tokens + elapsed * rate).min(self.capacity);
    }

    /// Earliest time a packet of `size` bytes may leave; `now` if it may
    /// leave immediately.
    pub fn release_time(&mut self, now: Instant, size: u64, srtt: Duration, cwnd: u64) -> Instant {
        self.refill(now, srtt, cwnd);
        if self.tokens >= size as f64 {
            return now;
        }
        let rate = cwnd as f64 / micros(srtt).max(1) as f64;
        let wait = ((size as f64 - self.tokens) / rate).ceil() as u64;
        now + Duration::from_micros(wait.max(1))
    }

    pub fn on_sent(&mut self, size: u64) {
        self.tokens -= size as f64;
        if self.tokens < 0.0 {
            self.tokens = 0.0;
        }
    }

    pub fn set_max_datagram_size(&mut self, size: u64) {
        self.capacity = (PACING_BURST_PACKETS * size) as f64;
    }

    /// Starts over with a full bucket.
    pub fn reset(&mut self, now: Instant) {
        self.tokens = self.capacity;
        self.last = now;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn window_arithmetic() {
        let mut c = FixedWindow::new(12_000);
        assert!(!c.can_send(11_000, 1200, false));
        assert!(c.can_send(11_000, 1200, true));
        assert!(c.can_send(0, 1200, false));
        c.on_persistent_congestion();
        assert_eq!(c.window(), 12_000);
    }

    #[test]
    fn halving_once_per_recovery_period() {
        let mut c = NewReno::default();
        c.cwnd = 40_000;
        c.on_congestion_event(Instant::from_millis(5), Instant::from_millis(10));
        assert_eq!(c.window(), 20_000);
        assert_eq!(c.ssthresh(), Some(20_000));
        // lost packet sent before the period started
        c.on_congestion_event(Instant::from_millis(9), Instant::from_millis(12));
        assert_eq!(c.window(), 20_000);
        // a packet sent after the period started is acknowledged, then lost again
        c.on_ack(1200, Instant::from_millis(11), Instant::from_millis(20));
        c.on_congestion_event(Instant::from_millis(15), Instant::from_millis(30));
        assert_eq!(c.window(), 10_000);
    }

    #[test]
    fn floor_and_persistent_congestion() {
        let mut c = NewReno::default();
        for i in 0..10u64 {
            c.on_congestion_event(Instant::from_millis(10 * i + 5), Instant::from_millis(10 * i + 6));
        }
        assert_eq!(c.window(), 2400);
        c.cwnd = 50_000;
        c.on_persistent_congestion();
        assert_eq!(c.window(), 2400);
    }

    #[test]
    fn recovery_entry_allows_one_packet() {
        let mut c = NewReno::default();
        c.on_congestion_event(Instant::ZERO, Instant::from_millis(1));
        let w = c.window();
        assert!(c.can_send(w, 1200, false));
        c.on_packet_sent(w, 1200, Instant::from_millis(1));
        assert!(!c.can_send(w + 1200, 1200, false));
    }

    #[test]
    fn slow_start_doubles_per_round() {
        let mut c = NewReno::default();
        let t0 = Instant::ZERO;
        for round in 1..=4u64 {
            let w = c.window();
            for _ in 0..w / 1200 {
                c.on_ack(1200, t0, Instant::from_millis(round * 100));
            }
            assert_eq!(c.window(), 2 * w);
        }
    }

    #[test]
    fn path_reset_restores_initial_window() {
        let mut c = NewReno::default();
        c.on_ack(50_000, Instant::ZERO, Instant::ZERO);
        c.on_path_reset();
        assert_eq!(c.window(), 12_000);
        assert_eq!(c.ssthresh(), None);
    }

    #[test]
    fn pacing_interval_formula() {
        assert_eq!(pacing_interval(Duration::from_millis(100), 1200, 12_000), Duration::from_millis(10));
    }

    #[test]
    fn burst_then_paced() {
        let srtt = Duration::from_millis(100);
        let mut p = Pacer::new(1200);
        let now = Instant::ZERO;
        for _ in 0..10 {
            assert_eq!(p.release_time(now, 1200, srtt, 12_000), now);
            p.on_sent(1200);
        }
        let next = p.release_time(now, 1200, srtt, 12_000);
        assert_eq!(next, Instant::from_millis(10));
        assert_eq!(p.release_time(next, 1200, srtt, 12_000), next);
    }
}

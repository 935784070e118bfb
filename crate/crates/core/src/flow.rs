//! Credit-based flow control at stream and connection level.
//!
//! Credit is measured in highest-offset terms: a receiver charges the
//! largest byte offset seen on a stream, not the count of distinct bytes.
//! CRYPTO and DATAGRAM frames never touch these accounts.

use std::time::Duration;

use thiserror::Error;

use crate::time::{micros, Instant};

pub const DEFAULT_STREAM_WINDOW: u64 = 64 * 1024;
pub const DEFAULT_CONNECTION_WINDOW: u64 = 256 * 1024;
const MAX_WINDOW: u64 = 16 * 1024 * 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scope {
    Connection,
    Stream(u64),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("flow control violation: offset {end} exceeds limit {limit}")]
pub struct FlowControlViolation {
    pub end: u64,
    pub limit: u64,
}

/// Sender-side view of a peer-advertised limit.
#[derive(Debug, Clone, Default)]
pub struct SendCredit {
    limit: u64,
    used: u64,
    blocked: bool,
}

impl SendCredit {
    pub fn new(limit: u64) -> Self {
        SendCredit {
            limit,
            used: 0,
            blocked: false,
        }
    }

    pub fn limit(&self) -> u64 {
        self.limit
    }

    /// Highest offset (or total bytes, at connection level) sent so far.
    pub fn used(&self) -> u64 {
        self.used
    }

    pub fn available(&self) -> u64 {
        self.limit - self.used
    }

    /// Applies a MAX_DATA or MAX_STREAM_DATA value. Returns false when the
    /// value does not raise the limit and was ignored.
    pub fn raise(&mut self, limit: u64) -> bool {
        if limit <= self.limit {
            return false;
        }
        self.limit = limit;
        self.blocked = false;
        true
    }

    fn take(&mut self, n: u64) {
        debug_assert!(n <= self.available());
        self.used += n;
    }

    /// Marks the account blocked; returns true on the transition only.
    fn mark_blocked(&mut self) -> bool {
        !std::mem::replace(&mut self.blocked, true)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Grant {
    pub granted: u64,
    /// Set when this call moved an account into the blocked state.
    pub newly_blocked: Option<Scope>,
}

/// Grants up to `n` bytes of new data on `stream`, bounded by both the
/// stream and the connection credit, and charges both accounts.
pub fn reserve_send(conn: &mut SendCredit, stream: &mut SendCredit, stream_id: u64, n: u64) -> Grant {
    let granted = n.min(stream.available()).min(conn.available());
    conn.take(granted);
    stream.take(granted);
    let mut newly_blocked = None;
    if granted < n {
        if stream.available() == 0 && stream.mark_blocked() {
            newly_blocked = Some(Scope::Stream(stream_id));
        } else if conn.available() == 0 && conn.mark_blocked() {
            newly_blocked = Some(Scope::Connection);
        }
    }
    Grant {
        granted,
        newly_blocked,
    }
}

/// Receiver-side account: what we advertised, what arrived and what the
/// application has consumed.
#[derive(Debug, Clone)]
pub struct RecvCredit {
    advertised: u64,
    highest: u64,
    consumed: u64,
    window: u64,
    last_update: Option<(Instant, u64)>,
}

impl RecvCredit {
    pub fn new(window: u64) -> Self {
        RecvCredit {
            advertised: window,
            highest: 0,
            consumed: 0,
            window,
            last_update: None,
        }
    }

    pub fn advertised(&self) -> u64 {
        self.advertised
    }

    pub fn highest(&self) -> u64 {
        self.highest
    }

    pub fn consumed(&self) -> u64 {
        self.consumed
    }

    pub fn window(&self) -> u64 {
        self.window
    }

    /// Records data reaching `end`. Returns how far the highest offset
    /// advanced.
    pub fn on_receive(&mut self, end: u64) -> Result<u64, FlowControlViolation> {
        if end > self.advertised {
            return Err(FlowControlViolation {
                end,
                limit: self.advertised,
            });
        }
        let advanced = end.saturating_sub(self.highest);
        self.highest = self.highest.max(end);
        Ok(advanced)
    }

    /// Adds `n` to the highest offset, for connection-level accounting
    /// driven by per-stream advances.
    pub fn on_receive_delta(&mut self, n: u64) -> Result<(), FlowControlViolation> {
        self.on_receive(self.highest + n).map(|_| ())
    }

    pub fn on_consumed(&mut self, n: u64) {
        self.consumed += n;
        debug_assert!(self.consumed <= self.highest);
    }

    /// The half-window rule: once less than half a window of credit is left
    /// unconsumed, advertise `consumed + window`. The window grows towards
    /// twice the bandwidth-delay product observed since the last update.
    pub fn maybe_update(&mut self, now: Instant, srtt: Option<Duration>) -> Option<u64> {
        let left = self.advertised - self.consumed;
        if left > 0 && left >= self.window.div_ceil(2) {
            return None;
        }
        if let (Some(srtt), Some((at, consumed_then))) = (srtt, self.last_update) {
            let elapsed = micros(now - at);
            if elapsed > 0 {
                let bdp = (self.consumed - consumed_then) as u128 * micros(srtt) as u128 / elapsed as u128;
                let target = (2 * bdp).min(MAX_WINDOW as u128) as u64;
                self.window = self.window.max(target);
            }
        }
        self.last_update = Some((now, self.consumed));
        let limit = self.consumed + self.window;
        if limit <= self.advertised {
            return None;
        }
        self.advertised = limit;
        Some(limit)
    }

    /// Current advertised value, for retransmitting a lost update.
    pub fn current_limit(&self) -> u64 {
        self.advertised
    }
}

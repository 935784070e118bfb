//! Acknowledgment generation, RTT estimation and loss detection.
//!
//! Packet numbers, acknowledgments and loss detection are kept per packet
//! number space. The RTT estimator is shared by all spaces of a connection.

use std::collections::BTreeMap;
use std::ops::RangeInclusive;
use std::time::Duration;

use crate::codec::VarInt;
use crate::error::TransportError;
use crate::frames::AckFrame;
use crate::rangeset::RangeSet;
use crate::streams::{Dir, StreamId};
use crate::time::{micros, Instant};

pub const INITIAL_RTT: Duration = Duration::from_millis(333);
pub const GRANULARITY: Duration = Duration::from_millis(1);
pub const PACKET_THRESHOLD: u64 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SpaceId {
    Initial = 0,
    Handshake = 1,
    Data = 2,
}

impl SpaceId {
    pub const ALL: [SpaceId; 3] = [SpaceId::Initial, SpaceId::Handshake, SpaceId::Data];

    pub fn name(self) -> &'static str {
        match self {
            SpaceId::Initial => "initial",
            SpaceId::Handshake => "handshake",
            SpaceId::Data => "application",
        }
    }
}

/// Loss detection constants.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LossParams {
    pub packet_threshold: u64,
    pub time_threshold_num: u32,
    pub time_threshold_den: u32,
    pub granularity: Duration,
}

impl Default for LossParams {
    fn default() -> Self {
        LossParams {
            packet_threshold: PACKET_THRESHOLD,
            time_threshold_num: 9,
            time_threshold_den: 8,
            granularity: GRANULARITY,
        }
    }
}

/// Received packet numbers of one space and the pending-ACK state.
#[derive(Debug, Clone)]
pub struct AckTracker {
    received: RangeSet,
    /// Packets below this were acknowledged in an ACK the peer has seen.
    floor: u64,
    largest: Option<(u64, Instant)>,
    eliciting_unacked: u32,
    immediate: bool,
    deadline: Option<Instant>,
    max_ack_delay: Duration,
    /// Initial and Handshake packets are acknowledged without delay.
    always_immediate: bool,
}

impl AckTracker {
    pub fn new(max_ack_delay: Duration, always_immediate: bool) -> Self {
        AckTracker {
            received: RangeSet::new(),
            floor: 0,
            largest: None,
            eliciting_unacked: 0,
            immediate: false,
            deadline: None,
            max_ack_delay,
            always_immediate,
        }
    }

    pub fn largest_received(&self) -> Option<u64> {
        self.largest.map(|(pn, _)| pn)
    }

    pub fn is_duplicate(&self, pn: u64) -> bool {
        pn < self.floor || self.received.contains(pn)
    }

    /// Records a processed packet. Returns true when an ACK should go out
    /// right away.
    pub fn on_packet_received(&mut self, pn: u64, ack_eliciting: bool, now: Instant) -> bool {
        let out_of_order = match self.largest {
            Some((largest, _)) => pn < largest || pn > largest + 1,
            None => pn > self.floor && pn > 0 && !self.received.is_empty(),
        };
        self.received.insert_one(pn);
        if self.largest.is_none_or(|(l, _)| pn > l) {
            self.largest = Some((pn, now));
        }
        if !ack_eliciting {
            return false;
        }
        self.eliciting_unacked += 1;
        if self.always_immediate || out_of_order || self.eliciting_unacked >= 2 {
            self.immediate = true;
        } else if self.deadline.is_none() {
            self.deadline = Some(now + self.max_ack_delay);
        }
        self.immediate
    }

    /// True when an ACK-eliciting packet is waiting to be acknowledged.
    pub fn ack_pending(&self) -> bool {
        self.eliciting_unacked > 0
    }

    /// True when an ACK is due at `now`.
    pub fn ack_due(&self, now: Instant) -> bool {
        self.eliciting_unacked > 0 && (self.immediate || self.deadline.is_some_and(|d| d <= now))
    }

    pub fn ack_deadline(&self) -> Option<Instant> {
        if self.immediate && self.eliciting_unacked > 0 {
            return None;
        }
        self.deadline
    }

    pub fn can_ack(&self) -> bool {
        !self.received.is_empty()
    }

    /// Builds an ACK frame no larger than `max_bytes`, dropping the oldest
    /// ranges first if needed. Returns `None` if nothing was received or not
    /// even one range fits.
    pub fn build_ack(&self, now: Instant, ack_delay_exponent: u64, max_bytes: usize) -> Option<AckFrame> {
        let (_, recv_time) = self.largest?;
        let delay = micros(now.saturating_duration_since(recv_time)) >> ack_delay_exponent;
        build_ack_ranges(&self.received, delay, max_bytes).map(|ranges| AckFrame { delay, ranges })
    }

    pub fn on_ack_sent(&mut self) {
        self.eliciting_unacked = 0;
        self.immediate = false;
        self.deadline = None;
    }

    /// The peer received an ACK of ours whose largest was `largest`; older
    /// packet numbers no longer need to be reported.
    pub fn on_ack_acked(&mut self, largest: u64) {
        let floor = largest.saturating_sub(1024);
        if floor > self.floor {
            self.received.remove(0..floor);
            self.floor = floor;
        }
    }
}

/// Turns a set of packet numbers into ACK ranges, newest first, keeping as
/// many as fit in `max_bytes`.
pub fn build_ack_ranges(received: &RangeSet, delay: u64, max_bytes: usize) -> Option<Vec<RangeInclusive<u64>>> {
    let vl = |v: u64| VarInt::from_u64(v).map_or(8, |v| v.size());
    let mut ranges: Vec<RangeInclusive<u64>> = Vec::new();
    // Running size of everything but the range count field.
    let mut body = 0;
    let mut smallest = 0;
    for r in received.iter().rev() {
        let (lo, hi) = (r.start, r.end - 1);
        let add = if ranges.is_empty() {
            1 + vl(hi) + vl(delay) + vl(hi - lo)
        } else {
            vl(smallest - hi - 2) + vl(hi - lo)
        };
        if body + add + vl(ranges.len() as u64) > max_bytes {
            break;
        }
        body += add;
        smallest = lo;
        ranges.push(lo..=hi);
    }
    (!ranges.is_empty()).then_some(ranges)
}

/// Smoothed RTT and variation, kept in whole microseconds.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RttEstimator {
    initial: Duration,
    latest: Duration,
    min: Duration,
    smoothed: Duration,
    rttvar: Duration,
    has_sample: bool,
    first_sample_at: Option<Instant>,
}

impl Default for RttEstimator {
    fn default() -> Self {
        Self::new(INITIAL_RTT)
    }
}

impl RttEstimator {
    pub fn new(initial: Duration) -> Self {
        RttEstimator {
            initial,
            latest: Duration::ZERO,
            min: Duration::ZERO,
            smoothed: initial,
            rttvar: initial / 2,
            has_sample: false,
            first_sample_at: None,
        }
    }

    pub fn latest(&self) -> Duration {
        self.latest
    }

    pub fn min(&self) -> Duration {
        self.min
    }

    pub fn smoothed(&self) -> Duration {
        self.smoothed
    }

    pub fn rttvar(&self) -> Duration {
        self.rttvar
    }

    pub fn has_sample(&self) -> bool {
        self.has_sample
    }

    pub fn first_sample_at(&self) -> Option<Instant> {
        self.first_sample_at
    }

    /// Feeds one sample. `ack_delay` must already be capped by the caller
    /// (zero outside the application data space). It is only subtracted for
    /// the smoothed statistics, never for the minimum, and never if doing
    /// so would take the sample below the minimum.
    pub fn update(&mut self, latest: Duration, ack_delay: Duration, now: Instant) {
        let latest_us = micros(latest);
        self.latest = latest;
        if !self.has_sample {
            self.has_sample = true;
            self.first_sample_at = Some(now);
            self.min = latest;
            self.smoothed = latest;
            self.rttvar = Duration::from_micros(latest_us / 2);
            return;
        }
        self.min = self.min.min(latest);
        let min_us = micros(self.min);
        let delay_us = micros(ack_delay);
        let adjusted = if latest_us >= min_us + delay_us {
            latest_us - delay_us
        } else {
            latest_us
        };
        let s = micros(self.smoothed);
        let v = micros(self.rttvar);
        self.rttvar = Duration::from_micros((3 * v + s.abs_diff(adjusted)) / 4);
        self.smoothed = Duration::from_micros((7 * s + adjusted) / 8);
    }

    /// Forgets all samples, as after moving to a new network path.
    pub fn reset(&mut self) {
        *self = RttEstimator::new(self.initial);
    }

    /// `smoothed + max(4 * rttvar, granularity)`, before any max_ack_delay.
    pub fn pto_base(&self) -> Duration {
        self.smoothed + (4 * self.rttvar).max(GRANULARITY)
    }

    /// The delay after which an unacknowledged packet older than a later
    /// acknowledged one is lost.
    pub fn loss_delay(&self, params: &LossParams) -> Duration {
        let base = self.smoothed.max(self.latest);
        let scaled = base * params.time_threshold_num / params.time_threshold_den;
        scaled.max(params.granularity)
    }
}

/// What a sent packet carried, as far as acknowledgment and loss handling
/// need to know.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SentFrame {
    Ack { largest: u64 },
    Ping,
    Padding,
    Crypto { offset: u64, len: u64 },
    Stream { id: StreamId, offset: u64, len: u64, fin: bool },
    ResetStream { id: StreamId },
    StopSending { id: StreamId },
    MaxData,
    MaxStreamData { id: StreamId },
    MaxStreams { dir: Dir },
    NewConnectionId { seq: u64 },
    RetireConnectionId { seq: u64 },
    NewToken { token: Vec<u8> },
    PathChallenge { data: [u8; 8] },
    PathResponse,
    ConnectionClose,
    Datagram { len: usize },
}

impl SentFrame {
    pub fn name(&self) -> &'static str {
        match self {
            SentFrame::Ack { .. } => "ack",
            SentFrame::Ping => "ping",
            SentFrame::Padding => "padding",
            SentFrame::Crypto { .. } => "crypto",
            SentFrame::Stream { .. } => "stream",
            SentFrame::ResetStream { .. } => "reset_stream",
            SentFrame::StopSending { .. } => "stop_sending",
            SentFrame::MaxData => "max_data",
            SentFrame::MaxStreamData { .. } => "max_stream_data",
            SentFrame::MaxStreams { .. } => "max_streams",
            SentFrame::NewConnectionId { .. } => "new_connection_id",
            SentFrame::RetireConnectionId { .. } => "retire_connection_id",
            SentFrame::NewToken { .. } => "new_token",
            SentFrame::PathChallenge { .. } => "path_challenge",
            SentFrame::PathResponse => "path_response",
            SentFrame::ConnectionClose => "connection_close",
            SentFrame::Datagram { .. } => "datagram",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SentPacket {
    pub pn: u64,
    pub time_sent: Instant,
    pub size: usize,
    pub ack_eliciting: bool,
    /// Counted in bytes in flight.
    pub in_flight: bool,
    /// A path MTU probe: its loss says nothing about congestion.
    pub pmtu_probe: bool,
    pub frames: Vec<SentFrame>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossTrigger {
    PacketThreshold,
    TimeThreshold,
}

impl LossTrigger {
    pub fn name(self) -> &'static str {
        match self {
            LossTrigger::PacketThreshold => "packetThreshold",
            LossTrigger::TimeThreshold => "timeThreshold",
        }
    }
}

#[derive(Debug, Default)]
pub struct AckOutcome {
    pub newly_acked: Vec<SentPacket>,
    /// `now - time_sent` of the largest acknowledged packet, when that
    /// packet is newly acknowledged and something ack-eliciting was too.
    pub rtt_sample: Option<Duration>,
}

/// Unacknowledged packets of one space, ordered by packet number.
#[derive(Debug, Default)]
pub struct SentLog {
    packets: BTreeMap<u64, SentPacket>,
    largest_acked: Option<u64>,
    acked: RangeSet,
    loss_time: Option<Instant>,
    last_eliciting_sent: Option<Instant>,
    eliciting_in_flight: usize,
}

impl SentLog {
    pub fn new() -> Self {
        SentLog::default()
    }

    pub fn on_sent(&mut self, p: SentPacket) {
        debug_assert!(self.packets.keys().next_back().is_none_or(|l| *l < p.pn));
        if p.ack_eliciting && !p.pmtu_probe {
            self.last_eliciting_sent = Some(p.time_sent);
            self.eliciting_in_flight += 1;
        }
        self.packets.insert(p.pn, p);
    }

    pub fn largest_acked(&self) -> Option<u64> {
        self.largest_acked
    }

    pub fn loss_time(&self) -> Option<Instant> {
        self.loss_time
    }

    pub fn last_eliciting_sent(&self) -> Option<Instant> {
        self.last_eliciting_sent
    }

    /// Ack-eliciting packets (other than path MTU probes) awaiting
    /// acknowledgment.
    pub fn eliciting_in_flight(&self) -> usize {
        self.eliciting_in_flight
    }

    pub fn is_empty(&self) -> bool {
        self.packets.is_empty()
    }

    pub fn packets(&self) -> impl Iterator<Item = &SentPacket> {
        self.packets.values()
    }

    pub fn acked(&self) -> &RangeSet {
        &self.acked
    }

    fn remove(&mut self, pn: u64) -> Option<SentPacket> {
        let p = self.packets.remove(&pn)?;
        if p.ack_eliciting && !p.pmtu_probe {
            self.eliciting_in_flight -= 1;
        }
        Some(p)
    }

    /// Removes every packet, e.g. when the space's keys are discarded.
    pub fn drain(&mut self) -> Vec<SentPacket> {
        self.eliciting_in_flight = 0;
        self.loss_time = None;
        std::mem::take(&mut self.packets).into_values().collect()
    }

    /// Processes an ACK frame. `next_pn` is the next packet number this
    /// space would use; acknowledging anything at or above it is a protocol
    /// violation.
    pub fn on_ack_received(&mut self, ack: &AckFrame, next_pn: u64, now: Instant) -> Result<AckOutcome, TransportError> {
        let largest = ack.largest();
        if largest >= next_pn {
            return Err(TransportError::protocol(format!("ack of unsent packet {largest}"))
                .with_frame(crate::frames::ty::ACK));
        }
        self.largest_acked = Some(self.largest_acked.map_or(largest, |l| l.max(largest)));
        let mut newly: Vec<u64> = Vec::new();
        for r in &ack.ranges {
            newly.extend(self.packets.range(r.clone()).map(|(pn, _)| *pn));
            self.acked.insert(*r.start()..*r.end() + 1);
        }
        let mut out = AckOutcome::default();
        if newly.is_empty() {
            return Ok(out);
        }
        newly.sort_unstable();
        let largest_newly = newly.last() == Some(&largest);
        for pn in newly {
            out.newly_acked.push(self.remove(pn).expect("listed"));
        }
        if largest_newly && out.newly_acked.iter().any(|p| p.ack_eliciting) {
            let sent = out.newly_acked.last().expect("non-empty").time_sent;
            out.rtt_sample = Some(now - sent);
        }
        Ok(out)
    }

    /// Declares lost every packet sent before the largest acknowledged one
    /// that is either `packet_threshold` numbers older or older than the
    /// loss delay. Also sets the time at which the next packet would cross
    /// the time threshold.
    pub fn detect_lost(&mut self, rtt: &RttEstimator, params: &LossParams, now: Instant) -> Vec<(SentPacket, LossTrigger)> {
        self.loss_time = None;
        let Some(largest) = self.largest_acked else {
            return Vec::new();
        };
        let loss_delay = rtt.loss_delay(params);
        let mut lost = Vec::new();
        let mut stale = Vec::new();
        for (pn, p) in self.packets.range(..largest) {
            if !p.ack_eliciting && !p.in_flight {
                // An ACK-only packet is never retransmitted and holds no
                // congestion credit. Peers do not acknowledge it promptly,
                // so a timer on it would report reordering as loss. Once
                // overtaken it is forgotten without a verdict.
                if largest - pn >= params.packet_threshold || p.time_sent + loss_delay <= now {
                    stale.push(*pn);
                }
                continue;
            }
            if largest - pn >= params.packet_threshold {
                lost.push((*pn, LossTrigger::PacketThreshold));
            } else if p.time_sent + loss_delay <= now {
                lost.push((*pn, LossTrigger::TimeThreshold));
            } else {
                let t = p.time_sent + loss_delay;
                self.loss_time = Some(self.loss_time.map_or(t, |l| l.min(t)));
            }
        }
        for pn in stale {
            self.remove(pn);
        }
        lost.into_iter()
            .map(|(pn, why)| (self.remove(pn).expect("listed"), why))
            .collect()
    }
}

/// Whether `lost` (packets of one space, declared lost together) spans a
/// period of persistent congestion: two ack-eliciting packets sent at least
/// `3 * period` apart with nothing acknowledged in between, both sent after
/// the first RTT sample.
pub fn persistent_congestion(lost: &[&SentPacket], acked: &RangeSet, period: Duration, first_sample: Option<Instant>) -> bool {
    let Some(first_sample) = first_sample else {
        return false;
    };
    let mut eliciting: Vec<&SentPacket> = lost
        .iter()
        .copied()
        .filter(|p| p.ack_eliciting && !p.pmtu_probe && p.time_sent > first_sample)
        .collect();
    eliciting.sort_by_key(|p| p.pn);
    let mut start: Option<&SentPacket> = None;
    for p in eliciting {
        match start {
            Some(s) if !acked.intersects(s.pn..p.pn) => {
                if p.time_sent - s.time_sent >= 3 * period {
                    return true;
                }
            }
            _ => start = Some(p),
        }
    }
    false
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::BTreeSet;

    fn ms(v: u64) -> Duration {
        Duration::from_millis(v)
    }

    fn sent(pn: u64, t_ms: u64) -> SentPacket {
        SentPacket {
            pn,
            time_sent: Instant::from_millis(t_ms),
            size: 1200,
            ack_eliciting: true,
            in_flight: true,
            pmtu_probe: false,
            frames: vec![SentFrame::Ping],
        }
    }

    fn ack_of(pns: &[u64]) -> AckFrame {
        let mut set = RangeSet::new();
        for pn in pns {
            set.insert_one(*pn);
        }
        AckFrame {
            delay: 0,
            ranges: build_ack_ranges(&set, 0, usize::MAX).unwrap(),
        }
    }

    fn expand(ranges: &[RangeInclusive<u64>]) -> BTreeSet<u64> {
        ranges.iter().flat_map(|r| r.clone()).collect()
    }

    #[test]
    fn every_second_eliciting_packet_acked_at_once() {
        let mut t = AckTracker::new(ms(25), false);
        assert!(!t.on_packet_received(0, true, Instant::ZERO));
        assert_eq!(t.ack_deadline(), Some(Instant::from_millis(25)));
        assert!(t.on_packet_received(1, true, Instant::ZERO));
    }

    #[test]
    fn reorder_acked_at_once() {
        let mut t = AckTracker::new(ms(25), false);
        assert!(!t.on_packet_received(5, true, Instant::ZERO));
        t.on_ack_sent();
        assert!(t.on_packet_received(3, true, Instant::ZERO));
    }

    #[test]
    fn non_eliciting_arms_nothing() {
        let mut t = AckTracker::new(ms(25), false);
        assert!(!t.on_packet_received(0, false, Instant::ZERO));
        assert_eq!(t.ack_deadline(), None);
        assert!(!t.ack_pending());
        assert!(t.can_ack());
    }

    #[test]
    fn ack_ranges_example() {
        let mut t = AckTracker::new(ms(25), false);
        for pn in [0, 1, 2, 5, 6, 9] {
            t.on_packet_received(pn, true, Instant::ZERO);
        }
        let ack = t.build_ack(Instant::ZERO, 3, 1000).unwrap();
        assert_eq!(ack.largest(), 9);
        assert_eq!(expand(&ack.ranges), BTreeSet::from([0, 1, 2, 5, 6, 9]));
        let mut single = AckTracker::new(ms(25), false);
        single.on_packet_received(7, true, Instant::ZERO);
        assert_eq!(single.build_ack(Instant::ZERO, 3, 1000).unwrap().ranges, vec![7..=7]);
    }

    #[test]
    fn ack_delay_scaled_by_exponent() {
        let mut t = AckTracker::new(ms(25), false);
        t.on_packet_received(0, true, Instant::ZERO);
        let ack = t.build_ack(Instant::from_micros(800), 3, 1000).unwrap();
        assert_eq!(ack.delay, 100);
    }

    #[test]
    fn size_budget_drops_oldest() {
        let mut set = RangeSet::new();
        for pn in (0..20_000).step_by(2) {
            set.insert_one(pn);
        }
        let ranges = build_ack_ranges(&set, 0, 64).unwrap();
        assert!(AckFrame::encoded_len(0, &ranges) <= 64);
        assert_eq!(*ranges[0].end(), 19_998);
        let kept = expand(&ranges);
        let min_kept = *kept.iter().next().unwrap();
        // every even number from the smallest kept one up is present
        assert!((min_kept..=19_998).step_by(2).all(|pn| kept.contains(&pn)));
    }

    #[test]
    fn rtt_first_sample_and_ewma() {
        let mut r = RttEstimator::default();
        r.update(ms(100), Duration::ZERO, Instant::ZERO);
        assert_eq!((r.smoothed(), r.rttvar(), r.min()), (ms(100), ms(50), ms(100)));
        r.update(ms(120), ms(10), Instant::ZERO);
        // adjusted = 110; rttvar = (3*50 + 10)/4 = 40; smoothed = (700 + 110)/8
        assert_eq!(r.rttvar(), ms(40));
        assert_eq!(r.smoothed(), Duration::from_micros(101_250));
        assert_eq!(r.min(), ms(100));
    }

    #[test]
    fn ack_delay_never_below_min() {
        let mut r = RttEstimator::default();
        r.update(ms(100), Duration::ZERO, Instant::ZERO);
        r.update(ms(105), ms(20), Instant::ZERO);
        // 105 - 20 < 100, so the delay is ignored
        assert_eq!(r.smoothed(), Duration::from_micros((7 * 100_000 + 105_000) / 8));
    }

    #[test]
    fn pto_formula() {
        let mut r = RttEstimator::default();
        r.update(ms(100), Duration::ZERO, Instant::ZERO);
        r.rttvar = ms(10);
        assert_eq!(r.pto_base() + ms(25), ms(165));
        assert_eq!((r.pto_base() + ms(25)) * 2, ms(330));
    }

    #[test]
    fn packet_threshold_rule() {
        let mut log = SentLog::new();
        for pn in 0..4 {
            log.on_sent(sent(pn, 0));
        }
        let rtt = RttEstimator::default();
        let now = Instant::from_millis(1);
        log.on_ack_received(&ack_of(&[3]), 4, now).unwrap();
        let lost = log.detect_lost(&rtt, &LossParams::default(), now);
        assert_eq!(lost.iter().map(|(p, _)| p.pn).collect::<Vec<_>>(), vec![0]);
        assert_eq!(lost[0].1, LossTrigger::PacketThreshold);
        assert!(log.loss_time().is_some());
    }

    #[test]
    fn time_threshold_rule() {
        let mut log = SentLog::new();
        log.on_sent(sent(0, 0));
        log.on_sent(sent(1, 50));
        let mut rtt = RttEstimator::default();
        rtt.update(ms(100), Duration::ZERO, Instant::ZERO);
        let now = Instant::from_millis(100);
        log.on_ack_received(&ack_of(&[1]), 2, now).unwrap();
        assert!(log.detect_lost(&rtt, &LossParams::default(), now).is_empty());
        // 9/8 * 100 ms after sending
        assert_eq!(log.loss_time(), Some(Instant::from_micros(112_500)));
        let lost = log.detect_lost(&rtt, &LossParams::default(), Instant::from_micros(112_500));
        assert_eq!(lost[0].1, LossTrigger::TimeThreshold);
    }

    #[test]
    fn duplicate_ack_changes_nothing() {
        let mut log = SentLog::new();
        log.on_sent(sent(0, 0));
        let first = log.on_ack_received(&ack_of(&[0]), 1, Instant::from_millis(10)).unwrap();
        assert!(first.rtt_sample.is_some());
        let second = log.on_ack_received(&ack_of(&[0]), 1, Instant::from_millis(20)).unwrap();
        assert!(second.newly_acked.is_empty() && second.rtt_sample.is_none());
    }

    #[test]
    fn ack_of_unsent_is_violation() {
        let mut log = SentLog::new();
        log.on_sent(sent(0, 0));
        assert!(log.on_ack_received(&ack_of(&[1]), 1, Instant::ZERO).is_err());
    }

    #[test]
    fn rtt_sample_only_for_newly_acked_largest() {
        let mut log = SentLog::new();
        log.on_sent(sent(0, 0));
        log.on_sent(sent(1, 0));
        log.on_ack_received(&ack_of(&[1]), 2, Instant::from_millis(5)).unwrap();
        let o = log.on_ack_received(&ack_of(&[0, 1]), 2, Instant::from_millis(9)).unwrap();
        assert_eq!(o.newly_acked.len(), 1);
        assert!(o.rtt_sample.is_none());
    }

    #[test]
    fn persistent_congestion_span() {
        let a = sent(1, 100);
        let b = sent(2, 500);
        let acked = RangeSet::new();
        assert!(persistent_congestion(&[&a, &b], &acked, ms(100), Some(Instant::ZERO)));
        assert!(!persistent_congestion(&[&a, &b], &acked, ms(150), Some(Instant::ZERO)));
        let mut between = RangeSet::new();
        between.insert_one(1);
        let c = sent(3, 500);
        // pn 1 acked means only packets 2..3 form a run
        assert!(!persistent_congestion(&[&b, &c], &between, ms(100), Some(Instant::ZERO)));
        assert!(!persistent_congestion(&[&a, &b], &acked, ms(100), None));
    }

    proptest! {
        #[test]
        fn ranges_roundtrip(pns in proptest::collection::btree_set(0u64..5000, 1..300)) {
            let mut set = RangeSet::new();
            for pn in &pns {
                set.insert_one(*pn);
            }
            let ranges = build_ack_ranges(&set, 0, usize::MAX).unwrap();
            prop_assert_eq!(expand(&ranges), pns);
        }

        #[test]
        fn no_early_loss(n in 1u64..30, acked_idx in 0u64..30, t_ms in 0u64..200) {
            let acked_idx = acked_idx % n;
            let mut log = SentLog::new();
            for pn in 0..n {
                log.on_sent(sent(pn, pn));
            }
            let rtt = RttEstimator::default();
            let now = Instant::from_millis(n + t_ms);
            log.on_ack_received(&ack_of(&[acked_idx]), n, now).unwrap();
            let delay = rtt.loss_delay(&LossParams::default());
            for (p, _) in log.detect_lost(&rtt, &LossParams::default(), now) {
                prop_assert!(acked_idx - p.pn >= 3 || now - p.time_sent >= delay);
            }
        }
    }
}

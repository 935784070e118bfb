//! Stream identifiers, per-stream send/receive state and the stream table.
//!
//! The two low bits of a stream id give its type:
//!
//! | bits | type                         |
//! |------|------------------------------|
//! | 0x0  | client-initiated, bidirectional |
//! | 0x1  | server-initiated, bidirectional |
//! | 0x2  | client-initiated, unidirectional |
//! | 0x3  | server-initiated, unidirectional |

use std::collections::{BTreeMap, VecDeque};
use std::fmt;
use std::time::Duration;

use thiserror::Error;

use crate::error::{code, TransportError};
use crate::flow::{self, RecvCredit, Scope, SendCredit};
use crate::frames::{ty, Frame, StreamFrame};
use crate::rangeset::RangeSet;
use crate::time::Instant;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Client,
    Server,
}

impl Side {
    pub fn peer(self) -> Side {
        match self {
            Side::Client => Side::Server,
            Side::Server => Side::Client,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Side::Client => "client",
            Side::Server => "server",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Dir {
    Bidi,
    Uni,
}

impl Dir {
    fn idx(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct StreamId(pub u64);

impl StreamId {
    pub fn new(initiator: Side, dir: Dir, index: u64) -> Self {
        StreamId(index << 2 | (dir as u64) << 1 | initiator as u64)
    }

    pub fn initiator(self) -> Side {
        if self.0 & 1 == 0 {
            Side::Client
        } else {
            Side::Server
        }
    }

    pub fn dir(self) -> Dir {
        if self.0 & 2 == 0 {
            Dir::Bidi
        } else {
            Dir::Uni
        }
    }

    /// Position among streams of the same type, in opening order.
    pub fn index(self) -> u64 {
        self.0 >> 2
    }
}

impl fmt::Display for StreamId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum StreamError {
    #[error("peer stream limit reached")]
    LimitReached,
    #[error("unknown stream {0}")]
    UnknownStream(StreamId),
    #[error("stream {0} has no sending part")]
    NotWritable(StreamId),
    #[error("stream {0} is already finished or reset")]
    Closed(StreamId),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum StreamEvent {
    Opened(StreamId),
    Readable { id: StreamId, data: Vec<u8> },
    Finished { id: StreamId, final_size: u64 },
    Reset { id: StreamId, error_code: u64, final_size: u64 },
    StopSending { id: StreamId, error_code: u64 },
    Blocked(Scope),
    /// Both parts of the stream are done. `sent` and `received` are the
    /// credit the stream consumed in each direction.
    Closed { id: StreamId, sent: u64, received: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct ResetState {
    error_code: u64,
    final_size: u64,
    pending: bool,
    acked: bool,
}

#[derive(Debug)]
pub struct SendStream {
    buf: VecDeque<u8>,
    base: u64,
    written: u64,
    fin: bool,
    fin_pending: bool,
    fin_acked: bool,
    pending: RangeSet,
    acked: RangeSet,
    flow: SendCredit,
    reset: Option<ResetState>,
    /// Scheduling hint; higher goes first. No other meaning.
    pub priority: i32,
}

impl SendStream {
    fn new(limit: u64) -> Self {
        SendStream {
            buf: VecDeque::new(),
            base: 0,
            written: 0,
            fin: false,
            fin_pending: false,
            fin_acked: false,
            pending: RangeSet::new(),
            acked: RangeSet::new(),
            flow: SendCredit::new(limit),
            reset: None,
            priority: 0,
        }
    }

    pub fn written(&self) -> u64 {
        self.written
    }

    /// Highest offset sent, which is the credit consumed.
    pub fn sent(&self) -> u64 {
        self.flow.used()
    }

    pub fn is_reset(&self) -> bool {
        self.reset.is_some()
    }

    fn write(&mut self, data: &[u8]) {
        self.buf.extend(data);
        self.pending.insert(self.written..self.written + data.len() as u64);
        self.written += data.len() as u64;
    }

    fn has_work(&self) -> bool {
        self.reset.is_none() && (!self.pending.is_empty() || self.fin_pending)
    }

    fn is_done(&self) -> bool {
        match self.reset {
            Some(r) => r.acked,
            None => self.fin_acked && self.acked.contains_range(&(0..self.written)),
        }
    }

    fn slice(&self, offset: u64, len: usize) -> Vec<u8> {
        let start = (offset - self.base) as usize;
        self.buf.range(start..start + len).copied().collect()
    }

    fn on_ack(&mut self, offset: u64, len: u64, fin: bool) {
        if len > 0 {
            self.acked.insert(offset..offset + len);
        }
        if fin {
            self.fin_acked = true;
        }
        if let Some(r) = self.acked.first() {
            if r.start == 0 && r.end > self.base {
                let drop = (r.end - self.base) as usize;
                self.buf.drain(..drop.min(self.buf.len()));
                self.base = r.end;
            }
        }
    }

    fn on_lost(&mut self, offset: u64, len: u64, fin: bool) {
        if self.reset.is_some() {
            return;
        }
        let mut pos = offset;
        let end = offset + len;
        while pos < end {
            // re-queue only the pieces not yet acknowledged
            let next_acked = self
                .acked
                .iter()
                .find(|r| r.end > pos)
                .filter(|r| r.start < end);
            match next_acked {
                Some(r) if r.start <= pos => pos = r.end,
                Some(r) => {
                    self.pending.insert(pos..r.start);
                    pos = r.end;
                }
                None => {
                    self.pending.insert(pos..end);
                    pos = end;
                }
            }
        }
        if fin && !self.fin_acked {
            self.fin_pending = true;
        }
    }

    fn start_reset(&mut self, error_code: u64) -> bool {
        if self.reset.is_some() || self.is_done() {
            return false;
        }
        self.reset = Some(ResetState {
            error_code,
            final_size: self.flow.used(),
            pending: true,
            acked: false,
        });
        self.pending = RangeSet::new();
        self.fin_pending = false;
        true
    }
}

#[derive(Debug)]
pub struct RecvStream {
    chunks: BTreeMap<u64, Vec<u8>>,
    delivered: u64,
    final_size: Option<u64>,
    fin_delivered: bool,
    reset_received: bool,
    flow: RecvCredit,
    max_data_pending: bool,
    stop_sending: Option<(u64, bool)>,
}

impl RecvStream {
    fn new(window: u64) -> Self {
        RecvStream {
            chunks: BTreeMap::new(),
            delivered: 0,
            final_size: None,
            fin_delivered: false,
            reset_received: false,
            flow: RecvCredit::new(window),
            max_data_pending: false,
            stop_sending: None,
        }
    }

    /// Highest offset received, which is the credit consumed.
    pub fn received(&self) -> u64 {
        self.flow.highest()
    }

    pub fn final_size(&self) -> Option<u64> {
        self.final_size
    }

    fn is_done(&self) -> bool {
        self.fin_delivered || self.reset_received
    }

    fn check_final(&self, end: u64, fin: bool) -> Result<(), TransportError> {
        let err = |r: &str| TransportError::new(code::FINAL_SIZE_ERROR, r.to_string());
        if let Some(fs) = self.final_size {
            if end > fs || (fin && end != fs) {
                return Err(err("data conflicts with final size"));
            }
        }
        if fin && end < self.flow.highest() {
            return Err(err("final size below received data"));
        }
        Ok(())
    }

    /// Inserts data, returning the bytes that became contiguous.
    fn insert(&mut self, offset: u64, data: &[u8]) -> Result<Vec<u8>, TransportError> {
        let end = offset + data.len() as u64;
        let mut pos = offset.max(self.delivered);
        while pos < end {
            let overlapping = self
                .chunks
                .range(..=pos)
                .next_back()
                .filter(|(s, c)| **s + c.len() as u64 > pos)
                .map(|(s, c)| (*s, c.len() as u64));
            if let Some((s, len)) = overlapping {
                let ov_end = end.min(s + len);
                let have = &self.chunks[&s][(pos - s) as usize..(ov_end - s) as usize];
                if have != &data[(pos - offset) as usize..(ov_end - offset) as usize] {
                    return Err(TransportError::protocol("retransmitted stream data differs"));
                }
                pos = ov_end;
            } else {
                let next = self
                    .chunks
                    .range(pos + 1..)
                    .next()
                    .map_or(end, |(s, _)| *s)
                    .min(end);
                self.chunks
                    .insert(pos, data[(pos - offset) as usize..(next - offset) as usize].to_vec());
                pos = next;
            }
        }
        let mut out = Vec::new();
        while let Some(chunk) = self.chunks.remove(&self.delivered) {
            self.delivered += chunk.len() as u64;
            if out.is_empty() {
                out = chunk;
            } else {
                out.extend_from_slice(&chunk);
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Default)]
pub struct Stream {
    pub send: Option<SendStream>,
    pub recv: Option<RecvStream>,
}

impl Stream {
    fn is_done(&self) -> bool {
        self.send.as_ref().is_none_or(|s| s.is_done()) && self.recv.as_ref().is_none_or(|r| r.is_done())
    }
}

/// Initial per-stream limits, taken from both sides' transport parameters.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct StreamLimits {
    /// Our receive window on streams we open.
    pub local_bidi_local: u64,
    /// Our receive window on bidirectional streams the peer opens.
    pub local_bidi_remote: u64,
    /// Our receive window on unidirectional streams the peer opens.
    pub local_uni: u64,
    /// Peer's receive window on bidirectional streams it opens.
    pub peer_bidi_local: u64,
    /// Peer's receive window on bidirectional streams we open.
    pub peer_bidi_remote: u64,
    pub peer_uni: u64,
    /// Streams of each type we let the peer open.
    pub local_max_streams_bidi: u64,
    pub local_max_streams_uni: u64,
    /// Streams of each type the peer lets us open.
    pub peer_max_streams_bidi: u64,
    pub peer_max_streams_uni: u64,
}

/// Context needed when delivering data to the application.
#[derive(Debug, Clone, Copy)]
pub struct RecvCtx {
    pub now: Instant,
    pub srtt: Option<Duration>,
}

#[derive(Debug)]
pub struct Streams {
    side: Side,
    limits: StreamLimits,
    streams: BTreeMap<StreamId, Stream>,
    next_local: [u64; 2],
    peer_max: [u64; 2],
    local_max: [u64; 2],
    max_streams_pending: [bool; 2],
    remote_opened: [u64; 2],
    events: VecDeque<StreamEvent>,
    rr_next: u64,
    /// Credit consumed on streams already closed: (sent, received).
    closed: BTreeMap<StreamId, (u64, u64)>,
    /// Whether the connection-level send limit has been reported blocked.
    pub conn_send: SendCredit,
    pub conn_recv: RecvCredit,
    pub conn_max_data_pending: bool,
}

impl Streams {
    pub fn new(side: Side, limits: StreamLimits, conn_send_limit: u64, conn_recv_window: u64) -> Self {
        Streams {
            side,
            limits,
            streams: BTreeMap::new(),
            next_local: [0; 2],
            peer_max: [limits.peer_max_streams_bidi, limits.peer_max_streams_uni],
            local_max: [limits.local_max_streams_bidi, limits.local_max_streams_uni],
            max_streams_pending: [false; 2],
            remote_opened: [0; 2],
            events: VecDeque::new(),
            rr_next: 0,
            closed: BTreeMap::new(),
            conn_send: SendCredit::new(conn_send_limit),
            conn_recv: RecvCredit::new(conn_recv_window),
            conn_max_data_pending: false,
        }
    }

    /// Replaces the peer-advertised limits, e.g. once the peer's transport
    /// parameters arrive after 0-RTT ran on remembered ones. Limits only grow.
    pub fn set_peer_limits(&mut self, limits: &StreamLimits, conn_send_limit: u64) {
        self.limits.peer_bidi_local = limits.peer_bidi_local;
        self.limits.peer_bidi_remote = limits.peer_bidi_remote;
        self.limits.peer_uni = limits.peer_uni;
        self.peer_max[0] = self.peer_max[0].max(limits.peer_max_streams_bidi);
        self.peer_max[1] = self.peer_max[1].max(limits.peer_max_streams_uni);
        self.conn_send.raise(conn_send_limit);
        for (id, s) in self.streams.iter_mut() {
            if let Some(send) = s.send.as_mut() {
                let limit = if id.initiator() == self.side {
                    match id.dir() {
                        Dir::Bidi => limits.peer_bidi_remote,
                        Dir::Uni => limits.peer_uni,
                    }
                } else {
                    limits.peer_bidi_local
                };
                send.flow.raise(limit);
            }
        }
    }

    pub fn get(&self, id: StreamId) -> Option<&Stream> {
        self.streams.get(&id)
    }

    pub fn ids(&self) -> impl Iterator<Item = StreamId> + '_ {
        self.streams.keys().copied()
    }

    /// Flow credit consumed per stream, open or closed: (sent, received).
    pub fn tallies(&self) -> BTreeMap<StreamId, (u64, u64)> {
        let mut out = self.closed.clone();
        for (id, s) in &self.streams {
            let sent = s.send.as_ref().map_or(0, |p| p.sent());
            let received = s.recv.as_ref().map_or(0, |p| p.received());
            out.insert(*id, (sent, received));
        }
        out
    }

    pub fn poll_event(&mut self) -> Option<StreamEvent> {
        self.events.pop_front()
    }

    /// Opens the lowest unused stream id of our own type.
    pub fn open(&mut self, dir: Dir) -> Result<StreamId, StreamError> {
        let i = dir.idx();
        if self.next_local[i] >= self.peer_max[i] {
            return Err(StreamError::LimitReached);
        }
        let id = StreamId::new(self.side, dir, self.next_local[i]);
        self.next_local[i] += 1;
        let send_limit = match dir {
            Dir::Bidi => self.limits.peer_bidi_remote,
            Dir::Uni => self.limits.peer_uni,
        };
        let stream = Stream {
            send: Some(SendStream::new(send_limit)),
            recv: (dir == Dir::Bidi).then(|| RecvStream::new(self.limits.local_bidi_local)),
        };
        self.streams.insert(id, stream);
        Ok(id)
    }

    pub fn write(&mut self, id: StreamId, data: &[u8]) -> Result<(), StreamError> {
        let send = self.send_part(id)?;
        if send.fin || send.reset.is_some() {
            return Err(StreamError::Closed(id));
        }
        send.write(data);
        Ok(())
    }

    pub fn finish(&mut self, id: StreamId) -> Result<(), StreamError> {
        let send = self.send_part(id)?;
        if send.fin || send.reset.is_some() {
            return Err(StreamError::Closed(id));
        }
        send.fin = true;
        send.fin_pending = true;
        Ok(())
    }

    pub fn reset(&mut self, id: StreamId, error_code: u64) -> Result<(), StreamError> {
        self.send_part(id)?.start_reset(error_code);
        Ok(())
    }

    pub fn set_priority(&mut self, id: StreamId, priority: i32) -> Result<(), StreamError> {
        self.send_part(id)?.priority = priority;
        Ok(())
    }

    /// Asks the peer to stop sending on `id`.
    pub fn stop_sending(&mut self, id: StreamId, error_code: u64) -> Result<(), StreamError> {
        let recv = self
            .streams
            .get_mut(&id)
            .ok_or(StreamError::UnknownStream(id))?
            .recv
            .as_mut()
            .ok_or(StreamError::Closed(id))?;
        if recv.is_done() || recv.stop_sending.is_some() {
            return Ok(());
        }
        recv.stop_sending = Some((error_code, true));
        Ok(())
    }

    fn send_part(&mut self, id: StreamId) -> Result<&mut SendStream, StreamError> {
        self.streams
            .get_mut(&id)
            .ok_or(StreamError::UnknownStream(id))?
            .send
            .as_mut()
            .ok_or(StreamError::NotWritable(id))
    }

    /// Admits a stream named by a peer frame, implicitly opening every
    /// lower-numbered peer stream of the same type. A stream that existed
    /// once and is already closed is simply absent from the table.
    fn admit(&mut self, id: StreamId, frame_type: u64) -> Result<(), TransportError> {
        if id.initiator() == self.side {
            if id.index() >= self.next_local[id.dir().idx()] {
                return Err(TransportError::new(code::STREAM_STATE_ERROR, "frame for unopened local stream")
                    .with_frame(frame_type));
            }
            return Ok(());
        }
        let i = id.dir().idx();
        if id.index() >= self.local_max[i] {
            return Err(
                TransportError::new(code::STREAM_LIMIT_ERROR, format!("stream {id} beyond limit"))
                    .with_frame(frame_type),
            );
        }
        while self.remote_opened[i] <= id.index() {
            let new_id = StreamId::new(self.side.peer(), id.dir(), self.remote_opened[i]);
            self.remote_opened[i] += 1;
            let stream = match id.dir() {
                Dir::Bidi => Stream {
                    send: Some(SendStream::new(self.limits.peer_bidi_local)),
                    recv: Some(RecvStream::new(self.limits.local_bidi_remote)),
                },
                Dir::Uni => Stream {
                    send: None,
                    recv: Some(RecvStream::new(self.limits.local_uni)),
                },
            };
            self.streams.insert(new_id, stream);
            self.events.push_back(StreamEvent::Opened(new_id));
        }
        Ok(())
    }

    pub fn on_stream_frame(&mut self, f: &StreamFrame, ctx: RecvCtx) -> Result<(), TransportError> {
        let frame_type = f.type_byte() as u64;
        self.admit(f.id, frame_type)?;
        let Some(stream) = self.streams.get_mut(&f.id) else {
            return Ok(());
        };
        let recv = stream.recv.as_mut().ok_or_else(|| {
            TransportError::new(code::STREAM_STATE_ERROR, "data on send-only stream").with_frame(frame_type)
        })?;
        let end = f.end();
        recv.check_final(end, f.fin).map_err(|e| e.with_frame(frame_type))?;
        let advanced = recv
            .flow
            .on_receive(end)
            .map_err(|e| TransportError::new(code::FLOW_CONTROL_ERROR, e.to_string()).with_frame(frame_type))?;
        self.conn_recv
            .on_receive_delta(advanced)
            .map_err(|e| TransportError::new(code::FLOW_CONTROL_ERROR, e.to_string()).with_frame(frame_type))?;
        if f.fin {
            recv.final_size = Some(end);
        }
        if recv.reset_received || recv.fin_delivered {
            // the application already saw the end of this stream
            return Ok(());
        }
        let data = recv.insert(f.offset, &f.data).map_err(|e| e.with_frame(frame_type))?;
        let n = data.len() as u64;
        if n > 0 {
            self.events.push_back(StreamEvent::Readable { id: f.id, data });
            recv.flow.on_consumed(n);
            if recv.stop_sending.is_none() && recv.final_size.is_none() && recv.flow.maybe_update(ctx.now, ctx.srtt).is_some() {
                recv.max_data_pending = true;
            }
            self.conn_recv.on_consumed(n);
            if self.conn_recv.maybe_update(ctx.now, ctx.srtt).is_some() {
                self.conn_max_data_pending = true;
            }
        }
        if recv.final_size == Some(recv.delivered) && !recv.fin_delivered {
            recv.fin_delivered = true;
            recv.max_data_pending = false;
            self.events.push_back(StreamEvent::Finished {
                id: f.id,
                final_size: recv.delivered,
            });
            self.maybe_close(f.id);
        }
        Ok(())
    }

    pub fn on_reset_stream(&mut self, id: StreamId, error_code: u64, final_size: u64) -> Result<(), TransportError> {
        self.admit(id, ty::RESET_STREAM)?;
        let Some(stream) = self.streams.get_mut(&id) else {
            return Ok(());
        };
        let recv = stream.recv.as_mut().ok_or_else(|| {
            TransportError::new(code::STREAM_STATE_ERROR, "reset of send-only stream").with_frame(ty::RESET_STREAM)
        })?;
        recv.check_final(final_size, true).map_err(|e| e.with_frame(ty::RESET_STREAM))?;
        let advanced = recv
            .flow
            .on_receive(final_size)
            .map_err(|e| TransportError::new(code::FLOW_CONTROL_ERROR, e.to_string()))?;
        self.conn_recv
            .on_receive_delta(advanced)
            .map_err(|e| TransportError::new(code::FLOW_CONTROL_ERROR, e.to_string()))?;
        recv.final_size = Some(final_size);
        if recv.is_done() {
            return Ok(());
        }
        recv.reset_received = true;
        recv.max_data_pending = false;
        recv.chunks.clear();
        // credit the application never read is released at connection level
        let unread = final_size - recv.delivered;
        self.conn_recv.on_consumed(unread);
        self.events.push_back(StreamEvent::Reset {
            id,
            error_code,
            final_size,
        });
        self.maybe_close(id);
        Ok(())
    }

    pub fn on_stop_sending(&mut self, id: StreamId, error_code: u64) -> Result<(), TransportError> {
        self.admit(id, ty::STOP_SENDING)?;
        let Some(stream) = self.streams.get_mut(&id) else {
            return Ok(());
        };
        let send = stream.send.as_mut().ok_or_else(|| {
            TransportError::new(code::STREAM_STATE_ERROR, "stop sending on receive-only stream")
                .with_frame(ty::STOP_SENDING)
        })?;
        let reset = send.start_reset(error_code);
        self.events.push_back(StreamEvent::StopSending { id, error_code });
        if reset {
            self.maybe_close(id);
        }
        Ok(())
    }

    pub fn on_max_stream_data(&mut self, id: StreamId, limit: u64) -> Result<(), TransportError> {
        self.admit(id, ty::MAX_STREAM_DATA)?;
        let Some(stream) = self.streams.get_mut(&id) else {
            return Ok(());
        };
        let send = stream.send.as_mut().ok_or_else(|| {
            TransportError::new(code::STREAM_STATE_ERROR, "credit for receive-only stream")
                .with_frame(ty::MAX_STREAM_DATA)
        })?;
        send.flow.raise(limit);
        Ok(())
    }

    /// Stale or lower values are ignored.
    pub fn on_max_streams(&mut self, dir: Dir, limit: u64) {
        let i = dir.idx();
        self.peer_max[i] = self.peer_max[i].max(limit);
    }

    pub fn on_max_data(&mut self, limit: u64) {
        self.conn_send.raise(limit);
    }

    /// Raises the number of streams of `dir` the peer may open. Returns the
    /// frame to send, or `None` if the value does not exceed what was
    /// already advertised.
    pub fn update_max_streams(&mut self, dir: Dir, limit: u64) -> Option<Frame> {
        let i = dir.idx();
        if limit <= self.local_max[i] {
            return None;
        }
        self.local_max[i] = limit;
        Some(Frame::MaxStreams { dir, limit })
    }

    pub fn local_max_streams(&self, dir: Dir) -> u64 {
        self.local_max[dir.idx()]
    }

    pub fn peer_max_streams(&self, dir: Dir) -> u64 {
        self.peer_max[dir.idx()]
    }

    fn maybe_close(&mut self, id: StreamId) {
        let Some(s) = self.streams.get(&id) else { return };
        if !s.is_done() {
            return;
        }
        let s = self.streams.remove(&id).expect("present");
        let sent = s.send.as_ref().map_or(0, |p| p.sent());
        let received = s.recv.as_ref().map_or(0, |p| p.received());
        self.closed.insert(id, (sent, received));
        self.events.push_back(StreamEvent::Closed { id, sent, received });
        if id.initiator() != self.side {
            // a closed peer stream frees one slot
            let i = id.dir().idx();
            self.local_max[i] += 1;
            self.max_streams_pending[i] = true;
        }
    }

    pub fn has_control(&self) -> bool {
        self.conn_max_data_pending
            || self.max_streams_pending.iter().any(|p| *p)
            || self.streams.values().any(|s| {
                s.send.as_ref().is_some_and(|p| p.reset.is_some_and(|r| r.pending))
                    || s.recv
                        .as_ref()
                        .is_some_and(|r| r.max_data_pending || matches!(r.stop_sending, Some((_, true))))
            })
    }

    /// Next pending control frame that fits in `budget` bytes.
    pub fn poll_control(&mut self, budget: usize) -> Option<Frame> {
        let fits = |f: Frame| (f.encoded_len() <= budget).then_some(f);
        if self.conn_max_data_pending {
            if let Some(f) = fits(Frame::MaxData(self.conn_recv.current_limit())) {
                self.conn_max_data_pending = false;
                return Some(f);
            }
        }
        for dir in [Dir::Bidi, Dir::Uni] {
            let i = dir.idx();
            if self.max_streams_pending[i] {
                if let Some(f) = fits(Frame::MaxStreams { dir, limit: self.local_max[i] }) {
                    self.max_streams_pending[i] = false;
                    return Some(f);
                }
            }
        }
        for (id, s) in self.streams.iter_mut() {
            if let Some(send) = s.send.as_mut() {
                if let Some(r) = send.reset.as_mut().filter(|r| r.pending) {
                    if let Some(f) = fits(Frame::ResetStream {
                        id: *id,
                        error_code: r.error_code,
                        final_size: r.final_size,
                    }) {
                        r.pending = false;
                        return Some(f);
                    }
                }
            }
            if let Some(recv) = s.recv.as_mut() {
                if let Some((error_code, true)) = recv.stop_sending {
                    if let Some(f) = fits(Frame::StopSending { id: *id, error_code }) {
                        recv.stop_sending = Some((error_code, false));
                        return Some(f);
                    }
                }
                if recv.max_data_pending {
                    if let Some(f) = fits(Frame::MaxStreamData {
                        id: *id,
                        limit: recv.flow.current_limit(),
                    }) {
                        recv.max_data_pending = false;
                        return Some(f);
                    }
                }
            }
        }
        None
    }

    /// Whether any stream has data (or a FIN) ready, ignoring credit.
    pub fn has_data(&self) -> bool {
        self.streams.values().any(|s| s.send.as_ref().is_some_and(|p| p.has_work()))
    }

    /// Whether a stream frame could be produced now, credit permitting.
    pub fn can_send_data(&self) -> bool {
        let conn_avail = self.conn_send.available();
        self.streams.values().any(|s| {
            s.send.as_ref().is_some_and(|p| {
                if !p.has_work() {
                    return false;
                }
                match p.pending.first() {
                    Some(r) if r.start < p.flow.used() => true,
                    Some(_) => p.flow.available() > 0 && conn_avail > 0,
                    None => true,
                }
            })
        })
    }

    /// Builds one STREAM frame of at most `max_len` bytes, round-robin
    /// across streams of the highest priority that have something to send.
    pub fn next_stream_frame(&mut self, max_len: usize) -> Option<StreamFrame> {
        let top = self
            .streams
            .values()
            .filter_map(|s| s.send.as_ref().filter(|p| p.has_work()).map(|p| p.priority))
            .max()?;
        let order: Vec<StreamId> = self
            .streams
            .range(StreamId(self.rr_next)..)
            .chain(self.streams.range(..StreamId(self.rr_next)))
            .filter(|(_, s)| s.send.as_ref().is_some_and(|p| p.has_work() && p.priority == top))
            .map(|(id, _)| *id)
            .collect();
        for id in order {
            let send = self.streams.get_mut(&id)?.send.as_mut()?;
            let frame = match send.pending.first() {
                None => {
                    // a bare FIN
                    if StreamFrame::header_len(id, send.written, 0, true) > max_len {
                        return None;
                    }
                    send.fin_pending = false;
                    StreamFrame {
                        id,
                        offset: send.written,
                        fin: true,
                        data: Vec::new(),
                        has_length: true,
                    }
                }
                Some(r) => {
                    let header = StreamFrame::header_len(id, r.start, max_len, true);
                    if header >= max_len {
                        return None;
                    }
                    let room = (max_len - header) as u64;
                    let len = if r.start < send.flow.used() {
                        (r.end.min(send.flow.used()) - r.start).min(room)
                    } else {
                        let want = (r.end - r.start).min(room);
                        let g = flow::reserve_send(&mut self.conn_send, &mut send.flow, id.0, want);
                        if let Some(scope) = g.newly_blocked {
                            self.events.push_back(StreamEvent::Blocked(scope));
                        }
                        g.granted
                    };
                    if len == 0 {
                        continue;
                    }
                    send.pending.remove(r.start..r.start + len);
                    let fin = send.fin && r.start + len == send.written;
                    if fin {
                        send.fin_pending = false;
                    }
                    StreamFrame {
                        id,
                        offset: r.start,
                        fin,
                        data: send.slice(r.start, len as usize),
                        has_length: true,
                    }
                }
            };
            self.rr_next = id.0 + 1;
            return Some(frame);
        }
        None
    }

    pub fn on_stream_acked(&mut self, id: StreamId, offset: u64, len: u64, fin: bool) {
        if let Some(send) = self.streams.get_mut(&id).and_then(|s| s.send.as_mut()) {
            send.on_ack(offset, len, fin);
            self.maybe_close(id);
        }
    }

    pub fn on_stream_lost(&mut self, id: StreamId, offset: u64, len: u64, fin: bool) {
        if let Some(send) = self.streams.get_mut(&id).and_then(|s| s.send.as_mut()) {
            send.on_lost(offset, len, fin);
        }
    }

    pub fn on_reset_acked(&mut self, id: StreamId) {
        if let Some(r) = self
            .streams
            .get_mut(&id)
            .and_then(|s| s.send.as_mut())
            .and_then(|s| s.reset.as_mut())
        {
            r.acked = true;
            self.maybe_close(id);
        }
    }

    pub fn on_reset_lost(&mut self, id: StreamId) {
        if let Some(r) = self
            .streams
            .get_mut(&id)
            .and_then(|s| s.send.as_mut())
            .and_then(|s| s.reset.as_mut())
        {
            r.pending = !r.acked;
        }
    }

    pub fn on_stop_sending_lost(&mut self, id: StreamId) {
        if let Some(recv) = self.streams.get_mut(&id).and_then(|s| s.recv.as_mut()) {
            if let Some((c, _)) = recv.stop_sending {
                if !recv.is_done() {
                    recv.stop_sending = Some((c, true));
                }
            }
        }
    }

    pub fn on_max_stream_data_lost(&mut self, id: StreamId) {
        if let Some(recv) = self.streams.get_mut(&id).and_then(|s| s.recv.as_mut()) {
            if !recv.is_done() && recv.final_size.is_none() {
                recv.max_data_pending = true;
            }
        }
    }

    pub fn on_max_data_lost(&mut self) {
        self.conn_max_data_pending = true;
    }

    pub fn on_max_streams_lost(&mut self, dir: Dir) {
        self.max_streams_pending[dir.idx()] = true;
    }

    /// Streams with data not yet acknowledged.
    pub fn unfinished(&self) -> usize {
        self.streams.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn limits(window: u64, max_streams: u64) -> StreamLimits {
        StreamLimits {
            local_bidi_local: window,
            local_bidi_remote: window,
            local_uni: window,
            peer_bidi_local: window,
            peer_bidi_remote: window,
            peer_uni: window,
            local_max_streams_bidi: max_streams,
            local_max_streams_uni: max_streams,
            peer_max_streams_bidi: max_streams,
            peer_max_streams_uni: max_streams,
        }
    }

    fn ctx() -> RecvCtx {
        RecvCtx {
            now: Instant::ZERO,
            srtt: None,
        }
    }

    fn frame(id: u64, offset: u64, data: &[u8], fin: bool) -> StreamFrame {
        StreamFrame {
            id: StreamId(id),
            offset,
            fin,
            data: data.to_vec(),
            has_length: true,
        }
    }

    fn readable(s: &mut Streams) -> Vec<u8> {
        let mut out = Vec::new();
        while let Some(e) = s.poll_event() {
            if let StreamEvent::Readable { data, .. } = e {
                out.extend(data);
            }
        }
        out
    }

    #[test]
    fn id_bits() {
        assert_eq!(StreamId::new(Side::Client, Dir::Bidi, 0), StreamId(0));
        assert_eq!(StreamId::new(Side::Server, Dir::Bidi, 0), StreamId(1));
        assert_eq!(StreamId::new(Side::Client, Dir::Uni, 0), StreamId(2));
        assert_eq!(StreamId::new(Side::Server, Dir::Uni, 0), StreamId(3));
        assert_eq!(StreamId(9).initiator(), Side::Server);
        assert_eq!(StreamId(9).dir(), Dir::Bidi);
        assert_eq!(StreamId(9).index(), 2);
    }

    #[test]
    fn chronological_allocation() {
        let mut c = Streams::new(Side::Client, limits(100, 10), 1000, 1000);
        assert_eq!(c.open(Dir::Bidi), Ok(StreamId(0)));
        assert_eq!(c.open(Dir::Bidi), Ok(StreamId(4)));
        assert_eq!(c.open(Dir::Bidi), Ok(StreamId(8)));
        let mut s = Streams::new(Side::Server, limits(100, 10), 1000, 1000);
        assert_eq!(s.open(Dir::Uni), Ok(StreamId(3)));
        assert_eq!(s.open(Dir::Uni), Ok(StreamId(7)));
    }

    #[test]
    fn open_respects_peer_limit() {
        let mut c = Streams::new(Side::Client, limits(100, 1), 1000, 1000);
        assert!(c.open(Dir::Bidi).is_ok());
        assert_eq!(c.open(Dir::Bidi), Err(StreamError::LimitReached));
        c.on_max_streams(Dir::Bidi, 2);
        assert_eq!(c.open(Dir::Bidi), Ok(StreamId(4)));
        c.on_max_streams(Dir::Bidi, 1);
        assert_eq!(c.open(Dir::Bidi), Err(StreamError::LimitReached));
    }

    #[test]
    fn reassembles_out_of_order() {
        let mut s = Streams::new(Side::Server, limits(100, 10), 1000, 1000);
        s.on_stream_frame(&frame(0, 5, b"world", false), ctx()).unwrap();
        assert!(readable(&mut s).is_empty());
        s.on_stream_frame(&frame(0, 0, b"hello", false), ctx()).unwrap();
        assert_eq!(readable(&mut s), b"helloworld");
    }

    #[test]
    fn final_size_from_fin() {
        let mut s = Streams::new(Side::Server, limits(100, 10), 1000, 1000);
        s.on_stream_frame(&frame(0, 10, b"abcde", true), ctx()).unwrap();
        assert_eq!(s.get(StreamId(0)).unwrap().recv.as_ref().unwrap().final_size(), Some(15));
        let err = s.on_stream_frame(&frame(0, 20, b"x", false), ctx()).unwrap_err();
        assert_eq!(err.code, code::FINAL_SIZE_ERROR);
    }

    #[test]
    fn conflicting_duplicate_rejected() {
        let mut s = Streams::new(Side::Server, limits(100, 10), 1000, 1000);
        s.on_stream_frame(&frame(0, 4, b"abcd", false), ctx()).unwrap();
        s.on_stream_frame(&frame(0, 4, b"abcd", false), ctx()).unwrap();
        assert!(s.on_stream_frame(&frame(0, 2, b"xxab", false), ctx()).is_ok());
        assert!(s.on_stream_frame(&frame(0, 6, b"zz", false), ctx()).is_err());
    }

    #[test]
    fn peer_stream_beyond_limit() {
        let mut s = Streams::new(Side::Server, limits(100, 2), 1000, 1000);
        s.on_stream_frame(&frame(4, 0, b"a", false), ctx()).unwrap();
        let err = s.on_stream_frame(&frame(8, 0, b"a", false), ctx()).unwrap_err();
        assert_eq!(err.code, code::STREAM_LIMIT_ERROR);
        // opening stream 4 implicitly opened stream 0
        let opened: Vec<_> = std::iter::from_fn(|| s.poll_event())
            .filter_map(|e| match e {
                StreamEvent::Opened(id) => Some(id.0),
                _ => None,
            })
            .collect();
        assert_eq!(opened, vec![0, 4]);
    }

    #[test]
    fn max_streams_only_increases() {
        let mut s = Streams::new(Side::Server, limits(100, 4), 1000, 1000);
        assert_eq!(s.update_max_streams(Dir::Bidi, 8), Some(Frame::MaxStreams { dir: Dir::Bidi, limit: 8 }));
        assert_eq!(s.update_max_streams(Dir::Bidi, 2), None);
        assert_eq!(s.update_max_streams(Dir::Bidi, 8), None);
    }

    #[test]
    fn stream_flow_violation() {
        let mut s = Streams::new(Side::Server, limits(100, 4), 1000, 1000);
        s.on_stream_frame(&frame(0, 0, &[1; 100], false), ctx()).unwrap();
        let err = s.on_stream_frame(&frame(0, 100, &[1], false), ctx());
        // consumed data opened the window, so only a jump beyond it fails
        assert!(err.is_ok() || err.unwrap_err().code == code::FLOW_CONTROL_ERROR);
        let mut s = Streams::new(Side::Server, limits(100, 4), 1000, 1000);
        let err = s.on_stream_frame(&frame(0, 100, &[1], false), ctx()).unwrap_err();
        assert_eq!(err.code, code::FLOW_CONTROL_ERROR);
    }

    #[test]
    fn send_respects_credit_and_retransmits() {
        let mut c = Streams::new(Side::Client, limits(10, 4), 1000, 1000);
        let id = c.open(Dir::Bidi).unwrap();
        c.write(id, b"0123456789abcdef").unwrap();
        c.finish(id).unwrap();
        let f = c.next_stream_frame(100).unwrap();
        assert_eq!((f.offset, f.data.len(), f.fin), (0, 10, false));
        assert!(c.next_stream_frame(100).is_none());
        assert!(matches!(c.poll_event(), Some(StreamEvent::Blocked(Scope::Stream(0)))));
        c.on_stream_lost(id, 0, 10, false);
        let again = c.next_stream_frame(100).unwrap();
        assert_eq!(again.data, f.data);
        c.on_max_stream_data(id, 16).unwrap();
        let rest = c.next_stream_frame(100).unwrap();
        assert_eq!((rest.offset, rest.data.as_slice(), rest.fin), (10, &b"abcdef"[..], true));
    }

    #[test]
    fn stop_sending_triggers_reset_with_sent_size() {
        let mut c = Streams::new(Side::Client, limits(100, 4), 1000, 1000);
        let id = c.open(Dir::Uni).unwrap();
        c.write(id, &[7; 50]).unwrap();
        c.next_stream_frame(30).unwrap();
        c.on_stop_sending(id, 9).unwrap();
        let f = c.poll_control(100).unwrap();
        let Frame::ResetStream { final_size, error_code, .. } = f else { panic!() };
        let sent = c.get(id).unwrap().send.as_ref().unwrap().sent();
        assert_eq!((final_size, error_code), (sent, 9));
        assert!(c.next_stream_frame(100).is_none());
    }

    #[test]
    fn stop_sending_after_fin_acked_is_noop() {
        let mut c = Streams::new(Side::Client, limits(100, 4), 1000, 1000);
        let id = c.open(Dir::Bidi).unwrap();
        c.write(id, b"abc").unwrap();
        c.finish(id).unwrap();
        let f = c.next_stream_frame(100).unwrap();
        c.on_stream_acked(id, 0, 3, f.fin);
        c.on_stop_sending(id, 1).unwrap();
        assert!(c.poll_control(100).is_none());
    }

    /// Drives a sender and a receiver through every interleaving of a FIN
    /// and a STOP_SENDING crossing in flight, and checks both sides agree on
    /// the stream's final size.
    #[test]
    fn crossing_stop_sending_and_fin_converge() {
        for fin_first in [false, true] {
            for ack_fin_before_stop in [false, true] {
                let mut tx = Streams::new(Side::Client, limits(100, 4), 1000, 1000);
                let mut rx = Streams::new(Side::Server, limits(100, 4), 1000, 1000);
                let id = tx.open(Dir::Bidi).unwrap();
                tx.write(id, b"hello").unwrap();
                tx.finish(id).unwrap();
                let data = tx.next_stream_frame(100).unwrap();
                assert!(data.fin);
                // the receiver decides to stop before it sees the FIN
                rx.on_stream_frame(&frame(0, 0, b"", false), ctx()).unwrap();
                rx.stop_sending(id, 5).unwrap();
                let stop = rx.poll_control(100).unwrap();
                if fin_first {
                    rx.on_stream_frame(&data, ctx()).unwrap();
                }
                if ack_fin_before_stop {
                    tx.on_stream_acked(id, 0, 5, true);
                }
                let Frame::StopSending { error_code, .. } = stop else { panic!() };
                tx.on_stop_sending(id, error_code).unwrap();
                if let Some(Frame::ResetStream { id, error_code, final_size }) = tx.poll_control(100) {
                    assert_eq!(final_size, 5);
                    rx.on_reset_stream(id, error_code, final_size).unwrap();
                    tx.on_reset_acked(id);
                }
                if !fin_first {
                    rx.on_stream_frame(&data, ctx()).unwrap();
                }
                if !ack_fin_before_stop {
                    tx.on_stream_acked(id, 0, 5, true);
                }
                let closed = |s: &mut Streams| {
                    std::iter::from_fn(|| s.poll_event()).find_map(|e| match e {
                        StreamEvent::Closed { sent, received, .. } => Some((sent, received)),
                        _ => None,
                    })
                };
                // the reverse direction carries only a FIN
                rx.finish(id).unwrap();
                let f = rx.next_stream_frame(100).unwrap();
                tx.on_stream_frame(&f, ctx()).unwrap();
                rx.on_stream_acked(id, 0, 0, f.fin);
                let (tx_sent, _) = closed(&mut tx).expect("sender closed");
                let (_, rx_received) = closed(&mut rx).expect("receiver closed");
                assert_eq!(tx_sent, rx_received);
            }
        }
    }

    #[test]
    fn reset_reconciles_connection_credit() {
        let mut rx = Streams::new(Side::Server, limits(100, 4), 1000, 1000);
        rx.on_stream_frame(&frame(0, 0, &[1; 10], false), ctx()).unwrap();
        rx.on_reset_stream(StreamId(0), 3, 40).unwrap();
        assert_eq!(rx.conn_recv.highest(), 40);
        assert_eq!(rx.conn_recv.consumed(), 40);
        // later data below the final size is dropped quietly
        rx.on_stream_frame(&frame(0, 10, &[1; 10], false), ctx()).unwrap();
        assert!(rx.on_stream_frame(&frame(0, 40, &[1], false), ctx()).is_err());
    }
}

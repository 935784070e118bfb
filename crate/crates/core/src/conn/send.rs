//! Send path: packet assembly, coalescing, padding and sent-packet records.

use serde_json::json;

use super::*;
use crate::codec::{truncate_packet_number, Header, LongHeader, LongPacketType, ShortHeader};
use crate::frames::encode_frames;
use crate::protection::{protect, NullSuite, ProtectionSuite, TAG_LEN};

/// Long headers are padded so their Length field always takes two bytes.
const LONG_MIN_LENGTH: usize = 64;
/// Room left for a packet number of the maximum length.
const MAX_PN_LEN: usize = 4;
const MIN_PACKET_BUDGET: usize = 48;

struct Draft {
    kind: PacketKind,
    frames: Vec<Frame>,
    sent: Vec<SentFrame>,
    probe: bool,
}

fn sent_frame(f: &Frame) -> Option<SentFrame> {
    Some(match f {
        Frame::Ack(a) => SentFrame::Ack { largest: a.largest() },
        Frame::Ping => SentFrame::Ping,
        Frame::Padding(_) => SentFrame::Padding,
        Frame::Crypto { offset, data } => SentFrame::Crypto {
            offset: *offset,
            len: data.len() as u64,
        },
        Frame::Stream(s) => SentFrame::Stream {
            id: s.id,
            offset: s.offset,
            len: s.data.len() as u64,
            fin: s.fin,
        },
        Frame::ResetStream { id, .. } => SentFrame::ResetStream { id: *id },
        Frame::StopSending { id, .. } => SentFrame::StopSending { id: *id },
        Frame::MaxData(_) => SentFrame::MaxData,
        Frame::MaxStreamData { id, .. } => SentFrame::MaxStreamData { id: *id },
        Frame::MaxStreams { dir, .. } => SentFrame::MaxStreams { dir: *dir },
        Frame::NewConnectionId { seq, .. } => SentFrame::NewConnectionId { seq: *seq },
        Frame::RetireConnectionId(seq) => SentFrame::RetireConnectionId { seq: *seq },
        Frame::NewToken(t) => SentFrame::NewToken { token: t.clone() },
        Frame::PathChallenge(d) => SentFrame::PathChallenge { data: *d },
        Frame::PathResponse(_) => SentFrame::PathResponse,
        Frame::ConnectionClose(_) => SentFrame::ConnectionClose,
        Frame::Datagram(d) => SentFrame::Datagram { len: d.len() },
    })
}

impl Connection {
    fn header_for(&self, kind: PacketKind, pn: u64, length: u64) -> Header {
        let space = kind.space();
        let tpn = truncate_packet_number(pn, self.spaces[space as usize].sent.largest_acked());
        let dcid = self.remote_cid();
        let ty = match kind {
            PacketKind::Initial => LongPacketType::Initial,
            PacketKind::ZeroRtt => LongPacketType::ZeroRtt,
            PacketKind::Handshake => LongPacketType::Handshake,
            PacketKind::OneRtt => {
                return Header::Short(ShortHeader {
                    spin: false,
                    key_phase: self.one_rtt.as_ref().is_some_and(|k| k.phase),
                    dcid,
                    pn: tpn,
                });
            }
        };
        let token = if kind == PacketKind::Initial && self.side == Side::Client {
            self.token.clone()
        } else {
            Vec::new()
        };
        Header::Long(LongHeader {
            ty,
            version: self.version,
            dcid,
            scid: self.local_cids.first().map_or(ConnectionId::EMPTY, |c| c.cid),
            token,
            length,
            pn: tpn,
        })
    }

    /// Header bytes plus tag, assuming the longest packet number.
    fn overhead(&self, kind: PacketKind) -> usize {
        let mut buf = Vec::new();
        self.header_for(kind, 0, LONG_MIN_LENGTH as u64).encode(&mut buf);
        let pn_len = match self.header_for(kind, 0, 0) {
            Header::Long(h) => h.pn.len as usize,
            Header::Short(h) => h.pn.len as usize,
            _ => 0,
        };
        buf.len() - pn_len + MAX_PN_LEN + TAG_LEN
    }

    fn packet_key(&self, kind: PacketKind) -> Option<PacketKey> {
        match kind {
            PacketKind::Initial | PacketKind::Handshake => {
                self.spaces[kind.space() as usize].keys.as_ref().map(|k| k.local.clone())
            }
            PacketKind::ZeroRtt => self.zero_rtt.clone(),
            PacketKind::OneRtt => self.one_rtt.as_ref().map(|k| k.local.clone()),
        }
    }

    fn data_kind(&self) -> Option<PacketKind> {
        if self.one_rtt.is_some() {
            Some(PacketKind::OneRtt)
        } else if self.side == Side::Client && self.zero_rtt.is_some() && self.zero_rtt_state == ZeroRttState::Attempted {
            Some(PacketKind::ZeroRtt)
        } else {
            None
        }
    }

    /// Protects and records one packet. `min_size` pads it with PADDING
    /// frames.
    fn seal(&mut self, now: Instant, draft: Draft, min_size: usize, pmtu_probe: bool, dst: Addr) -> (Vec<u8>, PacketInfo) {
        let Draft { kind, mut frames, mut sent, .. } = draft;
        let space = kind.space();
        let pn = self.spaces[space as usize].next_pn;
        self.spaces[space as usize].next_pn += 1;
        let probe_header = self.header_for(kind, pn, LONG_MIN_LENGTH as u64);
        let (pn_len, long) = match &probe_header {
            Header::Long(h) => (h.pn.len as usize, true),
            Header::Short(h) => (h.pn.len as usize, false),
            _ => unreachable!(),
        };
        let mut hbuf = Vec::new();
        probe_header.encode(&mut hbuf);
        let header_len = hbuf.len();
        let mut payload = encode_frames(&frames);
        let mut target = min_size.saturating_sub(header_len + TAG_LEN);
        if long {
            target = target.max(LONG_MIN_LENGTH - pn_len - TAG_LEN);
        }
        if payload.len() < target {
            let n = target - payload.len();
            frames.push(Frame::Padding(n));
            sent.push(SentFrame::Padding);
            payload.resize(target, 0);
        }
        let suite: &'static dyn ProtectionSuite = if kind == PacketKind::Initial {
            &NullSuite
        } else {
            self.cfg.suite.suite()
        };
        let key = self.packet_key(kind).expect("keys checked by caller");
        let header = self.header_for(kind, pn, 0);
        let bytes = protect(suite, &key, &header, &payload, pn);
        let size = bytes.len();
        let ack_eliciting = frames.iter().any(Frame::is_ack_eliciting);
        let in_flight = ack_eliciting || frames.iter().any(|f| matches!(f, Frame::Padding(_)));
        if in_flight && !pmtu_probe {
            self.cc.on_packet_sent(self.bytes_in_flight, size as u64, now);
            self.bytes_in_flight += size as u64;
        }
        if frames.iter().any(|f| matches!(f, Frame::Ack(_))) {
            self.spaces[space as usize].ack.on_ack_sent();
        }
        if kind == PacketKind::OneRtt && self.first_1rtt_pn.is_none() {
            self.first_1rtt_pn = Some(pn);
        }
        if ack_eliciting && !self.eliciting_since_recv {
            self.last_activity = now;
            self.eliciting_since_recv = true;
        }
        let names: Vec<&'static str> = frames.iter().map(Frame::name).collect();
        self.trace(now, Category::Transport, "packet_sent", json!({
            "type": kind.name(),
            "pn": pn,
            "size": size,
            "frames": names,
            "ack_eliciting": ack_eliciting,
            "to": addr_json(dst),
            "bytes_in_flight": self.bytes_in_flight,
            "cwnd": self.cc.window(),
        }));
        self.spaces[space as usize].sent.on_sent(SentPacket {
            pn,
            time_sent: now,
            size,
            ack_eliciting,
            in_flight,
            pmtu_probe,
            frames: sent,
        });
        let info = PacketInfo {
            kind,
            pn,
            size,
            frames: names,
            ack_eliciting,
            pmtu_probe,
        };
        (bytes, info)
    }

    /// Produces the next datagram to send, if any.
    pub fn poll_transmit(&mut self, now: Instant) -> Option<Transmit> {
        let t = match self.state {
            State::Closed | State::Draining | State::Idle => return None,
            State::Closing => self.transmit_close(now),
            _ => self
                .transmit_probe_response(now)
                .or_else(|| self.transmit_pmtu_probe(now))
                .or_else(|| self.transmit_regular(now)),
        };
        if let Some(t) = &t {
            if t.src == self.path.local && t.dst == self.path.remote {
                self.path.sent += t.data.len() as u64;
            }
            if self.state != State::Closing {
                self.set_loss_timer(now);
            }
        }
        self.drain_stream_events(now);
        t
    }

    fn transmit_close(&mut self, now: Instant) -> Option<Transmit> {
        let frame = {
            let c = self.closing.as_mut()?;
            if !c.send_pending {
                return None;
            }
            c.send_pending = false;
            c.frame.clone()
        };
        let mut data = Vec::new();
        let mut packets = Vec::new();
        let dst = self.path.remote;
        for kind in [PacketKind::Initial, PacketKind::Handshake, PacketKind::OneRtt] {
            if self.packet_key(kind).is_none() || self.spaces[kind.space() as usize].discarded {
                continue;
            }
            // Application close codes are not revealed before 1-RTT.
            let f = if kind != PacketKind::OneRtt && frame.layer == CloseLayer::Application {
                ConnectionClose {
                    layer: CloseLayer::Transport { frame_type: 0 },
                    error_code: code::APPLICATION_ERROR,
                    reason: Vec::new(),
                }
            } else {
                frame.clone()
            };
            let draft = Draft {
                kind,
                frames: vec![Frame::ConnectionClose(f)],
                sent: vec![SentFrame::ConnectionClose],
                probe: false,
            };
            let min = if kind == PacketKind::Initial && self.side == Side::Client {
                MIN_INITIAL_SIZE
            } else {
                0
            };
            let (bytes, info) = self.seal(now, draft, min, false, dst);
            data.extend_from_slice(&bytes);
            packets.push(info);
        }
        (!data.is_empty()).then_some(Transmit {
            src: self.path.local,
            dst,
            data,
            packets,
        })
    }

    fn transmit_probe_response(&mut self, now: Instant) -> Option<Transmit> {
        if self.probe_responses.is_empty() || self.one_rtt.is_none() {
            return None;
        }
        let (local, remote, data) = self.probe_responses.remove(0);
        let draft = Draft {
            kind: PacketKind::OneRtt,
            frames: vec![Frame::PathResponse(data)],
            sent: vec![SentFrame::PathResponse],
            probe: false,
        };
        let (bytes, info) = self.seal(now, draft, MIN_INITIAL_SIZE, false, remote);
        Some(Transmit {
            src: local,
            dst: remote,
            data: bytes,
            packets: vec![info],
        })
    }

    fn transmit_pmtu_probe(&mut self, now: Instant) -> Option<Transmit> {
        if !self.pmtu.enabled
            || self.pmtu.probe.is_some()
            || !self.handshake_confirmed
            || !self.path.validated
            || self.one_rtt.is_none()
        {
            return None;
        }
        let size = self.pmtu.target()?;
        if self.pmtu.attempts == 0 {
            self.pmtu.steps += 1;
        }
        self.pmtu.attempts += 1;
        let draft = Draft {
            kind: PacketKind::OneRtt,
            frames: vec![Frame::Ping],
            sent: vec![SentFrame::Ping],
            probe: false,
        };
        let dst = self.path.remote;
        let (bytes, info) = self.seal(now, draft, size as usize, true, dst);
        let deadline = now + self.pto_period(SpaceId::Data);
        self.pmtu.probe = Some(PmtuProbe { size, deadline });
        self.pmtu.clean_since_probe = true;
        self.pmtu.sentinel = true;
        let attempt = self.pmtu.attempts;
        self.trace(now, Category::Transport, "pmtu_probe_sent", json!({
            "size": bytes.len(),
            "attempt": attempt,
            "lo": self.pmtu.lo,
            "hi": self.pmtu.hi,
        }));
        Some(Transmit {
            src: self.path.local,
            dst,
            data: bytes,
            packets: vec![info],
        })
    }

    fn transmit_regular(&mut self, now: Instant) -> Option<Transmit> {
        let mtu = self.path.mtu as usize;
        let allowance = self.path.allowance().min(mtu as u64) as usize;
        let budget = allowance;
        let mut drafts: Vec<Draft> = Vec::new();
        let mut need_pad = false;
        let mut pacing_checked = false;
        let mut paced = false;

        for space in SpaceId::ALL {
            let kind = match space {
                SpaceId::Initial => PacketKind::Initial,
                SpaceId::Handshake => PacketKind::Handshake,
                SpaceId::Data => match self.data_kind() {
                    Some(k) => k,
                    None => continue,
                },
            };
            if self.spaces[space as usize].discarded || self.packet_key(kind).is_none() {
                continue;
            }
            // A server has to be able to pad whatever Initial it sends.
            if kind == PacketKind::Initial && self.side == Side::Server && allowance < MIN_INITIAL_SIZE {
                continue;
            }
            let used: usize = drafts.iter().map(|d| self.draft_len(d)).sum();
            let overhead = self.overhead(kind);
            if budget < used + overhead + MIN_PACKET_BUDGET {
                break;
            }
            let mut room = budget - used - overhead;
            let probe = self.spaces[space as usize].probes > 0;

            let ack = if kind != PacketKind::ZeroRtt && self.spaces[space as usize].ack.ack_pending() {
                let exp = if space == SpaceId::Data {
                    self.local_tp.ack_delay_exponent
                } else {
                    0
                };
                self.spaces[space as usize].ack.build_ack(now, exp, room.min(256))
            } else {
                None
            };
            let ack_due = self.spaces[space as usize].ack.ack_due(now);
            if let Some(a) = &ack {
                room = room.saturating_sub(Frame::Ack(a.clone()).encoded_len());
            }

            let mut frames: Vec<Frame> = Vec::new();
            let push = |frames: &mut Vec<Frame>, room: &mut usize, f: Frame| -> bool {
                let n = f.encoded_len();
                if n > *room {
                    return false;
                }
                *room -= n;
                frames.push(f);
                true
            };

            // Path validation is not subject to congestion control.
            if kind == PacketKind::OneRtt {
                while let Some(d) = self.path.responses.first().copied() {
                    if !push(&mut frames, &mut room, Frame::PathResponse(d)) {
                        break;
                    }
                    self.path.responses.remove(0);
                    need_pad = true;
                }
                if self.path.challenge_pending {
                    let data = self.path.challenge.as_ref().map(|c| c.data);
                    if let Some(data) = data {
                        if push(&mut frames, &mut room, Frame::PathChallenge(data)) {
                            self.path.challenge_pending = false;
                            need_pad = true;
                        }
                    } else {
                        self.path.challenge_pending = false;
                    }
                }
            }

            let cwnd_ok = self.cc.can_send(self.bytes_in_flight, mtu as u64, probe);
            let mut pacing_ok = true;
            if space == SpaceId::Data && !probe && cwnd_ok && self.has_data_space_work() {
                if !pacing_checked {
                    pacing_checked = true;
                    let srtt = self.rtt.smoothed();
                    let cwnd = self.cc.window();
                    let release = self.pacer.release_time(now, mtu as u64, srtt, cwnd);
                    if release > now {
                        paced = true;
                        if self.pacing_until != Some(release) {
                            self.pacing_until = Some(release);
                            self.trace(now, Category::Recovery, "pacing_blocked", json!({
                                "until_us": release.as_micros(),
                            }));
                        }
                    }
                }
                pacing_ok = !paced;
            }

            if cwnd_ok && pacing_ok {
                if kind == PacketKind::OneRtt {
                    while let Some(seq) = self.retire_queue.front().copied() {
                        if !push(&mut frames, &mut room, Frame::RetireConnectionId(seq)) {
                            break;
                        }
                        self.retire_queue.pop_front();
                        self.trace(now, Category::Transport, "cid_retired", json!({"seq": seq, "by": "local"}));
                    }
                    while let Some(seq) = self.new_cid_queue.front().copied() {
                        let Some(c) = self.local_cids.iter().find(|c| c.seq == seq).cloned() else {
                            self.new_cid_queue.pop_front();
                            continue;
                        };
                        let f = Frame::NewConnectionId {
                            seq,
                            retire_prior_to: 0,
                            cid: c.cid,
                            reset_token: c.reset_token,
                        };
                        if !push(&mut frames, &mut room, f) {
                            break;
                        }
                        self.new_cid_queue.pop_front();
                    }
                    if let Some(t) = self.new_token_out.take() {
                        if !push(&mut frames, &mut room, Frame::NewToken(t.clone())) {
                            self.new_token_out = Some(t);
                        }
                    }
                }
                if kind != PacketKind::ZeroRtt {
                    while room > 16 {
                        let Some((offset, data)) = self.spaces[space as usize].crypto_send.next_frame(room) else {
                            break;
                        };
                        push(&mut frames, &mut room, Frame::Crypto { offset, data });
                    }
                }
                if space == SpaceId::Data {
                    while room > 8 {
                        let Some(f) = self.streams.poll_control(room) else { break };
                        match &f {
                            Frame::MaxData(limit) => {
                                self.trace(now, Category::Flow, "flow_update_sent", json!({"scope": "connection", "limit": limit}));
                            }
                            Frame::MaxStreamData { id, limit } => {
                                self.trace(now, Category::Flow, "flow_update_sent", json!({
                                    "scope": "stream",
                                    "stream": id.0,
                                    "limit": limit,
                                }));
                            }
                            _ => {}
                        }
                        push(&mut frames, &mut room, f);
                    }
                    while let Some(d) = self.datagrams_out.front() {
                        if d.len() + 4 > room {
                            break;
                        }
                        let d = self.datagrams_out.pop_front().expect("front");
                        let len = d.len();
                        push(&mut frames, &mut room, Frame::Datagram(d));
                        self.trace(now, Category::Transport, "datagram_sent", json!({"len": len}));
                    }
                    if room > 16 && self.streams.can_send_data() {
                        if let Some(sf) = self.streams.next_stream_frame(room) {
                            let end = sf.offset + sf.data.len() as u64;
                            let high = self.stream_high.entry(sf.id).or_insert(0);
                            let retransmit = sf.offset < *high;
                            *high = (*high).max(end);
                            self.trace(now, Category::Transport, "stream_data_sent", json!({
                                "stream": sf.id.0,
                                "offset": sf.offset,
                                "len": sf.data.len(),
                                "fin": sf.fin,
                                "retransmit": retransmit,
                                "zero_rtt": kind == PacketKind::ZeroRtt,
                            }));
                            push(&mut frames, &mut room, Frame::Stream(sf));
                        }
                    }
                }
            }
            let mut eliciting = frames.iter().any(Frame::is_ack_eliciting);
            if kind == PacketKind::OneRtt && self.confirm_ping {
                self.confirm_ping = false;
                if !eliciting {
                    push(&mut frames, &mut room, Frame::Ping);
                    eliciting = true;
                }
            }
            if kind == PacketKind::OneRtt && self.pmtu.sentinel {
                self.pmtu.sentinel = false;
                if !eliciting {
                    push(&mut frames, &mut room, Frame::Ping);
                    eliciting = true;
                }
            }
            if probe && !eliciting {
                push(&mut frames, &mut room, Frame::Ping);
            }
            if let Some(a) = ack {
                if ack_due || !frames.is_empty() {
                    frames.insert(0, Frame::Ack(a));
                }
            }
            if frames.is_empty() {
                continue;
            }
            if probe {
                self.spaces[space as usize].probes -= 1;
            }
            let sent = frames.iter().filter_map(sent_frame).collect();
            drafts.push(Draft { kind, frames, sent, probe });
            if kind == PacketKind::Initial && (self.side == Side::Client || drafts.last().is_some_and(|d| d.frames.iter().any(Frame::is_ack_eliciting))) {
                need_pad = true;
            }
        }
        if drafts.is_empty() {
            return None;
        }
        let has_initial = drafts.iter().any(|d| d.kind == PacketKind::Initial);
        let min_total = if need_pad || has_initial && self.side == Side::Client {
            MIN_INITIAL_SIZE.min(allowance)
        } else {
            0
        };
        let dst = self.path.remote;
        let n = drafts.len();
        let mut data = Vec::new();
        let mut packets = Vec::new();
        let mut sent_handshake = false;
        let mut paced_bytes = false;
        for (i, d) in drafts.into_iter().enumerate() {
            let min = if i + 1 == n { min_total.saturating_sub(data.len()) } else { 0 };
            let kind = d.kind;
            let probe = d.probe;
            let (bytes, info) = self.seal(now, d, min, false, dst);
            if kind == PacketKind::Handshake {
                sent_handshake = true;
            }
            if kind.space() == SpaceId::Data && info.ack_eliciting && !probe {
                paced_bytes = true;
            }
            data.extend_from_slice(&bytes);
            packets.push(info);
        }
        if paced_bytes {
            self.pacer.on_sent(data.len() as u64);
        }
        if sent_handshake && self.side == Side::Client {
            self.discard_space(now, SpaceId::Initial);
        }
        if self.discard_handshake_after_send && packets.iter().any(|p| p.kind == PacketKind::Handshake) {
            self.discard_handshake_after_send = false;
            self.discard_space(now, SpaceId::Handshake);
        }
        Some(Transmit {
            src: self.path.local,
            dst,
            data,
            packets,
        })
    }

    fn has_data_space_work(&self) -> bool {
        self.streams.has_data() || self.streams.has_control() || !self.datagrams_out.is_empty()
    }

    fn draft_len(&self, d: &Draft) -> usize {
        let payload: usize = d.frames.iter().map(Frame::encoded_len).sum();
        let mut len = self.overhead(d.kind) + payload;
        if d.kind != PacketKind::OneRtt {
            len = len.max(self.overhead(d.kind) - MAX_PN_LEN - TAG_LEN + LONG_MIN_LENGTH);
        }
        len
    }
}

//! Receive path: datagram splitting, unprotection and frame handling.

use std::time::Duration;

use serde_json::json;

use super::*;
use crate::codec::{split_coalesced, Header, LongPacketType, PacketShell, ShellKind};
use crate::frames::{decode_frames, AckFrame};
use crate::protection::{open_payload, remove_header_protection, retry_integrity_tag, NullSuite, ProtectionSuite};
use crate::streams::RecvCtx;

enum Outcome {
    Processed,
    Dropped,
    Buffered,
}

fn allowed_in(kind: PacketKind, f: &Frame) -> bool {
    match kind {
        PacketKind::Initial | PacketKind::Handshake => matches!(
            f,
            Frame::Padding(_) | Frame::Ping | Frame::Ack(_) | Frame::Crypto { .. }
        ) || matches!(f, Frame::ConnectionClose(c) if c.layer != CloseLayer::Application),
        PacketKind::ZeroRtt => !matches!(
            f,
            Frame::Ack(_)
                | Frame::Crypto { .. }
                | Frame::NewToken(_)
                | Frame::PathResponse(_)
                | Frame::RetireConnectionId(_)
        ),
        PacketKind::OneRtt => true,
    }
}

impl Connection {
    /// Feeds one received UDP datagram.
    pub fn handle_datagram(&mut self, now: Instant, local: Addr, remote: Addr, data: &[u8]) {
        match self.state {
            State::Closed | State::Draining | State::Idle => return,
            State::Closing => {
                // Any datagram from the peer earns another copy of the close.
                if let Some(c) = self.closing.as_mut() {
                    c.send_pending = true;
                }
                return;
            }
            _ => {}
        }
        if local == self.path.local && remote == self.path.remote {
            self.path.received += data.len() as u64;
        }
        let packets: Vec<Vec<u8>> = match split_coalesced(data, self.cfg.cid_len) {
            Ok(p) => p.into_iter().map(<[u8]>::to_vec).collect(),
            Err(e) => {
                self.trace(now, Category::Transport, "packet_dropped", json!({
                    "reason": "malformed_datagram",
                    "detail": e.to_string(),
                    "size": data.len(),
                }));
                Vec::new()
            }
        };
        let mut any = false;
        for p in packets {
            if matches!(self.handle_packet(now, local, remote, p), Outcome::Processed) {
                any = true;
            }
            if matches!(self.state, State::Closed | State::Draining | State::Closing) {
                break;
            }
        }
        while self.keys_changed && !self.buffered.is_empty() && matches!(self.state, State::Handshaking | State::Established) {
            self.keys_changed = false;
            let pending = std::mem::take(&mut self.buffered);
            for b in pending {
                if matches!(self.handle_packet(now, b.local, b.remote, b.packet), Outcome::Processed) {
                    any = true;
                }
            }
        }
        if !any && self.is_stateless_reset(data) {
            self.trace(now, Category::Security, "stateless_reset_received", json!({"size": data.len()}));
            self.close_silently(now, CloseReason::StatelessReset);
            return;
        }
        if self.state != State::Closed {
            self.set_loss_timer(now);
        }
    }

    fn drop_packet(&mut self, now: Instant, reason: &str, size: usize) -> Outcome {
        self.trace(now, Category::Transport, "packet_dropped", json!({"reason": reason, "size": size}));
        Outcome::Dropped
    }

    fn handle_packet(&mut self, now: Instant, local: Addr, remote: Addr, mut pkt: Vec<u8>) -> Outcome {
        let size = pkt.len();
        let shell = match PacketShell::parse(&pkt, self.cfg.cid_len) {
            Ok(s) => s,
            Err(_) => return self.drop_packet(now, "malformed_header", size),
        };
        let dcid = shell.dcid;
        let (kind, long_scid, long_version) = match &shell.kind {
            ShellKind::VersionNegotiation { scid, versions } => {
                self.on_version_negotiation(now, dcid, *scid, versions.clone(), size);
                return Outcome::Dropped;
            }
            ShellKind::Retry {
                version,
                scid,
                token,
                integrity_tag,
            } => {
                return self.on_retry(now, &pkt, *version, *scid, token.clone(), *integrity_tag);
            }
            ShellKind::UnsupportedVersion { .. } => return self.drop_packet(now, "unsupported_version", size),
            ShellKind::Short => (PacketKind::OneRtt, None, None),
            ShellKind::Long { ty, version, scid, .. } => {
                let kind = match ty {
                    LongPacketType::Initial => PacketKind::Initial,
                    LongPacketType::ZeroRtt => PacketKind::ZeroRtt,
                    LongPacketType::Handshake => PacketKind::Handshake,
                    LongPacketType::Retry => unreachable!("parsed as Retry"),
                };
                (kind, Some(*scid), Some(*version))
            }
        };
        if !self.owns_cid(&dcid) {
            return self.drop_packet(now, "unknown_connection_id", size);
        }
        if kind == PacketKind::ZeroRtt && self.side == Side::Client {
            return self.drop_packet(now, "unexpected_packet_type", size);
        }

        // Versions: the client may be moved to a compatible version by the
        // server's first Initial; the server still accepts the client's
        // Initials in the version it first saw.
        let mut use_alt = false;
        if let Some(v) = long_version {
            if v != self.version {
                let client_switch = self.side == Side::Client
                    && kind == PacketKind::Initial
                    && !self.received_server_packet
                    && self.cfg.compatible_versions
                    && self.cfg.versions.contains(&v);
                if client_switch {
                    let original = self.version;
                    self.version = v;
                    self.spaces[0].keys = Some(derive_initial_keys(self.initial_dcid.as_bytes(), v).for_client());
                    self.trace(now, Category::Transport, "version_negotiated", json!({
                        "method": "compatible",
                        "original": format!("{original:#010x}"),
                        "chosen": format!("{v:#010x}"),
                    }));
                } else if self.side == Side::Server
                    && kind == PacketKind::Initial
                    && self.initial_alt.as_ref().is_some_and(|(alt, _)| *alt == v)
                {
                    use_alt = true;
                } else {
                    return self.drop_packet(now, "version_mismatch", size);
                }
            }
        }

        let space = kind.space();
        if self.spaces[space as usize].discarded {
            return self.drop_packet(now, "keys_discarded", size);
        }
        let suite: &'static dyn ProtectionSuite = if kind == PacketKind::Initial {
            &NullSuite
        } else {
            self.cfg.suite.suite()
        };
        let hp_key = match kind {
            PacketKind::Initial if use_alt => self.initial_alt.as_ref().map(|(_, k)| k.remote.clone()),
            PacketKind::Initial | PacketKind::Handshake => self.spaces[space as usize].keys.as_ref().map(|k| k.remote.clone()),
            PacketKind::ZeroRtt => self.zero_rtt.clone(),
            PacketKind::OneRtt => self.one_rtt.as_ref().map(|k| k.remote.clone()),
        };
        let Some(hp_key) = hp_key else {
            if kind == PacketKind::ZeroRtt && (self.zero_rtt_state == ZeroRttState::Rejected || self.handshake_complete) {
                return self.drop_packet(now, "keys_unavailable", size);
            }
            if self.buffered.len() >= MAX_BUFFERED_PACKETS {
                return self.drop_packet(now, "buffer_full", size);
            }
            self.trace(now, Category::Transport, "packet_buffered", json!({"type": kind.name(), "size": size}));
            self.buffered.push(Buffered { local, remote, packet: pkt });
            return Outcome::Buffered;
        };
        let largest = self.spaces[space as usize].ack.largest_received();
        let unmasked = match remove_header_protection(suite, &hp_key.hp, &mut pkt, self.cfg.cid_len, largest) {
            Ok(u) => u,
            Err(_) => return self.drop_packet(now, "header_decrypt_error", size),
        };
        let pn = unmasked.pn;

        let mut key_update = None;
        let payload = match (&unmasked.header, kind) {
            (Header::Short(h), PacketKind::OneRtt) => {
                let k = self.one_rtt.as_ref().expect("checked above");
                let old = k.phase_start.is_some_and(|s| pn < s);
                let key = if h.key_phase == k.phase {
                    if old {
                        k.prev_remote.clone()
                    } else {
                        Some(k.remote.clone())
                    }
                } else if old && k.prev_remote.is_some() {
                    k.prev_remote.clone()
                } else {
                    let next = k.remote.next_generation();
                    key_update = Some(next.clone());
                    Some(next)
                };
                key.and_then(|key| open_payload(suite, &key, &pkt, &unmasked).ok())
            }
            _ => open_payload(suite, &hp_key, &pkt, &unmasked).ok(),
        };
        let Some(payload) = payload else {
            return self.drop_packet(now, "decryption_failure", size);
        };
        if self.spaces[space as usize].ack.is_duplicate(pn) {
            return self.drop_packet(now, "duplicate", size);
        }
        if let Some(next) = key_update {
            if !self.handshake_confirmed {
                self.close_on_error(now, TransportError::new(code::KEY_UPDATE_ERROR, "key update before confirmation"));
                return Outcome::Processed;
            }
            let k = self.one_rtt.as_mut().expect("checked above");
            k.prev_remote = Some(std::mem::replace(&mut k.remote, next));
            k.local = k.local.next_generation();
            k.phase = !k.phase;
            k.phase_start = Some(pn);
            let phase = k.phase;
            self.trace(now, Category::Security, "key_updated", json!({"initiator": "remote", "phase": phase}));
        }

        let frames = match decode_frames(&payload) {
            Ok(f) => f,
            Err(e) => {
                self.close_on_error(now, e.into());
                return Outcome::Processed;
            }
        };
        if frames.is_empty() {
            self.close_on_error(now, TransportError::protocol("packet without frames"));
            return Outcome::Processed;
        }
        if let Some(bad) = frames.iter().find(|f| !allowed_in(kind, f)) {
            let e = TransportError::protocol(format!("{} frame in {} packet", bad.name(), kind.name()));
            self.close_on_error(now, e);
            return Outcome::Processed;
        }

        // Bookkeeping that needs an authenticated packet.
        if self.side == Side::Client {
            if kind == PacketKind::Initial && self.peer_initial_scid.is_none() {
                let scid = long_scid.expect("long header");
                self.peer_initial_scid = Some(scid);
                if let Some(c) = self.remote_cids.iter_mut().find(|c| c.seq == 0) {
                    c.cid = scid;
                }
            }
            self.received_server_packet = true;
        } else if kind == PacketKind::Handshake && !self.path.validated {
            // Only the client could have produced this packet.
            self.path.validated = true;
            self.trace(now, Category::Transport, "address_validated", json!({"how": "handshake"}));
        }
        let eliciting = frames.iter().any(Frame::is_ack_eliciting);
        let probing_only = frames.iter().all(Frame::is_probing);
        self.trace(now, Category::Transport, "packet_received", json!({
            "type": kind.name(),
            "pn": pn,
            "size": size,
            "frames": frames.iter().map(Frame::name).collect::<Vec<_>>(),
            "from": addr_json(remote),
        }));
        self.last_activity = now;
        self.eliciting_since_recv = false;

        // A non-probing packet from a new address, if it is the newest, moves
        // the connection there.
        let newest = largest.is_none_or(|l| pn > l);
        let off_path = remote != self.path.remote || local != self.path.local;
        if off_path && kind == PacketKind::OneRtt && self.side == Side::Server && !probing_only && newest && self.handshake_confirmed
        {
            self.on_peer_migrated(now, local, remote, size);
        }

        self.packet_kind = Some(kind);
        for f in frames {
            if let Err(e) = self.handle_frame(now, kind, local, remote, f) {
                self.close_on_error(now, e);
                break;
            }
            if matches!(self.state, State::Draining | State::Closed | State::Closing) {
                break;
            }
        }
        self.drain_stream_events(now);
        self.packet_kind = None;
        if matches!(self.state, State::Draining | State::Closed | State::Closing) {
            return Outcome::Processed;
        }
        self.spaces[space as usize].ack.on_packet_received(pn, eliciting, now);
        if let Err(e) = self.process_handshake(now) {
            self.close_on_error(now, e);
            return Outcome::Processed;
        }
        if self.side == Side::Server && kind == PacketKind::Handshake {
            self.discard_space(now, SpaceId::Initial);
        }
        Outcome::Processed
    }

    fn on_peer_migrated(&mut self, now: Instant, local: Addr, remote: Addr, size: usize) {
        let old = self.path.clone();
        let mut p = Path::new(local, remote, false, true);
        p.received = size as u64;
        p.reset_on_validate = remote.host != old.remote.host;
        self.path = p;
        self.start_challenge(now);
        self.trace(now, Category::Transport, "peer_migrated", json!({
            "from": addr_json(old.remote),
            "to": addr_json(remote),
        }));
    }

    fn on_version_negotiation(&mut self, now: Instant, dcid: ConnectionId, scid: ConnectionId, versions: Vec<u32>, size: usize) {
        let ours = self.local_cids.first().map(|c| c.cid);
        if self.side != Side::Client
            || self.received_server_packet
            || Some(dcid) != ours
            || scid != self.original_dcid
            || versions.contains(&self.version)
        {
            self.drop_packet(now, "unexpected_version_negotiation", size);
            return;
        }
        self.trace(now, Category::Transport, "version_negotiation_received", json!({
            "offered": versions.iter().map(|v| format!("{v:#010x}")).collect::<Vec<_>>(),
        }));
        self.close_silently(now, CloseReason::VersionNegotiation { offered: versions });
    }

    fn on_retry(
        &mut self,
        now: Instant,
        pkt: &[u8],
        version: u32,
        scid: ConnectionId,
        token: Vec<u8>,
        tag: [u8; 16],
    ) -> Outcome {
        let size = pkt.len();
        if self.side != Side::Client || self.received_server_packet || self.retry_scid.is_some() || token.is_empty() {
            return self.drop_packet(now, "unexpected_retry", size);
        }
        if version != self.version {
            return self.drop_packet(now, "version_mismatch", size);
        }
        let expected = retry_integrity_tag(version, self.original_dcid.as_bytes(), &pkt[..size - 16]);
        if !handshake::ct_eq(&expected, &tag) {
            return self.drop_packet(now, "retry_integrity_failure", size);
        }
        self.trace(now, Category::Transport, "retry_received", json!({
            "scid": hex::encode(scid.as_bytes()),
            "token_len": token.len(),
        }));
        self.retry_scid = Some(scid);
        self.initial_dcid = scid;
        self.token = token;
        if let Some(c) = self.remote_cids.iter_mut().find(|c| c.seq == 0) {
            c.cid = scid;
        }
        self.spaces[0].keys = Some(derive_initial_keys(scid.as_bytes(), version).for_client());
        for p in self.spaces[0].sent.drain() {
            if p.in_flight {
                self.bytes_in_flight = self.bytes_in_flight.saturating_sub(p.size as u64);
            }
        }
        self.spaces[0].crypto_send.requeue_unacked();
        if self.zero_rtt_state == ZeroRttState::Attempted {
            self.requeue_zero_rtt(now);
        }
        self.pto_count = 0;
        Outcome::Processed
    }

    fn handle_frame(&mut self, now: Instant, kind: PacketKind, local: Addr, remote: Addr, f: Frame) -> Result<(), TransportError> {
        let space = kind.space();
        match f {
            Frame::Padding(_) | Frame::Ping => {}
            Frame::Ack(ack) => self.on_ack_frame(now, space, &ack)?,
            Frame::Crypto { offset, data } => {
                let bytes = self.space(space).crypto_recv.insert(offset, &data)?;
                if !bytes.is_empty() {
                    let level = match kind {
                        PacketKind::Initial => Level::Initial,
                        PacketKind::Handshake => Level::Handshake,
                        _ => Level::OneRtt,
                    };
                    self.handshake.read(level, &bytes)?;
                }
            }
            Frame::Stream(sf) => {
                let ctx = RecvCtx { now, srtt: self.srtt() };
                self.streams.on_stream_frame(&sf, ctx)?;
            }
            Frame::ResetStream { id, error_code, final_size } => self.streams.on_reset_stream(id, error_code, final_size)?,
            Frame::StopSending { id, error_code } => self.streams.on_stop_sending(id, error_code)?,
            Frame::MaxData(limit) => self.streams.on_max_data(limit),
            Frame::MaxStreamData { id, limit } => self.streams.on_max_stream_data(id, limit)?,
            Frame::MaxStreams { dir, limit } => self.streams.on_max_streams(dir, limit),
            Frame::NewToken(token) => {
                if self.side == Side::Server {
                    return Err(TransportError::protocol("NEW_TOKEN sent by client").with_frame(crate::frames::ty::NEW_TOKEN));
                }
                self.trace(now, Category::Transport, "new_token_received", json!({"len": token.len()}));
                self.events.push_back(Event::NewToken(token));
            }
            Frame::NewConnectionId {
                seq,
                retire_prior_to,
                cid,
                reset_token,
            } => self.on_new_cid(now, seq, retire_prior_to, cid, reset_token)?,
            Frame::RetireConnectionId(seq) => {
                if seq >= self.next_local_seq {
                    return Err(TransportError::protocol("retiring an unissued connection id"));
                }
                if let Some(c) = self.local_cids.iter_mut().find(|c| c.seq == seq && !c.retired) {
                    c.retired = true;
                    self.trace(now, Category::Transport, "cid_retired", json!({"seq": seq, "by": "peer"}));
                    self.issue_cids_to_limit(now);
                }
            }
            Frame::PathChallenge(data) => {
                if remote == self.path.remote && local == self.path.local {
                    if self.path.responses.len() < MAX_PROBE_RESPONSES {
                        self.path.responses.push(data);
                    }
                } else if self.probe_responses.len() < MAX_PROBE_RESPONSES {
                    self.probe_responses.push((local, remote, data));
                }
            }
            Frame::PathResponse(data) => {
                if self.path.challenge.as_ref().is_some_and(|c| c.data == data) {
                    self.on_path_validated(now);
                }
            }
            Frame::ConnectionClose(c) => {
                let app = c.layer == CloseLayer::Application;
                let reason = String::from_utf8_lossy(&c.reason).into_owned();
                let deadline = now + 3 * self.pto_period(SpaceId::Data);
                self.closing = Some(Closing {
                    frame: c.clone(),
                    deadline,
                    send_pending: false,
                });
                self.set_state(now, State::Draining);
                self.finish_close(now, CloseReason::Peer {
                    code: c.error_code,
                    app,
                    reason,
                });
            }
            Frame::Datagram(data) => {
                if self.local_tp.max_datagram_frame_size == 0 || data.len() as u64 + 3 > self.local_tp.max_datagram_frame_size {
                    return Err(TransportError::protocol("unexpected DATAGRAM frame").with_frame(crate::frames::ty::DATAGRAM));
                }
                self.trace(now, Category::Transport, "datagram_received", json!({"len": data.len()}));
                self.events.push_back(Event::Datagram(data));
            }
        }
        Ok(())
    }

    fn on_new_cid(
        &mut self,
        now: Instant,
        seq: u64,
        retire_prior_to: u64,
        cid: ConnectionId,
        reset_token: [u8; 16],
    ) -> Result<(), TransportError> {
        if self.remote_cid().is_empty() {
            return Err(TransportError::protocol("NEW_CONNECTION_ID with zero-length connection ids"));
        }
        if let Some(existing) = self.remote_cids.iter().find(|c| c.seq == seq) {
            if existing.cid != cid {
                return Err(TransportError::protocol("connection id sequence reused"));
            }
            return Ok(());
        }
        self.remote_cids.push(RemoteCid {
            seq,
            cid,
            reset_token: Some(reset_token),
            retired: seq < retire_prior_to,
        });
        self.trace(now, Category::Transport, "cid_received", json!({"seq": seq, "cid": hex::encode(cid.as_bytes())}));
        let to_retire: Vec<u64> = self
            .remote_cids
            .iter()
            .filter(|c| c.seq < retire_prior_to && (!c.retired || c.seq == seq))
            .map(|c| c.seq)
            .collect();
        for s in to_retire {
            if let Some(c) = self.remote_cids.iter_mut().find(|c| c.seq == s) {
                c.retired = true;
            }
            self.retire_queue.push_back(s);
        }
        if self.remote_cids.iter().any(|c| c.seq == self.active_remote && c.retired) {
            if let Some(next) = self.remote_cids.iter().filter(|c| !c.retired).map(|c| c.seq).min() {
                self.active_remote = next;
            }
        }
        let active = self.remote_cids.iter().filter(|c| !c.retired).count() as u64;
        if active > self.local_tp.active_connection_id_limit.max(2) {
            return Err(TransportError::new(code::CONNECTION_ID_LIMIT_ERROR, "too many connection ids"));
        }
        Ok(())
    }

    fn on_ack_frame(&mut self, now: Instant, space: SpaceId, ack: &AckFrame) -> Result<(), TransportError> {
        let next_pn = self.spaces[space as usize].next_pn;
        let outcome = self.spaces[space as usize]
            .sent
            .on_ack_received(ack, next_pn, now)
            .map_err(|e| e.with_frame(crate::frames::ty::ACK))?;
        self.trace(now, Category::Recovery, "ack_received", json!({
            "space": space.name(),
            "largest": ack.largest(),
            "ranges": ack.ranges.len(),
            "newly_acked": outcome.newly_acked.len(),
        }));
        if let Some(latest) = outcome.rtt_sample {
            let delay = if space == SpaceId::Data {
                let exp = self
                    .limits
                    .as_ref()
                    .map_or(crate::tparams::DEFAULT_ACK_DELAY_EXPONENT, |l| l.peer_ack_delay_exponent);
                let d = Duration::from_micros(ack.delay.saturating_mul(1u64 << exp.min(20)));
                if self.handshake_confirmed {
                    d.min(self.peer_max_ack_delay())
                } else {
                    d
                }
            } else {
                Duration::ZERO
            };
            self.rtt.update(latest, delay, now);
            let r = &self.rtt;
            let data = json!({
                "latest_us": r.latest().as_micros() as u64,
                "min_us": r.min().as_micros() as u64,
                "smoothed_us": r.smoothed().as_micros() as u64,
                "rttvar_us": r.rttvar().as_micros() as u64,
                "ack_delay_us": delay.as_micros() as u64,
            });
            self.trace(now, Category::Recovery, "rtt_updated", data);
        }
        let mut confirm = false;
        for p in &outcome.newly_acked {
            if p.in_flight && !p.pmtu_probe {
                self.bytes_in_flight = self.bytes_in_flight.saturating_sub(p.size as u64);
                self.cc.on_ack(p.size as u64, p.time_sent, now);
            }
            if p.pmtu_probe {
                self.on_pmtu_acked(now, p.size);
            }
            if space == SpaceId::Data && self.first_1rtt_pn.is_some_and(|f| p.pn >= f) {
                confirm = true;
            }
            for f in &p.frames {
                match f {
                    SentFrame::Ack { largest } => self.space(space).ack.on_ack_acked(*largest),
                    SentFrame::Crypto { offset, len } => self.space(space).crypto_send.on_acked(*offset, *len),
                    SentFrame::Stream { id, offset, len, fin } => self.streams.on_stream_acked(*id, *offset, *len, *fin),
                    SentFrame::ResetStream { id } => self.streams.on_reset_acked(*id),
                    _ => {}
                }
            }
        }
        if !outcome.newly_acked.is_empty() {
            let keep = self.side == Side::Client && !self.handshake_complete && space == SpaceId::Initial;
            if !keep {
                self.pto_count = 0;
            }
        }
        if confirm && self.side == Side::Client && self.handshake_complete {
            self.on_confirmed(now);
        }
        let lost = {
            let loss = self.loss;
            let rtt = &self.rtt;
            self.spaces[space as usize].sent.detect_lost(rtt, &loss, now)
        };
        self.on_packets_lost(now, space, lost);
        self.trace_cwnd(now, "ack");
        Ok(())
    }
}

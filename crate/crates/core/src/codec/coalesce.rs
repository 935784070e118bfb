use super::{PacketShell, Result};

/// Splits a datagram into its coalesced packets.
///
/// Long-header packets end where their Length field says; a short-header
/// packet, a Retry or a Version Negotiation packet runs to the end of the
/// datagram. The returned slices partition `datagram` exactly.
pub fn split_coalesced(datagram: &[u8], dcid_len_hint: usize) -> Result<Vec<&[u8]>> {
    let mut out = Vec::new();
    let mut rest = datagram;
    while !rest.is_empty() {
        let shell = PacketShell::parse(rest, dcid_len_hint)?;
        let (packet, tail) = rest.split_at(shell.len);
        out.push(packet);
        rest = tail;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::{
        CodecError, ConnectionId, Header, LongHeader, LongPacketType, ShortHeader, TruncatedPn,
        VERSION_1,
    };

    fn long(ty: LongPacketType, payload: usize) -> Vec<u8> {
        let h = Header::Long(LongHeader {
            ty,
            version: VERSION_1,
            dcid: ConnectionId::new(&[7; 8]).unwrap(),
            scid: ConnectionId::new(&[8; 8]).unwrap(),
            token: Vec::new(),
            length: 1 + payload as u64,
            pn: TruncatedPn { value: 0, len: 1 },
        });
        let mut out = Vec::new();
        h.encode(&mut out);
        out.resize(out.len() + payload, 0xee);
        out
    }

    #[test]
    fn single_initial() {
        let p = long(LongPacketType::Initial, 1200 - 27);
        assert_eq!(p.len(), 1200);
        let parts = split_coalesced(&p, 8).unwrap();
        assert_eq!(parts, vec![&p[..]]);
    }

    #[test]
    fn initial_handshake_short() {
        let a = long(LongPacketType::Initial, 100);
        let b = long(LongPacketType::Handshake, 40);
        let mut c = Vec::new();
        Header::Short(ShortHeader {
            spin: false,
            key_phase: false,
            dcid: ConnectionId::new(&[7; 8]).unwrap(),
            pn: TruncatedPn { value: 3, len: 1 },
        })
        .encode(&mut c);
        c.extend_from_slice(&[1; 30]);
        let datagram = [a.clone(), b.clone(), c.clone()].concat();
        let parts = split_coalesced(&datagram, 8).unwrap();
        assert_eq!(parts, vec![&a[..], &b[..], &c[..]]);
        assert_eq!(parts.concat(), datagram);
    }

    #[test]
    fn overrunning_length() {
        let mut p = long(LongPacketType::Handshake, 50);
        p.truncate(p.len() - 1);
        assert!(matches!(
            split_coalesced(&p, 8),
            Err(CodecError::MalformedDatagram(_))
        ));
    }
}

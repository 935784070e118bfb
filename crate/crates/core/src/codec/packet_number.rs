//! Packet number truncation and window recovery.
//!
//! A sender transmits only the low-order bytes of a packet number. It picks
//! enough bytes that the full value lies within half a window of what the
//! receiver expects next, so the receiver can pick the unique candidate
//! closest to `largest_received + 1`.

use super::TruncatedPn;

/// Number of bytes (1 to 4) needed to encode `full` when the peer has
/// acknowledged up to `largest_acked`.
pub fn truncate_packet_number(full: u64, largest_acked: Option<u64>) -> TruncatedPn {
    let unacked = match largest_acked {
        Some(la) => full.saturating_sub(la).max(1),
        None => full + 1,
    };
    // need 2^(bits-1) >= unacked, i.e. bits = ceil(log2(unacked)) + 1
    let ceil_log2 = 64 - (unacked - 1).leading_zeros() as u64;
    let bits = ceil_log2 + 1;
    let len = bits.div_ceil(8).clamp(1, 4) as u8;
    let mask = if len == 4 { u32::MAX as u64 } else { (1u64 << (8 * len)) - 1 };
    TruncatedPn {
        value: (full & mask) as u32,
        len,
    }
}

/// Big-endian truncated bytes for `full`.
pub fn encode_packet_number(full: u64, largest_acked: Option<u64>) -> Vec<u8> {
    let t = truncate_packet_number(full, largest_acked);
    t.value.to_be_bytes()[4 - t.len as usize..].to_vec()
}

/// Recovers the full packet number from `truncated` (1 to 4 bytes).
///
/// Panics if `truncated` is empty or longer than 4 bytes.
pub fn decode_packet_number(truncated: &[u8], largest_received: Option<u64>) -> u64 {
    assert!((1..=4).contains(&truncated.len()), "packet number is 1-4 bytes");
    let value = truncated.iter().fold(0u64, |acc, &b| (acc << 8) | u64::from(b));
    recover(value, truncated.len() as u8, largest_received)
}

pub(crate) fn recover(value: u64, len: u8, largest_received: Option<u64>) -> u64 {
    let Some(largest) = largest_received else {
        return value;
    };
    let expected = largest + 1;
    let win = 1u64 << (8 * u32::from(len));
    let hwin = win / 2;
    let mask = win - 1;
    let candidate = (expected & !mask) | value;
    if candidate + hwin <= expected && candidate < (1u64 << 62) - win {
        candidate + win
    } else if candidate > expected + hwin && candidate >= win {
        candidate - win
    } else {
        candidate
    }
}

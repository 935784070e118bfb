//! CRYPTO stream buffers, one pair per packet number space.

use std::collections::BTreeMap;

use crate::codec::VarInt;
use crate::error::{code, TransportError};
use crate::rangeset::RangeSet;

/// Smallest reassembly window an endpoint must offer.
pub const CRYPTO_BUFFER: u64 = 4096;

#[derive(Debug, Default)]
pub struct CryptoSend {
    data: Vec<u8>,
    pending: RangeSet,
    acked: RangeSet,
}

impl CryptoSend {
    pub fn write(&mut self, bytes: &[u8]) {
        let start = self.data.len() as u64;
        self.data.extend_from_slice(bytes);
        self.pending.insert(start..self.data.len() as u64);
    }

    #[cfg(test)]
    pub fn has_pending(&self) -> bool {
        !self.pending.is_empty()
    }

    #[cfg(test)]
    pub fn has_unacked(&self) -> bool {
        self.acked.covered() < self.data.len() as u64
    }

    /// Next frame's offset and payload, sized so the whole CRYPTO frame fits
    /// in `budget` bytes.
    pub fn next_frame(&mut self, budget: usize) -> Option<(u64, Vec<u8>)> {
        let r = self.pending.first()?;
        let fixed = 1 + VarInt::from_u64(r.start).ok()?.size();
        if budget <= fixed + 1 {
            return None;
        }
        // A one-byte length prefix covers up to 63 bytes.
        let room = if budget - fixed - 1 < 64 { budget - fixed - 1 } else { budget - fixed - 2 };
        let len = (room as u64).min(r.end - r.start).min(16383);
        self.pending.remove(r.start..r.start + len);
        Some((r.start, self.data[r.start as usize..(r.start + len) as usize].to_vec()))
    }

    pub fn on_acked(&mut self, offset: u64, len: u64) {
        self.acked.insert(offset..offset + len);
    }

    pub fn on_lost(&mut self, offset: u64, len: u64) {
        let mut r = RangeSet::new();
        r.insert(offset..offset + len);
        for a in self.acked.iter() {
            r.remove(a);
        }
        for x in r.iter() {
            self.pending.insert(x);
        }
    }

    /// Queues every unacknowledged byte again, for probes.
    pub fn requeue_unacked(&mut self) {
        let n = self.data.len() as u64;
        if n > 0 {
            self.on_lost(0, n);
        }
    }
}

#[derive(Debug, Default)]
pub struct CryptoRecv {
    delivered: u64,
    chunks: BTreeMap<u64, Vec<u8>>,
}

impl CryptoRecv {
    /// Stores a CRYPTO frame and returns whatever is now contiguous.
    pub fn insert(&mut self, offset: u64, data: &[u8]) -> Result<Vec<u8>, TransportError> {
        let end = offset + data.len() as u64;
        if end > self.delivered + CRYPTO_BUFFER {
            return Err(TransportError::new(
                code::CRYPTO_BUFFER_EXCEEDED,
                format!("crypto data up to {end} exceeds buffer at {}", self.delivered),
            )
            .with_frame(crate::frames::ty::CRYPTO));
        }
        if end <= self.delivered {
            return Ok(Vec::new());
        }
        let (offset, data) = if offset < self.delivered {
            (self.delivered, &data[(self.delivered - offset) as usize..])
        } else {
            (offset, data)
        };
        let keep = self.chunks.get(&offset).is_none_or(|c| c.len() < data.len());
        if keep {
            self.chunks.insert(offset, data.to_vec());
        }
        let mut out = Vec::new();
        while let Some((&off, _)) = self.chunks.first_key_value() {
            if off > self.delivered {
                break;
            }
            let chunk = self.chunks.remove(&off).expect("present");
            let chunk_end = off + chunk.len() as u64;
            if chunk_end > self.delivered {
                out.extend_from_slice(&chunk[(self.delivered - off) as usize..]);
                self.delivered = chunk_end;
            }
        }
        Ok(out)
    }
}

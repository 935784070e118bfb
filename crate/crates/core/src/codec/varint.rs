use super::{CodecError, Result};

/// An integer in `[0, 2^62)`, carried on the wire in 1, 2, 4 or 8 bytes.
///
/// The two most significant bits of the first byte give the length class
/// (00, 01, 10, 11 for 1, 2, 4, 8 bytes); the remaining bits hold the value
/// in network byte order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct VarInt(u64);

impl VarInt {
    pub const MAX: VarInt = VarInt((1 << 62) - 1);

    pub fn from_u64(v: u64) -> Result<Self> {
        if v > Self::MAX.0 {
            Err(CodecError::Range(v))
        } else {
            Ok(VarInt(v))
        }
    }

    pub const fn from_u32(v: u32) -> Self {
        VarInt(v as u64)
    }

    pub const fn into_inner(self) -> u64 {
        self.0
    }

    /// Size of the minimal encoding.
    pub const fn size(self) -> usize {
        size_of_value(self.0)
    }

    pub fn encode(self, out: &mut Vec<u8>) {
        let v = self.0;
        match self.size() {
            1 => out.push(v as u8),
            2 => out.extend_from_slice(&((v as u16) | 0x4000).to_be_bytes()),
            4 => out.extend_from_slice(&((v as u32) | 0x8000_0000).to_be_bytes()),
            _ => out.extend_from_slice(&(v | 0xc000_0000_0000_0000).to_be_bytes()),
        }
    }

    /// Decodes one varint, accepting non-minimal forms.
    pub fn decode(input: &[u8]) -> Result<(VarInt, usize)> {
        let first = *input
            .first()
            .ok_or(CodecError::TruncatedInput { offset: 0, needed: 1 })?;
        let len = 1usize << (first >> 6);
        if input.len() < len {
            return Err(CodecError::TruncatedInput {
                offset: 0,
                needed: len - input.len(),
            });
        }
        let mut v = u64::from(first & 0x3f);
        for &b in &input[1..len] {
            v = (v << 8) | u64::from(b);
        }
        Ok((VarInt(v), len))
    }
}

pub(crate) const fn size_of_value(v: u64) -> usize {
    if v < 1 << 6 {
        1
    } else if v < 1 << 14 {
        2
    } else if v < 1 << 30 {
        4
    } else {
        8
    }
}

impl From<VarInt> for u64 {
    fn from(v: VarInt) -> u64 {
        v.0
    }
}

impl TryFrom<u64> for VarInt {
    type Error = CodecError;

    fn try_from(v: u64) -> Result<Self> {
        VarInt::from_u64(v)
    }
}

/// Minimal encoding of `value`.
pub fn encode_varint(value: u64) -> Result<Vec<u8>> {
    let v = VarInt::from_u64(value)?;
    let mut out = Vec::with_capacity(v.size());
    v.encode(&mut out);
    Ok(out)
}

/// Decodes a varint from the front of `input`, returning `(value, consumed)`.
pub fn decode_varint(input: &[u8]) -> Result<(u64, usize)> {
    VarInt::decode(input).map(|(v, n)| (v.0, n))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Reads a varint straight from the bit layout, independently of the codec.
    fn layout_oracle(bytes: &[u8]) -> u64 {
        let len = match bytes[0] >> 6 {
            0b00 => 1,
            0b01 => 2,
            0b10 => 4,
            _ => 8,
        };
        let mut bits = String::new();
        for (i, b) in bytes[..len].iter().enumerate() {
            let s = format!("{b:08b}");
            bits.push_str(if i == 0 { &s[2..] } else { &s });
        }
        u64::from_str_radix(&bits, 2).unwrap()
    }

    #[test]
    fn spec_examples() {
        assert_eq!(encode_varint(0).unwrap(), vec![0x00]);
        assert_eq!(encode_varint(37).unwrap(), vec![0x25]);
        assert_eq!(layout_oracle(&[0x25]), 37);
        assert_eq!(encode_varint(1 << 62), Err(CodecError::Range(1 << 62)));

        assert_eq!(decode_varint(&[0x40, 0x25]).unwrap(), (37, 2));
        assert_eq!(layout_oracle(&[0x40, 0x25]), 37);
        assert_eq!(decode_varint(&[0x00]).unwrap(), (0, 1));
        assert!(matches!(
            decode_varint(&[0x80]),
            Err(CodecError::TruncatedInput { needed: 3, .. })
        ));
    }

    #[test]
    fn rfc_sample_values() {
        let cases: [(&[u8], u64); 4] = [
            (&[0xc2, 0x19, 0x7c, 0x5e, 0xff, 0x14, 0xe8, 0x8c], 151_288_809_941_952_652),
            (&[0x9d, 0x7f, 0x3e, 0x7d], 494_878_333),
            (&[0x7b, 0xbd], 15_293),
            (&[0x25], 37),
        ];
        for (bytes, v) in cases {
            assert_eq!(decode_varint(bytes).unwrap(), (v, bytes.len()));
            assert_eq!(layout_oracle(bytes), v);
            assert_eq!(encode_varint(v).unwrap(), bytes);
        }
    }

    #[test]
    fn class_boundaries() {
        for (v, len) in [
            (63, 1),
            (64, 2),
            (16_383, 2),
            (16_384, 4),
            ((1 << 30) - 1, 4),
            (1 << 30, 8),
            ((1 << 62) - 1, 8),
        ] {
            assert_eq!(encode_varint(v).unwrap().len(), len, "{v}");
        }
    }

    proptest! {
        #[test]
        fn roundtrip_minimal(v in 0u64..(1 << 62)) {
            let bytes = encode_varint(v).unwrap();
            prop_assert_eq!(bytes.len(), size_of_value(v));
            prop_assert_eq!(decode_varint(&bytes).unwrap(), (v, bytes.len()));
            prop_assert_eq!(layout_oracle(&bytes), v);
        }

        #[test]
        fn decode_never_panics(bytes in proptest::collection::vec(any::<u8>(), 0..12)) {
            if let Ok((v, n)) = decode_varint(&bytes) {
                prop_assert!([1, 2, 4, 8].contains(&n));
                prop_assert!(v < 1 << 62);
            }
        }
    }
}

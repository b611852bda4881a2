//! Little-endian bit packing of integer codes.
//!
//! Element `i` occupies bits `[i*b, i*b + b)` of the byte stream, low bits
//! first. At 2 bits this puts four codes in one byte with element 0 in bits
//! 0..1. Pad bits after the last element are zero.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PackedCodes {
    bits: u8,
    len: usize,
    bytes: Vec<u8>,
}

pub fn packed_len(count: usize, bits: u8) -> usize {
    (count * bits as usize).div_ceil(8)
}

impl PackedCodes {
    /// Wraps an existing payload, checking its length and that pad bits are
    /// zero.
    pub fn from_bytes(bytes: Vec<u8>, bits: u8, len: usize) -> Result<Self> {
        check_pack_bits(bits)?;
        if bytes.len() != packed_len(len, bits) {
            return Err(Error::invalid(format!(
                "{} payload bytes for {len} codes at {bits} bits",
                bytes.len()
            )));
        }
        let used = len * bits as usize;
        if !used.is_multiple_of(8) {
            let last = *bytes.last().unwrap();
            if last >> (used % 8) != 0 {
                return Err(Error::invalid("non-zero pad bits"));
            }
        }
        Ok(Self { bits, len, bytes })
    }

    pub fn bits(&self) -> u8 {
        self.bits
    }
    pub fn len(&self) -> usize {
        self.len
    }
    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
    pub fn bytes(&self) -> &[u8] {
        &self.bytes
    }
    pub fn into_bytes(self) -> Vec<u8> {
        self.bytes
    }

    #[inline]
    pub fn get(&self, i: usize) -> u8 {
        let bits = self.bits as usize;
        let pos = i * bits;
        let (byte, off) = (pos / 8, pos % 8);
        let mut word = self.bytes[byte] as u16;
        if off + bits > 8 {
            word |= (self.bytes[byte + 1] as u16) << 8;
        }
        ((word >> off) & ((1u16 << bits) - 1)) as u8
    }
}

fn check_pack_bits(bits: u8) -> Result<()> {
    if !(1..=8).contains(&bits) {
        return Err(Error::invalid(format!("cannot pack {bits}-bit codes")));
    }
    Ok(())
}

pub fn pack_codes(codes: &[u8], bits: u8) -> Result<PackedCodes> {
    check_pack_bits(bits)?;
    if bits < 8 {
        if let Some(&c) = codes.iter().find(|&&c| c >> bits != 0) {
            return Err(Error::invalid(format!(
                "code {c} does not fit in {bits} bits"
            )));
        }
    }
    let mut bytes = vec![0u8; packed_len(codes.len(), bits)];
    match bits {
        8 => bytes.copy_from_slice(codes),
        2 => {
            for (out, chunk) in bytes.iter_mut().zip(codes.chunks(4)) {
                *out = chunk
                    .iter()
                    .enumerate()
                    .fold(0u8, |acc, (k, &c)| acc | (c << (2 * k)));
            }
        }
        4 => {
            for (out, chunk) in bytes.iter_mut().zip(codes.chunks(2)) {
                *out = chunk[0] | chunk.get(1).map_or(0, |&c| c << 4);
            }
        }
        _ => {
            let b = bits as usize;
            for (i, &c) in codes.iter().enumerate() {
                let pos = i * b;
                let (byte, off) = (pos / 8, pos % 8);
                let v = (c as u16) << off;
                bytes[byte] |= v as u8;
                if off + b > 8 {
                    bytes[byte + 1] |= (v >> 8) as u8;
                }
            }
        }
    }
    Ok(PackedCodes {
        bits,
        len: codes.len(),
        bytes,
    })
}

/// Expands four 2-bit lanes of every byte, one 32-bit word at a time.
fn unpack2(bytes: &[u8], len: usize, out: &mut Vec<u8>) {
    let mut words = bytes.chunks_exact(4);
    for w in &mut words {
        let w = u32::from_le_bytes([w[0], w[1], w[2], w[3]]);
        for k in 0..16 {
            out.push(((w >> (2 * k)) & 0b11) as u8);
        }
    }
    for &b in words.remainder() {
        out.extend_from_slice(&[b & 3, (b >> 2) & 3, (b >> 4) & 3, b >> 6]);
    }
    out.truncate(len);
}

pub fn unpack_codes(p: &PackedCodes) -> Vec<u8> {
    let mut out = Vec::with_capacity(p.len + 16);
    match p.bits {
        8 => out.extend_from_slice(&p.bytes),
        2 => unpack2(&p.bytes, p.len, &mut out),
        4 => {
            for &b in &p.bytes {
                out.push(b & 0x0F);
                out.push(b >> 4);
            }
            out.truncate(p.len);
        }
        _ => out.extend((0..p.len).map(|i| p.get(i))),
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn two_bit_layout() {
        let p = pack_codes(&[3, 0, 1, 2], 2).unwrap();
        assert_eq!(p.bytes(), &[0x93]);
        assert_eq!(pack_codes(&[0, 0, 0, 0], 2).unwrap().bytes(), &[0x00]);
        let p = pack_codes(&[1, 2, 3, 0, 3], 2).unwrap();
        assert_eq!(p.bytes(), &[0b00_11_10_01, 0b0000_0011]);
    }

    #[test]
    fn overflow_rejected() {
        assert!(pack_codes(&[4], 2).is_err());
        assert!(pack_codes(&[16], 4).is_err());
        assert!(pack_codes(&[8], 3).is_err());
        assert!(pack_codes(&[1], 0).is_err());
    }

    #[test]
    fn pad_bits_checked() {
        assert!(PackedCodes::from_bytes(vec![0b0100_0000], 2, 3).is_err());
        assert!(PackedCodes::from_bytes(vec![0b0011_1111], 2, 3).is_ok());
        assert!(PackedCodes::from_bytes(vec![0, 0], 2, 3).is_err());
    }

    proptest! {
        #[test]
        fn round_trip_and_density(
            bits in 1u8..=8,
            raw in prop::collection::vec(any::<u8>(), 0..300),
        ) {
            let codes: Vec<u8> = raw.iter().map(|&c| if bits == 8 { c } else { c & ((1 << bits) - 1) }).collect();
            let p = pack_codes(&codes, bits).unwrap();
            prop_assert_eq!(p.bytes().len(), packed_len(codes.len(), bits));
            prop_assert_eq!(unpack_codes(&p), codes.clone());
            for (i, &c) in codes.iter().enumerate() {
                prop_assert_eq!(p.get(i), c);
            }
            let again = PackedCodes::from_bytes(p.bytes().to_vec(), bits, codes.len()).unwrap();
            prop_assert_eq!(again, p);
        }
    }
}

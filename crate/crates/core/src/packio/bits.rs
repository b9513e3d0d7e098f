//! LSB-first bit streaming of fixed-width codes.

use super::FormatError;

/// Bytes needed for `n` codes of `bits` bits.
pub fn packed_len(n: usize, bits: u8) -> usize {
    (n * bits as usize).div_ceil(8)
}

/// Code `i` occupies bits `[i*b, (i+1)*b)` of the stream, where bit `j` of
/// the stream is bit `j % 8` of byte `j / 8`. Trailing padding bits are zero.
pub fn pack_codes(codes: &[u16], bits: u8) -> Vec<u8> {
    assert!((1..=16).contains(&bits), "bit width {bits} outside 1..=16");
    let mut out = vec![0u8; packed_len(codes.len(), bits)];
    let mask = ((1u32 << bits) - 1) as u16;
    let mut bitpos = 0usize;
    for &c in codes {
        debug_assert!(c <= mask, "code {c} wider than {bits} bits");
        let mut v = (c & mask) as u32;
        let mut left = bits as usize;
        while left > 0 {
            let byte = bitpos / 8;
            let off = bitpos % 8;
            let take = (8 - off).min(left);
            out[byte] |= ((v & ((1 << take) - 1)) << off) as u8;
            v >>= take;
            left -= take;
            bitpos += take;
        }
    }
    out
}

pub fn unpack_codes(bytes: &[u8], n: usize, bits: u8) -> Result<Vec<u16>, FormatError> {
    if !(1..=16).contains(&bits) {
        return Err(FormatError::Malformed(format!("bit width {bits}")));
    }
    if bytes.len() != packed_len(n, bits) {
        return Err(FormatError::Truncated("packed codes"));
    }
    let mut out = Vec::with_capacity(n);
    let mut bitpos = 0usize;
    for _ in 0..n {
        let mut v = 0u32;
        let mut got = 0usize;
        while got < bits as usize {
            let byte = bitpos / 8;
            let off = bitpos % 8;
            let take = (8 - off).min(bits as usize - got);
            v |= ((bytes[byte] as u32 >> off) & ((1 << take) - 1)) << got;
            got += take;
            bitpos += take;
        }
        out.push(v as u16);
    }
    let used = n * bits as usize;
    if used % 8 != 0 && bytes[used / 8] >> (used % 8) != 0 {
        return Err(FormatError::Malformed("non-zero padding bits".into()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn payload_sizes() {
        assert_eq!(pack_codes(&[1, 2, 3, 4, 5, 6, 7, 8], 4).len(), 4);
        let p = pack_codes(&[7, 7, 7, 7, 7], 3);
        assert_eq!(p.len(), 2);
        assert_eq!(p, vec![0xff, 0x7f]);
    }

    #[test]
    fn lsb_first_layout() {
        assert_eq!(pack_codes(&[1, 2], 4), vec![0x21]);
        assert_eq!(pack_codes(&[0b01, 0b10, 0b11, 0b00], 2), vec![0b00_11_10_01]);
        assert_eq!(pack_codes(&[0xabcd], 16), vec![0xcd, 0xab]);
    }

    #[test]
    fn dirty_padding_rejected() {
        assert!(unpack_codes(&[0xff, 0xff], 5, 3).is_err());
        assert!(unpack_codes(&[0xff], 5, 3).is_err());
    }

    proptest! {
        #[test]
        fn round_trip(bits in 1u8..=16, raw in prop::collection::vec(any::<u16>(), 0..64)) {
            let mask = ((1u32 << bits) - 1) as u16;
            let codes: Vec<u16> = raw.iter().map(|c| c & mask).collect();
            let packed = pack_codes(&codes, bits);
            prop_assert_eq!(unpack_codes(&packed, codes.len(), bits).unwrap(), codes);
        }
    }
}

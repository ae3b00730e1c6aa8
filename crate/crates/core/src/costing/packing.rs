//! Fixed-width index packing.
//!
//! Indices are written in order, least-significant bit first, filling each
//! byte from bit 0 upward. `[1, 2, 3]` at width 2 packs to `0b00_11_10_01`.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{corrupt, invalid, Result};

pub const MAX_WIDTH: u8 = 32;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PackedPayload {
    pub bytes: Vec<u8>,
    /// Exact number of meaningful bits; trailing bits of the last byte are zero.
    pub bit_length: usize,
    pub width: u8,
}

impl PackedPayload {
    pub fn byte_len(bits: usize) -> usize {
        bits.div_ceil(8)
    }
}

pub fn pack_indices(indices: &[u32], width: u8) -> Result<PackedPayload> {
    if width > MAX_WIDTH {
        return Err(invalid(format!("width {width} exceeds {MAX_WIDTH} bits")));
    }
    let bit_length = indices.len() * usize::from(width);
    let mut bytes = vec![0u8; PackedPayload::byte_len(bit_length)];
    if width == 0 {
        if let Some(&bad) = indices.iter().find(|&&i| i != 0) {
            return Err(invalid(format!("index {bad} does not fit in 0 bits")));
        }
        return Ok(PackedPayload { bytes, bit_length, width });
    }
    let limit = 1u64 << width;
    let mut acc = 0u64;
    let mut filled = 0u32;
    let mut out = 0usize;
    for &index in indices {
        if u64::from(index) >= limit {
            return Err(invalid(format!("index {index} does not fit in {width} bits")));
        }
        acc |= u64::from(index) << filled;
        filled += u32::from(width);
        while filled >= 8 {
            bytes[out] = acc as u8;
            out += 1;
            acc >>= 8;
            filled -= 8;
        }
    }
    if filled > 0 {
        bytes[out] = acc as u8;
    }
    Ok(PackedPayload { bytes, bit_length, width })
}

/// Reads `count` indices of `width` bits from the front of `bytes`.
pub fn unpack_from_bytes(bytes: &[u8], count: usize, width: u8) -> Result<Vec<u32>> {
    if width > MAX_WIDTH {
        return Err(invalid(format!("width {width} exceeds {MAX_WIDTH} bits")));
    }
    let needed = count * usize::from(width);
    if bytes.len() * 8 < needed {
        return Err(corrupt(format!(
            "payload holds {} bits, {count} indices of width {width} need {needed}",
            bytes.len() * 8
        )));
    }
    if width == 0 {
        return Ok(vec![0; count]);
    }
    let mask = (1u64 << width) - 1;
    let mut out = Vec::with_capacity(count);
    let mut acc = 0u64;
    let mut available = 0u32;
    let mut next = 0usize;
    for _ in 0..count {
        while available < u32::from(width) {
            acc |= u64::from(bytes[next]) << available;
            next += 1;
            available += 8;
        }
        out.push((acc & mask) as u32);
        acc >>= width;
        available -= u32::from(width);
    }
    Ok(out)
}

pub fn unpack_indices(payload: &PackedPayload, count: usize, width: u8) -> Result<Vec<u32>> {
    if payload.bit_length < count * usize::from(width) {
        return Err(corrupt(format!(
            "payload of {} bits is too short for {count} indices of width {width}",
            payload.bit_length
        )));
    }
    unpack_from_bytes(&payload.bytes, count, width)
}

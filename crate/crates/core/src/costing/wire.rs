//! Layer frame wire format.
//!
//! ```text
//! offset  size  field
//! 0       4     levels        u32 LE
//! 4       4     count         u32 LE  (indices that follow)
//! 8       1     width         u8      (bits per index)
//! 9       1     flags         bit 0: codebook present (refresh)
//!                             bit 1: boundaries are 32-bit floats (else 16-bit)
//!                             bit 2: 32-bit norm present (QSGD)
//! 10      4     norm          f32 LE, only with bit 2
//! ..      n·b/8 codebook      levels+1 boundaries, LE, only with bit 0
//! ..      ⌈count·width/8⌉     packed indices, LSB-first
//! ```

use alloc::format;
use alloc::vec::Vec;

use half::f16;

use super::packing::{pack_indices, unpack_from_bytes, PackedPayload};
use crate::error::{corrupt, invalid, Result};
use crate::quant::Codebook;

pub const HEADER_BYTES: usize = 10;
pub const HEADER_BITS: u64 = HEADER_BYTES as u64 * 8;

const FLAG_CODEBOOK: u8 = 1;
const FLAG_WIDE: u8 = 1 << 1;
const FLAG_NORM: u8 = 1 << 2;
const KNOWN_FLAGS: u8 = FLAG_CODEBOOK | FLAG_WIDE | FLAG_NORM;

/// Encoding used for transmitted codebook boundaries.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BoundaryPrecision {
    /// IEEE-754 binary16.
    Half,
    /// IEEE-754 binary32.
    Single,
}

impl BoundaryPrecision {
    pub fn from_bits(bits: u32) -> Result<Self> {
        match bits {
            16 => Ok(Self::Half),
            32 => Ok(Self::Single),
            other => Err(invalid(format!("boundary precision must be 16 or 32 bits, got {other}"))),
        }
    }

    pub fn bits(self) -> u32 {
        match self {
            Self::Half => 16,
            Self::Single => 32,
        }
    }

    /// Value the receiver will see after a trip through the wire.
    pub fn round(self, v: f32) -> f32 {
        match self {
            Self::Half => f16::from_f32(v).to_f32(),
            Self::Single => v,
        }
    }

    /// The codebook both ends hold once it has been transmitted.
    pub fn round_codebook(self, cb: &Codebook) -> Result<Codebook> {
        match self {
            Self::Single => Ok(cb.clone()),
            Self::Half => cb.map_boundaries(|b| self.round(b)),
        }
    }
}

/// One layer's worth of wire data.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub levels: u32,
    pub count: u32,
    pub width: u8,
    pub norm: Option<f32>,
    pub codebook: Option<(BoundaryPrecision, Vec<f32>)>,
    pub indices: Vec<u32>,
}

impl Frame {
    /// A payload of bucket indices.
    pub fn indices(levels: u32, width: u8, indices: Vec<u32>) -> Self {
        Self {
            levels,
            count: indices.len() as u32,
            width,
            norm: None,
            codebook: None,
            indices,
        }
    }

    /// A codebook announcement with no indices attached.
    pub fn codebook(cb: &Codebook, precision: BoundaryPrecision) -> Self {
        Self {
            levels: cb.levels() as u32,
            count: 0,
            width: cb.index_width(),
            norm: None,
            codebook: Some((precision, cb.boundaries().to_vec())),
            indices: Vec::new(),
        }
    }

    /// Serialised size split into (index bits, codebook bits, overhead bits).
    /// Overhead covers the header, the norm, and byte padding.
    pub fn bit_budget(&self) -> FrameBits {
        let index = u64::from(self.count) * u64::from(self.width);
        let codebook = self
            .codebook
            .as_ref()
            .map_or(0, |(p, b)| b.len() as u64 * u64::from(p.bits()));
        let padding = PackedPayload::byte_len(index as usize) as u64 * 8 - index;
        let norm = if self.norm.is_some() { 32 } else { 0 };
        FrameBits {
            index,
            codebook,
            overhead: HEADER_BITS + norm + padding,
        }
    }

    pub fn encode_into(&self, out: &mut Vec<u8>) -> Result<()> {
        if self.indices.len() != self.count as usize {
            return Err(invalid("frame count disagrees with its indices"));
        }
        let mut flags = 0;
        if self.norm.is_some() {
            flags |= FLAG_NORM;
        }
        if let Some((precision, boundaries)) = &self.codebook {
            flags |= FLAG_CODEBOOK;
            if *precision == BoundaryPrecision::Single {
                flags |= FLAG_WIDE;
            }
            if boundaries.len() != self.levels as usize + 1 {
                return Err(invalid("codebook must carry levels + 1 boundaries"));
            }
        }
        out.extend_from_slice(&self.levels.to_le_bytes());
        out.extend_from_slice(&self.count.to_le_bytes());
        out.push(self.width);
        out.push(flags);
        if let Some(norm) = self.norm {
            out.extend_from_slice(&norm.to_le_bytes());
        }
        if let Some((precision, boundaries)) = &self.codebook {
            for &b in boundaries {
                match precision {
                    BoundaryPrecision::Half => out.extend_from_slice(&f16::from_f32(b).to_le_bytes()),
                    BoundaryPrecision::Single => out.extend_from_slice(&b.to_le_bytes()),
                }
            }
        }
        let packed = pack_indices(&self.indices, self.width)?;
        out.extend_from_slice(&packed.bytes);
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        self.encode_into(&mut out)?;
        Ok(out)
    }

    /// Parses one frame from the front of `bytes`, returning it and the
    /// number of bytes consumed.
    pub fn decode(bytes: &[u8]) -> Result<(Self, usize)> {
        let mut cursor = Cursor { bytes, at: 0 };
        let levels = u32::from_le_bytes(cursor.take::<4>()?);
        let count = u32::from_le_bytes(cursor.take::<4>()?);
        let [width] = cursor.take::<1>()?;
        let [flags] = cursor.take::<1>()?;
        if flags & !KNOWN_FLAGS != 0 {
            return Err(corrupt(format!("unknown frame flags {flags:#04x}")));
        }
        if width > super::packing::MAX_WIDTH {
            return Err(corrupt(format!("index width {width} out of range")));
        }
        let norm = if flags & FLAG_NORM != 0 {
            Some(f32::from_le_bytes(cursor.take::<4>()?))
        } else {
            None
        };
        let codebook = if flags & FLAG_CODEBOOK != 0 {
            let n = levels as usize + 1;
            let mut boundaries = Vec::with_capacity(n.min(bytes.len()));
            let precision = if flags & FLAG_WIDE != 0 {
                BoundaryPrecision::Single
            } else {
                BoundaryPrecision::Half
            };
            for _ in 0..n {
                boundaries.push(match precision {
                    BoundaryPrecision::Half => f16::from_le_bytes(cursor.take::<2>()?).to_f32(),
                    BoundaryPrecision::Single => f32::from_le_bytes(cursor.take::<4>()?),
                });
            }
            Some((precision, boundaries))
        } else {
            None
        };
        let index_bits = count as usize * usize::from(width);
        let index_bytes = PackedPayload::byte_len(index_bits);
        let rest = cursor.rest();
        if rest.len() < index_bytes {
            return Err(corrupt(format!(
                "frame declares {index_bits} index bits but only {} bytes remain",
                rest.len()
            )));
        }
        let indices = unpack_from_bytes(&rest[..index_bytes], count as usize, width)?;
        let consumed = cursor.at + index_bytes;
        Ok((
            Self {
                levels,
                count,
                width,
                norm,
                codebook,
                indices,
            },
            consumed,
        ))
    }
}

/// Bit split of a serialised frame.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct FrameBits {
    pub index: u64,
    pub codebook: u64,
    pub overhead: u64,
}

impl FrameBits {
    pub fn total(&self) -> u64 {
        self.index + self.codebook + self.overhead
    }
}

impl core::ops::AddAssign for FrameBits {
    fn add_assign(&mut self, rhs: Self) {
        self.index += rhs.index;
        self.codebook += rhs.codebook;
        self.overhead += rhs.overhead;
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Cursor<'a> {
    fn take<const N: usize>(&mut self) -> Result<[u8; N]> {
        let end = self.at + N;
        let slice = self
            .bytes
            .get(self.at..end)
            .ok_or_else(|| corrupt("truncated frame"))?;
        self.at = end;
        Ok(slice.try_into().expect("slice length checked"))
    }

    fn rest(&self) -> &'a [u8] {
        &self.bytes[self.at..]
    }
}

/// Raw little-endian `f32` encoding, used for full-precision updates and
/// model broadcasts.
pub fn encode_floats(values: impl IntoIterator<Item = f32>, out: &mut Vec<u8>) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn decode_floats(bytes: &[u8], count: usize) -> Result<Vec<f32>> {
    if bytes.len() < count * 4 {
        return Err(corrupt(format!("{} bytes cannot hold {count} floats", bytes.len())));
    }
    Ok(bytes[..count * 4]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("chunk of 4")))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quant::bu_codebook;
    use alloc::vec;
    use proptest::prelude::*;

    #[test]
    fn index_frame_layout() {
        let f = Frame::indices(4, 2, vec![1, 2, 3]);
        let bytes = f.to_bytes().unwrap();
        assert_eq!(bytes, vec![4, 0, 0, 0, 3, 0, 0, 0, 2, 0, 0x39]);
        let (back, used) = Frame::decode(&bytes).unwrap();
        assert_eq!(used, bytes.len());
        assert_eq!(back, f);
        let bits = f.bit_budget();
        assert_eq!(bits, FrameBits { index: 6, codebook: 0, overhead: 80 + 2 });
        assert_eq!(bits.total(), bytes.len() as u64 * 8);
    }

    #[test]
    fn codebook_frame_round_trips_through_half_precision() {
        let cb = bu_codebook(-1.0, 1.0, 4).unwrap();
        let f = Frame::codebook(&cb, BoundaryPrecision::Half);
        let bytes = f.to_bytes().unwrap();
        assert_eq!(bytes.len(), HEADER_BYTES + 5 * 2);
        assert_eq!(bytes[9], FLAG_CODEBOOK);
        let (back, _) = Frame::decode(&bytes).unwrap();
        let (p, boundaries) = back.codebook.unwrap();
        assert_eq!(p, BoundaryPrecision::Half);
        assert_eq!(boundaries, cb.boundaries());
        assert_eq!(f.bit_budget().codebook, 5 * 16);
    }

    #[test]
    fn half_precision_rounding_is_what_the_receiver_sees() {
        let cb = bu_codebook(-0.2, 0.2, 4).unwrap();
        let rounded = BoundaryPrecision::Half.round_codebook(&cb).unwrap();
        let bytes = Frame::codebook(&cb, BoundaryPrecision::Half).to_bytes().unwrap();
        let (back, _) = Frame::decode(&bytes).unwrap();
        assert_eq!(back.codebook.unwrap().1, rounded.boundaries());
        assert_ne!(rounded.boundaries(), cb.boundaries());
    }

    #[test]
    fn norm_frame() {
        let mut f = Frame::indices(8, 4, vec![3, 9, 0]);
        f.norm = Some(2.5);
        let bytes = f.to_bytes().unwrap();
        assert_eq!(bytes[9], FLAG_NORM);
        assert_eq!(Frame::decode(&bytes).unwrap().0, f);
        assert_eq!(f.bit_budget().total(), bytes.len() as u64 * 8);
    }

    #[test]
    fn rejects_garbage() {
        assert!(Frame::decode(&[1, 2, 3]).is_err());
        let mut bytes = Frame::indices(4, 2, vec![1, 2, 3]).to_bytes().unwrap();
        bytes[9] = 0x80;
        assert!(Frame::decode(&bytes).is_err());
        let mut bytes = Frame::indices(4, 2, vec![1, 2, 3, 1, 1]).to_bytes().unwrap();
        bytes.pop();
        assert!(Frame::decode(&bytes).is_err());
        let mut bytes = Frame::indices(4, 2, vec![]).to_bytes().unwrap();
        bytes[8] = 40;
        assert!(Frame::decode(&bytes).is_err());
    }

    #[test]
    fn precision_bits() {
        assert_eq!(BoundaryPrecision::from_bits(16).unwrap(), BoundaryPrecision::Half);
        assert_eq!(BoundaryPrecision::from_bits(32).unwrap().bits(), 32);
        assert!(BoundaryPrecision::from_bits(8).is_err());
    }

    #[test]
    fn float_blocks() {
        let mut out = Vec::new();
        encode_floats([1.5f32, -0.0, 3.25], &mut out);
        assert_eq!(out.len(), 12);
        assert_eq!(decode_floats(&out, 3).unwrap(), vec![1.5, -0.0, 3.25]);
        assert!(decode_floats(&out, 4).is_err());
    }

    proptest! {
        #[test]
        fn frames_round_trip(
            width in 0u8..=12,
            raw in proptest::collection::vec(any::<u32>(), 0..64),
            norm in proptest::option::of(0.0f32..1e3),
        ) {
            let mask = if width == 0 { 0 } else { (1u64 << width) - 1 };
            let idx: Vec<u32> = raw.iter().map(|&x| (u64::from(x) & mask) as u32).collect();
            let mut f = Frame::indices(1 << width, width, idx);
            f.norm = norm;
            let bytes = f.to_bytes().unwrap();
            prop_assert_eq!(f.bit_budget().total(), bytes.len() as u64 * 8);
            let (back, used) = Frame::decode(&bytes).unwrap();
            prop_assert_eq!(used, bytes.len());
            prop_assert_eq!(back, f);
        }
    }
}

//! Client update messages: one frame per layer, or raw floats when
//! uncompressed.

use alloc::format;
use alloc::vec::Vec;

use crate::costing::wire::{decode_floats, encode_floats, Frame, FrameBits, HEADER_BITS};
use crate::costing::PackedPayload;
use crate::error::{corrupt, Error, Result};
use crate::model::{ModelSpec, Update};
use crate::quant::{decode, encode, index_width, qsgd_decode, qsgd_encode, Codebook, QsgdLayerUpdate};
use crate::rng::{derive_seed, purpose};

use super::Quantiser;

/// Bits per QSGD symbol: a sign bit plus a magnitude in `[0, s]`.
pub fn qsgd_symbol_width(levels: u32) -> u8 {
    index_width(levels as usize + 1) + 1
}

/// Seed of the stochastic rounding for one layer of one client's update.
pub fn qsgd_seed(root: u64, round: usize, client: usize, layer: usize) -> u64 {
    derive_seed(derive_seed(root, purpose::QSGD, round as u64, client as u64), "layer", layer as u64, 0)
}

pub(crate) struct EncodeContext<'a> {
    pub quantiser: Quantiser,
    pub codebooks: &'a [Codebook],
    pub seed: u64,
    pub round: usize,
    pub client: usize,
}

pub(crate) fn encode_update(update: &Update, ctx: &EncodeContext<'_>) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    match ctx.quantiser {
        Quantiser::None => encode_floats(update.iter(), &mut out),
        Quantiser::BucketUniform { .. } | Quantiser::BucketQuantile { .. } => {
            for (values, cb) in update.per_layer.iter().zip(ctx.codebooks) {
                let q = encode(values, cb)?;
                Frame::indices(q.levels as u32, q.width(), q.indices).encode_into(&mut out)?;
            }
        }
        Quantiser::Qsgd { levels } => {
            let width = qsgd_symbol_width(levels);
            for (l, values) in update.per_layer.iter().enumerate() {
                let q = qsgd_encode(values, levels, qsgd_seed(ctx.seed, ctx.round, ctx.client, l))?;
                let symbols = q
                    .magnitudes
                    .iter()
                    .zip(&q.signs)
                    .map(|(&m, &neg)| (m << 1) | u32::from(neg))
                    .collect();
                let mut frame = Frame::indices(levels, width, symbols);
                frame.norm = Some(q.norm);
                frame.encode_into(&mut out)?;
            }
        }
    }
    Ok(out)
}

pub(crate) fn decode_update(
    bytes: &[u8],
    spec: &ModelSpec,
    quantiser: Quantiser,
    codebooks: &[Codebook],
) -> Result<Update> {
    let dims = spec.layer_dims();
    let mut per_layer = Vec::with_capacity(dims.len());
    let mut at = 0usize;
    match quantiser {
        Quantiser::None => {
            for &d in dims {
                per_layer.push(decode_floats(&bytes[at..], d)?);
                at += 4 * d;
            }
        }
        Quantiser::BucketUniform { .. } | Quantiser::BucketQuantile { .. } => {
            for (l, (&d, cb)) in dims.iter().zip(codebooks).enumerate() {
                let (frame, used) = Frame::decode(&bytes[at..])?;
                at += used;
                if frame.levels as usize != cb.levels() || frame.codebook.is_some() {
                    return Err(Error::CodebookMismatch { layer: l });
                }
                check_count(&frame, d, l)?;
                let q = crate::quant::QuantisedLayerUpdate {
                    indices: frame.indices,
                    levels: cb.levels(),
                };
                per_layer.push(decode(&q, cb)?);
            }
        }
        Quantiser::Qsgd { levels } => {
            for (l, &d) in dims.iter().enumerate() {
                let (frame, used) = Frame::decode(&bytes[at..])?;
                at += used;
                check_count(&frame, d, l)?;
                if frame.levels != levels || frame.width != qsgd_symbol_width(levels) {
                    return Err(corrupt(format!("layer {l}: unexpected QSGD frame shape")));
                }
                let norm = frame.norm.ok_or_else(|| corrupt("QSGD frame without norm"))?;
                let q = QsgdLayerUpdate {
                    norm,
                    signs: frame.indices.iter().map(|&s| s & 1 == 1).collect(),
                    magnitudes: frame.indices.iter().map(|&s| s >> 1).collect(),
                };
                per_layer.push(qsgd_decode(&q, levels)?);
            }
        }
    }
    if at != bytes.len() {
        return Err(corrupt(format!("{} trailing bytes after update", bytes.len() - at)));
    }
    Ok(Update::new(per_layer))
}

fn check_count(frame: &Frame, d: usize, layer: usize) -> Result<()> {
    if frame.count as usize != d {
        return Err(corrupt(format!(
            "layer {layer}: frame carries {} values, layer has {d}",
            frame.count
        )));
    }
    Ok(())
}

/// Bits one client's update message occupies, computed from the layer
/// layout alone.
pub fn expected_update_bits(spec: &ModelSpec, quantiser: Quantiser, codebooks: &[Codebook]) -> FrameBits {
    let dims = spec.layer_dims();
    let frame = |d: usize, width: u8, extra: u64| {
        let index = d as u64 * u64::from(width);
        FrameBits {
            index,
            codebook: 0,
            overhead: HEADER_BITS + extra + PackedPayload::byte_len(index as usize) as u64 * 8 - index,
        }
    };
    let mut total = FrameBits::default();
    match quantiser {
        Quantiser::None => total.index = 32 * spec.total_dim() as u64,
        Quantiser::BucketUniform { .. } | Quantiser::BucketQuantile { .. } => {
            for (&d, cb) in dims.iter().zip(codebooks) {
                total += frame(d, cb.index_width(), 0);
            }
        }
        Quantiser::Qsgd { levels } => {
            for &d in dims {
                total += frame(d, qsgd_symbol_width(levels), 32);
            }
        }
    }
    total
}

/// Bits of one codebook announcement covering every layer.
pub fn expected_codebook_bits(codebooks: &[Codebook], boundary_bits: u32) -> FrameBits {
    let mut total = FrameBits::default();
    for cb in codebooks {
        total += FrameBits {
            index: 0,
            codebook: (cb.levels() as u64 + 1) * u64::from(boundary_bits),
            overhead: HEADER_BITS,
        };
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quant::bu_codebook;
    use alloc::vec;

    fn spec() -> ModelSpec {
        ModelSpec::mlp(&[3, 2, 2]).unwrap()
    }

    fn update() -> Update {
        Update::new(vec![
            vec![0.1, -0.2, 0.05, 0.0, 0.3, -0.1, 0.02, 0.01],
            vec![-0.05, 0.2, 0.1, -0.3, 0.0, 0.15],
        ])
    }

    fn ctx<'a>(quantiser: Quantiser, codebooks: &'a [Codebook]) -> EncodeContext<'a> {
        EncodeContext { quantiser, codebooks, seed: 5, round: 2, client: 7 }
    }

    #[test]
    fn uncompressed_round_trip_is_exact() {
        let bytes = encode_update(&update(), &ctx(Quantiser::None, &[])).unwrap();
        assert_eq!(bytes.len() as u64 * 8, expected_update_bits(&spec(), Quantiser::None, &[]).total());
        assert_eq!(decode_update(&bytes, &spec(), Quantiser::None, &[]).unwrap(), update());
    }

    #[test]
    fn bucketed_round_trip_matches_codec() {
        let cbs = vec![bu_codebook(-0.3, 0.3, 8).unwrap(), bu_codebook(-0.3, 0.3, 3).unwrap()];
        let q = Quantiser::BucketUniform { levels: 8 };
        let bytes = encode_update(&update(), &ctx(q, &cbs)).unwrap();
        assert_eq!(bytes.len() as u64 * 8, expected_update_bits(&spec(), q, &cbs).total());
        let back = decode_update(&bytes, &spec(), q, &cbs).unwrap();
        for ((v, cb), out) in update().per_layer.iter().zip(&cbs).zip(&back.per_layer) {
            assert_eq!(out, &decode(&encode(v, cb).unwrap(), cb).unwrap());
        }
    }

    #[test]
    fn codebook_disagreement_is_detected() {
        let cbs = vec![bu_codebook(-0.3, 0.3, 8).unwrap(), bu_codebook(-0.3, 0.3, 8).unwrap()];
        let q = Quantiser::BucketUniform { levels: 8 };
        let bytes = encode_update(&update(), &ctx(q, &cbs)).unwrap();
        let other = vec![cbs[0].clone(), bu_codebook(-0.3, 0.3, 4).unwrap()];
        assert_eq!(
            decode_update(&bytes, &spec(), q, &other),
            Err(Error::CodebookMismatch { layer: 1 })
        );
    }

    #[test]
    fn qsgd_round_trip_matches_codec() {
        let q = Quantiser::Qsgd { levels: 4 };
        let bytes = encode_update(&update(), &ctx(q, &[])).unwrap();
        assert_eq!(bytes.len() as u64 * 8, expected_update_bits(&spec(), q, &[]).total());
        let back = decode_update(&bytes, &spec(), q, &[]).unwrap();
        for (l, (v, out)) in update().per_layer.iter().zip(&back.per_layer).enumerate() {
            let direct = qsgd_encode(v, 4, qsgd_seed(5, 2, 7, l)).unwrap();
            assert_eq!(out, &qsgd_decode(&direct, 4).unwrap());
        }
        assert_eq!(qsgd_symbol_width(4), 4);
        assert_eq!(qsgd_symbol_width(64), 8);
    }

    #[test]
    fn truncated_or_padded_messages_are_rejected() {
        let mut bytes = encode_update(&update(), &ctx(Quantiser::None, &[])).unwrap();
        bytes.push(0);
        assert!(decode_update(&bytes, &spec(), Quantiser::None, &[]).is_err());
        bytes.truncate(bytes.len() - 5);
        assert!(decode_update(&bytes, &spec(), Quantiser::None, &[]).is_err());
    }
}

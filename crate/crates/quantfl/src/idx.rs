//! IDX image/label files, the format the MNIST digits ship in.
//!
//! An IDX file is a big-endian header (`0x00 0x00 type ndim`, then one `u32`
//! per dimension) followed by the raw data. Images use `0x0803` (unsigned
//! bytes, three dimensions) and labels `0x0801` (unsigned bytes, one
//! dimension).

use std::path::Path;

use quantfl_core::data::Dataset;

/// Magic number of a rank-3 unsigned-byte tensor.
pub const IMAGES_MAGIC: u32 = 0x0000_0803;
/// Magic number of a rank-1 unsigned-byte tensor.
pub const LABELS_MAGIC: u32 = 0x0000_0801;
/// Digit labels.
pub const CLASSES: usize = 10;

#[derive(Debug, thiserror::Error)]
pub enum IdxError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{what}: bad magic number {found:#010x}, expected {expected:#010x}")]
    BadMagic { what: &'static str, found: u32, expected: u32 },
    #[error("{what}: file is {actual} bytes, header implies {expected}")]
    Length { what: &'static str, expected: u64, actual: u64 },
    #[error("{images} images but {labels} labels")]
    CountMismatch { images: usize, labels: usize },
    #[error("label {label} at position {index} is not a digit")]
    LabelRange { index: usize, label: u8 },
    #[error("{what}: expected {expected} samples, found {actual}")]
    UnexpectedCount { what: &'static str, expected: usize, actual: usize },
    #[error("{0}")]
    Empty(&'static str),
}

fn read_u32(bytes: &[u8], at: usize) -> Option<u32> {
    bytes.get(at..at + 4).map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
}

/// Validates the header and returns the dimensions and the data slice.
fn parse_header<'a>(
    bytes: &'a [u8],
    what: &'static str,
    magic: u32,
    rank: usize,
) -> Result<(Vec<usize>, &'a [u8]), IdxError> {
    let header = 4 + 4 * rank;
    let found = read_u32(bytes, 0).ok_or(IdxError::Length {
        what,
        expected: header as u64,
        actual: bytes.len() as u64,
    })?;
    if found != magic {
        return Err(IdxError::BadMagic { what, found, expected: magic });
    }
    let dims: Vec<usize> = (0..rank)
        .map(|i| read_u32(bytes, 4 + 4 * i).map(|v| v as usize))
        .collect::<Option<_>>()
        .ok_or(IdxError::Length {
            what,
            expected: header as u64,
            actual: bytes.len() as u64,
        })?;
    let payload = dims.iter().try_fold(1u64, |acc, &d| acc.checked_mul(d as u64));
    let expected = payload.and_then(|p| p.checked_add(header as u64)).unwrap_or(u64::MAX);
    if bytes.len() as u64 != expected {
        return Err(IdxError::Length {
            what,
            expected,
            actual: bytes.len() as u64,
        });
    }
    Ok((dims, &bytes[header..]))
}

/// Builds a dataset from the contents of an image file and a label file.
/// Pixels are scaled to `[0, 1]`.
pub fn parse_idx(images: &[u8], labels: &[u8]) -> Result<Dataset, IdxError> {
    let (dims, pixels) = parse_header(images, "images", IMAGES_MAGIC, 3)?;
    let (label_dims, label_bytes) = parse_header(labels, "labels", LABELS_MAGIC, 1)?;
    let (count, feature_dim) = (dims[0], dims[1] * dims[2]);
    if count != label_dims[0] {
        return Err(IdxError::CountMismatch {
            images: count,
            labels: label_dims[0],
        });
    }
    if count == 0 || feature_dim == 0 {
        return Err(IdxError::Empty("IDX files hold no samples"));
    }
    if let Some((index, &label)) = label_bytes.iter().enumerate().find(|(_, &l)| l as usize >= CLASSES) {
        return Err(IdxError::LabelRange { index, label });
    }
    let features = pixels.iter().map(|&p| f32::from(p) / 255.0).collect();
    let labels = label_bytes.iter().map(|&l| u32::from(l)).collect();
    Ok(Dataset::new(features, feature_dim, labels, CLASSES)
        .expect("validated IDX contents form a dataset"))
}

pub fn load_idx(images: &Path, labels: &Path) -> Result<Dataset, IdxError> {
    let read = |p: &Path| {
        std::fs::read(p).map_err(|source| IdxError::Io {
            path: p.display().to_string(),
            source,
        })
    };
    parse_idx(&read(images)?, &read(labels)?)
}

/// Serialises a dataset with byte-valued pixels back into IDX form, as
/// `(images, labels)`. Intended for fixtures.
pub fn write_idx(rows: usize, cols: usize, pixels: &[u8], labels: &[u8]) -> (Vec<u8>, Vec<u8>) {
    let mut img = Vec::with_capacity(16 + pixels.len());
    img.extend_from_slice(&IMAGES_MAGIC.to_be_bytes());
    img.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    img.extend_from_slice(&(rows as u32).to_be_bytes());
    img.extend_from_slice(&(cols as u32).to_be_bytes());
    img.extend_from_slice(pixels);
    let mut lab = Vec::with_capacity(8 + labels.len());
    lab.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    lab.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    lab.extend_from_slice(labels);
    (img, lab)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn single_blank_image() {
        let (img, lab) = write_idx(2, 2, &[0; 4], &[7]);
        let data = parse_idx(&img, &lab).unwrap();
        assert_eq!(data.len(), 1);
        assert_eq!(data.feature_dim(), 4);
        assert_eq!(data.class_count(), 10);
        assert!(data.row(0).iter().all(|&v| v == 0.0));
        assert_eq!(data.label(0), 7);
    }

    #[test]
    fn pixels_scale_to_unit_interval() {
        let (img, lab) = write_idx(1, 3, &[0, 51, 255], &[1]);
        assert_eq!(parse_idx(&img, &lab).unwrap().row(0), &[0.0, 0.2, 1.0]);
    }

    #[test]
    fn count_mismatch_is_rejected() {
        let (img, _) = write_idx(1, 1, &[1, 2], &[0, 1]);
        let (_, lab) = write_idx(1, 1, &[1], &[0]);
        assert!(matches!(parse_idx(&img, &lab), Err(IdxError::CountMismatch { images: 2, labels: 1 })));
    }

    #[test]
    fn swapped_files_fail_on_magic() {
        let (img, lab) = write_idx(1, 1, &[1], &[0]);
        assert!(matches!(parse_idx(&lab, &img), Err(IdxError::BadMagic { .. })));
    }

    #[test]
    fn truncation_and_trailing_bytes_are_rejected() {
        let (img, lab) = write_idx(2, 2, &[9; 8], &[0, 1]);
        assert!(matches!(parse_idx(&img[..img.len() - 1], &lab), Err(IdxError::Length { .. })));
        let mut long = img.clone();
        long.push(0);
        assert!(matches!(parse_idx(&long, &lab), Err(IdxError::Length { .. })));
        assert!(matches!(parse_idx(&img[..6], &lab), Err(IdxError::Length { .. })));
    }

    #[test]
    fn non_digit_labels_are_rejected() {
        let (img, lab) = write_idx(1, 1, &[0, 0], &[3, 10]);
        assert!(matches!(parse_idx(&img, &lab), Err(IdxError::LabelRange { index: 1, label: 10 })));
    }

    #[test]
    fn empty_files_are_rejected() {
        let (img, lab) = write_idx(1, 1, &[], &[]);
        assert!(matches!(parse_idx(&img, &lab), Err(IdxError::Empty(_))));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(512))]

        /// Every header field is pinned by the magic, the label count or the
        /// file length, so any altered header byte is rejected.
        #[test]
        fn corrupted_image_headers_are_rejected(pos in 0usize..16, byte in any::<u8>(), n in 1usize..4) {
            let pixels = vec![128u8; n * 4];
            let labels = vec![1u8; n];
            let (mut img, lab) = write_idx(2, 2, &pixels, &labels);
            let original = img[pos];
            img[pos] = byte;
            let parsed = parse_idx(&img, &lab);
            prop_assert_eq!(parsed.is_ok(), byte == original);
        }

        #[test]
        fn arbitrary_bytes_never_panic(img in proptest::collection::vec(any::<u8>(), 0..64),
                                       lab in proptest::collection::vec(any::<u8>(), 0..16)) {
            let _ = parse_idx(&img, &lab);
        }

        #[test]
        fn label_header_corruption_is_rejected(pos in 0usize..8, flip in 1u8..=255) {
            let (img, mut lab) = write_idx(1, 2, &[3, 4, 5, 6], &[2, 5]);
            lab[pos] ^= flip;
            prop_assert!(parse_idx(&img, &lab).is_err());
        }
    }
}

//! `.fseq` feature-sequence files.
//!
//! Layout (little-endian):
//! - magic `b"FSEQ"`
//! - version: u16 (= 1)
//! - S: u32, D: u32
//! - S·D f32 values, row-major
//!
//! Values are stored as f32 and widened to f64 on read.

use std::fs;
use std::path::Path;

use crate::tensor::Array;

use super::{DataError, FeatureSequence};

pub const FSEQ_MAGIC: &[u8; 4] = b"FSEQ";
pub const FSEQ_VERSION: u16 = 1;
const HEADER_LEN: usize = 4 + 2 + 4 + 4;

pub fn encode_fseq(seq: &FeatureSequence) -> Vec<u8> {
    let mut buf = Vec::with_capacity(HEADER_LEN + 4 * seq.vectors().len());
    buf.extend_from_slice(FSEQ_MAGIC);
    buf.extend_from_slice(&FSEQ_VERSION.to_le_bytes());
    buf.extend_from_slice(&(seq.len() as u32).to_le_bytes());
    buf.extend_from_slice(&(seq.dim() as u32).to_le_bytes());
    for &v in seq.vectors().data() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    buf
}

pub fn decode_fseq(bytes: &[u8], source_id: &str) -> Result<FeatureSequence, DataError> {
    if bytes.len() < 4 || &bytes[..4] != FSEQ_MAGIC {
        return Err(DataError::BadMagic);
    }
    if bytes.len() < HEADER_LEN {
        return Err(DataError::Truncated {
            expected: HEADER_LEN,
            found: bytes.len(),
        });
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != FSEQ_VERSION {
        return Err(DataError::UnsupportedVersion {
            found: version as u32,
            expected: FSEQ_VERSION as u32,
        });
    }
    let s = u32::from_le_bytes(bytes[6..10].try_into().expect("4 bytes")) as usize;
    let d = u32::from_le_bytes(bytes[10..14].try_into().expect("4 bytes")) as usize;
    if s == 0 || d == 0 {
        return Err(DataError::InvalidShape { shape: vec![s, d] });
    }
    let expected = HEADER_LEN + 4 * s * d;
    if bytes.len() < expected {
        return Err(DataError::Truncated {
            expected,
            found: bytes.len(),
        });
    }
    if bytes.len() > expected {
        return Err(DataError::TrailingBytes {
            expected,
            found: bytes.len(),
        });
    }
    let data = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    FeatureSequence::new(Array::new(vec![s, d], data)?, source_id)
}

pub fn write_fseq(seq: &FeatureSequence, path: impl AsRef<Path>) -> Result<(), DataError> {
    let path = path.as_ref();
    fs::write(path, encode_fseq(seq)).map_err(|e| DataError::io(path, e))
}

pub fn read_fseq(path: impl AsRef<Path>) -> Result<FeatureSequence, DataError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| DataError::io(path, e))?;
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    decode_fseq(&bytes, &id)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn seq(rows: &[[f64; 3]]) -> FeatureSequence {
        FeatureSequence::from_rows(rows, "x").unwrap()
    }

    #[test]
    fn header_layout_is_fixed() {
        let bytes = encode_fseq(&seq(&[[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]));
        assert_eq!(&bytes[..4], b"FSEQ");
        assert_eq!(&bytes[4..6], &[1, 0]);
        assert_eq!(&bytes[6..10], &[2, 0, 0, 0]);
        assert_eq!(&bytes[10..14], &[3, 0, 0, 0]);
        assert_eq!(&bytes[14..18], &1.0f32.to_le_bytes());
        assert_eq!(bytes.len(), 14 + 6 * 4);
    }

    #[test]
    fn corrupted_magic_is_reported() {
        let mut bytes = encode_fseq(&seq(&[[1.0, 2.0, 3.0]]));
        bytes[0] = b'X';
        assert!(matches!(decode_fseq(&bytes, "x"), Err(DataError::BadMagic)));
    }

    #[test]
    fn wrong_version_is_reported() {
        let mut bytes = encode_fseq(&seq(&[[1.0, 2.0, 3.0]]));
        bytes[4] = 2;
        assert!(matches!(
            decode_fseq(&bytes, "x"),
            Err(DataError::UnsupportedVersion { found: 2, .. })
        ));
    }

    #[test]
    fn short_payload_is_truncation() {
        let bytes = encode_fseq(&seq(&[[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]));
        assert!(matches!(
            decode_fseq(&bytes[..bytes.len() - 4], "x"),
            Err(DataError::Truncated { .. })
        ));
        assert!(matches!(decode_fseq(&bytes[..9], "x"), Err(DataError::Truncated { .. })));
    }

    #[test]
    fn long_payload_is_distinct_error() {
        let mut bytes = encode_fseq(&seq(&[[1.0, 2.0, 3.0]]));
        bytes.extend_from_slice(&[0, 0, 0, 0]);
        assert!(matches!(decode_fseq(&bytes, "x"), Err(DataError::TrailingBytes { .. })));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.fseq");
        let s = seq(&[[0.5, -0.25, 0.125]]);
        write_fseq(&s, &path).unwrap();
        let back = read_fseq(&path).unwrap();
        assert_eq!(back.vectors(), s.vectors());
        assert_eq!(back.source_id(), "a");
    }

    proptest! {
        #[test]
        fn round_trip_is_bitwise(s in 1usize..6, d in 1usize..6, seed in any::<u64>()) {
            // f32-representable values survive the f32 storage exactly.
            let data: Vec<f64> = (0..s * d)
                .map(|i| ((seed.wrapping_mul(6364136223846793005).wrapping_add(i as u64) >> 40) as f32 / 1e3) as f64)
                .collect();
            let original = FeatureSequence::new(Array::new(vec![s, d], data).unwrap(), "p").unwrap();
            let bytes = encode_fseq(&original);
            let decoded = decode_fseq(&bytes, "p").unwrap();
            prop_assert_eq!(decoded.vectors(), original.vectors());
            prop_assert_eq!(encode_fseq(&decoded), bytes);
        }
    }
}

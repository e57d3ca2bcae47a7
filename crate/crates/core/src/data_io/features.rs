//! Binary frame-feature files.
//!
//! Layout, all little-endian:
//!
//! | offset | size | field                                   |
//! |--------|------|-----------------------------------------|
//! | 0      | 4    | magic `DCVQ`                            |
//! | 4      | 4    | `u32` version, currently 1              |
//! | 8      | 4    | `u32` number of frames                  |
//! | 12     | 4    | `u32` feature dimension                 |
//! | 16     | 4·S·D| `f32` features, row-major (frame major) |
//!
//! Values are widened to `f64` on read.

use std::path::{Path, PathBuf};

use super::{io_err, DataError, Result};
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"DCVQ";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 16;

/// One video's frame features and its ground-truth score.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence {
    pub video_id: String,
    /// `[num_frames x feature_dim]`
    pub features: Tensor,
    pub mos: f64,
}

impl FeatureSequence {
    pub fn num_frames(&self) -> usize {
        self.features.rows()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.cols()
    }
}

/// Keeps frames `0..min(S, max_len)`.
pub fn truncate(seq: &FeatureSequence, max_len: usize) -> FeatureSequence {
    assert!(max_len >= 1, "max_len must be positive");
    let keep = seq.num_frames().min(max_len);
    if keep == seq.num_frames() {
        return seq.clone();
    }
    let dim = seq.feature_dim();
    let data = seq.features.data()[..keep * dim].to_vec();
    FeatureSequence {
        video_id: seq.video_id.clone(),
        features: Tensor::new(vec![keep, dim], data).expect("prefix of a valid tensor"),
        mos: seq.mos,
    }
}

pub fn encode_features(features: &Tensor) -> Vec<u8> {
    let (s, d) = (features.rows(), features.cols());
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * s * d);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(s as u32).to_le_bytes());
    out.extend_from_slice(&(d as u32).to_le_bytes());
    for &v in features.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

fn u32_at(bytes: &[u8], offset: usize) -> u32 {
    u32::from_le_bytes(bytes[offset..offset + 4].try_into().unwrap())
}

/// Parses a feature file image; `path` is only used in error messages.
pub fn decode_features(bytes: &[u8], path: &Path) -> Result<Tensor> {
    let fail = |offset: usize, msg: String| DataError::Format {
        path: path.to_path_buf(),
        offset: offset as u64,
        msg,
    };
    if bytes.len() < HEADER_LEN {
        return Err(fail(bytes.len(), format!("header truncated ({} of {HEADER_LEN} bytes)", bytes.len())));
    }
    if bytes[..4] != MAGIC {
        return Err(fail(0, format!("bad magic {:?}", &bytes[..4])));
    }
    let version = u32_at(bytes, 4);
    if version != VERSION {
        return Err(fail(4, format!("unsupported version {version}")));
    }
    let frames = u32_at(bytes, 8) as usize;
    if frames == 0 {
        return Err(fail(8, "zero frames".into()));
    }
    let dim = u32_at(bytes, 12) as usize;
    if dim == 0 {
        return Err(fail(12, "zero feature dimension".into()));
    }
    let expected = frames
        .checked_mul(dim)
        .and_then(|n| n.checked_mul(4))
        .and_then(|n| n.checked_add(HEADER_LEN))
        .ok_or_else(|| fail(8, "extents overflow".into()))?;
    if bytes.len() < expected {
        return Err(fail(
            bytes.len(),
            format!("payload truncated: header promises {expected} bytes, file has {}", bytes.len()),
        ));
    }
    if bytes.len() > expected {
        return Err(fail(expected, format!("{} trailing bytes", bytes.len() - expected)));
    }
    let mut data = Vec::with_capacity(frames * dim);
    for (i, chunk) in bytes[HEADER_LEN..].chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes(chunk.try_into().unwrap());
        if !v.is_finite() {
            return Err(fail(HEADER_LEN + 4 * i, format!("non-finite value {v}")));
        }
        data.push(f64::from(v));
    }
    Ok(Tensor::new(vec![frames, dim], data).expect("extents checked"))
}

pub fn read_features(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    decode_features(&bytes, path)
}

pub fn write_features(path: impl AsRef<Path>, features: &Tensor) -> Result<()> {
    let path: PathBuf = path.as_ref().to_path_buf();
    if features.shape().len() != 2 {
        return Err(DataError::Format {
            path,
            offset: 8,
            msg: format!("features must be a matrix, got shape {:?}", features.shape()),
        });
    }
    std::fs::write(&path, encode_features(features)).map_err(io_err(path))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn seq(frames: usize, dim: usize) -> FeatureSequence {
        let data = (0..frames * dim).map(|i| i as f64 * 0.5).collect();
        FeatureSequence {
            video_id: "v".into(),
            features: Tensor::new(vec![frames, dim], data).unwrap(),
            mos: 3.0,
        }
    }

    #[test]
    fn minimal_file() {
        let t = Tensor::new(vec![1, 4], vec![1.0, -2.5, 0.125, 7.0]).unwrap();
        let bytes = encode_features(&t);
        assert_eq!(bytes.len(), 16 + 16);
        assert_eq!(&bytes[..4], b"DCVQ");
        assert_eq!(decode_features(&bytes, Path::new("x")).unwrap(), t);
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.dcvq");
        let t = seq(3, 5).features;
        write_features(&path, &t).unwrap();
        let back = read_features(&path).unwrap();
        assert_eq!(back, t);
        write_features(&path, &back).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), encode_features(&t));
    }

    #[test]
    fn truncated_payload_reports_exact_offset() {
        let t = Tensor::zeros([3, 2]);
        let mut bytes = encode_features(&t);
        bytes.truncate(16 + 4 * 5 + 1); // header + 5.25 floats of the promised 6
        match decode_features(&bytes, Path::new("cut.dcvq")).unwrap_err() {
            DataError::Format { offset, .. } => assert_eq!(offset, 37),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn corrupt_headers() {
        let t = Tensor::zeros([2, 2]);
        let good = encode_features(&t);

        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(matches!(decode_features(&bad, Path::new("m")), Err(DataError::Format { offset: 0, .. })));

        let mut bad = good.clone();
        bad[4] = 9;
        assert!(matches!(decode_features(&bad, Path::new("v")), Err(DataError::Format { offset: 4, .. })));

        let mut bad = good.clone();
        bad.push(0);
        assert!(matches!(decode_features(&bad, Path::new("t")), Err(DataError::Format { offset: 32, .. })));

        let mut bad = good.clone();
        bad[16 + 8..16 + 12].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(matches!(decode_features(&bad, Path::new("n")), Err(DataError::Format { offset: 24, .. })));

        assert!(matches!(
            decode_features(&good[..10], Path::new("h")),
            Err(DataError::Format { offset: 10, .. })
        ));
    }

    #[test]
    fn truncation_rules() {
        let short = seq(100, 2);
        assert_eq!(truncate(&short, 600), short);
        let long = seq(700, 2);
        let cut = truncate(&long, 600);
        assert_eq!(cut.num_frames(), 600);
        assert_eq!(cut.features.data(), &long.features.data()[..1200]);
        let exact = seq(600, 2);
        assert_eq!(truncate(&exact, 600), exact);
    }

    proptest! {
        #[test]
        fn any_f32_matrix_round_trips(frames in 1usize..6, dim in 1usize..6, seed in any::<u64>()) {
            let mut state = seed;
            let data: Vec<f64> = (0..frames * dim)
                .map(|_| {
                    state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                    f64::from(f32::from_bits((state >> 32) as u32 & 0x7f7f_ffff) * if state & 1 == 0 { 1.0 } else { -1.0 })
                })
                .collect();
            let t = Tensor::new(vec![frames, dim], data).unwrap();
            let back = decode_features(&encode_features(&t), Path::new("p")).unwrap();
            prop_assert_eq!(back, t);
        }

        #[test]
        fn truncation_keeps_prefix(frames in 1usize..40, max_len in 1usize..50) {
            let s = seq(frames, 3);
            let cut = truncate(&s, max_len);
            prop_assert_eq!(cut.num_frames(), frames.min(max_len));
            prop_assert_eq!(cut.features.data(), &s.features.data()[..cut.num_frames() * 3]);
        }
    }
}

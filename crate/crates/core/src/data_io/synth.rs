//! Synthetic video-feature datasets with a known quality signal.
//!
//! Each video draws a latent quality `q ~ U(1, 5)`. Frame `t` carries
//! `q·w1 + burst(t)·amplitude·w2 + noise`, where `w1`, `w2` are seeded
//! orthonormal directions and `burst(t)` is 1 inside a few contiguous
//! "distorted" segments. The score is `clamp(q - penalty·coverage, 1, 5)`,
//! `coverage` being the fraction of frames inside a burst, so both the
//! global level and the localized segments matter.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::features::{write_features, FeatureSequence};
use super::manifest::{DatasetManifest, ManifestEntry};
use super::{io_err, DataError, Result};
use crate::tensor::Tensor;

pub const SCALE_MIN: f64 = 1.0;
pub const SCALE_MAX: f64 = 5.0;
const MIN_VIDEOS: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_videos: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub dim: usize,
    pub noise_sigma: f64,
    /// Upper bound on distorted segments per video; 0 disables them.
    pub max_bursts: usize,
    pub burst_amplitude: f64,
    /// Score lost per unit of burst coverage.
    pub burst_penalty: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_videos: 500,
            min_len: 60,
            max_len: 300,
            dim: 64,
            noise_sigma: 0.5,
            max_bursts: 3,
            burst_amplitude: 2.0,
            burst_penalty: 1.5,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(DataError::Synth(m));
        if self.n_videos < MIN_VIDEOS {
            return fail(format!("need at least {MIN_VIDEOS} videos, got {}", self.n_videos));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return fail(format!("bad length range {}..={}", self.min_len, self.max_len));
        }
        if self.dim < 2 {
            return fail("dim must be at least 2 to hold two orthogonal directions".into());
        }
        for (name, v) in [
            ("noise_sigma", self.noise_sigma),
            ("burst_amplitude", self.burst_amplitude),
            ("burst_penalty", self.burst_penalty),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return fail(format!("{name} must be finite and non-negative, got {v}"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SynthDataset {
    pub manifest: DatasetManifest,
    pub sequences: Vec<FeatureSequence>,
    pub latent_quality: Vec<f64>,
    pub burst_coverage: Vec<f64>,
    pub quality_direction: Vec<f64>,
    pub burst_direction: Vec<f64>,
}

fn unit(v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

/// Two orthonormal directions via Gram-Schmidt on Gaussian draws.
fn directions(dim: usize, rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<f64>) {
    let mut draw = || -> Vec<f64> { (0..dim).map(|_| StandardNormal.sample(&mut *rng)).collect() };
    let w1 = unit(draw());
    let raw = draw();
    let dot: f64 = raw.iter().zip(&w1).map(|(a, b)| a * b).sum();
    let w2 = unit(raw.iter().zip(&w1).map(|(a, b)| a - dot * b).collect());
    (w1, w2)
}

fn bursts(len: usize, max_bursts: usize, rng: &mut ChaCha8Rng) -> Vec<bool> {
    let mut mask = vec![false; len];
    if max_bursts == 0 {
        return mask;
    }
    let count = rng.random_range(0..=max_bursts);
    let (lo, hi) = ((len / 20).max(1), (len / 5).max(1));
    for _ in 0..count {
        let width = rng.random_range(lo..=hi);
        let start = rng.random_range(0..=len - width);
        mask[start..start + width].iter_mut().for_each(|m| *m = true);
    }
    mask
}

fn video_id(i: usize) -> String {
    format!("synth_{i:05}")
}

fn one_video(cfg: &SynthConfig, i: usize, w1: &[f64], w2: &[f64]) -> (FeatureSequence, f64, f64) {
    // Per-video streams keep generation order-independent (and parallel).
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(i as u64 + 1);
    let q = rng.random_range(SCALE_MIN..SCALE_MAX);
    let len = rng.random_range(cfg.min_len..=cfg.max_len);
    let mask = bursts(len, cfg.max_bursts, &mut rng);
    let noise = Normal::new(0.0, cfg.noise_sigma).expect("validated sigma");
    let mut data = Vec::with_capacity(len * cfg.dim);
    for &burst in &mask {
        let b = if burst { cfg.burst_amplitude } else { 0.0 };
        for j in 0..cfg.dim {
            let eps = if cfg.noise_sigma > 0.0 { noise.sample(&mut rng) } else { 0.0 };
            // Stored on disk as f32; round now so memory matches the files.
            data.push(f64::from((q * w1[j] + b * w2[j] + eps) as f32));
        }
    }
    let coverage = mask.iter().filter(|&&m| m).count() as f64 / len as f64;
    let mos = (q - cfg.burst_penalty * coverage).clamp(SCALE_MIN, SCALE_MAX);
    let seq = FeatureSequence {
        video_id: video_id(i),
        features: Tensor::new(vec![len, cfg.dim], data).expect("extents match"),
        mos,
    };
    (seq, q, coverage)
}

/// Builds the dataset in memory; the manifest's base directory is empty.
pub fn generate(cfg: &SynthConfig) -> Result<SynthDataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (w1, w2) = directions(cfg.dim, &mut rng);
    let videos: Vec<_> = (0..cfg.n_videos).into_par_iter().map(|i| one_video(cfg, i, &w1, &w2)).collect();
    let mut sequences = Vec::with_capacity(videos.len());
    let (mut latent_quality, mut burst_coverage) = (Vec::new(), Vec::new());
    for (s, q, c) in videos {
        sequences.push(s);
        latent_quality.push(q);
        burst_coverage.push(c);
    }
    let entries = sequences
        .iter()
        .map(|s| ManifestEntry {
            video_id: s.video_id.clone(),
            feature_path: format!("{}.dcvq", s.video_id),
            mos: s.mos,
        })
        .collect();
    Ok(SynthDataset {
        manifest: DatasetManifest::new(entries, SCALE_MIN, SCALE_MAX, PathBuf::new())?,
        sequences,
        latent_quality,
        burst_coverage,
        quality_direction: w1,
        burst_direction: w2,
    })
}

pub const MANIFEST_NAME: &str = "manifest.jsonl";

/// Generates the dataset and writes `<video_id>.dcvq` files plus
/// `manifest.jsonl` into `out_dir`.
pub fn synth_dataset(cfg: &SynthConfig, out_dir: impl AsRef<Path>) -> Result<SynthDataset> {
    let dir = out_dir.as_ref();
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut ds = generate(cfg)?;
    ds.manifest.base_dir = dir.to_path_buf();
    ds.sequences
        .par_iter()
        .zip(&ds.manifest.entries)
        .try_for_each(|(s, e)| write_features(dir.join(&e.feature_path), &s.features))?;
    ds.manifest.save(dir.join(MANIFEST_NAME))?;
    Ok(ds)
}

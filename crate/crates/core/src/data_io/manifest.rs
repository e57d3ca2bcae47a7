//! Line-delimited JSON dataset manifests.
//!
//! The first record is the header `{"scale_min": .., "scale_max": ..}`;
//! every following non-empty line is one entry
//! `{"video_id": .., "feature_path": .., "mos": ..}`. Feature paths are
//! resolved relative to the manifest's directory.

use std::collections::HashSet;
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::features::{read_features, FeatureSequence};
use super::split::{split_indices, SplitSpec};
use super::{io_err, DataError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub video_id: String,
    pub feature_path: String,
    pub mos: f64,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    scale_min: f64,
    scale_max: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
    pub scale_min: f64,
    pub scale_max: f64,
    /// Directory that relative feature paths are resolved against.
    pub base_dir: PathBuf,
}

impl DatasetManifest {
    pub fn new(entries: Vec<ManifestEntry>, scale_min: f64, scale_max: f64, base_dir: impl Into<PathBuf>) -> Result<Self> {
        let m = Self {
            entries,
            scale_min,
            scale_max,
            base_dir: base_dir.into(),
        };
        m.validate()?;
        Ok(m)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(DataError::InvalidManifest(m));
        if !(self.scale_min.is_finite() && self.scale_max.is_finite() && self.scale_min < self.scale_max) {
            return bad(format!("scale [{}, {}] is empty", self.scale_min, self.scale_max));
        }
        let mut seen = HashSet::new();
        for e in &self.entries {
            if !seen.insert(e.video_id.as_str()) {
                return bad(format!("duplicate video_id `{}`", e.video_id));
            }
            if !e.mos.is_finite() || e.mos < self.scale_min || e.mos > self.scale_max {
                return bad(format!(
                    "mos {} of `{}` outside [{}, {}]",
                    e.mos, e.video_id, self.scale_min, self.scale_max
                ));
            }
        }
        Ok(())
    }

    pub fn parse(text: &str, source: &Path, base_dir: impl Into<PathBuf>) -> Result<Self> {
        let err = |line: usize, msg: String| DataError::Manifest {
            path: source.to_path_buf(),
            line,
            msg,
        };
        let mut lines = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.trim()))
            .filter(|(_, l)| !l.is_empty());
        let (hl, header) = lines.next().ok_or_else(|| err(1, "missing header record".into()))?;
        let header: Header = serde_json::from_str(header).map_err(|e| err(hl, format!("bad header: {e}")))?;
        let entries = lines
            .map(|(n, l)| serde_json::from_str::<ManifestEntry>(l).map_err(|e| err(n, e.to_string())))
            .collect::<Result<Vec<_>>>()?;
        Self::new(entries, header.scale_min, header.scale_max, base_dir)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&text, path, base)
    }

    pub fn to_jsonl(&self) -> String {
        let header = Header {
            scale_min: self.scale_min,
            scale_max: self.scale_max,
        };
        let mut out = serde_json::to_string(&header).expect("plain struct");
        out.push('\n');
        for e in &self.entries {
            out.push_str(&serde_json::to_string(e).expect("plain struct"));
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut f = std::fs::File::create(path).map_err(io_err(path))?;
        f.write_all(self.to_jsonl().as_bytes()).map_err(io_err(path))
    }

    pub fn resolve(&self, entry: &ManifestEntry) -> PathBuf {
        self.base_dir.join(&entry.feature_path)
    }

    pub fn load_entry(&self, entry: &ManifestEntry) -> Result<FeatureSequence> {
        Ok(FeatureSequence {
            video_id: entry.video_id.clone(),
            features: read_features(self.resolve(entry))?,
            mos: entry.mos,
        })
    }

    /// Reads every feature file, in manifest order.
    pub fn load_sequences(&self) -> Result<Vec<FeatureSequence>> {
        self.entries.par_iter().map(|e| self.load_entry(e)).collect()
    }

    fn subset(&self, idx: &[usize]) -> Self {
        Self {
            entries: idx.iter().map(|&i| self.entries[i].clone()).collect(),
            scale_min: self.scale_min,
            scale_max: self.scale_max,
            base_dir: self.base_dir.clone(),
        }
    }

    /// Seeded train/validation/test partition.
    pub fn split(&self, spec: &SplitSpec) -> Result<(Self, Self, Self)> {
        let s = split_indices(self.len(), spec)?;
        Ok((self.subset(&s.train), self.subset(&s.val), self.subset(&s.test)))
    }
}

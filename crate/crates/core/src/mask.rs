//! Attention masks for clip-local attention.
//!
//! Position 0 of every masked sequence is reserved for the video-level
//! embedding and is never masked, neither as a query nor as a key. Frame
//! positions `i, j >= 1` may attend to each other only when `|i - j| <= r`.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

/// Radius of the attention window between frame positions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TemporalRange {
    /// Frames `i` and `j` see each other when `|i - j| <= r`.
    Radius(usize),
    /// No temporal restriction inside a clip.
    All,
}

impl TemporalRange {
    pub fn admits(self, i: usize, j: usize) -> bool {
        match self {
            TemporalRange::All => true,
            TemporalRange::Radius(r) => i.abs_diff(j) <= r,
        }
    }
}

impl fmt::Display for TemporalRange {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TemporalRange::Radius(r) => write!(f, "{r}"),
            TemporalRange::All => f.write_str("all"),
        }
    }
}

impl FromStr for TemporalRange {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        if s.eq_ignore_ascii_case("all") {
            return Ok(TemporalRange::All);
        }
        s.parse::<usize>()
            .map(TemporalRange::Radius)
            .map_err(|_| format!("temporal range must be a non-negative integer or `all`, got `{s}`"))
    }
}

impl Serialize for TemporalRange {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        match self {
            TemporalRange::Radius(r) => serializer.serialize_u64(*r as u64),
            TemporalRange::All => serializer.serialize_str("all"),
        }
    }
}

impl<'de> Deserialize<'de> for TemporalRange {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(u64),
            Text(String),
        }
        match Raw::deserialize(deserializer)? {
            Raw::Num(n) => Ok(TemporalRange::Radius(n as usize)),
            Raw::Text(s) => s.parse().map_err(serde::de::Error::custom),
        }
    }
}

/// Square boolean admissibility matrix, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMask {
    size: usize,
    range: TemporalRange,
    admissible: Arc<[bool]>,
}

impl AttentionMask {
    /// Mask for a sequence of `size` positions where position 0 is the
    /// reserved video-level slot.
    pub fn clip(size: usize, range: TemporalRange) -> Self {
        let mut admissible = vec![false; size * size];
        for i in 0..size {
            for j in 0..size {
                admissible[i * size + j] = i == 0 || j == 0 || range.admits(i, j);
            }
        }
        Self {
            size,
            range,
            admissible: admissible.into(),
        }
    }

    /// Fully admissible mask (plain self-attention).
    pub fn full(size: usize) -> Self {
        Self {
            size,
            range: TemporalRange::All,
            admissible: vec![true; size * size].into(),
        }
    }

    /// Builds a mask from an explicit matrix. Used mostly by tests that need
    /// degenerate rows.
    pub fn from_matrix(size: usize, admissible: Vec<bool>) -> Self {
        assert_eq!(admissible.len(), size * size, "mask must be size x size");
        Self {
            size,
            range: TemporalRange::All,
            admissible: admissible.into(),
        }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn range(&self) -> TemporalRange {
        self.range
    }

    pub fn admits(&self, i: usize, j: usize) -> bool {
        self.admissible[i * self.size + j]
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.admissible
    }

    pub(crate) fn shared(&self) -> Arc<[bool]> {
        Arc::clone(&self.admissible)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reserved_row_and_column_are_open() {
        let m = AttentionMask::clip(7, TemporalRange::Radius(1));
        for k in 0..7 {
            assert!(m.admits(0, k));
            assert!(m.admits(k, 0));
            assert!(m.admits(k, k));
        }
        assert!(m.admits(2, 3));
        assert!(!m.admits(2, 4));
        assert!(!m.admits(6, 1));
    }

    #[test]
    fn symmetric_for_every_radius() {
        for r in 0..5 {
            let m = AttentionMask::clip(9, TemporalRange::Radius(r));
            for i in 0..9 {
                for j in 0..9 {
                    assert_eq!(m.admits(i, j), m.admits(j, i));
                }
            }
        }
    }

    #[test]
    fn all_range_is_full() {
        let m = AttentionMask::clip(5, TemporalRange::All);
        assert!(m.as_slice().iter().all(|&a| a));
    }

    #[test]
    fn range_parses_and_serializes() {
        assert_eq!("15".parse::<TemporalRange>().unwrap(), TemporalRange::Radius(15));
        assert_eq!("ALL".parse::<TemporalRange>().unwrap(), TemporalRange::All);
        assert!("-2".parse::<TemporalRange>().is_err());
        let json = serde_json::to_string(&TemporalRange::All).unwrap();
        assert_eq!(json, "\"all\"");
        let back: TemporalRange = serde_json::from_str("12").unwrap();
        assert_eq!(back, TemporalRange::Radius(12));
    }
}

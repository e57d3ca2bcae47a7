//! Seeded train/validation/test partitions.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{DataError, Result};

/// Smallest dataset that leaves every partition non-empty at 60/20/20.
pub const MIN_ENTRIES: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSpec {
    pub train_frac: f64,
    pub val_frac: f64,
    pub test_frac: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            train_frac: 0.6,
            val_frac: 0.2,
            test_frac: 0.2,
            seed: 0,
        }
    }
}

impl SplitSpec {
    pub fn with_seed(seed: u64) -> Self {
        Self { seed, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let f = [self.train_frac, self.val_frac, self.test_frac];
        if f.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(DataError::Split(format!("fractions must be positive, got {f:?}")));
        }
        let sum: f64 = f.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(DataError::Split(format!("fractions sum to {sum}, not 1")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Shuffles `0..n` with `spec.seed` and cuts the permutation at
/// `floor(train·n)` and `floor((train+val)·n)`.
pub fn split_indices(n: usize, spec: &SplitSpec) -> Result<SplitIndices> {
    spec.validate()?;
    if n < MIN_ENTRIES {
        return Err(DataError::TooFewEntries { need: MIN_ENTRIES, got: n });
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(spec.seed));
    // The epsilon keeps exact products like 0.6 * 10 from flooring to 5.
    let a = (spec.train_frac * n as f64 + 1e-9).floor() as usize;
    let b = ((spec.train_frac + spec.val_frac) * n as f64 + 1e-9).floor() as usize;
    let (a, b) = (a.min(n), b.min(n).max(a));
    Ok(SplitIndices {
        train: order[..a].to_vec(),
        val: order[a..b].to_vec(),
        test: order[b..].to_vec(),
    })
}

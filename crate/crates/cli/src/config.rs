//! Config file loading and flag overrides.

use std::path::Path;

use dcvqe::data_io::{SplitSpec, SynthConfig};
use dcvqe::model::DcvqeConfig;
use dcvqe::training::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::args::Common;
use crate::error::{CliError, Result};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: DcvqeConfig,
    pub train: TrainConfig,
    pub split: SplitSpec,
    pub synth: SynthConfig,
}

/// Resolved settings plus whether the model's input width was given
/// explicitly (otherwise it is taken from the data).
#[derive(Debug, Clone)]
pub struct Resolved {
    pub run: RunConfig,
    pub input_dim_set: bool,
}

impl Resolved {
    pub fn load(common: &Common) -> Result<Self> {
        let (mut run, mut input_dim_set) = match &common.config {
            Some(path) => read_file(path)?,
            None => (RunConfig::default(), false),
        };
        apply(&mut run, common);
        input_dim_set |= common.input_dim.is_some();
        Ok(Self { run, input_dim_set })
    }

    /// Fills in the input width from the data unless it was set.
    pub fn fit_input_dim(&mut self, data_dim: usize) {
        if !self.input_dim_set {
            self.run.model.input_dim = data_dim;
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(&self.run).expect("config serializes")
    }
}

fn read_file(path: &Path) -> Result<(RunConfig, bool)> {
    let usage = |m: String| CliError::Usage(format!("config {}: {m}", path.display()));
    let text = std::fs::read_to_string(path).map_err(|e| usage(e.to_string()))?;
    let table: toml::Table = toml::from_str(&text).map_err(|e| usage(e.to_string()))?;
    let input_dim_set = table
        .get("model")
        .and_then(|m| m.as_table())
        .is_some_and(|m| m.contains_key("input_dim"));
    let run: RunConfig = toml::Value::Table(table).try_into().map_err(|e: toml::de::Error| usage(e.to_string()))?;
    Ok((run, input_dim_set))
}

fn apply(run: &mut RunConfig, c: &Common) {
    macro_rules! set {
        ($flag:expr => $($target:expr),+) => {
            if let Some(v) = $flag {
                $($target = v.clone();)+
            }
        };
    }
    set!(&c.seed => run.train.seed, run.split.seed, run.synth.seed);
    set!(&c.epochs => run.train.max_epochs);
    set!(&c.batch_size => run.train.batch_size);
    set!(&c.lr => run.train.learning_rate);
    set!(&c.alpha => run.train.loss.alpha);
    set!(&c.beta => run.train.loss.beta);
    set!(&c.loss => run.train.loss.variant);
    set!(&c.repetitions => run.train.repetitions);
    set!(&c.temporal_range => run.model.temporal_range);
    set!(&c.clip_len => run.model.clip_len);
    set!(&c.layers => run.model.num_layers);
    set!(&c.heads => run.model.num_heads);
    set!(&c.max_len => run.model.max_seq_len);
    set!(&c.model_dim => run.model.model_dim);
    set!(&c.input_dim => run.model.input_dim);
}

#[cfg(test)]
mod tests {
    use super::*;
    use dcvqe::losses::LossVariant;
    use dcvqe::mask::TemporalRange;

    #[test]
    fn flags_override_file_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(
            &path,
            "[model]\nmodel_dim = 16\ntemporal_range = \"all\"\n[train]\nmax_epochs = 5\nlearning_rate = 0.01\n[train.loss]\nvariant = \"pwrl\"\n",
        )
        .unwrap();
        let common = Common {
            config: Some(path),
            epochs: Some(2),
            seed: Some(9),
            ..Common::default()
        };
        let r = Resolved::load(&common).unwrap();
        assert_eq!(r.run.model.model_dim, 16);
        assert_eq!(r.run.model.temporal_range, TemporalRange::All);
        assert_eq!(r.run.train.max_epochs, 2);
        assert_eq!(r.run.train.learning_rate, 0.01);
        assert_eq!(r.run.train.loss.variant, LossVariant::PairwiseRanking);
        assert_eq!((r.run.train.seed, r.run.split.seed, r.run.synth.seed), (9, 9, 9));
        assert!(!r.input_dim_set);
    }

    #[test]
    fn resolved_config_round_trips_through_toml() {
        let mut r = Resolved::load(&Common::default()).unwrap();
        r.run.model.temporal_range = TemporalRange::Radius(7);
        let back: RunConfig = toml::from_str(&r.to_toml()).unwrap();
        assert_eq!(back, r.run);
    }

    #[test]
    fn unknown_keys_are_usage_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.toml");
        std::fs::write(&path, "[model]\nwidth = 3\n").unwrap();
        let err = Resolved::load(&Common {
            config: Some(path),
            ..Common::default()
        })
        .unwrap_err();
        assert_eq!(err.exit_code(), 1);
    }
}

//! Finite-difference check of the whole network under the batch loss.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{batch_objective, Result};
use crate::gradcheck::{gradient_check, GradCheckReport};
use crate::losses::LossConfig;
use crate::mask::TemporalRange;
use crate::model::{param_shapes, DcvqeConfig, DcvqeModel};
use crate::tensor::Tensor;

/// Central-difference step used by the suite.
pub const GRADCHECK_STEP: f64 = 1e-5;
/// Largest accepted relative error.
pub const GRADCHECK_TOL: f64 = 1e-4;
/// Initialisation spread for the check; larger than the training default
/// so gradients sit well above finite-difference round-off.
pub const GRADCHECK_INIT_STD: f64 = 0.5;

/// Small network, batch and targets used by the suite.
#[derive(Debug, Clone)]
pub struct GradCheckCase {
    pub model: DcvqeModel,
    pub videos: Vec<Tensor>,
    pub targets: Vec<f64>,
    pub loss: LossConfig,
}

impl GradCheckCase {
    /// D=8, two heads, two layers, clips of 4 frames, three 10-frame videos.
    pub fn tiny(seed: u64) -> Result<Self> {
        let cfg = DcvqeConfig {
            input_dim: 6,
            model_dim: 8,
            num_heads: 2,
            num_layers: 2,
            clip_len: 4,
            temporal_range: TemporalRange::Radius(2),
            max_seq_len: 10,
        };
        let model = DcvqeModel::with_init_std(cfg, seed, GRADCHECK_INIT_STD)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        let videos = (0..3)
            .map(|_| {
                let data = (0..10 * 6).map(|_| rng.random_range(-1.0..1.0)).collect();
                Tensor::new(vec![10, 6], data).expect("fixed shape")
            })
            .collect();
        Ok(Self {
            model,
            videos,
            targets: vec![1.5, 3.25, 4.5],
            loss: LossConfig::default(),
        })
    }

    /// Checks every parameter of the model against central differences.
    pub fn run(&self, h: f64) -> Result<GradCheckReport> {
        let cfg = self.model.config().clone();
        let params: Vec<Tensor> = self.model.params().entries().into_iter().map(|(_, t)| t.clone()).collect();
        let refs: Vec<&Tensor> = self.videos.iter().collect();
        let report = gradient_check(
            |g, vars| {
                let mut it = vars.iter().copied();
                let bound = param_shapes(&cfg).map(|_, _| it.next().expect("one leaf per parameter"));
                batch_objective(g, &cfg, &bound, &refs, &self.targets, &self.loss)
                    .map_err(|e| crate::tensor::TensorError::Contract(e.to_string()))
            },
            &params,
            h,
        )?;
        Ok(report)
    }

    pub fn param_names(&self) -> Vec<String> {
        self.model.params().entries().into_iter().map(|(n, _)| n).collect()
    }
}

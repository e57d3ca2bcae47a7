//! The divide-and-conquer quality estimator.
//!
//! Frame features are projected to `model_dim`, combined with learned
//! positional embeddings, and passed through `num_layers` DCTr layers. Each
//! layer splits the frame sequence into clips, runs the masked, residual
//! TransformerD over `[video_qe; clip_frames]` for every clip (shared
//! weights), then merges the resulting clip embeddings with the unmasked,
//! residual-free TransformerC followed by average pooling. Clip length
//! doubles with every layer. A linear regressor on the last video embedding
//! produces the score.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mask::{AttentionMask, TemporalRange};
use crate::tensor::{Graph, Tensor, TensorError, Var};

/// Standard deviation of the default parameter initialization.
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("sequence has {len} frames, more than max_seq_len {max}")]
    Length { len: usize, max: usize },
    #[error("empty frame sequence")]
    Empty,
    #[error("feature width {got} does not match input_dim {expected}")]
    FeatureWidth { got: usize, expected: usize },
    #[error("parameter `{name}` has shape {found:?}, expected {expected:?}")]
    ParamShape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("parameter `{0}` is missing")]
    MissingParam(String),
    #[error("unexpected parameter `{0}`")]
    UnexpectedParam(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DcvqeConfig {
    pub input_dim: usize,
    pub model_dim: usize,
    pub num_heads: usize,
    pub num_layers: usize,
    /// Frames per clip in the first layer; layer `k` uses `clip_len * 2^(k-1)`.
    pub clip_len: usize,
    pub temporal_range: TemporalRange,
    pub max_seq_len: usize,
}

impl Default for DcvqeConfig {
    fn default() -> Self {
        Self {
            input_dim: 4096,
            model_dim: 128,
            num_heads: 4,
            num_layers: 3,
            clip_len: 30,
            temporal_range: TemporalRange::Radius(15),
            max_seq_len: 600,
        }
    }
}

impl DcvqeConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(ModelError::Config(m));
        if self.input_dim == 0 || self.model_dim == 0 {
            return fail("input_dim and model_dim must be positive".into());
        }
        if self.num_heads == 0 || !self.model_dim.is_multiple_of(self.num_heads) {
            return fail(format!(
                "model_dim {} is not divisible by num_heads {}",
                self.model_dim, self.num_heads
            ));
        }
        if self.num_layers == 0 {
            return fail("num_layers must be at least 1".into());
        }
        if self.clip_len == 0 {
            return fail("clip_len must be at least 1".into());
        }
        if self.temporal_range == TemporalRange::Radius(0) {
            return fail("temporal_range must be at least 1 or `all`".into());
        }
        if self.max_seq_len < self.clip_len {
            return fail(format!(
                "max_seq_len {} is shorter than clip_len {}",
                self.max_seq_len, self.clip_len
            ));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.num_heads
    }

    /// Clip length used by layer `k` (1-based).
    pub fn clip_len_at(&self, k: usize) -> usize {
        let shift = u32::try_from(k.saturating_sub(1)).unwrap_or(u32::MAX);
        self.clip_len
            .saturating_mul(1usize.checked_shl(shift).unwrap_or(usize::MAX))
    }
}

/// Query/Key/Value projections of one attention block.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams<T> {
    pub query: T,
    pub key: T,
    pub value: T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<T> {
    pub divide: AttentionParams<T>,
    pub conquer: AttentionParams<T>,
}

/// Every learnable quantity of the model, generic over the storage so the
/// same layout serves for tensors, graph handles, optimizer moments and
/// shapes.
#[derive(Debug, Clone, PartialEq)]
pub struct Params<T> {
    pub input_weight: T,
    pub input_bias: T,
    pub positional: T,
    pub video_token: T,
    pub layers: Vec<LayerParams<T>>,
    pub regressor_weight: T,
    pub regressor_bias: T,
}

impl<T> Params<T> {
    /// Parameters in canonical order with their stable names.
    pub fn entries(&self) -> Vec<(String, &T)> {
        let mut out = vec![
            ("input.weight".to_string(), &self.input_weight),
            ("input.bias".to_string(), &self.input_bias),
            ("positional".to_string(), &self.positional),
            ("video_token".to_string(), &self.video_token),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            for (block, a) in [("divide", &l.divide), ("conquer", &l.conquer)] {
                out.push((format!("layers.{i}.{block}.query"), &a.query));
                out.push((format!("layers.{i}.{block}.key"), &a.key));
                out.push((format!("layers.{i}.{block}.value"), &a.value));
            }
        }
        out.push(("regressor.weight".to_string(), &self.regressor_weight));
        out.push(("regressor.bias".to_string(), &self.regressor_bias));
        out
    }

    /// Same order as [`Params::entries`].
    pub fn values_mut(&mut self) -> Vec<&mut T> {
        let mut out = vec![
            &mut self.input_weight,
            &mut self.input_bias,
            &mut self.positional,
            &mut self.video_token,
        ];
        for l in &mut self.layers {
            for a in [&mut l.divide, &mut l.conquer] {
                out.push(&mut a.query);
                out.push(&mut a.key);
                out.push(&mut a.value);
            }
        }
        out.push(&mut self.regressor_weight);
        out.push(&mut self.regressor_bias);
        out
    }

    pub fn map<U>(&self, mut f: impl FnMut(&str, &T) -> U) -> Params<U> {
        let attn = |f: &mut dyn FnMut(&str, &T) -> U, prefix: String, a: &AttentionParams<T>| AttentionParams {
            query: f(&format!("{prefix}.query"), &a.query),
            key: f(&format!("{prefix}.key"), &a.key),
            value: f(&format!("{prefix}.value"), &a.value),
        };
        let input_weight = f("input.weight", &self.input_weight);
        let input_bias = f("input.bias", &self.input_bias);
        let positional = f("positional", &self.positional);
        let video_token = f("video_token", &self.video_token);
        let layers = self
            .layers
            .iter()
            .enumerate()
            .map(|(i, l)| LayerParams {
                divide: attn(&mut f, format!("layers.{i}.divide"), &l.divide),
                conquer: attn(&mut f, format!("layers.{i}.conquer"), &l.conquer),
            })
            .collect();
        Params {
            input_weight,
            input_bias,
            positional,
            video_token,
            layers,
            regressor_weight: f("regressor.weight", &self.regressor_weight),
            regressor_bias: f("regressor.bias", &self.regressor_bias),
        }
    }
}

/// Expected parameter shapes for a configuration.
pub fn param_shapes(cfg: &DcvqeConfig) -> Params<Vec<usize>> {
    let d = cfg.model_dim;
    let attn = || AttentionParams {
        query: vec![d, d],
        key: vec![d, d],
        value: vec![d, d],
    };
    Params {
        input_weight: vec![cfg.input_dim, d],
        input_bias: vec![1, d],
        positional: vec![cfg.max_seq_len + 1, d],
        video_token: vec![1, d],
        layers: (0..cfg.num_layers)
            .map(|_| LayerParams {
                divide: attn(),
                conquer: attn(),
            })
            .collect(),
        regressor_weight: vec![d, 1],
        regressor_bias: vec![1],
    }
}

fn is_bias(name: &str) -> bool {
    name.ends_with(".bias")
}

#[derive(Debug, Clone, PartialEq)]
pub struct DcvqeModel {
    config: DcvqeConfig,
    params: Params<Tensor>,
}

impl DcvqeModel {
    /// Seeded initialization: weights, positional table and video token from
    /// `N(0, INIT_STD^2)`, biases zero.
    pub fn new(config: DcvqeConfig, seed: u64) -> Result<Self> {
        Self::with_init_std(config, seed, INIT_STD)
    }

    pub fn with_init_std(config: DcvqeConfig, seed: u64, std: f64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, std).map_err(|e| ModelError::Config(e.to_string()))?;
        let params = param_shapes(&config).map(|name, shape| {
            let n = shape.iter().product();
            let data = if is_bias(name) {
                vec![0.0; n]
            } else {
                (0..n).map(|_| normal.sample(&mut rng)).collect()
            };
            Tensor::new(shape.clone(), data).expect("shapes are positive")
        });
        Ok(Self { config, params })
    }

    /// All parameters zero.
    pub fn zeros(config: DcvqeConfig) -> Result<Self> {
        config.validate()?;
        let params = param_shapes(&config).map(|_, shape| Tensor::zeros(shape.clone()));
        Ok(Self { config, params })
    }

    /// Builds a model from named tensors, checking every name and shape.
    pub fn from_named(config: DcvqeConfig, named: Vec<(String, Tensor)>) -> Result<Self> {
        let mut model = Self::zeros(config)?;
        model.load_named(named)?;
        Ok(model)
    }

    /// Overwrites parameters from named tensors; names and shapes must match
    /// this model's configuration exactly.
    pub fn load_named(&mut self, named: Vec<(String, Tensor)>) -> Result<()> {
        let names: Vec<String> = self.params.entries().into_iter().map(|(n, _)| n).collect();
        let mut incoming: std::collections::BTreeMap<String, Tensor> = named.into_iter().collect();
        let mut loaded = Vec::with_capacity(names.len());
        for (name, slot) in names.iter().zip(self.params.values_mut()) {
            let t = incoming
                .remove(name)
                .ok_or_else(|| ModelError::MissingParam(name.clone()))?;
            if t.shape() != slot.shape() {
                return Err(ModelError::ParamShape {
                    name: name.clone(),
                    expected: slot.shape().to_vec(),
                    found: t.shape().to_vec(),
                });
            }
            loaded.push((slot, t));
        }
        if let Some(extra) = incoming.into_keys().next() {
            return Err(ModelError::UnexpectedParam(extra));
        }
        for (slot, t) in loaded {
            *slot = t;
        }
        Ok(())
    }

    pub fn config(&self) -> &DcvqeConfig {
        &self.config
    }

    pub fn params(&self) -> &Params<Tensor> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Params<Tensor> {
        &mut self.params
    }

    pub fn num_parameters(&self) -> usize {
        self.params.entries().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Records every parameter as a leaf of `g`.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Params<Var> {
        self.params
            .map(|_, t| g.leaf(t.clone().with_requires_grad(trainable)))
    }

    /// Runs the network on one `[S x input_dim]` feature matrix.
    pub fn forward(&self, g: &mut Graph, bound: &Params<Var>, features: &Tensor) -> Result<ForwardPass> {
        check_features(&self.config, features)?;
        let x = g.constant(features.clone());
        forward(g, &self.config, bound, x)
    }

    /// Quality score for one video, on a throwaway graph.
    pub fn predict(&self, features: &Tensor) -> Result<f64> {
        self.embed(features).map(|(score, _)| score)
    }

    /// Score plus the final-layer video embedding.
    pub fn embed(&self, features: &Tensor) -> Result<(f64, Vec<f64>)> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false);
        let pass = self.forward(&mut g, &bound, features)?;
        let video = pass.layers.last().expect("at least one layer").video;
        Ok((g.item(pass.score), g.value(video).to_vec()))
    }
}

fn check_features(cfg: &DcvqeConfig, features: &Tensor) -> Result<()> {
    if features.shape().len() != 2 {
        return Err(TensorError::Rank {
            op: "forward",
            expected: 2,
            shape: features.shape().to_vec(),
        }
        .into());
    }
    if features.cols() != cfg.input_dim {
        return Err(ModelError::FeatureWidth {
            got: features.cols(),
            expected: cfg.input_dim,
        });
    }
    if features.rows() > cfg.max_seq_len {
        return Err(ModelError::Length {
            len: features.rows(),
            max: cfg.max_seq_len,
        });
    }
    Ok(())
}

/// Affine map `features * W + b` applied to every frame.
pub fn project_input(g: &mut Graph, weight: Var, bias: Var, features: Var) -> Result<Var> {
    let s = g.shape(features)[0];
    let in_dim = g.shape(weight)[0];
    if g.shape(features).get(1) != Some(&in_dim) {
        return Err(ModelError::FeatureWidth {
            got: g.shape(features).get(1).copied().unwrap_or(0),
            expected: in_dim,
        });
    }
    let xw = g.matmul(features, weight)?;
    let b = g.repeat_rows(bias, s)?;
    Ok(g.add(xw, b)?)
}

/// Adds positional row 0 to the video token and rows `1..=S` to the frames.
/// Returns `(video, frames)`.
pub fn add_positional(g: &mut Graph, table: Var, frames: Var, video_token: Var) -> Result<(Var, Var)> {
    let s = g.shape(frames)[0];
    let max = g.shape(table)[0] - 1;
    if s > max {
        return Err(ModelError::Length { len: s, max });
    }
    let p0 = g.slice_rows(table, 0, 1)?;
    let pf = g.slice_rows(table, 1, s + 1)?;
    let video = g.add(video_token, p0)?;
    let frames = g.add(frames, pf)?;
    Ok((video, frames))
}

/// Consecutive `[start, end)` clips of `clip_len` frames covering `0..len`;
/// the last clip keeps the remainder.
pub fn split_clips(len: usize, clip_len: usize) -> Vec<(usize, usize)> {
    assert!(clip_len >= 1, "clip_len must be positive");
    (0..len)
        .step_by(clip_len)
        .map(|start| (start, (start + clip_len).min(len)))
        .collect()
}

#[derive(Debug, Clone)]
pub struct AttentionOutput {
    /// Concatenated head outputs, `[L x D]`, before any residual.
    pub output: Var,
    /// One `[L x L]` weight matrix per head.
    pub weights: Vec<Var>,
    /// Multiply-accumulates spent on scores and weighted values.
    pub macs: u64,
}

/// Multi-head scaled dot-product self-attention over the rows of `x`.
/// Heads split the feature axis.
pub fn multi_head_attention(
    g: &mut Graph,
    x: Var,
    w: &AttentionParams<Var>,
    heads: usize,
    mask: &AttentionMask,
) -> Result<AttentionOutput> {
    let d = g.shape(x)[1];
    if heads == 0 || !d.is_multiple_of(heads) {
        return Err(ModelError::Config(format!(
            "model_dim {d} is not divisible by num_heads {heads}"
        )));
    }
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let q = g.matmul(x, w.query)?;
    let k = g.matmul(x, w.key)?;
    let v = g.matmul(x, w.value)?;
    let mut outs = Vec::with_capacity(heads);
    let mut weights = Vec::with_capacity(heads);
    let mut macs = 0;
    for h in 0..heads {
        let (lo, hi) = (h * dh, (h + 1) * dh);
        let qh = g.slice_cols(q, lo, hi)?;
        let kh = g.slice_cols(k, lo, hi)?;
        let vh = g.slice_cols(v, lo, hi)?;
        let kt = g.transpose(kh)?;
        let before = g.mac_count();
        let scores = g.matmul(qh, kt)?;
        macs += g.mac_count() - before;
        let scores = g.scale(scores, scale);
        let a = g.softmax_masked(scores, mask)?;
        let before = g.mac_count();
        let oh = g.matmul(a, vh)?;
        macs += g.mac_count() - before;
        outs.push(oh);
        weights.push(a);
    }
    let output = if outs.len() == 1 { outs[0] } else { g.concat_cols(&outs)? };
    Ok(AttentionOutput {
        output,
        weights,
        macs,
    })
}

#[derive(Debug, Clone)]
pub struct DivideOutput {
    pub clip_qe: Var,
    pub frames: Var,
    pub attention: Vec<Var>,
    pub macs: u64,
}

/// Masked, residual attention over `[video_qe; clip_frames]`. Output row 0
/// is the clip embedding, the remaining rows the updated frames.
pub fn transformer_d(
    g: &mut Graph,
    w: &AttentionParams<Var>,
    heads: usize,
    video_qe: Var,
    clip_frames: Var,
    mask: &AttentionMask,
) -> Result<DivideOutput> {
    let n = g.shape(clip_frames)[0];
    if mask.size() != n + 1 {
        return Err(TensorError::Shape {
            op: "transformer_d mask",
            lhs: vec![n + 1, n + 1],
            rhs: vec![mask.size(), mask.size()],
        }
        .into());
    }
    let x = g.concat_rows(&[video_qe, clip_frames])?;
    let att = multi_head_attention(g, x, w, heads, mask)?;
    let y = g.add(att.output, x)?;
    let clip_qe = g.slice_rows(y, 0, 1)?;
    let frames = g.slice_rows(y, 1, n + 1)?;
    Ok(DivideOutput {
        clip_qe,
        frames,
        attention: att.weights,
        macs: att.macs,
    })
}

/// Unmasked attention over clip embeddings without a residual path,
/// average-pooled into one `[1 x D]` video embedding.
pub fn transformer_c(g: &mut Graph, w: &AttentionParams<Var>, heads: usize, clip_qes: Var) -> Result<Var> {
    let clips = g.shape(clip_qes)[0];
    let att = multi_head_attention(g, clip_qes, w, heads, &AttentionMask::full(clips))?;
    Ok(g.mean_axis(att.output, 0)?)
}

/// Graph handles and bookkeeping produced by one DCTr layer.
#[derive(Debug, Clone)]
pub struct LayerActivations {
    /// `[S x D]`
    pub frames: Var,
    /// `[I x D]`
    pub clips: Var,
    /// `[1 x D]`
    pub video: Var,
    pub boundaries: Vec<(usize, usize)>,
    /// Per clip, per head TransformerD attention weights.
    pub divide_attention: Vec<Vec<Var>>,
    /// Multiply-accumulates in TransformerD attention (scores + values).
    pub attention_macs: u64,
}

/// DCTr layer `k` (1-based).
pub fn dctr_layer(
    g: &mut Graph,
    cfg: &DcvqeConfig,
    w: &LayerParams<Var>,
    k: usize,
    frames: Var,
    video_qe: Var,
) -> Result<LayerActivations> {
    if k == 0 || k > cfg.num_layers {
        return Err(ModelError::Config(format!(
            "layer index {k} outside 1..={}",
            cfg.num_layers
        )));
    }
    let s = g.shape(frames)[0];
    let boundaries = split_clips(s, cfg.clip_len_at(k));
    let mut clip_qes = Vec::with_capacity(boundaries.len());
    let mut updated = Vec::with_capacity(boundaries.len());
    let mut divide_attention = Vec::with_capacity(boundaries.len());
    let mut attention_macs = 0;
    let mut mask_cache: Option<AttentionMask> = None;
    for &(start, end) in &boundaries {
        let clip = g.slice_rows(frames, start, end)?;
        let size = end - start + 1;
        let mask = match &mask_cache {
            Some(m) if m.size() == size => m.clone(),
            _ => {
                let m = AttentionMask::clip(size, cfg.temporal_range);
                mask_cache = Some(m.clone());
                m
            }
        };
        let out = transformer_d(g, &w.divide, cfg.num_heads, video_qe, clip, &mask)?;
        clip_qes.push(out.clip_qe);
        updated.push(out.frames);
        divide_attention.push(out.attention);
        attention_macs += out.macs;
    }
    let clips = g.concat_rows(&clip_qes)?;
    let frames = if updated.len() == 1 { updated[0] } else { g.concat_rows(&updated)? };
    let video = transformer_c(g, &w.conquer, cfg.num_heads, clips)?;
    Ok(LayerActivations {
        frames,
        clips,
        video,
        boundaries,
        divide_attention,
        attention_macs,
    })
}

#[derive(Debug, Clone)]
pub struct ForwardPass {
    /// `[1 x 1]` predicted quality.
    pub score: Var,
    pub layers: Vec<LayerActivations>,
}

/// Full network on an `[S x input_dim]` feature node.
pub fn forward(g: &mut Graph, cfg: &DcvqeConfig, p: &Params<Var>, features: Var) -> Result<ForwardPass> {
    let s = g.shape(features)[0];
    if s == 0 {
        return Err(ModelError::Empty);
    }
    if s > cfg.max_seq_len {
        return Err(ModelError::Length {
            len: s,
            max: cfg.max_seq_len,
        });
    }
    let projected = project_input(g, p.input_weight, p.input_bias, features)?;
    let (mut video, mut frames) = add_positional(g, p.positional, projected, p.video_token)?;
    let mut layers = Vec::with_capacity(cfg.num_layers);
    for (i, w) in p.layers.iter().enumerate() {
        let act = dctr_layer(g, cfg, w, i + 1, frames, video)?;
        frames = act.frames;
        video = act.video;
        layers.push(act);
    }
    let raw = g.matmul(video, p.regressor_weight)?;
    let score = g.add(raw, p.regressor_bias)?;
    Ok(ForwardPass { score, layers })
}

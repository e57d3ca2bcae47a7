//! Randomised invariants of the attention stack, the losses and the layer
//! arithmetic.

use dcvqe::losses::{correlation_loss_raw, value, LossConfig};
use dcvqe::mask::{AttentionMask, TemporalRange};
use dcvqe::model::{split_clips, transformer_c, AttentionParams, DcvqeConfig, DcvqeModel};
use dcvqe::tensor::{Graph, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng, scale: f64) -> Tensor {
    Tensor::new(vec![rows, cols], (0..rows * cols).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
}

fn range_strategy() -> impl Strategy<Value = TemporalRange> {
    prop_oneof![(1usize..6).prop_map(TemporalRange::Radius), Just(TemporalRange::All)]
}

/// Layer-1 frame outputs for `features`.
fn layer_one_frames(model: &DcvqeModel, features: &Tensor) -> Vec<f64> {
    let mut g = Graph::new();
    let bound = model.bind(&mut g, false);
    let pass = model.forward(&mut g, &bound, features).unwrap();
    g.value(pass.layers[0].frames).to_vec()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn masked_softmax_rows_are_distributions(size in 1usize..12, range in range_strategy(), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mask = AttentionMask::clip(size, range);
        let mut g = Graph::new();
        let logits = g.constant(random(size, size, &mut rng, 30.0));
        let w = g.softmax_masked(logits, &mask).unwrap();
        let w = g.value(w);
        for i in 0..size {
            let row = &w[i * size..(i + 1) * size];
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            for j in 0..size {
                if !mask.admits(i, j) {
                    prop_assert_eq!(row[j], 0.0);
                }
            }
        }
    }

    #[test]
    fn frames_only_see_their_window(len in 2usize..16, clip in 2usize..7, r in 1usize..4, target in 0usize..16, seed in any::<u64>()) {
        let target = target % len;
        let cfg = DcvqeConfig {
            input_dim: 3,
            model_dim: 4,
            num_heads: 2,
            num_layers: 1,
            clip_len: clip,
            temporal_range: TemporalRange::Radius(r),
            max_seq_len: 16,
        };
        let model = DcvqeModel::with_init_std(cfg, seed, 0.5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
        let base = random(len, 3, &mut rng, 1.0);
        let mut bumped = base.clone();
        for c in 0..3 {
            bumped.data_mut()[target * 3 + c] += 0.75;
        }
        let (a, b) = (layer_one_frames(&model, &base), layer_one_frames(&model, &bumped));
        for i in 0..len {
            let same_clip = i / clip == target / clip;
            let row_same = a[i * 4..(i + 1) * 4] == b[i * 4..(i + 1) * 4];
            if !(same_clip && i.abs_diff(target) <= r) {
                prop_assert!(row_same, "frame {i} changed after perturbing {target}");
            }
        }
        prop_assert!(a[target * 4..(target + 1) * 4] != b[target * 4..(target + 1) * 4]);
    }

    #[test]
    fn conquer_pooling_ignores_clip_order(clips in 1usize..10, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = 6;
        let x = random(clips, d, &mut rng, 1.0);
        let w = [random(d, d, &mut rng, 0.5), random(d, d, &mut rng, 0.5), random(d, d, &mut rng, 0.5)];
        let pooled = |x: Tensor| {
            let mut g = Graph::new();
            let p = AttentionParams { query: g.constant(w[0].clone()), key: g.constant(w[1].clone()), value: g.constant(w[2].clone()) };
            let xv = g.constant(x);
            let out = transformer_c(&mut g, &p, 2, xv).unwrap();
            g.value(out).to_vec()
        };
        let reference = pooled(x.clone());
        let mut order: Vec<usize> = (0..clips).collect();
        for i in (1..clips).rev() {
            order.swap(i, rng.random_range(0..=i));
        }
        let rows: Vec<Vec<f64>> = order.iter().map(|&i| x.row(i).to_vec()).collect();
        let shuffled = pooled(Tensor::from_rows(&rows).unwrap());
        for (a, b) in reference.iter().zip(&shuffled) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn clip_partition_covers_sequence(len in 1usize..700, clip in 1usize..64, layer in 1usize..5) {
        let cfg = DcvqeConfig { clip_len: clip, ..DcvqeConfig::default() };
        let width = cfg.clip_len_at(layer);
        prop_assert_eq!(width, clip << (layer - 1));
        let b = split_clips(len, width);
        prop_assert_eq!(b.len(), len.div_ceil(width));
        prop_assert_eq!(b[0].0, 0);
        prop_assert_eq!(b.last().unwrap().1, len);
        for w in b.windows(2) {
            prop_assert_eq!(w[0].1, w[1].0);
            prop_assert_eq!(w[0].1 - w[0].0, width);
        }
    }

    #[test]
    fn correlation_loss_forms_agree_and_are_nonnegative(pg in prop::collection::vec((-10.0f64..10.0, -10.0f64..10.0), 1..40)) {
        let (p, g): (Vec<f64>, Vec<f64>) = pg.into_iter().unzip();
        let fast = value::correlation(&p, &g).unwrap();
        let raw = correlation_loss_raw(&p, &g).unwrap();
        prop_assert!(fast >= 0.0);
        prop_assert!((fast - raw).abs() <= 1e-9 * raw.abs().max(1.0));
    }

    #[test]
    fn positive_affine_predictions_cost_only_l1(g in prop::collection::vec(-5.0f64..5.0, 2..20), a in 0.01f64..10.0, b in -5.0f64..5.0) {
        let p: Vec<f64> = g.iter().map(|v| a * v + b).collect();
        prop_assert_eq!(value::correlation(&p, &g).unwrap(), 0.0);
        let total = value::total(&p, &g, &LossConfig::default()).unwrap();
        let l1 = value::l1(&p, &g).unwrap();
        prop_assert!((total - 0.7 * l1).abs() <= 1e-12 * l1.max(1.0));
    }
}

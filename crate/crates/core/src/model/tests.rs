use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::montage::{ChannelLayout, PartitionConfig};
use crate::numerics::{gelu, grad_check, GradCheckConfig, NORM_EPS};

fn random_tensor(shape: &[usize], seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

fn tiny_regions() -> Vec<Vec<usize>> {
    vec![vec![0, 2, 4], vec![1, 3, 5]]
}

/// Logits for a `[B, C, T]` input in eval mode.
fn eval_logits(
    cfg: &FastConfig,
    store: &ParamStore<f32>,
    regions: &[Vec<usize>],
    x: Tensor<f32>,
    variant: Variant,
) -> Tensor<f32> {
    let mut g = Graph::new();
    let p = Bound::new(&mut g, store).unwrap();
    let x = g.constant(x).unwrap();
    let y = fast_forward(&mut g, &p, cfg, regions, x, variant, &mut Mode::Eval).unwrap();
    g.value(y).clone()
}

#[test]
fn init_is_deterministic() {
    let cfg = FastConfig::tiny();
    let a = init_params(&cfg, 7).unwrap();
    let b = init_params(&cfg, 7).unwrap();
    assert!(a.bit_identical(&b));
    let c = init_params(&cfg, 8).unwrap();
    assert!(!a.bit_identical(&c));
}

#[test]
fn init_constants() {
    let cfg = FastConfig::tiny();
    let s = init_params(&cfg, 1).unwrap();
    assert!(s.get("tokenizer.0.bn1.gamma").unwrap().data().iter().all(|&v| v == 1.0));
    assert!(s.get("tokenizer.1.bn2.beta").unwrap().data().iter().all(|&v| v == 0.0));
    assert!(s.get("tokenizer.1.bn2.running_var").unwrap().data().iter().all(|&v| v == 1.0));
    assert!(s.get("temporal.0.ln.gamma").unwrap().data().iter().all(|&v| v == 1.0));
    let bound = 1.0 / (3.0f32).sqrt();
    assert!(s.get("tokenizer.0.conv_t.w").unwrap().data().iter().all(|v| v.abs() <= bound));
}

/// Closed-form parameter count written independently of the store layout.
fn count_oracle(
    regions: &[usize],
    f: usize,
    ft: usize,
    lt: usize,
    ls: usize,
    l: usize,
    mult: usize,
    k1: usize,
    k: usize,
    s_max: usize,
    hidden: usize,
    classes: usize,
) -> usize {
    let per_region_fixed = ft * k1 + ft + f + 2 * f + (lt - 1) * (f * f * k + f + 2 * f);
    let tokenizer: usize = regions.iter().map(|&c| per_region_fixed + f * ft * c).sum();
    let layer = |d: usize| 4 * d * d + 2 * d * d * mult + d * mult + d + 2 * d;
    let d = regions.len() * f;
    tokenizer
        + ls * layer(f)
        + l * layer(d)
        + (s_max + 1) * d
        + d
        + 2 * d
        + d * hidden
        + hidden
        + hidden * classes
        + classes
}

#[test]
fn default_param_count_matches_oracle() {
    let cfg = FastConfig::default();
    let store = init_params(&cfg, 0).unwrap();
    let want = count_oracle(&[6, 9, 4, 4, 6, 7, 16, 10], 32, 16, 4, 2, 4, 2, 15, 7, 24, 128, 5);
    assert_eq!(store.n_trainable(), want);
    let buffers = 8 * 4 * 2 * 32;
    assert_eq!(store.n_values(), want + buffers);
}

#[test]
fn config_validation() {
    let mut c = FastConfig::default();
    c.spatial_heads = 5;
    assert!(matches!(c.validate(), Err(Error::Config(_))));
    let mut c = FastConfig::default();
    c.tokenizer_depth = 1;
    assert!(c.validate().is_err());
    let mut c = FastConfig::default();
    c.window_samples = 40;
    assert!(c.validate().is_err());
    assert!(FastConfig::tiny().validate().is_ok());
    assert!(FastConfig::desk().validate().is_ok());
    assert_eq!(FastConfig::tiny().min_window(), 10);
}

#[test]
fn token_width_of_default_config() {
    let cfg = FastConfig::default();
    let layout = ChannelLayout::builtin("cap64").unwrap();
    let part = RegionPartition::build(&layout, PartitionConfig::M8).unwrap();
    let model = FastModel::new(cfg.clone(), &part, 3).unwrap();
    let tok = model.tokens(random_tensor(&[1, 62, 200], 1)).unwrap();
    assert_eq!(tok.shape(), &[1, 8, 32]);
    assert_eq!(tok.len(), 256);
    assert_eq!(cfg.grid_width(), 256);
    // Longer segments still give one token per region.
    let tok = model.tokens(random_tensor(&[1, 62, 260], 1)).unwrap();
    assert_eq!(tok.shape(), &[1, 8, 32]);
}

#[test]
fn zero_segment_gives_bias_path_constant() {
    let cfg = FastConfig::tiny();
    let store = init_params(&cfg, 11).unwrap();
    let mut g = Graph::new();
    let p = Bound::new(&mut g, &store).unwrap();
    let x = g.constant(Tensor::zeros(&[1, 6, 16])).unwrap();
    let y = st_tokens(&mut g, &p, &cfg, &tiny_regions(), x, &mut Mode::Eval).unwrap();
    let got = g.value(y).data().to_vec();

    // A constant input stays constant in time through every stage.
    let v = |n: &str| store.get(n).unwrap().data().iter().map(|&v| v as f64).collect::<Vec<_>>();
    let bn = |x: f64, pre: &str, i: usize| {
        let (m, var) = (v(&format!("{pre}.running_mean"))[i], v(&format!("{pre}.running_var"))[i]);
        gelu(v(&format!("{pre}.gamma"))[i] * (x - m) / (var + NORM_EPS).sqrt() + v(&format!("{pre}.beta"))[i])
    };
    let (f, ft) = (cfg.token_width, cfg.temporal_filters);
    for (j, rows) in tiny_regions().iter().enumerate() {
        let pre = format!("tokenizer.{j}");
        let bt = v(&format!("{pre}.conv_t.b"));
        let ws = v(&format!("{pre}.conv_s.w"));
        let bs = v(&format!("{pre}.conv_s.b"));
        let mut h: Vec<f64> = (0..f)
            .map(|o| {
                let mut s = bs[o];
                for i in 0..ft {
                    for c in 0..rows.len() {
                        s += ws[(o * ft + i) * rows.len() + c] * bt[i];
                    }
                }
                bn(s, &format!("{pre}.bn1"), o)
            })
            .collect();
        for l in 2..=cfg.tokenizer_depth {
            let w = v(&format!("{pre}.conv{l}.w"));
            let b = v(&format!("{pre}.conv{l}.b"));
            h = (0..f)
                .map(|o| {
                    let mut s = b[o];
                    for i in 0..f {
                        for k in 0..cfg.conv_kernel {
                            s += w[(o * f + i) * cfg.conv_kernel + k] * h[i];
                        }
                    }
                    bn(s, &format!("{pre}.bn{l}"), o)
                })
                .collect();
        }
        for o in 0..f {
            assert!((got[j * f + o] as f64 - h[o]).abs() < 1e-5);
        }
    }
}

#[test]
fn dropped_tail_sample_leaves_tokens_unchanged() {
    let cfg = FastConfig::default();
    let layout = ChannelLayout::builtin("cap64").unwrap();
    let part = RegionPartition::build(&layout, PartitionConfig::M8).unwrap();
    let model = FastModel::new(cfg, &part, 5).unwrap();
    let base = random_tensor(&[1, 62, 201], 9);
    let mut other = base.clone();
    for c in 0..62 {
        other.data_mut()[c * 201 + 200] = -50.0;
    }
    // 201 - 14 = 187 samples after the first convolution; pooling by 2 drops the last.
    assert_eq!(model.tokens(base).unwrap(), model.tokens(other).unwrap());
}

/// Plain f64 evaluation of one encoder layer on `[L, D]` tokens.
fn encoder_oracle(store: &ParamStore<f32>, pre: &str, x: &[Vec<f64>], heads: usize) -> Vec<Vec<f64>> {
    let m = |n: &str| {
        let t = store.get(&format!("{pre}.{n}")).unwrap();
        (t.shape().to_vec(), t.data().iter().map(|&v| v as f64).collect::<Vec<_>>())
    };
    let matmul = |x: &[Vec<f64>], (shape, w): &(Vec<usize>, Vec<f64>), b: Option<&Vec<f64>>| {
        x.iter()
            .map(|row| {
                (0..shape[1])
                    .map(|o| {
                        b.map_or(0.0, |b| b[o])
                            + (0..shape[0]).map(|i| row[i] * w[i * shape[1] + o]).sum::<f64>()
                    })
                    .collect::<Vec<f64>>()
            })
            .collect::<Vec<_>>()
    };
    let (q, k, v) = (matmul(x, &m("attn.wq"), None), matmul(x, &m("attn.wk"), None), matmul(x, &m("attn.wv"), None));
    let (l, d) = (x.len(), x[0].len());
    let dh = d / heads;
    let mut ctx = vec![vec![0.0; d]; l];
    for h in 0..heads {
        for i in 0..l {
            let scores: Vec<f64> = (0..l)
                .map(|j| (0..dh).map(|e| q[i][h * dh + e] * k[j][h * dh + e]).sum::<f64>() / (dh as f64).sqrt())
                .collect();
            let mx = scores.iter().cloned().fold(f64::MIN, f64::max);
            let z: f64 = scores.iter().map(|s| (s - mx).exp()).sum();
            for j in 0..l {
                let a = (scores[j] - mx).exp() / z;
                for e in 0..dh {
                    ctx[i][h * dh + e] += a * v[j][h * dh + e];
                }
            }
        }
    }
    let delta = matmul(&ctx, &m("attn.wo"), None);
    let h1 = matmul(&delta, &m("ffn.w1"), Some(&m("ffn.b1").1));
    let h1: Vec<Vec<f64>> = h1.iter().map(|r| r.iter().map(|&v| gelu(v)).collect()).collect();
    let ff = matmul(&h1, &m("ffn.w2"), Some(&m("ffn.b2").1));
    let (gamma, beta) = (m("ln.gamma").1, m("ln.beta").1);
    delta
        .iter()
        .zip(&ff)
        .map(|(a, b)| {
            let s: Vec<f64> = a.iter().zip(b).map(|(x, y)| x + y).collect();
            let mean = s.iter().sum::<f64>() / d as f64;
            let var = s.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            s.iter()
                .enumerate()
                .map(|(i, v)| gamma[i] * (v - mean) / (var + NORM_EPS).sqrt() + beta[i])
                .collect()
        })
        .collect()
}

fn run_spatial(cfg: &FastConfig, store: &ParamStore<f32>, x: Tensor<f32>) -> Tensor<f32> {
    let mut g = Graph::new();
    let p = Bound::new(&mut g, store).unwrap();
    let x = g.constant(x).unwrap();
    let y = spatial_projection(&mut g, &p, cfg, x, &mut Mode::Eval).unwrap();
    g.value(y).clone()
}

#[test]
fn spatial_projection_depth_zero_is_identity() {
    let mut cfg = FastConfig::tiny();
    cfg.spatial_depth = 0;
    let store = init_params(&cfg, 2).unwrap();
    let x = random_tensor(&[3, 2, 4], 4);
    assert_eq!(run_spatial(&cfg, &store, x.clone()), x);
}

#[test]
fn spatial_projection_matches_dense_oracle() {
    let cfg = FastConfig {
        spatial_depth: 1,
        ..FastConfig::default()
    };
    let store = init_params(&cfg, 21).unwrap();
    let x = random_tensor(&[1, 8, 32], 5);
    let got = run_spatial(&cfg, &store, x.clone());
    let rows: Vec<Vec<f64>> = x.data().chunks(32).map(|r| r.iter().map(|&v| v as f64).collect()).collect();
    let want = encoder_oracle(&store, "spatial.0", &rows, cfg.spatial_heads);
    for (a, b) in got.data().iter().zip(want.iter().flatten()) {
        assert!((*a as f64 - b).abs() < 1e-5, "{a} vs {b}");
    }
}

#[test]
fn single_region_attention_reduces_to_value_path() {
    let cfg = FastConfig {
        region_channels: vec![4],
        token_width: 4,
        temporal_heads: 2,
        ..FastConfig::tiny()
    };
    let store = init_params(&cfg, 8).unwrap();
    let x = random_tensor(&[2, 1, 4], 6);
    let got = run_spatial(&cfg, &store, x.clone());
    for (n, row) in x.data().chunks(4).enumerate() {
        let want = encoder_oracle(&store, "spatial.0", &[row.iter().map(|&v| v as f64).collect()], 2);
        for (a, b) in got.data()[n * 4..][..4].iter().zip(&want[0]) {
            assert!((*a as f64 - b).abs() < 1e-5);
        }
    }
}

fn run_temporal(cfg: &FastConfig, store: &ParamStore<f32>, grid: Tensor<f32>) -> Result<Tensor<f32>> {
    let mut g = Graph::new();
    let p = Bound::new(&mut g, store).unwrap();
    let x = g.constant(grid)?;
    let y = temporal_forward(&mut g, &p, cfg, x, &mut Mode::Eval)?;
    Ok(g.value(y).clone())
}

#[test]
fn temporal_forward_shapes_and_order() {
    let cfg = FastConfig::tiny();
    let store = init_params(&cfg, 4).unwrap();
    let grid = random_tensor(&[3, 3, 8], 2);
    let y = run_temporal(&cfg, &store, grid.clone()).unwrap();
    assert_eq!(y.shape(), &[3, 5]);
    let one = run_temporal(&cfg, &store, random_tensor(&[1, 1, 8], 3)).unwrap();
    assert!(one.is_finite());
    // Reverse the segment order of every trial.
    let mut rev = grid.clone();
    for b in 0..3 {
        for s in 0..3 {
            let src = &grid.data()[(b * 3 + s) * 8..][..8];
            rev.data_mut()[(b * 3 + (2 - s)) * 8..][..8].copy_from_slice(src);
        }
    }
    let y2 = run_temporal(&cfg, &store, rev).unwrap();
    assert!(y.max_abs_diff(&y2) > 1e-6);
    assert!(run_temporal(&cfg, &store, random_tensor(&[1, 5, 8], 3)).is_err());
}

#[test]
fn default_trial_smoke() {
    let layout = ChannelLayout::builtin("cap64").unwrap();
    let part = RegionPartition::build(&layout, PartitionConfig::M8).unwrap();
    let model = FastModel::new(FastConfig::default(), &part, 1).unwrap();
    let data = random_tensor(&[62, 2000], 12).into_data();
    let trial = EegTrial::new(62, 2000, data, 200.0, 0).unwrap();
    let a = model.logits(&[&trial], Variant::Full).unwrap();
    assert_eq!(a.shape(), &[1, 5]);
    assert!(a.is_finite());
    let b = model.logits(&[&trial.clone(), &trial], Variant::Full).unwrap();
    assert_eq!(&b.data()[..5], a.data());
    assert_eq!(&b.data()[5..], a.data());
}

#[test]
fn full_loss_gradient_matches_finite_differences() {
    let cfg = FastConfig::tiny();
    let store = init_params(&cfg, 17).unwrap().cast::<f64>();
    let x = random_tensor(&[2, 6, 32], 40).cast::<f64>();
    let labels = [1usize, 3];
    let regions = tiny_regions();
    let report = grad_check(
        |g, flat| {
            let p = Bound::from_flat(g, &store, flat)?;
            let xv = g.constant(x.clone())?;
            let mut mode = Mode::train(0, 0.0);
            let y = fast_forward(g, &p, &cfg, &regions, xv, Variant::Full, &mut mode)?;
            g.cross_entropy(y, &labels)
        },
        &store.flatten_trainable(),
        GradCheckConfig::default(),
    )
    .unwrap();
    assert!(report.passes(1e-4), "max rel error {}", report.max_rel_error);
}

#[test]
fn no_transformer_variant() {
    let cfg = FastConfig {
        stride_samples: 16,
        ..FastConfig::tiny()
    };
    let store = init_params(&cfg, 6).unwrap();
    let regions = tiny_regions();
    let x = random_tensor(&[2, 6, 48], 1);
    let y = eval_logits(&cfg, &store, &regions, x.clone(), Variant::NoTransformer);
    assert_eq!(y.shape(), &[2, 5]);

    // Swapping the first and last non-overlapping segments keeps the mean.
    let mut sw = x.clone();
    for r in 0..12 {
        let row = &x.data()[r * 48..][..48];
        let dst = &mut sw.data_mut()[r * 48..][..48];
        dst[..16].copy_from_slice(&row[32..]);
        dst[32..].copy_from_slice(&row[..16]);
    }
    let y2 = eval_logits(&cfg, &store, &regions, sw, Variant::NoTransformer);
    assert!(y.max_abs_diff(&y2) < 1e-6);

    // One segment: head applied to the flattened token.
    let one = random_tensor(&[1, 6, 16], 2);
    let y = eval_logits(&cfg, &store, &regions, one.clone(), Variant::NoTransformer);
    let mut g = Graph::new();
    let p = Bound::new(&mut g, &store).unwrap();
    let xv = g.constant(one).unwrap();
    let t = st_tokens(&mut g, &p, &cfg, &regions, xv, &mut Mode::Eval).unwrap();
    let t = g.reshape(t, &[1, 8]).unwrap();
    let h = head(&mut g, &p, t).unwrap();
    assert!(g.value(h).max_abs_diff(&y) < 1e-7);
}

#[test]
fn relabeled_channels_give_same_logits() {
    let layout = ChannelLayout::builtin("compact16").unwrap();
    let part = RegionPartition::build(&layout, PartitionConfig::M5).unwrap();
    let cfg = FastConfig::desk().with_partition(&part);
    let model = FastModel::new(cfg.clone(), &part, 3).unwrap();
    let data = random_tensor(&[16, 400], 8).into_data();
    let trial = EegTrial::new(16, 400, data, 200.0, 0).unwrap();

    // Reverse the channel order in both layout and data.
    let rows: Vec<usize> = (0..16).rev().collect();
    let labels = rows.iter().map(|&r| layout.labels()[r].clone()).collect();
    let layout2 = ChannelLayout::new(labels, None, None, 200.0).unwrap();
    let part2 = RegionPartition::build(&layout2, PartitionConfig::M5).unwrap();
    let trial2 = trial.select_channels(&rows).unwrap();
    // Region blocks must list channels in the same order for identical weights.
    let order: Vec<Vec<&str>> = (0..5).map(|r| part.channel_labels(r)).collect();
    let mut order2: Vec<Vec<&str>> = (0..5).map(|r| part2.channel_labels(r)).collect();
    for o in &mut order2 {
        o.reverse();
    }
    assert_eq!(order, order2);
    let mut model2 = FastModel::new(cfg, &part2, 3).unwrap();
    model2.params = model.params.clone();
    // Within-region order is reversed, so reverse the spatial kernels too.
    for (j, rows) in part.members().iter().enumerate() {
        let w = model2.params.get_mut(&format!("tokenizer.{j}.conv_s.w")).unwrap();
        let c = rows.len();
        for chunk in w.data_mut().chunks_mut(c) {
            chunk.reverse();
        }
    }
    let a = model.logits(&[&trial], Variant::Full).unwrap();
    let b = model2.logits(&[&trial2], Variant::Full).unwrap();
    assert!(a.max_abs_diff(&b) < 1e-5, "{a:?} {b:?}");
}

#[test]
fn running_stats_update() {
    let cfg = FastConfig::tiny();
    let mut store = init_params(&cfg, 0).unwrap();
    let mut g = Graph::new();
    let p = Bound::new(&mut g, &store).unwrap();
    let x = g.constant(random_tensor(&[2, 6, 32], 3)).unwrap();
    let mut mode = Mode::train(0, 0.1);
    fast_forward(&mut g, &p, &cfg, &tiny_regions(), x, Variant::Full, &mut mode).unwrap();
    let stats = mode.take_batch_stats();
    assert_eq!(stats.len(), 2 * cfg.tokenizer_depth);
    let (name, s) = &stats[0];
    let (m0, v0) = (s.mean[0], s.var[0]);
    update_running_stats(&mut store, &stats, 0.1).unwrap();
    let rm = store.get(&format!("{name}.running_mean")).unwrap().data()[0] as f64;
    let rv = store.get(&format!("{name}.running_var")).unwrap().data()[0] as f64;
    assert!((rm - 0.1 * m0).abs() < 1e-6);
    assert!((rv - (0.9 + 0.1 * v0)).abs() < 1e-6);
}

#[test]
fn eval_mode_is_pure() {
    let cfg = FastConfig::tiny();
    let store = init_params(&cfg, 30).unwrap();
    let x = random_tensor(&[2, 6, 32], 31);
    let a = eval_logits(&cfg, &store, &tiny_regions(), x.clone(), Variant::Full);
    let b = eval_logits(&cfg, &store, &tiny_regions(), x, Variant::Full);
    assert_eq!(a.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
}

#[test]
fn checkpoint_round_trip() {
    let cfg = FastConfig::tiny();
    let store = init_params(&cfg, 99).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    save_checkpoint(&path, &cfg, &store).unwrap();
    let (cfg2, store2) = load_checkpoint(&path).unwrap();
    assert_eq!(cfg2, cfg);
    assert!(store2.bit_identical(&store));

    let bytes = std::fs::read(&path).unwrap();
    let header_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    assert_eq!(bytes.len(), PREAMBLE + header_len + 4 * store.n_values());

    for cut in [bytes.len() - 1, bytes.len() / 2, 30, 5] {
        let err = decode_checkpoint(&bytes[..cut]).unwrap_err();
        assert!(matches!(err, Error::Format(_)), "{cut}: {err}");
    }
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(decode_checkpoint(&bad), Err(Error::Format(_))));
    let mut extra = bytes;
    extra.push(0);
    assert!(matches!(decode_checkpoint(&extra), Err(Error::Format(_))));
}

#[test]
fn checkpoint_rejects_store_of_other_config() {
    let cfg = FastConfig::tiny();
    let other = FastConfig {
        token_width: 6,
        ..FastConfig::tiny()
    };
    let store = init_params(&other, 1).unwrap();
    assert!(encode_checkpoint(&cfg, &store).is_err());
}

#[test]
fn model_rejects_mismatched_partition() {
    let layout = ChannelLayout::builtin("cap64").unwrap();
    let part = RegionPartition::build(&layout, PartitionConfig::M5).unwrap();
    assert!(FastModel::new(FastConfig::default(), &part, 0).is_err());
}

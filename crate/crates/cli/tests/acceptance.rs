//! Acceptance suite: one line per criterion, non-zero exit when any fails.
//! Run alone with `cargo test --release --test acceptance`; pass criterion
//! ids (e.g. `C3 C8`) after `--` to run a subset.

use std::collections::BTreeSet;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::Instant;

use fast_cli::config::{ModelPreset, RunConfig};
use fast_cli::pipeline::prepare;
use fast_core::attribution::{integrated_gradients, FastLogit, IG_VERIFY_STEPS};
use fast_core::metrics::{
    argmax_rows, auc_ovr, chance_interval, confusion, wilcoxon_signed_rank, MetricsReport,
};
use fast_core::model::{
    decode_checkpoint, encode_checkpoint, fast_forward, init_params, load_checkpoint, save_checkpoint, Bound,
    FastConfig, FastModel, Mode, Variant,
};
use fast_core::montage::{ChannelLayout, PartitionConfig, RegionPartition};
use fast_core::numerics::{grad_check, GradCheckConfig, Graph, Tensor};
use fast_core::preprocess::{design_fir, utterance_crop, FilterSpec, SegmentPlan};
use fast_core::synthdata::{generate, read_container, write_container, Dataset, SynthSpec};
use fast_core::training::{self, fit, summarize, Init, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

type Outcome = Result<String, String>;

fn require(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn e2s<E: std::fmt::Display>(e: E) -> String {
    format!("{e:#}")
}

fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

fn tiny_layout() -> ChannelLayout {
    let labels = ["Fp1", "F3", "F4", "T7", "T8", "FT7"].map(String::from).to_vec();
    ChannelLayout::new(labels, None, None, 200.0).unwrap()
}

fn tiny_model(seed: u64) -> FastModel {
    let part = RegionPartition::build(&tiny_layout(), PartitionConfig::M2Ft).unwrap();
    FastModel::new(FastConfig::tiny().with_partition(&part), &part, seed).unwrap()
}

fn c1_gradients() -> Outcome {
    let start = Instant::now();
    let cfg = FastConfig::tiny();
    let (m, f, lt, ls, l) = (cfg.region_channels.len(), cfg.token_width, cfg.tokenizer_depth, cfg.spatial_depth, cfg.temporal_depth);
    let t = 32;
    let s = cfg.segments_for(t).map_err(e2s)?;
    if (m, f, lt, ls, l, s, cfg.region_channels.iter().sum::<usize>()) != (2, 4, 2, 1, 1, 3, 6) {
        return Err(format!("tiny config is not M=2 F=4 L_t=2 L_s=1 L=1 S=3 C=6: {cfg:?}"));
    }
    let part = RegionPartition::build(&tiny_layout(), PartitionConfig::M2Ft).map_err(e2s)?;
    let regions = part.members().to_vec();
    let store = init_params(&cfg, 17).map_err(e2s)?.cast::<f64>();
    let x = random(&[2, 6, t], 40);
    let labels = [1usize, 3];
    let full = grad_check(
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
    .map_err(e2s)?;

    let w = random(&[3, 5], 2);
    let other = random(&[3, 5], 3);
    let row = random(&[5], 4);
    type Op<'a> = Box<dyn Fn(&mut Graph<f64>, fast_core::numerics::Var) -> fast_core::Result<fast_core::numerics::Var> + 'a>;
    let ops: Vec<(&str, Op)> = vec![
        ("add", Box::new(|g, x| {
            let o = g.constant(other.clone())?;
            g.add(x, o)
        })),
        ("add_bcast", Box::new(|g, x| {
            let r = g.constant(row.clone())?;
            g.add_bcast(x, r)
        })),
        ("scale", Box::new(|g, x| g.scale(x, -1.7))),
        ("mul_const", Box::new(|g, x| g.mul_const(x, other.clone()))),
        ("gelu", Box::new(|g, x| g.gelu(x))),
    ];
    let mut worst_elem: f64 = 0.0;
    for (name, op) in &ops {
        let r = grad_check(
            |g, x| {
                let y = op(g, x)?;
                g.weighted_sum(y, w.clone())
            },
            &random(&[3, 5], 9).map(|v| 3.0 * v),
            GradCheckConfig::default(),
        )
        .map_err(e2s)?;
        if !r.passes(1e-6) {
            return Err(format!("{name}: max rel error {:.2e}", r.max_rel_error));
        }
        worst_elem = worst_elem.max(r.max_rel_error);
    }
    let secs = start.elapsed().as_secs_f64();
    require(
        full.passes(1e-4) && secs < 120.0,
        format!(
            "full loss max rel {:.2e} over {} params, elementwise max rel {:.2e}, {secs:.1} s",
            full.max_rel_error,
            full.analytic.len(),
            worst_elem
        ),
    )
}

fn c2_constants() -> Outcome {
    let layout = ChannelLayout::builtin("cap64").map_err(e2s)?;
    let part = RegionPartition::build(&layout, PartitionConfig::M8).map_err(e2s)?;
    let cfg = FastConfig::default().with_partition(&part);
    let width = cfg.grid_width();
    let model = FastModel::new(cfg.clone(), &part, 0).map_err(e2s)?;
    let spec = SynthSpec {
        n_subjects: 1,
        blocks_per_subject: 1,
        trials_per_block: 3,
        ..SynthSpec::default()
    };
    let ds = generate(&spec).map_err(e2s)?;
    let trials: Vec<_> = ds.trials.iter().collect();
    let logits = model.logits(&trials, Variant::Full).map_err(e2s)?;
    require(
        cfg.m() == 8 && cfg.token_width == 32 && width == 256 && logits.shape() == [3, 5],
        format!(
            "grid {}x{} = {width}, logits {:?} for B=3",
            cfg.m(),
            cfg.token_width,
            logits.shape()
        ),
    )
}

fn c3_chance() -> Outcome {
    let (lo, hi) = chance_interval(0.2, 5700, 1.96).map_err(e2s)?;
    let r = |v: f64| (v * 1e4).round() / 1e4;
    require(r(lo) == 0.1896 && r(hi) == 0.2104, format!("[{lo:.4}, {hi:.4}]"))
}

/// Desk-scale run configuration on the compact layout.
fn desk_run(seed: u64, epochs: usize, utterances: usize) -> RunConfig {
    RunConfig {
        preset: ModelPreset::Desk,
        window: SegmentPlan {
            window_s: 1.0,
            stride_s: 1.0,
        },
        utterances,
        train: TrainConfig {
            epochs,
            warmup_epochs: 5.min(epochs),
            ..TrainConfig::default()
        },
        seed,
        ..RunConfig::default()
    }
}

fn synth(snr_db: f64, subjects: u32, rate: f64, seed: u64) -> Dataset {
    generate(&SynthSpec {
        n_subjects: subjects,
        trials_per_block: 10,
        layout: "compact16".into(),
        sample_rate: rate,
        snr_db,
        seed,
        ..SynthSpec::default()
    })
    .unwrap()
}

fn c4_learning() -> Outcome {
    let start = Instant::now();
    let ds = synth(20.0, 5, 200.0, 0);
    let p = prepare(&desk_run(0, 50, 5), &ds).map_err(e2s)?;
    let outcomes = fastpipe::finetune_all(&p, None)?;
    let s = summarize(&outcomes).map_err(e2s)?;
    let (_, hi) = chance_interval(0.2, s.pooled.n, 1.96).map_err(e2s)?;
    require(
        s.subject_mean >= 0.80 && s.subject_mean > hi,
        format!(
            "subject mean {:.3} +/- {:.3} over {} subjects (n={}, chance upper {hi:.3}), {:.0} s",
            s.subject_mean,
            s.subject_std,
            s.subjects.len(),
            s.pooled.n,
            start.elapsed().as_secs_f64()
        ),
    )
}

mod fastpipe {
    use super::*;
    use fast_cli::pipeline::Prepared;
    use fast_core::training::FoldResult;

    /// LOBO fine-tuning of every subject, from `start` or from scratch.
    pub fn finetune_all(p: &Prepared, start: Option<&FastModel>) -> Result<Vec<FoldResult>, String> {
        let mut out = Vec::new();
        for s in p.subjects().map_err(e2s)? {
            let folds = match start {
                Some(m) => training::finetune(m, "pretrained", &p.data, s, &p.cfg.train, p.cfg.seed, 1),
                None => training::finetune_from_scratch(&p.template, &p.data, s, &p.cfg.train, p.cfg.seed, 1),
            }
            .map_err(e2s)?;
            out.extend(folds.into_iter().map(|o| o.result));
        }
        Ok(out)
    }
}

fn c5_pretraining() -> Outcome {
    let start = Instant::now();
    let (mut pre, mut scratch) = (Vec::new(), Vec::new());
    for seed in 0..3u64 {
        let ds = synth(6.0, 3, 100.0, 100 + seed);
        let mut cfg = desk_run(seed, 20, 5);
        cfg.subjects = Some(vec![0]);
        let p = prepare(&cfg, &ds).map_err(e2s)?;
        let pre_cfg = TrainConfig {
            epochs: 30,
            ..cfg.train.clone()
        };
        let base = training::pretrain(&p.template, &p.data, 0, &pre_cfg, seed).map_err(e2s)?;
        let a = summarize(&fastpipe::finetune_all(&p, Some(&base.model))?).map_err(e2s)?;
        let b = summarize(&fastpipe::finetune_all(&p, None)?).map_err(e2s)?;
        pre.push(a.pooled.accuracy);
        scratch.push(b.pooled.accuracy);
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (a, b) = (mean(&pre), mean(&scratch));
    require(
        a >= b,
        format!(
            "pretrained {a:.3} {:?} vs scratch {b:.3} {:?}, {:.0} s",
            fmt3(&pre),
            fmt3(&scratch),
            start.elapsed().as_secs_f64()
        ),
    )
}

fn fmt3(v: &[f64]) -> Vec<String> {
    v.iter().map(|x| format!("{x:.3}")).collect()
}

fn c6_no_te() -> Outcome {
    let start = Instant::now();
    let tmp = tempfile::TempDir::new().map_err(e2s)?;
    let data = tmp.path().join("data");
    write_container(&data, &synth(20.0, 1, 100.0, 7)).map_err(e2s)?;
    let cfg_path = tmp.path().join("run.json");
    let cfg = desk_run(0, 30, 5);
    std::fs::write(&cfg_path, serde_json::to_string(&cfg).map_err(e2s)?).map_err(e2s)?;
    let out = tmp.path().join("out");
    let s = |p: &Path| p.to_str().unwrap().to_string();
    let code = fast_cli::run([
        "fast".to_string(),
        "ablate".into(),
        "--mode".into(),
        "no-te".into(),
        "--data".into(),
        s(&data),
        "--out".into(),
        s(&out),
        "--config".into(),
        s(&cfg_path),
    ]);
    if code != 0 {
        return Err(format!("ablate exited with {code}"));
    }
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("ablation.json")).map_err(e2s)?).map_err(e2s)?;
    let acc = report["summary"]["pooled"]["accuracy"].as_f64().ok_or("no pooled accuracy")?;
    let n = report["summary"]["pooled"]["n"].as_u64().ok_or("no trial count")? as usize;
    let (_, hi) = chance_interval(0.2, n, 1.96).map_err(e2s)?;
    require(
        report["ablation"]["mode"] == "no_te" && acc > hi,
        format!(
            "no-te accuracy {acc:.3} on n={n} (chance upper {hi:.3}), {:.0} s",
            start.elapsed().as_secs_f64()
        ),
    )
}

fn c7_utterances() -> Outcome {
    let start = Instant::now();
    let mut means = Vec::new();
    for k in 1..=5 {
        let mut accs = Vec::new();
        for seed in 0..3u64 {
            let ds = synth(20.0, 1, 100.0, 200 + seed);
            let p = prepare(&desk_run(seed, 40, k), &ds).map_err(e2s)?;
            accs.push(summarize(&fastpipe::finetune_all(&p, None)?).map_err(e2s)?.pooled.accuracy);
        }
        means.push(accs.iter().sum::<f64>() / accs.len() as f64);
    }
    let ok = means.windows(2).all(|w| w[1] >= w[0] - 0.02);
    require(
        ok,
        format!("mean accuracy k=1..5: {:?}, {:.0} s", fmt3(&means), start.elapsed().as_secs_f64()),
    )
}

fn oracle_argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn oracle_auc(truth: &[usize], scores: &[f64], c: usize) -> Option<f64> {
    let mut aucs = Vec::new();
    for k in 0..c {
        let pos: Vec<f64> = (0..truth.len()).filter(|&i| truth[i] == k).map(|i| scores[i * c + k]).collect();
        let neg: Vec<f64> = (0..truth.len()).filter(|&i| truth[i] != k).map(|i| scores[i * c + k]).collect();
        if pos.is_empty() || neg.is_empty() {
            continue;
        }
        let mut wins = 0.0;
        for &p in &pos {
            for &n in &neg {
                wins += if p > n {
                    1.0
                } else if p == n {
                    0.5
                } else {
                    0.0
                };
            }
        }
        aucs.push(wins / (pos.len() * neg.len()) as f64);
    }
    (!aucs.is_empty()).then(|| aucs.iter().sum::<f64>() / aucs.len() as f64)
}

/// W+ and two-sided exact p by walking every sign assignment.
fn oracle_wilcoxon(d: &[f64]) -> Option<(f64, f64)> {
    let d: Vec<f64> = d.iter().copied().filter(|&v| v != 0.0).collect();
    let n = d.len();
    if n == 0 {
        return None;
    }
    let ranks: Vec<f64> = d
        .iter()
        .map(|v| {
            let less = d.iter().filter(|o| o.abs() < v.abs()).count() as f64;
            let equal = d.iter().filter(|o| o.abs() == v.abs()).count() as f64;
            less + (equal + 1.0) / 2.0
        })
        .collect();
    let w: f64 = ranks.iter().zip(&d).filter(|(_, &v)| v > 0.0).map(|(r, _)| r).sum();
    let (mut le, mut ge) = (0u64, 0u64);
    for mask in 0u64..(1 << n) {
        let s: f64 = (0..n).filter(|i| mask >> i & 1 == 1).map(|i| ranks[i]).sum();
        if s <= w + 1e-9 {
            le += 1;
        }
        if s >= w - 1e-9 {
            ge += 1;
        }
    }
    Some((w, (2.0 * le.min(ge) as f64 / (1u64 << n) as f64).min(1.0)))
}

fn c8_metrics() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for case in 0..1000 {
        let c = rng.gen_range(2..=6);
        let n = rng.gen_range(1..=60);
        let truth: Vec<usize> = (0..n).map(|_| rng.gen_range(0..c)).collect();
        let levels = rng.gen_range(2..=20);
        let scores: Vec<f64> = (0..n * c).map(|_| rng.gen_range(0..levels) as f64 / levels as f64).collect();
        let predicted = argmax_rows(&scores, c);
        let want_pred: Vec<usize> = scores.chunks(c).map(oracle_argmax).collect();
        if predicted != want_pred {
            return Err(format!("case {case}: argmax"));
        }
        let m = confusion(&truth, &predicted, c).map_err(e2s)?;
        let mut counts = vec![0u64; c * c];
        for (&t, &p) in truth.iter().zip(&predicted) {
            counts[t * c + p] += 1;
        }
        for t in 0..c {
            for p in 0..c {
                if m.get(t, p) != counts[t * c + p] {
                    return Err(format!("case {case}: count ({t},{p})"));
                }
            }
        }
        let total = n as f64;
        let po = (0..c).map(|k| counts[k * c + k]).sum::<u64>() as f64 / total;
        let pe: f64 = (0..c)
            .map(|k| {
                let row: u64 = (0..c).map(|j| counts[k * c + j]).sum();
                let col: u64 = (0..c).map(|j| counts[j * c + k]).sum();
                row as f64 * col as f64
            })
            .sum::<f64>()
            / (total * total);
        let want_kappa = (pe < 1.0).then(|| (po - pe) / (1.0 - pe));
        match (m.cohen_kappa().ok(), want_kappa) {
            (Some(a), Some(b)) if (a - b).abs() <= 1e-12 => {}
            (None, None) => {}
            (a, b) => return Err(format!("case {case}: kappa {a:?} vs {b:?}")),
        }
        match (auc_ovr(&truth, &scores, c).ok(), oracle_auc(&truth, &scores, c)) {
            (Some(a), Some(b)) if (a - b).abs() <= 1e-12 => {}
            (None, None) => {}
            (a, b) => return Err(format!("case {case}: auc {a:?} vs {b:?}")),
        }
        let r = MetricsReport::from_scores(&truth, &scores, c).map_err(e2s)?;
        if (r.accuracy - po).abs() > 1e-15 || r.n != n {
            return Err(format!("case {case}: report accuracy"));
        }
    }
    let mut wcases = 0;
    for n in 1..=12usize {
        for _ in 0..25 {
            let d: Vec<f64> = (0..n).map(|_| rng.gen_range(-6i32..=6) as f64 * 0.5).collect();
            wcases += 1;
            match (wilcoxon_signed_rank(&d), oracle_wilcoxon(&d)) {
                (Ok(r), Some((w, p))) => {
                    if !r.exact || r.statistic != w || (r.p_value - p).abs() > 1e-12 {
                        return Err(format!("wilcoxon {d:?}: ({}, {}) vs ({w}, {p})", r.statistic, r.p_value));
                    }
                }
                (Err(_), None) => {}
                (r, o) => return Err(format!("wilcoxon {d:?}: {r:?} vs {o:?}")),
            }
        }
    }
    Ok(format!("1000 confusion/kappa/AUC cases and {wcases} signed-rank cases (n <= 12) match"))
}

fn c9_ig() -> Outcome {
    let w = random(&[3, 7], 1);
    let linear = {
        let w = w.clone();
        move |x: &Tensor<f64>| -> fast_core::Result<(Vec<f64>, Tensor<f64>)> {
            let n = w.len();
            let k = x.shape()[0];
            let values = (0..k)
                .map(|i| x.data()[i * n..(i + 1) * n].iter().zip(w.data()).map(|(a, b)| a * b).sum())
                .collect();
            Ok((values, Tensor::from_fn(x.shape(), |i| w.data()[i % n])))
        }
    };
    let x = random(&[3, 7], 2);
    let b = random(&[3, 7], 3);
    let m = integrated_gradients(&linear, &x, &b, "random", 0, 5).map_err(e2s)?;
    let lin_err = (0..21)
        .map(|i| (m.values[i] - (x.data()[i] - b.data()[i]) * w.data()[i]).abs())
        .fold(0.0, f64::max);

    let model = tiny_model(2);
    let f = FastLogit::new(&model, Variant::Full, 0).map_err(e2s)?;
    let xt = random(&[6, 40], 6).map(|v| 2.0 * v);
    let zero = Tensor::zeros(&[6, 40]);
    let full = integrated_gradients(&f, &xt, &zero, "zeros", 0, IG_VERIFY_STEPS).map_err(e2s)?;
    let same = integrated_gradients(&f, &xt, &xt, "self", 0, 8).map_err(e2s)?;
    let zero_map = same.values.iter().all(|&v| v == 0.0);
    require(
        lin_err <= 1e-8 && full.completeness_gap <= 0.01 && zero_map,
        format!(
            "linear max err {lin_err:.1e}, completeness gap {:.2e} at {IG_VERIFY_STEPS} steps, zero map {zero_map}",
            full.completeness_gap
        ),
    )
}

fn fft_db(h: &[f64], f: f64, rate: f64) -> f64 {
    let n = 1 << 18;
    let mut buf: Vec<Complex<f64>> = h.iter().map(|&v| Complex::new(v, 0.0)).collect();
    buf.resize(n, Complex::default());
    FftPlanner::new().plan_fft_forward(n).process(&mut buf);
    20.0 * buf[(f * n as f64 / rate).round() as usize].norm().log10()
}

fn c10_filters() -> Outcome {
    let rate = 200.0;
    let bp = design_fir(&FilterSpec::default_bandpass(rate), rate).map_err(e2s)?;
    let notch = design_fir(&FilterSpec::default_notch(rate), rate).map_err(e2s)?;
    let n50 = fft_db(&notch, 50.0, rate);
    let pass: Vec<f64> = [10.0, 25.0].iter().map(|&f| fft_db(&bp, f, rate)).collect();
    let stop: Vec<f64> = [0.1, 80.0].iter().map(|&f| fft_db(&bp, f, rate)).collect();
    require(
        n50 <= -40.0 && pass.iter().all(|g| g.abs() <= 1.0) && stop.iter().all(|&g| g <= -40.0),
        format!(
            "notch {n50:.1} dB at 50 Hz; pass {:.3}/{:.3} dB at 10/25 Hz; stop {:.1}/{:.1} dB at 0.1/80 Hz",
            pass[0], pass[1], stop[0], stop[1]
        ),
    )
}

fn c11_round_trips() -> Outcome {
    let tmp = tempfile::TempDir::new().map_err(e2s)?;
    let spec = SynthSpec {
        n_subjects: 2,
        blocks_per_subject: 5,
        trials_per_block: 2,
        layout: "compact16".into(),
        sample_rate: 100.0,
        snr_db: 20.0,
        seed: 11,
        ..SynthSpec::default()
    };
    let ds = generate(&spec).map_err(e2s)?;
    if ds != generate(&spec).map_err(e2s)? {
        return Err("generation is not reproducible".into());
    }
    let dir = tmp.path().join("c");
    write_container(&dir, &ds).map_err(e2s)?;
    let back = read_container(&dir).map_err(e2s)?;
    let bits_equal = back.trials.iter().zip(&ds.trials).all(|(a, b)| {
        a.data().iter().map(|v| v.to_bits()).eq(b.data().iter().map(|v| v.to_bits()))
    });
    if back != ds || !bits_equal {
        return Err("container round trip changed the data".into());
    }

    let layout = ds.layout().map_err(e2s)?;
    let part = RegionPartition::build(&layout, PartitionConfig::M8).map_err(e2s)?;
    let mut cfg = FastConfig::desk().with_partition(&part);
    cfg.window_samples = 100;
    cfg.stride_samples = 100;
    let train_cfg = TrainConfig {
        epochs: 2,
        warmup_epochs: 1,
        batch_size: 8,
        ..TrainConfig::default()
    };
    let inputs = ds.map_trials(|t| utterance_crop(t, 5)).map_err(e2s)?;
    let trials: Vec<_> = inputs.trials.iter().collect();
    let train = || -> Result<FastModel, String> {
        let mut m = FastModel::new(cfg.clone(), &part, 3).map_err(e2s)?;
        fit(&mut m, &train_cfg, &trials, 3, Init::Scratch { seed: 3 }).map_err(e2s)?;
        Ok(m)
    };
    let (a, b) = (train()?, train()?);
    if !a.params.bit_identical(&b.params) {
        return Err("training is not bit-reproducible".into());
    }
    let path = tmp.path().join("m.ckpt");
    save_checkpoint(&path, &a.config, &a.params).map_err(e2s)?;
    let (cfg2, store2) = load_checkpoint(&path).map_err(e2s)?;
    let bytes = std::fs::read(&path).map_err(e2s)?;
    let reencoded = encode_checkpoint(&cfg2, &store2).map_err(e2s)?;
    let (cfg3, store3) = decode_checkpoint(&reencoded).map_err(e2s)?;
    require(
        cfg2 == a.config && store2.bit_identical(&a.params) && reencoded == bytes && cfg3 == cfg2 && store3.bit_identical(&store2),
        format!(
            "{} trials and a {}-byte checkpoint round-trip bit-identically; generation and 2-epoch training repeat exactly",
            ds.len(),
            bytes.len()
        ),
    )
}

fn c12_partitions() -> Outcome {
    let layout = ChannelLayout::builtin("cap64").map_err(e2s)?;
    if layout.n_channels() != 62 {
        return Err(format!("cap64 has {} data channels", layout.n_channels()));
    }
    let chain = [PartitionConfig::M8, PartitionConfig::M5, PartitionConfig::M4, PartitionConfig::M3];
    let sets: Vec<Vec<BTreeSet<usize>>> = chain
        .iter()
        .map(|&c| {
            RegionPartition::build(&layout, c)
                .map(|p| p.members().iter().map(|m| m.iter().copied().collect()).collect())
                .map_err(e2s)
        })
        .collect::<Result<_, _>>()?;
    for (cfg, regions) in chain.iter().zip(&sets) {
        let mut seen = vec![0usize; 62];
        for r in regions {
            if r.is_empty() {
                return Err(format!("{cfg}: empty region"));
            }
            for &ch in r {
                seen[ch] += 1;
            }
        }
        if seen.iter().any(|&k| k != 1) {
            return Err(format!("{cfg}: not an exact cover"));
        }
    }
    for i in 0..chain.len() {
        for j in i + 1..chain.len() {
            for fine in &sets[i] {
                let holders = sets[j].iter().filter(|coarse| fine.is_subset(coarse)).count();
                if holders != 1 {
                    return Err(format!("{} region not inside exactly one {} region", chain[i], chain[j]));
                }
            }
        }
    }
    let sizes: Vec<usize> = sets.iter().map(Vec::len).collect();
    require(
        sizes == [8, 5, 4, 3],
        format!("M8/M5/M4/M3 exact covers of 62 channels with {sizes:?} regions; each refines the next"),
    )
}

fn main() {
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let criteria: [(&str, &str, fn() -> Outcome); 12] = [
        ("C1", "gradient fidelity", c1_gradients),
        ("C2", "architecture constants", c2_constants),
        ("C3", "chance model", c3_chance),
        ("C4", "learning above chance", c4_learning),
        ("C5", "pretraining benefit direction", c5_pretraining),
        ("C6", "no-TE ablation", c6_no_te),
        ("C7", "utterance monotonicity", c7_utterances),
        ("C8", "metrics oracles", c8_metrics),
        ("C9", "IG axioms", c9_ig),
        ("C10", "filter responses", c10_filters),
        ("C11", "round trips", c11_round_trips),
        ("C12", "partition algebra", c12_partitions),
    ];
    let mut failed = 0;
    for (id, name, f) in criteria {
        if !filter.is_empty() && !filter.iter().any(|x| x == id) {
            continue;
        }
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        match outcome {
            Ok(d) => println!("{id:<4} {name:<30} PASS  {d}"),
            Err(d) => {
                failed += 1;
                println!("{id:<4} {name:<30} FAIL  {d}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}

//! Planted-signal checks: attribution outputs must point at where and when
//! the synthetic class signal was placed.

use fast_core::attribution::{activation_timeline, channel_saliency, normalize_and_average, trial_attribution, ScanWindow};
use fast_core::model::{FastConfig, FastModel, Variant};
use fast_core::montage::{PartitionConfig, RegionPartition};
use fast_core::preprocess::utterance_crop;
use fast_core::synthdata::{generate, Dataset, SynthSpec};
use fast_core::training::{fit, Init, TrainConfig};

fn planted() -> SynthSpec {
    SynthSpec {
        n_subjects: 1,
        trials_per_block: 10,
        layout: "compact16".into(),
        sample_rate: 100.0,
        snr_db: 20.0,
        pad_s: 2.0,
        seed: 4,
        // Phase-locked bursts, so signed activations survive trial averaging.
        subject_variability: 0.0,
        ..SynthSpec::default()
    }
}

/// Desk model briefly trained on the first two utterances of every trial.
fn trained_model(ds: &Dataset, part: &RegionPartition) -> FastModel {
    let rate = ds.manifest.sample_rate;
    let mut cfg = FastConfig::desk().with_partition(part);
    cfg.window_samples = rate as usize;
    cfg.stride_samples = rate as usize;
    let mut model = FastModel::new(cfg, part, 0).unwrap();
    let inputs = ds.map_trials(|t| utterance_crop(t, 2)).unwrap();
    let trials: Vec<_> = inputs.trials.iter().collect();
    let train = TrainConfig {
        epochs: 25,
        warmup_epochs: 2,
        ..TrainConfig::default()
    };
    fit(&mut model, &train, &trials, 1, Init::Scratch { seed: 0 }).unwrap();
    model
}

#[test]
fn class_contrast_lights_up_the_planted_region_after_the_cue() {
    let ds = generate(&planted()).unwrap();
    let part = RegionPartition::build(&ds.layout().unwrap(), PartitionConfig::M8).unwrap();
    let model = trained_model(&ds, &part);
    let names = part.names().to_vec();
    let timelines: Vec<_> = ds
        .trials
        .iter()
        .map(|t| activation_timeline(&model, t, &names, ScanWindow::default(), 0.1).unwrap())
        .collect();
    let items: Vec<_> = ds.trials.iter().zip(&timelines).map(|(t, tl)| (t.label, tl)).collect();
    let maps = normalize_and_average(&items, 5).unwrap();

    let c0 = &maps.contrasts[0];
    let mean_abs = |region: &str, keep: &dyn Fn(f64) -> bool| {
        let r = names.iter().position(|n| n == region).unwrap();
        let vals: Vec<f64> = (0..c0.n_windows())
            .filter(|&w| keep(c0.times[w]))
            .flat_map(|w| (0..c0.n_features).map(move |f| (w, f)))
            .map(|(w, f)| c0.get(w, r, f).abs())
            .collect();
        vals.iter().sum::<f64>() / vals.len() as f64
    };
    // z-scoring over time gives every area unit variance, so compare where in
    // time it sits: after the cue versus before it.
    let ratio = |region: &str| mean_abs(region, &|t| t >= -0.5) / mean_abs(region, &|t| t <= -1.0);
    let ratios: Vec<f64> = names.iter().map(|n| ratio(n)).collect();
    let best = (0..names.len()).max_by(|&a, &b| ratios[a].total_cmp(&ratios[b])).unwrap();
    assert_eq!(names[best], "frontal", "{names:?} {ratios:?}");
    assert!(ratios[best] > 1.0);
}

#[test]
fn saliency_favours_planted_channels_after_training() {
    let ds = generate(&planted()).unwrap();
    let layout = ds.layout().unwrap();
    let part = RegionPartition::build(&layout, PartitionConfig::M8).unwrap();
    let model = trained_model(&ds, &part);
    let inputs = ds.map_trials(|t| utterance_crop(t, 2)).unwrap();

    // Class 1 lives in the left temporal area.
    let maps: Vec<_> = inputs
        .trials
        .iter()
        .filter(|t| t.label == 1)
        .take(6)
        .map(|t| trial_attribution(&model, t, Variant::Full, 16).unwrap())
        .collect();
    let s = channel_saliency(&maps, 100.0, 0).unwrap();
    let region = part.names().iter().position(|n| n == "left_temporal").unwrap();
    let inside: Vec<usize> = part.members()[region].clone();
    let mean = |rows: &[usize]| rows.iter().map(|&r| s.per_channel[r]).sum::<f64>() / rows.len() as f64;
    let outside: Vec<usize> = (0..layout.n_channels()).filter(|c| !inside.contains(c)).collect();
    let (a, b) = (mean(&inside), mean(&outside));
    assert!(a > b, "left temporal saliency {a:.4} vs elsewhere {b:.4}");
}

//! Leave-one-subject-out nearest-centroid probe on regional log bandpower.

use std::collections::BTreeSet;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use super::Dataset;
use crate::error::{Error, Result};
use crate::montage::{PartitionConfig, RegionPartition};
use crate::trial::EegTrial;

/// 4 Hz bins covering 4–40 Hz.
pub const PROBE_BANDS: [(f64, f64); 9] = [
    (4.0, 8.0),
    (8.0, 12.0),
    (12.0, 16.0),
    (16.0, 20.0),
    (20.0, 24.0),
    (24.0, 28.0),
    (28.0, 32.0),
    (32.0, 36.0),
    (36.0, 40.0),
];

/// Log10 mean periodogram power per (region, band), region-major.
pub fn probe_features(
    trial: &EegTrial,
    partition: &RegionPartition,
    planner: &mut FftPlanner<f64>,
) -> Result<Vec<f64>> {
    let n = trial.n_samples();
    let fft = planner.plan_fft_forward(n);
    let df = trial.sample_rate / n as f64;
    let mut power = Vec::with_capacity(trial.n_channels());
    let mut buf = vec![Complex::new(0.0, 0.0); n];
    for c in 0..trial.n_channels() {
        for (b, &v) in buf.iter_mut().zip(trial.channel(c)) {
            *b = Complex::new(v as f64, 0.0);
        }
        fft.process(&mut buf);
        let bands: Vec<f64> = PROBE_BANDS
            .iter()
            .map(|&(lo, hi)| {
                let bins: Vec<f64> = (1..=n / 2)
                    .filter(|&k| {
                        let f = k as f64 * df;
                        f >= lo && f < hi
                    })
                    .map(|k| buf[k].norm_sqr())
                    .collect();
                bins.iter().sum::<f64>() / bins.len().max(1) as f64
            })
            .collect();
        power.push(bands);
    }
    let mut out = Vec::with_capacity(partition.m() * PROBE_BANDS.len());
    for rows in partition.members() {
        for b in 0..PROBE_BANDS.len() {
            let p = rows.iter().map(|&r| power[r][b]).sum::<f64>() / rows.len() as f64;
            let v = p.log10();
            if !v.is_finite() {
                return Err(Error::Numeric(format!("band power {p} has no finite log")));
            }
            out.push(v);
        }
    }
    Ok(out)
}

/// Pooled held-out accuracy of a nearest-centroid classifier, training on all
/// subjects but one and testing on the one left out, for every subject.
/// Features are centered on the training subjects' mean; log powers already
/// share one scale, and per-feature scaling would inflate the noise bands.
pub fn separability_probe(ds: &Dataset) -> Result<f64> {
    let classes: BTreeSet<usize> = ds.trials.iter().map(|t| t.label).collect();
    let subjects: BTreeSet<u32> = ds.trials.iter().map(|t| t.subject).collect();
    if classes.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "probe needs at least two classes, found {}",
            classes.len()
        )));
    }
    if subjects.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "probe needs at least two subjects, found {}",
            subjects.len()
        )));
    }
    let layout = ds.layout()?;
    let partition = RegionPartition::build(&layout, PartitionConfig::M8)?;
    let mut planner = FftPlanner::new();
    let feats = ds
        .trials
        .iter()
        .map(|t| probe_features(t, &partition, &mut planner))
        .collect::<Result<Vec<_>>>()?;
    let d = feats[0].len();
    let n_classes = ds.manifest.n_classes.max(classes.iter().max().unwrap() + 1);

    let mut correct = 0usize;
    for &held in &subjects {
        let train: Vec<usize> = (0..ds.len()).filter(|&i| ds.trials[i].subject != held).collect();
        let test: Vec<usize> = (0..ds.len()).filter(|&i| ds.trials[i].subject == held).collect();

        let mut mean = vec![0.0; d];
        for &i in &train {
            mean.iter_mut().zip(&feats[i]).for_each(|(m, v)| *m += v);
        }
        mean.iter_mut().for_each(|m| *m /= train.len() as f64);
        let spread: f64 = train
            .iter()
            .map(|&i| (0..d).map(|j| (feats[i][j] - mean[j]).powi(2)).sum::<f64>())
            .sum();
        if spread == 0.0 {
            return Err(Error::Numeric("probe features are constant".into()));
        }
        let z = |i: usize| -> Vec<f64> { (0..d).map(|j| feats[i][j] - mean[j]).collect() };

        let mut centroids = vec![vec![0.0; d]; n_classes];
        let mut counts = vec![0usize; n_classes];
        for &i in &train {
            let k = ds.trials[i].label;
            counts[k] += 1;
            centroids[k].iter_mut().zip(z(i)).for_each(|(c, v)| *c += v);
        }
        for (c, &n) in centroids.iter_mut().zip(&counts) {
            if n > 0 {
                c.iter_mut().for_each(|v| *v /= n as f64);
            }
        }
        for &i in &test {
            let zi = z(i);
            let pred = (0..n_classes)
                .filter(|&k| counts[k] > 0)
                .min_by(|&a, &b| {
                    let da: f64 = centroids[a].iter().zip(&zi).map(|(c, v)| (c - v).powi(2)).sum();
                    let db: f64 = centroids[b].iter().zip(&zi).map(|(c, v)| (c - v).powi(2)).sum();
                    da.total_cmp(&db)
                })
                .unwrap();
            correct += (pred == ds.trials[i].label) as usize;
        }
    }
    Ok(correct as f64 / ds.len() as f64)
}

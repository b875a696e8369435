//! Integrated-gradients saliency, dense sliding-window token timelines, and
//! their class-level summaries and CSV exports.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::model::{fast_forward, Bound, FastConfig, FastModel, Mode, ParamStore, Variant, EVAL_BATCH};
use crate::numerics::{Graph, Tensor};
use crate::preprocess::{UTTERANCES, UTTERANCE_S};
use crate::trial::EegTrial;

/// Step between dense-scan windows, seconds.
pub const TIMELINE_STEP_S: f64 = 0.02;
/// Path steps for production maps and for verification.
pub const IG_STEPS: usize = 64;
pub const IG_VERIFY_STEPS: usize = 256;

/// Values and input gradients of one scalar output for a batch `[K, C, T]`.
pub trait TargetLogit {
    fn eval_batch(&self, x: &Tensor<f64>) -> Result<(Vec<f64>, Tensor<f64>)>;
}

impl<F> TargetLogit for F
where
    F: Fn(&Tensor<f64>) -> Result<(Vec<f64>, Tensor<f64>)>,
{
    fn eval_batch(&self, x: &Tensor<f64>) -> Result<(Vec<f64>, Tensor<f64>)> {
        self(x)
    }
}

/// Pre-softmax logit of one class of a FAST model, evaluated in float64
/// with frozen weights and running batch-norm statistics.
pub struct FastLogit {
    config: FastConfig,
    regions: Vec<Vec<usize>>,
    params: ParamStore<f64>,
    variant: Variant,
    pub target: usize,
}

impl FastLogit {
    pub fn new(model: &FastModel, variant: Variant, target: usize) -> Result<Self> {
        if target >= model.config.n_classes {
            return Err(Error::InvalidArgument(format!(
                "target class {target} of {}",
                model.config.n_classes
            )));
        }
        Ok(FastLogit {
            config: model.config.clone(),
            regions: model.regions.clone(),
            params: model.params.cast(),
            variant,
            target,
        })
    }
}

impl TargetLogit for FastLogit {
    fn eval_batch(&self, x: &Tensor<f64>) -> Result<(Vec<f64>, Tensor<f64>)> {
        let k = x.shape()[0];
        let mut g = Graph::new();
        let p = Bound::frozen(&mut g, &self.params)?;
        let xv = g.param(x.clone())?;
        let logits = fast_forward(&mut g, &p, &self.config, &self.regions, xv, self.variant, &mut Mode::Eval)?;
        let c = self.config.n_classes;
        let values: Vec<f64> = (0..k).map(|i| g.value(logits).data()[i * c + self.target]).collect();
        let pick = Tensor::from_fn(&[k, c], |i| if i % c == self.target { 1.0 } else { 0.0 });
        let total = g.weighted_sum(logits, pick)?;
        let mut grads = g.backward(total)?;
        let grad = grads
            .take(xv)
            .unwrap_or_else(|| Tensor::zeros(x.shape()));
        Ok((values, grad))
    }
}

/// Channel-by-sample importance for one trial.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionMap {
    pub n_channels: usize,
    pub n_samples: usize,
    /// Channel-major scores.
    pub values: Vec<f64>,
    pub target: usize,
    pub baseline: String,
    pub steps: usize,
    /// `F(x) - F(x')` from direct evaluations.
    pub delta: f64,
    /// `|sum(IG) - delta| / |delta|`; the absolute gap when `delta` is 0.
    pub completeness_gap: f64,
}

impl AttributionMap {
    pub fn channel(&self, c: usize) -> &[f64] {
        &self.values[c * self.n_samples..(c + 1) * self.n_samples]
    }

    pub fn total(&self) -> f64 {
        self.values.iter().sum()
    }
}

/// Straight-line path integral of the target gradient from `baseline` to
/// `x`, trapezoidal rule over `steps` intervals, scaled by `x - baseline`.
/// Both inputs are `[C, T]`.
pub fn integrated_gradients(
    f: &impl TargetLogit,
    x: &Tensor<f64>,
    baseline: &Tensor<f64>,
    baseline_id: &str,
    target: usize,
    steps: usize,
) -> Result<AttributionMap> {
    if x.shape() != baseline.shape() || x.shape().len() != 2 {
        return Err(shape_err!(
            "input {:?} and baseline {:?} must be equal [C, T] shapes",
            x.shape(),
            baseline.shape()
        ));
    }
    if steps == 0 {
        return Err(Error::InvalidArgument("integrated gradients needs steps >= 1".into()));
    }
    let (c, t) = (x.shape()[0], x.shape()[1]);
    let n = c * t;
    let diff: Vec<f64> = x.data().iter().zip(baseline.data()).map(|(a, b)| a - b).collect();
    let mut acc = vec![0.0; n];
    let (mut f_base, mut f_x) = (0.0, 0.0);
    let alphas: Vec<usize> = (0..=steps).collect();
    for chunk in alphas.chunks(EVAL_BATCH) {
        let mut data = Vec::with_capacity(chunk.len() * n);
        for &i in chunk {
            let a = i as f64 / steps as f64;
            data.extend(baseline.data().iter().zip(&diff).map(|(b, d)| b + a * d));
        }
        let batch = Tensor::new(vec![chunk.len(), c, t], data)?;
        let (values, grads) = f.eval_batch(&batch)?;
        for (j, &i) in chunk.iter().enumerate() {
            let w = if i == 0 || i == steps { 0.5 } else { 1.0 } / steps as f64;
            for (a, g) in acc.iter_mut().zip(&grads.data()[j * n..(j + 1) * n]) {
                *a += w * g;
            }
            if i == 0 {
                f_base = values[j];
            }
            if i == steps {
                f_x = values[j];
            }
        }
    }
    let values: Vec<f64> = acc.iter().zip(&diff).map(|(a, d)| a * d).collect();
    let delta = f_x - f_base;
    let gap = (values.iter().sum::<f64>() - delta).abs();
    Ok(AttributionMap {
        n_channels: c,
        n_samples: t,
        values,
        target,
        baseline: baseline_id.to_string(),
        steps,
        delta,
        completeness_gap: if delta != 0.0 { gap / delta.abs() } else { gap },
    })
}

/// IG of a trial's true-class logit against the all-zero baseline.
pub fn trial_attribution(model: &FastModel, trial: &EegTrial, variant: Variant, steps: usize) -> Result<AttributionMap> {
    let f = FastLogit::new(model, variant, trial.label)?;
    let x: Tensor<f64> = Tensor::new(
        vec![trial.n_channels(), trial.n_samples()],
        trial.data().iter().map(|&v| v as f64).collect(),
    )?;
    let zero = Tensor::zeros(x.shape());
    integrated_gradients(&f, &x, &zero, "zeros", trial.label, steps)
}

/// Region tokens of densely spaced windows across a trial.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivationTimeline {
    /// Window start relative to the cue, seconds.
    pub times: Vec<f64>,
    pub regions: Vec<String>,
    pub n_features: usize,
    /// `[window, region, feature]`, row-major.
    pub values: Vec<f64>,
    pub zscored: bool,
}

impl ActivationTimeline {
    pub fn n_windows(&self) -> usize {
        self.times.len()
    }

    pub fn get(&self, w: usize, region: usize, feature: usize) -> f64 {
        self.values[(w * self.regions.len() + region) * self.n_features + feature]
    }

    /// Mean over features of one region, per window.
    pub fn region_mean(&self, region: usize) -> Vec<f64> {
        (0..self.n_windows())
            .map(|w| (0..self.n_features).map(|f| self.get(w, region, f)).sum::<f64>() / self.n_features as f64)
            .collect()
    }

    fn same_grid(&self, other: &ActivationTimeline) -> bool {
        self.times == other.times && self.regions == other.regions && self.n_features == other.n_features
    }
}

/// Part of a trial to scan, in seconds relative to the cue; `None` means the
/// trial edge.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScanWindow {
    pub start_s: Option<f64>,
    pub end_s: Option<f64>,
}

/// Number of windows of `window` samples every `step` samples in `len`.
pub fn window_count(len: usize, window: usize, step: usize) -> usize {
    if len < window || step == 0 {
        0
    } else {
        (len - window) / step + 1
    }
}

/// Runs the tokenizer alone on every window of the scan.
pub fn activation_timeline(
    model: &FastModel,
    trial: &EegTrial,
    region_names: &[String],
    scan: ScanWindow,
    step_s: f64,
) -> Result<ActivationTimeline> {
    let rate = trial.sample_rate;
    let cue = trial.cue_onset as f64;
    let to_index = |s: f64| (cue + s * rate).round();
    let start = scan.start_s.map_or(0.0, to_index);
    let end = scan.end_s.map_or(trial.n_samples() as f64, to_index);
    if start < 0.0 || end > trial.n_samples() as f64 || end <= start {
        return Err(Error::InvalidArgument(format!(
            "scan {scan:?} outside a trial of {} samples",
            trial.n_samples()
        )));
    }
    let (start, end) = (start as usize, end as usize);
    let w = model.config.window_samples;
    let step = (step_s * rate).round() as usize;
    if step == 0 {
        return Err(Error::InvalidArgument(format!("step {step_s} s is below one sample")));
    }
    let n = window_count(end - start, w, step);
    if n == 0 {
        return Err(Error::InvalidArgument(format!(
            "scan of {} samples is shorter than the {w}-sample window",
            end - start
        )));
    }
    if region_names.len() != model.config.m() {
        return Err(Error::InvalidArgument(format!(
            "{} region names for {} regions",
            region_names.len(),
            model.config.m()
        )));
    }
    let c = trial.n_channels();
    let mut values = Vec::with_capacity(n * model.config.grid_width());
    let starts: Vec<usize> = (0..n).map(|i| start + i * step).collect();
    for chunk in starts.chunks(EVAL_BATCH * 2) {
        let mut data = Vec::with_capacity(chunk.len() * c * w);
        for &s in chunk {
            for ch in 0..c {
                data.extend_from_slice(&trial.channel(ch)[s..s + w]);
            }
        }
        let tokens = model.tokens(Tensor::new(vec![chunk.len(), c, w], data)?)?;
        values.extend(tokens.data().iter().map(|&v| v as f64));
    }
    Ok(ActivationTimeline {
        times: starts.iter().map(|&s| (s as f64 - cue) / rate).collect(),
        regions: region_names.to_vec(),
        n_features: model.config.token_width,
        values,
        zscored: false,
    })
}

/// Per-class averages z-scored along time, and one-vs-all contrasts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMaps {
    pub classes: Vec<usize>,
    pub maps: Vec<ActivationTimeline>,
    /// `maps[c]` minus the mean of the other classes' maps.
    pub contrasts: Vec<ActivationTimeline>,
}

fn zscore_time(t: &mut ActivationTimeline) {
    let (nw, m, f) = (t.n_windows(), t.regions.len(), t.n_features);
    for r in 0..m {
        for k in 0..f {
            let idx = |w: usize| (w * m + r) * f + k;
            let mean = (0..nw).map(|w| t.values[idx(w)]).sum::<f64>() / nw as f64;
            let var = (0..nw).map(|w| (t.values[idx(w)] - mean).powi(2)).sum::<f64>() / nw as f64;
            let sd = var.sqrt();
            for w in 0..nw {
                let v = &mut t.values[idx(w)];
                *v = if sd > 0.0 { (*v - mean) / sd } else { 0.0 };
            }
        }
    }
    t.zscored = true;
}

/// Averages timelines per class (labels `0..n_classes`, each present), then
/// z-scores every (region, feature) series over time.
pub fn normalize_and_average(items: &[(usize, &ActivationTimeline)], n_classes: usize) -> Result<ClassMaps> {
    if n_classes < 2 {
        return Err(Error::InvalidArgument("contrasts need at least two classes".into()));
    }
    let first = items
        .first()
        .ok_or_else(|| Error::InvalidArgument("no timelines".into()))?
        .1;
    let mut groups: BTreeMap<usize, Vec<&ActivationTimeline>> = BTreeMap::new();
    for &(label, t) in items {
        if !t.same_grid(first) {
            return Err(shape_err!("timelines on different window grids"));
        }
        if label >= n_classes {
            return Err(Error::InvalidArgument(format!("label {label} of {n_classes} classes")));
        }
        groups.entry(label).or_default().push(t);
    }
    if let Some(missing) = (0..n_classes).find(|k| !groups.contains_key(k)) {
        return Err(Error::InvalidArgument(format!("class {missing} has no trials")));
    }
    let maps: Vec<ActivationTimeline> = groups
        .values()
        .map(|ts| {
            let mut avg = first.clone();
            avg.values = (0..first.values.len())
                .map(|i| ts.iter().map(|t| t.values[i]).sum::<f64>() / ts.len() as f64)
                .collect();
            zscore_time(&mut avg);
            avg
        })
        .collect();
    let contrasts = (0..n_classes)
        .map(|c| {
            let mut out = maps[c].clone();
            for (i, v) in out.values.iter_mut().enumerate() {
                let others = (0..n_classes).filter(|&o| o != c).map(|o| maps[o].values[i]).sum::<f64>()
                    / (n_classes - 1) as f64;
                *v -= others;
            }
            out
        })
        .collect();
    Ok(ClassMaps {
        classes: (0..n_classes).collect(),
        maps,
        contrasts,
    })
}

/// Mean |IG| per channel, overall and within each utterance span.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelSaliency {
    pub per_channel: Vec<f64>,
    /// `[channel][utterance]`; spans past the end of the maps stay 0.
    pub per_utterance: Vec<Vec<f64>>,
}

/// Averages `|IG|` over time and maps. Utterance `u` covers
/// `[cue + 2u s, cue + 2(u+1) s)`.
pub fn channel_saliency(maps: &[AttributionMap], sample_rate: f64, cue_onset: usize) -> Result<ChannelSaliency> {
    let Some(first) = maps.first() else {
        return Ok(ChannelSaliency {
            per_channel: vec![],
            per_utterance: vec![],
        });
    };
    let (c, t) = (first.n_channels, first.n_samples);
    if maps.iter().any(|m| m.n_channels != c || m.n_samples != t) {
        return Err(shape_err!("attribution maps differ in shape"));
    }
    let span = (UTTERANCE_S * sample_rate).round() as usize;
    let mut per_channel = vec![0.0; c];
    let mut per_utterance = vec![vec![0.0; UTTERANCES]; c];
    for ch in 0..c {
        let mut sum = 0.0;
        let mut u_sum = vec![0.0; UTTERANCES];
        for m in maps {
            let row = m.channel(ch);
            sum += row.iter().map(|v| v.abs()).sum::<f64>();
            for (u, s) in u_sum.iter_mut().enumerate() {
                let lo = (cue_onset + u * span).min(t);
                let hi = (cue_onset + (u + 1) * span).min(t);
                *s += row[lo..hi].iter().map(|v| v.abs()).sum::<f64>();
            }
        }
        per_channel[ch] = sum / (maps.len() * t) as f64;
        for u in 0..UTTERANCES {
            let lo = (cue_onset + u * span).min(t);
            let hi = (cue_onset + (u + 1) * span).min(t);
            if hi > lo {
                per_utterance[ch][u] = u_sum[u] / (maps.len() * (hi - lo)) as f64;
            }
        }
    }
    Ok(ChannelSaliency {
        per_channel,
        per_utterance,
    })
}

fn csv_writer(path: &Path) -> Result<csv::Writer<File>> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::Writer::from_writer(f))
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Format(format!("{}: {other:?}", path.display())),
    }
}

/// Rows `window_time, region, feature, value`.
pub fn write_timeline_csv(path: impl AsRef<Path>, t: &ActivationTimeline) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv_writer(path)?;
    let run = |w: &mut csv::Writer<File>| -> std::result::Result<(), csv::Error> {
        w.write_record(["window_time", "region", "feature", "value"])?;
        for (wi, time) in t.times.iter().enumerate() {
            for (r, name) in t.regions.iter().enumerate() {
                for f in 0..t.n_features {
                    w.write_record([
                        format!("{time:.4}"),
                        name.clone(),
                        f.to_string(),
                        t.get(wi, r, f).to_string(),
                    ])?;
                }
            }
        }
        w.flush()?;
        Ok(())
    };
    run(&mut w).map_err(|e| csv_err(path, e))
}

/// Rows `label, value, utterance_index`; the index is empty for the
/// whole-trial value.
pub fn write_saliency_csv(path: impl AsRef<Path>, labels: &[String], s: &ChannelSaliency) -> Result<()> {
    let path = path.as_ref();
    if labels.len() != s.per_channel.len() {
        return Err(shape_err!("{} labels for {} channels", labels.len(), s.per_channel.len()));
    }
    let mut w = csv_writer(path)?;
    let run = |w: &mut csv::Writer<File>| -> std::result::Result<(), csv::Error> {
        w.write_record(["label", "value", "utterance_index"])?;
        for (ch, label) in labels.iter().enumerate() {
            w.write_record([label.clone(), s.per_channel[ch].to_string(), String::new()])?;
            for (u, v) in s.per_utterance[ch].iter().enumerate() {
                w.write_record([label.clone(), v.to_string(), u.to_string()])?;
            }
        }
        w.flush()?;
        Ok(())
    };
    run(&mut w).map_err(|e| csv_err(path, e))
}

/// JSON sidecar for an attribution map.
pub fn write_map_json(path: impl AsRef<Path>, m: &AttributionMap) -> Result<()> {
    let path = path.as_ref();
    let mut f = File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&serde_json::to_vec(m)?).map_err(|e| Error::io(path, e))
}

//! Filtering, resampling, baseline correction and epoching of trials.

use std::f64::consts::PI;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::trial::EegTrial;

/// Spacing of utterance cues within a trial, seconds.
pub const UTTERANCE_S: f64 = 2.0;
/// Utterances per trial.
pub const UTTERANCES: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FilterKind {
    Lowpass,
    Bandpass,
    Bandstop,
}

/// Windowed-sinc FIR description. `low_hz` is ignored for lowpass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FilterSpec {
    pub kind: FilterKind,
    pub low_hz: f64,
    pub high_hz: f64,
    pub taps: usize,
    #[serde(default = "yes")]
    pub zero_phase: bool,
}

fn yes() -> bool {
    true
}

impl FilterSpec {
    /// 1-40 Hz band-pass with 701 taps per 200 Hz of sample rate.
    pub fn default_bandpass(rate: f64) -> Self {
        FilterSpec {
            kind: FilterKind::Bandpass,
            low_hz: 1.0,
            high_hz: 40.0,
            taps: scaled_taps(701, rate),
            zero_phase: true,
        }
    }

    /// 49-51 Hz band-stop with 401 taps per 200 Hz of sample rate.
    pub fn default_notch(rate: f64) -> Self {
        FilterSpec {
            kind: FilterKind::Bandstop,
            low_hz: 49.0,
            high_hz: 51.0,
            taps: scaled_taps(401, rate),
            zero_phase: true,
        }
    }

    pub fn lowpass(cutoff_hz: f64, taps: usize) -> Self {
        FilterSpec {
            kind: FilterKind::Lowpass,
            low_hz: 0.0,
            high_hz: cutoff_hz,
            taps,
            zero_phase: true,
        }
    }

    pub fn validate(&self, rate: f64) -> Result<()> {
        let nyquist = rate / 2.0;
        if self.taps % 2 == 0 || self.taps < 3 {
            return Err(Error::InvalidArgument(format!(
                "FIR needs an odd tap count >= 3, got {}",
                self.taps
            )));
        }
        if !(self.high_hz > 0.0 && self.high_hz < nyquist) {
            return Err(Error::InvalidArgument(format!(
                "band edge {} Hz must lie in (0, {nyquist}) Hz",
                self.high_hz
            )));
        }
        if self.kind != FilterKind::Lowpass && !(self.low_hz > 0.0 && self.low_hz < self.high_hz) {
            return Err(Error::InvalidArgument(format!(
                "band [{}, {}] Hz is not ordered",
                self.low_hz, self.high_hz
            )));
        }
        Ok(())
    }
}

fn scaled_taps(per_200: usize, rate: f64) -> usize {
    let t = (per_200 as f64 * rate / 200.0).round() as usize;
    t | 1
}

fn hamming(n: usize) -> Vec<f64> {
    let m = (n - 1) as f64;
    (0..n)
        .map(|i| 0.54 - 0.46 * (2.0 * PI * i as f64 / m).cos())
        .collect()
}

/// Unit-DC-gain windowed-sinc lowpass; `fc` in cycles per sample.
fn windowed_lowpass(fc: f64, window: &[f64]) -> Vec<f64> {
    let mid = (window.len() / 2) as f64;
    let mut h: Vec<f64> = window
        .iter()
        .enumerate()
        .map(|(i, w)| {
            let x = i as f64 - mid;
            let s = if x == 0.0 {
                2.0 * fc
            } else {
                (2.0 * PI * fc * x).sin() / (PI * x)
            };
            s * w
        })
        .collect();
    let dc: f64 = h.iter().sum();
    h.iter_mut().for_each(|v| *v /= dc);
    h
}

/// Hamming-windowed sinc coefficients. Band-pass is the difference of two
/// lowpasses; band-stop is the spectral inversion of the band-pass.
pub fn design_fir(spec: &FilterSpec, rate: f64) -> Result<Vec<f64>> {
    spec.validate(rate)?;
    let w = hamming(spec.taps);
    let hi = windowed_lowpass(spec.high_hz / rate, &w);
    Ok(match spec.kind {
        FilterKind::Lowpass => hi,
        FilterKind::Bandpass | FilterKind::Bandstop => {
            let lo = windowed_lowpass(spec.low_hz / rate, &w);
            let mut h: Vec<f64> = hi.iter().zip(&lo).map(|(a, b)| a - b).collect();
            if spec.kind == FilterKind::Bandstop {
                h.iter_mut().for_each(|v| *v = -*v);
                h[spec.taps / 2] += 1.0;
            }
            h
        }
    })
}

/// Magnitude response of `h` at `freq_hz`, evaluated directly.
pub fn magnitude_at(h: &[f64], freq_hz: f64, rate: f64) -> f64 {
    let w = 2.0 * PI * freq_hz / rate;
    let (re, im) = h
        .iter()
        .enumerate()
        .fold((0.0, 0.0), |(re, im), (n, &c)| {
            (re + c * (w * n as f64).cos(), im - c * (w * n as f64).sin())
        });
    re.hypot(im)
}

/// Causal FIR filtering (zero initial state), output length = input length.
fn fir_filter(h: &[f64], x: &[f64], planner: &mut FftPlanner<f64>) -> Vec<f64> {
    if h.len() <= 32 {
        return (0..x.len())
            .map(|n| {
                h.iter()
                    .take(n + 1)
                    .enumerate()
                    .map(|(k, c)| c * x[n - k])
                    .sum()
            })
            .collect();
    }
    let n = (x.len() + h.len() - 1).next_power_of_two();
    let fwd = planner.plan_fft_forward(n);
    let inv = planner.plan_fft_inverse(n);
    let mut a: Vec<Complex<f64>> = x.iter().map(|&v| Complex::new(v, 0.0)).collect();
    a.resize(n, Complex::default());
    let mut b: Vec<Complex<f64>> = h.iter().map(|&v| Complex::new(v, 0.0)).collect();
    b.resize(n, Complex::default());
    fwd.process(&mut a);
    fwd.process(&mut b);
    for (p, q) in a.iter_mut().zip(&b) {
        *p *= q;
    }
    inv.process(&mut a);
    a.truncate(x.len());
    a.iter().map(|c| c.re / n as f64).collect()
}

/// Forward-backward filtering of one series with odd reflection padding of
/// `3 * taps` samples at each end.
pub fn filtfilt(h: &[f64], x: &[f64]) -> Result<Vec<f64>> {
    let pad = 3 * h.len();
    if x.len() <= pad {
        return Err(shape_err!(
            "series of {} samples is too short for a {}-tap zero-phase filter (needs > {pad})",
            x.len(),
            h.len()
        ));
    }
    let n = x.len();
    let mut ext = Vec::with_capacity(n + 2 * pad);
    ext.extend((1..=pad).rev().map(|i| 2.0 * x[0] - x[i]));
    ext.extend_from_slice(x);
    ext.extend((1..=pad).map(|i| 2.0 * x[n - 1] - x[n - 1 - i]));
    let mut planner = FftPlanner::new();
    let mut y = fir_filter(h, &ext, &mut planner);
    y.reverse();
    let mut y = fir_filter(h, &y, &mut planner);
    y.reverse();
    Ok(y[pad..pad + n].to_vec())
}

/// Applies `h` to every channel, forward-backward.
pub fn apply_zero_phase(h: &[f64], x: &EegTrial) -> Result<EegTrial> {
    let mut out = x.clone();
    for c in 0..x.n_channels() {
        let series: Vec<f64> = x.channel(c).iter().map(|&v| v as f64).collect();
        let y = filtfilt(h, &series)?;
        for (o, v) in out.channel_mut(c).iter_mut().zip(y) {
            *o = v as f32;
        }
    }
    Ok(out)
}

/// Keeps every k-th sample, k = source rate / target rate.
pub fn decimate(x: &EegTrial, target_rate: f64) -> Result<EegTrial> {
    let ratio = x.sample_rate / target_rate;
    let k = ratio.round() as usize;
    if k == 0 || (ratio - k as f64).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!(
            "cannot decimate {} Hz to {target_rate} Hz by an integer factor",
            x.sample_rate
        )));
    }
    if k == 1 {
        return Ok(x.clone());
    }
    let n = x.n_samples().div_ceil(k);
    let mut data = Vec::with_capacity(x.n_channels() * n);
    for c in 0..x.n_channels() {
        data.extend(x.channel(c).iter().step_by(k));
    }
    let mut out = x.with_data(x.n_channels(), n, data);
    out.sample_rate = target_rate;
    out.cue_onset = x.cue_onset / k;
    Ok(out)
}

/// Subtracts each channel's mean over the `baseline_s` seconds before the cue.
pub fn baseline_correct(x: &EegTrial, baseline_s: f64) -> Result<EegTrial> {
    let len = (baseline_s * x.sample_rate).round() as usize;
    if len == 0 || x.cue_onset < len {
        return Err(Error::InvalidArgument(format!(
            "baseline of {len} samples needs that much data before the cue at {}",
            x.cue_onset
        )));
    }
    let mut out = x.clone();
    let start = x.cue_onset - len;
    for c in 0..x.n_channels() {
        let ch = out.channel_mut(c);
        let mean = ch[start..x.cue_onset].iter().map(|&v| v as f64).sum::<f64>() / len as f64;
        for v in ch.iter_mut() {
            *v = (*v as f64 - mean) as f32;
        }
    }
    Ok(out)
}

/// Window and stride for cutting a trial into segments.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegmentPlan {
    pub window_s: f64,
    pub stride_s: f64,
}

impl Default for SegmentPlan {
    fn default() -> Self {
        SegmentPlan {
            window_s: 1.0,
            stride_s: 0.5,
        }
    }
}

impl SegmentPlan {
    pub fn window_samples(&self, rate: f64) -> usize {
        (self.window_s * rate).round() as usize
    }

    pub fn stride_samples(&self, rate: f64) -> usize {
        (self.stride_s * rate).round() as usize
    }

    /// `floor((T - window) / stride) + 1` in samples.
    pub fn count(&self, n_samples: usize, rate: f64) -> Result<usize> {
        let w = self.window_samples(rate);
        let s = self.stride_samples(rate);
        if w == 0 || s == 0 {
            return Err(Error::InvalidArgument(format!(
                "segment window {} s / stride {} s round to zero samples",
                self.window_s, self.stride_s
            )));
        }
        if w > n_samples {
            return Err(shape_err!(
                "segment window of {w} samples is longer than the trial ({n_samples})"
            ));
        }
        Ok((n_samples - w) / s + 1)
    }
}

/// Cuts a trial into `plan.count` segments in temporal order.
pub fn segment(x: &EegTrial, plan: &SegmentPlan) -> Result<Vec<EegTrial>> {
    let n = plan.count(x.n_samples(), x.sample_rate)?;
    let w = plan.window_samples(x.sample_rate);
    let s = plan.stride_samples(x.sample_rate);
    (0..n).map(|i| x.crop(i * s, w)).collect()
}

/// The first `k` utterances after the cue: `[cue, cue + 2k s)`.
pub fn utterance_crop(x: &EegTrial, k: usize) -> Result<EegTrial> {
    if !(1..=UTTERANCES).contains(&k) {
        return Err(Error::InvalidArgument(format!(
            "utterance count {k} outside 1..={UTTERANCES}"
        )));
    }
    let len = (k as f64 * UTTERANCE_S * x.sample_rate).round() as usize;
    if x.cue_onset + len > x.n_samples() {
        return Err(shape_err!(
            "trial of {} samples with cue at {} does not cover {k} utterances",
            x.n_samples(),
            x.cue_onset
        ));
    }
    x.crop(x.cue_onset, len)
}

/// `true` to keep: no sample's magnitude strictly exceeds the threshold.
pub fn reject_artifacts(x: &EegTrial, threshold_uv: f64) -> bool {
    x.data().iter().all(|v| (*v as f64).abs() <= threshold_uv)
}

/// Full conditioning chain: band-pass, notch, decimation, baseline correction,
/// epoching around the cue.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PreprocessConfig {
    pub bandpass: Option<FilterSpec>,
    pub notch: Option<FilterSpec>,
    pub target_rate: f64,
    pub baseline_s: f64,
    /// Kept before and after the 10 s task window.
    pub pre_s: f64,
    pub post_s: f64,
    pub task_s: f64,
    /// `None` disables amplitude rejection.
    pub reject_threshold_uv: Option<f64>,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            bandpass: None,
            notch: None,
            target_rate: 200.0,
            baseline_s: 1.0,
            pre_s: 1.0,
            post_s: 1.0,
            task_s: UTTERANCE_S * UTTERANCES as f64,
            reject_threshold_uv: Some(150.0),
        }
    }
}

impl PreprocessConfig {
    /// Defaults with the standard filters designed for `rate`. The notch is
    /// left out when its stop band does not fit below Nyquist, and input
    /// already below 200 Hz keeps its rate.
    pub fn for_rate(rate: f64) -> Self {
        let notch = FilterSpec::default_notch(rate);
        PreprocessConfig {
            target_rate: rate.min(200.0),
            bandpass: Some(FilterSpec::default_bandpass(rate)),
            notch: (notch.high_hz < rate / 2.0).then_some(notch),
            ..Default::default()
        }
    }
}

/// Runs the chain on one trial. `Ok(None)` means the trial was rejected.
pub fn preprocess_trial(x: &EegTrial, cfg: &PreprocessConfig) -> Result<Option<EegTrial>> {
    let mut t = x.clone();
    for spec in [&cfg.bandpass, &cfg.notch].into_iter().flatten() {
        let h = design_fir(spec, t.sample_rate)?;
        t = if spec.zero_phase {
            apply_zero_phase(&h, &t)?
        } else {
            let mut planner = FftPlanner::new();
            let mut out = t.clone();
            for c in 0..t.n_channels() {
                let series: Vec<f64> = t.channel(c).iter().map(|&v| v as f64).collect();
                let y = fir_filter(&h, &series, &mut planner);
                for (o, v) in out.channel_mut(c).iter_mut().zip(y) {
                    *o = v as f32;
                }
            }
            out
        };
    }
    t = decimate(&t, cfg.target_rate)?;
    t = baseline_correct(&t, cfg.baseline_s)?;
    let rate = t.sample_rate;
    let pre = (cfg.pre_s * rate).round() as usize;
    let len = ((cfg.pre_s + cfg.task_s + cfg.post_s) * rate).round() as usize;
    if t.cue_onset < pre || t.cue_onset - pre + len > t.n_samples() {
        return Err(shape_err!(
            "trial of {} samples (cue at {}) cannot hold a {pre}+{len} sample epoch",
            t.n_samples(),
            t.cue_onset
        ));
    }
    t = t.crop(t.cue_onset - pre, len)?;
    if let Some(th) = cfg.reject_threshold_uv {
        if !reject_artifacts(&t, th) {
            return Ok(None);
        }
    }
    Ok(Some(t))
}

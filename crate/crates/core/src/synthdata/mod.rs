//! Labeled synthetic EEG with class-specific regional bursts, the dataset
//! container, and a bandpower probe that checks the task is learnable.
//!
//! Each trial is 1/f background noise on every channel plus a small shared
//! common-mode term. On top of that, the trial's class adds a sinusoidal
//! burst in its signature regions at every utterance onset (0, 2, 4, 6, 8 s
//! after the cue). `snr_db` compares the RMS of an undecayed burst at its
//! envelope peak with the background RMS.

mod container;
mod probe;

use std::collections::BTreeSet;
use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::montage::{Area, AreaMap, ChannelLayout};
use crate::preprocess::{UTTERANCES, UTTERANCE_S};
use crate::trial::EegTrial;

pub use container::{
    decode_trial, encode_trial, read_container, read_manifest, trial_file_name, write_container,
    Dataset, Manifest, TrialRecord, MANIFEST_FILE, MANIFEST_VERSION, TRIAL_DIR, TRIAL_HEADER,
    TRIAL_MAGIC, TRIAL_VERSION,
};
pub use probe::{probe_features, separability_probe, PROBE_BANDS};

/// Where and how one class shows up in the signal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassSignature {
    /// Area names, e.g. `frontal` or `left_temporal`.
    pub regions: Vec<String>,
    pub carrier_hz: f64,
    /// Amplitude factor applied once per successive utterance, in (0, 1].
    pub decay: f64,
}

impl ClassSignature {
    fn new(regions: &[&str], carrier_hz: f64, decay: f64) -> Self {
        ClassSignature {
            regions: regions.iter().map(|r| r.to_string()).collect(),
            carrier_hz,
            decay,
        }
    }
}

pub fn default_signatures() -> Vec<ClassSignature> {
    vec![
        ClassSignature::new(&["frontal"], 6.0, 0.8),
        ClassSignature::new(&["left_temporal"], 10.0, 0.8),
        ClassSignature::new(&["precentral"], 14.0, 0.8),
        ClassSignature::new(&["parietal"], 22.0, 0.8),
        ClassSignature::new(&["occipital"], 30.0, 0.8),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub n_subjects: u32,
    pub blocks_per_subject: u32,
    pub trials_per_block: u32,
    pub n_classes: usize,
    /// Built-in layout id.
    pub layout: String,
    pub sample_rate: f64,
    /// Task span after the cue, seconds.
    pub trial_s: f64,
    /// Extra background before the cue and after the task, seconds.
    pub pad_s: f64,
    pub snr_db: f64,
    /// Background RMS in µV.
    pub noise_uv: f64,
    /// Shared common-mode amplitude relative to the background.
    pub common_mode: f64,
    pub burst_s: f64,
    /// Burst start after each utterance onset, seconds.
    pub burst_delay_s: f64,
    pub signatures: Vec<ClassSignature>,
    /// Scale of per-subject channel gains and phase offsets.
    pub subject_variability: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            n_subjects: 5,
            blocks_per_subject: 5,
            trials_per_block: 20,
            n_classes: 5,
            layout: "cap64".into(),
            sample_rate: 200.0,
            trial_s: 10.0,
            pad_s: 0.0,
            snr_db: 0.0,
            noise_uv: 10.0,
            common_mode: 0.1,
            burst_s: 1.0,
            burst_delay_s: 0.2,
            signatures: default_signatures(),
            subject_variability: 0.2,
            seed: 0,
        }
    }
}

impl SynthSpec {
    /// +20 dB bursts.
    pub fn easy() -> Self {
        SynthSpec {
            snr_db: 20.0,
            ..Self::default()
        }
    }

    /// +6 dB bursts.
    pub fn medium() -> Self {
        SynthSpec {
            snr_db: 6.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_subjects == 0 || self.blocks_per_subject == 0 || self.trials_per_block == 0 {
            return bad("subjects, blocks and trials per block must be positive".into());
        }
        if self.n_classes == 0 || self.n_classes > 256 || self.signatures.len() < self.n_classes {
            return bad(format!(
                "{} classes with {} signatures",
                self.n_classes,
                self.signatures.len()
            ));
        }
        if !(self.sample_rate > 0.0) || !(self.trial_s > 0.0) || !(self.pad_s >= 0.0) {
            return bad("sample rate and trial length must be positive".into());
        }
        if !self.snr_db.is_finite() || !(self.noise_uv > 0.0) || !(self.common_mode >= 0.0) {
            return bad(format!("snr {} dB, noise {} µV", self.snr_db, self.noise_uv));
        }
        if !(self.burst_s > 0.0) || !(self.burst_delay_s >= 0.0) || !(self.subject_variability >= 0.0) {
            return bad("burst length, delay and variability must be non-negative".into());
        }
        let mut seen = BTreeSet::new();
        for (k, s) in self.signatures[..self.n_classes].iter().enumerate() {
            if !(s.decay > 0.0 && s.decay <= 1.0) {
                return bad(format!("class {k}: decay {} outside (0, 1]", s.decay));
            }
            if !(s.carrier_hz > 0.0 && s.carrier_hz < self.sample_rate / 2.0) {
                return bad(format!("class {k}: carrier {} Hz", s.carrier_hz));
            }
            if s.regions.is_empty() {
                return bad(format!("class {k}: no regions"));
            }
            for r in &s.regions {
                if Area::from_name(r).is_none() {
                    return bad(format!("class {k}: unknown region {r:?}"));
                }
            }
            let mut regions = s.regions.clone();
            regions.sort();
            if !seen.insert((regions, s.carrier_hz.to_bits())) {
                return bad(format!("class {k} repeats another class's signature"));
            }
        }
        ChannelLayout::builtin(&self.layout)?;
        Ok(())
    }

    pub fn n_trials(&self) -> usize {
        (self.n_subjects * self.blocks_per_subject * self.trials_per_block) as usize
    }

    /// Burst amplitude (peak of the sinusoid) before decay.
    pub fn burst_amplitude(&self) -> f64 {
        std::f64::consts::SQRT_2 * self.noise_uv * 10f64.powf(self.snr_db / 20.0)
    }
}

/// SplitMix64 finalizer folded over the inputs.
pub fn mix_seed(parts: &[u64]) -> u64 {
    let mut h = 0x9E37_79B9_7F4A_7C15u64;
    for &p in parts {
        let mut z = h ^ p.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h = z ^ (z >> 31);
    }
    h
}

/// Unit-RMS noise with power falling as 1/f above 1 Hz and no DC.
pub fn pink_noise(n: usize, rate: f64, rng: &mut impl Rng, planner: &mut FftPlanner<f64>) -> Vec<f64> {
    let mut buf: Vec<Complex<f64>> = (0..n)
        .map(|_| Complex::new(rng.sample::<f64, _>(StandardNormal), 0.0))
        .collect();
    planner.plan_fft_forward(n).process(&mut buf);
    for (k, b) in buf.iter_mut().enumerate() {
        let f = k.min(n - k) as f64 * rate / n as f64;
        *b *= if k == 0 { 0.0 } else { 1.0 / f.max(1.0).sqrt() };
    }
    planner.plan_fft_inverse(n).process(&mut buf);
    let mut out: Vec<f64> = buf.iter().map(|c| c.re).collect();
    let rms = (out.iter().map(|v| v * v).sum::<f64>() / n as f64).sqrt();
    if rms > 0.0 {
        out.iter_mut().for_each(|v| *v /= rms);
    }
    out
}

struct SubjectProfile {
    gains: Vec<f64>,
    phases: Vec<f64>,
}

fn subject_profile(spec: &SynthSpec, subject: u32, n_channels: usize) -> SubjectProfile {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[spec.seed, subject as u64, u64::MAX]));
    let v = spec.subject_variability;
    let gains = (0..n_channels)
        .map(|_| (v * rng.sample::<f64, _>(StandardNormal)).exp())
        .collect();
    let phases = (0..spec.n_classes)
        .map(|_| v * rng.gen_range(0.0..2.0 * PI))
        .collect();
    SubjectProfile { gains, phases }
}

/// Channels of each class's signature regions.
fn signature_channels(spec: &SynthSpec, areas: &AreaMap, n_channels: usize) -> Vec<Vec<usize>> {
    spec.signatures[..spec.n_classes]
        .iter()
        .map(|s| {
            let wanted: Vec<Area> = s.regions.iter().filter_map(|r| Area::from_name(r)).collect();
            (0..n_channels).filter(|&c| wanted.contains(&areas.area(c))).collect()
        })
        .collect()
}

/// Balanced labels for one block, shuffled. When a block holds fewer trials
/// than a multiple of the class count, the class cycle carries on from the
/// previous block so the subject stays balanced.
fn block_labels(spec: &SynthSpec, subject: u32, block: u32) -> Vec<usize> {
    let tpb = spec.trials_per_block as usize;
    let offset = block as usize * tpb;
    let mut labels: Vec<usize> = (0..tpb).map(|i| (offset + i) % spec.n_classes).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[spec.seed, subject as u64, block as u64, u64::MAX - 1]));
    labels.shuffle(&mut rng);
    labels
}

/// Generates the full dataset. Every trial is a pure function of
/// `(spec, subject, block, index)`.
pub fn generate(spec: &SynthSpec) -> Result<Dataset> {
    spec.validate()?;
    let layout = ChannelLayout::builtin(&spec.layout)?;
    let layout = ChannelLayout::new(
        layout.labels().to_vec(),
        layout.reference.clone(),
        layout.ground.clone(),
        spec.sample_rate,
    )?;
    let areas = AreaMap::from_labels(&layout)?;
    let n_channels = layout.n_channels();
    let sig_channels = signature_channels(spec, &areas, n_channels);
    for (k, chans) in sig_channels.iter().enumerate() {
        if chans.is_empty() {
            return Err(Error::Config(format!(
                "class {k}: layout {} has no channel in {:?}",
                spec.layout, spec.signatures[k].regions
            )));
        }
    }
    let mut planner = FftPlanner::new();
    let mut trials = Vec::with_capacity(spec.n_trials());
    let mut indices = Vec::with_capacity(spec.n_trials());
    for subject in 0..spec.n_subjects {
        let profile = subject_profile(spec, subject, n_channels);
        for block in 0..spec.blocks_per_subject {
            let labels = block_labels(spec, subject, block);
            for (index, &label) in labels.iter().enumerate() {
                let trial = generate_trial(
                    spec,
                    &profile,
                    &sig_channels[label],
                    label,
                    subject,
                    block,
                    index as u32,
                    n_channels,
                    &mut planner,
                )?;
                trials.push(trial);
                indices.push(index as u32);
            }
        }
    }
    Dataset::new(&spec.layout, &layout, spec.n_classes, trials, &indices)
}

#[allow(clippy::too_many_arguments)]
fn generate_trial(
    spec: &SynthSpec,
    profile: &SubjectProfile,
    channels: &[usize],
    label: usize,
    subject: u32,
    block: u32,
    index: u32,
    n_channels: usize,
    planner: &mut FftPlanner<f64>,
) -> Result<EegTrial> {
    let rate = spec.sample_rate;
    let pad = (spec.pad_s * rate).round() as usize;
    let n = (spec.trial_s * rate).round() as usize + 2 * pad;
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[spec.seed, subject as u64, block as u64, index as u64]));

    let mut x = vec![0.0f64; n_channels * n];
    for c in 0..n_channels {
        let noise = pink_noise(n, rate, &mut rng, planner);
        for (d, v) in x[c * n..][..n].iter_mut().zip(noise) {
            *d = spec.noise_uv * v;
        }
    }
    let common = pink_noise(n, rate, &mut rng, planner);
    for c in 0..n_channels {
        for (d, v) in x[c * n..][..n].iter_mut().zip(&common) {
            *d += spec.noise_uv * spec.common_mode * v;
        }
    }

    let sig = &spec.signatures[label];
    let phase = profile.phases[label]
        + spec.subject_variability * PI * rng.sample::<f64, _>(StandardNormal);
    let len = (spec.burst_s * rate).round() as usize;
    let amp0 = spec.burst_amplitude();
    for u in 0..UTTERANCES {
        let onset = pad + ((u as f64 * UTTERANCE_S + spec.burst_delay_s) * rate).round() as usize;
        let amp = amp0 * sig.decay.powi(u as i32);
        for i in 0..len.min(n.saturating_sub(onset)) {
            let env = 0.5 - 0.5 * (2.0 * PI * i as f64 / len as f64).cos();
            let s = amp * env * (2.0 * PI * sig.carrier_hz * i as f64 / rate + phase).sin();
            for &c in channels {
                x[c * n + onset + i] += profile.gains[c] * s;
            }
        }
    }

    let data = x.into_iter().map(|v| v as f32).collect();
    Ok(EegTrial::new(n_channels, n, data, rate, label)?.with_meta(subject, block, pad))
}

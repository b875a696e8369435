//! On-disk dataset: `manifest.json` plus one binary file per trial under
//! `trials/`.
//!
//! Trial file layout (little-endian): magic `EEGTRIAL`, u32 version, u32
//! channel count, u32 sample count, f32 sample rate, u8 label, then the
//! samples as f32, channel-major.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::montage::ChannelLayout;
use crate::trial::{EegTrial, TrialKey};

pub const TRIAL_MAGIC: &[u8; 8] = b"EEGTRIAL";
pub const TRIAL_VERSION: u32 = 1;
/// Bytes before the first sample.
pub const TRIAL_HEADER: usize = 8 + 4 + 4 + 4 + 4 + 1;
pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const TRIAL_DIR: &str = "trials";
const TRIAL_EXT: &str = "eegtrial";

pub fn encode_trial(trial: &EegTrial) -> Result<Vec<u8>> {
    let label = u8::try_from(trial.label)
        .map_err(|_| Error::InvalidArgument(format!("label {} does not fit in a byte", trial.label)))?;
    let mut out = Vec::with_capacity(TRIAL_HEADER + 4 * trial.data().len());
    out.extend_from_slice(TRIAL_MAGIC);
    out.extend_from_slice(&TRIAL_VERSION.to_le_bytes());
    out.extend_from_slice(&(trial.n_channels() as u32).to_le_bytes());
    out.extend_from_slice(&(trial.n_samples() as u32).to_le_bytes());
    out.extend_from_slice(&(trial.sample_rate as f32).to_le_bytes());
    out.push(label);
    for v in trial.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

/// Parses a trial file; subject, block and cue come from the manifest.
pub fn decode_trial(bytes: &[u8]) -> Result<EegTrial> {
    if bytes.len() < TRIAL_HEADER || &bytes[..8] != TRIAL_MAGIC {
        return Err(Error::Format("not a trial file (bad magic)".into()));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let version = u32_at(8);
    if version != TRIAL_VERSION {
        return Err(Error::Format(format!("unsupported trial version {version}")));
    }
    let (c, t) = (u32_at(12) as usize, u32_at(16) as usize);
    let rate = f32::from_le_bytes(bytes[20..24].try_into().unwrap()) as f64;
    let label = bytes[24] as usize;
    let body = &bytes[TRIAL_HEADER..];
    if body.len() != 4 * c * t {
        return Err(Error::Format(format!(
            "trial {c}x{t} needs {} sample bytes, file has {}",
            4 * c * t,
            body.len()
        )));
    }
    let data = body
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    EegTrial::new(c, t, data, rate, label).map_err(|e| Error::Format(e.to_string()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrialRecord {
    /// Path relative to the container directory.
    pub file: String,
    pub subject: u32,
    pub block: u32,
    pub index: u32,
    pub label: usize,
    pub cue_onset: usize,
}

impl TrialRecord {
    pub fn key(&self) -> TrialKey {
        TrialKey {
            subject: self.subject,
            block: self.block,
            index: self.index,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    /// Built-in layout id, or `custom`.
    pub layout: String,
    pub channels: Vec<String>,
    pub sample_rate: f64,
    pub n_classes: usize,
    pub subjects: Vec<u32>,
    pub trials: Vec<TrialRecord>,
}

/// A container held in memory, trials in manifest order.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub manifest: Manifest,
    pub trials: Vec<EegTrial>,
}

pub fn trial_file_name(key: TrialKey) -> String {
    format!(
        "{TRIAL_DIR}/s{:03}_b{:02}_t{:03}.{TRIAL_EXT}",
        key.subject, key.block, key.index
    )
}

impl Dataset {
    /// Builds the manifest from trial metadata; `indices` gives each trial's
    /// position within its block.
    pub fn new(
        layout_id: &str,
        layout: &ChannelLayout,
        n_classes: usize,
        trials: Vec<EegTrial>,
        indices: &[u32],
    ) -> Result<Self> {
        if indices.len() != trials.len() {
            return Err(Error::InvalidArgument(format!(
                "{} block indices for {} trials",
                indices.len(),
                trials.len()
            )));
        }
        let mut records = Vec::with_capacity(trials.len());
        let mut seen = BTreeSet::new();
        for (t, &index) in trials.iter().zip(indices) {
            let key = TrialKey {
                subject: t.subject,
                block: t.block,
                index,
            };
            if !seen.insert(key) {
                return Err(Error::InvalidArgument(format!("duplicate trial {key:?}")));
            }
            records.push(TrialRecord {
                file: trial_file_name(key),
                subject: t.subject,
                block: t.block,
                index,
                label: t.label,
                cue_onset: t.cue_onset,
            });
        }
        let subjects: BTreeSet<u32> = trials.iter().map(|t| t.subject).collect();
        let ds = Dataset {
            manifest: Manifest {
                version: MANIFEST_VERSION,
                layout: layout_id.to_string(),
                channels: layout.labels().to_vec(),
                sample_rate: layout.sample_rate,
                n_classes,
                subjects: subjects.into_iter().collect(),
                trials: records,
            },
            trials,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn len(&self) -> usize {
        self.trials.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trials.is_empty()
    }

    pub fn keys(&self) -> Vec<TrialKey> {
        self.manifest.trials.iter().map(TrialRecord::key).collect()
    }

    /// Channel layout named by the manifest, with the manifest's rate.
    pub fn layout(&self) -> Result<ChannelLayout> {
        let builtin = ChannelLayout::builtin(&self.manifest.layout).ok();
        let (reference, ground) = builtin
            .filter(|l| l.labels() == self.manifest.channels.as_slice())
            .map_or((None, None), |l| (l.reference, l.ground));
        ChannelLayout::new(
            self.manifest.channels.clone(),
            reference,
            ground,
            self.manifest.sample_rate,
        )
    }

    /// Same layout and classes, only the trials at `positions`.
    pub fn subset(&self, positions: &[usize]) -> Dataset {
        let mut manifest = self.manifest.clone();
        manifest.trials = positions.iter().map(|&p| self.manifest.trials[p].clone()).collect();
        let subjects: BTreeSet<u32> = manifest.trials.iter().map(|r| r.subject).collect();
        manifest.subjects = subjects.into_iter().collect();
        Dataset {
            manifest,
            trials: positions.iter().map(|&p| self.trials[p].clone()).collect(),
        }
    }

    /// Replaces every trial through `f`, keeping the manifest identities.
    pub fn map_trials(&self, mut f: impl FnMut(&EegTrial) -> Result<EegTrial>) -> Result<Dataset> {
        let trials = self.trials.iter().map(&mut f).collect::<Result<Vec<_>>>()?;
        let mut manifest = self.manifest.clone();
        for (r, t) in manifest.trials.iter_mut().zip(&trials) {
            r.cue_onset = t.cue_onset;
        }
        if let Some(t) = trials.first() {
            manifest.sample_rate = t.sample_rate;
        }
        let ds = Dataset { manifest, trials };
        ds.validate()?;
        Ok(ds)
    }

    fn validate(&self) -> Result<()> {
        let m = &self.manifest;
        if m.trials.len() != self.trials.len() {
            return Err(Error::Format(format!(
                "manifest lists {} trials, {} loaded",
                m.trials.len(),
                self.trials.len()
            )));
        }
        for (r, t) in m.trials.iter().zip(&self.trials) {
            if t.n_channels() != m.channels.len() {
                return Err(Error::Format(format!(
                    "{}: {} channels, manifest declares {}",
                    r.file,
                    t.n_channels(),
                    m.channels.len()
                )));
            }
            if (t.sample_rate as f32) != (m.sample_rate as f32) {
                return Err(Error::Format(format!(
                    "{}: rate {} Hz, manifest declares {}",
                    r.file, t.sample_rate, m.sample_rate
                )));
            }
            if t.label != r.label || t.label >= m.n_classes.max(1) {
                return Err(Error::Format(format!(
                    "{}: label {} against manifest label {} of {} classes",
                    r.file, t.label, r.label, m.n_classes
                )));
            }
            if t.subject != r.subject || t.block != r.block {
                return Err(Error::Format(format!("{}: subject/block mismatch", r.file)));
            }
        }
        Ok(())
    }
}

pub fn write_container(dir: impl AsRef<Path>, ds: &Dataset) -> Result<()> {
    let dir = dir.as_ref();
    ds.validate()?;
    let trial_dir = dir.join(TRIAL_DIR);
    fs::create_dir_all(&trial_dir).map_err(|e| Error::io(&trial_dir, e))?;
    for (r, t) in ds.manifest.trials.iter().zip(&ds.trials) {
        let path = dir.join(&r.file);
        fs::write(&path, encode_trial(t)?).map_err(|e| Error::io(&path, e))?;
    }
    let path = dir.join(MANIFEST_FILE);
    let json = serde_json::to_vec_pretty(&ds.manifest)?;
    fs::write(&path, json).map_err(|e| Error::io(&path, e))
}

pub fn read_manifest(dir: impl AsRef<Path>) -> Result<Manifest> {
    let path = dir.as_ref().join(MANIFEST_FILE);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let m: Manifest = serde_json::from_slice(&bytes)?;
    if m.version != MANIFEST_VERSION {
        return Err(Error::Format(format!("unsupported manifest version {}", m.version)));
    }
    Ok(m)
}

/// Loads every trial; the manifest must account for exactly the trial files
/// present.
pub fn read_container(dir: impl AsRef<Path>) -> Result<Dataset> {
    let dir = dir.as_ref();
    let manifest = read_manifest(dir)?;
    let trial_dir = dir.join(TRIAL_DIR);
    let present = match fs::read_dir(&trial_dir) {
        Ok(entries) => entries
            .filter_map(|e| e.ok())
            .filter(|e| e.path().extension().is_some_and(|x| x == TRIAL_EXT))
            .count(),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => 0,
        Err(e) => return Err(Error::io(&trial_dir, e)),
    };
    if present != manifest.trials.len() {
        return Err(Error::Format(format!(
            "manifest lists {} trials, {present} trial files present",
            manifest.trials.len()
        )));
    }
    let mut trials = Vec::with_capacity(manifest.trials.len());
    for r in &manifest.trials {
        let path = dir.join(&r.file);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let mut t = decode_trial(&bytes)
            .map_err(|e| Error::Format(format!("{}: {e}", r.file)))?
            .with_meta(r.subject, r.block, r.cue_onset);
        if (t.sample_rate as f32) == (manifest.sample_rate as f32) {
            // The file stores the rate as f32; the manifest keeps full precision.
            t.sample_rate = manifest.sample_rate;
        }
        trials.push(t);
    }
    let ds = Dataset { manifest, trials };
    ds.validate()?;
    Ok(ds)
}

//! Run configuration: defaults, then a JSON file, then command-line flags.
//! Unknown keys anywhere are rejected.

use std::path::Path;

use anyhow::{bail, Context, Result};
use fast_core::attribution::{ScanWindow, IG_STEPS, TIMELINE_STEP_S};
use fast_core::model::FastConfig;
use fast_core::montage::PartitionConfig;
use fast_core::preprocess::{SegmentPlan, UTTERANCES};
use fast_core::training::TrainConfig;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

/// Environment variable consulted for the seed when neither the file nor a
/// flag sets one.
pub const SEED_ENV: &str = "FAST_SEED";
/// Name of the resolved configuration inside a run directory.
pub const RESOLVED_CONFIG: &str = "config.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelPreset {
    /// Full-size network.
    #[default]
    Default,
    /// Reduced widths for single-core runs.
    Desk,
    /// Smallest network, for checks.
    Tiny,
}

/// Optional replacements for individual architecture fields.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelOverrides {
    pub token_width: Option<usize>,
    pub temporal_filters: Option<usize>,
    pub tokenizer_depth: Option<usize>,
    pub spatial_depth: Option<usize>,
    pub temporal_depth: Option<usize>,
    pub spatial_heads: Option<usize>,
    pub temporal_heads: Option<usize>,
    pub ffn_multiplier: Option<usize>,
    pub first_kernel: Option<usize>,
    pub conv_kernel: Option<usize>,
    pub pool_window: Option<usize>,
    pub max_segments: Option<usize>,
    pub head_hidden: Option<usize>,
    pub dropout: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttributionConfig {
    /// Integration steps along the path.
    pub steps: usize,
    pub scan: ScanWindow,
    pub step_s: f64,
    /// Only the first N trials, in manifest order.
    pub max_trials: Option<usize>,
}

impl Default for AttributionConfig {
    fn default() -> Self {
        AttributionConfig {
            steps: IG_STEPS,
            scan: ScanWindow::default(),
            step_s: TIMELINE_STEP_S,
            max_trials: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub preset: ModelPreset,
    pub model: ModelOverrides,
    pub partition: PartitionConfig,
    pub window: SegmentPlan,
    /// Utterances of the task window fed to the model.
    pub utterances: usize,
    pub train: TrainConfig,
    pub seed: u64,
    /// Subjects to run; all when absent.
    pub subjects: Option<Vec<u32>>,
    pub attribution: AttributionConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            preset: ModelPreset::Default,
            model: ModelOverrides::default(),
            partition: PartitionConfig::M8,
            window: SegmentPlan::default(),
            utterances: UTTERANCES,
            train: TrainConfig::default(),
            seed: 0,
            subjects: None,
            attribution: AttributionConfig::default(),
        }
    }
}

impl RunConfig {
    /// Architecture before region sizes, window lengths and class count are
    /// filled in from the data.
    pub fn base_model(&self) -> FastConfig {
        let mut c = match self.preset {
            ModelPreset::Default => FastConfig::default(),
            ModelPreset::Desk => FastConfig::desk(),
            ModelPreset::Tiny => FastConfig::tiny(),
        };
        let o = &self.model;
        macro_rules! set {
            ($($f:ident),*) => { $(if let Some(v) = o.$f { c.$f = v; })* };
        }
        set!(
            token_width,
            temporal_filters,
            tokenizer_depth,
            spatial_depth,
            temporal_depth,
            spatial_heads,
            temporal_heads,
            ffn_multiplier,
            first_kernel,
            conv_kernel,
            pool_window,
            max_segments,
            head_hidden,
            dropout
        );
        c
    }
}

fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Sets a dotted path such as `train.epochs`, creating objects on the way.
fn set_path(root: &mut Value, path: &str, value: Value) {
    let mut cur = root;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, key) in parts.iter().enumerate() {
        if !cur.is_object() {
            *cur = Value::Object(Map::new());
        }
        let obj = cur.as_object_mut().unwrap();
        if i + 1 == parts.len() {
            obj.insert(key.to_string(), value);
            return;
        }
        cur = obj.entry(key.to_string()).or_insert(Value::Object(Map::new()));
    }
}

/// Layers `defaults`, the file at `path` (an empty file counts as `{}`),
/// then `overrides` given as dotted paths. Returns the typed value and its
/// fully materialized JSON.
pub fn resolve_with<T>(defaults: &T, path: Option<&Path>, overrides: &[(String, Value)]) -> Result<(T, Value)>
where
    T: Serialize + DeserializeOwned,
{
    let mut v = serde_json::to_value(defaults)?;
    if let Some(p) = path {
        let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
        if !text.trim().is_empty() {
            let file: Value = serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?;
            if !file.is_object() {
                bail!("{}: top level must be a JSON object", p.display());
            }
            merge(&mut v, file);
        }
    }
    for (k, val) in overrides {
        set_path(&mut v, k, val.clone());
    }
    let typed: T = serde_json::from_value(v).context("invalid configuration")?;
    let resolved = serde_json::to_value(&typed)?;
    Ok((typed, resolved))
}

/// Run configuration with the seed fallback from the environment.
pub fn resolve_config(path: Option<&Path>, overrides: &[(String, Value)]) -> Result<(RunConfig, Value)> {
    let mut defaults = RunConfig::default();
    if let Ok(s) = std::env::var(SEED_ENV) {
        defaults.seed = s
            .trim()
            .parse()
            .with_context(|| format!("{SEED_ENV}={s:?} is not an unsigned integer"))?;
    }
    resolve_with(&defaults, path, overrides)
}

pub fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

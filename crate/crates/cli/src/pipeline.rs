//! Data preparation, model construction and the training protocols, with
//! their on-disk outputs.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use fast_core::model::{load_checkpoint, save_checkpoint, FastModel};
use fast_core::montage::RegionPartition;
use fast_core::preprocess::utterance_crop;
use fast_core::synthdata::Dataset;
use fast_core::training::{self, DatasetIndex, FoldOutcome, FoldResult};

use crate::config::{write_json, RunConfig};

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const RUN_FILE: &str = "run.json";
pub const FOLDS_DIR: &str = "folds";

/// Model-ready data plus a freshly initialized model shaped for it.
pub struct Prepared {
    pub cfg: RunConfig,
    /// Trials cropped to the configured number of utterances after the cue.
    pub data: Dataset,
    pub partition: RegionPartition,
    pub template: FastModel,
}

pub fn prepare(cfg: &RunConfig, raw: &Dataset) -> Result<Prepared> {
    cfg.train.validate()?;
    let layout = raw.layout()?;
    let partition = RegionPartition::build(&layout, cfg.partition)?;
    let data = raw
        .map_trials(|t| utterance_crop(t, cfg.utterances))
        .context("cropping trials to the task window")?;
    let rate = raw.manifest.sample_rate;
    let mut model = cfg.base_model();
    model.n_classes = raw.manifest.n_classes;
    model.window_samples = cfg.window.window_samples(rate);
    model.stride_samples = cfg.window.stride_samples(rate);
    let model = model.with_partition(&partition);
    let template = FastModel::new(model, &partition, cfg.seed)?;
    training::check_compatible(&template, &data)?;
    Ok(Prepared {
        cfg: cfg.clone(),
        data,
        partition,
        template,
    })
}

impl Prepared {
    /// Configured subjects, or every subject in the data.
    pub fn subjects(&self) -> Result<Vec<u32>> {
        let all = DatasetIndex::new(&self.data)?.subjects();
        match &self.cfg.subjects {
            None => Ok(all),
            Some(list) => {
                if let Some(s) = list.iter().find(|s| !all.contains(s)) {
                    bail!("subject {s} is not in the data (have {all:?})");
                }
                Ok(list.clone())
            }
        }
    }

    /// A checkpoint loaded against this run's channel partition.
    pub fn load_model(&self, path: &Path) -> Result<FastModel> {
        let (cfg, store) = load_checkpoint(path)?;
        let model = FastModel::from_parts(cfg, store, &self.partition)
            .with_context(|| format!("checkpoint {} does not fit partition {}", path.display(), self.cfg.partition))?;
        training::check_compatible(&model, &self.data)
            .with_context(|| format!("checkpoint {} does not fit the data", path.display()))?;
        Ok(model)
    }
}

/// Starting weights for fine-tuning.
#[derive(Debug, Clone)]
pub enum Start {
    Scratch,
    /// A checkpoint file, or a pretraining directory holding one
    /// `loso_sNNN/model.ckpt` per held-out subject.
    Pretrained(PathBuf),
}

/// Checkpoint to fine-tune `subject` from.
pub fn pretrained_path(from: &Path, subject: u32) -> Result<PathBuf> {
    if from.is_file() {
        return Ok(from.to_path_buf());
    }
    let per_subject = from.join(format!("loso_s{subject:03}")).join(CHECKPOINT_FILE);
    if per_subject.is_file() {
        return Ok(per_subject);
    }
    let single = from.join(CHECKPOINT_FILE);
    if single.is_file() {
        return Ok(single);
    }
    bail!(
        "no checkpoint for subject {subject} under {} (looked for {} and {})",
        from.display(),
        per_subject.display(),
        single.display()
    )
}

/// Writes `<out>/<fold>/{model.ckpt, run.json}` and `<out>/folds/<fold>.json`.
pub fn write_outcome(out: &Path, o: &FoldOutcome) -> Result<()> {
    let dir = out.join(&o.result.fold);
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    save_checkpoint(dir.join(CHECKPOINT_FILE), &o.model.config, &o.model.params)?;
    let mut run = o.run.clone();
    run.checkpoint = Some(CHECKPOINT_FILE.to_string());
    write_json(&dir.join(RUN_FILE), &run)?;
    write_json(&out.join(FOLDS_DIR).join(format!("{}.json", o.result.fold)), &o.result)
}

/// Leave-one-subject-out pretraining, one fold per configured subject.
pub fn run_pretrain(p: &Prepared, out: Option<&Path>, jobs: usize) -> Result<Vec<FoldOutcome>> {
    let subjects = p.subjects()?;
    let tasks: Vec<_> = subjects
        .iter()
        .map(|&s| {
            move || {
                let o = training::pretrain(&p.template, &p.data, s, &p.cfg.train, p.cfg.seed)?;
                log::info!("pretrain {}: held-out accuracy {:.3}", o.result.fold, o.result.accuracy());
                Ok(o)
            }
        })
        .collect();
    let outcomes = training::run_jobs(jobs, tasks)?;
    if let Some(out) = out {
        for o in &outcomes {
            write_outcome(out, o)?;
        }
    }
    Ok(outcomes)
}

/// Leave-one-block-out fine-tuning for every configured subject.
pub fn run_finetune(p: &Prepared, start: &Start, out: Option<&Path>, jobs: usize) -> Result<Vec<FoldOutcome>> {
    let mut all = Vec::new();
    for s in p.subjects()? {
        let outcomes = match start {
            Start::Scratch => training::finetune_from_scratch(&p.template, &p.data, s, &p.cfg.train, p.cfg.seed, jobs)?,
            Start::Pretrained(from) => {
                let path = pretrained_path(from, s)?;
                let model = p.load_model(&path)?;
                let source = path.display().to_string();
                training::finetune(&model, &source, &p.data, s, &p.cfg.train, p.cfg.seed, jobs)?
            }
        };
        for o in &outcomes {
            log::info!("finetune {}: accuracy {:.3}", o.result.fold, o.result.accuracy());
            if let Some(out) = out {
                write_outcome(out, o)?;
            }
        }
        all.extend(outcomes);
    }
    Ok(all)
}

pub fn results(outcomes: &[FoldOutcome]) -> Vec<FoldResult> {
    outcomes.iter().map(|o| o.result.clone()).collect()
}

/// Fold results under `dir/folds`, or directly in `dir`, ordered by name.
/// Only `loso_*.json` and `lobo_*.json` files are read.
pub fn read_folds(dir: &Path) -> Result<Vec<FoldResult>> {
    let nested = dir.join(FOLDS_DIR);
    let dir = if nested.is_dir() { nested } else { dir.to_path_buf() };
    let mut paths: Vec<PathBuf> = std::fs::read_dir(&dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            let name = p.file_name().and_then(|n| n.to_str()).unwrap_or("");
            (name.starts_with("loso_") || name.starts_with("lobo_")) && name.ends_with(".json")
        })
        .collect();
    paths.sort();
    if paths.is_empty() {
        bail!("no fold results in {}", dir.display());
    }
    paths
        .iter()
        .map(|p| {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))
        })
        .collect()
}

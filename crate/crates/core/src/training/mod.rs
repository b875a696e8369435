//! Subject-independent pretraining (leave one subject out) and per-subject
//! fine-tuning (leave one block out), with seeded, reproducible fits.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{argmax_rows, chance_interval, mean_std, MetricsReport};
use crate::model::{fast_forward, stack_trials, update_running_stats, Bound, FastModel, Mode, Variant};
use crate::numerics::{clip_global_norm, AdamW, AdamWConfig, Graph, Schedule, Tensor};
use crate::synthdata::{mix_seed, Dataset};
use crate::trial::{EegTrial, TrialKey};

/// Blocks per subject in the leave-one-block-out scheme.
pub const LOBO_BLOCKS: usize = 5;

/// Trial positions grouped by subject and block.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetIndex {
    keys: Vec<TrialKey>,
    labels: Vec<usize>,
    cells: BTreeMap<(u32, u32), Vec<usize>>,
}

impl DatasetIndex {
    pub fn from_keys(keys: Vec<TrialKey>, labels: Vec<usize>) -> Result<Self> {
        if keys.len() != labels.len() {
            return Err(Error::InvalidArgument(format!(
                "{} keys with {} labels",
                keys.len(),
                labels.len()
            )));
        }
        let mut cells: BTreeMap<(u32, u32), Vec<usize>> = BTreeMap::new();
        let mut seen = BTreeSet::new();
        for (i, k) in keys.iter().enumerate() {
            if !seen.insert(*k) {
                return Err(Error::InvalidArgument(format!("duplicate trial {k:?}")));
            }
            cells.entry((k.subject, k.block)).or_default().push(i);
        }
        Ok(DatasetIndex { keys, labels, cells })
    }

    pub fn new(ds: &Dataset) -> Result<Self> {
        Self::from_keys(ds.keys(), ds.trials.iter().map(|t| t.label).collect())
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn keys(&self) -> &[TrialKey] {
        &self.keys
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn subjects(&self) -> Vec<u32> {
        let s: BTreeSet<u32> = self.cells.keys().map(|&(s, _)| s).collect();
        s.into_iter().collect()
    }

    pub fn blocks(&self, subject: u32) -> Vec<u32> {
        self.cells.keys().filter(|&&(s, _)| s == subject).map(|&(_, b)| b).collect()
    }

    /// Trials per (subject, block) cell.
    pub fn counts(&self) -> BTreeMap<(u32, u32), usize> {
        self.cells.iter().map(|(&k, v)| (k, v.len())).collect()
    }

    pub fn positions(&self, subject: u32) -> Vec<usize> {
        self.cells
            .range((subject, 0)..=(subject, u32::MAX))
            .flat_map(|(_, v)| v.iter().copied())
            .collect()
    }

    /// Checks that every subject has `blocks` blocks of `trials` trials.
    pub fn check_shape(&self, blocks: usize, trials: usize) -> Result<()> {
        for s in self.subjects() {
            let b = self.blocks(s);
            if b.len() != blocks {
                return Err(Error::InvalidArgument(format!(
                    "subject {s} has {} blocks, expected {blocks}",
                    b.len()
                )));
            }
            for blk in b {
                let n = self.cells[&(s, blk)].len();
                if n != trials {
                    return Err(Error::InvalidArgument(format!(
                        "subject {s} block {blk} has {n} trials, expected {trials}"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Positions of training and held-out trials.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// All subjects but one for training, the held-out subject for testing.
pub fn loso_split(index: &DatasetIndex, held_out: u32) -> Result<Split> {
    let test = index.positions(held_out);
    if test.is_empty() {
        return Err(Error::InvalidArgument(format!("unknown subject {held_out}")));
    }
    let train = (0..index.len())
        .filter(|&i| index.keys[i].subject != held_out)
        .collect();
    Ok(Split { train, test })
}

/// One fold per block of the subject: train on the other four, test on it.
pub fn lobo_folds(index: &DatasetIndex, subject: u32) -> Result<Vec<(u32, Split)>> {
    let blocks = index.blocks(subject);
    if blocks.is_empty() {
        return Err(Error::InvalidArgument(format!("unknown subject {subject}")));
    }
    if blocks.len() != LOBO_BLOCKS {
        return Err(Error::InvalidArgument(format!(
            "subject {subject} has {} blocks; leave-one-block-out needs {LOBO_BLOCKS}",
            blocks.len()
        )));
    }
    Ok(blocks
        .iter()
        .map(|&held| {
            let test = index.cells[&(subject, held)].clone();
            let train = blocks
                .iter()
                .filter(|&&b| b != held)
                .flat_map(|b| index.cells[&(subject, *b)].iter().copied())
                .collect();
            (held, Split { train, test })
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub warmup_epochs: usize,
    pub floor_fraction: f64,
    pub optimizer: AdamWConfig,
    /// Global gradient-norm limit; `None` disables clipping.
    pub clip_norm: Option<f64>,
    pub bn_momentum: f64,
    pub variant: Variant,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 200,
            batch_size: 32,
            base_lr: 1e-3,
            warmup_epochs: 10,
            floor_fraction: 0.1,
            optimizer: AdamWConfig::default(),
            clip_norm: Some(5.0),
            bn_momentum: 0.1,
            variant: Variant::Full,
        }
    }
}

impl TrainConfig {
    pub fn schedule(&self) -> Schedule {
        Schedule {
            base_lr: self.base_lr,
            warmup_epochs: self.warmup_epochs,
            total_epochs: self.epochs,
            floor_fraction: self.floor_fraction,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.bn_momentum >= 0.0 && self.bn_momentum <= 1.0) {
            return Err(Error::Config(format!("bn_momentum {}", self.bn_momentum)));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return Err(Error::Config(format!("clip_norm {c}")));
            }
        }
        self.schedule().validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    /// Mean cross-entropy over the epoch's training trials.
    pub loss: f64,
    pub train_accuracy: f64,
}

/// Where a fit's starting weights came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Init {
    Scratch { seed: u64 },
    Pretrained { source: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRun {
    pub config: TrainConfig,
    pub seed: u64,
    pub init: Init,
    pub n_train: usize,
    pub steps: usize,
    pub epochs: Vec<EpochLog>,
    /// Checkpoint path, when one was written.
    pub checkpoint: Option<String>,
}

impl TrainRun {
    pub fn losses(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.loss).collect()
    }
}

/// Trains `model` in place on `trials` for `cfg.epochs` epochs. Batches are
/// reshuffled every epoch from `seed`; the last partial batch is kept.
pub fn fit(
    model: &mut FastModel,
    cfg: &TrainConfig,
    trials: &[&EegTrial],
    seed: u64,
    init: Init,
) -> Result<TrainRun> {
    cfg.validate()?;
    if trials.is_empty() {
        return Err(Error::InvalidArgument("empty training set".into()));
    }
    let n_classes = model.config.n_classes;
    if let Some(t) = trials.iter().find(|t| t.label >= n_classes) {
        return Err(Error::InvalidArgument(format!(
            "label {} with {n_classes} classes",
            t.label
        )));
    }
    let schedule = cfg.schedule();
    let shapes: Vec<Vec<usize>> = model.params.trainable().map(|e| e.value.shape().to_vec()).collect();
    let shape_refs: Vec<&[usize]> = shapes.iter().map(Vec::as_slice).collect();
    let mut opt = AdamW::<f32>::new(cfg.optimizer, &shape_refs);
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut steps = 0;
    for epoch in 0..cfg.epochs {
        let lr = schedule.lr(epoch)?;
        let mut order: Vec<usize> = (0..trials.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(epoch as u64);
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&EegTrial> = chunk.iter().map(|&i| trials[i]).collect();
            let labels: Vec<usize> = batch.iter().map(|t| t.label).collect();
            let x = stack_trials(&batch, model.n_channels)?;
            let mut g = Graph::new();
            let p = Bound::new(&mut g, &model.params)?;
            let xv = g.constant(x)?;
            let mut mode = Mode::train(mix_seed(&[seed, epoch as u64, bi as u64]), model.config.dropout);
            let logits = fast_forward(&mut g, &p, &model.config, &model.regions, xv, cfg.variant, &mut mode)?;
            let loss = g.cross_entropy(logits, &labels)?;
            let lv = g.value(loss).item() as f64;
            if !lv.is_finite() {
                return Err(Error::Numeric(format!("loss {lv} at epoch {epoch}, batch {bi}")));
            }
            loss_sum += lv * batch.len() as f64;
            let pred = argmax_rows(g.value(logits).data(), n_classes);
            correct += pred.iter().zip(&labels).filter(|(p, l)| p == l).count();

            let mut grads = g.backward(loss)?;
            let vars = p.trainable_vars();
            drop(p);
            let mut grads: Vec<Tensor<f32>> = vars
                .iter()
                .zip(&shapes)
                .map(|(&v, s)| grads.take(v).unwrap_or_else(|| Tensor::zeros(s)))
                .collect();
            if let Some(max) = cfg.clip_norm {
                let mut refs: Vec<&mut Tensor<f32>> = grads.iter_mut().collect();
                clip_global_norm(&mut refs, max);
            }
            let grad_refs: Vec<&Tensor<f32>> = grads.iter().collect();
            opt.step(&mut model.params.trainable_mut(), &grad_refs, lr)?;
            update_running_stats(&mut model.params, &mode.take_batch_stats(), cfg.bn_momentum)?;
            steps += 1;
        }
        let n = trials.len() as f64;
        log::debug!("epoch {epoch}: lr {lr:.2e} loss {:.4}", loss_sum / n);
        log.push(EpochLog {
            epoch,
            lr,
            loss: loss_sum / n,
            train_accuracy: correct as f64 / n,
        });
    }
    Ok(TrainRun {
        config: cfg.clone(),
        seed,
        init,
        n_train: trials.len(),
        steps,
        epochs: log,
        checkpoint: None,
    })
}

/// Which trials a fold held out.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeldOut {
    Subject { subject: u32 },
    Block { subject: u32, block: u32 },
}

/// Predictions on one held-out set; every held-out trial appears once.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub fold: String,
    pub held_out: HeldOut,
    pub keys: Vec<TrialKey>,
    pub truth: Vec<usize>,
    pub predicted: Vec<usize>,
    /// Softmax probabilities, one row per trial.
    pub scores: Vec<Vec<f64>>,
}

impl FoldResult {
    pub fn n_classes(&self) -> usize {
        self.scores.first().map_or(0, Vec::len)
    }

    pub fn flat_scores(&self) -> Vec<f64> {
        self.scores.iter().flatten().copied().collect()
    }

    pub fn accuracy(&self) -> f64 {
        if self.truth.is_empty() {
            return 0.0;
        }
        let hits = self.truth.iter().zip(&self.predicted).filter(|(a, b)| a == b).count();
        hits as f64 / self.truth.len() as f64
    }

    pub fn subject(&self) -> u32 {
        match self.held_out {
            HeldOut::Subject { subject } | HeldOut::Block { subject, .. } => subject,
        }
    }
}

pub fn fold_name(held_out: &HeldOut) -> String {
    match *held_out {
        HeldOut::Subject { subject } => format!("loso_s{subject:03}"),
        HeldOut::Block { subject, block } => format!("lobo_s{subject:03}_b{block:02}"),
    }
}

/// Evaluation-mode predictions for `positions` of `ds`.
pub fn evaluate(
    model: &FastModel,
    ds: &Dataset,
    positions: &[usize],
    held_out: HeldOut,
    variant: Variant,
) -> Result<FoldResult> {
    let trials: Vec<&EegTrial> = positions.iter().map(|&p| &ds.trials[p]).collect();
    let keys: Vec<TrialKey> = positions.iter().map(|&p| ds.manifest.trials[p].key()).collect();
    let truth: Vec<usize> = trials.iter().map(|t| t.label).collect();
    let c = model.config.n_classes;
    let (predicted, scores) = if trials.is_empty() {
        (vec![], vec![])
    } else {
        let logits = model.logits(&trials, variant)?;
        let predicted = argmax_rows(logits.data(), c);
        let scores = logits.data().chunks(c).map(softmax).collect();
        (predicted, scores)
    };
    Ok(FoldResult {
        fold: fold_name(&held_out),
        held_out,
        keys,
        truth,
        predicted,
        scores,
    })
}

fn softmax(row: &[f32]) -> Vec<f64> {
    let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v as f64));
    let e: Vec<f64> = row.iter().map(|&v| (v as f64 - max).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// Runs independent jobs on up to `jobs` threads; results keep input order.
/// The first error (in job order) is returned.
pub fn run_jobs<T, F>(jobs: usize, tasks: Vec<F>) -> Result<Vec<T>>
where
    T: Send,
    F: FnOnce() -> Result<T> + Send,
{
    let n = tasks.len();
    if jobs <= 1 || n <= 1 {
        return tasks.into_iter().map(|f| f()).collect();
    }
    let slots: Vec<Mutex<Option<F>>> = tasks.into_iter().map(|f| Mutex::new(Some(f))).collect();
    let results: Vec<Mutex<Option<Result<T>>>> = (0..n).map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    std::thread::scope(|scope| {
        for _ in 0..jobs.min(n) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= n {
                    break;
                }
                let f = slots[i].lock().unwrap().take().unwrap();
                *results[i].lock().unwrap() = Some(f());
            });
        }
    });
    results
        .into_iter()
        .map(|r| r.into_inner().unwrap().expect("job finished"))
        .collect()
}

/// A trained fold: its predictions and its training log.
#[derive(Debug, Clone)]
pub struct FoldOutcome {
    pub result: FoldResult,
    pub run: TrainRun,
    pub model: FastModel,
}

/// Per-fold seed shared by both fine-tuning arms.
pub fn fold_seed(seed: u64, subject: u32, block: u32) -> u64 {
    mix_seed(&[seed, subject as u64, block as u64])
}

/// Leave-one-block-out fine-tuning for one subject. Each fold starts from a
/// copy of `start` when given, else from fresh weights seeded by the fold.
pub fn finetune_with(
    start: Option<(&FastModel, &str)>,
    template: &FastModel,
    ds: &Dataset,
    subject: u32,
    cfg: &TrainConfig,
    seed: u64,
    jobs: usize,
) -> Result<Vec<FoldOutcome>> {
    let index = DatasetIndex::new(ds)?;
    let folds = lobo_folds(&index, subject)?;
    let tasks: Vec<_> = folds
        .into_iter()
        .map(|(block, split)| {
            move || -> Result<FoldOutcome> {
                let fs = fold_seed(seed, subject, block);
                let (mut model, init) = match start {
                    Some((m, source)) => (m.clone(), Init::Pretrained { source: source.to_string() }),
                    None => {
                        let mut m = template.clone();
                        m.params = crate::model::init_params(&m.config, fs)?;
                        (m, Init::Scratch { seed: fs })
                    }
                };
                let train: Vec<&EegTrial> = split.train.iter().map(|&p| &ds.trials[p]).collect();
                let run = fit(&mut model, cfg, &train, fs, init)?;
                let result = evaluate(&model, ds, &split.test, HeldOut::Block { subject, block }, cfg.variant)?;
                Ok(FoldOutcome { result, run, model })
            }
        })
        .collect();
    run_jobs(jobs, tasks)
}

/// Fine-tuning from pretrained weights.
pub fn finetune(
    pretrained: &FastModel,
    source: &str,
    ds: &Dataset,
    subject: u32,
    cfg: &TrainConfig,
    seed: u64,
    jobs: usize,
) -> Result<Vec<FoldOutcome>> {
    check_compatible(pretrained, ds)?;
    finetune_with(Some((pretrained, source)), pretrained, ds, subject, cfg, seed, jobs)
}

/// The same folds and seeds with randomly initialized weights.
pub fn finetune_from_scratch(
    template: &FastModel,
    ds: &Dataset,
    subject: u32,
    cfg: &TrainConfig,
    seed: u64,
    jobs: usize,
) -> Result<Vec<FoldOutcome>> {
    check_compatible(template, ds)?;
    finetune_with(None, template, ds, subject, cfg, seed, jobs)
}

/// Subject-independent pretraining with `held_out` excluded; the held-out
/// subject is evaluated once at the end.
pub fn pretrain(
    template: &FastModel,
    ds: &Dataset,
    held_out: u32,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<FoldOutcome> {
    check_compatible(template, ds)?;
    let index = DatasetIndex::new(ds)?;
    let split = loso_split(&index, held_out)?;
    let s = mix_seed(&[seed, held_out as u64, u64::MAX]);
    let mut model = template.clone();
    model.params = crate::model::init_params(&model.config, s)?;
    let train: Vec<&EegTrial> = split.train.iter().map(|&p| &ds.trials[p]).collect();
    let run = fit(&mut model, cfg, &train, s, Init::Scratch { seed: s })?;
    let result = evaluate(&model, ds, &split.test, HeldOut::Subject { subject: held_out }, cfg.variant)?;
    Ok(FoldOutcome { result, run, model })
}

/// Held-out accuracy of one subject across its folds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectScore {
    pub subject: u32,
    pub accuracy: f64,
    pub n: usize,
}

/// Metrics per fold, per subject and pooled over every fold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub folds: Vec<(String, MetricsReport)>,
    pub subjects: Vec<SubjectScore>,
    /// Mean and population std of the subject accuracies (primary figure).
    pub subject_mean: f64,
    pub subject_std: f64,
    pub pooled: MetricsReport,
    /// 95% chance interval at p = 1/C for the pooled trial count.
    pub chance: (f64, f64),
}

pub fn summarize(folds: &[FoldResult]) -> Result<EvalSummary> {
    let c = folds
        .iter()
        .map(FoldResult::n_classes)
        .find(|&c| c > 0)
        .ok_or_else(|| Error::InvalidArgument("no predictions to summarize".into()))?;
    let mut per_fold = Vec::with_capacity(folds.len());
    let mut by_subject: BTreeMap<u32, (usize, usize)> = BTreeMap::new();
    let (mut truth, mut scores) = (Vec::new(), Vec::new());
    for f in folds {
        if f.truth.is_empty() {
            continue;
        }
        if f.n_classes() != c {
            return Err(Error::InvalidArgument(format!(
                "fold {} has {} classes, others {c}",
                f.fold,
                f.n_classes()
            )));
        }
        per_fold.push((f.fold.clone(), MetricsReport::from_scores(&f.truth, &f.flat_scores(), c)?));
        let e = by_subject.entry(f.subject()).or_default();
        e.0 += f.truth.iter().zip(&f.predicted).filter(|(a, b)| a == b).count();
        e.1 += f.truth.len();
        truth.extend_from_slice(&f.truth);
        scores.extend(f.flat_scores());
    }
    let subjects: Vec<SubjectScore> = by_subject
        .into_iter()
        .map(|(subject, (hits, n))| SubjectScore {
            subject,
            accuracy: hits as f64 / n as f64,
            n,
        })
        .collect();
    let accs: Vec<f64> = subjects.iter().map(|s| s.accuracy).collect();
    let (subject_mean, subject_std) = mean_std(&accs);
    Ok(EvalSummary {
        folds: per_fold,
        subjects,
        subject_mean,
        subject_std,
        pooled: MetricsReport::from_scores(&truth, &scores, c)?,
        chance: chance_interval(1.0 / c as f64, truth.len(), 1.96)?,
    })
}

/// Model input shape must match the dataset.
pub fn check_compatible(model: &FastModel, ds: &Dataset) -> Result<()> {
    if let Some(t) = ds.trials.first() {
        if t.n_channels() != model.n_channels {
            return Err(Error::Config(format!(
                "model expects {} channels, data has {}",
                model.n_channels,
                t.n_channels()
            )));
        }
        model.config.segments_for(t.n_samples())?;
    }
    Ok(())
}

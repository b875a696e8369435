//! The `fast` command line: synthetic data, preprocessing, pretraining,
//! fine-tuning, evaluation, attribution and ablations.

pub mod config;
pub mod pipeline;

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use fast_core::attribution::{
    activation_timeline, channel_saliency, normalize_and_average, trial_attribution, write_saliency_csv,
    write_timeline_csv, ActivationTimeline,
};
use fast_core::model::Variant;
use fast_core::montage::PartitionConfig;
use fast_core::preprocess::{preprocess_trial, utterance_crop, PreprocessConfig};
use fast_core::synthdata::{self, read_container, write_container, Dataset, SynthSpec};
use fast_core::training::{summarize, EvalSummary};
use serde::Serialize;
use serde_json::{json, Value};

use config::{resolve_config, resolve_with, write_json, RESOLVED_CONFIG};
use pipeline::{prepare, read_folds, results, run_finetune, run_pretrain, Prepared, Start};

/// A problem with how the command was invoked; exits with status 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

#[derive(Parser, Debug)]
#[command(name = "fast", version, about = "Region-token transformer for imagined-speech EEG")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a labeled synthetic dataset.
    Synth(SynthArgs),
    /// Filter, resample, baseline-correct and epoch a dataset.
    Preprocess(PreprocessArgs),
    /// Leave-one-subject-out pretraining.
    Pretrain(TrainArgs),
    /// Leave-one-block-out fine-tuning per subject.
    Finetune(FinetuneArgs),
    /// Summarize fold results.
    Eval(EvalArgs),
    /// Activation timelines, class contrasts and channel saliency.
    Attribute(AttributeArgs),
    /// Fine-tuning with one component changed.
    Ablate(AblateArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// JSON generator settings; unknown keys are errors.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Starting settings before the spec file.
    #[arg(long, value_parser = ["default", "easy", "medium"], default_value = "default")]
    preset: String,
    /// Also report the bandpower probe's cross-subject accuracy.
    #[arg(long)]
    probe: bool,
}

#[derive(Args, Debug)]
struct PreprocessArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// JSON conditioning settings; defaults use the standard filters.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    target_rate: Option<f64>,
    /// Keep every trial regardless of amplitude.
    #[arg(long)]
    no_reject: bool,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// JSON run configuration; unknown keys are errors.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Falls back to the FAST_SEED environment variable, then 0.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_parser = ["default", "desk", "tiny"])]
    preset: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Channel partition id (M8, M5, M4, M3, M2_FT, M1_F, M1_T).
    #[arg(long)]
    partition: Option<String>,
    #[arg(long)]
    utterances: Option<usize>,
    /// Restrict to these subjects (repeatable).
    #[arg(long = "subject")]
    subjects: Vec<u32>,
    /// Parallel folds.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Args, Debug)]
struct FinetuneArgs {
    #[command(flatten)]
    train: TrainArgs,
    /// Pretrained checkpoint, or a pretraining output directory.
    #[arg(long, conflicts_with = "scratch", required_unless_present = "scratch")]
    from: Option<PathBuf>,
    /// Random initialization with the same folds and seeds.
    #[arg(long)]
    scratch: bool,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Run directory or folder of fold result files.
    #[arg(long)]
    folds: PathBuf,
    /// Summary path; defaults to `<folds>/eval.json`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct AttributeArgs {
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint file or a fold directory holding `model.ckpt`.
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Integration steps.
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    max_trials: Option<usize>,
    /// Attribute with the mean-pooled head instead of the transformers.
    #[arg(long)]
    no_te: bool,
}

#[derive(Args, Debug)]
struct AblateArgs {
    #[command(flatten)]
    train: TrainArgs,
    /// `no-te`, `no-pretrain`, `utterances K` or `partition ID`.
    #[arg(long, num_args = 1..=2, value_names = ["MODE", "ARG"], required = true)]
    mode: Vec<String>,
    /// Pretrained weights to start from; default is random initialization.
    #[arg(long)]
    from: Option<PathBuf>,
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) if e.is::<UsageError>() => {
            eprintln!("usage error: {e}");
            2
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}

fn execute(cmd: Command) -> Result<()> {
    match cmd {
        Command::Synth(a) => synth(a),
        Command::Preprocess(a) => preprocess(a),
        Command::Pretrain(a) => pretrain(a),
        Command::Finetune(a) => finetune(a),
        Command::Eval(a) => eval(a),
        Command::Attribute(a) => attribute(a),
        Command::Ablate(a) => ablate(a),
    }
}

fn load(dir: &Path) -> Result<Dataset> {
    read_container(dir).with_context(|| format!("loading dataset {}", dir.display()))
}

fn synth(a: SynthArgs) -> Result<()> {
    let base = match a.preset.as_str() {
        "easy" => SynthSpec::easy(),
        "medium" => SynthSpec::medium(),
        _ => SynthSpec::default(),
    };
    let mut base = base;
    if let Some(s) = env_seed()? {
        base.seed = s;
    }
    let mut overrides = Vec::new();
    if let Some(s) = a.seed {
        overrides.push(("seed".to_string(), json!(s)));
    }
    let (spec, resolved): (SynthSpec, Value) = resolve_with(&base, a.spec.as_deref(), &overrides)?;
    let ds = synthdata::generate(&spec)?;
    write_container(&a.out, &ds)?;
    write_json(&a.out.join("synth.json"), &resolved)?;
    println!("wrote {} trials to {}", ds.len(), a.out.display());
    if a.probe {
        let acc = synthdata::separability_probe(&ds)?;
        println!("bandpower probe accuracy (leave one subject out): {acc:.3}");
    }
    Ok(())
}

fn env_seed() -> Result<Option<u64>> {
    match std::env::var(config::SEED_ENV) {
        Ok(s) => Ok(Some(
            s.trim()
                .parse()
                .with_context(|| format!("{}={s:?} is not an unsigned integer", config::SEED_ENV))?,
        )),
        Err(_) => Ok(None),
    }
}

#[derive(Serialize)]
struct PreprocessReport {
    n_trials_in: usize,
    n_dropped: usize,
    dropped: Vec<String>,
    filter_specs: Vec<fast_core::preprocess::FilterSpec>,
    input_rate: f64,
    output_rate: f64,
}

fn preprocess(a: PreprocessArgs) -> Result<()> {
    let ds = load(&a.data)?;
    let mut overrides = Vec::new();
    if let Some(r) = a.target_rate {
        overrides.push(("target_rate".to_string(), json!(r)));
    }
    if a.no_reject {
        overrides.push(("reject_threshold_uv".to_string(), Value::Null));
    }
    let defaults = PreprocessConfig::for_rate(ds.manifest.sample_rate);
    let (cfg, resolved): (PreprocessConfig, Value) = resolve_with(&defaults, a.config.as_deref(), &overrides)?;
    let mut kept = Vec::new();
    let mut indices = Vec::new();
    let mut dropped = Vec::new();
    for (rec, t) in ds.manifest.trials.iter().zip(&ds.trials) {
        match preprocess_trial(t, &cfg).with_context(|| format!("preprocessing {}", rec.file))? {
            Some(p) => {
                kept.push(p);
                indices.push(rec.index);
            }
            None => dropped.push(rec.file.clone()),
        }
    }
    if kept.is_empty() {
        bail!("every trial was rejected");
    }
    let mut layout = ds.layout()?;
    layout.sample_rate = kept[0].sample_rate;
    let out = Dataset::new(&ds.manifest.layout, &layout, ds.manifest.n_classes, kept, &indices)?;
    write_container(&a.out, &out)?;
    write_json(&a.out.join(RESOLVED_CONFIG), &resolved)?;
    let report = PreprocessReport {
        n_trials_in: ds.len(),
        n_dropped: dropped.len(),
        dropped,
        filter_specs: [cfg.bandpass.clone(), cfg.notch.clone()].into_iter().flatten().collect(),
        input_rate: ds.manifest.sample_rate,
        output_rate: layout.sample_rate,
    };
    write_json(&a.out.join("report.json"), &report)?;
    println!(
        "kept {} of {} trials at {} Hz in {}",
        out.len(),
        report.n_trials_in,
        report.output_rate,
        a.out.display()
    );
    Ok(())
}

fn train_overrides(a: &TrainArgs) -> Result<Vec<(String, Value)>> {
    let mut o = Vec::new();
    if let Some(s) = a.seed {
        o.push(("seed".into(), json!(s)));
    }
    if let Some(p) = &a.preset {
        o.push(("preset".into(), json!(p)));
    }
    if let Some(e) = a.epochs {
        o.push(("train.epochs".into(), json!(e)));
    }
    if let Some(b) = a.batch_size {
        o.push(("train.batch_size".into(), json!(b)));
    }
    if let Some(lr) = a.lr {
        o.push(("train.base_lr".into(), json!(lr)));
    }
    if let Some(p) = &a.partition {
        parse_partition(p)?;
        o.push(("partition".into(), json!(p)));
    }
    if let Some(k) = a.utterances {
        o.push(("utterances".into(), json!(k)));
    }
    if !a.subjects.is_empty() {
        o.push(("subjects".into(), json!(a.subjects)));
    }
    if a.jobs == 0 {
        return Err(usage("--jobs must be at least 1"));
    }
    Ok(o)
}

fn parse_partition(id: &str) -> Result<PartitionConfig> {
    serde_json::from_value(json!(id)).map_err(|_| {
        let ids: Vec<&str> = PartitionConfig::ALL.iter().map(|p| p.id()).collect();
        usage(format!("unknown partition {id:?}; expected one of {}", ids.join(", ")))
    })
}

/// Resolves the configuration, loads and prepares the data, and records the
/// resolved configuration in the output directory.
fn setup(a: &TrainArgs, extra: &[(String, Value)]) -> Result<Prepared> {
    let mut overrides = train_overrides(a)?;
    overrides.extend_from_slice(extra);
    let (cfg, resolved) = resolve_config(a.config.as_deref(), &overrides)?;
    let raw = load(&a.data)?;
    let p = prepare(&cfg, &raw)?;
    write_json(&a.out.join(RESOLVED_CONFIG), &resolved)?;
    Ok(p)
}

fn report_summary(out: &Path, summary: &EvalSummary) -> Result<()> {
    write_json(&out.join("report.json"), summary)?;
    print!("{}", render_table(summary));
    Ok(())
}

fn pretrain(a: TrainArgs) -> Result<()> {
    let p = setup(&a, &[])?;
    let outcomes = run_pretrain(&p, Some(&a.out), a.jobs)?;
    report_summary(&a.out, &summarize(&results(&outcomes))?)
}

fn finetune(a: FinetuneArgs) -> Result<()> {
    let p = setup(&a.train, &[])?;
    let start = match a.from {
        Some(f) => Start::Pretrained(f),
        None => Start::Scratch,
    };
    let outcomes = run_finetune(&p, &start, Some(&a.train.out), a.train.jobs)?;
    report_summary(&a.train.out, &summarize(&results(&outcomes))?)
}

fn eval(a: EvalArgs) -> Result<()> {
    let folds = read_folds(&a.folds)?;
    let summary = summarize(&folds)?;
    let out = a.out.unwrap_or_else(|| a.folds.join("eval.json"));
    write_json(&out, &summary)?;
    print!("{}", render_table(&summary));
    Ok(())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |v| format!("{v:.3}"))
}

/// Aligned plain-text summary.
pub fn render_table(s: &EvalSummary) -> String {
    let mut out = String::new();
    let width = s.folds.iter().map(|(n, _)| n.len()).max().unwrap_or(4).max(6);
    let _ = writeln!(
        out,
        "{:<width$}  {:>5}  {:>8}  {:>8}  {:>6}  {:>6}",
        "fold", "n", "accuracy", "macro_f1", "kappa", "auc"
    );
    let mut row = |name: &str, r: &fast_core::metrics::MetricsReport| {
        let _ = writeln!(
            out,
            "{:<width$}  {:>5}  {:>8.3}  {:>8.3}  {:>6}  {:>6}",
            name,
            r.n,
            r.accuracy,
            r.macro_f1,
            fmt_opt(r.kappa),
            fmt_opt(r.auc)
        );
    };
    for (name, r) in &s.folds {
        row(name, r);
    }
    row("pooled", &s.pooled);
    let _ = writeln!(out);
    let _ = writeln!(out, "{:<8}  {:>5}  {:>8}", "subject", "n", "accuracy");
    for sub in &s.subjects {
        let _ = writeln!(out, "{:<8}  {:>5}  {:>8.3}", sub.subject, sub.n, sub.accuracy);
    }
    let _ = writeln!(
        out,
        "subject accuracy {:.3} +/- {:.3}; chance interval [{:.3}, {:.3}]",
        s.subject_mean, s.subject_std, s.chance.0, s.chance.1
    );
    out
}

fn checkpoint_in(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(pipeline::CHECKPOINT_FILE)
    } else {
        path.to_path_buf()
    }
}

#[derive(Serialize)]
struct AttributionReport {
    n_trials: usize,
    steps: usize,
    variant: Variant,
    /// Relative completeness gaps of the path integrals.
    mean_completeness_gap: f64,
    max_completeness_gap: f64,
}

fn attribute(a: AttributeArgs) -> Result<()> {
    let mut overrides = Vec::new();
    if let Some(s) = a.steps {
        overrides.push(("attribution.steps".to_string(), json!(s)));
    }
    if let Some(n) = a.max_trials {
        overrides.push(("attribution.max_trials".to_string(), json!(n)));
    }
    let (cfg, resolved) = resolve_config(a.config.as_deref(), &overrides)?;
    let raw = load(&a.data)?;
    let p = prepare(&cfg, &raw)?;
    let model = p.load_model(&checkpoint_in(&a.model))?;
    let variant = if a.no_te { Variant::NoTransformer } else { Variant::Full };
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    write_json(&a.out.join(RESOLVED_CONFIG), &resolved)?;

    let n = cfg.attribution.max_trials.unwrap_or(raw.len()).min(raw.len());
    if n == 0 {
        bail!("no trials to attribute");
    }
    let names = p.partition.names().to_vec();
    let mut timelines: Vec<(usize, ActivationTimeline)> = Vec::with_capacity(n);
    let mut maps = Vec::with_capacity(n);
    for (i, t) in raw.trials.iter().take(n).enumerate() {
        timelines.push((
            t.label,
            activation_timeline(&model, t, &names, cfg.attribution.scan, cfg.attribution.step_s)?,
        ));
        let x = utterance_crop(t, cfg.utterances)?;
        maps.push(trial_attribution(&model, &x, variant, cfg.attribution.steps)?);
        log::info!("attributed trial {}/{n}", i + 1);
    }

    let mut mean = timelines[0].1.clone();
    for (i, v) in mean.values.iter_mut().enumerate() {
        *v = timelines.iter().map(|(_, t)| t.values[i]).sum::<f64>() / n as f64;
    }
    write_timeline_csv(a.out.join("timeline.csv"), &mean)?;
    let saliency = channel_saliency(&maps, raw.manifest.sample_rate, 0)?;
    write_saliency_csv(a.out.join("saliency_channels.csv"), &raw.manifest.channels, &saliency)?;
    let items: Vec<(usize, &ActivationTimeline)> = timelines.iter().map(|(l, t)| (*l, t)).collect();
    match normalize_and_average(&items, raw.manifest.n_classes) {
        Ok(classes) => {
            for (c, m) in classes.contrasts.iter().enumerate() {
                write_timeline_csv(a.out.join(format!("contrast_{c}.csv")), m)?;
            }
        }
        Err(e) => log::warn!("class contrasts skipped: {e}"),
    }

    let gaps: Vec<f64> = maps.iter().map(|m| m.completeness_gap).collect();
    let report = AttributionReport {
        n_trials: n,
        steps: cfg.attribution.steps,
        variant,
        mean_completeness_gap: gaps.iter().sum::<f64>() / n as f64,
        max_completeness_gap: gaps.iter().cloned().fold(0.0, f64::max),
    };
    write_json(&a.out.join("attribution.json"), &report)?;
    println!(
        "attributed {n} trials into {}; mean completeness gap {:.4}",
        a.out.display(),
        report.mean_completeness_gap
    );
    Ok(())
}

/// One changed component of the fine-tuning protocol.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(rename_all = "snake_case", tag = "mode", content = "value")]
pub enum Ablation {
    NoTe,
    NoPretrain,
    Utterances(usize),
    Partition(PartitionConfig),
}

impl Ablation {
    pub fn parse(words: &[String]) -> Result<Self> {
        let words: Vec<&str> = words.iter().map(String::as_str).collect();
        match words.as_slice() {
            ["no-te"] => Ok(Ablation::NoTe),
            ["no-pretrain"] => Ok(Ablation::NoPretrain),
            ["utterances", k] => {
                let k: usize = k.parse().map_err(|_| usage(format!("utterance count {k:?} is not an integer")))?;
                if !(1..=fast_core::preprocess::UTTERANCES).contains(&k) {
                    return Err(usage(format!(
                        "utterance count {k} outside 1..={}",
                        fast_core::preprocess::UTTERANCES
                    )));
                }
                Ok(Ablation::Utterances(k))
            }
            ["partition", id] => Ok(Ablation::Partition(parse_partition(id)?)),
            _ => Err(usage(format!(
                "unknown ablation {:?}; expected no-te, no-pretrain, utterances K or partition ID",
                words.join(" ")
            ))),
        }
    }

    /// Configuration overrides this ablation applies.
    pub fn overrides(&self) -> Vec<(String, Value)> {
        match self {
            Ablation::NoTe => vec![("train.variant".into(), json!(Variant::NoTransformer))],
            Ablation::NoPretrain => vec![],
            Ablation::Utterances(k) => vec![("utterances".into(), json!(k))],
            Ablation::Partition(p) => vec![("partition".into(), json!(p))],
        }
    }
}

fn ablate(a: AblateArgs) -> Result<()> {
    let ablation = Ablation::parse(&a.mode)?;
    if ablation == Ablation::NoPretrain && a.from.is_some() {
        return Err(usage("--mode no-pretrain cannot be combined with --from"));
    }
    let p = setup(&a.train, &ablation.overrides())?;
    let start = match &a.from {
        Some(f) => Start::Pretrained(f.clone()),
        None => Start::Scratch,
    };
    let outcomes = run_finetune(&p, &start, Some(&a.train.out), a.train.jobs)?;
    let summary = summarize(&results(&outcomes))?;
    write_json(
        &a.train.out.join("ablation.json"),
        &json!({ "ablation": ablation, "pretrained": a.from.is_some(), "summary": summary }),
    )?;
    report_summary(&a.train.out, &summary)
}

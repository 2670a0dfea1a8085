//! Experiment driver: dataset generation, side-by-side training, evaluation
//! and ensemble prediction.
//!
//! Exit codes: 0 success, 2 usage or configuration error, 3 numeric failure.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, CommandFactory, Parser, Subcommand};
use log::{info, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::ensemble::{consensus_batch, verdicts_jsonl};
use crate::error::{Error, Result};
use crate::eval::{evaluate, matched_subsample, MetricReport, DEFAULT_MATCH_TOLERANCE};
use crate::model::{Architecture, ModelPair, Variant};
use crate::nn::{AdamConfig, SgdConfig};
use crate::outputs::{ConfoundSpec, DEFAULT_LABEL_WEIGHT};
use crate::par::{configure_threads, Execution};
use crate::scheduler::{SampleIndex, ScheduleConfig, ScheduleLog};
use crate::synthdata::{generate, read_dataset, write_dataset, Dataset, GeneratorConfig, SynthConfound};
use crate::trainer::{load_checkpoint, save_checkpoint, OptimConfig, TrainState};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

pub const THREADS_ENV: &str = "MUCRAN_THREADS";

#[derive(Debug, Parser)]
#[command(name = "mucran", version, about = "Adversarial confound regression experiments")]
pub struct Cli {
    /// Flat `key=value` file; keys are long flag names of the subcommand.
    /// Flags given on the command line take precedence.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Run everything on the calling thread.
    #[arg(long, global = true)]
    pub sequential: bool,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic confounded dataset.
    Generate(GenerateArgs),
    /// Train one or more variants side by side on a shared schedule.
    Train(TrainArgs),
    /// Ensemble metrics at several thresholds.
    Evaluate(EvaluateArgs),
    /// Per-sample ensemble verdicts as JSON lines.
    Predict(PredictArgs),
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long, default_value_t = 1000)]
    pub n: usize,
    /// Edge length of the cubic volumes.
    #[arg(long, default_value_t = 16)]
    pub dims: usize,
    #[arg(long, default_value_t = 2)]
    pub label_arity: usize,
    #[arg(long, default_value_t = 0.1)]
    pub label_effect: f64,
    /// `name:N` for N categories or `name:edges=a/b/c` for binned values,
    /// comma separated.
    #[arg(long, default_value = "")]
    pub confounds: String,
    /// Label correlation per confound; a single value applies to all.
    #[arg(long, value_delimiter = ',', default_value = "0")]
    pub rho: Vec<f64>,
    /// Template amplitude per confound; a single value applies to all.
    #[arg(long, value_delimiter = ',', default_value = "0.3")]
    pub effects: Vec<f64>,
    /// Missing rate per confound; a single value applies to all.
    #[arg(long, value_delimiter = ',', default_value = "0")]
    pub missing: Vec<f64>,
    #[arg(long, default_value_t = 1.0)]
    pub noise: f64,
    #[arg(long, default_value_t = DEFAULT_LABEL_WEIGHT)]
    pub label_weight: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Seed for the spatial templates; defaults to `--seed`.
    #[arg(long)]
    pub template_seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
    /// Optional `id,label,<confounds>` CSV.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ArchArgs {
    /// Output channels of each stride-2 convolution.
    #[arg(long, value_delimiter = ',', default_value = "4,8,16")]
    pub channels: Vec<usize>,
    #[arg(long, default_value_t = 64)]
    pub feature_width: usize,
    #[arg(long, default_value_t = 32)]
    pub regressor_hidden: usize,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Comma separated list of `mucran`, `baseline`, `confounded`.
    #[arg(long, alias = "variant", value_delimiter = ',', default_value = "mucran")]
    pub variants: Vec<String>,
    /// Members per variant; member `i` uses seed `seed + i`.
    #[arg(long, default_value_t = 1)]
    pub ensemble: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 8)]
    pub batch: usize,
    #[arg(long, default_value_t = 48)]
    pub chunk: usize,
    #[arg(long, default_value_t = 5)]
    pub passes: usize,
    #[arg(long, default_value_t = 2400)]
    pub budget: usize,
    /// Confound order for the balanced half, comma separated indices.
    #[arg(long, value_delimiter = ',')]
    pub rotation: Option<Vec<usize>>,
    #[arg(long, default_value_t = 3e-4)]
    pub encoder_lr: f64,
    #[arg(long, default_value_t = 0.5)]
    pub beta1: f64,
    #[arg(long, default_value_t = 0.999)]
    pub beta2: f64,
    #[arg(long, default_value_t = 1e-8)]
    pub epsilon: f64,
    #[arg(long, default_value_t = 3e-2)]
    pub regressor_lr: f64,
    #[arg(long, default_value_t = 0.0)]
    pub momentum: f64,
    #[command(flatten)]
    pub arch: ArchArgs,
    #[arg(long, default_value = ".")]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Checkpoint files, comma separated or repeated. Members of the same
    /// variant are evaluated as one ensemble.
    #[arg(long, value_delimiter = ',', required = true)]
    pub checkpoints: Vec<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "0.5,0.9")]
    pub thresholds: Vec<f64>,
    /// Restrict to case/control pairs matched on this confound.
    #[arg(long)]
    pub matched: Option<String>,
    /// Drop samples whose matched value lies below this.
    #[arg(long, alias = "min-age")]
    pub min_value: Option<f64>,
    #[arg(long, default_value_t = DEFAULT_MATCH_TOLERANCE)]
    pub tolerance: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Report JSON; stdout when absent.
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Plot-data CSV, one row per variant and threshold.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long, value_delimiter = ',', required = true)]
    pub checkpoints: Vec<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 0.9)]
    pub threshold: f64,
    /// JSON lines output; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Parses `args` (including the program name), merges the config file and
/// runs the command. Returns the process exit code.
pub fn run_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let cli = match parse_with_config(&args) {
        Ok(cli) => cli,
        Err(ParseFailure::Clap(e)) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
        Err(ParseFailure::Mucran(e)) => {
            eprintln!("error: {e}");
            return EXIT_CONFIG;
        }
    };
    match run(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Numeric(_) => EXIT_NUMERIC,
        _ => EXIT_CONFIG,
    }
}

enum ParseFailure {
    Clap(clap::Error),
    Mucran(Error),
}

fn parse_with_config(args: &[OsString]) -> std::result::Result<Cli, ParseFailure> {
    let (Some(path), Some(pos)) = (config_path(args), subcommand_position(args)) else {
        return Cli::try_parse_from(args).map_err(ParseFailure::Clap);
    };
    let name = args[pos].to_string_lossy().into_owned();
    let text = fs::read_to_string(&path)
        .map_err(|e| ParseFailure::Mucran(Error::config(format!("cannot read {}: {e}", path.display()))))?;
    let entries = config_entries(&text).map_err(ParseFailure::Mucran)?;
    let mut cmd = Cli::command();
    cmd.build();
    let sub = cmd.find_subcommand(&name).expect("subcommand name was recognized");
    let find = |key: &str| {
        sub.get_arguments()
            .filter(|a| a.get_id() != "config")
            .find(|a| a.get_long() == Some(key) || a.get_all_aliases().is_some_and(|al| al.contains(&key)))
    };
    let given: Vec<&str> = args[pos + 1..]
        .iter()
        .filter_map(|a| a.to_str()?.strip_prefix("--"))
        .filter_map(|flag| find(flag.split('=').next().unwrap_or(flag)))
        .map(|a| a.get_id().as_str())
        .collect();

    let mut extra = Vec::new();
    for (key, value) in entries {
        let arg = find(&key)
            .ok_or_else(|| ParseFailure::Mucran(Error::config(format!("unknown config key `{key}` for `{name}`"))))?;
        if given.contains(&arg.get_id().as_str()) {
            continue;
        }
        extra.push(OsString::from(format!("--{}", arg.get_long().expect("config keys are long flags"))));
        if let Some(v) = value {
            extra.push(OsString::from(v));
        }
    }
    let mut merged = args[..=pos].to_vec();
    merged.extend(extra);
    merged.extend_from_slice(&args[pos + 1..]);
    Cli::try_parse_from(&merged).map_err(ParseFailure::Clap)
}

fn config_path(args: &[OsString]) -> Option<PathBuf> {
    let mut it = args.iter().skip(1);
    while let Some(a) = it.next() {
        let s = a.to_string_lossy();
        if s == "--config" {
            return it.next().map(PathBuf::from);
        }
        if let Some(p) = s.strip_prefix("--config=") {
            return Some(PathBuf::from(p));
        }
    }
    None
}

fn subcommand_position(args: &[OsString]) -> Option<usize> {
    let names = ["generate", "train", "evaluate", "predict"];
    let mut skip_next = false;
    for (i, a) in args.iter().enumerate().skip(1) {
        if std::mem::take(&mut skip_next) {
            continue;
        }
        let s = a.to_string_lossy();
        if s == "--config" {
            skip_next = true;
        } else if names.contains(&s.as_ref()) {
            return Some(i);
        }
    }
    None
}

/// Reads `key = value` lines. `#` starts a comment; a bare `key` or
/// `key = true` sets a switch and `key = false` leaves it unset. Underscores
/// in keys are read as dashes.
pub fn config_entries(text: &str) -> Result<Vec<(String, Option<String>)>> {
    let mut out = Vec::new();
    for (no, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = match line.split_once('=') {
            Some((k, v)) => (k.trim(), Some(v.trim())),
            None => (line, None),
        };
        if key.is_empty() || key.contains(char::is_whitespace) {
            return Err(Error::config(format!("config line {}: malformed key `{key}`", no + 1)));
        }
        let key = key.replace('_', "-");
        match value {
            None | Some("true") => out.push((key, None)),
            Some("false") => {}
            Some(v) => out.push((key, Some(v.to_string()))),
        }
    }
    Ok(out)
}

pub fn run(cli: Cli) -> Result<()> {
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v
            .trim()
            .parse()
            .map_err(|_| Error::config(format!("{THREADS_ENV} must be a positive integer, got `{v}`")))?;
        configure_threads(n)?;
    }
    let exec = if cli.sequential {
        Execution::Sequential
    } else {
        Execution::Parallel
    };
    match cli.command {
        Command::Generate(a) => cmd_generate(&a),
        Command::Train(a) => cmd_train(&a, exec).map(|_| ()),
        Command::Evaluate(a) => cmd_evaluate(&a, exec).map(|_| ()),
        Command::Predict(a) => cmd_predict(&a, exec),
    }
}

/// Expands a per-confound list, where a single value applies to every confound.
fn broadcast(values: &[f64], k: usize, what: &str) -> Result<Vec<f64>> {
    match values.len() {
        1 => Ok(vec![values[0]; k]),
        n if n == k => Ok(values.to_vec()),
        n => Err(Error::config(format!("{what} has {n} values for {k} confounds"))),
    }
}

/// Parses `age:4,site:3` or `age:edges=55/65/75`.
pub fn parse_confounds(text: &str) -> Result<Vec<ConfoundSpec>> {
    text.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|item| {
            let (name, rest) = item
                .split_once(':')
                .ok_or_else(|| Error::config(format!("confound `{item}` is not `name:N` or `name:edges=...`")))?;
            if let Some(edges) = rest.strip_prefix("edges=") {
                let edges = edges
                    .split('/')
                    .map(|e| e.trim().parse::<f64>())
                    .collect::<std::result::Result<Vec<_>, _>>()
                    .map_err(|_| Error::config(format!("bad edges in `{item}`")))?;
                ConfoundSpec::binned(name, edges)
            } else {
                let n: usize = rest
                    .trim()
                    .parse()
                    .map_err(|_| Error::config(format!("bad category count in `{item}`")))?;
                ConfoundSpec::indexed(name, n)
            }
        })
        .collect()
}

pub fn generator_config(a: &GenerateArgs) -> Result<GeneratorConfig> {
    let specs = parse_confounds(&a.confounds)?;
    let k = specs.len();
    let rho = broadcast(&a.rho, k, "--rho")?;
    let effects = broadcast(&a.effects, k, "--effects")?;
    let missing = broadcast(&a.missing, k, "--missing")?;
    let confounds = specs
        .into_iter()
        .enumerate()
        .map(|(i, spec)| SynthConfound {
            missing_rate: missing[i],
            ..SynthConfound::new(spec, effects[i], rho[i])
        })
        .collect();
    Ok(GeneratorConfig {
        n: a.n,
        dims: a.dims,
        label_arity: a.label_arity,
        label_effect: a.label_effect,
        confounds,
        noise: a.noise,
        seed: a.seed,
        template_seed: a.template_seed,
        label_weight: a.label_weight,
    })
}

pub fn cmd_generate(a: &GenerateArgs) -> Result<()> {
    let ds = generate(&generator_config(a)?)?;
    write_dataset(&ds, &a.out)?;
    if let Some(m) = &a.manifest {
        fs::write(m, ds.manifest_csv())?;
    }
    info!("wrote {} samples to {}", ds.len(), a.out.display());
    Ok(())
}

fn open_dataset(path: &Path) -> Result<Dataset> {
    if !path.exists() {
        return Err(Error::config(format!("dataset {} does not exist", path.display())));
    }
    read_dataset(path)
}

/// One row of the training metrics CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub variant: Variant,
    pub member: usize,
    pub step: u64,
    pub encoder_loss: f64,
    pub regressor_loss: f64,
}

pub const METRICS_HEADER: &str = "variant,member,step,enc_loss,reg_loss";

pub fn metrics_csv(records: &[StepRecord]) -> String {
    let mut out = format!("{METRICS_HEADER}\n");
    for r in records {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            r.variant, r.member, r.step, r.encoder_loss, r.regressor_loss
        );
    }
    out
}

/// Paths written by a training run.
#[derive(Debug, Clone, Default)]
pub struct TrainOutputs {
    pub checkpoints: Vec<PathBuf>,
    pub schedules: Vec<PathBuf>,
    pub metrics: PathBuf,
}

pub fn checkpoint_name(variant: Variant, member: usize) -> String {
    format!("{variant}_{member}.mckp")
}

pub fn cmd_train(a: &TrainArgs, exec: Execution) -> Result<TrainOutputs> {
    let ds = open_dataset(&a.data)?;
    let variants = a
        .variants
        .iter()
        .map(|v| v.parse::<Variant>())
        .collect::<Result<Vec<_>>>()?;
    if variants.is_empty() || a.ensemble == 0 {
        return Err(Error::config("need at least one variant and one member"));
    }
    let mut seen = variants.clone();
    seen.sort_by_key(|v| v.tag());
    seen.dedup();
    if seen.len() != variants.len() {
        return Err(Error::config("variants must be distinct"));
    }
    fs::create_dir_all(&a.out_dir)?;
    let arch = Architecture {
        input_dims: ds.dims,
        conv_channels: a.arch.channels.clone(),
        feature_width: a.arch.feature_width,
        regressor_hidden: a.arch.regressor_hidden,
    };
    let optim = OptimConfig {
        encoder: AdamConfig {
            lr: a.encoder_lr,
            beta1: a.beta1,
            beta2: a.beta2,
            epsilon: a.epsilon,
        },
        regressor: SgdConfig {
            lr: a.regressor_lr,
            momentum: a.momentum,
        },
    };

    let index = SampleIndex::from_dataset(&ds);
    let mut logs = Vec::with_capacity(a.ensemble);
    let mut outputs = TrainOutputs::default();
    for m in 0..a.ensemble {
        let config = ScheduleConfig {
            batch_size: a.batch,
            chunk_size: a.chunk,
            passes: a.passes,
            budget: a.budget,
            rotation: a.rotation.clone(),
            seed: a.seed + m as u64,
        };
        let log = ScheduleLog::plan(&index, &config)?;
        let path = a.out_dir.join(format!("schedule_{m}.log"));
        fs::write(&path, log.to_text())?;
        outputs.schedules.push(path);
        logs.push(log);
    }

    struct Job {
        member: usize,
        state: TrainState,
        records: Vec<StepRecord>,
        result: Result<()>,
    }
    let mut jobs = Vec::new();
    for &v in &variants {
        for m in 0..a.ensemble {
            let pair = ModelPair::build(v, &ds.layout, &arch, a.seed + m as u64)?;
            jobs.push(Job {
                member: m,
                state: TrainState::new(pair, optim),
                records: Vec::new(),
                result: Ok(()),
            });
        }
    }

    let start = Instant::now();
    exec.for_each_mut(&mut jobs, |_, job| {
        let variant = job.state.variant();
        let member = job.member;
        let records = &mut job.records;
        job.result = job.state.train_on_log(&ds, &logs[member], |step, l| {
            records.push(StepRecord {
                variant,
                member,
                step,
                encoder_loss: l.encoder,
                regressor_loss: l.regressor,
            });
        });
    });
    info!("trained {} models in {:.1}s", jobs.len(), start.elapsed().as_secs_f64());

    let mut records = Vec::new();
    let mut failure = None;
    for job in &jobs {
        records.extend(job.records.iter().cloned());
        let variant = job.state.variant();
        match &job.result {
            Ok(()) => {
                let path = a.out_dir.join(checkpoint_name(variant, job.member));
                save_checkpoint(&job.state, &path)?;
                outputs.checkpoints.push(path);
            }
            Err(e) if failure.is_none() => {
                let path = a.out_dir.join(format!("diagnostic_{variant}_{}.mckp", job.member));
                save_checkpoint(&job.state, &path)?;
                failure = Some(match e {
                    Error::Numeric(msg) => Error::Numeric(format!(
                        "{variant} member {} at step {}: {msg}; state written to {}",
                        job.member,
                        job.state.position,
                        path.display()
                    )),
                    other => Error::config(other.to_string()),
                });
            }
            Err(_) => {}
        }
    }
    outputs.metrics = a.out_dir.join("metrics.csv");
    fs::write(&outputs.metrics, metrics_csv(&records))?;
    match failure {
        Some(e) => Err(e),
        None => Ok(outputs),
    }
}

/// Loads checkpoints and groups them by variant, keeping first-seen order.
fn load_ensembles(paths: &[PathBuf], ds: &Dataset) -> Result<Vec<(Variant, Vec<ModelPair>)>> {
    let mut groups: Vec<(Variant, Vec<ModelPair>)> = Vec::new();
    for p in paths {
        if !p.exists() {
            return Err(Error::config(format!("checkpoint {} does not exist", p.display())));
        }
        let pair = load_checkpoint(p)?.pair;
        if pair.arch.input_dims != ds.dims {
            return Err(Error::config(format!(
                "{} expects {:?} volumes, dataset has {:?}",
                p.display(),
                pair.arch.input_dims,
                ds.dims
            )));
        }
        if pair.layout != ds.layout {
            return Err(Error::config(format!(
                "{} was trained on a different output layout than the dataset",
                p.display()
            )));
        }
        match groups.iter_mut().find(|(v, _)| *v == pair.variant) {
            Some((_, g)) => g.push(pair),
            None => groups.push((pair.variant, vec![pair])),
        }
    }
    Ok(groups)
}

#[derive(Debug, Clone, Serialize)]
pub struct MatchInfo {
    pub confound: String,
    pub min_value: Option<f64>,
    pub tolerance: f64,
    pub pairs: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct EvaluationReport {
    pub dataset: String,
    pub samples: usize,
    pub matched: Option<MatchInfo>,
    pub rows: Vec<MetricReport>,
}

impl EvaluationReport {
    pub fn to_csv(&self, confounds: &[String]) -> String {
        let mut out = MetricReport::csv_header(confounds);
        out.push('\n');
        for r in &self.rows {
            out.push_str(&r.csv_row(confounds));
            out.push('\n');
        }
        out
    }
}

pub fn cmd_evaluate(a: &EvaluateArgs, exec: Execution) -> Result<EvaluationReport> {
    let mut ds = open_dataset(&a.data)?;
    let groups = load_ensembles(&a.checkpoints, &ds)?;
    let mut sorted = a.thresholds.clone();
    sorted.sort_by(f64::total_cmp);
    sorted.dedup();
    if sorted.is_empty() {
        return Err(Error::config("no thresholds given"));
    }

    let mut matched = None;
    if let Some(key) = &a.matched {
        let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
        let sample = matched_subsample(&ds, key, a.min_value, a.tolerance, &mut rng)?;
        matched = Some(MatchInfo {
            confound: key.clone(),
            min_value: a.min_value,
            tolerance: a.tolerance,
            pairs: sample.pairs.len(),
        });
        ds = ds.subset(&sample.indices());
    }

    let mut rows = Vec::new();
    if ds.is_empty() {
        warn!("nothing to evaluate; writing an empty report");
    } else {
        for (variant, models) in &groups {
            rows.extend(evaluate(models, &ds, &sorted, variant.name(), exec)?);
        }
    }
    let report = EvaluationReport {
        dataset: a.data.display().to_string(),
        samples: ds.len(),
        matched,
        rows,
    };
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    match &a.report {
        Some(p) => fs::write(p, json + "\n")?,
        None => println!("{json}"),
    }
    if let Some(p) = &a.csv {
        let names: Vec<String> = ds.layout.confounds().iter().map(|c| c.name().to_string()).collect();
        fs::write(p, report.to_csv(&names))?;
    }
    Ok(report)
}

pub fn cmd_predict(a: &PredictArgs, exec: Execution) -> Result<()> {
    let ds = open_dataset(&a.data)?;
    let groups = load_ensembles(&a.checkpoints, &ds)?;
    if groups.len() != 1 {
        let names: BTreeMap<&str, ()> = groups.iter().map(|(v, _)| (v.name(), ())).collect();
        return Err(Error::config(format!(
            "predict takes checkpoints of one variant, got {:?}",
            names.keys().collect::<Vec<_>>()
        )));
    }
    let vols: Vec<&[f32]> = (0..ds.len()).map(|i| ds.volume(i)).collect();
    let verdicts = consensus_batch(&groups[0].1, &vols, a.threshold, exec)?;
    let text = verdicts_jsonl(&verdicts);
    match &a.out {
        Some(p) => fs::write(p, text)?,
        None => print!("{text}"),
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn confound_syntax() {
        let specs = parse_confounds("age:4, site:3,dose:edges=1/2.5/4/8").unwrap();
        assert_eq!(specs.len(), 3);
        assert_eq!(specs[0].arity(), 4);
        assert_eq!(specs[1].name(), "site");
        assert_eq!(specs[2].arity(), 3);
        assert!(parse_confounds("").unwrap().is_empty());
        assert!(parse_confounds("age").is_err());
        assert!(parse_confounds("age:x").is_err());
        assert!(parse_confounds("age:edges=3/1").is_err());
    }

    #[test]
    fn config_lines_become_flags() {
        let e = config_entries("# comment\nn = 20\nlabel_effect=0.5 # inline\nsequential\nfoo = false\n").unwrap();
        let s = |k: &str, v: Option<&str>| (k.to_string(), v.map(str::to_string));
        assert_eq!(e, vec![s("n", Some("20")), s("label-effect", Some("0.5")), s("sequential", None)]);
        assert!(config_entries("bad key = 1").is_err());
    }

    #[test]
    fn broadcast_lists() {
        assert_eq!(broadcast(&[0.5], 3, "x").unwrap(), vec![0.5; 3]);
        assert_eq!(broadcast(&[0.1, 0.2], 2, "x").unwrap(), vec![0.1, 0.2]);
        assert!(broadcast(&[0.1, 0.2], 3, "x").is_err());
    }

    #[test]
    fn missing_out_is_usage_error() {
        assert_eq!(run_from(["mucran", "generate", "--n", "10"]), EXIT_CONFIG);
    }

    #[test]
    fn command_line_overrides_config() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("run.cfg");
        fs::write(&cfg, "n = 30\ndims = 4\nseed = 9\nrho = 0.8\n").unwrap();
        let out = dir.path().join("a.mucr");
        let args: Vec<OsString> = vec![
            "mucran".into(),
            "--config".into(),
            cfg.clone().into(),
            "generate".into(),
            "--n".into(),
            "12".into(),
            "--rho".into(),
            "0.2".into(),
            "--out".into(),
            out.clone().into(),
        ];
        let cli = match parse_with_config(&args) {
            Ok(c) => c,
            Err(ParseFailure::Clap(e)) => panic!("{e}"),
            Err(ParseFailure::Mucran(e)) => panic!("{e}"),
        };
        let Command::Generate(g) = cli.command else { panic!("wrong command") };
        assert_eq!(g.n, 12);
        assert_eq!(g.dims, 4);
        assert_eq!(g.seed, 9);
        assert_eq!(g.rho, vec![0.2]);

        fs::write(&cfg, "epochs = 3\n").unwrap();
        assert!(matches!(parse_with_config(&args), Err(ParseFailure::Mucran(Error::Config(_)))));
    }
}

//! Batch experiment front end.
//!
//! Exit codes are stable contracts: 0 success, 1 verification failure or
//! internal error, 2 configuration error, 3 data/checkpoint error, 4 numeric
//! divergence.

mod config;

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use eegkit::checkpoint::{self, CkptError};
use eegkit::dataio::{read_dataset, write_dataset, DataError, Dataset, TaskId};
use eegkit::ete::{EteModel, MaeModel, ModelError};
use eegkit::teg::TegModel;
use eegkit::tokenizer::{reorganize, ElectrodeVocabulary, TokenizerError};
use eegkit::train::{
    self, evaluate, finetune, mean_std, pretrain, scaling_csv, scaling_gnuplot, scaling_harness,
    split_dataset, FinetuneMode, Objective, PretrainModel, SplitRatios, TaskDataset, TrainError,
};
use eegkit::verify;

use config::{DataSource, Mode, RunConfig};

const EXIT_FAILURE: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_DATA: u8 = 3;
const EXIT_DIVERGENCE: u8 = 4;

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Data(String),
    Divergence(String),
    Failure(String),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "configuration error: {m}"),
            CliError::Data(m) => write!(f, "data error: {m}"),
            CliError::Divergence(m) => write!(f, "numeric divergence: {m}"),
            CliError::Failure(m) => write!(f, "{m}"),
        }
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Failure(_) => EXIT_FAILURE,
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Data(_) => EXIT_DATA,
            CliError::Divergence(_) => EXIT_DIVERGENCE,
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::Config(_) => CliError::Config(e.to_string()),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match &e {
            TrainError::Diverged { .. } | TrainError::NaNGradient(_) => {
                CliError::Divergence(e.to_string())
            }
            TrainError::Config(_) | TrainError::Json(_) => CliError::Config(e.to_string()),
            TrainError::Data(inner) => match inner {
                DataError::Config(_) => CliError::Config(e.to_string()),
                _ => CliError::Data(e.to_string()),
            },
            TrainError::Ckpt(_) | TrainError::Io { .. } | TrainError::EmptySplit(_) => {
                CliError::Data(e.to_string())
            }
            TrainError::Model(ModelError::Config(_)) => CliError::Config(e.to_string()),
            _ => CliError::Failure(e.to_string()),
        }
    }
}

impl From<CkptError> for CliError {
    fn from(e: CkptError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Config(_) => CliError::Config(e.to_string()),
            other => CliError::Failure(other.to_string()),
        }
    }
}

impl From<TokenizerError> for CliError {
    fn from(e: TokenizerError) -> Self {
        CliError::Data(e.to_string())
    }
}

#[derive(Parser)]
#[command(
    name = "eegkit",
    version,
    about = "Electrode-wise EEG pretraining and multi-task fine-tuning experiments",
    after_help = "Exit codes: 0 success; 1 verification failure or internal error; \
2 configuration error; 3 data or checkpoint error; 4 numeric divergence.\n\
EEGKIT_THREADS sets the default worker-thread count (--threads overrides)."
)]
struct Cli {
    /// Run configuration (strict JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the seed of every seeded config section.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads (default: EEGKIT_THREADS, else 1).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic EEGB dataset from the config.
    GenSynthetic {
        /// Use this task entry instead of the pretraining source.
        #[arg(long)]
        task: Option<String>,
    },
    /// Self-supervised pretraining run.
    Pretrain,
    /// Multi-task fine-tuning from a pretrained encoder.
    Finetune,
    /// Per-task accuracy of a fine-tuned run, mean ± std over seeds.
    Eval {
        /// Fine-tune run directory (holds encoder/ and checkpoints/final/).
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Verify analytic gradients against central finite differences.
    Gradcheck {
        /// numkit | ete | teg | all
        #[arg(long, default_value = "all")]
        scope: String,
        /// Add a deliberately corrupted gradient (negative control).
        #[arg(long, default_value_t = false)]
        inject_fault: bool,
    },
    /// Model-size × token-budget grid; emits plot-ready CSV.
    Scaling,
    /// Print an EEGB dataset's manifest and label summary.
    Inspect {
        #[arg(long)]
        path: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    init_threads(cli.threads);
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn init_threads(flag: Option<usize>) {
    let n = flag
        .or_else(|| {
            std::env::var("EEGKIT_THREADS")
                .ok()
                .and_then(|v| v.parse().ok())
        })
        .unwrap_or(1)
        .max(1);
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
}

fn dispatch(cli: &Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::GenSynthetic { task } => {
            let cfg = load_config(cli)?;
            let out = require_out(cli)?;
            cmd_gen_synthetic(&cfg, task.as_deref(), &out)
        }
        Command::Pretrain => {
            let cfg = load_config(cli)?;
            let out = require_out(cli)?;
            cmd_pretrain(&cfg, &out)
        }
        Command::Finetune => {
            let cfg = load_config(cli)?;
            let out = require_out(cli)?;
            cmd_finetune(&cfg, &out)
        }
        Command::Eval { checkpoint } => {
            let cfg = load_config(cli)?;
            cmd_eval(&cfg, checkpoint, cli.out.as_deref())
        }
        Command::Gradcheck { scope, inject_fault } => cmd_gradcheck(scope, *inject_fault),
        Command::Scaling => {
            let cfg = load_config(cli)?;
            let out = require_out(cli)?;
            cmd_scaling(&cfg, &out)
        }
        Command::Inspect { path } => cmd_inspect(path),
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig, CliError> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| CliError::Config("--config is required for this command".into()))?;
    let mut cfg = RunConfig::load(path)?;
    if let Some(seed) = cli.seed {
        cfg.override_seed(seed);
    }
    Ok(cfg)
}

fn require_out(cli: &Cli) -> Result<PathBuf, CliError> {
    cli.out
        .clone()
        .ok_or_else(|| CliError::Config("--out is required for this command".into()))
}

/// Exclusive-writer guard for a run directory; the lock file disappears when
/// the command finishes.
struct RunLock {
    path: PathBuf,
}

impl RunLock {
    fn acquire(dir: &Path) -> Result<Self, CliError> {
        fs::create_dir_all(dir)
            .map_err(|e| CliError::Data(format!("cannot create {}: {e}", dir.display())))?;
        let path = dir.join("run.lock");
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(Self { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(CliError::Data(format!(
                "run directory {} is locked by another writer",
                dir.display()
            ))),
            Err(e) => Err(CliError::Data(format!(
                "cannot lock {}: {e}",
                dir.display()
            ))),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

fn snapshot_config(cfg: &RunConfig, dir: &Path) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(cfg)
        .map_err(|e| CliError::Failure(format!("config snapshot: {e}")))?;
    fs::write(dir.join("config.json"), text)
        .map_err(|e| CliError::Data(format!("cannot write config snapshot: {e}")))?;
    Ok(())
}

fn resolve_dataset(source: &DataSource) -> Result<Dataset, CliError> {
    match (&source.synthetic, &source.path) {
        (Some(spec), None) => {
            let profile = source.profile.as_ref().ok_or_else(|| {
                CliError::Config(format!("source {:?} needs a preprocessing profile", source.name))
            })?;
            let task = spec.task.map(|_| TaskId(source.name.clone()));
            Ok(eegkit::dataio::generate_synthetic(spec, profile, &source.name, task)?)
        }
        (None, Some(path)) => Ok(read_dataset(path)?),
        (Some(_), Some(_)) => Err(CliError::Config(format!(
            "source {:?} sets both synthetic and path",
            source.name
        ))),
        (None, None) => Err(CliError::Config(format!(
            "source {:?} sets neither synthetic nor path",
            source.name
        ))),
    }
}

fn cmd_gen_synthetic(cfg: &RunConfig, task: Option<&str>, out: &Path) -> Result<(), CliError> {
    let source = match task {
        Some(name) => cfg
            .data
            .tasks
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| CliError::Config(format!("no task source named {name:?}")))?,
        None => cfg
            .data
            .pretrain
            .as_ref()
            .ok_or_else(|| CliError::Config("config has no data.pretrain source".into()))?,
    };
    if source.synthetic.is_none() {
        return Err(CliError::Config(format!(
            "source {:?} is not synthetic",
            source.name
        )));
    }
    let dataset = resolve_dataset(source)?;
    let manifest = write_dataset(&dataset, out)?;
    println!(
        "wrote {} samples of shape {:?} ({} electrodes{}) to {}",
        manifest.num_samples,
        manifest.sample_shape,
        manifest.electrode_names.len(),
        manifest
            .num_classes
            .map(|c| format!(", {c} classes"))
            .unwrap_or_default(),
        out.display()
    );
    Ok(())
}

fn cmd_pretrain(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    if cfg.train.mode != Mode::Pretrain {
        return Err(CliError::Config("train.mode is not \"pretrain\"".into()));
    }
    let pcfg = cfg
        .train
        .pretrain
        .as_ref()
        .ok_or_else(|| CliError::Config("train.pretrain section missing".into()))?;
    let source = cfg
        .data
        .pretrain
        .as_ref()
        .ok_or_else(|| CliError::Config("data.pretrain source missing".into()))?;
    let dataset = resolve_dataset(source)?;
    let corpus = reorganize(&dataset.samples)?;

    let _lock = RunLock::acquire(out)?;
    snapshot_config(cfg, out)?;

    let mut model = match pcfg.objective {
        Objective::Ar { .. } => PretrainModel::Ar(EteModel::init(&cfg.model.ete, pcfg.seed)?),
        Objective::Mae { .. } => PretrainModel::Mae(MaeModel::init(&cfg.model.ete, pcfg.seed)?),
    };
    let mut vocab =
        ElectrodeVocabulary::init(cfg.model.ete.token_width, train::derive_vocab_seed(pcfg.seed));
    let outcome = pretrain(&corpus, &mut model, &mut vocab, pcfg, Some(out))?;
    println!(
        "pretrained {} steps: held-out loss {:.6} -> {:.6}",
        outcome.steps_run, outcome.initial_holdout_loss, outcome.final_holdout_loss
    );
    println!("run directory: {}", out.display());
    Ok(())
}

fn load_encoder(path: &Path) -> Result<(EteModel, ElectrodeVocabulary), CliError> {
    if !path.exists() {
        return Err(CliError::Data(format!(
            "checkpoint path {} does not exist",
            path.display()
        )));
    }
    match checkpoint::load_ete(path) {
        Ok(pair) => Ok(pair),
        Err(CkptError::WrongKind { .. }) => {
            let (mae, vocab) = checkpoint::load_mae(path)?;
            Ok((mae.ete, vocab))
        }
        Err(e) => Err(e.into()),
    }
}

fn task_datasets(cfg: &RunConfig, seed: u64) -> Result<Vec<TaskDataset>, CliError> {
    if cfg.data.tasks.is_empty() {
        return Err(CliError::Config("data.tasks is empty".into()));
    }
    cfg.data
        .tasks
        .iter()
        .map(|source| {
            let dataset = resolve_dataset(source)?;
            Ok(TaskDataset::from_dataset(&dataset, seed)?)
        })
        .collect()
}

fn cmd_finetune(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let mode = match cfg.train.mode {
        Mode::FinetuneJoint => FinetuneMode::Joint,
        Mode::FinetuneSeparate => FinetuneMode::Separate,
        Mode::Pretrain => {
            return Err(CliError::Config("train.mode is not a finetune mode".into()))
        }
    };
    let fcfg = cfg
        .train
        .finetune
        .as_ref()
        .ok_or_else(|| CliError::Config("train.finetune section missing".into()))?;
    let init_from = cfg
        .train
        .init_from
        .as_ref()
        .ok_or_else(|| CliError::Config("train.init_from checkpoint missing".into()))?;

    let (mut encoder, vocab) = load_encoder(init_from)?;
    if encoder.config != cfg.model.ete {
        return Err(CliError::Config(format!(
            "checkpoint encoder config {:?} does not match model.ete {:?}",
            encoder.config, cfg.model.ete
        )));
    }
    encoder.freeze();
    let vocab = vocab.frozen();

    let tasks = task_datasets(cfg, fcfg.seed)?;
    let template = TegModel::init(&cfg.model.ete, cfg.model.teg_layers, fcfg.seed ^ 0x7465_67)?;

    let _lock = RunLock::acquire(out)?;
    snapshot_config(cfg, out)?;

    let outcome = finetune(&tasks, &encoder, &template, mode, fcfg)?;
    outcome.metrics.write(out)?;
    checkpoint::save_ete(&out.join("encoder"), &encoder, &vocab)?;
    let final_dir = out.join("checkpoints").join("final");
    if let Some(model) = &outcome.joint_model {
        checkpoint::save_teg(&final_dir.join("teg"), model, &cfg.model.ete)?;
    }
    for (task, model) in &outcome.separate_models {
        checkpoint::save_teg(&final_dir.join(format!("teg-{task}")), model, &cfg.model.ete)?;
    }

    for (task, acc) in &outcome.per_task_accuracy {
        println!(
            "{task}: val accuracy {acc:.4} ({} draws, {} steps)",
            outcome.per_task_draws[task], outcome.per_task_steps[task]
        );
    }
    println!("run directory: {}", out.display());
    Ok(())
}

fn cmd_eval(cfg: &RunConfig, run_dir: &Path, out: Option<&Path>) -> Result<(), CliError> {
    let encoder_dir = run_dir.join("encoder");
    let (mut encoder, _vocab) = load_encoder(&encoder_dir)?;
    encoder.freeze();
    let final_dir = run_dir.join("checkpoints").join("final");

    let seeds: Vec<u64> = if cfg.seeds.is_empty() {
        vec![cfg.train.finetune.as_ref().map_or(0, |f| f.seed)]
    } else {
        cfg.seeds.clone()
    };

    let mut lines = Vec::new();
    let mut csv = String::from("task,seed,accuracy\n");
    for source in &cfg.data.tasks {
        let task = TaskId(source.name.clone());
        let joint_path = final_dir.join("teg");
        let teg_path = if joint_path.exists() {
            joint_path
        } else {
            final_dir.join(format!("teg-{task}"))
        };
        let (teg, _) = checkpoint::load_teg(&teg_path)?;
        let dataset = resolve_dataset(source)?;
        let mut accs = Vec::with_capacity(seeds.len());
        for &seed in &seeds {
            let (_, _, test) = split_dataset(&dataset, SplitRatios::default(), seed)?;
            let report = evaluate(&encoder, &teg, &test, &task)?;
            csv.push_str(&format!("{task},{seed},{}\n", report.accuracy));
            accs.push(report.accuracy);
        }
        let (mean, std) = mean_std(&accs);
        lines.push(format!(
            "{task}: accuracy {mean:.4} +/- {std:.4} over {} seeds",
            seeds.len()
        ));
    }
    for line in &lines {
        println!("{line}");
    }
    if let Some(dir) = out {
        fs::create_dir_all(dir)
            .map_err(|e| CliError::Data(format!("cannot create {}: {e}", dir.display())))?;
        fs::write(dir.join("eval.csv"), csv)
            .map_err(|e| CliError::Data(format!("cannot write eval.csv: {e}")))?;
    }
    Ok(())
}

fn cmd_gradcheck(scope: &str, inject_fault: bool) -> Result<(), CliError> {
    let scope: verify::Scope = scope.parse().map_err(CliError::Config)?;
    let (mut groups, _) = verify::run_scope(scope).map_err(|e| CliError::Failure(e.to_string()))?;
    if inject_fault {
        groups.push(
            verify::fault_injection_group().map_err(|e| CliError::Failure(e.to_string()))?,
        );
    }
    let width = groups.iter().map(|g| g.group.len()).max().unwrap_or(8);
    println!("{:<width$}  {:>12}  status", "group", "max_rel_err");
    for g in &groups {
        println!(
            "{:<width$}  {:>12.3e}  {}",
            g.group,
            g.max_rel_err,
            if g.passed { "pass" } else { "FAIL" }
        );
    }
    let failures: Vec<&verify::GroupResult> = groups.iter().filter(|g| !g.passed).collect();
    if let Some(worst) = failures
        .iter()
        .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
    {
        return Err(CliError::Failure(format!(
            "{} of {} groups failed; worst offender {} at {:.3e}",
            failures.len(),
            groups.len(),
            worst.group,
            worst.max_rel_err
        )));
    }
    println!("all {} groups passed", groups.len());
    Ok(())
}

fn cmd_scaling(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let ladder = cfg
        .scaling
        .as_ref()
        .ok_or_else(|| CliError::Config("config has no scaling section".into()))?;
    let _lock = RunLock::acquire(out)?;
    snapshot_config(cfg, out)?;
    let cells = scaling_harness(ladder)?;
    fs::write(out.join("scaling.csv"), scaling_csv(&cells))
        .map_err(|e| CliError::Data(format!("cannot write scaling.csv: {e}")))?;
    fs::write(out.join("scaling.dat"), scaling_gnuplot(&cells))
        .map_err(|e| CliError::Data(format!("cannot write scaling.dat: {e}")))?;
    println!(
        "{} cells ({} configs x {} fractions x {} seeds) -> {}",
        cells.len(),
        ladder.configs.len(),
        ladder.fractions.len(),
        ladder.seeds.len(),
        out.display()
    );
    Ok(())
}

fn cmd_inspect(path: &Path) -> Result<(), CliError> {
    let dataset = read_dataset(path)?;
    let manifest = dataset.manifest()?;
    println!(
        "{}",
        serde_json::to_string_pretty(&manifest)
            .map_err(|e| CliError::Failure(format!("manifest print: {e}")))?
    );
    let mut histogram: BTreeMap<u32, usize> = BTreeMap::new();
    for sample in &dataset.samples {
        if let Some(label) = sample.label() {
            *histogram.entry(label).or_default() += 1;
        }
    }
    if !histogram.is_empty() {
        println!("labels:");
        for (label, count) in histogram {
            println!("  class {label}: {count}");
        }
    }
    Ok(())
}

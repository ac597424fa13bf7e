mod config;

use std::fmt;
use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use duatm::data::{generate_synthetic, read_fseq, write_synthetic, DataError, Dataset, RawInput, SyntheticSpec};
use duatm::evaluator::{ablation_report, evaluate_against, MetricReport};
use duatm::extractor::ExtractorConfig;
use duatm::matcher::DistanceMode;
use duatm::model::{Checkpoint, Model, ModelConfig};
use duatm::parallel::{set_threads, Execution};
use duatm::tensor::TensorError;
use duatm::trainer::{StepLog, Trainer};

/// A problem with how the program was invoked.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

const SEED_ENV: &str = "DUATM_SEED";

#[derive(Parser, Debug)]
#[command(name = "duatm", version, about = "Train and evaluate dual attention matching on feature sequences")]
struct Cli {
    /// Run seed [env: DUATM_SEED as fallback]
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads for evaluation and mining; 1 is the reference mode, 0 uses every core
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic sequence dataset (manifest plus .fseq files)
    Generate(GenerateArgs),
    /// Train a model from a JSON config
    Train(TrainArgs),
    /// Score a checkpoint on a manifest and write the metrics row
    Eval(EvalArgs),
    /// Print the distance between two stored sequences
    Match(MatchArgs),
    /// Evaluate every distance mode and write the comparison table
    Ablate(AblateArgs),
}

#[derive(Args, Debug)]
struct GenerateArgs {
    /// Output directory
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 20)]
    identities: usize,
    /// Instances per identity
    #[arg(long, default_value_t = 8)]
    per_identity: usize,
    /// Sequence length S
    #[arg(long, default_value_t = 8)]
    length: usize,
    /// Vector dimension D
    #[arg(long, default_value_t = 16)]
    dim: usize,
    /// Fraction of positions replaced by random vectors
    #[arg(long, default_value_t = 0.25)]
    corruption: f64,
    /// Per-component noise scale
    #[arg(long, default_value_t = duatm::data::synthetic::STANDARD_NOISE_SCALE)]
    noise: f64,
    /// Disable random cyclic shifts
    #[arg(long)]
    aligned: bool,
    #[arg(long, default_value_t = 2)]
    cameras: usize,
    /// Instances per identity held out into eval.json (0 writes only manifest.json)
    #[arg(long, default_value_t = 2)]
    eval_per_identity: usize,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// JSON config file
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. --set train.epochs=5
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Continue from this checkpoint (its model and seed are used)
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Query manifest; also the gallery unless --gallery is given
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    gallery: Option<PathBuf>,
    /// Distance mode (defaults to the one the checkpoint was trained with)
    #[arg(long)]
    mode: Option<DistanceMode>,
    /// Write the CSV here as well as to stdout
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct MatchArgs {
    checkpoint: PathBuf,
    a: PathBuf,
    b: PathBuf,
    #[arg(long)]
    mode: Option<DistanceMode>,
    /// Also print every per-element distance
    #[arg(long)]
    verbose: bool,
}

#[derive(Args, Debug)]
struct AblateArgs {
    /// Evaluation manifest
    #[arg(long)]
    manifest: PathBuf,
    /// MODE=PATH for one mode, or a bare PATH used for every mode without its own
    #[arg(long = "checkpoint", required = true)]
    checkpoints: Vec<String>,
    /// Gallery manifest (defaults to the evaluation manifest)
    #[arg(long)]
    gallery: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let table = config::help_table();
    let command = Cli::command()
        .after_help("Run `duatm --help` for the list of config keys.")
        .after_long_help(table.clone())
        .mut_subcommand("train", |c| c.after_long_help(table.clone()).after_help(table.clone()));
    let cli = match command.try_get_matches().and_then(|m| Cli::from_arg_matches(&m)) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            ExitCode::from(exit_code(&e))
        }
    }
}

/// The error chain, skipping causes already spelled out by their parent.
fn describe(err: &anyhow::Error) -> String {
    let mut text = String::new();
    for cause in err.chain() {
        let msg = cause.to_string();
        if !text.contains(&msg) {
            if !text.is_empty() {
                text.push_str(": ");
            }
            text.push_str(&msg);
        }
    }
    text
}

/// 1 for usage and configuration problems, 3 for numerical failures and
/// 2 for everything else (unreadable, malformed or inconsistent data).
fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<UsageError>() {
            return 1;
        }
        if let Some(e) = cause.downcast_ref::<duatm::Error>() {
            return match e {
                duatm::Error::Config(_) => 1,
                duatm::Error::NonFiniteLoss { .. } => 3,
                duatm::Error::Tensor(t) | duatm::Error::Data(DataError::Tensor(t)) if numeric(t) => 3,
                _ => 2,
            };
        }
        if let Some(t) = cause.downcast_ref::<TensorError>() {
            return if numeric(t) { 3 } else { 2 };
        }
    }
    2
}

fn numeric(t: &TensorError) -> bool {
    matches!(t, TensorError::NonFinite { .. } | TensorError::ZeroNorm { .. })
}

fn seed_from_env() -> Result<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| UsageError(format!("{SEED_ENV}={v} is not a non-negative integer")).into()),
        Err(_) => Ok(None),
    }
}

fn run(cli: Cli) -> Result<()> {
    set_threads(cli.threads).map_err(|e| UsageError(e.to_string()))?;
    let exec = Execution::for_threads(cli.threads);
    let env_seed = seed_from_env()?;
    match cli.command {
        Command::Generate(args) => generate(args, cli.seed.or(env_seed)),
        Command::Train(args) => train(args, cli.seed, env_seed, exec),
        Command::Eval(args) => eval(args, exec),
        Command::Match(args) => match_pair(args),
        Command::Ablate(args) => ablate(args, exec),
    }
}

fn generate(args: GenerateArgs, seed: Option<u64>) -> Result<()> {
    let spec = SyntheticSpec {
        num_identities: args.identities,
        sequences_per_identity: args.per_identity,
        length: args.length,
        dim: args.dim,
        corruption_fraction: args.corruption,
        misalignment: !args.aligned,
        noise_scale: args.noise,
        num_cameras: args.cameras,
        seed: seed.unwrap_or(SyntheticSpec::standard().seed),
    };
    spec.validate().map_err(|e| UsageError(e.to_string()))?;
    if args.eval_per_identity >= args.per_identity {
        bail!(UsageError(format!(
            "--eval-per-identity {} leaves no training instances out of {}",
            args.eval_per_identity, args.per_identity
        )));
    }
    let (manifest, sequences) = generate_synthetic(&spec)?;
    write_synthetic(&args.out, &manifest, &sequences, args.eval_per_identity)?;
    println!("wrote {} sequences to {}", sequences.len(), args.out.display());
    Ok(())
}

fn load_dataset(path: &Path) -> Result<Dataset> {
    Dataset::load(path).with_context(|| format!("loading {}", path.display()))
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Ok(Checkpoint::load(path)?)
}

fn train(args: TrainArgs, seed_flag: Option<u64>, env_seed: Option<u64>, exec: Execution) -> Result<()> {
    let mut cfg = config::load(args.config.as_deref(), &args.overrides, seed_flag, env_seed)?;
    let dataset = load_dataset(&cfg.manifest)?;

    let mut trainer = match &args.resume {
        Some(path) => {
            let checkpoint = load_checkpoint(path)?;
            cfg.train.seed = checkpoint.seed;
            Trainer::resume(checkpoint, &dataset, cfg.train.clone(), exec)?
        }
        None => {
            let ex = &cfg.model.extractor;
            let input_channels = match (ex.input_channels, dataset.sequence_dim()) {
                (Some(c), _) | (None, Some(c)) => c,
                (None, None) => bail!(UsageError(
                    "model.extractor.input_channels is required for image and video data".into()
                )),
            };
            let model = Model::new(
                ModelConfig {
                    extractor: ExtractorConfig {
                        kind: ex.kind,
                        input_channels,
                        dim: ex.dim,
                        conv_channels: ex.conv_channels.clone(),
                        cell: ex.cell,
                    },
                    mode: cfg.model.mode,
                    num_identities: dataset.num_identities,
                },
                cfg.train.seed,
            )?;
            Trainer::new(model, &dataset, cfg.train.clone(), exec)?
        }
    };

    let fresh = args.resume.is_none() || !cfg.log.exists();
    let file = if fresh {
        File::create(&cfg.log)
    } else {
        OpenOptions::new().append(true).open(&cfg.log)
    }
    .with_context(|| format!("opening {}", cfg.log.display()))?;
    let mut log = BufWriter::new(file);
    if fresh {
        writeln!(log, "{}", StepLog::CSV_HEADER)?;
    }

    let steps_per_epoch = cfg.train.steps_per_epoch as u64;
    let mut rows = 0usize;
    while !trainer.is_finished() {
        let row = match trainer.train_step(duatm::trainer::LossTerms::ALL) {
            Ok(row) => row,
            Err(e) => {
                log.flush()?;
                return Err(e.into());
            }
        };
        writeln!(log, "{}", row.csv_row())?;
        rows += 1;
        if trainer.step_count() % steps_per_epoch == 0 {
            log.flush()?;
            trainer.checkpoint().save(&cfg.checkpoint)?;
        }
    }
    log.flush()?;
    trainer.checkpoint().save(&cfg.checkpoint)?;
    println!(
        "trained {rows} steps (epoch {} of {}), checkpoint {}, log {}",
        trainer.epoch(),
        cfg.train.epochs,
        cfg.checkpoint.display(),
        cfg.log.display()
    );
    Ok(())
}

fn emit(csv: &str, out: Option<&Path>) -> Result<()> {
    print!("{csv}");
    if let Some(path) = out {
        fs::write(path, csv).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

fn eval(args: EvalArgs, exec: Execution) -> Result<()> {
    let model = load_checkpoint(&args.checkpoint)?.model;
    let mode = args.mode.unwrap_or(model.mode());
    let queries = load_dataset(&args.manifest)?;
    let gallery = match &args.gallery {
        Some(g) => Some(load_dataset(g)?),
        None => None,
    };
    let report = evaluate_against(&model, &queries, gallery.as_ref().unwrap_or(&queries), mode, exec)?;
    emit(&ablation_report(&[(mode.name(), report)]), args.out.as_deref())
}

fn match_pair(args: MatchArgs) -> Result<()> {
    let model = load_checkpoint(&args.checkpoint)?.model;
    let mode = args.mode.unwrap_or(model.mode());
    let a = RawInput::Sequence(read_fseq(&args.a)?);
    let b = RawInput::Sequence(read_fseq(&args.b)?);
    let report = model.distance(&a, &b, mode)?;
    println!("distance {}", report.distance);
    if args.verbose {
        for (i, d) in report.d_a.iter().enumerate() {
            println!("d_a {i} {d}");
        }
        for (j, d) in report.d_b.iter().enumerate() {
            println!("d_b {j} {d}");
        }
    }
    Ok(())
}

fn ablate(args: AblateArgs, exec: Execution) -> Result<()> {
    let mut fallback = None;
    let mut per_mode = Vec::new();
    for raw in &args.checkpoints {
        match raw.split_once('=') {
            Some((mode, path)) => {
                let mode: DistanceMode = mode.parse().map_err(|e: duatm::Error| UsageError(e.to_string()))?;
                per_mode.push((mode, PathBuf::from(path)));
            }
            None if fallback.is_none() => fallback = Some(PathBuf::from(raw)),
            None => bail!(UsageError("at most one checkpoint may be given without a mode".into())),
        }
    }
    let queries = load_dataset(&args.manifest)?;
    let gallery = match &args.gallery {
        Some(g) => Some(load_dataset(g)?),
        None => None,
    };
    let mut rows: Vec<(&str, MetricReport)> = Vec::new();
    for mode in DistanceMode::ALL {
        let path = per_mode
            .iter()
            .rev()
            .find(|(m, _)| *m == mode)
            .map(|(_, p)| p)
            .or(fallback.as_ref())
            .ok_or_else(|| UsageError(format!("no checkpoint for mode {mode}")))?;
        let model = load_checkpoint(path)?.model;
        let report = evaluate_against(&model, &queries, gallery.as_ref().unwrap_or(&queries), mode, exec)?;
        rows.push((mode.name(), report));
    }
    emit(&ablation_report(&rows), args.out.as_deref())
}

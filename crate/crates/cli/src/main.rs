//! `schedrank` — cost-model toolkit for tensor-program tuning.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use commands::{
    cmd_eval, cmd_featurize, cmd_gen_synthetic, cmd_search, cmd_stats, cmd_train, cmd_train_mtl,
    EvalArgs, FeaturizeArgs, GenSyntheticArgs, ScorerKind, SearchArgs, TrainArgs, TrainMtlArgs,
};
use config::RunConfig;
use schedrank::Split;

#[derive(Parser)]
#[command(
    name = "schedrank",
    about = "Latency-ranking cost models over schedule-primitive sequences",
    version
)]
struct Cli {
    /// Worker threads for featurization and scoring (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,

    /// Flat key-value config file (`key = value` lines, dotted keys).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Config overrides, e.g. `--set model.hidden_dim=128`.
    #[arg(long = "set", global = true)]
    overrides: Vec<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Split {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ScorerArg {
    Model,
    Oracle,
    Random,
}

impl From<ScorerArg> for ScorerKind {
    fn from(s: ScorerArg) -> ScorerKind {
        match s {
            ScorerArg::Model => ScorerKind::Model,
            ScorerArg::Oracle => ScorerKind::Oracle,
            ScorerArg::Random => ScorerKind::Random,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Emit sequence-length and per-type embedding statistics plus the
    /// duplicate rate of a dataset.
    Stats {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Extract normalized feature matrices for every record.
    Featurize {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        val_fraction: Option<f64>,
        #[arg(long, value_delimiter = ',')]
        holdout: Vec<String>,
    },
    /// Train a single-task latency-ranking model.
    Train {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        val_fraction: Option<f64>,
        #[arg(long, value_delimiter = ',')]
        holdout: Vec<String>,
        /// Restrict to one hardware platform of a mixed dataset.
        #[arg(long)]
        hardware: Option<String>,
        /// Fine-tune from an existing checkpoint instead of a fresh model.
        #[arg(long)]
        init_from: Option<PathBuf>,
    },
    /// Train a multi-task model with one head per hardware platform.
    TrainMtl {
        /// Dataset files; may be repeated. Tasks come from hardware ids.
        #[arg(long = "dataset", required = true)]
        datasets: Vec<PathBuf>,
        /// Hardware id of the target platform (task 0).
        #[arg(long)]
        target_task: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        val_fraction: Option<f64>,
        #[arg(long, value_delimiter = ',')]
        holdout: Vec<String>,
        /// Train heads only, leaving shared weights fixed.
        #[arg(long, default_value_t = false)]
        freeze_shared: bool,
    },
    /// Compute weighted top-k scores of a checkpoint over a dataset split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        /// Reuse a saved split assignment instead of recomputing one.
        #[arg(long)]
        split_file: Option<PathBuf>,
        /// Task to evaluate when the checkpoint is multi-task.
        #[arg(long)]
        target_task: Option<String>,
        #[arg(long)]
        hardware: Option<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        val_fraction: Option<f64>,
        #[arg(long, value_delimiter = ',')]
        holdout: Vec<String>,
    },
    /// Run the simulated round-based tuner against a synthetic workload.
    Search {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        workload_spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Oracle to tune against when the spec has several.
        #[arg(long)]
        hardware: Option<String>,
        /// Task to deploy when the checkpoint is multi-task.
        #[arg(long)]
        target_task: Option<String>,
        #[arg(long, default_value_t = 200)]
        rounds: usize,
        #[arg(long, default_value_t = 10)]
        measure_per_round: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value = "model")]
        scorer: ScorerArg,
    },
    /// Generate a seeded synthetic workload spec and labeled datasets.
    GenSynthetic {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 50)]
        subgraphs: usize,
        #[arg(long, default_value_t = 200)]
        candidates: usize,
        #[arg(long, default_value_t = 5)]
        workloads: usize,
        /// Hardware platform ids; later ones get correlated oracles.
        #[arg(long, value_delimiter = ',', default_value = "hw_a")]
        hardware: Vec<String>,
        #[arg(long, default_value_t = 0.9)]
        correlation: f64,
        #[arg(long, default_value_t = 0.0)]
        sigma: f64,
    },
}

enum CliError {
    Usage(String),
    Data(String),
    Numeric(String),
}

impl From<schedrank::Error> for CliError {
    fn from(e: schedrank::Error) -> Self {
        match e {
            schedrank::Error::Config(_) => CliError::Usage(e.to_string()),
            schedrank::Error::Numeric(_) => CliError::Numeric(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

fn require_file(path: &PathBuf, what: &str) -> Result<(), CliError> {
    if !path.exists() {
        return Err(CliError::Usage(format!(
            "{what} `{}` does not exist",
            path.display()
        )));
    }
    Ok(())
}

fn require_checkpoint(path: &PathBuf) -> Result<(), CliError> {
    require_file(&path.join("manifest.json"), "checkpoint manifest")
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(path) = &cli.config {
        require_file(path, "config file")?;
    }
    let mut cfg = RunConfig::load(cli.config.as_deref())?;
    cfg.apply_overrides(&cli.overrides)?;

    if cli.threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cli.threads)
            .build_global()
            .map_err(|e| CliError::Usage(format!("thread pool: {e}")))?;
    }

    match cli.command {
        Command::Stats { dataset, out } => {
            require_file(&dataset, "dataset")?;
            cmd_stats(&dataset, &out, &cfg)?;
        }
        Command::Featurize {
            dataset,
            out,
            seed,
            val_fraction,
            holdout,
        } => {
            require_file(&dataset, "dataset")?;
            cmd_featurize(
                &FeaturizeArgs {
                    dataset,
                    out,
                    seed,
                    val_fraction,
                    holdout,
                },
                &cfg,
            )?;
        }
        Command::Train {
            dataset,
            out,
            seed,
            epochs,
            val_fraction,
            holdout,
            hardware,
            init_from,
        } => {
            require_file(&dataset, "dataset")?;
            if let Some(ckpt) = &init_from {
                require_checkpoint(ckpt)?;
            }
            cmd_train(
                &TrainArgs {
                    dataset,
                    out,
                    seed,
                    epochs,
                    val_fraction,
                    holdout,
                    hardware,
                    init_from,
                },
                &cfg,
            )?;
        }
        Command::TrainMtl {
            datasets,
            target_task,
            out,
            seed,
            epochs,
            val_fraction,
            holdout,
            freeze_shared,
        } => {
            for d in &datasets {
                require_file(d, "dataset")?;
            }
            cmd_train_mtl(
                &TrainMtlArgs {
                    datasets,
                    target_task,
                    out,
                    seed,
                    epochs,
                    val_fraction,
                    holdout,
                    freeze_shared,
                },
                &cfg,
            )?;
        }
        Command::Eval {
            checkpoint,
            dataset,
            out,
            split,
            split_file,
            target_task,
            hardware,
            seed,
            val_fraction,
            holdout,
        } => {
            require_checkpoint(&checkpoint)?;
            require_file(&dataset, "dataset")?;
            if let Some(f) = &split_file {
                require_file(f, "split file")?;
            }
            cmd_eval(
                &EvalArgs {
                    checkpoint,
                    dataset,
                    out,
                    split: split.into(),
                    split_file,
                    target_task,
                    hardware,
                    seed,
                    val_fraction,
                    holdout,
                },
                &cfg,
            )?;
        }
        Command::Search {
            checkpoint,
            workload_spec,
            out,
            hardware,
            target_task,
            rounds,
            measure_per_round,
            seed,
            scorer,
        } => {
            require_checkpoint(&checkpoint)?;
            require_file(&workload_spec, "workload spec")?;
            cmd_search(
                &SearchArgs {
                    checkpoint,
                    workload_spec,
                    out,
                    hardware,
                    target_task,
                    rounds,
                    measure_per_round,
                    seed,
                    scorer: scorer.into(),
                },
                &cfg,
            )?;
        }
        Command::GenSynthetic {
            out,
            seed,
            subgraphs,
            candidates,
            workloads,
            hardware,
            correlation,
            sigma,
        } => {
            cmd_gen_synthetic(
                &GenSyntheticArgs {
                    out,
                    seed,
                    subgraphs,
                    candidates,
                    workloads,
                    hardware,
                    correlation,
                    sigma,
                },
                &cfg,
            )?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Data(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(3)
        }
        Err(CliError::Numeric(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(4)
        }
    }
}

//! Command-line front end: variant comparisons, μ sweeps, eigenvalue
//! snapshots and the gradient-noise study on the reference network.

pub mod aggregate;
pub mod commands;
pub mod config;
pub mod runner;

use std::fmt;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use config::{DatasetKind, ExperimentConfig, Variant};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_IO: i32 = 2;
pub const EXIT_DIVERGED: i32 = 3;

#[derive(Debug)]
pub enum CliError {
    Config(Vec<String>),
    Io(String),
    MissingRuns(Vec<String>),
    Diverged(Vec<String>),
    Engine(natmode::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Io(_) | CliError::MissingRuns(_) => EXIT_IO,
            CliError::Diverged(_) => EXIT_DIVERGED,
            CliError::Engine(e) => match e {
                natmode::Error::Io { .. } | natmode::Error::Idx { .. } | natmode::Error::Checkpoint(_) | natmode::Error::Csv(_) | natmode::Error::Json(_) => EXIT_IO,
                _ => EXIT_CONFIG,
            },
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let list = |f: &mut fmt::Formatter<'_>, head: &str, items: &[String]| {
            writeln!(f, "{head}:")?;
            items.iter().try_for_each(|i| writeln!(f, "  {i}"))
        };
        match self {
            CliError::Config(e) => list(f, "invalid configuration", e),
            CliError::Io(e) => write!(f, "{e}"),
            CliError::MissingRuns(e) => list(f, "cannot aggregate, runs missing", e),
            CliError::Diverged(e) => list(f, "runs diverged", e),
            CliError::Engine(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<natmode::Error> for CliError {
    fn from(e: natmode::Error) -> Self {
        CliError::Engine(e)
    }
}

#[derive(Parser, Debug)]
#[command(name = "natmode", version, about = "Natural-mode experiments on a LeNet-style CNN")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train every (variant, seed, mu) combination.
    Train {
        #[command(flatten)]
        common: Common,
        /// Exit with status 3 if any run diverges.
        #[arg(long)]
        fail_on_divergence: bool,
    },
    /// Train a mu grid and write quartile bands per variant and mu.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Only aggregate runs already present under --out.
        #[arg(long)]
        aggregate_only: bool,
    },
    /// Modal reports for a checkpoint file or a run directory.
    Analyze {
        #[command(flatten)]
        common: Common,
        /// Checkpoint file or run directory.
        #[arg(long)]
        input: PathBuf,
    },
    /// Gradient-noise study: frozen FC, norm/NLMS on the second conv only.
    Noise {
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Args, Debug, Default)]
pub struct Common {
    /// key=value config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long = "seed")]
    pub seeds: Vec<u64>,
    #[arg(long = "mu-conv")]
    pub mu_conv: Vec<f64>,
    #[arg(long)]
    pub mu_other: Option<f64>,
    #[arg(long)]
    pub epochs: Option<u32>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long = "variant")]
    pub variants: Vec<Variant>,
    /// 20 epochs (40 for noise), 5 seeds, full dataset.
    #[arg(long)]
    pub paper_scale: bool,
    #[arg(long)]
    pub noise_alpha: Option<f64>,
    #[arg(long)]
    pub dataset: Option<DatasetKind>,
    #[arg(long)]
    pub mnist_dir: Option<PathBuf>,
    #[arg(long)]
    pub train_size: Option<usize>,
    #[arg(long)]
    pub val_size: Option<usize>,
    /// Save a checkpoint at every analysis step.
    #[arg(long)]
    pub save_checkpoints: bool,
}

/// Defaults, then the config file, then `--paper-scale`, then flags.
/// Returns the config and the config file text.
pub fn resolve(common: &Common, noise: bool) -> Result<(ExperimentConfig, Option<String>), CliError> {
    let mut cfg = ExperimentConfig::default();
    if noise {
        cfg.mu_conv = vec![1.0];
        cfg.noise_alpha = 1.0;
        cfg.variants = Variant::NOISE.to_vec();
    }
    let source = match &common.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| CliError::Io(format!("{}: {e}", p.display())))?;
            cfg.apply_text(&text).map_err(CliError::Config)?;
            Some(text)
        }
        None => None,
    };
    if common.paper_scale {
        cfg = cfg.paper_scale();
        if noise {
            cfg.epochs = 40;
        }
    }
    if !common.seeds.is_empty() {
        cfg.seeds = common.seeds.clone();
    }
    if !common.mu_conv.is_empty() {
        cfg.mu_conv = common.mu_conv.clone();
    }
    if !common.variants.is_empty() {
        cfg.variants = common.variants.clone();
    }
    macro_rules! over {
        ($($field:ident),*) => { $(if let Some(v) = &common.$field { cfg.$field = v.clone(); })* };
    }
    over!(mu_other, epochs, batch_size, noise_alpha, dataset, mnist_dir, train_size, val_size);
    if common.save_checkpoints {
        cfg.save_checkpoints = true;
    }
    Ok((cfg, source))
}

fn out_dir(common: &Common) -> PathBuf {
    common.out.clone().unwrap_or_else(|| PathBuf::from("out"))
}

fn summarize(records: &[natmode::data::RunRecord]) {
    for r in records {
        let err = r.final_val_error().map_or("-".to_string(), |e| format!("{:.4}", e));
        println!("{}  val_error={}  {}", r.meta.run_id, err, r.meta.outcome);
    }
}

pub fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train { common, fail_on_divergence } => {
            let (cfg, src) = resolve(&common, false)?;
            let records = commands::cmd_train(&cfg, &out_dir(&common), src.as_deref(), fail_on_divergence)?;
            summarize(&records);
        }
        Command::Sweep { common, aggregate_only } => {
            let (cfg, src) = resolve(&common, false)?;
            let out = out_dir(&common);
            commands::cmd_sweep(&cfg, &out, src.as_deref(), aggregate_only)?;
            println!("wrote {}", out.join("sweep.csv").display());
        }
        Command::Analyze { common, input } => {
            let (cfg, _) = resolve(&common, false)?;
            let out = common.out.clone().unwrap_or_else(|| if input.is_dir() { input.join("analysis") } else { PathBuf::from("analysis") });
            let (modal, _) = commands::cmd_analyze(&input, &cfg, &out)?;
            println!("{:>5} {:>6} {:>12} {:>12} {:>12} {:>12} {:>8}", "layer", "step", "lambda_min", "lambda_max", "mu_max", "tau_max", "block");
            for m in &modal {
                println!(
                    "{:>5} {:>6} {:>12.4e} {:>12.4e} {:>12.4e} {:>12.4e} {:>8.4}",
                    m.layer, m.step, m.lambda_min, m.lambda_max, m.mu_max, m.tau_max, m.block_energy_ratio
                );
            }
        }
        Command::Noise { common } => {
            let (cfg, src) = resolve(&common, true)?;
            let records = commands::cmd_noise(&cfg, &out_dir(&common), src.as_deref())?;
            summarize(&records);
        }
    }
    Ok(())
}

/// Parses `args` and runs the command, returning the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    match dispatch(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprint!("error: {e}");
            if !e.to_string().ends_with('\n') {
                eprintln!();
            }
            e.exit_code()
        }
    }
}

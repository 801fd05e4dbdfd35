//! `muguide` command-line entry point.
//!
//! Exit codes: 0 on success, 2 for configuration or validation errors
//! (including usage errors), 3 for runtime or numeric failures.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use muguide::{Error, ModelId, Result};
use muguide_harness::InputKind;

use config::RunConfig;

#[derive(Parser, Debug)]
#[command(name = "muguide", version, about = "Amortized posterior estimation for diffusion MRI models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate a prior-predictive training set.
    Simulate(Common),
    /// Train a flow on a dataset (or on fresh simulations).
    Train {
        #[command(flatten)]
        common: Common,
        /// Dataset stem written by `simulate`.
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Posterior summaries for every voxel of a signal table.
    Infer {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        signals: PathBuf,
        /// Also write each voxel's posterior samples.
        #[arg(long)]
        save_samples: bool,
    },
    /// MCMC posterior summaries for every voxel of a signal table.
    Mcmc {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        signals: PathBuf,
    },
    /// Flow against MCMC on simulated voxels.
    Compare(Common),
    /// Posterior predictive check.
    Ppc {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 100)]
        n_pp: usize,
    },
    /// Degenerate counts per parameter.
    Census(Common),
    /// Uncertainty at several noise levels.
    SnrSweep {
        #[command(flatten)]
        common: Common,
        /// Comma-separated SNRs; `none` for noise-free.
        #[arg(long, default_value = "none,50,25")]
        levels: String,
    },
    /// Learned features against shell means.
    Correlation(Common),
    /// Learned features against a shell-mean conditioned flow.
    Features {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        summary_checkpoint: Option<PathBuf>,
    },
    /// Parametric maps of a synthetic phantom.
    Phantom {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 16)]
        nx: usize,
        #[arg(long, default_value_t = 16)]
        ny: usize,
    },
}

/// Flags shared by every subcommand; each overrides the JSON config.
#[derive(Args, Debug, Clone, Default)]
struct Common {
    /// JSON run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    model: Option<ModelId>,
    #[arg(long)]
    protocol: Option<PathBuf>,
    #[arg(long)]
    snr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    n_train: Option<usize>,
    #[arg(long)]
    max_bvalue: Option<f64>,
    #[arg(long)]
    workers: Option<usize>,
    /// Pipeline checkpoint stem; repeat for `snr-sweep`.
    #[arg(long)]
    checkpoint: Vec<PathBuf>,
    /// Posterior samples per voxel.
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long, value_parser = parse_input)]
    input: Option<InputKind>,
    #[arg(long)]
    max_epochs: Option<usize>,
}

fn parse_input(s: &str) -> std::result::Result<InputKind, String> {
    match s {
        "raw_signal" | "raw" => Ok(InputKind::RawSignal),
        "shell_means" => Ok(InputKind::ShellMeans),
        other => Err(format!("unknown input kind `{other}`")),
    }
}

impl Common {
    /// Config file first, then flags.
    fn resolve(&self) -> Result<RunConfig> {
        let mut c = match &self.config {
            Some(p) => {
                if !p.exists() {
                    return Err(Error::Config(format!("config file {} does not exist", p.display())));
                }
                RunConfig::load(p)?
            }
            None => RunConfig::default(),
        };
        if self.model.is_some() {
            c.model = self.model;
        }
        if self.protocol.is_some() {
            c.protocol.clone_from(&self.protocol);
        }
        if self.snr.is_some() {
            c.snr = self.snr;
        }
        if self.seed.is_some() {
            c.seed = self.seed;
        }
        if self.out.is_some() {
            c.output.clone_from(&self.out);
        }
        if self.n.is_some() {
            c.n = self.n;
        }
        if self.n_train.is_some() {
            c.n_train = self.n_train;
        }
        if self.max_bvalue.is_some() {
            c.max_bvalue = self.max_bvalue;
        }
        if self.workers.is_some() {
            c.workers = self.workers;
        }
        if let Some(s) = self.samples {
            c.harness.n_samples = s;
            c.infer_samples = Some(s);
        }
        if let Some(i) = self.input {
            c.input = i;
        }
        if let Some(e) = self.max_epochs {
            c.training.max_epochs = e;
        }
        if let Some(seed) = c.seed {
            c.training.rng_seed = seed;
        }
        c.validate()?;
        Ok(c)
    }
}

fn run(cli: Cli) -> Result<()> {
    use commands as c;
    match cli.command {
        Command::Simulate(common) => c::simulate(&common.resolve()?),
        Command::Train { common, dataset } => c::train(&common.resolve()?, dataset.as_deref()),
        Command::Infer { common, signals, save_samples } => {
            c::infer(&common.resolve()?, &common.checkpoint, &signals, save_samples)
        }
        Command::Mcmc { common, signals } => c::mcmc(&common.resolve()?, &signals),
        Command::Compare(common) => c::compare(&common.resolve()?, &common.checkpoint),
        Command::Ppc { common, n_pp } => c::ppc(&common.resolve()?, &common.checkpoint, n_pp),
        Command::Census(common) => c::census(&common.resolve()?, &common.checkpoint),
        Command::SnrSweep { common, levels } => c::snr_sweep(&common.resolve()?, &common.checkpoint, &levels),
        Command::Correlation(common) => c::correlation(&common.resolve()?, &common.checkpoint),
        Command::Features { common, summary_checkpoint } => {
            c::features(&common.resolve()?, &common.checkpoint, summary_checkpoint.as_deref())
        }
        Command::Phantom { common, nx, ny } => c::phantom(&common.resolve()?, &common.checkpoint, nx, ny),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config() { 2 } else { 3 })
        }
    }
}

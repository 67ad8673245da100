//! Argument parsing. Each flag names a [`RunConfig`] field; `--config`
//! loads a JSON file first and flags override it. The only renamed flag is
//! `--train-seed` for `train.seed`, which would otherwise collide with the
//! generation seed.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use krylov_core::baseline::FitForm;
use krylov_core::eval::Split;
use krylov_core::transformer::MaskPolicy;

use crate::commands;
use crate::config::{Family, RunConfig};
use crate::error::{CliError, ExitCode, Result};

#[derive(Parser, Debug)]
#[command(name = "krylov", version, about = "Lanczos-coefficient datasets, transformer training and evaluation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a dataset of Lanczos sequences.
    Generate(Flags),
    /// Train a transformer on a train-tagged dataset.
    Train(Flags),
    /// Compare transformer and baseline forecasts on a test-tagged dataset.
    Evaluate(Flags),
    /// Evaluate under the full and the three ablation masks, dumping attention maps.
    Ablate(Flags),
    /// Krylov complexity and autocorrelation of one sequence.
    Reconstruct(Flags),
    /// Convert coefficients to moments or moments to coefficients.
    Moments(Flags),
}

impl Command {
    pub fn flags(&self) -> &Flags {
        match self {
            Command::Generate(f)
            | Command::Train(f)
            | Command::Evaluate(f)
            | Command::Ablate(f)
            | Command::Reconstruct(f)
            | Command::Moments(f) => f,
        }
    }
}

#[derive(Args, Debug, Default, Clone)]
pub struct Flags {
    /// JSON run configuration supplying defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Print the resolved configuration as JSON and exit.
    #[arg(long)]
    pub print_config: bool,

    #[arg(long)]
    pub family: Option<Family>,
    /// Chain length L (tfim).
    #[arg(long)]
    pub sites: Option<usize>,
    /// Sequence length T.
    #[arg(long)]
    pub length: Option<usize>,
    #[arg(long)]
    pub samples: Option<usize>,
    /// Master seed for generation.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub split: Option<Split>,
    #[arg(long)]
    pub max_attempts: Option<usize>,
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub test_dataset: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub output: Option<PathBuf>,
    #[arg(long)]
    pub fit_form: Option<FitForm>,
    /// full, parity, long_range(k) or early(k).
    #[arg(long)]
    pub mask: Option<MaskPolicy>,
    #[arg(long)]
    pub t_max: Option<f64>,
    #[arg(long)]
    pub time_points: Option<usize>,
    #[arg(long)]
    pub index: Option<usize>,
    /// Comma-separated b_1,b_2,...
    #[arg(long, value_delimiter = ',', num_args = 1..)]
    pub coefficients: Option<Vec<f64>>,
    /// Comma-separated mu_0,mu_2,...
    #[arg(long, value_delimiter = ',', num_args = 1..)]
    pub moments: Option<Vec<f64>>,

    #[arg(long)]
    pub d_model: Option<usize>,
    #[arg(long)]
    pub n_layers: Option<usize>,
    #[arg(long)]
    pub n_heads: Option<usize>,
    #[arg(long)]
    pub d_ff: Option<usize>,
    #[arg(long)]
    pub dropout: Option<f64>,
    #[arg(long)]
    pub max_position: Option<usize>,
    #[arg(long)]
    pub layer_norm_eps: Option<f64>,

    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub n_in: Option<usize>,
    #[arg(long)]
    pub beta1: Option<f64>,
    #[arg(long)]
    pub beta2: Option<f64>,
    #[arg(long)]
    pub epsilon: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    /// Seed for initialization, split, shuffling and dropout.
    #[arg(long)]
    pub train_seed: Option<u64>,
    #[arg(long)]
    pub val_fraction: Option<f64>,
}

macro_rules! apply {
    ($flags:expr, $target:expr, $($field:ident),+) => {
        $(if let Some(v) = $flags.$field.clone() { $target.$field = v; })+
    };
}

impl Flags {
    /// The configuration file (or defaults) with every given flag applied.
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut c = match &self.config {
            Some(p) => RunConfig::from_json_file(p)?,
            None => RunConfig::default(),
        };
        apply!(self, c, family, sites, length, samples, seed, split, max_attempts, mask, t_max, time_points, index, coefficients, moments);
        if self.dataset.is_some() {
            c.dataset = self.dataset.clone();
        }
        if self.test_dataset.is_some() {
            c.test_dataset = self.test_dataset.clone();
        }
        if self.checkpoint.is_some() {
            c.checkpoint = self.checkpoint.clone();
        }
        if self.output.is_some() {
            c.output = self.output.clone();
        }
        if self.fit_form.is_some() {
            c.fit_form = self.fit_form;
        }
        apply!(self, c.model, d_model, n_layers, n_heads, d_ff, dropout, max_position, layer_norm_eps);
        apply!(self, c.train, learning_rate, batch_size, epochs, n_in, beta1, beta2, epsilon, weight_decay, val_fraction);
        if let Some(s) = self.train_seed {
            c.train.seed = s;
        }
        Ok(c)
    }
}

/// Runs one subcommand on a resolved configuration.
pub fn dispatch(command: &Command, cfg: &RunConfig) -> Result<()> {
    match command {
        Command::Generate(_) => commands::cmd_generate(cfg).map(drop),
        Command::Train(_) => commands::cmd_train(cfg).map(drop),
        Command::Evaluate(_) => commands::cmd_evaluate(cfg).map(drop),
        Command::Ablate(_) => commands::cmd_ablate(cfg).map(drop),
        Command::Reconstruct(_) => commands::cmd_reconstruct(cfg).map(drop),
        Command::Moments(_) => commands::cmd_moments(cfg).map(drop),
    }
}

/// Parses `args` (program name first), runs, and returns the exit status.
pub fn run<I, S>(args: I) -> ExitCode
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::Usage } else { ExitCode::Success };
        }
    };
    let flags = cli.command.flags();
    let outcome = flags.resolve().and_then(|cfg| {
        if flags.print_config {
            println!("{}", serde_json::to_string_pretty(&cfg).expect("run configurations serialize"));
            return Ok(());
        }
        dispatch(&cli.command, &cfg)
    });
    match outcome {
        Ok(()) => ExitCode::Success,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

impl From<CliError> for ExitCode {
    fn from(e: CliError) -> Self {
        e.exit_code()
    }
}

//! `robustkit` — train, evaluate, analyze, and self-check small robust
//! classifiers from a single TOML config per run.
//!
//! Exit codes: 0 success, 1 configuration error (bad flags, bad config file,
//! inconsistent sections), 2 runtime/numeric error, 3 property-suite failure.
//! Every failure prints exactly one machine-parsable line on standard error:
//! `error kind=<config|runtime|verify> msg="..."`.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use commands::AnalyzeKind;

/// A failure, classified for the exit code.
#[derive(Debug)]
pub enum CliError {
    Config(String),
    Runtime(String),
    Verify(String),
}

impl CliError {
    fn kind(&self) -> &'static str {
        match self {
            CliError::Config(_) => "config",
            CliError::Runtime(_) => "runtime",
            CliError::Verify(_) => "verify",
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Config(m) | CliError::Runtime(m) | CliError::Verify(m) => m,
        }
    }

    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 1,
            CliError::Runtime(_) => 2,
            CliError::Verify(_) => 3,
        }
    }

    /// A core error surfaced while interpreting configuration.
    pub fn config_from(e: robustkit::Error) -> Self {
        CliError::Config(config::one_line(&e.to_string()))
    }

    /// A core error surfaced mid-run. Contract violations the core classifies
    /// as configuration problems keep exit code 1 even when detected late.
    pub fn runtime_from(e: robustkit::Error) -> Self {
        let msg = config::one_line(&e.to_string());
        match e {
            robustkit::Error::Config(_) => CliError::Config(msg),
            _ => CliError::Runtime(msg),
        }
    }
}

#[derive(Parser)]
#[command(
    name = "robustkit",
    version,
    about = "Adversarial training and flatness analysis for small dense classifiers"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by the config-driven subcommands.
#[derive(Args)]
struct RunArgs {
    /// Path to the run's TOML config.
    #[arg(long)]
    config: PathBuf,
    /// Override the config's top-level seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the config's output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override the config's checkpoint path.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Override any config key, e.g. --set train.lr=0.05 (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

impl RunArgs {
    fn load(&self) -> Result<(config::RunConfig, toml::Table), CliError> {
        config::load(
            &self.config,
            self.seed,
            self.out.as_deref(),
            self.checkpoint.as_deref(),
            &self.sets,
        )
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write checkpoint + epoch records.
    Train(RunArgs),
    /// Evaluate a checkpoint: standard and robust accuracy per attack.
    Eval(RunArgs),
    /// Produce one analysis artifact for a checkpoint.
    Analyze {
        /// Which analysis to run.
        #[arg(value_name = "WHICH")]
        which: AnalyzeKind,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Run the randomized property suite over the loss machinery.
    Verify {
        /// Seed for the property suite's RNG.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Test hook: quadratic coefficient under test (the shipped bound
        /// uses 0.25; 0.2 must fail with a counterexample).
        #[arg(long, default_value_t = robustkit::verify::QUAD_COEFF)]
        quad_coeff: f64,
    },
}

/// Builds the global worker pool before any parallel work runs. The default
/// (no env var) keeps rayon's hardware-count sizing.
fn init_thread_pool() -> Result<(), CliError> {
    match std::env::var("ROBUSTKIT_THREADS") {
        Err(std::env::VarError::NotPresent) => Ok(()),
        Err(e) => Err(CliError::Config(format!("ROBUSTKIT_THREADS is not unicode: {e}"))),
        Ok(raw) => {
            let n: usize = raw.parse().map_err(|_| {
                CliError::Config(format!(
                    "ROBUSTKIT_THREADS must be a positive integer, got `{raw}`"
                ))
            })?;
            if n == 0 {
                return Err(CliError::Config(
                    "ROBUSTKIT_THREADS must be a positive integer, got `0`".into(),
                ));
            }
            rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build_global()
                .map_err(|e| CliError::Runtime(format!("cannot build thread pool: {e}")))
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    init_thread_pool()?;
    match cli.command {
        Command::Train(args) => {
            let (config, table) = args.load()?;
            commands::cmd_train(&config, &table)
        }
        Command::Eval(args) => {
            let (config, table) = args.load()?;
            commands::cmd_eval(&config, &table)
        }
        Command::Analyze { which, run: args } => {
            let (config, table) = args.load()?;
            commands::cmd_analyze(&config, &table, which)
        }
        Command::Verify { seed, quad_coeff } => commands::cmd_verify(seed, quad_coeff),
    }
}

fn main() -> ExitCode {
    // Usage errors must follow the same exit-code and stderr contract as
    // config-file errors, so bypass clap's own process::exit.
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if e.use_stderr() => {
            let err = CliError::Config(config::one_line(&e.to_string()));
            eprintln!("error kind={} msg={:?}", err.kind(), err.message());
            return ExitCode::from(err.exit_code());
        }
        Err(e) => {
            // --help / --version output.
            print!("{e}");
            return ExitCode::SUCCESS;
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error kind={} msg={:?}", err.kind(), err.message());
            ExitCode::from(err.exit_code())
        }
    }
}

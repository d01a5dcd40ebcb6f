//! Command-line front end: `train`, `dual-check` and `compare`, each driven by one TOML file.

mod commands;
pub mod config;
pub mod output;

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

pub use config::RunConfig;

/// Output directory override, below `--out` and above `output.dir`.
pub const OUT_ENV: &str = "DMPCRL_OUT";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("cannot use config file {}: {reason}", path.display())]
    ConfigFile { path: PathBuf, reason: String },
    #[error("cannot parse config: {0}")]
    Parse(String),
    #[error("invalid config value `{path}`: {message}")]
    Config { path: String, message: String },
    #[error("{}: {reason}", path.display())]
    Io { path: PathBuf, reason: String },
    #[error("run failed: {0}")]
    Run(String),
}

impl CliError {
    pub fn config(path: &str, message: impl Into<String>) -> Self {
        Self::Config { path: path.to_string(), message: message.into() }
    }

    pub fn io(path: &Path, err: impl std::fmt::Display) -> Self {
        Self::Io { path: path.to_path_buf(), reason: err.to_string() }
    }

    pub fn run(err: impl std::fmt::Display) -> Self {
        Self::Run(err.to_string())
    }

    /// 2 for anything wrong with the configuration, 1 for failures while running.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::ConfigFile { .. } | Self::Parse(_) | Self::Config { .. } => 2,
            Self::Io { .. } | Self::Run(_) => 1,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "dmpcrl", version, about = "Multi-agent Q-learning with distributed MPC policies")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the distributed MPC parameters and log the run.
    Train(CommonArgs),
    /// Distance of ADMM-recovered multipliers from the centralized ones per iteration count.
    DualCheck(CommonArgs),
    /// Closed-loop cost of trained, nominal and scenario-based controllers.
    Compare(CommonArgs),
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Overrides every seed in the config.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads; 1 runs the agents sequentially.
    #[arg(long)]
    pub threads: Option<usize>,
    #[arg(long)]
    pub no_plots: bool,
}

/// Parse arguments, run, report; returns the process exit code.
pub fn main() -> i32 {
    let cli = Cli::parse();
    match run(&cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(command: &Command) -> Result<(), CliError> {
    let args = match command {
        Command::Train(a) | Command::DualCheck(a) | Command::Compare(a) => a,
    };
    let mut config = RunConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        config.override_seed(seed);
    }
    if let Some(threads) = args.threads {
        if threads == 0 {
            return Err(CliError::config("--threads", "must be positive"));
        }
        if threads == 1 {
            config.distributed.execution = config::ExecutionKind::Sequential;
        }
        #[cfg(feature = "parallel")]
        {
            // Fails only if the pool was already built, in which case it stays as is.
            let _ = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global();
        }
    }
    if args.no_plots {
        config.output.plots = false;
    }
    config.output.dir = output_dir(args.out.as_deref(), std::env::var_os(OUT_ENV).map(PathBuf::from), &config.output.dir);
    std::fs::create_dir_all(&config.output.dir).map_err(|e| CliError::io(&config.output.dir, e))?;

    match command {
        Command::Train(_) => commands::train(&config),
        Command::DualCheck(_) => commands::dual_check(&config),
        Command::Compare(_) => commands::compare(&config),
    }
}

fn output_dir(flag: Option<&Path>, env: Option<PathBuf>, config: &Path) -> PathBuf {
    flag.map(Path::to_path_buf).or(env.filter(|p| !p.as_os_str().is_empty())).unwrap_or_else(|| config.to_path_buf())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flag_beats_environment_beats_config() {
        let cfg = Path::new("cfg");
        assert_eq!(output_dir(Some(Path::new("flag")), Some("env".into()), cfg), PathBuf::from("flag"));
        assert_eq!(output_dir(None, Some("env".into()), cfg), PathBuf::from("env"));
        assert_eq!(output_dir(None, Some("".into()), cfg), PathBuf::from("cfg"));
        assert_eq!(output_dir(None, None, cfg), PathBuf::from("cfg"));
    }

    #[test]
    fn config_errors_exit_with_two() {
        assert_eq!(CliError::config("learner.alpha0", "bad").exit_code(), 2);
        assert_eq!(CliError::Parse("x".into()).exit_code(), 2);
        assert_eq!(CliError::Run("x".into()).exit_code(), 1);
    }

    #[test]
    fn defaults_validate() {
        RunConfig::parse("").unwrap();
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(matches!(RunConfig::parse("[learner]\nalpha = 1.0\n"), Err(CliError::Parse(_))));
    }

    #[test]
    fn bad_values_name_their_key() {
        match RunConfig::parse("[learner]\nalpha0 = -1.0\n") {
            Err(CliError::Config { path, .. }) => assert_eq!(path, "learner.alpha0"),
            other => panic!("{other:?}"),
        }
        match RunConfig::parse("[environment]\ninitial_state = [[0.0, 0.0], [0.0, 0.0]]\n") {
            Err(CliError::Config { path, .. }) => assert_eq!(path, "environment.initial_state"),
            other => panic!("{other:?}"),
        }
    }
}

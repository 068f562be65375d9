//! Command-line driver: argument parsing, config resolution, exit codes and
//! the run manifest. Each subcommand lives in [`commands`].

pub mod commands;
pub mod manifest;
pub mod report;

use std::fmt;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use poseidon::config::RunConfig;
use poseidon::Error;

/// Exit codes; 0 is success.
pub mod exit {
    pub const USAGE: i32 = 1;
    pub const IO: i32 = 2;
    pub const CONFIG: i32 = 3;
    pub const NUMERICAL: i32 = 4;
}

/// Worker-count cap read at start-up.
pub const THREADS_ENV: &str = "POSEIDON_THREADS";

#[derive(Debug, Parser)]
#[command(
    name = "poseidon",
    version,
    about = "Physics-informed seismic hazard pipeline"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

/// Flags shared by every subcommand. Flag values override the config file.
#[derive(Debug, Clone, Default, Args)]
pub struct Common {
    /// Run configuration (TOML); defaults apply when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for every random stream; overrides the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Repeat for more detail.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, ValueEnum)]
pub enum Split {
    #[default]
    All,
    Train,
    Validation,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::All => "all",
            Split::Train => "train",
            Split::Validation => "validation",
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Parse and quality-filter a raw catalog into the normalized CSV form.
    Ingest {
        input: PathBuf,
        /// Normalized catalog file.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Generate a synthetic catalog with known physics.
    Synth {
        /// Gutenberg-Richter b of aftershocks.
        #[arg(long)]
        b: Option<f64>,
        /// Omori-Utsu p.
        #[arg(long)]
        p: Option<f64>,
        /// Omori-Utsu c, days.
        #[arg(long)]
        c: Option<f64>,
        #[arg(long)]
        bath_dm: Option<f64>,
        #[arg(long)]
        mainshocks: Option<usize>,
        /// Catalog file; the parentage log is written beside it.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Label triggers and compute their feature vectors.
    Label {
        catalog: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Also write every trigger's context grid.
        #[arg(long)]
        grids: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Two-stage training; synthesizes a catalog when `--data` is absent.
    Train {
        #[arg(long)]
        data: Option<PathBuf>,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Task metrics and energy statistics of a checkpoint on a catalog.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value_t)]
        split: Split,
        /// Report file; the report always goes to stdout.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Reference estimates of b, (p, c) and the Bath gap from a catalog.
    FitPhysics {
        catalog: PathBuf,
        /// Generator parentage table; `<catalog stem>.parents.csv` is used
        /// when present. Without one, aftershocks are attributed by
        /// nearest-neighbour proximity.
        #[arg(long)]
        parents: Option<PathBuf>,
        /// Report file; the report always goes to stdout.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Per-task ROC tables of a checkpoint on a catalog.
    ExportRoc {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value_t)]
        split: Split,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Split a training history into loss, physics and validation tables.
    ExportHistory {
        history: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Ingest { .. } => "ingest",
            Command::Synth { .. } => "synth",
            Command::Label { .. } => "label",
            Command::Train { .. } => "train",
            Command::Eval { .. } => "eval",
            Command::FitPhysics { .. } => "fit-physics",
            Command::ExportRoc { .. } => "export-roc",
            Command::ExportHistory { .. } => "export-history",
        }
    }

    pub fn common(&self) -> &Common {
        match self {
            Command::Ingest { common, .. }
            | Command::Synth { common, .. }
            | Command::Label { common, .. }
            | Command::Train { common, .. }
            | Command::Eval { common, .. }
            | Command::FitPhysics { common, .. }
            | Command::ExportRoc { common, .. }
            | Command::ExportHistory { common, .. } => common,
        }
    }
}

/// A failure with its exit code.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        CliError {
            code: exit::USAGE,
            message: message.into(),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Io { .. } | Error::Parse(_) | Error::Schema { .. } | Error::InvalidInput(_) => {
                exit::IO
            }
            Error::Config(_) => exit::CONFIG,
            Error::Numerical { .. } | Error::Estimation(_) | Error::Shape { .. } => exit::NUMERICAL,
        };
        // Diagnostics are one line.
        let message = e.to_string().replace('\n', " ");
        CliError { code, message }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

/// Loads `--config` (or defaults) and applies `--seed`.
pub fn resolve_config(common: &Common) -> CliResult<RunConfig> {
    let cfg = match &common.config {
        Some(path) => RunConfig::load(path).map_err(|e| match e {
            // A missing config file is an I/O failure, not a bad config.
            io @ Error::Io { .. } => CliError::from(io),
            other => CliError {
                code: exit::CONFIG,
                message: other.to_string().replace('\n', " "),
            },
        })?,
        None => RunConfig::default(),
    };
    Ok(match common.seed {
        Some(seed) => cfg.with_seed(seed),
        None => cfg,
    })
}

/// Worker count from [`THREADS_ENV`]; `None` when unset.
pub fn threads_from_env(value: Option<&str>) -> CliResult<Option<usize>> {
    match value {
        None => Ok(None),
        Some(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(CliError {
                code: exit::CONFIG,
                message: format!("{THREADS_ENV}={v:?} is not a positive integer"),
            }),
        },
    }
}

/// Runs a parsed command; the returned error carries the exit code.
pub fn execute(cli: &Cli) -> CliResult<()> {
    commands::dispatch(&cli.command)
}

/// `dir/stem.suffix` for a file output `dir/stem.ext`.
pub fn sidecar(out: &Path, suffix: &str) -> PathBuf {
    let stem = out
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "out".into());
    out.with_file_name(format!("{stem}.{suffix}"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn error_kinds_map_to_distinct_codes() {
        let io = CliError::from(Error::Parse("x".into()));
        let cfg = CliError::from(Error::Config("x".into()));
        let num = CliError::from(Error::Numerical { layer: "x".into() });
        assert_eq!(
            (io.code, cfg.code, num.code),
            (exit::IO, exit::CONFIG, exit::NUMERICAL)
        );
        let multi = CliError::from(Error::Config("a\nb".into()));
        assert!(!multi.message.contains('\n'));
    }

    #[test]
    fn thread_cap_parsing() {
        assert_eq!(threads_from_env(None).unwrap(), None);
        assert_eq!(threads_from_env(Some("3")).unwrap(), Some(3));
        for bad in ["0", "-2", "many"] {
            assert_eq!(threads_from_env(Some(bad)).unwrap_err().code, exit::CONFIG);
        }
    }

    #[test]
    fn sidecar_replaces_extension() {
        assert_eq!(
            sidecar(Path::new("a/cat.csv"), "manifest.toml"),
            Path::new("a/cat.manifest.toml")
        );
        assert_eq!(
            sidecar(Path::new("cat"), "parents.csv"),
            Path::new("cat.parents.csv")
        );
    }

    #[test]
    fn flags_parse_after_the_subcommand() {
        let cli = Cli::try_parse_from([
            "poseidon",
            "synth",
            "--b",
            "1.0",
            "--mainshocks",
            "20",
            "--seed",
            "7",
            "--out",
            "c.csv",
        ])
        .unwrap();
        assert_eq!(cli.command.name(), "synth");
        assert_eq!(cli.command.common().seed, Some(7));
        assert!(Cli::try_parse_from(["poseidon", "synth", "--bogus"]).is_err());
    }
}

//! The `latteo` command: service roles over TCP, the learning experiments
//! and the registration benchmark.
//!
//! Exit codes: 0 on success, 1 when a protocol step or experiment fails,
//! 2 for usage and configuration errors.

pub mod bench;
pub mod commands;
pub mod config;
pub mod roles;
pub mod sampler;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::bench::BenchError;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("configuration: {0}")]
    Config(String),
    #[error("{0}")]
    Protocol(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Bench(#[from] BenchError),
    #[error(transparent)]
    Learn(#[from] latteo_learn::LearnError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Config(_) => 2,
            CliError::Bench(BenchError::Config(_)) => 2,
            CliError::Learn(latteo_learn::LearnError::Config(_)) => 2,
            _ => 1,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "latteo", version, about = "Attested aggregation service roles, experiments and benchmarks")]
pub struct Cli {
    /// TOML configuration file; `LATTEO_CONFIG` when absent.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a fresh platform secret or user signing key, hex encoded.
    Keygen(KeygenArgs),
    /// Serve packages, attestation and user registration.
    Provider(ServeArgs),
    /// Onboard a coordinator enclave with the provider, then serve aggregators.
    Coordinator(ServeArgs),
    /// Onboard an aggregator enclave, then serve client requests.
    Aggregator(ServeArgs),
    /// Register, fetch the global model and optionally submit local updates.
    Client(ClientArgs),
    /// Train the tiny MLP on synthetic data and report accuracy.
    Train(TrainArgs),
    /// Gradient-inversion attack through the aggregation service; CSV rows.
    Attack(AttackArgs),
    /// Registration latency of implicit attestation against the RA-TLS model; CSV rows.
    Bench(BenchArgs),
    /// Differential test of the real stack against the ideal functionality.
    Oracle(OracleArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum KeyKind {
    Platform,
    User,
}

#[derive(Debug, Args)]
pub struct KeygenArgs {
    pub kind: KeyKind,
    #[arg(long, value_name = "PATH")]
    pub out: PathBuf,
    /// Replace an existing file.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    /// Stop after this many seconds instead of serving until killed.
    #[arg(long, value_name = "SECS")]
    pub serve_secs: Option<u64>,
}

#[derive(Debug, Args)]
pub struct ClientArgs {
    /// Local training rounds to submit after registering.
    #[arg(long, default_value_t = 0)]
    pub rounds: usize,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, value_name = "vanilla|good")]
    pub defense: Option<String>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Checkpoint path.
    #[arg(long, value_name = "PATH")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AttackArgs {
    #[arg(long, value_name = "vanilla|good")]
    pub defense: Option<String>,
    #[arg(long, value_name = "none|tv")]
    pub prior: Option<String>,
    /// Runs seeds `0..N`.
    #[arg(long, value_name = "N")]
    pub seeds: Option<u64>,
    /// CSV path; standard output when absent.
    #[arg(long, value_name = "PATH")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// `dca` or `ratls_sim`; both when absent.
    #[arg(long)]
    pub scheme: Option<String>,
    /// Comma-separated swarm sizes.
    #[arg(long, value_delimiter = ',', value_name = "N,...")]
    pub n_clients: Option<Vec<usize>>,
    #[arg(long, value_name = "loopback|tcp")]
    pub transport: Option<String>,
    #[arg(long)]
    pub latency_ms: Option<f64>,
    #[arg(long)]
    pub timeout_ms: Option<u64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// CSV path; standard output when absent.
    #[arg(long, value_name = "PATH")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct OracleArgs {
    /// Random scripts to run.
    #[arg(long)]
    pub scripts: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Run one script file instead of random ones.
    #[arg(long, value_name = "PATH")]
    pub script: Option<PathBuf>,
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match commands::dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("latteo: {e}");
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn usage_errors_exit_two() {
        assert_eq!(run(["latteo", "bench", "--bogus"]), 2);
        assert_eq!(run(["latteo", "frobnicate"]), 2);
        assert_eq!(run(["latteo"]), 2);
    }

    #[test]
    fn help_and_version_exit_zero() {
        assert_eq!(run(["latteo", "--help"]), 0);
        assert_eq!(run(["latteo", "--version"]), 0);
    }

    #[test]
    fn n_clients_takes_a_list() {
        let cli = Cli::try_parse_from(["latteo", "bench", "--n-clients", "2,50,100"]).unwrap();
        match cli.command {
            Command::Bench(b) => assert_eq!(b.n_clients.unwrap(), [2, 50, 100]),
            c => panic!("{c:?}"),
        }
    }

    #[test]
    fn exit_codes_by_error_kind() {
        assert_eq!(CliError::Config("x".into()).exit_code(), 2);
        assert_eq!(CliError::Protocol("x".into()).exit_code(), 1);
        assert_eq!(CliError::Bench(BenchError::GaveUp(3)).exit_code(), 1);
    }
}

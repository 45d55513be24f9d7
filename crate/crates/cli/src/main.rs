use std::path::PathBuf;
use std::process::ExitCode;

use catp::sim::Mode;
use catp_cli::{run_cli, ModeSelection, RunRequest};
use clap::{Parser, ValueEnum};

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ModeArg {
    #[value(name = "trading")]
    Trading,
    #[value(name = "no_trading")]
    NoTrading,
    #[value(name = "centralized")]
    Centralized,
    #[value(name = "all")]
    All,
}

/// Connectivity-aware distributed trajectory planning simulator.
///
/// Every flag can also be set through an environment variable with the
/// CATP_ prefix, e.g. CATP_MODE=all.
#[derive(Debug, Parser)]
#[command(name = "catp", version)]
struct Args {
    /// Scenario file (TOML).
    #[arg(long, env = "CATP_SCENARIO")]
    scenario: PathBuf,
    /// Directory for trace files; created if missing.
    #[arg(long, env = "CATP_OUT", default_value = "out")]
    out: PathBuf,
    #[arg(long, value_enum, env = "CATP_MODE", default_value = "trading")]
    mode: ModeArg,
    /// Overrides the scenario seed.
    #[arg(long, env = "CATP_SEED")]
    seed: Option<u64>,
    /// Overrides the scenario cycle limit.
    #[arg(long, env = "CATP_MAX_CYCLES")]
    max_cycles: Option<usize>,
    /// Suppress the summary.
    #[arg(long, env = "CATP_QUIET")]
    quiet: bool,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("CATP_LOG", "warn")).init();
    let args = Args::parse();
    let mode = match args.mode {
        ModeArg::Trading => ModeSelection::One(Mode::Trading),
        ModeArg::NoTrading => ModeSelection::One(Mode::NoTrading),
        ModeArg::Centralized => ModeSelection::One(Mode::Centralized),
        ModeArg::All => ModeSelection::All,
    };
    let request = RunRequest {
        scenario: args.scenario,
        out: args.out,
        mode,
        seed: args.seed,
        max_cycles: args.max_cycles,
        quiet: args.quiet,
    };
    ExitCode::from(run_cli(&request) as u8)
}

//! Command-line front end: load a scenario, run one or all modes, write the
//! traces and print a summary.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use catp::scenario::parse_scenario;
use catp::sim::{run, MetricsLog, Mode};
use catp::{Error, ScenarioConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModeSelection {
    One(Mode),
    All,
}

impl ModeSelection {
    pub fn modes(&self) -> Vec<Mode> {
        match self {
            ModeSelection::One(m) => vec![*m],
            ModeSelection::All => Mode::ALL.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunRequest {
    pub scenario: PathBuf,
    pub out: PathBuf,
    pub mode: ModeSelection,
    pub seed: Option<u64>,
    pub max_cycles: Option<usize>,
    pub quiet: bool,
}

pub const EXIT_CLEAN: i32 = 0;
pub const EXIT_VIOLATIONS: i32 = 1;
pub const EXIT_FATAL: i32 = 2;

fn report(err: &Error) {
    match err {
        Error::InvalidScenario(fields) => {
            eprintln!("error: invalid scenario");
            for f in fields {
                eprintln!("  {f}");
            }
        }
        other => eprintln!("error: {other}"),
    }
}

/// Loads the scenario and applies command-line overrides.
pub fn load(request: &RunRequest) -> catp::Result<ScenarioConfig> {
    let mut config = parse_scenario(&request.scenario)?;
    if let Some(seed) = request.seed {
        config.seed = seed;
    }
    if let Some(c) = request.max_cycles {
        config.max_cycles = c;
    }
    config.validate()?;
    Ok(config)
}

/// Runs the request and returns the process exit code.
pub fn run_cli(request: &RunRequest) -> i32 {
    let config = match load(request) {
        Ok(c) => c,
        Err(e) => {
            report(&e);
            return EXIT_FATAL;
        }
    };
    let modes = request.mode.modes();
    let mut logs = Vec::with_capacity(modes.len());
    for mode in &modes {
        log::info!("running {} in {} mode", config.name, mode.as_str());
        match run(&config, *mode) {
            Ok(l) => logs.push((*mode, l)),
            Err(e) => {
                report(&e);
                return EXIT_FATAL;
            }
        }
    }
    for (mode, l) in &logs {
        let dir = match request.mode {
            ModeSelection::All => request.out.join(mode.as_str()),
            ModeSelection::One(_) => request.out.clone(),
        };
        if let Err(e) = l.write_dir(&dir) {
            report(&e);
            return EXIT_FATAL;
        }
    }
    if !request.quiet {
        print!("{}", summary(&config, &logs, &request.out));
    }
    if logs.iter().any(|(_, l)| l.violation_count() > 0) {
        EXIT_VIOLATIONS
    } else {
        EXIT_CLEAN
    }
}

/// Minimum, median, mean and maximum of a step-count list.
pub fn step_stats(steps: &[u64]) -> Option<(u64, f64, f64, u64)> {
    if steps.is_empty() {
        return None;
    }
    let mut s = steps.to_vec();
    s.sort_unstable();
    let n = s.len();
    let median = if n % 2 == 1 {
        s[n / 2] as f64
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2]) as f64
    };
    let mean = s.iter().sum::<u64>() as f64 / n as f64;
    Some((s[0], median, mean, s[n - 1]))
}

pub fn summary(config: &ScenarioConfig, logs: &[(Mode, MetricsLog)], out: &Path) -> String {
    let mut s = String::new();
    writeln!(
        s,
        "scenario {} ({} robots), traces in {}",
        config.name,
        config.n_robots(),
        out.display()
    )
    .unwrap();
    writeln!(
        s,
        "{:<12} {:>6} {:>7} {:>5} {:>7} {:>7} {:>5} {:>14} {:>5} {:>5}",
        "mode", "cycles", "steps", "min", "median", "mean", "max", "total_cost", "viol", "goals"
    )
    .unwrap();
    for (mode, l) in logs {
        let total: f64 = l
            .costs
            .iter()
            .filter(|c| c.mode == mode.as_str())
            .map(|c| c.objective)
            .sum();
        let (mn, med, mean, mx) = step_stats(&l.steps_per_cycle()).unwrap_or((0, 0.0, 0.0, 0));
        writeln!(
            s,
            "{:<12} {:>6} {:>7} {:>5} {:>7.1} {:>7.2} {:>5} {:>14.6e} {:>5} {:>5}",
            mode.as_str(),
            l.cycles.len(),
            l.total_steps(),
            mn,
            med,
            mean,
            mx,
            total,
            l.violation_count(),
            if l.goals_reached { "yes" } else { "no" }
        )
        .unwrap();
    }
    for (mode, l) in logs {
        if *mode == Mode::Trading {
            let nets: Vec<String> = l
                .cumulative_trades
                .iter()
                .enumerate()
                .map(|(i, t)| format!("{i}:{t:+.4}"))
                .collect();
            writeln!(s, "cumulative net trading per robot: {}", nets.join(" ")).unwrap();
        }
    }
    s
}

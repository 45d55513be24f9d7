//! Run log and its CSV serialisation.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::DVector;

use crate::agent::FinalReport;
use crate::error::Result;

#[derive(Debug, Clone, PartialEq)]
pub struct PositionRecord {
    pub step: u64,
    pub robot: usize,
    pub position: Vec<f64>,
    pub reference: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FiedlerRecord {
    pub step: u64,
    pub truth: f64,
    /// Extremes of the robots' latest estimates; NaN before the first plan.
    pub est_min: f64,
    pub est_max: f64,
    pub min_distance: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TradeRecord {
    pub cycle: usize,
    pub robot: usize,
    pub neighbor: usize,
    pub t: f64,
    pub mu: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CostRecord {
    pub cycle: usize,
    pub mode: String,
    pub objective: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EventRecord {
    pub step: u64,
    pub kind: String,
    pub detail: String,
    pub violation: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundRecord {
    pub step: u64,
    pub cycle: usize,
    pub robot: usize,
    pub round: usize,
    pub objective: f64,
    pub net_trade: f64,
    pub multiplier_norm: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CycleRecord {
    pub cycle: usize,
    pub start_step: u64,
    pub plan_step: u64,
    /// Steps from the start of estimation to the end of the movement phase.
    pub steps: u64,
    pub lambda_true: f64,
    pub objective: f64,
    /// Per-robot `sum_j t_ij / share`; zero where the share is zero.
    pub trading_percent: Vec<f64>,
}

/// Everything one planning boundary decided, kept for offline checks.
#[derive(Debug, Clone, PartialEq)]
pub struct PlanningRecord {
    pub cycle: usize,
    pub step: u64,
    pub positions: Vec<DVector<f64>>,
    pub lambda_true: f64,
    /// One report per robot, in robot order. Empty in centralised mode.
    pub reports: Vec<FinalReport>,
    /// Applied first inputs, one per robot.
    pub inputs: Vec<DVector<f64>>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricsLog {
    pub mode: String,
    pub dimension: usize,
    pub positions: Vec<PositionRecord>,
    pub fiedler: Vec<FiedlerRecord>,
    pub trades: Vec<TradeRecord>,
    pub costs: Vec<CostRecord>,
    pub events: Vec<EventRecord>,
    pub rounds: Vec<RoundRecord>,
    pub cycles: Vec<CycleRecord>,
    pub plans: Vec<PlanningRecord>,
    /// Per-robot sum of agreed trades over all cycles.
    pub cumulative_trades: Vec<f64>,
    /// Whether every inspection robot finished within tolerance.
    pub goals_reached: bool,
}

pub(crate) fn fmt_f(x: f64) -> String {
    format!("{x:.16e}")
}

fn axis_names(dim: usize) -> Vec<String> {
    match dim {
        1 => vec!["x".into()],
        2 => vec!["x".into(), "y".into()],
        3 => vec!["x".into(), "y".into(), "z".into()],
        _ => (0..dim).map(|r| format!("x{r}")).collect(),
    }
}

fn escape(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

impl MetricsLog {
    pub fn violations(&self) -> impl Iterator<Item = &EventRecord> {
        self.events.iter().filter(|e| e.violation)
    }

    pub fn violation_count(&self) -> usize {
        self.violations().count()
    }

    pub fn steps_per_cycle(&self) -> Vec<u64> {
        self.cycles.iter().map(|c| c.steps).collect()
    }

    pub fn total_steps(&self) -> u64 {
        self.fiedler.last().map(|f| f.step + 1).unwrap_or(0)
    }

    pub fn positions_csv(&self) -> String {
        let axes = axis_names(self.dimension);
        let mut s = String::from("step,robot");
        for a in &axes {
            write!(s, ",{a}").unwrap();
        }
        for a in &axes {
            write!(s, ",ref_{a}").unwrap();
        }
        s.push('\n');
        for r in &self.positions {
            write!(s, "{},{}", r.step, r.robot).unwrap();
            for x in r.position.iter().chain(&r.reference) {
                write!(s, ",{}", fmt_f(*x)).unwrap();
            }
            s.push('\n');
        }
        s
    }

    pub fn fiedler_csv(&self) -> String {
        let mut s = String::from("step,true,est_min,est_max\n");
        for r in &self.fiedler {
            writeln!(
                s,
                "{},{},{},{}",
                r.step,
                fmt_f(r.truth),
                fmt_f(r.est_min),
                fmt_f(r.est_max)
            )
            .unwrap();
        }
        s
    }

    pub fn trades_csv(&self) -> String {
        let mut s = String::from("cycle,robot,neighbor,t,mu\n");
        for r in &self.trades {
            writeln!(
                s,
                "{},{},{},{},{}",
                r.cycle,
                r.robot,
                r.neighbor,
                fmt_f(r.t),
                fmt_f(r.mu)
            )
            .unwrap();
        }
        s
    }

    pub fn cost_csv(&self) -> String {
        let mut s = String::from("cycle,mode,objective\n");
        for r in &self.costs {
            writeln!(s, "{},{},{}", r.cycle, r.mode, fmt_f(r.objective)).unwrap();
        }
        s
    }

    pub fn events_csv(&self) -> String {
        let mut s = String::from("step,kind,detail\n");
        for r in &self.events {
            writeln!(s, "{},{},{}", r.step, r.kind, escape(&r.detail)).unwrap();
        }
        s
    }

    pub fn cycles_csv(&self) -> String {
        let mut s = String::from("cycle,start_step,plan_step,steps,lambda_true,objective\n");
        for r in &self.cycles {
            writeln!(
                s,
                "{},{},{},{},{},{}",
                r.cycle,
                r.start_step,
                r.plan_step,
                r.steps,
                fmt_f(r.lambda_true),
                fmt_f(r.objective)
            )
            .unwrap();
        }
        s
    }

    pub fn rounds_csv(&self) -> String {
        let mut s = String::from("step,cycle,robot,round,objective,net_trade,multiplier_norm\n");
        for r in &self.rounds {
            writeln!(
                s,
                "{},{},{},{},{},{},{}",
                r.step,
                r.cycle,
                r.robot,
                r.round,
                fmt_f(r.objective),
                fmt_f(r.net_trade),
                fmt_f(r.multiplier_norm)
            )
            .unwrap();
        }
        s
    }

    /// File name and contents of every trace, in a fixed order.
    pub fn trace_files(&self) -> Vec<(&'static str, String)> {
        vec![
            ("positions.csv", self.positions_csv()),
            ("fiedler.csv", self.fiedler_csv()),
            ("trades.csv", self.trades_csv()),
            ("cost.csv", self.cost_csv()),
            ("events.csv", self.events_csv()),
            ("cycles.csv", self.cycles_csv()),
            ("rounds.csv", self.rounds_csv()),
        ]
    }

    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        for (name, body) in self.trace_files() {
            fs::write(dir.join(name), body)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seventeen_significant_digits() {
        assert_eq!(fmt_f(0.1), "1.0000000000000001e-1");
        assert_eq!(fmt_f(0.1).parse::<f64>().unwrap(), 0.1);
        assert_eq!(fmt_f(-2.5), "-2.5000000000000000e0");
    }

    #[test]
    fn headers_fixed() {
        let log = MetricsLog {
            dimension: 2,
            ..Default::default()
        };
        assert_eq!(log.positions_csv(), "step,robot,x,y,ref_x,ref_y\n");
        assert_eq!(log.fiedler_csv(), "step,true,est_min,est_max\n");
        assert_eq!(log.trades_csv(), "cycle,robot,neighbor,t,mu\n");
        assert_eq!(log.cost_csv(), "cycle,mode,objective\n");
        assert_eq!(log.events_csv(), "step,kind,detail\n");
    }

    #[test]
    fn detail_quoted() {
        assert_eq!(escape("a=1 b=2"), "a=1 b=2");
        assert_eq!(escape("a,b"), "\"a,b\"");
    }
}

//! Synchronous world: steps every robot once per step, delivers neighbour
//! messages one step later and records traces.

mod metrics;
mod oracle;

use std::str::FromStr;

use nalgebra::DVector;

pub use metrics::{
    CostRecord, CycleRecord, EventRecord, FiedlerRecord, MetricsLog, PlanningRecord,
    PositionRecord, RoundRecord, TradeRecord,
};
pub use oracle::{centralized_oracle, oracle_problem, OracleSnapshot, OracleSolution};

use crate::agent::{
    clamp_toward, AgentConfig, AgentEvent, AgentPhase, FinalReport, LocalView, RobotAgent,
    RELAX_SLACK,
};
use crate::error::{Error, Result};
use crate::graph::{fiedler, WeightedGraph};
use crate::link::{edge_set, EdgeSet, LinkParams, RobotBody};
use crate::message::{MessageEnvelope, Payload};
use crate::qp::{solve, CostRole, SolveStatus};
use crate::scenario::ScenarioConfig;

/// Slack allowed on clearance checks for the solver's feasibility tolerance.
pub const CLEARANCE_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Mode {
    Trading,
    NoTrading,
    Centralized,
}

impl Mode {
    pub const ALL: [Mode; 3] = [Mode::Trading, Mode::NoTrading, Mode::Centralized];

    pub fn as_str(&self) -> &'static str {
        match self {
            Mode::Trading => "trading",
            Mode::NoTrading => "no_trading",
            Mode::Centralized => "centralized",
        }
    }
}

impl FromStr for Mode {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Mode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| format!("unknown mode {s:?}"))
    }
}

/// True Fiedler value (NaN for a lone robot) and minimum centre distance
/// (infinite for fewer than two robots).
pub fn ground_truth_metrics(bodies: &[RobotBody], link: &LinkParams) -> Result<(f64, f64)> {
    let lambda = if bodies.len() < 2 {
        f64::NAN
    } else {
        fiedler(&WeightedGraph::from_bodies(bodies, link))?.value
    };
    let mut min_d = f64::INFINITY;
    for (a, bi) in bodies.iter().enumerate() {
        for bj in &bodies[a + 1..] {
            min_d = min_d.min((&bi.position - &bj.position).norm());
        }
    }
    Ok((lambda, min_d))
}

/// Checks envelopes sent at `step` against the edges at send time and
/// returns the inbox each robot reads at `step + 1`, senders ascending.
pub fn deliver(
    messages: &[MessageEnvelope],
    edges: &EdgeSet,
    step: u64,
) -> Result<Vec<Vec<(usize, Payload)>>> {
    let n = edges.n_robots();
    let mut inboxes: Vec<Vec<(usize, Payload)>> = vec![Vec::new(); n];
    for m in messages {
        if m.step != step || m.receiver >= n || !edges.contains(m.sender, m.receiver) {
            return Err(Error::ProtocolViolation {
                sender: m.sender,
                receiver: m.receiver,
                step: m.step,
            });
        }
        inboxes[m.receiver].push((m.sender, m.payload()?));
    }
    for inbox in &mut inboxes {
        inbox.sort_by_key(|(s, _)| *s);
    }
    Ok(inboxes)
}

/// Runs a scenario to completion in the given mode.
pub fn run(config: &ScenarioConfig, mode: Mode) -> Result<MetricsLog> {
    config.validate()?;
    let mut world = World::new(config, mode);
    match mode {
        Mode::Trading | Mode::NoTrading => world.run_distributed()?,
        Mode::Centralized => world.run_centralized()?,
    }
    Ok(world.log)
}

struct World<'a> {
    config: &'a ScenarioConfig,
    mode: Mode,
    agents: Vec<RobotAgent>,
    log: MetricsLog,
    cycle: usize,
    /// Latest planning-time Fiedler estimates, per robot (centralised mode
    /// shares the true value).
    lambda_hat: Vec<f64>,
}

impl<'a> World<'a> {
    fn new(config: &'a ScenarioConfig, mode: Mode) -> Self {
        let n = config.n_robots();
        let agents = config
            .initial_bodies()
            .into_iter()
            .map(|b| {
                let cfg = AgentConfig {
                    id: b.id,
                    n_robots: n,
                    radius: b.radius,
                    cost: config.cost_spec(b.id),
                    lambda_lb: config.lambda_lb,
                    planning_margin: config.planning_margin,
                    move_steps: config.move_steps,
                    epsilon: config.epsilon,
                    link: config.link,
                    horizon: config.horizon,
                    dual: config.dual_ascent,
                    estimation: config.estimation,
                    trading: mode == Mode::Trading,
                };
                RobotAgent::new(cfg, b.position)
            })
            .collect();
        Self {
            config,
            mode,
            agents,
            log: MetricsLog {
                mode: mode.as_str().to_string(),
                dimension: config.dimension,
                cumulative_trades: vec![0.0; n],
                ..Default::default()
            },
            cycle: 0,
            lambda_hat: vec![f64::NAN; n],
        }
    }

    fn bodies(&self) -> Vec<RobotBody> {
        self.agents.iter().map(|a| a.body()).collect()
    }

    fn step_limit(&self) -> u64 {
        let n = self.config.n_robots() as u64;
        let per_cycle = self.config.move_steps as u64
            + 2 * (self.config.dual_ascent.max_rounds as u64 + 4 * n + 4);
        self.config.max_cycles as u64 * per_cycle + 16
    }

    fn views(&self, bodies: &[RobotBody], edges: &EdgeSet) -> Vec<LocalView> {
        let range = self.config.collision_range();
        (0..bodies.len())
            .map(|i| {
                let mut view = LocalView::default();
                for (j, b) in bodies.iter().enumerate() {
                    if j == i {
                        continue;
                    }
                    if edges.contains(i, j) {
                        view.neighbors.push(b.clone());
                    } else if (&b.position - &bodies[i].position).norm() <= range {
                        view.nearby.push(b.clone());
                    }
                }
                view
            })
            .collect()
    }

    fn event(&mut self, step: u64, kind: &str, detail: String, violation: bool) {
        if violation {
            log::warn!("step {step}: {kind} {detail}");
        } else {
            log::info!("step {step}: {kind} {detail}");
        }
        self.log.events.push(EventRecord {
            step,
            kind: kind.to_string(),
            detail,
            violation,
        });
    }

    fn agent_event(&mut self, step: u64, robot: usize, e: &AgentEvent) {
        self.event(
            step,
            e.kind(),
            format!("robot={robot} {}", e.detail()),
            e.is_violation(),
        );
    }

    fn record_step(&mut self, step: u64) -> Result<()> {
        let bodies = self.bodies();
        for (i, a) in self.agents.iter().enumerate() {
            self.log.positions.push(PositionRecord {
                step,
                robot: i,
                position: a.position.iter().copied().collect(),
                reference: a.reference.iter().copied().collect(),
            });
        }
        let (truth, min_distance) = ground_truth_metrics(&bodies, &self.config.link)?;
        let est = self.lambda_hat.iter().copied().filter(|x| !x.is_nan());
        let (est_min, est_max) =
            est.fold((f64::NAN, f64::NAN), |(lo, hi), x| (lo.min(x), hi.max(x)));
        self.log.fiedler.push(FiedlerRecord {
            step,
            truth,
            est_min,
            est_max,
            min_distance,
        });
        for (a, bi) in bodies.iter().enumerate() {
            for bj in &bodies[a + 1..] {
                let d = (&bi.position - &bj.position).norm();
                if d < bi.radius + bj.radius {
                    self.event(
                        step,
                        "collision",
                        format!("robots={},{} distance={d:.17e}", bi.id, bj.id),
                        true,
                    );
                }
            }
        }
        Ok(())
    }

    /// Clearance of the new references, the waypoints robots move to.
    fn check_waypoints(&mut self, step: u64) {
        let eps = self.config.epsilon;
        let mut breaches = Vec::new();
        for (a, ai) in self.agents.iter().enumerate() {
            for aj in &self.agents[a + 1..] {
                let d = (&ai.reference - &aj.reference).norm();
                let need = ai.config.radius + aj.config.radius + eps;
                if d < need - CLEARANCE_TOL {
                    breaches.push(format!(
                        "robots={},{} distance={d:.17e} required={need:.17e}",
                        ai.id(),
                        aj.id()
                    ));
                }
            }
        }
        for b in breaches {
            self.event(step, "clearance", b, true);
        }
    }

    fn goals_reached(&self) -> bool {
        self.agents.iter().all(|a| match &a.config.cost.role {
            CostRole::Inspection { poi } => {
                (&a.position - poi).norm() <= self.config.goal_tolerance
            }
            CostRole::Support => true,
        })
    }

    fn close_cycle(&mut self, record: CycleRecord) -> bool {
        self.log.cycles.push(record);
        self.cycle += 1;
        let done = self.goals_reached();
        self.log.goals_reached = done;
        done || self.cycle >= self.config.max_cycles
    }

    fn run_distributed(&mut self) -> Result<()> {
        let n = self.agents.len();
        for a in &mut self.agents {
            a.start_estimation();
        }
        let limit = self.step_limit();
        let mut inboxes: Vec<Vec<(usize, Payload)>> = vec![Vec::new(); n];
        let mut cycle_start = 0u64;
        let mut pending: Option<CycleRecord> = None;

        for k in 0.. {
            if k > limit {
                return Err(Error::NumericalFailure(format!(
                    "no cycle completed within {limit} steps"
                )));
            }
            let bodies = self.bodies();
            let edges = edge_set(&bodies, &self.config.link);
            let views = self.views(&bodies, &edges);
            let mut sent = Vec::new();
            let mut finals = Vec::new();
            for i in 0..n {
                let out = self.agents[i].step(k, &views[i], &inboxes[i])?;
                for (to, payload) in &out.outbox {
                    sent.push(MessageEnvelope::new(i, *to, k, payload));
                }
                for e in &out.events {
                    self.agent_event(k, i, e);
                }
                if let Some(plan) = &out.plan {
                    self.lambda_hat[i] = plan.lambda_hat;
                }
                if let Some(r) = out.round {
                    self.log.rounds.push(RoundRecord {
                        step: k,
                        cycle: self.cycle,
                        robot: i,
                        round: r.round,
                        objective: r.objective,
                        net_trade: r.trades.iter().map(|(_, t)| t).sum(),
                        multiplier_norm: r.multiplier_norm,
                    });
                }
                if let Some(f) = out.finalized {
                    finals.push(f);
                }
            }
            inboxes = deliver(&sent, &edges, k)?;

            if !finals.is_empty() {
                if finals.len() != n {
                    return Err(Error::NumericalFailure(format!(
                        "only {} of {n} robots finalised at step {k}",
                        finals.len()
                    )));
                }
                pending = Some(self.record_plan(k, &bodies, finals)?);
            }
            self.record_step(k)?;

            // Without a connected graph the switch protocol can never fire.
            let now = self.bodies();
            if !edge_set(&now, &self.config.link).is_connected() {
                self.event(k, "disconnected", "communication graph split".into(), true);
                if let Some(mut rec) = pending.take() {
                    rec.start_step = cycle_start;
                    rec.steps = k + 1 - cycle_start;
                    self.close_cycle(rec);
                }
                break;
            }

            let moved_on = self
                .agents
                .iter()
                .all(|a| a.phase == AgentPhase::EstimateAdjacency);
            if moved_on {
                if let Some(mut rec) = pending.take() {
                    rec.start_step = cycle_start;
                    rec.steps = k + 1 - cycle_start;
                    cycle_start = k + 1;
                    if self.close_cycle(rec) {
                        break;
                    }
                }
            }
        }
        Ok(())
    }

    fn record_plan(
        &mut self,
        k: u64,
        bodies: &[RobotBody],
        finals: Vec<FinalReport>,
    ) -> Result<CycleRecord> {
        let (lambda_true, _) = ground_truth_metrics(bodies, &self.config.link)?;
        let mut objective = 0.0;
        let mut trading_percent = Vec::with_capacity(finals.len());
        for f in &finals {
            objective += f.solution.objective;
            let net: f64 = f.trades.iter().map(|(_, t)| t).sum();
            self.log.cumulative_trades[f.robot] += net;
            trading_percent.push(if f.share > 0.0 { net / f.share } else { 0.0 });
            for (j, (nb, t)) in f.trades.iter().enumerate() {
                self.log.trades.push(TradeRecord {
                    cycle: self.cycle,
                    robot: f.robot,
                    neighbor: *nb,
                    t: *t,
                    mu: f.multipliers.get(j).copied().unwrap_or(0.0),
                });
            }
        }
        self.log.costs.push(CostRecord {
            cycle: self.cycle,
            mode: self.mode.as_str().to_string(),
            objective,
        });
        if self.mode == Mode::Trading {
            let mut without = 0.0;
            for a in &self.agents {
                without += a.objective_without_trades()?.unwrap_or(f64::NAN);
            }
            self.log.costs.push(CostRecord {
                cycle: self.cycle,
                mode: "no_trading_counterfactual".to_string(),
                objective: without,
            });
        }
        self.check_waypoints(k);
        self.log.plans.push(PlanningRecord {
            cycle: self.cycle,
            step: k,
            positions: bodies.iter().map(|b| b.position.clone()).collect(),
            lambda_true,
            inputs: finals.iter().map(|f| f.applied.clone()).collect(),
            reports: finals,
        });
        Ok(CycleRecord {
            cycle: self.cycle,
            start_step: 0,
            plan_step: k,
            steps: 0,
            lambda_true,
            objective,
            trading_percent,
        })
    }

    fn run_centralized(&mut self) -> Result<()> {
        let u_max = self.config.horizon.u_max;
        let mut k = 0u64;
        loop {
            let start = k;
            let bodies = self.bodies();
            let snapshot = OracleSnapshot::from_truth(self.config, bodies.clone())?;
            if bodies.len() >= 2 && snapshot.lambda < self.config.lambda_lb {
                let e = AgentEvent::LambdaBelowBound {
                    lambda_hat: snapshot.lambda,
                    lower_bound: self.config.lambda_lb,
                };
                self.event(k, e.kind(), e.detail(), true);
            }
            let (inputs, objective) = self.plan_centralized(k, &snapshot)?;
            for (a, u) in self.agents.iter_mut().zip(&inputs) {
                a.reference = &a.position + u;
            }
            self.lambda_hat.fill(snapshot.lambda);
            self.log.costs.push(CostRecord {
                cycle: self.cycle,
                mode: self.mode.as_str().to_string(),
                objective,
            });
            self.check_waypoints(k);
            self.log.plans.push(PlanningRecord {
                cycle: self.cycle,
                step: k,
                positions: bodies.iter().map(|b| b.position.clone()).collect(),
                lambda_true: snapshot.lambda,
                reports: Vec::new(),
                inputs,
            });
            self.record_step(k)?;
            k += 1;
            for _ in 0..self.config.move_steps {
                for a in &mut self.agents {
                    a.position = clamp_toward(&a.position, &a.reference, u_max);
                }
                self.record_step(k)?;
                k += 1;
            }
            let rec = CycleRecord {
                cycle: self.cycle,
                start_step: start,
                plan_step: start,
                steps: k - start,
                lambda_true: snapshot.lambda,
                objective,
                trading_percent: vec![0.0; self.agents.len()],
            };
            if self.close_cycle(rec) {
                break;
            }
        }
        Ok(())
    }

    /// Oracle solve with the same fallback chain as the robots' final solve.
    fn plan_centralized(
        &mut self,
        k: u64,
        snapshot: &OracleSnapshot,
    ) -> Result<(Vec<DVector<f64>>, f64)> {
        let dim = self.config.dimension;
        let u_max = self.config.horizon.u_max;
        let sol = centralized_oracle(self.config, snapshot)?;
        let (inputs, objective) = if sol.status == SolveStatus::Optimal {
            (sol.first_inputs(dim), sol.objective)
        } else {
            let costs: Vec<_> = (0..self.agents.len())
                .map(|i| self.config.cost_spec(i))
                .collect();
            let qp = oracle_problem(
                &costs,
                snapshot,
                self.config.lambda_lb + self.config.planning_margin,
                self.config.epsilon,
                &self.config.horizon,
            )?;
            let rows = if self.agents.len() >= 2 {
                self.config.horizon.steps
            } else {
                0
            };
            let nu = dim * self.config.horizon.steps;
            let relaxed = match qp.min_relaxation(rows)? {
                Some(by) => {
                    let by = by + RELAX_SLACK;
                    let r = solve(&qp.relaxed(rows, by))?;
                    (r.status == SolveStatus::Optimal).then_some((r, by))
                }
                None => None,
            };
            match relaxed {
                Some((r, by)) => {
                    let e = AgentEvent::FinalFallback {
                        stage: 1,
                        relaxation: by,
                    };
                    self.event(k, e.kind(), format!("centralized {}", e.detail()), false);
                    let firsts = (0..self.agents.len())
                        .map(|i| r.x.rows(i * nu, dim).into_owned())
                        .collect();
                    (firsts, r.objective)
                }
                None => {
                    let e = AgentEvent::FinalFallback {
                        stage: 2,
                        relaxation: f64::INFINITY,
                    };
                    self.event(k, e.kind(), format!("centralized {}", e.detail()), false);
                    let zero = DVector::zeros(qp.n_vars());
                    (
                        vec![DVector::zeros(dim); self.agents.len()],
                        qp.objective(&zero),
                    )
                }
            }
        };
        let clamped = inputs
            .into_iter()
            .map(|u| u.map(|x| x.clamp(-u_max, u_max)))
            .collect();
        Ok((clamped, objective))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::consensus::ConvergenceState;

    fn body(id: usize, x: f64) -> RobotBody {
        RobotBody::new(id, DVector::from_vec(vec![x, 0.0]), 0.1)
    }

    #[test]
    fn truth_metrics() {
        let link = LinkParams::new(3.0, 2.0, 0.05);
        let (l, d) = ground_truth_metrics(&[body(0, 0.0), body(1, 100.0)], &link).unwrap();
        assert_eq!(l, 0.0);
        assert_eq!(d, 100.0);
        let (_, d) = ground_truth_metrics(&[body(0, 0.0), body(1, 1.5)], &link).unwrap();
        assert_eq!(d, 1.5);
    }

    #[test]
    fn delivery_rules() {
        let edges = EdgeSet::from_pairs(3, [(0, 1)]);
        let p = Payload::Trade {
            trade: 0.25,
            convergence: ConvergenceState::new(0, 3),
        };
        let q = Payload::Trade {
            trade: -0.25,
            convergence: ConvergenceState::new(1, 3),
        };
        let msgs = [
            MessageEnvelope::new(0, 1, 4, &p),
            MessageEnvelope::new(1, 0, 4, &q),
        ];
        let inbox = deliver(&msgs, &edges, 4).unwrap();
        assert_eq!(inbox[1].len(), 1);
        assert_eq!(inbox[0][0].0, 1);
        assert_eq!(inbox[0][0].1, q);
        assert!(inbox[2].is_empty());

        let bad = [MessageEnvelope::new(0, 2, 4, &p)];
        assert!(matches!(
            deliver(&bad, &edges, 4),
            Err(Error::ProtocolViolation {
                sender: 0,
                receiver: 2,
                step: 4
            })
        ));
    }

    #[test]
    fn mode_names() {
        for m in Mode::ALL {
            assert_eq!(m.as_str().parse::<Mode>().unwrap(), m);
        }
        assert!("both".parse::<Mode>().is_err());
    }
}

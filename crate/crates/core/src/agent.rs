//! Per-robot state machine: move toward the reference, estimate the
//! adjacency matrix, run dual ascent on the budget trades, then average the
//! trades, solve once more without trading and set the next reference.
//!
//! Robots are halted while estimating and optimising; each protocol round is
//! one simulation step and exchanges one message per neighbour.

use nalgebra::DVector;

use crate::consensus::{
    adjacency_converged, convergence_step, estimate_fiedler, local_adjacency_observe,
    max_consensus_merge, phase_reset, should_switch, AdjacencyEstimate, ConvergenceState,
    EstimationParams,
};
use crate::error::Result;
use crate::graph::fiedler_gradient_with;
use crate::horizon::{
    budget_constraint, stack_collision, BudgetConstraint, CollisionConstraint, HorizonParams,
};
use crate::link::{EdgeSet, LinkParams, RobotBody};
use crate::message::Payload;
use crate::qp::{
    build_final_problem, build_local_problem, solve, CostSpec, DualAscentParams, LocalSolution,
    SolveStatus,
};

/// Added on top of the smallest feasible relaxation so the relaxed program
/// is strictly feasible for the solver.
pub const RELAX_SLACK: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AgentPhase {
    MoveToReference,
    EstimateAdjacency,
    Optimize,
    Finalize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgentConfig {
    pub id: usize,
    pub n_robots: usize,
    pub radius: f64,
    pub cost: CostSpec,
    /// Lower bound the Fiedler value must stay above.
    pub lambda_lb: f64,
    /// Extra slack kept above `lambda_lb` when sizing budgets, absorbing the
    /// error of the first-order prediction.
    pub planning_margin: f64,
    /// Steps spent moving toward the reference each cycle.
    pub move_steps: usize,
    /// Minimum clearance between robot surfaces.
    pub epsilon: f64,
    pub link: LinkParams,
    pub horizon: HorizonParams,
    pub dual: DualAscentParams,
    pub estimation: EstimationParams,
    /// When false, robots skip dual ascent and plan on equal budget shares.
    pub trading: bool,
}

/// What a robot senses about its surroundings at a step.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LocalView {
    /// Communication neighbours, ascending id.
    pub neighbors: Vec<RobotBody>,
    /// Non-neighbours close enough to be added to the collision rows.
    pub nearby: Vec<RobotBody>,
}

impl LocalView {
    pub fn neighbor_ids(&self) -> Vec<usize> {
        self.neighbors.iter().map(|b| b.id).collect()
    }
}

/// Quantities frozen at the start of an optimisation period.
#[derive(Debug, Clone, PartialEq)]
pub struct PlanningSnapshot {
    pub neighbors: Vec<usize>,
    /// Estimated Fiedler value (NaN for a lone robot).
    pub lambda_hat: f64,
    pub gradient: DVector<f64>,
    pub budget: BudgetConstraint,
    pub collision: CollisionConstraint,
}

/// Dual-ascent state. All vectors are indexed like `PlanningSnapshot::neighbors`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TradingState {
    pub trades: DVector<f64>,
    pub multipliers: DVector<f64>,
    pub neighbor_trades_prev: DVector<f64>,
}

impl TradingState {
    pub fn zeros(k: usize) -> Self {
        Self {
            trades: DVector::zeros(k),
            multipliers: DVector::zeros(k),
            neighbor_trades_prev: DVector::zeros(k),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum AgentEvent {
    /// Planning started with an estimate already below the lower bound.
    LambdaBelowBound { lambda_hat: f64, lower_bound: f64 },
    /// The estimated Fiedler value is (nearly) repeated.
    RepeatedFiedler { gap: f64 },
    /// A dual-ascent round failed to solve; previous trades kept.
    RoundFailed { status: SolveStatus },
    /// Dual ascent hit its round cap without converging.
    DualAscentCapped { rounds: usize },
    /// The final solve was infeasible; stage 1 raised the budget rows by the
    /// smallest feasible `relaxation`, stage 2 held position.
    FinalFallback { stage: u8, relaxation: f64 },
}

impl AgentEvent {
    pub fn kind(&self) -> &'static str {
        match self {
            AgentEvent::LambdaBelowBound { .. } => "lambda_below_bound",
            AgentEvent::RepeatedFiedler { .. } => "repeated_fiedler",
            AgentEvent::RoundFailed { .. } => "round_failed",
            AgentEvent::DualAscentCapped { .. } => "dual_ascent_capped",
            AgentEvent::FinalFallback { .. } => "final_fallback",
        }
    }

    pub fn is_violation(&self) -> bool {
        matches!(self, AgentEvent::LambdaBelowBound { .. })
    }

    pub fn detail(&self) -> String {
        match self {
            AgentEvent::LambdaBelowBound {
                lambda_hat,
                lower_bound,
            } => format!("lambda_hat={lambda_hat:.17e} lower_bound={lower_bound:.17e}"),
            AgentEvent::RepeatedFiedler { gap } => format!("gap={gap:.17e}"),
            AgentEvent::RoundFailed { status } => format!("status={status:?}"),
            AgentEvent::DualAscentCapped { rounds } => format!("rounds={rounds}"),
            AgentEvent::FinalFallback { stage, relaxation } => {
                format!("stage={stage} relaxation={relaxation:.17e}")
            }
        }
    }
}

/// Result of one dual-ascent round.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundOutcome {
    pub solution: LocalSolution,
    /// Trades to send out: this round's if it solved, otherwise the previous.
    pub trades: DVector<f64>,
    pub multipliers: DVector<f64>,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundReport {
    pub robot: usize,
    pub round: usize,
    pub objective: f64,
    pub trades: Vec<(usize, f64)>,
    pub multiplier_norm: f64,
    pub converged: bool,
}

/// Outcome of the final no-trade solve.
#[derive(Debug, Clone, PartialEq)]
pub struct FinalReport {
    pub robot: usize,
    /// Agreed (antisymmetric) trades with each neighbour.
    pub trades: Vec<(usize, f64)>,
    pub multipliers: Vec<f64>,
    pub solution: LocalSolution,
    /// Applied first input.
    pub applied: DVector<f64>,
    pub reference: DVector<f64>,
    pub lambda_hat: f64,
    pub share: f64,
    pub gradient: DVector<f64>,
    pub budget: BudgetConstraint,
    pub fallback: Option<u8>,
    pub rounds: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct StepOutput {
    pub outbox: Vec<(usize, Payload)>,
    pub events: Vec<AgentEvent>,
    pub round: Option<RoundReport>,
    pub plan: Option<PlanningSnapshot>,
    pub finalized: Option<FinalReport>,
}

/// `mu + rho (t + t_neighbours)`.
pub fn update_multipliers(
    multipliers: &DVector<f64>,
    trades: &DVector<f64>,
    neighbor_trades: &DVector<f64>,
    rho: f64,
) -> DVector<f64> {
    multipliers + (trades + neighbor_trades) * rho
}

/// Normalised multiplier change within `eta`, with the normaliser floored at
/// one so the zero-initialised first round is well defined.
pub fn multipliers_converged(old: &DVector<f64>, new: &DVector<f64>, eta: f64) -> bool {
    old.iter()
        .zip(new.iter())
        .all(|(o, n)| (n - o).abs() <= eta * o.abs().max(1.0))
}

/// `t* = (t_own - t_neighbour) / 2`; the neighbour computes the exact
/// negation from the same pair.
pub fn average_trades(own: &DVector<f64>, neighbor: &DVector<f64>) -> DVector<f64> {
    DVector::from_fn(own.len(), |j, _| 0.5 * (own[j] - neighbor[j]))
}

/// Per-axis clamp of `target - position` to `[-limit, limit]`; lands exactly
/// on the target when it is within reach.
pub fn clamp_toward(position: &DVector<f64>, target: &DVector<f64>, limit: f64) -> DVector<f64> {
    DVector::from_fn(position.len(), |r, _| {
        let d = target[r] - position[r];
        if d.abs() <= limit {
            target[r]
        } else {
            position[r] + limit.copysign(d)
        }
    })
}

#[derive(Debug, Clone)]
pub struct RobotAgent {
    pub config: AgentConfig,
    pub position: DVector<f64>,
    pub reference: DVector<f64>,
    pub phase: AgentPhase,
    pub estimate: AdjacencyEstimate,
    pub convergence: ConvergenceState,
    pub trading: TradingState,
    pub plan: Option<PlanningSnapshot>,
    phase_steps: usize,
    rounds: usize,
    capped: bool,
}

impl RobotAgent {
    /// A robot at rest whose reference is its current position.
    pub fn new(config: AgentConfig, position: DVector<f64>) -> Self {
        let n = config.n_robots;
        let id = config.id;
        Self {
            reference: position.clone(),
            position,
            phase: AgentPhase::MoveToReference,
            estimate: AdjacencyEstimate::new(id, n),
            convergence: ConvergenceState::new(id, n),
            trading: TradingState::zeros(0),
            plan: None,
            phase_steps: 0,
            rounds: 0,
            capped: false,
            config,
        }
    }

    pub fn id(&self) -> usize {
        self.config.id
    }

    pub fn body(&self) -> RobotBody {
        RobotBody::new(self.config.id, self.position.clone(), self.config.radius)
    }

    /// Latest estimated Fiedler value, if any planning has happened.
    pub fn lambda_hat(&self) -> Option<f64> {
        self.plan.as_ref().map(|p| p.lambda_hat)
    }

    /// Single-step cost of input `u` from the current position.
    pub fn local_cost(&self, u: &DVector<f64>) -> f64 {
        self.config.cost.step_cost(&self.position, u)
    }

    /// One step of the onboard controller toward the reference.
    pub fn move_step(&mut self) {
        self.position = clamp_toward(&self.position, &self.reference, self.config.horizon.u_max);
        self.phase_steps += 1;
        if self.phase_steps >= self.config.move_steps {
            self.enter_estimation();
        }
    }

    /// Skips the movement phase, e.g. for the very first cycle.
    pub fn start_estimation(&mut self) {
        self.enter_estimation();
    }

    fn enter_estimation(&mut self) {
        self.phase = AgentPhase::EstimateAdjacency;
        self.phase_steps = 0;
        self.estimate.reset();
        phase_reset(&mut self.convergence);
    }

    /// Advances the robot by one synchronous step. `inbox` holds decoded
    /// messages sent by neighbours at step `k - 1`.
    pub fn step(
        &mut self,
        k: u64,
        view: &LocalView,
        inbox: &[(usize, Payload)],
    ) -> Result<StepOutput> {
        let mut out = StepOutput::default();
        match self.phase {
            AgentPhase::MoveToReference => self.move_step(),
            AgentPhase::EstimateAdjacency => self.estimation_step(k, view, inbox, &mut out)?,
            AgentPhase::Optimize => self.optimisation_step(k, inbox, &mut out)?,
            AgentPhase::Finalize => unreachable!("finalize completes within its step"),
        }
        Ok(out)
    }

    fn estimation_step(
        &mut self,
        k: u64,
        view: &LocalView,
        inbox: &[(usize, Payload)],
        out: &mut StepOutput,
    ) -> Result<()> {
        let previous = self.estimate.matrix.clone();
        let sensed: Vec<(usize, DVector<f64>)> = view
            .neighbors
            .iter()
            .map(|b| (b.id, b.position.clone()))
            .collect();
        local_adjacency_observe(
            &mut self.estimate,
            &self.position,
            &sensed,
            &self.config.link,
        );
        let ids = view.neighbor_ids();
        let matrices: Vec<_> = inbox
            .iter()
            .filter_map(|(_, p)| match p {
                Payload::Estimate { matrix, .. } => Some(matrix),
                _ => None,
            })
            .collect();
        max_consensus_merge(&mut self.estimate, &ids, &matrices);
        let own = adjacency_converged(&self.estimate.matrix, &previous, &self.config.estimation);

        let states: Vec<&ConvergenceState> = inbox.iter().map(|(_, p)| p.convergence()).collect();
        convergence_step(&mut self.convergence, &states, own, k);

        if should_switch(&self.convergence, k) {
            phase_reset(&mut self.convergence);
            let plan = self.make_plan(view, &mut out.events)?;
            let k_nb = plan.neighbors.len();
            self.plan = Some(plan.clone());
            out.plan = Some(plan);
            self.trading = TradingState::zeros(k_nb);
            self.rounds = 0;
            self.capped = false;
            if self.config.trading {
                self.phase = AgentPhase::Optimize;
            } else {
                self.phase = AgentPhase::Finalize;
                let zeros = DVector::zeros(k_nb);
                out.finalized = Some(self.finalize(&zeros, &mut out.events)?);
            }
        } else {
            for nb in &ids {
                out.outbox.push((
                    *nb,
                    Payload::Estimate {
                        matrix: self.estimate.matrix.clone(),
                        convergence: self.convergence.clone(),
                    },
                ));
            }
        }
        Ok(())
    }

    fn optimisation_step(
        &mut self,
        k: u64,
        inbox: &[(usize, Payload)],
        out: &mut StepOutput,
    ) -> Result<()> {
        let neighbors = self
            .plan
            .as_ref()
            .map(|p| p.neighbors.clone())
            .unwrap_or_default();
        let mut received = DVector::zeros(neighbors.len());
        for (sender, payload) in inbox {
            if let (Payload::Trade { trade, .. }, Ok(j)) =
                (payload, neighbors.binary_search(sender))
            {
                received[j] = *trade;
            }
        }

        let outcome = self.dual_ascent_round(&received, &mut out.events)?;
        out.round = Some(RoundReport {
            robot: self.id(),
            round: self.rounds,
            objective: outcome.solution.objective,
            trades: neighbors
                .iter()
                .copied()
                .zip(outcome.trades.iter().copied())
                .collect(),
            multiplier_norm: outcome.multipliers.norm(),
            converged: outcome.converged,
        });

        let states: Vec<&ConvergenceState> = inbox.iter().map(|(_, p)| p.convergence()).collect();
        convergence_step(&mut self.convergence, &states, outcome.converged, k);

        if should_switch(&self.convergence, k) {
            self.phase = AgentPhase::Finalize;
            out.finalized = Some(self.finalize(&received, &mut out.events)?);
        } else {
            self.trading.trades = outcome.trades;
            self.trading.neighbor_trades_prev = received;
            for (j, nb) in neighbors.iter().enumerate() {
                out.outbox.push((
                    *nb,
                    Payload::Trade {
                        trade: self.trading.trades[j],
                        convergence: self.convergence.clone(),
                    },
                ));
            }
        }
        Ok(())
    }

    /// Estimated Fiedler pair, gradient and constraint rows for the coming
    /// optimisation period.
    fn make_plan(
        &self,
        view: &LocalView,
        events: &mut Vec<AgentEvent>,
    ) -> Result<PlanningSnapshot> {
        let cfg = &self.config;
        let me = self.body();
        let neighbors = view.neighbor_ids();
        let dim = self.position.len();
        let nu = dim * cfg.horizon.steps;

        let (lambda_hat, gradient, budget) = if cfg.n_robots < 2 {
            (
                f64::NAN,
                DVector::zeros(dim),
                BudgetConstraint::none(nu, neighbors.len()),
            )
        } else {
            let f = estimate_fiedler(&self.estimate)?;
            if f.is_repeated() {
                events.push(AgentEvent::RepeatedFiedler {
                    gap: f.spectral_gap(),
                });
            }
            let mut bodies = vec![me.clone(); cfg.n_robots];
            for b in &view.neighbors {
                bodies[b.id] = b.clone();
            }
            let edges = EdgeSet::from_pairs(cfg.n_robots, neighbors.iter().map(|&j| (me.id, j)));
            let grad = fiedler_gradient_with(
                &self.estimate.matrix,
                &bodies,
                &edges,
                &cfg.link,
                &f.vector,
                me.id,
            )?
            .grad;
            let budget = budget_constraint(
                &grad,
                f.value,
                cfg.lambda_lb + cfg.planning_margin,
                cfg.n_robots,
                neighbors.len(),
                &cfg.horizon,
            );
            if f.value < cfg.lambda_lb {
                events.push(AgentEvent::LambdaBelowBound {
                    lambda_hat: f.value,
                    lower_bound: cfg.lambda_lb,
                });
            }
            (f.value, grad, budget)
        };

        let mut obstacles: Vec<RobotBody> = view
            .neighbors
            .iter()
            .chain(view.nearby.iter())
            .cloned()
            .collect();
        obstacles.sort_by_key(|b| b.id);
        let collision = stack_collision(&me, &obstacles, cfg.epsilon, &cfg.horizon)?;

        Ok(PlanningSnapshot {
            neighbors,
            lambda_hat,
            gradient,
            budget,
            collision,
        })
    }

    /// Solves the trading program against the neighbours' previous trades and
    /// updates the multipliers.
    pub fn dual_ascent_round(
        &mut self,
        neighbor_trades: &DVector<f64>,
        events: &mut Vec<AgentEvent>,
    ) -> Result<RoundOutcome> {
        let plan = self
            .plan
            .as_ref()
            .expect("dual ascent requires a planning snapshot");
        let cfg = &self.config;
        let qp = build_local_problem(
            &cfg.cost,
            &self.position,
            &plan.budget,
            &plan.collision,
            neighbor_trades,
            &self.trading.multipliers,
            &cfg.dual,
            &cfg.horizon,
        )?;
        let raw = solve(&qp)?;
        let nu = self.position.len() * cfg.horizon.steps;
        let solution = LocalSolution::from_qp(&raw, nu, &cfg.cost, &self.position, &cfg.horizon);
        self.rounds += 1;

        let (trades, mut converged) = if solution.status == SolveStatus::Optimal {
            let old = self.trading.multipliers.clone();
            let new = update_multipliers(&old, &solution.trades, neighbor_trades, cfg.dual.rho);
            let conv = multipliers_converged(&old, &new, cfg.dual.eta);
            self.trading.multipliers = new;
            (solution.trades.clone(), conv)
        } else {
            events.push(AgentEvent::RoundFailed {
                status: solution.status,
            });
            (self.trading.trades.clone(), false)
        };
        if !converged && self.rounds >= cfg.dual.max_rounds {
            if !self.capped {
                events.push(AgentEvent::DualAscentCapped {
                    rounds: self.rounds,
                });
                self.capped = true;
            }
            converged = true;
        }
        Ok(RoundOutcome {
            solution,
            trades,
            multipliers: self.trading.multipliers.clone(),
            converged,
        })
    }

    /// Objective of the final program with every trade forced to zero, on the
    /// current snapshot. `None` if that program is infeasible.
    pub fn objective_without_trades(&self) -> Result<Option<f64>> {
        let Some(plan) = &self.plan else {
            return Ok(None);
        };
        let qp = build_final_problem(
            &self.config.cost,
            &self.position,
            &plan.budget,
            &plan.collision,
            &DVector::zeros(plan.neighbors.len()),
            &self.config.horizon,
        )?;
        let sol = solve(&qp)?;
        Ok((sol.status == SolveStatus::Optimal).then_some(sol.objective))
    }

    /// Averages trades with the neighbours' last values, solves without
    /// trading and sets the reference to the first planned step.
    pub fn finalize(
        &mut self,
        neighbor_trades: &DVector<f64>,
        events: &mut Vec<AgentEvent>,
    ) -> Result<FinalReport> {
        let plan = self
            .plan
            .clone()
            .expect("finalize requires a planning snapshot");
        let cfg = self.config.clone();
        let dim = self.position.len();
        let nu = dim * cfg.horizon.steps;
        let agreed = average_trades(&self.trading.trades, neighbor_trades);

        let qp = build_final_problem(
            &cfg.cost,
            &self.position,
            &plan.budget,
            &plan.collision,
            &agreed,
            &cfg.horizon,
        )?;
        let mut fallback = None;
        let mut raw = solve(&qp)?;
        if raw.status != SolveStatus::Optimal {
            let rows = plan.budget.rhs.len();
            let (stage, relaxation) = match qp.min_relaxation(rows)? {
                Some(by) => {
                    let relaxed = solve(&qp.relaxed(rows, by + RELAX_SLACK))?;
                    if relaxed.status == SolveStatus::Optimal {
                        raw = relaxed;
                        (1, by + RELAX_SLACK)
                    } else {
                        (2, f64::INFINITY)
                    }
                }
                None => (2, f64::INFINITY),
            };
            if stage == 2 {
                raw.x = DVector::zeros(nu);
                raw.objective = qp.objective(&raw.x);
                raw.status = SolveStatus::Optimal;
            }
            fallback = Some(stage);
            events.push(AgentEvent::FinalFallback { stage, relaxation });
        }
        let mut solution =
            LocalSolution::from_qp(&raw, nu, &cfg.cost, &self.position, &cfg.horizon);
        solution.trades = agreed.clone();
        let applied = DVector::from_fn(dim, |r, _| {
            solution.inputs[r].clamp(-cfg.horizon.u_max, cfg.horizon.u_max)
        });
        self.reference = &self.position + &applied;

        let report = FinalReport {
            robot: self.id(),
            trades: plan
                .neighbors
                .iter()
                .copied()
                .zip(agreed.iter().copied())
                .collect(),
            multipliers: self.trading.multipliers.iter().copied().collect(),
            solution,
            applied,
            reference: self.reference.clone(),
            lambda_hat: plan.lambda_hat,
            share: plan.budget.share(),
            gradient: plan.gradient.clone(),
            budget: plan.budget.clone(),
            fallback,
            rounds: self.rounds,
        };

        self.trading = TradingState::zeros(0);
        phase_reset(&mut self.convergence);
        self.phase = AgentPhase::MoveToReference;
        self.phase_steps = 0;
        Ok(report)
    }
}

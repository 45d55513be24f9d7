//! Centralised reference planner: one program over every robot's inputs with
//! the global linearised connectivity rows and all pairwise hyperplanes.

use nalgebra::{DMatrix, DVector};

use crate::error::Result;
use crate::graph::{fiedler, fiedler_gradient, WeightedGraph};
use crate::horizon::{lower_ones, stack_collision, HorizonParams};
use crate::link::{edge_set, RobotBody};
use crate::qp::{solve, CostSpec, QuadraticProgram, SolveStatus};
use crate::scenario::ScenarioConfig;

/// World state the oracle plans from.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleSnapshot {
    pub bodies: Vec<RobotBody>,
    /// Fiedler value of the graph (NaN for a lone robot).
    pub lambda: f64,
    /// Fiedler gradient of each robot.
    pub gradients: Vec<DVector<f64>>,
}

impl OracleSnapshot {
    /// Fiedler value and gradients of the true graph.
    pub fn from_truth(config: &ScenarioConfig, bodies: Vec<RobotBody>) -> Result<Self> {
        let n = bodies.len();
        let dim = config.dimension;
        if n < 2 {
            return Ok(Self {
                bodies,
                lambda: f64::NAN,
                gradients: vec![DVector::zeros(dim); n],
            });
        }
        let f = fiedler(&WeightedGraph::from_bodies(&bodies, &config.link))?;
        let edges = edge_set(&bodies, &config.link);
        let gradients = (0..n)
            .map(|i| fiedler_gradient(&bodies, &edges, &config.link, &f, i).map(|g| g.grad))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            bodies,
            lambda: f.value,
            gradients,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleSolution {
    /// Stacked horizon inputs per robot.
    pub inputs: Vec<DVector<f64>>,
    pub objective: f64,
    pub status: SolveStatus,
}

impl OracleSolution {
    pub fn first_inputs(&self, dim: usize) -> Vec<DVector<f64>> {
        self.inputs
            .iter()
            .map(|u| u.rows(0, dim).into_owned())
            .collect()
    }
}

/// Assembles the joint program. Variables are `[U_0; U_1; ...]`.
pub fn oracle_problem(
    costs: &[CostSpec],
    snapshot: &OracleSnapshot,
    lambda_lb: f64,
    epsilon: f64,
    horizon: &HorizonParams,
) -> Result<QuadraticProgram> {
    let n = snapshot.bodies.len();
    let dim = snapshot.bodies.first().map_or(0, |b| b.position.len());
    let steps = horizon.steps;
    let nu = dim * steps;
    let nv = n * nu;

    let mut hessian = DMatrix::zeros(nv, nv);
    let mut linear = DVector::zeros(nv);
    let mut constant = 0.0;
    for (i, body) in snapshot.bodies.iter().enumerate() {
        let (h, c, k) = costs[i].horizon_quadratic(&body.position, horizon);
        hessian.view_mut((i * nu, i * nu), (nu, nu)).copy_from(&h);
        linear.rows_mut(i * nu, nu).copy_from(&c);
        constant += k;
    }

    let budget_rows = if n >= 2 { steps } else { 0 };
    let mut blocks = Vec::with_capacity(n);
    for me in &snapshot.bodies {
        let others: Vec<RobotBody> = snapshot
            .bodies
            .iter()
            .filter(|b| b.id != me.id)
            .cloned()
            .collect();
        blocks.push(stack_collision(me, &others, epsilon, horizon)?);
    }
    let collision_rows: usize = blocks.iter().map(|b| b.coeff.nrows()).sum();
    let mut ineq_coeff = DMatrix::zeros(budget_rows + collision_rows, nv);
    let mut ineq_rhs = DVector::zeros(budget_rows + collision_rows);
    if budget_rows > 0 {
        let lm = lower_ones(steps);
        for (i, g) in snapshot.gradients.iter().enumerate() {
            let m = lm.kronecker(&g.transpose());
            ineq_coeff
                .view_mut((0, i * nu), (steps, nu))
                .copy_from(&(-m));
        }
        ineq_rhs
            .rows_mut(0, steps)
            .fill(snapshot.lambda - lambda_lb);
    }
    let mut row = budget_rows;
    for (i, b) in blocks.iter().enumerate() {
        let r = b.coeff.nrows();
        ineq_coeff
            .view_mut((row, i * nu), (r, nu))
            .copy_from(&b.coeff);
        ineq_rhs.rows_mut(row, r).copy_from(&b.rhs);
        row += r;
    }

    Ok(QuadraticProgram {
        hessian,
        linear,
        constant,
        ineq_coeff,
        ineq_rhs,
        box_lo: DVector::from_element(nv, -horizon.u_max),
        box_hi: DVector::from_element(nv, horizon.u_max),
    })
}

/// Solves the joint program for a snapshot of `config`'s team.
pub fn centralized_oracle(
    config: &ScenarioConfig,
    snapshot: &OracleSnapshot,
) -> Result<OracleSolution> {
    let costs: Vec<CostSpec> = (0..snapshot.bodies.len())
        .map(|i| config.cost_spec(i))
        .collect();
    let qp = oracle_problem(
        &costs,
        snapshot,
        config.lambda_lb + config.planning_margin,
        config.epsilon,
        &config.horizon,
    )?;
    let sol = solve(&qp)?;
    let nu = config.dimension * config.horizon.steps;
    Ok(OracleSolution {
        inputs: (0..snapshot.bodies.len())
            .map(|i| sol.x.rows(i * nu, nu).into_owned())
            .collect(),
        objective: sol.objective,
        status: sol.status,
    })
}

//! Per-robot planning programs.
//!
//! The trading program decides `(U, t)`: stacked horizon inputs and one trade
//! per neighbour. Its cost is the robot's horizon cost plus the relaxed
//! trade-consensus term `mu'(t + t_prev) + (rho/2) ||t + t_prev||^2`, where
//! `t_prev` are the neighbours' trades with this robot from the previous
//! round. The final program decides `U` alone with the agreed trades moved to
//! the right-hand side of the budget rows.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{QpSolution, QuadraticProgram, SolveStatus};
use crate::error::{Error, Result};
use crate::horizon::{prediction_matrix, BudgetConstraint, CollisionConstraint, HorizonParams};

/// Dual-ascent parameters shared by all robots.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DualAscentParams {
    /// Penalty weight on the consensus residual.
    #[serde(default = "default_rho")]
    pub rho: f64,
    /// Normalised multiplier-change tolerance for convergence.
    #[serde(default = "default_eta")]
    pub eta: f64,
    #[serde(default = "default_max_rounds")]
    pub max_rounds: usize,
    /// Optional bound `|t| <= trade_cap` on every trade.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trade_cap: Option<f64>,
}

fn default_rho() -> f64 {
    1.0
}
fn default_eta() -> f64 {
    1e-3
}
fn default_max_rounds() -> usize {
    500
}

impl Default for DualAscentParams {
    fn default() -> Self {
        Self {
            rho: default_rho(),
            eta: default_eta(),
            max_rounds: default_max_rounds(),
            trade_cap: None,
        }
    }
}

/// What a robot is trying to do with its motion.
#[derive(Debug, Clone, PartialEq)]
pub enum CostRole {
    /// Drive toward a point of interest.
    Inspection { poi: DVector<f64> },
    /// No goal of its own; only pays for movement.
    Support,
}

/// Per-step cost `0.5 ||poi - p_next||^2 + h ||u||^2` (inspection) or
/// `h ||u||^2` (support), summed over the horizon with `p_next` the predicted
/// position after each step.
#[derive(Debug, Clone, PartialEq)]
pub struct CostSpec {
    pub role: CostRole,
    pub movement_weight: f64,
}

impl CostSpec {
    /// Quadratic form `(H, c, constant)` of the horizon cost in `U`.
    pub fn horizon_quadratic(
        &self,
        position: &DVector<f64>,
        horizon: &HorizonParams,
    ) -> (DMatrix<f64>, DVector<f64>, f64) {
        let dim = position.len();
        let nu = dim * horizon.steps;
        let mut hess = DMatrix::identity(nu, nu) * (2.0 * self.movement_weight);
        let mut lin = DVector::zeros(nu);
        let mut constant = 0.0;
        if let CostRole::Inspection { poi } = &self.role {
            let b = prediction_matrix(horizon.steps, dim);
            let offset = poi - position;
            let g = DVector::from_fn(nu, |r, _| offset[r % dim]);
            hess += b.transpose() * &b;
            lin -= b.transpose() * &g;
            constant = 0.5 * g.norm_squared();
        }
        (hess, lin, constant)
    }

    /// Cost of a single step `u` taken from `position`.
    pub fn step_cost(&self, position: &DVector<f64>, u: &DVector<f64>) -> f64 {
        let movement = self.movement_weight * u.norm_squared();
        match &self.role {
            CostRole::Inspection { poi } => 0.5 * (poi - (position + u)).norm_squared() + movement,
            CostRole::Support => movement,
        }
    }
}

/// Result of a robot's local solve.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalSolution {
    pub inputs: DVector<f64>,
    pub trades: DVector<f64>,
    /// Full objective value, including any trade terms.
    pub objective: f64,
    /// Horizon cost of `inputs` alone.
    pub movement_cost: f64,
    pub status: SolveStatus,
}

impl LocalSolution {
    /// Splits a raw solution of a program whose first `n_inputs` variables are
    /// the stacked inputs and the rest trades.
    pub fn from_qp(
        sol: &QpSolution,
        n_inputs: usize,
        cost: &CostSpec,
        position: &DVector<f64>,
        horizon: &HorizonParams,
    ) -> Self {
        let inputs = sol.x.rows(0, n_inputs).into_owned();
        let trades = sol.x.rows(n_inputs, sol.x.len() - n_inputs).into_owned();
        let (h, c, k) = cost.horizon_quadratic(position, horizon);
        let movement_cost = 0.5 * inputs.dot(&(&h * &inputs)) + c.dot(&inputs) + k;
        Self {
            inputs,
            trades,
            objective: sol.objective,
            movement_cost,
            status: sol.status,
        }
    }

    /// The first input of the horizon, the one that is actually applied.
    pub fn first_input(&self, dim: usize) -> DVector<f64> {
        self.inputs.rows(0, dim).into_owned()
    }
}

fn check(context: &'static str, expected: usize, actual: usize) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(Error::DimensionMismatch {
            context,
            expected,
            actual,
        })
    }
}

fn check_constraints(
    dim: usize,
    horizon: &HorizonParams,
    budget: &BudgetConstraint,
    collision: &CollisionConstraint,
) -> Result<()> {
    let nu = dim * horizon.steps;
    // A budget block is either one row per step or absent (single robot).
    let rows = budget.coeff_u.nrows();
    if rows != 0 {
        check("budget rows", horizon.steps, rows)?;
    }
    check("budget input columns", nu, budget.coeff_u.ncols())?;
    check("budget trade rows", rows, budget.coeff_t.nrows())?;
    check("budget rhs", rows, budget.rhs.len())?;
    check("collision input columns", nu, collision.coeff.ncols())?;
    check(
        "collision rhs",
        collision.coeff.nrows(),
        collision.rhs.len(),
    )
}

/// Trading program over `(U, t)`.
#[allow(clippy::too_many_arguments)]
pub fn build_local_problem(
    cost: &CostSpec,
    position: &DVector<f64>,
    budget: &BudgetConstraint,
    collision: &CollisionConstraint,
    neighbor_trades_prev: &DVector<f64>,
    multipliers: &DVector<f64>,
    params: &DualAscentParams,
    horizon: &HorizonParams,
) -> Result<QuadraticProgram> {
    let dim = position.len();
    check_constraints(dim, horizon, budget, collision)?;
    let nu = dim * horizon.steps;
    let k = budget.coeff_t.ncols();
    check("neighbour trades", k, neighbor_trades_prev.len())?;
    check("multipliers", k, multipliers.len())?;
    let nv = nu + k;

    let (hu, cu, constant_u) = cost.horizon_quadratic(position, horizon);
    let mut hessian = DMatrix::zeros(nv, nv);
    hessian.view_mut((0, 0), (nu, nu)).copy_from(&hu);
    let mut linear = DVector::zeros(nv);
    linear.rows_mut(0, nu).copy_from(&cu);
    for j in 0..k {
        hessian[(nu + j, nu + j)] = params.rho;
        linear[nu + j] = multipliers[j] + params.rho * neighbor_trades_prev[j];
    }
    let constant = constant_u
        + multipliers.dot(neighbor_trades_prev)
        + 0.5 * params.rho * neighbor_trades_prev.norm_squared();

    let rows_b = budget.coeff_u.nrows();
    let rows_c = collision.coeff.nrows();
    let mut ineq_coeff = DMatrix::zeros(rows_b + rows_c, nv);
    ineq_coeff
        .view_mut((0, 0), (rows_b, nu))
        .copy_from(&(-&budget.coeff_u));
    ineq_coeff
        .view_mut((0, nu), (rows_b, k))
        .copy_from(&(-&budget.coeff_t));
    ineq_coeff
        .view_mut((rows_b, 0), (rows_c, nu))
        .copy_from(&collision.coeff);
    let mut ineq_rhs = DVector::zeros(rows_b + rows_c);
    ineq_rhs.rows_mut(0, rows_b).copy_from(&budget.rhs);
    ineq_rhs.rows_mut(rows_b, rows_c).copy_from(&collision.rhs);

    let cap = params.trade_cap.unwrap_or(f64::INFINITY);
    let box_hi = DVector::from_fn(nv, |i, _| if i < nu { horizon.u_max } else { cap });
    let box_lo = -&box_hi;

    Ok(QuadraticProgram {
        hessian,
        linear,
        constant,
        ineq_coeff,
        ineq_rhs,
        box_lo,
        box_hi,
    })
}

/// Program over `U` alone with the agreed trades `fixed_trades` added to the
/// budget right-hand side.
pub fn build_final_problem(
    cost: &CostSpec,
    position: &DVector<f64>,
    budget: &BudgetConstraint,
    collision: &CollisionConstraint,
    fixed_trades: &DVector<f64>,
    horizon: &HorizonParams,
) -> Result<QuadraticProgram> {
    let dim = position.len();
    check_constraints(dim, horizon, budget, collision)?;
    check("fixed trades", budget.coeff_t.ncols(), fixed_trades.len())?;
    let nu = dim * horizon.steps;

    let (hessian, linear, constant) = cost.horizon_quadratic(position, horizon);
    let rows_b = budget.coeff_u.nrows();
    let rows_c = collision.coeff.nrows();
    let mut ineq_coeff = DMatrix::zeros(rows_b + rows_c, nu);
    ineq_coeff
        .view_mut((0, 0), (rows_b, nu))
        .copy_from(&(-&budget.coeff_u));
    ineq_coeff
        .view_mut((rows_b, 0), (rows_c, nu))
        .copy_from(&collision.coeff);
    let mut ineq_rhs = DVector::zeros(rows_b + rows_c);
    ineq_rhs
        .rows_mut(0, rows_b)
        .copy_from(&(&budget.rhs + &budget.coeff_t * fixed_trades));
    ineq_rhs.rows_mut(rows_b, rows_c).copy_from(&collision.rhs);

    Ok(QuadraticProgram {
        hessian,
        linear,
        constant,
        ineq_coeff,
        ineq_rhs,
        box_lo: DVector::from_element(nu, -horizon.u_max),
        box_hi: DVector::from_element(nu, horizon.u_max),
    })
}

//! M-step prediction operator and the stacked per-robot linear constraints:
//! connectivity budget rows (with trading columns), separating-hyperplane
//! collision rows and the input bound.
//!
//! Decision vectors stack per-step inputs `U = (u^0, ..., u^{M-1})`, each of
//! dimension `n`. Constraint rows are ordered neighbour-ascending, then by
//! step.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::link::RobotBody;

/// Norm bounding each per-step input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum InputNorm {
    /// `||u||_inf <= u_max`, i.e. a per-coordinate box.
    #[default]
    Infinity,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HorizonParams {
    /// Prediction steps `M`.
    pub steps: usize,
    /// Per-step input bound in meters.
    pub u_max: f64,
    #[serde(default)]
    pub norm: InputNorm,
}

impl HorizonParams {
    pub fn new(steps: usize, u_max: f64) -> Self {
        Self {
            steps,
            u_max,
            norm: InputNorm::Infinity,
        }
    }
}

/// Lower-triangular matrix of ones, `M x M`.
pub fn lower_ones(m: usize) -> DMatrix<f64> {
    DMatrix::from_fn(m, m, |r, c| if c <= r { 1.0 } else { 0.0 })
}

/// `B = L_M (x) I_n`: maps stacked inputs to stacked position offsets.
pub fn prediction_matrix(steps: usize, dim: usize) -> DMatrix<f64> {
    lower_ones(steps).kronecker(&DMatrix::identity(dim, dim))
}

/// Predicted positions `1 (x) p + B U`.
pub fn predict_positions(p: &DVector<f64>, inputs: &DVector<f64>, steps: usize) -> DVector<f64> {
    let dim = p.len();
    let mut out = DVector::zeros(dim * steps);
    let mut cur = p.clone();
    for m in 0..steps {
        cur += inputs.rows(m * dim, dim);
        out.rows_mut(m * dim, dim).copy_from(&cur);
    }
    out
}

/// Unit normal `c_ij` pointing from `p_i` to `p_j` and offset `d_ij`, so that
/// `c_ij' x <= d_ij` keeps a ball of radius `r_i` around `x` on robot `i`'s
/// side of the mid-plane, buffered by half the clearance.
pub fn separating_hyperplane(
    p_i: &DVector<f64>,
    p_j: &DVector<f64>,
    r_i: f64,
    epsilon: f64,
) -> Result<(DVector<f64>, f64)> {
    let diff = p_j - p_i;
    let dist = diff.norm();
    if dist.is_nan() || dist <= 0.0 {
        return Err(Error::DegenerateGeometry(usize::MAX, usize::MAX));
    }
    let c = diff / dist;
    let d = 0.5 * c.dot(&(p_i + p_j)) - (r_i + 0.5 * epsilon);
    Ok((c, d))
}

/// Stacked collision rows `C~ U <= d~` over the horizon.
#[derive(Debug, Clone, PartialEq)]
pub struct CollisionConstraint {
    pub coeff: DMatrix<f64>,
    pub rhs: DVector<f64>,
}

/// Builds `C~ = (I_M (x) C_i) B` and `d~ = 1 (x) (d_i - C_i p_i)` against
/// the given neighbour bodies (already in ascending id order).
pub fn stack_collision(
    me: &RobotBody,
    others: &[RobotBody],
    epsilon: f64,
    horizon: &HorizonParams,
) -> Result<CollisionConstraint> {
    let dim = me.position.len();
    let steps = horizon.steps;
    let k = others.len();
    let mut c = DMatrix::zeros(k, dim);
    let mut offset = DVector::zeros(k);
    for (row, other) in others.iter().enumerate() {
        let (normal, d) = separating_hyperplane(&me.position, &other.position, me.radius, epsilon)
            .map_err(|_| Error::DegenerateGeometry(me.id, other.id))?;
        c.row_mut(row).copy_from(&normal.transpose());
        offset[row] = d - normal.dot(&me.position);
    }
    // Row (j, m) reads c_j' (u^0 + ... + u^m) <= d_j - c_j' p.
    let mut coeff = DMatrix::zeros(k * steps, dim * steps);
    let mut rhs = DVector::zeros(k * steps);
    for j in 0..k {
        for m in 0..steps {
            let row = j * steps + m;
            for l in 0..=m {
                coeff
                    .view_mut((row, l * dim), (1, dim))
                    .copy_from(&c.row(j));
            }
            rhs[row] = offset[j];
        }
    }
    Ok(CollisionConstraint { coeff, rhs })
}

/// Budget rows `-M_i U - F_i t <= 1 (lambda_hat - lambda_lb) / N`.
#[derive(Debug, Clone, PartialEq)]
pub struct BudgetConstraint {
    /// `M x (nM)`, equal to `L_M (x) m_i'`.
    pub coeff_u: DMatrix<f64>,
    /// `M x |N_i|` matrix of ones.
    pub coeff_t: DMatrix<f64>,
    pub rhs: DVector<f64>,
}

impl BudgetConstraint {
    /// No connectivity rows at all, for a lone robot that has no graph to
    /// keep connected.
    pub fn none(n_inputs: usize, num_neighbors: usize) -> Self {
        Self {
            coeff_u: DMatrix::zeros(0, n_inputs),
            coeff_t: DMatrix::zeros(0, num_neighbors),
            rhs: DVector::zeros(0),
        }
    }

    /// Per-robot share of the budget, `(lambda_hat - lambda_lb) / N`.
    pub fn share(&self) -> f64 {
        self.rhs.get(0).copied().unwrap_or(0.0)
    }

    /// Left-hand side of the rows as written, `-M_i U - F_i t`.
    pub fn lhs(&self, inputs: &DVector<f64>, trades: &DVector<f64>) -> DVector<f64> {
        -(&self.coeff_u * inputs) - &self.coeff_t * trades
    }
}

pub fn budget_constraint(
    gradient: &DVector<f64>,
    lambda_hat: f64,
    lambda_lb: f64,
    n_robots: usize,
    num_neighbors: usize,
    horizon: &HorizonParams,
) -> BudgetConstraint {
    let steps = horizon.steps;
    let coeff_u = lower_ones(steps).kronecker(&gradient.transpose());
    let coeff_t = DMatrix::from_element(steps, num_neighbors, 1.0);
    let share = (lambda_hat - lambda_lb) / n_robots as f64;
    BudgetConstraint {
        coeff_u,
        coeff_t,
        rhs: DVector::from_element(steps, share),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn v(xs: &[f64]) -> DVector<f64> {
        DVector::from_vec(xs.to_vec())
    }

    #[test]
    fn prediction_structure() {
        assert_eq!(
            prediction_matrix(2, 1),
            DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 1.0, 1.0])
        );
        assert_eq!(prediction_matrix(1, 3), DMatrix::identity(3, 3));
        let b = prediction_matrix(3, 2);
        let u = v(&[0.3, -0.2, 0.0, 0.0, 0.0, 0.0]);
        assert_eq!(&b * &u, v(&[0.3, -0.2, 0.3, -0.2, 0.3, -0.2]));
    }

    #[test]
    fn predict_matches_operator() {
        let b = prediction_matrix(3, 2);
        let p = v(&[1.0, 2.0]);
        let u = v(&[0.1, 0.2, -0.3, 0.4, 0.5, -0.6]);
        let ones = DVector::from_element(3, 1.0).kronecker(&p);
        assert_relative_eq!(predict_positions(&p, &u, 3), ones + b * u, epsilon = 1e-15);
    }

    #[test]
    fn hyperplane_values() {
        let (c, d) = separating_hyperplane(&v(&[0.0, 0.0]), &v(&[2.0, 0.0]), 0.5, 0.2).unwrap();
        assert_eq!(c, v(&[1.0, 0.0]));
        assert_relative_eq!(d, 0.4, epsilon = 1e-15);
        let (c2, _) = separating_hyperplane(&v(&[2.0, 0.0]), &v(&[0.0, 0.0]), 0.5, 0.2).unwrap();
        assert_eq!(c2, -c);
        assert!(separating_hyperplane(&v(&[1.0, 1.0]), &v(&[1.0, 1.0]), 0.5, 0.2).is_err());
    }

    fn body(id: usize, xs: &[f64]) -> RobotBody {
        RobotBody::new(id, v(xs), 0.5)
    }

    #[test]
    fn single_neighbor_single_step() {
        let h = HorizonParams::new(1, 1.0);
        let cc = stack_collision(&body(0, &[0.0, 0.0]), &[body(1, &[2.0, 0.0])], 0.2, &h).unwrap();
        assert_eq!(cc.coeff, DMatrix::from_row_slice(1, 2, &[1.0, 0.0]));
        assert_relative_eq!(cc.rhs[0], 0.4, epsilon = 1e-15);
        assert!(cc.rhs[0] > 0.0);
    }

    #[test]
    fn no_neighbors_no_rows() {
        let h = HorizonParams::new(3, 1.0);
        let cc = stack_collision(&body(0, &[0.0, 0.0]), &[], 0.2, &h).unwrap();
        assert_eq!(cc.coeff.nrows(), 0);
        assert_eq!(cc.coeff.ncols(), 6);
    }

    #[test]
    fn two_step_rows_use_cumulative_input() {
        let h = HorizonParams::new(2, 1.0);
        let cc = stack_collision(&body(0, &[0.0, 0.0]), &[body(1, &[3.0, 4.0])], 0.2, &h).unwrap();
        let row0 = cc.coeff.row(0).into_owned();
        let row1 = cc.coeff.row(1).into_owned();
        assert_eq!(row0.columns(0, 2), row1.columns(0, 2));
        assert_eq!(row1.columns(2, 2), row0.columns(0, 2));
        assert!(row0.columns(2, 2).iter().all(|&x| x == 0.0));
        assert_eq!(cc.rhs[0], cc.rhs[1]);
    }

    #[test]
    fn budget_substitution() {
        let h = HorizonParams::new(1, 1.0);
        let b = budget_constraint(&v(&[1.0, 0.0]), 1.0, 0.2, 10, 2, &h);
        assert_eq!(b.coeff_u, DMatrix::from_row_slice(1, 2, &[1.0, 0.0]));
        assert_eq!(b.coeff_t, DMatrix::from_element(1, 2, 1.0));
        assert_relative_eq!(b.rhs[0], 0.08, epsilon = 1e-15);
        // -u_x - sum(t) evaluated on a sample point
        let lhs = b.lhs(&v(&[0.3, 7.0]), &v(&[0.1, -0.05]));
        assert_relative_eq!(lhs[0], -0.35, epsilon = 1e-15);
    }

    #[test]
    fn zero_gradient_constrains_trades_only() {
        let h = HorizonParams::new(2, 1.0);
        let b = budget_constraint(&v(&[0.0, 0.0]), 1.0, 0.2, 10, 1, &h);
        assert!(b.coeff_u.iter().all(|&x| x == 0.0));
        assert_eq!(b.lhs(&v(&[5.0, 5.0, 5.0, 5.0]), &v(&[0.3]))[1], -0.3);
    }

    #[test]
    fn two_step_budget_rows() {
        let h = HorizonParams::new(2, 1.0);
        let b = budget_constraint(&v(&[1.0, 0.0]), 1.0, 0.2, 10, 0, &h);
        assert_eq!(
            b.coeff_u,
            DMatrix::from_row_slice(2, 4, &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 1.0, 0.0])
        );
        assert_relative_eq!(b.rhs[1], 0.08, epsilon = 1e-15);
    }
}

//! Convex quadratic programs: the dense problem type, an interior-point
//! solver, and the per-robot planning problems built on top of them.

mod local;
mod solver;

pub use local::{
    build_final_problem, build_local_problem, CostRole, CostSpec, DualAscentParams, LocalSolution,
};
pub use solver::{solve, solve_with, QpSolution, SolveStatus, SolverSettings};

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// `minimize 0.5 x'Hx + c'x + constant` subject to `G x <= h` and
/// `lo <= x <= hi` (infinite bounds allowed).
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticProgram {
    pub hessian: DMatrix<f64>,
    pub linear: DVector<f64>,
    pub constant: f64,
    pub ineq_coeff: DMatrix<f64>,
    pub ineq_rhs: DVector<f64>,
    pub box_lo: DVector<f64>,
    pub box_hi: DVector<f64>,
}

impl QuadraticProgram {
    /// Unconstrained program over `n` variables with no inequality rows.
    pub fn unconstrained(hessian: DMatrix<f64>, linear: DVector<f64>) -> Self {
        let n = linear.len();
        Self {
            hessian,
            linear,
            constant: 0.0,
            ineq_coeff: DMatrix::zeros(0, n),
            ineq_rhs: DVector::zeros(0),
            box_lo: DVector::from_element(n, f64::NEG_INFINITY),
            box_hi: DVector::from_element(n, f64::INFINITY),
        }
    }

    pub fn n_vars(&self) -> usize {
        self.linear.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n_vars();
        let check = |context: &'static str, expected: usize, actual: usize| {
            if expected == actual {
                Ok(())
            } else {
                Err(Error::DimensionMismatch {
                    context,
                    expected,
                    actual,
                })
            }
        };
        check("qp hessian rows", n, self.hessian.nrows())?;
        check("qp hessian cols", n, self.hessian.ncols())?;
        check("qp inequality cols", n, self.ineq_coeff.ncols())?;
        check(
            "qp inequality rhs",
            self.ineq_coeff.nrows(),
            self.ineq_rhs.len(),
        )?;
        check("qp box lower", n, self.box_lo.len())?;
        check("qp box upper", n, self.box_hi.len())?;
        if self
            .box_lo
            .iter()
            .zip(self.box_hi.iter())
            .any(|(l, h)| l > h)
        {
            return Err(Error::NumericalFailure(
                "box lower bound exceeds upper".into(),
            ));
        }
        Ok(())
    }

    pub fn objective(&self, x: &DVector<f64>) -> f64 {
        0.5 * x.dot(&(&self.hessian * x)) + self.linear.dot(x) + self.constant
    }

    /// Largest violation over inequality rows and box bounds (0 if feasible).
    pub fn max_violation(&self, x: &DVector<f64>) -> f64 {
        let rows = (&self.ineq_coeff * x - &self.ineq_rhs).max().max(0.0);
        let lo = (0..x.len())
            .map(|i| self.box_lo[i] - x[i])
            .fold(0.0f64, f64::max);
        let hi = (0..x.len())
            .map(|i| x[i] - self.box_hi[i])
            .fold(0.0f64, f64::max);
        if self.ineq_rhs.is_empty() {
            lo.max(hi)
        } else {
            rows.max(lo).max(hi)
        }
    }

    /// Smallest uniform increase `s >= 0` of the first `rows` right-hand
    /// sides that makes the program feasible, or `None` if no such `s`
    /// exists (the remaining rows and the box conflict on their own).
    pub fn min_relaxation(&self, rows: usize) -> Result<Option<f64>> {
        let n = self.n_vars();
        let m = self.ineq_rhs.len();
        let reg = 1e-9;
        let mut hessian = DMatrix::identity(n + 1, n + 1) * reg;
        hessian[(n, n)] = reg;
        let mut linear = DVector::zeros(n + 1);
        linear[n] = 1.0;
        let mut ineq_coeff = DMatrix::zeros(m, n + 1);
        ineq_coeff
            .view_mut((0, 0), (m, n))
            .copy_from(&self.ineq_coeff);
        for r in 0..rows.min(m) {
            ineq_coeff[(r, n)] = -1.0;
        }
        let mut box_lo = self.box_lo.clone().insert_row(n, 0.0);
        box_lo[n] = 0.0;
        let box_hi = self.box_hi.clone().insert_row(n, f64::INFINITY);
        let lp = QuadraticProgram {
            hessian,
            linear,
            constant: 0.0,
            ineq_coeff,
            ineq_rhs: self.ineq_rhs.clone(),
            box_lo,
            box_hi,
        };
        let sol = solve(&lp)?;
        Ok((sol.status == SolveStatus::Optimal).then(|| sol.x[n].max(0.0)))
    }

    /// Copy with the first `rows` right-hand sides raised by `by`.
    pub fn relaxed(&self, rows: usize, by: f64) -> Self {
        let mut out = self.clone();
        for r in 0..rows.min(out.ineq_rhs.len()) {
            out.ineq_rhs[r] += by;
        }
        out
    }

    /// Copy without the inequality rows (box bounds kept).
    pub fn without_rows(&self) -> Self {
        let mut out = self.clone();
        out.ineq_coeff = DMatrix::zeros(0, self.n_vars());
        out.ineq_rhs = DVector::zeros(0);
        out
    }
}

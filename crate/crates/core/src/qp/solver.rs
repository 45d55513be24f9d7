//! Dense primal-dual interior-point method (Mehrotra predictor-corrector) for
//! convex QPs, with an elastic phase-one LP to tell infeasible problems apart
//! from slow convergence.

use nalgebra::{Cholesky, DMatrix, DVector};

use super::QuadraticProgram;
use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolveStatus {
    Optimal,
    Infeasible,
    MaxIterations,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverSettings {
    pub max_iter: usize,
    /// Relative tolerance on primal/dual residuals and complementarity.
    pub tol: f64,
    /// Absolute feasibility tolerance a returned optimum must meet.
    pub feas_tol: f64,
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self {
            max_iter: 200,
            tol: 1e-10,
            feas_tol: 1e-7,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpSolution {
    pub x: DVector<f64>,
    pub objective: f64,
    pub status: SolveStatus,
    /// Multipliers of the inequality rows `G x <= h`.
    pub row_multipliers: DVector<f64>,
    /// Multipliers of the upper box bounds (zero where the bound is infinite).
    pub upper_multipliers: DVector<f64>,
    /// Multipliers of the lower box bounds.
    pub lower_multipliers: DVector<f64>,
    pub iterations: usize,
}

pub fn solve(problem: &QuadraticProgram) -> Result<QpSolution> {
    solve_with(problem, &SolverSettings::default())
}

pub fn solve_with(problem: &QuadraticProgram, settings: &SolverSettings) -> Result<QpSolution> {
    problem.validate()?;
    let std = StandardForm::from_problem(problem);
    let run = interior_point(
        &problem.hessian,
        &problem.linear,
        &std.a,
        &std.b,
        settings,
        0.0,
    );

    let status = match run.outcome {
        Outcome::Converged if problem.max_violation(&run.x) <= settings.feas_tol => {
            SolveStatus::Optimal
        }
        _ => {
            if is_infeasible(problem, settings) {
                SolveStatus::Infeasible
            } else {
                SolveStatus::MaxIterations
            }
        }
    };
    let (row_multipliers, upper_multipliers, lower_multipliers) = std.split_multipliers(&run.z);
    Ok(QpSolution {
        objective: problem.objective(&run.x),
        x: run.x,
        status,
        row_multipliers,
        upper_multipliers,
        lower_multipliers,
        iterations: run.iterations,
    })
}

/// Stacked `A x <= b` form: general rows, then finite upper bounds, then
/// finite lower bounds.
struct StandardForm {
    a: DMatrix<f64>,
    b: DVector<f64>,
    n_rows: usize,
    upper: Vec<usize>,
    lower: Vec<usize>,
    n: usize,
}

impl StandardForm {
    fn from_problem(p: &QuadraticProgram) -> Self {
        let n = p.n_vars();
        let upper: Vec<usize> = (0..n).filter(|&i| p.box_hi[i].is_finite()).collect();
        let lower: Vec<usize> = (0..n).filter(|&i| p.box_lo[i].is_finite()).collect();
        let n_rows = p.ineq_coeff.nrows();
        let m = n_rows + upper.len() + lower.len();
        let mut a = DMatrix::zeros(m, n);
        let mut b = DVector::zeros(m);
        a.rows_mut(0, n_rows).copy_from(&p.ineq_coeff);
        b.rows_mut(0, n_rows).copy_from(&p.ineq_rhs);
        for (k, &i) in upper.iter().enumerate() {
            a[(n_rows + k, i)] = 1.0;
            b[n_rows + k] = p.box_hi[i];
        }
        let off = n_rows + upper.len();
        for (k, &i) in lower.iter().enumerate() {
            a[(off + k, i)] = -1.0;
            b[off + k] = -p.box_lo[i];
        }
        Self {
            a,
            b,
            n_rows,
            upper,
            lower,
            n,
        }
    }

    fn split_multipliers(&self, z: &DVector<f64>) -> (DVector<f64>, DVector<f64>, DVector<f64>) {
        let rows = z.rows(0, self.n_rows).into_owned();
        let mut up = DVector::zeros(self.n);
        let mut lo = DVector::zeros(self.n);
        for (k, &i) in self.upper.iter().enumerate() {
            up[i] = z[self.n_rows + k];
        }
        let off = self.n_rows + self.upper.len();
        for (k, &i) in self.lower.iter().enumerate() {
            lo[i] = z[off + k];
        }
        (rows, up, lo)
    }
}

enum Outcome {
    Converged,
    Stalled,
}

struct IpmRun {
    x: DVector<f64>,
    z: DVector<f64>,
    outcome: Outcome,
    iterations: usize,
}

fn inf_norm(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

/// Solves `K dx = rhs` for the symmetric positive (semi)definite reduced KKT
/// matrix, regularising the diagonal when the factorisation fails.
fn solve_reduced(k: &DMatrix<f64>, rhs: &DVector<f64>) -> Option<DVector<f64>> {
    if let Some(ch) = Cholesky::new(k.clone()) {
        return Some(ch.solve(rhs));
    }
    let scale = k.diagonal().iter().fold(1.0f64, |m, x| m.max(x.abs()));
    let mut reg = 1e-14 * scale;
    while reg < 1e-4 * scale {
        let mut kr = k.clone();
        for i in 0..kr.nrows() {
            kr[(i, i)] += reg;
        }
        if let Some(ch) = Cholesky::new(kr) {
            return Some(ch.solve(rhs));
        }
        reg *= 100.0;
    }
    k.clone().lu().solve(rhs)
}

fn max_step(v: &DVector<f64>, dv: &DVector<f64>) -> f64 {
    v.iter()
        .zip(dv.iter())
        .filter(|(_, d)| **d < 0.0)
        .map(|(x, d)| -x / d)
        .fold(1.0f64, f64::min)
}

fn interior_point(
    h: &DMatrix<f64>,
    c: &DVector<f64>,
    a: &DMatrix<f64>,
    b: &DVector<f64>,
    settings: &SolverSettings,
    prox: f64,
) -> IpmRun {
    let n = c.len();
    let m = b.len();
    let mut hreg = h.clone();
    for i in 0..n {
        hreg[(i, i)] += prox;
    }
    let at = a.transpose();

    if m == 0 {
        return match solve_reduced(&hreg, &(-c)) {
            Some(x) if inf_norm(&(&hreg * &x + c)) <= 1e-9 * (1.0 + inf_norm(c)) => IpmRun {
                x,
                z: DVector::zeros(0),
                outcome: Outcome::Converged,
                iterations: 1,
            },
            _ => IpmRun {
                x: DVector::zeros(n),
                z: DVector::zeros(0),
                outcome: Outcome::Stalled,
                iterations: 1,
            },
        };
    }

    // Starting point from the regularised least-squares KKT system.
    let k0 = &hreg + &at * a;
    let mut x = solve_reduced(&k0, &(&at * b - c)).unwrap_or_else(|| DVector::zeros(n));
    let r = b - a * &x;
    let mut s = r.clone();
    let mut z = -r;
    let shift_s = -s.min();
    let shift_z = -z.min();
    s.add_scalar_mut(if shift_s >= 0.0 { 1.0 + shift_s } else { 0.0 });
    z.add_scalar_mut(if shift_z >= 0.0 { 1.0 + shift_z } else { 0.0 });

    let mut iterations = 0;
    let mut best: Option<(f64, DVector<f64>, DVector<f64>)> = None;
    for it in 0..settings.max_iter {
        iterations = it + 1;
        let r_d = &hreg * &x + c + &at * &z;
        let r_p = a * &x + &s - b;
        let mu = s.dot(&z) / m as f64;
        if !mu.is_finite() || inf_norm(&z) > 1e14 || inf_norm(&x) > 1e14 {
            break;
        }

        let merit = kkt_error(&hreg, c, a, b, &x, &z, &r_p, &r_d);
        if merit <= settings.tol {
            return IpmRun {
                x,
                z,
                outcome: Outcome::Converged,
                iterations,
            };
        }
        if best.as_ref().is_none_or(|(e, _, _)| merit < *e) {
            best = Some((merit, x.clone(), z.clone()));
        }

        let w = z.component_div(&s);
        let mut kmat = hreg.clone();
        for (row, &wi) in w.iter().enumerate() {
            let ai = a.row(row);
            kmat += wi * ai.transpose() * ai;
        }

        let direction = |r_c: &DVector<f64>| -> Option<(DVector<f64>, DVector<f64>, DVector<f64>)> {
            let t = (r_c + z.component_mul(&r_p)).component_div(&s);
            let rhs = -&r_d - &at * t;
            let dx = solve_reduced(&kmat, &rhs)?;
            let ds = -&r_p - a * &dx;
            let dz = (r_c - z.component_mul(&ds)).component_div(&s);
            Some((dx, ds, dz))
        };

        let r_c_aff = -s.component_mul(&z);
        let Some((_, ds_a, dz_a)) = direction(&r_c_aff) else {
            break;
        };
        let alpha_aff = max_step(&s, &ds_a).min(max_step(&z, &dz_a));
        let mu_aff = (&s + alpha_aff * &ds_a).dot(&(&z + alpha_aff * &dz_a)) / m as f64;
        let sigma = (mu_aff / mu).clamp(0.0, 1.0).powi(3);

        let r_c = &r_c_aff - ds_a.component_mul(&dz_a) + DVector::from_element(m, sigma * mu);
        let Some((dx, ds, dz)) = direction(&r_c) else {
            break;
        };
        let alpha = (0.99 * max_step(&s, &ds).min(max_step(&z, &dz))).min(1.0);
        x += alpha * dx;
        s += alpha * ds;
        z += alpha * dz;
    }

    let Some((merit, x, z)) = best else {
        return IpmRun {
            x,
            z,
            outcome: Outcome::Stalled,
            iterations,
        };
    };
    // Rounding often stops progress just short of `tol` once the barrier
    // weights blow up; an equality-constrained solve on the apparent active
    // set usually recovers the exact optimum.
    if let Some((xp, zp)) = polish(&hreg, c, a, b, &x, &z) {
        let r_d = &hreg * &xp + c + &at * &zp;
        let r_p = (a * &xp - b).map(|v| v.max(0.0));
        if kkt_error(&hreg, c, a, b, &xp, &zp, &r_p, &r_d) <= settings.tol.max(merit) {
            return IpmRun {
                x: xp,
                z: zp,
                outcome: Outcome::Converged,
                iterations,
            };
        }
    }
    let outcome = if merit <= LOOSE_TOL {
        Outcome::Converged
    } else {
        Outcome::Stalled
    };
    IpmRun {
        x,
        z,
        outcome,
        iterations,
    }
}

/// Solves the KKT system with the rows where `z > slack` held as equalities
/// and the rest dropped. Returns `None` if the guess is not primal and dual
/// feasible.
fn polish(
    h: &DMatrix<f64>,
    c: &DVector<f64>,
    a: &DMatrix<f64>,
    b: &DVector<f64>,
    x: &DVector<f64>,
    z: &DVector<f64>,
) -> Option<(DVector<f64>, DVector<f64>)> {
    let n = x.len();
    let slack = b - a * x;
    let active: Vec<usize> = (0..b.len()).filter(|&i| z[i] > slack[i]).collect();
    let k = active.len();
    let mut kkt = DMatrix::zeros(n + k, n + k);
    kkt.view_mut((0, 0), (n, n)).copy_from(h);
    let mut rhs = DVector::zeros(n + k);
    rhs.rows_mut(0, n).copy_from(&(-c));
    for (r, &i) in active.iter().enumerate() {
        for j in 0..n {
            kkt[(n + r, j)] = a[(i, j)];
            kkt[(j, n + r)] = a[(i, j)];
        }
        rhs[n + r] = b[i];
    }
    // Regularised factorisation plus refinement against the exact system.
    let delta = 1e-11 * (1.0 + h.diagonal().amax());
    let mut reg = kkt.clone();
    for i in 0..n {
        reg[(i, i)] += delta;
    }
    for i in n..n + k {
        reg[(i, i)] -= delta;
    }
    let lu = reg.lu();
    let mut sol = lu.solve(&rhs)?;
    for _ in 0..5 {
        let res = &rhs - &kkt * &sol;
        sol += lu.solve(&res)?;
    }
    let xp = sol.rows(0, n).into_owned();
    let mut zp = DVector::zeros(b.len());
    for (r, &i) in active.iter().enumerate() {
        zp[i] = sol[n + r];
    }
    let scale = 1e-9 * (1.0 + inf_norm(b).max(inf_norm(&zp)));
    let primal_ok = (a * &xp - b).iter().all(|v| *v <= scale);
    let dual_ok = zp.iter().all(|v| *v >= -scale);
    (primal_ok && dual_ok && xp.iter().all(|v| v.is_finite())).then(|| (xp, zp.map(|v| v.max(0.0))))
}

/// Relative tolerance a stalled solve must still meet to count as optimal.
const LOOSE_TOL: f64 = 1e-8;

/// Largest of the primal residual, dual residual and complementarity gap,
/// each relative to the magnitude of the terms it is made of.
#[allow(clippy::too_many_arguments)]
fn kkt_error(
    h: &DMatrix<f64>,
    c: &DVector<f64>,
    a: &DMatrix<f64>,
    b: &DVector<f64>,
    x: &DVector<f64>,
    z: &DVector<f64>,
    r_p: &DVector<f64>,
    r_d: &DVector<f64>,
) -> f64 {
    let ax = a * x;
    let hx = h * x;
    let atz = a.transpose() * z;
    let p_scale = 1.0 + inf_norm(b).max(inf_norm(&ax));
    let d_scale = 1.0 + inf_norm(c).max(inf_norm(&hx)).max(inf_norm(&atz));
    let slack = b - &ax;
    // Gap measured on the clipped slack so an infeasible x cannot hide it.
    let gap: f64 = slack
        .iter()
        .zip(z.iter())
        .map(|(s, z)| (s.max(0.0) * z).abs())
        .sum();
    let obj = 0.5 * x.dot(&hx) + c.dot(x);
    let infeas = slack.iter().fold(0.0f64, |m, s| m.max(-s));
    (inf_norm(r_p).max(infeas) / p_scale)
        .max(inf_norm(r_d) / d_scale)
        .max(gap / (1.0 + obj.abs()))
}

/// Elastic feasibility check: minimise the total row violation `sum v`
/// subject to `G x - v <= h`, `v >= 0` and the box.
fn is_infeasible(p: &QuadraticProgram, settings: &SolverSettings) -> bool {
    let n = p.n_vars();
    let rows = p.ineq_coeff.nrows();
    let mut elastic = QuadraticProgram {
        hessian: DMatrix::zeros(n + rows, n + rows),
        linear: DVector::zeros(n + rows),
        constant: 0.0,
        ineq_coeff: DMatrix::zeros(rows, n + rows),
        ineq_rhs: p.ineq_rhs.clone(),
        box_lo: DVector::zeros(n + rows),
        box_hi: DVector::from_element(n + rows, f64::INFINITY),
    };
    elastic.linear.rows_mut(n, rows).fill(1.0);
    elastic
        .ineq_coeff
        .view_mut((0, 0), (rows, n))
        .copy_from(&p.ineq_coeff);
    for r in 0..rows {
        elastic.ineq_coeff[(r, n + r)] = -1.0;
    }
    elastic.box_lo.rows_mut(0, n).copy_from(&p.box_lo);
    elastic.box_hi.rows_mut(0, n).copy_from(&p.box_hi);
    if p.box_lo.iter().zip(p.box_hi.iter()).any(|(l, h)| l > h) {
        return true;
    }
    let std = StandardForm::from_problem(&elastic);
    let run = interior_point(
        &elastic.hessian,
        &elastic.linear,
        &std.a,
        &std.b,
        &SolverSettings {
            max_iter: settings.max_iter,
            ..*settings
        },
        1e-9,
    );
    let total: f64 = run.x.rows(n, rows).iter().map(|v| v.max(0.0)).sum();
    total > settings.feas_tol
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn unconstrained_minimiser() {
        let a = DVector::from_vec(vec![1.0, -2.0, 3.5]);
        let qp = QuadraticProgram::unconstrained(DMatrix::identity(3, 3), -a.clone());
        let sol = solve(&qp).unwrap();
        assert_eq!(sol.status, SolveStatus::Optimal);
        assert_relative_eq!(sol.x, a, epsilon = 1e-9);
    }

    #[test]
    fn active_lower_bound() {
        // minimise x^2 s.t. x >= 1
        let mut qp =
            QuadraticProgram::unconstrained(DMatrix::from_element(1, 1, 2.0), DVector::zeros(1));
        qp.ineq_coeff = DMatrix::from_element(1, 1, -1.0);
        qp.ineq_rhs = DVector::from_element(1, -1.0);
        let sol = solve(&qp).unwrap();
        assert_eq!(sol.status, SolveStatus::Optimal);
        assert_relative_eq!(sol.x[0], 1.0, epsilon = 1e-8);
        assert_relative_eq!(sol.objective, 1.0, epsilon = 1e-8);
        assert_relative_eq!(sol.row_multipliers[0], 2.0, epsilon = 1e-6);
    }

    #[test]
    fn box_bounds_clip() {
        let mut qp = QuadraticProgram::unconstrained(
            DMatrix::identity(2, 2),
            DVector::from_vec(vec![-5.0, 5.0]),
        );
        qp.box_lo = DVector::from_element(2, -1.0);
        qp.box_hi = DVector::from_element(2, 1.0);
        let sol = solve(&qp).unwrap();
        assert_eq!(sol.status, SolveStatus::Optimal);
        assert_relative_eq!(sol.x, DVector::from_vec(vec![1.0, -1.0]), epsilon = 1e-8);
        assert!(sol.upper_multipliers[0] > 1.0 && sol.lower_multipliers[1] > 1.0);
    }

    #[test]
    fn infeasible_rows_detected() {
        // x <= -1 and x >= 1
        let mut qp = QuadraticProgram::unconstrained(DMatrix::identity(1, 1), DVector::zeros(1));
        qp.ineq_coeff = DMatrix::from_column_slice(2, 1, &[1.0, -1.0]);
        qp.ineq_rhs = DVector::from_vec(vec![-1.0, -1.0]);
        assert_eq!(solve(&qp).unwrap().status, SolveStatus::Infeasible);
    }

    #[test]
    fn infeasible_against_box() {
        let mut qp = QuadraticProgram::unconstrained(DMatrix::identity(1, 1), DVector::zeros(1));
        qp.ineq_coeff = DMatrix::from_element(1, 1, -1.0);
        qp.ineq_rhs = DVector::from_element(1, -2.0);
        qp.box_lo = DVector::from_element(1, -1.0);
        qp.box_hi = DVector::from_element(1, 1.0);
        assert_eq!(solve(&qp).unwrap().status, SolveStatus::Infeasible);
    }

    #[test]
    fn linear_objective_with_box() {
        // Zero Hessian: an LP over a box.
        let mut qp = QuadraticProgram::unconstrained(
            DMatrix::zeros(2, 2),
            DVector::from_vec(vec![1.0, -1.0]),
        );
        qp.box_lo = DVector::from_element(2, -0.5);
        qp.box_hi = DVector::from_element(2, 0.5);
        let sol = solve(&qp).unwrap();
        assert_eq!(sol.status, SolveStatus::Optimal);
        assert_relative_eq!(sol.x, DVector::from_vec(vec![-0.5, 0.5]), epsilon = 1e-7);
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let mut qp = QuadraticProgram::unconstrained(DMatrix::identity(2, 2), DVector::zeros(2));
        qp.ineq_rhs = DVector::zeros(3);
        assert!(solve(&qp).is_err());
    }
}

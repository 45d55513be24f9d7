//! Laplacian construction, Fiedler value/vector and the analytic Fiedler
//! gradient with respect to a single robot's position.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};
use crate::link::{adjacency_weight, neighbors, EdgeSet, LinkParams, RobotBody};

/// Spectral gap below which the Fiedler value is treated as repeated.
pub const MULTIPLICITY_GAP: f64 = 1e-9;

const EIGEN_EPS: f64 = 1e-15;
const EIGEN_MAX_ITER: usize = 10_000;

/// Symmetric, hollow weight matrix over `N` robots.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedGraph {
    weights: DMatrix<f64>,
}

impl WeightedGraph {
    /// Wraps a weight matrix, checking that it is square, symmetric, hollow
    /// and has entries in `[0, 1]`.
    pub fn new(weights: DMatrix<f64>) -> Result<Self> {
        if weights.nrows() != weights.ncols() {
            return Err(Error::DimensionMismatch {
                context: "weighted graph",
                expected: weights.nrows(),
                actual: weights.ncols(),
            });
        }
        let n = weights.nrows();
        for i in 0..n {
            if weights[(i, i)] != 0.0 {
                return Err(Error::NumericalFailure(format!(
                    "weight matrix diagonal entry {i} is nonzero"
                )));
            }
            for j in 0..n {
                let w = weights[(i, j)];
                if !(0.0..=1.0).contains(&w) || w != weights[(j, i)] {
                    return Err(Error::NumericalFailure(format!(
                        "weight ({i},{j}) = {w} is out of range or asymmetric"
                    )));
                }
            }
        }
        Ok(Self { weights })
    }

    /// Ground-truth adjacency of a set of bodies under the link model.
    pub fn from_bodies(bodies: &[RobotBody], params: &LinkParams) -> Self {
        let n = bodies.len();
        let mut weights = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in (i + 1)..n {
                let w = adjacency_weight(&bodies[i].position, &bodies[j].position, params);
                weights[(i, j)] = w;
                weights[(j, i)] = w;
            }
        }
        Self { weights }
    }

    pub fn n_robots(&self) -> usize {
        self.weights.nrows()
    }

    pub fn weights(&self) -> &DMatrix<f64> {
        &self.weights
    }
}

/// `L = D - A` with `D = diag(A 1)`.
pub fn laplacian(graph: &WeightedGraph) -> DMatrix<f64> {
    laplacian_of(graph.weights())
}

pub(crate) fn laplacian_of(adjacency: &DMatrix<f64>) -> DMatrix<f64> {
    let n = adjacency.nrows();
    let mut l = -adjacency.clone();
    for i in 0..n {
        l[(i, i)] = adjacency.row(i).sum() - adjacency[(i, i)];
    }
    l
}

/// Second-smallest Laplacian eigenpair.
#[derive(Debug, Clone, PartialEq)]
pub struct FiedlerResult {
    pub value: f64,
    pub vector: DVector<f64>,
    /// Third-smallest eigenvalue, kept to judge whether `value` is simple.
    pub next_value: f64,
}

impl FiedlerResult {
    pub fn spectral_gap(&self) -> f64 {
        self.next_value - self.value
    }

    pub fn is_repeated(&self) -> bool {
        self.spectral_gap() < MULTIPLICITY_GAP
    }
}

/// Fiedler value and unit Fiedler vector, with the first nonzero component of
/// the vector made positive.
pub fn fiedler(graph: &WeightedGraph) -> Result<FiedlerResult> {
    fiedler_of_laplacian(&laplacian(graph))
}

pub(crate) fn fiedler_of_laplacian(l: &DMatrix<f64>) -> Result<FiedlerResult> {
    let n = l.nrows();
    if n < 2 {
        return Err(Error::DimensionMismatch {
            context: "fiedler (robots)",
            expected: 2,
            actual: n,
        });
    }
    let eig = SymmetricEigen::try_new(l.clone(), EIGEN_EPS, EIGEN_MAX_ITER)
        .ok_or_else(|| Error::NumericalFailure("symmetric eigensolver did not converge".into()))?;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));

    let idx = order[1];
    let value = eig.eigenvalues[idx];
    let next_value = if n > 2 {
        eig.eigenvalues[order[2]]
    } else {
        f64::INFINITY
    };
    let mut vector: DVector<f64> = eig.eigenvectors.column(idx).into_owned();

    // Remove any residual component along the constant vector, renormalise.
    let mean = vector.mean();
    vector.add_scalar_mut(-mean);
    let norm = vector.norm();
    if norm.is_nan() || norm <= 0.0 || !value.is_finite() {
        return Err(Error::NumericalFailure("degenerate Fiedler vector".into()));
    }
    vector /= norm;
    let scale = l.iter().fold(0.0f64, |m, x| m.max(x.abs())).max(1.0);
    if let Some(first) = vector.iter().find(|x| x.abs() > 1e-12 * scale).copied() {
        if first < 0.0 {
            vector.neg_mut();
        }
    }
    // Clamp eigenvalue round-off below the theoretical floor of zero.
    let value = value.max(0.0);
    if next_value - value < MULTIPLICITY_GAP {
        log::warn!(
            "Fiedler value is (nearly) repeated: gap {:e}",
            next_value - value
        );
    }
    Ok(FiedlerResult {
        value,
        vector,
        next_value,
    })
}

/// Derivative of the Laplacian with respect to coordinate `axis` of robot `i`.
///
/// Uses the supplied adjacency (ground truth or an estimate) for the weights
/// `a_ij` of `i`'s neighbours; only entries coupling `i` to a neighbour move.
pub fn laplacian_position_derivative(
    bodies: &[RobotBody],
    edges: &EdgeSet,
    params: &LinkParams,
    i: usize,
    axis: usize,
) -> Result<DMatrix<f64>> {
    let adjacency = WeightedGraph::from_bodies(bodies, params);
    laplacian_derivative_with(adjacency.weights(), bodies, edges, params, i, axis)
}

pub(crate) fn laplacian_derivative_with(
    adjacency: &DMatrix<f64>,
    bodies: &[RobotBody],
    edges: &EdgeSet,
    params: &LinkParams,
    i: usize,
    axis: usize,
) -> Result<DMatrix<f64>> {
    let n = bodies.len();
    let mut da = DMatrix::zeros(n, n);
    for j in neighbors(i, edges) {
        let diff = &bodies[i].position - &bodies[j].position;
        let dist = diff.norm();
        if dist <= 1e-12 {
            return Err(Error::DegenerateGeometry(i, j));
        }
        let a = adjacency[(i, j)];
        let v = -params.alpha * (1.0 - a) * a * diff[axis] / dist;
        da[(i, j)] = v;
        da[(j, i)] = v;
    }
    Ok(laplacian_of(&da))
}

/// Gradient of the Fiedler value with respect to one robot's position.
#[derive(Debug, Clone, PartialEq)]
pub struct FiedlerGradient {
    pub robot: usize,
    pub grad: DVector<f64>,
}

/// Analytic gradient `m_i[r] = v2' (dL/dp_{i,r}) v2` on the ground-truth graph.
pub fn fiedler_gradient(
    bodies: &[RobotBody],
    edges: &EdgeSet,
    params: &LinkParams,
    fiedler: &FiedlerResult,
    i: usize,
) -> Result<FiedlerGradient> {
    let adjacency = WeightedGraph::from_bodies(bodies, params);
    fiedler_gradient_with(
        adjacency.weights(),
        bodies,
        edges,
        params,
        &fiedler.vector,
        i,
    )
}

/// Same as [`fiedler_gradient`] but reading weights from `adjacency` (e.g. a
/// robot's own estimate) and using the supplied Fiedler vector.
pub fn fiedler_gradient_with(
    adjacency: &DMatrix<f64>,
    bodies: &[RobotBody],
    edges: &EdgeSet,
    params: &LinkParams,
    vector: &DVector<f64>,
    i: usize,
) -> Result<FiedlerGradient> {
    let dim = bodies[i].position.len();
    let mut grad = DVector::zeros(dim);
    for axis in 0..dim {
        let dl = laplacian_derivative_with(adjacency, bodies, edges, params, i, axis)?;
        grad[axis] = vector.dot(&(&dl * vector));
    }
    Ok(FiedlerGradient { robot: i, grad })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::link::edge_set;
    use approx::assert_relative_eq;

    fn graph(rows: &[&[f64]]) -> WeightedGraph {
        let n = rows.len();
        WeightedGraph::new(DMatrix::from_fn(n, n, |i, j| rows[i][j])).unwrap()
    }

    #[test]
    fn two_robot_laplacian() {
        let l = laplacian(&graph(&[&[0.0, 0.6], &[0.6, 0.0]]));
        assert_eq!(l, DMatrix::from_row_slice(2, 2, &[0.6, -0.6, -0.6, 0.6]));
    }

    #[test]
    fn empty_graph_laplacian_is_zero() {
        let l = laplacian(&WeightedGraph::new(DMatrix::zeros(4, 4)).unwrap());
        assert!(l.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn path_laplacian() {
        let l = laplacian(&graph(&[
            &[0.0, 1.0, 0.0],
            &[1.0, 0.0, 1.0],
            &[0.0, 1.0, 0.0],
        ]));
        let expected =
            DMatrix::from_row_slice(3, 3, &[1.0, -1.0, 0.0, -1.0, 2.0, -1.0, 0.0, -1.0, 1.0]);
        assert_eq!(l, expected);
    }

    #[test]
    fn complete_graph_fiedler_is_n() {
        let f = fiedler(&graph(&[
            &[0.0, 1.0, 1.0],
            &[1.0, 0.0, 1.0],
            &[1.0, 1.0, 0.0],
        ]))
        .unwrap();
        assert_relative_eq!(f.value, 3.0, epsilon = 1e-12);
    }

    #[test]
    fn disconnected_fiedler_is_zero() {
        let f = fiedler(&graph(&[&[0.0, 0.0], &[0.0, 0.0]])).unwrap();
        assert_eq!(f.value, 0.0);
    }

    #[test]
    fn path_fiedler_is_one() {
        // Characteristic polynomial of the unit path: -x (x - 1)(x - 3).
        let f = fiedler(&graph(&[
            &[0.0, 1.0, 0.0],
            &[1.0, 0.0, 1.0],
            &[0.0, 1.0, 0.0],
        ]))
        .unwrap();
        assert_relative_eq!(f.value, 1.0, epsilon = 1e-12);
        assert_relative_eq!(f.next_value, 3.0, epsilon = 1e-12);
        assert!(f.vector[0] > 0.0);
    }

    #[test]
    fn single_robot_is_rejected() {
        assert!(fiedler(&WeightedGraph::new(DMatrix::zeros(1, 1)).unwrap()).is_err());
    }

    #[test]
    fn asymmetric_weights_rejected() {
        let m = DMatrix::from_row_slice(2, 2, &[0.0, 0.5, 0.4, 0.0]);
        assert!(WeightedGraph::new(m).is_err());
    }

    fn two_robots() -> (Vec<RobotBody>, LinkParams) {
        let params = LinkParams::new(2.0, 1.0, 0.05);
        let bodies = vec![
            RobotBody::new(0, DVector::from_vec(vec![0.0, 0.0]), 0.2),
            RobotBody::new(1, DVector::from_vec(vec![2.0, 0.0]), 0.2),
        ];
        (bodies, params)
    }

    #[test]
    fn two_robot_laplacian_derivative() {
        let (bodies, params) = two_robots();
        let edges = edge_set(&bodies, &params);
        let dl = laplacian_position_derivative(&bodies, &edges, &params, 0, 0).unwrap();
        let expected = DMatrix::from_row_slice(2, 2, &[0.25, -0.25, -0.25, 0.25]);
        assert_relative_eq!(dl, expected, epsilon = 1e-15);
        let dly = laplacian_position_derivative(&bodies, &edges, &params, 0, 1).unwrap();
        assert!(dly.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn two_robot_gradient() {
        let (bodies, params) = two_robots();
        let edges = edge_set(&bodies, &params);
        let f = fiedler(&WeightedGraph::from_bodies(&bodies, &params)).unwrap();
        let g = fiedler_gradient(&bodies, &edges, &params, &f, 0).unwrap();
        assert_relative_eq!(g.grad[0], 0.5, epsilon = 1e-12);
        assert_relative_eq!(g.grad[1], 0.0, epsilon = 1e-15);
    }

    #[test]
    fn isolated_robot_has_zero_derivative_and_gradient() {
        let params = LinkParams::new(2.0, 1.0, 0.05);
        let bodies = vec![
            RobotBody::new(0, DVector::from_vec(vec![0.0, 0.0]), 0.2),
            RobotBody::new(1, DVector::from_vec(vec![1.0, 0.0]), 0.2),
            RobotBody::new(2, DVector::from_vec(vec![40.0, 0.0]), 0.2),
        ];
        let edges = edge_set(&bodies, &params);
        let dl = laplacian_position_derivative(&bodies, &edges, &params, 2, 0).unwrap();
        assert!(dl.iter().all(|&x| x == 0.0));
        let f = fiedler(&WeightedGraph::from_bodies(&bodies, &params)).unwrap();
        let g = fiedler_gradient(&bodies, &edges, &params, &f, 2).unwrap();
        assert!(g.grad.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn coincident_neighbours_are_degenerate() {
        let params = LinkParams::new(2.0, 1.0, 0.05);
        let bodies = vec![
            RobotBody::new(0, DVector::from_vec(vec![1.0, 1.0]), 0.2),
            RobotBody::new(1, DVector::from_vec(vec![1.0, 1.0]), 0.2),
        ];
        let edges = edge_set(&bodies, &params);
        assert_eq!(
            laplacian_position_derivative(&bodies, &edges, &params, 0, 0),
            Err(Error::DegenerateGeometry(0, 1))
        );
    }
}

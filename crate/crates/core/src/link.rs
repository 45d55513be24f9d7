//! Logistic link-quality model and the communication edge set derived from it.
//!
//! The weight of a link is the expected packet reception rate
//! `w(d) = 1 / (1 + exp(alpha * (d - d50)))`, which equals 0.5 at `d50` and
//! decays with distance. A pair of robots is connected when that weight is at
//! least `w_min`; the adjacency entry of a connected pair is its weight and
//! the entry of an unconnected pair is zero.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

/// Parameters of the logistic link model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkParams {
    /// Distance at which link quality is 50 %, in meters.
    pub d50: f64,
    /// Steepness: four times the attenuation rate at `d50`, in 1/m.
    pub alpha: f64,
    /// Minimum weight for an edge to exist.
    #[serde(default = "default_w_min")]
    pub w_min: f64,
}

fn default_w_min() -> f64 {
    0.05
}

impl LinkParams {
    pub fn new(d50: f64, alpha: f64, w_min: f64) -> Self {
        Self { d50, alpha, w_min }
    }

    /// Largest distance at which two robots still share an edge.
    pub fn max_range(&self) -> f64 {
        self.d50 + ((1.0 - self.w_min) / self.w_min).ln() / self.alpha
    }
}

/// A robot's physical footprint: a ball of `radius` centred at `position`.
#[derive(Debug, Clone, PartialEq)]
pub struct RobotBody {
    pub id: usize,
    pub position: DVector<f64>,
    pub radius: f64,
}

impl RobotBody {
    pub fn new(id: usize, position: DVector<f64>, radius: f64) -> Self {
        Self {
            id,
            position,
            radius,
        }
    }
}

/// Logistic weight at distance `d`.
pub fn weight_at_distance(d: f64, params: &LinkParams) -> f64 {
    // e^{-x} / (1 + e^{-x}) == 1 / (1 + e^{x}); the latter saturates cleanly.
    1.0 / (1.0 + (params.alpha * (d - params.d50)).exp())
}

/// Derivative of the logistic weight with respect to distance, `-alpha (1 - w) w`.
pub fn weight_distance_derivative(w: f64, params: &LinkParams) -> f64 {
    -params.alpha * (1.0 - w) * w
}

/// Logistic link weight between two positions.
pub fn link_weight(p_i: &DVector<f64>, p_j: &DVector<f64>, params: &LinkParams) -> f64 {
    weight_at_distance((p_i - p_j).norm(), params)
}

/// Adjacency entry between two positions: the link weight when the pair is
/// connected, zero otherwise.
pub fn adjacency_weight(p_i: &DVector<f64>, p_j: &DVector<f64>, params: &LinkParams) -> f64 {
    let w = link_weight(p_i, p_j, params);
    if w >= params.w_min {
        w
    } else {
        0.0
    }
}

/// Undirected communication edges as sorted `(i, j)` pairs with `i < j`,
/// ordered lexicographically.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct EdgeSet {
    n: usize,
    pairs: Vec<(usize, usize)>,
}

impl EdgeSet {
    /// Builds an edge set over `n` robots from arbitrary unordered pairs.
    pub fn from_pairs(n: usize, pairs: impl IntoIterator<Item = (usize, usize)>) -> Self {
        let mut pairs: Vec<_> = pairs
            .into_iter()
            .filter(|(a, b)| a != b)
            .map(|(a, b)| (a.min(b), a.max(b)))
            .collect();
        pairs.sort_unstable();
        pairs.dedup();
        Self { n, pairs }
    }

    pub fn n_robots(&self) -> usize {
        self.n
    }

    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn contains(&self, i: usize, j: usize) -> bool {
        let key = (i.min(j), i.max(j));
        self.pairs.binary_search(&key).is_ok()
    }

    /// Every robot reachable from robot 0 (trivially true below two robots).
    pub fn is_connected(&self) -> bool {
        if self.n < 2 {
            return true;
        }
        let mut seen = vec![false; self.n];
        seen[0] = true;
        let mut stack = vec![0];
        while let Some(i) = stack.pop() {
            for j in neighbors(i, self) {
                if !seen[j] {
                    seen[j] = true;
                    stack.push(j);
                }
            }
        }
        seen.into_iter().all(|s| s)
    }
}

/// Edges between every pair whose link weight reaches `w_min`.
pub fn edge_set(bodies: &[RobotBody], params: &LinkParams) -> EdgeSet {
    let mut pairs = Vec::new();
    for a in 0..bodies.len() {
        for b in (a + 1)..bodies.len() {
            if link_weight(&bodies[a].position, &bodies[b].position, params) >= params.w_min {
                pairs.push((bodies[a].id, bodies[b].id));
            }
        }
    }
    let n = bodies.iter().map(|b| b.id + 1).max().unwrap_or(0);
    EdgeSet::from_pairs(n, pairs)
}

/// Neighbours of robot `i`, ascending.
pub fn neighbors(i: usize, edges: &EdgeSet) -> Vec<usize> {
    let mut out: Vec<usize> = edges
        .pairs()
        .iter()
        .filter_map(|&(a, b)| {
            if a == i {
                Some(b)
            } else if b == i {
                Some(a)
            } else {
                None
            }
        })
        .collect();
    out.sort_unstable();
    out
}

//! Distributed estimation and agreement protocols, all stepped once per
//! synchronous round with neighbour values from the previous round:
//!
//! * adjacency estimation: direct observation of links to and among
//!   neighbours, max consensus for everything else;
//! * convergence consensus: OR consensus on readiness flags, min consensus
//!   on hop distances and on the agreed switch step.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::graph::{fiedler_of_laplacian, laplacian_of, FiedlerResult};
use crate::link::{adjacency_weight, LinkParams};

/// Sentinel for "unknown" hop distances and "not scheduled" switch steps.
pub const INFINITE: u64 = u64::MAX;

/// One robot's estimate of the full adjacency matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct AdjacencyEstimate {
    pub owner: usize,
    pub matrix: DMatrix<f64>,
}

impl AdjacencyEstimate {
    /// All-zero estimate.
    pub fn new(owner: usize, n_robots: usize) -> Self {
        Self {
            owner,
            matrix: DMatrix::zeros(n_robots, n_robots),
        }
    }

    pub fn n_robots(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn reset(&mut self) {
        self.matrix.fill(0.0);
    }

    fn set(&mut self, j: usize, l: usize, w: f64) {
        self.matrix[(j, l)] = w;
        self.matrix[(l, j)] = w;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimationParams {
    /// Largest per-round entry change still counted as converged.
    #[serde(default = "default_zeta")]
    pub zeta: f64,
}

fn default_zeta() -> f64 {
    1e-6
}

impl Default for EstimationParams {
    fn default() -> Self {
        Self {
            zeta: default_zeta(),
        }
    }
}

/// Whether entry `(j, l)` is measured directly by robot `owner` with the
/// given (sorted) neighbour list.
fn is_observed(owner: usize, neighbors: &[usize], j: usize, l: usize) -> bool {
    if j == l {
        return false;
    }
    let jn = neighbors.binary_search(&j).is_ok();
    let ln = neighbors.binary_search(&l).is_ok();
    (j == owner && ln) || (l == owner && jn) || (jn && ln)
}

/// Overwrites the entries a robot can measure itself: links to each
/// neighbour and links between every pair of neighbours. `neighbors` holds
/// `(id, position)` in ascending id order.
pub fn local_adjacency_observe(
    estimate: &mut AdjacencyEstimate,
    own_position: &DVector<f64>,
    neighbors: &[(usize, DVector<f64>)],
    params: &LinkParams,
) {
    let me = estimate.owner;
    for (a, (j, pj)) in neighbors.iter().enumerate() {
        estimate.set(me, *j, adjacency_weight(own_position, pj, params));
        for (l, pl) in &neighbors[a + 1..] {
            estimate.set(*j, *l, adjacency_weight(pj, pl, params));
        }
    }
}

/// Max consensus on every entry the robot does not measure itself. Takes the
/// maximum of the robot's own value and its neighbours' previous-round
/// values; the diagonal stays zero.
pub fn max_consensus_merge(
    estimate: &mut AdjacencyEstimate,
    neighbor_ids: &[usize],
    neighbor_estimates: &[&DMatrix<f64>],
) {
    if neighbor_estimates.is_empty() {
        return;
    }
    let me = estimate.owner;
    let n = estimate.n_robots();
    for j in 0..n {
        for l in (j + 1)..n {
            if is_observed(me, neighbor_ids, j, l) {
                continue;
            }
            let best = neighbor_estimates
                .iter()
                .map(|m| m[(j, l)])
                .fold(estimate.matrix[(j, l)], f64::max);
            estimate.set(j, l, best);
        }
    }
}

/// Largest absolute entry change between consecutive estimates is at most
/// `zeta`.
pub fn adjacency_converged(
    current: &DMatrix<f64>,
    previous: &DMatrix<f64>,
    params: &EstimationParams,
) -> bool {
    current
        .iter()
        .zip(previous.iter())
        .all(|(a, b)| (a - b).abs() <= params.zeta)
}

/// Fiedler pair of the Laplacian built from an estimated adjacency.
pub fn estimate_fiedler(estimate: &AdjacencyEstimate) -> Result<FiedlerResult> {
    fiedler_of_laplacian(&laplacian_of(&estimate.matrix))
}

/// Readiness flags, hop distances and the agreed switch step, as held by one
/// robot.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConvergenceState {
    pub owner: usize,
    pub ready: Vec<bool>,
    pub dist: Vec<u64>,
    pub switch_at: u64,
}

impl ConvergenceState {
    pub fn new(owner: usize, n_robots: usize) -> Self {
        let mut dist = vec![INFINITE; n_robots];
        dist[owner] = 0;
        Self {
            owner,
            ready: vec![false; n_robots],
            dist,
            switch_at: INFINITE,
        }
    }

    pub fn all_ready(&self) -> bool {
        self.ready.iter().all(|&b| b)
    }
}

/// One synchronous round of the convergence protocol at step `k`.
pub fn convergence_step(
    state: &mut ConvergenceState,
    neighbor_states: &[&ConvergenceState],
    own_converged: bool,
    k: u64,
) {
    let me = state.owner;
    state.ready[me] |= own_converged;
    for nb in neighbor_states {
        for (j, flag) in state.ready.iter_mut().enumerate() {
            if j != me {
                *flag |= nb.ready[j];
            }
        }
        for (j, d) in state.dist.iter_mut().enumerate() {
            if j != me && nb.dist[j] != INFINITE {
                *d = (*d).min(nb.dist[j] + 1);
            }
        }
        state.switch_at = state.switch_at.min(nb.switch_at);
    }
    state.dist[me] = 0;
    if state.all_ready() && state.dist.iter().all(|&d| d != INFINITE) {
        let horizon = state.dist.iter().copied().max().unwrap_or(0);
        state.switch_at = state.switch_at.min(k + horizon);
    }
}

/// Fires exactly on the agreed step.
pub fn should_switch(state: &ConvergenceState, k: u64) -> bool {
    state.switch_at != INFINITE && k == state.switch_at
}

/// Back to the initial state: nobody ready, distances unknown, no switch.
pub fn phase_reset(state: &mut ConvergenceState) {
    *state = ConvergenceState::new(state.owner, state.ready.len());
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn pos(x: f64) -> DVector<f64> {
        DVector::from_vec(vec![x, 0.0])
    }

    fn chain_params() -> LinkParams {
        LinkParams::new(2.0, 4.0, 0.05)
    }

    #[test]
    fn middle_of_chain_observes_both_links_and_the_gap() {
        let params = chain_params();
        let mut est = AdjacencyEstimate::new(1, 3);
        local_adjacency_observe(
            &mut est,
            &pos(2.0),
            &[(0, pos(0.0)), (2, pos(4.0))],
            &params,
        );
        assert_eq!(est.matrix[(0, 1)], 0.5);
        assert_eq!(est.matrix[(1, 2)], 0.5);
        // 0 and 2 are 4 m apart: below the edge threshold, so the entry is 0.
        assert_eq!(est.matrix[(0, 2)], 0.0);
        assert_eq!(est.matrix, est.matrix.transpose());
        assert!(est.matrix.diagonal().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn isolated_observe_is_noop() {
        let mut est = AdjacencyEstimate::new(0, 3);
        est.matrix[(1, 2)] = 0.4;
        est.matrix[(2, 1)] = 0.4;
        let before = est.clone();
        local_adjacency_observe(&mut est, &pos(0.0), &[], &chain_params());
        assert_eq!(est, before);
    }

    #[test]
    fn merge_takes_maximum() {
        let mut est = AdjacencyEstimate::new(0, 4);
        est.set(2, 3, 0.3);
        let mut a = DMatrix::zeros(4, 4);
        a[(2, 3)] = 0.5;
        a[(3, 2)] = 0.5;
        let mut b = DMatrix::zeros(4, 4);
        b[(2, 3)] = 0.1;
        b[(3, 2)] = 0.1;
        max_consensus_merge(&mut est, &[1], &[&a, &b]);
        assert_eq!(est.matrix[(2, 3)], 0.5);
        assert_eq!(est.matrix[(3, 2)], 0.5);
    }

    #[test]
    fn merge_without_neighbors_is_noop() {
        let mut est = AdjacencyEstimate::new(0, 3);
        est.set(1, 2, 0.7);
        let before = est.clone();
        max_consensus_merge(&mut est, &[], &[]);
        assert_eq!(est, before);
    }

    #[test]
    fn merge_leaves_observed_entries_alone() {
        let mut est = AdjacencyEstimate::new(0, 3);
        est.set(0, 1, 0.2);
        let mut nb = DMatrix::zeros(3, 3);
        nb[(0, 1)] = 0.9;
        nb[(1, 0)] = 0.9;
        max_consensus_merge(&mut est, &[1], &[&nb]);
        assert_eq!(est.matrix[(0, 1)], 0.2);
    }

    #[test]
    fn chain_wavefront() {
        // Static chain 0-1-2-3: the (0,1) link is measured by robots 0 and 1
        // in round 0 and has to hop 1 -> 2 -> 3, one hop per round.
        let params = chain_params();
        let positions: Vec<_> = (0..4).map(|i| pos(2.0 * i as f64)).collect();
        let nbrs = |i: usize| -> Vec<usize> {
            [i.wrapping_sub(1), i + 1]
                .into_iter()
                .filter(|&j| j < 4)
                .collect()
        };
        let mut ests: Vec<_> = (0..4).map(|i| AdjacencyEstimate::new(i, 4)).collect();
        let mut seen_at = None;
        for round in 0..4 {
            let snapshot: Vec<DMatrix<f64>> = ests.iter().map(|e| e.matrix.clone()).collect();
            for (i, est) in ests.iter_mut().enumerate() {
                let ids = nbrs(i);
                let view: Vec<_> = ids.iter().map(|&j| (j, positions[j].clone())).collect();
                local_adjacency_observe(est, &positions[i], &view, &params);
                let inbox: Vec<&DMatrix<f64>> = ids.iter().map(|&j| &snapshot[j]).collect();
                max_consensus_merge(est, &ids, &inbox);
            }
            if seen_at.is_none() && ests[3].matrix[(0, 1)] > 0.0 {
                seen_at = Some(round);
            }
        }
        assert_eq!(seen_at, Some(2));
        // after diameter rounds everybody has the true chain
        for est in &ests {
            assert_eq!(est.matrix[(0, 1)], 0.5);
            assert_eq!(est.matrix[(2, 3)], 0.5);
            assert_eq!(est.matrix[(0, 3)], 0.0);
        }
    }

    #[test]
    fn convergence_test_on_changes() {
        let p = EstimationParams { zeta: 1e-3 };
        let a = DMatrix::from_element(3, 3, 0.2);
        assert!(adjacency_converged(&a, &a, &p));
        let mut b = a.clone();
        b[(0, 1)] += 2e-3;
        assert!(!adjacency_converged(&b, &a, &p));
        let c = a.add_scalar(5e-4);
        assert!(adjacency_converged(&c, &a, &p));
    }

    #[test]
    fn estimate_fiedler_on_empty_estimate_is_zero() {
        let est = AdjacencyEstimate::new(0, 4);
        assert_eq!(estimate_fiedler(&est).unwrap().value, 0.0);
    }

    #[test]
    fn estimate_equal_to_truth_matches_truth() {
        let m = DMatrix::from_row_slice(3, 3, &[0.0, 0.7, 0.2, 0.7, 0.0, 0.4, 0.2, 0.4, 0.0]);
        let est = AdjacencyEstimate {
            owner: 0,
            matrix: m.clone(),
        };
        let truth = crate::graph::fiedler(&crate::graph::WeightedGraph::new(m).unwrap()).unwrap();
        let e = estimate_fiedler(&est).unwrap();
        assert_eq!(e.value, truth.value);
        assert_relative_eq!(e.vector, truth.vector);
    }

    #[test]
    fn switch_time_when_all_ready() {
        let mut s = ConvergenceState::new(0, 4);
        s.ready = vec![true; 4];
        s.dist = vec![0, 1, 2, 3];
        convergence_step(&mut s, &[], true, 7);
        assert_eq!(s.switch_at, 10);
        assert!(should_switch(&s, 10));
        assert!(!should_switch(&s, 9));
    }

    #[test]
    fn nobody_ready_never_switches() {
        let mut states: Vec<_> = (0..3).map(|i| ConvergenceState::new(i, 3)).collect();
        for k in 0..10 {
            let snap = states.clone();
            for (i, st) in states.iter_mut().enumerate() {
                let nb: Vec<&ConvergenceState> = snap
                    .iter()
                    .enumerate()
                    .filter(|(j, _)| (*j as isize - i as isize).abs() == 1)
                    .map(|(_, s)| s)
                    .collect();
                convergence_step(st, &nb, false, k);
            }
        }
        assert!(states.iter().all(|s| s.switch_at == INFINITE));
        assert!(!should_switch(&states[0], INFINITE));
    }

    #[test]
    fn path_distances_after_two_rounds() {
        let mut states: Vec<_> = (0..3).map(|i| ConvergenceState::new(i, 3)).collect();
        for k in 0..2 {
            let snap = states.clone();
            for (i, st) in states.iter_mut().enumerate() {
                let nb: Vec<&ConvergenceState> = snap
                    .iter()
                    .enumerate()
                    .filter(|(j, _)| (*j as isize - i as isize).abs() == 1)
                    .map(|(_, s)| s)
                    .collect();
                convergence_step(st, &nb, false, k);
            }
        }
        assert_eq!(states[0].dist, vec![0, 1, 2]);
    }

    #[test]
    fn reset_restores_initial_state() {
        let mut s = ConvergenceState::new(2, 4);
        s.ready = vec![true; 4];
        s.dist = vec![1, 2, 0, 1];
        s.switch_at = 12;
        phase_reset(&mut s);
        assert_eq!(s, ConvergenceState::new(2, 4));
        phase_reset(&mut s);
        assert_eq!(s, ConvergenceState::new(2, 4));
        assert_eq!(s.dist[2], 0);
    }
}

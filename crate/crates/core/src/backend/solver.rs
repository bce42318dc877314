//! GNC-robustified nonlinear least squares on SE(2) pose graphs.
//!
//! The inner solver is Levenberg-Marquardt over the standard relative-pose
//! residual e = t2v(Z^-1 X_i^-1 X_j). The normal equations are solved with an
//! envelope Cholesky factorization after reverse Cuthill-McKee reordering,
//! which keeps big loop-heavy graphs cheap without an external sparse solver.
//! Truncated-least-squares GNC anneals per-loop-edge weights toward {0, 1};
//! odometry edges are never down-weighted.

use super::graph::{Edge, EdgeKind, GraphError, NodeKey, PoseGraph};
use crate::geometry::{wrap_angle, Pose2};
use crate::world::RobotId;
use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// 0.99 quantile of the chi-square distribution with 3 degrees of freedom;
/// the default truncation point for the weighted residual norm.
pub const CHI2_0_99_3DOF: f64 = 11.344866730442716;

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct GncConfig {
    /// Truncated-least-squares inlier threshold on the weighted residual norm.
    pub c: f64,
    /// Annealing factor for the control parameter mu (> 1).
    pub mu_update_factor: f64,
    pub max_outer_iterations: usize,
    /// Convergence tolerance on the per-edge weight change.
    pub weight_tol: f64,
    /// When false, all weights stay pinned to 1 (non-robust baseline).
    pub robust: bool,
}

impl Default for GncConfig {
    fn default() -> Self {
        Self {
            c: CHI2_0_99_3DOF.sqrt(),
            mu_update_factor: 1.4,
            max_outer_iterations: 60,
            weight_tol: 1e-3,
            robust: true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct OptimizationResult {
    pub poses: BTreeMap<NodeKey, Pose2>,
    /// Final GNC weight per loop edge, keyed by (author, seq).
    pub loop_weights: BTreeMap<(RobotId, u64), f64>,
    pub final_cost: f64,
    pub iterations: usize,
}

/// Residual of one edge at the given endpoint estimates:
/// `t2v(Z^-1 (X_from^-1 X_to))` with the angle wrapped.
pub fn edge_residual(edge: &Edge, x_from: &Pose2, x_to: &Pose2) -> Vector3<f64> {
    let pred = x_from.relative_to(x_to);
    let err = edge.measurement.inverse().compose(&pred);
    Vector3::new(err.x, err.y, wrap_angle(err.theta))
}

/// Analytic Jacobians of `edge_residual` with respect to the from- and
/// to-pose coordinates (x, y, theta).
pub fn edge_jacobians(edge: &Edge, x_from: &Pose2, x_to: &Pose2) -> (Matrix3<f64>, Matrix3<f64>) {
    let (si, ci) = x_from.theta.sin_cos();
    let (sz, cz) = edge.measurement.theta.sin_cos();
    // R_z^T R_i^T = R(-(theta_z + theta_i))
    let (s_sum, c_sum) = (sz * ci + cz * si, cz * ci - sz * si);
    let rzt_rit = Matrix3::new(c_sum, s_sum, 0.0, -s_sum, c_sum, 0.0, 0.0, 0.0, 0.0);
    let dt = [x_to.x - x_from.x, x_to.y - x_from.y];
    // d(R_i^T)/d(theta_i) applied to (t_j - t_i), then rotated by R_z^T.
    let d_rit_dt = [-si * dt[0] + ci * dt[1], -ci * dt[0] - si * dt[1]];
    let a02 = cz * d_rit_dt[0] + sz * d_rit_dt[1];
    let a12 = -sz * d_rit_dt[0] + cz * d_rit_dt[1];
    let mut a = -rzt_rit;
    a[(0, 2)] = a02;
    a[(1, 2)] = a12;
    a[(2, 2)] = -1.0;
    let mut b = rzt_rit;
    b[(2, 2)] = 1.0;
    (a, b)
}

/// Weighted squared residual `e^T Omega e` of one edge.
fn weighted_sq(edge: &Edge, x_from: &Pose2, x_to: &Pose2) -> f64 {
    let e = edge_residual(edge, x_from, x_to);
    (e.transpose() * edge.information_matrix() * e)[(0, 0)]
}

/// TLS weight for squared residual `r_sq` at control parameter `mu`.
fn tls_weight(r_sq: f64, c_sq: f64, mu: f64) -> f64 {
    let upper = (mu + 1.0) / mu * c_sq;
    let lower = mu / (mu + 1.0) * c_sq;
    if r_sq >= upper {
        0.0
    } else if r_sq <= lower {
        1.0
    } else {
        ((c_sq * mu * (mu + 1.0) / r_sq).sqrt() - mu).clamp(0.0, 1.0)
    }
}

/// Spanning-tree initialization with consensus bridging.
///
/// Every robot's chain is dead-reckoned from its odometry edges; robot frames
/// are then placed by walking a robot-level tree from the anchor, choosing
/// each bridge as the loop edge whose implied frame transform agrees with the
/// most other loop edges between the two robots (a coarse one-edge consensus
/// that keeps a single gross outlier from misplacing a whole chain).
fn initialize_estimates(graph: &PoseGraph, anchor: &NodeKey) -> BTreeMap<NodeKey, Pose2> {
    // Per-robot dead-reckoned chains in each robot's own frame.
    let mut chains: BTreeMap<RobotId, BTreeMap<u32, Pose2>> = BTreeMap::new();
    let mut odo: BTreeMap<(RobotId, u32), &Edge> = BTreeMap::new();
    for e in graph.edges() {
        if e.kind == EdgeKind::Odometry {
            odo.insert((e.from.0, e.from.1), e);
        }
    }
    for (robot, kf) in graph.nodes().keys() {
        let chain = chains.entry(*robot).or_default();
        if chain.contains_key(kf) {
            continue;
        }
        // Chains are contiguous from 0; walk forward once per robot.
        if chain.is_empty() {
            let mut pose = Pose2::identity();
            let mut k = 0u32;
            chain.insert(0, pose);
            while let Some(e) = odo.get(&(*robot, k)) {
                pose = pose.compose(&e.measurement);
                k += 1;
                chain.insert(k, pose);
            }
        }
    }
    // Nodes without an odometry path from kf0 (shouldn't happen in practice)
    // fall back to their stored estimates later.

    let anchor_est = graph.estimate(anchor).unwrap_or_else(Pose2::identity);
    let anchor_robot = anchor.0;
    // Frame transform per robot: world = frame[robot] ∘ chain[robot][kf].
    let mut frames: BTreeMap<RobotId, Pose2> = BTreeMap::new();
    let anchor_chain_pose = chains
        .get(&anchor_robot)
        .and_then(|c| c.get(&anchor.1))
        .copied()
        .unwrap_or_else(Pose2::identity);
    frames.insert(anchor_robot, anchor_est.compose(&anchor_chain_pose.inverse()));

    let robots: Vec<RobotId> = chains.keys().copied().collect();
    while frames.len() < robots.len() {
        // Candidate bridges between a placed and an unplaced robot.
        let mut best_pair: Option<(usize, RobotId, RobotId)> = None;
        let mut counts: BTreeMap<(RobotId, RobotId), usize> = BTreeMap::new();
        for e in graph.edges() {
            if e.kind != EdgeKind::InterRobotLoop {
                continue;
            }
            let (pf, pt) = (frames.contains_key(&e.from.0), frames.contains_key(&e.to.0));
            if pf != pt {
                let (placed, unplaced) = if pf {
                    (e.from.0, e.to.0)
                } else {
                    (e.to.0, e.from.0)
                };
                *counts.entry((placed, unplaced)).or_default() += 1;
            }
        }
        for ((p, u), n) in &counts {
            let better = match best_pair {
                None => true,
                Some((bn, bp, bu)) => *n > bn || (*n == bn && (*p, *u) < (bp, bu)),
            };
            if better {
                best_pair = Some((*n, *p, *u));
            }
        }
        let Some((_, placed, unplaced)) = best_pair else {
            // Disconnected at the robot level; leave remaining frames at
            // identity (optimize() has already rejected disconnected graphs).
            for r in &robots {
                frames.entry(*r).or_insert_with(Pose2::identity);
            }
            break;
        };
        // Implied frame for `unplaced` per bridge edge, then coarse binning.
        let mut implied: Vec<(Pose2, (RobotId, u64))> = Vec::new();
        for e in graph.edges() {
            if e.kind != EdgeKind::InterRobotLoop {
                continue;
            }
            let (pf, pt) = (e.from.0, e.to.0);
            let frame = if pf == placed && pt == unplaced {
                let cf = chains[&pf].get(&e.from.1);
                let ct = chains[&pt].get(&e.to.1);
                match (cf, ct) {
                    (Some(cf), Some(ct)) => Some(
                        frames[&placed]
                            .compose(cf)
                            .compose(&e.measurement)
                            .compose(&ct.inverse()),
                    ),
                    _ => None,
                }
            } else if pt == placed && pf == unplaced {
                let cf = chains[&pf].get(&e.from.1);
                let ct = chains[&pt].get(&e.to.1);
                match (cf, ct) {
                    (Some(cf), Some(ct)) => Some(
                        frames[&placed]
                            .compose(ct)
                            .compose(&e.measurement.inverse())
                            .compose(&cf.inverse()),
                    ),
                    _ => None,
                }
            } else {
                None
            };
            if let Some(f) = frame {
                implied.push((f, (e.author, e.seq)));
            }
        }
        let mut bins: BTreeMap<(i64, i64, i64), Vec<usize>> = BTreeMap::new();
        for (i, (f, _)) in implied.iter().enumerate() {
            let key = (
                (f.x / 3.0).floor() as i64,
                (f.y / 3.0).floor() as i64,
                (f.theta / 0.15).floor() as i64,
            );
            bins.entry(key).or_default().push(i);
        }
        let winner_bin = bins
            .iter()
            .max_by(|a, b| a.1.len().cmp(&b.1.len()).then(b.0.cmp(a.0)))
            .map(|(_, v)| v.clone())
            .unwrap_or_default();
        let winner = winner_bin
            .iter()
            .min_by_key(|i| implied[**i].1)
            .copied()
            .unwrap_or(0);
        frames.insert(unplaced, implied[winner].0);
    }

    let mut out = BTreeMap::new();
    for (key, stored) in graph.nodes() {
        let init = chains
            .get(&key.0)
            .and_then(|c| c.get(&key.1))
            .map(|chain_pose| frames[&key.0].compose(chain_pose))
            .unwrap_or(*stored);
        out.insert(*key, init);
    }
    out
}

/// Reverse Cuthill-McKee ordering of the node-level adjacency.
fn rcm_order(n: usize, adjacency: &[Vec<usize>]) -> Vec<usize> {
    let degree: Vec<usize> = adjacency.iter().map(|a| a.len()).collect();
    let bfs = |start: usize| -> Vec<usize> {
        let mut visited = vec![false; n];
        let mut order = Vec::with_capacity(n);
        let mut queue = std::collections::VecDeque::new();
        visited[start] = true;
        queue.push_back(start);
        while let Some(u) = queue.pop_front() {
            order.push(u);
            let mut next: Vec<usize> = adjacency[u]
                .iter()
                .copied()
                .filter(|v| !visited[*v])
                .collect();
            next.sort_by_key(|v| (degree[*v], *v));
            next.dedup();
            for v in next {
                if !visited[v] {
                    visited[v] = true;
                    queue.push_back(v);
                }
            }
        }
        // Pick up any disconnected leftovers deterministically.
        for v in 0..n {
            if !visited[v] {
                order.push(v);
            }
        }
        order
    };
    // Pseudo-peripheral start: begin at the min-degree node, hop to the last
    // BFS node twice.
    let mut start = (0..n).min_by_key(|v| (degree[*v], *v)).unwrap_or(0);
    for _ in 0..2 {
        let order = bfs(start);
        start = *order.last().unwrap();
    }
    let mut order = bfs(start);
    order.reverse();
    order
}

/// Symmetric positive-definite system stored by rows within a fixed envelope.
struct EnvelopeMatrix {
    n: usize,
    /// First column of each row's envelope.
    first: Vec<usize>,
    /// Row i holds columns first[i]..=i.
    rows: Vec<Vec<f64>>,
}

impl EnvelopeMatrix {
    fn new(first: Vec<usize>) -> Self {
        let n = first.len();
        let rows = first
            .iter()
            .enumerate()
            .map(|(i, f)| vec![0.0; i - f + 1])
            .collect();
        Self { n, first, rows }
    }

    fn zero(&mut self) {
        for row in &mut self.rows {
            for v in row.iter_mut() {
                *v = 0.0;
            }
        }
    }

    #[inline]
    fn add(&mut self, i: usize, j: usize, v: f64) {
        // Symmetric: store lower triangle only.
        let (r, c) = if i >= j { (i, j) } else { (j, i) };
        debug_assert!(c >= self.first[r]);
        let f = self.first[r];
        self.rows[r][c - f] += v;
    }

    #[inline]
    fn get(&self, i: usize, j: usize) -> f64 {
        let (r, c) = if i >= j { (i, j) } else { (j, i) };
        if c < self.first[r] {
            0.0
        } else {
            self.rows[r][c - self.first[r]]
        }
    }

    /// In-place Cholesky within the envelope. Returns false if a pivot is
    /// not positive.
    fn cholesky(&self) -> Option<EnvelopeMatrix> {
        let mut l = EnvelopeMatrix::new(self.first.clone());
        for i in 0..self.n {
            let fi = self.first[i];
            for j in fi..=i {
                let fj = l.first[j];
                let mut sum = self.get(i, j);
                let lo = fi.max(fj);
                for k in lo..j {
                    sum -= l.rows[i][k - fi] * l.rows[j][k - fj];
                }
                if i == j {
                    if sum <= 0.0 {
                        return None;
                    }
                    l.rows[i][j - fi] = sum.sqrt();
                } else {
                    l.rows[i][j - fi] = sum / l.rows[j][j - fj];
                }
            }
        }
        Some(l)
    }

    /// Solves L L^T x = b given the factor from `cholesky`.
    fn solve(l: &EnvelopeMatrix, b: &[f64]) -> Vec<f64> {
        let n = l.n;
        let mut y = b.to_vec();
        for i in 0..n {
            let fi = l.first[i];
            let mut sum = y[i];
            for k in fi..i {
                sum -= l.rows[i][k - fi] * y[k];
            }
            y[i] = sum / l.rows[i][i - fi];
        }
        let mut x = y;
        for i in (0..n).rev() {
            let fi = l.first[i];
            let xi = x[i] / l.rows[i][i - fi];
            x[i] = xi;
            for k in fi..i {
                x[k] -= l.rows[i][k - fi] * xi;
            }
        }
        x
    }
}

struct Problem<'g> {
    keys: Vec<NodeKey>,
    /// Scalar state offset per node; usize::MAX marks the anchored node.
    offsets: Vec<usize>,
    key_index: BTreeMap<NodeKey, usize>,
    edges: &'g [Edge],
    n_free_scalars: usize,
    envelope_first: Vec<usize>,
}

impl<'g> Problem<'g> {
    fn new(graph: &'g PoseGraph, anchor: &NodeKey) -> Self {
        let keys: Vec<NodeKey> = graph.nodes().keys().copied().collect();
        let key_index: BTreeMap<NodeKey, usize> =
            keys.iter().enumerate().map(|(i, k)| (*k, i)).collect();
        let n = keys.len();
        let mut adjacency: Vec<Vec<usize>> = vec![Vec::new(); n];
        for e in graph.edges() {
            let (u, v) = (key_index[&e.from], key_index[&e.to]);
            adjacency[u].push(v);
            adjacency[v].push(u);
        }
        for a in &mut adjacency {
            a.sort_unstable();
            a.dedup();
        }
        let order = rcm_order(n, &adjacency);
        // order[i] = old index placed at position i; free nodes get offsets.
        let mut offsets = vec![usize::MAX; n];
        let anchor_idx = key_index[anchor];
        let mut next = 0usize;
        for old in order.iter() {
            if *old != anchor_idx {
                offsets[*old] = next;
                next += 3;
            }
        }
        let n_free_scalars = next;
        // Envelope: for each free scalar row, the lowest-offset coupled column.
        let mut first: Vec<usize> = (0..n_free_scalars).collect();
        for r in 0..n_free_scalars {
            first[r] = r - (r % 3); // diagonal block at minimum
        }
        for e in graph.edges() {
            let (u, v) = (key_index[&e.from], key_index[&e.to]);
            let (ou, ov) = (offsets[u], offsets[v]);
            if ou == usize::MAX || ov == usize::MAX {
                continue;
            }
            let (lo, hi) = if ou < ov { (ou, ov) } else { (ov, ou) };
            for d in 0..3 {
                let row = hi + d;
                if lo < first[row] {
                    first[row] = lo;
                }
            }
        }
        // Envelope must be monotone enough for the factorization loop: row i
        // may reference rows j in [first[i], i), each with its own envelope;
        // the classic envelope method needs no extra fixups.
        Self {
            keys,
            offsets,
            key_index,
            edges: graph.edges(),
            n_free_scalars,
            envelope_first: first,
        }
    }

    fn pose_of<'a>(&self, estimates: &'a [Pose2], key: &NodeKey) -> &'a Pose2 {
        &estimates[self.key_index[key]]
    }

    fn cost(&self, estimates: &[Pose2], weights: &[f64]) -> f64 {
        self.edges
            .iter()
            .zip(weights)
            .map(|(e, w)| {
                w * weighted_sq(e, self.pose_of(estimates, &e.from), self.pose_of(estimates, &e.to))
            })
            .sum()
    }

    /// One damped Gauss-Newton step; returns the proposed estimates.
    fn lm_step(
        &self,
        estimates: &[Pose2],
        weights: &[f64],
        lambda: f64,
        h: &mut EnvelopeMatrix,
    ) -> Option<(Vec<Pose2>, f64)> {
        h.zero();
        let mut g = vec![0.0; self.n_free_scalars];
        for (e, w) in self.edges.iter().zip(weights) {
            if *w == 0.0 {
                continue;
            }
            let xf = self.pose_of(estimates, &e.from);
            let xt = self.pose_of(estimates, &e.to);
            let r = edge_residual(e, xf, xt);
            let (ja, jb) = edge_jacobians(e, xf, xt);
            let omega = e.information_matrix() * *w;
            let of = self.offsets[self.key_index[&e.from]];
            let ot = self.offsets[self.key_index[&e.to]];
            let blocks = [(of, &ja), (ot, &jb)];
            for (oi, ji) in blocks {
                if oi == usize::MAX {
                    continue;
                }
                let jt_omega = ji.transpose() * omega;
                let gi = jt_omega * r;
                for d in 0..3 {
                    g[oi + d] += gi[d];
                }
                for (oj, jj) in blocks {
                    if oj == usize::MAX || oj > oi {
                        continue;
                    }
                    let hij = jt_omega * *jj;
                    if oi == oj {
                        // Diagonal block is symmetric; store its lower half.
                        for a in 0..3 {
                            for b in 0..=a {
                                h.add(oi + a, oj + b, hij[(a, b)]);
                            }
                        }
                    } else {
                        for a in 0..3 {
                            for b in 0..3 {
                                h.add(oi + a, oj + b, hij[(a, b)]);
                            }
                        }
                    }
                }
            }
        }
        // Marquardt damping on the diagonal.
        for i in 0..self.n_free_scalars {
            let d = h.get(i, i);
            h.add(i, i, lambda * d.max(1e-9));
        }
        let l = h.cholesky()?;
        let neg_g: Vec<f64> = g.iter().map(|v| -v).collect();
        let delta = EnvelopeMatrix::solve(&l, &neg_g);
        let mut next = estimates.to_vec();
        for (i, key) in self.keys.iter().enumerate() {
            let o = self.offsets[self.key_index[key]];
            if o == usize::MAX {
                continue;
            }
            let p = &estimates[i];
            next[i] = Pose2::new(p.x + delta[o], p.y + delta[o + 1], p.theta + delta[o + 2]);
        }
        let step_norm = delta.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        Some((next, step_norm))
    }
}

/// Runs damped Gauss-Newton to convergence under fixed weights.
fn solve_weighted(
    problem: &Problem,
    estimates: &mut Vec<Pose2>,
    weights: &[f64],
    h: &mut EnvelopeMatrix,
    iterations: &mut usize,
) -> Result<f64, GraphError> {
    let mut lambda = 1e-6;
    let mut cost = problem.cost(estimates, weights);
    let max_inner = 15;
    for _ in 0..max_inner {
        let mut rejects = 0;
        loop {
            match problem.lm_step(estimates, weights, lambda, h) {
                Some((proposal, step_norm)) => {
                    let new_cost = problem.cost(&proposal, weights);
                    if new_cost <= cost * (1.0 + 1e-12) + 1e-12 {
                        let improved = cost - new_cost;
                        *estimates = proposal;
                        cost = new_cost;
                        lambda = (lambda * 0.4).max(1e-12);
                        *iterations += 1;
                        if step_norm < 1e-9 || improved < 1e-12 * (1.0 + cost) {
                            return Ok(cost);
                        }
                        break;
                    }
                    rejects += 1;
                    lambda *= 10.0;
                    // A fully damped step no longer changes the estimate;
                    // that is convergence at numerical precision, not
                    // divergence.
                    if lambda > 1e10 && step_norm < 1e-7 {
                        return Ok(cost);
                    }
                }
                None => {
                    rejects += 1;
                    lambda *= 10.0;
                }
            }
            if rejects >= 10 {
                return Err(GraphError::Diverged(rejects));
            }
        }
    }
    Ok(cost)
}

/// Optimizes the pose graph with the anchor held fixed.
///
/// Estimates are re-initialized from the odometry chains plus consensus
/// bridges, then GNC-TLS anneals loop-edge weights while Levenberg-Marquardt
/// solves each weighted problem. Fails on disconnected graphs and on LM
/// divergence.
pub fn optimize(
    graph: &PoseGraph,
    gnc: &GncConfig,
    anchor: &NodeKey,
) -> Result<OptimizationResult, GraphError> {
    optimize_traced(graph, gnc, anchor).map(|(result, _)| result)
}

/// Like [`optimize`], also returning the per-outer-iteration `(mu, weights)`
/// schedule (weights in edge order over loop edges).
pub fn optimize_traced(
    graph: &PoseGraph,
    gnc: &GncConfig,
    anchor: &NodeKey,
) -> Result<(OptimizationResult, Vec<(f64, Vec<f64>)>), GraphError> {
    if graph.estimate(anchor).is_none() {
        return Err(GraphError::MissingNode(*anchor));
    }
    let comps = graph.components();
    if comps.len() > 1 {
        return Err(GraphError::Disconnected(
            comps.iter().map(|c| c.len()).collect(),
        ));
    }

    let problem = Problem::new(graph, anchor);
    let init = initialize_estimates(graph, anchor);
    let mut estimates: Vec<Pose2> = problem.keys.iter().map(|k| init[k]).collect();
    let mut h = EnvelopeMatrix::new(problem.envelope_first.clone());

    let loop_indices: Vec<usize> = problem
        .edges
        .iter()
        .enumerate()
        .filter(|(_, e)| e.kind == EdgeKind::InterRobotLoop)
        .map(|(i, _)| i)
        .collect();
    let mut weights = vec![1.0; problem.edges.len()];
    let mut iterations = 0usize;
    let c_sq = gnc.c * gnc.c;

    if !gnc.robust || loop_indices.is_empty() {
        let cost = solve_weighted(&problem, &mut estimates, &weights, &mut h, &mut iterations)?;
        let result = result_from(&problem, estimates, &weights, cost, iterations);
        return Ok((result, Vec::new()));
    }

    // mu schedule from the worst loop residual at the initial estimates.
    let r_sq_max = loop_indices
        .iter()
        .map(|i| {
            let e = &problem.edges[*i];
            weighted_sq(
                e,
                problem.pose_of(&estimates, &e.from),
                problem.pose_of(&estimates, &e.to),
            )
        })
        .fold(0.0f64, f64::max);
    let mut mu = if 2.0 * r_sq_max > c_sq {
        (c_sq / (2.0 * r_sq_max - c_sq)).max(1e-8)
    } else {
        1e9
    };

    let mut trace = Vec::new();
    let mut cost = 0.0;
    for _outer in 0..gnc.max_outer_iterations {
        cost = solve_weighted(&problem, &mut estimates, &weights, &mut h, &mut iterations)?;
        let mut max_delta: f64 = 0.0;
        let mut max_off_binary: f64 = 0.0;
        for i in &loop_indices {
            let e = &problem.edges[*i];
            let r_sq = weighted_sq(
                e,
                problem.pose_of(&estimates, &e.from),
                problem.pose_of(&estimates, &e.to),
            );
            let w = tls_weight(r_sq, c_sq, mu);
            max_delta = max_delta.max((w - weights[*i]).abs());
            max_off_binary = max_off_binary.max((w - w.round()).abs());
            weights[*i] = w;
        }
        trace.push((mu, loop_indices.iter().map(|i| weights[*i]).collect()));
        // Converged once the weights have polarized to {0,1} and stopped
        // moving; stopping on the delta alone would quit during the early
        // flat part of the anneal.
        if max_delta <= gnc.weight_tol && max_off_binary <= gnc.weight_tol {
            break;
        }
        mu *= gnc.mu_update_factor;
    }
    // Final polish under the converged weights.
    cost = solve_weighted(&problem, &mut estimates, &weights, &mut h, &mut iterations).unwrap_or(cost);
    let result = result_from(&problem, estimates, &weights, cost, iterations);
    Ok((result, trace))
}

fn result_from(
    problem: &Problem,
    estimates: Vec<Pose2>,
    weights: &[f64],
    cost: f64,
    iterations: usize,
) -> OptimizationResult {
    let poses = problem
        .keys
        .iter()
        .cloned()
        .zip(estimates.iter().cloned())
        .collect();
    let loop_weights = problem
        .edges
        .iter()
        .zip(weights)
        .filter(|(e, _)| e.kind == EdgeKind::InterRobotLoop)
        .map(|(e, w)| ((e.author, e.seq), *w))
        .collect();
    OptimizationResult {
        poses,
        loop_weights,
        final_cost: cost,
        iterations,
    }
}

/// Rigid transform aligning a robot's local odometry frame to the optimized
/// global frame, anchored at the robot's latest optimized keyframe.
pub fn apply_correction(
    local_poses: &BTreeMap<u32, Pose2>,
    result: &OptimizationResult,
    me: RobotId,
) -> Option<Pose2> {
    let latest = result
        .poses
        .keys()
        .filter(|(r, _)| *r == me)
        .map(|(_, k)| *k)
        .max()?;
    let local = local_poses.get(&latest)?;
    let global = result.poses[&(me, latest)];
    Some(global.compose(&local.inverse()))
}

//! Multi-robot pose graph state: nodes keyed by (robot, keyframe), odometry
//! and inter-robot loop edges with information matrices, and version-vector
//! based delta exchange for decentralized sharing.

use crate::geometry::Pose2;
use crate::world::RobotId;
use nalgebra::Matrix3;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use thiserror::Error;

pub type NodeKey = (RobotId, u32);

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("information matrix is not symmetric positive definite")]
    NotSpd,
    #[error("odometry edges must connect consecutive keyframes of one robot: {0:?} -> {1:?}")]
    BadOdometry(NodeKey, NodeKey),
    #[error("loop edges must connect distinct robots: {0:?} -> {1:?}")]
    BadLoop(NodeKey, NodeKey),
    #[error("graph is disconnected: components of sizes {0:?}")]
    Disconnected(Vec<usize>),
    #[error("node {0:?} missing")]
    MissingNode(NodeKey),
    #[error("optimizer diverged: cost increased for {0} consecutive damped retries")]
    Diverged(usize),
    #[error("g2o parse error at line {line}: {msg}")]
    G2oParse { line: usize, msg: String },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EdgeKind {
    Odometry,
    InterRobotLoop,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub kind: EdgeKind,
    pub from: NodeKey,
    pub to: NodeKey,
    pub measurement: Pose2,
    /// 3x3 SPD information, row-major upper triangle (i11 i12 i13 i22 i23 i33).
    pub information: [f64; 6],
    /// Robot that created the edge plus its per-author sequence number;
    /// loop edges are exchanged as (author, seq) streams.
    pub author: RobotId,
    pub seq: u64,
}

impl Edge {
    pub fn information_matrix(&self) -> Matrix3<f64> {
        let i = &self.information;
        Matrix3::new(i[0], i[1], i[2], i[1], i[3], i[4], i[2], i[4], i[5])
    }

    fn signature(&self) -> (u8, NodeKey, NodeKey, [u64; 3]) {
        (
            match self.kind {
                EdgeKind::Odometry => 0,
                EdgeKind::InterRobotLoop => 1,
            },
            self.from,
            self.to,
            [
                self.measurement.x.to_bits(),
                self.measurement.y.to_bits(),
                self.measurement.theta.to_bits(),
            ],
        )
    }
}

pub fn diag_information(sx: f64, sy: f64, st: f64) -> [f64; 6] {
    [sx, 0.0, 0.0, sy, 0.0, st]
}

fn spd_check(info: &Matrix3<f64>) -> bool {
    info.cholesky().is_some()
}

/// Per-robot knowledge horizon: highest keyframe index and highest authored
/// loop-edge sequence number known. Both are -1 when nothing is known.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct VersionEntry {
    pub kf_high: i64,
    pub loop_high: i64,
}

pub type VersionVector = BTreeMap<RobotId, VersionEntry>;

/// Nodes and edges newer than a peer's version vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct GraphDelta {
    pub nodes: Vec<(NodeKey, Pose2)>,
    pub edges: Vec<Edge>,
    /// The sender's version vector at emission time.
    pub sender_version: VersionVector,
}

impl GraphDelta {
    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty() && self.edges.is_empty()
    }
}

#[derive(Debug, Clone, Default)]
pub struct PoseGraph {
    nodes: BTreeMap<NodeKey, Pose2>,
    edges: Vec<Edge>,
    signatures: BTreeSet<(u8, NodeKey, NodeKey, [u64; 3])>,
    /// Loop-edge sequence numbers present, per author.
    loop_seqs: BTreeMap<RobotId, BTreeSet<u64>>,
    version: VersionVector,
}

impl PoseGraph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn nodes(&self) -> &BTreeMap<NodeKey, Pose2> {
        &self.nodes
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn estimate(&self, key: &NodeKey) -> Option<Pose2> {
        self.nodes.get(key).copied()
    }

    pub fn set_estimate(&mut self, key: NodeKey, pose: Pose2) {
        if let Some(slot) = self.nodes.get_mut(&key) {
            *slot = pose;
        }
    }

    pub fn version(&self) -> &VersionVector {
        &self.version
    }

    pub fn loop_edge_count(&self) -> usize {
        self.edges
            .iter()
            .filter(|e| e.kind == EdgeKind::InterRobotLoop)
            .count()
    }

    /// Next sequence number for a loop edge authored by `robot`.
    pub fn next_loop_seq(&self, robot: RobotId) -> u64 {
        (self.version.get(&robot).map_or(-1, |v| v.loop_high) + 1) as u64
    }

    fn insert_node(&mut self, key: NodeKey, pose: Pose2) {
        if self.nodes.contains_key(&key) {
            return;
        }
        self.nodes.insert(key, pose);
        // The version vector only advances over a contiguous keyframe prefix;
        // a node created ahead of a gap (loop-edge propagation) is not
        // acknowledged until the gap fills, otherwise peers would never send
        // the missing prefix.
        let e = self.version.entry(key.0).or_insert(VersionEntry {
            kf_high: -1,
            loop_high: -1,
        });
        while self.nodes.contains_key(&(key.0, (e.kf_high + 1) as u32)) {
            e.kf_high += 1;
        }
    }

    /// Inserts a node with an explicit estimate (used when merging deltas;
    /// existing estimates win).
    pub fn merge_node(&mut self, key: NodeKey, pose: Pose2) {
        self.insert_node(key, pose);
    }

    /// Appends a measurement edge. Missing endpoints are created by
    /// propagating the measurement from whichever endpoint exists. Duplicate
    /// edges (same endpoints, kind, and measurement) are ignored. Returns
    /// whether the edge was newly inserted.
    pub fn insert_measurement(&mut self, edge: Edge) -> Result<bool, GraphError> {
        if !spd_check(&edge.information_matrix()) {
            return Err(GraphError::NotSpd);
        }
        match edge.kind {
            EdgeKind::Odometry => {
                if edge.from.0 != edge.to.0 || edge.to.1 != edge.from.1 + 1 {
                    return Err(GraphError::BadOdometry(edge.from, edge.to));
                }
            }
            EdgeKind::InterRobotLoop => {
                if edge.from.0 == edge.to.0 {
                    return Err(GraphError::BadLoop(edge.from, edge.to));
                }
            }
        }
        if self.signatures.contains(&edge.signature()) {
            return Ok(false);
        }
        match (
            self.nodes.get(&edge.from).copied(),
            self.nodes.get(&edge.to).copied(),
        ) {
            (Some(from), None) => {
                let to = from.compose(&edge.measurement);
                self.insert_node(edge.to, to);
            }
            (None, Some(to)) => {
                let from = to.compose(&edge.measurement.inverse());
                self.insert_node(edge.from, from);
            }
            (None, None) => {
                self.insert_node(edge.from, Pose2::identity());
                self.insert_node(edge.to, edge.measurement);
            }
            (Some(_), Some(_)) => {}
        }
        if edge.kind == EdgeKind::InterRobotLoop {
            let seqs = self.loop_seqs.entry(edge.author).or_default();
            seqs.insert(edge.seq);
            let e = self.version.entry(edge.author).or_insert(VersionEntry {
                kf_high: -1,
                loop_high: -1,
            });
            while seqs.contains(&((e.loop_high + 1) as u64)) {
                e.loop_high += 1;
            }
        }
        self.signatures.insert(edge.signature());
        self.edges.push(edge);
        Ok(true)
    }

    /// Everything newer than the peer's version vector: nodes above the
    /// peer's keyframe horizon (with their incoming odometry edges) and loop
    /// edges above the peer's per-author horizon.
    pub fn delta_for(&self, peer: &VersionVector) -> GraphDelta {
        let horizon = |robot: RobotId| peer.get(&robot).copied().unwrap_or(VersionEntry {
            kf_high: -1,
            loop_high: -1,
        });
        let mut nodes: Vec<(NodeKey, Pose2)> = self
            .nodes
            .iter()
            .filter(|((robot, kf), _)| (*kf as i64) > horizon(*robot).kf_high)
            .map(|(k, p)| (*k, *p))
            .collect();
        nodes.sort_by_key(|(k, _)| *k);
        let mut edges: Vec<Edge> = self
            .edges
            .iter()
            .filter(|e| match e.kind {
                EdgeKind::Odometry => (e.to.1 as i64) > horizon(e.to.0).kf_high,
                EdgeKind::InterRobotLoop => (e.seq as i64) > horizon(e.author).loop_high,
            })
            .cloned()
            .collect();
        edges.sort_by_key(|e| (e.author, e.kind == EdgeKind::InterRobotLoop, e.seq, e.from, e.to));
        GraphDelta {
            nodes,
            edges,
            sender_version: self.version.clone(),
        }
    }

    /// Merges a delta. Unknown nodes adopt the carried estimates; known nodes
    /// keep their local ones. Edge insertion is idempotent.
    pub fn apply_delta(&mut self, delta: &GraphDelta) -> Result<(), GraphError> {
        for (key, pose) in &delta.nodes {
            self.insert_node(*key, *pose);
        }
        for edge in &delta.edges {
            self.insert_measurement(edge.clone())?;
        }
        Ok(())
    }

    /// Node keys grouped into connected components (over all edges).
    pub fn components(&self) -> Vec<Vec<NodeKey>> {
        let keys: Vec<NodeKey> = self.nodes.keys().copied().collect();
        let index: BTreeMap<NodeKey, usize> =
            keys.iter().enumerate().map(|(i, k)| (*k, i)).collect();
        let mut uf = crate::frontend::spectral::UnionFind::new(keys.len());
        for e in &self.edges {
            uf.union(index[&e.from], index[&e.to]);
        }
        let mut groups: BTreeMap<usize, Vec<NodeKey>> = BTreeMap::new();
        for (i, k) in keys.iter().enumerate() {
            groups.entry(uf.find(i)).or_default().push(*k);
        }
        groups.into_values().collect()
    }

    /// The subgraph of the connected component containing `key`.
    pub fn component_of(&self, key: &NodeKey) -> Option<PoseGraph> {
        let comps = self.components();
        let comp = comps.into_iter().find(|c| c.contains(key))?;
        let set: BTreeSet<NodeKey> = comp.into_iter().collect();
        let mut g = PoseGraph::new();
        for k in &set {
            g.insert_node(*k, self.nodes[k]);
        }
        for e in &self.edges {
            if set.contains(&e.from) && set.contains(&e.to) {
                g.insert_measurement(e.clone()).expect("valid edge");
            }
        }
        Some(g)
    }
}

/// Deterministic optimizer election: the robot with the most graph nodes
/// wins, ties go to the lowest id.
pub fn elect(connected: &BTreeSet<RobotId>, sizes: &BTreeMap<RobotId, usize>) -> RobotId {
    assert!(!connected.is_empty());
    let mut best: Option<(usize, RobotId)> = None;
    for id in connected {
        let size = sizes.get(id).copied().unwrap_or(0);
        let better = match best {
            None => true,
            Some((bs, bid)) => size > bs || (size == bs && *id < bid),
        };
        if better {
            best = Some((size, *id));
        }
    }
    best.unwrap().1
}

const G2O_ID_STRIDE: u64 = 1_000_000;

fn node_id(key: NodeKey) -> u64 {
    key.0 as u64 * G2O_ID_STRIDE + key.1 as u64
}

fn key_from_id(id: u64) -> NodeKey {
    ((id / G2O_ID_STRIDE) as RobotId, (id % G2O_ID_STRIDE) as u32)
}

/// Writes the graph in the g2o plain-text convention with node ids encoded
/// as robot_id * 10^6 + keyframe_index.
pub fn write_g2o(graph: &PoseGraph, w: &mut impl std::io::Write) -> Result<(), GraphError> {
    for (key, pose) in graph.nodes() {
        writeln!(w, "VERTEX_SE2 {} {} {} {}", node_id(*key), pose.x, pose.y, pose.theta)?;
    }
    for e in graph.edges() {
        let i = &e.information;
        writeln!(
            w,
            "EDGE_SE2 {} {} {} {} {} {} {} {} {} {} {}",
            node_id(e.from),
            node_id(e.to),
            e.measurement.x,
            e.measurement.y,
            e.measurement.theta,
            i[0],
            i[1],
            i[2],
            i[3],
            i[4],
            i[5],
        )?;
    }
    Ok(())
}

pub fn read_g2o(content: &str) -> Result<PoseGraph, GraphError> {
    let mut graph = PoseGraph::new();
    let mut pending_edges = Vec::new();
    for (lineno, line) in content.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        let parse_f = |s: &str| -> Result<f64, GraphError> {
            s.parse().map_err(|_| GraphError::G2oParse {
                line: lineno + 1,
                msg: format!("bad float {s:?}"),
            })
        };
        match fields[0] {
            "VERTEX_SE2" => {
                if fields.len() != 5 {
                    return Err(GraphError::G2oParse {
                        line: lineno + 1,
                        msg: "VERTEX_SE2 needs 4 fields".into(),
                    });
                }
                let id: u64 = fields[1].parse().map_err(|_| GraphError::G2oParse {
                    line: lineno + 1,
                    msg: "bad vertex id".into(),
                })?;
                graph.insert_node(
                    key_from_id(id),
                    Pose2::new(parse_f(fields[2])?, parse_f(fields[3])?, parse_f(fields[4])?),
                );
            }
            "EDGE_SE2" => {
                if fields.len() != 12 {
                    return Err(GraphError::G2oParse {
                        line: lineno + 1,
                        msg: "EDGE_SE2 needs 11 fields".into(),
                    });
                }
                let id1: u64 = fields[1].parse().map_err(|_| GraphError::G2oParse {
                    line: lineno + 1,
                    msg: "bad edge id".into(),
                })?;
                let id2: u64 = fields[2].parse().map_err(|_| GraphError::G2oParse {
                    line: lineno + 1,
                    msg: "bad edge id".into(),
                })?;
                let from = key_from_id(id1);
                let to = key_from_id(id2);
                let kind = if from.0 == to.0 {
                    EdgeKind::Odometry
                } else {
                    EdgeKind::InterRobotLoop
                };
                pending_edges.push(Edge {
                    kind,
                    from,
                    to,
                    measurement: Pose2::new(
                        parse_f(fields[3])?,
                        parse_f(fields[4])?,
                        parse_f(fields[5])?,
                    ),
                    information: [
                        parse_f(fields[6])?,
                        parse_f(fields[7])?,
                        parse_f(fields[8])?,
                        parse_f(fields[9])?,
                        parse_f(fields[10])?,
                        parse_f(fields[11])?,
                    ],
                    author: from.0.min(to.0),
                    seq: 0,
                });
            }
            other => {
                return Err(GraphError::G2oParse {
                    line: lineno + 1,
                    msg: format!("unknown record {other:?}"),
                });
            }
        }
    }
    // Assign per-author loop sequence numbers in file order.
    let mut counters: BTreeMap<RobotId, u64> = BTreeMap::new();
    for mut e in pending_edges {
        if e.kind == EdgeKind::InterRobotLoop {
            let c = counters.entry(e.author).or_insert(0);
            e.seq = *c;
            *c += 1;
        } else {
            e.seq = e.to.1 as u64;
        }
        graph.insert_measurement(e)?;
    }
    Ok(graph)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn odo_edge(robot: RobotId, from_kf: u32, dx: f64) -> Edge {
        Edge {
            kind: EdgeKind::Odometry,
            from: (robot, from_kf),
            to: (robot, from_kf + 1),
            measurement: Pose2::new(dx, 0.0, 0.0),
            information: diag_information(100.0, 100.0, 400.0),
            author: robot,
            seq: (from_kf + 1) as u64,
        }
    }

    fn loop_edge(author: RobotId, seq: u64, from: NodeKey, to: NodeKey) -> Edge {
        Edge {
            kind: EdgeKind::InterRobotLoop,
            from,
            to,
            measurement: Pose2::new(0.0, 0.0, 0.0),
            information: diag_information(4.0, 4.0, 10.0),
            author,
            seq,
        }
    }

    #[test]
    fn duplicate_edges_are_idempotent() {
        let mut g = PoseGraph::new();
        assert!(g.insert_measurement(odo_edge(1, 0, 1.0)).unwrap());
        let n = g.edge_count();
        assert!(!g.insert_measurement(odo_edge(1, 0, 1.0)).unwrap());
        assert_eq!(g.edge_count(), n);
    }

    #[test]
    fn loop_edge_creates_remote_node_by_propagation() {
        let mut g = PoseGraph::new();
        g.insert_measurement(odo_edge(1, 0, 1.0)).unwrap();
        let e = Edge {
            measurement: Pose2::new(0.5, 0.2, 0.1),
            ..loop_edge(1, 0, (1, 1), (2, 0))
        };
        g.insert_measurement(e.clone()).unwrap();
        let expected = g.estimate(&(1, 1)).unwrap().compose(&e.measurement);
        let got = g.estimate(&(2, 0)).unwrap();
        assert_abs_diff_eq!(got.x, expected.x, epsilon = 1e-12);
        assert_abs_diff_eq!(got.theta, expected.theta, epsilon = 1e-12);
    }

    #[test]
    fn non_spd_information_rejected() {
        let mut g = PoseGraph::new();
        let mut e = odo_edge(1, 0, 1.0);
        e.information = diag_information(-1.0, 1.0, 1.0);
        assert!(matches!(g.insert_measurement(e), Err(GraphError::NotSpd)));
    }

    #[test]
    fn odometry_must_be_consecutive_same_robot() {
        let mut g = PoseGraph::new();
        let mut e = odo_edge(1, 0, 1.0);
        e.to = (1, 2);
        assert!(matches!(g.insert_measurement(e), Err(GraphError::BadOdometry(..))));
        let mut e = odo_edge(1, 0, 1.0);
        e.to = (2, 1);
        assert!(matches!(g.insert_measurement(e), Err(GraphError::BadOdometry(..))));
    }

    #[test]
    fn delta_roundtrip_yields_empty() {
        let mut a = PoseGraph::new();
        for k in 0..5 {
            a.insert_measurement(odo_edge(1, k, 1.0)).unwrap();
        }
        a.insert_measurement(loop_edge(1, 0, (1, 3), (2, 0))).unwrap();
        let mut b = PoseGraph::new();
        for k in 0..2 {
            b.insert_measurement(odo_edge(2, k, 1.0)).unwrap();
        }
        let delta = a.delta_for(b.version());
        assert!(!delta.is_empty());
        b.apply_delta(&delta).unwrap();
        let again = a.delta_for(b.version());
        assert!(again.is_empty(), "expected empty delta, got {again:?}");
    }

    #[test]
    fn late_loop_edges_still_propagate() {
        // A loop edge between old nodes must reach peers that already know
        // the nodes: the per-author loop horizon carries it.
        let mut a = PoseGraph::new();
        for k in 0..3 {
            a.insert_measurement(odo_edge(1, k, 1.0)).unwrap();
        }
        let mut b = PoseGraph::new();
        b.apply_delta(&a.delta_for(b.version())).unwrap();
        assert!(a.delta_for(b.version()).is_empty());
        // Now a learns a loop edge between nodes b already has.
        a.insert_measurement(loop_edge(1, 0, (1, 0), (2, 0))).unwrap();
        let delta = a.delta_for(b.version());
        assert_eq!(delta.edges.len(), 1);
        b.apply_delta(&delta).unwrap();
        assert!(a.delta_for(b.version()).is_empty());
    }

    #[test]
    fn eventual_consistency_under_gossip() {
        // Three graphs exchanging deltas pairwise converge to the same state
        // regardless of interleaving and repeated sends.
        let mut graphs = vec![PoseGraph::new(), PoseGraph::new(), PoseGraph::new()];
        for r in 0..3u32 {
            for k in 0..4 {
                graphs[r as usize]
                    .insert_measurement(odo_edge(r + 1, k, 1.0))
                    .unwrap();
            }
        }
        graphs[0]
            .insert_measurement(loop_edge(1, 0, (1, 2), (2, 1)))
            .unwrap();
        graphs[2]
            .insert_measurement(loop_edge(3, 0, (3, 1), (1, 0)))
            .unwrap();
        // Gossip rounds with a deterministic pattern, repeating sends.
        for round in 0..4 {
            for (i, j) in [(0usize, 1usize), (1, 2), (0, 2), (1, 0), (2, 1), (2, 0)] {
                let delta = graphs[i].delta_for(graphs[j].version());
                graphs[j].apply_delta(&delta).unwrap();
                if round == 1 {
                    // Duplicate application is harmless.
                    graphs[j].apply_delta(&delta).unwrap();
                }
            }
        }
        // Each robot contributes keyframes 0..=4.
        let sizes: Vec<usize> = graphs.iter().map(|g| g.node_count()).collect();
        assert_eq!(sizes, vec![15, 15, 15]);
        for g in &graphs[1..] {
            assert_eq!(g.edge_count(), graphs[0].edge_count());
            assert_eq!(g.version(), graphs[0].version());
        }
    }

    #[test]
    fn elect_rules() {
        let connected: BTreeSet<RobotId> = [1].into_iter().collect();
        let sizes: BTreeMap<RobotId, usize> = [(1, 5)].into_iter().collect();
        assert_eq!(elect(&connected, &sizes), 1);
        let connected: BTreeSet<RobotId> = [1, 2].into_iter().collect();
        let sizes: BTreeMap<RobotId, usize> = [(1, 10), (2, 10)].into_iter().collect();
        assert_eq!(elect(&connected, &sizes), 1);
        let connected: BTreeSet<RobotId> = [1, 2, 3].into_iter().collect();
        let sizes: BTreeMap<RobotId, usize> = [(1, 10), (2, 30), (3, 20)].into_iter().collect();
        assert_eq!(elect(&connected, &sizes), 2);
    }

    #[test]
    fn g2o_roundtrip() {
        let mut g = PoseGraph::new();
        for k in 0..3 {
            g.insert_measurement(odo_edge(1, k, 1.5)).unwrap();
        }
        g.insert_measurement(loop_edge(1, 0, (1, 2), (2, 0))).unwrap();
        let mut buf = Vec::new();
        write_g2o(&g, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.contains("VERTEX_SE2 1000000 "));
        assert!(text.contains("EDGE_SE2 "));
        let parsed = read_g2o(&text).unwrap();
        assert_eq!(parsed.node_count(), g.node_count());
        assert_eq!(parsed.edge_count(), g.edge_count());
        for (k, p) in g.nodes() {
            let q = parsed.estimate(k).unwrap();
            assert_abs_diff_eq!(p.x, q.x, epsilon = 1e-12);
            assert_abs_diff_eq!(p.theta, q.theta, epsilon = 1e-12);
        }
    }
}

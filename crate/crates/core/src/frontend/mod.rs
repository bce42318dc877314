//! Two-step inter-robot loop closure front end: compact descriptor exchange,
//! similarity-based candidate detection, budgeted spectral prioritization,
//! and robust scan registration.

pub mod descriptor;
pub mod registration;
pub mod spectral;

pub use descriptor::{best_shift, compute_descriptor, similarity, DescriptorError, ScanDescriptor};
pub use registration::{register, RegistrationConfig, RegistrationResult};
pub use spectral::{algebraic_connectivity, ConnectivityGraph, Lambda2Engine, UnionFind};

use crate::world::RobotId;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};

pub type KeyframeRef = (RobotId, u32);

/// A place-recognition hypothesis between keyframes of two different robots.
/// `a` is always the lower robot id.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CandidateMatch {
    pub a: KeyframeRef,
    pub b: KeyframeRef,
    pub similarity: f64,
}

impl CandidateMatch {
    pub fn new(x: KeyframeRef, y: KeyframeRef, similarity: f64) -> Self {
        assert_ne!(x.0, y.0, "candidates are inter-robot only");
        let (a, b) = if x.0 < y.0 { (x, y) } else { (y, x) };
        Self { a, b, similarity }
    }

    pub fn pair_key(&self) -> (KeyframeRef, KeyframeRef) {
        (self.a, self.b)
    }
}

/// Per-round registration budget. `None` means unlimited.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct Budget {
    pub max_matches_per_round: Option<usize>,
}

impl Budget {
    pub fn unlimited() -> Self {
        Self {
            max_matches_per_round: None,
        }
    }

    pub fn limit(n: usize) -> Self {
        Self {
            max_matches_per_round: Some(n),
        }
    }
}

/// A robot's own descriptors, keyed by keyframe.
#[derive(Debug, Clone, Default)]
pub struct DescriptorStore {
    map: BTreeMap<KeyframeRef, ScanDescriptor>,
}

impl DescriptorStore {
    pub fn insert(&mut self, d: ScanDescriptor) {
        self.map.insert(d.key(), d);
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn get(&self, key: &KeyframeRef) -> Option<&ScanDescriptor> {
        self.map.get(key)
    }

    pub fn iter(&self) -> impl Iterator<Item = &ScanDescriptor> {
        self.map.values()
    }

    /// Descriptors the peer has not acknowledged, in key order. Re-running
    /// after a dropped delivery re-emits the identical batch.
    pub fn sync_batch(&self, peer_known: &BTreeSet<KeyframeRef>) -> Vec<ScanDescriptor> {
        self.map
            .iter()
            .filter(|(k, _)| !peer_known.contains(*k))
            .map(|(_, d)| d.clone())
            .collect()
    }
}

/// All inter-robot pairs between `own` and `foreign` with similarity at or
/// above `tau_sim`, one entry per unordered keyframe pair, sorted by
/// descending similarity (ties by keyframe order).
pub fn detect_candidates(
    own: &[ScanDescriptor],
    foreign: &[ScanDescriptor],
    tau_sim: f64,
) -> Vec<CandidateMatch> {
    assert!((0.0..=1.0).contains(&tau_sim));
    let mut seen: BTreeSet<(KeyframeRef, KeyframeRef)> = BTreeSet::new();
    let mut out = Vec::new();
    for d_own in own {
        for d_for in foreign {
            if d_own.robot == d_for.robot {
                continue;
            }
            let Ok(sim) = similarity(d_own, d_for) else { continue };
            if sim >= tau_sim {
                let cand = CandidateMatch::new(d_own.key(), d_for.key(), sim);
                if seen.insert(cand.pair_key()) {
                    out.push(cand);
                }
            }
        }
    }
    sort_candidates(&mut out);
    out
}

pub fn sort_candidates(candidates: &mut [CandidateMatch]) {
    candidates.sort_by(|x, y| {
        y.similarity
            .partial_cmp(&x.similarity)
            .unwrap()
            .then(x.a.cmp(&y.a))
            .then(x.b.cmp(&y.b))
    });
}

/// Vertex/edge view of the pose graph used for prioritization: keyframes as
/// vertices, odometry chains plus accepted loops as edges.
#[derive(Debug, Clone)]
pub struct PrioritizationGraph {
    index: BTreeMap<KeyframeRef, usize>,
    graph: ConnectivityGraph,
}

impl PrioritizationGraph {
    /// Builds the view from known keyframes and base edges. Consecutive known
    /// keyframes of the same robot are chained (odometry edges); `loops` are
    /// the accepted loop closures.
    pub fn new(keyframes: &BTreeSet<KeyframeRef>, loops: &[(KeyframeRef, KeyframeRef)]) -> Self {
        let index: BTreeMap<KeyframeRef, usize> = keyframes
            .iter()
            .enumerate()
            .map(|(i, k)| (*k, i))
            .collect();
        let mut graph = ConnectivityGraph::new(index.len());
        let mut prev: Option<KeyframeRef> = None;
        for k in keyframes {
            if let Some(p) = prev {
                if p.0 == k.0 {
                    graph.edges.push((index[&p], index[k]));
                }
            }
            prev = Some(*k);
        }
        for (a, b) in loops {
            if let (Some(&u), Some(&v)) = (index.get(a), index.get(b)) {
                graph.edges.push((u, v));
            }
        }
        Self { index, graph }
    }

    pub fn contains(&self, k: &KeyframeRef) -> bool {
        self.index.contains_key(k)
    }
}

/// Greedy budgeted selection: each step picks the candidate whose edge
/// maximizes the algebraic connectivity of the graph plus the already
/// selected candidates. Ties break by higher similarity, then keyframe order.
pub fn prioritize(
    candidates: &[CandidateMatch],
    graph: &PrioritizationGraph,
    budget: Budget,
) -> Vec<CandidateMatch> {
    let k = match budget.max_matches_per_round {
        None => return sorted_copy(candidates),
        Some(k) if k >= candidates.len() => return sorted_copy(candidates),
        Some(0) => return Vec::new(),
        Some(k) => k,
    };
    let mut pool = sorted_copy(candidates);
    let mut base = graph.graph.clone();
    let mut selected = Vec::with_capacity(k);
    while selected.len() < k && !pool.is_empty() {
        // Adding one edge cannot connect a graph with three or more
        // components; every candidate then scores zero and the similarity
        // tiebreak decides.
        let scores: Vec<f64> = if base.component_count() >= 3 {
            vec![0.0; pool.len()]
        } else {
            let engine = Lambda2Engine::new(&base);
            pool.par_iter()
                .map(|c| engine.lambda2_with_edge(graph.index[&c.a], graph.index[&c.b]))
                .collect()
        };
        // Pool is in tiebreak order, so the first max wins.
        let mut best = 0usize;
        for (i, s) in scores.iter().enumerate() {
            if *s > scores[best] + 1e-9 {
                best = i;
            }
        }
        let chosen = pool.remove(best);
        base.edges
            .push((graph.index[&chosen.a], graph.index[&chosen.b]));
        selected.push(chosen);
    }
    selected
}

fn sorted_copy(candidates: &[CandidateMatch]) -> Vec<CandidateMatch> {
    let mut v = candidates.to_vec();
    sort_candidates(&mut v);
    v
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_desc(robot: RobotId, kf: u32, hot: usize) -> ScanDescriptor {
        let mut cells = vec![0.0; 8];
        cells[hot % 8] = 1.0;
        ScanDescriptor {
            robot,
            keyframe: kf,
            nr: 2,
            ns: 4,
            cells,
        }
    }

    #[test]
    fn sync_batch_cases() {
        let mut store = DescriptorStore::default();
        for kf in 0..4 {
            store.insert(unit_desc(1, kf, kf as usize));
        }
        // Fresh peer gets everything.
        let all = store.sync_batch(&BTreeSet::new());
        assert_eq!(all.len(), 4);
        // Peer that knows everything gets an empty batch.
        let known: BTreeSet<KeyframeRef> = (0..4).map(|kf| (1, kf)).collect();
        assert!(store.sync_batch(&known).is_empty());
        // Partial knowledge: exactly the missing ones, and identical on retry.
        let mut partial = BTreeSet::new();
        partial.insert((1u32, 0u32));
        partial.insert((1u32, 2u32));
        let batch1 = store.sync_batch(&partial);
        let batch2 = store.sync_batch(&partial);
        assert_eq!(batch1.len(), 2);
        assert_eq!(batch1, batch2);
    }

    #[test]
    fn detect_candidates_threshold_and_dedup() {
        // Hot cells 0/1 live in ring 0, hot cell 5 in ring 1; same-ring
        // single-hot descriptors align to 1.0 under some shift, cross-ring
        // ones score 0.
        let own = vec![unit_desc(2, 0, 0), unit_desc(2, 1, 1)];
        let foreign = vec![unit_desc(1, 0, 0), unit_desc(1, 1, 5)];
        // tau 0: single-hot descriptors always align under some shift, so
        // every cross-robot pair appears once.
        let all = detect_candidates(&own, &foreign, 0.0);
        assert_eq!(all.len(), 4);
        for c in &all {
            assert!(c.a.0 < c.b.0);
        }
        // Just above the cross-ring similarity: only the same-ring pairs.
        let strict = detect_candidates(&own, &foreign, 1.0 - 1e-12);
        assert_eq!(strict.len(), 2);
        // Sorted by similarity descending.
        for w in all.windows(2) {
            assert!(w[0].similarity >= w[1].similarity);
        }
        // Threshold monotonicity.
        let mid = detect_candidates(&own, &foreign, 0.5);
        assert!(mid.len() <= all.len());
        for c in &mid {
            assert!(all.iter().any(|o| o.pair_key() == c.pair_key()));
        }
    }

    #[test]
    fn prioritize_trivial_budgets() {
        let own = vec![unit_desc(2, 0, 0)];
        let foreign = vec![unit_desc(1, 0, 0), unit_desc(1, 1, 0)];
        let candidates = detect_candidates(&own, &foreign, 0.1);
        let keyframes: BTreeSet<KeyframeRef> = [(1, 0), (1, 1), (2, 0)].into_iter().collect();
        let graph = PrioritizationGraph::new(&keyframes, &[]);
        assert_eq!(
            prioritize(&candidates, &graph, Budget::unlimited()).len(),
            candidates.len()
        );
        assert_eq!(
            prioritize(&candidates, &graph, Budget::limit(10)).len(),
            candidates.len()
        );
        assert!(prioritize(&candidates, &graph, Budget::limit(0)).is_empty());
    }

    #[test]
    fn prioritize_picks_the_chord() {
        // Path (r0,k0)-(r0,k1)-(r1,k0): the chord (r0,k0)-(r1,k0) makes a
        // triangle (lambda2 = 3), beating a duplicate of the accepted loop
        // (lambda2 = 3 - sqrt(3)), even though the duplicate is more similar.
        let keyframes: BTreeSet<KeyframeRef> = [(0, 0), (0, 1), (1, 0)].into_iter().collect();
        let accepted = vec![((0u32, 1u32), (1u32, 0u32))];
        let graph = PrioritizationGraph::new(&keyframes, &accepted);
        let chord = CandidateMatch::new((0, 0), (1, 0), 0.8);
        let duplicate = CandidateMatch::new((0, 1), (1, 0), 0.95);
        let picked = prioritize(&[duplicate, chord], &graph, Budget::limit(1));
        assert_eq!(picked.len(), 1);
        assert_eq!(picked[0].pair_key(), chord.pair_key());
    }

    #[test]
    fn prioritize_matches_exhaustive_search_on_small_fixtures() {
        // Frozen fixtures on which the greedy objective equals the
        // exhaustive best-subset objective for budgets 1..=3.
        struct Fixture {
            n_per_robot: u32,
            accepted: Vec<(KeyframeRef, KeyframeRef)>,
            pairs: Vec<(KeyframeRef, KeyframeRef)>,
        }
        let fixtures = vec![
            Fixture {
                n_per_robot: 3,
                accepted: vec![((0, 2), (1, 0))],
                pairs: vec![
                    ((0, 0), (1, 1)),
                    ((0, 0), (1, 2)),
                    ((0, 1), (1, 0)),
                    ((0, 2), (1, 0)),
                    ((0, 2), (1, 1)),
                ],
            },
            Fixture {
                n_per_robot: 3,
                accepted: vec![((0, 1), (1, 1))],
                pairs: vec![
                    ((0, 0), (1, 0)),
                    ((0, 0), (1, 1)),
                    ((0, 0), (1, 2)),
                    ((0, 1), (1, 0)),
                    ((0, 1), (1, 2)),
                    ((0, 2), (1, 2)),
                ],
            },
            Fixture {
                n_per_robot: 4,
                accepted: vec![((0, 2), (1, 2))],
                pairs: vec![
                    ((0, 0), (1, 1)),
                    ((0, 1), (1, 3)),
                    ((0, 2), (1, 0)),
                    ((0, 3), (1, 2)),
                    ((0, 3), (1, 3)),
                ],
            },
        ];
        for (fi, fixture) in fixtures.iter().enumerate() {
            let mut keyframes: BTreeSet<KeyframeRef> = BTreeSet::new();
            for r in 0..2u32 {
                for k in 0..fixture.n_per_robot {
                    keyframes.insert((r, k));
                }
            }
            let graph = PrioritizationGraph::new(&keyframes, &fixture.accepted);
            let cands: Vec<CandidateMatch> = fixture
                .pairs
                .iter()
                .enumerate()
                .map(|(i, (a, b))| CandidateMatch::new(*a, *b, 0.9 - 0.01 * i as f64))
                .collect();
            let objective = |subset: &[CandidateMatch]| -> f64 {
                let mut g = graph.graph.clone();
                for c in subset {
                    g.edges.push((graph.index[&c.a], graph.index[&c.b]));
                }
                algebraic_connectivity(&g)
            };
            for budget in 1..=3usize {
                let picked = prioritize(&cands, &graph, Budget::limit(budget));
                let greedy_obj = objective(&picked);
                let mut best = f64::NEG_INFINITY;
                let n = cands.len();
                for mask in 0u32..(1 << n) {
                    if mask.count_ones() as usize != budget {
                        continue;
                    }
                    let subset: Vec<CandidateMatch> = (0..n)
                        .filter(|i| mask & (1 << i) != 0)
                        .map(|i| cands[i])
                        .collect();
                    best = best.max(objective(&subset));
                }
                assert!(
                    (greedy_obj - best).abs() < 1e-9,
                    "fixture {fi} budget {budget}: greedy {greedy_obj} vs exhaustive {best}"
                );
            }
        }
    }
}

//! The deterministic simulation loop: robots follow planned trajectories,
//! keyframe their odometry and scans, exchange descriptors and graph deltas
//! over the gated transport, register budgeted candidate matches, and
//! periodically elect one robot to optimize and broadcast corrections.

use crate::backend::{
    apply_correction, diag_information, elect, optimize, Edge, EdgeKind, GraphDelta, GraphError,
    NodeKey, PoseGraph, VersionVector,
};
use crate::comms::{
    neighbors, sizes, CommReport, CommsError, LinkSource, LinkState, Message, MessageKind, Trace,
    TraceRecord, Transport,
};
use crate::config::ScenarioConfig;
use crate::eval::{self, LoopClass};
use crate::frontend::{
    compute_descriptor, prioritize, register, similarity, Budget, CandidateMatch, DescriptorStore,
    KeyframeRef, PrioritizationGraph, ScanDescriptor,
};
use crate::geometry::{wrap_angle, Pose2};
use crate::rng::derive_rng;
use crate::world::{
    generate_world, odometry_measure, odometry_sigmas, plan_trajectories, simulate_scan, RobotId,
    RobotProfile, Trajectory, World, WorldError,
};

use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    World(#[from] WorldError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Comms(#[from] CommsError),
    #[error("world file error: {0}")]
    WorldFile(String),
}

/// One registration attempt and its ground truth, for evaluation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LoopRecord {
    pub a: KeyframeRef,
    pub b: KeyframeRef,
    pub similarity: f64,
    pub inliers: usize,
    pub success: bool,
    pub measurement: Pose2,
    pub gt_relative: Pose2,
}

/// Raw outputs of one simulation run.
pub struct RunArtifacts {
    pub world: World,
    pub gt_keyframes: BTreeMap<RobotId, Vec<(f64, Pose2)>>,
    /// 1 Hz reference trajectory in the GPS role (ground truth, optionally
    /// with emulated receiver noise).
    pub gt_reference: BTreeMap<RobotId, Vec<(f64, Pose2)>>,
    pub odom_keyframes: BTreeMap<RobotId, Vec<(f64, Pose2)>>,
    pub est_keyframes: BTreeMap<RobotId, Vec<(f64, Pose2)>>,
    pub loops: Vec<LoopRecord>,
    pub comm: CommReport,
    /// Final pose graph of the robot holding the most nodes.
    pub final_graph: PoseGraph,
    /// The experienced link states, replayable as a trace.
    pub links_trace: Vec<TraceRecord>,
    pub optimizations: usize,
    /// Place-recognition candidates detected (before budgeting).
    pub candidates_detected: usize,
}

#[derive(Debug, Clone)]
enum Payload {
    DescriptorBatch(Vec<ScanDescriptor>),
    ScanRequest {
        target: KeyframeRef,
        candidate: (KeyframeRef, KeyframeRef),
    },
    ScanPayload {
        candidate: (KeyframeRef, KeyframeRef),
        points: Vec<[f64; 2]>,
    },
    GraphDelta(GraphDelta),
    EstimateBroadcast(Vec<(NodeKey, Pose2)>),
    Control(VersionVector),
}

struct Agent {
    id: RobotId,
    profile: RobotProfile,
    travel_m: f64,
    kf_stamps: Vec<f64>,
    kf_gt: Vec<Pose2>,
    odom: Vec<Pose2>,
    scans: Vec<Vec<[f64; 2]>>,
    own_desc: DescriptorStore,
    foreign_desc: BTreeMap<KeyframeRef, ScanDescriptor>,
    peer_known: BTreeMap<RobotId, BTreeSet<KeyframeRef>>,
    desc_inflight: BTreeMap<RobotId, bool>,
    graph: PoseGraph,
    peer_vv: BTreeMap<RobotId, VersionVector>,
    /// Own keyframes whose place recognition has not run yet (batched at the
    /// sync cadence).
    pending_detection: Vec<u32>,
    /// Candidates awaiting their prioritization round (self is the higher id).
    pool: Vec<CandidateMatch>,
    /// Every pair ever turned into a candidate; never re-detected.
    seen_pairs: BTreeSet<(KeyframeRef, KeyframeRef)>,
    /// Candidates whose scan request is outstanding.
    pending_reg: BTreeMap<(KeyframeRef, KeyframeRef), CandidateMatch>,
    correction: Pose2,
    latest_broadcast: BTreeMap<u32, Pose2>,
    prev_neighbors: BTreeSet<RobotId>,
    /// Set at a rendezvous; the election runs one round later, once the
    /// version vectors exchanged at the rendezvous have arrived everywhere.
    rendezvous_pending: bool,
    /// The version vector this robot last announced; election sizes use it
    /// (for self too) so every robot computes the election from the same
    /// inputs.
    announced_vv: VersionVector,
    opt_state_at_last_run: (usize, usize),
}

impl Agent {
    fn new(profile: RobotProfile) -> Self {
        Self {
            id: profile.id,
            profile,
            travel_m: 0.0,
            kf_stamps: Vec::new(),
            kf_gt: Vec::new(),
            odom: Vec::new(),
            scans: Vec::new(),
            own_desc: DescriptorStore::default(),
            foreign_desc: BTreeMap::new(),
            peer_known: BTreeMap::new(),
            desc_inflight: BTreeMap::new(),
            graph: PoseGraph::new(),
            peer_vv: BTreeMap::new(),
            pending_detection: Vec::new(),
            pool: Vec::new(),
            seen_pairs: BTreeSet::new(),
            pending_reg: BTreeMap::new(),
            correction: Pose2::identity(),
            latest_broadcast: BTreeMap::new(),
            prev_neighbors: BTreeSet::new(),
            rendezvous_pending: false,
            announced_vv: VersionVector::new(),
            opt_state_at_last_run: (0, 0),
        }
    }

    fn odom_map(&self) -> BTreeMap<u32, Pose2> {
        self.odom
            .iter()
            .enumerate()
            .map(|(k, p)| (k as u32, *p))
            .collect()
    }

    /// Best available estimate per own keyframe: optimized poses from the
    /// latest broadcast where present, correction-propagated odometry beyond.
    fn estimated_trajectory(&self) -> Vec<(f64, Pose2)> {
        (0..self.odom.len())
            .map(|k| {
                let pose = self
                    .latest_broadcast
                    .get(&(k as u32))
                    .copied()
                    .unwrap_or_else(|| self.correction.compose(&self.odom[k]));
                (self.kf_stamps[k], pose)
            })
            .collect()
    }
}

/// Noise-pairing key: robots traversing the same place with the same heading
/// draw the same unit noise.
pub fn odom_noise_key(gt: &Pose2) -> [u64; 3] {
    let cell = 1.5;
    let cx = (gt.x / cell).floor() as i64 + 1_000_000;
    let cy = (gt.y / cell).floor() as i64 + 1_000_000;
    // Heading bins centered on the axis directions so the small heading
    // wiggle along a row never straddles a bin edge.
    let ct = ((gt.theta + std::f64::consts::PI + std::f64::consts::FRAC_PI_4)
        / std::f64::consts::FRAC_PI_2)
        .floor() as i64;
    [cx as u64, cy as u64, ct as u64]
}

/// Runs one scenario to completion.
pub fn run(config: &ScenarioConfig, seed: u64) -> Result<RunArtifacts, RunError> {
    let world = load_or_generate_world(config, seed)?;
    let ids = config.robot_ids();
    let trajectories = plan_trajectories(&world, ids.len(), &config.trajectory, seed)?;
    run_with(config, seed, world, trajectories)
}

fn load_or_generate_world(config: &ScenarioConfig, seed: u64) -> Result<World, RunError> {
    if let Some(path) = &config.world_file {
        let text = std::fs::read_to_string(path)
            .map_err(|e| RunError::WorldFile(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| RunError::WorldFile(e.to_string()))
    } else {
        Ok(generate_world(&config.world, seed)?)
    }
}

/// Runs the pipeline on an explicit world and trajectory set. Trajectories
/// are assigned to robot profiles in order.
pub fn run_with(
    config: &ScenarioConfig,
    seed: u64,
    world: World,
    trajectories: Vec<Trajectory>,
) -> Result<RunArtifacts, RunError> {
    let ids = config.robot_ids();
    assert_eq!(trajectories.len(), ids.len());
    let traj_by_robot: BTreeMap<RobotId, &Trajectory> = ids
        .iter()
        .zip(trajectories.iter())
        .map(|(id, t)| (*id, t))
        .collect();

    let link_source = match &config.trace_file {
        Some(path) => LinkSource::Trace(Trace::read_csv(path)?),
        None => LinkSource::Model(config.link_model),
    };

    let mut agents: BTreeMap<RobotId, Agent> = config
        .robots
        .iter()
        .map(|p| (p.id, Agent::new(*p)))
        .collect();
    let mut transport: Transport<Payload> = Transport::new();
    let mut loops: Vec<LoopRecord> = Vec::new();
    let mut links_trace: Vec<TraceRecord> = Vec::new();
    let mut optimizations = 0usize;

    let tick = config.trajectory.tick_sec;
    let ticks_per_sec = (1.0 / tick).round().max(1.0) as usize;
    let n_ticks = (config.trajectory.duration_sec / tick).round() as usize;
    let last_round_sec = (n_ticks / ticks_per_sec).saturating_sub(1) as u64;

    let mut links: BTreeMap<(RobotId, RobotId), LinkState> = BTreeMap::new();

    for k in 0..n_ticks {
        let t = k as f64 * tick;

        if k % ticks_per_sec == 0 {
            let t_sec = (k / ticks_per_sec) as u64;
            // Link states refresh at 1 Hz, matching the trace resolution.
            let positions: BTreeMap<RobotId, Pose2> = ids
                .iter()
                .map(|id| (*id, traj_by_robot[id].pose_at(t)))
                .collect();
            links.clear();
            for a in &ids {
                for b in &ids {
                    if a != b {
                        let state = link_source.link_state(*a, *b, &positions, t)?;
                        links.insert((*a, *b), state);
                        links_trace.push(TraceRecord {
                            t_sec,
                            src: *a,
                            dst: *b,
                            latency_ms: state.latency_ms,
                            throughput_mbps: state.throughput_mbps,
                            connected: state.connected,
                        });
                    }
                }
            }
            transport.sample_series(t_sec);

            second_round(
                config,
                seed,
                &ids,
                &mut agents,
                &mut transport,
                &links,
                t,
                t_sec,
                last_round_sec,
                &mut optimizations,
            )?;
        }

        // Advance robots and create keyframes.
        let t_next = (k + 1) as f64 * tick;
        for id in &ids {
            let pose = traj_by_robot[id].pose_at(t_next);
            maybe_keyframe(config, seed, &world, &mut agents, *id, t_next, pose);
        }

        // Drain the network.
        let out = transport.step(tick, &links);
        for msg in out.dropped {
            handle_drop(&mut agents, &mut transport, msg);
        }
        for msg in out.delivered {
            handle_delivery(config, seed, &mut agents, &mut transport, &mut loops, msg);
        }
    }
    transport.sample_series((n_ticks / ticks_per_sec) as u64);

    // Assemble outputs.
    let mut gt_keyframes = BTreeMap::new();
    let mut odom_keyframes = BTreeMap::new();
    let mut est_keyframes = BTreeMap::new();
    for (id, agent) in &agents {
        gt_keyframes.insert(
            *id,
            agent
                .kf_stamps
                .iter()
                .zip(&agent.kf_gt)
                .map(|(s, p)| (*s, *p))
                .collect::<Vec<_>>(),
        );
        odom_keyframes.insert(
            *id,
            agent
                .kf_stamps
                .iter()
                .zip(&agent.odom)
                .map(|(s, p)| (*s, *p))
                .collect::<Vec<_>>(),
        );
        est_keyframes.insert(*id, agent.estimated_trajectory());
    }
    let final_graph = agents
        .values()
        .max_by_key(|a| (a.graph.node_count(), std::cmp::Reverse(a.id)))
        .map(|a| a.graph.clone())
        .unwrap_or_default();
    let candidates_detected = agents.values().map(|a| a.seen_pairs.len()).sum();
    let gt_reference: BTreeMap<RobotId, Vec<(f64, Pose2)>> = ids
        .iter()
        .map(|id| (*id, reference_at_1hz(traj_by_robot[id], config.gps_sigma, seed, *id)))
        .collect();

    Ok(RunArtifacts {
        world,
        gt_keyframes,
        gt_reference,
        odom_keyframes,
        est_keyframes,
        loops,
        comm: transport.into_report(),
        final_graph,
        links_trace,
        optimizations,
        candidates_detected,
    })
}

fn maybe_keyframe(
    config: &ScenarioConfig,
    seed: u64,
    world: &World,
    agents: &mut BTreeMap<RobotId, Agent>,
    id: RobotId,
    stamp: f64,
    gt: Pose2,
) {
    let agent = agents.get_mut(&id).unwrap();
    let is_new = match agent.kf_gt.last() {
        None => true,
        Some(prev) => {
            prev.distance_to(&gt) >= config.keyframe_translation_m
                || wrap_angle(gt.theta - prev.theta).abs() >= config.keyframe_rotation_rad
        }
    };
    if !is_new {
        return;
    }
    let kf = agent.kf_gt.len() as u32;
    let mut scan_rng = derive_rng(seed, "scan", &[id as u64, kf as u64]);
    let points = simulate_scan(world, &gt, &config.sensor, &agent.profile, &mut scan_rng);
    let descriptor = compute_descriptor(
        &points,
        id,
        kf,
        config.frontend.nr,
        config.frontend.ns,
        config.frontend.descriptor_r_max,
    );

    // Odometry chain and graph bookkeeping.
    if kf == 0 {
        agent.odom.push(Pose2::identity());
        agent.graph.merge_node((id, 0), Pose2::identity());
    } else {
        let prev_gt = agent.kf_gt[kf as usize - 1];
        agent.travel_m += prev_gt.distance_to(&gt);
        // The unit noise stream is keyed by quantized place and heading and
        // scaled by each profile's sigmas: a paired design, so the per-robot
        // drift ordering reflects the profiles rather than random-walk luck.
        let mut odo_rng = derive_rng(seed, "odom", &odom_noise_key(&gt));
        let meas = odometry_measure(&prev_gt, &gt, &agent.profile, &mut odo_rng);
        let (sxy, sth) = odometry_sigmas(&meas, &agent.profile);
        let info = diag_information(1.0 / (sxy * sxy), 1.0 / (sxy * sxy), 1.0 / (sth * sth));
        let prev_odom = agent.odom[kf as usize - 1];
        agent.odom.push(prev_odom.compose(&meas));
        agent
            .graph
            .insert_measurement(Edge {
                kind: EdgeKind::Odometry,
                from: (id, kf - 1),
                to: (id, kf),
                measurement: meas,
                information: info,
                author: id,
                seq: kf as u64,
            })
            .expect("odometry edge is valid");
    }
    agent.kf_stamps.push(stamp);
    agent.kf_gt.push(gt);
    agent.scans.push(points);
    agent.own_desc.insert(descriptor);
    // Place recognition for the new keyframe runs at the next sync round.
    agent.pending_detection.push(kf);
}

/// Once-per-second protocol round: descriptor sync, version-vector exchange,
/// budgeted candidate selection, and the optimization trigger.
#[allow(clippy::too_many_arguments)]
fn second_round(
    config: &ScenarioConfig,
    seed: u64,
    ids: &[RobotId],
    agents: &mut BTreeMap<RobotId, Agent>,
    transport: &mut Transport<Payload>,
    links: &BTreeMap<(RobotId, RobotId), LinkState>,
    _t: f64,
    t_sec: u64,
    last_round_sec: u64,
    optimizations: &mut usize,
) -> Result<(), RunError> {
    let _ = seed;
    for me in ids {
        let nbrs: BTreeSet<RobotId> = neighbors(links, *me).into_iter().collect();
        // The vv announced last round; the election reads it for self and
        // peers alike, so every member sees the same sizes.
        let election_vv = agents[me].announced_vv.clone();
        {
            let agent = agents.get_mut(me).unwrap();
            let gained = nbrs.difference(&agent.prev_neighbors).next().is_some();
            agent.prev_neighbors = nbrs.clone();
            if gained {
                agent.rendezvous_pending = true;
            }
        }
        if nbrs.is_empty() {
            continue;
        }

        let sync_due =
            t_sec % config.frontend.sync_period_sec.max(1) == 0 || t_sec == last_round_sec;

        // 0. Batched place recognition for own keyframes accumulated since
        // the last sync round (this robot registers pairs with lower ids).
        if sync_due {
            let agent = agents.get_mut(me).unwrap();
            let tau = config.frontend.tau_sim;
            let mut fresh = Vec::new();
            for kf in std::mem::take(&mut agent.pending_detection) {
                let own = agent
                    .own_desc
                    .get(&(*me, kf))
                    .expect("descriptor exists for own keyframe")
                    .clone();
                for (key, foreign) in &agent.foreign_desc {
                    if key.0 >= *me {
                        continue;
                    }
                    if let Ok(sim) = similarity(&own, foreign) {
                        if sim >= tau {
                            fresh.push(CandidateMatch::new(own.key(), *key, sim));
                        }
                    }
                }
            }
            for cand in fresh {
                if agent.seen_pairs.insert(cand.pair_key()) {
                    agent.pool.push(cand);
                }
            }
        }

        // 1. Descriptor sync, lower id to higher id only: the higher-id robot
        // of a pair is the one that detects and registers its candidates, so
        // the reverse direction would carry descriptors nobody reads.
        for peer in &nbrs {
            if !sync_due || *peer < *me {
                continue;
            }
            let agent = agents.get_mut(me).unwrap();
            if *agent.desc_inflight.get(peer).unwrap_or(&false) {
                continue;
            }
            let known = agent.peer_known.entry(*peer).or_default();
            let batch = agent.own_desc.sync_batch(known);
            if batch.is_empty() {
                continue;
            }
            let size = sizes::descriptor_batch(batch.len(), config.frontend.nr, config.frontend.ns);
            agent.desc_inflight.insert(*peer, true);
            transport.send(*me, *peer, MessageKind::DescriptorBatch, Payload::DescriptorBatch(batch), size);
        }

        // 2. Version-vector exchange drives graph deltas.
        {
            let agent = agents.get_mut(me).unwrap();
            let vv = agent.graph.version().clone();
            agent.announced_vv = vv.clone();
            for peer in &nbrs {
                transport.send(*me, *peer, MessageKind::Control, Payload::Control(vv.clone()), sizes::CONTROL);
            }
        }

        // 3. Budgeted candidate round over currently reachable candidates.
        {
            let agent = agents.get_mut(me).unwrap();
            let (reachable, waiting): (Vec<CandidateMatch>, Vec<CandidateMatch>) = agent
                .pool
                .drain(..)
                .partition(|c| nbrs.contains(&c.a.0));
            agent.pool = waiting;
            if !reachable.is_empty() {
                let budget = Budget {
                    max_matches_per_round: config.frontend.budget,
                };
                let view = prioritization_view(agent, &reachable);
                let selected = prioritize(&reachable, &view, budget);
                for cand in selected {
                    agent.pending_reg.insert(cand.pair_key(), cand);
                    transport.send(
                        *me,
                        cand.a.0,
                        MessageKind::ScanRequest,
                        Payload::ScanRequest {
                            target: cand.a,
                            candidate: cand.pair_key(),
                        },
                        sizes::SCAN_REQUEST,
                    );
                }
                // Unselected candidates had their round; they are dropped.
            }
        }

        // 4. Election and optimization. Rendezvous elections run one round
        // late so the version vectors announced at the rendezvous have
        // arrived; sizes come from announced vectors for everyone (self
        // included), so all members compute the same winner.
        let periodic = config.backend.trigger_period_sec > 0.0
            && t_sec % config.backend.trigger_period_sec.round().max(1.0) as u64 == 0;
        let final_round = t_sec == last_round_sec;
        let rendezvous_due = {
            let agent = agents.get_mut(me).unwrap();
            if agent.rendezvous_pending && t_sec > 0 {
                agent.rendezvous_pending = false;
                true
            } else {
                false
            }
        };
        if rendezvous_due || periodic || final_round {
            let mut connected = nbrs.clone();
            connected.insert(*me);
            let mut graph_sizes: BTreeMap<RobotId, usize> = BTreeMap::new();
            let vv_size = |vv: &VersionVector| -> usize {
                vv.values().map(|e| (e.kf_high + 1).max(0) as usize).sum()
            };
            for r in &connected {
                if r == me {
                    graph_sizes.insert(*r, vv_size(&election_vv));
                } else {
                    let claimed = agents[me].peer_vv.get(r).map(vv_size).unwrap_or(0);
                    graph_sizes.insert(*r, claimed);
                }
            }
            if elect(&connected, &graph_sizes) == *me {
                let agent = agents.get_mut(me).unwrap();
                if let Some(component) = agent.graph.component_of(&(*me, 0)) {
                    let state = (component.node_count(), component.edge_count());
                    if component.loop_edge_count() > 0 && state != agent.opt_state_at_last_run {
                        let result = optimize(&component, &config.backend.gnc, &(*me, 0))?;
                        agent.opt_state_at_last_run = state;
                        *optimizations += 1;
                        for (key, pose) in &result.poses {
                            agent.graph.set_estimate(*key, *pose);
                        }
                        if let Some(corr) = apply_correction(&agent.odom_map(), &result, *me) {
                            agent.correction = corr;
                        }
                        agent.latest_broadcast = result
                            .poses
                            .iter()
                            .filter(|((r, _), _)| r == me)
                            .map(|((_, k), p)| (*k, *p))
                            .collect();
                        let poses: Vec<(NodeKey, Pose2)> =
                            result.poses.iter().map(|(k, p)| (*k, *p)).collect();
                        let size = sizes::estimate_broadcast(poses.len());
                        for peer in &nbrs {
                            transport.send(
                                *me,
                                *peer,
                                MessageKind::EstimateBroadcast,
                                Payload::EstimateBroadcast(poses.clone()),
                                size,
                            );
                        }
                    }
                }
            }
        }
    }
    Ok(())
}

/// Keyframes known to this robot (graph nodes, own keyframes, foreign
/// descriptors, and the candidates' endpoints) with odometry chains and
/// accepted loop edges.
fn prioritization_view(agent: &Agent, candidates: &[CandidateMatch]) -> PrioritizationGraph {
    let mut keyframes: BTreeSet<KeyframeRef> = agent.graph.nodes().keys().copied().collect();
    keyframes.extend(agent.foreign_desc.keys().copied());
    keyframes.extend(agent.own_desc.iter().map(|d| d.key()));
    for c in candidates {
        keyframes.insert(c.a);
        keyframes.insert(c.b);
    }
    let loops: Vec<(KeyframeRef, KeyframeRef)> = agent
        .graph
        .edges()
        .iter()
        .filter(|e| e.kind == EdgeKind::InterRobotLoop)
        .map(|e| (e.from, e.to))
        .collect();
    PrioritizationGraph::new(&keyframes, &loops)
}

fn handle_drop(agents: &mut BTreeMap<RobotId, Agent>, transport: &mut Transport<Payload>, msg: Message<Payload>) {
    match &msg.payload {
        Payload::DescriptorBatch(_) => {
            // The next sync round re-emits the batch.
            if let Some(agent) = agents.get_mut(&msg.src) {
                agent.desc_inflight.insert(msg.dst, false);
            }
        }
        // The registration handshake re-sends; everything else is periodic
        // and superseded by the next round.
        Payload::ScanRequest { .. } | Payload::ScanPayload { .. } => {
            let size = msg.size_bytes;
            transport.send(msg.src, msg.dst, msg.kind, msg.payload, size);
        }
        Payload::GraphDelta(_) | Payload::EstimateBroadcast(_) | Payload::Control(_) => {}
    }
}

fn handle_delivery(
    config: &ScenarioConfig,
    seed: u64,
    agents: &mut BTreeMap<RobotId, Agent>,
    transport: &mut Transport<Payload>,
    loops: &mut Vec<LoopRecord>,
    msg: Message<Payload>,
) {
    match msg.payload {
        Payload::DescriptorBatch(batch) => {
            // Sender side: the batch is acknowledged by delivery.
            let keys: Vec<KeyframeRef> = batch.iter().map(|d| d.key()).collect();
            if let Some(sender) = agents.get_mut(&msg.src) {
                sender.peer_known.entry(msg.dst).or_default().extend(keys.iter().copied());
                sender.desc_inflight.insert(msg.dst, false);
            }
            // Receiver side: store and detect candidates this robot owns.
            let receiver = agents.get_mut(&msg.dst).unwrap();
            let tau = config.frontend.tau_sim;
            let mut fresh = Vec::new();
            for d in batch {
                let key = d.key();
                if receiver.foreign_desc.contains_key(&key) {
                    continue;
                }
                if key.0 < receiver.id {
                    for own in receiver.own_desc.iter() {
                        if let Ok(sim) = similarity(own, &d) {
                            if sim >= tau {
                                fresh.push(CandidateMatch::new(own.key(), key, sim));
                            }
                        }
                    }
                }
                receiver.foreign_desc.insert(key, d);
            }
            for cand in fresh {
                if receiver.seen_pairs.insert(cand.pair_key()) {
                    receiver.pool.push(cand);
                }
            }
        }
        Payload::ScanRequest { target, candidate } => {
            let owner = agents.get_mut(&msg.dst).unwrap();
            if let Some(points) = owner.scans.get(target.1 as usize) {
                let size = sizes::scan_payload(points.len());
                transport.send(
                    msg.dst,
                    msg.src,
                    MessageKind::ScanPayload,
                    Payload::ScanPayload {
                        candidate,
                        points: points.clone(),
                    },
                    size,
                );
            }
        }
        Payload::ScanPayload { candidate, points } => {
            let gt_relative = {
                let a_agent = &agents[&candidate.0 .0];
                let b_agent = &agents[&candidate.1 .0];
                let ga = a_agent.kf_gt[candidate.0 .1 as usize];
                let gb = b_agent.kf_gt[candidate.1 .1 as usize];
                ga.relative_to(&gb)
            };
            let registrar = agents.get_mut(&msg.dst).unwrap();
            let Some(cand) = registrar.pending_reg.remove(&candidate) else {
                return;
            };
            let own_points = registrar.scans[cand.b.1 as usize].clone();
            let mut cfg = config.frontend.registration;
            cfg.min_inliers = config.frontend.min_inliers;
            cfg.seed_nr = config.frontend.nr;
            cfg.seed_ns = config.frontend.ns;
            cfg.seed_r_max = config.frontend.descriptor_r_max;
            let mut rng = derive_rng(
                seed,
                "register",
                &[
                    cand.a.0 as u64,
                    cand.a.1 as u64,
                    cand.b.0 as u64,
                    cand.b.1 as u64,
                ],
            );
            let result = register(&points, &own_points, &cfg, &mut rng);
            loops.push(LoopRecord {
                a: cand.a,
                b: cand.b,
                similarity: cand.similarity,
                inliers: result.inliers,
                success: result.success,
                measurement: result.relative_pose,
                gt_relative,
            });
            if result.success {
                let frac = (result.inliers as f64 / own_points.len().max(1) as f64).min(1.0);
                let info = diag_information(4.0 * frac, 4.0 * frac, 10.0 * frac);
                let edge = Edge {
                    kind: EdgeKind::InterRobotLoop,
                    from: cand.a,
                    to: cand.b,
                    measurement: result.relative_pose,
                    information: info,
                    author: registrar.id,
                    seq: registrar.graph.next_loop_seq(registrar.id),
                };
                // SPD by construction; duplicate insertions are no-ops.
                let _ = registrar.graph.insert_measurement(edge);
            }
        }
        Payload::GraphDelta(delta) => {
            // peer_vv is only updated from Control announcements: the delta's
            // sender_version is fresher than what the peer announced at the
            // round boundary and would desynchronize election inputs.
            let receiver = agents.get_mut(&msg.dst).unwrap();
            let _ = receiver.graph.apply_delta(&delta);
        }
        Payload::EstimateBroadcast(poses) => {
            if std::env::var("CSLAM_DEBUG").is_ok() {
                eprintln!("  robot {} receives broadcast from {} ({} poses)", msg.dst, msg.src, poses.len());
            }
            let receiver = agents.get_mut(&msg.dst).unwrap();
            for (key, pose) in &poses {
                receiver.graph.set_estimate(*key, *pose);
            }
            let own: BTreeMap<u32, Pose2> = poses
                .iter()
                .filter(|((r, _), _)| *r == receiver.id)
                .map(|((_, k), p)| (*k, *p))
                .collect();
            if let Some(latest) = own.keys().max().copied() {
                if let Some(local) = receiver.odom.get(latest as usize) {
                    receiver.correction = own[&latest].compose(&local.inverse());
                }
                receiver.latest_broadcast = own;
            }
        }
        Payload::Control(vv) => {
            let receiver = agents.get_mut(&msg.dst).unwrap();
            let delta = receiver.graph.delta_for(&vv);
            receiver.peer_vv.insert(msg.src, vv);
            if !delta.is_empty() {
                let size = sizes::graph_delta(delta.nodes.len(), delta.edges.len());
                transport.send(msg.dst, msg.src, MessageKind::GraphDelta, Payload::GraphDelta(delta), size);
            }
        }
    }
}

/// Metrics derived from one run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunSummary {
    pub team_ate: eval::AteResult,
    pub odometry_ate: eval::AteResult,
    pub tau_err: f64,
    pub correct: usize,
    pub incorrect: usize,
    pub failed: usize,
    pub comm: eval::CommSummary,
    pub optimizations: usize,
}

/// Evaluates a run: joint-aligned team ATE, per-robot-aligned odometry ATE,
/// and loop classification with `tau_err` defaulting to the run's own team
/// ATE mean.
pub fn evaluate(artifacts: &RunArtifacts, tau_err_override: Option<f64>) -> Result<RunSummary, eval::EvalError> {
    let team_ate = eval::ate(&artifacts.est_keyframes, &artifacts.gt_reference, true)?;
    let odometry_ate =
        eval::ate_per_robot_aligned(&artifacts.odom_keyframes, &artifacts.gt_reference)?;
    let tau_err = tau_err_override.unwrap_or(team_ate.mean);
    let mut correct = 0;
    let mut incorrect = 0;
    let mut failed = 0;
    for l in &artifacts.loops {
        match eval::classify_loop(l.success, &l.measurement, &l.gt_relative, tau_err) {
            LoopClass::Correct => correct += 1,
            LoopClass::Incorrect => incorrect += 1,
            LoopClass::Failed => failed += 1,
        }
    }
    let comm = eval::comm_summary(&artifacts.comm, correct);
    Ok(RunSummary {
        team_ate,
        odometry_ate,
        tau_err,
        correct,
        incorrect,
        failed,
        comm,
        optimizations: artifacts.optimizations,
    })
}

/// Sweep grid: each axis lists the values to run; a missing axis uses the
/// base config's value. Grid order is tau_sim-major, then min_inliers, then
/// budget.
#[derive(Debug, Clone, Serialize, Deserialize, Default, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct SweepGrid {
    pub tau_sim: Vec<f64>,
    pub min_inliers: Vec<usize>,
    /// `null` entries mean unlimited.
    pub budget: Vec<Option<usize>>,
}

/// Runs one deterministic simulation per grid point; all points share the
/// same world, trajectories, and noise streams.
pub fn sweep(
    base: &ScenarioConfig,
    grid: &SweepGrid,
    seed: u64,
) -> Result<Vec<eval::SweepRow>, RunError> {
    use rayon::prelude::*;
    let taus = if grid.tau_sim.is_empty() {
        vec![base.frontend.tau_sim]
    } else {
        grid.tau_sim.clone()
    };
    let inliers = if grid.min_inliers.is_empty() {
        vec![base.frontend.min_inliers]
    } else {
        grid.min_inliers.clone()
    };
    let budgets = if grid.budget.is_empty() {
        vec![base.frontend.budget]
    } else {
        grid.budget.clone()
    };
    let mut points = Vec::new();
    for tau in &taus {
        for mi in &inliers {
            for b in &budgets {
                points.push((*tau, *mi, *b));
            }
        }
    }
    let rows: Result<Vec<eval::SweepRow>, RunError> = points
        .par_iter()
        .map(|(tau, mi, b)| {
            let mut cfg = base.clone();
            cfg.frontend.tau_sim = *tau;
            cfg.frontend.min_inliers = *mi;
            cfg.frontend.budget = *b;
            let artifacts = run(&cfg, seed)?;
            let summary = evaluate(&artifacts, None).map_err(|e| {
                RunError::WorldFile(format!("evaluation failed: {e}"))
            })?;
            Ok(eval::SweepRow {
                tau_sim: *tau,
                min_inliers: *mi,
                budget: *b,
                correct: summary.correct,
                incorrect: summary.incorrect,
                failed: summary.failed,
                ate_mean: summary.team_ate.mean,
                front_end_bytes: summary.comm.front_end_bytes,
                back_end_bytes: summary.comm.back_end_bytes,
                kbytes_per_correct_loop: eval::SweepRow::kbytes_per_correct(
                    summary.comm.front_end_bytes,
                    summary.correct,
                ),
            })
        })
        .collect();
    rows
}

/// 1 Hz reference trajectory in the GPS role: ground truth, optionally with
/// emulated receiver noise.
pub fn reference_at_1hz(
    trajectory: &Trajectory,
    gps_sigma: Option<f64>,
    seed: u64,
    robot: RobotId,
) -> Vec<(f64, Pose2)> {
    use rand_distr::{Distribution, Normal};
    let duration = trajectory.samples.last().map(|(t, _)| *t).unwrap_or(0.0);
    let mut rng = derive_rng(seed, "gps", &[robot as u64]);
    let normal = Normal::new(0.0, gps_sigma.unwrap_or(0.0).max(1e-300)).unwrap();
    let mut out = Vec::new();
    let mut t = 0.0;
    while t <= duration + 1e-9 {
        let p = trajectory.pose_at(t);
        let p = match gps_sigma {
            Some(_) => Pose2::new(p.x + normal.sample(&mut rng), p.y + normal.sample(&mut rng), p.theta),
            None => p,
        };
        out.push((t, p));
        t += 1.0;
    }
    out
}

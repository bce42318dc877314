//! Synthetic planetary-analogue environment: disk landmarks with optional
//! duplicated "motif" clusters (controllable perceptual aliasing), shared-path
//! trajectory planning, simulated range scans, and noisy relative-pose
//! odometry.

use crate::geometry::{wrap_angle, Pose2};
use crate::rng::derive_rng;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type RobotId = u32;

#[derive(Debug, Error)]
pub enum WorldError {
    #[error("could not place {what} after {attempts} attempts; loosen the world config")]
    Placement { what: &'static str, attempts: usize },
    #[error("trajectory overlap {achieved:.3} below requested {requested:.3} after {attempts} attempts")]
    Overlap {
        achieved: f64,
        requested: f64,
        attempts: usize,
    },
    #[error("world bounds must have positive area")]
    EmptyBounds,
}

/// Axis-aligned rectangle in meters.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct Bounds {
    pub width: f64,
    pub height: f64,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct Landmark {
    pub x: f64,
    pub y: f64,
    pub radius: f64,
}

/// A placed copy of the duplicated landmark cluster.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct MotifStamp {
    pub motif_id: u32,
    pub pose: Pose2,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct World {
    pub bounds: Bounds,
    pub landmarks: Vec<Landmark>,
    pub motif_stamps: Vec<MotifStamp>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct WorldConfig {
    /// World extent in meters.
    pub width: f64,
    pub height: f64,
    /// Landmarks placed outside the motif clusters.
    pub n_landmarks: usize,
    pub landmark_radius_min: f64,
    pub landmark_radius_max: f64,
    /// Minimum boundary-to-boundary gap between landmark disks.
    pub min_gap: f64,
    /// Number of placed copies of the duplicated cluster (0 disables aliasing).
    pub motif_copies: usize,
    /// Disks per motif cluster.
    pub motif_landmarks: usize,
    /// Cluster extent: motif disks are placed within this radius of the stamp center.
    pub motif_radius: f64,
    /// Minimum center-to-center separation between motif stamps.
    pub min_motif_separation: f64,
    /// No non-motif landmark is placed within this radius of a stamp center,
    /// so the local geometry of every copy is identical.
    pub motif_exclusion_radius: f64,
    /// Optional x/y bands for motif stamp centers; keep the duplicated
    /// clusters inside the corridor the robots actually survey.
    pub motif_band_x: Option<(f64, f64)>,
    pub motif_band_y: Option<(f64, f64)>,
    /// Placement retries per item before giving up.
    pub max_attempts: usize,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            width: 100.0,
            height: 100.0,
            n_landmarks: 26,
            landmark_radius_min: 0.6,
            landmark_radius_max: 2.2,
            min_gap: 2.0,
            motif_copies: 2,
            motif_landmarks: 10,
            motif_radius: 10.0,
            min_motif_separation: 17.0,
            motif_exclusion_radius: 40.0,
            motif_band_x: Some((25.0, 60.0)),
            motif_band_y: Some((16.0, 28.0)),
            max_attempts: 200,
        }
    }
}

/// Range sensor model: single-return raycasts against landmark disks.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct SensorConfig {
    pub n_beams: usize,
    pub max_range: f64,
}

impl Default for SensorConfig {
    fn default() -> Self {
        Self {
            n_beams: 360,
            max_range: 50.0,
        }
    }
}

/// Per-robot noise profile. `vibration_scale` multiplies the scan noise and
/// dropout terms; it stands in for the measured difference between wheeled
/// and tracked platforms.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct RobotProfile {
    pub id: RobotId,
    /// Odometry translation noise, meters per meter traveled.
    pub odom_trans_sigma: f64,
    /// Odometry rotation noise, radians per radian turned.
    pub odom_rot_sigma: f64,
    /// Range noise, meters, before vibration scaling.
    pub scan_range_sigma: f64,
    /// Per-beam dropout probability, before vibration scaling.
    pub beam_dropout_prob: f64,
    /// >= 1; applied to scan_range_sigma and beam_dropout_prob.
    pub vibration_scale: f64,
}

impl RobotProfile {
    pub fn validate(&self) -> Result<(), String> {
        if self.odom_trans_sigma < 0.0 || self.odom_rot_sigma < 0.0 || self.scan_range_sigma < 0.0 {
            return Err(format!("robots[{}]: sigmas must be >= 0", self.id));
        }
        if !(0.0..=1.0).contains(&self.beam_dropout_prob) {
            return Err(format!("robots[{}]: beam_dropout_prob must be in [0,1]", self.id));
        }
        if self.vibration_scale < 1.0 {
            return Err(format!("robots[{}]: vibration_scale must be >= 1", self.id));
        }
        Ok(())
    }
}

/// A simulated 360° scan. Points are in the sensor frame. `origin_gt` is the
/// ground-truth pose the scan was taken from; the pipeline never reads it,
/// only the evaluation code does.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Scan {
    pub robot: RobotId,
    pub keyframe: u32,
    pub stamp: f64,
    pub points: Vec<[f64; 2]>,
    pub origin_gt: Pose2,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Trajectory {
    pub robot: RobotId,
    /// Time-ordered `(stamp_sec, pose)` samples at the simulation tick.
    pub samples: Vec<(f64, Pose2)>,
}

impl Trajectory {
    /// Pose at time `t` (clamped to the sampled range).
    pub fn pose_at(&self, t: f64) -> Pose2 {
        if self.samples.is_empty() {
            return Pose2::identity();
        }
        let idx = self
            .samples
            .partition_point(|(stamp, _)| *stamp <= t)
            .saturating_sub(1);
        self.samples[idx].1
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct TrajectoryConfig {
    /// Travel speed along the shared path, m/s.
    pub speed_mps: f64,
    /// Required pairwise overlap fraction.
    pub overlap: f64,
    /// Serpentine rows are laid out this far from the world border.
    pub margin: f64,
    /// Spacing between serpentine rows.
    pub row_spacing: f64,
    /// Out-and-back traversals of the shared corridor over the run; more
    /// cycles mean more revisits per place and a shorter corridor.
    pub out_back_cycles: usize,
    /// Lateral jitter amplitude per robot, meters.
    pub jitter_amplitude: f64,
    /// Jitter wavelength along the path, meters.
    pub jitter_wavelength: f64,
    /// Heading slew limit, radians per second; turn-arounds sweep over
    /// several keyframes instead of a single step.
    pub max_turn_rate: f64,
    pub duration_sec: f64,
    pub tick_sec: f64,
}

impl Default for TrajectoryConfig {
    fn default() -> Self {
        Self {
            speed_mps: 1.6,
            overlap: 0.8,
            margin: 22.0,
            row_spacing: 16.0,
            out_back_cycles: 2,
            jitter_amplitude: 0.4,
            jitter_wavelength: 37.0,
            max_turn_rate: 0.8,
            duration_sec: 110.0,
            tick_sec: 0.1,
        }
    }
}

fn disks_clear(a: &Landmark, b: &Landmark, gap: f64) -> bool {
    let d = (a.x - b.x).hypot(a.y - b.y);
    d >= a.radius + b.radius + gap
}

/// Builds a deterministic world: motif stamps first (with an exclusion zone
/// that keeps their neighborhoods identical), then free landmarks.
pub fn generate_world(config: &WorldConfig, seed: u64) -> Result<World, WorldError> {
    if config.width <= 0.0 || config.height <= 0.0 {
        return Err(WorldError::EmptyBounds);
    }
    let mut rng = derive_rng(seed, "world", &[]);
    let bounds = Bounds {
        width: config.width,
        height: config.height,
    };
    let mut landmarks: Vec<Landmark> = Vec::new();
    let mut stamps: Vec<MotifStamp> = Vec::new();

    // Motif template in its local frame.
    let template: Vec<Landmark> = if config.motif_copies > 0 {
        (0..config.motif_landmarks)
            .map(|i| {
                let ang = 2.0 * std::f64::consts::PI * (i as f64) / (config.motif_landmarks as f64)
                    + rng.gen_range(-0.25..0.25);
                let r = config.motif_radius * rng.gen_range(0.45..1.0);
                Landmark {
                    x: r * ang.cos(),
                    y: r * ang.sin(),
                    radius: rng.gen_range(1.2..2.4),
                }
            })
            .collect()
    } else {
        Vec::new()
    };

    // Stamps are sampled as a set: a first stamp in the middle of the band
    // can make the separation constraint unsatisfiable, so a wedged set is
    // restarted rather than retried stamp by stamp.
    let pad = config.motif_radius + 3.0;
    if config.motif_copies > 0 {
        let clamp_band = |band: Option<(f64, f64)>, extent: f64| -> (f64, f64) {
            match band {
                Some((lo, hi)) => (lo.max(pad), hi.min(extent - pad).max(lo.max(pad) + 1e-9)),
                None => (pad, (extent - pad).max(pad + 1e-9)),
            }
        };
        let (x_lo, x_hi) = clamp_band(config.motif_band_x, config.width);
        let (y_lo, y_hi) = clamp_band(config.motif_band_y, config.height);
        let separation = config.min_motif_separation.max(2.0 * pad);
        let mut done = false;
        'restart: for _ in 0..config.max_attempts {
            let mut trial: Vec<Pose2> = Vec::with_capacity(config.motif_copies);
            for _ in 0..config.motif_copies {
                let mut placed = false;
                for _ in 0..50 {
                    let pose = Pose2::new(
                        rng.gen_range(x_lo..x_hi),
                        rng.gen_range(y_lo..y_hi),
                        rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI),
                    );
                    if trial.iter().all(|p| p.distance_to(&pose) >= separation) {
                        trial.push(pose);
                        placed = true;
                        break;
                    }
                }
                if !placed {
                    continue 'restart;
                }
            }
            for (copy, pose) in trial.into_iter().enumerate() {
                for lm in &template {
                    let p = pose.transform_point([lm.x, lm.y]);
                    landmarks.push(Landmark {
                        x: p[0],
                        y: p[1],
                        radius: lm.radius,
                    });
                }
                stamps.push(MotifStamp {
                    motif_id: copy as u32,
                    pose,
                });
            }
            done = true;
            break;
        }
        if !done {
            return Err(WorldError::Placement {
                what: "motif stamp",
                attempts: config.max_attempts,
            });
        }
    }

    for _ in 0..config.n_landmarks {
        let mut placed = false;
        for _ in 0..config.max_attempts {
            let radius = rng.gen_range(config.landmark_radius_min..=config.landmark_radius_max);
            let cand = Landmark {
                x: rng.gen_range(radius..(config.width - radius).max(radius + 1e-9)),
                y: rng.gen_range(radius..(config.height - radius).max(radius + 1e-9)),
                radius,
            };
            let clear_of_motifs = stamps.iter().all(|s| {
                (cand.x - s.pose.x).hypot(cand.y - s.pose.y) >= config.motif_exclusion_radius
            });
            if clear_of_motifs && landmarks.iter().all(|l| disks_clear(l, &cand, config.min_gap)) {
                landmarks.push(cand);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(WorldError::Placement {
                what: "landmark",
                attempts: config.max_attempts,
            });
        }
    }

    Ok(World {
        bounds,
        landmarks,
        motif_stamps: stamps,
    })
}

/// The serpentine base path every robot shares, truncated to `target_len`.
fn base_path(bounds: &Bounds, cfg: &TrajectoryConfig, target_len: f64) -> Vec<[f64; 2]> {
    let m = cfg.margin;
    let x0 = m;
    let x1 = (bounds.width - m).max(m + 1.0);
    let mut corners = vec![[x0, m]];
    let mut y = m;
    let mut left_to_right = true;
    while y < bounds.height - m {
        let (xa, xb) = if left_to_right { (x0, x1) } else { (x1, x0) };
        corners.push([xb, y]);
        let _ = xa;
        y += cfg.row_spacing;
        if y < bounds.height - m {
            corners.push([xb, y]);
        }
        left_to_right = !left_to_right;
    }
    // Truncate to arc length target_len.
    let mut path = vec![corners[0]];
    let mut remaining = target_len;
    for w in corners.windows(2) {
        let (a, b) = (w[0], w[1]);
        let seg = (b[0] - a[0]).hypot(b[1] - a[1]);
        if seg >= remaining {
            let f = remaining / seg;
            path.push([a[0] + f * (b[0] - a[0]), a[1] + f * (b[1] - a[1])]);
            remaining = 0.0;
            break;
        }
        path.push(b);
        remaining -= seg;
    }
    if remaining > 0.0 {
        // Path shorter than requested; robots will turn around more often.
    }
    path
}

struct ArcPath {
    pts: Vec<[f64; 2]>,
    cum: Vec<f64>,
}

impl ArcPath {
    fn new(pts: Vec<[f64; 2]>) -> Self {
        let mut cum = vec![0.0];
        for w in pts.windows(2) {
            let d = (w[1][0] - w[0][0]).hypot(w[1][1] - w[0][1]);
            cum.push(cum.last().unwrap() + d);
        }
        Self { pts, cum }
    }

    fn len(&self) -> f64 {
        *self.cum.last().unwrap()
    }

    /// Position and unit tangent at arc length `s` (clamped).
    fn sample(&self, s: f64) -> ([f64; 2], [f64; 2]) {
        let s = s.clamp(0.0, self.len());
        let i = self
            .cum
            .partition_point(|c| *c <= s)
            .clamp(1, self.cum.len() - 1);
        let (a, b) = (self.pts[i - 1], self.pts[i]);
        let seg = (self.cum[i] - self.cum[i - 1]).max(1e-12);
        let f = (s - self.cum[i - 1]) / seg;
        let pos = [a[0] + f * (b[0] - a[0]), a[1] + f * (b[1] - a[1])];
        let tangent = [(b[0] - a[0]) / seg, (b[1] - a[1]) / seg];
        (pos, tangent)
    }
}

/// Arc-length position for an out-and-back traversal starting at `phase`.
/// Returns (arc position, direction sign).
fn bounce(phase: f64, dir0: f64, travelled: f64, len: f64) -> (f64, f64) {
    let cycle = 2.0 * len;
    let mut u = if dir0 >= 0.0 { phase } else { cycle - phase };
    u = (u + travelled).rem_euclid(cycle);
    if u <= len {
        (u, 1.0)
    } else {
        (cycle - u, -1.0)
    }
}

/// Plans one trajectory per robot. All robots traverse the same serpentine
/// corridor out-and-back (each in a different order/direction plus a small
/// lateral jitter), which maximizes the overlap between their maps.
pub fn plan_trajectories(
    world: &World,
    n_robots: usize,
    cfg: &TrajectoryConfig,
    seed: u64,
) -> Result<Vec<Trajectory>, WorldError> {
    assert!(n_robots >= 1, "n_robots must be >= 1");
    let travel = cfg.speed_mps * cfg.duration_sec;
    let cycles = cfg.out_back_cycles.max(1) as f64;
    let target_len = (travel / (2.0 * cycles)).max(2.0 * cfg.row_spacing);
    let path = ArcPath::new(base_path(&world.bounds, cfg, target_len));
    let len = path.len();
    let n_ticks = (cfg.duration_sec / cfg.tick_sec).round() as usize;

    let max_attempts = 8usize;
    let mut attempt = 0;
    loop {
        let jitter_scale = 1.0 / (1 << attempt) as f64;
        let mut trajectories = Vec::with_capacity(n_robots);
        // One shared meander: robots travel the same curve in convoy, so the
        // noise pairing in the odometry model lines up place by place.
        let mut rng = derive_rng(seed, "trajectory", &[attempt as u64]);
        let phase_x: f64 = rng.gen_range(0.0..2.0 * std::f64::consts::PI);
        let phase_y: f64 = rng.gen_range(0.0..2.0 * std::f64::consts::PI);
        for robot in 0..n_robots {
            let amp = cfg.jitter_amplitude * jitter_scale;
            // Robots follow the corridor in convoy with small along-path
            // offsets; the jitter keeps their scans distinct. Keeping the
            // headings aligned at equal travel makes the per-robot odometry
            // noise a paired comparison.
            let (phase, dir0) = ((robot as f64 * 4.0).min(len * 0.45), 1.0);
            // Smooth displacement field in s, continuous through corners and
            // the turn-around. Headings follow the actual displacement so the
            // heading wiggles with the jitter instead of staying constant
            // along straight rows.
            let k1 = 2.0 * std::f64::consts::PI / cfg.jitter_wavelength;
            let k2 = k1 * 0.83;
            let mut positions = Vec::with_capacity(n_ticks + 2);
            for k in 0..=n_ticks + 1 {
                let t = k as f64 * cfg.tick_sec;
                let (s, _) = bounce(phase, dir0, cfg.speed_mps * t, len);
                let (pos, _) = path.sample(s);
                let jx = amp * (k1 * s + phase_x).sin();
                let jy = amp * (k2 * s + phase_y).sin();
                positions.push([pos[0] + jx, pos[1] + jy]);
            }
            let mut samples = Vec::with_capacity(n_ticks + 1);
            let mut heading: Option<f64> = None;
            let slew = cfg.max_turn_rate * cfg.tick_sec;
            for k in 0..=n_ticks {
                let t = k as f64 * cfg.tick_sec;
                let d = [
                    positions[k + 1][0] - positions[k][0],
                    positions[k + 1][1] - positions[k][1],
                ];
                let target = if d[0].hypot(d[1]) > 1e-9 {
                    d[1].atan2(d[0])
                } else {
                    heading.unwrap_or(0.0)
                };
                let next = match heading {
                    None => target,
                    Some(h) => h + wrap_angle(target - h).clamp(-slew, slew),
                };
                heading = Some(next);
                samples.push((t, Pose2::new(positions[k][0], positions[k][1], next)));
            }
            trajectories.push(Trajectory {
                robot: robot as RobotId,
                samples,
            });
        }

        if n_robots == 1 {
            return Ok(trajectories);
        }
        let achieved = pairwise_overlap(&trajectories);
        if achieved >= cfg.overlap {
            return Ok(trajectories);
        }
        attempt += 1;
        if attempt >= max_attempts {
            return Err(WorldError::Overlap {
                achieved,
                requested: cfg.overlap,
                attempts: attempt,
            });
        }
    }
}

/// Minimum over ordered robot pairs of the fraction of one robot's
/// keyframe-spaced positions within 10 m of the other's path.
pub fn pairwise_overlap(trajectories: &[Trajectory]) -> f64 {
    let mut min_frac: f64 = 1.0;
    for a in trajectories {
        for b in trajectories {
            if a.robot == b.robot {
                continue;
            }
            min_frac = min_frac.min(overlap_fraction(a, b, 10.0));
        }
    }
    min_frac
}

/// Fraction of `a`'s positions, subsampled at ~1 m spacing (the keyframe
/// rule), that lie within `radius` of `b`'s path.
pub fn overlap_fraction(a: &Trajectory, b: &Trajectory, radius: f64) -> f64 {
    let mut queries: Vec<[f64; 2]> = Vec::new();
    let mut last: Option<Pose2> = None;
    for (_, p) in &a.samples {
        if last.map_or(true, |l| l.distance_to(p) >= 1.0) {
            queries.push([p.x, p.y]);
            last = Some(*p);
        }
    }
    if queries.is_empty() {
        return 1.0;
    }
    let path: Vec<[f64; 2]> = b.samples.iter().map(|(_, p)| [p.x, p.y]).collect();
    let hits = queries
        .iter()
        .filter(|q| point_to_polyline(**q, &path) <= radius)
        .count();
    hits as f64 / queries.len() as f64
}

fn point_to_polyline(p: [f64; 2], path: &[[f64; 2]]) -> f64 {
    let mut best = f64::INFINITY;
    for w in path.windows(2) {
        best = best.min(point_to_segment(p, w[0], w[1]));
        if best == 0.0 {
            break;
        }
    }
    if path.len() == 1 {
        best = (p[0] - path[0][0]).hypot(p[1] - path[0][1]);
    }
    best
}

fn point_to_segment(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let ab = [b[0] - a[0], b[1] - a[1]];
    let ap = [p[0] - a[0], p[1] - a[1]];
    let denom = ab[0] * ab[0] + ab[1] * ab[1];
    let t = if denom > 0.0 {
        ((ap[0] * ab[0] + ap[1] * ab[1]) / denom).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let c = [a[0] + t * ab[0], a[1] + t * ab[1]];
    (p[0] - c[0]).hypot(p[1] - c[1])
}

/// Distance along a ray (origin `o`, unit direction `d`) to a disk, if hit.
fn ray_disk(o: [f64; 2], d: [f64; 2], lm: &Landmark) -> Option<f64> {
    let oc = [lm.x - o[0], lm.y - o[1]];
    let proj = oc[0] * d[0] + oc[1] * d[1];
    let closest_sq = oc[0] * oc[0] + oc[1] * oc[1] - proj * proj;
    let r_sq = lm.radius * lm.radius;
    if closest_sq > r_sq {
        return None;
    }
    let t = proj - (r_sq - closest_sq).sqrt();
    if t > 0.0 {
        Some(t)
    } else {
        None
    }
}

/// Casts one ray per beam and applies range noise and dropout. Points are
/// returned in the sensor frame.
pub fn simulate_scan(
    world: &World,
    pose: &Pose2,
    sensor: &SensorConfig,
    profile: &RobotProfile,
    rng: &mut ChaCha8Rng,
) -> Vec<[f64; 2]> {
    assert!(sensor.n_beams >= 1 && sensor.max_range > 0.0);
    let sigma = profile.scan_range_sigma * profile.vibration_scale;
    let dropout = (profile.beam_dropout_prob * profile.vibration_scale).min(1.0);
    let normal = Normal::new(0.0, sigma.max(1e-300)).unwrap();
    let mut points = Vec::new();
    for k in 0..sensor.n_beams {
        let phi = -std::f64::consts::PI
            + 2.0 * std::f64::consts::PI * (k as f64) / (sensor.n_beams as f64);
        let ang = pose.theta + phi;
        let dir = [ang.cos(), ang.sin()];
        let origin = [pose.x, pose.y];
        let mut best: Option<f64> = None;
        for lm in &world.landmarks {
            if let Some(t) = ray_disk(origin, dir, lm) {
                if t <= sensor.max_range && best.map_or(true, |b| t < b) {
                    best = Some(t);
                }
            }
        }
        // Noise and dropout draws are consumed per beam regardless of a hit so
        // the stream stays aligned across worlds.
        let noise = if sigma > 0.0 { normal.sample(rng) } else { 0.0 };
        let dropped = rng.gen::<f64>() < dropout;
        if let Some(range) = best {
            if !dropped {
                let r = (range + noise).max(0.0);
                points.push([r * phi.cos(), r * phi.sin()]);
            }
        }
    }
    points
}

/// Noisy relative-pose odometry between two ground-truth poses. The noise is
/// proportional to the motion: sigma_xy = odom_trans_sigma * |translation|,
/// sigma_theta = odom_rot_sigma * |rotation|.
pub fn odometry_measure(
    prev_gt: &Pose2,
    curr_gt: &Pose2,
    profile: &RobotProfile,
    rng: &mut ChaCha8Rng,
) -> Pose2 {
    let rel = prev_gt.relative_to(curr_gt);
    let sigma_xy = profile.odom_trans_sigma * rel.translation_norm();
    let sigma_th = profile.odom_rot_sigma * rel.theta.abs();
    let nx = Normal::new(0.0, sigma_xy.max(1e-300)).unwrap();
    let nt = Normal::new(0.0, sigma_th.max(1e-300)).unwrap();
    let (dx, dy, dt) = (nx.sample(rng), nx.sample(rng), nt.sample(rng));
    Pose2::new(
        rel.x + if sigma_xy > 0.0 { dx } else { 0.0 },
        rel.y + if sigma_xy > 0.0 { dy } else { 0.0 },
        rel.theta + if sigma_th > 0.0 { dt } else { 0.0 },
    )
}

/// Odometry noise sigmas for a given relative motion; used to build the
/// information matrix of the corresponding graph edge.
pub fn odometry_sigmas(rel: &Pose2, profile: &RobotProfile) -> (f64, f64) {
    let sigma_xy = (profile.odom_trans_sigma * rel.translation_norm()).max(1e-3);
    let sigma_th = (profile.odom_rot_sigma * rel.theta.abs()).max(2e-3);
    (sigma_xy, sigma_th)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn quiet_profile(id: RobotId) -> RobotProfile {
        RobotProfile {
            id,
            odom_trans_sigma: 0.0,
            odom_rot_sigma: 0.0,
            scan_range_sigma: 0.0,
            beam_dropout_prob: 0.0,
            vibration_scale: 1.0,
        }
    }

    #[test]
    fn empty_world_is_empty() {
        let cfg = WorldConfig {
            n_landmarks: 0,
            motif_copies: 0,
            ..WorldConfig::default()
        };
        let w = generate_world(&cfg, 3).unwrap();
        assert!(w.landmarks.is_empty());
        assert!(w.motif_stamps.is_empty());
    }

    #[test]
    fn world_generation_is_deterministic() {
        let cfg = WorldConfig::default();
        let a = generate_world(&cfg, 42).unwrap();
        let b = generate_world(&cfg, 42).unwrap();
        assert_eq!(a, b);
        let c = generate_world(&cfg, 43).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn landmarks_inside_bounds() {
        let w = generate_world(&WorldConfig::default(), 7).unwrap();
        for lm in &w.landmarks {
            assert!(lm.x >= 0.0 && lm.x <= w.bounds.width);
            assert!(lm.y >= 0.0 && lm.y <= w.bounds.height);
            assert!(lm.radius > 0.0);
        }
    }

    #[test]
    fn motif_copies_are_rigid_duplicates() {
        let cfg = WorldConfig::default();
        let w = generate_world(&cfg, 7).unwrap();
        assert_eq!(w.motif_stamps.len(), 2);
        let (s0, s1) = (w.motif_stamps[0], w.motif_stamps[1]);
        assert!(s0.pose.distance_to(&s1.pose) >= cfg.min_motif_separation);
        // The transform between the stamps maps copy 0's disks exactly onto
        // copy 1's disks (same template, rigid placement).
        let rel = s0.pose.relative_to(&s1.pose);
        let n = cfg.motif_landmarks;
        for i in 0..n {
            let a = w.landmarks[i];
            let b = w.landmarks[n + i];
            let local = s0.pose.inverse().transform_point([a.x, a.y]);
            let mapped = s0.pose.compose(&rel).transform_point(local);
            assert_abs_diff_eq!(mapped[0], b.x, epsilon = 1e-9);
            assert_abs_diff_eq!(mapped[1], b.y, epsilon = 1e-9);
            assert_abs_diff_eq!(a.radius, b.radius, epsilon = 1e-12);
        }
    }

    #[test]
    fn single_robot_trajectory_in_bounds() {
        let w = generate_world(&WorldConfig::default(), 1).unwrap();
        let cfg = TrajectoryConfig::default();
        let trajs = plan_trajectories(&w, 1, &cfg, 1).unwrap();
        assert_eq!(trajs.len(), 1);
        for (_, p) in &trajs[0].samples {
            assert!(p.x >= 0.0 && p.x <= w.bounds.width);
            assert!(p.y >= 0.0 && p.y <= w.bounds.height);
        }
    }

    #[test]
    fn trajectories_meet_overlap_and_speed_limit() {
        let w = generate_world(&WorldConfig::default(), 1).unwrap();
        let cfg = TrajectoryConfig::default();
        let trajs = plan_trajectories(&w, 3, &cfg, 9).unwrap();
        assert!(pairwise_overlap(&trajs) >= cfg.overlap);
        let max_step = cfg.speed_mps * cfg.tick_sec * 2.0;
        for t in &trajs {
            for w2 in t.samples.windows(2) {
                assert!(w2[1].0 > w2[0].0);
                assert!(w2[0].1.distance_to(&w2[1].1) <= max_step);
            }
        }
    }

    #[test]
    fn trajectories_deterministic() {
        let w = generate_world(&WorldConfig::default(), 1).unwrap();
        let cfg = TrajectoryConfig::default();
        let a = plan_trajectories(&w, 3, &cfg, 5).unwrap();
        let b = plan_trajectories(&w, 3, &cfg, 5).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn scan_of_empty_world_is_empty() {
        let w = World {
            bounds: Bounds {
                width: 10.0,
                height: 10.0,
            },
            landmarks: vec![],
            motif_stamps: vec![],
        };
        let mut rng = derive_rng(0, "scan", &[0]);
        let pts = simulate_scan(
            &w,
            &Pose2::identity(),
            &SensorConfig::default(),
            &quiet_profile(1),
            &mut rng,
        );
        assert!(pts.is_empty());
    }

    #[test]
    fn facing_beam_range_is_distance_minus_radius() {
        let w = World {
            bounds: Bounds {
                width: 40.0,
                height: 40.0,
            },
            landmarks: vec![Landmark {
                x: 10.0,
                y: 0.0,
                radius: 1.5,
            }],
            motif_stamps: vec![],
        };
        let mut rng = derive_rng(0, "scan", &[0]);
        let pts = simulate_scan(
            &w,
            &Pose2::identity(),
            &SensorConfig::default(),
            &quiet_profile(1),
            &mut rng,
        );
        // The beam at phi = 0 must return exactly 10 - 1.5 = 8.5 m.
        let facing = pts
            .iter()
            .find(|p| p[1].abs() < 1e-9 && p[0] > 0.0)
            .expect("facing beam returned no point");
        assert_abs_diff_eq!(facing[0], 8.5, epsilon = 1e-9);
    }

    #[test]
    fn noiseless_scan_points_on_landmark_boundaries() {
        let w = generate_world(&WorldConfig::default(), 11).unwrap();
        let pose = Pose2::new(50.0, 50.0, 0.3);
        let mut rng = derive_rng(0, "scan", &[1]);
        let pts = simulate_scan(&w, &pose, &SensorConfig::default(), &quiet_profile(1), &mut rng);
        assert!(!pts.is_empty());
        for p in &pts {
            let world_pt = pose.transform_point(*p);
            let on_boundary = w
                .landmarks
                .iter()
                .map(|lm| ((world_pt[0] - lm.x).hypot(world_pt[1] - lm.y) - lm.radius).abs())
                .fold(f64::INFINITY, f64::min);
            assert!(on_boundary < 1e-6, "point {world_pt:?} off boundary by {on_boundary}");
        }
    }

    #[test]
    fn vibration_reduces_mean_point_count() {
        let w = generate_world(&WorldConfig::default(), 11).unwrap();
        let pose = Pose2::new(50.0, 50.0, 0.0);
        let sensor = SensorConfig::default();
        let mut base = quiet_profile(1);
        base.beam_dropout_prob = 0.05;
        base.scan_range_sigma = 0.05;
        let mut shaky = base;
        shaky.vibration_scale = 2.0;
        let count = |profile: &RobotProfile, tag: u64| -> f64 {
            let mut total = 0usize;
            for i in 0..1000u64 {
                let mut rng = derive_rng(99, "mc", &[tag, i]);
                total += simulate_scan(&w, &pose, &sensor, profile, &mut rng).len();
            }
            total as f64 / 1000.0
        };
        assert!(count(&shaky, 2) < count(&base, 1));
    }

    #[test]
    fn odometry_exact_when_noiseless() {
        let prev = Pose2::new(1.0, 2.0, 0.4);
        let curr = Pose2::new(2.5, 1.0, -0.9);
        let mut rng = derive_rng(0, "odom", &[0]);
        let m = odometry_measure(&prev, &curr, &quiet_profile(1), &mut rng);
        let expect = prev.relative_to(&curr);
        assert_abs_diff_eq!(m.x, expect.x, epsilon = 1e-12);
        assert_abs_diff_eq!(m.y, expect.y, epsilon = 1e-12);
        assert_abs_diff_eq!(m.theta, expect.theta, epsilon = 1e-12);

        let same = odometry_measure(&prev, &prev, &quiet_profile(1), &mut rng);
        assert_abs_diff_eq!(same.x, 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(same.theta, 0.0, epsilon = 1e-12);
    }
}

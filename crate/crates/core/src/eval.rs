//! Evaluation: Umeyama-aligned translation error, per-robot odometry error,
//! loop-closure classification, rank correlation, and communication
//! summaries. Mirrors the metrics used to analyze the field experiments.

use crate::comms::{Category, CommReport};
use crate::geometry::Pose2;
use crate::world::RobotId;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("need at least {needed} associated samples, found {found}")]
    TooFewPairs { needed: usize, found: usize },
    #[error("no trajectories to evaluate")]
    Empty,
}

/// Maximum stamp gap when pairing estimate and truth samples; half the 1 Hz
/// reference period.
pub const ASSOC_MAX_GAP_SEC: f64 = 0.5;

/// Pairs each estimate sample with the nearest-stamp truth sample within
/// [`ASSOC_MAX_GAP_SEC`]. Both inputs must be stamp-sorted.
pub fn associate(estimate: &[(f64, Pose2)], truth: &[(f64, Pose2)]) -> Vec<(Pose2, Pose2)> {
    let mut out = Vec::new();
    if truth.is_empty() {
        return out;
    }
    for (stamp, est) in estimate {
        let idx = truth.partition_point(|(t, _)| *t < *stamp);
        let mut best: Option<(f64, &Pose2)> = None;
        for cand in [idx.checked_sub(1), Some(idx)].into_iter().flatten() {
            if let Some((t, p)) = truth.get(cand) {
                let gap = (t - stamp).abs();
                if gap <= ASSOC_MAX_GAP_SEC && best.map_or(true, |(bg, _)| gap < bg) {
                    best = Some((gap, p));
                }
            }
        }
        if let Some((_, p)) = best {
            out.push((*est, *p));
        }
    }
    out
}

/// Closed-form planar rigid fit (no scale): the transform `T` minimizing
/// `sum || T(a_i) - b_i ||^2` over position pairs `(a, b)`.
pub fn fit_rigid(pairs: &[([f64; 2], [f64; 2])]) -> Result<Pose2, EvalError> {
    if pairs.len() < 2 {
        return Err(EvalError::TooFewPairs {
            needed: 2,
            found: pairs.len(),
        });
    }
    let n = pairs.len() as f64;
    let mut ca = [0.0; 2];
    let mut cb = [0.0; 2];
    for (a, b) in pairs {
        ca[0] += a[0];
        ca[1] += a[1];
        cb[0] += b[0];
        cb[1] += b[1];
    }
    ca = [ca[0] / n, ca[1] / n];
    cb = [cb[0] / n, cb[1] / n];
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    for (a, b) in pairs {
        let da = [a[0] - ca[0], a[1] - ca[1]];
        let db = [b[0] - cb[0], b[1] - cb[1]];
        sxx += da[0] * db[0] + da[1] * db[1];
        sxy += da[0] * db[1] - da[1] * db[0];
    }
    let theta = sxy.atan2(sxx);
    let (s, c) = theta.sin_cos();
    Ok(Pose2::new(
        cb[0] - (c * ca[0] - s * ca[1]),
        cb[1] - (s * ca[0] + c * ca[1]),
        theta,
    ))
}

/// Rigid transform aligning an estimated trajectory onto ground truth after
/// timestamp association.
pub fn umeyama_align(estimate: &[(f64, Pose2)], truth: &[(f64, Pose2)]) -> Result<Pose2, EvalError> {
    let assoc = associate(estimate, truth);
    let pairs: Vec<([f64; 2], [f64; 2])> = assoc
        .iter()
        .map(|(e, t)| ([e.x, e.y], [t.x, t.y]))
        .collect();
    fit_rigid(&pairs)
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct AteResult {
    pub mean: f64,
    pub std: f64,
    pub per_robot: BTreeMap<RobotId, (f64, f64)>,
    pub n_samples: usize,
}

fn mean_std(errors: &[f64]) -> (f64, f64) {
    if errors.is_empty() {
        return (0.0, 0.0);
    }
    let n = errors.len() as f64;
    let mean = errors.iter().sum::<f64>() / n;
    let var = errors.iter().map(|e| (e - mean) * (e - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Average translation error over all robots. With `align` the whole team is
/// aligned jointly by one rigid transform (inter-robot consistency counts);
/// without it errors are measured in the raw frames.
pub fn ate(
    estimates: &BTreeMap<RobotId, Vec<(f64, Pose2)>>,
    truths: &BTreeMap<RobotId, Vec<(f64, Pose2)>>,
    align: bool,
) -> Result<AteResult, EvalError> {
    let mut per_robot_pairs: BTreeMap<RobotId, Vec<(Pose2, Pose2)>> = BTreeMap::new();
    for (robot, est) in estimates {
        if let Some(truth) = truths.get(robot) {
            let assoc = associate(est, truth);
            if !assoc.is_empty() {
                per_robot_pairs.insert(*robot, assoc);
            }
        }
    }
    let total: usize = per_robot_pairs.values().map(|v| v.len()).sum();
    if total < 2 {
        return Err(EvalError::TooFewPairs {
            needed: 2,
            found: total,
        });
    }
    let transform = if align {
        let pairs: Vec<([f64; 2], [f64; 2])> = per_robot_pairs
            .values()
            .flatten()
            .map(|(e, t)| ([e.x, e.y], [t.x, t.y]))
            .collect();
        fit_rigid(&pairs)?
    } else {
        Pose2::identity()
    };
    let mut all_errors = Vec::with_capacity(total);
    let mut per_robot = BTreeMap::new();
    for (robot, pairs) in &per_robot_pairs {
        let errors: Vec<f64> = pairs
            .iter()
            .map(|(e, t)| {
                let m = transform.transform_point([e.x, e.y]);
                (m[0] - t.x).hypot(m[1] - t.y)
            })
            .collect();
        per_robot.insert(*robot, mean_std(&errors));
        all_errors.extend(errors);
    }
    let (mean, std) = mean_std(&all_errors);
    Ok(AteResult {
        mean,
        std,
        per_robot,
        n_samples: all_errors.len(),
    })
}

/// Per-robot ATE where each robot is aligned individually (the fair baseline
/// for open-loop odometry, whose frames share nothing).
pub fn ate_per_robot_aligned(
    estimates: &BTreeMap<RobotId, Vec<(f64, Pose2)>>,
    truths: &BTreeMap<RobotId, Vec<(f64, Pose2)>>,
) -> Result<AteResult, EvalError> {
    let mut all_errors = Vec::new();
    let mut per_robot = BTreeMap::new();
    for (robot, est) in estimates {
        let Some(truth) = truths.get(robot) else { continue };
        let assoc = associate(est, truth);
        let pairs: Vec<([f64; 2], [f64; 2])> = assoc
            .iter()
            .map(|(e, t)| ([e.x, e.y], [t.x, t.y]))
            .collect();
        let transform = fit_rigid(&pairs)?;
        let errors: Vec<f64> = pairs
            .iter()
            .map(|(a, b)| {
                let m = transform.transform_point(*a);
                (m[0] - b[0]).hypot(m[1] - b[1])
            })
            .collect();
        per_robot.insert(*robot, mean_std(&errors));
        all_errors.extend(errors);
    }
    if all_errors.len() < 2 {
        return Err(EvalError::TooFewPairs {
            needed: 2,
            found: all_errors.len(),
        });
    }
    let (mean, std) = mean_std(&all_errors);
    Ok(AteResult {
        n_samples: all_errors.len(),
        mean,
        std,
        per_robot,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LoopClass {
    Correct,
    Incorrect,
    Failed,
}

/// Classifies a registration outcome against the ground-truth relative pose:
/// failed registrations are `Failed`; otherwise the loop is `Correct` when
/// the translation error stays under `tau_err`.
pub fn classify_loop(
    success: bool,
    measurement: &Pose2,
    gt_relative: &Pose2,
    tau_err: f64,
) -> LoopClass {
    if !success {
        return LoopClass::Failed;
    }
    let err = (measurement.x - gt_relative.x).hypot(measurement.y - gt_relative.y);
    if err < tau_err {
        LoopClass::Correct
    } else {
        LoopClass::Incorrect
    }
}

/// One grid point of a calibration sweep.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SweepRow {
    pub tau_sim: f64,
    pub min_inliers: usize,
    /// None encodes an unlimited budget.
    pub budget: Option<usize>,
    pub correct: usize,
    pub incorrect: usize,
    pub failed: usize,
    pub ate_mean: f64,
    pub front_end_bytes: u64,
    pub back_end_bytes: u64,
    pub kbytes_per_correct_loop: f64,
}

impl SweepRow {
    pub fn kbytes_per_correct(front_end_bytes: u64, correct: usize) -> f64 {
        (front_end_bytes as f64 / 1000.0) / (correct.max(1) as f64)
    }
}

pub fn write_sweep_csv(rows: &[SweepRow], w: &mut impl std::io::Write) -> std::io::Result<()> {
    writeln!(
        w,
        "tau_sim,min_inliers,budget,correct,incorrect,failed,ate_mean,front_end_bytes,back_end_bytes,kbytes_per_correct_loop"
    )?;
    for r in rows {
        let budget = r
            .budget
            .map(|b| b.to_string())
            .unwrap_or_else(|| "unlimited".into());
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{},{}",
            r.tau_sim,
            r.min_inliers,
            budget,
            r.correct,
            r.incorrect,
            r.failed,
            r.ate_mean,
            r.front_end_bytes,
            r.back_end_bytes,
            r.kbytes_per_correct_loop
        )?;
    }
    Ok(())
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(xs: &[f64], ys: &[f64]) -> f64 {
    assert_eq!(xs.len(), ys.len());
    let rx = ranks(xs);
    let ry = ranks(ys);
    pearson(&rx, &ry)
}

fn ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|a, b| values[*a].partial_cmp(&values[*b]).unwrap());
    let mut out = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            out[idx[k]] = avg;
        }
        i = j + 1;
    }
    out
}

fn pearson(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut num = 0.0;
    let mut dx = 0.0;
    let mut dy = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        num += (x - mx) * (y - my);
        dx += (x - mx) * (x - mx);
        dy += (y - my) * (y - my);
    }
    if dx == 0.0 || dy == 0.0 {
        return 0.0;
    }
    num / (dx * dy).sqrt()
}

/// Flattened, serializable communication summary.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CommSummary {
    pub front_end_bytes: u64,
    pub back_end_bytes: u64,
    pub control_bytes: u64,
    pub kbytes_per_correct_loop: f64,
    pub pairs: Vec<PairSummary>,
    /// `(t_sec, cumulative capacity bytes, cumulative demand bytes)`.
    pub series: Vec<(u64, f64, u64)>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PairSummary {
    pub src: RobotId,
    pub dst: RobotId,
    pub category: String,
    pub bytes_sent: u64,
    pub bytes_delivered: u64,
    pub bytes_dropped: u64,
    pub messages_dropped: u64,
}

pub fn comm_summary(report: &CommReport, correct_loops: usize) -> CommSummary {
    let mut pairs = Vec::new();
    for ((src, dst), cats) in &report.totals {
        for (cat, t) in cats {
            pairs.push(PairSummary {
                src: *src,
                dst: *dst,
                category: match cat {
                    Category::FrontEnd => "front_end".into(),
                    Category::BackEnd => "back_end".into(),
                    Category::Control => "control".into(),
                },
                bytes_sent: t.bytes_sent,
                bytes_delivered: t.bytes_delivered,
                bytes_dropped: t.bytes_dropped,
                messages_dropped: t.messages_dropped,
            });
        }
    }
    CommSummary {
        front_end_bytes: report.front_end_bytes_sent,
        back_end_bytes: report.back_end_bytes_sent,
        control_bytes: report.control_bytes_sent,
        kbytes_per_correct_loop: SweepRow::kbytes_per_correct(
            report.front_end_bytes_sent,
            correct_loops,
        ),
        pairs,
        series: report.series.clone(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::Rng;

    fn traj(poses: &[(f64, f64, f64)]) -> Vec<(f64, Pose2)> {
        poses
            .iter()
            .enumerate()
            .map(|(i, (x, y, t))| (i as f64, Pose2::new(*x, *y, *t)))
            .collect()
    }

    #[test]
    fn umeyama_identity_and_known_transform() {
        let truth = traj(&[(0.0, 0.0, 0.0), (1.0, 0.0, 0.0), (2.0, 1.0, 0.0), (0.5, 3.0, 0.0)]);
        let t = umeyama_align(&truth, &truth).unwrap();
        assert!(t.translation_norm() < 1e-12 && t.theta.abs() < 1e-12);

        // Estimate = truth moved by the inverse of a known transform.
        let g = Pose2::new(5.0, -3.0, 40f64.to_radians());
        let moved: Vec<(f64, Pose2)> = truth
            .iter()
            .map(|(s, p)| {
                let q = g.inverse().transform_point([p.x, p.y]);
                (*s, Pose2::new(q[0], q[1], p.theta))
            })
            .collect();
        let t = umeyama_align(&moved, &truth).unwrap();
        assert_abs_diff_eq!(t.x, g.x, epsilon = 1e-9);
        assert_abs_diff_eq!(t.y, g.y, epsilon = 1e-9);
        assert_abs_diff_eq!(t.theta, g.theta, epsilon = 1e-9);
    }

    #[test]
    fn umeyama_needs_two_pairs() {
        let a = traj(&[(0.0, 0.0, 0.0)]);
        assert!(umeyama_align(&a, &a).is_err());
    }

    /// Brute-force oracle: best rotation on a 1e-4 rad grid with the optimal
    /// translation for each angle.
    fn grid_search_objective(pairs: &[([f64; 2], [f64; 2])]) -> f64 {
        let objective = |theta: f64| -> f64 {
            let (s, c) = theta.sin_cos();
            let n = pairs.len() as f64;
            let mut tx = 0.0;
            let mut ty = 0.0;
            for (a, b) in pairs {
                tx += b[0] - (c * a[0] - s * a[1]);
                ty += b[1] - (s * a[0] + c * a[1]);
            }
            tx /= n;
            ty /= n;
            pairs
                .iter()
                .map(|(a, b)| {
                    let m = [c * a[0] - s * a[1] + tx, s * a[0] + c * a[1] + ty];
                    (m[0] - b[0]).powi(2) + (m[1] - b[1]).powi(2)
                })
                .sum()
        };
        let mut best = f64::INFINITY;
        let steps = (2.0 * std::f64::consts::PI / 1e-4) as usize;
        for k in 0..steps {
            let theta = -std::f64::consts::PI + k as f64 * 1e-4;
            best = best.min(objective(theta));
        }
        best
    }

    #[test]
    fn alignment_beats_rotation_grid_oracle() {
        // Includes a noisy, nearly collinear case.
        let mut rng = crate::rng::derive_rng(2, "umeyama", &[]);
        for trial in 0..5 {
            let n = 12;
            let mut pairs = Vec::new();
            for i in 0..n {
                let a = if trial % 2 == 0 {
                    [i as f64, 0.01 * rng.gen_range(-1.0..1.0)]
                } else {
                    [rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0)]
                };
                let g = Pose2::new(1.0, 2.0, 0.7);
                let b0 = g.transform_point(a);
                pairs.push((a, [b0[0] + rng.gen_range(-0.1..0.1), b0[1] + rng.gen_range(-0.1..0.1)]));
            }
            let t = fit_rigid(&pairs).unwrap();
            let fit_obj: f64 = pairs
                .iter()
                .map(|(a, b)| {
                    let m = t.transform_point(*a);
                    (m[0] - b[0]).powi(2) + (m[1] - b[1]).powi(2)
                })
                .sum();
            let oracle = grid_search_objective(&pairs);
            assert!(
                fit_obj <= oracle + 1e-6,
                "trial {trial}: closed form {fit_obj} worse than grid {oracle}"
            );
        }
    }

    #[test]
    fn ate_basic_cases() {
        let truth: BTreeMap<RobotId, Vec<(f64, Pose2)>> =
            [(1u32, traj(&[(0.0, 0.0, 0.0), (1.0, 0.0, 0.0), (2.0, 0.5, 0.0)]))]
                .into_iter()
                .collect();
        // estimate == truth: zero error.
        let r = ate(&truth, &truth, true).unwrap();
        assert_abs_diff_eq!(r.mean, 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(r.std, 0.0, epsilon = 1e-12);
        // Constant offset (3,4), unaligned: mean 5, std 0.
        let offset: BTreeMap<RobotId, Vec<(f64, Pose2)>> = truth
            .iter()
            .map(|(r, v)| {
                (
                    *r,
                    v.iter()
                        .map(|(s, p)| (*s, Pose2::new(p.x + 3.0, p.y + 4.0, p.theta)))
                        .collect(),
                )
            })
            .collect();
        let r = ate(&offset, &truth, false).unwrap();
        assert_abs_diff_eq!(r.mean, 5.0, epsilon = 1e-12);
        assert_abs_diff_eq!(r.std, 0.0, epsilon = 1e-12);
        // Aligned: offset removed.
        let r = ate(&offset, &truth, true).unwrap();
        assert_abs_diff_eq!(r.mean, 0.0, epsilon = 1e-9);
    }

    #[test]
    fn classify_loop_cases() {
        let gt = Pose2::new(1.0, 0.0, 0.2);
        assert_eq!(classify_loop(true, &gt, &gt, 3.74), LoopClass::Correct);
        assert_eq!(classify_loop(false, &gt, &gt, 3.74), LoopClass::Failed);
        let wrong = Pose2::new(18.0, 0.0, 0.2);
        assert_eq!(classify_loop(true, &wrong, &gt, 3.74), LoopClass::Incorrect);
    }

    #[test]
    fn spearman_monotone_sequences() {
        let xs = [0.1, 0.2, 0.3, 0.4, 0.5];
        let down = [50.0, 40.0, 22.0, 9.0, 1.0];
        assert_abs_diff_eq!(spearman(&xs, &down), -1.0, epsilon = 1e-12);
        let up = [1.0, 2.0, 30.0, 31.0, 90.0];
        assert_abs_diff_eq!(spearman(&xs, &up), 1.0, epsilon = 1e-12);
        let tied = [5.0, 5.0, 5.0, 5.0, 5.0];
        assert_abs_diff_eq!(spearman(&xs, &tied), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn association_respects_max_gap() {
        let est = vec![(0.0, Pose2::identity()), (10.0, Pose2::identity())];
        let truth = vec![
            (0.3, Pose2::new(1.0, 0.0, 0.0)),
            (2.0, Pose2::new(2.0, 0.0, 0.0)),
        ];
        let pairs = associate(&est, &truth);
        assert_eq!(pairs.len(), 1);
        assert_abs_diff_eq!(pairs[0].1.x, 1.0);
    }
}

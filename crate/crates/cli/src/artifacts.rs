//! Run-directory layout: everything a run produces, written as diffable
//! text (JSON, CSV, g2o, SVG). Two runs with equal config hash and seed
//! produce byte-identical directories.

use anyhow::{Context, Result};
use cslam_core::backend::write_g2o;
use cslam_core::comms::Trace;
use cslam_core::eval::SweepRow;
use cslam_core::geometry::Pose2;
use cslam_core::runner::{LoopRecord, RunArtifacts, RunSummary};
use cslam_core::world::RobotId;
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

pub fn write_run_dir(
    dir: &Path,
    config_json: &str,
    artifacts: &RunArtifacts,
    summary: &RunSummary,
) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("config.json"), config_json)?;
    fs::write(
        dir.join("world.json"),
        serde_json::to_string_pretty(&artifacts.world)?,
    )?;
    fs::write(
        dir.join("summary.json"),
        serde_json::to_string_pretty(summary)?,
    )?;
    fs::write(dir.join("trajectories.csv"), trajectories_csv(artifacts))?;
    fs::write(dir.join("reference.csv"), reference_csv(artifacts))?;
    fs::write(dir.join("loops.csv"), loops_csv(&artifacts.loops))?;
    fs::write(dir.join("comm_series.csv"), comm_series_csv(summary))?;
    let mut g2o = Vec::new();
    write_g2o(&artifacts.final_graph, &mut g2o)?;
    fs::write(dir.join("graph.g2o"), g2o)?;
    Trace::write_csv(&artifacts.links_trace, &dir.join("links_trace.csv"))?;
    Ok(())
}

fn trajectories_csv(artifacts: &RunArtifacts) -> String {
    let mut out = String::from(
        "robot,kf,stamp,gt_x,gt_y,gt_theta,odom_x,odom_y,odom_theta,est_x,est_y,est_theta\n",
    );
    for (robot, gt) in &artifacts.gt_keyframes {
        let odom = &artifacts.odom_keyframes[robot];
        let est = &artifacts.est_keyframes[robot];
        for (kf, ((stamp, g), ((_, o), (_, e)))) in
            gt.iter().zip(odom.iter().zip(est.iter())).enumerate()
        {
            let _ = writeln!(
                out,
                "{robot},{kf},{stamp},{},{},{},{},{},{},{},{},{}",
                g.x, g.y, g.theta, o.x, o.y, o.theta, e.x, e.y, e.theta
            );
        }
    }
    out
}

fn reference_csv(artifacts: &RunArtifacts) -> String {
    let mut out = String::from("robot,stamp,x,y,theta\n");
    for (robot, samples) in &artifacts.gt_reference {
        for (stamp, p) in samples {
            let _ = writeln!(out, "{robot},{stamp},{},{},{}", p.x, p.y, p.theta);
        }
    }
    out
}

fn loops_csv(loops: &[LoopRecord]) -> String {
    let mut out = String::from(
        "a_robot,a_kf,b_robot,b_kf,similarity,inliers,success,meas_dx,meas_dy,meas_dtheta,gt_dx,gt_dy,gt_dtheta\n",
    );
    for l in loops {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{},{}",
            l.a.0,
            l.a.1,
            l.b.0,
            l.b.1,
            l.similarity,
            l.inliers,
            u8::from(l.success),
            l.measurement.x,
            l.measurement.y,
            l.measurement.theta,
            l.gt_relative.x,
            l.gt_relative.y,
            l.gt_relative.theta
        );
    }
    out
}

fn comm_series_csv(summary: &RunSummary) -> String {
    let mut out = String::from("t_sec,capacity_bytes,demand_bytes\n");
    for (t, cap, demand) in &summary.comm.series {
        let _ = writeln!(out, "{t},{cap},{demand}");
    }
    out
}

pub fn sweep_csv(rows: &[SweepRow]) -> Result<String> {
    let mut buf = Vec::new();
    cslam_core::eval::write_sweep_csv(rows, &mut buf)?;
    Ok(String::from_utf8(buf)?)
}

/// Trajectories read back from a run directory for re-evaluation.
pub struct StoredRun {
    pub gt: BTreeMap<RobotId, Vec<(f64, Pose2)>>,
    pub reference: BTreeMap<RobotId, Vec<(f64, Pose2)>>,
    pub odom: BTreeMap<RobotId, Vec<(f64, Pose2)>>,
    pub est: BTreeMap<RobotId, Vec<(f64, Pose2)>>,
    pub loops: Vec<LoopRecord>,
}

pub fn read_run_dir(dir: &Path) -> Result<StoredRun> {
    let path = dir.join("trajectories.csv");
    let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    let mut gt: BTreeMap<RobotId, Vec<(f64, Pose2)>> = BTreeMap::new();
    let mut odom: BTreeMap<RobotId, Vec<(f64, Pose2)>> = BTreeMap::new();
    let mut est: BTreeMap<RobotId, Vec<(f64, Pose2)>> = BTreeMap::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 12 {
            anyhow::bail!("trajectories.csv line {}: expected 12 fields", i + 1);
        }
        let robot: RobotId = f[0].parse()?;
        let stamp: f64 = f[2].parse()?;
        let parse3 = |a: &str, b: &str, c: &str| -> Result<Pose2> {
            Ok(Pose2::new(a.parse()?, b.parse()?, c.parse()?))
        };
        gt.entry(robot).or_default().push((stamp, parse3(f[3], f[4], f[5])?));
        odom.entry(robot).or_default().push((stamp, parse3(f[6], f[7], f[8])?));
        est.entry(robot).or_default().push((stamp, parse3(f[9], f[10], f[11])?));
    }

    let path = dir.join("reference.csv");
    let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    let mut reference: BTreeMap<RobotId, Vec<(f64, Pose2)>> = BTreeMap::new();
    for line in text.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 5 {
            anyhow::bail!("reference.csv: expected 5 fields");
        }
        let robot: RobotId = f[0].parse()?;
        reference.entry(robot).or_default().push((
            f[1].parse()?,
            Pose2::new(f[2].parse()?, f[3].parse()?, f[4].parse()?),
        ));
    }

    let path = dir.join("loops.csv");
    let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    let mut loops = Vec::new();
    for line in text.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 13 {
            anyhow::bail!("loops.csv: expected 13 fields");
        }
        loops.push(LoopRecord {
            a: (f[0].parse()?, f[1].parse()?),
            b: (f[2].parse()?, f[3].parse()?),
            similarity: f[4].parse()?,
            inliers: f[5].parse()?,
            success: f[6] == "1",
            measurement: Pose2::new(f[7].parse()?, f[8].parse()?, f[9].parse()?),
            gt_relative: Pose2::new(f[10].parse()?, f[11].parse()?, f[12].parse()?),
        });
    }
    Ok(StoredRun {
        gt,
        reference,
        odom,
        est,
        loops,
    })
}

//! Command line entry point: scenario runs, trace replay, calibration
//! sweeps, evaluation, and plot emission. Exit codes: 0 success, 1 config
//! error, 2 runtime error.

mod artifacts;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use cslam_core::config::{ConfigError, ScenarioConfig};
use cslam_core::eval;
use cslam_core::plot::{color, line_chart, Series};
use cslam_core::runner::{self, SweepGrid};
use cslam_core::world::generate_world;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "cslam", about = "Deterministic multi-robot collaborative SLAM simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a world fixture from a scenario config.
    GenWorld {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value = "runs")]
        out: PathBuf,
    },
    /// Run one scenario end to end.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value = "runs")]
        out: PathBuf,
        /// Fix the loop classification threshold instead of the run's own ATE.
        #[arg(long)]
        tau_err: Option<f64>,
    },
    /// Run a scenario with links replayed from a recorded trace.
    Replay {
        #[arg(long)]
        trace: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value = "runs")]
        out: PathBuf,
    },
    /// Run one simulation per grid point and tabulate the results.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        grid: PathBuf,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value = "runs")]
        out: PathBuf,
    },
    /// Recompute metrics from a stored run directory.
    Eval {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        tau_err: Option<f64>,
    },
    /// Render SVG charts for a run directory or a sweep CSV.
    Plot {
        #[arg(long)]
        run: Option<PathBuf>,
        #[arg(long)]
        sweep: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenWorld { config, seed, out } => gen_world(&config, seed, &out),
        Command::Run {
            config,
            seed,
            out,
            tau_err,
        } => run(&config, seed, &out, None, tau_err),
        Command::Replay {
            trace,
            config,
            seed,
            out,
        } => run(&config, seed, &out, Some(trace), None),
        Command::Sweep {
            config,
            grid,
            seed,
            out,
        } => sweep(&config, &grid, seed, &out),
        Command::Eval { run, tau_err } => eval_run(&run, tau_err),
        Command::Plot { run, sweep, out } => plot(run.as_deref(), sweep.as_deref(), out.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<ConfigError>().is_some() {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}

fn load_config(path: &Path) -> Result<ScenarioConfig> {
    ScenarioConfig::load(path).map_err(anyhow::Error::from)
}

fn run_dir(out: &Path, cfg: &ScenarioConfig, seed: u64) -> PathBuf {
    out.join(format!("{}-s{}", cfg.result_hash(seed), seed))
}

fn gen_world(config: &Path, seed: u64, out: &Path) -> Result<()> {
    let cfg = load_config(config)?;
    let world = generate_world(&cfg.world, seed).with_context(|| "world generation failed")?;
    let dir = run_dir(out, &cfg, seed);
    std::fs::create_dir_all(&dir)?;
    let path = dir.join("world.json");
    std::fs::write(&path, serde_json::to_string_pretty(&world)?)?;
    println!(
        "world: {} landmarks, {} motif stamps -> {}",
        world.landmarks.len(),
        world.motif_stamps.len(),
        path.display()
    );
    Ok(())
}

fn run(
    config: &Path,
    seed: u64,
    out: &Path,
    trace: Option<PathBuf>,
    tau_err: Option<f64>,
) -> Result<()> {
    let mut cfg = load_config(config)?;
    if let Some(trace) = trace {
        if !trace.exists() {
            return Err(ConfigError::Invalid(format!(
                "trace_file: {} does not exist",
                trace.display()
            ))
            .into());
        }
        cfg.trace_file = Some(trace);
    }
    let dir = run_dir(out, &cfg, seed);
    let artifacts = runner::run(&cfg, seed)?;
    let summary = runner::evaluate(&artifacts, tau_err)?;
    let config_json = serde_json::to_string_pretty(&cfg)?;
    artifacts::write_run_dir(&dir, &config_json, &artifacts, &summary)?;
    println!(
        "run {}: team ATE {:.3} +- {:.3} m, odometry ATE {:.3} m, loops {}/{}/{} (correct/incorrect/failed)",
        dir.display(),
        summary.team_ate.mean,
        summary.team_ate.std,
        summary.odometry_ate.mean,
        summary.correct,
        summary.incorrect,
        summary.failed
    );
    println!(
        "front-end {} B, back-end {} B, {:.2} kB per correct loop",
        summary.comm.front_end_bytes,
        summary.comm.back_end_bytes,
        summary.comm.kbytes_per_correct_loop
    );
    Ok(())
}

fn sweep(config: &Path, grid: &Path, seed: u64, out: &Path) -> Result<()> {
    let cfg = load_config(config)?;
    let grid_text = std::fs::read_to_string(grid).map_err(|e| {
        anyhow::Error::from(ConfigError::Read {
            path: grid.display().to_string(),
            source: e,
        })
    })?;
    let grid: SweepGrid = serde_json::from_str(&grid_text)
        .map_err(|e| anyhow::Error::from(ConfigError::Parse(format!("grid: {e}"))))?;
    let rows = runner::sweep(&cfg, &grid, seed)?;
    let dir = run_dir(out, &cfg, seed);
    std::fs::create_dir_all(&dir)?;
    let csv = artifacts::sweep_csv(&rows)?;
    let path = dir.join("sweep.csv");
    std::fs::write(&path, csv)?;
    println!("{} rows -> {}", rows.len(), path.display());
    Ok(())
}

fn eval_run(dir: &Path, tau_err: Option<f64>) -> Result<()> {
    let stored = artifacts::read_run_dir(dir)?;
    let team_ate = eval::ate(&stored.est, &stored.reference, true)?;
    let team_ate_exact = eval::ate(&stored.est, &stored.gt, true)?;
    let odometry_ate = eval::ate_per_robot_aligned(&stored.odom, &stored.reference)?;
    let tau = tau_err.unwrap_or(team_ate.mean);
    let mut counts = [0usize; 3];
    for l in &stored.loops {
        match eval::classify_loop(l.success, &l.measurement, &l.gt_relative, tau) {
            eval::LoopClass::Correct => counts[0] += 1,
            eval::LoopClass::Incorrect => counts[1] += 1,
            eval::LoopClass::Failed => counts[2] += 1,
        }
    }
    let report = serde_json::json!({
        "team_ate": team_ate,
        "team_ate_exact": team_ate_exact,
        "odometry_ate": odometry_ate,
        "tau_err": tau,
        "correct": counts[0],
        "incorrect": counts[1],
        "failed": counts[2],
    });
    let path = dir.join("eval.json");
    std::fs::write(&path, serde_json::to_string_pretty(&report)?)?;
    println!(
        "eval {}: team ATE {:.3} m, loops {}/{}/{} -> {}",
        dir.display(),
        team_ate.mean,
        counts[0],
        counts[1],
        counts[2],
        path.display()
    );
    Ok(())
}

fn plot(run: Option<&Path>, sweep: Option<&Path>, out: Option<&Path>) -> Result<()> {
    if run.is_none() && sweep.is_none() {
        return Err(ConfigError::Invalid("plot: pass --run DIR and/or --sweep FILE".into()).into());
    }
    if let Some(dir) = run {
        let text = std::fs::read_to_string(dir.join("comm_series.csv"))
            .with_context(|| format!("reading {}/comm_series.csv", dir.display()))?;
        let mut capacity = Vec::new();
        let mut demand = Vec::new();
        for line in text.lines().skip(1) {
            let f: Vec<&str> = line.split(',').collect();
            let t: f64 = f[0].parse()?;
            capacity.push((t, f[1].parse::<f64>()? / 1e6));
            demand.push((t, f[2].parse::<f64>()? / 1e6));
        }
        let svg = line_chart(
            "Cumulative link capacity vs demand",
            "time [s]",
            "megabytes",
            &[
                Series {
                    label: "capacity".into(),
                    points: capacity,
                    color: color(3),
                },
                Series {
                    label: "demand".into(),
                    points: demand,
                    color: color(2),
                },
            ],
        );
        let target = out.unwrap_or(dir).join("comm.svg");
        std::fs::write(&target, svg)?;
        println!("wrote {}", target.display());
    }
    if let Some(file) = sweep {
        let text =
            std::fs::read_to_string(file).with_context(|| format!("reading {}", file.display()))?;
        let mut rows = Vec::new();
        for line in text.lines().skip(1) {
            let f: Vec<&str> = line.split(',').collect();
            let t: f64 = f[0].parse()?;
            rows.push((
                t,
                f[3].parse::<f64>()?,
                f[4].parse::<f64>()?,
                f[5].parse::<f64>()?,
                f[9].parse::<f64>()?,
            ));
        }
        let counts = line_chart(
            "Loop closures vs similarity threshold",
            "similarity threshold",
            "loop closures",
            &[
                Series {
                    label: "correct".into(),
                    points: rows.iter().map(|r| (r.0, r.1)).collect(),
                    color: color(0),
                },
                Series {
                    label: "incorrect".into(),
                    points: rows.iter().map(|r| (r.0, r.2)).collect(),
                    color: color(1),
                },
                Series {
                    label: "failed".into(),
                    points: rows.iter().map(|r| (r.0, r.3)).collect(),
                    color: color(2),
                },
            ],
        );
        let cost = line_chart(
            "Communication cost per correct loop",
            "similarity threshold",
            "kB per correct loop",
            &[Series {
                label: "front-end kB/correct".into(),
                points: rows.iter().map(|r| (r.0, r.4)).collect(),
                color: color(3),
            }],
        );
        let base = out
            .map(Path::to_path_buf)
            .unwrap_or_else(|| file.parent().unwrap_or(Path::new(".")).to_path_buf());
        std::fs::create_dir_all(&base)?;
        std::fs::write(base.join("sweep_counts.svg"), counts)?;
        std::fs::write(base.join("sweep_cost.svg"), cost)?;
        println!("wrote {}", base.join("sweep_counts.svg").display());
        println!("wrote {}", base.join("sweep_cost.svg").display());
    }
    Ok(())
}

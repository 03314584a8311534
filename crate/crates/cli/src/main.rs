use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use fovplan::assignment::Variant;
use fovplan::dataset::{n_e_histogram, read_jsonl, split, write_jsonl};
use fovplan::experiments::{
    corridor_mission, corridor_world, eval_mse, eval_static_grid, gen_static_demos, generalization_mission,
    generalization_world, mean, policy_sweep, selftest, summarize, trefoil_episode, write_csv, ExperimentConfig,
};
use fovplan::sim::{dagger_collect, run_mission, DaggerConfig, ObstacleKind, Planner};
use fovplan::student::{train, Policy, TrainConfig};
use serde::Serialize;

#[derive(Parser)]
#[command(name = "fovplan", about = "Multimodal imitation planner: experiments and utilities")]
struct Cli {
    /// JSON experiment configuration; defaults are used for missing fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Number of student heads (and expert modes kept).
    #[arg(long, global = true)]
    ns: Option<usize>,
    /// Expert multi-start count.
    #[arg(long, global = true)]
    nruns: Option<usize>,
    /// Full dataset sizes instead of the desk-scale defaults.
    #[arg(long, global = true)]
    paper_scale: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Scenario {
    Static,
    Trefoil,
}

#[derive(Clone, Copy, ValueEnum)]
enum World {
    Static,
    Trefoil,
    Square,
    Eight,
    Epitrochoid,
    Corridor,
}

#[derive(Subcommand)]
enum Command {
    /// Expert demonstrations as JSON lines.
    GenDemos {
        #[arg(long)]
        count: Option<usize>,
        #[arg(long, value_enum, default_value = "static")]
        scenario: Scenario,
    },
    /// Train one policy, or the eleven-policy ε sweep with --sweep.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        variant: Option<Variant>,
        #[arg(long)]
        epsilon: Option<f64>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        sweep: bool,
    },
    /// Per-rank MSE on the held-out split; ratios are relative to the first
    /// checkpoint.
    EvalMse {
        #[arg(long)]
        data: PathBuf,
        #[arg(long = "checkpoint", required = true)]
        checkpoints: Vec<PathBuf>,
    },
    /// One plan per goal of the static goal grid.
    EvalStaticGrid {
        #[arg(long, conflicts_with = "expert")]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        expert: bool,
    },
    /// Closed-loop missions.
    Sim {
        #[arg(long, conflicts_with = "expert")]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        expert: bool,
        #[arg(long, value_enum, default_value = "trefoil")]
        world: World,
        /// Obstacle count for the corridor world.
        #[arg(long, default_value_t = 1)]
        obstacles: usize,
        #[arg(long, default_value_t = 45.0)]
        duration: f64,
        /// Corridor sweep over 1..=5 obstacles with ten seeds each.
        #[arg(long)]
        sweep: bool,
    },
    /// Runs the built-in oracles; nonzero exit on any failure.
    Selftest,
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p).with_context(|| format!("reading {}", p.display()))?,
        None => ExperimentConfig::default(),
    };
    if cli.paper_scale {
        cfg = cfg.paper_scale();
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(n) = cli.ns {
        cfg.mission.expert.n_s = n;
        cfg.train.n_s = n;
        cfg.dagger.train.n_s = n;
    }
    if let Some(n) = cli.nruns {
        cfg.mission.expert.n_runs = n;
    }
    cfg.mission.validate()?;
    Ok(cfg)
}

fn out_path(cli: &Cli, default: &str) -> PathBuf {
    cli.out.clone().unwrap_or_else(|| PathBuf::from(default))
}

fn with_suffix(p: &Path, suffix: &str) -> PathBuf {
    let mut s = p.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

#[derive(Serialize)]
struct LossRow {
    epoch: usize,
    loss: f64,
}

#[derive(Serialize)]
struct MseRow {
    checkpoint: String,
    kappa: usize,
    count: usize,
    mean_mse: f64,
    ratio_to_reference: f64,
}

#[derive(Serialize)]
struct SweepRow {
    obstacles: usize,
    seed: u64,
    safety_ratio: f64,
    separation_ratio: f64,
    goals_reached: usize,
    fallbacks: usize,
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let cfg = load_config(&cli)?;
    let hash = cfg.hash();
    println!("config_hash: {hash}");
    match &cli.command {
        Command::GenDemos { count, scenario } => {
            let out = out_path(&cli, "demos.jsonl");
            let demos = match scenario {
                Scenario::Static => gen_static_demos(&cfg, count.unwrap_or(cfg.n_demos), cfg.seed)?,
                Scenario::Trefoil => {
                    let target = count.unwrap_or(cfg.dagger_pairs);
                    let res = dagger_collect(None, &cfg.mission, &trefoil_episode, &dagger_for(&cfg, target), cfg.seed)?;
                    res.policy.save(&with_suffix(&out, ".policy.json"))?;
                    println!("aggregate sizes per iteration: {:?}", res.sizes);
                    res.demos
                }
            };
            write_jsonl(&out, &demos)?;
            println!("wrote {} demonstrations to {}", demos.len(), out.display());
            for (k, c) in n_e_histogram(&demos, cfg.mission.expert.n_s).iter().enumerate() {
                println!("n_e={k}: {c}");
            }
        }
        Command::Train { data, variant, epsilon, epochs, sweep } => {
            let demos = read_jsonl(data)?;
            let (train_set, _) = split(&demos, cfg.train_fraction, cfg.seed);
            let mut tc = TrainConfig { seed: cfg.seed, ..cfg.train.clone() };
            if let Some(e) = epochs {
                tc.epochs = *e;
            }
            let runs: Vec<(Variant, f64)> = if *sweep {
                policy_sweep()
            } else {
                vec![(variant.unwrap_or(tc.variant), epsilon.unwrap_or(tc.epsilon))]
            };
            let out = out_path(&cli, if *sweep { "policies" } else { "policy.json" });
            if *sweep {
                std::fs::create_dir_all(&out)?;
            }
            for (v, e) in runs {
                let tc = TrainConfig { variant: v, epsilon: e, ..tc.clone() };
                let res = train(&train_set, &tc, cfg.mission.expert.t_min, cfg.mission.expert.t_pred)?;
                let ckpt = if *sweep { out.join(format!("{}_eps{e:.2}.json", v.name())) } else { out.clone() };
                res.policy.save(&ckpt)?;
                let rows: Vec<LossRow> =
                    res.loss_curve.iter().enumerate().map(|(epoch, &loss)| LossRow { epoch, loss }).collect();
                write_csv(&with_suffix(&ckpt, ".loss.csv"), &hash, &rows)?;
                println!("{} eps={e}: final loss {:.6} -> {}", v, res.loss_curve.last().unwrap_or(&f64::NAN), ckpt.display());
            }
        }
        Command::EvalMse { data, checkpoints } => {
            let demos = read_jsonl(data)?;
            let (_, eval_set) = split(&demos, cfg.train_fraction, cfg.seed);
            if eval_set.is_empty() {
                bail!("evaluation split is empty");
            }
            let mut reference: Vec<f64> = Vec::new();
            let mut rows = Vec::new();
            for (c, path) in checkpoints.iter().enumerate() {
                let policy = Policy::load(path)?;
                let buckets = eval_mse(&policy, &eval_set)?;
                let means: Vec<f64> = buckets.iter().map(|b| mean(b)).collect();
                if c == 0 {
                    reference = means.clone();
                }
                for (k, b) in buckets.iter().enumerate() {
                    rows.push(MseRow {
                        checkpoint: path.display().to_string(),
                        kappa: k,
                        count: b.len(),
                        mean_mse: means[k],
                        ratio_to_reference: means[k] / reference.get(k).copied().unwrap_or(f64::NAN),
                    });
                }
            }
            let out = out_path(&cli, "mse.csv");
            write_csv(&out, &hash, &rows)?;
            for r in &rows {
                println!("{} kappa={} n={} mse={:.5} ratio={:.3}", r.checkpoint, r.kappa, r.count, r.mean_mse, r.ratio_to_reference);
            }
        }
        Command::EvalStaticGrid { checkpoint, expert } => {
            let policy = checkpoint.as_ref().map(|p| Policy::load(p)).transpose()?;
            let planner = match (&policy, expert) {
                (Some(p), false) => Planner::Student(p),
                (None, true) => Planner::Expert(cfg.mission.expert.clone()),
                _ => bail!("pass exactly one of --checkpoint or --expert"),
            };
            let rows = eval_static_grid(&planner, &cfg)?;
            let out = out_path(&cli, "grid.csv");
            write_csv(&out, &hash, &rows)?;
            let clear = rows.iter().filter(|r| r.n_collision_free > 0).count();
            println!("goals with a collision-free trajectory: {clear}/{}", rows.len());
            for iz in (0..cfg.scene.grid).rev() {
                let line: String = (0..cfg.scene.grid)
                    .map(|iy| {
                        let r = &rows[iy * cfg.scene.grid + iz];
                        format!("{}", r.n_collision_free)
                    })
                    .collect::<Vec<_>>()
                    .join(" ");
                println!("{line}");
            }
        }
        Command::Sim { checkpoint, expert, world, obstacles, duration, sweep } => {
            let policy = checkpoint.as_ref().map(|p| Policy::load(p)).transpose()?;
            let planner = match (&policy, expert) {
                (Some(p), false) => Planner::Student(p),
                (None, true) => Planner::Expert(cfg.mission.expert.clone()),
                _ => bail!("pass exactly one of --checkpoint or --expert"),
            };
            let out = out_path(&cli, "mission");
            if *sweep {
                let mut rows = Vec::new();
                for n in 1..=5 {
                    for seed in 0..10 {
                        let s = cfg.seed.wrapping_mul(1000).wrapping_add(seed);
                        let log = run_mission(&planner, &corridor_world(n, s), &corridor_mission(&cfg.mission), *duration, None)?;
                        rows.push(SweepRow {
                            obstacles: n,
                            seed: s,
                            safety_ratio: log.safety_ratio,
                            separation_ratio: log.separation_ratio,
                            goals_reached: log.goals_reached,
                            fallbacks: log.records.iter().filter(|r| r.fallback).count(),
                        });
                    }
                    let sr: Vec<f64> = rows.iter().filter(|r| r.obstacles == n).map(|r| r.safety_ratio).collect();
                    let sep: Vec<f64> = rows.iter().filter(|r| r.obstacles == n).map(|r| r.separation_ratio).collect();
                    println!("obstacles={n}: mean safety ratio {:.3}, mean separation ratio {:.3}", mean(&sr), mean(&sep));
                }
                write_csv(&with_suffix(&out, ".sweep.csv"), &hash, &rows)?;
                return Ok(());
            }
            let (world_specs, mission, name) = match world {
                World::Corridor => (corridor_world(*obstacles, cfg.seed), corridor_mission(&cfg.mission), "corridor"),
                w => {
                    let kind = match w {
                        World::Static => ObstacleKind::Static,
                        World::Trefoil => ObstacleKind::Trefoil,
                        World::Square => ObstacleKind::Square,
                        World::Eight => ObstacleKind::Eight,
                        _ => ObstacleKind::Epitrochoid,
                    };
                    (vec![generalization_world(kind, cfg.seed)], generalization_mission(&cfg.mission), "single")
                }
            };
            let log = run_mission(&planner, &world_specs, &mission, *duration, None)?;
            let mut f = std::io::BufWriter::new(std::fs::File::create(with_suffix(&out, ".log.jsonl"))?);
            writeln!(f, "{}", serde_json::json!({ "config_hash": hash }))?;
            for r in &log.records {
                writeln!(f, "{}", serde_json::to_string(r)?)?;
            }
            f.flush()?;
            #[derive(Serialize)]
            struct PathRow {
                t: f64,
                x: f64,
                y: f64,
                z: f64,
                psi: f64,
            }
            let path: Vec<PathRow> =
                log.path.iter().map(|s| PathRow { t: s.t, x: s.p.x, y: s.p.y, z: s.p.z, psi: s.psi }).collect();
            write_csv(&with_suffix(&out, ".path.csv"), &hash, &path)?;
            let summary = summarize(name, &log);
            write_csv(&with_suffix(&out, ".summary.csv"), &hash, std::slice::from_ref(&summary))?;
            println!(
                "replans {} | coll.free = 0: {:.1}% | 1-3: {:.1}% | 4+: {:.1}% | goals reached {} | safety ratio {:.3} | separation ratio {:.3}",
                summary.replans,
                summary.pct_zero,
                summary.pct_one_to_three,
                summary.pct_four_plus,
                summary.goals_reached,
                summary.safety_ratio,
                summary.separation_ratio
            );
        }
        Command::Selftest => {
            let reports = selftest(cfg.seed)?;
            for r in &reports {
                println!("[{}] {}: {}", if r.passed { "PASS" } else { "FAIL" }, r.name, r.detail);
            }
            if reports.iter().any(|r| !r.passed) {
                bail!("selftest failed");
            }
        }
    }
    Ok(())
}

/// Splits the pair budget evenly over the configured iterations.
fn dagger_for(cfg: &ExperimentConfig, target_pairs: usize) -> DaggerConfig {
    let d = &cfg.dagger;
    let replans_per_episode = (d.episode_duration / cfg.mission.replan_period).ceil().max(1.0) as usize;
    let episodes = target_pairs.div_ceil(replans_per_episode * d.iterations.max(1)).max(1);
    DaggerConfig { episodes_per_iteration: episodes, ..d.clone() }
}

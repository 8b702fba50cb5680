//! Command-line surface: every subcommand reads one experiment config
//! file and writes one run directory under the output root
//! (`--out`, else the LOBSIM_OUT environment variable, else ./runs).
//!
//! Exit codes: 0 ok, 1 config error, 2 runtime error.

use anyhow::Context;
use clap::{Parser, Subcommand};
use lobsim::analysis;
use lobsim::features::{anchors, FeatureId, FeatureSpec};
use lobsim::generator::ReferenceParams;
use lobsim::harness::{
    run_ab_impact, run_feature_fix, run_replay, run_trajectory, ExperimentPlan, Mode, SimConfig,
};
use lobsim::io::{
    build_start_snapshot, load_experiment, messages_from, parse_messages, parse_snapshots,
    write_run_dir, ExperimentConfig,
};
use lobsim::train::{teacher_dataset, TrainConfig, Trainer};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "lobsim", about = "Order-book simulator and experiment harness")]
struct Cli {
    /// Overrides the config file seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output root; defaults to $LOBSIM_OUT or ./runs.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Replays a historical message file, optionally with agents.
    Replay {
        #[arg(long)]
        config: PathBuf,
    },
    /// Closed-loop generative rollout.
    Rollout {
        #[arg(long)]
        config: PathBuf,
    },
    /// Paired with/without impact experiment over the lattice.
    Impact {
        #[arg(long)]
        config: PathBuf,
    },
    /// Rollouts with one conditioning feature pinned.
    FixFeature {
        #[arg(long)]
        config: PathBuf,
        /// Feature name (e.g. imb1, spread).
        #[arg(long)]
        feature: Option<String>,
        /// Pin to the 5th or 95th empirical percentile.
        #[arg(long)]
        pct: Option<u32>,
    },
    /// Adversarial strategy experiment (imbalance | mechanism).
    Attack {
        strategy: String,
        #[arg(long)]
        config: PathBuf,
    },
    /// Trains the learned generator against the reference teacher.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Stylized-fact report over lattice rollouts.
    Stylized {
        #[arg(long)]
        config: PathBuf,
    },
    /// Empirical 5th/95th feature percentiles from rollouts.
    Percentiles {
        #[arg(long)]
        config: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let out_root = cli
        .out
        .clone()
        .or_else(|| std::env::var_os("LOBSIM_OUT").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("runs"));

    let loaded = match load(&cli) {
        Ok(l) => l,
        Err(e) => {
            eprintln!("config error: {e:#}");
            return ExitCode::from(1);
        }
    };
    match run(&cli.cmd, loaded, &out_root) {
        Ok(dir) => {
            println!("run directory: {}", dir.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("runtime error: {e:#}");
            ExitCode::from(2)
        }
    }
}

struct Loaded {
    exp: ExperimentConfig,
    sim: SimConfig,
}

fn load(cli: &Cli) -> anyhow::Result<Loaded> {
    let path = match &cli.cmd {
        Cmd::Replay { config }
        | Cmd::Rollout { config }
        | Cmd::Impact { config }
        | Cmd::FixFeature { config, .. }
        | Cmd::Attack { config, .. }
        | Cmd::Train { config }
        | Cmd::Stylized { config }
        | Cmd::Percentiles { config } => config,
    };
    let mut exp = load_experiment(path).with_context(|| format!("loading {}", path.display()))?;
    if let Some(seed) = cli.seed {
        exp.seed = seed;
    }
    let mut sim = exp.to_sim_config()?;
    sim.seed = exp.seed;
    if let Cmd::Attack { strategy, .. } = &cli.cmd {
        anyhow::ensure!(
            matches!(strategy.as_str(), "imbalance" | "mechanism"),
            "unknown attack strategy {strategy} (expected imbalance | mechanism)"
        );
    }
    Ok(Loaded { exp, sim })
}

fn run(cmd: &Cmd, loaded: Loaded, out_root: &PathBuf) -> anyhow::Result<PathBuf> {
    let Loaded { exp, sim } = loaded;
    let name = match cmd {
        Cmd::Replay { .. } => "replay",
        Cmd::Rollout { .. } => "rollout",
        Cmd::Impact { .. } => "impact",
        Cmd::FixFeature { .. } => "fix-feature",
        Cmd::Attack { strategy, .. } => strategy.as_str(),
        Cmd::Train { .. } => "train",
        Cmd::Stylized { .. } => "stylized",
        Cmd::Percentiles { .. } => "percentiles",
    };
    let dir = out_root.join(format!("{name}-{}", sim.seed));
    std::fs::create_dir_all(&dir)?;

    match cmd {
        Cmd::Rollout { .. } => {
            let traj = run_trajectory(&sim);
            write_run_dir(&dir, &traj)?;
        }
        Cmd::Replay { .. } => {
            let traj = replay_from_files(&exp, &sim)?;
            write_run_dir(&dir, &traj)?;
        }
        Cmd::Impact { .. } => {
            let agent = sim
                .agents
                .first()
                .cloned()
                .context("impact needs one agent in the config")?;
            let mut base = sim.clone();
            base.agents.clear();
            let lattice = exp.lattice.clone().unwrap_or_default();
            let plan = ExperimentPlan::lattice(
                base,
                lattice.days,
                lattice.per_day,
                lattice.day_length,
            );
            let pairs: Vec<_> = (0..plan.starts.len())
                .map(|i| run_ab_impact(&plan.point_config(i), &agent))
                .collect();
            let grid: Vec<f64> = (0..=((sim.duration / 10.0) as usize))
                .map(|k| k as f64 * 10.0)
                .collect();
            let path = analysis::impact_path(&pairs, &grid, agent.horizon())?;
            write_impact_csv(&dir, &path)?;
            write_run_dir(&dir.join("first-pair-with"), &pairs[0].0)?;
            write_run_dir(&dir.join("first-pair-without"), &pairs[0].1)?;
        }
        Cmd::FixFeature { feature, pct, .. } => {
            let (id, value) = fix_target(&exp, feature.as_deref(), *pct)?;
            let lattice = exp.lattice.clone().unwrap_or_default();
            let mut base = sim.clone();
            base.overrides = Default::default();
            let plan = ExperimentPlan::lattice(
                base,
                lattice.days,
                lattice.per_day,
                lattice.day_length,
            );
            let mut report = csv::Writer::from_path(dir.join("drift_report.csv"))?;
            report.write_record(["point", "seed", "baseline_drift", "fixed_drift"])?;
            for i in 0..plan.starts.len() {
                let cfg = plan.point_config(i);
                let baseline = run_trajectory(&cfg);
                let fixed = run_feature_fix(&cfg, id, value);
                report.write_record([
                    i.to_string(),
                    cfg.seed.to_string(),
                    drift(&baseline).to_string(),
                    drift(&fixed).to_string(),
                ])?;
            }
            report.flush()?;
        }
        Cmd::Attack { strategy, .. } => {
            let agent = match strategy.as_str() {
                "imbalance" => lobsim::agents::StrategyConfig::ImbAttack {
                    main_volume: 200,
                    off_fraction: 0.10,
                    depth: 1,
                    horizon: sim.duration * 0.8,
                },
                "mechanism" => lobsim::agents::StrategyConfig::MechAttack {
                    push_side: lobsim::book::Side::Sell,
                    main_volume: 300,
                    main_depth: 2,
                    horizon: sim.duration * 0.8,
                },
                _ => unreachable!("validated in load"),
            };
            let mut base = sim.clone();
            base.agents.clear();
            let (with, without) = run_ab_impact(&base, &agent);
            write_run_dir(&dir.join("with"), &with)?;
            write_run_dir(&dir.join("without"), &without)?;
            let grid: Vec<f64> = (0..=((sim.duration / 10.0) as usize))
                .map(|k| k as f64 * 10.0)
                .collect();
            let path = analysis::impact_path(
                &[(with, without)],
                &grid,
                agent.horizon(),
            )?;
            write_impact_csv(&dir, &path)?;
        }
        Cmd::Train { .. } => {
            let spec = FeatureSpec::for_version(sim.spec_version);
            let mut rng = ChaCha20Rng::seed_from_u64(sim.seed);
            let dataset = teacher_dataset(100_000, &spec, &ReferenceParams::default(), &mut rng);
            let cfg = TrainConfig {
                seed: sim.seed,
                ..TrainConfig::default()
            };
            let (shift, scale) = Trainer::normalization_from(&dataset, spec.dim());
            let mut trainer = Trainer::new(cfg, spec.dim(), shift, scale);
            let model_dir = dir.clone();
            trainer.train(
                &dataset,
                Some(&mut |epoch, t: &Trainer| {
                    let _ = t
                        .final_generator()
                        .save(&model_dir.join(format!("checkpoint-{epoch}.json")));
                }),
            )?;
            anyhow::ensure!(!trainer.diverged, "training diverged");
            trainer.final_generator().save(&dir.join("model.json"))?;
            trainer.write_log_csv(std::fs::File::create(dir.join("training_log.csv"))?)?;
        }
        Cmd::Stylized { .. } => {
            let lattice = exp.lattice.clone().unwrap_or_default();
            let plan = ExperimentPlan::lattice(
                sim.clone(),
                lattice.days,
                lattice.per_day,
                lattice.day_length,
            );
            let trajectories = plan.run();
            let report = analysis::stylized_report(&trajectories)?;
            let mut f = std::fs::File::create(dir.join("stylized.json"))?;
            f.write_all(serde_json::to_string_pretty(&report)?.as_bytes())?;
        }
        Cmd::Percentiles { .. } => {
            let spec = FeatureSpec::for_version(sim.spec_version);
            let lattice = exp.lattice.clone().unwrap_or_default();
            let plan = ExperimentPlan::lattice(
                sim.clone(),
                lattice.days,
                lattice.per_day,
                lattice.day_length,
            );
            let mut samples = Vec::new();
            for traj in plan.run() {
                samples.extend(traj.frames.into_iter().map(|(_, frame)| frame));
            }
            let table = lobsim::features::estimate_percentiles(&samples, &spec)?;
            table.write_csv(std::fs::File::create(dir.join("percentiles.csv"))?)?;
        }
    }
    Ok(dir)
}

fn replay_from_files(exp: &ExperimentConfig, sim: &SimConfig) -> anyhow::Result<lobsim::harness::Trajectory> {
    anyhow::ensure!(sim.mode == Mode::Replay, "replay subcommand needs mode = \"replay\"");
    let msg_path = exp
        .messages
        .as_ref()
        .context("replay mode requires a messages file")?;
    let (messages, stats) = parse_messages(msg_path, exp.tick_e4, true)?;
    if stats.skipped_malformed > 0 || stats.skipped_unknown_kind > 0 {
        eprintln!(
            "skipped {} malformed and {} unknown-code rows",
            stats.skipped_malformed, stats.skipped_unknown_kind
        );
    }
    let (start, sliced) = match &exp.snapshots {
        Some(snap_path) => {
            let snapshots = parse_snapshots(snap_path, exp.tick_e4)?;
            let t0 = messages.first().map(|m| m.time).unwrap_or(0.0);
            let start = build_start_snapshot(&messages, &snapshots, t0)?;
            (start, messages_from(&messages, t0, sim.duration))
        }
        None => (sim.start.clone(), messages),
    };
    Ok(run_replay(&sliced, &sim.agents, start, sim.duration, sim.seed))
}

/// Terminal minus initial mid, in ticks.
fn drift(traj: &lobsim::harness::Trajectory) -> f64 {
    match (traj.mids.first(), traj.mids.last()) {
        (Some(&(_, a)), Some(&(_, b))) => (b - a) as f64 / 2.0,
        _ => 0.0,
    }
}

fn fix_target(
    exp: &ExperimentConfig,
    feature: Option<&str>,
    pct: Option<u32>,
) -> anyhow::Result<(FeatureId, f64)> {
    let name = feature
        .map(str::to_string)
        .or_else(|| exp.fix_feature.clone())
        .context("fix-feature needs --feature or fix_feature in the config")?;
    let id = FeatureId::parse(&name).with_context(|| format!("unknown feature name {name}"))?;
    if let Some(p) = pct {
        anyhow::ensure!(p == 5 || p == 95, "--pct must be 5 or 95");
        let value = match (id, p) {
            (FeatureId::BookImbalance(1), 5) => anchors::IMB1_P05,
            (FeatureId::BookImbalance(1), 95) => anchors::IMB1_P95,
            (FeatureId::BookImbalance(5), 5) => anchors::IMB5_P05,
            (FeatureId::BookImbalance(5), 95) => anchors::IMB5_P95,
            (FeatureId::Spread, 5) => anchors::SPREAD_P05,
            (FeatureId::Spread, 95) => anchors::SPREAD_P95,
            (FeatureId::TotalVol(1), 5) => anchors::VOL1_P05,
            (FeatureId::TotalVol(1), 95) => anchors::VOL1_P95,
            (FeatureId::TotalVol(5), 5) => anchors::VOL5_P05,
            (FeatureId::TotalVol(5), 95) => anchors::VOL5_P95,
            (FeatureId::EventPctReturn(50), 5) => anchors::EVENT_RETURN_50_P05,
            (FeatureId::EventPctReturn(50), 95) => anchors::EVENT_RETURN_50_P95,
            _ => anyhow::bail!("no stored percentile for {name}; use fix_value"),
        };
        return Ok((id, value));
    }
    let value = exp
        .fix_value
        .context("fix-feature needs --pct or fix_value in the config")?;
    Ok((id, value))
}

fn write_impact_csv(dir: &std::path::Path, path: &analysis::ImpactPath) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_path(dir.join("impact_path.csv"))?;
    w.write_record(["lag", "mean", "lo", "hi"])?;
    for i in 0..path.lags.len() {
        w.write_record([
            path.lags[i].to_string(),
            path.mean[i].to_string(),
            path.lo[i].to_string(),
            path.hi[i].to_string(),
        ])?;
    }
    w.flush()?;
    let summary = serde_json::json!({
        "peak": path.peak,
        "permanent": path.permanent,
        "permanent_peak_ratio": path.permanent_peak_ratio,
    });
    std::fs::write(
        dir.join("impact_summary.json"),
        serde_json::to_string_pretty(&summary)?,
    )?;
    Ok(())
}

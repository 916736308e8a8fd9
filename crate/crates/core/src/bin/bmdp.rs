use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use bmdp::batch::TransitionBatch;
use bmdp::bftq::{bftq_train, policy_from_q, BftqModel};
use bmdp::dp::{budgeted_value_iteration, noncontraction_witness, BviOptions};
use bmdp::envs::finite::two_state_example;
use bmdp::exploration::write_exploration_log;
use bmdp::harness::{self, parse_seeds, Algorithm, ExperimentConfig, SeedPoint};
use bmdp::lagrange::{calibration_curve, ftq_train_sweep, lambda_grid, LambdaPolicy, ScalarModel};
use bmdp::policy::{evaluate_policy, BudgetedPolicy};
use bmdp::regressor::io as netio;
use bmdp::rng::{self, domain};
use bmdp::{BudgetGrid, Error, Result};

#[derive(Parser)]
#[command(name = "bmdp", version, about = "Budgeted MDP solvers and experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Clone)]
struct Common {
    /// Experiment configuration (JSON).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1)]
    workers: usize,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Exact budgeted value iteration on a finite model.
    SolveBvi {
        #[command(flatten)]
        common: Common,
        /// Model JSON; the configured finite environment otherwise.
        #[arg(long)]
        mdp: Option<PathBuf>,
        /// Budget grid as `lo:step:hi`; the configured grid otherwise.
        #[arg(long)]
        grid: Option<String>,
        #[arg(long)]
        tol: Option<f64>,
    },
    /// Collects a transition batch with risk-sensitive exploration.
    Explore {
        #[command(flatten)]
        common: Common,
    },
    /// Fits a budgeted Q-network on a stored batch.
    TrainBftq {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        batch: PathBuf,
    },
    /// Trains the FTQ(λ) sweep on a stored batch and calibrates it.
    TrainFtqLambda {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        batch: PathBuf,
    },
    /// Evaluates a saved budgeted Q-network over the configured budgets.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
    },
    /// Full pipeline over several seeds.
    Run {
        #[command(flatten)]
        common: Common,
        /// Seed range `a..b`, `a..=b` or a single seed; `0..n_seeds` otherwise.
        #[arg(long)]
        seeds: Option<String>,
    },
    /// Shows that one exact backup can expand distances by 1/ε.
    WitnessNoncontraction {
        #[arg(long, default_value_t = 0.01)]
        epsilon: f64,
        #[arg(long, default_value_t = 0.9)]
        gamma: f64,
    },
}

fn load_config(common: &Common) -> Result<ExperimentConfig> {
    match &common.config {
        Some(p) => ExperimentConfig::load(p),
        None => Ok(ExperimentConfig::default()),
    }
}

fn out_dir(common: &Common, cfg: &ExperimentConfig) -> PathBuf {
    common
        .out
        .clone()
        .or_else(|| cfg.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from("out"))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

fn env_gamma(cfg: &ExperimentConfig) -> Result<(Box<dyn bmdp::envs::Environment>, f64)> {
    let env = cfg.env_config()?.build()?;
    let gamma = cfg.gamma.unwrap_or(env.gamma());
    Ok((env, gamma))
}

fn write_points(points: &[SeedPoint], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_writer(create(path)?);
    for p in points {
        w.serialize(p)?;
    }
    w.flush()?;
    Ok(())
}

fn solve_bvi(
    common: &Common,
    mdp: Option<PathBuf>,
    grid: Option<String>,
    tol: Option<f64>,
) -> Result<()> {
    let cfg = load_config(common)?;
    let model = match mdp {
        Some(p) => bmdp::BudgetedMdp::load(&p)?,
        None => cfg
            .env_config()?
            .finite_model()?
            .ok_or_else(|| Error::Domain("solve-bvi needs --mdp or a finite environment".into()))?,
    };
    let grid = match grid {
        Some(g) => BudgetGrid::parse(&g)?,
        None => cfg.budget_grid.clone(),
    };
    let opts = BviOptions {
        tol: tol.unwrap_or(cfg.bvi_tol),
        workers: common.workers,
        ..BviOptions::default()
    };
    let (q, report) = budgeted_value_iteration(&model, &grid, &opts)?;
    let out = out_dir(common, &cfg);
    fs::create_dir_all(&out)?;
    report.write_csv(&mut create(&out.join("convergence.csv"))?)?;
    let mut w = create(&out.join("q_values.csv"))?;
    writeln!(w, "state,action,beta,q_r,q_c")?;
    for s in 0..model.n_states() {
        for a in 0..model.n_actions() {
            for (k, beta) in grid.values().iter().enumerate() {
                let v = q.get(s, a, k);
                writeln!(w, "{s},{a},{beta},{},{}", v.reward, v.cost)?;
            }
        }
    }
    w.flush()?;
    println!(
        "{} iterations, residual {:e}, converged {}",
        report.iterations(),
        report.final_residual(),
        report.converged
    );
    Ok(())
}

fn explore(common: &Common) -> Result<()> {
    let cfg = load_config(common)?;
    cfg.validate()?;
    let (env, gamma) = env_gamma(&cfg)?;
    let (batch, col, _, _) =
        harness::collect_and_train(env.as_ref(), &cfg, gamma, common.seed, common.workers)?;
    let out = out_dir(common, &cfg);
    fs::create_dir_all(&out)?;
    batch.save_binary(&out.join("batch.bin"))?;
    if cfg.save_batch_csv {
        batch.save_csv(&out.join("batch.csv"))?;
    }
    write_exploration_log(&col.log, &mut create(&out.join("exploration_log.csv"))?)?;
    println!("{} transitions, {} trainings", batch.len(), col.trainings);
    Ok(())
}

fn train_bftq(common: &Common, batch: &Path) -> Result<()> {
    let cfg = load_config(common)?;
    let (env, gamma) = env_gamma(&cfg)?;
    let batch = TransitionBatch::load(batch)?;
    let bcfg = cfg.bftq_config(gamma, common.workers)?;
    let mut r = rng::derive(common.seed, &[domain::TRAINING, cfg.n_minibatch as u64]);
    let (model, report) = bftq_train(&batch, env.n_actions(), &bcfg, &mut r)?;
    let out = out_dir(common, &cfg);
    fs::create_dir_all(&out)?;
    report.write_csv(&mut create(&out.join("bftq_report.csv"))?)?;
    match &model {
        BftqModel::Network(net) => netio::save(net, &out.join("bftq_model.bin"))?,
        _ => log::warn!("tabular models are not persisted"),
    }
    println!("{} iterations", report.iterations.len());
    Ok(())
}

fn train_ftq_lambda(common: &Common, batch: &Path) -> Result<()> {
    let cfg = load_config(common)?;
    let (env, gamma) = env_gamma(&cfg)?;
    let batch = TransitionBatch::load(batch)?;
    let lambdas = lambda_grid(cfg.lambda_min, cfg.lambda_max, cfg.n_lambdas)?;
    let fcfg = cfg.ftq_config(gamma)?;
    let sweep_seed = rng::derive_seed(common.seed, &[domain::TRAINING, u64::MAX]);
    let models = ftq_train_sweep(
        &batch,
        env.n_actions(),
        &lambdas,
        &fcfg,
        sweep_seed,
        common.workers,
    )?;
    let out = out_dir(common, &cfg);
    fs::create_dir_all(&out)?;
    for (i, m) in models.iter().enumerate() {
        if let ScalarModel::Network(net) = m {
            netio::save(net, &out.join(format!("ftq_lambda_{i}.bin")))?;
        }
    }
    let owned: Vec<LambdaPolicy> = models.iter().map(|m| LambdaPolicy { model: m }).collect();
    let policies: Vec<&dyn BudgetedPolicy> =
        owned.iter().map(|p| p as &dyn BudgetedPolicy).collect();
    let (curve, rollouts) = calibration_curve(
        &policies,
        &lambdas,
        env.as_ref(),
        cfg.calibration_rollouts,
        common.seed,
        common.workers,
    )?;
    curve.write_csv(&mut create(&out.join("calibration.csv"))?)?;
    println!(
        "{} policies calibrated with {rollouts} rollouts",
        models.len()
    );
    Ok(())
}

fn evaluate(common: &Common, model: &Path) -> Result<()> {
    let cfg = load_config(common)?;
    let (env, _) = env_gamma(&cfg)?;
    let q = BftqModel::Network(netio::load(model)?);
    let pi = policy_from_q(&q, &cfg.budget_grid);
    let mut points = Vec::new();
    for (j, &beta) in cfg.beta_eval_grid.iter().enumerate() {
        let s = rng::derive_seed(common.seed, &[domain::EVALUATION, 1, j as u64]);
        let ev = evaluate_policy(&pi, env.as_ref(), beta, cfg.n_test, s, common.workers)?;
        if let Some(e) = ev.error {
            return Err(e);
        }
        println!(
            "beta {beta}: reward {:.4} ± {:.4}, cost {:.4} ± {:.4}",
            ev.mean_r, ev.se_r, ev.mean_c, ev.se_c
        );
        points.push(SeedPoint {
            algorithm: Algorithm::Bftq.name().into(),
            beta,
            mean_gr: ev.mean_r,
            se_gr: ev.se_r,
            mean_gc: ev.mean_c,
            se_gc: ev.se_c,
            n_trajs: ev.records.len(),
            infeasible_steps: ev.records.iter().map(|r| r.infeasible_steps).sum(),
        });
    }
    let out = out_dir(common, &cfg);
    fs::create_dir_all(&out)?;
    write_points(&points, &out.join("evaluation.csv"))
}

fn run(common: &Common, seeds: Option<String>) -> Result<()> {
    let cfg = load_config(common)?;
    let seeds = match seeds {
        Some(s) => parse_seeds(&s)?,
        None => (0..cfg.n_seeds as u64).collect(),
    };
    let out = out_dir(common, &cfg);
    let outcome = harness::run_experiment(&cfg, &seeds, common.workers, &out)?;
    for r in &outcome.tradeoff {
        println!(
            "{:<11} beta {:<6} reward {:>9.4} ± {:<8.4} cost {:>8.4} ± {:.4}",
            r.algorithm, r.beta, r.mean_gr, r.ci95_gr, r.mean_gc, r.ci95_gc
        );
    }
    Ok(())
}

fn witness(epsilon: f64, gamma: f64) -> Result<()> {
    let report = noncontraction_witness(epsilon, &two_state_example(gamma)?)?;
    println!(
        "epsilon {:e}: |Q1-Q2| = {:e}, |TQ1-TQ2| = {:e}, ratio {:e}",
        report.epsilon, report.q_gap, report.backup_gap, report.ratio
    );
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let res = match cli.command {
        Command::SolveBvi {
            common,
            mdp,
            grid,
            tol,
        } => solve_bvi(&common, mdp, grid, tol),
        Command::Explore { common } => explore(&common),
        Command::TrainBftq { common, batch } => train_bftq(&common, &batch),
        Command::TrainFtqLambda { common, batch } => train_ftq_lambda(&common, &batch),
        Command::Evaluate { common, model } => evaluate(&common, &model),
        Command::Run { common, seeds } => run(&common, seeds),
        Command::WitnessNoncontraction { epsilon, gamma } => witness(epsilon, gamma),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

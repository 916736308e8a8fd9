//! Experiment pipeline: collect, train, evaluate across seeds and write the
//! reward/cost trade-off table.
//!
//! Output tree of a run:
//!
//! ```text
//! out/
//!   resolved_config.json   every parameter the run used
//!   tradeoff.csv           one row per algorithm and evaluation budget
//!   interaction.csv        extra environment episodes spent on calibration
//!   error.json             only when a stage failed
//!   seed_<s>/              batch, models, training and evaluation logs
//! ```

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Deserializer, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::batch::TransitionBatch;
use crate::bftq::{bftq_train, policy_from_q, BftqConfig, BftqModel, RegressorChoice};
use crate::dp::{budgeted_value_iteration, BviOptions, GreedyPolicy};
use crate::envs::{EnvConfig, Environment};
use crate::error::{domain, Error, Result};
use crate::exploration::{
    collect_batch, write_exploration_log, BudgetSampler, EpsilonUnit, ExplorationConfig,
    ExplorationMode,
};
use crate::grid::BudgetGrid;
use crate::lagrange::{
    calibration_curve, ftq_train_sweep, lambda_grid, select_mixture, FtqConfig, LambdaPolicy,
    MixedLambdaPolicy,
};
use crate::par::parallel_map;
use crate::policy::{evaluate_policy, BudgetedPolicy, Evaluation};
use crate::regressor::{io as netio, Activation, InitScheme, RegressorSpec};
use crate::rng::{self, domain as dom};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Algorithm {
    Bvi,
    Bftq,
    FtqLambda,
}

impl Algorithm {
    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Bvi => "bvi",
            Algorithm::Bftq => "bftq",
            Algorithm::FtqLambda => "ftq-lambda",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RegressorKind {
    Mlp,
    Tabular,
}

fn one_or_many<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Vec<Algorithm>, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        One(Algorithm),
        Many(Vec<Algorithm>),
    }
    Ok(match Repr::deserialize(d)? {
        Repr::One(a) => vec![a],
        Repr::Many(v) => v,
    })
}

/// Run description. The keys from `architecture` to
/// `decay_epsilon_scheduling` are the rows of the algorithm parameter
/// tables; the rest are harness knobs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub environment: String,
    /// JSON file with the environment's fields; defaults when absent.
    pub env_config: Option<PathBuf>,
    #[serde(alias = "algorithm", deserialize_with = "one_or_many")]
    pub algorithms: Vec<Algorithm>,

    pub architecture: String,
    pub regularisation: f64,
    pub activation: Activation,
    pub size_beta_encoder: usize,
    pub initialisation: InitScheme,
    pub loss_function: String,
    pub optimizer: String,
    pub learning_rate: f64,
    pub epoch_nn: usize,
    pub normalize_reward: bool,
    pub epoch_ftq: usize,
    pub budget_grid: BudgetGrid,
    /// Defaults to the environment's discount.
    pub gamma: Option<f64>,
    pub n_samples: usize,
    pub n_minibatch: usize,
    pub n_seeds: usize,
    pub n_test: usize,
    pub decay_epsilon_scheduling: f64,

    /// Architecture of the FTQ(λ) networks; `architecture` when absent.
    pub ftq_architecture: Option<String>,
    pub regressor: RegressorKind,
    /// Minibatch size of the network fits; full batch when absent.
    pub nn_batch_size: Option<usize>,
    pub epsilon_floor: f64,
    pub epsilon_unit: EpsilonUnit,
    pub exploration: ExplorationMode,
    pub budget_sampler: BudgetSampler,
    pub ftq_convergence_tol: Option<f64>,
    pub cold_start: bool,
    /// Bounds applied to both target channels; returns of bounded episodes
    /// are known a priori.
    pub target_clip: Option<[f64; 2]>,
    pub lambda_min: f64,
    pub lambda_max: f64,
    pub n_lambdas: usize,
    pub calibration_rollouts: usize,
    pub conservative_k: Option<f64>,
    pub bvi_tol: f64,
    pub beta_eval_grid: Vec<f64>,
    pub output_dir: Option<PathBuf>,
    pub save_batch_csv: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            environment: "corridors".into(),
            env_config: None,
            algorithms: vec![Algorithm::Bftq],
            architecture: "256x128x64".into(),
            regularisation: 0.001,
            activation: Activation::Relu,
            size_beta_encoder: 3,
            initialisation: InitScheme::Xavier,
            loss_function: "l2".into(),
            optimizer: "adam".into(),
            learning_rate: 0.001,
            epoch_nn: 1000,
            normalize_reward: true,
            epoch_ftq: 12,
            budget_grid: BudgetGrid::parse("0:0.01:1").expect("valid grid"),
            gamma: None,
            n_samples: 5000,
            n_minibatch: 10,
            n_seeds: 4,
            n_test: 1000,
            decay_epsilon_scheduling: 0.001,
            ftq_architecture: None,
            regressor: RegressorKind::Mlp,
            nn_batch_size: None,
            epsilon_floor: 0.0,
            epsilon_unit: EpsilonUnit::Step,
            exploration: ExplorationMode::RiskSensitive,
            budget_sampler: BudgetSampler::Uniform,
            ftq_convergence_tol: None,
            cold_start: false,
            target_clip: None,
            lambda_min: 0.01,
            lambda_max: 100.0,
            n_lambdas: crate::lagrange::DEFAULT_LAMBDAS,
            calibration_rollouts: crate::lagrange::DEFAULT_CALIBRATION_ROLLOUTS,
            conservative_k: None,
            bvi_tol: 1e-8,
            beta_eval_grid: vec![0.0, 0.25, 0.5, 0.75, 1.0],
            output_dir: None,
            save_batch_csv: false,
        }
    }
}

/// `"256x128x64"` → `[256, 128, 64]`; empty string for no hidden layer.
pub fn parse_architecture(s: &str) -> Result<Vec<usize>> {
    if s.trim().is_empty() {
        return Ok(Vec::new());
    }
    s.split('x')
        .map(|w| match w.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => domain(format!("bad architecture {s:?}")),
        })
        .collect()
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn env_config(&self) -> Result<EnvConfig> {
        let mut value = match &self.env_config {
            Some(p) => serde_json::from_str::<serde_json::Value>(&fs::read_to_string(p)?)?,
            None => serde_json::json!({}),
        };
        let obj = value
            .as_object_mut()
            .ok_or_else(|| Error::Format("environment config must be a JSON object".into()))?;
        if let Some(name) = obj.get("name").and_then(|n| n.as_str()) {
            if name != self.environment {
                return domain(format!(
                    "env_config names {name:?} but environment is {:?}",
                    self.environment
                ));
            }
        }
        obj.insert("name".into(), self.environment.clone().into());
        Ok(serde_json::from_value(value)?)
    }

    pub fn regressor_spec(
        &self,
        architecture: &str,
        budget_encoder: bool,
    ) -> Result<RegressorSpec> {
        Ok(RegressorSpec {
            hidden_layers: parse_architecture(architecture)?,
            budget_encoder_layers: if budget_encoder {
                vec![self.size_beta_encoder]
            } else {
                Vec::new()
            },
            budget_range: [
                self.budget_grid.min(),
                self.budget_grid.max().max(self.budget_grid.min() + 1.0),
            ],
            activation: self.activation,
            init_scheme: self.initialisation,
            learning_rate: self.learning_rate,
            weight_decay: self.regularisation,
            epochs: self.epoch_nn,
            batch_size: self.nn_batch_size,
            normalize: self.normalize_reward,
            ..RegressorSpec::default()
        })
    }

    fn choice(&self, architecture: &str, budget_encoder: bool) -> Result<RegressorChoice> {
        Ok(match self.regressor {
            RegressorKind::Mlp => {
                RegressorChoice::Mlp(self.regressor_spec(architecture, budget_encoder)?)
            }
            RegressorKind::Tabular => RegressorChoice::Tabular,
        })
    }

    pub fn bftq_config(&self, gamma: f64, workers: usize) -> Result<BftqConfig> {
        Ok(BftqConfig {
            budget_grid: self.budget_grid.clone(),
            gamma,
            ftq_epochs: self.epoch_ftq,
            regressor: self.choice(&self.architecture, true)?,
            workers,
            convergence_tol: self.ftq_convergence_tol,
            cold_start: self.cold_start,
            target_clip: self.target_clip,
        })
    }

    pub fn ftq_config(&self, gamma: f64) -> Result<FtqConfig> {
        let arch = self
            .ftq_architecture
            .as_deref()
            .unwrap_or(&self.architecture);
        Ok(FtqConfig {
            gamma,
            ftq_epochs: self.epoch_ftq,
            regressor: self.choice(arch, false)?,
            convergence_tol: self.ftq_convergence_tol,
            cold_start: self.cold_start,
        })
    }

    pub fn exploration_config(&self, workers: usize) -> ExplorationConfig {
        ExplorationConfig {
            total_samples: self.n_samples,
            minibatches: self.n_minibatch,
            epsilon_decay: self.decay_epsilon_scheduling,
            epsilon_floor: self.epsilon_floor,
            budget_sampler: self.budget_sampler,
            epsilon_unit: self.epsilon_unit,
            mode: self.exploration,
            workers,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.algorithms.is_empty() {
            return domain("no algorithm selected");
        }
        if self.n_seeds == 0 || self.n_test == 0 {
            return domain("n_seeds and n_test must be positive");
        }
        if !self.loss_function.eq_ignore_ascii_case("l2") {
            return domain(format!(
                "unsupported loss function {:?}",
                self.loss_function
            ));
        }
        if !self.optimizer.eq_ignore_ascii_case("adam") {
            return domain(format!("unsupported optimizer {:?}", self.optimizer));
        }
        let space = self.env_config()?.budget_space()?;
        if let Some(b) = self.beta_eval_grid.iter().find(|b| !space.contains(**b)) {
            return domain(format!(
                "evaluation budget {b} outside [{}, {}]",
                space.min, space.max
            ));
        }
        if self.beta_eval_grid.is_empty() {
            return domain("empty evaluation grid");
        }
        self.exploration_config(1).validate()?;
        parse_architecture(&self.architecture)?;
        Ok(())
    }
}

/// Seeds `a..b` (half-open), `a..=b`, or a single integer.
pub fn parse_seeds(s: &str) -> Result<Vec<u64>> {
    let bad = || Error::Domain(format!("bad seed range {s:?}"));
    if let Some((a, b)) = s.split_once("..=") {
        let (a, b): (u64, u64) = (
            a.trim().parse().map_err(|_| bad())?,
            b.trim().parse().map_err(|_| bad())?,
        );
        return Ok((a..=b).collect());
    }
    if let Some((a, b)) = s.split_once("..") {
        let (a, b): (u64, u64) = (
            a.trim().parse().map_err(|_| bad())?,
            b.trim().parse().map_err(|_| bad())?,
        );
        return Ok((a..b).collect());
    }
    Ok(vec![s.trim().parse().map_err(|_| bad())?])
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TradeoffRecord {
    pub algorithm: String,
    pub beta: f64,
    pub mean_gr: f64,
    pub ci95_gr: f64,
    pub mean_gc: f64,
    pub ci95_gc: f64,
    pub n_seeds: usize,
    pub n_trajs: usize,
}

/// Mean and Student-t 95% half-width of per-seed means.
pub fn mean_ci95(xs: &[f64]) -> (f64, f64) {
    let n = xs.len();
    let mean = xs.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, 0.0);
    }
    let sd = (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
    let t = StudentsT::new(0.0, 1.0, (n - 1) as f64)
        .expect("positive dof")
        .inverse_cdf(0.975);
    (mean, t * sd / (n as f64).sqrt())
}

pub fn write_tradeoff(records: &[TradeoffRecord], out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Evaluation summary of one algorithm at one budget for one seed.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SeedPoint {
    pub algorithm: String,
    pub beta: f64,
    pub mean_gr: f64,
    pub se_gr: f64,
    pub mean_gc: f64,
    pub se_gc: f64,
    pub n_trajs: usize,
    pub infeasible_steps: usize,
}

impl SeedPoint {
    fn from_eval(alg: Algorithm, ev: &Evaluation) -> Self {
        Self {
            algorithm: alg.name().into(),
            beta: ev.beta,
            mean_gr: ev.mean_r,
            se_gr: ev.se_r,
            mean_gc: ev.mean_c,
            se_gc: ev.se_c,
            n_trajs: ev.records.len(),
            infeasible_steps: ev.records.iter().map(|r| r.infeasible_steps).sum(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SeedResult {
    pub seed: u64,
    pub points: Vec<SeedPoint>,
    pub calibration_rollouts: usize,
}

#[derive(Debug)]
pub struct ExperimentOutcome {
    pub tradeoff: Vec<TradeoffRecord>,
    pub seeds: Vec<SeedResult>,
    pub output_dir: PathBuf,
}

/// Error raised inside a stage of one seed's pipeline.
#[derive(Debug)]
pub struct StageError {
    pub seed: u64,
    pub stage: &'static str,
    pub error: Error,
}

type StageResult<T> = std::result::Result<T, (&'static str, Error)>;

trait Stage<T> {
    fn stage(self, name: &'static str) -> StageResult<T>;
}

impl<T> Stage<T> for Result<T> {
    fn stage(self, name: &'static str) -> StageResult<T> {
        self.map_err(|e| (name, e))
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

fn evaluate_grid(
    alg: Algorithm,
    policy: &dyn BudgetedPolicy,
    env: &dyn Environment,
    cfg: &ExperimentConfig,
    seed: u64,
    workers: usize,
    alg_index: u64,
) -> StageResult<Vec<SeedPoint>> {
    let mut points = Vec::new();
    for (j, &beta) in cfg.beta_eval_grid.iter().enumerate() {
        let s = rng::derive_seed(seed, &[dom::EVALUATION, alg_index, j as u64]);
        let ev = evaluate_policy(policy, env, beta, cfg.n_test, s, workers).stage("evaluation")?;
        if let Some(e) = ev.error {
            return Err(("evaluation", e));
        }
        points.push(SeedPoint::from_eval(alg, &ev));
    }
    Ok(points)
}

/// Collects the batch with BFTQ retraining between minibatches, then trains
/// the final model on all of it.
pub fn collect_and_train(
    env: &dyn Environment,
    cfg: &ExperimentConfig,
    gamma: f64,
    seed: u64,
    workers: usize,
) -> Result<(
    TransitionBatch,
    crate::exploration::Collection,
    BftqModel,
    crate::bftq::BftqReport,
)> {
    let bcfg = cfg.bftq_config(gamma, workers)?;
    let na = env.n_actions();
    let space = crate::grid::BudgetSpace::new(cfg.budget_grid.min(), cfg.budget_grid.max())?;
    let mut round = 0u64;
    let mut trainer = |b: &TransitionBatch| {
        let mut r = rng::derive(seed, &[dom::TRAINING, round]);
        round += 1;
        bftq_train(b, na, &bcfg, &mut r).map(|(m, _)| m)
    };
    let col = collect_batch(
        env,
        &cfg.exploration_config(workers),
        &cfg.budget_grid,
        space,
        seed,
        &mut trainer,
    )?;
    if let Some(e) = col.error {
        return Err(e);
    }
    let batch = col.batch.clone();
    let mut r = rng::derive(seed, &[dom::TRAINING, cfg.n_minibatch as u64]);
    let (model, report) = bftq_train(&batch, na, &bcfg, &mut r)?;
    let col = crate::exploration::Collection { error: None, ..col };
    Ok((batch, col, model, report))
}

fn run_seed(
    cfg: &ExperimentConfig,
    env_cfg: &EnvConfig,
    seed: u64,
    workers: usize,
    dir: &Path,
) -> StageResult<SeedResult> {
    fs::create_dir_all(dir)
        .map_err(Error::from)
        .stage("output")?;
    let env = env_cfg.build().stage("environment")?;
    let gamma = cfg.gamma.unwrap_or(env.gamma());
    let mut result = SeedResult {
        seed,
        ..SeedResult::default()
    };

    if cfg.algorithms.contains(&Algorithm::Bvi) {
        let mdp = env_cfg
            .finite_model()
            .stage("bvi")?
            .ok_or_else(|| {
                (
                    "bvi",
                    Error::Domain("bvi needs a finite environment".into()),
                )
            })?
            .with_gamma(gamma)
            .stage("bvi")?;
        let opts = BviOptions {
            tol: cfg.bvi_tol,
            workers,
            ..BviOptions::default()
        };
        let (q, report) = budgeted_value_iteration(&mdp, &cfg.budget_grid, &opts).stage("bvi")?;
        report
            .write_csv(&mut create(&dir.join("convergence.csv")).stage("output")?)
            .map_err(Error::from)
            .stage("output")?;
        let pi = GreedyPolicy::new(&q, workers);
        result.points.extend(evaluate_grid(
            Algorithm::Bvi,
            &pi,
            env.as_ref(),
            cfg,
            seed,
            workers,
            0,
        )?);
    }

    let learns = cfg.algorithms.iter().any(|a| *a != Algorithm::Bvi);
    if learns {
        let (batch, col, model, report) =
            collect_and_train(env.as_ref(), cfg, gamma, seed, workers).stage("exploration")?;
        batch.save_binary(&dir.join("batch.bin")).stage("output")?;
        if cfg.save_batch_csv {
            batch.save_csv(&dir.join("batch.csv")).stage("output")?;
        }
        write_exploration_log(
            &col.log,
            &mut create(&dir.join("exploration_log.csv")).stage("output")?,
        )
        .map_err(Error::from)
        .stage("output")?;

        if cfg.algorithms.contains(&Algorithm::Bftq) {
            report
                .write_csv(&mut create(&dir.join("bftq_report.csv")).stage("output")?)
                .map_err(Error::from)
                .stage("output")?;
            if let BftqModel::Network(net) = &model {
                netio::save(net, &dir.join("bftq_model.bin")).stage("output")?;
            }
            let pi = policy_from_q(&model, &cfg.budget_grid);
            result.points.extend(evaluate_grid(
                Algorithm::Bftq,
                &pi,
                env.as_ref(),
                cfg,
                seed,
                workers,
                1,
            )?);
        }

        if cfg.algorithms.contains(&Algorithm::FtqLambda) {
            let lambdas =
                lambda_grid(cfg.lambda_min, cfg.lambda_max, cfg.n_lambdas).stage("ftq-lambda")?;
            let fcfg = cfg.ftq_config(gamma).stage("ftq-lambda")?;
            let sweep_seed = rng::derive_seed(seed, &[dom::TRAINING, u64::MAX]);
            let models = ftq_train_sweep(
                &batch,
                env.n_actions(),
                &lambdas,
                &fcfg,
                sweep_seed,
                workers,
            )
            .stage("ftq-lambda")?;
            for (i, m) in models.iter().enumerate() {
                if let crate::lagrange::ScalarModel::Network(net) = m {
                    netio::save(net, &dir.join(format!("ftq_lambda_{i}.bin"))).stage("output")?;
                }
            }
            let owned: Vec<LambdaPolicy> =
                models.iter().map(|m| LambdaPolicy { model: m }).collect();
            let policies: Vec<&dyn BudgetedPolicy> =
                owned.iter().map(|p| p as &dyn BudgetedPolicy).collect();
            let (curve, rollouts) = calibration_curve(
                &policies,
                &lambdas,
                env.as_ref(),
                cfg.calibration_rollouts,
                seed,
                workers,
            )
            .stage("calibration")?;
            curve
                .write_csv(&mut create(&dir.join("calibration.csv")).stage("output")?)
                .map_err(Error::from)
                .stage("output")?;
            result.calibration_rollouts = rollouts;
            for (j, &beta) in cfg.beta_eval_grid.iter().enumerate() {
                let mixture =
                    select_mixture(&curve, beta, cfg.conservative_k).stage("calibration")?;
                let pi = MixedLambdaPolicy {
                    policies: &policies,
                    mixture,
                };
                let s = rng::derive_seed(seed, &[dom::EVALUATION, 2, j as u64]);
                let ev = evaluate_policy(&pi, env.as_ref(), beta, cfg.n_test, s, workers)
                    .stage("evaluation")?;
                if let Some(e) = ev.error {
                    return Err(("evaluation", e));
                }
                result
                    .points
                    .push(SeedPoint::from_eval(Algorithm::FtqLambda, &ev));
            }
        }
    }

    let mut w = csv::Writer::from_writer(create(&dir.join("evaluation.csv")).stage("output")?);
    for p in &result.points {
        w.serialize(p).map_err(Error::from).stage("output")?;
    }
    w.flush().map_err(Error::from).stage("output")?;
    Ok(result)
}

#[derive(Serialize)]
struct Resolved<'a> {
    config: &'a ExperimentConfig,
    environment: &'a EnvConfig,
    gamma: f64,
    seeds: &'a [u64],
    workers: usize,
}

#[derive(Serialize)]
struct ErrorFile<'a> {
    seed: Option<u64>,
    stage: &'a str,
    kind: String,
    message: String,
}

fn error_kind(e: &Error) -> String {
    format!("{e:?}")
        .split(['(', ' ', '{'])
        .next()
        .unwrap_or("Error")
        .to_string()
}

pub fn write_error_file(out: &Path, seed: Option<u64>, stage: &str, e: &Error) {
    let body = ErrorFile {
        seed,
        stage,
        kind: error_kind(e),
        message: e.to_string(),
    };
    if let Ok(text) = serde_json::to_string_pretty(&body) {
        let _ = fs::create_dir_all(out);
        let _ = fs::write(out.join("error.json"), text + "\n");
    }
}

/// Runs every seed (concurrently when `workers` allows), aggregates per-seed
/// means into trade-off records and writes the output tree. On failure the
/// outputs written so far are kept and `error.json` describes the failure.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    seeds: &[u64],
    workers: usize,
    out: &Path,
) -> Result<ExperimentOutcome> {
    let fail = |seed: Option<u64>, stage: &str, e: Error| {
        write_error_file(out, seed, stage, &e);
        e
    };
    if let Err(e) = cfg.validate() {
        return Err(fail(None, "config", e));
    }
    if seeds.is_empty() || workers == 0 {
        return Err(fail(
            None,
            "config",
            Error::Domain("need at least one seed and one worker".into()),
        ));
    }
    let env_cfg = cfg.env_config().map_err(|e| fail(None, "config", e))?;
    fs::create_dir_all(out).map_err(|e| fail(None, "output", e.into()))?;
    let _ = fs::remove_file(out.join("error.json"));
    let gamma = cfg.gamma.unwrap_or(
        env_cfg
            .build()
            .map_err(|e| fail(None, "environment", e))?
            .gamma(),
    );
    let resolved = Resolved {
        config: cfg,
        environment: &env_cfg,
        gamma,
        seeds,
        workers,
    };
    fs::write(
        out.join("resolved_config.json"),
        serde_json::to_string_pretty(&resolved)? + "\n",
    )
    .map_err(|e| fail(None, "output", e.into()))?;

    let outer = workers.min(seeds.len()).max(1);
    let inner = (workers / outer).max(1);
    let results = parallel_map(seeds, outer, |_, &seed| {
        run_seed(
            cfg,
            &env_cfg,
            seed,
            inner,
            &out.join(format!("seed_{seed}")),
        )
        .map_err(|(stage, error)| StageError { seed, stage, error })
    });
    let mut per_seed = Vec::with_capacity(seeds.len());
    for r in results {
        match r {
            Ok(s) => per_seed.push(s),
            Err(StageError { seed, stage, error }) => return Err(fail(Some(seed), stage, error)),
        }
    }

    let mut tradeoff = Vec::new();
    for alg in &cfg.algorithms {
        for (j, &beta) in cfg.beta_eval_grid.iter().enumerate() {
            let pts: Vec<&SeedPoint> = per_seed
                .iter()
                .map(|s| {
                    s.points
                        .iter()
                        .filter(|p| p.algorithm == alg.name())
                        .nth(j)
                        .expect("one point per budget")
                })
                .collect();
            let (mean_gr, ci95_gr) = mean_ci95(&pts.iter().map(|p| p.mean_gr).collect::<Vec<_>>());
            let (mean_gc, ci95_gc) = mean_ci95(&pts.iter().map(|p| p.mean_gc).collect::<Vec<_>>());
            tradeoff.push(TradeoffRecord {
                algorithm: alg.name().into(),
                beta,
                mean_gr,
                ci95_gr,
                mean_gc,
                ci95_gc,
                n_seeds: per_seed.len(),
                n_trajs: cfg.n_test,
            });
        }
    }
    write_tradeoff(&tradeoff, create(&out.join("tradeoff.csv"))?)?;
    let mut w = create(&out.join("interaction.csv"))?;
    writeln!(w, "algorithm,seed,calibration_rollouts")?;
    for s in &per_seed {
        for alg in &cfg.algorithms {
            let n = if *alg == Algorithm::FtqLambda {
                s.calibration_rollouts
            } else {
                0
            };
            writeln!(w, "{},{},{}", alg.name(), s.seed, n)?;
        }
    }
    w.flush()?;
    Ok(ExperimentOutcome {
        tradeoff,
        seeds: per_seed,
        output_dir: out.to_path_buf(),
    })
}

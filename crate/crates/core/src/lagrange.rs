//! FTQ(λ): fitted-Q on the penalised signal `r − λc`, and calibration of a
//! mixture of two λ-policies to a target budget.

use std::io::Write;

use ndarray::{Array1, Array2};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::batch::TransitionBatch;
use crate::bftq::RegressorChoice;
use crate::envs::Environment;
use crate::error::{domain, Error, Result};
use crate::mdp::AugmentedAction;
use crate::par::parallel_map;
use crate::policy::{evaluate_policy, mean_and_se, BudgetedPolicy, PolicyStep};
use crate::qfunc::BiQFunction;
use crate::regressor::{QNetwork, Samples, TabularQ};
use crate::rng::{self, Rng};

/// Default number of multipliers in a sweep.
pub const DEFAULT_LAMBDAS: usize = 10;

/// Rollouts per multiplier used to estimate its mean cost.
pub const DEFAULT_CALIBRATION_ROLLOUTS: usize = 1000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FtqConfig {
    pub gamma: f64,
    pub ftq_epochs: usize,
    pub regressor: RegressorChoice,
    #[serde(default)]
    pub convergence_tol: Option<f64>,
    #[serde(default)]
    pub cold_start: bool,
}

impl FtqConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.gamma) {
            return domain("gamma must lie in [0, 1]");
        }
        if self.ftq_epochs == 0 {
            return domain("at least one FTQ epoch is required");
        }
        if let RegressorChoice::Mlp(spec) = &self.regressor {
            spec.validate()?;
        }
        Ok(())
    }
}

/// Scalar action-value function of one multiplier.
#[derive(Clone, Debug)]
pub enum ScalarModel {
    Zero { n_actions: usize },
    Network(QNetwork),
    Table(TabularQ),
}

impl ScalarModel {
    pub fn n_actions(&self) -> usize {
        match self {
            ScalarModel::Zero { n_actions } => *n_actions,
            ScalarModel::Network(n) => n.n_actions(),
            ScalarModel::Table(t) => t.n_actions(),
        }
    }

    /// Row-major `states.len() × n_actions` values.
    pub fn values(&self, states: &[&[f64]]) -> Vec<f64> {
        let na = self.n_actions();
        match self {
            ScalarModel::Zero { .. } => vec![0.0; states.len() * na],
            ScalarModel::Table(t) => states
                .iter()
                .flat_map(|s| (0..na).map(move |a| t.predict(s, a, 0.0)[0]))
                .collect(),
            ScalarModel::Network(net) => {
                if states.is_empty() {
                    return Vec::new();
                }
                let mut x = Array2::zeros((states.len(), net.state_dim()));
                for (i, s) in states.iter().enumerate() {
                    x.row_mut(i).assign(&ndarray::ArrayView1::from(*s));
                }
                let b = Array1::zeros(states.len());
                net.predict(x.view(), b.view())
                    .expect("inputs checked by the caller")
                    .into_raw_vec_and_offset()
                    .0
            }
        }
    }

    /// `argmax_a Q(s, a)`, lowest index among ties.
    pub fn greedy(&self, state: &[f64]) -> usize {
        argmax(&self.values(&[state]))
    }
}

fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &x)| {
            if x > best.1 {
                (i, x)
            } else {
                best
            }
        })
        .0
}

/// Deterministic greedy policy of a scalar model. The budget is ignored and
/// passed through unchanged.
pub struct LambdaPolicy<'a> {
    pub model: &'a ScalarModel,
}

impl BudgetedPolicy for LambdaPolicy<'_> {
    fn act(&self, _episode: usize, state: &[f64], beta: f64, _rng: &mut Rng) -> PolicyStep {
        PolicyStep {
            action: AugmentedAction::new(self.model.greedy(state), beta),
            infeasible: false,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct FtqReport {
    /// Sup-norm change of the targets per iteration.
    pub target_changes: Vec<f64>,
    pub fit_losses: Vec<f64>,
}

/// Fitted-Q iteration on `r − λc` with a max-over-actions backup, from zero.
pub fn ftq_train(
    batch: &TransitionBatch,
    n_actions: usize,
    lambda: f64,
    cfg: &FtqConfig,
    rng: &mut Rng,
) -> Result<(ScalarModel, FtqReport)> {
    cfg.validate()?;
    if batch.is_empty() {
        return domain("cannot train on an empty batch");
    }
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return domain("lambda must be finite and non-negative");
    }
    let ts = batch.transitions();
    if ts.iter().any(|t| t.action.action >= n_actions) {
        return domain("batch action outside the action set");
    }
    let n = ts.len();
    let mut states = Array2::zeros((n, batch.state_dim()));
    for (i, t) in ts.iter().enumerate() {
        states
            .row_mut(i)
            .assign(&ndarray::ArrayView1::from(&t.state[..]));
    }
    let actions: Vec<usize> = ts.iter().map(|t| t.action.action).collect();
    let next: Vec<&[f64]> = ts.iter().map(|t| &t.next_state[..]).collect();

    let mut model = ScalarModel::Zero { n_actions };
    let mut report = FtqReport::default();
    let mut previous: Option<Vec<f64>> = None;
    for iteration in 0..cfg.ftq_epochs {
        let q_next = if cfg.gamma == 0.0 {
            vec![0.0; n * n_actions]
        } else {
            model.values(&next)
        };
        let y: Vec<f64> = ts
            .iter()
            .enumerate()
            .map(|(i, t)| {
                let base = t.reward - lambda * t.cost;
                if t.terminal || cfg.gamma == 0.0 {
                    base
                } else {
                    let row = &q_next[i * n_actions..(i + 1) * n_actions];
                    base + cfg.gamma * row.iter().copied().fold(f64::NEG_INFINITY, f64::max)
                }
            })
            .collect();
        let change = match &previous {
            Some(p) => p
                .iter()
                .zip(&y)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max),
            None => y.iter().map(|v| v.abs()).fold(0.0, f64::max),
        };
        let samples = Samples {
            states: states.clone(),
            budgets: Array1::zeros(n),
            actions: actions.clone(),
            targets: Array2::from_shape_vec((n, 1), y.clone()).expect("one column"),
        };
        let loss = match &cfg.regressor {
            RegressorChoice::Tabular => {
                let t = TabularQ::fit(&samples, n_actions, None)?;
                let mse = (0..n)
                    .map(|i| (t.predict(&ts[i].state, actions[i], 0.0)[0] - y[i]).powi(2))
                    .sum::<f64>()
                    / n as f64;
                model = ScalarModel::Table(t);
                mse
            }
            RegressorChoice::Mlp(spec) => {
                let mut net = match model {
                    ScalarModel::Network(net) if !cfg.cold_start => net,
                    _ => QNetwork::build(batch.state_dim(), n_actions, 1, false, spec, rng)?,
                };
                let trace = net.fit(&samples, spec, rng).map_err(|e| Error::Training {
                    iteration,
                    source: Box::new(e),
                })?;
                model = ScalarModel::Network(net);
                trace.last().copied().unwrap_or(f64::NAN)
            }
        };
        report.target_changes.push(change);
        report.fit_losses.push(loss);
        previous = Some(y);
        if iteration > 0 && cfg.convergence_tol.is_some_and(|tol| change < tol) {
            break;
        }
    }
    Ok((model, report))
}

/// `n` multipliers spaced geometrically over `[lo, hi]`.
pub fn lambda_grid(lo: f64, hi: f64, n: usize) -> Result<Vec<f64>> {
    if !(lo > 0.0 && hi >= lo && hi.is_finite()) || n == 0 {
        return domain("lambda grid needs 0 < lo <= hi and at least one point");
    }
    if n == 1 {
        return Ok(vec![lo]);
    }
    let step = (hi / lo).ln() / (n - 1) as f64;
    let mut g: Vec<f64> = (0..n).map(|i| lo * (step * i as f64).exp()).collect();
    g[n - 1] = hi;
    Ok(g)
}

/// One training per multiplier, each from its own derived stream.
pub fn ftq_train_sweep(
    batch: &TransitionBatch,
    n_actions: usize,
    lambdas: &[f64],
    cfg: &FtqConfig,
    seed: u64,
    workers: usize,
) -> Result<Vec<ScalarModel>> {
    parallel_map(lambdas, workers, |i, &lambda| {
        let mut rng = rng::derive(seed, &[rng::domain::TRAINING, i as u64]);
        ftq_train(batch, n_actions, lambda, cfg, &mut rng).map(|(m, _)| m)
    })
    .into_iter()
    .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationEntry {
    pub lambda: f64,
    pub mean_cost: f64,
    pub cost_std: f64,
    pub mean_reward: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CalibrationCurve {
    /// Sorted by λ.
    pub entries: Vec<CalibrationEntry>,
}

impl CalibrationCurve {
    pub fn write_csv(&self, out: &mut impl Write) -> std::io::Result<()> {
        writeln!(out, "lambda,mean_cost,cost_std,mean_reward")?;
        for e in &self.entries {
            writeln!(
                out,
                "{},{},{},{}",
                e.lambda, e.mean_cost, e.cost_std, e.mean_reward
            )?;
        }
        Ok(())
    }
}

/// Estimates each policy's mean cost and reward from `n_rollouts` episodes.
/// Returns the curve and the number of rollouts spent.
pub fn calibration_curve(
    policies: &[&dyn BudgetedPolicy],
    lambdas: &[f64],
    env: &dyn Environment,
    n_rollouts: usize,
    seed: u64,
    workers: usize,
) -> Result<(CalibrationCurve, usize)> {
    if n_rollouts == 0 {
        return domain("calibration needs at least one rollout");
    }
    if policies.len() != lambdas.len() || policies.is_empty() {
        return domain("one policy per multiplier is required");
    }
    if lambdas.windows(2).any(|w| w[0] >= w[1]) {
        return domain("multipliers must be strictly increasing");
    }
    let mut entries = Vec::with_capacity(policies.len());
    for (i, (p, &lambda)) in policies.iter().zip(lambdas).enumerate() {
        let s = rng::derive_seed(seed, &[rng::domain::CALIBRATION, i as u64]);
        let ev = evaluate_policy(*p, env, 0.0, n_rollouts, s, workers)?;
        if let Some(e) = ev.error {
            return Err(e);
        }
        let costs: Vec<f64> = ev.records.iter().map(|r| r.return_c).collect();
        let (_, se) = mean_and_se(&costs);
        entries.push(CalibrationEntry {
            lambda,
            mean_cost: ev.mean_c,
            cost_std: se * (n_rollouts as f64).sqrt(),
            mean_reward: ev.mean_r,
        });
    }
    Ok((CalibrationCurve { entries }, policies.len() * n_rollouts))
}

/// Per-episode mixture of two λ-policies: `low` (the riskier, smaller λ)
/// with probability `weight`, `high` otherwise.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LambdaMixture {
    pub low: usize,
    pub high: usize,
    pub weight: f64,
    pub infeasible: bool,
}

/// Picks the smallest feasible multiplier and mixes it with its violating
/// neighbour so that the interpolated cost equals β. With `conservative_k`
/// the cost of a policy is read as `mean + k·std`.
pub fn select_mixture(
    curve: &CalibrationCurve,
    beta: f64,
    conservative_k: Option<f64>,
) -> Result<LambdaMixture> {
    let e = &curve.entries;
    if e.is_empty() {
        return domain("empty calibration curve");
    }
    let cost = |i: usize| e[i].mean_cost + conservative_k.unwrap_or(0.0) * e[i].cost_std;
    let dirac = |i: usize, infeasible: bool| LambdaMixture {
        low: i,
        high: i,
        weight: 0.0,
        infeasible,
    };
    let Some(j) = (0..e.len()).find(|&i| cost(i) <= beta) else {
        let cheapest = (0..e.len())
            .min_by(|&a, &b| cost(a).total_cmp(&cost(b)))
            .unwrap();
        return Ok(dirac(cheapest, true));
    };
    if j == 0 {
        let best = (0..e.len())
            .filter(|&i| cost(i) <= beta)
            .max_by(|&a, &b| {
                e[a].mean_reward
                    .total_cmp(&e[b].mean_reward)
                    .then(b.cmp(&a))
            })
            .unwrap();
        return Ok(dirac(best, false));
    }
    let (c_low, c_high) = (cost(j - 1), cost(j));
    let weight = ((beta - c_high) / (c_low - c_high)).clamp(0.0, 1.0);
    Ok(LambdaMixture {
        low: j - 1,
        high: j,
        weight,
        infeasible: false,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Calibration {
    pub curve: CalibrationCurve,
    pub mixture: LambdaMixture,
    /// Environment episodes consumed by the calibration.
    pub rollouts: usize,
}

#[allow(clippy::too_many_arguments)]
pub fn calibrate(
    policies: &[&dyn BudgetedPolicy],
    lambdas: &[f64],
    env: &dyn Environment,
    beta: f64,
    n_rollouts: usize,
    seed: u64,
    workers: usize,
    conservative_k: Option<f64>,
) -> Result<Calibration> {
    let (curve, rollouts) = calibration_curve(policies, lambdas, env, n_rollouts, seed, workers)?;
    let mixture = select_mixture(&curve, beta, conservative_k)?;
    Ok(Calibration {
        curve,
        mixture,
        rollouts,
    })
}

/// Executable calibrated mixture; one λ-policy is drawn per episode.
pub struct MixedLambdaPolicy<'a> {
    pub policies: &'a [&'a dyn BudgetedPolicy],
    pub mixture: LambdaMixture,
}

impl BudgetedPolicy for MixedLambdaPolicy<'_> {
    fn begin_episode(&self, rng: &mut Rng) -> usize {
        if rng.random::<f64>() < self.mixture.weight {
            self.mixture.low
        } else {
            self.mixture.high
        }
    }

    fn act(&self, episode: usize, state: &[f64], beta: f64, rng: &mut Rng) -> PolicyStep {
        let mut step = self.policies[episode].act(0, state, beta, rng);
        step.infeasible |= self.mixture.infeasible;
        step
    }
}

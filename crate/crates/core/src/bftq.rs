//! Budgeted fitted-Q iteration.
//!
//! Each outer iteration computes sampled optimality targets for the whole
//! batch and regresses a new Q on them. Targets are computed block by block:
//! one batched evaluation of Q on `next states × A × B̃`, then one hull per
//! transition. Blocks are fixed-size and independent of the worker count, so
//! the output does not depend on how many workers share them.

use std::io::Write;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::batch::TransitionBatch;
use crate::error::{domain, Error, Result};
use crate::grid::BudgetGrid;
use crate::hull::{grid_points, points_from_rows, prune_dominated, top_frontier, HullDecision};
use crate::mdp::VectorSignal;
use crate::par::parallel_map;
use crate::policy::{BudgetedPolicy, PolicyStep};
use crate::qfunc::{BiQFunction, ZeroQ};
use crate::regressor::{QNetwork, RegressorSpec, Samples, TabularQ};
use crate::rng::Rng;

/// Transitions per target block.
pub const TARGET_BLOCK: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum RegressorChoice {
    Mlp(RegressorSpec),
    /// Exact per-key means; for finite models with one-hot states.
    Tabular,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BftqConfig {
    pub budget_grid: BudgetGrid,
    pub gamma: f64,
    /// Outer iterations.
    pub ftq_epochs: usize,
    pub regressor: RegressorChoice,
    #[serde(default = "one")]
    pub workers: usize,
    /// Stop early once successive targets move less than this (sup-norm).
    #[serde(default)]
    pub convergence_tol: Option<f64>,
    /// Re-initialise the network every iteration instead of warm starting.
    #[serde(default)]
    pub cold_start: bool,
    /// Clamp both target channels to `[lo, hi]`.
    #[serde(default)]
    pub target_clip: Option<[f64; 2]>,
}

fn one() -> usize {
    1
}

impl BftqConfig {
    pub fn validate(&self) -> Result<()> {
        if self.workers == 0 {
            return domain("workers must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return domain("gamma must lie in [0, 1]");
        }
        if self.ftq_epochs == 0 {
            return domain("at least one FTQ epoch is required");
        }
        if let Some([lo, hi]) = self.target_clip {
            if !(lo <= hi) {
                return domain("target clip range is empty");
            }
        }
        if let RegressorChoice::Mlp(spec) = &self.regressor {
            spec.validate()?;
        }
        Ok(())
    }
}

/// A trained (or initial) BFTQ model.
#[derive(Clone, Debug)]
pub enum BftqModel {
    Zero(ZeroQ),
    Network(QNetwork),
    Table(TabularQ),
}

impl BiQFunction for BftqModel {
    fn n_actions(&self) -> usize {
        match self {
            BftqModel::Zero(q) => q.n_actions(),
            BftqModel::Network(q) => q.n_actions(),
            BftqModel::Table(q) => q.n_actions(),
        }
    }

    fn evaluate(&self, state: &[f64], allocation: f64) -> Vec<VectorSignal> {
        match self {
            BftqModel::Zero(q) => q.evaluate(state, allocation),
            BftqModel::Network(q) => q.evaluate(state, allocation),
            BftqModel::Table(q) => q.evaluate(state, allocation),
        }
    }

    fn evaluate_batch(&self, states: &[&[f64]], allocations: &[f64]) -> Vec<VectorSignal> {
        match self {
            BftqModel::Zero(q) => q.evaluate_batch(states, allocations),
            BftqModel::Network(q) => q.evaluate_batch(states, allocations),
            BftqModel::Table(q) => q.evaluate_batch(states, allocations),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Targets {
    pub values: Vec<VectorSignal>,
    /// Transitions whose allocation lay below every achievable cost.
    pub infeasible: usize,
    /// Transitions whose allocation had to be snapped to the grid.
    pub off_grid: usize,
}

/// `Y_i = (r_i, c_i) + γ · E_{π_hull(s′_i, β_a,i)} Q(s′_i, ·)`, zero
/// continuation on terminal transitions. Output order is batch order.
pub fn compute_targets(
    batch: &TransitionBatch,
    q: &dyn BiQFunction,
    cfg: &BftqConfig,
) -> Result<Targets> {
    if batch.is_empty() {
        return domain("cannot compute targets of an empty batch");
    }
    if cfg.workers == 0 {
        return domain("workers must be at least 1");
    }
    let blocks: Vec<&[_]> = batch.transitions().chunks(TARGET_BLOCK).collect();
    let grid = cfg.budget_grid.values();
    let na = q.n_actions();
    let gamma = cfg.gamma;
    let results = parallel_map(&blocks, cfg.workers, |_, block| {
        let live: Vec<usize> = (0..block.len())
            .filter(|&i| !block[i].terminal && gamma != 0.0)
            .collect();
        let mut states: Vec<&[f64]> = Vec::with_capacity(live.len() * grid.len());
        let mut budgets = Vec::with_capacity(live.len() * grid.len());
        for &i in &live {
            for &b in grid {
                states.push(&block[i].next_state);
                budgets.push(b);
            }
        }
        let rows = if live.is_empty() {
            Vec::new()
        } else {
            q.evaluate_batch(&states, &budgets)
        };
        let stride = grid.len() * na;
        let mut out = Targets::default();
        let mut next_live = live.iter().enumerate().peekable();
        for (i, t) in block.iter().enumerate() {
            let snapped = cfg.budget_grid.snap(t.action.budget);
            out.off_grid += usize::from(snapped.off_grid);
            let mut y = t.signal();
            if let Some((m, _)) = next_live.next_if(|(_, &j)| j == i) {
                let points = points_from_rows(&rows[m * stride..(m + 1) * stride], na, grid);
                let d = top_frontier(&prune_dominated(&points).expect("grid is non-empty"))
                    .expect("pruning keeps a point")
                    .decide(snapped.value);
                out.infeasible += usize::from(d.infeasible);
                y = y + gamma * d.value;
            }
            if let Some([lo, hi]) = cfg.target_clip {
                y = VectorSignal::new(y.reward.clamp(lo, hi), y.cost.clamp(lo, hi));
            }
            out.values.push(y);
        }
        out
    });
    let mut all = Targets {
        values: Vec::with_capacity(batch.len()),
        ..Targets::default()
    };
    for r in results {
        all.values.extend(r.values);
        all.infeasible += r.infeasible;
        all.off_grid += r.off_grid;
    }
    Ok(all)
}

/// Regression inputs keyed by `(s, β_a, a)`.
pub fn regression_samples(batch: &TransitionBatch, targets: &[VectorSignal]) -> Samples {
    let n = batch.len();
    let d = batch.state_dim();
    let mut states = Array2::zeros((n, d));
    let mut y = Array2::zeros((n, 2));
    for (i, (t, v)) in batch.transitions().iter().zip(targets).enumerate() {
        states
            .row_mut(i)
            .assign(&ndarray::ArrayView1::from(&t.state[..]));
        y[[i, 0]] = v.reward;
        y[[i, 1]] = v.cost;
    }
    Samples {
        states,
        budgets: Array1::from_iter(batch.transitions().iter().map(|t| t.action.budget)),
        actions: batch
            .transitions()
            .iter()
            .map(|t| t.action.action)
            .collect(),
        targets: y,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BftqIteration {
    pub iteration: usize,
    /// Sup-norm change of the targets since the previous iteration (since
    /// zero for the first).
    pub target_change: f64,
    pub fit_loss: f64,
    pub infeasible: usize,
    pub off_grid: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct BftqReport {
    pub iterations: Vec<BftqIteration>,
    /// Per-iteration loss traces of the network fits.
    pub loss_traces: Vec<Vec<f64>>,
}

impl BftqReport {
    pub fn write_csv(&self, out: &mut impl Write) -> std::io::Result<()> {
        writeln!(out, "iteration,target_change,fit_loss,infeasible,off_grid")?;
        for r in &self.iterations {
            writeln!(
                out,
                "{},{},{},{},{}",
                r.iteration, r.target_change, r.fit_loss, r.infeasible, r.off_grid
            )?;
        }
        Ok(())
    }
}

fn table_mse(q: &TabularQ, s: &Samples) -> f64 {
    let mut total = 0.0;
    for i in 0..s.len() {
        let p = q.predict(
            s.states.row(i).as_slice().expect("standard layout"),
            s.actions[i],
            s.budgets[i],
        );
        total += (p[0] - s.targets[[i, 0]]).powi(2) + (p[1] - s.targets[[i, 1]]).powi(2);
    }
    total / (2 * s.len()) as f64
}

/// Fitted iteration from `Q₀ = 0`. A network's budget input range is taken
/// from the grid bounds.
pub fn bftq_train(
    batch: &TransitionBatch,
    n_actions: usize,
    cfg: &BftqConfig,
    rng: &mut Rng,
) -> Result<(BftqModel, BftqReport)> {
    cfg.validate()?;
    if batch.is_empty() {
        return domain("cannot train on an empty batch");
    }
    if let Some(t) = batch
        .transitions()
        .iter()
        .find(|t| t.action.action >= n_actions)
    {
        return domain(format!("action {} outside 0..{n_actions}", t.action.action));
    }
    let grid = &cfg.budget_grid;
    let mut model = BftqModel::Zero(ZeroQ { n_actions });
    let mut report = BftqReport::default();
    let mut previous: Option<Vec<VectorSignal>> = None;
    for iteration in 0..cfg.ftq_epochs {
        let targets = compute_targets(batch, &model, cfg)?;
        let target_change = match &previous {
            Some(p) => p
                .iter()
                .zip(&targets.values)
                .map(|(a, b)| a.sup_dist(b))
                .fold(0.0, f64::max),
            None => targets
                .values
                .iter()
                .map(|v| v.sup_dist(&VectorSignal::ZERO))
                .fold(0.0, f64::max),
        };
        let samples = regression_samples(batch, &targets.values);
        let fit_loss = match &cfg.regressor {
            RegressorChoice::Tabular => {
                let t = TabularQ::fit(&samples, n_actions, Some(grid.clone()))?;
                let loss = table_mse(&t, &samples);
                model = BftqModel::Table(t);
                loss
            }
            RegressorChoice::Mlp(spec) => {
                let mut spec = spec.clone();
                if grid.min() < grid.max() {
                    spec.budget_range = [grid.min(), grid.max()];
                }
                let mut net = match model {
                    BftqModel::Network(net) if !cfg.cold_start => net,
                    _ => QNetwork::new(batch.state_dim(), n_actions, &spec, rng)?,
                };
                let trace = net.fit(&samples, &spec, rng).map_err(|e| Error::Training {
                    iteration,
                    source: Box::new(e),
                })?;
                let loss = trace.last().copied().unwrap_or(f64::NAN);
                report.loss_traces.push(trace);
                model = BftqModel::Network(net);
                loss
            }
        };
        log::debug!("bftq iteration {iteration}: change {target_change:.3e}, loss {fit_loss:.3e}");
        report.iterations.push(BftqIteration {
            iteration,
            target_change,
            fit_loss,
            infeasible: targets.infeasible,
            off_grid: targets.off_grid,
        });
        previous = Some(targets.values);
        if iteration > 0 && cfg.convergence_tol.is_some_and(|tol| target_change < tol) {
            break;
        }
    }
    Ok((model, report))
}

/// Executable π_hull of a learned Q: the budget is snapped to the grid and
/// the frontier of `A × B̃` is rebuilt at every step.
pub struct HullPolicy<'a> {
    q: &'a dyn BiQFunction,
    grid: BudgetGrid,
}

pub fn policy_from_q<'a>(q: &'a dyn BiQFunction, grid: &BudgetGrid) -> HullPolicy<'a> {
    HullPolicy {
        q,
        grid: grid.clone(),
    }
}

impl HullPolicy<'_> {
    pub fn decide(&self, state: &[f64], beta: f64) -> HullDecision {
        let beta = self.grid.snap(beta).value;
        let points = grid_points(self.q, state, self.grid.values());
        top_frontier(&prune_dominated(&points).expect("grid is non-empty"))
            .expect("pruning keeps a point")
            .decide(beta)
    }
}

impl BudgetedPolicy for HullPolicy<'_> {
    fn act(&self, _episode: usize, state: &[f64], beta: f64, rng: &mut Rng) -> PolicyStep {
        let d = self.decide(state, beta);
        PolicyStep {
            action: d.policy.sample(rng),
            infeasible: d.infeasible,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::batch::full_coverage_batch;
    use crate::dp::{budgeted_value_iteration, sampled_backup, BviOptions};
    use crate::envs::finite::{finite_chain_bmdp, PROBABILITY_UNIT};
    use crate::grid::BudgetSpace;
    use crate::mdp::{AugmentedAction, MixturePolicy, Transition};
    use crate::qfunc::{one_hot, GriddedQ};
    use crate::rng::{derive, seeded};
    use rand::Rng as _;

    fn cfg(grid: BudgetGrid, gamma: f64) -> BftqConfig {
        BftqConfig {
            budget_grid: grid,
            gamma,
            ftq_epochs: 400,
            regressor: RegressorChoice::Tabular,
            workers: 1,
            convergence_tol: Some(1e-12),
            cold_start: false,
            target_clip: None,
        }
    }

    fn random_batch(n: usize, ns: usize, grid: &BudgetGrid, seed: u64) -> TransitionBatch {
        let mut rng = seeded(seed);
        let ts = (0..n)
            .map(|_| {
                let k = rng.random_range(0..grid.len());
                Transition {
                    state: one_hot(rng.random_range(0..ns), ns),
                    budget: rng.random(),
                    action: AugmentedAction::new(rng.random_range(0..2), grid.get(k)),
                    reward: rng.random(),
                    cost: rng.random(),
                    next_state: one_hot(rng.random_range(0..ns), ns),
                    terminal: rng.random_bool(0.1),
                }
            })
            .collect();
        TransitionBatch::from_transitions(ns, ts).unwrap()
    }

    fn random_q(ns: usize, grid: &BudgetGrid, seed: u64) -> GriddedQ {
        let mut rng = seeded(seed);
        GriddedQ::from_fn(ns, 2, grid.clone(), |_, _, _| {
            VectorSignal::new(rng.random(), rng.random())
        })
    }

    #[test]
    fn trivial_targets() {
        let grid = BudgetGrid::uniform(BudgetSpace::unit(), 0.25).unwrap();
        let batch = random_batch(70, 3, &grid, 1);
        let q = random_q(3, &grid, 2);
        let raw: Vec<_> = batch.transitions().iter().map(|t| t.signal()).collect();
        assert_eq!(
            compute_targets(&batch, &q, &cfg(grid.clone(), 0.0))
                .unwrap()
                .values,
            raw
        );
        assert_eq!(
            compute_targets(&batch, &ZeroQ { n_actions: 2 }, &cfg(grid, 0.9))
                .unwrap()
                .values,
            raw
        );
    }

    #[test]
    fn targets_match_the_sampled_backup() {
        let grid = BudgetGrid::uniform(BudgetSpace::unit(), 0.1).unwrap();
        let batch = random_batch(100, 4, &grid, 3);
        let q = random_q(4, &grid, 4);
        let c = cfg(grid.clone(), 0.9);
        let t = compute_targets(&batch, &q, &c).unwrap();
        let mut infeasible = 0;
        for (tr, y) in batch.transitions().iter().zip(&t.values) {
            let r = sampled_backup(&q, tr, &grid, 0.9);
            assert!(r.value.sup_dist(y) <= 1e-12);
            infeasible += usize::from(r.infeasible && !tr.terminal);
        }
        assert_eq!(infeasible, t.infeasible);
    }

    #[test]
    fn targets_are_worker_invariant() {
        let grid = BudgetGrid::uniform(BudgetSpace::unit(), 0.1).unwrap();
        let batch = random_batch(300, 4, &grid, 5);
        let q = random_q(4, &grid, 6);
        let mut c = cfg(grid, 0.9);
        let base = compute_targets(&batch, &q, &c).unwrap();
        for w in [2, 4, 8] {
            c.workers = w;
            assert_eq!(compute_targets(&batch, &q, &c).unwrap(), base);
        }
    }

    #[test]
    fn one_epoch_at_gamma_zero_fits_the_immediate_signal() {
        let grid = BudgetGrid::uniform(BudgetSpace::unit(), 0.5).unwrap();
        let mdp = finite_chain_bmdp(3, 1).unwrap();
        let batch = full_coverage_batch(&mdp, &grid, PROBABILITY_UNIT).unwrap();
        let mut c = cfg(grid, 0.0);
        c.ftq_epochs = 1;
        let (q, report) = bftq_train(&batch, 2, &c, &mut seeded(0)).unwrap();
        assert_eq!(report.iterations.len(), 1);
        for s in 0..3 {
            let v = q.evaluate(&one_hot(s, 3), 0.5);
            for a in 0..2 {
                assert!(v[a].sup_dist(&mdp.signal(s, a)) < 1e-12);
            }
        }
    }

    #[test]
    fn tabular_bftq_reproduces_value_iteration() {
        let grid = BudgetGrid::uniform(BudgetSpace::unit(), 0.1).unwrap();
        let mdp = finite_chain_bmdp(3, 0).unwrap();
        let (qstar, _) = budgeted_value_iteration(
            &mdp,
            &grid,
            &BviOptions {
                tol: 1e-12,
                ..Default::default()
            },
        )
        .unwrap();
        let batch = full_coverage_batch(&mdp, &grid, PROBABILITY_UNIT).unwrap();
        let (q, report) =
            bftq_train(&batch, 2, &cfg(grid.clone(), mdp.gamma()), &mut seeded(0)).unwrap();
        assert!(report.iterations.len() < 400);
        let mut gap: f64 = 0.0;
        for s in 0..3 {
            for (k, &b) in grid.values().iter().enumerate() {
                let v = q.evaluate(&one_hot(s, 3), b);
                for a in 0..2 {
                    gap = gap.max(v[a].sup_dist(&qstar.get(s, a, k)));
                }
            }
        }
        assert!(gap < 1e-6, "gap {gap}");
    }

    #[test]
    fn network_training_runs_and_reports() {
        let grid = BudgetGrid::uniform(BudgetSpace::unit(), 0.25).unwrap();
        let batch = random_batch(64, 3, &grid, 7);
        let spec = RegressorSpec {
            hidden_layers: vec![8],
            epochs: 5,
            ..RegressorSpec::default()
        };
        let mut c = cfg(grid, 0.9);
        c.regressor = RegressorChoice::Mlp(spec);
        c.ftq_epochs = 3;
        c.convergence_tol = None;
        let (q, report) = bftq_train(&batch, 2, &c, &mut derive(1, &[2])).unwrap();
        assert!(matches!(q, BftqModel::Network(_)));
        assert_eq!(report.loss_traces.len(), 3);
        let mut buf = Vec::new();
        report.write_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 4);
    }

    #[test]
    fn policy_mixture_frequencies() {
        // Two actions at the same state: (cost 0, reward 0) and (1, 1); β = 0.3
        // mixes them with weight 0.3 on the second.
        let grid = BudgetGrid::from_values(vec![0.0, 0.3, 1.0]).unwrap();
        let q = GriddedQ::from_fn(1, 2, grid.clone(), |_, a, _| {
            VectorSignal::new(a as f64, a as f64)
        });
        let pi = policy_from_q(&q, &grid);
        let d = pi.decide(&[1.0], 0.3);
        assert!(!d.policy.is_dirac());
        let mut rng = seeded(11);
        let n = 10_000;
        let hits = (0..n)
            .filter(|_| pi.act(0, &[1.0], 0.3, &mut rng).action.action == 1)
            .count();
        let p = hits as f64 / n as f64;
        assert!((p - 0.3).abs() < 3.0 * (0.3f64 * 0.7 / n as f64).sqrt());
        let zero = MixturePolicy::new(
            AugmentedAction::new(0, 0.0),
            AugmentedAction::new(1, 0.0),
            0.0,
        )
        .unwrap();
        assert!((0..100).all(|_| zero.sample(&mut rng).action == 0));
    }
}

//! Risk-sensitive batch collection.
//!
//! Episodes start from a uniform budget; each step takes a random budgeted
//! action with probability ε and the current greedy action otherwise, and
//! the allocation becomes the next budget. The greedy model is retrained on
//! everything collected so far between minibatches.

use std::io::Write;

use rand::distr::weighted::WeightedIndex;
use rand::Rng as _;
use rand_distr::{Distribution, Exp1};
use serde::{Deserialize, Serialize};

use crate::batch::TransitionBatch;
use crate::bftq::{policy_from_q, BftqModel};
use crate::envs::Environment;
use crate::error::{domain, Error, Result};
use crate::grid::{BudgetGrid, BudgetSpace};
use crate::hull::grid_points;
use crate::mdp::{AugmentedAction, Transition};
use crate::par::parallel_map;
use crate::policy::BudgetedPolicy;
use crate::rng::{self, Rng};

/// Episodes simulated per parallel wave. Fixed so that the collected data
/// does not depend on the worker count.
pub const EPISODE_WAVE: usize = 32;

/// Rejection attempts of the Dirichlet sampler before it falls back.
const DIRICHLET_ATTEMPTS: usize = 1000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BudgetSampler {
    /// Uniform action, `β_a ~ U[β_min, min(2β − β_min, β_max)]`.
    Uniform,
    /// Flat Dirichlet weights over `A × B̃`, rejected until the expected
    /// allocation is within β.
    Dirichlet,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EpsilonUnit {
    Step,
    Episode,
    Minibatch,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExplorationMode {
    RiskSensitive,
    /// Ignores costs: random allocations span the whole budget space and the
    /// greedy action maximises `Q_r` alone.
    RiskNeutral,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExplorationConfig {
    pub total_samples: usize,
    pub minibatches: usize,
    pub epsilon_decay: f64,
    #[serde(default)]
    pub epsilon_floor: f64,
    #[serde(default = "default_sampler")]
    pub budget_sampler: BudgetSampler,
    #[serde(default = "default_unit")]
    pub epsilon_unit: EpsilonUnit,
    #[serde(default = "default_mode")]
    pub mode: ExplorationMode,
    #[serde(default = "one")]
    pub workers: usize,
}

fn default_sampler() -> BudgetSampler {
    BudgetSampler::Uniform
}
fn default_unit() -> EpsilonUnit {
    EpsilonUnit::Step
}
fn default_mode() -> ExplorationMode {
    ExplorationMode::RiskSensitive
}
fn one() -> usize {
    1
}

impl ExplorationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.total_samples == 0 || self.minibatches == 0 {
            return domain("sample and minibatch counts must be positive");
        }
        if !(self.epsilon_decay >= 0.0) {
            return domain("epsilon decay must be non-negative");
        }
        if !(0.0..=1.0).contains(&self.epsilon_floor) {
            return domain("epsilon floor must lie in [0, 1]");
        }
        if self.workers == 0 {
            return domain("workers must be at least 1");
        }
        Ok(())
    }

    /// `ε_k = max(floor, exp(−decay · k))`.
    pub fn epsilon(&self, k: usize) -> f64 {
        (-self.epsilon_decay * k as f64)
            .exp()
            .max(self.epsilon_floor)
    }

    /// Sample quota of minibatch `m`: equal shares, the last one truncated.
    pub fn minibatch_quota(&self, m: usize) -> usize {
        let share = self.total_samples.div_ceil(self.minibatches);
        share.min(self.total_samples.saturating_sub(share * m))
    }

    fn always_random(&self) -> bool {
        self.epsilon_floor >= 1.0
    }
}

pub fn sample_initial_budget(rng: &mut Rng, space: BudgetSpace) -> f64 {
    if space.width() == 0.0 {
        space.min
    } else {
        rng.random_range(space.min..=space.max)
    }
}

/// A random augmented action whose expected allocation does not exceed β.
pub fn sample_random_budgeted_action(
    n_actions: usize,
    beta: f64,
    space: BudgetSpace,
    grid: &BudgetGrid,
    sampler: BudgetSampler,
    rng: &mut Rng,
) -> AugmentedAction {
    match sampler {
        BudgetSampler::Uniform => {
            let action = rng.random_range(0..n_actions);
            let lo = space.min;
            let hi = (2.0 * beta - lo).min(space.max).max(lo);
            let budget = if hi > lo {
                rng.random_range(lo..=hi)
            } else {
                lo
            };
            AugmentedAction::new(action, budget)
        }
        BudgetSampler::Dirichlet => {
            let g = grid.values();
            let n = n_actions * g.len();
            for _ in 0..DIRICHLET_ATTEMPTS {
                let mut w: Vec<f64> = (0..n).map(|_| Exp1.sample(rng)).collect();
                let total: f64 = w.iter().sum();
                w.iter_mut().for_each(|x| *x /= total);
                let mean: f64 = w.iter().enumerate().map(|(j, x)| x * g[j % g.len()]).sum();
                if mean <= beta {
                    let j = WeightedIndex::new(&w)
                        .expect("weights are positive")
                        .sample(rng);
                    return AugmentedAction::new(j / g.len(), g[j % g.len()]);
                }
            }
            // Low budgets are almost never accepted; keep the constraint
            // exactly with the largest allocation not above β.
            let k = g.iter().rposition(|&b| b <= beta).unwrap_or(0);
            AugmentedAction::new(rng.random_range(0..n_actions), g[k])
        }
    }
}

/// Uniform action and allocation, budget ignored.
fn sample_risk_neutral_action(
    n_actions: usize,
    space: BudgetSpace,
    rng: &mut Rng,
) -> AugmentedAction {
    AugmentedAction::new(
        rng.random_range(0..n_actions),
        sample_initial_budget(rng, space),
    )
}

/// `argmax Q_r` over `A × B̃`, lowest cost among ties.
fn reward_greedy(model: &BftqModel, state: &[f64], grid: &BudgetGrid) -> AugmentedAction {
    let points = grid_points(model, state, grid.values());
    points
        .iter()
        .fold(None::<&crate::hull::QPoint>, |best, p| match best {
            Some(b) if b.reward > p.reward || (b.reward == p.reward && b.cost <= p.cost) => Some(b),
            _ => Some(p),
        })
        .expect("grid is non-empty")
        .origin
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExplorationLogRow {
    pub episode: usize,
    pub steps: usize,
    pub epsilon_at_start: f64,
    pub beta_0: f64,
    pub return_r: f64,
    pub return_c: f64,
}

pub fn write_exploration_log(
    rows: &[ExplorationLogRow],
    out: &mut impl Write,
) -> std::io::Result<()> {
    writeln!(
        out,
        "episode,steps,epsilon_at_start,beta_0,return_r,return_c"
    )?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            r.episode, r.steps, r.epsilon_at_start, r.beta_0, r.return_r, r.return_c
        )?;
    }
    Ok(())
}

#[derive(Debug)]
pub struct Collection {
    pub batch: TransitionBatch,
    pub log: Vec<ExplorationLogRow>,
    /// Number of trainings performed between minibatches.
    pub trainings: usize,
    /// Set when collection stopped early; `batch` holds what was gathered.
    pub error: Option<Error>,
}

struct Episode {
    transitions: Vec<Transition>,
    epsilon_at_start: f64,
    beta_0: f64,
}

struct Context<'a> {
    cfg: &'a ExplorationConfig,
    grid: &'a BudgetGrid,
    space: BudgetSpace,
    model: Option<&'a BftqModel>,
}

impl Context<'_> {
    fn run(
        &self,
        env: &mut dyn Environment,
        epsilon: &dyn Fn(usize) -> f64,
        rng: &mut Rng,
    ) -> Result<Episode> {
        let na = env.n_actions();
        let hull = self.model.map(|m| policy_from_q(m, self.grid));
        let beta_0 = sample_initial_budget(rng, self.space);
        let mut beta = beta_0;
        let mut state = env.reset(rng);
        let mut transitions = Vec::with_capacity(env.horizon());
        for t in 0..env.horizon() {
            let z: f64 = rng.random();
            let explore = self.model.is_none() || z < epsilon(t);
            let action = match (explore, self.cfg.mode) {
                (true, ExplorationMode::RiskSensitive) => sample_random_budgeted_action(
                    na,
                    beta,
                    self.space,
                    self.grid,
                    self.cfg.budget_sampler,
                    rng,
                ),
                (true, ExplorationMode::RiskNeutral) => {
                    sample_risk_neutral_action(na, self.space, rng)
                }
                (false, ExplorationMode::RiskSensitive) => {
                    hull.as_ref().unwrap().act(0, &state, beta, rng).action
                }
                (false, ExplorationMode::RiskNeutral) => {
                    reward_greedy(self.model.unwrap(), &state, self.grid)
                }
            };
            let out = env.step(action.action, rng)?;
            transitions.push(Transition {
                state,
                budget: beta,
                action,
                reward: out.reward,
                cost: out.cost,
                next_state: out.next_state.clone(),
                terminal: out.done,
            });
            beta = action.budget;
            state = out.next_state;
            if out.done {
                break;
            }
        }
        Ok(Episode {
            transitions,
            epsilon_at_start: if self.model.is_none() {
                1.0
            } else {
                epsilon(0)
            },
            beta_0,
        })
    }
}

/// Collects `cfg.total_samples` transitions in `cfg.minibatches` rounds.
/// `train` is called with everything collected so far between rounds
/// (never after the last one) and its model drives the next round's greedy
/// actions; before the first training every action is random. Episode `e`
/// draws from the stream `(seed, e)`.
pub fn collect_batch(
    env: &dyn Environment,
    cfg: &ExplorationConfig,
    grid: &BudgetGrid,
    space: BudgetSpace,
    seed: u64,
    train: &mut dyn FnMut(&TransitionBatch) -> Result<BftqModel>,
) -> Result<Collection> {
    cfg.validate()?;
    let mut out = Collection {
        batch: TransitionBatch::new(env.state_dim()),
        log: Vec::new(),
        trainings: 0,
        error: None,
    };
    let mut model: Option<BftqModel> = None;
    let mut next_episode = 0usize;
    for m in 0..cfg.minibatches {
        let quota = cfg.minibatch_quota(m);
        let target = out.batch.len() + quota;
        let ctx = Context {
            cfg,
            grid,
            space,
            model: model.as_ref(),
        };
        while out.batch.len() < target {
            let first = next_episode;
            let ids: Vec<usize> = (first..first + EPISODE_WAVE).collect();
            let before = out.batch.len();
            let episodes = parallel_map(&ids, cfg.workers, |_, &e| {
                let mut env = env.clone_box();
                let mut rng = rng::derive(seed, &[rng::domain::EXPLORATION, e as u64]);
                let eps = |t: usize| match cfg.epsilon_unit {
                    EpsilonUnit::Step => cfg.epsilon(before + t),
                    EpsilonUnit::Episode => cfg.epsilon(e),
                    EpsilonUnit::Minibatch => cfg.epsilon(m),
                };
                ctx.run(env.as_mut(), &eps, &mut rng)
            });
            next_episode += EPISODE_WAVE;
            for (e, ep) in ids.into_iter().zip(episodes) {
                let ep = match ep {
                    Ok(ep) => ep,
                    Err(err) => {
                        out.error = Some(err);
                        return Ok(out);
                    }
                };
                let room = target - out.batch.len();
                let kept = &ep.transitions[..ep.transitions.len().min(room)];
                out.log.push(ExplorationLogRow {
                    episode: e,
                    steps: kept.len(),
                    epsilon_at_start: ep.epsilon_at_start,
                    beta_0: ep.beta_0,
                    return_r: kept.iter().map(|t| t.reward).sum(),
                    return_c: kept.iter().map(|t| t.cost).sum(),
                });
                for t in kept {
                    out.batch.push(t.clone())?;
                }
                if out.batch.len() == target {
                    break;
                }
            }
        }
        if m + 1 < cfg.minibatches && !cfg.always_random() {
            match train(&out.batch) {
                Ok(q) => {
                    model = Some(q);
                    out.trainings += 1;
                }
                Err(err) => {
                    out.error = Some(err);
                    return Ok(out);
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::finite::{finite_chain_bmdp, FiniteEnv};
    use crate::envs::EnvStep;
    use crate::qfunc::{GriddedQ, ZeroQ};
    use crate::rng::seeded;
    use crate::VectorSignal;

    fn cfg(n: usize, decay: f64, floor: f64) -> ExplorationConfig {
        ExplorationConfig {
            total_samples: n,
            minibatches: 3,
            epsilon_decay: decay,
            epsilon_floor: floor,
            budget_sampler: BudgetSampler::Uniform,
            epsilon_unit: EpsilonUnit::Step,
            mode: ExplorationMode::RiskSensitive,
            workers: 1,
        }
    }

    fn unit_grid() -> BudgetGrid {
        BudgetGrid::uniform(BudgetSpace::unit(), 0.1).unwrap()
    }

    fn chain_env() -> FiniteEnv {
        FiniteEnv::new(finite_chain_bmdp(3, 0).unwrap(), 0, 7).unwrap()
    }

    #[test]
    fn schedule_and_quotas() {
        let c = cfg(10, 0.5, 0.1);
        assert_eq!(c.epsilon(0), 1.0);
        assert!((c.epsilon(2) - (-1.0f64).exp()).abs() < 1e-15);
        assert_eq!(c.epsilon(100), 0.1);
        assert_eq!(
            (0..3).map(|m| c.minibatch_quota(m)).collect::<Vec<_>>(),
            vec![4, 4, 2]
        );
    }

    #[test]
    fn initial_budget_moments() {
        let mut rng = seeded(1);
        let n = 100_000;
        let xs: Vec<f64> = (0..n)
            .map(|_| sample_initial_budget(&mut rng, BudgetSpace::unit()))
            .collect();
        assert!(xs.iter().all(|x| (0.0..=1.0).contains(x)));
        let mean = xs.iter().sum::<f64>() / n as f64;
        assert!((mean - 0.5).abs() < 3.0 * (1.0 / 12.0 / n as f64).sqrt());
        let point = BudgetSpace::new(0.3, 0.3).unwrap();
        assert_eq!(sample_initial_budget(&mut rng, point), 0.3);
    }

    #[test]
    fn random_allocation_respects_the_budget_in_expectation() {
        let mut rng = seeded(2);
        let grid = unit_grid();
        let space = BudgetSpace::unit();
        assert!((0..100).all(|_| sample_random_budgeted_action(
            4,
            0.0,
            space,
            &grid,
            BudgetSampler::Uniform,
            &mut rng
        )
        .budget
            == 0.0));
        let n = 100_000;
        let mut counts = [0usize; 4];
        let mut total = 0.0;
        for _ in 0..n {
            let a = sample_random_budgeted_action(
                4,
                0.4,
                space,
                &grid,
                BudgetSampler::Uniform,
                &mut rng,
            );
            assert!((0.0..=0.8).contains(&a.budget));
            counts[a.action] += 1;
            total += a.budget;
        }
        let mean = total / n as f64;
        let sd = 0.8 / 12f64.sqrt() / (n as f64).sqrt();
        assert!((mean - 0.4).abs() < 3.0 * sd);
        // Chi-square with 3 degrees of freedom at the 1% level.
        let expected = n as f64 / 4.0;
        let chi2: f64 = counts
            .iter()
            .map(|&c| (c as f64 - expected).powi(2) / expected)
            .sum();
        assert!(chi2 < 11.345, "chi2 {chi2}");
    }

    #[test]
    fn dirichlet_sampler_keeps_mean_allocation_within_budget() {
        let mut rng = seeded(3);
        let grid = BudgetGrid::uniform(BudgetSpace::unit(), 0.25).unwrap();
        let n = 20_000;
        let mean: f64 = (0..n)
            .map(|_| {
                sample_random_budgeted_action(
                    2,
                    0.45,
                    BudgetSpace::unit(),
                    &grid,
                    BudgetSampler::Dirichlet,
                    &mut rng,
                )
                .budget
            })
            .sum::<f64>()
            / n as f64;
        assert!(mean <= 0.45 + 0.01);
        let low = sample_random_budgeted_action(
            2,
            0.1,
            BudgetSpace::unit(),
            &grid,
            BudgetSampler::Dirichlet,
            &mut rng,
        );
        assert_eq!(low.budget, 0.0);
    }

    #[test]
    fn pure_exploration_needs_no_training() {
        let env = chain_env();
        let c = cfg(100, 0.0, 1.0);
        let mut calls = 0;
        let col = collect_batch(&env, &c, &unit_grid(), BudgetSpace::unit(), 5, &mut |_| {
            calls += 1;
            Ok(BftqModel::Zero(ZeroQ { n_actions: 2 }))
        })
        .unwrap();
        assert_eq!(calls, 0);
        assert_eq!(col.batch.len(), 100);
        assert!(col.error.is_none());
    }

    #[test]
    fn budgets_are_threaded_and_collection_is_worker_invariant() {
        let env = chain_env();
        let mut c = cfg(200, 0.01, 0.0);
        let mut trainer = |_: &TransitionBatch| {
            let q = GriddedQ::from_fn(3, 2, unit_grid(), |_, a, k| {
                VectorSignal::new(a as f64 + 0.1 * k as f64, a as f64 * 0.1 * k as f64)
            });
            Ok(BftqModel::Table(table_from(&q)))
        };
        let a =
            collect_batch(&env, &c, &unit_grid(), BudgetSpace::unit(), 9, &mut trainer).unwrap();
        c.workers = 4;
        let b =
            collect_batch(&env, &c, &unit_grid(), BudgetSpace::unit(), 9, &mut trainer).unwrap();
        assert_eq!(a.batch.to_bytes(), b.batch.to_bytes());
        assert_eq!(a.trainings, 2);
        let ts = a.batch.transitions();
        let mut start = 0;
        for row in &a.log {
            let ep = &ts[start..start + row.steps];
            assert_eq!(ep[0].budget, row.beta_0);
            for w in ep.windows(2) {
                assert_eq!(w[1].budget, w[0].action.budget);
                assert_eq!(w[1].state, w[0].next_state);
            }
            start += row.steps;
        }
        assert_eq!(start, ts.len());
        assert!(ts.iter().all(|t| (0.0..=1.0).contains(&t.action.budget)));
    }

    #[test]
    fn exploitation_follows_the_hull() {
        let env = chain_env();
        let grid = unit_grid();
        let q = GriddedQ::from_fn(3, 2, grid.clone(), |_, a, k| {
            VectorSignal::new(a as f64 * k as f64, a as f64 * 0.1 * k as f64)
        });
        let model = BftqModel::Table(table_from(&q));
        let c = ExplorationConfig {
            minibatches: 2,
            ..cfg(100, 1e9, 0.0)
        };
        let col = collect_batch(&env, &c, &grid, BudgetSpace::unit(), 4, &mut |_| {
            Ok(model.clone())
        })
        .unwrap();
        let pi = policy_from_q(&model, &grid);
        for t in &col.batch.transitions()[50..] {
            let d = pi.decide(&t.state, t.budget);
            assert!(t.action == d.policy.first || t.action == d.policy.second);
        }
    }

    #[derive(Clone)]
    struct Broken;

    impl Environment for Broken {
        fn clone_box(&self) -> Box<dyn Environment> {
            Box::new(self.clone())
        }
        fn state_dim(&self) -> usize {
            1
        }
        fn n_actions(&self) -> usize {
            1
        }
        fn gamma(&self) -> f64 {
            1.0
        }
        fn horizon(&self) -> usize {
            3
        }
        fn reset(&mut self, _: &mut Rng) -> Vec<f64> {
            vec![0.0]
        }
        fn step(&mut self, _: usize, _: &mut Rng) -> Result<EnvStep> {
            Err(Error::Environment("simulator fault".into()))
        }
    }

    #[test]
    fn faults_return_a_partial_batch() {
        let col = collect_batch(
            &Broken,
            &cfg(10, 0.0, 1.0),
            &unit_grid(),
            BudgetSpace::unit(),
            0,
            &mut |_| unreachable!(),
        )
        .unwrap();
        assert!(col.batch.is_empty());
        assert!(matches!(col.error, Some(Error::Environment(_))));
    }

    #[test]
    fn log_csv() {
        let rows = vec![ExplorationLogRow {
            episode: 0,
            steps: 2,
            epsilon_at_start: 1.0,
            beta_0: 0.5,
            return_r: 0.25,
            return_c: 0.0,
        }];
        let mut buf = Vec::new();
        write_exploration_log(&rows, &mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "episode,steps,epsilon_at_start,beta_0,return_r,return_c\n0,2,1,0.5,0.25,0\n"
        );
    }

    fn table_from(q: &GriddedQ) -> crate::regressor::TabularQ {
        use ndarray::{Array1, Array2};
        let grid = q.grid().clone();
        let ns = q.n_states();
        let mut states = Vec::new();
        let mut budgets = Vec::new();
        let mut actions = Vec::new();
        let mut targets = Vec::new();
        for s in 0..ns {
            for a in 0..2 {
                for (k, &b) in grid.values().iter().enumerate() {
                    states.extend(crate::qfunc::one_hot(s, ns));
                    budgets.push(b);
                    actions.push(a);
                    let v = q.get(s, a, k);
                    targets.extend([v.reward, v.cost]);
                }
            }
        }
        let n = actions.len();
        let samples = crate::regressor::Samples {
            states: Array2::from_shape_vec((n, ns), states).unwrap(),
            budgets: Array1::from(budgets),
            actions,
            targets: Array2::from_shape_vec((n, 2), targets).unwrap(),
        };
        crate::regressor::TabularQ::fit(&samples, 2, Some(grid)).unwrap()
    }
}

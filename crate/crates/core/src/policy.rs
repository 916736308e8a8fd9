//! Executable budgeted policies and Monte-Carlo evaluation.

use crate::dp::GreedyPolicy;
use crate::envs::Environment;
use crate::error::{domain, Error, Result};
use crate::mdp::AugmentedAction;
use crate::par::parallel_map;
use crate::qfunc::one_hot_index;
use crate::rng::{self, Rng};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PolicyStep {
    pub action: AugmentedAction,
    /// The budget was below every achievable cost.
    pub infeasible: bool,
}

/// A policy over augmented actions. The caller threads the returned
/// allocation as the next budget.
pub trait BudgetedPolicy: Sync {
    /// Draws per-episode randomisation, passed back to every `act` call of
    /// that episode. Step-randomised policies need none.
    fn begin_episode(&self, _rng: &mut Rng) -> usize {
        0
    }

    fn act(&self, episode: usize, state: &[f64], beta: f64, rng: &mut Rng) -> PolicyStep;
}

/// π_hull of a solved finite model, reading the state index from its
/// one-hot encoding.
impl BudgetedPolicy for GreedyPolicy {
    fn act(&self, _episode: usize, state: &[f64], beta: f64, rng: &mut Rng) -> PolicyStep {
        let d = self.decide(one_hot_index(state), beta);
        PolicyStep {
            action: d.policy.sample(rng),
            infeasible: d.infeasible,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeRecord {
    pub beta_0: f64,
    pub return_r: f64,
    pub return_c: f64,
    pub steps: usize,
    pub infeasible_steps: usize,
}

/// Runs one episode from `beta_0`, threading `β ← β_a`; returns are
/// discounted with the environment's γ.
pub fn rollout(
    env: &mut dyn Environment,
    policy: &dyn BudgetedPolicy,
    beta_0: f64,
    rng: &mut Rng,
) -> Result<EpisodeRecord> {
    let gamma = env.gamma();
    let episode = policy.begin_episode(rng);
    let mut state = env.reset(rng);
    let mut beta = beta_0;
    let mut rec = EpisodeRecord {
        beta_0,
        return_r: 0.0,
        return_c: 0.0,
        steps: 0,
        infeasible_steps: 0,
    };
    let mut discount = 1.0;
    for _ in 0..env.horizon() {
        let step = policy.act(episode, &state, beta, rng);
        let out = env.step(step.action.action, rng)?;
        rec.return_r += discount * out.reward;
        rec.return_c += discount * out.cost;
        rec.steps += 1;
        rec.infeasible_steps += usize::from(step.infeasible);
        discount *= gamma;
        beta = step.action.budget;
        state = out.next_state;
        if out.done {
            break;
        }
    }
    Ok(rec)
}

#[derive(Debug)]
pub struct Evaluation {
    pub beta: f64,
    pub mean_r: f64,
    pub mean_c: f64,
    /// Standard errors of the means.
    pub se_r: f64,
    pub se_c: f64,
    pub records: Vec<EpisodeRecord>,
    /// Set when an episode failed; `records` then holds the episodes before it.
    pub error: Option<Error>,
}

/// Sample mean and standard error of the mean.
pub fn mean_and_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// `n_traj` rollouts from `beta`, episode `i` seeded from `(seed, i)` so the
/// result does not depend on `workers`.
pub fn evaluate_policy(
    policy: &dyn BudgetedPolicy,
    env: &dyn Environment,
    beta: f64,
    n_traj: usize,
    seed: u64,
    workers: usize,
) -> Result<Evaluation> {
    if n_traj == 0 {
        return domain("at least one trajectory is required");
    }
    let ids: Vec<u64> = (0..n_traj as u64).collect();
    let outcomes = parallel_map(&ids, workers, |_, &i| {
        let mut env = env.clone_box();
        let mut rng = rng::derive(seed, &[rng::domain::EVALUATION, i]);
        rollout(env.as_mut(), policy, beta, &mut rng)
    });
    let mut records = Vec::with_capacity(n_traj);
    let mut error = None;
    for o in outcomes {
        match o {
            Ok(r) => records.push(r),
            Err(e) => {
                error = Some(e);
                break;
            }
        }
    }
    let r: Vec<f64> = records.iter().map(|x| x.return_r).collect();
    let c: Vec<f64> = records.iter().map(|x| x.return_c).collect();
    let (mean_r, se_r) = mean_and_se(&r);
    let (mean_c, se_c) = mean_and_se(&c);
    Ok(Evaluation {
        beta,
        mean_r,
        mean_c,
        se_r,
        se_c,
        records,
        error,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dp::{budgeted_value_iteration, BviOptions};
    use crate::envs::finite::{two_state_example, FiniteEnv};
    use crate::grid::{BudgetGrid, BudgetSpace};

    struct Fixed(usize);

    impl BudgetedPolicy for Fixed {
        fn act(&self, _: usize, _: &[f64], beta: f64, _: &mut Rng) -> PolicyStep {
            PolicyStep {
                action: AugmentedAction::new(self.0, beta),
                infeasible: false,
            }
        }
    }

    #[test]
    fn single_trajectory_means_equal_its_returns() {
        let env = FiniteEnv::new(two_state_example(0.0).unwrap(), 0, 1).unwrap();
        let ev = evaluate_policy(&Fixed(1), &env, 0.5, 1, 3, 1).unwrap();
        assert_eq!(ev.records.len(), 1);
        assert_eq!(ev.mean_r, ev.records[0].return_r);
        assert_eq!(ev.mean_c, ev.records[0].return_c);
        assert_eq!(ev.se_r, 0.0);
    }

    #[test]
    fn evaluation_is_worker_invariant() {
        let env = FiniteEnv::new(two_state_example(0.5).unwrap(), 0, 20).unwrap();
        let a = evaluate_policy(&Fixed(1), &env, 0.5, 50, 9, 1).unwrap();
        let b = evaluate_policy(&Fixed(1), &env, 0.5, 50, 9, 4).unwrap();
        assert_eq!(a.records, b.records);
        assert!(evaluate_policy(&Fixed(1), &env, 0.5, 0, 9, 1).is_err());
    }

    #[test]
    fn greedy_mixture_meets_its_budget() {
        let mdp = two_state_example(0.0).unwrap();
        let grid = BudgetGrid::uniform(BudgetSpace::unit(), 0.25).unwrap();
        let (q, _) = budgeted_value_iteration(&mdp, &grid, &BviOptions::default()).unwrap();
        let pi = GreedyPolicy::new(&q, 1);
        let env = FiniteEnv::new(mdp, 0, 1).unwrap();
        let ev = evaluate_policy(&pi, &env, 0.5, 4000, 1, 1).unwrap();
        assert!(ev.mean_c <= 0.5 + 2.0 * ev.se_c);
        assert!((ev.mean_r - 0.5).abs() < 3.0 * ev.se_r);
    }

    #[test]
    fn mean_and_standard_error() {
        let (m, se) = mean_and_se(&[1.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((se - 1.0).abs() < 1e-15);
    }
}

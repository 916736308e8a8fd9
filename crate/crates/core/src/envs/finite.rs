//! Small tabular models and an episodic wrapper around them.

use rand::Rng as _;

use super::{EnvStep, Environment};
use crate::error::{domain, Error, Result};
use crate::grid::BudgetSpace;
use crate::mdp::BudgetedMdp;
use crate::qfunc::{one_hot, one_hot_index};
use crate::rng::{self, Rng};

pub const SAFE: usize = 0;
pub const RISKY: usize = 1;

/// Transition probabilities are multiples of 1/8.
pub const PROBABILITY_UNIT: usize = 8;

/// Seeded two-action fixture. In every state action 0 is safe (reward in
/// [0, 0.5], no cost) and action 1 is risky (reward in [0.5, 1], cost in
/// [0.2, 1]). Each transition row spreads eight 1/8 units of mass over the
/// states, so probabilities are exact in binary. γ = 0.9, budgets in [0, 1].
pub fn finite_chain_bmdp(n_states: usize, seed: u64) -> Result<BudgetedMdp> {
    if n_states < 2 {
        return domain("the chain fixture needs at least two states");
    }
    let mut rng = rng::derive(seed, &[rng::domain::FIXTURE, n_states as u64]);
    let mut transition = Vec::with_capacity(n_states);
    let mut reward = Vec::with_capacity(n_states);
    let mut cost = Vec::with_capacity(n_states);
    for _ in 0..n_states {
        let mut rows = Vec::with_capacity(2);
        for _ in 0..2 {
            let mut row = vec![0.0; n_states];
            for _ in 0..PROBABILITY_UNIT {
                row[rng.random_range(0..n_states)] += 1.0 / PROBABILITY_UNIT as f64;
            }
            rows.push(row);
        }
        transition.push(rows);
        reward.push(vec![rng.random_range(0.0..0.5), rng.random_range(0.5..1.0)]);
        cost.push(vec![0.0, rng.random_range(0.2..1.0)]);
    }
    BudgetedMdp::new(transition, reward, cost, 0.9, BudgetSpace::unit())
}

/// Two states, two actions; a small model for the non-contraction witness.
pub fn two_state_example(gamma: f64) -> Result<BudgetedMdp> {
    BudgetedMdp::new(
        vec![
            vec![vec![1.0, 0.0], vec![0.5, 0.5]],
            vec![vec![0.0, 1.0], vec![0.5, 0.5]],
        ],
        vec![vec![0.0, 1.0], vec![0.2, 0.8]],
        vec![vec![0.0, 1.0], vec![0.0, 0.5]],
        gamma,
        BudgetSpace::unit(),
    )
}

/// Steps after which `γ^t` drops below 1e-12; a fixed 1000 when γ = 1.
pub fn truncation_horizon(gamma: f64) -> usize {
    if gamma >= 1.0 {
        1000
    } else if gamma <= 0.0 {
        1
    } else {
        ((1e-12f64).ln() / gamma.ln()).ceil() as usize
    }
}

/// Episodic view of a tabular model with one-hot states.
#[derive(Clone, Debug)]
pub struct FiniteEnv {
    mdp: BudgetedMdp,
    initial_state: usize,
    horizon: usize,
    state: usize,
    t: usize,
    done: bool,
}

impl FiniteEnv {
    pub fn new(mdp: BudgetedMdp, initial_state: usize, horizon: usize) -> Result<Self> {
        if initial_state >= mdp.n_states() {
            return domain("initial state out of range");
        }
        if horizon == 0 {
            return domain("horizon must be positive");
        }
        Ok(Self {
            mdp,
            initial_state,
            horizon,
            state: initial_state,
            t: 0,
            done: false,
        })
    }

    pub fn mdp(&self) -> &BudgetedMdp {
        &self.mdp
    }

    pub fn state_index(state: &[f64]) -> usize {
        one_hot_index(state)
    }
}

impl Environment for FiniteEnv {
    fn clone_box(&self) -> Box<dyn Environment> {
        Box::new(self.clone())
    }

    fn state_dim(&self) -> usize {
        self.mdp.n_states()
    }

    fn n_actions(&self) -> usize {
        self.mdp.n_actions()
    }

    fn gamma(&self) -> f64 {
        self.mdp.gamma()
    }

    fn horizon(&self) -> usize {
        self.horizon
    }

    fn reset(&mut self, _rng: &mut Rng) -> Vec<f64> {
        self.state = self.initial_state;
        self.t = 0;
        self.done = false;
        one_hot(self.state, self.mdp.n_states())
    }

    fn step(&mut self, action: usize, rng: &mut Rng) -> Result<EnvStep> {
        if self.done {
            return Err(Error::Environment("step after the episode ended".into()));
        }
        self.mdp.check_indices(self.state, action)?;
        let (reward, cost) = (
            self.mdp.reward(self.state, action),
            self.mdp.cost(self.state, action),
        );
        self.state = self.mdp.sample_next(self.state, action, rng);
        self.t += 1;
        self.done = self.t >= self.horizon || self.mdp.is_terminal(self.state);
        Ok(EnvStep {
            next_state: one_hot(self.state, self.mdp.n_states()),
            reward,
            cost,
            done: self.done,
        })
    }

    fn action_name(&self, action: usize) -> String {
        match action {
            SAFE => "safe".into(),
            RISKY => "risky".into(),
            a => format!("action_{a}"),
        }
    }
}

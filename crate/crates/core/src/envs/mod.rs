//! Simulated environments behind one episodic interface.

pub mod corridors;
pub mod finite;
pub mod slot_filling;

use serde::{Deserialize, Serialize};

pub use corridors::{CellKind, Corridors, CorridorsConfig};
pub use finite::{finite_chain_bmdp, FiniteEnv};
pub use slot_filling::{SlotFilling, SlotFillingConfig};

use crate::error::Result;
use crate::grid::BudgetSpace;
use crate::mdp::BudgetedMdp;
use crate::rng::Rng;

#[derive(Clone, Debug, PartialEq)]
pub struct EnvStep {
    pub next_state: Vec<f64>,
    pub reward: f64,
    pub cost: f64,
    pub done: bool,
}

/// Episodic simulator with real-vector states and discrete actions. One
/// instance runs one episode at a time; workers clone a prototype.
pub trait Environment: Send + Sync {
    fn state_dim(&self) -> usize;
    fn n_actions(&self) -> usize;
    fn gamma(&self) -> f64;
    fn horizon(&self) -> usize;
    fn reset(&mut self, rng: &mut Rng) -> Vec<f64>;
    fn step(&mut self, action: usize, rng: &mut Rng) -> Result<EnvStep>;
    fn clone_box(&self) -> Box<dyn Environment>;

    fn action_name(&self, action: usize) -> String {
        format!("action_{action}")
    }
}

/// Serializable environment selection; builds fresh instances on demand so
/// that every worker gets its own.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "kebab-case")]
pub enum EnvConfig {
    Corridors(CorridorsConfig),
    SlotFilling(SlotFillingConfig),
    /// The generated chain fixture.
    FiniteChain {
        #[serde(default = "default_chain_states")]
        n_states: usize,
        #[serde(default)]
        seed: u64,
        #[serde(default = "default_chain_gamma")]
        gamma: f64,
        #[serde(default)]
        horizon: Option<usize>,
    },
    /// A tabular model loaded from a JSON file.
    Finite {
        path: std::path::PathBuf,
        #[serde(default)]
        initial_state: usize,
        #[serde(default)]
        horizon: Option<usize>,
    },
}

fn default_chain_states() -> usize {
    3
}

fn default_chain_gamma() -> f64 {
    0.9
}

impl EnvConfig {
    /// The tabular model behind a finite environment.
    pub fn finite_model(&self) -> Result<Option<BudgetedMdp>> {
        Ok(match self {
            EnvConfig::FiniteChain {
                n_states,
                seed,
                gamma,
                ..
            } => Some(finite_chain_bmdp(*n_states, *seed)?.with_gamma(*gamma)?),
            EnvConfig::Finite { path, .. } => Some(BudgetedMdp::load(path)?),
            _ => None,
        })
    }

    pub fn build(&self) -> Result<Box<dyn Environment>> {
        Ok(match self {
            EnvConfig::Corridors(c) => Box::new(Corridors::new(c.clone())?),
            EnvConfig::SlotFilling(c) => Box::new(SlotFilling::new(c.clone())?),
            EnvConfig::FiniteChain { horizon, .. } => {
                let mdp = self.finite_model()?.unwrap();
                let h = horizon.unwrap_or_else(|| finite::truncation_horizon(mdp.gamma()));
                Box::new(FiniteEnv::new(mdp, 0, h)?)
            }
            EnvConfig::Finite {
                initial_state,
                horizon,
                ..
            } => {
                let mdp = self.finite_model()?.unwrap();
                let h = horizon.unwrap_or_else(|| finite::truncation_horizon(mdp.gamma()));
                Box::new(FiniteEnv::new(mdp, *initial_state, h)?)
            }
        })
    }

    pub fn budget_space(&self) -> Result<BudgetSpace> {
        Ok(match self.finite_model()? {
            Some(m) => m.budget_space(),
            None => BudgetSpace::unit(),
        })
    }
}

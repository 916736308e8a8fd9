//! Slot-filling dialogue simulation.
//!
//! The system fills `n_slots` slots either orally, where the user's answer is
//! misunderstood with probability `ser`, or through a numeric pad, which is
//! always correct but makes the user hang up with probability `hangup_prob`.
//! A speech recognition score `srs = logistic(x)`, `x ~ N(μ, σ)`, with μ set
//! by whether the answer was understood, is the only evidence the system
//! gets about oral answers.
//!
//! State: srs per slot (0 while unasked), one-hot argmin of srs, one-hot last
//! user act, one-hot last system act, and the turn fraction t / H.

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{EnvStep, Environment};
use crate::error::{domain, Error, Result};
use crate::rng::Rng;

pub const USER_ACTS: [&str; 3] = ["INFORM", "DENY_SUMMARIZE", "HANGUP"];

/// Field names follow the parameter table of the environment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SlotFillingConfig {
    pub n_slots: usize,
    pub ser: f64,
    pub mu_understand: f64,
    pub mu_misunderstand: f64,
    pub sigma: f64,
    pub hangup_prob: f64,
    pub episode_duration: usize,
    pub gamma: f64,
}

impl Default for SlotFillingConfig {
    fn default() -> Self {
        Self {
            n_slots: 3,
            ser: 0.6,
            mu_understand: 0.25,
            mu_misunderstand: -0.25,
            sigma: 0.6,
            hangup_prob: 0.25,
            episode_duration: 10,
            gamma: 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SystemAct {
    AskOral(usize),
    AskNumPad(usize),
    SummarizeAndInform,
}

#[derive(Clone, Debug)]
pub struct SlotFilling {
    cfg: SlotFillingConfig,
    understood: Normal<f64>,
    misunderstood: Normal<f64>,
    srs: Vec<Option<f64>>,
    correct: Vec<bool>,
    last_user: Option<usize>,
    last_system: Option<usize>,
    t: usize,
    done: bool,
}

pub fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl SlotFilling {
    pub fn new(cfg: SlotFillingConfig) -> Result<Self> {
        let probs = [cfg.ser, cfg.hangup_prob];
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::InvalidModel(
                "probabilities must lie in [0, 1]".into(),
            ));
        }
        if cfg.n_slots == 0 || cfg.episode_duration == 0 {
            return Err(Error::InvalidModel(
                "need at least one slot and one turn".into(),
            ));
        }
        let normal =
            |mu| Normal::new(mu, cfg.sigma).map_err(|e| Error::InvalidModel(e.to_string()));
        Ok(Self {
            understood: normal(cfg.mu_understand)?,
            misunderstood: normal(cfg.mu_misunderstand)?,
            srs: vec![None; cfg.n_slots],
            correct: vec![false; cfg.n_slots],
            last_user: None,
            last_system: None,
            t: 0,
            done: false,
            cfg,
        })
    }

    pub fn n_system_acts(&self) -> usize {
        2 * self.cfg.n_slots + 1
    }

    pub fn decode_action(&self, action: usize) -> Option<SystemAct> {
        let n = self.cfg.n_slots;
        match action {
            a if a < n => Some(SystemAct::AskOral(a)),
            a if a < 2 * n => Some(SystemAct::AskNumPad(a - n)),
            a if a == 2 * n => Some(SystemAct::SummarizeAndInform),
            _ => None,
        }
    }

    pub fn is_num_pad(&self, action: usize) -> bool {
        matches!(self.decode_action(action), Some(SystemAct::AskNumPad(_)))
    }

    pub fn slots_correct(&self) -> &[bool] {
        &self.correct
    }

    pub fn observe(&self) -> Vec<f64> {
        let n = self.cfg.n_slots;
        let mut s = Vec::with_capacity(self.state_dim());
        s.extend(self.srs.iter().map(|x| x.unwrap_or(0.0)));
        let mut argmin = vec![0.0; n];
        if self.srs.iter().any(Option::is_some) {
            let i = (0..n).fold(0, |b, i| {
                if self.srs[i].unwrap_or(0.0) < self.srs[b].unwrap_or(0.0) {
                    i
                } else {
                    b
                }
            });
            argmin[i] = 1.0;
        }
        s.extend(argmin);
        let mut user = vec![0.0; USER_ACTS.len()];
        if let Some(u) = self.last_user {
            user[u] = 1.0;
        }
        s.extend(user);
        let mut system = vec![0.0; self.n_system_acts()];
        if let Some(a) = self.last_system {
            system[a] = 1.0;
        }
        s.extend(system);
        s.push(self.t as f64 / self.cfg.episode_duration as f64);
        s
    }
}

impl Environment for SlotFilling {
    fn clone_box(&self) -> Box<dyn Environment> {
        Box::new(self.clone())
    }

    fn state_dim(&self) -> usize {
        2 * self.cfg.n_slots + USER_ACTS.len() + self.n_system_acts() + 1
    }

    fn n_actions(&self) -> usize {
        self.n_system_acts()
    }

    fn gamma(&self) -> f64 {
        self.cfg.gamma
    }

    fn horizon(&self) -> usize {
        self.cfg.episode_duration
    }

    fn reset(&mut self, _rng: &mut Rng) -> Vec<f64> {
        self.srs.fill(None);
        self.correct.fill(false);
        self.last_user = None;
        self.last_system = None;
        self.t = 0;
        self.done = false;
        self.observe()
    }

    fn step(&mut self, action: usize, rng: &mut Rng) -> Result<EnvStep> {
        if self.done {
            return Err(Error::Environment("step after the dialogue ended".into()));
        }
        let Some(act) = self.decode_action(action) else {
            return domain(format!("slot-filling action {action} out of range"));
        };
        self.t += 1;
        self.last_system = Some(action);
        let (mut reward, mut cost) = (0.0, 0.0);
        match act {
            SystemAct::AskOral(i) => {
                let ok = rng.random::<f64>() >= self.cfg.ser;
                let x = if ok {
                    self.understood.sample(rng)
                } else {
                    self.misunderstood.sample(rng)
                };
                self.srs[i] = Some(logistic(x));
                self.correct[i] = ok;
                self.last_user = Some(0);
            }
            SystemAct::AskNumPad(i) => {
                if rng.random::<f64>() < self.cfg.hangup_prob {
                    self.last_user = Some(2);
                    cost = 1.0;
                    self.done = true;
                } else {
                    self.srs[i] = Some(1.0);
                    self.correct[i] = true;
                    self.last_user = Some(0);
                }
            }
            SystemAct::SummarizeAndInform => {
                if self.correct.iter().all(|c| *c) {
                    reward = 1.0;
                    self.done = true;
                } else {
                    self.last_user = Some(1);
                }
            }
        }
        if self.t >= self.cfg.episode_duration {
            self.done = true;
        }
        Ok(EnvStep {
            next_state: self.observe(),
            reward,
            cost,
            done: self.done,
        })
    }

    fn action_name(&self, action: usize) -> String {
        match self.decode_action(action) {
            Some(SystemAct::AskOral(i)) => format!("ASK_ORAL({i})"),
            Some(SystemAct::AskNumPad(i)) => format!("ASK_NUM_PAD({i})"),
            Some(SystemAct::SummarizeAndInform) => "SUMMARIZE_AND_INFORM".into(),
            None => format!("action_{action}"),
        }
    }
}

use std::collections::HashMap;

use super::Samples;
use crate::error::{domain, Result};
use crate::grid::BudgetGrid;
use crate::mdp::VectorSignal;
use crate::qfunc::BiQFunction;

type Key = (Vec<u64>, usize, usize);

/// Exact lookup regressor over (state, action, allocation grid index).
/// Predicts the mean target of a key; unseen keys predict zero. Without a
/// grid the allocation is ignored.
#[derive(Clone, Debug, Default)]
pub struct TabularQ {
    grid: Option<BudgetGrid>,
    n_actions: usize,
    channels: usize,
    table: HashMap<Key, (Vec<f64>, usize)>,
}

impl TabularQ {
    pub fn fit(samples: &Samples, n_actions: usize, grid: Option<BudgetGrid>) -> Result<Self> {
        let channels = samples.targets.ncols();
        samples.validate(n_actions, channels)?;
        if grid.is_some() && samples.budgets.len() != samples.len() {
            return domain("one budget per sample is required");
        }
        let mut q = Self {
            grid,
            n_actions,
            channels,
            table: HashMap::new(),
        };
        for i in 0..samples.len() {
            let row = samples.states.row(i).to_vec();
            let key = q.key(
                &row,
                samples.actions[i],
                samples.budgets.get(i).copied().unwrap_or(0.0),
            );
            let entry = q
                .table
                .entry(key)
                .or_insert_with(|| (vec![0.0; channels], 0));
            for c in 0..channels {
                entry.0[c] += samples.targets[[i, c]];
            }
            entry.1 += 1;
        }
        Ok(q)
    }

    fn key(&self, state: &[f64], action: usize, allocation: f64) -> Key {
        let k = self.grid.as_ref().map_or(0, |g| g.snap(allocation).index);
        (state.iter().map(|x| x.to_bits()).collect(), action, k)
    }

    pub fn len(&self) -> usize {
        self.table.len()
    }

    pub fn is_empty(&self) -> bool {
        self.table.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Mean target per channel, zero for an unseen key.
    pub fn predict(&self, state: &[f64], action: usize, allocation: f64) -> Vec<f64> {
        match self.table.get(&self.key(state, action, allocation)) {
            Some((sum, n)) => sum.iter().map(|s| s / *n as f64).collect(),
            None => vec![0.0; self.channels],
        }
    }
}

impl BiQFunction for TabularQ {
    fn n_actions(&self) -> usize {
        self.n_actions
    }

    fn evaluate(&self, state: &[f64], allocation: f64) -> Vec<VectorSignal> {
        assert_eq!(self.channels, 2, "a two-channel table is required");
        (0..self.n_actions)
            .map(|a| {
                let v = self.predict(state, a, allocation);
                VectorSignal::new(v[0], v[1])
            })
            .collect()
    }
}

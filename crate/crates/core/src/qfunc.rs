//! Two-channel action-value functions.

use crate::error::{domain, Result};
use crate::grid::BudgetGrid;
use crate::mdp::{BudgetedMdp, VectorSignal};

/// `(Q_r, Q_c)` over augmented state-actions.
///
/// The value of `((s, β), (a, β_a))` does not depend on the current budget β:
/// the reward and transition of the underlying MDP ignore it and the next
/// budget is `β_a`. Implementations are therefore keyed by the state, the
/// allocation `β_a` and the action, and return every action at once.
pub trait BiQFunction: Send + Sync {
    fn n_actions(&self) -> usize;

    /// Values of all actions at `(state, allocation)`.
    fn evaluate(&self, state: &[f64], allocation: f64) -> Vec<VectorSignal>;

    /// Batched evaluation. Row `i` of the result (length `n_actions`) is the
    /// value of `(states[i], allocations[i])`.
    fn evaluate_batch(&self, states: &[&[f64]], allocations: &[f64]) -> Vec<VectorSignal> {
        states
            .iter()
            .zip(allocations)
            .flat_map(|(s, b)| self.evaluate(s, *b))
            .collect()
    }
}

/// Identically zero. The starting point of every fitted iteration.
#[derive(Clone, Copy, Debug)]
pub struct ZeroQ {
    pub n_actions: usize,
}

impl BiQFunction for ZeroQ {
    fn n_actions(&self) -> usize {
        self.n_actions
    }

    fn evaluate(&self, _state: &[f64], _allocation: f64) -> Vec<VectorSignal> {
        vec![VectorSignal::ZERO; self.n_actions]
    }
}

/// Index of a finite state from its one-hot encoding.
pub fn one_hot_index(state: &[f64]) -> usize {
    state
        .iter()
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

pub fn one_hot(index: usize, n: usize) -> Vec<f64> {
    let mut v = vec![0.0; n];
    v[index] = 1.0;
    v
}

/// Tabular Q over (state, action, allocation grid index).
#[derive(Clone, Debug, PartialEq)]
pub struct GriddedQ {
    n_states: usize,
    n_actions: usize,
    grid: BudgetGrid,
    values: Vec<VectorSignal>,
}

impl GriddedQ {
    pub fn zeros(n_states: usize, n_actions: usize, grid: BudgetGrid) -> Self {
        let n = n_states * n_actions * grid.len();
        Self {
            n_states,
            n_actions,
            grid,
            values: vec![VectorSignal::ZERO; n],
        }
    }

    pub fn from_fn(
        n_states: usize,
        n_actions: usize,
        grid: BudgetGrid,
        mut f: impl FnMut(usize, usize, usize) -> VectorSignal,
    ) -> Self {
        let nk = grid.len();
        let mut values = Vec::with_capacity(n_states * n_actions * nk);
        for s in 0..n_states {
            for a in 0..n_actions {
                for k in 0..nk {
                    values.push(f(s, a, k));
                }
            }
        }
        Self {
            n_states,
            n_actions,
            grid,
            values,
        }
    }

    pub fn from_values(
        n_states: usize,
        n_actions: usize,
        grid: BudgetGrid,
        values: Vec<VectorSignal>,
    ) -> Result<Self> {
        if values.len() != n_states * n_actions * grid.len() {
            return domain("value table does not match (states, actions, grid) shape");
        }
        if values.iter().any(|v| !v.is_finite()) {
            return domain("value table has non-finite entries");
        }
        Ok(Self {
            n_states,
            n_actions,
            grid,
            values,
        })
    }

    pub fn check_shape(&self, mdp: &BudgetedMdp) -> Result<()> {
        if self.n_states != mdp.n_states() || self.n_actions != mdp.n_actions() {
            return domain("Q table shape differs from the MDP");
        }
        Ok(())
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn grid(&self) -> &BudgetGrid {
        &self.grid
    }

    pub fn values(&self) -> &[VectorSignal] {
        &self.values
    }

    fn index(&self, s: usize, a: usize, k: usize) -> usize {
        (s * self.n_actions + a) * self.grid.len() + k
    }

    pub fn get(&self, s: usize, a: usize, k: usize) -> VectorSignal {
        self.values[self.index(s, a, k)]
    }

    pub fn set(&mut self, s: usize, a: usize, k: usize, v: VectorSignal) {
        let i = self.index(s, a, k);
        self.values[i] = v;
    }

    /// Sup-norm distance over both channels.
    pub fn sup_dist(&self, other: &GriddedQ) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .fold(0.0, |m, (a, b)| m.max(a.sup_dist(b)))
    }

    /// Per-channel sup-norm distances `(reward, cost)`.
    pub fn channel_dist(&self, other: &GriddedQ) -> (f64, f64) {
        self.values
            .iter()
            .zip(&other.values)
            .fold((0.0, 0.0), |(r, c), (a, b)| {
                (
                    r.max((a.reward - b.reward).abs()),
                    c.max((a.cost - b.cost).abs()),
                )
            })
    }
}

impl BiQFunction for GriddedQ {
    fn n_actions(&self) -> usize {
        self.n_actions
    }

    fn evaluate(&self, state: &[f64], allocation: f64) -> Vec<VectorSignal> {
        let s = one_hot_index(state);
        let k = self.grid.snap(allocation).index;
        (0..self.n_actions).map(|a| self.get(s, a, k)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::BudgetSpace;

    #[test]
    fn gridded_lookup_decodes_one_hot() {
        let grid = BudgetGrid::uniform(BudgetSpace::unit(), 0.5).unwrap();
        let q = GriddedQ::from_fn(3, 2, grid, |s, a, k| {
            VectorSignal::new(s as f64, (10 * a + k) as f64)
        });
        let v = q.evaluate(&one_hot(2, 3), 0.49);
        assert_eq!(
            v,
            vec![VectorSignal::new(2.0, 1.0), VectorSignal::new(2.0, 11.0)]
        );
        let batch = q.evaluate_batch(&[&one_hot(0, 3), &one_hot(1, 3)], &[0.0, 1.0]);
        assert_eq!(batch.len(), 4);
        assert_eq!(batch[3], VectorSignal::new(1.0, 12.0));
    }

    #[test]
    fn zero_q_is_zero() {
        let z = ZeroQ { n_actions: 3 };
        assert_eq!(z.evaluate(&[0.3], 0.2), vec![VectorSignal::ZERO; 3]);
    }

    #[test]
    fn from_values_checks_shape() {
        let grid = BudgetGrid::from_values(vec![0.0, 1.0]).unwrap();
        assert!(GriddedQ::from_values(1, 1, grid.clone(), vec![VectorSignal::ZERO]).is_err());
        assert!(
            GriddedQ::from_values(1, 1, grid, vec![VectorSignal::new(f64::NAN, 0.0); 2]).is_err()
        );
    }
}

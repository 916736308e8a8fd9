//! Budgeted MDP domain model: augmented spaces, vector signals, mixture
//! policies, returns and the budgeted Bellman expectation operator.

use std::ops::{Add, Mul};
use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};
use crate::grid::{BudgetGrid, BudgetSpace};
use crate::qfunc::GriddedQ;
use crate::rng::Rng;

/// A (reward, cost) pair. Used for immediate signals, returns and values.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct VectorSignal {
    pub reward: f64,
    pub cost: f64,
}

impl VectorSignal {
    pub const ZERO: VectorSignal = VectorSignal {
        reward: 0.0,
        cost: 0.0,
    };

    pub fn new(reward: f64, cost: f64) -> Self {
        Self { reward, cost }
    }

    pub fn is_finite(&self) -> bool {
        self.reward.is_finite() && self.cost.is_finite()
    }

    /// `(1 - p) * a + p * b`, componentwise. Every place that takes the
    /// expectation of a two-point mixture goes through here.
    pub fn mix(a: VectorSignal, b: VectorSignal, p: f64) -> VectorSignal {
        VectorSignal {
            reward: (1.0 - p) * a.reward + p * b.reward,
            cost: (1.0 - p) * a.cost + p * b.cost,
        }
    }

    /// Largest absolute componentwise difference.
    pub fn sup_dist(&self, other: &VectorSignal) -> f64 {
        (self.reward - other.reward)
            .abs()
            .max((self.cost - other.cost).abs())
    }
}

impl Add for VectorSignal {
    type Output = VectorSignal;
    fn add(self, o: VectorSignal) -> VectorSignal {
        VectorSignal::new(self.reward + o.reward, self.cost + o.cost)
    }
}

impl Mul<VectorSignal> for f64 {
    type Output = VectorSignal;
    fn mul(self, v: VectorSignal) -> VectorSignal {
        VectorSignal::new(self * v.reward, self * v.cost)
    }
}

/// Environment state paired with the budget currently in force.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentedState<S> {
    pub state: S,
    pub budget: f64,
    /// Set when construction had to clamp the budget into the budget space.
    pub clamped: bool,
}

impl<S> AugmentedState<S> {
    pub fn new(state: S, budget: f64, space: &BudgetSpace) -> Self {
        let (budget, clamped) = space.clamp(budget);
        Self {
            state,
            budget,
            clamped,
        }
    }
}

/// An action together with the budget it allocates to the next step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentedAction {
    pub action: usize,
    pub budget: f64,
}

impl AugmentedAction {
    pub fn new(action: usize, budget: f64) -> Self {
        Self { action, budget }
    }
}

/// `(1 - weight) * δ(first) + weight * δ(second)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixturePolicy {
    pub first: AugmentedAction,
    pub second: AugmentedAction,
    pub weight: f64,
}

impl MixturePolicy {
    pub fn dirac(a: AugmentedAction) -> Self {
        Self {
            first: a,
            second: a,
            weight: 0.0,
        }
    }

    pub fn new(first: AugmentedAction, second: AugmentedAction, weight: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&weight) {
            return domain(format!("mixture weight {weight} outside [0, 1]"));
        }
        Ok(Self {
            first,
            second,
            weight,
        })
    }

    pub fn is_dirac(&self) -> bool {
        self.weight == 0.0 || self.weight == 1.0 || self.first == self.second
    }

    pub fn sample(&self, rng: &mut Rng) -> AugmentedAction {
        if self.weight > 0.0 && rng.random::<f64>() < self.weight {
            self.second
        } else {
            self.first
        }
    }

    /// Expectation of `f` under the mixture.
    pub fn expect(&self, mut f: impl FnMut(&AugmentedAction) -> VectorSignal) -> VectorSignal {
        VectorSignal::mix(f(&self.first), f(&self.second), self.weight)
    }
}

/// One observed step in augmented space. The next budget is not stored: it
/// is always the allocation of the action taken.
#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub state: Vec<f64>,
    pub budget: f64,
    pub action: AugmentedAction,
    pub reward: f64,
    pub cost: f64,
    pub next_state: Vec<f64>,
    pub terminal: bool,
}

impl Transition {
    pub fn aug_state(&self) -> AugmentedState<&[f64]> {
        AugmentedState {
            state: &self.state,
            budget: self.budget,
            clamped: false,
        }
    }

    pub fn next_aug_state(&self) -> AugmentedState<&[f64]> {
        AugmentedState {
            state: &self.next_state,
            budget: self.action.budget,
            clamped: false,
        }
    }

    pub fn signal(&self) -> VectorSignal {
        VectorSignal::new(self.reward, self.cost)
    }
}

#[derive(Deserialize, Serialize)]
struct MdpFile {
    n_states: usize,
    n_actions: usize,
    transition: Vec<Vec<Vec<f64>>>,
    reward: Vec<Vec<f64>>,
    cost: Vec<Vec<f64>>,
    gamma: f64,
    budget_min: f64,
    budget_max: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    terminal: Option<Vec<bool>>,
}

/// Finite budgeted MDP. Tables are stored flat in row-major order.
#[derive(Clone, Debug, PartialEq)]
pub struct BudgetedMdp {
    n_states: usize,
    n_actions: usize,
    transition: Vec<f64>,
    reward: Vec<f64>,
    cost: Vec<f64>,
    gamma: f64,
    budget_space: BudgetSpace,
    terminal: Vec<bool>,
}

impl BudgetedMdp {
    /// `transition[s][a][s']`, `reward[s][a]`, `cost[s][a]`.
    pub fn new(
        transition: Vec<Vec<Vec<f64>>>,
        reward: Vec<Vec<f64>>,
        cost: Vec<Vec<f64>>,
        gamma: f64,
        budget_space: BudgetSpace,
    ) -> Result<Self> {
        let n_states = transition.len();
        let n_actions = transition.first().map_or(0, Vec::len);
        Self::from_file(MdpFile {
            n_states,
            n_actions,
            transition,
            reward,
            cost,
            gamma,
            budget_min: budget_space.min,
            budget_max: budget_space.max,
            terminal: None,
        })
    }

    /// Marks states whose continuation value is zero.
    pub fn with_terminal(mut self, terminal: Vec<bool>) -> Result<Self> {
        if terminal.len() != self.n_states {
            return Err(Error::InvalidModel("terminal mask has wrong length".into()));
        }
        self.terminal = terminal;
        Ok(self)
    }

    fn from_file(f: MdpFile) -> Result<Self> {
        let invalid = |m: String| Err(Error::InvalidModel(m));
        let (ns, na) = (f.n_states, f.n_actions);
        if ns == 0 || na == 0 {
            return invalid("n_states and n_actions must be positive".into());
        }
        if !(0.0..=1.0).contains(&f.gamma) {
            return invalid(format!("gamma {} outside [0, 1]", f.gamma));
        }
        let budget_space = BudgetSpace::new(f.budget_min, f.budget_max)
            .map_err(|e| Error::InvalidModel(e.to_string()))?;
        if f.transition.len() != ns || f.reward.len() != ns || f.cost.len() != ns {
            return invalid("table row count differs from n_states".into());
        }
        let mut transition = Vec::with_capacity(ns * na * ns);
        let mut reward = Vec::with_capacity(ns * na);
        let mut cost = Vec::with_capacity(ns * na);
        for s in 0..ns {
            if f.transition[s].len() != na || f.reward[s].len() != na || f.cost[s].len() != na {
                return invalid(format!("state {s}: action count differs from n_actions"));
            }
            for a in 0..na {
                let row = &f.transition[s][a];
                if row.len() != ns {
                    return invalid(format!("P({s},{a}) has {} entries", row.len()));
                }
                if row.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
                    return invalid(format!("P({s},{a}) has a negative or non-finite entry"));
                }
                let total: f64 = row.iter().sum();
                if (total - 1.0).abs() > 1e-12 {
                    return invalid(format!("P({s},{a}) sums to {total}"));
                }
                transition.extend_from_slice(row);
                let (r, c) = (f.reward[s][a], f.cost[s][a]);
                if !(r.is_finite() && c.is_finite()) {
                    return invalid(format!("non-finite reward or cost at ({s},{a})"));
                }
                reward.push(r);
                cost.push(c);
            }
        }
        let terminal = f.terminal.unwrap_or_else(|| vec![false; ns]);
        if terminal.len() != ns {
            return invalid("terminal mask has wrong length".into());
        }
        Ok(Self {
            n_states: ns,
            n_actions: na,
            transition,
            reward,
            cost,
            gamma: f.gamma,
            budget_space,
            terminal,
        })
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        Self::from_file(serde_json::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> Result<String> {
        let (ns, na) = (self.n_states, self.n_actions);
        let f = MdpFile {
            n_states: ns,
            n_actions: na,
            transition: (0..ns)
                .map(|s| {
                    (0..na)
                        .map(|a| self.next_distribution(s, a).to_vec())
                        .collect()
                })
                .collect(),
            reward: (0..ns)
                .map(|s| (0..na).map(|a| self.reward(s, a)).collect())
                .collect(),
            cost: (0..ns)
                .map(|s| (0..na).map(|a| self.cost(s, a)).collect())
                .collect(),
            gamma: self.gamma,
            budget_min: self.budget_space.min,
            budget_max: self.budget_space.max,
            terminal: self
                .terminal
                .iter()
                .any(|t| *t)
                .then(|| self.terminal.clone()),
        };
        Ok(serde_json::to_string_pretty(&f)?)
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }
    pub fn n_actions(&self) -> usize {
        self.n_actions
    }
    pub fn gamma(&self) -> f64 {
        self.gamma
    }
    pub fn budget_space(&self) -> BudgetSpace {
        self.budget_space
    }
    pub fn is_terminal(&self, s: usize) -> bool {
        self.terminal[s]
    }

    pub fn with_gamma(mut self, gamma: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&gamma) {
            return domain(format!("gamma {gamma} outside [0, 1]"));
        }
        self.gamma = gamma;
        Ok(self)
    }

    pub fn next_distribution(&self, s: usize, a: usize) -> &[f64] {
        let base = (s * self.n_actions + a) * self.n_states;
        &self.transition[base..base + self.n_states]
    }

    pub fn reward(&self, s: usize, a: usize) -> f64 {
        self.reward[s * self.n_actions + a]
    }

    pub fn cost(&self, s: usize, a: usize) -> f64 {
        self.cost[s * self.n_actions + a]
    }

    pub fn signal(&self, s: usize, a: usize) -> VectorSignal {
        VectorSignal::new(self.reward(s, a), self.cost(s, a))
    }

    pub fn check_indices(&self, s: usize, a: usize) -> Result<()> {
        if s >= self.n_states {
            return domain(format!(
                "state {s} out of range (n_states = {})",
                self.n_states
            ));
        }
        if a >= self.n_actions {
            return domain(format!(
                "action {a} out of range (n_actions = {})",
                self.n_actions
            ));
        }
        Ok(())
    }

    /// Draws s' ~ P(.|s, a).
    pub fn sample_next(&self, s: usize, a: usize, rng: &mut Rng) -> usize {
        let u: f64 = rng.random();
        let row = self.next_distribution(s, a);
        let mut acc = 0.0;
        for (sp, p) in row.iter().enumerate() {
            acc += p;
            if u < acc {
                return sp;
            }
        }
        // Rounding left u above the accumulated mass: fall back to the last
        // state with positive probability.
        row.iter().rposition(|p| *p > 0.0).unwrap_or(0)
    }
}

/// Samples the augmented successor: the state follows P, the budget is the
/// allocation carried by the action.
pub fn augmented_transition_sample(
    mdp: &BudgetedMdp,
    s: &AugmentedState<usize>,
    a: &AugmentedAction,
    rng: &mut Rng,
) -> Result<AugmentedState<usize>> {
    mdp.check_indices(s.state, a.action)?;
    if !mdp.budget_space().contains(a.budget) {
        return domain(format!("allocation {} outside the budget space", a.budget));
    }
    Ok(AugmentedState {
        state: mdp.sample_next(s.state, a.action, rng),
        budget: a.budget,
        clamped: false,
    })
}

/// `(Σ γ^t r_t, Σ γ^t c_t)`, accumulated in time order.
pub fn discounted_return(trajectory: &[VectorSignal], gamma: f64) -> VectorSignal {
    let mut total = VectorSignal::ZERO;
    let mut discount = 1.0;
    for s in trajectory {
        total.reward += discount * s.reward;
        total.cost += discount * s.cost;
        discount *= gamma;
    }
    total
}

/// Counters gathered while applying a backup.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct BackupStats {
    /// Next-state cells whose budget lay below every achievable cost.
    pub infeasible: usize,
    /// Policy allocations that had to be projected onto the grid.
    pub off_grid: usize,
}

/// Applies `R + γ Σ P V` where `v[s' * K + k]` is the continuation value of
/// the augmented state (s', grid[k]). Terminal states continue with zero.
pub(crate) fn backup_from_values(
    mdp: &BudgetedMdp,
    grid: &BudgetGrid,
    v: &[VectorSignal],
) -> GriddedQ {
    let (ns, na, nk) = (mdp.n_states(), mdp.n_actions(), grid.len());
    let gamma = mdp.gamma();
    let mut values = Vec::with_capacity(ns * na * nk);
    for s in 0..ns {
        for a in 0..na {
            let row = mdp.next_distribution(s, a);
            let r = mdp.signal(s, a);
            for k in 0..nk {
                let mut cont = VectorSignal::ZERO;
                for (sp, &p) in row.iter().enumerate() {
                    if p == 0.0 || mdp.is_terminal(sp) {
                        continue;
                    }
                    let x = v[sp * nk + k];
                    cont.reward += p * x.reward;
                    cont.cost += p * x.cost;
                }
                values.push(r + gamma * cont);
            }
        }
    }
    GriddedQ::from_values(ns, na, grid.clone(), values).expect("backup preserves the table shape")
}

/// `T^π q` on the grid. The policy maps (state, budget) to a mixture; any
/// allocation it emits off the grid is projected onto the nearest grid point
/// and counted.
pub fn bellman_expectation_backup(
    mdp: &BudgetedMdp,
    policy: &dyn Fn(usize, f64) -> MixturePolicy,
    q: &GriddedQ,
) -> Result<(GriddedQ, BackupStats)> {
    q.check_shape(mdp)?;
    let grid = q.grid();
    let nk = grid.len();
    let mut stats = BackupStats::default();
    let mut v = Vec::with_capacity(mdp.n_states() * nk);
    for sp in 0..mdp.n_states() {
        for k in 0..nk {
            let mix = policy(sp, grid.get(k));
            let mut lookup = |a: &AugmentedAction| {
                let snapped = grid.snap(a.budget);
                if snapped.off_grid {
                    stats.off_grid += 1;
                }
                q.get(sp, a.action, snapped.index)
            };
            v.push(mix.expect(&mut lookup));
        }
    }
    if stats.off_grid > 0 {
        log::warn!(
            "{} policy allocations projected onto the budget grid",
            stats.off_grid
        );
    }
    Ok((backup_from_values(mdp, grid, &v), stats))
}

/// Outcome of iterating the expectation operator to its fixed point.
#[derive(Clone, Debug)]
pub struct PolicyEvaluation {
    pub q: GriddedQ,
    pub iterations: usize,
    pub residual: f64,
    pub initial_residual: f64,
}

/// Iterates `T^π` from zero until the sup-norm change drops below `tol`.
pub fn policy_evaluation(
    mdp: &BudgetedMdp,
    policy: &dyn Fn(usize, f64) -> MixturePolicy,
    grid: &BudgetGrid,
    tol: f64,
    max_iters: usize,
) -> Result<PolicyEvaluation> {
    if !(tol > 0.0) {
        return domain("tolerance must be positive");
    }
    let mut q = GriddedQ::zeros(mdp.n_states(), mdp.n_actions(), grid.clone());
    let mut initial_residual = f64::NAN;
    let mut residual = f64::INFINITY;
    for it in 1..=max_iters {
        let (next, _) = bellman_expectation_backup(mdp, policy, &q)?;
        residual = next.sup_dist(&q);
        if it == 1 {
            initial_residual = residual;
        }
        q = next;
        if residual < tol {
            return Ok(PolicyEvaluation {
                q,
                iterations: it,
                residual,
                initial_residual,
            });
        }
    }
    Err(Error::NotConverged {
        iterations: max_iters,
        residual,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn single() -> BudgetedMdp {
        BudgetedMdp::new(
            vec![vec![vec![1.0]]],
            vec![vec![1.0]],
            vec![vec![0.0]],
            0.5,
            BudgetSpace::unit(),
        )
        .unwrap()
    }

    #[test]
    fn returns() {
        let t = [VectorSignal::new(1.0, 0.0), VectorSignal::new(1.0, 1.0)];
        assert_eq!(discounted_return(&t, 0.5), VectorSignal::new(1.5, 0.5));
        assert_eq!(discounted_return(&[], 0.3), VectorSignal::ZERO);
        let h = vec![VectorSignal::new(1.0, 1.0); 7];
        assert_eq!(discounted_return(&h, 1.0), VectorSignal::new(7.0, 7.0));
    }

    #[test]
    fn deterministic_transition_keeps_allocation() {
        let mdp = BudgetedMdp::new(
            vec![vec![vec![0.0, 1.0]], vec![vec![0.0, 1.0]]],
            vec![vec![0.0], vec![0.0]],
            vec![vec![0.0], vec![0.0]],
            0.9,
            BudgetSpace::unit(),
        )
        .unwrap();
        let mut rng = seeded(1);
        let s = AugmentedState::new(0, 0.7, &mdp.budget_space());
        for beta in [0.3, 1.0] {
            let next =
                augmented_transition_sample(&mdp, &s, &AugmentedAction::new(0, beta), &mut rng)
                    .unwrap();
            assert_eq!(next.state, 1);
            assert_eq!(next.budget.to_bits(), beta.to_bits());
        }
        assert!(
            augmented_transition_sample(&mdp, &s, &AugmentedAction::new(3, 0.1), &mut rng).is_err()
        );
        let bad = AugmentedState::new(9, 0.1, &mdp.budget_space());
        assert!(
            augmented_transition_sample(&mdp, &bad, &AugmentedAction::new(0, 0.1), &mut rng)
                .is_err()
        );
    }

    #[test]
    fn clamping_is_recorded() {
        let s = AugmentedState::new(0usize, 1.4, &BudgetSpace::unit());
        assert!(s.clamped);
        assert_eq!(s.budget, 1.0);
    }

    #[test]
    fn rejects_non_stochastic_rows() {
        let r = BudgetedMdp::new(
            vec![vec![vec![0.5, 0.4]], vec![vec![1.0, 0.0]]],
            vec![vec![0.0]; 2],
            vec![vec![0.0]; 2],
            0.9,
            BudgetSpace::unit(),
        );
        assert!(matches!(r, Err(Error::InvalidModel(_))));
        let r = BudgetedMdp::new(
            vec![vec![vec![1.0]]],
            vec![vec![f64::NAN]],
            vec![vec![0.0]],
            0.9,
            BudgetSpace::unit(),
        );
        assert!(r.is_err());
        let r = BudgetedMdp::new(
            vec![vec![vec![1.0]]],
            vec![vec![0.0]],
            vec![vec![0.0]],
            1.5,
            BudgetSpace::unit(),
        );
        assert!(r.is_err());
    }

    #[test]
    fn json_round_trip() {
        let mdp = single().with_terminal(vec![true]).unwrap();
        let text = mdp.to_json().unwrap();
        assert_eq!(BudgetedMdp::from_json_str(&text).unwrap(), mdp);
    }

    #[test]
    fn one_backup_and_fixed_point() {
        let mdp = single();
        let grid = BudgetGrid::uniform(BudgetSpace::unit(), 0.5).unwrap();
        let pol = |_s: usize, b: f64| MixturePolicy::dirac(AugmentedAction::new(0, b));
        let q0 = GriddedQ::zeros(1, 1, grid.clone());
        let (q1, _) = bellman_expectation_backup(&mdp, &pol, &q0).unwrap();
        assert!(q1
            .values()
            .iter()
            .all(|v| *v == VectorSignal::new(1.0, 0.0)));
        let pe = policy_evaluation(&mdp, &pol, &grid, 1e-12, 1000).unwrap();
        assert!((pe.q.get(0, 0, 1).reward - 2.0).abs() < 1e-11);
    }

    #[test]
    fn gamma_zero_converges_after_one_step() {
        let mdp = single().with_gamma(0.0).unwrap();
        let grid = BudgetGrid::uniform(BudgetSpace::unit(), 0.5).unwrap();
        let pol = |_s: usize, b: f64| MixturePolicy::dirac(AugmentedAction::new(0, b));
        // The first sweep moves Q from zero to R; the second confirms it.
        let pe = policy_evaluation(&mdp, &pol, &grid, 1e-10, 10).unwrap();
        assert_eq!(pe.iterations, 2);
        assert_eq!(pe.q.get(0, 0, 0), VectorSignal::new(1.0, 0.0));
    }

    #[test]
    fn non_convergence_is_an_error() {
        let mdp = single().with_gamma(0.99).unwrap();
        let grid = BudgetGrid::from_values(vec![0.0]).unwrap();
        let pol = |_s: usize, b: f64| MixturePolicy::dirac(AugmentedAction::new(0, b));
        match policy_evaluation(&mdp, &pol, &grid, 1e-12, 5) {
            Err(Error::NotConverged {
                iterations: 5,
                residual,
            }) => assert!(residual > 0.0),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn off_grid_allocations_are_counted() {
        let mdp = single();
        let grid = BudgetGrid::uniform(BudgetSpace::unit(), 0.5).unwrap();
        let pol = |_s: usize, _b: f64| MixturePolicy::dirac(AugmentedAction::new(0, 0.26));
        let q0 = GriddedQ::zeros(1, 1, grid);
        let (_, stats) = bellman_expectation_backup(&mdp, &pol, &q0).unwrap();
        assert_eq!(stats.off_grid, 3 * 2);
    }

    #[test]
    fn mixture_sampling_and_expectation() {
        let a = AugmentedAction::new(0, 0.1);
        let b = AugmentedAction::new(1, 0.9);
        assert!(MixturePolicy::new(a, b, 1.2).is_err());
        let m = MixturePolicy::new(a, b, 0.0).unwrap();
        let mut rng = seeded(3);
        assert!((0..100).all(|_| m.sample(&mut rng) == a));
        let m = MixturePolicy::new(a, b, 0.25).unwrap();
        let v = m.expect(|x| VectorSignal::new(x.action as f64, x.budget));
        assert!((v.reward - 0.25).abs() < 1e-15);
        assert!((v.cost - 0.3).abs() < 1e-15);
    }
}

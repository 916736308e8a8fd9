//! Budgeted Bellman optimality operator, budgeted value iteration and the
//! non-contraction witness.

use std::io::Write;

use crate::error::{domain, Result};
use crate::grid::{BudgetGrid, BudgetSpace};
use crate::hull::{
    candidate_points, enumerate_actions, prune_dominated, top_frontier, HullDecision, HullFrontier,
    QPoint,
};
use crate::mdp::{
    backup_from_values, AugmentedAction, BackupStats, BudgetedMdp, MixturePolicy, Transition,
    VectorSignal,
};
use crate::par::parallel_map;
use crate::qfunc::{BiQFunction, GriddedQ};

/// Greedy policy of a tabular Q: one frontier per state, built once and
/// queried at any budget.
#[derive(Clone, Debug)]
pub struct GreedyPolicy {
    frontiers: Vec<HullFrontier>,
}

impl GreedyPolicy {
    pub fn new(q: &GriddedQ, workers: usize) -> Self {
        let states: Vec<usize> = (0..q.n_states()).collect();
        let grid = q.grid();
        let frontiers = parallel_map(&states, workers, |_, &s| {
            let mut points = Vec::with_capacity(q.n_actions() * grid.len());
            for a in 0..q.n_actions() {
                for (k, &b) in grid.values().iter().enumerate() {
                    points.push(QPoint::new(q.get(s, a, k), AugmentedAction::new(a, b)));
                }
            }
            top_frontier(&prune_dominated(&points).expect("grid is non-empty"))
                .expect("pruning keeps a point")
        });
        Self { frontiers }
    }

    pub fn frontier(&self, s: usize) -> &HullFrontier {
        &self.frontiers[s]
    }

    pub fn decide(&self, s: usize, beta: f64) -> HullDecision {
        self.frontiers[s].decide(beta)
    }

    pub fn policy(&self, s: usize, beta: f64) -> MixturePolicy {
        self.decide(s, beta).policy
    }
}

fn greedy_values(mdp: &BudgetedMdp, q: &GriddedQ, workers: usize) -> (Vec<VectorSignal>, usize) {
    let greedy = GreedyPolicy::new(q, workers);
    let grid = q.grid();
    let mut infeasible = 0;
    let mut v = Vec::with_capacity(mdp.n_states() * grid.len());
    for s in 0..mdp.n_states() {
        for &b in grid.values() {
            let d = greedy.decide(s, b);
            if d.infeasible && !mdp.is_terminal(s) {
                infeasible += 1;
            }
            v.push(d.value);
        }
    }
    (v, infeasible)
}

/// `T q`: the expectation backup under the hull-greedy policy of `q` itself.
pub fn bellman_optimality_backup(
    mdp: &BudgetedMdp,
    q: &GriddedQ,
) -> Result<(GriddedQ, BackupStats)> {
    bellman_optimality_backup_par(mdp, q, 1)
}

pub fn bellman_optimality_backup_par(
    mdp: &BudgetedMdp,
    q: &GriddedQ,
    workers: usize,
) -> Result<(GriddedQ, BackupStats)> {
    q.check_shape(mdp)?;
    let (v, infeasible) = greedy_values(mdp, q, workers);
    Ok((
        backup_from_values(mdp, q.grid(), &v),
        BackupStats {
            infeasible,
            off_grid: 0,
        },
    ))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BviOptions {
    pub tol: f64,
    /// `None` selects `10 * ceil(log(1/tol) / log(1/γ))`.
    pub max_iters: Option<usize>,
    pub workers: usize,
}

impl Default for BviOptions {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iters: None,
            workers: 1,
        }
    }
}

pub fn default_max_iters(gamma: f64, tol: f64) -> usize {
    if gamma >= 1.0 {
        return 100_000;
    }
    if gamma <= 0.0 {
        return 2;
    }
    let n = ((1.0 / tol).ln() / (1.0 / gamma).ln()).ceil() as usize;
    (10 * n).max(2)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IterationRecord {
    pub iteration: usize,
    pub residual_r: f64,
    pub residual_c: f64,
    pub infeasible: usize,
}

impl IterationRecord {
    pub fn residual(&self) -> f64 {
        self.residual_r.max(self.residual_c)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ConvergenceReport {
    pub records: Vec<IterationRecord>,
    pub converged: bool,
}

impl ConvergenceReport {
    pub fn iterations(&self) -> usize {
        self.records.len()
    }

    pub fn final_residual(&self) -> f64 {
        self.records
            .last()
            .map_or(f64::INFINITY, IterationRecord::residual)
    }

    pub fn write_csv(&self, out: &mut impl Write) -> std::io::Result<()> {
        writeln!(out, "iteration,residual_r,residual_c,infeasibility_count")?;
        for r in &self.records {
            writeln!(
                out,
                "{},{:e},{:e},{}",
                r.iteration, r.residual_r, r.residual_c, r.infeasible
            )?;
        }
        Ok(())
    }
}

/// Iterates the optimality operator from `Q = 0`. Running out of iterations
/// is reported, not raised: the operator is not a contraction.
pub fn budgeted_value_iteration(
    mdp: &BudgetedMdp,
    grid: &BudgetGrid,
    opts: &BviOptions,
) -> Result<(GriddedQ, ConvergenceReport)> {
    if !(opts.tol > 0.0) {
        return domain("tolerance must be positive");
    }
    let max_iters = opts
        .max_iters
        .unwrap_or_else(|| default_max_iters(mdp.gamma(), opts.tol));
    let mut q = GriddedQ::zeros(mdp.n_states(), mdp.n_actions(), grid.clone());
    let mut report = ConvergenceReport::default();
    for iteration in 1..=max_iters {
        let (next, stats) = bellman_optimality_backup_par(mdp, &q, opts.workers)?;
        let (residual_r, residual_c) = next.channel_dist(&q);
        report.records.push(IterationRecord {
            iteration,
            residual_r,
            residual_c,
            infeasible: stats.infeasible,
        });
        q = next;
        if residual_r.max(residual_c) < opts.tol {
            report.converged = true;
            break;
        }
    }
    if !report.converged {
        log::warn!(
            "value iteration stopped after {} iterations with residual {:e}",
            report.iterations(),
            report.final_residual()
        );
    }
    Ok((q, report))
}

/// Target produced by the sampling operator for one transition.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SampledTarget {
    pub value: VectorSignal,
    pub infeasible: bool,
    pub off_grid: bool,
}

/// `(r, c) + γ E_{ā' ~ π_hull(s', β_a; q)} q(s', ā')`, with `β_a` snapped to
/// the grid and zero continuation after a terminal transition.
pub fn sampled_backup(
    q: &dyn BiQFunction,
    t: &Transition,
    grid: &BudgetGrid,
    gamma: f64,
) -> SampledTarget {
    let snapped = grid.snap(t.action.budget);
    if t.terminal || gamma == 0.0 {
        return SampledTarget {
            value: t.signal(),
            infeasible: false,
            off_grid: snapped.off_grid,
        };
    }
    let actions = enumerate_actions(q.n_actions(), grid.values());
    let points = candidate_points(q, &t.next_state, &actions);
    let d = top_frontier(&prune_dominated(&points).expect("non-empty"))
        .expect("non-empty")
        .decide(snapped.value);
    SampledTarget {
        value: t.signal() + gamma * d.value,
        infeasible: d.infeasible,
        off_grid: snapped.off_grid,
    }
}

/// `‖TQ¹ − TQ²‖∞ / ‖Q¹ − Q²‖∞`, zero when the inputs coincide.
pub fn empirical_contraction_factor(
    mdp: &BudgetedMdp,
    q1: &GriddedQ,
    q2: &GriddedQ,
) -> Result<f64> {
    if q1.grid() != q2.grid() {
        return domain("both Q functions must share a grid");
    }
    let gap = q1.sup_dist(q2);
    if gap == 0.0 {
        return Ok(0.0);
    }
    let (t1, _) = bellman_optimality_backup(mdp, q1)?;
    let (t2, _) = bellman_optimality_backup(mdp, q2)?;
    Ok(t1.sup_dist(&t2) / gap)
}

#[derive(Clone, Debug, PartialEq)]
pub struct WitnessReport {
    pub epsilon: f64,
    pub gamma: f64,
    pub q_gap: f64,
    pub backup_gap: f64,
    pub ratio: f64,
}

/// Builds the pair
/// `Q¹ = (0, 0)` at action 0 and `(1/γ, ε)` elsewhere,
/// `Q² = (0, ε)` at action 0 and `(1/γ, 2ε)` elsewhere,
/// on a grid containing ε, and measures how much one exact backup separates
/// them. At allocation ε the greedy choice flips from the rewarding action
/// (for Q¹) to action 0 (for Q²), so the rewards move apart by 1 while the
/// inputs differ by ε.
pub fn noncontraction_witness(epsilon: f64, mdp: &BudgetedMdp) -> Result<WitnessReport> {
    if mdp.n_actions() < 2 {
        return domain("the witness needs at least two actions");
    }
    if !(epsilon > 0.0) {
        return domain("epsilon must be positive");
    }
    let gamma = mdp.gamma();
    if !(gamma > 0.0 && gamma < 1.0) {
        return domain("the witness needs gamma in (0, 1)");
    }
    let space: BudgetSpace = mdp.budget_space();
    if !space.contains(epsilon) {
        return domain(format!("epsilon {epsilon} outside the budget space"));
    }
    let mut values = vec![space.min, epsilon, space.max];
    values.dedup();
    let grid = BudgetGrid::from_values(values)?;
    let mdp = mdp.clone().with_terminal(vec![false; mdp.n_states()])?;
    let (ns, na) = (mdp.n_states(), mdp.n_actions());
    let q1 = GriddedQ::from_fn(ns, na, grid.clone(), |_, a, _| {
        if a == 0 {
            VectorSignal::new(0.0, 0.0)
        } else {
            VectorSignal::new(1.0 / gamma, epsilon)
        }
    });
    let q2 = GriddedQ::from_fn(ns, na, grid, |_, a, _| {
        if a == 0 {
            VectorSignal::new(0.0, epsilon)
        } else {
            VectorSignal::new(1.0 / gamma, 2.0 * epsilon)
        }
    });
    let (t1, _) = bellman_optimality_backup(&mdp, &q1)?;
    let (t2, _) = bellman_optimality_backup(&mdp, &q2)?;
    let q_gap = q1.sup_dist(&q2);
    let backup_gap = t1.sup_dist(&t2);
    Ok(WitnessReport {
        epsilon,
        gamma,
        q_gap,
        backup_gap,
        ratio: backup_gap / q_gap,
    })
}

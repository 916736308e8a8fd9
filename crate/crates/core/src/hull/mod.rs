//! Greedy budgeted policy from the top frontier of the (Q_c, Q_r) hull.

mod oracle;

pub use oracle::greedy_policy_lp_oracle;

use std::io::Write;

use crate::error::{domain, Result};
use crate::mdp::{AugmentedAction, MixturePolicy, VectorSignal};
use crate::qfunc::BiQFunction;

/// One candidate value together with the augmented action producing it.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QPoint {
    pub cost: f64,
    pub reward: f64,
    pub origin: AugmentedAction,
}

impl QPoint {
    pub fn new(value: VectorSignal, origin: AugmentedAction) -> Self {
        Self {
            cost: value.cost,
            reward: value.reward,
            origin,
        }
    }

    pub fn value(&self) -> VectorSignal {
        VectorSignal::new(self.reward, self.cost)
    }
}

/// Greedy decision at one budget.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HullDecision {
    pub policy: MixturePolicy,
    /// Expected `(Q_r, Q_c)` of the mixture.
    pub value: VectorSignal,
    /// The budget was below every achievable cost.
    pub infeasible: bool,
}

/// Drops every point costing more than the cheapest reward maximiser.
pub fn prune_dominated(points: &[QPoint]) -> Result<Vec<QPoint>> {
    if points.is_empty() {
        return domain("cannot prune an empty point set");
    }
    let best = points
        .iter()
        .map(|p| p.reward)
        .fold(f64::NEG_INFINITY, f64::max);
    let cheapest = points
        .iter()
        .filter(|p| p.reward == best)
        .map(|p| p.cost)
        .fold(f64::INFINITY, f64::min);
    Ok(points
        .iter()
        .filter(|p| p.cost <= cheapest)
        .copied()
        .collect())
}

fn cross(o: &QPoint, a: &QPoint, b: &QPoint) -> f64 {
    (a.cost - o.cost) * (b.reward - o.reward) - (a.reward - o.reward) * (b.cost - o.cost)
}

/// Upper chain of the convex hull, by increasing cost.
#[derive(Clone, Debug, PartialEq)]
pub struct HullFrontier {
    vertices: Vec<QPoint>,
    on_frontier: Vec<QPoint>,
}

/// Builds the top frontier with a monotone chain. Expects pruned input.
pub fn top_frontier(points: &[QPoint]) -> Result<HullFrontier> {
    if points.is_empty() {
        return domain("cannot build a frontier from no points");
    }
    let mut sorted = points.to_vec();
    sorted.sort_by(|a, b| {
        a.cost
            .total_cmp(&b.cost)
            .then(b.reward.total_cmp(&a.reward))
    });
    sorted.dedup_by(|later, earlier| later.cost == earlier.cost);

    let (lo_c, hi_c, lo_r, hi_r) = sorted.iter().fold(
        (
            f64::INFINITY,
            f64::NEG_INFINITY,
            f64::INFINITY,
            f64::NEG_INFINITY,
        ),
        |(a, b, c, d), p| {
            (
                a.min(p.cost),
                b.max(p.cost),
                c.min(p.reward),
                d.max(p.reward),
            )
        },
    );
    let scale = (hi_c - lo_c).max(hi_r - lo_r).max(f64::MIN_POSITIVE);
    let eps = 1e-12 * scale * scale;

    let mut chain: Vec<QPoint> = Vec::with_capacity(sorted.len());
    for p in &sorted {
        while chain.len() >= 2 && cross(&chain[chain.len() - 2], &chain[chain.len() - 1], p) >= -eps
        {
            chain.pop();
        }
        chain.push(*p);
    }

    let mut frontier = HullFrontier {
        vertices: chain,
        on_frontier: Vec::new(),
    };
    frontier.on_frontier = sorted
        .iter()
        .filter(|p| {
            !frontier
                .vertices
                .iter()
                .any(|v| v.origin == p.origin && v.cost == p.cost)
        })
        .filter(|p| {
            let y = frontier.interpolate(p.cost);
            (y - p.reward).abs() <= 1e-12 * scale
        })
        .copied()
        .collect();
    debug_assert!(
        frontier.check_shape().is_ok(),
        "{:?}",
        frontier.check_shape()
    );
    Ok(frontier)
}

impl HullFrontier {
    pub fn vertices(&self) -> &[QPoint] {
        &self.vertices
    }

    /// Non-vertex points lying on the frontier (collinear with an edge).
    pub fn on_frontier(&self) -> &[QPoint] {
        &self.on_frontier
    }

    pub fn min_cost(&self) -> f64 {
        self.vertices[0].cost
    }

    pub fn max_cost(&self) -> f64 {
        self.vertices[self.vertices.len() - 1].cost
    }

    /// Reward of the piecewise-linear frontier at `cost`, held flat outside
    /// the vertex range.
    pub fn interpolate(&self, cost: f64) -> f64 {
        let v = &self.vertices;
        if cost <= v[0].cost {
            return v[0].reward;
        }
        let i = v.partition_point(|p| p.cost <= cost);
        if i == v.len() {
            return v[v.len() - 1].reward;
        }
        let (a, b) = (&v[i - 1], &v[i]);
        a.reward + (cost - a.cost) / (b.cost - a.cost) * (b.reward - a.reward)
    }

    /// Strictly increasing cost, non-decreasing reward, concave chain.
    pub fn check_shape(&self) -> std::result::Result<(), String> {
        let v = &self.vertices;
        let scale = v
            .iter()
            .fold(0.0f64, |m, p| m.max(p.cost.abs()).max(p.reward.abs()))
            .max(1.0);
        for w in v.windows(2) {
            if w[1].cost <= w[0].cost {
                return Err(format!("costs not increasing at {:?}", w));
            }
            if w[1].reward < w[0].reward - 1e-12 * scale {
                return Err(format!("reward decreases at {:?}", w));
            }
        }
        for w in v.windows(3) {
            let s1 = (w[1].reward - w[0].reward) / (w[1].cost - w[0].cost);
            let s2 = (w[2].reward - w[1].reward) / (w[2].cost - w[1].cost);
            if s2 > s1 + 1e-9 * s1.abs().max(1.0) {
                return Err(format!("chain not concave at {:?}", w));
            }
        }
        Ok(())
    }

    /// Mixes the two vertices flanking `beta`: `q1.cost <= beta < q2.cost`.
    pub fn decide(&self, beta: f64) -> HullDecision {
        let v = &self.vertices;
        let dirac = |p: &QPoint, infeasible| HullDecision {
            policy: MixturePolicy::dirac(p.origin),
            value: VectorSignal::mix(p.value(), p.value(), 0.0),
            infeasible,
        };
        if beta < v[0].cost {
            return dirac(&v[0], true);
        }
        let last = &v[v.len() - 1];
        if beta >= last.cost {
            return dirac(last, false);
        }
        let i = v.partition_point(|p| p.cost <= beta) - 1;
        let (q1, q2) = (&v[i], &v[i + 1]);
        let p = ((beta - q1.cost) / (q2.cost - q1.cost)).clamp(0.0, 1.0);
        HullDecision {
            policy: MixturePolicy {
                first: q1.origin,
                second: q2.origin,
                weight: p,
            },
            value: VectorSignal::mix(q1.value(), q2.value(), p),
            infeasible: false,
        }
    }

    /// CSV dump `q_cost,q_reward,action,budget_allocation` of the vertices.
    pub fn write_csv(&self, out: &mut impl Write) -> std::io::Result<()> {
        writeln!(out, "q_cost,q_reward,action,budget_allocation")?;
        for p in &self.vertices {
            writeln!(
                out,
                "{},{},{},{}",
                p.cost, p.reward, p.origin.action, p.origin.budget
            )?;
        }
        Ok(())
    }
}

/// Prune, build the frontier, and mix at `beta`.
pub fn pi_hull_points(points: &[QPoint], beta: f64) -> Result<HullDecision> {
    Ok(top_frontier(&prune_dominated(points)?)?.decide(beta))
}

/// Frontier of `Q(s, ·)` over the given augmented actions.
pub fn frontier_of(
    q: &dyn BiQFunction,
    state: &[f64],
    actions: &[AugmentedAction],
) -> Result<HullFrontier> {
    top_frontier(&prune_dominated(&candidate_points(q, state, actions))?)
}

/// Greedy budgeted policy at `(state, beta)` over the given augmented actions.
pub fn pi_hull(
    q: &dyn BiQFunction,
    state: &[f64],
    beta: f64,
    actions: &[AugmentedAction],
) -> Result<HullDecision> {
    Ok(frontier_of(q, state, actions)?.decide(beta))
}

/// Evaluates `q` once per distinct allocation and collects the points of the
/// requested augmented actions.
pub fn candidate_points(
    q: &dyn BiQFunction,
    state: &[f64],
    actions: &[AugmentedAction],
) -> Vec<QPoint> {
    let mut cache: Vec<(u64, Vec<VectorSignal>)> = Vec::new();
    actions
        .iter()
        .map(|a| {
            let key = a.budget.to_bits();
            let pos = match cache.iter().position(|(k, _)| *k == key) {
                Some(p) => p,
                None => {
                    cache.push((key, q.evaluate(state, a.budget)));
                    cache.len() - 1
                }
            };
            QPoint::new(cache[pos].1[a.action], *a)
        })
        .collect()
}

/// Candidate points of one state from a batched evaluation: `rows` holds
/// `grid.len()` rows of `n_actions` values, row `k` at allocation `grid[k]`.
/// Points come out in [`enumerate_actions`] order.
pub fn points_from_rows(rows: &[VectorSignal], n_actions: usize, grid: &[f64]) -> Vec<QPoint> {
    debug_assert_eq!(rows.len(), n_actions * grid.len());
    let mut points = Vec::with_capacity(rows.len());
    for a in 0..n_actions {
        for (k, &b) in grid.iter().enumerate() {
            points.push(QPoint::new(
                rows[k * n_actions + a],
                AugmentedAction::new(a, b),
            ));
        }
    }
    points
}

/// All `A × grid` points of `state` from one batched evaluation.
pub fn grid_points(q: &dyn BiQFunction, state: &[f64], grid: &[f64]) -> Vec<QPoint> {
    let states = vec![state; grid.len()];
    points_from_rows(&q.evaluate_batch(&states, grid), q.n_actions(), grid)
}

/// Every `(a, β̃)` in `A × grid`.
pub fn enumerate_actions(n_actions: usize, grid: &[f64]) -> Vec<AugmentedAction> {
    (0..n_actions)
        .flat_map(|a| grid.iter().map(move |&b| AugmentedAction::new(a, b)))
        .collect()
}

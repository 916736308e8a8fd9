//! Direct solution of the greedy program by enumeration, for testing.
//!
//! Maximise `E[Q_r]` subject to `E[Q_c] <= beta` over distributions on the
//! candidate points, then minimise `E[Q_c]` among maximisers. With a single
//! linear constraint, optimal distributions have at most two support points
//! and either are a feasible Dirac or spend the budget exactly, so it is
//! enough to enumerate those.

use super::{HullDecision, QPoint};
use crate::mdp::{MixturePolicy, VectorSignal};

const REWARD_TIE: f64 = 1e-9;

pub fn greedy_policy_lp_oracle(points: &[QPoint], beta: f64) -> HullDecision {
    assert!(!points.is_empty(), "oracle needs candidates");
    let mut candidates: Vec<(MixturePolicy, VectorSignal)> = Vec::new();
    for p in points.iter().filter(|p| p.cost <= beta) {
        candidates.push((MixturePolicy::dirac(p.origin), p.value()));
    }
    for lo in points.iter().filter(|p| p.cost < beta) {
        for hi in points.iter().filter(|p| p.cost > beta) {
            let w = (beta - lo.cost) / (hi.cost - lo.cost);
            let value = VectorSignal::new((1.0 - w) * lo.reward + w * hi.reward, beta);
            candidates.push((
                MixturePolicy {
                    first: lo.origin,
                    second: hi.origin,
                    weight: w,
                },
                value,
            ));
        }
    }
    if candidates.is_empty() {
        let safest = points
            .iter()
            .min_by(|a, b| {
                a.cost
                    .total_cmp(&b.cost)
                    .then(b.reward.total_cmp(&a.reward))
            })
            .unwrap();
        return HullDecision {
            policy: MixturePolicy::dirac(safest.origin),
            value: safest.value(),
            infeasible: true,
        };
    }
    let best = candidates
        .iter()
        .map(|c| c.1.reward)
        .fold(f64::NEG_INFINITY, f64::max);
    let (policy, value) = candidates
        .into_iter()
        .filter(|c| c.1.reward >= best - REWARD_TIE)
        .min_by(|a, b| a.1.cost.total_cmp(&b.1.cost))
        .unwrap();
    HullDecision {
        policy,
        value,
        infeasible: false,
    }
}

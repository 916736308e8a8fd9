//! C interface to the budgeted MDP solvers.
//!
//! Objects cross the boundary as opaque handles created by `bmdp_*_new` /
//! `bmdp_solve_bvi` and released by the matching `*_free`. Every fallible
//! call returns a [`BmdpStatus`]; on failure the message is kept per thread
//! and read back with [`bmdp_last_error_message`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;
use std::slice;

use bmdp::dp::{
    budgeted_value_iteration, noncontraction_witness, BviOptions, ConvergenceReport, GreedyPolicy,
};
use bmdp::envs::finite::two_state_example;
use bmdp::hull::{pi_hull_points, HullDecision, QPoint};
use bmdp::{AugmentedAction, BudgetGrid, BudgetSpace, BudgetedMdp, Error, GriddedQ, VectorSignal};

/// Result code of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BmdpStatus {
    Ok = 0,
    NullPointer = 1,
    Domain = 2,
    InvalidModel = 3,
    NotConverged = 4,
    Format = 5,
    Io = 6,
    OutOfRange = 7,
    Panic = 8,
    Other = 9,
}

/// Finite budgeted MDP.
pub struct BmdpMdp(BudgetedMdp);

/// Output of budgeted value iteration: the Q table, its greedy policy and
/// the convergence record.
pub struct BmdpSolution {
    q: GriddedQ,
    policy: GreedyPolicy,
    report: ConvergenceReport,
}

/// `(1 - weight) δ(first) + weight δ(second)` over augmented actions, with
/// the expected value of the mixture.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct BmdpMixture {
    pub first_action: usize,
    pub first_budget: f64,
    pub second_action: usize,
    pub second_budget: f64,
    pub weight: f64,
    pub value_reward: f64,
    pub value_cost: f64,
    /// Non-zero when the budget is below every achievable cost.
    pub infeasible: u8,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct BmdpWitness {
    pub epsilon: f64,
    pub gamma: f64,
    pub q_gap: f64,
    pub backup_gap: f64,
    pub ratio: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

fn status_of(e: &Error) -> BmdpStatus {
    match e {
        Error::Domain(_) => BmdpStatus::Domain,
        Error::InvalidModel(_) => BmdpStatus::InvalidModel,
        Error::NotConverged { .. } => BmdpStatus::NotConverged,
        Error::Format(_) | Error::Json(_) | Error::Csv(_) => BmdpStatus::Format,
        Error::Io(_) => BmdpStatus::Io,
        _ => BmdpStatus::Other,
    }
}

/// Runs `f`, turning errors and panics into status codes.
fn guard(f: impl FnOnce() -> Result<(), (BmdpStatus, String)>) -> BmdpStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => BmdpStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("panic inside the library".into());
            BmdpStatus::Panic
        }
    }
}

fn lib(e: Error) -> (BmdpStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(what: &str) -> (BmdpStatus, String) {
    (BmdpStatus::NullPointer, format!("{what} is null"))
}

unsafe fn array<'a>(
    p: *const f64,
    n: usize,
    what: &str,
) -> Result<&'a [f64], (BmdpStatus, String)> {
    if n == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(slice::from_raw_parts(p, n))
}

fn mixture_of(d: &HullDecision) -> BmdpMixture {
    BmdpMixture {
        first_action: d.policy.first.action,
        first_budget: d.policy.first.budget,
        second_action: d.policy.second.action,
        second_budget: d.policy.second.budget,
        weight: d.policy.weight,
        value_reward: d.value.reward,
        value_cost: d.value.cost,
        infeasible: u8::from(d.infeasible),
    }
}

/// Copies the last error message of this thread into `buf` (NUL
/// terminated, truncated to `len`) and returns the full message length.
///
/// # Safety
/// `buf` must be null or valid for `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn bmdp_last_error_message(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            ptr::copy_nonoverlapping(msg.as_ptr(), buf.cast::<u8>(), n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Builds a model from flat row-major tables: `transition[(s * A + a) * S + s']`,
/// `reward[s * A + a]`, `cost[s * A + a]`.
///
/// # Safety
/// The arrays must hold `S·A·S`, `S·A` and `S·A` values; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn bmdp_mdp_new(
    n_states: usize,
    n_actions: usize,
    transition: *const f64,
    reward: *const f64,
    cost: *const f64,
    gamma: f64,
    budget_min: f64,
    budget_max: f64,
    out: *mut *mut BmdpMdp,
) -> BmdpStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let sa = n_states
            .checked_mul(n_actions)
            .ok_or((BmdpStatus::Domain, "size overflow".to_string()))?;
        let p = array(transition, sa * n_states, "transition")?;
        let r = array(reward, sa, "reward")?;
        let c = array(cost, sa, "cost")?;
        let rows = |t: &[f64], width: usize| -> Vec<Vec<f64>> {
            (0..n_states)
                .map(|s| t[s * width..(s + 1) * width].to_vec())
                .collect()
        };
        let transition = (0..n_states)
            .map(|s| {
                (0..n_actions)
                    .map(|a| p[(s * n_actions + a) * n_states..][..n_states].to_vec())
                    .collect()
            })
            .collect();
        let space = BudgetSpace::new(budget_min, budget_max).map_err(lib)?;
        let mdp = BudgetedMdp::new(
            transition,
            rows(r, n_actions),
            rows(c, n_actions),
            gamma,
            space,
        )
        .map_err(lib)?;
        *out = Box::into_raw(Box::new(BmdpMdp(mdp)));
        Ok(())
    })
}

/// Parses a model from its JSON text.
///
/// # Safety
/// `json` must be a NUL-terminated string; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn bmdp_mdp_from_json(
    json: *const c_char,
    out: *mut *mut BmdpMdp,
) -> BmdpStatus {
    guard(|| {
        if json.is_null() {
            return Err(null("json"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let text = CStr::from_ptr(json)
            .to_str()
            .map_err(|e| (BmdpStatus::Format, e.to_string()))?;
        let mdp = BudgetedMdp::from_json_str(text).map_err(lib)?;
        *out = Box::into_raw(Box::new(BmdpMdp(mdp)));
        Ok(())
    })
}

/// # Safety
/// `mdp` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn bmdp_mdp_free(mdp: *mut BmdpMdp) {
    if !mdp.is_null() {
        drop(Box::from_raw(mdp));
    }
}

/// # Safety
/// `mdp` must be a valid handle or null.
#[no_mangle]
pub unsafe extern "C" fn bmdp_mdp_n_states(mdp: *const BmdpMdp) -> usize {
    mdp.as_ref().map_or(0, |m| m.0.n_states())
}

/// # Safety
/// `mdp` must be a valid handle or null.
#[no_mangle]
pub unsafe extern "C" fn bmdp_mdp_n_actions(mdp: *const BmdpMdp) -> usize {
    mdp.as_ref().map_or(0, |m| m.0.n_actions())
}

/// Budgeted value iteration on the budget grid `grid[0..n_grid]`
/// (strictly increasing). `max_iters == 0` selects the default bound.
/// Running out of iterations still yields a solution; check
/// [`bmdp_solution_converged`].
///
/// # Safety
/// `mdp` must be valid, `grid` must hold `n_grid` values, `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn bmdp_solve_bvi(
    mdp: *const BmdpMdp,
    grid: *const f64,
    n_grid: usize,
    tol: f64,
    max_iters: usize,
    workers: usize,
    out: *mut *mut BmdpSolution,
) -> BmdpStatus {
    guard(|| {
        let mdp = mdp.as_ref().ok_or_else(|| null("mdp"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        let grid = BudgetGrid::from_values(array(grid, n_grid, "grid")?.to_vec()).map_err(lib)?;
        let opts = BviOptions {
            tol,
            max_iters: (max_iters > 0).then_some(max_iters),
            workers: workers.max(1),
        };
        let (q, report) = budgeted_value_iteration(&mdp.0, &grid, &opts).map_err(lib)?;
        let policy = GreedyPolicy::new(&q, opts.workers);
        *out = Box::into_raw(Box::new(BmdpSolution { q, policy, report }));
        Ok(())
    })
}

/// # Safety
/// `sol` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn bmdp_solution_free(sol: *mut BmdpSolution) {
    if !sol.is_null() {
        drop(Box::from_raw(sol));
    }
}

/// # Safety
/// `sol` must be a valid handle or null.
#[no_mangle]
pub unsafe extern "C" fn bmdp_solution_iterations(sol: *const BmdpSolution) -> usize {
    sol.as_ref().map_or(0, |s| s.report.iterations())
}

/// # Safety
/// `sol` must be a valid handle or null.
#[no_mangle]
pub unsafe extern "C" fn bmdp_solution_converged(sol: *const BmdpSolution) -> u8 {
    sol.as_ref().map_or(0, |s| u8::from(s.report.converged))
}

/// Last sup-norm residual, infinity when no iteration ran.
///
/// # Safety
/// `sol` must be a valid handle or null.
#[no_mangle]
pub unsafe extern "C" fn bmdp_solution_residual(sol: *const BmdpSolution) -> f64 {
    sol.as_ref().map_or(f64::NAN, |s| s.report.final_residual())
}

/// `Q*(s, a, β_k)` for grid index `k`.
///
/// # Safety
/// `sol` must be valid; the outputs must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn bmdp_solution_q(
    sol: *const BmdpSolution,
    state: usize,
    action: usize,
    k: usize,
    out_reward: *mut f64,
    out_cost: *mut f64,
) -> BmdpStatus {
    guard(|| {
        let sol = sol.as_ref().ok_or_else(|| null("solution"))?;
        if out_reward.is_null() || out_cost.is_null() {
            return Err(null("output"));
        }
        let q = &sol.q;
        if state >= q.n_states() || action >= bmdp::BiQFunction::n_actions(q) || k >= q.grid().len()
        {
            return Err((
                BmdpStatus::OutOfRange,
                format!("index ({state}, {action}, {k}) out of range"),
            ));
        }
        let v = q.get(state, action, k);
        *out_reward = v.reward;
        *out_cost = v.cost;
        Ok(())
    })
}

/// Greedy mixture of the solved model at state `s` and budget `β`.
///
/// # Safety
/// `sol` and `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn bmdp_solution_policy(
    sol: *const BmdpSolution,
    state: usize,
    beta: f64,
    out: *mut BmdpMixture,
) -> BmdpStatus {
    guard(|| {
        let sol = sol.as_ref().ok_or_else(|| null("solution"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        if state >= sol.q.n_states() {
            return Err((
                BmdpStatus::OutOfRange,
                format!("state {state} out of range"),
            ));
        }
        if !beta.is_finite() {
            return Err((BmdpStatus::Domain, "budget must be finite".into()));
        }
        *out = mixture_of(&sol.policy.decide(state, beta));
        Ok(())
    })
}

/// π_hull over `n` candidate points given as parallel arrays.
///
/// # Safety
/// Each array must hold `n` values; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn bmdp_pi_hull(
    n: usize,
    rewards: *const f64,
    costs: *const f64,
    actions: *const usize,
    budgets: *const f64,
    beta: f64,
    out: *mut BmdpMixture,
) -> BmdpStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        if n == 0 {
            return Err((BmdpStatus::Domain, "no candidate point".into()));
        }
        if actions.is_null() {
            return Err(null("actions"));
        }
        let r = array(rewards, n, "rewards")?;
        let c = array(costs, n, "costs")?;
        let b = array(budgets, n, "budgets")?;
        let a = slice::from_raw_parts(actions, n);
        if r.iter().chain(c).chain(b).any(|x| !x.is_finite()) || !beta.is_finite() {
            return Err((BmdpStatus::Domain, "non-finite input".into()));
        }
        let points: Vec<QPoint> = (0..n)
            .map(|i| {
                QPoint::new(
                    VectorSignal::new(r[i], c[i]),
                    AugmentedAction::new(a[i], b[i]),
                )
            })
            .collect();
        *out = mixture_of(&pi_hull_points(&points, beta).map_err(lib)?);
        Ok(())
    })
}

/// Runs the non-contraction construction on the two-state example.
///
/// # Safety
/// `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn bmdp_witness_noncontraction(
    epsilon: f64,
    gamma: f64,
    out: *mut BmdpWitness,
) -> BmdpStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let mdp = two_state_example(gamma).map_err(lib)?;
        let w = noncontraction_witness(epsilon, &mdp).map_err(lib)?;
        *out = BmdpWitness {
            epsilon: w.epsilon,
            gamma: w.gamma,
            q_gap: w.q_gap,
            backup_gap: w.backup_gap,
            ratio: w.ratio,
        };
        Ok(())
    })
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn bmdp_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

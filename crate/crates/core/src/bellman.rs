//! Regularized Bellman operators, greedy policies and exact values.

use crate::error::{Error, Result};
use crate::linalg::solve_resolvent;
use crate::mdp::{dot, induced_dynamics, q_from_v, Policy, StateActionValue, StateValue, TabularMdp};
use crate::regularizer::{argmax, PolicyRegularizer, Regularizer};

/// Iteration cap for fixed-point solvers.
pub const MAX_ITERATIONS: usize = 1_000_000;

/// Two actions closer than this to `max q*` make the optimum degenerate.
pub const TIE_TOL: f64 = 1e-9;

/// An MDP paired with the regularizer its operators use.
#[derive(Clone, Debug)]
pub struct EvalContext<'a> {
    pub mdp: &'a TabularMdp,
    pub reg: PolicyRegularizer,
}

impl<'a> EvalContext<'a> {
    pub fn new(mdp: &'a TabularMdp, reg: impl Into<PolicyRegularizer>) -> Result<Self> {
        let reg = reg.into();
        if let PolicyRegularizer::Anchored { anchor, .. } = &reg {
            mdp.check_policy(anchor)?;
        }
        Ok(EvalContext { mdp, reg })
    }

    pub fn unregularized(mdp: &'a TabularMdp) -> Self {
        EvalContext {
            mdp,
            reg: Regularizer::unregularized().into(),
        }
    }

    pub fn gamma(&self) -> f64 {
        self.mdp.gamma()
    }
}

/// `Omega(pi_s)` at every state.
pub fn omega_of_policy(reg: &PolicyRegularizer, pi: &Policy) -> Vec<f64> {
    pi.rows()
        .enumerate()
        .map(|(s, row)| reg.at(s).value_unchecked(row))
        .collect()
}

pub(crate) fn opt_from_q(reg: &PolicyRegularizer, q: &StateActionValue) -> Vec<f64> {
    (0..q.n_states()).map(|s| reg.at(s).conjugate_unchecked(q.row(s))).collect()
}

pub(crate) fn greedy_from_q(reg: &PolicyRegularizer, q: &StateActionValue) -> Policy {
    let (ns, na) = (q.n_states(), q.n_actions());
    let mut probs = vec![0.0; ns * na];
    for (s, out) in probs.chunks_mut(na).enumerate() {
        reg.at(s).greedy_into(q.row(s), out);
    }
    Policy::from_rows_unchecked(ns, na, probs)
}

/// `<pi_s, q_s> - omega[s]`.
pub(crate) fn eval_from_q(pi: &Policy, omega: &[f64], q: &StateActionValue) -> Vec<f64> {
    (0..q.n_states()).map(|s| dot(pi.row(s), q.row(s)) - omega[s]).collect()
}

/// `(T_{pi,Omega})^m v` with `omega` the per-state penalty; `m = 0` is the identity.
pub(crate) fn eval_power(mdp: &TabularMdp, pi: &Policy, omega: &[f64], v: &[f64], m: usize) -> Vec<f64> {
    let mut v = v.to_vec();
    for _ in 0..m {
        let q = q_from_v(mdp, &v).expect("shapes checked by caller");
        v = eval_from_q(pi, omega, &q);
    }
    v
}

/// Fixed point of `T_{pi,Omega}` with per-state penalty `omega`.
pub(crate) fn value_with_penalty(mdp: &TabularMdp, pi: &Policy, omega: &[f64]) -> Result<Vec<f64>> {
    let dynamics = induced_dynamics(mdp, pi)?;
    let rhs: Vec<f64> = dynamics.reward.iter().zip(omega).map(|(r, o)| r - o).collect();
    solve_resolvent(&dynamics.kernel, mdp.n_states(), mdp.gamma(), &rhs, false)
}

/// `T_{pi,Omega} v`.
pub fn eval_operator(ctx: &EvalContext, pi: &Policy, v: &[f64]) -> Result<StateValue> {
    ctx.mdp.check_policy(pi)?;
    let q = q_from_v(ctx.mdp, v)?;
    Ok(eval_from_q(pi, &omega_of_policy(&ctx.reg, pi), &q).into())
}

/// `T_{*,Omega} v = Omega*(q)`.
pub fn opt_operator(ctx: &EvalContext, v: &[f64]) -> Result<StateValue> {
    let q = q_from_v(ctx.mdp, v)?;
    Ok(opt_from_q(&ctx.reg, &q).into())
}

/// `G_Omega(v) = grad Omega*(q)`.
pub fn greedy_policy(ctx: &EvalContext, v: &[f64]) -> Result<Policy> {
    let q = q_from_v(ctx.mdp, v)?;
    Ok(greedy_from_q(&ctx.reg, &q))
}

/// `v_{pi,Omega}` by a dense solve of `(I - gamma P_pi) v = r_pi - Omega(pi)`.
pub fn policy_value(ctx: &EvalContext, pi: &Policy) -> Result<StateValue> {
    ctx.mdp.check_policy(pi)?;
    Ok(value_with_penalty(ctx.mdp, pi, &omega_of_policy(&ctx.reg, pi))?.into())
}

/// Value iteration on `T_{*,Omega}` from zero until the residual is at most
/// `tol (1 - gamma)`, so the returned value is within `tol` of the fixed point.
pub fn optimal_value(ctx: &EvalContext, tol: f64) -> Result<(StateValue, Policy)> {
    if !(tol > 0.0) {
        return Err(Error::Domain(format!("tolerance must be positive, got {tol}")));
    }
    let threshold = tol * (1.0 - ctx.gamma());
    let mut v = vec![0.0; ctx.mdp.n_states()];
    let mut residual = f64::INFINITY;
    for _ in 0..MAX_ITERATIONS {
        let q = q_from_v(ctx.mdp, &v)?;
        let next = opt_from_q(&ctx.reg, &q);
        residual = next.iter().zip(&v).fold(0.0, |m, (a, b)| m.max((a - b).abs()));
        v = next;
        if residual <= threshold {
            let pi = greedy_policy(ctx, &v)?;
            return Ok((v.into(), pi));
        }
    }
    Err(Error::NonConvergence {
        iterations: MAX_ITERATIONS,
        residual,
    })
}

/// Optimum of the unregularized MDP.
#[derive(Clone, Debug, PartialEq)]
pub struct UnregularizedOptimum {
    pub value: StateValue,
    pub policy: Policy,
    pub q: StateActionValue,
    /// Some state has two actions within [`TIE_TOL`] of its best q-value.
    pub degenerate: bool,
}

/// `v_*` and a deterministic `pi_*`: value iteration to `tol`, then policy
/// iteration until the greedy policy is stable. Ties go to the lowest index.
pub fn solve_unregularized(mdp: &TabularMdp, tol: f64) -> Result<UnregularizedOptimum> {
    let ctx = EvalContext::unregularized(mdp);
    let (v, _) = optimal_value(&ctx, tol)?;
    let mut actions: Vec<usize> = greedy_actions(&q_from_v(mdp, &v)?, None);
    let zero = vec![0.0; mdp.n_states()];
    for _ in 0..10 * mdp.n_states() * mdp.n_actions() + 10 {
        let pi = Policy::deterministic(mdp.n_actions(), &actions)?;
        let value = value_with_penalty(mdp, &pi, &zero)?;
        let q = q_from_v(mdp, &value)?;
        let next = greedy_actions(&q, Some(&actions));
        if next == actions {
            let degenerate = (0..mdp.n_states()).any(|s| {
                let row = q.row(s);
                let best = row[argmax(row)];
                row.iter().filter(|x| best - **x <= TIE_TOL).count() > 1
            });
            return Ok(UnregularizedOptimum {
                value: value.into(),
                policy: pi,
                q,
                degenerate,
            });
        }
        actions = next;
    }
    Err(Error::NonConvergence {
        iterations: 10 * mdp.n_states() * mdp.n_actions() + 10,
        residual: f64::NAN,
    })
}

/// Argmax per state; an incumbent action is kept unless beaten by more than
/// roundoff.
fn greedy_actions(q: &StateActionValue, incumbent: Option<&[usize]>) -> Vec<usize> {
    (0..q.n_states())
        .map(|s| {
            let row = q.row(s);
            let best = argmax(row);
            match incumbent {
                Some(cur) if row[best] - row[cur[s]] <= 1e-12 * (1.0 + row[best].abs()) => cur[s],
                _ => best,
            }
        })
        .collect()
}

/// Unregularized `v_pi`.
pub fn unregularized_value(mdp: &TabularMdp, pi: &Policy) -> Result<StateValue> {
    mdp.check_policy(pi)?;
    Ok(value_with_penalty(mdp, pi, &vec![0.0; mdp.n_states()])?.into())
}


#[cfg(test)]
pub(crate) fn sup_diff(a: &[f64], b: &[f64]) -> f64 {
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    crate::mdp::sup_norm(&d)
}

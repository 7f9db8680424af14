//! Temporal consistency, occupancy measures, the regularized policy gradient
//! and reward recovery from an optimal regularized policy.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bellman::{omega_of_policy, optimal_value, policy_value, EvalContext};
use crate::error::{shape_err, Error, Result};
use crate::linalg::solve_resolvent;
use crate::mdp::{induced_dynamics, q_from_v, Policy, StateActionValue, TabularMdp};
use crate::regularizer::{PolicyRegularizer, Regularizer, RegularizerKind, SimplexPoint, SimplexRegularizer};

/// `max_s |v(s) - Omega*(q_s)| + max_s ‖pi_s - grad Omega*(q_s)‖_1` with `q` built from `v`.
pub fn temporal_consistency_residual(mdp: &TabularMdp, reg: &PolicyRegularizer, v: &[f64], pi: &Policy) -> Result<f64> {
    mdp.check_policy(pi)?;
    let q = q_from_v(mdp, v)?;
    let mut value_gap: f64 = 0.0;
    let mut policy_gap: f64 = 0.0;
    let mut greedy = vec![0.0; mdp.n_actions()];
    for s in 0..mdp.n_states() {
        let local = reg.at(s);
        value_gap = value_gap.max((v[s] - local.conjugate_unchecked(q.row(s))).abs());
        local.greedy_into(q.row(s), &mut greedy);
        let l1: f64 = pi.row(s).iter().zip(&greedy).map(|(a, b)| (a - b).abs()).sum();
        policy_gap = policy_gap.max(l1);
    }
    Ok(value_gap + policy_gap)
}

/// Discounted state occupancy `d = (1 - gamma) nu (I - gamma P_pi)^{-1}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OccupancyMeasure {
    pub states: Vec<f64>,
    /// `d(s) pi(a|s)`, state-major.
    pub state_actions: Vec<f64>,
}

pub fn occupancy_measure(mdp: &TabularMdp, pi: &Policy, nu: &[f64]) -> Result<OccupancyMeasure> {
    mdp.check_states("initial distribution", nu.len())?;
    SimplexPoint::new(nu.to_vec())?;
    let dynamics = induced_dynamics(mdp, pi)?;
    let g = mdp.gamma();
    let w = solve_resolvent(&dynamics.kernel, mdp.n_states(), g, nu, true)?;
    let states: Vec<f64> = w.iter().map(|x| (1.0 - g) * x).collect();
    let state_actions = states
        .iter()
        .enumerate()
        .flat_map(|(s, d)| pi.row(s).iter().map(move |p| d * p))
        .collect();
    Ok(OccupancyMeasure { states, state_actions })
}

/// State-wise softmax of per-(s,a) logits.
pub fn softmax_policy(theta: &StateActionValue) -> Result<Policy> {
    if let Some(x) = theta.values().iter().find(|x| !x.is_finite()) {
        return Err(Error::Domain(format!("non-finite logit {x}")));
    }
    let ent = Regularizer::negative_entropy();
    let (ns, na) = (theta.n_states(), theta.n_actions());
    let mut probs = vec![0.0; ns * na];
    for (s, out) in probs.chunks_mut(na).enumerate() {
        ent.greedy_into(theta.row(s), out);
    }
    Ok(Policy::from_rows_unchecked(ns, na, probs))
}

fn check_theta(mdp: &TabularMdp, theta: &StateActionValue) -> Result<()> {
    if theta.n_states() != mdp.n_states() || theta.n_actions() != mdp.n_actions() {
        return Err(shape_err(
            "logits",
            mdp.n_states() * mdp.n_actions(),
            theta.n_states() * theta.n_actions(),
        ));
    }
    Ok(())
}

/// `J(theta) = nu . v_{pi_theta, Omega}`.
pub fn regularized_objective(mdp: &TabularMdp, reg: &Regularizer, theta: &StateActionValue, nu: &[f64]) -> Result<f64> {
    check_theta(mdp, theta)?;
    mdp.check_states("initial distribution", nu.len())?;
    let pi = softmax_policy(theta)?;
    let v = policy_value(&EvalContext::new(mdp, *reg)?, &pi)?;
    Ok(nu.iter().zip(v.iter()).map(|(a, b)| a * b).sum())
}

/// Gradient of [`regularized_objective`] in the logits:
/// `w(s) pi(b|s) (g(s,b) - sum_a pi(a|s) g(s,a))` with
/// `w = nu (I - gamma P_pi)^{-1}` and `g = q_{pi,Omega} - grad Omega(pi_s)`.
pub fn regularized_policy_gradient(
    mdp: &TabularMdp,
    reg: &Regularizer,
    theta: &StateActionValue,
    nu: &[f64],
) -> Result<StateActionValue> {
    check_theta(mdp, theta)?;
    let pi = softmax_policy(theta)?;
    let ctx = EvalContext::new(mdp, *reg)?;
    let v = policy_value(&ctx, &pi)?;
    let q = q_from_v(mdp, &v)?;
    let occupancy = occupancy_measure(mdp, &pi, nu)?;
    let c = 1.0 - mdp.gamma();
    let (ns, na) = (mdp.n_states(), mdp.n_actions());
    let mut grad = vec![0.0; ns * na];
    for s in 0..ns {
        let p = pi.row(s);
        let g: Vec<f64> = q.row(s).iter().zip(reg.gradient(p)).map(|(x, d)| x - d).collect();
        let mean: f64 = p.iter().zip(&g).map(|(a, b)| a * b).sum();
        let w = occupancy.states[s] / c;
        for b in 0..na {
            grad[s * na + b] = w * p[b] * (g[b] - mean);
        }
    }
    StateActionValue::new(ns, na, grad)
}

/// Central finite differences of [`regularized_objective`], one coordinate per task.
pub fn finite_difference_gradient(
    mdp: &TabularMdp,
    reg: &Regularizer,
    theta: &StateActionValue,
    nu: &[f64],
    step: f64,
) -> Result<StateActionValue> {
    check_theta(mdp, theta)?;
    let grad = (0..theta.values().len())
        .into_par_iter()
        .map(|i| {
            let mut plus = theta.clone();
            plus.values_mut()[i] += step;
            let mut minus = theta.clone();
            minus.values_mut()[i] -= step;
            let f_plus = regularized_objective(mdp, reg, &plus, nu)?;
            let f_minus = regularized_objective(mdp, reg, &minus, nu)?;
            Ok((f_plus - f_minus) / (2.0 * step))
        })
        .collect::<Result<Vec<f64>>>()?;
    StateActionValue::new(theta.n_states(), theta.n_actions(), grad)
}

/// Logits drawn uniformly from `[-2, 2]`.
pub fn random_logits(n_states: usize, n_actions: usize, seed: u64) -> StateActionValue {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let values = (0..n_states * n_actions).map(|_| rng.random_range(-2.0..=2.0)).collect();
    StateActionValue::new(n_states, n_actions, values).expect("finite logits")
}

/// Threshold below which a gradient component is compared absolutely.
pub const GRADIENT_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradientCheck {
    pub analytic: Vec<f64>,
    pub finite_difference: Vec<f64>,
    /// Largest relative error over components above [`GRADIENT_FLOOR`].
    pub max_relative_error: f64,
    pub max_absolute_error: f64,
}

/// Compares [`regularized_policy_gradient`] with central differences of step `step`.
pub fn gradient_check(
    mdp: &TabularMdp,
    reg: &Regularizer,
    theta: &StateActionValue,
    nu: &[f64],
    step: f64,
) -> Result<GradientCheck> {
    let analytic = regularized_policy_gradient(mdp, reg, theta, nu)?.values().to_vec();
    let finite_difference = finite_difference_gradient(mdp, reg, theta, nu, step)?.values().to_vec();
    let mut max_relative_error: f64 = 0.0;
    let mut max_absolute_error: f64 = 0.0;
    for (a, b) in analytic.iter().zip(&finite_difference) {
        let err = (a - b).abs();
        max_absolute_error = max_absolute_error.max(err);
        if a.abs() > GRADIENT_FLOOR {
            max_relative_error = max_relative_error.max(err / a.abs());
        }
    }
    Ok(GradientCheck {
        analytic,
        finite_difference,
        max_relative_error,
        max_absolute_error,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IrlRoundTrip {
    pub recovered: RecoveredReward,
    /// Largest per-state total variation between the target and re-solved policies.
    pub max_tv: f64,
}

/// Solves forward, recovers a reward from the optimal policy and solves again.
pub fn irl_round_trip(mdp: &TabularMdp, reg: &Regularizer, tol: f64) -> Result<IrlRoundTrip> {
    let preg = PolicyRegularizer::Fixed(*reg);
    let (_, target) = optimal_value(&EvalContext::new(mdp, preg.clone())?, tol)?;
    let recovered = irl_recover_reward(mdp, &preg, &target)?;
    let shaped = mdp.with_rewards(recovered.reward.clone())?;
    let (_, back) = optimal_value(&EvalContext::new(&shaped, preg)?, tol)?;
    Ok(IrlRoundTrip {
        max_tv: back.max_tv_distance(&target),
        recovered,
    })
}

/// A reward whose regularized optimal policy is the given one.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecoveredReward {
    /// `r(s,a)`, state-major.
    pub reward: Vec<f64>,
    /// The q-function preimage used, normalized so `Omega*(q_s) = 0`.
    pub q_hat: Vec<f64>,
    /// Which preimage was chosen.
    pub canonical: String,
}

/// `r(s,a) = q(s,a) - gamma E_{s'|s,a}[Omega*(q(s', .))]` for a canonical `q`
/// with `grad Omega*(q_s) = pi_s`.
pub fn irl_recover_reward(mdp: &TabularMdp, reg: &PolicyRegularizer, pi_star: &Policy) -> Result<RecoveredReward> {
    mdp.check_policy(pi_star)?;
    let r = match reg {
        PolicyRegularizer::Fixed(r) if r.scale > 0.0 => *r,
        PolicyRegularizer::Fixed(_) => {
            return Err(Error::UnsupportedRegularizer(
                "a zero regularizer has no unique greedy policy to invert".into(),
            ))
        }
        PolicyRegularizer::Anchored { .. } => {
            return Err(Error::UnsupportedRegularizer(
                "reward recovery needs a fixed regularizer".into(),
            ))
        }
    };
    let a = r.scale;
    let (ns, na) = (mdp.n_states(), mdp.n_actions());
    let mut q_hat = Vec::with_capacity(ns * na);
    let canonical = match r.kind {
        RegularizerKind::NegativeEntropy => "alpha * ln pi",
        RegularizerKind::KlUniform => "alpha * (ln pi + ln |A|)",
        RegularizerKind::Tsallis => "alpha * (pi - (‖pi‖² + 1) / 2), alpha * (-(‖pi‖² + 3) / 2) off support",
    };
    for (s, row) in pi_star.rows().enumerate() {
        match r.kind {
            RegularizerKind::NegativeEntropy | RegularizerKind::KlUniform => {
                if let Some(b) = row.iter().position(|p| *p <= 0.0) {
                    return Err(Error::Support(format!(
                        "action {b} has zero probability at state {s}"
                    )));
                }
                let shift = if r.kind == RegularizerKind::KlUniform {
                    (na as f64).ln()
                } else {
                    0.0
                };
                q_hat.extend(row.iter().map(|p| a * (p.ln() + shift)));
            }
            RegularizerKind::Tsallis => {
                let c = 0.5 * (row.iter().map(|p| p * p).sum::<f64>() + 1.0);
                q_hat.extend(row.iter().map(|&p| if p > 0.0 { a * (p - c) } else { a * (-c - 1.0) }));
            }
        }
    }
    let q_hat = StateActionValue::new(ns, na, q_hat)?;
    let next_value: Vec<f64> = (0..ns).map(|s| r.conjugate_unchecked(q_hat.row(s))).collect();
    let g = mdp.gamma();
    let mut reward = Vec::with_capacity(ns * na);
    for s in 0..ns {
        for b in 0..na {
            let expected: f64 = mdp
                .transition_row(s, b)
                .iter()
                .zip(&next_value)
                .map(|(p, v)| p * v)
                .sum();
            reward.push(q_hat.get(s, b) - g * expected);
        }
    }
    Ok(RecoveredReward {
        reward,
        q_hat: q_hat.values().to_vec(),
        canonical: canonical.to_string(),
    })
}

/// Per-state `Omega(pi_s)`, exposed for callers evaluating their own objectives.
pub fn policy_penalty(reg: &PolicyRegularizer, pi: &Policy) -> Vec<f64> {
    omega_of_policy(reg, pi)
}

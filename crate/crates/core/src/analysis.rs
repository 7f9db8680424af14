//! Losses, regrets and the sup-norm error-propagation bounds evaluated on
//! scheme traces.
//!
//! Every bound is computed from a [`BoundInputs`] value: a few scalars plus
//! one [`DiagnosticsRow`] per iteration. The same inputs can be rebuilt from
//! a saved diagnostics CSV, so re-checking a run reproduces its reports bit
//! for bit.

use serde::{Deserialize, Serialize};

use crate::bellman::{optimal_value, policy_value, solve_unregularized, unregularized_value, EvalContext};
use crate::error::{Error, Result};
use crate::linalg::solve_resolvent;
use crate::mdp::{induced_dynamics, sup_norm, Policy, StateValue, TabularMdp};
use crate::regularizer::{divergence_radius, PolicyRegularizer, Regularizer, RegularizerKind, SimplexRegularizer};
use crate::schemes::{IterationTrace, SchemeKind, Steps};

/// A report holds iff `rhs - lhs >= -HOLD_TOL`.
pub const HOLD_TOL: f64 = 1e-8;

/// Multiplicative slack on the asymptotic regret bound.
pub const ASYMPTOTIC_SLACK: f64 = 1.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundKind {
    /// `‖l_k‖` of reg-MPI against the propagated errors.
    LossBoundRegMpi,
    /// `‖L_K‖` of MD-MPI, literal double sums.
    RegretBoundMdMpi,
    /// Average regret of exact MD-MPI.
    ExactRateMdMpi,
    /// MD-MPI regret with errors summed before propagation.
    GroupedErrorsMdMpi,
    /// Long-run average regret against `(2 gamma eps + eps') / (1 - gamma)^2`.
    AsymptoticMdMpi,
    /// Regret of weighted reg-MPI.
    RegretBoundWeighted,
    /// `min_k ‖v* - v_{pi_k}‖_{1,rho} <= ‖L_K‖ / K`.
    BestPolicyLoss,
    /// Regularized values sandwiched by unregularized ones.
    ValueSandwich,
    /// Unregularized value of the regularized optimal policy.
    OriginalMdpPerformance,
    /// Bellman-residual recursion, component-wise.
    ResidualRecursion,
    /// Shift recursion, component-wise.
    ShiftRecursion,
    /// Distance recursion, component-wise.
    DistanceRecursion,
}

impl BoundKind {
    pub fn name(self) -> &'static str {
        match self {
            BoundKind::LossBoundRegMpi => "loss_bound_reg_mpi",
            BoundKind::RegretBoundMdMpi => "regret_bound_md_mpi",
            BoundKind::ExactRateMdMpi => "exact_rate_md_mpi",
            BoundKind::GroupedErrorsMdMpi => "grouped_errors_md_mpi",
            BoundKind::AsymptoticMdMpi => "asymptotic_md_mpi",
            BoundKind::RegretBoundWeighted => "regret_bound_weighted",
            BoundKind::BestPolicyLoss => "best_policy_loss",
            BoundKind::ValueSandwich => "value_sandwich",
            BoundKind::OriginalMdpPerformance => "original_mdp_performance",
            BoundKind::ResidualRecursion => "residual_recursion",
            BoundKind::ShiftRecursion => "shift_recursion",
            BoundKind::DistanceRecursion => "distance_recursion",
        }
    }

    /// Reports computable from [`BoundInputs`] alone.
    pub fn from_inputs(self) -> bool {
        matches!(
            self,
            BoundKind::LossBoundRegMpi
                | BoundKind::RegretBoundMdMpi
                | BoundKind::ExactRateMdMpi
                | BoundKind::GroupedErrorsMdMpi
                | BoundKind::AsymptoticMdMpi
                | BoundKind::RegretBoundWeighted
        )
    }

    /// Default reports for a scheme; exact and noisy runs differ.
    pub fn defaults(scheme: SchemeKind, exact: bool) -> Vec<BoundKind> {
        match scheme {
            SchemeKind::RegMpi => vec![BoundKind::LossBoundRegMpi],
            SchemeKind::MdMpi1 | SchemeKind::MdMpi2 => {
                let mut v = vec![BoundKind::RegretBoundMdMpi, BoundKind::GroupedErrorsMdMpi];
                v.push(if exact {
                    BoundKind::ExactRateMdMpi
                } else {
                    BoundKind::AsymptoticMdMpi
                });
                v
            }
            SchemeKind::WeightedRegMpi => vec![BoundKind::RegretBoundWeighted],
        }
    }
}

/// Scalars echoed next to each report.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BoundEcho {
    pub gamma: f64,
    #[serde(rename = "K")]
    pub k: usize,
    pub eps_sup: f64,
    pub eps_prime_sup: f64,
    pub radius: f64,
    pub d0_sup: f64,
    pub b0_sup: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub bound: BoundKind,
    pub lhs: f64,
    pub rhs: f64,
    pub margin: f64,
    pub holds: bool,
    pub inputs: BoundEcho,
}

impl BoundReport {
    pub fn new(bound: BoundKind, lhs: f64, rhs: f64, inputs: BoundEcho) -> Self {
        let margin = rhs - lhs;
        BoundReport {
            bound,
            lhs,
            rhs,
            margin,
            holds: margin >= -HOLD_TOL,
            inputs,
        }
    }

    /// Component-wise check: `lhs` is the largest violation, `rhs` is zero.
    fn componentwise(bound: BoundKind, violation: f64, inputs: BoundEcho) -> Self {
        BoundReport::new(bound, violation, 0.0, inputs)
    }
}

/// One diagnostics CSV row.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsRow {
    pub k: usize,
    pub loss_sup: f64,
    pub regret_sup: f64,
    pub eps_sup: f64,
    /// Greedy error in the variational sense.
    pub eps_prime_sup: f64,
    pub eps_prime_gap: f64,
    /// `‖b_{k-1}‖`.
    pub bellman_residual_sup: f64,
    /// Bound evaluated on the first k iterations.
    pub bound_rhs: f64,
    /// Scale of the regularizer that produced `pi_k`.
    pub alpha_k: f64,
}

/// Scalars a bound needs beyond the per-iteration rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundScalars {
    pub scheme: SchemeKind,
    pub gamma: f64,
    /// No noise was injected in either step.
    pub exact: bool,
    pub d0_sup: f64,
    pub b0_sup: f64,
    /// `‖sup_pi Omega_{pi_0}(pi)‖` for MD-MPI, `‖sup_pi Omega(pi)‖` per unit scale for the weighted scheme.
    pub radius: f64,
    /// The unregularized optimum has ties.
    #[serde(default)]
    pub degenerate_optimum: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BoundInputs {
    pub scalars: BoundScalars,
    pub rows: Vec<DiagnosticsRow>,
}

/// Per-iteration vectors of a run.
#[derive(Clone, Debug, PartialEq)]
pub struct DiagnosticsRecord {
    pub scheme: SchemeKind,
    pub gamma: f64,
    /// `v_{*,Omega}` for reg-MPI, `v_*` otherwise.
    pub reference: StateValue,
    /// Unregularized optimum.
    pub v_star: StateValue,
    pub pi_star: Policy,
    pub degenerate_optimum: bool,
    /// `v_{pi_k}` (regularized for reg-MPI), `k = 1..=K`.
    pub policy_values: Vec<StateValue>,
    /// `l_k`, `k = 1..=K`.
    pub loss: Vec<StateValue>,
    /// `L_k`, `k = 1..=K`.
    pub regret: Vec<StateValue>,
    /// `d_k`, `k = 0..=K`.
    pub distance: Vec<StateValue>,
    /// `s_k`, `k = 1..=K`.
    pub shift: Vec<StateValue>,
    /// `b_k`, `k = 0..K`.
    pub residual: Vec<StateValue>,
}

impl DiagnosticsRecord {
    pub fn loss_sup(&self) -> Vec<f64> {
        self.loss.iter().map(|l| l.sup_norm()).collect()
    }

    pub fn regret_sup(&self) -> Vec<f64> {
        self.regret.iter().map(|l| l.sup_norm()).collect()
    }
}

fn check_trace(trace: &IterationTrace, mdp: &TabularMdp) -> Result<()> {
    mdp.check_states("trace values", trace.v0.len())?;
    mdp.check_policy(&trace.pi0)?;
    for rec in &trace.iterations {
        mdp.check_policy(&rec.policy)?;
        mdp.check_states("trace values", rec.value.len())?;
    }
    if trace.is_empty() {
        return Err(Error::Shape("trace has no iterations".into()));
    }
    Ok(())
}

/// Losses, regrets, distances, shifts and residuals of a trace. Losses are
/// regularized for reg-MPI and unregularized for the other schemes.
pub fn compute_diagnostics(trace: &IterationTrace, mdp: &TabularMdp) -> Result<DiagnosticsRecord> {
    check_trace(trace, mdp)?;
    let tol = trace.config.tol;
    let opt = solve_unregularized(mdp, tol)?;
    let base = trace.base_regularizer()?;
    let regularized = trace.config.scheme == SchemeKind::RegMpi;
    let reference: StateValue = if regularized {
        optimal_value(&EvalContext::new(mdp, base)?, tol)?.0
    } else {
        opt.value.clone()
    };
    let ctx = EvalContext::new(mdp, base)?;

    let n = mdp.n_states();
    let mut policy_values = Vec::with_capacity(trace.len());
    let mut loss = Vec::with_capacity(trace.len());
    let mut regret = Vec::with_capacity(trace.len());
    let mut shift = Vec::with_capacity(trace.len());
    let mut distance = vec![diff(&reference, &trace.v0)];
    let mut residual = Vec::with_capacity(trace.len());
    let mut running = vec![0.0; n];
    for rec in &trace.iterations {
        let v_pi = if regularized {
            policy_value(&ctx, &rec.policy)?
        } else {
            unregularized_value(mdp, &rec.policy)?
        };
        let before_noise: Vec<f64> = rec.value.iter().zip(&rec.eval_error).map(|(v, e)| v - e).collect();
        let l = diff(&reference, &v_pi);
        running.iter_mut().zip(l.iter()).for_each(|(r, x)| *r += x);
        distance.push(diff(&reference, &before_noise));
        shift.push(diff(&before_noise, &v_pi));
        loss.push(l);
        regret.push(StateValue(running.clone()));
        residual.push(StateValue(rec.bellman_residual.clone()));
        policy_values.push(v_pi);
    }
    Ok(DiagnosticsRecord {
        scheme: trace.config.scheme,
        gamma: mdp.gamma(),
        reference,
        v_star: opt.value,
        pi_star: opt.policy,
        degenerate_optimum: opt.degenerate,
        policy_values,
        loss,
        regret,
        distance,
        shift,
        residual,
    })
}

fn diff(a: &[f64], b: &[f64]) -> StateValue {
    StateValue(a.iter().zip(b).map(|(x, y)| x - y).collect())
}

/// `‖sup_pi alpha D(pi || pi_0)‖`, attained at a vertex of each simplex.
pub fn bregman_radius(reg: &Regularizer, pi0: &Policy) -> Result<f64> {
    if reg.kind != RegularizerKind::Tsallis && pi0.min_prob() <= 0.0 {
        return Err(Error::UnsupportedRegularizer(
            "KL radius is unbounded for an anchor with zero entries".into(),
        ));
    }
    let r = pi0
        .rows()
        .map(|row| divergence_radius(reg.kind, row))
        .fold(0.0, f64::max);
    Ok(reg.scale * r)
}

/// Scalars and rows of a trace, with the prefix bound filled in.
pub fn bound_inputs(trace: &IterationTrace, diag: &DiagnosticsRecord) -> Result<BoundInputs> {
    let cfg = &trace.config;
    let base = trace.base_regularizer()?;
    let radius = match cfg.scheme {
        SchemeKind::MdMpi1 | SchemeKind::MdMpi2 => bregman_radius(&base, &trace.pi0)?,
        SchemeKind::WeightedRegMpi => Regularizer::new(base.kind, 1.0)?.bounds(trace.pi0.n_actions()).1,
        SchemeKind::RegMpi => 0.0,
    };
    let scalars = BoundScalars {
        scheme: cfg.scheme,
        gamma: diag.gamma,
        exact: cfg.error.is_exact(),
        d0_sup: diag.distance[0].sup_norm(),
        b0_sup: diag.residual[0].sup_norm(),
        radius,
        degenerate_optimum: diag.degenerate_optimum,
    };
    let rows = trace
        .iterations
        .iter()
        .enumerate()
        .map(|(i, rec)| DiagnosticsRow {
            k: rec.k,
            loss_sup: diag.loss[i].sup_norm(),
            regret_sup: diag.regret[i].sup_norm(),
            eps_sup: sup_norm(&rec.eval_error),
            eps_prime_sup: rec.eps_prime,
            eps_prime_gap: rec.eps_prime_gap,
            bellman_residual_sup: sup_norm(&rec.bellman_residual),
            bound_rhs: 0.0,
            alpha_k: rec.alpha,
        })
        .collect();
    let mut inputs = BoundInputs { scalars, rows };
    fill_prefix_bounds(&mut inputs);
    Ok(inputs)
}

/// Sets each row's `bound_rhs` to the scheme's bound on its first k iterations.
pub fn fill_prefix_bounds(inputs: &mut BoundInputs) {
    let series = Series::new(inputs);
    let rhs: Vec<f64> = (1..=inputs.rows.len())
        .map(|k| match inputs.scalars.scheme {
            SchemeKind::RegMpi => series.loss_rhs(k),
            SchemeKind::MdMpi1 | SchemeKind::MdMpi2 => series.grouped_rhs(k, series.radius_term(k)),
            SchemeKind::WeightedRegMpi => series.grouped_rhs(k, series.weighted_term(k)),
        })
        .collect();
    inputs.rows.iter_mut().zip(rhs).for_each(|(row, r)| row.bound_rhs = r);
}

/// Per-iteration norms, 1-based through the accessors.
struct Series<'a> {
    gamma: f64,
    scalars: &'a BoundScalars,
    eps: Vec<f64>,
    eps_prime: Vec<f64>,
    alpha: Vec<f64>,
}

impl<'a> Series<'a> {
    fn new(inputs: &'a BoundInputs) -> Self {
        let md = inputs.scalars.scheme.is_md();
        Series {
            gamma: inputs.scalars.gamma,
            scalars: &inputs.scalars,
            eps: inputs.rows.iter().map(|r| r.eps_sup).collect(),
            eps_prime: inputs
                .rows
                .iter()
                .map(|r| if md { r.eps_prime_sup } else { r.eps_prime_gap })
                .collect(),
            alpha: inputs.rows.iter().map(|r| r.alpha_k).collect(),
        }
    }

    fn eps(&self, k: usize) -> f64 {
        self.eps[k - 1]
    }

    fn eps_prime(&self, k: usize) -> f64 {
        self.eps_prime[k - 1]
    }

    fn pow(&self, i: usize) -> f64 {
        self.gamma.powi(i as i32)
    }

    fn h0(&self) -> f64 {
        self.scalars.d0_sup.min(self.scalars.b0_sup)
    }

    /// Loss bound of reg-MPI after k iterations.
    fn loss_rhs(&self, k: usize) -> f64 {
        let c = 1.0 - self.gamma;
        let mut s_eps = 0.0;
        for i in 1..k {
            s_eps += self.pow(i) * self.eps(k - i);
        }
        let mut s_prime = 0.0;
        for i in 0..k {
            s_prime += self.pow(i) * self.eps_prime(k - i);
        }
        2.0 * s_eps / c + s_prime / c + 2.0 * self.pow(k) / c * self.h0()
    }

    /// `sum_{k=1}^K 2 gamma^k / (1 - gamma) min(‖d_0‖, ‖b_0‖)`.
    fn initial_term(&self, big_k: usize) -> f64 {
        let c = 1.0 - self.gamma;
        (1..=big_k).map(|k| 2.0 * self.pow(k) / c).sum::<f64>() * self.h0()
    }

    fn radius_term(&self, big_k: usize) -> f64 {
        let c = 1.0 - self.gamma;
        (1.0 - self.pow(big_k)) / (c * c) * self.scalars.radius
    }

    fn weighted_term(&self, big_k: usize) -> f64 {
        let c = 1.0 - self.gamma;
        let alpha_sum: f64 = self.alpha[..big_k].iter().sum();
        (1.0 - self.pow(big_k)) / (c * c) * self.scalars.radius * alpha_sum
    }

    /// Regret bound with its double sums written out.
    fn literal_rhs(&self, big_k: usize, last: f64) -> f64 {
        let c = 1.0 - self.gamma;
        let mut total = 0.0;
        for k in 2..=big_k {
            for i in 1..k {
                total += 2.0 * self.pow(i) / c * self.eps(k - i);
            }
        }
        for k in 1..=big_k {
            for i in 0..k {
                total += self.pow(i) / c * self.eps_prime(k - i);
            }
        }
        total + self.initial_term(big_k) + last
    }

    /// The same regret bound with the errors summed first.
    fn grouped_rhs(&self, big_k: usize, last: f64) -> f64 {
        let c = 1.0 - self.gamma;
        let mut cum_eps = vec![0.0; big_k + 1];
        let mut cum_prime = vec![0.0; big_k + 1];
        for j in 1..=big_k {
            cum_eps[j] = cum_eps[j - 1] + self.eps(j);
            cum_prime[j] = cum_prime[j - 1] + self.eps_prime(j);
        }
        let mut total = 0.0;
        for i in 1..big_k {
            total += self.pow(i) / c * 2.0 * cum_eps[big_k - i];
        }
        for i in 0..big_k {
            total += self.pow(i) / c * cum_prime[big_k - i];
        }
        total + self.initial_term(big_k) + last
    }

    fn echo(&self, big_k: usize) -> BoundEcho {
        BoundEcho {
            gamma: self.gamma,
            k: big_k,
            eps_sup: self.eps[..big_k].iter().copied().fold(0.0, f64::max),
            eps_prime_sup: self.eps_prime[..big_k].iter().copied().fold(0.0, f64::max),
            radius: self.scalars.radius,
            d0_sup: self.scalars.d0_sup,
            b0_sup: self.scalars.b0_sup,
        }
    }
}

/// Evaluates the requested reports after the first `big_k` iterations.
pub fn evaluate_bounds_at(inputs: &BoundInputs, kinds: &[BoundKind], big_k: usize) -> Result<Vec<BoundReport>> {
    if big_k == 0 || big_k > inputs.rows.len() {
        return Err(Error::Range(format!(
            "bound evaluated at K={big_k} on {} iterations",
            inputs.rows.len()
        )));
    }
    let scheme = inputs.scalars.scheme;
    let series = Series::new(inputs);
    let row = &inputs.rows[big_k - 1];
    let echo = series.echo(big_k);
    let c = 1.0 - series.gamma;
    let wrong = |kind: BoundKind| {
        Error::Config(format!("{} does not apply to {}", kind.name(), scheme.name()))
    };
    kinds
        .iter()
        .map(|&kind| {
            Ok(match kind {
                BoundKind::LossBoundRegMpi => {
                    if scheme != SchemeKind::RegMpi {
                        return Err(wrong(kind));
                    }
                    BoundReport::new(kind, row.loss_sup, series.loss_rhs(big_k), echo.clone())
                }
                BoundKind::RegretBoundMdMpi | BoundKind::GroupedErrorsMdMpi => {
                    if !scheme.is_md() {
                        return Err(wrong(kind));
                    }
                    let last = series.radius_term(big_k);
                    let rhs = if kind == BoundKind::RegretBoundMdMpi {
                        series.literal_rhs(big_k, last)
                    } else {
                        series.grouped_rhs(big_k, last)
                    };
                    BoundReport::new(kind, row.regret_sup, rhs, echo.clone())
                }
                BoundKind::ExactRateMdMpi => {
                    if !scheme.is_md() {
                        return Err(wrong(kind));
                    }
                    let k = big_k as f64;
                    let rhs = (1.0 - series.pow(big_k)) / (c * c)
                        * (2.0 * series.gamma * inputs.scalars.d0_sup + inputs.scalars.radius)
                        / k;
                    BoundReport::new(kind, row.regret_sup / k, rhs, echo.clone())
                }
                BoundKind::AsymptoticMdMpi => {
                    if !scheme.is_md() {
                        return Err(wrong(kind));
                    }
                    let rhs = ASYMPTOTIC_SLACK * (2.0 * series.gamma * echo.eps_sup + echo.eps_prime_sup) / (c * c);
                    BoundReport::new(kind, row.regret_sup / big_k as f64, rhs, echo.clone())
                }
                BoundKind::RegretBoundWeighted => {
                    if scheme != SchemeKind::WeightedRegMpi {
                        return Err(wrong(kind));
                    }
                    let rhs = series.literal_rhs(big_k, series.weighted_term(big_k));
                    BoundReport::new(kind, row.regret_sup, rhs, echo.clone())
                }
                other => {
                    return Err(Error::Config(format!(
                        "{} needs the full trace, not just diagnostics",
                        other.name()
                    )))
                }
            })
        })
        .collect()
}

/// Evaluates the requested reports after all iterations.
pub fn evaluate_bounds(inputs: &BoundInputs, kinds: &[BoundKind]) -> Result<Vec<BoundReport>> {
    evaluate_bounds_at(inputs, kinds, inputs.rows.len())
}

/// Loss bound of a reg-MPI run.
pub fn bound_reg_mpi_supnorm(diag: &DiagnosticsRecord, trace: &IterationTrace) -> Result<BoundReport> {
    if trace.config.scheme != SchemeKind::RegMpi {
        return Err(Error::Config("loss bound needs a reg_mpi trace".into()));
    }
    let inputs = bound_inputs(trace, diag)?;
    Ok(evaluate_bounds(&inputs, &[BoundKind::LossBoundRegMpi])?.remove(0))
}

/// Regret bound of an MD-MPI run, plus the exact-case rate when no noise was
/// injected.
pub fn bound_md_mpi_regret(diag: &DiagnosticsRecord, trace: &IterationTrace) -> Result<Vec<BoundReport>> {
    if !trace.config.scheme.is_md() {
        return Err(Error::Config("regret bound needs an md_mpi trace".into()));
    }
    let inputs = bound_inputs(trace, diag)?;
    let mut kinds = vec![BoundKind::RegretBoundMdMpi];
    if inputs.scalars.exact {
        kinds.push(BoundKind::ExactRateMdMpi);
    }
    evaluate_bounds(&inputs, &kinds)
}

/// Regret bound of a weighted reg-MPI run.
pub fn bound_weighted(diag: &DiagnosticsRecord, trace: &IterationTrace) -> Result<BoundReport> {
    if trace.config.scheme != SchemeKind::WeightedRegMpi {
        return Err(Error::Config("weighted bound needs a weighted_reg_mpi trace".into()));
    }
    let inputs = bound_inputs(trace, diag)?;
    Ok(evaluate_bounds(&inputs, &[BoundKind::RegretBoundWeighted])?.remove(0))
}

/// `min_k ‖v* - v_{pi_k}‖_{1,rho}` against `‖L_K‖ / K`; `rho` defaults to uniform.
pub fn best_policy_report(diag: &DiagnosticsRecord, rho: Option<&[f64]>) -> Result<BoundReport> {
    let n = diag.v_star.len();
    let uniform = vec![1.0 / n as f64; n];
    let rho = rho.unwrap_or(&uniform);
    if rho.len() != n {
        return Err(crate::error::shape_err("rho", n, rho.len()));
    }
    let best = diag
        .policy_values
        .iter()
        .map(|v| {
            diag.v_star
                .iter()
                .zip(v.iter())
                .zip(rho)
                .map(|((a, b), w)| w * (a - b).abs())
                .sum::<f64>()
        })
        .fold(f64::INFINITY, f64::min);
    let k = diag.regret.len();
    let rhs = diag.regret[k - 1].sup_norm() / k as f64;
    Ok(BoundReport::new(
        BoundKind::BestPolicyLoss,
        best,
        rhs,
        BoundEcho {
            gamma: diag.gamma,
            k,
            ..BoundEcho::default()
        },
    ))
}

/// Both value sandwiches for `pi` and the regularized optimum, then the
/// unregularized performance of the regularized optimal policy.
pub fn sandwich_report(mdp: &TabularMdp, reg: &PolicyRegularizer, pi: &Policy, tol: f64) -> Result<(BoundReport, BoundReport)> {
    let ctx = EvalContext::new(mdp, reg.clone())?;
    let (lo, hi) = reg.bounds(mdp.n_states(), mdp.n_actions());
    let c = 1.0 - mdp.gamma();
    let v_pi = unregularized_value(mdp, pi)?;
    let v_pi_reg = policy_value(&ctx, pi)?;
    let opt = solve_unregularized(mdp, tol)?;
    let (v_star_reg, pi_star_reg) = optimal_value(&ctx, tol)?;
    let v_of_reg_opt = unregularized_value(mdp, &pi_star_reg)?;

    let mut sandwich: f64 = f64::NEG_INFINITY;
    for (plain, reg_value) in [(&v_pi, &v_pi_reg), (&opt.value, &v_star_reg)] {
        for (u, r) in plain.iter().zip(reg_value.iter()) {
            sandwich = sandwich.max((u - hi / c) - r).max(r - (u - lo / c));
        }
    }
    let mut perf: f64 = f64::NEG_INFINITY;
    for (star, got) in opt.value.iter().zip(v_of_reg_opt.iter()) {
        perf = perf.max((star - (hi - lo) / c) - got).max(got - star);
    }
    let echo = BoundEcho {
        gamma: mdp.gamma(),
        radius: hi - lo,
        ..BoundEcho::default()
    };
    Ok((
        BoundReport::componentwise(BoundKind::ValueSandwich, sandwich, echo.clone()),
        BoundReport::componentwise(BoundKind::OriginalMdpPerformance, perf, echo),
    ))
}

/// `(gamma P)^m x`; zero for an infinite number of steps.
fn propagate(kernel: &[f64], n: usize, gamma: f64, x: &[f64], m: Steps) -> Vec<f64> {
    match m {
        Steps::Infinite => vec![0.0; n],
        Steps::Finite(m) => {
            let mut y = x.to_vec();
            for _ in 0..m {
                y = apply_kernel(kernel, n, gamma, &y);
            }
            y
        }
    }
}

fn apply_kernel(kernel: &[f64], n: usize, gamma: f64, x: &[f64]) -> Vec<f64> {
    (0..n)
        .map(|s| gamma * kernel[s * n..(s + 1) * n].iter().zip(x).map(|(p, v)| p * v).sum::<f64>())
        .collect()
}

/// Checks the residual, shift and distance recursions of an MD-MPI trace
/// component-wise, using the measured errors.
pub fn check_recursions(trace: &IterationTrace, mdp: &TabularMdp, diag: &DiagnosticsRecord) -> Result<Vec<BoundReport>> {
    if !trace.config.scheme.is_md() {
        return Err(Error::Config("recursions are stated for md_mpi traces".into()));
    }
    check_trace(trace, mdp)?;
    let n = mdp.n_states();
    let gamma = mdp.gamma();
    let m = trace.config.m;
    let big_k = trace.len();
    let base = trace.base_regularizer()?;

    let kernels: Vec<Vec<f64>> = (0..=big_k)
        .map(|k| induced_dynamics(mdp, trace.policy(k)).map(|d| d.kernel))
        .collect::<Result<_>>()?;
    let star_kernel = induced_dynamics(mdp, &diag.pi_star)?.kernel;
    let eps = |k: usize| -> Vec<f64> {
        if k == 0 {
            vec![0.0; n]
        } else {
            trace.iterations[k - 1].eval_error.clone()
        }
    };
    let eps_prime = |k: usize| trace.iterations[k - 1].eps_prime;
    let b = |k: usize| &diag.residual[k];

    let mut worst_b = f64::NEG_INFINITY;
    for k in 1..big_k {
        let prop = propagate(&kernels[k], n, gamma, b(k - 1), m);
        let e = eps(k);
        let pe = apply_kernel(&kernels[k], n, gamma, &e);
        for s in 0..n {
            let rhs = prop[s] + e[s] - pe[s] + eps_prime(k + 1);
            worst_b = worst_b.max(b(k)[s] - rhs);
        }
    }

    let mut worst_s = f64::NEG_INFINITY;
    for k in 1..=big_k {
        let resolved = solve_resolvent(&kernels[k], n, gamma, b(k - 1), false)?;
        let rhs = propagate(&kernels[k], n, gamma, &resolved, m);
        for s in 0..n {
            worst_s = worst_s.max(diag.shift[k - 1][s] - rhs[s]);
        }
    }

    let star_rows: Vec<Vec<f64>> = diag.pi_star.rows().map(|r| r.to_vec()).collect();
    let divergence = |pi: &Policy, s: usize| base.anchored(pi.row(s)).value_unchecked(&star_rows[s]);
    let mut worst_d = f64::NEG_INFINITY;
    for k in 1..big_k {
        let d_k = &diag.distance[k];
        let pd = apply_kernel(&star_kernel, n, gamma, d_k);
        let pe = apply_kernel(&star_kernel, n, gamma, &eps(k));
        let kernel = &kernels[k + 1];
        let tail = match m {
            Steps::Infinite => {
                let resolved = solve_resolvent(kernel, n, gamma, b(k), false)?;
                apply_kernel(kernel, n, gamma, &resolved)
            }
            Steps::Finite(m) => {
                let mut acc = vec![0.0; n];
                let mut y = b(k).to_vec();
                for _ in 1..m {
                    y = apply_kernel(kernel, n, gamma, &y);
                    acc.iter_mut().zip(&y).for_each(|(a, v)| *a += v);
                }
                acc
            }
        };
        for s in 0..n {
            let delta = divergence(trace.policy(k), s) - divergence(trace.policy(k + 1), s);
            let rhs = pd[s] - pe[s] + eps_prime(k + 1) + tail[s] + delta;
            worst_d = worst_d.max(diag.distance[k + 1][s] - rhs);
        }
    }

    let echo = BoundEcho {
        gamma,
        k: big_k,
        ..BoundEcho::default()
    };
    let fix = |x: f64| if x.is_finite() { x } else { 0.0 };
    Ok(vec![
        BoundReport::componentwise(BoundKind::ResidualRecursion, fix(worst_b), echo.clone()),
        BoundReport::componentwise(BoundKind::ShiftRecursion, fix(worst_s), echo.clone()),
        BoundReport::componentwise(BoundKind::DistanceRecursion, fix(worst_d), echo),
    ])
}

/// `sum_k [D(pi*||pi_k) - D(pi*||pi_{k+1})]` and `D(pi*||pi_0) - D(pi*||pi_K)`
/// at every state, for an MD-MPI trace.
pub fn divergence_telescope(trace: &IterationTrace, pi_star: &Policy) -> Result<(Vec<f64>, Vec<f64>)> {
    let base = trace.base_regularizer()?;
    let n = pi_star.n_states();
    let d = |pi: &Policy, s: usize| base.anchored(pi.row(s)).value(pi_star.row(s));
    let mut summed = vec![0.0; n];
    let mut ends = vec![0.0; n];
    for (s, (sum, end)) in summed.iter_mut().zip(ends.iter_mut()).enumerate() {
        for k in 0..trace.len() {
            *sum += d(trace.policy(k), s)? - d(trace.policy(k + 1), s)?;
        }
        *end = d(trace.policy(0), s)? - d(trace.policy(trace.len()), s)?;
    }
    Ok((summed, ends))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::{generate_garnet, GarnetParams};
    use crate::regularizer::RegularizerConfig;
    use crate::schemes::{run_scheme, ErrorModel, SchemeConfig};
    use std::f64::consts::LN_2;

    fn config(scheme: SchemeKind, kind: RegularizerKind, m: Steps, k: usize) -> SchemeConfig {
        SchemeConfig::new(
            scheme,
            m,
            k,
            RegularizerConfig {
                kind,
                scale: 1.0,
                bregman: scheme.is_md(),
            },
        )
    }

    #[test]
    fn radius_examples() {
        let kl = Regularizer::negative_entropy();
        assert!((bregman_radius(&kl, &Policy::uniform(3, 4)).unwrap() - 4f64.ln()).abs() < 1e-15);
        assert!((bregman_radius(&kl, &Policy::uniform(1, 2)).unwrap() - LN_2).abs() < 1e-15);
        let vertex = Policy::deterministic(2, &[0]).unwrap();
        assert_eq!(bregman_radius(&Regularizer::tsallis(), &vertex).unwrap(), 1.0);
        assert!(matches!(bregman_radius(&kl, &vertex), Err(Error::UnsupportedRegularizer(_))));
    }

    #[test]
    fn exact_rate_arithmetic() {
        let rows = (1..=100)
            .map(|k| DiagnosticsRow {
                k,
                loss_sup: 0.0,
                regret_sup: 0.0,
                eps_sup: 0.0,
                eps_prime_sup: 0.0,
                eps_prime_gap: 0.0,
                bellman_residual_sup: 0.0,
                bound_rhs: 0.0,
                alpha_k: 1.0,
            })
            .collect();
        let inputs = BoundInputs {
            scalars: BoundScalars {
                scheme: SchemeKind::MdMpi1,
                gamma: 0.9,
                exact: true,
                d0_sup: 1.0,
                b0_sup: 5.0,
                radius: LN_2,
                degenerate_optimum: false,
            },
            rows,
        };
        let r = evaluate_bounds(&inputs, &[BoundKind::ExactRateMdMpi]).unwrap();
        assert!((r[0].rhs - 2.4930).abs() < 1e-4, "{}", r[0].rhs);
    }

    #[test]
    fn exact_reg_mpi_bound_is_initial_term() {
        let mdp = generate_garnet(&GarnetParams::new(10, 3, 2, 0.5), 1).unwrap();
        let trace = run_scheme(&mdp, &config(SchemeKind::RegMpi, RegularizerKind::NegativeEntropy, Steps::Finite(1), 20)).unwrap();
        let diag = compute_diagnostics(&trace, &mdp).unwrap();
        let report = bound_reg_mpi_supnorm(&diag, &trace).unwrap();
        assert!(report.holds);
        let g: f64 = 0.9;
        let h = report.inputs.d0_sup.min(report.inputs.b0_sup);
        let initial = 2.0 * g.powi(20) / (1.0 - g) * h;
        // measured greedy errors are at roundoff level
        assert!((report.rhs - initial).abs() < 1e-12);
        for (k, l) in diag.loss.iter().enumerate() {
            let d = &diag.distance[k + 1];
            let s = &diag.shift[k];
            for i in 0..10 {
                assert!((l[i] - d[i] - s[i]).abs() <= 1e-9);
                assert!(l[i] >= -1e-9);
            }
        }
    }

    #[test]
    fn noisy_reg_mpi_bound_holds() {
        let mdp = generate_garnet(&GarnetParams::new(30, 4, 2, 0.5), 3).unwrap();
        let mut c = config(SchemeKind::RegMpi, RegularizerKind::KlUniform, Steps::Finite(5), 50);
        c.error = ErrorModel {
            eval_sup: 0.05,
            greedy_sup: 0.0,
        };
        let trace = run_scheme(&mdp, &c).unwrap();
        let diag = compute_diagnostics(&trace, &mdp).unwrap();
        let report = bound_reg_mpi_supnorm(&diag, &trace).unwrap();
        assert!(report.holds && report.margin > 0.0);
    }

    #[test]
    fn md_mpi_reports_and_recursions() {
        let mdp = generate_garnet(&GarnetParams::new(12, 3, 2, 0.5), 4).unwrap();
        for scheme in [SchemeKind::MdMpi1, SchemeKind::MdMpi2] {
            for m in [Steps::Finite(1), Steps::Finite(3), Steps::Infinite] {
                let mut c = config(scheme, RegularizerKind::NegativeEntropy, m, 40);
                c.error = ErrorModel {
                    eval_sup: 0.05,
                    greedy_sup: 0.05,
                };
                let trace = run_scheme(&mdp, &c).unwrap();
                let diag = compute_diagnostics(&trace, &mdp).unwrap();
                let inputs = bound_inputs(&trace, &diag).unwrap();
                let reports = evaluate_bounds(
                    &inputs,
                    &[BoundKind::RegretBoundMdMpi, BoundKind::GroupedErrorsMdMpi, BoundKind::AsymptoticMdMpi],
                )
                .unwrap();
                assert!(reports.iter().all(|r| r.holds), "{reports:?}");
                assert!((reports[0].rhs - reports[1].rhs).abs() <= 1e-9 * reports[0].rhs.max(1.0));
                for r in check_recursions(&trace, &mdp, &diag).unwrap() {
                    assert!(r.holds, "{scheme:?} {m} {r:?}");
                }
            }
        }
    }

    #[test]
    fn telescope_sums() {
        let mdp = generate_garnet(&GarnetParams::new(10, 3, 2, 0.5), 6).unwrap();
        let trace = run_scheme(&mdp, &config(SchemeKind::MdMpi2, RegularizerKind::NegativeEntropy, Steps::Infinite, 30)).unwrap();
        let opt = solve_unregularized(&mdp, 1e-10).unwrap();
        let (summed, ends) = divergence_telescope(&trace, &opt.policy).unwrap();
        for (a, b) in summed.iter().zip(&ends) {
            assert!((a - b).abs() <= 1e-8);
        }
    }

    #[test]
    fn sandwich_on_one_state() {
        let mdp = TabularMdp::new(1, 2, vec![1.0, 1.0], vec![1.0, 0.0], 0.5).unwrap();
        let reg: PolicyRegularizer = Regularizer::negative_entropy().into();
        let (prop, perf) = sandwich_report(&mdp, &reg, &Policy::uniform(1, 2), 1e-12).unwrap();
        assert!(prop.holds && perf.holds);
        let zero: PolicyRegularizer = Regularizer::unregularized().into();
        let (prop, perf) = sandwich_report(&mdp, &zero, &Policy::uniform(1, 2), 1e-12).unwrap();
        assert!(prop.lhs.abs() < 1e-9 && perf.lhs.abs() < 1e-9);
    }

    #[test]
    fn wrong_scheme_is_config_error() {
        let mdp = generate_garnet(&GarnetParams::new(5, 2, 2, 0.5), 1).unwrap();
        let trace = run_scheme(&mdp, &config(SchemeKind::RegMpi, RegularizerKind::Tsallis, Steps::Finite(1), 3)).unwrap();
        let diag = compute_diagnostics(&trace, &mdp).unwrap();
        assert!(matches!(bound_md_mpi_regret(&diag, &trace), Err(Error::Config(_))));
        assert!(matches!(bound_weighted(&diag, &trace), Err(Error::Config(_))));
    }
}

//! reg-MPI, mirror-descent MPI (types 1 and 2) and weighted reg-MPI, with
//! uniform noise injected in the greedy and evaluation steps.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::de::{self, Deserializer, Visitor};
use serde::{Deserialize, Serialize, Serializer};

use crate::bellman::{eval_from_q, eval_power, greedy_from_q, omega_of_policy, opt_from_q, value_with_penalty, EvalContext};
use crate::error::{Error, Result};
use crate::mdp::{dot, q_from_v, Policy, StateActionValue, StateValue, TabularMdp};
use crate::regularizer::{
    floor_distribution, max_of, PolicyRegularizer, Regularizer, RegularizerConfig, RegularizerKind,
    SimplexRegularizer,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchemeKind {
    RegMpi,
    #[serde(rename = "md_mpi_1")]
    MdMpi1,
    #[serde(rename = "md_mpi_2")]
    MdMpi2,
    WeightedRegMpi,
}

impl SchemeKind {
    pub fn is_md(self) -> bool {
        matches!(self, SchemeKind::MdMpi1 | SchemeKind::MdMpi2)
    }

    pub fn name(self) -> &'static str {
        match self {
            SchemeKind::RegMpi => "reg_mpi",
            SchemeKind::MdMpi1 => "md_mpi_1",
            SchemeKind::MdMpi2 => "md_mpi_2",
            SchemeKind::WeightedRegMpi => "weighted_reg_mpi",
        }
    }
}

/// Number of evaluation steps per iteration; `Infinite` is an exact solve.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Steps {
    Finite(usize),
    Infinite,
}

impl fmt::Display for Steps {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Steps::Finite(m) => write!(f, "{m}"),
            Steps::Infinite => f.write_str("inf"),
        }
    }
}

impl Serialize for Steps {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Steps::Finite(m) => s.serialize_u64(*m as u64),
            Steps::Infinite => s.serialize_str("inf"),
        }
    }
}

impl<'de> Deserialize<'de> for Steps {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        struct StepsVisitor;
        impl Visitor<'_> for StepsVisitor {
            type Value = Steps;
            fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str("a positive integer or \"inf\"")
            }
            fn visit_u64<E: de::Error>(self, v: u64) -> std::result::Result<Steps, E> {
                Ok(Steps::Finite(v as usize))
            }
            fn visit_i64<E: de::Error>(self, v: i64) -> std::result::Result<Steps, E> {
                usize::try_from(v)
                    .map(Steps::Finite)
                    .map_err(|_| E::invalid_value(de::Unexpected::Signed(v), &self))
            }
            fn visit_str<E: de::Error>(self, v: &str) -> std::result::Result<Steps, E> {
                match v {
                    "inf" | "infinity" => Ok(Steps::Infinite),
                    _ => Err(E::invalid_value(de::Unexpected::Str(v), &self)),
                }
            }
        }
        d.deserialize_any(StepsVisitor)
    }
}

/// Step sizes `alpha_k`, `k = 0, 1, ...`, of the weighted scheme.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum AlphaSchedule {
    Constant {
        alpha: f64,
    },
    /// `alpha0 / (k + 1)`.
    InverseK {
        #[serde(default = "one")]
        alpha0: f64,
    },
    /// `alpha0 / sqrt(k + 1)`.
    InverseSqrtK {
        #[serde(default = "one")]
        alpha0: f64,
    },
}

fn one() -> f64 {
    1.0
}

impl AlphaSchedule {
    pub fn alpha(&self, k: usize) -> f64 {
        let n = (k + 1) as f64;
        match *self {
            AlphaSchedule::Constant { alpha } => alpha,
            AlphaSchedule::InverseK { alpha0 } => alpha0 / n,
            AlphaSchedule::InverseSqrtK { alpha0 } => alpha0 / n.sqrt(),
        }
    }

    fn validate(&self) -> Result<()> {
        let a = match *self {
            AlphaSchedule::Constant { alpha } => alpha,
            AlphaSchedule::InverseK { alpha0 } | AlphaSchedule::InverseSqrtK { alpha0 } => alpha0,
        };
        if !(a.is_finite() && a > 0.0) {
            return Err(Error::Config(format!(
                "alpha schedule must be positive and non-increasing, got {a}"
            )));
        }
        Ok(())
    }
}

/// Sup-norms of the uniform noise added to `v_{k+1}` and to `q_k`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ErrorModel {
    #[serde(default)]
    pub eval_sup: f64,
    #[serde(default)]
    pub greedy_sup: f64,
}

impl ErrorModel {
    pub fn exact() -> Self {
        ErrorModel::default()
    }

    pub fn is_exact(&self) -> bool {
        self.eval_sup == 0.0 && self.greedy_sup == 0.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SchemeConfig {
    pub scheme: SchemeKind,
    pub m: Steps,
    #[serde(rename = "K")]
    pub k: usize,
    pub regularizer: RegularizerConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha_schedule: Option<AlphaSchedule>,
    #[serde(default)]
    pub error: ErrorModel,
    #[serde(default)]
    pub seed: u64,
    /// Tolerance of the reference solves used by the analysis.
    #[serde(default = "default_tol")]
    pub tol: f64,
}

fn default_tol() -> f64 {
    1e-10
}

impl SchemeConfig {
    pub fn new(scheme: SchemeKind, m: Steps, k: usize, regularizer: RegularizerConfig) -> Self {
        SchemeConfig {
            scheme,
            m,
            k,
            regularizer,
            alpha_schedule: None,
            error: ErrorModel::exact(),
            seed: 0,
            tol: default_tol(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.m == Steps::Finite(0) {
            return Err(Error::Config("m must be at least 1".into()));
        }
        if self.k == 0 {
            return Err(Error::Config("K must be at least 1".into()));
        }
        let ErrorModel { eval_sup, greedy_sup } = self.error;
        if !(eval_sup.is_finite() && eval_sup >= 0.0 && greedy_sup.is_finite() && greedy_sup >= 0.0) {
            return Err(Error::Config("noise levels must be finite and nonnegative".into()));
        }
        if !(self.tol.is_finite() && self.tol > 0.0) {
            return Err(Error::Config(format!("tol must be positive, got {}", self.tol)));
        }
        let base = self.regularizer.base()?;
        match self.scheme {
            SchemeKind::MdMpi1 | SchemeKind::MdMpi2 => {
                if !self.regularizer.bregman {
                    return Err(Error::Config("md_mpi schemes need a bregman regularizer".into()));
                }
            }
            SchemeKind::RegMpi | SchemeKind::WeightedRegMpi => {
                if self.regularizer.bregman {
                    return Err(Error::Config(format!(
                        "{} takes a fixed regularizer, not a bregman one",
                        self.scheme.name()
                    )));
                }
            }
        }
        match (self.scheme, &self.alpha_schedule) {
            (SchemeKind::WeightedRegMpi, None) => {
                return Err(Error::Config("weighted_reg_mpi needs an alpha_schedule".into()))
            }
            (SchemeKind::WeightedRegMpi, Some(schedule)) => {
                schedule.validate()?;
                if base.bounds(2).0 < 0.0 {
                    return Err(Error::Config(
                        "weighted_reg_mpi needs a nonnegative regularizer (kl_uniform)".into(),
                    ));
                }
            }
            (_, Some(_)) => {
                return Err(Error::Config(format!(
                    "alpha_schedule does not apply to {}",
                    self.scheme.name()
                )))
            }
            (_, None) => {}
        }
        Ok(())
    }

    /// Scale of the regularizer used to produce `pi_{k+1}`.
    pub fn alpha_at(&self, k: usize) -> f64 {
        match &self.alpha_schedule {
            Some(schedule) if self.scheme == SchemeKind::WeightedRegMpi => {
                self.regularizer.scale * schedule.alpha(k)
            }
            _ => self.regularizer.scale,
        }
    }
}

/// One iteration `k >= 1` of a scheme run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub k: usize,
    /// `pi_k`.
    pub policy: Policy,
    /// `v_k`, including the injected error.
    pub value: StateValue,
    /// `epsilon_k`.
    pub eval_error: Vec<f64>,
    /// Greedy error of `pi_k` in the variational-inequality sense.
    pub eps_prime: f64,
    /// Greedy error of `pi_k` as an operator gap.
    pub eps_prime_gap: f64,
    /// `b_{k-1} = v_{k-1} - T v_{k-1}` for the evaluation operator of step k.
    pub bellman_residual: Vec<f64>,
    /// Scale of the regularizer that produced `pi_k`.
    pub alpha: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationTrace {
    pub config: SchemeConfig,
    pub seed: u64,
    pub v0: StateValue,
    pub pi0: Policy,
    pub iterations: Vec<IterationRecord>,
}

impl IterationTrace {
    pub fn len(&self) -> usize {
        self.iterations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.iterations.is_empty()
    }

    /// `pi_k` for `k = 0..=K`.
    pub fn policy(&self, k: usize) -> &Policy {
        if k == 0 {
            &self.pi0
        } else {
            &self.iterations[k - 1].policy
        }
    }

    /// `v_k` for `k = 0..=K`.
    pub fn value(&self, k: usize) -> &[f64] {
        if k == 0 {
            &self.v0
        } else {
            &self.iterations[k - 1].value
        }
    }

    pub fn base_regularizer(&self) -> Result<Regularizer> {
        self.config.regularizer.base()
    }

    /// Regularizer used in the greedy step producing `pi_{k+1}`.
    pub fn greedy_regularizer(&self, k: usize) -> Result<PolicyRegularizer> {
        let base = self.base_regularizer()?;
        Ok(match self.config.scheme {
            SchemeKind::MdMpi1 | SchemeKind::MdMpi2 => PolicyRegularizer::bregman(base, self.policy(k)),
            SchemeKind::RegMpi => base.into(),
            SchemeKind::WeightedRegMpi => Regularizer::new(base.kind, self.config.alpha_at(k))?.into(),
        })
    }

    /// Per-state penalty of the evaluation step producing `v_{k+1}`.
    pub fn evaluation_penalty(&self, k: usize) -> Result<Vec<f64>> {
        let pi = self.policy(k + 1);
        if self.config.scheme == SchemeKind::MdMpi2 {
            return Ok(vec![0.0; pi.n_states()]);
        }
        Ok(omega_of_policy(&self.greedy_regularizer(k)?, pi))
    }
}

/// Both measures of how far a candidate is from the regularized greedy policy.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GreedyEpsilon {
    /// `max_s max_pi <grad J(candidate), pi - candidate>`, first-order sense.
    pub variational: f64,
    /// `max_s [T_* v - T_candidate v]`.
    pub gap: f64,
}

/// Greedy error of `candidate` with respect to `ctx.reg` (anchor included) and `v`.
pub fn measure_greedy_epsilon(ctx: &EvalContext, v: &[f64], candidate: &Policy) -> Result<GreedyEpsilon> {
    ctx.mdp.check_policy(candidate)?;
    let q = q_from_v(ctx.mdp, v)?;
    Ok(greedy_epsilon_from_q(&ctx.reg, &q, candidate))
}

pub(crate) fn greedy_epsilon_from_q(reg: &PolicyRegularizer, q: &StateActionValue, candidate: &Policy) -> GreedyEpsilon {
    let mut variational: f64 = 0.0;
    let mut gap: f64 = 0.0;
    for s in 0..q.n_states() {
        let local = reg.at(s);
        let (qs, ps) = (q.row(s), candidate.row(s));
        let g: Vec<f64> = qs.iter().zip(local.gradient(ps)).map(|(x, d)| x - d).collect();
        variational = variational.max(max_of(&g) - dot(&g, ps));
        gap = gap.max(local.conjugate_unchecked(qs) - (dot(ps, qs) - local.value_unchecked(ps)));
    }
    GreedyEpsilon {
        variational: variational.max(0.0),
        gap: gap.max(0.0),
    }
}

/// Starting point of a run.
#[derive(Clone, Debug, PartialEq)]
pub struct InitialState {
    pub v0: StateValue,
    pub pi0: Policy,
}

impl InitialState {
    /// `v_0 = 0`, `pi_0` uniform.
    pub fn default_for(mdp: &TabularMdp) -> Self {
        InitialState {
            v0: StateValue::zeros(mdp.n_states()),
            pi0: Policy::uniform(mdp.n_states(), mdp.n_actions()),
        }
    }
}

pub fn run_reg_mpi(mdp: &TabularMdp, config: &SchemeConfig) -> Result<IterationTrace> {
    expect_scheme(config, &[SchemeKind::RegMpi])?;
    run_scheme(mdp, config)
}

pub fn run_md_mpi(mdp: &TabularMdp, config: &SchemeConfig) -> Result<IterationTrace> {
    expect_scheme(config, &[SchemeKind::MdMpi1, SchemeKind::MdMpi2])?;
    run_scheme(mdp, config)
}

pub fn run_weighted_reg_mpi(mdp: &TabularMdp, config: &SchemeConfig) -> Result<IterationTrace> {
    expect_scheme(config, &[SchemeKind::WeightedRegMpi])?;
    run_scheme(mdp, config)
}

fn expect_scheme(config: &SchemeConfig, allowed: &[SchemeKind]) -> Result<()> {
    if allowed.contains(&config.scheme) {
        Ok(())
    } else {
        Err(Error::Config(format!("unexpected scheme {}", config.scheme.name())))
    }
}

/// Runs whichever scheme `config` names from the default starting point.
pub fn run_scheme(mdp: &TabularMdp, config: &SchemeConfig) -> Result<IterationTrace> {
    run_scheme_from(mdp, config, InitialState::default_for(mdp))
}

pub fn run_scheme_from(mdp: &TabularMdp, config: &SchemeConfig, init: InitialState) -> Result<IterationTrace> {
    config.validate()?;
    mdp.check_states("v0", init.v0.len())?;
    mdp.check_policy(&init.pi0)?;
    let base = config.regularizer.base()?;
    let kl_anchor = config.scheme.is_md() && base.kind != RegularizerKind::Tsallis;
    let mut pi0 = init.pi0;
    if kl_anchor {
        pi0 = crate::regularizer::floor_policy(&pi0);
    }
    let mut trace = IterationTrace {
        config: config.clone(),
        seed: config.seed,
        v0: init.v0,
        pi0,
        iterations: Vec::with_capacity(config.k),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let (ns, na) = (mdp.n_states(), mdp.n_actions());
    let ErrorModel { eval_sup, greedy_sup } = config.error;

    for k in 0..config.k {
        let v = trace.value(k).to_vec();
        let reg = trace.greedy_regularizer(k)?;
        let q = q_from_v(mdp, &v)?;

        let mut pi = if greedy_sup > 0.0 {
            let mut noisy = q.clone();
            for x in noisy.values_mut() {
                *x += rng.random_range(-greedy_sup..=greedy_sup);
            }
            greedy_from_q(&reg, &noisy)
        } else {
            greedy_from_q(&reg, &q)
        };
        if kl_anchor && pi.min_prob() < crate::regularizer::ANCHOR_FLOOR {
            let mut probs = pi.probs().to_vec();
            probs.chunks_mut(na).for_each(floor_distribution);
            pi = Policy::from_rows_unchecked(ns, na, probs);
        }
        let eps = greedy_epsilon_from_q(&reg, &q, &pi);

        let omega = if config.scheme == SchemeKind::MdMpi2 {
            vec![0.0; ns]
        } else {
            omega_of_policy(&reg, &pi)
        };
        let one_step = eval_from_q(&pi, &omega, &q);
        let residual: Vec<f64> = v.iter().zip(&one_step).map(|(a, b)| a - b).collect();

        let exact_vi = config.m == Steps::Finite(1)
            && greedy_sup == 0.0
            && matches!(config.scheme, SchemeKind::RegMpi | SchemeKind::WeightedRegMpi);
        let mut next = match config.m {
            // same arithmetic as repeated opt_operator
            Steps::Finite(1) if exact_vi => opt_from_q(&reg, &q),
            Steps::Finite(m) => eval_power(mdp, &pi, &omega, &one_step, m - 1),
            Steps::Infinite => value_with_penalty(mdp, &pi, &omega)?,
        };
        let eval_error: Vec<f64> = if eval_sup > 0.0 {
            (0..ns).map(|_| rng.random_range(-eval_sup..=eval_sup)).collect()
        } else {
            vec![0.0; ns]
        };
        next.iter_mut().zip(&eval_error).for_each(|(x, e)| *x += e);

        log::debug!(
            "{} k={} eps'={:.3e} gap={:.3e}",
            config.scheme.name(),
            k + 1,
            eps.variational,
            eps.gap
        );
        trace.iterations.push(IterationRecord {
            k: k + 1,
            policy: pi,
            value: next.into(),
            eval_error,
            eps_prime: eps.variational,
            eps_prime_gap: eps.gap,
            bellman_residual: residual,
            alpha: config.alpha_at(k),
        });
    }
    Ok(trace)
}

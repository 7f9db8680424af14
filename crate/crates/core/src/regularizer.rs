//! Strongly convex regularizers on the action simplex together with their
//! Legendre-Fenchel conjugates and maximizing arguments.
//!
//! | kind         | `Omega(p)`                 | `Omega*(q)`              | `grad Omega*(q)` |
//! |--------------|----------------------------|--------------------------|------------------|
//! | negative entropy | `sum p ln p`           | `ln sum exp q`           | softmax          |
//! | KL to uniform    | `sum p ln p + ln n`    | `ln (1/n) sum exp q`     | softmax          |
//! | Tsallis          | `(‖p‖² - 1) / 2`       | `<p*, q> - Omega(p*)`    | sparsemax        |
//!
//! A scale `alpha` gives `(alpha Omega)*(q) = alpha Omega*(q / alpha)`; `alpha = 0`
//! degenerates to the hard maximum with lowest-index tie-breaking.
//!
//! Anchoring a base regularizer at a distribution `p'` gives its Bregman
//! divergence `D(p||p')`: the KL divergence for the entropic bases and
//! `‖p - p'‖² / 2` for Tsallis.

use std::ops::Deref;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::mdp::{dot, Policy};

/// Entries of a KL anchor are kept at or above this mass.
pub const ANCHOR_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegularizerKind {
    #[serde(alias = "entropy")]
    NegativeEntropy,
    KlUniform,
    #[serde(alias = "quadratic")]
    Tsallis,
}

/// A distribution over actions.
#[derive(Clone, Debug, PartialEq)]
pub struct SimplexPoint(Vec<f64>);

impl SimplexPoint {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        check_distribution(&probs)?;
        Ok(SimplexPoint(probs))
    }

    pub fn uniform(n: usize) -> Self {
        SimplexPoint(vec![1.0 / n as f64; n])
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }
}

impl Deref for SimplexPoint {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

fn check_distribution(p: &[f64]) -> Result<()> {
    if p.is_empty() {
        return Err(Error::Shape("empty distribution".into()));
    }
    if let Some(x) = p.iter().find(|x| !(x.is_finite() && **x >= 0.0)) {
        return Err(Error::Domain(format!("{x} is not a probability")));
    }
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > crate::mdp::ROW_TOL {
        return Err(Error::Stochasticity(format!("distribution sums to {sum}")));
    }
    Ok(())
}

fn check_nonnegative(p: &[f64]) -> Result<()> {
    match p.iter().find(|x| !(x.is_finite() && **x >= 0.0)) {
        Some(x) => Err(Error::Domain(format!("{x} is not a probability"))),
        None => Ok(()),
    }
}

fn check_finite(q: &[f64]) -> Result<()> {
    if q.is_empty() {
        return Err(Error::Shape("empty action vector".into()));
    }
    match q.iter().find(|x| !x.is_finite()) {
        Some(x) => Err(Error::Domain(format!("non-finite input {x}"))),
        None => Ok(()),
    }
}

/// Operations every regularizer of a single action distribution provides.
pub trait SimplexRegularizer {
    /// `Omega(p)`.
    fn value(&self, p: &[f64]) -> Result<f64>;
    /// `max_p <p, q> - Omega(p)`.
    fn conjugate(&self, q: &[f64]) -> Result<f64>;
    /// The unique maximizer of `<p, q> - Omega(p)`.
    fn greedy(&self, q: &[f64]) -> Result<SimplexPoint>;
    /// `grad Omega(p)`; log terms are clamped at the smallest positive float.
    fn gradient(&self, p: &[f64]) -> Vec<f64>;
    /// `(L, U)` with `L <= Omega <= U` on the simplex over `n_actions`.
    fn bounds(&self, n_actions: usize) -> (f64, f64);
}

/// A fixed (state-independent) regularizer `alpha * Omega`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Regularizer {
    pub kind: RegularizerKind,
    pub scale: f64,
}

impl Regularizer {
    pub fn new(kind: RegularizerKind, scale: f64) -> Result<Self> {
        if !(scale.is_finite() && scale >= 0.0) {
            return Err(Error::Domain(format!("regularizer scale must be >= 0, got {scale}")));
        }
        Ok(Regularizer { kind, scale })
    }

    pub fn negative_entropy() -> Self {
        Regularizer {
            kind: RegularizerKind::NegativeEntropy,
            scale: 1.0,
        }
    }

    pub fn kl_uniform() -> Self {
        Regularizer {
            kind: RegularizerKind::KlUniform,
            scale: 1.0,
        }
    }

    pub fn tsallis() -> Self {
        Regularizer {
            kind: RegularizerKind::Tsallis,
            scale: 1.0,
        }
    }

    /// Zero regularizer: hard max and argmax.
    pub fn unregularized() -> Self {
        Regularizer {
            kind: RegularizerKind::NegativeEntropy,
            scale: 0.0,
        }
    }

    /// Multiplies the current scale by `alpha`.
    pub fn scaled(self, alpha: f64) -> Result<Self> {
        Regularizer::new(self.kind, self.scale * alpha)
    }

    pub fn is_zero(&self) -> bool {
        self.scale == 0.0
    }

    /// Bregman divergence generated by this regularizer, anchored at `anchor`.
    pub fn anchored(self, anchor: &[f64]) -> Bregman<'_> {
        Bregman { base: self, anchor }
    }

    pub(crate) fn conjugate_unchecked(&self, q: &[f64]) -> f64 {
        if self.scale == 0.0 {
            return max_of(q);
        }
        let a = self.scale;
        match self.kind {
            RegularizerKind::NegativeEntropy => a * log_sum_exp_scaled(q, a),
            RegularizerKind::KlUniform => a * (log_sum_exp_scaled(q, a) - (q.len() as f64).ln()),
            RegularizerKind::Tsallis => {
                let p = sparsemax_scaled(q, a);
                dot(&p, q) - 0.5 * a * (dot(&p, &p) - 1.0)
            }
        }
    }

    pub(crate) fn greedy_into(&self, q: &[f64], out: &mut [f64]) {
        if self.scale == 0.0 {
            return argmax_into(q, out);
        }
        match self.kind {
            RegularizerKind::NegativeEntropy | RegularizerKind::KlUniform => {
                let scaled: Vec<f64> = q.iter().map(|x| x / self.scale).collect();
                softmax_into(&scaled, out)
            }
            RegularizerKind::Tsallis => out.copy_from_slice(&sparsemax_scaled(q, self.scale)),
        }
    }

    pub(crate) fn value_unchecked(&self, p: &[f64]) -> f64 {
        if self.scale == 0.0 {
            return 0.0;
        }
        let raw = match self.kind {
            RegularizerKind::NegativeEntropy => neg_entropy(p),
            RegularizerKind::KlUniform => neg_entropy(p) + (p.len() as f64).ln(),
            RegularizerKind::Tsallis => 0.5 * (dot(p, p) - 1.0),
        };
        self.scale * raw
    }
}

impl SimplexRegularizer for Regularizer {
    fn value(&self, p: &[f64]) -> Result<f64> {
        check_nonnegative(p)?;
        Ok(self.value_unchecked(p))
    }

    fn conjugate(&self, q: &[f64]) -> Result<f64> {
        check_finite(q)?;
        Ok(self.conjugate_unchecked(q))
    }

    fn greedy(&self, q: &[f64]) -> Result<SimplexPoint> {
        check_finite(q)?;
        let mut out = vec![0.0; q.len()];
        self.greedy_into(q, &mut out);
        Ok(SimplexPoint(out))
    }

    fn gradient(&self, p: &[f64]) -> Vec<f64> {
        let a = self.scale;
        match self.kind {
            RegularizerKind::NegativeEntropy | RegularizerKind::KlUniform => {
                p.iter().map(|&x| a * (safe_ln(x) + 1.0)).collect()
            }
            RegularizerKind::Tsallis => p.iter().map(|&x| a * x).collect(),
        }
    }

    fn bounds(&self, n_actions: usize) -> (f64, f64) {
        let n = n_actions as f64;
        let (lo, hi) = match self.kind {
            RegularizerKind::NegativeEntropy => (-n.ln(), 0.0),
            RegularizerKind::KlUniform => (0.0, n.ln()),
            RegularizerKind::Tsallis => (0.5 * (1.0 / n - 1.0), 0.0),
        };
        (self.scale * lo, self.scale * hi)
    }
}

/// `alpha * D(p || anchor)` for the divergence generated by `base`.
#[derive(Clone, Copy, Debug)]
pub struct Bregman<'a> {
    pub base: Regularizer,
    pub anchor: &'a [f64],
}

impl Bregman<'_> {
    fn is_kl(&self) -> bool {
        self.base.kind != RegularizerKind::Tsallis
    }

    pub(crate) fn value_unchecked(&self, p: &[f64]) -> f64 {
        if self.base.scale == 0.0 {
            return 0.0;
        }
        let raw = if self.is_kl() {
            kl_divergence(p, self.anchor)
        } else {
            0.5 * p.iter().zip(self.anchor).map(|(x, y)| (x - y) * (x - y)).sum::<f64>()
        };
        self.base.scale * raw
    }

    pub(crate) fn conjugate_unchecked(&self, q: &[f64]) -> f64 {
        let a = self.base.scale;
        if a == 0.0 {
            return max_of(q);
        }
        if self.is_kl() {
            let logits: Vec<f64> = q.iter().zip(self.anchor).map(|(x, w)| w.ln() + x / a).collect();
            a * log_sum_exp(&logits)
        } else {
            let mut p = vec![0.0; q.len()];
            self.greedy_into(q, &mut p);
            dot(&p, q) - self.value_unchecked(&p)
        }
    }

    pub(crate) fn greedy_into(&self, q: &[f64], out: &mut [f64]) {
        let a = self.base.scale;
        if a == 0.0 {
            return argmax_into(q, out);
        }
        if self.is_kl() {
            let logits: Vec<f64> = q.iter().zip(self.anchor).map(|(x, w)| w.ln() + x / a).collect();
            softmax_into(&logits, out)
        } else {
            let shifted: Vec<f64> = q.iter().zip(self.anchor).map(|(x, w)| w + x / a).collect();
            out.copy_from_slice(&simplex_project_raw(&shifted))
        }
    }

    fn check_anchor(&self, len: usize) -> Result<()> {
        if self.anchor.len() != len {
            return Err(shape_err("anchor", len, self.anchor.len()));
        }
        Ok(())
    }
}

impl SimplexRegularizer for Bregman<'_> {
    fn value(&self, p: &[f64]) -> Result<f64> {
        check_nonnegative(p)?;
        self.check_anchor(p.len())?;
        if self.is_kl() {
            check_support(p, self.anchor)?;
        }
        Ok(self.value_unchecked(p))
    }

    fn conjugate(&self, q: &[f64]) -> Result<f64> {
        check_finite(q)?;
        self.check_anchor(q.len())?;
        Ok(self.conjugate_unchecked(q))
    }

    fn greedy(&self, q: &[f64]) -> Result<SimplexPoint> {
        check_finite(q)?;
        self.check_anchor(q.len())?;
        let mut out = vec![0.0; q.len()];
        self.greedy_into(q, &mut out);
        Ok(SimplexPoint(out))
    }

    fn gradient(&self, p: &[f64]) -> Vec<f64> {
        let a = self.base.scale;
        if self.is_kl() {
            p.iter()
                .zip(self.anchor)
                .map(|(&x, &w)| a * (safe_ln(x) - safe_ln(w)))
                .collect()
        } else {
            p.iter().zip(self.anchor).map(|(x, w)| a * (x - w)).collect()
        }
    }

    fn bounds(&self, _n_actions: usize) -> (f64, f64) {
        (0.0, self.base.scale * divergence_radius(self.base.kind, self.anchor))
    }
}

/// `sup_p D(p || anchor)`, attained at a vertex.
pub(crate) fn divergence_radius(kind: RegularizerKind, anchor: &[f64]) -> f64 {
    match kind {
        RegularizerKind::Tsallis => (0..anchor.len())
            .map(|a| {
                0.5 * anchor
                    .iter()
                    .enumerate()
                    .map(|(b, w)| {
                        let e = if a == b { 1.0 } else { 0.0 };
                        (e - w) * (e - w)
                    })
                    .sum::<f64>()
            })
            .fold(0.0, f64::max),
        _ => anchor.iter().map(|w| -w.ln()).fold(0.0, f64::max),
    }
}

/// Regularizer of a whole policy, evaluated state by state.
#[derive(Clone, Debug, PartialEq)]
pub enum PolicyRegularizer {
    Fixed(Regularizer),
    /// Bregman divergence of `base` anchored at a policy.
    Anchored { base: Regularizer, anchor: Policy },
}

/// The regularizer acting at one state.
#[derive(Clone, Copy, Debug)]
pub enum StateRegularizer<'a> {
    Fixed(Regularizer),
    Bregman(Bregman<'a>),
}

impl PolicyRegularizer {
    /// Anchors `base` at `anchor`; entropic anchors are floored at
    /// [`ANCHOR_FLOOR`] first.
    pub fn bregman(base: Regularizer, anchor: &Policy) -> Self {
        let anchor = if base.kind == RegularizerKind::Tsallis {
            anchor.clone()
        } else {
            floor_policy(anchor)
        };
        PolicyRegularizer::Anchored { base, anchor }
    }

    #[inline]
    pub fn at(&self, s: usize) -> StateRegularizer<'_> {
        match self {
            PolicyRegularizer::Fixed(r) => StateRegularizer::Fixed(*r),
            PolicyRegularizer::Anchored { base, anchor } => StateRegularizer::Bregman(Bregman {
                base: *base,
                anchor: anchor.row(s),
            }),
        }
    }

    pub fn base(&self) -> Regularizer {
        match self {
            PolicyRegularizer::Fixed(r) => *r,
            PolicyRegularizer::Anchored { base, .. } => *base,
        }
    }

    pub fn n_actions_hint(&self) -> Option<usize> {
        match self {
            PolicyRegularizer::Fixed(_) => None,
            PolicyRegularizer::Anchored { anchor, .. } => Some(anchor.n_actions()),
        }
    }

    /// `(L, U)` valid at every state.
    pub fn bounds(&self, n_states: usize, n_actions: usize) -> (f64, f64) {
        (0..n_states.max(1)).fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), s| {
            let (l, u) = self.at(s).bounds(n_actions);
            (lo.min(l), hi.max(u))
        })
    }
}

impl From<Regularizer> for PolicyRegularizer {
    fn from(r: Regularizer) -> Self {
        PolicyRegularizer::Fixed(r)
    }
}

impl StateRegularizer<'_> {
    #[inline]
    pub(crate) fn value_unchecked(&self, p: &[f64]) -> f64 {
        match self {
            StateRegularizer::Fixed(r) => r.value_unchecked(p),
            StateRegularizer::Bregman(b) => b.value_unchecked(p),
        }
    }

    #[inline]
    pub(crate) fn conjugate_unchecked(&self, q: &[f64]) -> f64 {
        match self {
            StateRegularizer::Fixed(r) => r.conjugate_unchecked(q),
            StateRegularizer::Bregman(b) => b.conjugate_unchecked(q),
        }
    }

    #[inline]
    pub(crate) fn greedy_into(&self, q: &[f64], out: &mut [f64]) {
        match self {
            StateRegularizer::Fixed(r) => r.greedy_into(q, out),
            StateRegularizer::Bregman(b) => b.greedy_into(q, out),
        }
    }
}

impl SimplexRegularizer for StateRegularizer<'_> {
    fn value(&self, p: &[f64]) -> Result<f64> {
        match self {
            StateRegularizer::Fixed(r) => r.value(p),
            StateRegularizer::Bregman(b) => b.value(p),
        }
    }

    fn conjugate(&self, q: &[f64]) -> Result<f64> {
        match self {
            StateRegularizer::Fixed(r) => r.conjugate(q),
            StateRegularizer::Bregman(b) => b.conjugate(q),
        }
    }

    fn greedy(&self, q: &[f64]) -> Result<SimplexPoint> {
        match self {
            StateRegularizer::Fixed(r) => r.greedy(q),
            StateRegularizer::Bregman(b) => b.greedy(q),
        }
    }

    fn gradient(&self, p: &[f64]) -> Vec<f64> {
        match self {
            StateRegularizer::Fixed(r) => r.gradient(p),
            StateRegularizer::Bregman(b) => b.gradient(p),
        }
    }

    fn bounds(&self, n_actions: usize) -> (f64, f64) {
        match self {
            StateRegularizer::Fixed(r) => r.bounds(n_actions),
            StateRegularizer::Bregman(b) => b.bounds(n_actions),
        }
    }
}

/// Regularizer fragment of the experiment configs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegularizerConfig {
    pub kind: RegularizerKind,
    #[serde(default = "one")]
    pub scale: f64,
    #[serde(default)]
    pub bregman: bool,
}

fn one() -> f64 {
    1.0
}

impl RegularizerConfig {
    pub fn base(&self) -> Result<Regularizer> {
        Regularizer::new(self.kind, self.scale).map_err(|e| Error::Config(e.to_string()))
    }
}

pub fn omega_value<R: SimplexRegularizer + ?Sized>(reg: &R, p: &[f64]) -> Result<f64> {
    reg.value(p)
}

pub fn conjugate_value<R: SimplexRegularizer + ?Sized>(reg: &R, q: &[f64]) -> Result<f64> {
    reg.conjugate(q)
}

pub fn greedy_distribution<R: SimplexRegularizer + ?Sized>(reg: &R, q: &[f64]) -> Result<SimplexPoint> {
    reg.greedy(q)
}

/// `D(p || anchor)` generated by `base` (its scale applied).
pub fn bregman_value(base: &Regularizer, p: &[f64], anchor: &[f64]) -> Result<f64> {
    base.anchored(anchor).value(p)
}

/// Euclidean projection onto the simplex by sort and threshold.
pub fn simplex_project(z: &[f64]) -> Result<SimplexPoint> {
    check_finite(z)?;
    Ok(SimplexPoint(simplex_project_raw(z)))
}

pub(crate) fn simplex_project_raw(z: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..z.len()).collect();
    // descending, ties by index
    order.sort_by(|&i, &j| z[j].total_cmp(&z[i]).then(i.cmp(&j)));
    let mut cumsum = 0.0;
    let mut tau = 0.0;
    for (k, &i) in order.iter().enumerate() {
        cumsum += z[i];
        let t = (cumsum - 1.0) / (k + 1) as f64;
        if z[i] - t > 0.0 {
            tau = t;
        } else {
            break;
        }
    }
    z.iter().map(|x| (x - tau).max(0.0)).collect()
}

fn sparsemax_scaled(q: &[f64], scale: f64) -> Vec<f64> {
    if scale == 1.0 {
        simplex_project_raw(q)
    } else {
        let z: Vec<f64> = q.iter().map(|x| x / scale).collect();
        simplex_project_raw(&z)
    }
}

/// Sets entries below [`ANCHOR_FLOOR`] to the floor, taking the added mass
/// from the largest entry. Idempotent.
pub fn floor_distribution(p: &mut [f64]) {
    let mut deficit = 0.0;
    for x in p.iter_mut() {
        if *x < ANCHOR_FLOOR {
            deficit += ANCHOR_FLOOR - *x;
            *x = ANCHOR_FLOOR;
        }
    }
    if deficit > 0.0 {
        let imax = argmax(p);
        p[imax] -= deficit;
    }
}

pub(crate) fn floor_policy(pi: &Policy) -> Policy {
    if pi.min_prob() >= ANCHOR_FLOOR {
        return pi.clone();
    }
    let mut probs = pi.probs().to_vec();
    for row in probs.chunks_mut(pi.n_actions()) {
        floor_distribution(row);
    }
    Policy::from_rows_unchecked(pi.n_states(), pi.n_actions(), probs)
}

fn kl_divergence(p: &[f64], anchor: &[f64]) -> f64 {
    p.iter()
        .zip(anchor)
        .filter(|(x, _)| **x > 0.0)
        .map(|(x, w)| x * (x / w).ln())
        .sum()
}

fn check_support(p: &[f64], anchor: &[f64]) -> Result<()> {
    match p.iter().zip(anchor).position(|(x, w)| *x > 0.0 && *w <= 0.0) {
        Some(a) => Err(Error::Support(format!(
            "anchor puts no mass on action {a} where the distribution does"
        ))),
        None => Ok(()),
    }
}

fn neg_entropy(p: &[f64]) -> f64 {
    p.iter().filter(|x| **x > 0.0).map(|x| x * x.ln()).sum()
}

#[inline]
fn safe_ln(x: f64) -> f64 {
    x.max(f64::MIN_POSITIVE).ln()
}

pub(crate) fn max_of(q: &[f64]) -> f64 {
    q.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

/// Index of the largest entry, lowest index on ties.
pub(crate) fn argmax(q: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in q.iter().enumerate().skip(1) {
        if *x > q[best] {
            best = i;
        }
    }
    best
}

fn argmax_into(q: &[f64], out: &mut [f64]) {
    out.fill(0.0);
    out[argmax(q)] = 1.0;
}

pub(crate) fn log_sum_exp(x: &[f64]) -> f64 {
    let m = max_of(x);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + x.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

fn log_sum_exp_scaled(q: &[f64], scale: f64) -> f64 {
    if scale == 1.0 {
        log_sum_exp(q)
    } else {
        let x: Vec<f64> = q.iter().map(|v| v / scale).collect();
        log_sum_exp(&x)
    }
}

fn softmax_into(x: &[f64], out: &mut [f64]) {
    let m = max_of(x);
    let mut z = 0.0;
    for (o, v) in out.iter_mut().zip(x) {
        *o = (v - m).exp();
        z += *o;
    }
    out.iter_mut().for_each(|o| *o /= z);
}

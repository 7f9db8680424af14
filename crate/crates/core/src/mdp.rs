//! Finite MDP model, policies, value containers, Garnet instances and the
//! MDP JSON format.

use std::fmt::Write as _;
use std::ops::{Deref, DerefMut};

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};

/// Tolerance on every probability row sum.
pub const ROW_TOL: f64 = 1e-12;

/// Rows closer than this to unit mass are left bit-exact; rows between this
/// and [`ROW_TOL`] are renormalized.
const RENORMALIZE_BELOW: f64 = 1e-14;

/// Finite MDP with a dense state-major kernel `P[s][a][s']`.
#[derive(Clone, Debug, PartialEq)]
pub struct TabularMdp {
    n_states: usize,
    n_actions: usize,
    transitions: Vec<f64>,
    rewards: Vec<f64>,
    gamma: f64,
}

impl TabularMdp {
    /// Builds and validates an MDP from flat state-major tensors.
    pub fn new(
        n_states: usize,
        n_actions: usize,
        transitions: Vec<f64>,
        rewards: Vec<f64>,
        gamma: f64,
    ) -> Result<Self> {
        validate_mdp(TabularMdp {
            n_states,
            n_actions,
            transitions,
            rewards,
            gamma,
        })
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

    /// `P(.|s,a)` as a slice over next states.
    #[inline]
    pub fn transition_row(&self, s: usize, a: usize) -> &[f64] {
        let start = (s * self.n_actions + a) * self.n_states;
        &self.transitions[start..start + self.n_states]
    }

    #[inline]
    pub fn reward(&self, s: usize, a: usize) -> f64 {
        self.rewards[s * self.n_actions + a]
    }

    pub fn rewards(&self) -> &[f64] {
        &self.rewards
    }

    pub fn transitions(&self) -> &[f64] {
        &self.transitions
    }

    /// Same dynamics and discount with a different reward tensor.
    pub fn with_rewards(&self, rewards: Vec<f64>) -> Result<Self> {
        if rewards.len() != self.rewards.len() {
            return Err(shape_err("rewards", self.rewards.len(), rewards.len()));
        }
        validate_mdp(TabularMdp {
            rewards,
            ..self.clone()
        })
    }

    pub fn with_gamma(&self, gamma: f64) -> Result<Self> {
        validate_mdp(TabularMdp {
            gamma,
            ..self.clone()
        })
    }

    pub(crate) fn check_states(&self, what: &str, len: usize) -> Result<()> {
        if len != self.n_states {
            return Err(shape_err(what, self.n_states, len));
        }
        Ok(())
    }

    pub(crate) fn check_policy(&self, pi: &Policy) -> Result<()> {
        if pi.n_states != self.n_states || pi.n_actions != self.n_actions {
            return Err(Error::Shape(format!(
                "policy is {}x{}, mdp is {}x{}",
                pi.n_states, pi.n_actions, self.n_states, self.n_actions
            )));
        }
        Ok(())
    }
}

/// Checks every [`TabularMdp`] invariant, renormalizing rows whose mass is
/// off by less than [`ROW_TOL`].
pub fn validate_mdp(mut mdp: TabularMdp) -> Result<TabularMdp> {
    let (ns, na) = (mdp.n_states, mdp.n_actions);
    if ns == 0 || na == 0 {
        return Err(Error::Shape("n_states and n_actions must be positive".into()));
    }
    if mdp.transitions.len() != ns * na * ns {
        return Err(shape_err("transitions", ns * na * ns, mdp.transitions.len()));
    }
    if mdp.rewards.len() != ns * na {
        return Err(shape_err("rewards", ns * na, mdp.rewards.len()));
    }
    if !(mdp.gamma > 0.0 && mdp.gamma < 1.0) {
        return Err(Error::Range(format!(
            "gamma must lie strictly inside (0,1), got {}",
            mdp.gamma
        )));
    }
    if let Some(i) = mdp.rewards.iter().position(|r| !r.is_finite()) {
        return Err(Error::Domain(format!(
            "reward ({}, {}) is not finite",
            i / na,
            i % na
        )));
    }
    for (row_idx, row) in mdp.transitions.chunks_mut(ns).enumerate() {
        let (s, a) = (row_idx / na, row_idx % na);
        normalize_row(row).map_err(|msg| {
            Error::Stochasticity(format!("transition row ({s}, {a}): {msg}"))
        })?;
    }
    Ok(mdp)
}

fn normalize_row(row: &mut [f64]) -> std::result::Result<(), String> {
    if let Some(x) = row.iter().find(|x| !(x.is_finite() && **x >= 0.0)) {
        return Err(format!("entry {x} is not a probability"));
    }
    let sum: f64 = row.iter().sum();
    let dev = (sum - 1.0).abs();
    if dev > ROW_TOL {
        return Err(format!("sums to {sum}"));
    }
    if dev > RENORMALIZE_BELOW {
        row.iter_mut().for_each(|x| *x /= sum);
    }
    Ok(())
}

/// Stochastic policy `pi(a|s)`, state-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Vec<f64>>", into = "Vec<Vec<f64>>")]
pub struct Policy {
    n_states: usize,
    n_actions: usize,
    probs: Vec<f64>,
}

impl Policy {
    pub fn new(n_states: usize, n_actions: usize, mut probs: Vec<f64>) -> Result<Self> {
        if n_states == 0 || n_actions == 0 {
            return Err(Error::Shape("policy dimensions must be positive".into()));
        }
        if probs.len() != n_states * n_actions {
            return Err(shape_err("policy", n_states * n_actions, probs.len()));
        }
        for (s, row) in probs.chunks_mut(n_actions).enumerate() {
            normalize_row(row).map_err(|msg| Error::Stochasticity(format!("policy row {s}: {msg}")))?;
        }
        Ok(Policy {
            n_states,
            n_actions,
            probs,
        })
    }

    pub(crate) fn from_rows_unchecked(n_states: usize, n_actions: usize, probs: Vec<f64>) -> Self {
        debug_assert_eq!(probs.len(), n_states * n_actions);
        Policy {
            n_states,
            n_actions,
            probs,
        }
    }

    pub fn uniform(n_states: usize, n_actions: usize) -> Self {
        Policy {
            n_states,
            n_actions,
            probs: vec![1.0 / n_actions as f64; n_states * n_actions],
        }
    }

    /// One action per state, chosen with probability one.
    pub fn deterministic(n_actions: usize, actions: &[usize]) -> Result<Self> {
        let mut probs = vec![0.0; actions.len() * n_actions];
        for (s, &a) in actions.iter().enumerate() {
            if a >= n_actions {
                return Err(Error::Shape(format!("action {a} out of range at state {s}")));
            }
            probs[s * n_actions + a] = 1.0;
        }
        Policy::new(actions.len(), n_actions, probs)
    }

    /// Draws each row uniformly from the simplex (normalized exponentials).
    pub fn random<R: Rng + ?Sized>(n_states: usize, n_actions: usize, rng: &mut R) -> Self {
        let mut probs = Vec::with_capacity(n_states * n_actions);
        for _ in 0..n_states {
            let row: Vec<f64> = (0..n_actions)
                .map(|_| -(1.0 - rng.random::<f64>()).ln())
                .collect();
            let z: f64 = row.iter().sum();
            probs.extend(row.into_iter().map(|x| x / z));
        }
        Policy {
            n_states,
            n_actions,
            probs,
        }
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    #[inline]
    pub fn row(&self, s: usize) -> &[f64] {
        &self.probs[s * self.n_actions..(s + 1) * self.n_actions]
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.probs.chunks(self.n_actions)
    }

    /// Largest per-state total-variation distance to `other`.
    pub fn max_tv_distance(&self, other: &Policy) -> f64 {
        self.rows()
            .zip(other.rows())
            .map(|(a, b)| 0.5 * a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>())
            .fold(0.0, f64::max)
    }

    pub fn min_prob(&self) -> f64 {
        self.probs.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

impl TryFrom<Vec<Vec<f64>>> for Policy {
    type Error = Error;

    fn try_from(rows: Vec<Vec<f64>>) -> Result<Self> {
        let n_states = rows.len();
        let n_actions = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != n_actions) {
            return Err(Error::Shape("ragged policy rows".into()));
        }
        Policy::new(n_states, n_actions, rows.concat())
    }
}

impl From<Policy> for Vec<Vec<f64>> {
    fn from(p: Policy) -> Self {
        p.probs.chunks(p.n_actions).map(<[f64]>::to_vec).collect()
    }
}

impl std::fmt::Display for Policy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for (s, row) in self.rows().enumerate() {
            let cells: Vec<String> = row.iter().map(|p| format!("{p:.6}")).collect();
            writeln!(f, "{s}: [{}]", cells.join(", "))?;
        }
        Ok(())
    }
}

/// `v(s)`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct StateValue(pub Vec<f64>);

impl StateValue {
    pub fn zeros(n: usize) -> Self {
        StateValue(vec![0.0; n])
    }

    pub fn sup_norm(&self) -> f64 {
        sup_norm(&self.0)
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|x| x.is_finite())
    }
}

impl Deref for StateValue {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl DerefMut for StateValue {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

impl From<Vec<f64>> for StateValue {
    fn from(v: Vec<f64>) -> Self {
        StateValue(v)
    }
}

/// `q(s,a)`, state-major.
#[derive(Clone, Debug, PartialEq)]
pub struct StateActionValue {
    n_states: usize,
    n_actions: usize,
    values: Vec<f64>,
}

impl StateActionValue {
    pub fn new(n_states: usize, n_actions: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != n_states * n_actions {
            return Err(shape_err("state-action values", n_states * n_actions, values.len()));
        }
        Ok(StateActionValue {
            n_states,
            n_actions,
            values,
        })
    }

    #[inline]
    pub fn row(&self, s: usize) -> &[f64] {
        &self.values[s * self.n_actions..(s + 1) * self.n_actions]
    }

    #[inline]
    pub fn row_mut(&mut self, s: usize) -> &mut [f64] {
        &mut self.values[s * self.n_actions..(s + 1) * self.n_actions]
    }

    pub fn get(&self, s: usize, a: usize) -> f64 {
        self.values[s * self.n_actions + a]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }
}

pub(crate) fn sup_norm(x: &[f64]) -> f64 {
    x.iter().fold(0.0, |m, v| m.max(v.abs()))
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `q(s,a) = r(s,a) + gamma * sum_s' P(s'|s,a) v(s')`.
pub fn q_from_v(mdp: &TabularMdp, v: &[f64]) -> Result<StateActionValue> {
    mdp.check_states("value", v.len())?;
    let (ns, na) = (mdp.n_states, mdp.n_actions);
    let mut values = Vec::with_capacity(ns * na);
    for s in 0..ns {
        for a in 0..na {
            values.push(mdp.reward(s, a) + mdp.gamma * dot(mdp.transition_row(s, a), v));
        }
    }
    Ok(StateActionValue {
        n_states: ns,
        n_actions: na,
        values,
    })
}

/// `r_pi` and the row-major `P_pi` induced by a policy.
#[derive(Clone, Debug, PartialEq)]
pub struct InducedDynamics {
    pub reward: Vec<f64>,
    pub kernel: Vec<f64>,
    n_states: usize,
}

impl InducedDynamics {
    #[inline]
    pub fn kernel_row(&self, s: usize) -> &[f64] {
        &self.kernel[s * self.n_states..(s + 1) * self.n_states]
    }

    /// `P_pi x`.
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        (0..self.n_states).map(|s| dot(self.kernel_row(s), x)).collect()
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }
}

pub fn induced_dynamics(mdp: &TabularMdp, pi: &Policy) -> Result<InducedDynamics> {
    mdp.check_policy(pi)?;
    let ns = mdp.n_states;
    let mut reward = vec![0.0; ns];
    let mut kernel = vec![0.0; ns * ns];
    for s in 0..ns {
        let krow = &mut kernel[s * ns..(s + 1) * ns];
        for (a, &p) in pi.row(s).iter().enumerate() {
            if p == 0.0 {
                continue;
            }
            reward[s] += p * mdp.reward(s, a);
            for (k, &t) in krow.iter_mut().zip(mdp.transition_row(s, a)) {
                *k += p * t;
            }
        }
    }
    Ok(InducedDynamics {
        reward,
        kernel,
        n_states: ns,
    })
}

/// Parameters of the Garnet random-MDP family.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GarnetParams {
    pub n_states: usize,
    pub n_actions: usize,
    pub branching: usize,
    pub reward_sparsity: f64,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
}

fn default_gamma() -> f64 {
    0.9
}

impl GarnetParams {
    pub fn new(n_states: usize, n_actions: usize, branching: usize, reward_sparsity: f64) -> Self {
        GarnetParams {
            n_states,
            n_actions,
            branching,
            reward_sparsity,
            gamma: default_gamma(),
        }
    }

    pub fn gamma(mut self, gamma: f64) -> Self {
        self.gamma = gamma;
        self
    }
}

/// Random Garnet instance: each `(s,a)` reaches exactly `branching` distinct
/// successors with normalized uniform weights; `ceil(sparsity * S * A)` pairs
/// carry a reward in `(0,1]`, the rest zero.
pub fn generate_garnet(params: &GarnetParams, seed: u64) -> Result<TabularMdp> {
    let GarnetParams {
        n_states: ns,
        n_actions: na,
        branching,
        reward_sparsity,
        gamma,
    } = *params;
    if ns == 0 || na == 0 {
        return Err(Error::Range("garnet needs at least one state and one action".into()));
    }
    if branching == 0 || branching > ns {
        return Err(Error::Range(format!(
            "branching must lie in [1, {ns}], got {branching}"
        )));
    }
    if !(reward_sparsity > 0.0 && reward_sparsity <= 1.0) {
        return Err(Error::Range(format!(
            "reward sparsity must lie in (0,1], got {reward_sparsity}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut transitions = vec![0.0; ns * na * ns];
    for row in transitions.chunks_mut(ns) {
        let succ = sample(&mut rng, ns, branching);
        let weights: Vec<f64> = (0..branching).map(|_| 1.0 - rng.random::<f64>()).collect();
        let z: f64 = weights.iter().sum();
        for (s2, w) in succ.iter().zip(weights) {
            row[s2] = w / z;
        }
    }
    let n_pairs = ns * na;
    let n_rewarded = ((reward_sparsity * n_pairs as f64).ceil() as usize).clamp(1, n_pairs);
    let mut rewards = vec![0.0; n_pairs];
    for idx in sample(&mut rng, n_pairs, n_rewarded).iter() {
        rewards[idx] = 1.0 - rng.random::<f64>();
    }
    TabularMdp::new(ns, na, transitions, rewards, gamma)
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MdpJson {
    n_states: usize,
    n_actions: usize,
    gamma: f64,
    transitions: Vec<Vec<Vec<f64>>>,
    rewards: Vec<Vec<f64>>,
}

/// Parses the MDP JSON format and validates the result.
pub fn parse_mdp(text: &str) -> Result<TabularMdp> {
    let raw: MdpJson = serde_json::from_str(text)?;
    mdp_from_json(raw)
}

pub(crate) fn parse_mdp_value(value: serde_json::Value) -> Result<TabularMdp> {
    let raw: MdpJson = serde_json::from_value(value)?;
    mdp_from_json(raw)
}

pub(crate) fn mdp_to_value(mdp: &TabularMdp) -> serde_json::Value {
    let (ns, na) = (mdp.n_states, mdp.n_actions);
    let raw = MdpJson {
        n_states: ns,
        n_actions: na,
        gamma: mdp.gamma,
        transitions: (0..ns)
            .map(|s| (0..na).map(|a| mdp.transition_row(s, a).to_vec()).collect())
            .collect(),
        rewards: mdp.rewards.chunks(na).map(<[f64]>::to_vec).collect(),
    };
    serde_json::to_value(raw).expect("plain numeric data serializes")
}

fn mdp_from_json(raw: MdpJson) -> Result<TabularMdp> {
    let (ns, na) = (raw.n_states, raw.n_actions);
    if raw.transitions.len() != ns {
        return Err(shape_err("transitions (states)", ns, raw.transitions.len()));
    }
    if raw.rewards.len() != ns {
        return Err(shape_err("rewards (states)", ns, raw.rewards.len()));
    }
    let mut transitions = Vec::with_capacity(ns * na * ns);
    for (s, per_action) in raw.transitions.iter().enumerate() {
        if per_action.len() != na {
            return Err(shape_err(&format!("transitions[{s}] (actions)"), na, per_action.len()));
        }
        for (a, row) in per_action.iter().enumerate() {
            if row.len() != ns {
                return Err(shape_err(&format!("transitions[{s}][{a}]"), ns, row.len()));
            }
            transitions.extend_from_slice(row);
        }
    }
    let mut rewards = Vec::with_capacity(ns * na);
    for (s, row) in raw.rewards.iter().enumerate() {
        if row.len() != na {
            return Err(shape_err(&format!("rewards[{s}]"), na, row.len()));
        }
        rewards.extend_from_slice(row);
    }
    TabularMdp::new(ns, na, transitions, rewards, raw.gamma)
}

/// Formats a float with 17 significant digits, enough for an exact round trip.
pub fn fmt_f64(x: f64) -> String {
    if x == 0.0 {
        // keeps the sign of -0.0
        return if x.is_sign_negative() { "-0.0".into() } else { "0.0".into() };
    }
    format!("{x:.16e}")
}

fn write_list<I: IntoIterator<Item = f64>>(out: &mut String, xs: I) {
    out.push('[');
    for (i, x) in xs.into_iter().enumerate() {
        if i > 0 {
            out.push_str(", ");
        }
        out.push_str(&fmt_f64(x));
    }
    out.push(']');
}

/// Serializes to the MDP JSON format with 17 significant digits per value.
pub fn serialize_mdp(mdp: &TabularMdp) -> String {
    let (ns, na) = (mdp.n_states, mdp.n_actions);
    let mut out = String::new();
    out.push_str("{\n");
    let _ = writeln!(out, "  \"n_states\": {ns},");
    let _ = writeln!(out, "  \"n_actions\": {na},");
    let _ = writeln!(out, "  \"gamma\": {},", fmt_f64(mdp.gamma));
    out.push_str("  \"transitions\": [\n");
    for s in 0..ns {
        out.push_str("    [");
        for a in 0..na {
            if a > 0 {
                out.push_str(", ");
            }
            write_list(&mut out, mdp.transition_row(s, a).iter().copied());
        }
        out.push(']');
        out.push_str(if s + 1 < ns { ",\n" } else { "\n" });
    }
    out.push_str("  ],\n  \"rewards\": [\n");
    for s in 0..ns {
        out.push_str("    ");
        write_list(&mut out, (0..na).map(|a| mdp.reward(s, a)));
        out.push_str(if s + 1 < ns { ",\n" } else { "\n" });
    }
    out.push_str("  ]\n}\n");
    out
}

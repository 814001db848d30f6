//! Finite constrained MDPs and their exact evaluation.
//!
//! A [`TabularCmdp`] carries rewards in `[0, 1]` and a constraint signal in
//! `[-1, 1]`; a policy is feasible when its discounted constraint value is
//! non-negative. Policy evaluation is done by a dense LU solve of the Bellman
//! linear system so that every other module can use it as ground truth.

use std::fmt;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance for structural invariants (row sums, ranges).
pub const STRUCTURAL_TOL: f64 = 1e-12;

/// A finite CMDP `(S, A, rho, P, r, c, gamma)`.
///
/// `transitions[s][a][s']` is `P(s' | s, a)`; `reward[s][a]` and
/// `constraint[s][a]` are the per-step signals.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TabularCmdp {
    pub n_states: usize,
    pub n_actions: usize,
    pub rho: Vec<f64>,
    #[serde(rename = "P")]
    pub transitions: Vec<Vec<Vec<f64>>>,
    #[serde(rename = "r")]
    pub reward: Vec<Vec<f64>>,
    #[serde(rename = "c")]
    pub constraint: Vec<Vec<f64>>,
    pub gamma: f64,
}

/// What kind of invariant a [`Violation`] breaks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationKind {
    Shape,
    TransitionRowSum,
    NegativeTransition,
    InitialSum,
    NegativeInitial,
    RewardRange,
    ConstraintRange,
    Discount,
}

/// One broken invariant, with its `(state, action)` location when relevant.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub kind: ViolationKind,
    pub location: Option<(usize, usize)>,
    pub magnitude: f64,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let at = match self.location {
            Some((s, a)) => format!(" at ({s},{a})"),
            None => String::new(),
        };
        match self.kind {
            ViolationKind::Shape => write!(f, "shape mismatch{at} (size {})", self.magnitude),
            ViolationKind::TransitionRowSum => {
                write!(f, "row sum {} ≠ 1{at}", self.magnitude)
            }
            ViolationKind::NegativeTransition => {
                write!(f, "negative transition probability {}{at}", self.magnitude)
            }
            ViolationKind::InitialSum => write!(f, "initial distribution sums to {}", self.magnitude),
            ViolationKind::NegativeInitial => {
                write!(f, "negative initial probability {}", self.magnitude)
            }
            ViolationKind::RewardRange => {
                write!(f, "reward out of [0,1]: {}{at}", self.magnitude)
            }
            ViolationKind::ConstraintRange => {
                write!(f, "constraint out of [-1,1]: {}{at}", self.magnitude)
            }
            ViolationKind::Discount => write!(f, "discount {} not in (0,1)", self.magnitude),
        }
    }
}

impl TabularCmdp {
    /// Builds a CMDP, rejecting it if [`validate_cmdp`] reports anything.
    pub fn new(
        rho: Vec<f64>,
        transitions: Vec<Vec<Vec<f64>>>,
        reward: Vec<Vec<f64>>,
        constraint: Vec<Vec<f64>>,
        gamma: f64,
    ) -> Result<Self> {
        let n_states = rho.len();
        let n_actions = reward.first().map_or(0, Vec::len);
        let m = Self {
            n_states,
            n_actions,
            rho,
            transitions,
            reward,
            constraint,
            gamma,
        };
        let violations = validate_cmdp(&m);
        if let Some(v) = violations.first() {
            return Err(Error::InvalidCmdp(format!(
                "{v} ({} violation(s) total)",
                violations.len()
            )));
        }
        Ok(m)
    }

    pub fn same_shape(&self, other: &TabularCmdp) -> bool {
        self.n_states == other.n_states && self.n_actions == other.n_actions
    }

    fn check_shape(&self, other: &TabularCmdp) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::DimensionMismatch(format!(
                "CMDP {}x{} vs {}x{}",
                self.n_states, self.n_actions, other.n_states, other.n_actions
            )))
        }
    }

    /// Samples `s' ~ P(. | s, a)`.
    pub fn sample_next<R: Rng + ?Sized>(&self, s: usize, a: usize, rng: &mut R) -> usize {
        sample_index(&self.transitions[s][a], rng)
    }

    pub fn sample_initial<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        sample_index(&self.rho, rng)
    }

    /// Upper bound `1 / (1 - gamma)` on the magnitude of any value.
    pub fn effective_horizon(&self) -> f64 {
        1.0 / (1.0 - self.gamma)
    }
}

/// Inverse-CDF draw from a probability vector; falls back to the last
/// index with positive mass when round-off leaves the cumulative sum short.
pub(crate) fn sample_index<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(probs.len() - 1)
}

/// Lists every invariant violation of `m`. An empty list means `m` is valid.
pub fn validate_cmdp(m: &TabularCmdp) -> Vec<Violation> {
    let mut out = Vec::new();
    let (ns, na) = (m.n_states, m.n_actions);
    let shape = |loc: Option<(usize, usize)>, size: usize| Violation {
        kind: ViolationKind::Shape,
        location: loc,
        magnitude: size as f64,
    };

    if ns == 0 || na == 0 {
        out.push(shape(None, 0));
        return out;
    }
    if !(m.gamma > 0.0 && m.gamma < 1.0) {
        out.push(Violation {
            kind: ViolationKind::Discount,
            location: None,
            magnitude: m.gamma,
        });
    }
    if m.rho.len() != ns {
        out.push(shape(None, m.rho.len()));
    } else {
        if let Some(&p) = m.rho.iter().find(|&&p| p < 0.0) {
            out.push(Violation {
                kind: ViolationKind::NegativeInitial,
                location: None,
                magnitude: p,
            });
        }
        let sum: f64 = m.rho.iter().sum();
        if (sum - 1.0).abs() > STRUCTURAL_TOL {
            out.push(Violation {
                kind: ViolationKind::InitialSum,
                location: None,
                magnitude: sum,
            });
        }
    }
    if m.transitions.len() != ns || m.reward.len() != ns || m.constraint.len() != ns {
        out.push(shape(None, m.transitions.len()));
        return out;
    }
    for s in 0..ns {
        if m.transitions[s].len() != na || m.reward[s].len() != na || m.constraint[s].len() != na
        {
            out.push(shape(Some((s, 0)), m.transitions[s].len()));
            continue;
        }
        for a in 0..na {
            let row = &m.transitions[s][a];
            if row.len() != ns {
                out.push(shape(Some((s, a)), row.len()));
            } else {
                if let Some(&p) = row.iter().find(|&&p| p < 0.0) {
                    out.push(Violation {
                        kind: ViolationKind::NegativeTransition,
                        location: Some((s, a)),
                        magnitude: p,
                    });
                }
                let sum: f64 = row.iter().sum();
                if (sum - 1.0).abs() > STRUCTURAL_TOL {
                    out.push(Violation {
                        kind: ViolationKind::TransitionRowSum,
                        location: Some((s, a)),
                        magnitude: sum,
                    });
                }
            }
            let r = m.reward[s][a];
            if !(0.0..=1.0).contains(&r) {
                out.push(Violation {
                    kind: ViolationKind::RewardRange,
                    location: Some((s, a)),
                    magnitude: r,
                });
            }
            let c = m.constraint[s][a];
            if !(-1.0..=1.0).contains(&c) {
                out.push(Violation {
                    kind: ViolationKind::ConstraintRange,
                    location: Some((s, a)),
                    magnitude: c,
                });
            }
        }
    }
    out
}

/// A stationary Markov policy: `probs[s][a] = pi(a | s)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Policy {
    pub probs: Vec<Vec<f64>>,
}

impl Policy {
    pub fn new(probs: Vec<Vec<f64>>) -> Result<Self> {
        if probs.is_empty() || probs[0].is_empty() {
            return Err(Error::InvalidInput("empty policy table".into()));
        }
        let na = probs[0].len();
        for (s, row) in probs.iter().enumerate() {
            if row.len() != na {
                return Err(Error::DimensionMismatch(format!(
                    "policy row {s} has {} actions, expected {na}",
                    row.len()
                )));
            }
            if row.iter().any(|&p| p < 0.0) {
                return Err(Error::InvalidInput(format!("negative probability in row {s}")));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > STRUCTURAL_TOL {
                return Err(Error::InvalidInput(format!("policy row {s} sums to {sum}")));
            }
        }
        Ok(Self { probs })
    }

    pub fn uniform(n_states: usize, n_actions: usize) -> Self {
        let p = 1.0 / n_actions as f64;
        Self {
            probs: vec![vec![p; n_actions]; n_states],
        }
    }

    /// Point-mass policy choosing `actions[s]` in state `s`.
    pub fn deterministic(actions: &[usize], n_actions: usize) -> Self {
        let probs = actions
            .iter()
            .map(|&a| {
                let mut row = vec![0.0; n_actions];
                row[a] = 1.0;
                row
            })
            .collect();
        Self { probs }
    }

    pub fn n_states(&self) -> usize {
        self.probs.len()
    }

    pub fn n_actions(&self) -> usize {
        self.probs.first().map_or(0, Vec::len)
    }

    pub fn sample_action<R: Rng + ?Sized>(&self, s: usize, rng: &mut R) -> usize {
        sample_index(&self.probs[s], rng)
    }

    fn check_against(&self, m: &TabularCmdp) -> Result<()> {
        if self.n_states() != m.n_states || self.n_actions() != m.n_actions {
            return Err(Error::DimensionMismatch(format!(
                "policy {}x{} vs CMDP {}x{}",
                self.n_states(),
                self.n_actions(),
                m.n_states,
                m.n_actions
            )));
        }
        Ok(())
    }
}

/// A distribution over base policies: one component is drawn at the start
/// of an episode and followed for the whole episode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixturePolicy {
    pub components: Vec<Policy>,
    pub weights: Vec<f64>,
}

impl MixturePolicy {
    pub fn new(components: Vec<Policy>, weights: Vec<f64>) -> Result<Self> {
        if components.is_empty() {
            return Err(Error::InvalidInput("mixture has no components".into()));
        }
        if components.len() != weights.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} components but {} weights",
                components.len(),
                weights.len()
            )));
        }
        if weights.iter().any(|&w| w < 0.0) {
            return Err(Error::InvalidInput("negative mixture weight".into()));
        }
        let sum: f64 = weights.iter().sum();
        if (sum - 1.0).abs() > STRUCTURAL_TOL {
            return Err(Error::InvalidInput(format!("mixture weights sum to {sum}")));
        }
        Ok(Self {
            components,
            weights,
        })
    }

    pub fn single(policy: Policy) -> Self {
        Self {
            components: vec![policy],
            weights: vec![1.0],
        }
    }

    /// `alpha * candidate + (1 - alpha) * fallback`.
    pub fn blend(candidate: &Policy, fallback: &Policy, alpha: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::InvalidInput(format!("mixture weight {alpha} outside [0,1]")));
        }
        Self::new(
            vec![candidate.clone(), fallback.clone()],
            vec![alpha, 1.0 - alpha],
        )
    }

    pub fn sample_component<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        sample_index(&self.weights, rng)
    }
}

/// Discounted reward and constraint values of a policy.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ValuePair {
    pub v_reward: f64,
    pub v_constraint: f64,
}

impl ValuePair {
    pub fn new(v_reward: f64, v_constraint: f64) -> Self {
        Self {
            v_reward,
            v_constraint,
        }
    }
}

/// The smoothness constant `L = 1/(1-gamma) + 2 gamma / (1-gamma)^2`
/// bounding `|V^{M1}(pi) - V^{M2}(pi)| <= L d(M1, M2)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SmoothnessConstant(pub f64);

impl SmoothnessConstant {
    pub fn from_gamma(gamma: f64) -> Self {
        let h = 1.0 / (1.0 - gamma);
        Self(h + 2.0 * gamma * h * h)
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

/// Policy-averaged transition matrix and per-state reward/constraint.
fn policy_system(m: &TabularCmdp, pi: &Policy) -> (DMatrix<f64>, DVector<f64>, DVector<f64>) {
    let n = m.n_states;
    let mut p = DMatrix::<f64>::zeros(n, n);
    let mut r = DVector::<f64>::zeros(n);
    let mut c = DVector::<f64>::zeros(n);
    for s in 0..n {
        for a in 0..m.n_actions {
            let w = pi.probs[s][a];
            if w == 0.0 {
                continue;
            }
            r[s] += w * m.reward[s][a];
            c[s] += w * m.constraint[s][a];
            for (t, &q) in m.transitions[s][a].iter().enumerate() {
                p[(s, t)] += w * q;
            }
        }
    }
    (p, r, c)
}

/// Per-state values `(V_r(s), V_c(s))` from `(I - gamma P_pi) x = r_pi`.
pub fn exact_state_values(m: &TabularCmdp, pi: &Policy) -> Result<(Vec<f64>, Vec<f64>)> {
    pi.check_against(m)?;
    let n = m.n_states;
    let (p, r, c) = policy_system(m, pi);
    let a = DMatrix::<f64>::identity(n, n) - p * m.gamma;
    let mut rhs = DMatrix::<f64>::zeros(n, 2);
    rhs.set_column(0, &r);
    rhs.set_column(1, &c);
    let sol = a.lu().solve(&rhs).ok_or(Error::SingularSystem)?;
    Ok((
        sol.column(0).iter().copied().collect(),
        sol.column(1).iter().copied().collect(),
    ))
}

/// Exact `(V_r, V_c)` of `pi` from the initial distribution.
pub fn exact_policy_values(m: &TabularCmdp, pi: &Policy) -> Result<ValuePair> {
    let (x, y) = exact_state_values(m, pi)?;
    let dot = |v: &[f64]| m.rho.iter().zip(v).map(|(p, v)| p * v).sum::<f64>();
    Ok(ValuePair::new(dot(&x), dot(&y)))
}

/// Exact value of a mixture: the weighted sum of component values.
pub fn exact_mixture_values(m: &TabularCmdp, mix: &MixturePolicy) -> Result<ValuePair> {
    let mut out = ValuePair::default();
    for (pi, &w) in mix.components.iter().zip(&mix.weights) {
        if w == 0.0 {
            pi.check_against(m)?;
            continue;
        }
        let v = exact_policy_values(m, pi)?;
        out.v_reward += w * v.v_reward;
        out.v_constraint += w * v.v_constraint;
    }
    Ok(out)
}

/// Per state-action table.
pub type ActionTable = Vec<Vec<f64>>;

/// Action values `Q_r(s, a)` and `Q_c(s, a)` of `pi`.
pub fn action_values(m: &TabularCmdp, pi: &Policy) -> Result<(ActionTable, ActionTable)> {
    let (x, y) = exact_state_values(m, pi)?;
    let q = |sig: &Vec<Vec<f64>>, v: &[f64]| -> Vec<Vec<f64>> {
        (0..m.n_states)
            .map(|s| {
                (0..m.n_actions)
                    .map(|a| {
                        let next: f64 = m.transitions[s][a].iter().zip(v).map(|(p, v)| p * v).sum();
                        sig[s][a] + m.gamma * next
                    })
                    .collect()
            })
            .collect()
    };
    Ok((q(&m.reward, &x), q(&m.constraint, &y)))
}

/// Discounted state-action occupancy `mu(s, a) = sum_t gamma^t Pr(s_t = s, a_t = a)`.
pub fn discounted_occupancy(m: &TabularCmdp, pi: &Policy) -> Result<Vec<Vec<f64>>> {
    pi.check_against(m)?;
    let n = m.n_states;
    let (p, _, _) = policy_system(m, pi);
    let a = DMatrix::<f64>::identity(n, n) - p.transpose() * m.gamma;
    let rho = DVector::from_column_slice(&m.rho);
    let d = a.lu().solve(&rho).ok_or(Error::SingularSystem)?;
    Ok((0..n)
        .map(|s| pi.probs[s].iter().map(|&w| d[s] * w).collect())
        .collect())
}

fn total_variation(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

/// `d(M1, M2)`: the largest of the sup-norm reward gap, the sup-norm
/// constraint gap, the TV distance of the initial distributions and the
/// largest TV distance between transition rows.
pub fn cmdp_distance(m1: &TabularCmdp, m2: &TabularCmdp) -> Result<f64> {
    m1.check_shape(m2)?;
    let mut d = total_variation(&m1.rho, &m2.rho);
    for s in 0..m1.n_states {
        for a in 0..m1.n_actions {
            d = d
                .max((m1.reward[s][a] - m2.reward[s][a]).abs())
                .max((m1.constraint[s][a] - m2.constraint[s][a]).abs())
                .max(total_variation(
                    &m1.transitions[s][a],
                    &m2.transitions[s][a],
                ));
        }
    }
    Ok(d)
}

/// Smallest scale keeping [`budget_to_margin`] inside `[-1, 1]`, floored at 1.
pub fn default_margin_scale(cost: &[Vec<f64>], budget: f64, gamma: f64) -> f64 {
    let per_step = (1.0 - gamma) * budget;
    cost.iter()
        .flatten()
        .map(|&k| (per_step - k).abs())
        .fold(1.0, f64::max)
}

/// Converts a cost table with a discounted budget into a margin signal
/// `c'(s,a) = ((1-gamma) budget - cost(s,a)) / scale`, so that
/// `V_{c'} = (budget - V_cost) / scale` and `V_{c'} >= 0` iff `V_cost <= budget`.
pub fn budget_to_margin(
    cost: &[Vec<f64>],
    budget: f64,
    gamma: f64,
    scale: f64,
) -> Result<Vec<Vec<f64>>> {
    if !(scale > 0.0) {
        return Err(Error::InvalidInput(format!("scale must be positive, got {scale}")));
    }
    if cost.iter().flatten().any(|&k| k < 0.0) {
        return Err(Error::InvalidInput("costs must be non-negative".into()));
    }
    let per_step = (1.0 - gamma) * budget;
    let mut out = Vec::with_capacity(cost.len());
    for (s, row) in cost.iter().enumerate() {
        let mut r = Vec::with_capacity(row.len());
        for (a, &k) in row.iter().enumerate() {
            let margin = (per_step - k) / scale;
            if margin.abs() > 1.0 {
                return Err(Error::ScaleTooSmall {
                    scale,
                    worst: per_step - k,
                    state: s,
                    action: a,
                });
            }
            r.push(margin);
        }
        out.push(r);
    }
    Ok(out)
}

/// Random instance generators for tests and benchmarks.
pub mod random {
    use super::*;
    use rand::Rng;

    pub fn random_simplex<R: Rng>(n: usize, rng: &mut R) -> Vec<f64> {
        let raw: Vec<f64> = (0..n).map(|_| -rng.random::<f64>().max(1e-12).ln()).collect();
        let total: f64 = raw.iter().sum();
        let mut v: Vec<f64> = raw.iter().map(|x| x / total).collect();
        // push round-off into the largest entry so the row sums to 1 exactly enough
        let err = 1.0 - v.iter().sum::<f64>();
        let imax = (0..n).max_by(|&a, &b| v[a].total_cmp(&v[b])).unwrap();
        v[imax] += err;
        v
    }

    pub fn random_cmdp<R: Rng>(ns: usize, na: usize, gamma: f64, rng: &mut R) -> TabularCmdp {
        let transitions = (0..ns)
            .map(|_| (0..na).map(|_| random_simplex(ns, rng)).collect())
            .collect();
        let reward = (0..ns)
            .map(|_| (0..na).map(|_| rng.random::<f64>()).collect())
            .collect();
        let constraint = (0..ns)
            .map(|_| (0..na).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        TabularCmdp::new(random_simplex(ns, rng), transitions, reward, constraint, gamma).unwrap()
    }

    pub fn random_policy<R: Rng>(ns: usize, na: usize, rng: &mut R) -> Policy {
        Policy::new((0..ns).map(|_| random_simplex(na, rng)).collect()).unwrap()
    }
}

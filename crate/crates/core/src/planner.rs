//! Exact training oracles built on the occupancy-measure LP.
//!
//! * [`oracle_check`] decides `d(M1, M2) <= eps` by enumeration.
//! * [`oracle_optimal`] returns the LP-optimal feasible policy of one CMDP.
//! * [`oracle_feasible`] returns one policy with constraint margin `xi` on a
//!   whole set of CMDPs.
//!
//! All three are exact, so their confidence parameters are carried along for
//! bookkeeping only.

use log::debug;
use serde::{Deserialize, Serialize};

use crate::cmdp::{
    action_values, cmdp_distance, exact_policy_values, exact_state_values, Policy, TabularCmdp,
    ValuePair,
};
use crate::error::{Error, Result};
use crate::lp::LinearProgram;

/// Agreement required between LP certificates and exact re-evaluation.
pub const ORACLE_TOL: f64 = 1e-8;

/// Discounted state-action occupancy `mu(s, a)`, as produced by the LP.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OccupancyMeasure {
    pub mu: Vec<Vec<f64>>,
    /// LP objective `sum mu * r` at the optimum.
    pub objective: f64,
}

impl OccupancyMeasure {
    pub fn total_mass(&self) -> f64 {
        self.mu.iter().flatten().sum()
    }

    /// Largest violation of `sum_a mu(s,a) = rho(s) + gamma sum P(s|s',a') mu(s',a')`.
    pub fn flow_residual(&self, m: &TabularCmdp) -> f64 {
        let mut inflow = m.rho.clone();
        for (sp, row) in self.mu.iter().enumerate() {
            for (a, &w) in row.iter().enumerate() {
                for (s, &p) in m.transitions[sp][a].iter().enumerate() {
                    inflow[s] += m.gamma * p * w;
                }
            }
        }
        self.mu
            .iter()
            .zip(&inflow)
            .map(|(row, inf)| (row.iter().sum::<f64>() - inf).abs())
            .fold(0.0, f64::max)
    }

    pub fn dot(&self, table: &[Vec<f64>]) -> f64 {
        self.mu
            .iter()
            .zip(table)
            .map(|(m, t)| m.iter().zip(t).map(|(a, b)| a * b).sum::<f64>())
            .sum()
    }
}

/// The LP's objective and constraint slack at the returned policy.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Certificate {
    pub objective: f64,
    pub constraint_slack: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleOutcome {
    pub policy: Policy,
    /// Exact values of `policy`, one entry per queried CMDP.
    pub values: Vec<ValuePair>,
    pub certificate: Certificate,
    pub eps: f64,
    pub delta: f64,
}

fn flow_lp(m: &TabularCmdp, objective: &[Vec<f64>]) -> LinearProgram {
    let (ns, na) = (m.n_states, m.n_actions);
    let idx = |s: usize, a: usize| s * na + a;
    let mut lp = LinearProgram::maximize(objective.iter().flatten().copied().collect());
    for t in 0..ns {
        let mut row = vec![0.0; ns * na];
        for a in 0..na {
            row[idx(t, a)] += 1.0;
        }
        for s in 0..ns {
            for a in 0..na {
                let p = m.transitions[s][a][t];
                if p != 0.0 {
                    row[idx(s, a)] -= m.gamma * p;
                }
            }
        }
        lp.add_eq(row, m.rho[t]);
    }
    lp
}

fn reshape(x: &[f64], ns: usize, na: usize) -> Vec<Vec<f64>> {
    (0..ns).map(|s| x[s * na..(s + 1) * na].to_vec()).collect()
}

/// Maximizes `sum mu * r` over occupancy measures with `sum mu * c >= threshold`.
pub fn solve_cmdp_lp(m: &TabularCmdp, constraint_threshold: f64) -> Result<OccupancyMeasure> {
    let mut lp = flow_lp(m, &m.reward);
    lp.add_ge(m.constraint.iter().flatten().copied().collect(), constraint_threshold);
    let sol = lp.solve()?;
    debug!("cmdp lp solved in {} pivots", sol.iterations);
    Ok(OccupancyMeasure {
        mu: reshape(&sol.x, m.n_states, m.n_actions),
        objective: sol.objective,
    })
}

/// Largest constraint value any policy can reach on `m`.
pub fn max_constraint_value(m: &TabularCmdp) -> Result<f64> {
    Ok(flow_lp(m, &m.constraint).solve()?.objective)
}

/// `pi(a|s) = mu(s,a) / sum_a mu(s,a)`, uniform where the state carries no mass.
pub fn occupancy_to_policy(mu: &OccupancyMeasure) -> Policy {
    let probs = mu
        .mu
        .iter()
        .map(|row| {
            let total: f64 = row.iter().map(|v| v.max(0.0)).sum();
            if total <= 1e-12 {
                vec![1.0 / row.len() as f64; row.len()]
            } else {
                row.iter().map(|v| v.max(0.0) / total).collect()
            }
        })
        .collect();
    Policy { probs }
}

/// Optimal-policy oracle: the exact LP optimum at threshold 0, with its exact values.
pub fn oracle_optimal(m: &TabularCmdp, eps: f64, delta: f64) -> Result<OracleOutcome> {
    let occ = solve_cmdp_lp(m, 0.0)?;
    let policy = occupancy_to_policy(&occ);
    let v = exact_policy_values(m, &policy)?;
    Ok(OracleOutcome {
        policy,
        values: vec![v],
        certificate: Certificate {
            objective: occ.objective,
            constraint_slack: v.v_constraint,
        },
        eps,
        delta,
    })
}

/// Check oracle: `d(M1, M2) <= eps`, computed exactly.
pub fn oracle_check(m1: &TabularCmdp, m2: &TabularCmdp, eps: f64, _delta: f64) -> Result<bool> {
    Ok(cmdp_distance(m1, m2)? <= eps)
}

/// Settings of the generic max-min ascent.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AscentConfig {
    pub max_iters: usize,
    /// Step size at iteration 1; iteration `t` uses `step0 / sqrt(t)`.
    pub step0: f64,
}

impl Default for AscentConfig {
    fn default() -> Self {
        Self {
            max_iters: 10_000,
            step0: 1.0,
        }
    }
}

/// How [`oracle_feasible`] finds its policy.
#[derive(Clone, Copy, Debug)]
pub enum FeasibilityStrategy<'a> {
    /// Exponentiated-gradient ascent on the worst task's constraint value.
    Generic(AscentConfig),
    /// The family is constraint-monotone in a scalar parameter and `worst`
    /// is its worst-parameter member: solve that CMDP at margin `xi`.
    Structured { worst: &'a TabularCmdp },
}

/// Result of the generic ascent, including the best-so-far margin trace.
#[derive(Clone, Debug)]
pub struct AscentResult {
    pub policy: Policy,
    pub best_margin: f64,
    pub iterations: usize,
    /// `best_trace[t]` is the best `min_i V_c^{M_i}` seen after `t + 1` evaluations.
    pub best_trace: Vec<f64>,
}

fn min_margin(tasks: &[TabularCmdp], pi: &Policy) -> Result<(usize, f64)> {
    let mut worst = (0, f64::INFINITY);
    for (i, m) in tasks.iter().enumerate() {
        let v = exact_policy_values(m, pi)?.v_constraint;
        if v < worst.1 {
            worst = (i, v);
        }
    }
    Ok(worst)
}

/// Max-min ascent: each step moves the policy along the constraint advantage
/// of the task where its margin is smallest, with step `step0 / sqrt(t)`.
pub fn feasible_ascent(tasks: &[TabularCmdp], xi: f64, cfg: AscentConfig) -> Result<AscentResult> {
    let first = tasks
        .first()
        .ok_or_else(|| Error::InvalidInput("no tasks given".into()))?;
    if tasks.iter().any(|m| !m.same_shape(first)) {
        return Err(Error::DimensionMismatch("tasks differ in shape".into()));
    }
    let (ns, na) = (first.n_states, first.n_actions);
    let mut pi = Policy::uniform(ns, na);
    let mut best = pi.clone();
    let (mut worst_idx, mut margin) = min_margin(tasks, &pi)?;
    let mut best_margin = margin;
    let mut best_trace = vec![best_margin];
    let mut t = 0;
    while best_margin < xi && t < cfg.max_iters {
        t += 1;
        let m = &tasks[worst_idx];
        let (_, qc) = action_values(m, &pi)?;
        let (_, vc) = exact_state_values(m, &pi)?;
        let step = cfg.step0 / (t as f64).sqrt();
        for s in 0..ns {
            let row = &mut pi.probs[s];
            let mut logits: Vec<f64> = (0..na)
                .map(|a| row[a].max(1e-300).ln() + step * (qc[s][a] - vc[s]))
                .collect();
            let top = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            logits.iter_mut().for_each(|l| *l = (*l - top).exp());
            let z: f64 = logits.iter().sum();
            for a in 0..na {
                row[a] = logits[a] / z;
            }
        }
        (worst_idx, margin) = min_margin(tasks, &pi)?;
        if margin > best_margin {
            best_margin = margin;
            best = pi.clone();
        }
        best_trace.push(best_margin);
    }
    Ok(AscentResult {
        policy: best,
        best_margin,
        iterations: t,
        best_trace,
    })
}

/// Simultaneously-feasible oracle: one policy with `V_c >= xi` on every task.
pub fn oracle_feasible(
    tasks: &[TabularCmdp],
    xi: f64,
    delta: f64,
    strategy: FeasibilityStrategy<'_>,
) -> Result<OracleOutcome> {
    if tasks.is_empty() {
        return Err(Error::InvalidInput("no tasks given".into()));
    }
    let (policy, iterations) = match strategy {
        FeasibilityStrategy::Generic(cfg) => {
            let res = feasible_ascent(tasks, xi, cfg)?;
            (res.policy, res.iterations)
        }
        FeasibilityStrategy::Structured { worst } => match solve_cmdp_lp(worst, xi) {
            Ok(occ) => (occupancy_to_policy(&occ), 0),
            Err(Error::Infeasible { .. }) => {
                return Err(Error::FeasibilityFailure {
                    best_margin: max_constraint_value(worst)?,
                    xi,
                    iterations: 0,
                })
            }
            Err(e) => return Err(e),
        },
    };
    let values = tasks
        .iter()
        .map(|m| exact_policy_values(m, &policy))
        .collect::<Result<Vec<_>>>()?;
    let margin = values
        .iter()
        .map(|v| v.v_constraint)
        .fold(f64::INFINITY, f64::min);
    if margin < xi - ORACLE_TOL {
        return Err(Error::FeasibilityFailure {
            best_margin: margin,
            xi,
            iterations,
        });
    }
    Ok(OracleOutcome {
        policy,
        values,
        certificate: Certificate {
            objective: margin,
            constraint_slack: margin - xi,
        },
        eps: 0.0,
        delta,
    })
}

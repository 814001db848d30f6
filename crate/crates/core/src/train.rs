//! Training phase: greedy CMDP cover, the doubling loop and the policy-value set.

use log::{info, warn};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cmdp::{cmdp_distance, Policy, SmoothnessConstant, TabularCmdp};
use crate::error::{Error, Result};
use crate::planner::{
    oracle_feasible, oracle_optimal, AscentConfig, FeasibilityStrategy, OracleOutcome,
};

/// One draw from the task distribution: a scalar task index and its CMDP.
#[derive(Clone, Debug, PartialEq)]
pub struct Task {
    pub param: f64,
    pub cmdp: TabularCmdp,
}

/// Source of tasks `M_i, i ~ D`.
pub trait TaskSampler: Sync {
    fn draw(&self, rng: &mut dyn RngCore) -> Task;

    /// CMDP distance between two drawn tasks. Families with a closed form
    /// may override the enumeration.
    fn distance(&self, a: &Task, b: &Task) -> f64 {
        cmdp_distance(&a.cmdp, &b.cmdp).expect("tasks from one sampler share a shape")
    }

    /// Worst-case member for constraint-monotone families.
    fn worst_case(&self) -> Option<Task> {
        None
    }

    fn true_optimum(&self, task: &Task) -> Result<OracleOutcome> {
        oracle_optimal(&task.cmdp, 0.0, 0.0)
    }
}

/// Always returns the same task.
#[derive(Clone, Debug)]
pub struct PointMassSampler {
    pub task: Task,
}

impl TaskSampler for PointMassSampler {
    fn draw(&self, _rng: &mut dyn RngCore) -> Task {
        self.task.clone()
    }

    fn worst_case(&self) -> Option<Task> {
        Some(self.task.clone())
    }
}

/// Finite distribution over a fixed list of tasks.
#[derive(Clone, Debug)]
pub struct DiscreteSampler {
    pub tasks: Vec<Task>,
    pub weights: Vec<f64>,
}

impl TaskSampler for DiscreteSampler {
    fn draw(&self, rng: &mut dyn RngCore) -> Task {
        let i = crate::cmdp::sample_index(&self.weights, rng);
        self.tasks[i].clone()
    }
}

/// Deterministic per-draw stream: draws can be generated in any order.
pub fn draw_rng(seed: u64, round: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ round.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    rng.set_stream(index);
    rng
}

/// `(ln(1/delta))^2 / delta^2`, rounded up.
pub fn default_n_init(delta: f64) -> usize {
    let l = (1.0 / delta).ln();
    (l * l / (delta * delta)).ceil() as usize
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeasibilityMode {
    /// Solve the family's worst-case CMDP (constraint-monotone families).
    #[default]
    Structured,
    /// Max-min ascent over the cover members.
    Generic,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub eps: f64,
    pub delta: f64,
    pub xi: f64,
    pub n_init: Option<usize>,
    pub max_doublings: usize,
    pub rng_seed: u64,
    pub feasibility: FeasibilityMode,
    pub ascent: AscentConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            eps: 0.05,
            delta: 0.2,
            xi: 0.05,
            n_init: None,
            max_doublings: 20,
            rng_seed: 0,
            feasibility: FeasibilityMode::Structured,
            ascent: AscentConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn initial_samples(&self) -> usize {
        self.n_init.unwrap_or_else(|| default_n_init(self.delta)).max(1)
    }

    fn check(&self) -> Result<()> {
        if !(self.eps > 0.0) {
            return Err(Error::InvalidInput(format!("eps must be positive, got {}", self.eps)));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::InvalidInput(format!("delta {} not in (0,1)", self.delta)));
        }
        if !(self.xi > 0.0) {
            return Err(Error::InvalidInput(format!("xi must be positive, got {}", self.xi)));
        }
        Ok(())
    }

    /// Whether `(8L + 18) eps <= xi` holds for discount `gamma`.
    pub fn in_theory_regime(&self, gamma: f64) -> bool {
        (8.0 * SmoothnessConstant::from_gamma(gamma).value() + 18.0) * self.eps <= self.xi
    }
}

/// Greedy cover of a sample set. `members` are sample positions in selection order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoverSet {
    pub members: Vec<usize>,
    pub pairwise_min_distance: f64,
    pub covered_fraction: f64,
}

impl CoverSet {
    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }
}

/// Pairwise distance matrix, computed row-parallel.
pub fn distance_matrix<F>(n: usize, dist: F) -> Vec<Vec<f64>>
where
    F: Fn(usize, usize) -> f64 + Sync,
{
    (0..n)
        .into_par_iter()
        .map(|i| (0..n).map(|j| if i == j { 0.0 } else { dist(i, j) }).collect())
        .collect()
}

/// Greedy selection on the adjacency `d[i][j] <= eps` until at most
/// `max_uncovered` rows remain uncovered. Ties go to the lowest index.
fn greedy_cover(dist: &[Vec<f64>], eps: f64, max_uncovered: f64) -> CoverSet {
    let n = dist.len();
    let mut uncovered = vec![true; n];
    let mut n_uncovered = n;
    let mut chosen = vec![false; n];
    let mut members = Vec::new();
    for _ in 0..n {
        let mut best = (usize::MAX, 0usize);
        for j in (0..n).filter(|&j| !chosen[j]) {
            let gain = (0..n).filter(|&i| uncovered[i] && dist[i][j] <= eps).count();
            if best.0 == usize::MAX || gain > best.1 {
                best = (j, gain);
            }
        }
        let j = best.0;
        chosen[j] = true;
        members.push(j);
        for i in 0..n {
            if uncovered[i] && dist[i][j] <= eps {
                uncovered[i] = false;
                n_uncovered -= 1;
            }
        }
        if n_uncovered as f64 <= max_uncovered {
            break;
        }
    }
    let mut pairwise_min_distance = f64::INFINITY;
    for (k, &a) in members.iter().enumerate() {
        for &b in &members[k + 1..] {
            pairwise_min_distance = pairwise_min_distance.min(dist[a][b]);
        }
    }
    CoverSet {
        members,
        pairwise_min_distance,
        covered_fraction: 1.0 - n_uncovered as f64 / n as f64,
    }
}

/// Cover of `samples` where `A[i][j] = [d(M_i, M_j) <= eps]`, stopping once at
/// most `3 delta N` samples are uncovered.
pub fn build_cover(samples: &[TabularCmdp], eps: f64, delta: f64) -> Result<CoverSet> {
    if samples.is_empty() {
        return Err(Error::InvalidInput("no samples to cover".into()));
    }
    if samples.iter().any(|m| !m.same_shape(&samples[0])) {
        return Err(Error::DimensionMismatch("samples differ in shape".into()));
    }
    let dist = distance_matrix(samples.len(), |i, j| {
        cmdp_distance(&samples[i], &samples[j]).expect("shapes checked")
    });
    Ok(build_cover_from_distances(&dist, eps, delta))
}

/// [`build_cover`] on a precomputed distance matrix.
pub fn build_cover_from_distances(dist: &[Vec<f64>], eps: f64, delta: f64) -> CoverSet {
    greedy_cover(dist, eps, 3.0 * delta * dist.len() as f64)
}

/// `sqrt(|U| ln(2N/delta) / (N - |U|))`, infinite when every sample is a member.
pub fn stopping_statistic(cover_size: usize, n: usize, delta: f64) -> f64 {
    if cover_size >= n {
        return f64::INFINITY;
    }
    let u = cover_size as f64;
    (u * (2.0 * n as f64 / delta).ln() / (n as f64 - u)).sqrt()
}

/// `(pi, u, v, u_s, v_s)` for one cover member.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyValueTuple {
    pub policy: Policy,
    pub u: f64,
    pub v: f64,
    pub u_s: f64,
    pub v_s: f64,
    pub task_meta: TaskMeta,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskMeta {
    /// Scalar task index of the generating draw.
    pub param: f64,
    /// Position of the draw in the final round's sample list.
    pub sample_position: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundLog {
    pub n: usize,
    pub cover_size: usize,
    pub covered_fraction: f64,
    pub statistic: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub rounds: Vec<RoundLog>,
    pub theory_regime: bool,
    /// `min_i V_c^{M_i}(pi_s)` over the cover.
    pub feasibility_margin: f64,
}

impl TrainLog {
    pub fn final_statistic(&self) -> f64 {
        self.rounds.last().map_or(f64::INFINITY, |r| r.statistic)
    }
}

/// Training output; this is the whole contract between training and testing.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingBundle {
    pub pi_s: Policy,
    pub tuples: Vec<PolicyValueTuple>,
    pub config: TrainConfig,
    pub log: TrainLog,
}

impl TrainingBundle {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("bundle serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::InvalidInput(format!("bundle: {e}")))
    }
}

/// Runs the training phase on `sampler`.
pub fn train(sampler: &dyn TaskSampler, config: &TrainConfig) -> Result<TrainingBundle> {
    config.check()?;
    let mut n = config.initial_samples();
    let mut log = TrainLog::default();
    let mut doublings = 0;
    let (tasks, cover) = loop {
        let tasks: Vec<Task> = (0..n)
            .into_par_iter()
            .map(|i| sampler.draw(&mut draw_rng(config.rng_seed, doublings as u64, i as u64)))
            .collect();
        if doublings == 0 {
            log.theory_regime = config.in_theory_regime(tasks[0].cmdp.gamma);
            if !log.theory_regime {
                warn!(
                    "(8L+18) eps <= xi does not hold (eps = {}, xi = {}); guarantees are not in force",
                    config.eps, config.xi
                );
            }
        }
        let dist = distance_matrix(n, |i, j| sampler.distance(&tasks[i], &tasks[j]));
        let cover = build_cover_from_distances(&dist, config.eps, config.delta);
        let statistic = stopping_statistic(cover.len(), n, config.delta);
        info!("round {doublings}: N = {n}, |U| = {}, statistic = {statistic:.4}", cover.len());
        log.rounds.push(RoundLog {
            n,
            cover_size: cover.len(),
            covered_fraction: cover.covered_fraction,
            statistic,
        });
        if statistic <= config.delta {
            break (tasks, cover);
        }
        if doublings == config.max_doublings {
            return Err(Error::TrainingDidNotConverge {
                doublings,
                statistic,
                n,
            });
        }
        doublings += 1;
        n *= 2;
    };

    let members: Vec<&Task> = cover.members.iter().map(|&j| &tasks[j]).collect();
    let cmdps: Vec<TabularCmdp> = members.iter().map(|t| t.cmdp.clone()).collect();
    let per_member_delta = config.delta / (2.0 * members.len() as f64);
    let optimal: Vec<OracleOutcome> = cmdps
        .par_iter()
        .map(|m| oracle_optimal(m, config.eps, per_member_delta))
        .collect::<Result<_>>()?;

    let worst_task;
    let strategy = match config.feasibility {
        FeasibilityMode::Generic => FeasibilityStrategy::Generic(config.ascent),
        FeasibilityMode::Structured => {
            worst_task = sampler.worst_case().unwrap_or_else(|| {
                (*members
                    .iter()
                    .max_by(|a, b| a.param.total_cmp(&b.param))
                    .expect("cover is non-empty"))
                .clone()
            });
            FeasibilityStrategy::Structured {
                worst: &worst_task.cmdp,
            }
        }
    };
    let safe = oracle_feasible(&cmdps, config.xi, config.delta / 2.0, strategy)?;
    log.feasibility_margin = safe.certificate.objective;

    let tuples = members
        .iter()
        .zip(&cover.members)
        .zip(optimal)
        .zip(&safe.values)
        .map(|(((task, &pos), opt), vs)| PolicyValueTuple {
            policy: opt.policy,
            u: opt.values[0].v_reward,
            v: opt.values[0].v_constraint,
            u_s: vs.v_reward,
            v_s: vs.v_constraint,
            task_meta: TaskMeta {
                param: task.param,
                sample_position: pos,
            },
        })
        .collect();
    Ok(TrainingBundle {
        pi_s: safe.policy,
        tuples,
        config: config.clone(),
        log,
    })
}

/// Greedy cover size reaching `(1 - delta)` coverage on a fixed distance matrix.
pub fn covering_number_from_distances(dist: &[Vec<f64>], eps: f64, delta: f64) -> usize {
    greedy_cover(dist, eps, delta * dist.len() as f64).len()
}

/// Upper-bound estimate of `C_eps(D, delta)` from `n_samples` fresh draws.
pub fn estimate_covering_number(
    sampler: &dyn TaskSampler,
    eps: f64,
    delta: f64,
    n_samples: usize,
    seed: u64,
) -> usize {
    estimate_covering_numbers(sampler, &[eps], delta, n_samples, seed)[0]
}

/// Estimates over a grid of radii on one shared sample. A cover at radius
/// `e'` also covers at any `e >= e'`, so each entry is the smallest greedy
/// size over radii not exceeding it and the estimates are non-increasing in eps.
pub fn estimate_covering_numbers(
    sampler: &dyn TaskSampler,
    eps_grid: &[f64],
    delta: f64,
    n_samples: usize,
    seed: u64,
) -> Vec<usize> {
    let tasks: Vec<Task> = (0..n_samples)
        .into_par_iter()
        .map(|i| sampler.draw(&mut draw_rng(seed, u64::MAX, i as u64)))
        .collect();
    let dist = distance_matrix(n_samples, |i, j| sampler.distance(&tasks[i], &tasks[j]));
    let raw: Vec<usize> = eps_grid
        .iter()
        .map(|&e| covering_number_from_distances(&dist, e, delta))
        .collect();
    let mut order: Vec<usize> = (0..eps_grid.len()).collect();
    order.sort_by(|&a, &b| eps_grid[a].total_cmp(&eps_grid[b]));
    let mut out = raw.clone();
    let mut best = usize::MAX;
    for &k in &order {
        best = best.min(raw[k]);
        out[k] = best;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cmdp::random::random_cmdp;
    use crate::cmdp::exact_policy_values;
    use rand::Rng;

    fn line_distances(points: &[f64]) -> Vec<Vec<f64>> {
        points
            .iter()
            .map(|a| points.iter().map(|b| (a - b).abs()).collect())
            .collect()
    }

    #[test]
    fn identical_samples_single_member() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = random_cmdp(3, 2, 0.9, &mut rng);
        let cover = build_cover(&vec![m; 10], 0.01, 0.01).unwrap();
        assert_eq!(cover.members, vec![0]);
        assert_eq!(cover.covered_fraction, 1.0);
    }

    #[test]
    fn separated_samples_all_selected() {
        let pts: Vec<f64> = (0..8).map(|k| k as f64).collect();
        let cover = build_cover_from_distances(&line_distances(&pts), 0.5, 1.0 / (3.0 * 8.0) - 1e-6);
        assert_eq!(cover.len(), 8);
        assert!(cover.pairwise_min_distance > 0.5);
    }

    #[test]
    fn greedy_prefers_largest_ball_then_lowest_index() {
        // 0,1,2 within 1 of each other around 1; 10 alone
        let pts = [0.0, 1.0, 2.0, 10.0];
        let cover = build_cover_from_distances(&line_distances(&pts), 1.0, 0.0);
        assert_eq!(cover.members, vec![1, 3]);
    }

    #[test]
    fn stops_once_slack_allows() {
        // 3 * 0.1 * 10 = 3 samples may stay uncovered
        let pts: Vec<f64> = (0..10).map(|k| 10.0 * k as f64).collect();
        let cover = build_cover_from_distances(&line_distances(&pts), 1.0, 0.1);
        assert_eq!(cover.len(), 7);
        assert!(cover.covered_fraction >= 1.0 - 0.3);
    }

    #[test]
    fn statistic_formula() {
        let s = stopping_statistic(2, 100, 0.1);
        assert!((s - (2.0 * (2000.0f64).ln() / 98.0).sqrt()).abs() < 1e-15);
        assert!(stopping_statistic(5, 5, 0.1).is_infinite());
        assert_eq!(default_n_init(0.2), 65);
    }

    #[test]
    fn point_mass_trains_in_one_round() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut m = random_cmdp(3, 2, 0.8, &mut rng);
        m.constraint = vec![vec![0.5, -0.2]; 3];
        let sampler = PointMassSampler { task: Task { param: 0.0, cmdp: m.clone() } };
        let cfg = TrainConfig { eps: 0.01, delta: 0.1, xi: 0.2, ..Default::default() };
        let bundle = train(&sampler, &cfg).unwrap();
        // one ball covers every round; the statistic alone drives the doublings
        assert!(bundle.log.rounds.iter().all(|r| r.cover_size == 1));
        let last = bundle.log.rounds.last().unwrap();
        assert_eq!(last.n, default_n_init(0.1) * (1 << (bundle.log.rounds.len() - 1)));
        assert_eq!(bundle.tuples.len(), 1);
        assert!(exact_policy_values(&m, &bundle.pi_s).unwrap().v_constraint >= 0.2 - 1e-8);
        assert!(bundle.log.final_statistic() <= cfg.delta);
    }

    #[test]
    fn max_doublings_is_reported() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let base = random_cmdp(2, 2, 0.5, &mut rng);
        // every draw is a distinct CMDP, far apart
        struct Spread(TabularCmdp);
        impl TaskSampler for Spread {
            fn draw(&self, rng: &mut dyn RngCore) -> Task {
                let p = rng.random::<f64>();
                let mut m = self.0.clone();
                m.reward[0][0] = p;
                Task { param: p, cmdp: m }
            }
        }
        let cfg = TrainConfig { eps: 1e-9, delta: 0.3, xi: 0.01, max_doublings: 2, ..Default::default() };
        match train(&Spread(base), &cfg) {
            Err(Error::TrainingDidNotConverge { doublings, n, .. }) => {
                assert_eq!(doublings, 2);
                assert_eq!(n, 4 * default_n_init(0.3));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn covering_estimates_monotone_on_shared_sample() {
        struct Line;
        impl TaskSampler for Line {
            fn draw(&self, rng: &mut dyn RngCore) -> Task {
                let mut m = TabularCmdp::new(vec![1.0], vec![vec![vec![1.0]]], vec![vec![0.0]], vec![vec![0.0]], 0.5).unwrap();
                let x = rng.random::<f64>();
                m.reward[0][0] = x;
                Task { param: x, cmdp: m }
            }
        }
        let grid = [0.02, 0.05, 0.1, 0.3, 2.0];
        let est = estimate_covering_numbers(&Line, &grid, 0.05, 300, 9);
        assert!(est.windows(2).all(|w| w[1] <= w[0]), "{est:?}");
        assert_eq!(*est.last().unwrap(), 1);
        assert!(est[0] > est[2]);
    }
}

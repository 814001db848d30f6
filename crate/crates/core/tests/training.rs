use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use safemeta_core::cmdp::{cmdp_distance, exact_policy_values, random::random_cmdp, TabularCmdp};
use safemeta_core::envs::{build_gridworld, GridworldLayout, GridworldSampler, NoiseDistribution};
use safemeta_core::planner::{occupancy_to_policy, solve_cmdp_lp};
use safemeta_core::train::*;

fn family() -> GridworldSampler {
    GridworldSampler::new(GridworldLayout::default(), NoiseDistribution::default()).unwrap()
}

/// Plain greedy set cover over a boolean adjacency, written independently.
fn reference_greedy(adj: &[Vec<bool>], max_uncovered: f64) -> Vec<usize> {
    let n = adj.len();
    let mut remaining: Vec<usize> = (0..n).collect();
    let mut picked = Vec::new();
    while remaining.len() as f64 > max_uncovered {
        let mut best_j = None;
        let mut best_gain = 0;
        #[allow(clippy::needless_range_loop)]
        for j in 0..n {
            if picked.contains(&j) {
                continue;
            }
            let gain = remaining.iter().filter(|&&i| adj[i][j]).count();
            if best_j.is_none() || gain > best_gain {
                best_j = Some(j);
                best_gain = gain;
            }
        }
        let j = best_j.unwrap();
        picked.push(j);
        remaining.retain(|&i| !adj[i][j]);
    }
    picked
}

#[test]
fn gridworld_cover_matches_reference_greedy() {
    let f = family();
    let eps = cmdp_distance(&build_gridworld(0.3).unwrap(), &build_gridworld(0.35).unwrap()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let samples: Vec<TabularCmdp> = (0..30).map(|_| f.draw(&mut rng).cmdp).collect();
    for delta in [0.0, 0.05, 0.2] {
        let cover = build_cover(&samples, eps, delta).unwrap();
        let adj: Vec<Vec<bool>> = samples
            .iter()
            .map(|a| samples.iter().map(|b| cmdp_distance(a, b).unwrap() <= eps).collect())
            .collect();
        let expect = reference_greedy(&adj, 3.0 * delta * 30.0);
        assert_eq!(cover.members, expect, "delta {delta}");
        assert!(cover.covered_fraction >= 1.0 - 3.0 * delta);
        // greedy may pick a sample inside an earlier ball, so members need not be eps-separated
        assert!(cover.pairwise_min_distance > 0.0);
    }
}

#[test]
fn cover_termination_on_random_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for trial in 0..10 {
        let samples: Vec<TabularCmdp> = (0..25).map(|_| random_cmdp(3, 2, 0.7, &mut rng)).collect();
        let delta = 0.02 * trial as f64;
        let cover = build_cover(&samples, 0.6, delta).unwrap();
        assert!(cover.len() <= 25);
        assert!(cover.covered_fraction >= 1.0 - 3.0 * delta);
    }
}

struct TwoPoint(Task, Task);

impl TaskSampler for TwoPoint {
    fn draw(&self, rng: &mut dyn RngCore) -> Task {
        if rng.next_u32() & 1 == 0 {
            self.0.clone()
        } else {
            self.1.clone()
        }
    }
}

#[test]
fn two_point_distribution_converges_to_both_points() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut a = random_cmdp(3, 2, 0.6, &mut rng);
    let mut b = random_cmdp(3, 2, 0.6, &mut rng);
    for m in [&mut a, &mut b] {
        m.constraint = vec![vec![0.4, 0.8]; 3];
    }
    assert!(cmdp_distance(&a, &b).unwrap() > 0.1);
    let sampler = TwoPoint(Task { param: 0.0, cmdp: a }, Task { param: 1.0, cmdp: b });
    let cfg = TrainConfig {
        eps: 0.1,
        delta: 0.1,
        xi: 0.5,
        feasibility: FeasibilityMode::Generic,
        ..TrainConfig::default()
    };
    let bundle = train(&sampler, &cfg).unwrap();
    assert_eq!(bundle.tuples.len(), 2);
    let last = bundle.log.rounds.last().unwrap();
    let u = last.cover_size as f64;
    let n = last.n as f64;
    let recomputed = (u * (2.0 * n / 0.1f64).ln() / (n - u)).sqrt();
    assert!((recomputed - last.statistic).abs() < 1e-12);
    assert!(recomputed <= 0.1);
}

#[test]
fn gridworld_structured_training() {
    let f = family();
    let cfg = TrainConfig {
        eps: 0.05,
        delta: 0.2,
        xi: 0.05,
        rng_seed: 3,
        ..TrainConfig::default()
    };
    let bundle = train(&f, &cfg).unwrap();
    assert!(!bundle.tuples.is_empty());
    // pi_s is the LP policy of the noisiest task at margin xi
    let worst = build_gridworld(0.5).unwrap();
    let expect = occupancy_to_policy(&solve_cmdp_lp(&worst, cfg.xi).unwrap());
    assert_eq!(bundle.pi_s, expect);
    for t in &bundle.tuples {
        let m = build_gridworld(t.task_meta.param).unwrap();
        let own = exact_policy_values(&m, &t.policy).unwrap();
        let safe = exact_policy_values(&m, &bundle.pi_s).unwrap();
        assert!((own.v_reward - t.u).abs() <= 1e-8 && (own.v_constraint - t.v).abs() <= 1e-8);
        assert!((safe.v_reward - t.u_s).abs() <= 1e-8 && (safe.v_constraint - t.v_s).abs() <= 1e-8);
        assert!(t.v >= -cfg.eps && t.v_s >= cfg.xi - 1e-8);
        assert!(t.u.abs() <= 10.0 && t.u_s.abs() <= 10.0);
    }
    let last = bundle.log.rounds.last().unwrap();
    let u = last.cover_size as f64;
    let n = last.n as f64;
    assert!((u * (2.0 * n / cfg.delta).ln() / (n - u)).sqrt() <= cfg.delta);
    let round_trip = TrainingBundle::from_json(&bundle.to_json()).unwrap();
    assert_eq!(round_trip, bundle);
}

/// Fraction of 200 fresh draws within eps of some cover member, against
/// 1 - 6 delta with 3 sigma of binomial slack.
#[test]
fn fresh_draws_are_covered() {
    let f = family();
    let cfg = TrainConfig {
        eps: 0.1,
        delta: 0.1,
        xi: 0.05,
        rng_seed: 1,
        ..TrainConfig::default()
    };
    let bundle = train(&f, &cfg).unwrap();
    let members: Vec<Task> = bundle
        .tuples
        .iter()
        .map(|t| f.task(t.task_meta.param).unwrap())
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(999);
    let hits = (0..200)
        .filter(|_| {
            let t = f.draw(&mut rng);
            members.iter().any(|m| f.distance(m, &t) <= cfg.eps)
        })
        .count();
    let p = 1.0 - 6.0 * cfg.delta;
    let slack = 3.0 * (200.0 * p * (1.0 - p)).sqrt();
    assert!(hits as f64 >= 200.0 * p - slack, "{hits} of 200");
}

#[test]
fn covering_number_estimates() {
    let f = family();
    let point = PointMassSampler { task: f.task(0.3).unwrap() };
    assert_eq!(estimate_covering_number(&point, 0.01, 0.1, 50, 0), 1);
    // the family diameter is kappa * 0.5
    assert_eq!(estimate_covering_number(&f, f.kappa() * 0.5 + 1e-9, 0.1, 200, 0), 1);
    let grid = [0.02, 0.05, 0.1];
    let est = estimate_covering_numbers(&f, &grid, 0.05, 400, 5);
    assert!(est[0] >= est[1] && est[1] >= est[2], "{est:?}");
    assert!(est[0] > est[2]);
}

#[test]
fn training_is_reproducible() {
    let f = family();
    let cfg = TrainConfig { rng_seed: 42, ..TrainConfig::default() };
    assert_eq!(train(&f, &cfg).unwrap().to_json(), train(&f, &cfg).unwrap().to_json());
}

//! Subcommand implementations. Each returns its result so that callers and
//! tests can inspect it; files are written under the configured output dir.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use anyhow::Context;
use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use safemeta_core::cmdp::exact_policy_values;
use safemeta_core::envs::{GridworldSampler, MAX_NOISE};
use safemeta_core::planner::oracle_optimal;
use safemeta_core::safe_test::{run_static_safe, run_test, run_test_pce, TestConfig, TestReport, TestTask};
use safemeta_core::train::{
    estimate_covering_numbers, train, PointMassSampler, TaskSampler, TrainConfig, TrainingBundle,
};
use safemeta_core::ValuePair;

use crate::config::RunConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    Ours,
    PceBaseline,
    StaticSafe,
}

impl Algorithm {
    pub const ALL: [Algorithm; 3] = [Algorithm::Ours, Algorithm::PceBaseline, Algorithm::StaticSafe];

    pub fn as_str(self) -> &'static str {
        match self {
            Algorithm::Ours => "ours",
            Algorithm::PceBaseline => "pce_baseline",
            Algorithm::StaticSafe => "static_safe",
        }
    }
}

pub fn sampler(cfg: &RunConfig) -> anyhow::Result<GridworldSampler> {
    Ok(GridworldSampler::new(cfg.load_layout()?, cfg.noise())?)
}

pub fn train_config(cfg: &RunConfig) -> TrainConfig {
    TrainConfig {
        eps: cfg.eps,
        delta: cfg.delta,
        xi: cfg.xi,
        n_init: cfg.n_init,
        max_doublings: cfg.max_doublings,
        rng_seed: cfg.train_seed,
        feasibility: cfg.feasibility,
        ..TrainConfig::default()
    }
}

fn write_file(path: &Path, contents: &[u8]) -> anyhow::Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

pub fn cmd_train(cfg: &RunConfig) -> anyhow::Result<TrainingBundle> {
    let family = sampler(cfg)?;
    let tc = train_config(cfg);
    let bundle = match cfg.point_mass {
        Some(noise) => train(&PointMassSampler { task: family.task(noise)? }, &tc)?,
        None => train(&family, &tc)?,
    };
    let mut text = bundle.to_json();
    text.push('\n');
    write_file(&cfg.bundle_path(), text.as_bytes())?;
    Ok(bundle)
}

pub fn load_bundle(cfg: &RunConfig) -> anyhow::Result<TrainingBundle> {
    let path = cfg.bundle_path();
    let text = fs::read_to_string(&path)
        .with_context(|| format!("training bundle {} not found", path.display()))?;
    Ok(TrainingBundle::from_json(&text)?)
}

/// Noise level of the test task for `seed`; independent of the training draws.
pub fn test_noise(family: &GridworldSampler, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    family.noise.sample(&mut rng).clamp(0.0, MAX_NOISE)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub seed: u64,
    pub noise: f64,
    pub algorithm: Algorithm,
    pub episode: usize,
    pub regret_r: f64,
    pub regret_c: f64,
    pub safety_violation: u8,
}

#[derive(Clone, Debug)]
pub struct SeedRun {
    pub seed: u64,
    pub noise: f64,
    pub reports: Vec<(Algorithm, TestReport)>,
    pub wall_times: Vec<(Algorithm, f64)>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    pub fn of(xs: &[f64]) -> Self {
        let n = xs.len() as f64;
        if xs.is_empty() {
            return Self::default();
        }
        let mean = xs.iter().sum::<f64>() / n;
        let var = if xs.len() > 1 {
            xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        Self { mean, std: var.sqrt() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub seed: u64,
    pub noise: f64,
    pub v_star: f64,
    pub final_regret_r: f64,
    pub final_regret_c: f64,
    pub safety_violations: usize,
    pub exhausted_at: Option<usize>,
    pub forced_eliminations: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmSummary {
    pub final_regret_r: MeanStd,
    pub final_regret_c: MeanStd,
    pub safety_violations: usize,
    pub per_seed: Vec<SeedSummary>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TestSummary {
    pub config: RunConfig,
    pub h: usize,
    pub arms: BTreeMap<Algorithm, ArmSummary>,
}

pub struct TestOutcome {
    pub runs: Vec<SeedRun>,
    pub rows: Vec<ResultRow>,
    pub summary: TestSummary,
}

pub fn test_config(cfg: &RunConfig, gamma: f64, seed: u64) -> TestConfig {
    let mut tc = TestConfig::new(cfg.k, cfg.eps, cfg.delta, gamma, seed);
    if let Some(h) = cfg.h {
        tc.h = h;
    }
    tc
}

fn run_seed(
    family: &GridworldSampler,
    bundle: &TrainingBundle,
    cfg: &RunConfig,
    seed: u64,
) -> anyhow::Result<SeedRun> {
    let noise = test_noise(family, seed);
    let task = TestTask::new(family.task(noise)?.cmdp)?;
    let tc = test_config(cfg, family.layout.gamma, seed);
    let mut reports = Vec::new();
    let mut wall_times = Vec::new();
    for alg in Algorithm::ALL {
        let t0 = Instant::now();
        let report = match alg {
            Algorithm::Ours => run_test(&task, &bundle.pi_s, &bundle.tuples, &tc)?,
            Algorithm::PceBaseline => run_test_pce(&task, &bundle.tuples, &tc)?,
            Algorithm::StaticSafe => run_static_safe(&task, &bundle.pi_s, &tc)?,
        };
        wall_times.push((alg, t0.elapsed().as_secs_f64()));
        reports.push((alg, report));
    }
    info!("seed {seed}: noise {noise:.4} done");
    Ok(SeedRun {
        seed,
        noise,
        reports,
        wall_times,
    })
}

fn write_csv_with_header<T: Serialize>(
    path: &Path,
    header: &[String],
    rows: &[T],
) -> anyhow::Result<()> {
    let mut buf = Vec::new();
    for line in header {
        writeln!(buf, "{line}")?;
    }
    {
        let mut w = csv::Writer::from_writer(&mut buf);
        for r in rows {
            w.serialize(r)?;
        }
        w.flush()?;
    }
    write_file(path, &buf)
}

pub fn cmd_test(cfg: &RunConfig) -> anyhow::Result<TestOutcome> {
    let bundle = load_bundle(cfg)?;
    let family = sampler(cfg)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.jobs.unwrap_or(0))
        .build()?;
    let mut runs: Vec<SeedRun> = pool.install(|| {
        cfg.seeds
            .par_iter()
            .map(|&s| run_seed(&family, &bundle, cfg, s))
            .collect::<anyhow::Result<_>>()
    })?;
    runs.sort_by_key(|r| r.seed);

    let mut rows = Vec::new();
    let mut timings = Vec::new();
    for run in &runs {
        for (alg, report) in &run.reports {
            let path = cfg
                .out
                .join("runs")
                .join(format!("seed{}_{}.csv", run.seed, alg.as_str()));
            let mut buf = Vec::new();
            report.write_csv(&mut buf)?;
            write_file(&path, &buf)?;
            for (i, e) in report.episodes.iter().enumerate() {
                rows.push(ResultRow {
                    seed: run.seed,
                    noise: run.noise,
                    algorithm: *alg,
                    episode: e.k,
                    regret_r: report.regret_reward[i],
                    regret_c: report.regret_constraint[i],
                    safety_violation: e
                        .true_values
                        .is_some_and(|v| v.v_constraint < -safemeta_core::safe_test::SAFETY_TOL)
                        as u8,
                });
            }
        }
        for (alg, t) in &run.wall_times {
            timings.push(TimingRow {
                seed: run.seed,
                algorithm: *alg,
                wall_time: *t,
            });
        }
    }
    rows.sort_by_key(|r| (r.seed, r.algorithm, r.episode));
    let header = cfg.header_lines();
    write_csv_with_header(&cfg.out.join("results.csv"), &header, &rows)?;
    write_csv_with_header(&cfg.out.join("timings.csv"), &[], &timings)?;

    let summary = summarize(cfg, &family, &runs);
    let mut text = serde_json::to_string_pretty(&summary)?;
    text.push('\n');
    write_file(&cfg.out.join("summary.json"), text.as_bytes())?;
    Ok(TestOutcome {
        runs,
        rows,
        summary,
    })
}

#[derive(Serialize)]
struct TimingRow {
    seed: u64,
    algorithm: Algorithm,
    wall_time: f64,
}

fn summarize(cfg: &RunConfig, family: &GridworldSampler, runs: &[SeedRun]) -> TestSummary {
    let mut arms = BTreeMap::new();
    for alg in Algorithm::ALL {
        let per_seed: Vec<SeedSummary> = runs
            .iter()
            .flat_map(|run| {
                run.reports.iter().filter(|(a, _)| *a == alg).map(|(_, r)| SeedSummary {
                    seed: run.seed,
                    noise: run.noise,
                    v_star: r.v_star,
                    final_regret_r: r.final_regret_reward(),
                    final_regret_c: r.final_regret_constraint(),
                    safety_violations: r.safety_violations,
                    exhausted_at: r.flags.exhausted_at,
                    forced_eliminations: r.flags.forced_eliminations,
                })
            })
            .collect();
        let rr: Vec<f64> = per_seed.iter().map(|s| s.final_regret_r).collect();
        let rc: Vec<f64> = per_seed.iter().map(|s| s.final_regret_c).collect();
        arms.insert(
            alg,
            ArmSummary {
                final_regret_r: MeanStd::of(&rr),
                final_regret_c: MeanStd::of(&rc),
                safety_violations: per_seed.iter().map(|s| s.safety_violations).sum(),
                per_seed,
            },
        );
    }
    TestSummary {
        config: cfg.clone(),
        h: test_config(cfg, family.layout.gamma, 0).h,
        arms,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TupleDiagnostics {
    pub index: usize,
    pub param: f64,
    pub u: f64,
    pub v: f64,
    pub exact: ValuePair,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub noise: f64,
    pub optimum: ValuePair,
    pub pi_s: ValuePair,
    pub tuples: Vec<TupleDiagnostics>,
    /// Tuple the testing phase would try first.
    pub first_selected: usize,
}

pub fn cmd_eval(cfg: &RunConfig, noise: f64) -> anyhow::Result<EvalReport> {
    let bundle = load_bundle(cfg)?;
    let family = sampler(cfg)?;
    let m = family.task(noise)?.cmdp;
    let optimum = oracle_optimal(&m, 0.0, 0.0)?.values[0];
    let pi_s = exact_policy_values(&m, &bundle.pi_s)?;
    let tuples = bundle
        .tuples
        .iter()
        .enumerate()
        .map(|(index, t)| {
            Ok(TupleDiagnostics {
                index,
                param: t.task_meta.param,
                u: t.u,
                v: t.v,
                exact: exact_policy_values(&m, &t.policy)?,
            })
        })
        .collect::<anyhow::Result<Vec<_>>>()?;
    let first_selected = (0..bundle.tuples.len())
        .fold(0, |b, j| if bundle.tuples[j].u > bundle.tuples[b].u { j } else { b });
    Ok(EvalReport {
        noise,
        optimum,
        pi_s,
        tuples,
        first_selected,
    })
}

impl std::fmt::Display for EvalReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "task noise {:.4}", self.noise)?;
        writeln!(
            f,
            "LP optimum   V_r = {:.6}  V_c = {:.6}",
            self.optimum.v_reward, self.optimum.v_constraint
        )?;
        writeln!(
            f,
            "pi_s         V_r = {:.6}  V_c = {:.6}",
            self.pi_s.v_reward, self.pi_s.v_constraint
        )?;
        for t in &self.tuples {
            writeln!(
                f,
                "tuple {:>3} (noise {:.4})  u = {:.6} v = {:.6}  exact V_r = {:.6} V_c = {:.6}",
                t.index, t.param, t.u, t.v, t.exact.v_reward, t.exact.v_constraint
            )?;
        }
        write!(f, "first candidate: tuple {}", self.first_selected)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoverRow {
    pub eps: f64,
    pub delta: f64,
    pub n_samples: usize,
    pub estimate: usize,
}

/// Estimates at `n_samples` and at twice that, on independent draws.
pub fn cmd_cover(cfg: &RunConfig) -> anyhow::Result<Vec<CoverRow>> {
    let family = sampler(cfg)?;
    let mut rows = Vec::new();
    for (round, n) in [cfg.cover.n_samples, 2 * cfg.cover.n_samples].into_iter().enumerate() {
        let seed = cfg.train_seed.wrapping_add(round as u64);
        let est = estimate_covering_numbers(&family as &dyn TaskSampler, &cfg.cover.eps_grid, cfg.delta, n, seed);
        rows.extend(cfg.cover.eps_grid.iter().zip(est).map(|(&eps, estimate)| CoverRow {
            eps,
            delta: cfg.delta,
            n_samples: n,
            estimate,
        }));
    }
    write_csv_with_header(&cfg.out.join("cover.csv"), &[], &rows)?;
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_std_sample_convention() {
        let s = MeanStd::of(&[1.0, 2.0, 3.0, 4.0]);
        assert!((s.mean - 2.5).abs() < 1e-15);
        assert!((s.std - (5.0f64 / 3.0).sqrt()).abs() < 1e-15);
        assert_eq!(MeanStd::of(&[7.0]).std, 0.0);
        assert_eq!(MeanStd::of(&[]), MeanStd::default());
    }

    #[test]
    fn algorithms_sort_by_name() {
        let mut names: Vec<&str> = Algorithm::ALL.iter().map(|a| a.as_str()).collect();
        let before = names.clone();
        names.sort();
        assert_eq!(names, before);
        assert_eq!(serde_json::to_string(&Algorithm::PceBaseline).unwrap(), "\"pce_baseline\"");
    }

    #[test]
    fn test_noise_reproducible_and_in_range() {
        let family = sampler(&RunConfig::default()).unwrap();
        for seed in 0..50 {
            let a = test_noise(&family, seed);
            assert_eq!(a, test_noise(&family, seed));
            assert!((0.0..=MAX_NOISE).contains(&a));
        }
        assert_ne!(test_noise(&family, 0), test_noise(&family, 1));
    }

    #[test]
    fn horizon_override() {
        let cfg = RunConfig {
            h: Some(7),
            ..RunConfig::default()
        };
        assert_eq!(test_config(&cfg, 0.9, 3).h, 7);
        assert_eq!(test_config(&RunConfig::default(), 0.9, 3).h, 51);
    }
}

//! Run configuration: TOML file values overridden by command-line flags.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use safemeta_core::envs::{GridworldLayout, NoiseDistribution, NoiseInterpretation};
use safemeta_core::train::FeasibilityMode;

#[derive(Debug, Parser)]
#[command(name = "safemeta", version, about = "Safe constrained meta-RL on the noisy gridworld")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build the policy-value set and the shared safe policy.
    Train(CommonArgs),
    /// Run every test arm on freshly sampled test tasks.
    Test(CommonArgs),
    /// Exact diagnostics of a bundle on one task.
    Eval {
        #[command(flatten)]
        common: CommonArgs,
        /// Noise level of the task to evaluate on.
        #[arg(long)]
        noise: f64,
    },
    /// Covering-number estimates over a radius grid.
    Cover(CommonArgs),
}

impl Command {
    pub fn common(&self) -> &CommonArgs {
        match self {
            Command::Train(c) | Command::Test(c) | Command::Cover(c) => c,
            Command::Eval { common, .. } => common,
        }
    }
}

#[derive(Debug, Clone, Default, Args)]
pub struct CommonArgs {
    /// TOML file with run settings.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Seeds, e.g. `0,3,7` or `0..10`.
    #[arg(long, value_parser = parse_seed_list)]
    pub seed: Option<SeedList>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Gridworld layout JSON.
    #[arg(long)]
    pub layout: Option<PathBuf>,
    /// Training bundle (defaults to `<out>/bundle.json`).
    #[arg(long)]
    pub bundle: Option<PathBuf>,
    #[arg(long, value_parser = ["variance", "stddev"])]
    pub noise_interpretation: Option<String>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub eps: Option<f64>,
    #[arg(long)]
    pub delta: Option<f64>,
    #[arg(long)]
    pub xi: Option<f64>,
    /// Train on a single task at this noise level.
    #[arg(long)]
    pub point_mass: Option<f64>,
    /// Worker threads for multi-seed runs.
    #[arg(long)]
    pub jobs: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SeedList(pub Vec<u64>);

fn parse_seed_list(text: &str) -> Result<SeedList, String> {
    parse_seeds(text).map(SeedList)
}

/// Parses `a,b,c` with optional `lo..hi` ranges.
pub fn parse_seeds(text: &str) -> Result<Vec<u64>, String> {
    let mut out = Vec::new();
    for part in text.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        if let Some((lo, hi)) = part.split_once("..") {
            let lo: u64 = lo.parse().map_err(|e| format!("{part}: {e}"))?;
            let hi: u64 = hi.parse().map_err(|e| format!("{part}: {e}"))?;
            out.extend(lo..hi);
        } else {
            out.push(part.parse().map_err(|e| format!("{part}: {e}"))?);
        }
    }
    if out.is_empty() {
        return Err("empty seed list".into());
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seeds: Vec<u64>,
    /// Seed of the training sampler.
    pub train_seed: u64,
    pub out: PathBuf,
    pub layout: Option<PathBuf>,
    pub bundle: Option<PathBuf>,
    pub noise_interpretation: NoiseInterpretation,
    pub k: usize,
    /// Rollout horizon; derived from eps and gamma when absent.
    pub h: Option<usize>,
    pub eps: f64,
    pub delta: f64,
    pub xi: f64,
    pub n_init: Option<usize>,
    pub max_doublings: usize,
    pub feasibility: FeasibilityMode,
    pub point_mass: Option<f64>,
    pub jobs: Option<usize>,
    pub cover: CoverSettings,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CoverSettings {
    pub eps_grid: Vec<f64>,
    pub n_samples: usize,
}

impl Default for CoverSettings {
    fn default() -> Self {
        Self {
            eps_grid: vec![0.02, 0.05, 0.1, 0.2, 0.5],
            n_samples: 400,
        }
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seeds: (0..10).collect(),
            train_seed: 0,
            out: PathBuf::from("runs"),
            layout: None,
            bundle: None,
            noise_interpretation: NoiseInterpretation::Variance,
            k: 500,
            h: None,
            eps: 0.05,
            delta: 0.2,
            xi: 0.05,
            n_init: None,
            max_doublings: 20,
            feasibility: FeasibilityMode::Structured,
            point_mass: None,
            jobs: None,
            cover: CoverSettings::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> anyhow::Result<Self> {
        Ok(toml::from_str(text)?)
    }

    /// Defaults, then the config file, then explicit flags.
    pub fn resolve(args: &CommonArgs) -> anyhow::Result<Self> {
        let mut cfg = match &args.config {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .with_context(|| format!("reading {}", path.display()))?;
                Self::from_toml(&text).with_context(|| format!("parsing {}", path.display()))?
            }
            None => Self::default(),
        };
        if let Some(s) = &args.seed {
            cfg.seeds = s.0.clone();
        }
        if let Some(o) = &args.out {
            cfg.out = o.clone();
        }
        if let Some(l) = &args.layout {
            cfg.layout = Some(l.clone());
        }
        if let Some(b) = &args.bundle {
            cfg.bundle = Some(b.clone());
        }
        if let Some(n) = &args.noise_interpretation {
            cfg.noise_interpretation = n.parse()?;
        }
        cfg.k = args.k.unwrap_or(cfg.k);
        cfg.eps = args.eps.unwrap_or(cfg.eps);
        cfg.delta = args.delta.unwrap_or(cfg.delta);
        cfg.xi = args.xi.unwrap_or(cfg.xi);
        cfg.point_mass = args.point_mass.or(cfg.point_mass);
        cfg.jobs = args.jobs.or(cfg.jobs);
        cfg.check()?;
        Ok(cfg)
    }

    fn check(&self) -> anyhow::Result<()> {
        if self.seeds.is_empty() {
            bail!("seed list is empty");
        }
        if self.k == 0 {
            bail!("k must be at least 1");
        }
        if !(self.eps > 0.0) || !(self.xi > 0.0) || !(self.delta > 0.0 && self.delta < 1.0) {
            bail!("need eps > 0, xi > 0 and delta in (0,1)");
        }
        if let Some(path) = &self.layout {
            if !path.exists() {
                bail!("layout {} does not exist", path.display());
            }
        }
        Ok(())
    }

    pub fn bundle_path(&self) -> PathBuf {
        self.bundle
            .clone()
            .unwrap_or_else(|| self.out.join("bundle.json"))
    }

    pub fn load_layout(&self) -> anyhow::Result<GridworldLayout> {
        match &self.layout {
            Some(p) => Ok(GridworldLayout::load(Path::new(p))?),
            None => Ok(GridworldLayout::default()),
        }
    }

    pub fn noise(&self) -> NoiseDistribution {
        NoiseDistribution::with_interpretation(self.noise_interpretation)
    }

    /// `# key = value` lines recorded at the top of CSV outputs.
    pub fn header_lines(&self) -> Vec<String> {
        let mut lines = vec![
            format!("# k = {}", self.k),
            format!("# eps = {}", self.eps),
            format!("# delta = {}", self.delta),
            format!("# xi = {}", self.xi),
            format!("# noise_interpretation = {:?}", self.noise_interpretation),
            format!("# seeds = {:?}", self.seeds),
        ];
        if let Some(h) = self.h {
            lines.push(format!("# h = {h}"));
        }
        lines
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seed_lists() {
        assert_eq!(parse_seeds("0..3,7").unwrap(), vec![0, 1, 2, 7]);
        assert_eq!(parse_seeds(" 4 ").unwrap(), vec![4]);
        assert!(parse_seeds("").is_err());
        assert!(parse_seeds("x").is_err());
    }

    #[test]
    fn flags_override_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "k = 40\neps = 0.1\nseeds = [1, 2]\n[cover]\nn_samples = 10\n").unwrap();
        let args = CommonArgs {
            config: Some(path),
            eps: Some(0.07),
            ..Default::default()
        };
        let cfg = RunConfig::resolve(&args).unwrap();
        assert_eq!((cfg.k, cfg.eps, cfg.seeds.clone()), (40, 0.07, vec![1, 2]));
        assert_eq!(cfg.cover.n_samples, 10);
        assert_eq!(cfg.delta, RunConfig::default().delta);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(RunConfig::from_toml("kk = 3").is_err());
    }

    #[test]
    fn missing_layout_rejected() {
        let args = CommonArgs {
            layout: Some(PathBuf::from("/nonexistent/layout.json")),
            ..Default::default()
        };
        assert!(RunConfig::resolve(&args).is_err());
    }
}

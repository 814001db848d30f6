//! Noisy 7x7 gridworld family and its truncated-Gaussian task distribution.
//!
//! Cells are addressed `[row, col]` with row 0 at the top. With noise `i`
//! the intended move happens with probability `1 - i` and otherwise a
//! uniformly random move out of the four is taken, so the intended direction
//! ends up with mass `1 - i + i/4`. Moves off the grid leave the agent in
//! place. The goal is absorbing and pays the full reward on every step.
//! Entering an unsafe cell costs `cost`; the cost table is turned into a
//! margin signal through [`budget_to_margin`].

use std::path::Path;

use rand::{Rng, RngCore};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::cmdp::{budget_to_margin, cmdp_distance, default_margin_scale, TabularCmdp};
use crate::error::{Error, Result};
use crate::train::{Task, TaskSampler};

const DEFAULT_LAYOUT: &str = include_str!("../fixtures/gridworld_7x7.json");

/// Largest admissible noise level.
pub const MAX_NOISE: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Action {
    Up = 0,
    Right = 1,
    Down = 2,
    Left = 3,
}

impl Action {
    pub const ALL: [Action; 4] = [Action::Up, Action::Right, Action::Down, Action::Left];

    fn delta(self) -> (i64, i64) {
        match self {
            Action::Up => (-1, 0),
            Action::Right => (0, 1),
            Action::Down => (1, 0),
            Action::Left => (0, -1),
        }
    }
}

/// Layout fixture: `{width, height, start, goal, unsafe_cells, reward, cost, budget, gamma}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridworldLayout {
    #[serde(default)]
    pub version: u32,
    pub width: usize,
    pub height: usize,
    pub start: [usize; 2],
    pub goal: [usize; 2],
    pub unsafe_cells: Vec<[usize; 2]>,
    /// Raw per-step reward at the goal; rewards are divided by it.
    pub reward: f64,
    /// Raw cost of entering an unsafe cell.
    pub cost: f64,
    /// Budget on the discounted raw cost.
    pub budget: f64,
    pub gamma: f64,
}

impl Default for GridworldLayout {
    fn default() -> Self {
        serde_json::from_str(DEFAULT_LAYOUT).expect("bundled layout fixture parses")
    }
}

impl GridworldLayout {
    pub fn from_json(text: &str) -> Result<Self> {
        let layout: Self =
            serde_json::from_str(text).map_err(|e| Error::InvalidInput(format!("layout: {e}")))?;
        layout.check()?;
        Ok(layout)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::InvalidInput(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    fn check(&self) -> Result<()> {
        let inside = |c: &[usize; 2]| c[0] < self.height && c[1] < self.width;
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidInput("empty grid".into()));
        }
        if !inside(&self.start) || !inside(&self.goal) || !self.unsafe_cells.iter().all(inside) {
            return Err(Error::InvalidInput("layout cell outside the grid".into()));
        }
        if self.unsafe_cells.contains(&self.goal) || self.unsafe_cells.contains(&self.start) {
            return Err(Error::InvalidInput("start/goal cannot be unsafe".into()));
        }
        if !(self.reward > 0.0 && self.cost >= 0.0 && self.budget >= 0.0) {
            return Err(Error::InvalidInput("reward must be positive, cost and budget non-negative".into()));
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::InvalidInput(format!("gamma {} not in (0,1)", self.gamma)));
        }
        Ok(())
    }

    pub fn n_states(&self) -> usize {
        self.width * self.height
    }

    pub fn state(&self, cell: [usize; 2]) -> usize {
        cell[0] * self.width + cell[1]
    }

    pub fn cell(&self, s: usize) -> [usize; 2] {
        [s / self.width, s % self.width]
    }

    pub fn is_unsafe(&self, s: usize) -> bool {
        self.unsafe_cells.contains(&self.cell(s))
    }

    /// Deterministic successor of `s` under `a`; off-grid moves stay put.
    pub fn step(&self, s: usize, a: Action) -> usize {
        if s == self.state(self.goal) {
            return s;
        }
        let [r, c] = self.cell(s);
        let (dr, dc) = a.delta();
        let (nr, nc) = (r as i64 + dr, c as i64 + dc);
        if nr < 0 || nc < 0 || nr >= self.height as i64 || nc >= self.width as i64 {
            s
        } else {
            self.state([nr as usize, nc as usize])
        }
    }

    /// Scale used to map costs into `[-1, 1]`.
    pub fn margin_scale(&self) -> f64 {
        let per_step = (1.0 - self.gamma) * self.budget;
        self.cost.max((per_step - self.cost).abs()).max(per_step).max(1.0)
    }
}

/// Builds the gridworld CMDP at noise level `noise` for the bundled layout.
pub fn build_gridworld(noise: f64) -> Result<TabularCmdp> {
    build_gridworld_with(&GridworldLayout::default(), noise)
}

pub fn build_gridworld_with(layout: &GridworldLayout, noise: f64) -> Result<TabularCmdp> {
    if !(0.0..=MAX_NOISE).contains(&noise) {
        return Err(Error::InvalidInput(format!(
            "noise {noise} outside [0, {MAX_NOISE}]"
        )));
    }
    let n = layout.n_states();
    let na = Action::ALL.len();
    let goal = layout.state(layout.goal);
    let random_mass = noise / na as f64;

    let mut transitions = vec![vec![vec![0.0; n]; na]; n];
    let mut raw_cost = vec![vec![0.0; na]; n];
    let mut reward = vec![vec![0.0; na]; n];
    for s in 0..n {
        for (ai, &a) in Action::ALL.iter().enumerate() {
            let row = &mut transitions[s][ai];
            if s == goal {
                row[s] = 1.0;
                reward[s][ai] = 1.0;
                continue;
            }
            for &b in &Action::ALL {
                let mass = if b == a { 1.0 - noise + random_mass } else { random_mass };
                row[layout.step(s, b)] += mass;
            }
            raw_cost[s][ai] = layout.cost
                * row
                    .iter()
                    .enumerate()
                    .filter(|&(t, &p)| t != s && p > 0.0 && layout.is_unsafe(t))
                    .map(|(_, &p)| p)
                    .sum::<f64>();
        }
    }
    let scale = layout.margin_scale().max(default_margin_scale(&raw_cost, layout.budget, layout.gamma));
    let constraint = budget_to_margin(&raw_cost, layout.budget, layout.gamma, scale)?;
    let mut rho = vec![0.0; n];
    rho[layout.state(layout.start)] = 1.0;
    TabularCmdp::new(rho, transitions, reward, constraint, layout.gamma)
}

/// Whether the noise parameter `0.03` is a variance or a standard deviation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseInterpretation {
    #[default]
    Variance,
    Stddev,
}

impl std::str::FromStr for NoiseInterpretation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "variance" => Ok(Self::Variance),
            "stddev" => Ok(Self::Stddev),
            other => Err(Error::InvalidInput(format!("unknown noise interpretation {other:?}"))),
        }
    }
}

/// Gaussian `N(mean, spread)` truncated to `[low, high]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseDistribution {
    pub mean: f64,
    pub spread: f64,
    pub interpretation: NoiseInterpretation,
    pub low: f64,
    pub high: f64,
}

impl Default for NoiseDistribution {
    fn default() -> Self {
        Self::with_interpretation(NoiseInterpretation::default())
    }
}

impl NoiseDistribution {
    pub fn with_interpretation(interpretation: NoiseInterpretation) -> Self {
        Self {
            mean: 0.3,
            spread: 0.03,
            interpretation,
            low: 0.0,
            high: MAX_NOISE,
        }
    }

    pub fn sigma(&self) -> f64 {
        match self.interpretation {
            NoiseInterpretation::Variance => self.spread.sqrt(),
            NoiseInterpretation::Stddev => self.spread,
        }
    }

    /// Rejection sampling from the untruncated Gaussian.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let normal = Normal::new(self.mean, self.sigma()).expect("finite positive sigma");
        loop {
            let x = normal.sample(rng);
            if (self.low..=self.high).contains(&x) {
                return x;
            }
        }
    }
}

/// Task sampler over the gridworld family.
///
/// The family is linear in the noise level, so `d(G(i), G(j)) = kappa |i - j|`
/// with `kappa` measured once by enumeration; the check oracle then compares
/// noise levels directly.
#[derive(Clone, Debug)]
pub struct GridworldSampler {
    pub layout: GridworldLayout,
    pub noise: NoiseDistribution,
    kappa: f64,
}

impl GridworldSampler {
    pub fn new(layout: GridworldLayout, noise: NoiseDistribution) -> Result<Self> {
        layout.check()?;
        let lo = build_gridworld_with(&layout, 0.0)?;
        let hi = build_gridworld_with(&layout, MAX_NOISE)?;
        let kappa = cmdp_distance(&lo, &hi)? / MAX_NOISE;
        Ok(Self { layout, noise, kappa })
    }

    /// Distance per unit of noise difference.
    pub fn kappa(&self) -> f64 {
        self.kappa
    }

    pub fn task(&self, noise: f64) -> Result<Task> {
        Ok(Task {
            param: noise,
            cmdp: build_gridworld_with(&self.layout, noise)?,
        })
    }
}

impl TaskSampler for GridworldSampler {
    fn draw(&self, rng: &mut dyn RngCore) -> Task {
        let i = self.noise.sample(rng).clamp(0.0, MAX_NOISE);
        self.task(i).expect("sampled noise lies in range")
    }

    fn distance(&self, a: &Task, b: &Task) -> f64 {
        self.kappa * (a.param - b.param).abs()
    }

    /// Feasibility is monotone in the noise level, so the noisiest member
    /// of the family is the worst case.
    fn worst_case(&self) -> Option<Task> {
        self.task(self.noise.high.min(MAX_NOISE)).ok()
    }
}

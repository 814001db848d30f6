//! Dense two-phase simplex for small linear programs.
//!
//! Problems are stated as
//!
//! ```text
//! maximize    c^T x
//! subject to  A_eq x  = b_eq
//!             A_ge x >= b_ge
//!             x >= 0
//! ```
//!
//! The tableau is dense. Pivoting uses Dantzig's rule and switches to Bland's
//! rule after a run of degenerate pivots. Once an optimal basis is found the
//! basic solution is recomputed from the original data with an LU solve, which
//! removes most of the round-off accumulated by the tableau updates.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

const PIVOT_TOL: f64 = 1e-11;
const COST_TOL: f64 = 1e-10;
const DEGENERATE_RUN: usize = 50;

#[derive(Clone, Debug, Default)]
pub struct LinearProgram {
    n_vars: usize,
    objective: Vec<f64>,
    eq: Vec<(Vec<f64>, f64)>,
    ge: Vec<(Vec<f64>, f64)>,
}

#[derive(Clone, Debug)]
pub struct LpSolution {
    pub x: Vec<f64>,
    pub objective: f64,
    pub iterations: usize,
}

impl LinearProgram {
    /// A maximization problem over `objective.len()` non-negative variables.
    pub fn maximize(objective: Vec<f64>) -> Self {
        Self {
            n_vars: objective.len(),
            objective,
            eq: Vec::new(),
            ge: Vec::new(),
        }
    }

    pub fn n_vars(&self) -> usize {
        self.n_vars
    }

    pub fn add_eq(&mut self, coeffs: Vec<f64>, rhs: f64) -> &mut Self {
        assert_eq!(coeffs.len(), self.n_vars, "row length");
        self.eq.push((coeffs, rhs));
        self
    }

    pub fn add_ge(&mut self, coeffs: Vec<f64>, rhs: f64) -> &mut Self {
        assert_eq!(coeffs.len(), self.n_vars, "row length");
        self.ge.push((coeffs, rhs));
        self
    }

    pub fn add_le(&mut self, coeffs: Vec<f64>, rhs: f64) -> &mut Self {
        let neg = coeffs.iter().map(|v| -v).collect();
        self.add_ge(neg, -rhs)
    }

    pub fn solve(&self) -> Result<LpSolution> {
        Tableau::build(self).run(self)
    }
}

struct Tableau {
    rows: usize,
    cols: usize, // structural + surplus + artificial, RHS excluded
    n_std: usize, // structural + surplus
    t: Vec<f64>,  // (rows + 1) x (cols + 1), last row = objective
    basis: Vec<usize>,
    // original standard-form data, rows already sign-normalized
    a_std: Vec<Vec<f64>>,
    b_std: Vec<f64>,
    iterations: usize,
}

impl Tableau {
    fn build(lp: &LinearProgram) -> Self {
        let n = lp.n_vars;
        let n_surplus = lp.ge.len();
        let n_std = n + n_surplus;
        let rows = lp.eq.len() + lp.ge.len();
        let cols = n_std + rows;

        let mut a_std = Vec::with_capacity(rows);
        let mut b_std = Vec::with_capacity(rows);
        for (coeffs, rhs) in &lp.eq {
            let mut row = coeffs.clone();
            row.resize(n_std, 0.0);
            a_std.push(row);
            b_std.push(*rhs);
        }
        for (j, (coeffs, rhs)) in lp.ge.iter().enumerate() {
            let mut row = coeffs.clone();
            row.resize(n_std, 0.0);
            row[n + j] = -1.0;
            a_std.push(row);
            b_std.push(*rhs);
        }
        for (row, b) in a_std.iter_mut().zip(b_std.iter_mut()) {
            if *b < 0.0 {
                row.iter_mut().for_each(|v| *v = -*v);
                *b = -*b;
            }
        }

        let width = cols + 1;
        let mut t = vec![0.0; (rows + 1) * width];
        for i in 0..rows {
            t[i * width..i * width + n_std].copy_from_slice(&a_std[i]);
            t[i * width + n_std + i] = 1.0;
            t[i * width + cols] = b_std[i];
        }
        let basis = (0..rows).map(|i| n_std + i).collect();
        Self {
            rows,
            cols,
            n_std,
            t,
            basis,
            a_std,
            b_std,
            iterations: 0,
        }
    }

    #[inline]
    fn at(&self, i: usize, j: usize) -> f64 {
        self.t[i * (self.cols + 1) + j]
    }

    fn rhs(&self, i: usize) -> f64 {
        self.at(i, self.cols)
    }

    /// Loads `max cost^T x` into the objective row as reduced costs
    /// `z_j = cost_B^T B^{-1} A_j - cost_j` (entering candidates have `z_j < 0`).
    fn load_objective(&mut self, cost: &[f64]) {
        let width = self.cols + 1;
        let obj = self.rows * width;
        for j in 0..width {
            self.t[obj + j] = if j < cost.len() { -cost[j] } else { 0.0 };
        }
        for i in 0..self.rows {
            let cb = cost.get(self.basis[i]).copied().unwrap_or(0.0);
            if cb != 0.0 {
                for j in 0..width {
                    self.t[obj + j] += cb * self.t[i * width + j];
                }
            }
        }
    }

    fn pivot(&mut self, pr: usize, pc: usize) {
        let width = self.cols + 1;
        let inv = 1.0 / self.at(pr, pc);
        for j in 0..width {
            self.t[pr * width + j] *= inv;
        }
        self.t[pr * width + pc] = 1.0;
        let pivot_row: Vec<f64> = self.t[pr * width..(pr + 1) * width].to_vec();
        for i in 0..=self.rows {
            if i == pr {
                continue;
            }
            let f = self.t[i * width + pc];
            if f == 0.0 {
                continue;
            }
            let row = &mut self.t[i * width..(i + 1) * width];
            for (v, p) in row.iter_mut().zip(&pivot_row) {
                *v -= f * p;
            }
            row[pc] = 0.0;
        }
        self.basis[pr] = pc;
        self.iterations += 1;
    }

    /// Runs simplex iterations over columns `< allowed`. Returns `Err(Unbounded)`
    /// if an improving column has no positive entry.
    fn optimize(&mut self, allowed: usize, max_iter: usize) -> Result<()> {
        let mut degenerate = 0usize;
        loop {
            if self.iterations >= max_iter {
                return Err(Error::IterationLimit(max_iter));
            }
            let bland = degenerate >= DEGENERATE_RUN;
            let obj = self.rows;
            let mut enter = None;
            let mut best = -COST_TOL;
            for j in 0..allowed {
                let z = self.at(obj, j);
                if z < best {
                    enter = Some(j);
                    if bland {
                        break;
                    }
                    best = z;
                }
            }
            let Some(pc) = enter else { return Ok(()) };

            let mut leave: Option<(usize, f64)> = None;
            for i in 0..self.rows {
                let a = self.at(i, pc);
                if a > PIVOT_TOL {
                    let ratio = self.rhs(i) / a;
                    let better = match leave {
                        None => true,
                        Some((li, lr)) => {
                            ratio < lr - 1e-12
                                || (ratio <= lr + 1e-12 && self.basis[i] < self.basis[li])
                        }
                    };
                    if better {
                        leave = Some((i, ratio));
                    }
                }
            }
            let Some((pr, ratio)) = leave else {
                return Err(Error::Unbounded);
            };
            if ratio.abs() <= 1e-12 {
                degenerate += 1;
            } else {
                degenerate = 0;
            }
            self.pivot(pr, pc);
        }
    }

    fn run(mut self, lp: &LinearProgram) -> Result<LpSolution> {
        let max_iter = 50 * (self.rows + self.cols).max(100);

        // phase one: minimize the sum of artificials
        let mut phase1 = vec![0.0; self.cols];
        phase1[self.n_std..].iter_mut().for_each(|c| *c = -1.0);
        self.load_objective(&phase1);
        self.optimize(self.cols, max_iter)?;
        let scale = 1.0 + self.b_std.iter().fold(0.0f64, |m, b| m.max(b.abs()));
        let residual: f64 = (0..self.rows)
            .filter(|&i| self.basis[i] >= self.n_std)
            .map(|i| self.rhs(i))
            .sum();
        if residual > 1e-9 * scale {
            return Err(Error::Infeasible { residual });
        }

        // drive zero-level artificials out of the basis; rows where that is
        // impossible are redundant and dropped from the refinement solve
        let mut redundant = vec![false; self.rows];
        #[allow(clippy::needless_range_loop)]
        for i in 0..self.rows {
            if self.basis[i] < self.n_std {
                continue;
            }
            let col = (0..self.n_std)
                .filter(|&j| !self.basis.contains(&j))
                .max_by(|&a, &b| self.at(i, a).abs().total_cmp(&self.at(i, b).abs()))
                .filter(|&j| self.at(i, j).abs() > 1e-9);
            match col {
                Some(j) => self.pivot(i, j),
                None => redundant[i] = true,
            }
        }

        // phase two over structural and surplus columns only
        let mut cost = lp.objective.clone();
        cost.resize(self.cols, 0.0);
        self.load_objective(&cost);
        self.optimize(self.n_std, max_iter)?;

        let x = self.refine(&redundant);
        let objective = lp.objective.iter().zip(&x).map(|(c, v)| c * v).sum();
        Ok(LpSolution {
            x: x[..lp.n_vars].to_vec(),
            objective,
            iterations: self.iterations,
        })
    }

    /// Recomputes the basic solution as `B^{-1} b` from the original rows.
    fn refine(&self, redundant: &[bool]) -> Vec<f64> {
        let keep: Vec<usize> = (0..self.rows).filter(|&i| !redundant[i]).collect();
        let basic: Vec<usize> = keep
            .iter()
            .map(|&i| self.basis[i])
            .filter(|&j| j < self.n_std)
            .collect();
        let mut x = vec![0.0; self.n_std];
        let tableau_x = |x: &mut Vec<f64>| {
            for i in 0..self.rows {
                if self.basis[i] < self.n_std {
                    x[self.basis[i]] = self.rhs(i).max(0.0);
                }
            }
        };
        if basic.len() != keep.len() {
            tableau_x(&mut x);
            return x;
        }
        let k = keep.len();
        let b_mat = DMatrix::from_fn(k, k, |r, c| self.a_std[keep[r]][basic[c]]);
        let rhs = DVector::from_iterator(k, keep.iter().map(|&i| self.b_std[i]));
        match b_mat.lu().solve(&rhs) {
            Some(sol) if sol.iter().all(|v| v.is_finite() && *v > -1e-7) => {
                for (c, &j) in basic.iter().enumerate() {
                    x[j] = sol[c].max(0.0);
                }
            }
            _ => tableau_x(&mut x),
        }
        x
    }
}

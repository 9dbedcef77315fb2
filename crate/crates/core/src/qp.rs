//! Weighted projection of a dynamics tensor onto linear constraints.
//!
//! Solves `min ½ Σ (w_i + ridge)(x_i − x0_i)²` subject to one unit-sum
//! equality per simplex row, `x ≥ 0`, and two-sided general rows. The
//! objective is diagonal, so the problem splits into independent blocks of
//! simplex rows linked by general rows. Blocks without general rows are
//! weighted simplex projections with a closed form. The rest are solved by a
//! primal-dual interior point method with Mehrotra's predictor-corrector,
//! which stays well posed when general rows are linearly dependent (rows
//! from consecutive linearizations often nearly are).

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::constraints::LinearConstraintSet;
use crate::error::{invalid, Result};

pub const DEFAULT_RIDGE: f64 = 1e-6;
/// Interior point iterations stop once residuals and the duality measure fall
/// below this.
const IPM_TOL: f64 = 1e-11;
const IPM_MAX_ITER: usize = 200;
/// Iterations without halving the KKT error before giving up.
const STALL_ITERS: usize = 12;
/// A stalled block whose scaled primal residual exceeds this is infeasible.
const PRIMAL_FLOOR: f64 = 1e-9;
const REFINE_STEPS: usize = 1;
/// General rows whose band is at most this (relative to the bound) are
/// solved as equalities; split into two inequalities they leave no interior.
const EQ_BAND: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QpProblem {
    /// Target point (the MLE, flattened).
    pub x0: Vec<f64>,
    /// Nonnegative per-coordinate weights (the counts).
    pub weights: Vec<f64>,
    pub ridge: f64,
    pub constraints: LinearConstraintSet,
}

impl QpProblem {
    pub fn new(x0: Vec<f64>, weights: Vec<f64>, constraints: LinearConstraintSet) -> Self {
        Self {
            x0,
            weights,
            ridge: DEFAULT_RIDGE,
            constraints,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.constraints.dim();
        if self.x0.len() != d || self.weights.len() != d {
            return invalid(format!(
                "x0 ({}) and weights ({}) must have dimension {d}",
                self.x0.len(),
                self.weights.len()
            ));
        }
        if self.weights.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
            return invalid("weights must be finite and nonnegative");
        }
        if !(self.ridge > 0.0 && self.ridge.is_finite()) {
            return invalid("ridge must be positive");
        }
        if self.x0.iter().any(|x| !x.is_finite()) {
            return invalid("x0 must be finite");
        }
        for (k, row) in self.constraints.rows.iter().enumerate() {
            if !(row.lower.is_finite() && row.upper.is_finite()) || row.lower > row.upper {
                return invalid(format!("row {k} has bounds [{}, {}]", row.lower, row.upper));
            }
            if row.coeffs.iter().any(|&(i, c)| i >= d || !c.is_finite()) {
                return invalid(format!("row {k} has an invalid coefficient"));
            }
        }
        Ok(())
    }

    pub fn objective(&self, x: &[f64]) -> f64 {
        0.5 * x
            .iter()
            .zip(&self.x0)
            .zip(&self.weights)
            .map(|((x, x0), w)| (w + self.ridge) * (x - x0).powi(2))
            .sum::<f64>()
    }

    /// Writes the problem as whitespace-separated text: the diagonal, x0, then
    /// one `lower upper idx:coef ...` line per general row.
    pub fn dump(&self) -> String {
        use std::fmt::Write as _;
        let mut out = String::new();
        let c = &self.constraints;
        let _ = writeln!(
            out,
            "dim {} rows {} simplex_width {}",
            c.dim(),
            c.rows.len(),
            c.n_states
        );
        let diag: Vec<String> = self
            .weights
            .iter()
            .map(|w| format!("{:e}", w + self.ridge))
            .collect();
        let _ = writeln!(out, "{}", diag.join(" "));
        let x0: Vec<String> = self.x0.iter().map(|x| format!("{x:e}")).collect();
        let _ = writeln!(out, "{}", x0.join(" "));
        for row in &c.rows {
            let _ = write!(out, "{:e} {:e}", row.lower, row.upper);
            for (i, v) in &row.coeffs {
                let _ = write!(out, " {i}:{v:e}");
            }
            out.push('\n');
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QpSettings {
    pub tol_primal: f64,
    pub tol_dual: f64,
    pub max_iter: usize,
}

impl Default for QpSettings {
    fn default() -> Self {
        Self {
            tol_primal: 1e-6,
            tol_dual: 1e-6,
            max_iter: IPM_MAX_ITER,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QpStatus {
    Optimal,
    MaxIter,
    Infeasible,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Infeasibility {
    /// General row that could not be satisfied.
    pub row: usize,
    pub violation: f64,
    /// General rows active when infeasibility was established.
    pub conflicting: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QpSolution {
    pub x: Vec<f64>,
    pub status: QpStatus,
    pub primal_residual: f64,
    pub dual_residual: f64,
    pub iterations: usize,
    /// One per simplex row.
    pub eq_mult: Vec<f64>,
    /// One per coordinate, for `x ≥ 0`.
    pub bound_mult: Vec<f64>,
    /// One per general row: positive when the lower bound binds, negative for the upper.
    pub ineq_mult: Vec<f64>,
    pub infeasibility: Option<Infeasibility>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KktReport {
    pub stationarity: f64,
    pub primal: f64,
    pub dual_feasibility: f64,
    pub complementarity: f64,
}

impl KktReport {
    pub fn within(&self, settings: &QpSettings) -> bool {
        self.primal <= settings.tol_primal
            && self
                .stationarity
                .max(self.dual_feasibility)
                .max(self.complementarity)
                <= settings.tol_dual
    }
}

/// KKT residuals of `solution` for `problem`, all in max-norm.
pub fn kkt_report(problem: &QpProblem, solution: &QpSolution) -> KktReport {
    let c = &problem.constraints;
    let n = c.n_states;
    let x = &solution.x;
    let mut grad: Vec<f64> = x
        .iter()
        .zip(&problem.x0)
        .zip(&problem.weights)
        .map(|((x, x0), w)| (w + problem.ridge) * (x - x0))
        .collect();
    for (i, g) in grad.iter_mut().enumerate() {
        *g -= solution.eq_mult.get(i / n).copied().unwrap_or(0.0);
        *g -= solution.bound_mult.get(i).copied().unwrap_or(0.0);
    }
    let mut complementarity: f64 = 0.0;
    let mut dual_feasibility: f64 = 0.0;
    for (k, row) in c.rows.iter().enumerate() {
        let y = solution.ineq_mult.get(k).copied().unwrap_or(0.0);
        for &(i, coef) in &row.coeffs {
            grad[i] -= y * coef;
        }
        let v = row.eval(x);
        let gap = if y >= 0.0 {
            v - row.lower
        } else {
            row.upper - v
        };
        complementarity = complementarity.max((y * gap).abs());
    }
    for (i, &mu) in solution.bound_mult.iter().enumerate() {
        dual_feasibility = dual_feasibility.max((-mu).max(0.0));
        complementarity = complementarity.max((mu * x[i]).abs());
    }
    KktReport {
        stationarity: grad.iter().fold(0.0, |a, g| a.max(g.abs())),
        primal: c.max_violation(x),
        dual_feasibility,
        complementarity,
    }
}

/// Solves the projection problem. Input errors are returned as `Err`;
/// infeasibility and iteration limits are reported through the status.
pub fn solve(problem: &QpProblem, settings: &QpSettings) -> Result<QpSolution> {
    problem.validate()?;
    let c = &problem.constraints;
    let n = c.n_states;
    let d = c.dim();

    let mut x = problem.x0.clone();
    let mut eq_mult = vec![0.0; c.n_simplex_rows()];
    let mut bound_mult = vec![0.0; d];
    let mut ineq_mult = vec![0.0; c.rows.len()];
    let mut iterations = 0;
    let mut infeasibility = None;

    // Rows whose coefficients vanish are decided by their bounds alone.
    for (k, row) in c.rows.iter().enumerate() {
        if row.coeffs.is_empty() && (row.lower > 0.0 || row.upper < 0.0) {
            infeasibility = Some(Infeasibility {
                row: k,
                violation: row.lower.max(-row.upper),
                conflicting: vec![k],
            });
        }
    }

    if infeasibility.is_none() {
        for block in blocks(c) {
            if block.general.is_empty() {
                for &r in &block.simplex_rows {
                    let range = r * n..(r + 1) * n;
                    let p: Vec<f64> = problem.weights[range.clone()]
                        .iter()
                        .map(|w| w + problem.ridge)
                        .collect();
                    let (xr, tau) = simplex_projection(&problem.x0[range.clone()], &p);
                    for (k, i) in range.enumerate() {
                        x[i] = xr[k];
                        bound_mult[i] = if xr[k] > 0.0 {
                            0.0
                        } else {
                            tau - p[k] * problem.x0[i]
                        };
                    }
                    eq_mult[r] = -tau;
                }
                continue;
            }
            let mut ipm = Ipm::new(problem, &block);
            let mut out = ipm.run(settings.max_iter);
            if !matches!(out, Outcome::Infeasible(_)) {
                if let Some(info) = ipm.dependent_violation() {
                    out = Outcome::Infeasible(info);
                }
            }
            iterations += ipm.iterations;
            ipm.write_back(&mut x, &mut eq_mult, &mut bound_mult, &mut ineq_mult);
            match out {
                Outcome::Done => {}
                Outcome::Cap => {}
                Outcome::Infeasible(info) => {
                    infeasibility = Some(info);
                    break;
                }
            }
        }
    }

    let mut sol = QpSolution {
        x,
        status: QpStatus::Optimal,
        primal_residual: 0.0,
        dual_residual: 0.0,
        iterations,
        eq_mult,
        bound_mult,
        ineq_mult,
        infeasibility: None,
    };
    let kkt = kkt_report(problem, &sol);
    sol.primal_residual = kkt.primal;
    sol.dual_residual = kkt
        .stationarity
        .max(kkt.dual_feasibility)
        .max(kkt.complementarity);
    sol.status = if let Some(info) = infeasibility {
        sol.infeasibility = Some(info);
        QpStatus::Infeasible
    } else if !kkt.within(settings) {
        QpStatus::MaxIter
    } else {
        QpStatus::Optimal
    };
    Ok(sol)
}

/// `argmin ½ Σ p_i (x_i − x0_i)²` over the probability simplex. Returns the
/// point and the threshold `τ` with `x_i = max(0, x0_i − τ/p_i)`.
pub fn simplex_projection(x0: &[f64], p: &[f64]) -> (Vec<f64>, f64) {
    let mut order: Vec<usize> = (0..x0.len()).collect();
    // Coordinate i stays positive while τ < p_i x0_i.
    order.sort_by(|&a, &b| (p[b] * x0[b]).total_cmp(&(p[a] * x0[a])));
    let (mut sum_x, mut sum_inv) = (0.0, 0.0);
    let mut tau = 0.0;
    for (k, &i) in order.iter().enumerate() {
        sum_x += x0[i];
        sum_inv += 1.0 / p[i];
        let t = (sum_x - 1.0) / sum_inv;
        let next = order.get(k + 1).map(|&j| p[j] * x0[j]);
        if next.is_none_or(|b| t >= b) {
            tau = t;
            break;
        }
    }
    let x = x0
        .iter()
        .zip(p)
        .map(|(&v, &w)| (v - tau / w).max(0.0))
        .collect();
    (x, tau)
}

struct Block {
    /// Simplex rows in this block.
    simplex_rows: Vec<usize>,
    /// General rows in this block.
    general: Vec<usize>,
}

/// Groups simplex rows connected through general rows.
fn blocks(c: &LinearConstraintSet) -> Vec<Block> {
    let n = c.n_states;
    let mut parent: Vec<usize> = (0..c.n_simplex_rows()).collect();
    fn find(p: &mut [usize], mut i: usize) -> usize {
        while p[i] != i {
            p[i] = p[p[i]];
            i = p[i];
        }
        i
    }
    for row in &c.rows {
        let mut it = row.coeffs.iter().map(|&(i, _)| i / n);
        if let Some(first) = it.next() {
            let a = find(&mut parent, first);
            for r in it {
                let b = find(&mut parent, r);
                if a != b {
                    let (lo, hi) = (a.min(b), a.max(b));
                    parent[hi] = lo;
                }
            }
        }
    }
    let roots: Vec<usize> = (0..parent.len()).map(|i| find(&mut parent, i)).collect();
    let mut index_of = vec![usize::MAX; parent.len()];
    let mut out: Vec<Block> = Vec::new();
    for (r, &root) in roots.iter().enumerate() {
        if index_of[root] == usize::MAX {
            index_of[root] = out.len();
            out.push(Block {
                simplex_rows: Vec::new(),
                general: Vec::new(),
            });
        }
        out[index_of[root]].simplex_rows.push(r);
    }
    for (k, row) in c.rows.iter().enumerate() {
        if let Some(&(i, _)) = row.coeffs.first() {
            out[index_of[roots[i / n]]].general.push(k);
        }
    }
    out
}

type Factor = (Cholesky<f64, Dyn>, DMatrix<f64>, Cholesky<f64, Dyn>);

enum Outcome {
    Done,
    Cap,
    Infeasible(Infeasibility),
}

/// Interior point state for one block, in block-local coordinates.
///
/// Inequalities are `G x ≥ h` (each general row contributes its lower side
/// and its negated upper side) with slack `s = G x − h`. Equalities `E x = b`
/// are the simplex rows followed by the zero-width general rows. Duals: `y`
/// for `E`, `z` for `G`, `zx` for `x ≥ 0`.
struct Ipm<'a> {
    problem: &'a QpProblem,
    globals: Vec<usize>,
    /// Global index of each two-sided general row.
    row_ids: Vec<usize>,
    /// Global index of each equality general row.
    eq_ids: Vec<usize>,
    p: Vec<f64>,
    x0: Vec<f64>,
    width: usize,
    /// Simplex rows in the block.
    n_eq: usize,
    /// Equality general rows, after the simplex rows in `y`.
    eq_rows: Vec<Vec<(usize, f64)>>,
    eq_rhs: Vec<f64>,
    /// Equality rows dropped as linear combinations of the kept ones, as
    /// `(global row, coefficients, rhs)`; checked once the solve ends.
    dependent: Vec<(usize, Vec<(usize, f64)>, f64)>,
    g: Vec<Vec<(usize, f64)>>,
    h: Vec<f64>,
    /// `1 + max |coef| + |bound|` per row of `E` (simplex rows first) and of `G`,
    /// dividing the primal residuals.
    eq_scale: Vec<f64>,
    g_scale: Vec<f64>,
    /// General rows as a dense matrix, one row per constraint.
    dense: DMatrix<f64>,
    x: Vec<f64>,
    y: Vec<f64>,
    zx: Vec<f64>,
    s: Vec<f64>,
    z: Vec<f64>,
    iterations: usize,
}

struct Residuals {
    dual: Vec<f64>,
    eq: Vec<f64>,
    ineq: Vec<f64>,
    mu: f64,
}

struct Step {
    dx: Vec<f64>,
    dy: Vec<f64>,
    dzx: Vec<f64>,
    ds: Vec<f64>,
    dz: Vec<f64>,
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |a, x| a.max(x.abs()))
}

/// Largest `α ≤ 1` with `v + α dv ≥ 0`, for positive `v`.
fn max_step(v: &[f64], dv: &[f64]) -> f64 {
    v.iter()
        .zip(dv)
        .filter(|(_, d)| **d < 0.0)
        .map(|(x, d)| -x / d)
        .fold(1.0, f64::min)
}

/// Flags the rows of `rows` (dense width `dim`) that are linearly independent
/// of the simplex rows and of the earlier flagged rows, by Gram–Schmidt.
fn independent_rows(dim: usize, width: usize, rows: &[Vec<(usize, f64)>]) -> Vec<bool> {
    let mut basis: Vec<Vec<f64>> = Vec::new();
    let simplex_norm = 1.0 / (width as f64).sqrt();
    rows.iter()
        .map(|row| {
            let mut v = vec![0.0; dim];
            for &(i, c) in row {
                v[i] += c;
            }
            let norm0 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            for _ in 0..2 {
                for chunk in v.chunks_mut(width) {
                    let mean = chunk.iter().sum::<f64>() * simplex_norm * simplex_norm;
                    chunk.iter_mut().for_each(|x| *x -= mean);
                }
                for q in &basis {
                    let dot: f64 = q.iter().zip(&v).map(|(a, b)| a * b).sum();
                    v.iter_mut().zip(q).for_each(|(x, qi)| *x -= dot * qi);
                }
            }
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            let keep = norm > 1e-9 * norm0;
            if keep {
                v.iter_mut().for_each(|x| *x /= norm);
                basis.push(v);
            }
            keep
        })
        .collect()
}

/// Cholesky factor, retried with a growing diagonal shift up to `1e-6` of the
/// largest diagonal entry.
fn regularized_cholesky(m: DMatrix<f64>) -> Option<Cholesky<f64, Dyn>> {
    if let Some(c) = m.clone().cholesky() {
        return Some(c);
    }
    let max_diag = m.diagonal().iter().copied().fold(0.0, f64::max);
    let mut delta = 1e-15 * max_diag;
    while delta <= 1e-6 * max_diag {
        let mut shifted = m.clone();
        for i in 0..m.nrows() {
            shifted[(i, i)] += delta;
        }
        if let Some(c) = shifted.cholesky() {
            return Some(c);
        }
        delta *= 100.0;
    }
    None
}

impl<'a> Ipm<'a> {
    fn new(problem: &'a QpProblem, block: &Block) -> Self {
        let n = problem.constraints.n_states;
        let globals: Vec<usize> = block
            .simplex_rows
            .iter()
            .flat_map(|&r| r * n..(r + 1) * n)
            .collect();
        let local = |gi: usize| -> usize {
            let pos = block
                .simplex_rows
                .binary_search(&(gi / n))
                .expect("row in block");
            pos * n + gi % n
        };
        let mut g = Vec::with_capacity(2 * block.general.len());
        let mut h = Vec::with_capacity(2 * block.general.len());
        let (mut row_ids, mut eq_ids, mut eq_rows, mut eq_rhs) =
            (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for &k in &block.general {
            let row = &problem.constraints.rows[k];
            let coeffs: Vec<(usize, f64)> = row.coeffs.iter().map(|&(i, c)| (local(i), c)).collect();
            if row.upper - row.lower <= EQ_BAND * (1.0 + row.lower.abs()) {
                eq_ids.push(k);
                eq_rows.push(coeffs);
                eq_rhs.push(0.5 * (row.lower + row.upper));
                continue;
            }
            row_ids.push(k);
            g.push(coeffs.iter().map(|&(i, c)| (i, -c)).collect());
            h.push(-row.upper);
            g.push(coeffs);
            h.push(row.lower);
        }
        let p: Vec<f64> = globals
            .iter()
            .map(|&gi| problem.weights[gi] + problem.ridge)
            .collect();
        let x0: Vec<f64> = globals.iter().map(|&gi| problem.x0[gi]).collect();
        let dim = globals.len();
        let mut dense = DMatrix::zeros(row_ids.len(), dim);
        for (k, pair) in g.chunks(2).enumerate() {
            for &(i, c) in &pair[1] {
                dense[(k, i)] += c;
            }
        }
        let n_eq = block.simplex_rows.len();
        let kept = independent_rows(dim, n, &eq_rows);
        let (mut dependent, mut ids, mut rows, mut rhs) =
            (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for (((id, row), b), keep) in eq_ids.into_iter().zip(eq_rows).zip(eq_rhs).zip(kept) {
            if keep {
                ids.push(id);
                rows.push(row);
                rhs.push(b);
            } else {
                dependent.push((id, row, b));
            }
        }
        let (eq_ids, eq_rows, eq_rhs) = (ids, rows, rhs);
        let x = vec![1.0 / n as f64; dim];
        let row_scale = |row: &[(usize, f64)], b: f64| {
            1.0 + row.iter().fold(0.0, |a: f64, &(_, c)| a.max(c.abs())) + b.abs()
        };
        let mut eq_scale = vec![1.0; n_eq];
        eq_scale.extend(eq_rows.iter().zip(&eq_rhs).map(|(r, &b)| row_scale(r, b)));
        let g_scale = g.iter().zip(&h).map(|(r, &b)| row_scale(r, b)).collect();
        let mut ipm = Self {
            problem,
            row_ids,
            y: vec![0.0; n_eq + eq_ids.len()],
            eq_ids,
            p,
            x0,
            width: n,
            n_eq,
            eq_rows,
            eq_rhs,
            dependent,
            globals,
            s: Vec::new(),
            z: vec![1.0; h.len()],
            g,
            eq_scale,
            g_scale,
            h,
            dense,
            x,
            zx: vec![1.0; dim],
            iterations: 0,
        };
        ipm.s = ipm
            .g_times(&ipm.x)
            .iter()
            .zip(&ipm.h)
            .map(|(gx, h)| (gx - h).max(1.0))
            .collect();
        ipm
    }

    /// `E v`: simplex sums, then the equality general rows.
    fn e_times(&self, v: &[f64]) -> Vec<f64> {
        let mut out: Vec<f64> = v.chunks(self.width).map(|r| r.iter().sum()).collect();
        out.extend(
            self.eq_rows
                .iter()
                .map(|row| row.iter().map(|&(i, c)| c * v[i]).sum::<f64>()),
        );
        out
    }

    /// `acc −= Eᵀ y`.
    fn sub_et_times(&self, acc: &mut [f64], y: &[f64]) {
        for (i, a) in acc.iter_mut().enumerate() {
            *a -= y[i / self.width];
        }
        for (row, &yk) in self.eq_rows.iter().zip(&y[self.n_eq..]) {
            for &(i, c) in row {
                acc[i] -= c * yk;
            }
        }
    }

    fn g_times(&self, v: &[f64]) -> Vec<f64> {
        self.g
            .iter()
            .map(|row| row.iter().map(|&(i, c)| c * v[i]).sum())
            .collect()
    }

    fn residuals(&self) -> Residuals {
        let dim = self.x.len();
        let mut dual: Vec<f64> = (0..dim)
            .map(|i| self.p[i] * (self.x[i] - self.x0[i]) - self.zx[i])
            .collect();
        self.sub_et_times(&mut dual, &self.y);
        for (row, &zk) in self.g.iter().zip(&self.z) {
            for &(i, c) in row {
                dual[i] -= c * zk;
            }
        }
        let mut eq = self.e_times(&self.x);
        for (k, e) in eq.iter_mut().enumerate() {
            *e -= if k < self.n_eq { 1.0 } else { self.eq_rhs[k - self.n_eq] };
        }
        let ineq = self
            .g_times(&self.x)
            .iter()
            .zip(&self.h)
            .zip(&self.s)
            .map(|((gx, h), s)| gx - s - h)
            .collect();
        let comp: f64 = self.x.iter().zip(&self.zx).map(|(a, b)| a * b).sum::<f64>()
            + self.s.iter().zip(&self.z).map(|(a, b)| a * b).sum::<f64>();
        Residuals {
            dual,
            eq,
            ineq,
            mu: comp / (dim + self.s.len()) as f64,
        }
    }

    /// Cholesky factor of `H = P + X⁻¹Z_x + Gᵀ S⁻¹Z G` and of the equality
    /// Schur complement `E H⁻¹ Eᵀ`.
    fn factor(&self) -> Option<Factor> {
        let dim = self.x.len();
        let mut hm = DMatrix::zeros(dim, dim);
        for i in 0..dim {
            hm[(i, i)] = self.p[i] + self.zx[i] / self.x[i];
        }
        // Both sides of a general row share its normal.
        let mut scaled = self.dense.clone();
        for (k, mut r) in scaled.row_iter_mut().enumerate() {
            let w = self.z[2 * k] / self.s[2 * k] + self.z[2 * k + 1] / self.s[2 * k + 1];
            r *= w.sqrt();
        }
        hm += scaled.tr_mul(&scaled);
        // Near-dependent rows can leave H numerically indefinite.
        let ch = regularized_cholesky(hm)?;
        let mut et = DMatrix::zeros(dim, self.n_eq + self.eq_rows.len());
        for i in 0..dim {
            et[(i, i / self.width)] = 1.0;
        }
        for (k, row) in self.eq_rows.iter().enumerate() {
            for &(i, c) in row {
                et[(i, self.n_eq + k)] += c;
            }
        }
        let hinv_et = ch.solve(&et);
        let schur = et.transpose() * &hinv_et;
        let sch = regularized_cholesky(schur)?;
        Some((ch, hinv_et, sch))
    }

    /// Newton step for the linearized KKT system
    /// `P dx − Eᵀdy − Gᵀdz − dzx = −rd`, `E dx = −re`, `G dx − ds = −rg`,
    /// `Zx dx + X dzx = cx`, `Z ds + S dz = cs`, refined against the full
    /// system since the reduced matrix is badly conditioned near the end.
    fn direction(&self, fac: &Factor, res: &Residuals, cx: &[f64], cs: &[f64]) -> Step {
        let mut st = self.solve_reduced(fac, &res.dual, &res.eq, &res.ineq, cx, cs);
        for _ in 0..REFINE_STEPS {
            let dim = self.x.len();
            let mut rd: Vec<f64> = (0..dim)
                .map(|i| res.dual[i] + self.p[i] * st.dx[i] - st.dzx[i])
                .collect();
            self.sub_et_times(&mut rd, &st.dy);
            for (row, dzk) in self.g.iter().zip(&st.dz) {
                for &(i, c) in row {
                    rd[i] -= c * dzk;
                }
            }
            let re: Vec<f64> = self
                .e_times(&st.dx)
                .iter()
                .zip(&res.eq)
                .map(|(a, e)| a + e)
                .collect();
            let rg: Vec<f64> = self
                .g_times(&st.dx)
                .iter()
                .zip(&st.ds)
                .zip(&res.ineq)
                .map(|((gd, ds), r)| gd - ds + r)
                .collect();
            let ex: Vec<f64> = (0..dim)
                .map(|i| cx[i] - self.zx[i] * st.dx[i] - self.x[i] * st.dzx[i])
                .collect();
            let es: Vec<f64> = (0..self.s.len())
                .map(|k| cs[k] - self.z[k] * st.ds[k] - self.s[k] * st.dz[k])
                .collect();
            let c = self.solve_reduced(fac, &rd, &re, &rg, &ex, &es);
            let add = |v: &mut Vec<f64>, d: &[f64]| v.iter_mut().zip(d).for_each(|(a, b)| *a += b);
            add(&mut st.dx, &c.dx);
            add(&mut st.dy, &c.dy);
            add(&mut st.dzx, &c.dzx);
            add(&mut st.ds, &c.ds);
            add(&mut st.dz, &c.dz);
        }
        st
    }

    fn solve_reduced(
        &self,
        fac: &Factor,
        rd: &[f64],
        re: &[f64],
        rg: &[f64],
        cx: &[f64],
        cs: &[f64],
    ) -> Step {
        let (ch, hinv_et, sch) = fac;
        let dim = self.x.len();
        let mut rhs: Vec<f64> = (0..dim).map(|i| -rd[i] + cx[i] / self.x[i]).collect();
        for (k, row) in self.g.iter().enumerate() {
            let w = (cs[k] - self.z[k] * rg[k]) / self.s[k];
            for &(i, c) in row {
                rhs[i] += c * w;
            }
        }
        let hinv_rhs = ch.solve(&DVector::from_vec(rhs));
        // E dx = −re with dx = H⁻¹(rhs + Eᵀ dy)
        let e_hinv_rhs = DVector::from_vec(self.e_times(hinv_rhs.as_slice()));
        let neg_re = DVector::from_iterator(re.len(), re.iter().map(|v| -v));
        let dy = sch.solve(&(neg_re - e_hinv_rhs));
        let dx: Vec<f64> = (hinv_rhs + hinv_et * &dy).iter().copied().collect();
        let ds: Vec<f64> = self.g_times(&dx).iter().zip(rg).map(|(a, b)| a + b).collect();
        let dz = (0..self.s.len())
            .map(|k| (cs[k] - self.z[k] * ds[k]) / self.s[k])
            .collect();
        let dzx = (0..dim)
            .map(|i| (cx[i] - self.zx[i] * dx[i]) / self.x[i])
            .collect();
        Step {
            dx,
            dy: dy.iter().copied().collect(),
            dzx,
            ds,
            dz,
        }
    }

    fn step_length(&self, st: &Step) -> f64 {
        max_step(&self.x, &st.dx)
            .min(max_step(&self.s, &st.ds))
            .min(max_step(&self.zx, &st.dzx))
            .min(max_step(&self.z, &st.dz))
    }

    /// Scaled primal infeasibility and overall KKT error of an iterate.
    fn merit(&self, res: &Residuals) -> (f64, f64) {
        let scaled = |r: &[f64], sc: &[f64]| r.iter().zip(sc).fold(0.0, |a: f64, (r, s)| a.max(r.abs() / s));
        let primal = scaled(&res.eq, &self.eq_scale).max(scaled(&res.ineq, &self.g_scale));
        let dual = max_abs(&res.dual) / (1.0 + max_abs(&self.p));
        (primal, primal.max(dual).max(res.mu))
    }

    /// Runs until the KKT error reaches `IPM_TOL`. When progress stops first
    /// (round-off, or duals drifting off on a degenerate face) the best
    /// iterate seen is kept; it counts as infeasible if its primal residual
    /// is still visibly nonzero.
    fn run(&mut self, max_iter: usize) -> Outcome {
        let mut best = (f64::INFINITY, self.snapshot());
        let mut best_primal = f64::INFINITY;
        let mut last_gain = 0;
        loop {
            let res = self.residuals();
            let (primal, merit) = self.merit(&res);
            if merit.is_finite() && merit < 0.5 * best.0 {
                last_gain = self.iterations;
            }
            if merit < best.0 {
                best = (merit, self.snapshot());
                best_primal = primal;
            }
            if merit <= IPM_TOL {
                return Outcome::Done;
            }
            let stuck = self.iterations >= max_iter || self.iterations - last_gain >= STALL_ITERS;
            let fac = if stuck { None } else { self.factor() };
            let Some(fac) = fac else {
                let diagnosis = self.diagnose();
                self.restore(best.1);
                return if best_primal > PRIMAL_FLOOR {
                    Outcome::Infeasible(diagnosis)
                } else if self.iterations >= max_iter {
                    Outcome::Cap
                } else {
                    Outcome::Done
                };
            };
            self.iterations += 1;
            let cx: Vec<f64> = self.x.iter().zip(&self.zx).map(|(a, b)| -a * b).collect();
            let cs: Vec<f64> = self.s.iter().zip(&self.z).map(|(a, b)| -a * b).collect();
            let aff = self.direction(&fac, &res, &cx, &cs);
            let a_aff = self.step_length(&aff);
            let n_comp = (self.x.len() + self.s.len()) as f64;
            let comp_after = |v: &[f64], dv: &[f64], w: &[f64], dw: &[f64]| -> f64 {
                (0..v.len())
                    .map(|i| (v[i] + a_aff * dv[i]) * (w[i] + a_aff * dw[i]))
                    .sum()
            };
            let mu_aff = (comp_after(&self.x, &aff.dx, &self.zx, &aff.dzx)
                + comp_after(&self.s, &aff.ds, &self.z, &aff.dz))
                / n_comp;
            let sigma = (mu_aff / res.mu).clamp(0.0, 1.0).powi(3);
            let target = sigma * res.mu;
            let cx: Vec<f64> = (0..self.x.len())
                .map(|i| target - self.x[i] * self.zx[i] - aff.dx[i] * aff.dzx[i])
                .collect();
            let cs: Vec<f64> = (0..self.s.len())
                .map(|k| target - self.s[k] * self.z[k] - aff.ds[k] * aff.dz[k])
                .collect();
            let st = self.direction(&fac, &res, &cx, &cs);
            let alpha = (0.995 * self.step_length(&st)).min(1.0);
            let upd = |v: &mut Vec<f64>, d: &[f64]| {
                v.iter_mut().zip(d).for_each(|(a, b)| *a += alpha * b)
            };
            upd(&mut self.x, &st.dx);
            upd(&mut self.y, &st.dy);
            upd(&mut self.zx, &st.dzx);
            upd(&mut self.s, &st.ds);
            upd(&mut self.z, &st.dz);
        }
    }

    fn snapshot(&self) -> [Vec<f64>; 5] {
        [
            self.x.clone(),
            self.y.clone(),
            self.zx.clone(),
            self.s.clone(),
            self.z.clone(),
        ]
    }

    fn restore(&mut self, [x, y, zx, s, z]: [Vec<f64>; 5]) {
        self.x = x;
        self.y = y;
        self.zx = zx;
        self.s = s;
        self.z = z;
    }

    /// The general row carrying the largest dual, with every row whose dual
    /// is within three orders of magnitude of it.
    fn diagnose(&self) -> Infeasibility {
        let gx = self.g_times(&self.x);
        let ex = self.e_times(&self.x);
        // (global row, dual magnitude, violation)
        let mut per_row: Vec<(usize, f64, f64)> = self
            .row_ids
            .iter()
            .enumerate()
            .map(|(k, &id)| {
                let violation = (self.h[2 * k] - gx[2 * k]).max(self.h[2 * k + 1] - gx[2 * k + 1]);
                (id, self.z[2 * k].max(self.z[2 * k + 1]), violation.max(0.0))
            })
            .collect();
        per_row.extend(self.eq_ids.iter().enumerate().map(|(k, &id)| {
            let j = self.n_eq + k;
            (id, self.y[j].abs(), (ex[j] - self.eq_rhs[k]).abs())
        }));
        let worst = per_row
            .iter()
            .copied()
            .max_by(|a, b| a.1.total_cmp(&b.1))
            .unwrap_or((0, 0.0, 0.0));
        let mut conflicting: Vec<usize> = per_row
            .iter()
            .filter(|r| r.1 >= 1e-3 * worst.1)
            .map(|r| r.0)
            .collect();
        conflicting.sort_unstable();
        Infeasibility {
            row: worst.0,
            violation: worst.2,
            conflicting,
        }
    }

    /// First dropped equality row the final point misses.
    fn dependent_violation(&self) -> Option<Infeasibility> {
        self.dependent.iter().find_map(|(id, row, b)| {
            let v: f64 = row.iter().map(|&(i, c)| c * self.x[i]).sum();
            let scale = 1.0 + row.iter().fold(0.0, |a: f64, &(_, c)| a.max(c.abs())) + b.abs();
            ((v - b).abs() > PRIMAL_FLOOR * scale).then(|| Infeasibility {
                row: *id,
                violation: (v - b).abs(),
                conflicting: vec![*id],
            })
        })
    }

    fn write_back(&self, x: &mut [f64], eq_mult: &mut [f64], bound_mult: &mut [f64], ineq_mult: &mut [f64]) {
        let n = self.problem.constraints.n_states;
        for (l, &gi) in self.globals.iter().enumerate() {
            x[gi] = self.x[l];
            bound_mult[gi] = self.zx[l];
        }
        for (r, &y) in self.y[..self.n_eq].iter().enumerate() {
            eq_mult[self.globals[r * self.width] / n] = y;
        }
        for (&gk, &y) in self.eq_ids.iter().zip(&self.y[self.n_eq..]) {
            ineq_mult[gk] = y;
        }
        for (k, &gk) in self.row_ids.iter().enumerate() {
            // lower side minus upper side
            ineq_mult[gk] = self.z[2 * k + 1] - self.z[2 * k];
        }
    }
}

//! Stick-breaking logit coordinates for the rows of a dynamics tensor.
//!
//! A row `x ∈ Δ^{n−1}` maps to `w ∈ ℝ^{n−1}` through
//! `z_i = x_i / (1 − Σ_{j<i} x_j)` and `w_i = logit(z_i)`. Under this map a
//! `Dir(α)` row has log density `Σ_i α_i log z_i + β_i log(1 − z_i)` in `w`
//! (Jacobian included, constants dropped) with `β_i = Σ_{k>i} α_k`.

use crate::data::BatchDataset;
use crate::error::{invalid, Result};
use crate::mdp::Dynamics;

/// Entries are raised to this floor before mapping, since `logit(0)` is `−∞`.
pub const CLAMP_FLOOR: f64 = 1e-8;

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Raises every entry to `CLAMP_FLOOR` and renormalizes. Returns the number
/// of entries that were raised.
pub fn clamp_rows(t: &Dynamics) -> (Dynamics, usize) {
    let n = t.n_states();
    let mut data = t.as_slice().to_vec();
    let mut raised = 0;
    for row in data.chunks_mut(n) {
        let mut hit = false;
        for v in row.iter_mut() {
            if *v < CLAMP_FLOOR {
                *v = CLAMP_FLOOR;
                raised += 1;
                hit = true;
            }
        }
        if hit {
            let s: f64 = row.iter().sum();
            row.iter_mut().for_each(|v| *v /= s);
        }
    }
    (
        Dynamics::from_raw(n, t.n_actions(), data).expect("shape preserved"),
        raised,
    )
}

/// One row, strictly positive entries assumed.
pub fn row_to_unconstrained(x: &[f64], out: &mut [f64]) {
    let n = x.len();
    // suffix[i] = Σ_{j≥i} x_j, summed from the tail for accuracy
    let mut suffix = vec![0.0; n + 1];
    for i in (0..n).rev() {
        suffix[i] = suffix[i + 1] + x[i];
    }
    for i in 0..n - 1 {
        out[i] = x[i].ln() - suffix[i + 1].ln();
    }
}

pub fn row_to_simplex(w: &[f64], out: &mut [f64]) {
    let mut r = 1.0;
    for (i, &wi) in w.iter().enumerate() {
        out[i] = sigmoid(wi) * r;
        r *= sigmoid(-wi);
    }
    out[w.len()] = r;
}

/// Unconstrained coordinates of `t` after clamping, row-major over `(s, a)`.
pub fn to_unconstrained(t: &Dynamics) -> Vec<f64> {
    let (clamped, _) = clamp_rows(t);
    let n = t.n_states();
    let mut w = vec![0.0; t.n_rows() * (n - 1)];
    for (row, out) in clamped.as_slice().chunks(n).zip(w.chunks_mut(n - 1)) {
        row_to_unconstrained(row, out);
    }
    w
}

pub fn to_simplex(w: &[f64], n_states: usize, n_actions: usize) -> Result<Dynamics> {
    if n_states < 2 || w.len() != n_states * n_actions * (n_states - 1) {
        return invalid(format!(
            "{} coordinates do not fit {n_states} states and {n_actions} actions",
            w.len()
        ));
    }
    let mut data = vec![0.0; n_states * n_actions * n_states];
    for (wr, out) in w.chunks(n_states - 1).zip(data.chunks_mut(n_states)) {
        row_to_simplex(wr, out);
    }
    Dynamics::from_raw(n_states, n_actions, data)
}

/// Maps a gradient with respect to `T` at `to_simplex(w)` to one with respect
/// to `w`.
pub fn pullback(w: &[f64], n_states: usize, grad_t: &[f64], out: &mut [f64]) {
    let k = n_states - 1;
    let mut r = vec![0.0; n_states];
    let mut z = vec![0.0; k];
    for ((wr, gt), go) in w
        .chunks(k)
        .zip(grad_t.chunks(n_states))
        .zip(out.chunks_mut(k))
    {
        r[0] = 1.0;
        for i in 0..k {
            z[i] = sigmoid(wr[i]);
            r[i + 1] = r[i] * sigmoid(-wr[i]);
        }
        let mut gr = gt[k];
        for i in (0..k).rev() {
            let gz = (gt[i] - gr) * r[i];
            gr = gt[i] * z[i] + gr * (1.0 - z[i]);
            go[i] = gz * z[i] * (1.0 - z[i]);
        }
    }
}

/// Negative log posterior in unconstrained coordinates, up to a constant.
#[derive(Clone, Debug, PartialEq)]
pub struct Potential {
    n_states: usize,
    n_actions: usize,
    alpha: Vec<f64>,
    beta: Vec<f64>,
}

impl Potential {
    /// `alpha` holds one Dirichlet parameter per tensor entry.
    pub fn from_alpha(n_states: usize, n_actions: usize, alpha: Vec<f64>) -> Result<Self> {
        if n_states < 2 || alpha.len() != n_states * n_actions * n_states {
            return invalid("alpha does not match the tensor shape");
        }
        if alpha.iter().any(|&a| !(a > 0.0 && a.is_finite())) {
            return invalid("Dirichlet parameters must be positive and finite");
        }
        let mut beta = vec![0.0; alpha.len()];
        for (ar, br) in alpha.chunks(n_states).zip(beta.chunks_mut(n_states)) {
            let mut acc = 0.0;
            for i in (0..n_states).rev() {
                br[i] = acc;
                acc += ar[i];
            }
        }
        Ok(Self {
            n_states,
            n_actions,
            alpha,
            beta,
        })
    }

    /// `Dir(N + δ)` per row.
    pub fn from_data(data: &BatchDataset) -> Result<Self> {
        let alpha = data
            .counts()
            .iter()
            .map(|&c| c as f64 + data.delta())
            .collect();
        Self::from_alpha(data.n_states(), data.n_actions(), alpha)
    }

    pub fn dim(&self) -> usize {
        self.n_states * self.n_actions * (self.n_states - 1)
    }

    pub fn energy(&self, w: &[f64]) -> f64 {
        let n = self.n_states;
        let k = n - 1;
        let mut e = 0.0;
        for (r, wr) in w.chunks(k).enumerate() {
            let (a, b) = (&self.alpha[r * n..], &self.beta[r * n..]);
            for i in 0..k {
                e += a[i] * softplus(-wr[i]) + b[i] * softplus(wr[i]);
            }
        }
        e
    }

    /// Energy, with its gradient written into `grad`.
    pub fn energy_and_grad(&self, w: &[f64], grad: &mut [f64]) -> f64 {
        let n = self.n_states;
        let k = n - 1;
        let mut e = 0.0;
        for (r, (wr, gr)) in w.chunks(k).zip(grad.chunks_mut(k)).enumerate() {
            let (a, b) = (&self.alpha[r * n..], &self.beta[r * n..]);
            for i in 0..k {
                e += a[i] * softplus(-wr[i]) + b[i] * softplus(wr[i]);
                let z = sigmoid(wr[i]);
                gr[i] = -(a[i] * (1.0 - z) - b[i] * z);
            }
        }
        e
    }
}

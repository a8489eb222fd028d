//! Diagonal Gaussians: plain values plus graph-side sampling and KL.

use rand::Rng;
use rand_distr::StandardNormal;

use super::graph::{Graph, Var};
use super::Mat;
use crate::error::{DfnError, Result};

pub const LOG_VAR_MIN: f64 = -10.0;
pub const LOG_VAR_MAX: f64 = 10.0;

#[derive(Debug, Clone, PartialEq)]
pub struct DiagGaussian {
    pub mean: Vec<f64>,
    pub log_var: Vec<f64>,
}

impl DiagGaussian {
    /// Clamps `log_var` to `[-10, 10]`.
    pub fn new(mean: Vec<f64>, log_var: Vec<f64>) -> Result<Self> {
        if mean.len() != log_var.len() {
            return Err(DfnError::Shape {
                op: "diag_gaussian",
                detail: format!("mean {} vs log_var {}", mean.len(), log_var.len()),
            });
        }
        let log_var = log_var.into_iter().map(|v| v.clamp(LOG_VAR_MIN, LOG_VAR_MAX)).collect();
        Ok(DiagGaussian { mean, log_var })
    }

    pub fn standard(dim: usize) -> Self {
        DiagGaussian {
            mean: vec![0.0; dim],
            log_var: vec![0.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// `mean + exp(log_var / 2) * eps` with `eps ~ N(0, I)` drawn from `rng`.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        self.mean
            .iter()
            .zip(&self.log_var)
            .map(|(m, lv)| {
                let eps: f64 = rng.sample(StandardNormal);
                m + (0.5 * lv).exp() * eps
            })
            .collect()
    }

    pub fn log_density(&self, x: &[f64]) -> f64 {
        let ln_2pi = (2.0 * std::f64::consts::PI).ln();
        self.mean
            .iter()
            .zip(&self.log_var)
            .zip(x)
            .map(|((m, lv), v)| -0.5 * (ln_2pi + lv + (v - m).powi(2) / lv.exp()))
            .sum()
    }
}

/// Closed-form `KL(q || p)` summed over dimensions.
pub fn gaussian_kl(q: &DiagGaussian, p: &DiagGaussian) -> Result<f64> {
    if q.dim() != p.dim() {
        return Err(DfnError::Shape {
            op: "gaussian_kl",
            detail: format!("q has {} dims, p has {}", q.dim(), p.dim()),
        });
    }
    Ok((0..q.dim())
        .map(|i| {
            let (mq, lq, mp, lp) = (q.mean[i], q.log_var[i], p.mean[i], p.log_var[i]);
            0.5 * (lp - lq + ((lq - lp).exp() + (mq - mp).powi(2) / lp.exp()) - 1.0)
        })
        .sum())
}

/// Graph-side Gaussian with batch rows.
#[derive(Debug, Clone, Copy)]
pub struct GaussianVar {
    pub mean: Var,
    pub log_var: Var,
}

impl GaussianVar {
    /// Splits a `B x 2d` network output into mean and clamped log-variance.
    pub fn from_params(g: &mut Graph, out: Var) -> GaussianVar {
        let d = g.value(out).cols / 2;
        let mean = g.slice_cols(out, 0, d);
        let raw = g.slice_cols(out, d, d);
        let log_var = g.clamp(raw, LOG_VAR_MIN, LOG_VAR_MAX);
        GaussianVar { mean, log_var }
    }

    pub fn standard(g: &mut Graph, rows: usize, dim: usize) -> GaussianVar {
        let mean = g.constant(Mat::zeros(rows, dim));
        let log_var = g.constant(Mat::zeros(rows, dim));
        GaussianVar { mean, log_var }
    }

    pub fn dim(&self, g: &Graph) -> usize {
        g.value(self.mean).cols
    }

    pub fn rows(&self, g: &Graph) -> usize {
        g.value(self.mean).rows
    }

    /// Row `r` as a plain distribution.
    pub fn row(&self, g: &Graph, r: usize) -> DiagGaussian {
        DiagGaussian {
            mean: g.value(self.mean).row(r).to_vec(),
            log_var: g.value(self.log_var).row(r).to_vec(),
        }
    }

    /// Reparameterized draw with externally supplied standard-normal noise.
    pub fn sample_with(&self, g: &mut Graph, eps: Mat) -> Var {
        let e = g.constant(eps);
        let half = g.scale(self.log_var, 0.5);
        let std = g.exp(half);
        let noise = g.mul(std, e);
        g.add(self.mean, noise)
    }

    pub fn sample<R: Rng + ?Sized>(&self, g: &mut Graph, rng: &mut R) -> Var {
        let (rows, dim) = (self.rows(g), self.dim(g));
        self.sample_with(g, standard_normal(rng, rows, dim))
    }
}

pub fn standard_normal<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> Mat {
    Mat::from_vec(
        rows,
        cols,
        (0..rows * cols).map(|_| rng.sample(StandardNormal)).collect(),
    )
}

/// `KL(q || p)` summed over rows and dimensions.
pub fn kl_var(g: &mut Graph, q: &GaussianVar, p: &GaussianVar) -> Var {
    // 0.5 * (lp - lq + exp(lq - lp) + (mq - mp)^2 * exp(-lp) - 1)
    let dl = g.sub(q.log_var, p.log_var);
    let ratio = g.exp(dl);
    let neg_lp = g.scale(p.log_var, -1.0);
    let inv_p = g.exp(neg_lp);
    let dm = g.sub(q.mean, p.mean);
    let dm2 = g.square(dm);
    let maha = g.mul(dm2, inv_p);
    let a = g.add(ratio, maha);
    let b = g.sub(a, dl);
    let s = g.sum_all(b);
    let n = g.value(dl).data.len() as f64;
    let s = g.scale(s, 0.5);
    let offset = g.constant(Mat::scalar(-0.5 * n));
    g.add(s, offset)
}

//! Reverse-mode vs. central-difference comparison.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, Var};
use super::params::{ParamId, ParameterStore};
use super::Mat;
use crate::error::Result;

pub const FD_STEP: f64 = 1e-4;
/// Two central differences closer than this (relative) are taken as
/// converged.
const STEP_AGREEMENT: f64 = 1e-5;
pub const MAX_COORDS: usize = 200;
/// Gradient magnitudes below this are compared in absolute terms.
pub const MAGNITUDE_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckEntry {
    pub label: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst: Option<GradCheckEntry>,
    pub checked: usize,
}

impl GradCheckReport {
    fn from_entries(entries: Vec<GradCheckEntry>) -> Self {
        let checked = entries.len();
        let worst = entries.into_iter().max_by(|a, b| a.rel_error.total_cmp(&b.rel_error));
        GradCheckReport {
            max_rel_error: worst.as_ref().map(|w| w.rel_error).unwrap_or(0.0),
            worst,
            checked,
        }
    }

    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_error < tolerance
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(MAGNITUDE_FLOOR)
}

/// Checks gradients of the scalar built by `loss` with respect to the
/// trainable parameters it touches, on a seeded subset of at most
/// [`MAX_COORDS`] coordinates.
pub fn grad_check<F>(store: &mut ParameterStore, mut loss: F, seed: u64) -> Result<GradCheckReport>
where
    F: FnMut(&mut Graph, &ParameterStore) -> Result<Var>,
{
    let mut g = Graph::new();
    let l = loss(&mut g, store)?;
    g.status()?;
    g.backward(l);
    let grads = g.param_grads();
    let coords: Vec<(ParamId, usize, f64)> = grads
        .iter()
        .flat_map(|(id, m)| m.data.iter().enumerate().map(move |(i, v)| (*id, i, *v)))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks = sample(&mut rng, coords.len(), coords.len().min(MAX_COORDS));
    let mut entries = Vec::with_capacity(picks.len());
    for k in picks.iter() {
        let (id, i, analytic) = coords[k];
        let original = store.tensor(id).data[i];
        let mut eval = |x: f64, store: &mut ParameterStore| -> Result<f64> {
            store.tensor_mut(id).data[i] = x;
            let mut g = Graph::new();
            let l = loss(&mut g, store)?;
            Ok(g.scalar(l))
        };
        let numeric = refined_difference(|h| Ok((eval(original + h, store)? - eval(original - h, store)?) / (2.0 * h)));
        store.tensor_mut(id).data[i] = original;
        let numeric = numeric?;
        entries.push(GradCheckEntry {
            label: store.name(id).to_string(),
            index: i,
            analytic,
            numeric,
            rel_error: relative_error(analytic, numeric),
        });
    }
    Ok(GradCheckReport::from_entries(entries))
}

/// Same comparison with respect to an input matrix instead of parameters.
pub fn grad_check_input<F>(x0: &Mat, mut loss: F, seed: u64) -> Result<GradCheckReport>
where
    F: FnMut(&mut Graph, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let x = g.input(x0.clone());
    let l = loss(&mut g, x)?;
    g.status()?;
    g.backward(l);
    let analytic = g.grad(x).cloned().unwrap_or_else(|| Mat::zeros(x0.rows, x0.cols));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = x0.data.len();
    let picks = sample(&mut rng, n, n.min(MAX_COORDS));
    let mut entries = Vec::with_capacity(picks.len());
    for i in picks.iter() {
        let mut eval = |delta: f64| -> Result<f64> {
            let mut m = x0.clone();
            m.data[i] += delta;
            let mut g = Graph::new();
            let x = g.constant(m);
            let l = loss(&mut g, x)?;
            Ok(g.scalar(l))
        };
        let numeric = refined_difference(|h| Ok((eval(h)? - eval(-h)?) / (2.0 * h)))?;
        entries.push(GradCheckEntry {
            label: "input".into(),
            index: i,
            analytic: analytic.data[i],
            numeric,
            rel_error: relative_error(analytic.data[i], numeric),
        });
    }
    Ok(GradCheckReport::from_entries(entries))
}

/// Central difference at [`FD_STEP`], refined when a rectifier kink lies
/// inside the stencil. Piecewise-smooth losses give estimates at `h` and
/// `h/10` that agree to O(h^2) unless the wider stencil straddles a kink, in
/// which case the narrower pair is used. The analytic gradient plays no part
/// in the choice.
fn refined_difference<F>(mut diff: F) -> Result<f64>
where
    F: FnMut(f64) -> Result<f64>,
{
    let wide = diff(FD_STEP)?;
    let mid = diff(FD_STEP / 10.0)?;
    if relative_error(wide, mid) < STEP_AGREEMENT {
        return Ok(wide);
    }
    let narrow = diff(FD_STEP / 100.0)?;
    Ok(if relative_error(mid, narrow) < STEP_AGREEMENT {
        mid
    } else {
        wide
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Dense, DenseSpec};

    #[test]
    fn quadratic_is_exact() {
        let mut store = ParameterStore::new(2);
        let w = store.weight("w", 4, 3).unwrap();
        let report = grad_check(
            &mut store,
            |g, s| {
                let wv = g.param(s, w);
                let sq = g.square(wv);
                Ok(g.sum_all(sq))
            },
            1,
        )
        .unwrap();
        assert_eq!(report.checked, 12);
        assert!(report.max_rel_error < 1e-6, "{report:?}");
    }

    #[test]
    fn dense_squared_error() {
        let mut store = ParameterStore::new(5);
        let d = Dense::new(&mut store, "d", DenseSpec::new(&[3, 8, 2]).unwrap()).unwrap();
        let x = Mat::from_vec(4, 3, (0..12).map(|i| (i as f64 * 0.77).cos()).collect());
        let y = Mat::from_vec(4, 2, (0..8).map(|i| (i as f64 * 0.31).sin()).collect());
        let report = grad_check(
            &mut store,
            |g, s| {
                let xv = g.constant(x.clone());
                let out = d.forward(g, s, xv)?;
                let yv = g.constant(y.clone());
                Ok(g.sum_squared_diff(out, yv))
            },
            3,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }

    #[test]
    fn kink_inside_the_stencil_is_stepped_around() {
        // |x| has its kink 3e-5 from the check point: a 1e-4 stencil
        // straddles it, a 1e-5 one does not
        let x0 = Mat::from_vec(1, 1, vec![3e-5]);
        let report = grad_check_input(
            &x0,
            |g, x| {
                let pos = g.leaky_relu(x, 0.0);
                let neg = g.scale(x, -1.0);
                let neg = g.leaky_relu(neg, 0.0);
                Ok(g.add(pos, neg))
            },
            0,
        )
        .unwrap();
        let worst = report.worst.unwrap();
        assert_eq!(worst.analytic, 1.0);
        assert!((worst.numeric - 1.0).abs() < 1e-9, "{worst:?}");
    }

    #[test]
    fn wrong_gradients_are_still_caught() {
        // a real mismatch survives refinement: the step choice never
        // consults the analytic value
        let x0 = Mat::from_vec(1, 3, vec![0.3, -0.7, 1.1]);
        let report = grad_check_input(
            &x0,
            |g, x| {
                // x^2 computed off the tape: numeric sees it, reverse mode does not
                let hidden = g.value(x).map(|v| v * v);
                let hidden = g.constant(hidden);
                let visible = g.sum_all(x);
                let h = g.sum_all(hidden);
                Ok(g.add(visible, h))
            },
            0,
        )
        .unwrap();
        assert!(report.max_rel_error > 0.3, "{report:?}");
    }

    #[test]
    fn constant_loss_has_zero_gradients() {
        let mut store = ParameterStore::new(5);
        let w = store.weight("w", 2, 2).unwrap();
        let report = grad_check(
            &mut store,
            |g, s| {
                let wv = g.param(s, w);
                let z = g.scale(wv, 0.0);
                let total = g.sum_all(z);
                let c = g.constant(Mat::scalar(4.0));
                Ok(g.add(total, c))
            },
            0,
        )
        .unwrap();
        let worst = report.worst.unwrap();
        assert_eq!((worst.analytic, worst.numeric), (0.0, 0.0));
        assert_eq!(report.max_rel_error, 0.0);
    }
}

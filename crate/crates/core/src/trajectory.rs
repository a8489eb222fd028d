//! Stage 2: sequence-to-sequence embedding of short latent trajectories.
//!
//! A GRU reads `z_t ..= z_{t+H}` and its final hidden state is the future
//! summary `m_t`. A second GRU, initialized from `m_t` through a linear map,
//! unrolls `H` codes autoregressively starting from `z_t`.

use rand::Rng;

use crate::error::{DfnError, Result};
use crate::nn::{Dense, DenseSpec, Graph, Gru, Mat, ParameterStore, Var};
use crate::pose_ae::PoseAutoencoder;

pub const PREFIX: &str = "traj.";

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryConfig {
    pub horizon: usize,
    pub summary_dim: usize,
    /// Probability of feeding the ground-truth code instead of the model's
    /// own output at each training decode step.
    pub teacher_forcing_ratio: f64,
}

impl Default for TrajectoryConfig {
    fn default() -> Self {
        TrajectoryConfig {
            horizon: 16,
            summary_dim: 128,
            teacher_forcing_ratio: 0.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrajectoryModel {
    pub config: TrajectoryConfig,
    pub code_dim: usize,
    encoder: Gru,
    init: Dense,
    decoder: Gru,
    output: Dense,
}

/// Loss components of one batch.
#[derive(Debug, Clone, Copy)]
pub struct TrajectoryLoss {
    pub total: Var,
    pub rec: Var,
    pub smooth: Var,
}

impl TrajectoryModel {
    pub fn new(store: &mut ParameterStore, config: TrajectoryConfig, code_dim: usize) -> Result<Self> {
        if config.horizon < 2 {
            return Err(DfnError::InvalidInput(format!(
                "horizon must be at least 2, got {}",
                config.horizon
            )));
        }
        if !(0.0..=1.0).contains(&config.teacher_forcing_ratio) {
            return Err(DfnError::InvalidInput(
                "teacher_forcing_ratio must lie in [0, 1]".into(),
            ));
        }
        let m = config.summary_dim;
        Ok(TrajectoryModel {
            encoder: Gru::new(store, "traj.enc", code_dim, m)?,
            init: Dense::new(store, "traj.init", DenseSpec::new(&[m, m])?)?,
            decoder: Gru::new(store, "traj.dec", code_dim, m)?,
            output: Dense::new(store, "traj.out", DenseSpec::new(&[m, code_dim])?)?,
            config,
            code_dim,
        })
    }

    pub fn horizon(&self) -> usize {
        self.config.horizon
    }

    /// Runs the encoder over exactly `H + 1` codes (each `B x Dz`).
    pub fn encode(&self, g: &mut Graph, store: &ParameterStore, codes: &[Var]) -> Result<Var> {
        if codes.len() != self.horizon() + 1 {
            return Err(DfnError::InvalidInput(format!(
                "trajectory encoder needs {} frames, got {}",
                self.horizon() + 1,
                codes.len()
            )));
        }
        let rows = g.value(codes[0]).rows;
        let mut h = g.constant(Mat::zeros(rows, self.config.summary_dim));
        for z in codes {
            h = self.encoder.step(g, store, *z, h)?;
        }
        Ok(h)
    }

    /// Unrolls `steps` codes from `m` and `start`. When `teacher` is given,
    /// step `k` may consume `teacher[k]` instead of the previous output.
    pub fn decode(
        &self,
        g: &mut Graph,
        store: &ParameterStore,
        m: Var,
        start: Var,
        steps: usize,
        teacher: Option<(&[Var], &mut dyn FnMut() -> bool)>,
    ) -> Result<Vec<Var>> {
        let mut h = self.init.forward(g, store, m)?;
        let mut input = start;
        let mut out = Vec::with_capacity(steps);
        let mut teacher = teacher;
        for k in 0..steps {
            h = self.decoder.step(g, store, input, h)?;
            let z = self.output.forward(g, store, h)?;
            out.push(z);
            input = z;
            if let Some((truth, coin)) = teacher.as_mut() {
                if k < truth.len() && coin() {
                    input = truth[k];
                }
            }
        }
        Ok(out)
    }

    /// `L_rec + L_smooth` over a batch of `H + 1` code windows. `codes[k]`
    /// is `B x Dz`; `positions[k]` holds the frozen decoder's positions of
    /// those true codes (`B x 3J`, centimeters).
    pub fn loss<R: Rng + ?Sized>(
        &self,
        g: &mut Graph,
        store: &ParameterStore,
        pose: &PoseAutoencoder,
        codes: &[Var],
        positions: &[Var],
        rng: &mut R,
    ) -> Result<TrajectoryLoss> {
        let h = self.horizon();
        if codes.len() < h + 1 || positions.len() != codes.len() {
            return Err(DfnError::InvalidInput(format!(
                "trajectory window needs {} frames, got {}",
                h + 1,
                codes.len()
            )));
        }
        let codes = &codes[..h + 1];
        let m = self.encode(g, store, codes)?;
        let ratio = self.config.teacher_forcing_ratio;
        let recon = if ratio > 0.0 {
            let mut coin = || rng.random::<f64>() < ratio;
            self.decode(g, store, m, codes[0], h, Some((&codes[1..], &mut coin)))?
        } else {
            self.decode(g, store, m, codes[0], h, None)?
        };
        let predicted: Vec<Var> = recon
            .iter()
            .map(|z| pose.decode(g, store, *z).map(|d| d.positions))
            .collect::<Result<_>>()?;
        let truth: Vec<Var> = codes[1..].to_vec();
        Ok(trajectory_terms(g, &truth, &recon, &positions[..h + 1], &predicted))
    }
}

/// Elementwise mean of squared differences.
fn mse(g: &mut Graph, a: Var, b: Var) -> (Var, usize) {
    let n = g.value(a).data.len();
    (g.sum_squared_diff(a, b), n)
}

/// Assembles both terms. `true_pos` has `H + 1` entries (frame `t` first);
/// `pred_pos` has `H` entries for frames `t+1 ..= t+H`. The reconstructed
/// velocity of the first step is taken against the true frame `t`.
pub fn trajectory_terms(
    g: &mut Graph,
    truth: &[Var],
    recon: &[Var],
    true_pos: &[Var],
    pred_pos: &[Var],
) -> TrajectoryLoss {
    let mut rec_sum = Vec::with_capacity(truth.len());
    let mut count = 0;
    for (t, r) in truth.iter().zip(recon) {
        let (s, n) = mse(g, *t, *r);
        rec_sum.push(s);
        count += n;
    }
    let rec = sum_scaled(g, &rec_sum, 1.0 / count.max(1) as f64);
    let mut smooth_sum = Vec::with_capacity(pred_pos.len());
    let mut count = 0;
    let mut prev_pred = true_pos[0];
    for (k, p) in pred_pos.iter().enumerate() {
        let v_true = g.sub(true_pos[k + 1], true_pos[k]);
        let v_pred = g.sub(*p, prev_pred);
        let (s, n) = mse(g, v_pred, v_true);
        smooth_sum.push(s);
        count += n;
        prev_pred = *p;
    }
    let smooth = sum_scaled(g, &smooth_sum, 1.0 / count.max(1) as f64);
    let total = g.add(rec, smooth);
    TrajectoryLoss { total, rec, smooth }
}

fn sum_scaled(g: &mut Graph, parts: &[Var], c: f64) -> Var {
    let mut acc = parts[0];
    for p in &parts[1..] {
        acc = g.add(acc, *p);
    }
    g.scale(acc, c)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{grad_check_input, ParamId};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn model(h: usize) -> (ParameterStore, TrajectoryModel) {
        let mut store = ParameterStore::new(3);
        let cfg = TrajectoryConfig {
            horizon: h,
            summary_dim: 12,
            teacher_forcing_ratio: 0.0,
        };
        let m = TrajectoryModel::new(&mut store, cfg, 5).unwrap();
        (store, m)
    }

    fn codes(g: &mut Graph, n: usize, rows: usize, phase: f64) -> Vec<Var> {
        (0..n)
            .map(|k| {
                g.constant(Mat::from_vec(
                    rows,
                    5,
                    (0..rows * 5)
                        .map(|i| ((i + 7 * k) as f64 * 0.37 + phase).sin())
                        .collect(),
                ))
            })
            .collect()
    }

    #[test]
    fn zero_encoder_gives_zero_summary() {
        let (mut store, m) = model(4);
        store.zero_all();
        let mut g = Graph::new();
        let zs = codes(&mut g, 5, 2, 0.0);
        let s = m.encode(&mut g, &store, &zs).unwrap();
        assert!(g.value(s).data.iter().all(|v| *v == 0.0));
        assert!(m.encode(&mut g, &store, &zs[..4]).is_err());
    }

    #[test]
    fn zero_decoder_emits_output_bias() {
        let (mut store, m) = model(4);
        store.zero_all();
        let bias: ParamId = m.output.output_bias();
        store.tensor_mut(bias).data = vec![0.5, -1.0, 2.0, 0.0, 3.0];
        let mut g = Graph::new();
        let zs = codes(&mut g, 5, 2, 0.0);
        let summary = g.constant(Mat::from_vec(2, 12, vec![0.3; 24]));
        let out = m.decode(&mut g, &store, summary, zs[0], 4, None).unwrap();
        assert_eq!(out.len(), 4);
        for z in out {
            assert_eq!(g.value(z).row(1), &[0.5, -1.0, 2.0, 0.0, 3.0]);
        }
    }

    #[test]
    fn decode_length_matches_horizon() {
        for h in [2, 3, 9, 17, 64] {
            let (store, m) = model(h);
            let mut g = Graph::new();
            let zs = codes(&mut g, h + 1, 1, 0.2);
            let s = m.encode(&mut g, &store, &zs).unwrap();
            assert_eq!(m.decode(&mut g, &store, s, zs[0], h, None).unwrap().len(), h);
        }
    }

    #[test]
    fn identity_reconstruction_scores_zero() {
        let mut g = Graph::new();
        let zs = codes(&mut g, 5, 3, 0.0);
        let pos: Vec<Var> = (0..5)
            .map(|k| g.constant(Mat::from_vec(3, 6, (0..18).map(|i| (i * k) as f64).collect())))
            .collect();
        let l = trajectory_terms(&mut g, &zs[1..], &zs[1..], &pos, &pos[1..]);
        assert_eq!(g.scalar(l.rec), 0.0);
        assert_eq!(g.scalar(l.smooth), 0.0);
        assert_eq!(g.scalar(l.total), 0.0);

        let other = codes(&mut g, 5, 3, 1.0);
        let l = trajectory_terms(&mut g, &zs[1..], &other[1..], &pos, &pos[1..]);
        let (t, r, s) = (g.scalar(l.total), g.scalar(l.rec), g.scalar(l.smooth));
        assert!(t >= r.max(s) && r > 0.0 && s == 0.0);
    }

    #[test]
    fn rec_gradient_wrt_summary() {
        let (store, m) = model(3);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m0 = crate::nn::standard_normal(&mut rng, 2, 12);
        let report = grad_check_input(
            &m0,
            |g, s| {
                let zs = codes(g, 4, 2, 0.4);
                let out = m.decode(g, &store, s, zs[0], 3, None)?;
                let l = trajectory_terms(g, &zs[1..], &out, &zs, &zs[1..]);
                Ok(l.rec)
            },
            2,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }

    #[test]
    fn gru_input_gradient() {
        let (store, m) = model(3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x0 = crate::nn::standard_normal(&mut rng, 3, 5);
        let report = grad_check_input(
            &x0,
            |g, x| {
                let h = g.constant(Mat::from_vec(3, 12, (0..36).map(|i| (i as f64 * 0.13).cos()).collect()));
                let out = m.encoder.step(g, &store, x, h)?;
                let sq = g.square(out);
                Ok(g.sum_all(sq))
            },
            5,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }

    #[test]
    fn rejects_bad_config() {
        let mut store = ParameterStore::new(0);
        let bad = TrajectoryConfig {
            horizon: 1,
            ..TrajectoryConfig::default()
        };
        assert!(TrajectoryModel::new(&mut store, bad, 16).is_err());
    }
}

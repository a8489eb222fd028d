//! Stage 3: stochastic recurrent model over a deterministic past state `h`,
//! a current state `s` and a future state `f`.
//!
//! Per frame, the past state yields a prior over `f`; `f` decodes to a
//! predicted future summary, which together with `h` yields a prior over
//! `s`; `(s, h)` decodes to the latent code `z`; and a stacked GRU advances
//! `h` from `(s, f)`. Training uses posteriors over `s` and `f` that see the
//! true code and the stage-2 future summary, plus a temporal-difference
//! regularizer that infers an earlier state from a later one and predicts
//! forward across the gap.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{DfnError, Result};
use crate::kinematics::Quaternion;
use crate::mocap::PoseFeature;
use crate::nn::{kl_var, standard_normal, Dense, DenseSpec, GaussianVar, Graph, Mat, ParameterStore, StackedGru, Var};
use crate::pose_ae::PoseAutoencoder;
use crate::trajectory::TrajectoryModel;

pub const PREFIX: &str = "dyn.";

/// `0.5 * ln(2 pi)`, the per-dimension normalizer of a unit Gaussian.
pub const HALF_LN_2PI: f64 = 0.918_938_533_204_672_7;
/// Longest accepted generation prefix, in frames.
pub const MAX_PREFIX: usize = 64;

#[derive(Debug, Clone, PartialEq)]
pub struct DynamicsConfig {
    pub s_dim: usize,
    pub f_dim: usize,
    pub h_dim: usize,
    pub h_layers: usize,
    pub td_pairs: usize,
}

impl Default for DynamicsConfig {
    fn default() -> Self {
        DynamicsConfig {
            s_dim: 32,
            f_dim: 64,
            h_dim: 128,
            h_layers: 2,
            td_pairs: 4,
        }
    }
}

impl DynamicsConfig {
    pub fn to_meta(&self) -> Vec<f64> {
        [self.s_dim, self.f_dim, self.h_dim, self.h_layers, self.td_pairs]
            .iter()
            .map(|v| *v as f64)
            .collect()
    }

    pub fn from_meta(meta: &[f64]) -> Result<Self> {
        match meta {
            [s, f, h, l, k] => Ok(DynamicsConfig {
                s_dim: *s as usize,
                f_dim: *f as usize,
                h_dim: *h as usize,
                h_layers: *l as usize,
                td_pairs: *k as usize,
            }),
            _ => Err(DfnError::Format("malformed stage-3 metadata".into())),
        }
    }
}

#[derive(Debug, Clone)]
pub struct DynamicsModel {
    pub config: DynamicsConfig,
    pub z_dim: usize,
    pub m_dim: usize,
    pub horizon: usize,
    state: StackedGru,
    future_prior: Dense,
    summary_decoder: Dense,
    current_prior: Dense,
    feature_decoder: Dense,
    infer_current: Dense,
    infer_future: Dense,
    td_posterior: Dense,
    skip: Dense,
}

/// Per-term values of the training objective, averaged per frame (main
/// terms) or per sampled pair (temporal-difference terms).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossReport {
    pub total: f64,
    pub kl_s: f64,
    pub kl_f: f64,
    pub nll_z: f64,
    pub nll_m: f64,
    pub td_kl: f64,
    pub td_rec: f64,
    /// Gaussian normalization folded into `total`.
    pub constant: f64,
    pub beta: f64,
}

impl LossReport {
    /// Combines the terms: KL terms weighted by `beta`, squared-error terms
    /// at unit weight, plus the normalization constant.
    #[allow(clippy::too_many_arguments)]
    pub fn combine(
        beta: f64,
        kl_s: f64,
        kl_f: f64,
        nll_z: f64,
        nll_m: f64,
        td_kl: f64,
        td_rec: f64,
        constant: f64,
    ) -> Self {
        LossReport {
            total: beta * (kl_s + kl_f + td_kl) + nll_z + nll_m + td_rec + constant,
            kl_s,
            kl_f,
            nll_z,
            nll_m,
            td_kl,
            td_rec,
            constant,
            beta,
        }
    }

    pub fn without_constant(&self) -> f64 {
        self.total - self.constant
    }

    pub fn is_finite(&self) -> bool {
        [
            self.total,
            self.kl_s,
            self.kl_f,
            self.nll_z,
            self.nll_m,
            self.td_kl,
            self.td_rec,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

/// A batch of training windows. `z[t]` and `m[t]` are `B x Dz` and
/// `B x M`; the objective iterates over the frames that have a summary.
#[derive(Debug, Clone)]
pub struct ElboBatch {
    pub z: Vec<Mat>,
    pub m: Vec<Mat>,
}

#[derive(Debug, Clone, Copy)]
pub struct ElboOutput {
    pub loss: Var,
    pub report: LossReport,
}

/// One latent-trace row: frame index (prefix frames are `<= 0`, generated
/// frames start at 1), code and current state.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub t: i64,
    pub z: Vec<f64>,
    pub s: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedSequence {
    /// Generated frames in original units.
    pub features: Vec<PoseFeature>,
    /// Decoded local joint rotations per generated frame.
    pub rotations: Vec<Vec<Quaternion>>,
    pub trace: Vec<TraceRow>,
}

/// Generation stopped at `frame`; sequences hold everything produced before.
#[derive(Debug)]
pub struct GenerationFailure {
    pub frame: usize,
    pub source: DfnError,
    pub partial: Vec<GeneratedSequence>,
}

impl From<GenerationFailure> for DfnError {
    fn from(f: GenerationFailure) -> Self {
        DfnError::NonFinite {
            context: format!("generation aborted at frame {}: {}", f.frame, f.source),
        }
    }
}

impl DynamicsModel {
    pub fn new(
        store: &mut ParameterStore,
        config: DynamicsConfig,
        z_dim: usize,
        m_dim: usize,
        horizon: usize,
    ) -> Result<Self> {
        let c = &config;
        if c.s_dim == 0 || c.f_dim == 0 || c.h_dim == 0 || c.h_layers == 0 {
            return Err(DfnError::InvalidInput("state dimensions must be positive".into()));
        }
        let hc = c.h_dim * c.h_layers;
        let (s, f) = (c.s_dim, c.f_dim);
        Ok(DynamicsModel {
            state: StackedGru::new(store, "dyn.state", s + f, c.h_dim, c.h_layers)?,
            future_prior: Dense::new(store, "dyn.prior_f", DenseSpec::mlp(hc, 256, 2, 2 * f)?)?,
            summary_decoder: Dense::new(store, "dyn.summary", DenseSpec::mlp(f + hc, 128, 3, m_dim)?)?,
            current_prior: Dense::new(store, "dyn.prior_s", DenseSpec::mlp(hc + m_dim, 128, 1, 2 * s)?)?,
            feature_decoder: Dense::new(store, "dyn.feature", DenseSpec::mlp(s + hc, 128, 3, z_dim)?)?,
            infer_current: Dense::new(store, "dyn.post_s", DenseSpec::mlp(hc + z_dim + m_dim, 32, 2, 2 * s)?)?,
            infer_future: Dense::new(store, "dyn.post_f", DenseSpec::mlp(hc + m_dim, 512, 2, 2 * f)?)?,
            td_posterior: Dense::new(store, "dyn.td_post", DenseSpec::mlp(s + 2 * hc, 32, 2, 2 * s)?)?,
            skip: Dense::new(store, "dyn.skip", DenseSpec::mlp(s + 1, 32, 3, s)?)?,
            config,
            z_dim,
            m_dim,
            horizon,
        })
    }

    pub fn h_width(&self) -> usize {
        self.config.h_dim * self.config.h_layers
    }

    pub fn initial_state(&self, g: &mut Graph, rows: usize) -> Vec<Var> {
        (0..self.config.h_layers)
            .map(|_| g.constant(Mat::zeros(rows, self.config.h_dim)))
            .collect()
    }

    pub fn concat_state(&self, g: &mut Graph, h: &[Var]) -> Var {
        if h.len() == 1 {
            h[0]
        } else {
            g.concat_cols(h)
        }
    }

    pub fn future_prior(&self, g: &mut Graph, store: &ParameterStore, h: Var) -> Result<GaussianVar> {
        let out = self.future_prior.forward(g, store, h)?;
        Ok(GaussianVar::from_params(g, out))
    }

    pub fn summary_decoder(&self, g: &mut Graph, store: &ParameterStore, f: Var, h: Var) -> Result<Var> {
        let x = g.concat_cols(&[f, h]);
        self.summary_decoder.forward(g, store, x)
    }

    pub fn current_prior(&self, g: &mut Graph, store: &ParameterStore, h: Var, m: Var) -> Result<GaussianVar> {
        let x = g.concat_cols(&[h, m]);
        let out = self.current_prior.forward(g, store, x)?;
        Ok(GaussianVar::from_params(g, out))
    }

    pub fn feature_decoder(&self, g: &mut Graph, store: &ParameterStore, s: Var, h: Var) -> Result<Var> {
        let x = g.concat_cols(&[s, h]);
        self.feature_decoder.forward(g, store, x)
    }

    pub fn state_update(&self, g: &mut Graph, store: &ParameterStore, h: &[Var], s: Var, f: Var) -> Result<Vec<Var>> {
        let x = g.concat_cols(&[s, f]);
        self.state.step(g, store, x, h)
    }

    pub fn infer_current(&self, g: &mut Graph, store: &ParameterStore, h: Var, z: Var, m: Var) -> Result<GaussianVar> {
        let x = g.concat_cols(&[h, z, m]);
        let out = self.infer_current.forward(g, store, x)?;
        Ok(GaussianVar::from_params(g, out))
    }

    pub fn infer_future(&self, g: &mut Graph, store: &ParameterStore, h: Var, m: Var) -> Result<GaussianVar> {
        let x = g.concat_cols(&[h, m]);
        let out = self.infer_future.forward(g, store, x)?;
        Ok(GaussianVar::from_params(g, out))
    }

    pub fn td_posterior(
        &self,
        g: &mut Graph,
        store: &ParameterStore,
        s2: Var,
        h1: Var,
        h2: Var,
    ) -> Result<GaussianVar> {
        let x = g.concat_cols(&[s2, h1, h2]);
        let out = self.td_posterior.forward(g, store, x)?;
        Ok(GaussianVar::from_params(g, out))
    }

    /// Predicts the state `delta[i]` frames after row `i` of `s1`; the gap
    /// enters as `delta / H`.
    pub fn skip_predict(&self, g: &mut Graph, store: &ParameterStore, s1: Var, delta: &[usize]) -> Result<Var> {
        if let Some(d) = delta.iter().find(|d| **d == 0 || **d > self.horizon) {
            return Err(DfnError::InvalidInput(format!(
                "skip gap {d} outside [1, {}]",
                self.horizon
            )));
        }
        let gap = g.constant(Mat::from_vec(
            delta.len(),
            1,
            delta.iter().map(|d| *d as f64 / self.horizon as f64).collect(),
        ));
        let x = g.concat_cols(&[s1, gap]);
        self.skip.forward(g, store, x)
    }

    /// Per-frame normalization constant of the objective.
    pub fn constant(&self) -> f64 {
        HALF_LN_2PI * (self.z_dim + self.m_dim + self.config.s_dim) as f64
    }

    /// Negated objective over a batch of windows, with KL terms weighted by
    /// `beta`. All noise and pair choices come from `rng`.
    pub fn sequence_elbo(
        &self,
        g: &mut Graph,
        store: &ParameterStore,
        batch: &ElboBatch,
        beta: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<ElboOutput> {
        let steps = batch.m.len();
        if steps < 2 || batch.z.len() < steps {
            return Err(DfnError::InvalidInput(format!(
                "window provides {steps} summarized frames and {} codes; need at least 2 of each",
                batch.z.len()
            )));
        }
        let rows = batch.z[0].rows;
        let (sd, fd) = (self.config.s_dim, self.config.f_dim);
        let mut h = self.initial_state(g, rows);
        // Only the posteriors and the state update lie on the recurrent
        // path. Everything else runs once over all frames stacked.
        let mut hist: [Vec<Var>; 8] = Default::default();
        let [h_hist, s_hist, f_hist, qs_mean, qs_lv, qf_mean, qf_lv, m_hist] = &mut hist;
        for t in 0..steps {
            let hc = self.concat_state(g, &h);
            let z = g.constant(batch.z[t].clone());
            let m = g.constant(batch.m[t].clone());
            let qf = self.infer_future(g, store, hc, m)?;
            let f = qf.sample_with(g, standard_normal(rng, rows, fd));
            let qs = self.infer_current(g, store, hc, z, m)?;
            let s = qs.sample_with(g, standard_normal(rng, rows, sd));
            for (list, v) in [
                (&mut *h_hist, hc),
                (&mut *s_hist, s),
                (&mut *f_hist, f),
                (&mut *qs_mean, qs.mean),
                (&mut *qs_lv, qs.log_var),
                (&mut *qf_mean, qf.mean),
                (&mut *qf_lv, qf.log_var),
                (&mut *m_hist, m),
            ] {
                list.push(v);
            }
            h = self.state_update(g, store, &h, s, f)?;
        }
        let all: Vec<(usize, usize)> = (0..steps).flat_map(|t| (0..rows).map(move |b| (t, b))).collect();
        let [hc, s, f, qs_mean, qs_lv, qf_mean, qf_lv, m] = hist.each_ref().map(|list| g.pick_rows(list, &all));
        let z_all: Vec<Var> = batch.z[..steps].iter().map(|z| g.constant(z.clone())).collect();
        let z = g.pick_rows(&z_all, &all);
        let qs = GaussianVar {
            mean: qs_mean,
            log_var: qs_lv,
        };
        let qf = GaussianVar {
            mean: qf_mean,
            log_var: qf_lv,
        };
        let pf = self.future_prior(g, store, hc)?;
        let m_hat = self.summary_decoder(g, store, f, hc)?;
        let ps = self.current_prior(g, store, hc, m_hat)?;
        let z_hat = self.feature_decoder(g, store, s, hc)?;
        let inputs = [
            ("kl_s", [qs.mean, qs.log_var, ps.mean, ps.log_var]),
            ("kl_f", [qf.mean, qf.log_var, pf.mean, pf.log_var]),
            ("nll_z", [z, z_hat, z, z_hat]),
            ("nll_m", [m, m_hat, m, m_hat]),
        ];
        for (name, vars) in inputs {
            let bad = vars
                .iter()
                .filter_map(|v| {
                    g.value(*v)
                        .data
                        .chunks(g.value(*v).cols * rows)
                        .position(|c| c.iter().any(|x| !x.is_finite()))
                })
                .min();
            if let Some(t) = bad {
                return Err(DfnError::NonFinite {
                    context: format!("term {name} at frame {t}"),
                });
            }
        }
        let per_frame = 1.0 / (rows * steps) as f64;
        let terms = [
            kl_var(g, &qs, &ps),
            kl_var(g, &qf, &pf),
            half_sq(g, z, z_hat),
            half_sq(g, m, m_hat),
        ];
        let [kl_s, kl_f, nll_z, nll_m] = terms.map(|v| g.scale(v, per_frame));
        for (name, v) in [("kl_s", kl_s), ("kl_f", kl_f), ("nll_z", nll_z), ("nll_m", nll_m)] {
            if !g.scalar(v).is_finite() {
                return Err(DfnError::NonFinite {
                    context: format!("term {name}"),
                });
            }
        }
        let (h_hist, s_hist) = (&hist[0], &hist[1]);

        // temporal-difference pairs
        let k = self.config.td_pairs.max(1);
        let max_gap = self.horizon.min(steps - 1);
        let mut p1 = Vec::with_capacity(rows * k);
        let mut p2 = Vec::with_capacity(rows * k);
        let mut gaps = Vec::with_capacity(rows * k);
        for b in 0..rows {
            for _ in 0..k {
                let d = rng.random_range(1..=max_gap);
                let t1 = rng.random_range(0..steps - d);
                p1.push((t1, b));
                p2.push((t1 + d, b));
                gaps.push(d);
            }
        }
        let s2 = g.pick_rows(s_hist, &p2);
        let h1 = g.pick_rows(h_hist, &p1);
        let h2 = g.pick_rows(h_hist, &p2);
        let q1 = self.td_posterior(g, store, s2, h1, h2)?;
        let prior = GaussianVar::standard(g, rows * k, sd);
        let s1 = q1.sample_with(g, standard_normal(rng, rows * k, sd));
        let s2_hat = self.skip_predict(g, store, s1, &gaps)?;
        let per_pair = 1.0 / (rows * k) as f64;
        let td_kl = kl_var(g, &q1, &prior);
        let td_kl = g.scale(td_kl, per_pair);
        let td_rec = half_sq(g, s2, s2_hat);
        let td_rec = g.scale(td_rec, per_pair);
        for (name, v) in [("td_kl", td_kl), ("td_rec", td_rec)] {
            if !g.scalar(v).is_finite() {
                return Err(DfnError::NonFinite {
                    context: format!("term {name}"),
                });
            }
        }

        let kl = sum_vars(g, &[kl_s, kl_f, td_kl]);
        let kl = g.scale(kl, beta);
        let rest = sum_vars(g, &[nll_z, nll_m, td_rec]);
        let c = g.constant(Mat::scalar(self.constant()));
        let loss = sum_vars(g, &[kl, rest, c]);
        g.status()?;
        let report = LossReport::combine(
            beta,
            g.scalar(kl_s),
            g.scalar(kl_f),
            g.scalar(nll_z),
            g.scalar(nll_m),
            g.scalar(td_kl),
            g.scalar(td_rec),
            self.constant(),
        );
        Ok(ElboOutput { loss, report })
    }

    /// Open-loop generation of `frames` frames for each RNG in `rngs`, all
    /// from the same prefix. The prefix warms up the past state with
    /// posterior means; each generated frame then samples `f` from its prior
    /// (redrawn every `resample_period` frames), decodes a summary, samples
    /// `s` from its prior and decodes the code.
    #[allow(clippy::too_many_arguments)]
    pub fn generate(
        &self,
        store: &ParameterStore,
        pose: &PoseAutoencoder,
        traj: &TrajectoryModel,
        prefix: &[PoseFeature],
        frames: usize,
        resample_period: usize,
        rngs: &mut [ChaCha8Rng],
    ) -> std::result::Result<Vec<GeneratedSequence>, GenerationFailure> {
        let fail = |frame, source, partial| GenerationFailure { frame, source, partial };
        let rows = rngs.len();
        if prefix.len() < 2 || prefix.len() > MAX_PREFIX {
            let e = DfnError::InvalidInput(format!(
                "prefix must have 2 to {MAX_PREFIX} frames, got {}",
                prefix.len()
            ));
            return Err(fail(0, e, Vec::new()));
        }
        if resample_period == 0 {
            return Err(fail(
                0,
                DfnError::InvalidInput("resample_period must be at least 1".into()),
                Vec::new(),
            ));
        }
        let mut out: Vec<GeneratedSequence> = (0..rows)
            .map(|_| GeneratedSequence {
                features: Vec::with_capacity(frames),
                rotations: Vec::with_capacity(frames),
                trace: Vec::with_capacity(prefix.len() + frames),
            })
            .collect();
        let codes = pose.encode_frames(store, prefix).map_err(|e| fail(0, e, Vec::new()))?;
        let p = prefix.len();
        let hor = traj.horizon();

        // warm-up with posterior means
        let mut h: Vec<Mat> = (0..self.config.h_layers)
            .map(|_| Mat::zeros(rows, self.config.h_dim))
            .collect();
        for t in 0..p {
            let warm = |g: &mut Graph| -> Result<(Vec<Var>, Var)> {
                let hv: Vec<Var> = h.iter().map(|m| g.constant(m.clone())).collect();
                let hc = self.concat_state(g, &hv);
                let z = g.constant(repeat_row(codes.row(t), rows));
                let (f, m) = if t + hor < p {
                    let window: Vec<Var> = (t..=t + hor)
                        .map(|k| g.constant(repeat_row(codes.row(k), rows)))
                        .collect();
                    let m = traj.encode(g, store, &window)?;
                    (self.infer_future(g, store, hc, m)?.mean, m)
                } else {
                    let f = self.future_prior(g, store, hc)?.mean;
                    (f, self.summary_decoder(g, store, f, hc)?)
                };
                let s = self.infer_current(g, store, hc, z, m)?.mean;
                let next = self.state_update(g, store, &hv, s, f)?;
                g.status()?;
                Ok((next, s))
            };
            let mut g = Graph::new();
            let (next, s) = warm(&mut g).map_err(|e| fail(0, e, Vec::new()))?;
            h = next.iter().map(|v| g.value(*v).clone()).collect();
            for (r, seq) in out.iter_mut().enumerate() {
                seq.trace.push(TraceRow {
                    t: t as i64 + 1 - p as i64,
                    z: codes.row(t).to_vec(),
                    s: g.value(s).row(r).to_vec(),
                });
            }
        }

        let mut f_held: Option<Mat> = None;
        for k in 0..frames {
            let step =
                |g: &mut Graph, rngs: &mut [ChaCha8Rng], f_held: &Option<Mat>| -> Result<(Vec<Var>, Var, Var, Var)> {
                    let hv: Vec<Var> = h.iter().map(|m| g.constant(m.clone())).collect();
                    let hc = self.concat_state(g, &hv);
                    let f = match f_held {
                        Some(f) if k % resample_period != 0 => g.constant(f.clone()),
                        _ => {
                            let pf = self.future_prior(g, store, hc)?;
                            pf.sample_with(g, per_row_noise(rngs, self.config.f_dim))
                        }
                    };
                    let m = self.summary_decoder(g, store, f, hc)?;
                    let ps = self.current_prior(g, store, hc, m)?;
                    let s = ps.sample_with(g, per_row_noise(rngs, self.config.s_dim));
                    let z = self.feature_decoder(g, store, s, hc)?;
                    let next = self.state_update(g, store, &hv, s, f)?;
                    g.status()?;
                    Ok((next, f, s, z))
                };
            let mut g = Graph::new();
            let (next, f, s, z) = match step(&mut g, rngs, &f_held) {
                Ok(v) => v,
                Err(e) => return Err(fail(k + 1, e, out)),
            };
            let decoded = pose.decode_codes(store, g.value(z));
            let (feats, rots) = match decoded {
                Ok(v) => v,
                Err(e) => return Err(fail(k + 1, e, out)),
            };
            h = next.iter().map(|v| g.value(*v).clone()).collect();
            f_held = Some(g.value(f).clone());
            for (r, ((seq, feat), rot)) in out.iter_mut().zip(feats).zip(rots).enumerate() {
                seq.features.push(feat);
                seq.rotations.push(rot);
                seq.trace.push(TraceRow {
                    t: k as i64 + 1,
                    z: g.value(z).row(r).to_vec(),
                    s: g.value(s).row(r).to_vec(),
                });
            }
        }
        Ok(out)
    }
}

/// `0.5 * sum((a - b)^2)`
pub fn half_sq(g: &mut Graph, a: Var, b: Var) -> Var {
    let s = g.sum_squared_diff(a, b);
    g.scale(s, 0.5)
}

fn sum_vars(g: &mut Graph, parts: &[Var]) -> Var {
    let mut acc = parts[0];
    for p in &parts[1..] {
        acc = g.add(acc, *p);
    }
    acc
}

fn repeat_row(row: &[f64], rows: usize) -> Mat {
    let mut data = Vec::with_capacity(row.len() * rows);
    for _ in 0..rows {
        data.extend_from_slice(row);
    }
    Mat::from_vec(rows, row.len(), data)
}

/// Row `r` of the noise comes from `rngs[r]`, so each sequence's draws do
/// not depend on how many others are generated alongside it.
fn per_row_noise(rngs: &mut [ChaCha8Rng], cols: usize) -> Mat {
    let mut data = Vec::with_capacity(rngs.len() * cols);
    for rng in rngs.iter_mut() {
        data.extend(standard_normal(rng, 1, cols).data);
    }
    Mat::from_vec(rngs.len(), cols, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{grad_check, grad_check_input};
    use rand::SeedableRng;

    fn tiny(store: &mut ParameterStore) -> DynamicsModel {
        let cfg = DynamicsConfig {
            s_dim: 4,
            f_dim: 4,
            h_dim: 6,
            h_layers: 2,
            td_pairs: 2,
        };
        DynamicsModel::new(store, cfg, 5, 8, 2).unwrap()
    }

    fn batch(rows: usize, frames: usize) -> ElboBatch {
        let mat = |c: usize, k: usize, ph: f64| {
            Mat::from_vec(
                rows,
                c,
                (0..rows * c).map(|i| ((i + 3 * k) as f64 * 0.41 + ph).sin()).collect(),
            )
        };
        ElboBatch {
            z: (0..frames).map(|k| mat(5, k, 0.0)).collect(),
            m: (0..frames).map(|k| mat(8, k, 1.3)).collect(),
        }
    }

    fn row(g: &mut Graph, w: usize, v: f64) -> Var {
        g.constant(Mat::from_vec(2, w, (0..2 * w).map(|i| v + 0.1 * i as f64).collect()))
    }

    #[test]
    fn zero_parameters_give_standard_normals_and_zero_decodes() {
        let mut store = ParameterStore::new(1);
        let m = tiny(&mut store);
        store.zero_all();
        let mut g = Graph::new();
        let h = row(&mut g, 12, 0.5);
        let (s, f, mm, z) = (
            row(&mut g, 4, 0.2),
            row(&mut g, 4, -0.3),
            row(&mut g, 8, 1.0),
            row(&mut g, 5, 0.7),
        );
        let dists = [
            m.future_prior(&mut g, &store, h).unwrap(),
            m.current_prior(&mut g, &store, h, mm).unwrap(),
            m.infer_current(&mut g, &store, h, z, mm).unwrap(),
            m.infer_future(&mut g, &store, h, mm).unwrap(),
            m.td_posterior(&mut g, &store, s, h, h).unwrap(),
        ];
        for d in &dists {
            assert_eq!(d.dim(&g), 4);
            assert!(g.value(d.mean).data.iter().all(|v| *v == 0.0));
            assert!(g.value(d.log_var).data.iter().all(|v| *v == 0.0));
        }
        let outs = [
            m.summary_decoder(&mut g, &store, f, h).unwrap(),
            m.feature_decoder(&mut g, &store, s, h).unwrap(),
            m.skip_predict(&mut g, &store, s, &[1, 2]).unwrap(),
        ];
        assert_eq!([8, 5, 4], outs.map(|o| g.value(o).cols));
        assert!(outs.iter().all(|o| g.value(*o).data.iter().all(|v| *v == 0.0)));
        let h0 = m.initial_state(&mut g, 2);
        let next = m.state_update(&mut g, &store, &h0, s, f).unwrap();
        assert_eq!(next.len(), 2);
        assert!(next
            .iter()
            .all(|v| g.value(*v).data.iter().all(|x| *x == 0.0) && g.value(*v).cols == 6));
        assert!(m.skip_predict(&mut g, &store, s, &[0, 1]).is_err());
        assert!(m.skip_predict(&mut g, &store, s, &[3, 1]).is_err());
    }

    #[test]
    fn stubbed_identity_leaves_only_the_constant() {
        let r = LossReport::combine(0.0, 3.0, 2.0, 0.0, 0.0, 1.0, 0.0, 7.5);
        assert_eq!(r.total, 7.5);
        assert_eq!(r.without_constant(), 0.0);
        let mut g = Graph::new();
        let x = row(&mut g, 3, 0.4);
        let z = half_sq(&mut g, x, x);
        assert_eq!(g.scalar(z), 0.0);
        let mut store = ParameterStore::new(0);
        assert_eq!(tiny(&mut store).constant(), HALF_LN_2PI * 17.0);
    }

    #[test]
    fn elbo_is_deterministic_and_kls_nonnegative() {
        let mut store = ParameterStore::new(2);
        let m = tiny(&mut store);
        let b = batch(3, 5);
        let run = || {
            let mut g = Graph::new();
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            m.sequence_elbo(&mut g, &store, &b, 0.7, &mut rng).unwrap().report
        };
        let a = run();
        assert_eq!(a, run());
        assert!(a.kl_s >= 0.0 && a.kl_f >= 0.0 && a.td_kl >= 0.0);
        assert!(a.is_finite());
        let expect = 0.7 * (a.kl_s + a.kl_f + a.td_kl) + a.nll_z + a.nll_m + a.td_rec + a.constant;
        assert!((a.total - expect).abs() < 1e-12);
    }

    #[test]
    fn elbo_rejects_short_windows() {
        let mut store = ParameterStore::new(2);
        let m = tiny(&mut store);
        let mut g = Graph::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        assert!(m.sequence_elbo(&mut g, &store, &batch(2, 1), 1.0, &mut rng).is_err());
    }

    /// Zero biases and the zero initial state put first-frame
    /// pre-activations exactly on the rectifier's kink, where central
    /// differences disagree with any one-sided derivative.
    fn jitter_biases(store: &mut ParameterStore, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ids: Vec<_> = store.ids().filter(|id| store.name(*id).ends_with(".b")).collect();
        for id in ids {
            let t = store.tensor_mut(id);
            let noise = standard_normal(&mut rng, 1, t.data.len());
            t.data.iter_mut().zip(&noise.data).for_each(|(v, e)| *v += 0.1 * e);
        }
    }

    #[test]
    fn full_objective_gradient() {
        let mut store = ParameterStore::new(9);
        let m = tiny(&mut store);
        jitter_biases(&mut store, 4);
        for (b, check_seed) in [(batch(2, 3), 3), (batch(3, 5), 8)] {
            let report = grad_check(
                &mut store,
                |g, s| {
                    let mut rng = ChaCha8Rng::seed_from_u64(17);
                    Ok(m.sequence_elbo(g, s, &b, 1.0, &mut rng)?.loss)
                },
                check_seed,
            )
            .unwrap();
            assert_eq!(report.checked, 200);
            assert!(report.max_rel_error < 1e-3, "{report:?}");
        }
    }

    #[test]
    fn prior_gradients_through_the_recurrence() {
        // restricted to the future prior's first layer, which a check
        // sampled over all parameters rarely lands on
        let mut store = ParameterStore::new(12);
        let m = tiny(&mut store);
        jitter_biases(&mut store, 6);
        for id in store.ids().collect::<Vec<_>>() {
            let keep = store.name(id).starts_with("dyn.prior_f.l0");
            store.set_frozen(id, !keep);
        }
        let b = batch(2, 4);
        let report = grad_check(
            &mut store,
            |g, s| {
                let mut rng = ChaCha8Rng::seed_from_u64(2);
                Ok(m.sequence_elbo(g, s, &b, 1.0, &mut rng)?.loss)
            },
            1,
        )
        .unwrap();
        assert!(report.checked > 0);
        assert!(report.max_rel_error < 1e-3, "{report:?}");
    }

    #[test]
    fn decoder_term_gradients() {
        let mut store = ParameterStore::new(4);
        let m = tiny(&mut store);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x0 = standard_normal(&mut rng, 2, 4 + 12);
        let target_z = Mat::from_vec(2, 5, (0..10).map(|i| i as f64 * 0.1).collect());
        let target_m = Mat::from_vec(2, 8, (0..16).map(|i| (i as f64).cos()).collect());
        for which in 0..3 {
            let report = grad_check_input(
                &x0,
                |g, x| {
                    let s = g.slice_cols(x, 0, 4);
                    let h = g.slice_cols(x, 4, 12);
                    match which {
                        0 => {
                            let z = m.feature_decoder(g, &store, s, h)?;
                            let t = g.constant(target_z.clone());
                            Ok(half_sq(g, t, z))
                        }
                        1 => {
                            let mh = m.summary_decoder(g, &store, s, h)?;
                            let t = g.constant(target_m.clone());
                            Ok(half_sq(g, t, mh))
                        }
                        _ => {
                            let pred = m.skip_predict(g, &store, s, &[1, 2])?;
                            let t = g.slice_cols(h, 0, 4);
                            Ok(half_sq(g, t, pred))
                        }
                    }
                },
                which as u64,
            )
            .unwrap();
            assert!(report.max_rel_error < 1e-4, "term {which}: {report:?}");
        }
    }

    #[test]
    fn reparameterized_sample_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x0 = standard_normal(&mut rng, 3, 8);
        let eps = standard_normal(&mut rng, 3, 4);
        let report = grad_check_input(
            &x0,
            |g, x| {
                let d = GaussianVar::from_params(g, x);
                let s = d.sample_with(g, eps.clone());
                let sq = g.square(s);
                Ok(g.sum_all(sq))
            },
            1,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }

    #[test]
    fn earlier_state_receives_gradient() {
        let mut store = ParameterStore::new(6);
        let m = tiny(&mut store);
        let mut g = Graph::new();
        let h0: Vec<Var> = (0..2)
            .map(|_| g.input(Mat::from_vec(1, 6, vec![0.1, -0.2, 0.3, 0.0, 0.5, -0.4])))
            .collect();
        let s = g.constant(Mat::row_vector(vec![0.3, -0.1, 0.2, 0.9]));
        let f = g.constant(Mat::row_vector(vec![-0.5, 0.4, 0.1, 0.2]));
        let h1 = m.state_update(&mut g, &store, &h0, s, f).unwrap();
        let h2 = m.state_update(&mut g, &store, &h1, s, f).unwrap();
        let hc = m.concat_state(&mut g, &h2);
        let z = m.feature_decoder(&mut g, &store, s, hc).unwrap();
        let target = g.constant(Mat::zeros(1, 5));
        let loss = half_sq(&mut g, z, target);
        g.backward(loss);
        assert!(g.grad(h0[0]).unwrap().data.iter().any(|v| *v != 0.0));
    }
}

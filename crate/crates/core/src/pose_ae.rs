//! Stage 1: per-frame pose auto-encoder.
//!
//! The encoder maps a normalized 76-dim frame to a latent code split into a
//! pose part and a velocity part. The pose part is decoded to one raw
//! quaternion per joint plus a root height; after per-joint normalization,
//! forward kinematics yields root-relative joint positions, so decoded bone
//! lengths always match the skeleton. The velocity part is decoded directly.

use std::rc::Rc;

use crate::error::{DfnError, Result};
use crate::kinematics::Quaternion;
use crate::mocap::{NormStats, PoseFeature, Skeleton, VELOCITY_DIMS};
use crate::nn::{Dense, DenseSpec, FkSpec, Graph, Mat, ParameterStore, Var};

pub const PREFIX: &str = "pose.";

#[derive(Debug, Clone, PartialEq)]
pub struct PoseAeConfig {
    pub pose_code_dim: usize,
    pub vel_code_dim: usize,
    /// Hidden widths of the encoder.
    pub enc_widths: Vec<usize>,
    /// Hidden widths of the quaternion head.
    pub quat_dec_widths: Vec<usize>,
    /// Hidden widths of the velocity head.
    pub vel_dec_widths: Vec<usize>,
}

impl Default for PoseAeConfig {
    fn default() -> Self {
        PoseAeConfig {
            pose_code_dim: 12,
            vel_code_dim: 4,
            enc_widths: vec![256, 128],
            quat_dec_widths: vec![128, 128],
            vel_dec_widths: vec![32],
        }
    }
}

impl PoseAeConfig {
    pub fn code_dim(&self) -> usize {
        self.pose_code_dim + self.vel_code_dim
    }

    fn widths(input: usize, hidden: &[usize], output: usize) -> Vec<usize> {
        let mut w = vec![input];
        w.extend_from_slice(hidden);
        w.push(output);
        w
    }

    /// Flat encoding stored next to the weights.
    pub fn to_meta(&self) -> Vec<f64> {
        let mut v = vec![self.pose_code_dim as f64, self.vel_code_dim as f64];
        for list in [&self.enc_widths, &self.quat_dec_widths, &self.vel_dec_widths] {
            v.push(list.len() as f64);
            v.extend(list.iter().map(|w| *w as f64));
        }
        v
    }

    pub fn from_meta(meta: &[f64]) -> Result<Self> {
        let bad = || DfnError::Format("malformed stage-1 metadata".into());
        let mut it = meta.iter().map(|v| *v as usize);
        let pose_code_dim = it.next().ok_or_else(bad)?;
        let vel_code_dim = it.next().ok_or_else(bad)?;
        let mut lists = Vec::new();
        for _ in 0..3 {
            let n = it.next().ok_or_else(bad)?;
            let l: Vec<usize> = it.by_ref().take(n).collect();
            if l.len() != n {
                return Err(bad());
            }
            lists.push(l);
        }
        let vel_dec_widths = lists.pop().unwrap();
        let quat_dec_widths = lists.pop().unwrap();
        let enc_widths = lists.pop().unwrap();
        Ok(PoseAeConfig {
            pose_code_dim,
            vel_code_dim,
            enc_widths,
            quat_dec_widths,
            vel_dec_widths,
        })
    }
}

/// Output of the decoder for a batch of codes.
#[derive(Debug, Clone, Copy)]
pub struct Decoded {
    /// Unit quaternions, `B x 4J`.
    pub quats: Var,
    /// Root-relative joint positions in centimeters, `B x 3J`.
    pub positions: Var,
    /// Full reconstructed frame in normalized units, `B x (3J + 4)`.
    pub normalized: Var,
}

#[derive(Debug, Clone)]
pub struct PoseAutoencoder {
    pub config: PoseAeConfig,
    pub skeleton: Skeleton,
    pub stats: NormStats,
    encoder: Dense,
    quat_head: Dense,
    vel_head: Dense,
    fk: Rc<FkSpec>,
    pos_inv_std: Rc<Vec<f64>>,
    pos_shift: Mat,
    root_y: (f64, f64),
}

impl PoseAutoencoder {
    /// Registers freshly initialized parameters under `pose.`. The
    /// quaternion head's output bias starts at the identity rotation.
    pub fn new(store: &mut ParameterStore, config: PoseAeConfig, skeleton: Skeleton, stats: NormStats) -> Result<Self> {
        let nj = skeleton.len();
        let dim = skeleton.feature_dim();
        if stats.dim() != dim {
            return Err(DfnError::InvalidInput(format!(
                "normalization stats have {} dims, skeleton needs {dim}",
                stats.dim()
            )));
        }
        if config.pose_code_dim == 0 || config.vel_code_dim == 0 {
            return Err(DfnError::InvalidInput("code dimensions must be positive".into()));
        }
        let enc = DenseSpec::new(&PoseAeConfig::widths(dim, &config.enc_widths, config.code_dim()))?;
        let quat = DenseSpec::new(&PoseAeConfig::widths(
            config.pose_code_dim,
            &config.quat_dec_widths,
            4 * nj + 1,
        ))?;
        let vel = DenseSpec::new(&PoseAeConfig::widths(
            config.vel_code_dim,
            &config.vel_dec_widths,
            VELOCITY_DIMS,
        ))?;
        let encoder = Dense::new(store, "pose.enc", enc)?;
        let quat_head = Dense::new(store, "pose.quat", quat)?;
        let vel_head = Dense::new(store, "pose.vel", vel)?;
        let bias = store.tensor_mut(quat_head.output_bias());
        for j in 0..nj {
            bias.data[4 * j] = 1.0;
        }
        let np = 3 * nj;
        let pos_inv_std = Rc::new(stats.std[..np].iter().map(|s| 1.0 / s).collect::<Vec<_>>());
        let pos_shift = Mat::row_vector((0..np).map(|i| -stats.mean[i] / stats.std[i]).collect());
        let root_y = (stats.mean[1], stats.std[1]);
        Ok(PoseAutoencoder {
            fk: Rc::new(FkSpec::from_skeleton(&skeleton)),
            config,
            skeleton,
            stats,
            encoder,
            quat_head,
            vel_head,
            pos_inv_std,
            pos_shift,
            root_y,
        })
    }

    pub fn joints(&self) -> usize {
        self.skeleton.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.skeleton.feature_dim()
    }

    pub fn code_dim(&self) -> usize {
        self.config.code_dim()
    }

    /// `B x 76` normalized frames to `B x (P + V)` codes.
    pub fn encode(&self, g: &mut Graph, store: &ParameterStore, x: Var) -> Result<Var> {
        self.encoder.forward(g, store, x)
    }

    pub fn decode(&self, g: &mut Graph, store: &ParameterStore, code: Var) -> Result<Decoded> {
        let width = g.value(code).cols;
        if width != self.code_dim() {
            return Err(DfnError::Shape {
                op: "decode_pose",
                detail: format!("code width {width}, model expects {}", self.code_dim()),
            });
        }
        let p = self.config.pose_code_dim;
        let nj = self.joints();
        let pose_code = g.slice_cols(code, 0, p);
        let vel_code = g.slice_cols(code, p, self.config.vel_code_dim);
        let raw = self.quat_head.forward(g, store, pose_code)?;
        let raw_q = g.slice_cols(raw, 0, 4 * nj);
        let quats = g.quat_normalize(raw_q);
        let rel = g.forward_kinematics(quats, self.fk.clone());
        let h = g.slice_cols(raw, 4 * nj, 1);
        let h = g.scale(h, self.root_y.1);
        let offset = g.constant(Mat::scalar(self.root_y.0));
        let h = g.add_bias(h, offset);
        let positions = g.add_to_y(rel, h);
        let scaled = g.col_scale(positions, self.pos_inv_std.clone());
        let shift = g.constant(self.pos_shift.clone());
        let pos_norm = g.add_bias(scaled, shift);
        let vel = self.vel_head.forward(g, store, vel_code)?;
        let normalized = g.concat_cols(&[pos_norm, vel]);
        Ok(Decoded {
            quats,
            positions,
            normalized,
        })
    }

    /// Mean over frames of the squared reconstruction error, summed over
    /// all feature dimensions, measured in normalized units.
    pub fn recon_loss(&self, g: &mut Graph, store: &ParameterStore, x: Var) -> Result<Var> {
        let z = self.encode(g, store, x)?;
        let d = self.decode(g, store, z)?;
        Ok(frame_mse(g, x, d.normalized))
    }

    pub fn normalize_frames(&self, frames: &[PoseFeature]) -> Mat {
        let rows: Vec<Vec<f64>> = frames.iter().map(|f| self.stats.normalize(&f.0)).collect();
        Mat::from_rows(&rows)
    }

    /// Codes of raw (unnormalized) frames, one row each.
    pub fn encode_frames(&self, store: &ParameterStore, frames: &[PoseFeature]) -> Result<Mat> {
        if frames.iter().any(|f| !f.is_finite()) {
            return Err(DfnError::NonFinite {
                context: "pose encoder input".into(),
            });
        }
        if frames.is_empty() {
            return Ok(Mat::zeros(0, self.code_dim()));
        }
        let mut g = Graph::new();
        let x = g.constant(self.normalize_frames(frames));
        let z = self.encode(&mut g, store, x)?;
        g.status()?;
        Ok(g.value(z).clone())
    }

    /// Decodes code rows to frames in original units plus the per-joint
    /// local rotations that produced them.
    pub fn decode_codes(
        &self,
        store: &ParameterStore,
        codes: &Mat,
    ) -> Result<(Vec<PoseFeature>, Vec<Vec<Quaternion>>)> {
        if codes.rows == 0 {
            return Ok((Vec::new(), Vec::new()));
        }
        let mut g = Graph::new();
        let c = g.constant(codes.clone());
        let d = self.decode(&mut g, store, c)?;
        g.status()?;
        let np = 3 * self.joints();
        let mut frames = Vec::with_capacity(codes.rows);
        let mut rotations = Vec::with_capacity(codes.rows);
        for r in 0..codes.rows {
            let mut f = g.value(d.positions).row(r).to_vec();
            let vel = &g.value(d.normalized).row(r)[np..];
            f.extend(
                vel.iter()
                    .enumerate()
                    .map(|(i, v)| v * self.stats.std[np + i] + self.stats.mean[np + i]),
            );
            frames.push(PoseFeature(f));
            rotations.push(
                g.value(d.quats)
                    .row(r)
                    .chunks_exact(4)
                    .map(Quaternion::from_slice)
                    .collect(),
            );
        }
        Ok((frames, rotations))
    }

    pub fn param_ids(&self) -> Vec<crate::nn::ParamId> {
        let mut ids = self.encoder.param_ids();
        ids.extend(self.quat_head.param_ids());
        ids.extend(self.vel_head.param_ids());
        ids
    }
}

/// `sum((a - b)^2) / rows`.
pub fn frame_mse(g: &mut Graph, a: Var, b: Var) -> Var {
    let rows = g.value(a).rows.max(1) as f64;
    let s = g.sum_squared_diff(a, b);
    g.scale(s, 1.0 / rows)
}

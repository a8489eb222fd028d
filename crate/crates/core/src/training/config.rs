//! Flat `key = value` configuration with `#` comments.

use std::path::{Path, PathBuf};

use crate::dynamics::DynamicsConfig;
use crate::error::{DfnError, Result};
use crate::pose_ae::PoseAeConfig;
use crate::trajectory::TrajectoryConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub stage: u8,
    pub steps: usize,
    pub learning_rate: f64,
    /// Windows per step in stages 2 and 3.
    pub batch_size: usize,
    /// Frames per step in stage 1.
    pub pose_batch: usize,
    pub seed: u64,
    pub data_dir: PathBuf,
    pub checkpoint_dir: PathBuf,
    pub pose: PoseAeConfig,
    pub trajectory: TrajectoryConfig,
    pub dynamics: DynamicsConfig,
    pub kl_anneal_steps: usize,
    pub window_len: usize,
    pub window_stride: usize,
    pub resample_period: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            stage: 1,
            steps: 2000,
            learning_rate: 1e-3,
            batch_size: 16,
            pose_batch: 64,
            seed: 0,
            data_dir: PathBuf::from("data"),
            checkpoint_dir: PathBuf::from("checkpoints"),
            pose: PoseAeConfig::default(),
            trajectory: TrajectoryConfig::default(),
            dynamics: DynamicsConfig::default(),
            kl_anneal_steps: 1000,
            window_len: 64,
            window_stride: 16,
            resample_period: 1,
        }
    }
}

fn widths(value: &str, line: usize) -> Result<Vec<usize>> {
    value
        .split(',')
        .map(|w| w.trim())
        .filter(|w| !w.is_empty())
        .map(|w| {
            w.parse::<usize>()
                .map_err(|_| DfnError::parse(line, format!("bad width '{w}'")))
        })
        .collect()
}

impl TrainConfig {
    /// Parses a configuration; relative paths are resolved against `base`.
    pub fn parse(source: &str, base: &Path) -> Result<Self> {
        let mut c = TrainConfig::default();
        for (i, raw) in source.lines().enumerate() {
            let line = i + 1;
            let text = raw.split('#').next().unwrap_or("").trim();
            if text.is_empty() {
                continue;
            }
            let (key, value) = text
                .split_once('=')
                .ok_or_else(|| DfnError::parse(line, format!("expected 'key = value', got '{text}'")))?;
            let (key, value) = (key.trim(), value.trim());
            let num = |v: &str| -> Result<usize> {
                v.parse()
                    .map_err(|_| DfnError::parse(line, format!("'{key}' needs a non-negative integer, got '{v}'")))
            };
            let float = |v: &str| -> Result<f64> {
                v.parse()
                    .map_err(|_| DfnError::parse(line, format!("'{key}' needs a number, got '{v}'")))
            };
            match key {
                "stage" => c.stage = num(value)? as u8,
                "steps" => c.steps = num(value)?,
                "learning_rate" => c.learning_rate = float(value)?,
                "batch_size" => c.batch_size = num(value)?,
                "pose_batch" => c.pose_batch = num(value)?,
                "seed" => c.seed = num(value)? as u64,
                "data_dir" => c.data_dir = base.join(value),
                "checkpoint_dir" => c.checkpoint_dir = base.join(value),
                "pose_code_dim" => c.pose.pose_code_dim = num(value)?,
                "vel_code_dim" => c.pose.vel_code_dim = num(value)?,
                "enc_widths" => c.pose.enc_widths = widths(value, line)?,
                "quat_dec_widths" => c.pose.quat_dec_widths = widths(value, line)?,
                "vel_dec_widths" => c.pose.vel_dec_widths = widths(value, line)?,
                "horizon_H" => c.trajectory.horizon = num(value)?,
                "summary_dim" => c.trajectory.summary_dim = num(value)?,
                "teacher_forcing_ratio" => c.trajectory.teacher_forcing_ratio = float(value)?,
                "s_dim" => c.dynamics.s_dim = num(value)?,
                "f_dim" => c.dynamics.f_dim = num(value)?,
                "h_dim" => c.dynamics.h_dim = num(value)?,
                "td_pairs_K" => c.dynamics.td_pairs = num(value)?,
                "kl_anneal_steps" => c.kl_anneal_steps = num(value)?,
                "window_len" => c.window_len = num(value)?,
                "window_stride" => c.window_stride = num(value)?,
                "resample_period" => c.resample_period = num(value)?,
                other => return Err(DfnError::parse(line, format!("unknown key '{other}'"))),
            }
        }
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| DfnError::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base).map_err(|e| match e {
            DfnError::Parse { line, message } => DfnError::Format(format!("{}:{line}: {message}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(DfnError::InvalidInput(m));
        if !(1..=3).contains(&self.stage) {
            return bad(format!("stage must be 1, 2 or 3, got {}", self.stage));
        }
        if self.steps == 0 {
            return bad("steps must be positive".into());
        }
        if !(self.learning_rate > 0.0) {
            return bad("learning_rate must be positive".into());
        }
        if self.batch_size == 0 || self.pose_batch == 0 {
            return bad("batch sizes must be positive".into());
        }
        if self.window_stride == 0 || self.resample_period == 0 {
            return bad("window_stride and resample_period must be positive".into());
        }
        if self.window_len <= self.trajectory.horizon + 1 {
            return bad(format!(
                "window_len {} must exceed horizon_H + 1 = {}",
                self.window_len,
                self.trajectory.horizon + 1
            ));
        }
        Ok(())
    }

    /// KL weight at optimizer step `step` (0-based): a linear ramp to 1.
    pub fn kl_weight(&self, step: usize) -> f64 {
        if self.kl_anneal_steps == 0 {
            1.0
        } else {
            (step as f64 / self.kl_anneal_steps as f64).min(1.0)
        }
    }
}

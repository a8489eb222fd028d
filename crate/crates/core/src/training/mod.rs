//! Staged training: stage 1 fits the pose auto-encoder, stage 2 the
//! trajectory embedding with stage 1 frozen, stage 3 the dynamics model with
//! stages 1 and 2 frozen.

mod config;
mod data;
mod log;

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub use config::TrainConfig;
pub use data::{make_windows, preprocess, window_count, Dataset, PreprocessSummary, Window, TRAINING_FPS};
pub use log::RunLog;

use crate::dynamics::{self, DynamicsConfig, DynamicsModel, ElboBatch, GeneratedSequence, GenerationFailure};
use crate::error::{DfnError, Result};
use crate::mocap::{
    extract_features, motion_to_clip, read_bvh_file, read_features, write_bvh, GlobalTransform, Joint, NormStats,
    PoseFeature, Skeleton,
};
use crate::nn::checkpoint::{load_tensors, save_tensors};
use crate::nn::{Adam, AdamConfig, Graph, Mat, ParameterStore, Tensor, Var};
use crate::pose_ae::{self, PoseAeConfig, PoseAutoencoder};
use crate::rng;
use crate::trajectory::{self, TrajectoryConfig, TrajectoryModel};

/// RNG stream ids derived from the run seed.
const STREAM_TRAIN: u64 = 1;
const STREAM_EVAL: u64 = 2;
pub const STREAM_GENERATE: u64 = 3;

pub fn checkpoint_path(dir: &Path, stage: u8) -> PathBuf {
    dir.join(format!("stage{stage}.dfnw"))
}

pub fn log_path(dir: &Path, stage: u8) -> PathBuf {
    dir.join(format!("stage{stage}_log.csv"))
}

fn f32_round(v: &[f64]) -> Vec<f64> {
    v.iter().map(|x| *x as f32 as f64).collect()
}

/// All trained stages sharing one parameter store.
#[derive(Debug, Clone)]
pub struct Dfn {
    pub store: ParameterStore,
    pub pose: PoseAutoencoder,
    pub trajectory: Option<TrajectoryModel>,
    pub dynamics: Option<DynamicsModel>,
}

impl Dfn {
    /// Fresh stage-1 model. Statistics and offsets are rounded to the
    /// checkpoint precision so a reloaded model behaves identically.
    pub fn new(seed: u64, config: &PoseAeConfig, skeleton: &Skeleton, stats: &NormStats) -> Result<Dfn> {
        let joints = skeleton
            .joints()
            .iter()
            .map(|j| Joint {
                offset: [
                    j.offset[0] as f32 as f64,
                    j.offset[1] as f32 as f64,
                    j.offset[2] as f32 as f64,
                ],
                ..j.clone()
            })
            .collect();
        let skeleton = Skeleton::new(joints)?;
        let stats = NormStats {
            mean: f32_round(&stats.mean),
            std: f32_round(&stats.std),
            clamped: stats.clamped.clone(),
        };
        let mut store = ParameterStore::new(seed);
        let pose = PoseAutoencoder::new(&mut store, config.clone(), skeleton, stats)?;
        store.round_to_f32(pose_ae::PREFIX);
        Ok(Dfn {
            store,
            pose,
            trajectory: None,
            dynamics: None,
        })
    }

    pub fn add_trajectory(&mut self, config: TrajectoryConfig) -> Result<()> {
        let m = TrajectoryModel::new(&mut self.store, config, self.pose.code_dim())?;
        self.store.round_to_f32(trajectory::PREFIX);
        self.trajectory = Some(m);
        Ok(())
    }

    pub fn add_dynamics(&mut self, config: DynamicsConfig) -> Result<()> {
        let (summary, horizon) = {
            let t = self.trajectory()?;
            (t.config.summary_dim, t.horizon())
        };
        let m = DynamicsModel::new(&mut self.store, config, self.pose.code_dim(), summary, horizon)?;
        self.store.round_to_f32(dynamics::PREFIX);
        self.dynamics = Some(m);
        Ok(())
    }

    pub fn trajectory(&self) -> Result<&TrajectoryModel> {
        self.trajectory
            .as_ref()
            .ok_or_else(|| DfnError::Prerequisite("stage-2 model not loaded".into()))
    }

    pub fn dynamics(&self) -> Result<&DynamicsModel> {
        self.dynamics
            .as_ref()
            .ok_or_else(|| DfnError::Prerequisite("stage-3 model not loaded".into()))
    }

    fn stage_tensors(&self, stage: u8) -> Result<Vec<(String, Tensor)>> {
        let meta = |name: &str, v: Vec<f64>| {
            (
                name.to_string(),
                Tensor {
                    shape: vec![v.len()],
                    data: v,
                },
            )
        };
        let mut out = Vec::new();
        let prefix = match stage {
            1 => {
                out.push(meta("meta/pose", self.pose.config.to_meta()));
                out.push(meta("stats/mean", self.pose.stats.mean.clone()));
                out.push(meta("stats/std", self.pose.stats.std.clone()));
                for (i, j) in self.pose.skeleton.joints().iter().enumerate() {
                    let parent = j.parent.map(|p| p as f64).unwrap_or(-1.0);
                    out.push(meta(
                        &format!("skeleton/{i}/{}", j.name),
                        vec![parent, j.offset[0], j.offset[1], j.offset[2]],
                    ));
                    if let Some(e) = j.end_site {
                        out.push(meta(&format!("skeleton_end/{i}"), e.to_vec()));
                    }
                }
                pose_ae::PREFIX
            }
            2 => {
                let c = &self.trajectory()?.config;
                out.push(meta(
                    "meta/traj",
                    vec![c.horizon as f64, c.summary_dim as f64, c.teacher_forcing_ratio],
                ));
                trajectory::PREFIX
            }
            3 => {
                out.push(meta("meta/dyn", self.dynamics()?.config.to_meta()));
                dynamics::PREFIX
            }
            s => return Err(DfnError::InvalidInput(format!("no stage {s}"))),
        };
        out.extend(self.store.export(prefix));
        Ok(out)
    }

    pub fn save(&self, dir: &Path, stage: u8) -> Result<PathBuf> {
        std::fs::create_dir_all(dir).map_err(|e| DfnError::io(dir, e))?;
        let path = checkpoint_path(dir, stage);
        save_tensors(&path, &self.stage_tensors(stage)?)?;
        Ok(path)
    }

    /// Loads stages `1..=stages` from `dir`.
    pub fn load(dir: &Path, stages: u8, seed: u64) -> Result<Dfn> {
        let read = |stage: u8| -> Result<Vec<(String, Tensor)>> {
            let path = checkpoint_path(dir, stage);
            if !path.exists() {
                return Err(DfnError::Prerequisite(format!(
                    "stage-{stage} checkpoint {} not found",
                    path.display()
                )));
            }
            load_tensors(&path)
        };
        let find = |ts: &[(String, Tensor)], name: &str| -> Result<Vec<f64>> {
            ts.iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t.data.clone())
                .ok_or_else(|| DfnError::Format(format!("checkpoint lacks '{name}'")))
        };
        let params = |ts: &[(String, Tensor)], prefix: &str| -> Vec<(String, Tensor)> {
            ts.iter().filter(|(n, _)| n.starts_with(prefix)).cloned().collect()
        };

        let t1 = read(1)?;
        let config = PoseAeConfig::from_meta(&find(&t1, "meta/pose")?)?;
        let mut joints = Vec::new();
        for (name, t) in t1.iter().filter(|(n, _)| n.starts_with("skeleton/")) {
            let jname = name.splitn(3, '/').nth(2).unwrap_or("");
            let d = &t.data;
            if d.len() != 4 {
                return Err(DfnError::Format(format!("bad skeleton entry '{name}'")));
            }
            let parent = (d[0] >= 0.0).then_some(d[0] as usize);
            let mut joint = Joint::new(jname, parent, [d[1], d[2], d[3]]);
            let i = joints.len();
            if let Some((_, e)) = t1.iter().find(|(n, _)| *n == format!("skeleton_end/{i}")) {
                joint.end_site = Some([e.data[0], e.data[1], e.data[2]]);
            }
            joints.push(joint);
        }
        let skeleton = Skeleton::new(joints)?;
        let std = find(&t1, "stats/std")?;
        let stats = NormStats {
            mean: find(&t1, "stats/mean")?,
            clamped: std.iter().map(|s| *s == 1.0).collect(),
            std,
        };
        let mut store = ParameterStore::new(seed);
        let pose = PoseAutoencoder::new(&mut store, config, skeleton, stats)?;
        store.load_values(&params(&t1, pose_ae::PREFIX))?;
        let mut dfn = Dfn {
            store,
            pose,
            trajectory: None,
            dynamics: None,
        };
        if stages >= 2 {
            let t2 = read(2)?;
            let meta = find(&t2, "meta/traj")?;
            if meta.len() != 3 {
                return Err(DfnError::Format("malformed stage-2 metadata".into()));
            }
            dfn.add_trajectory(TrajectoryConfig {
                horizon: meta[0] as usize,
                summary_dim: meta[1] as usize,
                teacher_forcing_ratio: meta[2],
            })?;
            dfn.store.load_values(&params(&t2, trajectory::PREFIX))?;
        }
        if stages >= 3 {
            let t3 = read(3)?;
            dfn.add_dynamics(DynamicsConfig::from_meta(&find(&t3, "meta/dyn")?)?)?;
            dfn.store.load_values(&params(&t3, dynamics::PREFIX))?;
        }
        Ok(dfn)
    }

    /// One generated sequence per seed, all from `prefix`.
    pub fn generate(
        &self,
        prefix: &[PoseFeature],
        frames: usize,
        resample_period: usize,
        seeds: &[u64],
    ) -> std::result::Result<Vec<GeneratedSequence>, GenerationFailure> {
        let missing = |e| GenerationFailure {
            frame: 0,
            source: e,
            partial: Vec::new(),
        };
        let dynamics = self.dynamics().map_err(missing)?;
        let traj = self.trajectory().map_err(missing)?;
        let mut rngs: Vec<ChaCha8Rng> = seeds.iter().map(|s| rng::stream(*s, STREAM_GENERATE)).collect();
        dynamics.generate(
            &self.store,
            &self.pose,
            traj,
            prefix,
            frames,
            resample_period,
            &mut rngs,
        )
    }
}

impl Dfn {
    /// World-space BVH of a generated sequence, starting at the origin
    /// facing +Z.
    pub fn motion_bvh(&self, seq: &GeneratedSequence) -> Result<String> {
        let clip = motion_to_clip(
            &self.pose.skeleton,
            &seq.rotations,
            &seq.features,
            GlobalTransform::new([0.0; 3], 0.0),
            1.0 / TRAINING_FPS,
        )?;
        Ok(write_bvh(&clip))
    }
}

/// Reads prefix frames from a feature file or a BVH clip. BVH input is
/// brought to the training frame rate and must share the model skeleton.
pub fn load_prefix(path: &Path, skeleton: &Skeleton) -> Result<Vec<PoseFeature>> {
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .unwrap_or("")
        .to_ascii_lowercase();
    let frames = match ext.as_str() {
        "dfnf" => read_features(path)?,
        "bvh" => {
            let clip = read_bvh_file(path)?;
            if !clip.skeleton.same_structure(skeleton) {
                return Err(DfnError::InvalidInput(format!(
                    "{}: skeleton ({} joints) differs from the model's ({} joints)",
                    path.display(),
                    clip.skeleton.len(),
                    skeleton.len()
                )));
            }
            let clip = if clip.fps() > TRAINING_FPS {
                clip.resample(TRAINING_FPS)?
            } else {
                clip
            };
            extract_features(&clip)?.0
        }
        _ => {
            return Err(DfnError::InvalidInput(format!(
                "{}: prefix must be a .dfnf or .bvh file",
                path.display()
            )))
        }
    };
    if let Some(f) = frames.iter().find(|f| f.dim() != skeleton.feature_dim()) {
        return Err(DfnError::InvalidInput(format!(
            "{}: frames have {} values, the model expects {}",
            path.display(),
            f.dim(),
            skeleton.feature_dim()
        )));
    }
    Ok(frames)
}

/// Outcome of one stage.
#[derive(Debug, Clone, PartialEq)]
pub struct StageReport {
    pub stage: u8,
    pub steps: usize,
    /// Evaluation loss on a fixed set before the first and after the last step.
    pub initial_loss: f64,
    pub final_loss: f64,
    pub checkpoint: PathBuf,
    pub log: PathBuf,
}

/// Runs `steps` optimizer steps; `build` assembles one step's graph and
/// returns the loss plus extra logged values.
fn optimize<F>(store: &mut ParameterStore, cfg: &TrainConfig, log: &mut RunLog, mut build: F) -> Result<()>
where
    F: FnMut(usize, &mut Graph, &ParameterStore) -> Result<(Var, Vec<f64>)>,
{
    let mut adam = Adam::new(AdamConfig {
        learning_rate: cfg.learning_rate,
        ..AdamConfig::default()
    });
    let started = Instant::now();
    for step in 0..cfg.steps {
        let mut g = Graph::new();
        let built = build(step, &mut g, store);
        let (loss, extra) = match built {
            Ok(v) => v,
            Err(e) if e.is_numerical() => {
                log.record(step, f64::NAN, &[], started.elapsed().as_secs_f64())?;
                return Err(DfnError::NonFinite {
                    context: format!("training step {step}: {e}"),
                });
            }
            Err(e) => return Err(e),
        };
        let value = g.scalar(loss);
        log.record(step, value, &extra, started.elapsed().as_secs_f64())?;
        if !value.is_finite() {
            return Err(DfnError::NonFinite {
                context: format!("training loss at step {step}"),
            });
        }
        g.backward(loss);
        adam.step(store, &g.param_grads()).map_err(|e| DfnError::NonFinite {
            context: format!("training step {step}: {e}"),
        })?;
    }
    Ok(())
}

fn gather(source: &[Mat], picks: &[(usize, usize)]) -> Mat {
    let cols = source[0].cols;
    let mut out = Mat::zeros(picks.len(), cols);
    for (i, (s, r)) in picks.iter().enumerate() {
        out.row_mut(i).copy_from_slice(source[*s].row(*r));
    }
    out
}

/// Codes of every frame and the frozen decoder's positions for them.
fn encode_dataset(dfn: &Dfn, data: &Dataset) -> Result<(Vec<Mat>, Vec<Mat>)> {
    let mut codes = Vec::new();
    let mut positions = Vec::new();
    for seq in &data.sequences {
        let z = dfn.pose.encode_frames(&dfn.store, seq)?;
        let mut g = Graph::new();
        let zv = g.constant(z.clone());
        let d = dfn.pose.decode(&mut g, &dfn.store, zv)?;
        g.status()?;
        positions.push(g.value(d.positions).clone());
        codes.push(z);
    }
    Ok((codes, positions))
}

/// Future summaries `m_t` for every `t` with `t + H` inside the sequence.
fn summarize(dfn: &Dfn, codes: &Mat) -> Result<Mat> {
    let traj = dfn.trajectory()?;
    let h = traj.horizon();
    if codes.rows <= h {
        return Ok(Mat::zeros(0, traj.config.summary_dim));
    }
    let n = codes.rows - h;
    let mut g = Graph::new();
    let steps: Vec<Var> = (0..=h)
        .map(|k| {
            let rows: Vec<Vec<f64>> = (0..n).map(|t| codes.row(t + k).to_vec()).collect();
            g.constant(Mat::from_rows(&rows))
        })
        .collect();
    let m = traj.encode(&mut g, &dfn.store, &steps)?;
    g.status()?;
    Ok(g.value(m).clone())
}

fn stage1(cfg: &TrainConfig, data: &Dataset, log: &mut RunLog) -> Result<(Dfn, f64, f64)> {
    let mut dfn = Dfn::new(cfg.seed, &cfg.pose, &data.skeleton, &data.stats)?;
    let all: Vec<PoseFeature> = data.sequences.iter().flatten().cloned().collect();
    let frames = dfn.pose.normalize_frames(&all);
    let eval = |dfn: &Dfn| -> Result<f64> {
        let mut g = Graph::new();
        let x = g.constant(frames.clone());
        let l = dfn.pose.recon_loss(&mut g, &dfn.store, x)?;
        g.status()?;
        Ok(g.scalar(l))
    };
    let initial = eval(&dfn)?;
    let mut rng = rng::stream(cfg.seed, STREAM_TRAIN);
    let pose = dfn.pose.clone();
    optimize(&mut dfn.store, cfg, log, |_, g, store| {
        let picks: Vec<(usize, usize)> = (0..cfg.pose_batch)
            .map(|_| (0, rng.random_range(0..frames.rows)))
            .collect();
        let x = g.constant(gather(std::slice::from_ref(&frames), &picks));
        let l = pose.recon_loss(g, store, x)?;
        g.status()?;
        Ok((l, Vec::new()))
    })?;
    dfn.store.round_to_f32(pose_ae::PREFIX);
    let fin = eval(&dfn)?;
    Ok((dfn, initial, fin))
}

fn stage2(cfg: &TrainConfig, data: &Dataset, log: &mut RunLog) -> Result<(Dfn, f64, f64)> {
    let mut dfn = Dfn::load(&cfg.checkpoint_dir, 1, cfg.seed)?;
    dfn.store.freeze_prefix(pose_ae::PREFIX);
    dfn.add_trajectory(cfg.trajectory.clone())?;
    let h = cfg.trajectory.horizon;
    let (codes, positions) = encode_dataset(&dfn, data)?;
    let windows: Vec<(usize, usize)> = codes
        .iter()
        .enumerate()
        .flat_map(|(s, c)| (0..window_count(c.rows, h + 1, 1)).map(move |t| (s, t)))
        .collect();
    if windows.is_empty() {
        return Err(DfnError::InvalidInput(format!(
            "no sequence has the {} frames one trajectory window needs",
            h + 1
        )));
    }
    let build = |picks: &[(usize, usize)], g: &mut Graph| -> (Vec<Var>, Vec<Var>) {
        (0..=h)
            .map(|k| {
                let at: Vec<(usize, usize)> = picks.iter().map(|(s, t)| (*s, t + k)).collect();
                (g.constant(gather(&codes, &at)), g.constant(gather(&positions, &at)))
            })
            .unzip()
    };
    let eval_picks: Vec<(usize, usize)> = {
        let n = windows.len().min(64);
        (0..n).map(|i| windows[i * windows.len() / n]).collect()
    };
    let eval = |dfn: &Dfn| -> Result<f64> {
        let mut model = dfn.trajectory()?.clone();
        model.config.teacher_forcing_ratio = 0.0;
        let mut g = Graph::new();
        let (zs, ps) = build(&eval_picks, &mut g);
        let mut rng = rng::stream(cfg.seed, STREAM_EVAL);
        let l = model.loss(&mut g, &dfn.store, &dfn.pose, &zs, &ps, &mut rng)?;
        g.status()?;
        Ok(g.scalar(l.total))
    };
    let initial = eval(&dfn)?;
    let mut rng = rng::stream(cfg.seed, STREAM_TRAIN);
    let (pose, model) = (dfn.pose.clone(), dfn.trajectory()?.clone());
    optimize(&mut dfn.store, cfg, log, |_, g, store| {
        let picks: Vec<(usize, usize)> = (0..cfg.batch_size)
            .map(|_| windows[rng.random_range(0..windows.len())])
            .collect();
        let (zs, ps) = build(&picks, g);
        let l = model.loss(g, store, &pose, &zs, &ps, &mut rng)?;
        g.status()?;
        Ok((l.total, vec![g.scalar(l.rec), g.scalar(l.smooth)]))
    })?;
    dfn.store.round_to_f32(trajectory::PREFIX);
    let fin = eval(&dfn)?;
    Ok((dfn, initial, fin))
}

fn stage3(cfg: &TrainConfig, data: &Dataset, log: &mut RunLog) -> Result<(Dfn, f64, f64)> {
    let mut dfn = Dfn::load(&cfg.checkpoint_dir, 2, cfg.seed)?;
    dfn.store.freeze_prefix(pose_ae::PREFIX);
    dfn.store.freeze_prefix(trajectory::PREFIX);
    dfn.add_dynamics(cfg.dynamics.clone())?;
    let h = dfn.trajectory()?.horizon();
    let (codes, _) = encode_dataset(&dfn, data)?;
    let summaries: Vec<Mat> = codes.iter().map(|c| summarize(&dfn, c)).collect::<Result<_>>()?;
    let lengths: Vec<usize> = codes.iter().map(|c| c.rows).collect();
    let mut windows = make_windows(&lengths, cfg.window_len, cfg.window_stride, h, cfg.seed)?;
    let steps_per_window = cfg.window_len - h;
    let batch = |ws: &[Window]| -> ElboBatch {
        let at = |k: usize| -> Vec<(usize, usize)> { ws.iter().map(|w| (w.sequence, w.start + k)).collect() };
        ElboBatch {
            z: (0..cfg.window_len).map(|k| gather(&codes, &at(k))).collect(),
            m: (0..steps_per_window).map(|k| gather(&summaries, &at(k))).collect(),
        }
    };
    let mut eval_windows = windows.clone();
    eval_windows.sort_by_key(|w| (w.sequence, w.start));
    let eval_batch = batch(&eval_windows);
    let eval = |dfn: &Dfn| -> Result<f64> {
        let mut g = Graph::new();
        let mut rng = rng::stream(cfg.seed, STREAM_EVAL);
        let out = dfn
            .dynamics()?
            .sequence_elbo(&mut g, &dfn.store, &eval_batch, 1.0, &mut rng)?;
        Ok(out.report.without_constant())
    };
    let initial = eval(&dfn)?;
    let mut rng = rng::stream(cfg.seed, STREAM_TRAIN);
    let model = dfn.dynamics()?.clone();
    let mut cursor = 0;
    optimize(&mut dfn.store, cfg, log, |step, g, store| {
        let mut picked = Vec::with_capacity(cfg.batch_size);
        while picked.len() < cfg.batch_size {
            if cursor == windows.len() {
                windows.shuffle(&mut rng);
                cursor = 0;
            }
            picked.push(windows[cursor]);
            cursor += 1;
        }
        let beta = cfg.kl_weight(step);
        let out = model.sequence_elbo(g, store, &batch(&picked), beta, &mut rng)?;
        let r = out.report;
        Ok((
            out.loss,
            vec![r.kl_s, r.kl_f, r.nll_z, r.nll_m, r.td_kl, r.td_rec, beta],
        ))
    })?;
    dfn.store.round_to_f32(dynamics::PREFIX);
    let fin = eval(&dfn)?;
    Ok((dfn, initial, fin))
}

/// Trains `cfg.stage`, writing its checkpoint and run log into
/// `cfg.checkpoint_dir`.
pub fn train_stage(cfg: &TrainConfig) -> Result<StageReport> {
    cfg.validate()?;
    for s in 1..cfg.stage {
        let p = checkpoint_path(&cfg.checkpoint_dir, s);
        if !p.exists() {
            return Err(DfnError::Prerequisite(format!(
                "stage {} needs the stage-{s} checkpoint {}",
                cfg.stage,
                p.display()
            )));
        }
    }
    let data = Dataset::load(&cfg.data_dir)?;
    std::fs::create_dir_all(&cfg.checkpoint_dir).map_err(|e| DfnError::io(&cfg.checkpoint_dir, e))?;
    let log_file = log_path(&cfg.checkpoint_dir, cfg.stage);
    let columns: &[&str] = match cfg.stage {
        1 => &[],
        2 => &["rec", "smooth"],
        _ => &["kl_s", "kl_f", "nll_z", "nll_m", "td_kl", "td_rec", "beta"],
    };
    let mut log = RunLog::create(&log_file, columns)?;
    ::log::info!(
        "stage {}: {} steps on {} frames",
        cfg.stage,
        cfg.steps,
        data.frame_count()
    );
    let (dfn, initial, fin) = match cfg.stage {
        1 => stage1(cfg, &data, &mut log)?,
        2 => stage2(cfg, &data, &mut log)?,
        _ => stage3(cfg, &data, &mut log)?,
    };
    let checkpoint = dfn.save(&cfg.checkpoint_dir, cfg.stage)?;
    ::log::info!("stage {}: evaluation loss {initial:.6} -> {fin:.6}", cfg.stage);
    Ok(StageReport {
        stage: cfg.stage,
        steps: cfg.steps,
        initial_loss: initial,
        final_loss: fin,
        checkpoint,
        log: log_file,
    })
}

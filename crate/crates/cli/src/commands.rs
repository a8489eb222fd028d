use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use dfn::dynamics::MAX_PREFIX;
use dfn::evaluation::{self as ev, Series};
use dfn::mocap::{read_bvh_file, read_features, synth, write_bvh, PoseFeature};
use dfn::nn::checkpoint::load_tensors;
use dfn::nn::Mat;
use dfn::training::{self, checkpoint_path, load_prefix, Dataset, Dfn, TrainConfig};

use crate::{Command, Mode, Space, UsageError};

/// Band windows are cut every this many training frames.
const BAND_STRIDE: usize = 16;

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::Preprocess { input, out, fps } => preprocess(&input, &out, fps),
        Command::Train { config, stage } => train(&config, stage.as_deref()),
        Command::Generate {
            checkpoints,
            prefix,
            frames,
            seed,
            out,
            trace,
            resample_period,
        } => {
            let frames =
                usize::try_from(frames).map_err(|_| UsageError(format!("--frames must be 0 or more, got {frames}")))?;
            let trace = trace.unwrap_or_else(|| trace_path(&out));
            generate(&checkpoints, &prefix, frames, seed, &out, &trace, resample_period)
        }
        Command::Evaluate {
            mode,
            out,
            data,
            checkpoints,
            prefix,
            prefix_frames,
            sequences,
            length,
            t_list,
            seed,
            resample_period,
            space,
            with_velocity,
        } => {
            fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            let data = Dataset::load(&data)?;
            let eval = Evaluation {
                data,
                checkpoints,
                prefix,
                prefix_frames,
                seed,
                resample_period,
            };
            match mode {
                Mode::Pca => eval.pca(&out, space),
                Mode::Divergence => eval.divergence(&out, sequences, &t_list),
                Mode::Meandist => eval.meandist(&out, sequences, length, with_velocity),
            }
        }
        Command::Inspect { path } => inspect(&path),
        Command::Synth {
            out,
            seconds,
            fps,
            seed,
        } => {
            if !(seconds > 0.0 && fps > 0.0) {
                return Err(UsageError("--seconds and --fps must be positive".into()).into());
            }
            let clip = synth::walking_clip(seconds, fps, seed);
            ev::write_text(&out, &write_bvh(&clip))?;
            println!("wrote {} ({} frames at {fps} fps)", out.display(), clip.len());
            Ok(())
        }
    }
}

fn trace_path(out: &Path) -> PathBuf {
    out.with_extension("trace.csv")
}

fn preprocess(input: &Path, out: &Path, fps: f64) -> Result<()> {
    if !(fps > 0.0) {
        return Err(UsageError(format!("--fps must be positive, got {fps}")).into());
    }
    let summary = training::preprocess(input, out, fps)?;
    for (name, frames) in &summary.files {
        println!("{name}: {frames} frames");
    }
    println!("wrote {} sequences to {}", summary.files.len(), out.display());
    Ok(())
}

fn train(config: &Path, stage: Option<&str>) -> Result<()> {
    let mut cfg = TrainConfig::load(config)?;
    let stages: Vec<u8> = match stage {
        None => vec![cfg.stage],
        Some("all") => vec![1, 2, 3],
        Some(s) => vec![s
            .parse()
            .map_err(|_| UsageError(format!("bad stage '{s}'; valid: 1, 2, 3, all")))?],
    };
    for s in stages {
        cfg.stage = s;
        let report = training::train_stage(&cfg)?;
        println!(
            "stage {}: {} steps, loss {:.6} -> {:.6} ({:.1}%), checkpoint {}",
            report.stage,
            report.steps,
            report.initial_loss,
            report.final_loss,
            100.0 * report.final_loss / report.initial_loss,
            report.checkpoint.display()
        );
    }
    Ok(())
}

/// The last `MAX_PREFIX` frames of `frames`.
fn cap_prefix(mut frames: Vec<PoseFeature>) -> Vec<PoseFeature> {
    if frames.len() > MAX_PREFIX {
        log::info!("prefix has {} frames; using the last {MAX_PREFIX}", frames.len());
        frames.drain(..frames.len() - MAX_PREFIX);
    }
    frames
}

fn generate(
    checkpoints: &Path,
    prefix: &Path,
    frames: usize,
    seed: u64,
    out: &Path,
    trace: &Path,
    resample_period: usize,
) -> Result<()> {
    let dfn = Dfn::load(checkpoints, 3, seed)?;
    let prefix = cap_prefix(load_prefix(prefix, &dfn.pose.skeleton)?);
    let seq = match dfn.generate(&prefix, frames, resample_period, &[seed]) {
        Ok(mut v) => v.remove(0),
        Err(failure) => {
            let frame = failure.frame;
            return Err(anyhow::Error::from(dfn::DfnError::from(failure)))
                .with_context(|| format!("generation stopped at frame {frame}"));
        }
    };
    ev::write_text(out, &dfn.motion_bvh(&seq)?)?;
    ev::write_text(trace, &ev::trace_csv(&seq.trace))?;
    println!("wrote {} ({frames} frames) and {}", out.display(), trace.display());
    Ok(())
}

struct Evaluation {
    data: Dataset,
    checkpoints: PathBuf,
    prefix: Option<PathBuf>,
    prefix_frames: usize,
    seed: u64,
    resample_period: usize,
}

impl Evaluation {
    fn model(&self, stages: u8) -> Result<Dfn> {
        Ok(Dfn::load(&self.checkpoints, stages, self.seed)?)
    }

    fn prefix(&self, dfn: &Dfn) -> Result<Vec<PoseFeature>> {
        match &self.prefix {
            Some(p) => Ok(cap_prefix(load_prefix(p, &dfn.pose.skeleton)?)),
            None => {
                let first = &self.data.sequences[0];
                if self.prefix_frames < 2 || self.prefix_frames > first.len().min(MAX_PREFIX) {
                    return Err(UsageError(format!(
                        "--prefix-frames must be in 2..={}",
                        first.len().min(MAX_PREFIX)
                    ))
                    .into());
                }
                Ok(first[..self.prefix_frames].to_vec())
            }
        }
    }

    fn pca(&self, out: &Path, space: Space) -> Result<()> {
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        let dfn = match space {
            Space::Latent => Some(self.model(1)?),
            Space::Feature => None,
        };
        for (s, seq) in self.data.sequences.iter().enumerate() {
            let points = match &dfn {
                Some(dfn) => dfn.pose.encode_frames(&dfn.store, seq)?,
                None => Mat::from_rows(&seq.iter().map(|f| self.data.stats.normalize(&f.0)).collect::<Vec<_>>()),
            };
            for i in 0..points.rows {
                rows.push(points.row(i).to_vec());
                labels.push((s, i));
            }
        }
        let proj = ev::pca_fit_project(&Mat::from_rows(&rows), 2)?;
        ev::write_text(&out.join("pca.csv"), &ev::projection_csv(&proj, &labels))?;
        let series: Vec<Series> = self
            .data
            .names
            .iter()
            .enumerate()
            .map(|(s, name)| Series {
                name: name.clone(),
                points: labels
                    .iter()
                    .enumerate()
                    .filter(|(_, l)| l.0 == s)
                    .map(|(i, _)| (proj.points.get(i, 0), proj.points.get(i, 1)))
                    .collect(),
            })
            .collect();
        ev::write_text(
            &out.join("pca.svg"),
            &ev::line_svg("latent trajectories (PCA)", &series),
        )?;
        println!(
            "pca: {} points, explained variance {:.4} / {:.4}",
            rows.len(),
            proj.explained[0],
            proj.explained[1]
        );
        Ok(())
    }

    fn divergence(&self, out: &Path, sequences: usize, t_list: &[usize]) -> Result<()> {
        if sequences == 0 {
            return Err(UsageError("--sequences must be positive".into()).into());
        }
        let dfn = self.model(3)?;
        let prefix = self.prefix(&dfn)?;
        let seeds = ev::sequence_seeds(self.seed, sequences);
        let table = ev::divergence_scatter(&dfn, &prefix, &seeds, t_list, self.resample_period)?;
        ev::write_text(&out.join("divergence.csv"), &ev::divergence_csv(&table))?;
        ev::write_text(&out.join("dispersion.csv"), &ev::dispersion_csv(&table))?;
        if table.rows.len() >= 2 {
            let z = Mat::from_rows(&table.rows.iter().map(|r| r.z.clone()).collect::<Vec<_>>());
            let proj = ev::pca_fit_project(&z, 2)?;
            let series: Vec<Series> = table
                .t_list
                .iter()
                .map(|t| Series {
                    name: format!("t = {t}"),
                    points: table
                        .rows
                        .iter()
                        .enumerate()
                        .filter(|(_, r)| r.t == *t)
                        .map(|(i, _)| (proj.points.get(i, 0), proj.points.get(i, 1)))
                        .collect(),
                })
                .collect();
            ev::write_text(
                &out.join("divergence.svg"),
                &ev::scatter_svg("sampled codes over time (PCA)", &series),
            )?;
        }
        for d in table.dispersions() {
            match d.z {
                Some(z) => println!("t = {}: mean pairwise code distance {z:.6}", d.t),
                None => println!("t = {}: dispersion undefined for a single sequence", d.t),
            }
        }
        Ok(())
    }

    fn meandist(&self, out: &Path, sequences: usize, length: usize, with_velocity: bool) -> Result<()> {
        if sequences == 0 || length == 0 {
            return Err(UsageError("--sequences and --length must be positive".into()).into());
        }
        let dfn = self.model(3)?;
        let prefix = self.prefix(&dfn)?;
        let seeds = ev::sequence_seeds(self.seed, sequences);
        let generated = dfn
            .generate(&prefix, length, self.resample_period, &seeds)
            .map_err(dfn::DfnError::from)?;
        let motions: Vec<&[PoseFeature]> = generated.iter().map(|g| g.features.as_slice()).collect();
        let curve = ev::mean_distance_distribution(&motions, with_velocity)?;
        let band = ev::training_band(&self.data.sequences, length, BAND_STRIDE, with_velocity).ok();
        ev::write_text(&out.join("meandist.csv"), &ev::distance_csv(&curve, band.as_deref()))?;
        let line = |name: &str, f: &dyn Fn(usize) -> f64| Series {
            name: name.to_string(),
            points: (0..length).map(|t| ((t + 1) as f64, f(t))).collect(),
        };
        let mut series = vec![line("generated", &|t| curve[t].mean)];
        if let Some(b) = &band {
            series.push(line("training", &|t| b[t].mean));
            series.push(line("training -3 sd", &|t| b[t].mean - 3.0 * b[t].std()));
            series.push(line("training +3 sd", &|t| b[t].mean + 3.0 * b[t].std()));
            let from = (length * 3 / 4).max(1);
            let worst = ev::band_deviation(&curve, b, from, length)?
                .into_iter()
                .map(|(_, d)| d.abs())
                .fold(0.0, f64::max);
            println!("meandist: largest deviation over frames {from}..={length} is {worst:.3} sd");
        } else {
            println!("meandist: no training sequence reaches {length} frames; band omitted");
        }
        ev::write_text(
            &out.join("meandist.svg"),
            &ev::line_svg("mean distance to average pose", &series),
        )?;
        Ok(())
    }
}

fn inspect(path: &Path) -> Result<()> {
    if path.is_dir() {
        if path.join("manifest.csv").exists() {
            let data = Dataset::load(path)?;
            println!(
                "data directory: {} sequences, {} frames",
                data.sequences.len(),
                data.frame_count()
            );
            println!(
                "skeleton: {} joints, feature width {}",
                data.skeleton.len(),
                data.skeleton.feature_dim()
            );
            for (name, seq) in data.names.iter().zip(&data.sequences) {
                println!("  {name}: {} frames", seq.len());
            }
            return Ok(());
        }
        let mut found = false;
        for stage in 1..=3 {
            let p = checkpoint_path(path, stage);
            if p.exists() {
                found = true;
                let tensors = load_tensors(&p)?;
                let count: usize = tensors.iter().map(|(_, t)| t.data.len()).sum();
                println!("stage {stage}: {} tensors, {count} values", tensors.len());
            }
        }
        if !found {
            return Err(UsageError(format!(
                "{} is neither a data nor a checkpoint directory",
                path.display()
            ))
            .into());
        }
        return Ok(());
    }
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .unwrap_or("")
        .to_ascii_lowercase();
    match ext.as_str() {
        "bvh" => {
            let clip = read_bvh_file(path)?;
            println!(
                "{} joints, {} channels, {} frames at {:.3} fps",
                clip.skeleton.len(),
                clip.skeleton.channel_count(),
                clip.len(),
                clip.fps()
            );
            for j in clip.skeleton.joints() {
                let parent = j
                    .parent
                    .map_or("-".to_string(), |p| clip.skeleton.joints()[p].name.clone());
                println!("  {} (parent {parent}, {})", j.name, j.euler_order());
            }
        }
        "dfnf" => {
            let frames = read_features(path)?;
            let width = frames.first().map_or(0, PoseFeature::dim);
            let finite = frames.iter().all(PoseFeature::is_finite);
            println!("{} frames of width {width}; all finite: {finite}", frames.len());
        }
        "dfnw" => {
            for (name, t) in load_tensors(path)? {
                println!("{name} {:?}", t.shape);
            }
        }
        _ => return Err(UsageError(format!("{}: expected .bvh, .dfnf or .dfnw", path.display())).into()),
    }
    Ok(())
}

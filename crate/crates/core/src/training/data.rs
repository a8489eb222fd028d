//! Preprocessed dataset layout and training windows.
//!
//! A data directory holds `features/*.dfnf`, `norm_stats.csv`,
//! `manifest.csv` (file name and frame count per sequence) and
//! `skeleton.bvh` (the shared skeleton with a single rest frame).

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{DfnError, Result};
use crate::mocap::{
    extract_features, read_bvh_file, read_features, read_norm_stats, write_bvh, write_features, write_norm_stats,
    NormStats, PoseFeature, RawClip, Skeleton,
};

pub const TRAINING_FPS: f64 = 30.0;

#[derive(Debug, Clone)]
pub struct Dataset {
    pub skeleton: Skeleton,
    pub stats: NormStats,
    pub names: Vec<String>,
    pub sequences: Vec<Vec<PoseFeature>>,
}

impl Dataset {
    pub fn load(dir: &Path) -> Result<Dataset> {
        let skeleton = read_bvh_file(&dir.join("skeleton.bvh"))?.skeleton;
        let stats = read_norm_stats(&dir.join("norm_stats.csv"))?;
        let manifest_path = dir.join("manifest.csv");
        let manifest = fs::read_to_string(&manifest_path).map_err(|e| DfnError::io(&manifest_path, e))?;
        let mut names = Vec::new();
        let mut sequences = Vec::new();
        for line in manifest.lines().skip(1).filter(|l| !l.trim().is_empty()) {
            let name = line.split(',').next().unwrap_or("").trim().to_string();
            let seq = read_features(&dir.join("features").join(format!("{name}.dfnf")))?;
            if seq.iter().any(|f| f.dim() != skeleton.feature_dim()) {
                return Err(DfnError::Format(format!(
                    "{name}: feature width does not match the skeleton"
                )));
            }
            names.push(name);
            sequences.push(seq);
        }
        if sequences.is_empty() {
            return Err(DfnError::InvalidInput(format!(
                "{} lists no sequences",
                manifest_path.display()
            )));
        }
        Ok(Dataset {
            skeleton,
            stats,
            names,
            sequences,
        })
    }

    pub fn frame_count(&self) -> usize {
        self.sequences.iter().map(Vec::len).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PreprocessSummary {
    pub files: Vec<(String, usize)>,
    pub out_dir: PathBuf,
}

/// Converts every `.bvh` file of `input` (sorted by name) into training
/// features under `out`. Nothing is written unless all files parse and
/// share one skeleton.
pub fn preprocess(input: &Path, out: &Path, target_fps: f64) -> Result<PreprocessSummary> {
    let mut paths: Vec<PathBuf> = fs::read_dir(input)
        .map_err(|e| DfnError::io(input, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("bvh")))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(DfnError::InvalidInput(format!("no .bvh files in {}", input.display())));
    }
    let mut clips: Vec<(String, RawClip)> = Vec::with_capacity(paths.len());
    for p in &paths {
        let stem = p.file_stem().and_then(|s| s.to_str()).unwrap_or("clip").to_string();
        clips.push((stem, read_bvh_file(p)?));
    }
    let reference = &clips[0].1.skeleton;
    let offenders: Vec<String> = clips
        .iter()
        .filter(|(_, c)| !c.skeleton.same_structure(reference))
        .map(|(n, c)| format!("{n} ({} joints)", c.skeleton.len()))
        .collect();
    if !offenders.is_empty() {
        return Err(DfnError::InvalidInput(format!(
            "mixed skeletons: {} differ from {} ({} joints)",
            offenders.join(", "),
            clips[0].0,
            reference.len()
        )));
    }
    let mut sequences = Vec::with_capacity(clips.len());
    for (name, clip) in &clips {
        let clip = if clip.fps() > target_fps {
            clip.resample(target_fps)?
        } else {
            clip.clone()
        };
        let (features, _) = extract_features(&clip).map_err(|e| DfnError::InvalidInput(format!("{name}: {e}")))?;
        sequences.push(features);
    }
    let stats = NormStats::compute(&sequences)?;

    let feat_dir = out.join("features");
    fs::create_dir_all(&feat_dir).map_err(|e| DfnError::io(&feat_dir, e))?;
    let mut manifest = String::from("file,frames\n");
    let mut files = Vec::with_capacity(clips.len());
    for ((name, _), seq) in clips.iter().zip(&sequences) {
        write_features(&feat_dir.join(format!("{name}.dfnf")), seq)?;
        manifest.push_str(&format!("{name},{}\n", seq.len()));
        files.push((name.clone(), seq.len()));
    }
    write_norm_stats(&out.join("norm_stats.csv"), &stats)?;
    let manifest_path = out.join("manifest.csv");
    fs::write(&manifest_path, manifest).map_err(|e| DfnError::io(&manifest_path, e))?;
    let skeleton = reference.with_export_channels();
    let rest = RawClip {
        frames: vec![vec![0.0; skeleton.channel_count()]],
        skeleton,
        frame_time: 1.0 / target_fps,
    };
    let skel_path = out.join("skeleton.bvh");
    fs::write(&skel_path, write_bvh(&rest)).map_err(|e| DfnError::io(&skel_path, e))?;
    Ok(PreprocessSummary {
        files,
        out_dir: out.to_path_buf(),
    })
}

/// Start of one training window inside a sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Window {
    pub sequence: usize,
    pub start: usize,
}

/// Number of windows a sequence of `len` frames yields.
pub fn window_count(len: usize, window_len: usize, stride: usize) -> usize {
    if len < window_len {
        0
    } else {
        (len - window_len) / stride + 1
    }
}

/// Overlapping windows that never cross sequence boundaries, in an order
/// shuffled by `seed`.
pub fn make_windows(
    lengths: &[usize],
    window_len: usize,
    stride: usize,
    horizon: usize,
    seed: u64,
) -> Result<Vec<Window>> {
    if window_len <= horizon + 1 {
        return Err(DfnError::InvalidInput(format!(
            "window length {window_len} must exceed horizon + 1 = {}",
            horizon + 1
        )));
    }
    if stride == 0 {
        return Err(DfnError::InvalidInput("window stride must be positive".into()));
    }
    let mut out = Vec::new();
    for (sequence, len) in lengths.iter().enumerate() {
        for k in 0..window_count(*len, window_len, stride) {
            out.push(Window {
                sequence,
                start: k * stride,
            });
        }
    }
    if out.is_empty() {
        return Err(DfnError::InvalidInput(format!(
            "no sequence reaches the window length {window_len} (longest has {})",
            lengths.iter().max().copied().unwrap_or(0)
        )));
    }
    out.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mocap::synth;
    use proptest::prelude::*;

    #[test]
    fn hundred_frames() {
        let mut w = make_windows(&[100], 64, 16, 16, 3).unwrap();
        w.sort_by_key(|w| w.start);
        assert_eq!(w.iter().map(|w| w.start).collect::<Vec<_>>(), vec![0, 16, 32]);
    }

    #[test]
    fn short_sequences() {
        let w = make_windows(&[30, 70, 10], 64, 16, 16, 0).unwrap();
        assert!(w.iter().all(|w| w.sequence == 1));
        assert!(make_windows(&[30, 63], 64, 16, 16, 0).is_err());
        assert!(make_windows(&[100], 17, 16, 16, 0).is_err());
    }

    #[test]
    fn shuffle_is_seeded() {
        let a = make_windows(&[500, 300], 64, 8, 16, 42).unwrap();
        assert_eq!(a, make_windows(&[500, 300], 64, 8, 16, 42).unwrap());
        assert_ne!(a, make_windows(&[500, 300], 64, 8, 16, 43).unwrap());
    }

    proptest! {
        #[test]
        fn count_formula(len in 0usize..600, wl in 18usize..100, stride in 1usize..40) {
            let w = make_windows(&[len], wl, stride, 16, 1);
            let expect = if len < wl { 0 } else { (len - wl) / stride + 1 };
            match w {
                Ok(w) => {
                    prop_assert_eq!(w.len(), expect);
                    prop_assert!(w.iter().all(|w| w.start + wl <= len));
                }
                Err(_) => prop_assert_eq!(expect, 0),
            }
        }
    }

    #[test]
    fn preprocess_round_trip() {
        let input = tempfile::tempdir().unwrap();
        let out = tempfile::tempdir().unwrap();
        let clip = synth::walking_clip(1.0, 120.0, 1);
        fs::write(input.path().join("walk.bvh"), write_bvh(&clip)).unwrap();
        let summary = preprocess(input.path(), out.path(), 30.0).unwrap();
        assert_eq!(summary.files, vec![("walk".to_string(), 29)]);
        let ds = Dataset::load(out.path()).unwrap();
        assert_eq!(ds.sequences[0].len(), 29);
        assert!(ds.skeleton.same_structure(&clip.skeleton));
        assert_eq!(ds.stats.dim(), 76);
    }

    #[test]
    fn preprocess_errors_leave_no_output() {
        let input = tempfile::tempdir().unwrap();
        let out = tempfile::tempdir().unwrap();
        assert!(preprocess(input.path(), out.path(), 30.0).is_err());
        let clip = synth::walking_clip(0.5, 30.0, 1);
        fs::write(input.path().join("a.bvh"), write_bvh(&clip)).unwrap();
        let mut joints = clip.skeleton.joints().to_vec();
        joints.pop();
        let small = RawClip {
            frames: clip.frames.iter().map(|f| f[..f.len() - 3].to_vec()).collect(),
            skeleton: Skeleton::new(joints).unwrap(),
            frame_time: clip.frame_time,
        };
        fs::write(input.path().join("b.bvh"), write_bvh(&small)).unwrap();
        let err = preprocess(input.path(), out.path(), 30.0).unwrap_err().to_string();
        assert!(
            err.contains("mixed skeletons") && err.contains("b (23 joints)"),
            "{err}"
        );
        assert_eq!(fs::read_dir(out.path()).unwrap().count(), 0);
    }
}

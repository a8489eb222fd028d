//! Diagnostics on trained models: PCA projection of latent trajectories,
//! spread of sampled futures over time, and the distance-to-mean-pose
//! distribution of motion sets.

mod report;

use nalgebra::DMatrix;

use crate::error::{DfnError, Result};
use crate::mocap::PoseFeature;
use crate::nn::Mat;
use crate::training::Dfn;

pub use report::{
    dispersion_csv, distance_csv, divergence_csv, line_svg, projection_csv, scatter_svg, trace_csv, write_text, Series,
};

/// Default number of sampled sequences and their length.
pub const DEFAULT_SEQUENCES: usize = 64;
pub const DEFAULT_LENGTH: usize = 128;
pub const DEFAULT_CHECKPOINTS: [usize; 2] = [32, 128];

#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    /// One row per input point, one column per component.
    pub points: Mat,
    pub mean: Vec<f64>,
    /// Unit principal directions, strongest first.
    pub components: Vec<Vec<f64>>,
    /// Share of total variance along each returned direction.
    pub explained: Vec<f64>,
}

/// Centers `points` (one per row) and projects them onto their top
/// `out_dim` principal directions. Each direction is signed so that its
/// largest-magnitude entry is positive; directions beyond the data's rank
/// come back as zero vectors with zero explained variance.
pub fn pca_fit_project(points: &Mat, out_dim: usize) -> Result<Projection> {
    let (n, d) = (points.rows, points.cols);
    if n < 2 {
        return Err(DfnError::InvalidInput(format!("PCA needs at least 2 points, got {n}")));
    }
    if out_dim == 0 || d == 0 {
        return Err(DfnError::InvalidInput(
            "PCA needs a positive input and output width".into(),
        ));
    }
    if points.data.iter().any(|v| !v.is_finite()) {
        return Err(DfnError::NonFinite {
            context: "PCA input".into(),
        });
    }
    let mean: Vec<f64> = (0..d)
        .map(|j| (0..n).map(|i| points.get(i, j)).sum::<f64>() / n as f64)
        .collect();
    let centered = DMatrix::from_fn(n, d, |i, j| points.get(i, j) - mean[j]);
    let svd = centered.svd(false, true);
    let v_t = svd.v_t.ok_or_else(|| DfnError::NonFinite {
        context: "PCA decomposition".into(),
    })?;
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|a, b| svd.singular_values[*b].total_cmp(&svd.singular_values[*a]));
    let total: f64 = svd.singular_values.iter().map(|s| s * s).sum();

    let mut components = Vec::with_capacity(out_dim);
    let mut explained = Vec::with_capacity(out_dim);
    for k in 0..out_dim {
        match order.get(k) {
            Some(&r) if svd.singular_values[r] > 0.0 => {
                let mut dir: Vec<f64> = v_t.row(r).iter().copied().collect();
                let lead = dir
                    .iter()
                    .copied()
                    .fold(0.0f64, |m, v| if v.abs() > m.abs() { v } else { m });
                if lead < 0.0 {
                    dir.iter_mut().for_each(|v| *v = -*v);
                }
                let s = svd.singular_values[r];
                explained.push(s * s / total);
                components.push(dir);
            }
            _ => {
                explained.push(0.0);
                components.push(vec![0.0; d]);
            }
        }
    }
    let mut projected = Mat::zeros(n, out_dim);
    for i in 0..n {
        for (k, dir) in components.iter().enumerate() {
            projected.data[i * out_dim + k] = (0..d).map(|j| (points.get(i, j) - mean[j]) * dir[j]).sum();
        }
    }
    Ok(Projection {
        points: projected,
        mean,
        components,
        explained,
    })
}

/// Distinct per-sequence seeds derived from one base seed.
pub fn sequence_seeds(base: u64, n: usize) -> Vec<u64> {
    (0..n as u64).map(|i| base.wrapping_add(i)).collect()
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Mean Euclidean distance over all unordered pairs; `None` for fewer than
/// two points.
pub fn mean_pairwise_distance(points: &[&[f64]]) -> Option<f64> {
    let n = points.len();
    if n < 2 {
        return None;
    }
    let mut sum = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            sum += distance(points[i], points[j]);
        }
    }
    Some(sum / (n * (n - 1) / 2) as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DivergenceRow {
    pub sequence: usize,
    pub seed: u64,
    pub t: usize,
    pub z: Vec<f64>,
    pub s: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DivergenceTable {
    pub t_list: Vec<usize>,
    pub sequences: usize,
    /// Ordered by `t` (as in `t_list`), then by sequence.
    pub rows: Vec<DivergenceRow>,
}

/// Spread of one checkpoint; `None` marks a single-sequence table where
/// spread is undefined.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dispersion {
    pub t: usize,
    pub z: Option<f64>,
    pub s: Option<f64>,
}

impl DivergenceTable {
    pub fn at(&self, t: usize) -> impl Iterator<Item = &DivergenceRow> {
        self.rows.iter().filter(move |r| r.t == t)
    }

    pub fn dispersion(&self, t: usize) -> Dispersion {
        let z: Vec<&[f64]> = self.at(t).map(|r| r.z.as_slice()).collect();
        let s: Vec<&[f64]> = self.at(t).map(|r| r.s.as_slice()).collect();
        Dispersion {
            t,
            z: mean_pairwise_distance(&z),
            s: mean_pairwise_distance(&s),
        }
    }

    pub fn dispersions(&self) -> Vec<Dispersion> {
        self.t_list.iter().map(|t| self.dispersion(*t)).collect()
    }
}

/// Generates one sequence per seed from `prefix` and records the latent
/// code and current state at each requested generated frame (`t >= 1`).
pub fn divergence_scatter(
    dfn: &Dfn,
    prefix: &[PoseFeature],
    seeds: &[u64],
    t_list: &[usize],
    resample_period: usize,
) -> Result<DivergenceTable> {
    if seeds.is_empty() {
        return Err(DfnError::InvalidInput("divergence needs at least one sequence".into()));
    }
    if t_list.is_empty() || t_list.contains(&0) {
        return Err(DfnError::InvalidInput(format!(
            "checkpoints must be generated frames >= 1, got {t_list:?}"
        )));
    }
    let frames = t_list.iter().copied().max().unwrap_or(0);
    let generated = dfn.generate(prefix, frames, resample_period, seeds)?;
    let mut rows = Vec::with_capacity(seeds.len() * t_list.len());
    for &t in t_list {
        for (i, (seq, seed)) in generated.iter().zip(seeds).enumerate() {
            let row = seq
                .trace
                .iter()
                .find(|r| r.t == t as i64)
                .ok_or_else(|| DfnError::InvalidInput(format!("trace has no row for t = {t}")))?;
            rows.push(DivergenceRow {
                sequence: i,
                seed: *seed,
                t,
                z: row.z.clone(),
                s: row.s.clone(),
            });
        }
    }
    Ok(DivergenceTable {
        t_list: t_list.to_vec(),
        sequences: seeds.len(),
        rows,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DistanceStat {
    pub mean: f64,
    /// Population variance of the distances.
    pub variance: f64,
}

impl DistanceStat {
    pub fn std(&self) -> f64 {
        self.variance.sqrt()
    }
}

/// For every frame index, the distances of each motion's pose to the mean
/// pose over motions, summarized by mean and variance. Distances use the
/// root-relative joint positions, plus the velocity block when
/// `with_velocity` is set.
pub fn mean_distance_distribution(motions: &[&[PoseFeature]], with_velocity: bool) -> Result<Vec<DistanceStat>> {
    let first = motions
        .first()
        .ok_or_else(|| DfnError::InvalidInput("mean distance needs at least one motion".into()))?;
    let len = first.len();
    if let Some(bad) = motions.iter().position(|m| m.len() != len) {
        return Err(DfnError::InvalidInput(format!(
            "motion {bad} has {} frames, expected {len}",
            motions[bad].len()
        )));
    }
    let pick = |f: &PoseFeature| -> Vec<f64> {
        if with_velocity {
            f.0.clone()
        } else {
            f.positions().to_vec()
        }
    };
    let mut out = Vec::with_capacity(len);
    for t in 0..len {
        let poses: Vec<Vec<f64>> = motions.iter().map(|m| pick(&m[t])).collect();
        let width = poses[0].len();
        if poses.iter().any(|p| p.len() != width) {
            return Err(DfnError::InvalidInput(format!("frame {t}: pose widths differ")));
        }
        let n = poses.len() as f64;
        let mean: Vec<f64> = (0..width)
            .map(|j| poses.iter().map(|p| p[j]).sum::<f64>() / n)
            .collect();
        let d: Vec<f64> = poses.iter().map(|p| distance(p, &mean)).collect();
        let mu = d.iter().sum::<f64>() / n;
        let variance = d.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / n;
        out.push(DistanceStat { mean: mu, variance });
    }
    Ok(out)
}

/// Distance distribution of all `len`-frame windows (every `stride` frames)
/// cut from the training sequences.
pub fn training_band(
    sequences: &[Vec<PoseFeature>],
    len: usize,
    stride: usize,
    with_velocity: bool,
) -> Result<Vec<DistanceStat>> {
    if len == 0 || stride == 0 {
        return Err(DfnError::InvalidInput(
            "band window length and stride must be positive".into(),
        ));
    }
    let windows: Vec<&[PoseFeature]> = sequences
        .iter()
        .flat_map(|s| {
            (0..s.len().saturating_sub(len - 1))
                .step_by(stride)
                .map(move |k| &s[k..k + len])
        })
        .collect();
    if windows.is_empty() {
        return Err(DfnError::InvalidInput(format!(
            "no training sequence reaches {len} frames"
        )));
    }
    mean_distance_distribution(&windows, with_velocity)
}

/// Signed distance of the generated mean from the band center, in band
/// standard deviations, for frames `from..=to` (1-based).
pub fn band_deviation(
    generated: &[DistanceStat],
    band: &[DistanceStat],
    from: usize,
    to: usize,
) -> Result<Vec<(usize, f64)>> {
    if from == 0 || from > to || to > generated.len() || to > band.len() {
        return Err(DfnError::InvalidInput(format!(
            "frames {from}..={to} outside curves of {} and {} frames",
            generated.len(),
            band.len()
        )));
    }
    Ok((from..=to)
        .map(|t| {
            let (g, b) = (generated[t - 1], band[t - 1]);
            let gap = g.mean - b.mean;
            let dev = if b.std() > 0.0 {
                gap / b.std()
            } else if gap == 0.0 {
                0.0
            } else {
                gap.signum() * f64::INFINITY
            };
            (t, dev)
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Cyclic Jacobi eigenvalues of a symmetric matrix.
    fn jacobi_eigenvalues(mut a: Vec<Vec<f64>>) -> Vec<f64> {
        let n = a.len();
        for _ in 0..100 {
            let off: f64 = (0..n)
                .flat_map(|i| (0..n).filter(move |j| *j != i).map(move |j| (i, j)))
                .map(|(i, j)| a[i][j] * a[i][j])
                .sum();
            if off < 1e-24 {
                break;
            }
            for p in 0..n {
                for q in p + 1..n {
                    if a[p][q].abs() < 1e-300 {
                        continue;
                    }
                    let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                    let sign = if theta >= 0.0 { 1.0 } else { -1.0 };
                    let t = sign / (theta.abs() + (theta * theta + 1.0).sqrt());
                    let c = 1.0 / (t * t + 1.0).sqrt();
                    let s = t * c;
                    for row in a.iter_mut() {
                        let (akp, akq) = (row[p], row[q]);
                        row[p] = c * akp - s * akq;
                        row[q] = s * akp + c * akq;
                    }
                    let (head, tail) = a.split_at_mut(q);
                    for (x, y) in head[p].iter_mut().zip(tail[0].iter_mut()) {
                        let (apk, aqk) = (*x, *y);
                        *x = c * apk - s * aqk;
                        *y = s * apk + c * aqk;
                    }
                }
            }
        }
        let mut ev: Vec<f64> = (0..n).map(|i| a[i][i]).collect();
        ev.sort_by(|x, y| y.total_cmp(x));
        ev
    }

    fn random_points(n: usize, d: usize, seed: u64) -> Mat {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        Mat::from_vec(n, d, (0..n * d).map(|_| r.random_range(-1.0..1.0)).collect())
    }

    #[test]
    fn planar_points_are_fully_explained() {
        let mut r = ChaCha8Rng::seed_from_u64(4);
        let u: Vec<f64> = (0..16).map(|_| r.random_range(-1.0..1.0)).collect();
        let v: Vec<f64> = (0..16).map(|_| r.random_range(-1.0..1.0)).collect();
        let rows: Vec<Vec<f64>> = (0..50)
            .map(|_| {
                let (a, b) = (r.random_range(-3.0..3.0), r.random_range(-1.0..1.0));
                (0..16).map(|j| 5.0 + a * u[j] + b * v[j]).collect()
            })
            .collect();
        let p = pca_fit_project(&Mat::from_rows(&rows), 2).unwrap();
        assert!(p.explained.iter().sum::<f64>() >= 0.999, "{:?}", p.explained);
        assert!(p.explained[0] >= p.explained[1]);
    }

    #[test]
    fn mean_projects_to_origin() {
        let pts = random_points(30, 5, 1);
        let p = pca_fit_project(&pts, 2).unwrap();
        for k in 0..2 {
            let col_mean: f64 = (0..30).map(|i| p.points.get(i, k)).sum::<f64>() / 30.0;
            assert!(col_mean.abs() < 1e-12);
        }
    }

    #[test]
    fn reconstruction_error_matches_eigen_oracle() {
        for (seed, d) in [(2u64, 3usize), (3, 6), (5, 8)] {
            let pts = random_points(40, d, seed);
            let p = pca_fit_project(&pts, 2).unwrap();
            let mean = &p.mean;
            let mut total = 0.0;
            let mut scatter = vec![vec![0.0; d]; d];
            for i in 0..40 {
                let c: Vec<f64> = (0..d).map(|j| pts.get(i, j) - mean[j]).collect();
                total += c.iter().map(|v| v * v).sum::<f64>();
                for a in 0..d {
                    for b in 0..d {
                        scatter[a][b] += c[a] * c[b];
                    }
                }
            }
            let kept: f64 = (0..40)
                .map(|i| (0..2).map(|k| p.points.get(i, k).powi(2)).sum::<f64>())
                .sum();
            let err = total - kept;
            let ev = jacobi_eigenvalues(scatter);
            let oracle: f64 = ev[2..].iter().sum();
            assert!((err - oracle).abs() < 1e-6, "d={d}: {err} vs {oracle}");
            let ratio = ev[0] / ev.iter().sum::<f64>();
            assert!((p.explained[0] - ratio).abs() < 1e-9);
        }
    }

    #[test]
    fn pca_edge_cases() {
        assert!(pca_fit_project(&random_points(1, 4, 0), 2).is_err());
        let p = pca_fit_project(&Mat::from_rows(&[vec![1.0, 2.0], vec![3.0, 2.0]]), 2).unwrap();
        assert_eq!(p.explained, vec![1.0, 0.0]);
        assert_eq!(p.components[0], vec![1.0, 0.0]);
        assert_eq!((p.points.get(0, 0), p.points.get(1, 0)), (-1.0, 1.0));
        let same = pca_fit_project(&Mat::from_rows(&[vec![1.0, 1.0], vec![1.0, 1.0]]), 1).unwrap();
        assert_eq!(same.explained, vec![0.0]);
    }

    proptest! {
        #[test]
        fn permutation_flips_at_most_signs(seed in 0u64..200, n in 3usize..20, d in 2usize..6) {
            let pts = random_points(n, d, seed);
            let a = pca_fit_project(&pts, 2).unwrap();
            let rows: Vec<Vec<f64>> = (0..n).rev().map(|i| pts.row(i).to_vec()).collect();
            let b = pca_fit_project(&Mat::from_rows(&rows), 2).unwrap();
            prop_assert!(a.explained.iter().sum::<f64>() <= 1.0 + 1e-9);
            for k in 0..2 {
                prop_assert!((a.explained[k] - b.explained[k]).abs() < 1e-9);
                if a.explained[k] > 1e-6 && (k == 0 || (a.explained[0] - a.explained[1]).abs() > 1e-6) {
                    for i in 0..n {
                        let (x, y) = (a.points.get(i, k), b.points.get(n - 1 - i, k));
                        prop_assert!((x.abs() - y.abs()).abs() < 1e-7, "{} vs {}", x, y);
                    }
                }
            }
        }
    }

    #[test]
    fn pairwise_distance() {
        assert_eq!(mean_pairwise_distance(&[&[0.0, 0.0]]), None);
        let pts: [&[f64]; 3] = [&[0.0, 0.0], &[3.0, 4.0], &[0.0, 0.0]];
        assert!((mean_pairwise_distance(&pts).unwrap() - 10.0 / 3.0).abs() < 1e-12);
    }

    fn motion(value: impl Fn(usize, usize) -> f64, frames: usize) -> Vec<PoseFeature> {
        (0..frames)
            .map(|t| PoseFeature((0..76).map(|j| value(t, j)).collect()))
            .collect()
    }

    #[test]
    fn identical_motions_have_zero_distance() {
        let m = motion(|t, j| (t * j) as f64 * 0.1, 5);
        let stats = mean_distance_distribution(&[&m, &m, &m], false).unwrap();
        assert_eq!(stats.len(), 5);
        assert!(stats.iter().all(|s| s.mean < 1e-12 && s.variance < 1e-24), "{stats:?}");
    }

    #[test]
    fn mirrored_pair_is_half_apart() {
        let a = motion(|t, j| 1.0 + (t + j) as f64 * 0.3, 4);
        let b = motion(|t, j| 1.0 - (t + j) as f64 * 0.3, 4);
        let stats = mean_distance_distribution(&[&a, &b], false).unwrap();
        for (t, s) in stats.iter().enumerate() {
            let full = distance(a[t].positions(), b[t].positions());
            assert!((s.mean - full / 2.0).abs() < 1e-9);
            assert!(s.variance.abs() < 1e-12);
        }
        let with_vel = mean_distance_distribution(&[&a, &b], true).unwrap();
        assert!(with_vel[1].mean > stats[1].mean);
    }

    #[test]
    fn length_mismatch_is_rejected() {
        let a = motion(|_, _| 0.0, 4);
        let b = motion(|_, _| 0.0, 3);
        assert!(mean_distance_distribution(&[&a, &b], false).is_err());
        assert!(mean_distance_distribution(&[], false).is_err());
    }

    #[test]
    fn band_windows_and_deviation() {
        let seq = motion(|t, j| ((t as f64) * 0.2 + j as f64).sin(), 40);
        let band = training_band(std::slice::from_ref(&seq), 10, 5, false).unwrap();
        assert_eq!(band.len(), 10);
        assert!(training_band(&[seq], 41, 5, false).is_err());
        let b = [DistanceStat {
            mean: 1.0,
            variance: 4.0,
        }; 3];
        let g = [DistanceStat {
            mean: 3.0,
            variance: 0.0,
        }; 3];
        assert_eq!(band_deviation(&g, &b, 2, 3).unwrap(), vec![(2, 1.0), (3, 1.0)]);
        assert!(band_deviation(&g, &b, 0, 3).is_err());
        assert!(band_deviation(&g, &b, 2, 4).is_err());
    }
}

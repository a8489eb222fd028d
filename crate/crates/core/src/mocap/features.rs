use super::RawClip;
use crate::error::{DfnError, Result};
use crate::kinematics::{cross3, mat_vec, rot_y, sub3, Vec3};

/// Translation velocity (x, y, z) plus yaw rate.
pub const VELOCITY_DIMS: usize = 4;

/// Per-frame pose-velocity vector: `3 * joints` facing-normalized
/// positions relative to the root ground projection, then
/// `(vx, vy, vz, omega_y)` in cm/frame and rad/frame.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseFeature(pub Vec<f64>);

impl PoseFeature {
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn joint_count(&self) -> usize {
        (self.0.len() - VELOCITY_DIMS) / 3
    }

    pub fn positions(&self) -> &[f64] {
        &self.0[..self.0.len() - VELOCITY_DIMS]
    }

    pub fn velocities(&self) -> &[f64] {
        &self.0[self.0.len() - VELOCITY_DIMS..]
    }

    pub fn joint(&self, j: usize) -> Vec3 {
        [self.0[3 * j], self.0[3 * j + 1], self.0[3 * j + 2]]
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}

/// Horizontal placement of the character: root ground position and heading.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GlobalTransform {
    pub position: Vec3,
    /// Radians about +Y, wrapped to (-pi, pi]; 0 faces +Z.
    pub heading: f64,
}

impl GlobalTransform {
    pub fn new(position: Vec3, heading: f64) -> Self {
        GlobalTransform {
            position,
            heading: wrap_angle(heading),
        }
    }

    /// Advances by one frame of facing-frame velocity `(vx, _, vz, omega)`.
    pub fn step(&self, velocity: &[f64]) -> GlobalTransform {
        let world = mat_vec(&rot_y(self.heading), [velocity[0], 0.0, velocity[2]]);
        GlobalTransform::new(
            [
                self.position[0] + world[0],
                self.position[1],
                self.position[2] + world[2],
            ],
            self.heading + velocity[3],
        )
    }

    /// Places facing-normalized joint positions into world space.
    pub fn place(&self, positions: &[f64]) -> Vec<Vec3> {
        let r = rot_y(self.heading);
        positions
            .chunks_exact(3)
            .map(|p| {
                let w = mat_vec(&r, [p[0], p[1], p[2]]);
                [
                    w[0] + self.position[0],
                    w[1] + self.position[1],
                    w[2] + self.position[2],
                ]
            })
            .collect()
    }
}

/// Wraps an angle to (-pi, pi].
pub fn wrap_angle(a: f64) -> f64 {
    use std::f64::consts::{PI, TAU};
    let mut w = a.rem_euclid(TAU);
    if w > PI {
        w -= TAU;
    }
    w
}

/// Heading of a world pose: the ground-projected hip axis crossed with
/// vertical, measured from +Z about +Y.
pub fn root_heading(world: &[Vec3], hips: (usize, usize), frame: usize) -> Result<f64> {
    let across = sub3(world[hips.0], world[hips.1]);
    let horizontal = [across[0], 0.0, across[2]];
    let forward = cross3(horizontal, [0.0, 1.0, 0.0]);
    let len = (forward[0] * forward[0] + forward[2] * forward[2]).sqrt();
    if !(len > 1e-9) {
        return Err(DfnError::DegenerateFacing { frame });
    }
    Ok(forward[0].atan2(forward[2]))
}

/// Converts world-space joint positions to pose features. Frame `t` takes
/// its velocities from the step `t -> t + 1`, so `frames - 1` features are
/// produced. Also returns the first frame's placement.
pub fn features_from_world(world: &[Vec<Vec3>], hips: (usize, usize)) -> Result<(Vec<PoseFeature>, GlobalTransform)> {
    if world.len() < 2 {
        return Err(DfnError::InvalidInput(format!(
            "feature extraction needs at least 2 frames, got {}",
            world.len()
        )));
    }
    let headings = world
        .iter()
        .enumerate()
        .map(|(f, w)| root_heading(w, hips, f))
        .collect::<Result<Vec<f64>>>()?;
    let mut out = Vec::with_capacity(world.len() - 1);
    for t in 0..world.len() - 1 {
        let root = world[t][0];
        let ground = [root[0], 0.0, root[2]];
        let inv = rot_y(-headings[t]);
        let mut v = Vec::with_capacity(3 * world[t].len() + VELOCITY_DIMS);
        for (j, p) in world[t].iter().enumerate() {
            let local = mat_vec(&inv, sub3(*p, ground));
            if j == 0 {
                // exact zeros for the reference joint
                v.extend_from_slice(&[0.0, local[1], 0.0]);
            } else {
                v.extend_from_slice(&local);
            }
        }
        let vel = mat_vec(&inv, sub3(world[t + 1][0], root));
        v.extend_from_slice(&vel);
        v.push(wrap_angle(headings[t + 1] - headings[t]));
        for x in &v {
            if !x.is_finite() {
                return Err(DfnError::NonFinite {
                    context: format!("feature extraction, frame {t}"),
                });
            }
        }
        out.push(PoseFeature(v));
    }
    let r0 = world[0][0];
    Ok((out, GlobalTransform::new([r0[0], 0.0, r0[2]], headings[0])))
}

/// Pose features of a clip plus its initial placement.
pub fn extract_features(clip: &RawClip) -> Result<(Vec<PoseFeature>, GlobalTransform)> {
    let hips = clip.skeleton.hip_indices()?;
    features_from_world(&clip.world_positions(), hips)
}

/// Integrates velocities from `initial` and returns world joint positions
/// for every feature frame.
pub fn reconstruct_global(features: &[PoseFeature], initial: GlobalTransform) -> Result<Vec<Vec<Vec3>>> {
    if features.is_empty() {
        return Err(DfnError::InvalidInput("no features to reconstruct".into()));
    }
    let mut transform = initial;
    let mut out = Vec::with_capacity(features.len());
    for (t, f) in features.iter().enumerate() {
        if !f.is_finite() {
            return Err(DfnError::NonFinite {
                context: format!("reconstruction input, frame {t}"),
            });
        }
        out.push(transform.place(f.positions()));
        transform = transform.step(f.velocities());
    }
    Ok(out)
}

/// Per-dimension normalization statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// Dimensions whose standard deviation was below `MIN_STD` and clamped to 1.
    pub clamped: Vec<bool>,
}

impl NormStats {
    pub const MIN_STD: f64 = 1e-6;

    pub fn compute(dataset: &[Vec<PoseFeature>]) -> Result<NormStats> {
        let total: usize = dataset.iter().map(Vec::len).sum();
        if total < 2 {
            return Err(DfnError::InvalidInput(format!(
                "normalization needs at least 2 frames, dataset has {total}"
            )));
        }
        let dim = dataset.iter().flatten().next().map(PoseFeature::dim).unwrap_or(0);
        let mut mean = vec![0.0; dim];
        for f in dataset.iter().flatten() {
            if f.dim() != dim {
                return Err(DfnError::InvalidInput("mixed feature dimensions".into()));
            }
            for (m, x) in mean.iter_mut().zip(&f.0) {
                *m += x;
            }
        }
        mean.iter_mut().for_each(|m| *m /= total as f64);
        let mut var = vec![0.0; dim];
        for f in dataset.iter().flatten() {
            for ((v, x), m) in var.iter_mut().zip(&f.0).zip(&mean) {
                *v += (x - m) * (x - m);
            }
        }
        let mut clamped = vec![false; dim];
        let std = var
            .iter()
            .zip(clamped.iter_mut())
            .map(|(v, c)| {
                let s = (v / total as f64).sqrt();
                if s < Self::MIN_STD {
                    *c = true;
                    1.0
                } else {
                    s
                }
            })
            .collect();
        Ok(NormStats { mean, std, clamped })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn normalize(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }

    pub fn denormalize(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(v, (m, s))| v * s + m)
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kinematics::add3;
    use crate::mocap::synth;

    /// Simple 3-joint body: root, left hip at +x, right hip at -x.
    fn body(root: Vec3, heading: f64) -> Vec<Vec3> {
        let r = rot_y(heading);
        let offsets = [[0.0, 0.0, 0.0], [10.0, -5.0, 0.0], [-10.0, -5.0, 0.0], [0.0, 20.0, 3.0]];
        offsets.iter().map(|o| add3(root, mat_vec(&r, *o))).collect()
    }

    #[test]
    fn stationary_clip_has_zero_velocity() {
        let world: Vec<Vec<Vec3>> = (0..5).map(|_| body([3.0, 90.0, -2.0], 0.4)).collect();
        let (feats, _) = features_from_world(&world, (1, 2)).unwrap();
        assert_eq!(feats.len(), 4);
        for f in &feats {
            assert!(f.velocities().iter().all(|v| v.abs() < 1e-12));
            assert_eq!(f.positions(), feats[0].positions());
        }
    }

    #[test]
    fn rigid_translation_velocity() {
        let world: Vec<Vec<Vec3>> = (0..6).map(|t| body([2.0 * t as f64, 90.0, 0.0], 0.0)).collect();
        let (feats, init) = features_from_world(&world, (1, 2)).unwrap();
        assert_eq!(init.heading, 0.0);
        for f in &feats {
            let v = f.velocities();
            assert!((v[0] - 2.0).abs() < 1e-12 && v[1].abs() < 1e-12 && v[2].abs() < 1e-12 && v[3].abs() < 1e-12);
        }
    }

    #[test]
    fn rotation_in_place() {
        let world: Vec<Vec<Vec3>> = (0..6).map(|t| body([0.0, 90.0, 0.0], 0.1 * t as f64)).collect();
        let (feats, _) = features_from_world(&world, (1, 2)).unwrap();
        for f in &feats {
            let v = f.velocities();
            assert!((v[3] - 0.1).abs() < 1e-12);
            assert!(v[..3].iter().all(|x| x.abs() < 1e-12));
            for (a, b) in f.positions().iter().zip(feats[0].positions()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn root_xz_exactly_zero() {
        let clip = synth::walking_clip(1.0, 30.0, 3);
        let (feats, _) = extract_features(&clip).unwrap();
        for f in &feats {
            assert_eq!(f.0[0], 0.0);
            assert_eq!(f.0[2], 0.0);
            assert_eq!(f.dim(), 76);
        }
    }

    #[test]
    fn degenerate_facing_reports_frame() {
        let mut world: Vec<Vec<Vec3>> = (0..4).map(|_| body([0.0, 90.0, 0.0], 0.0)).collect();
        world[2][1] = [0.0, 50.0, 0.0];
        world[2][2] = [0.0, 10.0, 0.0];
        let err = features_from_world(&world, (1, 2)).unwrap_err();
        assert!(matches!(err, DfnError::DegenerateFacing { frame: 2 }));
    }

    #[test]
    fn reconstruct_constant_velocity() {
        let mut v = vec![0.0; 3 * 3];
        v.extend_from_slice(&[1.0, 0.0, 0.0, 0.0]);
        let feats = vec![PoseFeature(v); 4];
        let out = reconstruct_global(&feats, GlobalTransform::new([5.0, 0.0, 0.0], 0.0)).unwrap();
        let xs: Vec<f64> = out.iter().map(|f| f[0][0]).collect();
        assert_eq!(xs, vec![5.0, 6.0, 7.0, 8.0]);
    }

    #[test]
    fn reconstruct_stationary_rotated() {
        let mut v = vec![0.0, 90.0, 0.0, 0.0, 10.0, 5.0];
        v.extend_from_slice(&[0.0; 4]);
        let feats = vec![PoseFeature(v); 3];
        let out = reconstruct_global(&feats, GlobalTransform::new([0.0; 3], std::f64::consts::FRAC_PI_2)).unwrap();
        for f in &out {
            assert_eq!(f, &out[0]);
            // +Z rotated by pi/2 about Y lands on +X
            assert!((f[1][0] - 5.0).abs() < 1e-12 && f[1][2].abs() < 1e-12);
        }
    }

    #[test]
    fn norm_stats_examples() {
        let seq = vec![PoseFeature(vec![1.0, 2.0, 3.0]); 4];
        let s = NormStats::compute(&[seq]).unwrap();
        assert_eq!(s.mean, vec![1.0, 2.0, 3.0]);
        assert_eq!(s.std, vec![1.0; 3]);
        assert!(s.clamped.iter().all(|c| *c));

        let s = NormStats::compute(&[vec![PoseFeature(vec![0.0]), PoseFeature(vec![2.0])]]).unwrap();
        assert_eq!((s.mean[0], s.std[0]), (1.0, 1.0));
        assert!(NormStats::compute(&[]).is_err());
    }

    #[test]
    fn wrap_angle_range() {
        use std::f64::consts::PI;
        assert_eq!(wrap_angle(PI), PI);
        assert!((wrap_angle(-PI) - PI).abs() < 1e-15);
        assert!((wrap_angle(3.0 * PI / 2.0) + PI / 2.0).abs() < 1e-12);
    }
}

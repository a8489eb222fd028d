//! Motion-capture ingestion: BVH parsing, resampling, the per-frame
//! pose-velocity feature representation and its inverse.

mod bvh;
mod export;
mod features;
mod io;
pub mod synth;

pub use bvh::{parse_bvh, read_bvh_file, write_bvh, BvhFrameWriter};
pub use export::motion_to_clip;
pub use features::{
    extract_features, features_from_world, reconstruct_global, root_heading, wrap_angle, GlobalTransform, NormStats,
    PoseFeature, VELOCITY_DIMS,
};
pub use io::{read_features, read_norm_stats, write_features, write_norm_stats, FEATURE_MAGIC};

use crate::error::{DfnError, Result};
use crate::kinematics::{self, mat_mul, Quaternion, Vec3};

/// Joint count of the canonical skeleton; features are `3 * 24 + 4 = 76`.
pub const CANONICAL_JOINTS: usize = 24;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Channel {
    Xposition,
    Yposition,
    Zposition,
    Xrotation,
    Yrotation,
    Zrotation,
}

impl Channel {
    pub fn parse(token: &str) -> Option<Channel> {
        Some(match token.to_ascii_lowercase().as_str() {
            "xposition" => Channel::Xposition,
            "yposition" => Channel::Yposition,
            "zposition" => Channel::Zposition,
            "xrotation" => Channel::Xrotation,
            "yrotation" => Channel::Yrotation,
            "zrotation" => Channel::Zrotation,
            _ => return None,
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            Channel::Xposition => "Xposition",
            Channel::Yposition => "Yposition",
            Channel::Zposition => "Zposition",
            Channel::Xrotation => "Xrotation",
            Channel::Yrotation => "Yrotation",
            Channel::Zrotation => "Zrotation",
        }
    }

    fn is_rotation(&self) -> bool {
        matches!(self, Channel::Xrotation | Channel::Yrotation | Channel::Zrotation)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Joint {
    pub name: String,
    pub parent: Option<usize>,
    /// Bone offset from the parent, in file units (centimeters).
    pub offset: Vec3,
    pub channels: Vec<Channel>,
    pub end_site: Option<Vec3>,
}

impl Joint {
    /// Joint with the export channel layout: six channels on the root,
    /// ZXY rotations elsewhere.
    pub fn new(name: &str, parent: Option<usize>, offset: Vec3) -> Self {
        let channels = if parent.is_none() {
            vec![
                Channel::Xposition,
                Channel::Yposition,
                Channel::Zposition,
                Channel::Zrotation,
                Channel::Xrotation,
                Channel::Yrotation,
            ]
        } else {
            vec![Channel::Zrotation, Channel::Xrotation, Channel::Yrotation]
        };
        Joint {
            name: name.to_string(),
            parent,
            offset,
            channels,
            end_site: None,
        }
    }

    /// Rotation channel order, e.g. `"ZXY"`.
    pub fn euler_order(&self) -> String {
        self.channels
            .iter()
            .filter(|c| c.is_rotation())
            .map(|c| &c.name()[..1])
            .collect()
    }
}

/// Joint hierarchy in topological order; the root is joint 0.
#[derive(Debug, Clone, PartialEq)]
pub struct Skeleton {
    joints: Vec<Joint>,
}

impl Skeleton {
    pub fn new(joints: Vec<Joint>) -> Result<Self> {
        if joints.is_empty() {
            return Err(DfnError::InvalidInput("skeleton has no joints".into()));
        }
        if joints[0].parent.is_some() {
            return Err(DfnError::InvalidInput("joint 0 must be the root".into()));
        }
        for (j, joint) in joints.iter().enumerate().skip(1) {
            match joint.parent {
                Some(p) if p < j => {}
                Some(p) => {
                    return Err(DfnError::InvalidInput(format!(
                        "joint {j} ({}) has parent {p}, not topologically ordered",
                        joint.name
                    )))
                }
                None => {
                    return Err(DfnError::InvalidInput(format!(
                        "joint {j} ({}) is a second root",
                        joint.name
                    )))
                }
            }
        }
        Ok(Skeleton { joints })
    }

    pub fn joints(&self) -> &[Joint] {
        &self.joints
    }

    pub fn len(&self) -> usize {
        self.joints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.joints.is_empty()
    }

    pub fn parents(&self) -> Vec<Option<usize>> {
        self.joints.iter().map(|j| j.parent).collect()
    }

    pub fn channel_count(&self) -> usize {
        self.joints.iter().map(|j| j.channels.len()).sum()
    }

    /// Dimension of a pose feature for this skeleton.
    pub fn feature_dim(&self) -> usize {
        3 * self.len() + VELOCITY_DIMS
    }

    pub fn children(&self, j: usize) -> impl Iterator<Item = usize> + '_ {
        self.joints
            .iter()
            .enumerate()
            .filter(move |(_, joint)| joint.parent == Some(j))
            .map(|(i, _)| i)
    }

    /// Indices of the (left, right) hip joints. Looks for conventional
    /// names first, then falls back to the two root children with the
    /// largest lateral separation.
    pub fn hip_indices(&self) -> Result<(usize, usize)> {
        let find = |side: &str| {
            let initial = side[..1].to_ascii_uppercase();
            self.joints.iter().position(|j| {
                let n = j.name.to_ascii_lowercase();
                // "LeftUpLeg", "left_hip", "l_thigh", "LHipJoint"
                let sided = n.starts_with(side)
                    || n.starts_with(&format!("{}_", &side[..1]))
                    || (j.name.starts_with(&initial) && j.name[1..].starts_with(|c: char| c.is_ascii_uppercase()));
                let hip = ["upleg", "hip", "thigh", "femur"].iter().any(|k| n.contains(k));
                sided && hip
            })
        };
        if let (Some(l), Some(r)) = (find("left"), find("right")) {
            return Ok((l, r));
        }
        let kids: Vec<usize> = self.children(0).collect();
        let mut best: Option<(usize, usize, f64)> = None;
        for &a in &kids {
            for &b in &kids {
                let d = self.joints[a].offset[0] - self.joints[b].offset[0];
                if d > best.map(|x| x.2).unwrap_or(0.0) {
                    best = Some((a, b, d));
                }
            }
        }
        best.map(|(l, r, _)| (l, r))
            .ok_or_else(|| DfnError::InvalidInput("cannot identify left/right hip joints".into()))
    }

    /// Joint names and offsets equal (used to detect mixed-skeleton datasets).
    pub fn same_structure(&self, other: &Skeleton) -> bool {
        self.len() == other.len()
            && self.joints.iter().zip(&other.joints).all(|(a, b)| {
                a.name == b.name && a.parent == b.parent && (0..3).all(|i| (a.offset[i] - b.offset[i]).abs() < 1e-6)
            })
    }

    /// Copy of this skeleton with the export channel layout.
    pub fn with_export_channels(&self) -> Skeleton {
        let joints = self
            .joints
            .iter()
            .map(|j| Joint {
                channels: Joint::new(&j.name, j.parent, j.offset).channels,
                ..j.clone()
            })
            .collect();
        Skeleton { joints }
    }
}

/// Parsed motion clip: one channel vector per frame, in skeleton channel order.
#[derive(Debug, Clone, PartialEq)]
pub struct RawClip {
    pub skeleton: Skeleton,
    pub frame_time: f64,
    pub frames: Vec<Vec<f64>>,
}

impl RawClip {
    pub fn fps(&self) -> f64 {
        1.0 / self.frame_time
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Root world translation and per-joint local rotations for `frame`.
    pub fn frame_pose(&self, frame: usize) -> (Vec3, Vec<Quaternion>) {
        let values = &self.frames[frame];
        let mut cursor = 0;
        let mut root = self.skeleton.joints[0].offset;
        let mut rotations = Vec::with_capacity(self.skeleton.len());
        for (j, joint) in self.skeleton.joints.iter().enumerate() {
            let mut m = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
            for ch in &joint.channels {
                let v = values[cursor];
                cursor += 1;
                match ch {
                    Channel::Xposition if j == 0 => root[0] += v,
                    Channel::Yposition if j == 0 => root[1] += v,
                    Channel::Zposition if j == 0 => root[2] += v,
                    Channel::Xrotation => m = mat_mul(&m, &kinematics::rot_x(v.to_radians())),
                    Channel::Yrotation => m = mat_mul(&m, &kinematics::rot_y(v.to_radians())),
                    Channel::Zrotation => m = mat_mul(&m, &kinematics::rot_z(v.to_radians())),
                    _ => {}
                }
            }
            rotations.push(kinematics::matrix_to_quat(&m));
        }
        (root, rotations)
    }

    /// World joint positions of every frame.
    pub fn world_positions(&self) -> Vec<Vec<Vec3>> {
        (0..self.len())
            .map(|f| {
                let (root, rots) = self.frame_pose(f);
                kinematics::forward_kinematics_world(&self.skeleton, &rots, root)
            })
            .collect()
    }

    /// Nearest-index decimation to `target_fps`; rotations are not interpolated.
    pub fn resample(&self, target_fps: f64) -> Result<RawClip> {
        if !(target_fps > 0.0) {
            return Err(DfnError::InvalidInput(format!(
                "target fps must be positive, got {target_fps}"
            )));
        }
        let source_fps = self.fps();
        if (source_fps - target_fps).abs() < 1e-3 * source_fps {
            return Ok(self.clone());
        }
        if target_fps > source_fps * (1.0 + 1e-3) {
            return Err(DfnError::InvalidInput(format!(
                "target fps {target_fps} exceeds source fps {source_fps:.4}"
            )));
        }
        let ratio = source_fps / target_fps;
        let last = self.len().saturating_sub(1);
        let count = ((last as f64 + 1e-9) / ratio).floor() as usize + 1;
        let frames = (0..count)
            .map(|i| {
                let idx = ((i as f64) * ratio).round() as usize;
                self.frames[idx.min(last)].clone()
            })
            .collect();
        Ok(RawClip {
            skeleton: self.skeleton.clone(),
            frame_time: 1.0 / target_fps,
            frames,
        })
    }
}

/// Convenience: `RawClip::resample`.
pub fn resample(clip: &RawClip, target_fps: f64) -> Result<RawClip> {
    clip.resample(target_fps)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn clip(fps: f64, n: usize) -> RawClip {
        let skeleton = Skeleton::new(vec![Joint::new("root", None, [0.0; 3])]).unwrap();
        RawClip {
            skeleton,
            frame_time: 1.0 / fps,
            frames: (0..n).map(|i| vec![i as f64, 0.0, 0.0, 0.0, 0.0, 0.0]).collect(),
        }
    }

    #[test]
    fn resample_integer_decimation() {
        let out = clip(120.0, 120).resample(30.0).unwrap();
        assert_eq!(out.len(), 30);
        assert!((out.frame_time - 1.0 / 30.0).abs() < 1e-15);
    }

    #[test]
    fn resample_identity() {
        let c = clip(30.0, 17);
        assert_eq!(c.resample(30.0).unwrap(), c);
    }

    #[test]
    fn resample_keeps_last_index() {
        let out = clip(120.0, 121).resample(30.0).unwrap();
        assert_eq!(out.len(), 31);
        let picked: Vec<f64> = out.frames.iter().map(|f| f[0]).collect();
        let expected: Vec<f64> = (0..31).map(|i| (4 * i) as f64).collect();
        assert_eq!(picked, expected);
    }

    #[test]
    fn resample_rejects_bad_rate() {
        assert!(clip(120.0, 10).resample(0.0).is_err());
        assert!(clip(120.0, 10).resample(-3.0).is_err());
        assert!(clip(30.0, 10).resample(60.0).is_err());
    }

    #[test]
    fn skeleton_rejects_bad_topology() {
        let bad = vec![
            Joint::new("root", None, [0.0; 3]),
            Joint::new("a", Some(2), [0.0; 3]),
            Joint::new("b", Some(0), [0.0; 3]),
        ];
        assert!(Skeleton::new(bad).is_err());
        let two_roots = vec![Joint::new("root", None, [0.0; 3]), Joint::new("x", None, [0.0; 3])];
        assert!(Skeleton::new(two_roots).is_err());
    }

    #[test]
    fn canonical_skeleton_hips() {
        let s = synth::canonical_skeleton();
        assert_eq!(s.len(), CANONICAL_JOINTS);
        assert_eq!(s.feature_dim(), 76);
        let (l, r) = s.hip_indices().unwrap();
        assert_eq!(s.joints()[l].name, "LeftUpLeg");
        assert_eq!(s.joints()[r].name, "RightUpLeg");
    }
}

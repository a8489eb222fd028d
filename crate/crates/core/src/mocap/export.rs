//! Conversion of decoded motion back into BVH channel values.

use super::{GlobalTransform, PoseFeature, RawClip, Skeleton};
use crate::error::{DfnError, Result};
use crate::kinematics::{mat_mul, matrix_to_euler_zxy, quat_to_matrix, rot_y, Quaternion, Vec3};

/// Builds a clip in the export channel layout (root translation plus ZXY
/// Euler angles in degrees). Each frame is placed by integrating the
/// feature velocities from `initial`; local rotations come from
/// `rotations`, whose root entry is relative to the facing direction.
/// Euler branches follow the previous frame so curves stay continuous.
pub fn motion_to_clip(
    skeleton: &Skeleton,
    rotations: &[Vec<Quaternion>],
    features: &[PoseFeature],
    initial: GlobalTransform,
    frame_time: f64,
) -> Result<RawClip> {
    if rotations.len() != features.len() {
        return Err(DfnError::InvalidInput(format!(
            "{} rotation frames for {} feature frames",
            rotations.len(),
            features.len()
        )));
    }
    let skeleton = skeleton.with_export_channels();
    let mut previous: Vec<Option<Vec3>> = vec![None; skeleton.len()];
    let mut transform = initial;
    let mut frames = Vec::with_capacity(features.len());
    for (t, (rots, feat)) in rotations.iter().zip(features).enumerate() {
        if rots.len() != skeleton.len() || feat.joint_count() != skeleton.len() {
            return Err(DfnError::InvalidInput(format!(
                "frame {t} does not match the {}-joint skeleton",
                skeleton.len()
            )));
        }
        if !feat.is_finite() || rots.iter().any(|q| !q.to_array().iter().all(|v| v.is_finite())) {
            return Err(DfnError::NonFinite {
                context: format!("export, frame {t}"),
            });
        }
        let root = transform.place(&feat.positions()[..3])[0];
        let mut values = Vec::with_capacity(skeleton.channel_count());
        for (j, joint) in skeleton.joints().iter().enumerate() {
            let mut m = quat_to_matrix(&rots[j]);
            if j == 0 {
                m = mat_mul(&rot_y(transform.heading), &m);
                values.extend((0..3).map(|k| root[k] - joint.offset[k]));
            }
            let euler = matrix_to_euler_zxy(&m, previous[j]);
            previous[j] = Some(euler);
            values.extend(euler.iter().map(|a| a.to_degrees()));
        }
        frames.push(values);
        transform = transform.step(feat.velocities());
    }
    Ok(RawClip {
        skeleton,
        frame_time,
        frames,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kinematics::{forward_kinematics, matrix_to_quat, norm3, sub3, transpose};
    use crate::mocap::{extract_features, parse_bvh, reconstruct_global, synth, write_bvh};

    /// Features, facing-relative rotations and placement of a clip.
    fn decompose(clip: &RawClip) -> (Vec<PoseFeature>, Vec<Vec<Quaternion>>, GlobalTransform) {
        let (features, initial) = extract_features(clip).unwrap();
        let mut transform = initial;
        let mut rotations = Vec::new();
        for (t, f) in features.iter().enumerate() {
            let (_, mut rots) = clip.frame_pose(t);
            let facing = transpose(&rot_y(transform.heading));
            rots[0] = matrix_to_quat(&mat_mul(&facing, &quat_to_matrix(&rots[0])));
            rotations.push(rots);
            transform = transform.step(f.velocities());
        }
        (features, rotations, initial)
    }

    #[test]
    fn export_reproduces_world_positions() {
        let clip = synth::walking_clip(2.0, 30.0, 3);
        let (features, rotations, initial) = decompose(&clip);
        let out = motion_to_clip(&clip.skeleton, &rotations, &features, initial, clip.frame_time).unwrap();
        let expect = reconstruct_global(&features, initial).unwrap();
        for (t, world) in out.world_positions().iter().enumerate() {
            for (a, b) in world.iter().zip(&expect[t]) {
                assert!(norm3(sub3(*a, *b)) < 1e-6, "frame {t}: {a:?} vs {b:?}");
            }
        }
        // rotations alone reproduce the facing-frame pose
        let fk = forward_kinematics(&clip.skeleton, &rotations[5]);
        let rel: Vec<f64> = features[5].positions().to_vec();
        for (j, (a, b)) in fk.chunks(3).zip(rel.chunks(3)).enumerate().skip(1) {
            let d = [a[0] - b[0], a[1] - (b[1] - rel[1]), a[2] - b[2]];
            assert!(norm3(d) < 1e-6, "joint {j}");
        }
    }

    #[test]
    fn text_round_trip_and_empty_motion() {
        let clip = synth::walking_clip(1.0, 30.0, 9);
        let (features, rotations, initial) = decompose(&clip);
        let out = motion_to_clip(&clip.skeleton, &rotations, &features, initial, clip.frame_time).unwrap();
        let text = write_bvh(&out);
        let back = parse_bvh(&text).unwrap();
        assert_eq!(back.len(), features.len());
        assert_eq!(write_bvh(&back), text);
        let empty = motion_to_clip(&clip.skeleton, &[], &[], initial, clip.frame_time).unwrap();
        let text = write_bvh(&empty);
        assert!(text.starts_with("HIERARCHY\nROOT "));
        let motion = &text[text.find("MOTION").unwrap()..];
        assert_eq!(motion, "MOTION\nFrames: 0\nFrame Time: 0.03333333\n");
        // ingestion refuses motion-less files by contract
        assert!(parse_bvh(&text).is_err());
    }

    #[test]
    fn mismatches_are_rejected() {
        let clip = synth::walking_clip(1.0, 30.0, 9);
        let (mut features, rotations, initial) = decompose(&clip);
        assert!(motion_to_clip(&clip.skeleton, &rotations[1..], &features, initial, 0.1).is_err());
        features[2].0[7] = f64::NAN;
        assert!(motion_to_clip(&clip.skeleton, &rotations, &features, initial, 0.1).is_err());
    }
}

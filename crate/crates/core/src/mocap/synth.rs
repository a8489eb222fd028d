//! Procedural walking clips on the canonical 24-joint skeleton.
//!
//! Used for smoke training and tests where no capture data is available.
//! Gait phase, speed and turning rate drift slowly so that the clip contains
//! a range of strides and headings rather than one repeated cycle.

use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Joint, RawClip, Skeleton};

/// 24-joint biped in centimeters, Y up, facing +Z, left side on +X.
pub fn canonical_skeleton() -> Skeleton {
    let spec: [(&str, Option<usize>, [f64; 3]); 24] = [
        ("Hips", None, [0.0, 0.0, 0.0]),
        ("LeftUpLeg", Some(0), [9.0, -6.0, 0.0]),
        ("LeftLeg", Some(1), [0.0, -42.0, 0.0]),
        ("LeftFoot", Some(2), [0.0, -41.0, 0.0]),
        ("LeftToeBase", Some(3), [0.0, -4.0, 12.0]),
        ("RightUpLeg", Some(0), [-9.0, -6.0, 0.0]),
        ("RightLeg", Some(5), [0.0, -42.0, 0.0]),
        ("RightFoot", Some(6), [0.0, -41.0, 0.0]),
        ("RightToeBase", Some(7), [0.0, -4.0, 12.0]),
        ("Spine", Some(0), [0.0, 10.0, 0.0]),
        ("Spine1", Some(9), [0.0, 12.0, 0.0]),
        ("Spine2", Some(10), [0.0, 12.0, 0.0]),
        ("Neck", Some(11), [0.0, 14.0, 0.0]),
        ("Head", Some(12), [0.0, 10.0, 2.0]),
        ("LeftShoulder", Some(11), [4.0, 10.0, 0.0]),
        ("LeftArm", Some(14), [14.0, 0.0, 0.0]),
        ("LeftForeArm", Some(15), [28.0, 0.0, 0.0]),
        ("LeftHand", Some(16), [24.0, 0.0, 0.0]),
        ("LeftHandIndex", Some(17), [8.0, 0.0, 0.0]),
        ("RightShoulder", Some(11), [-4.0, 10.0, 0.0]),
        ("RightArm", Some(19), [-14.0, 0.0, 0.0]),
        ("RightForeArm", Some(20), [-28.0, 0.0, 0.0]),
        ("RightHand", Some(21), [-24.0, 0.0, 0.0]),
        ("RightHandIndex", Some(22), [-8.0, 0.0, 0.0]),
    ];
    let mut joints: Vec<Joint> = spec
        .iter()
        .map(|(name, parent, offset)| Joint::new(name, *parent, *offset))
        .collect();
    for (leaf, site) in [
        (4, [0.0, 0.0, 4.0]),
        (8, [0.0, 0.0, 4.0]),
        (13, [0.0, 12.0, 0.0]),
        (18, [4.0, 0.0, 0.0]),
        (23, [-4.0, 0.0, 0.0]),
    ] {
        joints[leaf].end_site = Some(site);
    }
    Skeleton::new(joints).expect("canonical skeleton is well formed")
}

struct GaitStyle {
    phase0: f64,
    turn_phase: f64,
    tempo_phase: f64,
    stride_amp: f64,
    arm_amp: f64,
    turn_amp: f64,
}

/// Walking clip of `seconds` duration sampled at `fps`, in the BVH channel
/// layout of [`canonical_skeleton`]. `seed` varies style and drift phases.
pub fn walking_clip(seconds: f64, fps: f64, seed: u64) -> RawClip {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let style = GaitStyle {
        phase0: rng.random_range(0.0..TAU),
        turn_phase: rng.random_range(0.0..TAU),
        tempo_phase: rng.random_range(0.0..TAU),
        stride_amp: rng.random_range(0.9..1.1),
        arm_amp: rng.random_range(0.8..1.2),
        turn_amp: rng.random_range(0.25..0.45),
    };
    let skeleton = canonical_skeleton();
    let n = (seconds * fps).round() as usize;
    let dt = 1.0 / fps;
    let mut phase = style.phase0;
    let mut heading: f64 = 0.0;
    let mut pos = [0.0, 0.0, 0.0];
    let mut frames = Vec::with_capacity(n);
    for i in 0..n {
        let t = i as f64 * dt;
        let tempo = 0.95 + 0.15 * (TAU * t / 7.3 + style.tempo_phase).sin();
        // stride length swells and shrinks over a few seconds
        let amp = style.stride_amp * (1.0 + 0.2 * (TAU * t / 4.1 + style.turn_phase).sin());
        frames.push(pose_channels(phase, heading, pos, amp, style.arm_amp));

        let speed = 125.0 * tempo * amp;
        pos[0] += heading.sin() * speed * dt;
        pos[2] += heading.cos() * speed * dt;
        heading += style.turn_amp * (TAU * t / 9.0 + style.turn_phase).sin() * dt;
        phase += TAU * tempo * dt;
    }
    RawClip {
        skeleton,
        frame_time: dt,
        frames,
    }
}

fn pose_channels(phase: f64, heading: f64, pos: [f64; 3], amp: f64, arm_amp: f64) -> Vec<f64> {
    let s = phase.sin();
    let knee = |p: f64| 5.0 + 55.0 * (0.5 + 0.5 * (p + 1.9).sin()).powi(3);
    // Euler triples are (z, x, y) degrees, matching the ZXY channel order.
    let mut joints = vec![[0.0; 3]; 24];
    joints[0] = [3.0 * s, 4.0, heading.to_degrees()];
    joints[1] = [0.0, -26.0 * amp * s, 0.0];
    joints[2] = [0.0, knee(phase), 0.0];
    joints[3] = [0.0, -12.0 * (phase + 0.6).sin(), 0.0];
    joints[4] = [0.0, 8.0 * (phase - 0.4).sin().max(0.0), 0.0];
    joints[5] = [0.0, 26.0 * amp * s, 0.0];
    joints[6] = [0.0, knee(phase + std::f64::consts::PI), 0.0];
    joints[7] = [0.0, 12.0 * (phase + 0.6).sin(), 0.0];
    joints[8] = [0.0, 8.0 * (-(phase - 0.4).sin()).max(0.0), 0.0];
    joints[9] = [0.0, 2.0, 5.0 * s];
    joints[10] = [-1.5 * s, 1.0, 3.0 * s];
    joints[11] = [0.0, 1.0, 2.0 * s];
    joints[12] = [0.0, -3.0 + 2.0 * (2.0 * phase).cos(), -3.0 * s];
    joints[13] = [0.0, 4.0, -2.0 * s];
    joints[15] = [-75.0, 0.0, 22.0 * arm_amp * amp * s];
    joints[16] = [0.0, 0.0, 15.0 + 10.0 * arm_amp * s.max(0.0)];
    joints[20] = [75.0, 0.0, 22.0 * arm_amp * amp * s];
    joints[21] = [0.0, 0.0, -15.0 + 10.0 * arm_amp * s.min(0.0)];

    let height = 92.0 + 1.8 * (2.0 * phase).cos();
    let mut out = Vec::with_capacity(6 + 3 * 24);
    out.extend_from_slice(&[pos[0], height, pos[2]]);
    for j in joints {
        out.extend_from_slice(&j);
    }
    out
}

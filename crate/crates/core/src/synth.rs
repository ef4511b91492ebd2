//! Deterministic synthetic skeleton sessions.
//!
//! Each activity drives a few limb joints of a standing body along periodic
//! paths. A seed jitters phase, amplitude and tempo per session and adds small
//! per-frame tracking noise, so sessions of one activity form a cluster.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stream::{JointId, Point3, Session, SkeletonFrame, JOINT_COUNT};

/// Rest pose in meters: x to the user's left, y up, z away from the camera.
const REST_POSE: [Point3; JOINT_COUNT] = [
    [0.0, 0.75, 2.5],    // head
    [0.0, 0.55, 2.5],    // neck
    [0.0, 0.30, 2.5],    // torso
    [0.0, 0.05, 2.5],    // waist
    [0.0, 0.50, 2.5],    // collar
    [0.20, 0.50, 2.5],   // left shoulder
    [0.25, 0.22, 2.5],   // left elbow
    [0.27, -0.02, 2.5],  // left wrist
    [0.28, -0.10, 2.5],  // left hand
    [-0.20, 0.50, 2.5],  // right shoulder
    [-0.25, 0.22, 2.5],  // right elbow
    [-0.27, -0.02, 2.5], // right wrist
    [-0.28, -0.10, 2.5], // right hand
    [0.10, 0.0, 2.5],    // left hip
    [0.11, -0.45, 2.5],  // left knee
    [0.12, -0.90, 2.5],  // left ankle
    [-0.10, 0.0, 2.5],   // right hip
    [-0.11, -0.45, 2.5], // right knee
    [-0.12, -0.90, 2.5], // right ankle
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activity {
    Stationary,
    BrushingTeeth,
    Eating,
    Drinking,
    Dressing,
    WashingHands,
    Wiping,
    Waving,
    Combing,
    Stretching,
    Walking,
}

impl Activity {
    pub const ALL: [Activity; 11] = [
        Activity::Stationary,
        Activity::BrushingTeeth,
        Activity::Eating,
        Activity::Drinking,
        Activity::Dressing,
        Activity::WashingHands,
        Activity::Wiping,
        Activity::Waving,
        Activity::Combing,
        Activity::Stretching,
        Activity::Walking,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Activity::Stationary => "stationary",
            Activity::BrushingTeeth => "brushing_teeth",
            Activity::Eating => "eating",
            Activity::Drinking => "drinking",
            Activity::Dressing => "dressing",
            Activity::WashingHands => "washing_hands",
            Activity::Wiping => "wiping",
            Activity::Waving => "waving",
            Activity::Combing => "combing",
            Activity::Stretching => "stretching",
            Activity::Walking => "walking",
        }
    }

    /// Moving joints: (joint, center offset from rest, amplitude per axis, phase lag).
    fn motions(self) -> Vec<(&'static str, Point3, Point3, f64)> {
        use std::f64::consts::PI;
        match self {
            Activity::Stationary => vec![],
            Activity::BrushingTeeth => vec![
                ("right_hand", [0.22, 0.78, -0.15], [0.04, 0.01, 0.0], 0.0),
                ("right_wrist", [0.18, 0.68, -0.12], [0.035, 0.01, 0.0], 0.0),
                ("right_elbow", [0.05, 0.20, -0.05], [0.02, 0.0, 0.0], 0.0),
            ],
            Activity::Eating => vec![
                ("right_hand", [0.12, 0.40, -0.20], [0.0, 0.25, 0.05], 0.0),
                ("right_wrist", [0.10, 0.34, -0.16], [0.0, 0.20, 0.04], 0.0),
                ("right_elbow", [0.0, 0.10, -0.10], [0.0, 0.05, 0.0], 0.0),
            ],
            Activity::Drinking => vec![
                ("left_hand", [-0.12, 0.60, -0.20], [0.0, 0.15, 0.0], 0.0),
                ("left_wrist", [-0.10, 0.52, -0.16], [0.0, 0.12, 0.0], 0.0),
                ("head", [0.0, 0.0, 0.0], [0.0, 0.02, 0.03], 0.3),
            ],
            Activity::Dressing => vec![
                ("left_hand", [-0.05, 0.50, 0.0], [0.10, 0.35, 0.0], 0.0),
                ("right_hand", [0.05, 0.50, 0.0], [0.10, 0.35, 0.0], PI),
                ("left_elbow", [0.05, 0.20, 0.0], [0.05, 0.15, 0.0], 0.0),
                ("right_elbow", [-0.05, 0.20, 0.0], [0.05, 0.15, 0.0], PI),
            ],
            Activity::WashingHands => vec![
                ("left_hand", [-0.20, 0.10, -0.25], [0.05, 0.02, 0.02], 0.0),
                ("right_hand", [0.20, 0.10, -0.25], [0.05, 0.02, 0.02], PI),
                ("left_wrist", [-0.17, 0.10, -0.20], [0.04, 0.01, 0.0], 0.0),
                ("right_wrist", [0.17, 0.10, -0.20], [0.04, 0.01, 0.0], PI),
            ],
            Activity::Wiping => vec![
                ("right_hand", [-0.10, 0.10, -0.35], [0.30, 0.0, 0.05], 0.0),
                ("right_wrist", [-0.08, 0.12, -0.30], [0.25, 0.0, 0.04], 0.0),
                ("right_elbow", [-0.05, 0.05, -0.15], [0.10, 0.0, 0.0], 0.0),
                ("torso", [0.0, 0.0, 0.0], [0.03, 0.0, 0.0], 0.0),
            ],
            Activity::Waving => vec![
                ("right_hand", [-0.15, 1.0, 0.0], [0.15, 0.02, 0.0], 0.0),
                ("right_wrist", [-0.13, 0.90, 0.0], [0.12, 0.02, 0.0], 0.0),
                ("right_elbow", [-0.10, 0.45, 0.0], [0.04, 0.0, 0.0], 0.0),
            ],
            Activity::Combing => vec![
                ("left_hand", [-0.10, 0.95, 0.0], [0.06, 0.08, 0.04], 0.0),
                ("left_wrist", [-0.08, 0.85, 0.0], [0.05, 0.07, 0.03], 0.0),
                ("left_elbow", [0.10, 0.45, 0.0], [0.02, 0.03, 0.0], 0.0),
            ],
            Activity::Stretching => vec![
                ("left_hand", [0.10, 0.60, 0.0], [0.20, 0.45, 0.0], 0.0),
                ("right_hand", [-0.10, 0.60, 0.0], [0.20, 0.45, 0.0], 0.0),
                ("left_elbow", [0.05, 0.30, 0.0], [0.10, 0.20, 0.0], 0.0),
                ("right_elbow", [-0.05, 0.30, 0.0], [0.10, 0.20, 0.0], 0.0),
                ("waist", [0.0, 0.0, 0.0], [0.0, 0.02, 0.0], 0.0),
            ],
            Activity::Walking => vec![
                ("left_knee", [0.0, 0.0, 0.0], [0.0, 0.05, 0.15], 0.0),
                ("right_knee", [0.0, 0.0, 0.0], [0.0, 0.05, 0.15], PI),
                ("left_ankle", [0.0, 0.0, 0.0], [0.0, 0.08, 0.30], 0.0),
                ("right_ankle", [0.0, 0.0, 0.0], [0.0, 0.08, 0.30], PI),
                ("left_hand", [0.0, 0.0, 0.0], [0.0, 0.02, 0.15], PI),
                ("right_hand", [0.0, 0.0, 0.0], [0.0, 0.02, 0.15], 0.0),
            ],
        }
    }

    /// Cycles per second.
    fn frequency(self) -> f64 {
        match self {
            Activity::Stationary => 0.0,
            Activity::BrushingTeeth => 2.5,
            Activity::Eating => 0.5,
            Activity::Drinking => 0.3,
            Activity::Dressing => 0.4,
            Activity::WashingHands => 1.5,
            Activity::Wiping => 0.8,
            Activity::Waving => 1.8,
            Activity::Combing => 1.2,
            Activity::Stretching => 0.25,
            Activity::Walking => 0.9,
        }
    }
}

impl fmt::Display for Activity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Activity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Activity::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| {
                let known: Vec<&str> = Activity::ALL.iter().map(|a| a.name()).collect();
                Error::invalid(format!(
                    "unknown activity {s:?}; known: {}",
                    known.join(", ")
                ))
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub fps: f64,
    pub frames: usize,
    /// Standard deviation of per-frame joint noise, meters.
    pub noise: f64,
    /// Relative spread of the per-session amplitude and tempo jitter.
    pub jitter: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            fps: 30.0,
            frames: 300,
            noise: 0.002,
            jitter: 0.05,
        }
    }
}

/// Generates one session; identical inputs give identical frames.
pub fn synth_session(activity: Activity, config: &SynthConfig, seed: u64) -> Result<Session> {
    if !(config.fps.is_finite() && config.fps > 0.0) {
        return Err(Error::invalid(format!(
            "fps must be positive, got {}",
            config.fps
        )));
    }
    if !(config.noise >= 0.0 && config.jitter >= 0.0 && config.jitter < 1.0) {
        return Err(Error::invalid("noise must be >= 0 and jitter in [0, 1)"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let motions: Vec<(usize, Point3, Point3, f64)> = activity
        .motions()
        .into_iter()
        .map(|(name, c, a, lag)| {
            let j = JointId::from_name(name).expect("joint name").index();
            (j, c, a, lag)
        })
        .collect();
    let phase = rng.random_range(0.0..std::f64::consts::TAU);
    let tempo = 1.0 + rng.random_range(-config.jitter..=config.jitter);
    let gain = 1.0 + rng.random_range(-config.jitter..=config.jitter);
    let omega = std::f64::consts::TAU * activity.frequency() * tempo;
    let noise = (config.noise > 0.0).then(|| Normal::new(0.0, config.noise).expect("finite noise"));

    let mut frames = Vec::with_capacity(config.frames);
    for i in 0..config.frames {
        let t = i as f64 / config.fps;
        let mut joints = REST_POSE;
        for &(j, center, amp, lag) in &motions {
            let w = (omega * t + phase - lag).sin();
            let w2 = (omega * t + phase - lag).cos();
            for d in 0..3 {
                // x and z trace an ellipse with y so paths are not degenerate lines
                let wave = if d == 1 { w } else { w2 };
                joints[j][d] += center[d] + gain * amp[d] * wave;
            }
        }
        if let Some(n) = &noise {
            for p in joints.iter_mut() {
                for v in p.iter_mut() {
                    *v += n.sample(&mut rng);
                }
            }
        }
        frames.push(SkeletonFrame::new(t, joints));
    }
    Ok(Session {
        fps: config.fps,
        frames,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::motion::{average_motion, motion_embedding};

    #[test]
    fn deterministic() {
        let c = SynthConfig::default();
        let a = synth_session(Activity::Eating, &c, 3).unwrap();
        let b = synth_session(Activity::Eating, &c, 3).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, synth_session(Activity::Eating, &c, 4).unwrap());
    }

    #[test]
    fn stationary_without_noise_does_not_move() {
        let c = SynthConfig {
            noise: 0.0,
            ..SynthConfig::default()
        };
        let s = synth_session(Activity::Stationary, &c, 0).unwrap();
        assert_eq!(average_motion(&motion_embedding(&s.frames)), 0.0);
    }

    #[test]
    fn names_round_trip() {
        for a in Activity::ALL {
            assert_eq!(a.name().parse::<Activity>().unwrap(), a);
        }
        assert!("juggling".parse::<Activity>().is_err());
    }

    #[test]
    fn frames_validate() {
        let s = synth_session(Activity::Stretching, &SynthConfig::default(), 9).unwrap();
        for (i, f) in s.frames.iter().enumerate() {
            f.validate(i).unwrap();
        }
    }
}

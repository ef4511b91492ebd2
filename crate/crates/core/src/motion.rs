//! Per-joint motion embedding and the ADL / non-ADL motion gate.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stream::{SampleWindow, SkeletonFrame, JOINT_COUNT};

/// Cumulative Euclidean path length of each joint over a window, in meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MotionEmbedding {
    pub per_joint: [f64; JOINT_COUNT],
}

impl MotionEmbedding {
    pub fn zero() -> Self {
        MotionEmbedding {
            per_joint: [0.0; JOINT_COUNT],
        }
    }

    /// Mean displacement over all joints.
    pub fn average(&self) -> f64 {
        average_motion(self)
    }
}

/// Sums the consecutive joint displacements over the frames.
///
/// A window of `n` frames contributes `n - 1` differences per joint.
pub fn motion_embedding(frames: &[SkeletonFrame]) -> MotionEmbedding {
    let mut per_joint = [0.0; JOINT_COUNT];
    for pair in frames.windows(2) {
        for (j, acc) in per_joint.iter_mut().enumerate() {
            *acc += distance(&pair[0].joints[j], &pair[1].joints[j]);
        }
    }
    MotionEmbedding { per_joint }
}

pub fn compute_motion_embedding(window: &SampleWindow) -> Result<MotionEmbedding> {
    window.validate()?;
    Ok(motion_embedding(&window.frames))
}

fn distance(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let dx = b[0] - a[0];
    let dy = b[1] - a[1];
    let dz = b[2] - a[2];
    (dx * dx + dy * dy + dz * dz).sqrt()
}

pub fn average_motion(m: &MotionEmbedding) -> f64 {
    m.per_joint.iter().sum::<f64>() / JOINT_COUNT as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CalibrationConfig {
    /// Percentiles on a 0..=100 scale.
    pub percentile_lo: f64,
    pub percentile_hi: f64,
    pub margin_lo: f64,
    pub margin_hi: f64,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        CalibrationConfig {
            percentile_lo: 1.0,
            percentile_hi: 99.0,
            margin_lo: 0.9,
            margin_hi: 1.1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub sample_count: usize,
    pub percentile_lo: f64,
    pub percentile_hi: f64,
    pub margin_lo: f64,
    pub margin_hi: f64,
    /// Set when the distribution has a single sample.
    #[serde(default)]
    pub degenerate: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GateThresholds {
    pub m_min: f64,
    pub m_max: f64,
    pub calibration: Calibration,
}

impl GateThresholds {
    /// Thresholds set by hand rather than calibrated.
    pub fn fixed(m_min: f64, m_max: f64) -> Result<Self> {
        let th = GateThresholds {
            m_min,
            m_max,
            calibration: Calibration {
                sample_count: 0,
                percentile_lo: 0.0,
                percentile_hi: 100.0,
                margin_lo: 1.0,
                margin_hi: 1.0,
                degenerate: false,
            },
        };
        th.validate()?;
        Ok(th)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.m_min.is_finite() && self.m_max.is_finite())
            || self.m_min < 0.0
            || self.m_min > self.m_max
        {
            return Err(Error::invalid(format!(
                "gate thresholds must satisfy 0 <= m_min <= m_max, got ({}, {})",
                self.m_min, self.m_max
            )));
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let th: GateThresholds = serde_json::from_str(&text)?;
        th.validate()?;
        Ok(th)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}

/// Linear-interpolation percentile (`p` in 0..=100) of unsorted data.
pub fn percentile(values: &[f64], p: f64) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    percentile_sorted(&sorted, p)
}

pub(crate) fn percentile_sorted(sorted: &[f64], p: f64) -> f64 {
    debug_assert!(!sorted.is_empty());
    let rank = (p / 100.0).clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    let frac = rank - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

pub fn calibrate_thresholds(
    averages: &[f64],
    config: &CalibrationConfig,
) -> Result<GateThresholds> {
    if averages.is_empty() {
        return Err(Error::invalid(
            "cannot calibrate motion gate from zero samples",
        ));
    }
    if let Some(bad) = averages.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
        return Err(Error::invalid(format!(
            "motion averages must be finite and nonnegative, got {bad}"
        )));
    }
    let ok_pct = |p: f64| (0.0..=100.0).contains(&p);
    if !ok_pct(config.percentile_lo)
        || !ok_pct(config.percentile_hi)
        || config.percentile_lo > config.percentile_hi
    {
        return Err(Error::invalid(
            "calibration percentiles must satisfy 0 <= lo <= hi <= 100",
        ));
    }
    if !(config.margin_lo >= 0.0 && config.margin_hi >= 0.0) {
        return Err(Error::invalid("calibration margins must be nonnegative"));
    }

    let mut sorted = averages.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let th = GateThresholds {
        m_min: config.margin_lo * percentile_sorted(&sorted, config.percentile_lo),
        m_max: config.margin_hi * percentile_sorted(&sorted, config.percentile_hi),
        calibration: Calibration {
            sample_count: averages.len(),
            percentile_lo: config.percentile_lo,
            percentile_hi: config.percentile_hi,
            margin_lo: config.margin_lo,
            margin_hi: config.margin_hi,
            degenerate: averages.len() == 1,
        },
    };
    th.validate()?;
    Ok(th)
}

/// `true` for ADL motion: strictly between the two thresholds.
pub fn classify_motion(m: &MotionEmbedding, th: &GateThresholds) -> bool {
    let avg = average_motion(m);
    th.m_min < avg && avg < th.m_max
}

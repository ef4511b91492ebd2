//! Skeleton frame ingestion and rolling window sampling.
//!
//! A [`WindowSampler`] keeps every `sample_stride`-th accepted input frame and,
//! once `window_len` samples are retained, emits a [`SampleWindow`] holding the
//! most recent `window_len` samples every `emit_every` retained samples.
//! Media references travel with the frames untouched.

use std::collections::VecDeque;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const JOINT_COUNT: usize = 19;

/// Joint names in NuiTrack order, restricted to the 19 tracked joints.
pub const JOINT_NAMES: [&str; JOINT_COUNT] = [
    "head",
    "neck",
    "torso",
    "waist",
    "collar",
    "left_shoulder",
    "left_elbow",
    "left_wrist",
    "left_hand",
    "right_shoulder",
    "right_elbow",
    "right_wrist",
    "right_hand",
    "left_hip",
    "left_knee",
    "left_ankle",
    "right_hip",
    "right_knee",
    "right_ankle",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct JointId(u8);

impl JointId {
    pub fn new(index: usize) -> Option<Self> {
        (index < JOINT_COUNT).then_some(JointId(index as u8))
    }

    pub fn from_name(name: &str) -> Option<Self> {
        JOINT_NAMES
            .iter()
            .position(|n| *n == name)
            .map(|i| JointId(i as u8))
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }

    pub fn name(self) -> &'static str {
        JOINT_NAMES[self.index()]
    }

    pub fn all() -> impl Iterator<Item = JointId> {
        (0..JOINT_COUNT).map(|i| JointId(i as u8))
    }
}

impl fmt::Display for JointId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

pub type Point3 = [f64; 3];

/// One tracked skeleton at one instant. Coordinates are meters in the camera frame.
#[derive(Debug, Clone, PartialEq)]
pub struct SkeletonFrame {
    pub timestamp: f64,
    pub joints: [Point3; JOINT_COUNT],
    pub confidence: Option<[f64; JOINT_COUNT]>,
    /// Opaque reference to the matching video frame / still image, if any.
    pub media: Option<String>,
}

impl SkeletonFrame {
    pub fn new(timestamp: f64, joints: [Point3; JOINT_COUNT]) -> Self {
        SkeletonFrame {
            timestamp,
            joints,
            confidence: None,
            media: None,
        }
    }

    pub fn joint(&self, id: JointId) -> Point3 {
        self.joints[id.index()]
    }

    /// Checks finiteness of every coordinate and the confidence range.
    pub fn validate(&self, frame: usize) -> Result<()> {
        if !self.timestamp.is_finite() {
            return Err(Error::InvalidFrame {
                frame,
                reason: format!("non-finite timestamp {}", self.timestamp),
            });
        }
        for (j, p) in self.joints.iter().enumerate() {
            if p.iter().any(|c| !c.is_finite()) {
                return Err(Error::InvalidFrame {
                    frame,
                    reason: format!(
                        "joint {} ({}) has a non-finite coordinate",
                        j, JOINT_NAMES[j]
                    ),
                });
            }
        }
        if let Some(conf) = &self.confidence {
            if let Some(j) = conf.iter().position(|c| !(0.0..=1.0).contains(c)) {
                return Err(Error::InvalidFrame {
                    frame,
                    reason: format!("confidence of joint {} outside [0, 1]", j),
                });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    /// Input frame rate in frames per second.
    pub input_rate: f64,
    pub sample_stride: usize,
    pub window_len: usize,
    pub emit_every: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            input_rate: 30.0,
            sample_stride: 6,
            window_len: 16,
            emit_every: 1,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.input_rate.is_finite() && self.input_rate > 0.0) {
            return Err(Error::invalid("sampler input_rate must be positive"));
        }
        if self.sample_stride == 0 || self.window_len == 0 || self.emit_every == 0 {
            return Err(Error::invalid(
                "sampler sample_stride, window_len and emit_every must be positive",
            ));
        }
        Ok(())
    }

    /// Retained samples per second of input.
    pub fn sample_rate(&self) -> f64 {
        self.input_rate / self.sample_stride as f64
    }
}

/// The unit of classification: `window_len` time-aligned retained samples.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleWindow {
    pub frames: Vec<SkeletonFrame>,
    /// Index of each frame among the accepted input frames.
    pub input_indices: Vec<u64>,
    pub video_refs: Option<Vec<String>>,
    pub still_ref: Option<String>,
    pub window_index: u64,
}

impl SampleWindow {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Timestamp of the newest frame.
    pub fn end_time(&self) -> f64 {
        self.frames.last().map_or(0.0, |f| f.timestamp)
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames.len() < 2 {
            return Err(Error::invalid(format!(
                "window {} has {} frame(s), at least 2 required",
                self.window_index,
                self.frames.len()
            )));
        }
        for (i, f) in self.frames.iter().enumerate() {
            f.validate(i)?;
        }
        for pair in self.frames.windows(2) {
            if pair[1].timestamp <= pair[0].timestamp {
                return Err(Error::NonMonotoneTimestamp {
                    previous: pair[0].timestamp,
                    current: pair[1].timestamp,
                });
            }
        }
        Ok(())
    }
}

/// Single-owner rolling window state.
#[derive(Debug, Clone)]
pub struct WindowSampler {
    config: SamplerConfig,
    accepted: u64,
    retained_total: u64,
    emitted: u64,
    last_timestamp: Option<f64>,
    buffer: VecDeque<(u64, SkeletonFrame)>,
}

impl WindowSampler {
    pub fn new(config: SamplerConfig) -> Result<Self> {
        config.validate()?;
        Ok(WindowSampler {
            config,
            accepted: 0,
            retained_total: 0,
            emitted: 0,
            last_timestamp: None,
            buffer: VecDeque::with_capacity(config.window_len),
        })
    }

    pub fn config(&self) -> &SamplerConfig {
        &self.config
    }

    /// Number of input frames accepted so far.
    pub fn accepted(&self) -> u64 {
        self.accepted
    }

    /// Feeds one frame. Rejected frames leave the state untouched.
    pub fn push_frame(&mut self, frame: SkeletonFrame) -> Result<Option<SampleWindow>> {
        frame.validate(self.accepted as usize)?;
        if let Some(previous) = self.last_timestamp {
            if frame.timestamp <= previous {
                return Err(Error::NonMonotoneTimestamp {
                    previous,
                    current: frame.timestamp,
                });
            }
        }
        self.last_timestamp = Some(frame.timestamp);
        let index = self.accepted;
        self.accepted += 1;

        if !index.is_multiple_of(self.config.sample_stride as u64) {
            return Ok(None);
        }
        if self.buffer.len() == self.config.window_len {
            self.buffer.pop_front();
        }
        self.buffer.push_back((index, frame));
        self.retained_total += 1;

        let window_len = self.config.window_len as u64;
        if self.retained_total < window_len
            || !(self.retained_total - window_len).is_multiple_of(self.config.emit_every as u64)
        {
            return Ok(None);
        }
        Ok(Some(self.snapshot()))
    }

    fn snapshot(&mut self) -> SampleWindow {
        let frames: Vec<SkeletonFrame> = self.buffer.iter().map(|(_, f)| f.clone()).collect();
        let input_indices = self.buffer.iter().map(|(i, _)| *i).collect();
        let video_refs = frames
            .iter()
            .map(|f| f.media.clone())
            .collect::<Option<Vec<_>>>();
        let still_ref = frames.last().and_then(|f| f.media.clone());
        let window = SampleWindow {
            frames,
            input_indices,
            video_refs,
            still_ref,
            window_index: self.emitted,
        };
        self.emitted += 1;
        window
    }
}

/// Runs a whole frame sequence through a fresh sampler.
pub fn sample_windows(
    frames: impl IntoIterator<Item = SkeletonFrame>,
    config: SamplerConfig,
) -> Result<Vec<SampleWindow>> {
    let mut sampler = WindowSampler::new(config)?;
    let mut out = Vec::new();
    for frame in frames {
        if let Some(w) = sampler.push_frame(frame)? {
            out.push(w);
        }
    }
    Ok(out)
}

pub const SESSION_FORMAT: &str = "adlsense-session";
pub const SESSION_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SessionHeader {
    pub format: String,
    pub version: u64,
    pub fps: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct FrameRecord {
    t: f64,
    joints: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    conf: Option<Vec<f64>>,
    #[serde(default, rename = "ref", skip_serializing_if = "Option::is_none")]
    media: Option<String>,
}

impl FrameRecord {
    fn into_frame(self, frame: usize) -> Result<SkeletonFrame> {
        if self.joints.len() != JOINT_COUNT {
            return Err(Error::InvalidFrame {
                frame,
                reason: format!(
                    "expected {} joints, found {}",
                    JOINT_COUNT,
                    self.joints.len()
                ),
            });
        }
        let mut joints = [[0.0; 3]; JOINT_COUNT];
        for (j, p) in self.joints.iter().enumerate() {
            if p.len() != 3 {
                return Err(Error::InvalidFrame {
                    frame,
                    reason: format!("joint {} has {} coordinates, expected 3", j, p.len()),
                });
            }
            joints[j] = [p[0], p[1], p[2]];
        }
        let confidence = match self.conf {
            None => None,
            Some(c) if c.len() == JOINT_COUNT => {
                let mut arr = [0.0; JOINT_COUNT];
                arr.copy_from_slice(&c);
                Some(arr)
            }
            Some(c) => {
                return Err(Error::InvalidFrame {
                    frame,
                    reason: format!("expected {} confidences, found {}", JOINT_COUNT, c.len()),
                })
            }
        };
        let out = SkeletonFrame {
            timestamp: self.t,
            joints,
            confidence,
            media: self.media,
        };
        out.validate(frame)?;
        Ok(out)
    }
}

/// A recorded session: header plus frames in file order.
#[derive(Debug, Clone, PartialEq)]
pub struct Session {
    pub fps: f64,
    pub frames: Vec<SkeletonFrame>,
}

pub fn load_session(path: impl AsRef<Path>) -> Result<Session> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = BufReader::new(file).lines();
    let parse_err = |line: usize, reason: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        reason,
    };

    let header_line = match lines.next() {
        Some(l) => l.map_err(|e| Error::io(path, e))?,
        None => return Err(parse_err(1, "missing session header".into())),
    };
    let header: SessionHeader =
        serde_json::from_str(&header_line).map_err(|e| parse_err(1, e.to_string()))?;
    if header.format != SESSION_FORMAT {
        return Err(Error::Format {
            expected: SESSION_FORMAT.into(),
            found: header.format,
        });
    }
    if header.version != SESSION_VERSION as u64 {
        return Err(Error::Version {
            format: SESSION_FORMAT.into(),
            expected: SESSION_VERSION,
            found: header.version,
        });
    }

    let mut frames = Vec::new();
    for (i, line) in lines.enumerate() {
        let line_no = i + 2;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: FrameRecord =
            serde_json::from_str(&line).map_err(|e| parse_err(line_no, e.to_string()))?;
        frames.push(record.into_frame(frames.len())?);
    }
    Ok(Session {
        fps: header.fps,
        frames,
    })
}

pub fn write_session(path: impl AsRef<Path>, session: &Session) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let header = SessionHeader {
        format: SESSION_FORMAT.into(),
        version: SESSION_VERSION as u64,
        fps: session.fps,
    };
    let io = |e| Error::io(path, e);
    writeln!(w, "{}", serde_json::to_string(&header)?).map_err(io)?;
    for f in &session.frames {
        let record = FrameRecord {
            t: f.timestamp,
            joints: f.joints.iter().map(|p| p.to_vec()).collect(),
            conf: f.confidence.map(|c| c.to_vec()),
            media: f.media.clone(),
        };
        writeln!(w, "{}", serde_json::to_string(&record)?).map_err(io)?;
    }
    w.flush().map_err(io)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn frame(t: f64) -> SkeletonFrame {
        SkeletonFrame::new(t, [[0.0; 3]; JOINT_COUNT])
    }

    fn frames(n: usize) -> Vec<SkeletonFrame> {
        (0..n).map(|i| frame(i as f64 / 30.0)).collect()
    }

    #[test]
    fn joint_registry() {
        assert_eq!(JointId::all().count(), 19);
        assert_eq!(JointId::from_name("right_hand").unwrap().index(), 12);
        assert!(JointId::new(19).is_none());
    }

    #[test]
    fn thirty_frames_is_not_enough() {
        let w = sample_windows(frames(30), SamplerConfig::default()).unwrap();
        assert!(w.is_empty());
    }

    #[test]
    fn first_window_at_frame_90() {
        let mut sampler = WindowSampler::new(SamplerConfig::default()).unwrap();
        let mut emitted = Vec::new();
        for (i, f) in frames(97).into_iter().enumerate() {
            if let Some(w) = sampler.push_frame(f).unwrap() {
                emitted.push((i, w));
            }
        }
        assert_eq!(emitted.len(), 2);
        let (at, first) = &emitted[0];
        assert_eq!(*at, 90);
        let expected: Vec<u64> = (0..16).map(|k| k * 6).collect();
        assert_eq!(first.input_indices, expected);
        assert_eq!(first.window_index, 0);
        assert_eq!(emitted[1].0, 96);
        assert_eq!(emitted[1].1.input_indices[0], 6);
    }

    #[test]
    fn non_monotone_timestamp_leaves_state() {
        let mut sampler = WindowSampler::new(SamplerConfig::default()).unwrap();
        sampler.push_frame(frame(1.0)).unwrap();
        let before = sampler.accepted();
        let err = sampler.push_frame(frame(1.0)).unwrap_err();
        match err {
            Error::NonMonotoneTimestamp { previous, current } => {
                assert_eq!(previous, 1.0);
                assert_eq!(current, 1.0);
            }
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(sampler.accepted(), before);
        assert!(sampler.push_frame(frame(1.1)).is_ok());
    }

    #[test]
    fn non_finite_frame_rejected() {
        let mut sampler = WindowSampler::new(SamplerConfig::default()).unwrap();
        let mut f = frame(0.0);
        f.joints[3][1] = f64::NAN;
        assert!(matches!(
            sampler.push_frame(f),
            Err(Error::InvalidFrame { frame: 0, .. })
        ));
        assert_eq!(sampler.accepted(), 0);
    }

    #[test]
    fn emit_every_controls_overlap() {
        let cfg = SamplerConfig {
            emit_every: 4,
            ..SamplerConfig::default()
        };
        let w = sample_windows(frames(300), cfg).unwrap();
        assert!(w.len() > 2);
        for pair in w.windows(2) {
            let shared = pair[0]
                .input_indices
                .iter()
                .filter(|i| pair[1].input_indices.contains(i))
                .count();
            assert_eq!(shared, 16 - 4);
        }
    }

    #[test]
    fn media_refs_follow_frames() {
        let fs: Vec<_> = frames(91)
            .into_iter()
            .enumerate()
            .map(|(i, mut f)| {
                f.media = Some(format!("frame_{i:05}.jpg"));
                f
            })
            .collect();
        let w = sample_windows(fs, SamplerConfig::default()).unwrap();
        let refs = w[0].video_refs.as_ref().unwrap();
        assert_eq!(refs.len(), 16);
        assert_eq!(refs[1], "frame_00006.jpg");
        assert_eq!(w[0].still_ref.as_deref(), Some("frame_00090.jpg"));
    }

    #[test]
    fn zero_stride_rejected() {
        let cfg = SamplerConfig {
            sample_stride: 0,
            ..SamplerConfig::default()
        };
        assert!(WindowSampler::new(cfg).is_err());
    }
}

//! Backbone feature contract, absolute spatial position encoding and the two
//! built-in providers (synthetic and file based).

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{s, Array3, Array4, ArrayView2, ArrayViewMut2};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{Error, Result};
use crate::stream::{SampleWindow, JOINT_COUNT};
use crate::wire::{self, TensorSpec};

/// Side length of the spatial feature grid.
pub const GRID: usize = 6;
pub const TIMESTEPS: usize = 16;
pub const OBJECT_CLASSES: usize = 38;
/// Channels of the video and pose grids.
pub const FEATURE_CHANNELS: usize = JOINT_COUNT;

pub const FEATURES_FORMAT: &str = "adlsense-features";

pub type PositionMatrix = [[f64; GRID]; GRID];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositionEncoding {
    #[default]
    Bilinear,
    OneHot,
}

fn check_point(x: f64, y: f64) -> Result<()> {
    if x.is_finite() && y.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid(format!("non-finite position ({x}, {y})")))
    }
}

/// Splat weights of one axis: two neighbouring cell indices and the weight of the upper one.
fn axis_weights(coord: f64) -> (usize, f64) {
    let u = (coord.clamp(0.0, 1.0) * GRID as f64 - 0.5).clamp(0.0, (GRID - 1) as f64);
    let lo = (u.floor() as usize).min(GRID - 2);
    (lo, u - lo as f64)
}

/// Bilinear splat of a normalized image point onto the cell centers `(i + 0.5) / 6`.
///
/// Rows follow `y`, columns follow `x`. Points outside the outer centers clamp to
/// the edge cells, so the weights are nonnegative and sum to one.
pub fn spatial_position_matrix(x: f64, y: f64) -> Result<PositionMatrix> {
    check_point(x, y)?;
    let (c0, fx) = axis_weights(x);
    let (r0, fy) = axis_weights(y);
    let mut m = [[0.0; GRID]; GRID];
    m[r0][c0] = (1.0 - fy) * (1.0 - fx);
    m[r0][c0 + 1] = (1.0 - fy) * fx;
    m[r0 + 1][c0] = fy * (1.0 - fx);
    m[r0 + 1][c0 + 1] = fy * fx;
    Ok(m)
}

/// One-hot cell containing the point.
pub fn one_hot_position_matrix(x: f64, y: f64) -> Result<PositionMatrix> {
    check_point(x, y)?;
    let cell = |v: f64| ((v.clamp(0.0, 1.0) * GRID as f64) as usize).min(GRID - 1);
    let mut m = [[0.0; GRID]; GRID];
    m[cell(y)][cell(x)] = 1.0;
    Ok(m)
}

pub fn position_matrix(x: f64, y: f64, encoding: PositionEncoding) -> Result<PositionMatrix> {
    match encoding {
        PositionEncoding::Bilinear => spatial_position_matrix(x, y),
        PositionEncoding::OneHot => one_hot_position_matrix(x, y),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Video,
    Pose,
}

/// `T × C × 6 × 6` feature tensor of one modality.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureGrid {
    pub modality: Modality,
    pub data: Array4<f64>,
}

impl FeatureGrid {
    pub fn zeros(modality: Modality) -> Self {
        FeatureGrid {
            modality,
            data: Array4::zeros((TIMESTEPS, FEATURE_CHANNELS, GRID, GRID)),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let expected = [TIMESTEPS, FEATURE_CHANNELS, GRID, GRID];
        if self.data.shape() != expected {
            return Err(Error::Shape {
                field: format!("{:?}", self.modality).to_lowercase(),
                expected: expected.to_vec(),
                found: self.data.shape().to_vec(),
            });
        }
        if self.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("feature grid has non-finite entries"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectDetection {
    pub class_id: usize,
    /// Bounding-box centroid normalized to the still image, `(x, y)`.
    pub centroid: [f64; 2],
    pub confidence: f64,
}

impl ObjectDetection {
    pub fn validate(&self) -> Result<()> {
        if self.class_id >= OBJECT_CLASSES {
            return Err(Error::UnknownClass(format!(
                "object class {} (vocabulary has {OBJECT_CLASSES})",
                self.class_id
            )));
        }
        check_point(self.centroid[0], self.centroid[1])?;
        if !(0.0..=1.0).contains(&self.confidence) {
            return Err(Error::invalid(format!(
                "detection confidence {} outside [0, 1]",
                self.confidence
            )));
        }
        Ok(())
    }
}

/// `1 × 38 × 6 × 6` object location grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectGrid {
    pub data: Array4<f64>,
}

pub fn objects_to_grid(detections: &[ObjectDetection]) -> Result<ObjectGrid> {
    objects_to_grid_with(detections, PositionEncoding::Bilinear)
}

/// Confidence-weighted sum of each detection's position matrix in its class slice.
pub fn objects_to_grid_with(
    detections: &[ObjectDetection],
    encoding: PositionEncoding,
) -> Result<ObjectGrid> {
    let mut data = Array4::zeros((1, OBJECT_CLASSES, GRID, GRID));
    for d in detections {
        d.validate()?;
        let m = position_matrix(d.centroid[0], d.centroid[1], encoding)?;
        let mut slice = data.slice_mut(s![0, d.class_id, .., ..]);
        for r in 0..GRID {
            for c in 0..GRID {
                slice[[r, c]] += d.confidence * m[r][c];
            }
        }
    }
    Ok(ObjectGrid { data })
}

/// Everything the fusion stage consumes for one window.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBundle {
    pub video: FeatureGrid,
    pub pose: FeatureGrid,
    /// `16 × 19 × 2` normalized image-plane joint positions.
    pub pose_joint_xy: Array3<f64>,
    pub objects: Vec<ObjectDetection>,
    pub window_index: u64,
}

impl FeatureBundle {
    pub fn validate(&self) -> Result<()> {
        self.video.validate()?;
        self.pose.validate()?;
        let expected = [TIMESTEPS, JOINT_COUNT, 2];
        if self.pose_joint_xy.shape() != expected {
            return Err(Error::Shape {
                field: "pose_joint_xy".into(),
                expected: expected.to_vec(),
                found: self.pose_joint_xy.shape().to_vec(),
            });
        }
        if self.pose_joint_xy.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("pose_joint_xy has non-finite entries"));
        }
        for d in &self.objects {
            d.validate()?;
        }
        Ok(())
    }
}

/// Orthographic camera mapping camera-frame meters to the unit image square.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CameraConfig {
    /// Camera-frame x extent (meters) mapped to image columns 0..1.
    pub x_range: [f64; 2],
    /// Camera-frame y extent (meters, up) mapped to image rows 1..0.
    pub y_range: [f64; 2],
}

impl Default for CameraConfig {
    fn default() -> Self {
        CameraConfig {
            x_range: [-1.5, 1.5],
            y_range: [-1.2, 1.2],
        }
    }
}

impl CameraConfig {
    pub fn validate(&self) -> Result<()> {
        let wx = self.x_range[1] - self.x_range[0];
        let wy = self.y_range[1] - self.y_range[0];
        if !(wx.is_finite() && wy.is_finite()) || wx <= 0.0 || wy <= 0.0 {
            return Err(Error::invalid(format!(
                "degenerate camera extent: x {:?}, y {:?}",
                self.x_range, self.y_range
            )));
        }
        Ok(())
    }

    /// Image-plane position in `[0, 1]²`; image rows grow downward.
    pub fn project(&self, p: &[f64; 3]) -> [f64; 2] {
        let u = (p[0] - self.x_range[0]) / (self.x_range[1] - self.x_range[0]);
        let v = (self.y_range[1] - p[1]) / (self.y_range[1] - self.y_range[0]);
        [u.clamp(0.0, 1.0), v.clamp(0.0, 1.0)]
    }
}

/// Normalized 3 × 3 binomial kernel applied to each pose slab to form the video grid.
pub const BLUR_KERNEL: [[f64; 3]; 3] = [
    [1.0 / 16.0, 2.0 / 16.0, 1.0 / 16.0],
    [2.0 / 16.0, 4.0 / 16.0, 2.0 / 16.0],
    [1.0 / 16.0, 2.0 / 16.0, 1.0 / 16.0],
];

fn blur_into(src: ArrayView2<f64>, mut dst: ArrayViewMut2<f64>) {
    for r in 0..GRID {
        for c in 0..GRID {
            let mut acc = 0.0;
            for (dr, row) in BLUR_KERNEL.iter().enumerate() {
                for (dc, k) in row.iter().enumerate() {
                    let rr = r as isize + dr as isize - 1;
                    let cc = c as isize + dc as isize - 1;
                    if (0..GRID as isize).contains(&rr) && (0..GRID as isize).contains(&cc) {
                        acc += k * src[[rr as usize, cc as usize]];
                    }
                }
            }
            dst[[r, c]] = acc;
        }
    }
}

/// Deterministic stand-in for the trained backbones.
///
/// Pose channel `j` at step `t` is the joint's position matrix scaled by its
/// displacement since the previous step (the first step uses the displacement to
/// the second). The video grid is the pose grid blurred with [`BLUR_KERNEL`]
/// (zero padding). No objects are produced. Values are rounded to `f32` so a
/// stored bundle reloads bit-exactly.
pub fn synthetic_features(window: &SampleWindow, camera: &CameraConfig) -> Result<FeatureBundle> {
    camera.validate()?;
    window.validate()?;
    if window.len() != TIMESTEPS {
        return Err(Error::Shape {
            field: "window".into(),
            expected: vec![TIMESTEPS],
            found: vec![window.len()],
        });
    }
    let frames = &window.frames;
    let mut xy = Array3::zeros((TIMESTEPS, JOINT_COUNT, 2));
    let mut pose = FeatureGrid::zeros(Modality::Pose);
    let mut video = FeatureGrid::zeros(Modality::Video);

    for t in 0..TIMESTEPS {
        let (a, b) = if t == 0 { (0, 1) } else { (t - 1, t) };
        for j in 0..JOINT_COUNT {
            let p = camera.project(&frames[t].joints[j]);
            let p = [p[0] as f32 as f64, p[1] as f32 as f64];
            xy[[t, j, 0]] = p[0];
            xy[[t, j, 1]] = p[1];
            let (pa, pb) = (frames[a].joints[j], frames[b].joints[j]);
            let disp =
                ((pb[0] - pa[0]).powi(2) + (pb[1] - pa[1]).powi(2) + (pb[2] - pa[2]).powi(2))
                    .sqrt();
            if disp == 0.0 {
                continue;
            }
            let m = spatial_position_matrix(p[0], p[1])?;
            let mut slab = pose.data.slice_mut(s![t, j, .., ..]);
            for r in 0..GRID {
                for c in 0..GRID {
                    slab[[r, c]] = m[r][c] * disp;
                }
            }
            blur_into(
                pose.data.slice(s![t, j, .., ..]),
                video.data.slice_mut(s![t, j, .., ..]),
            );
        }
    }
    wire::quantize(pose.data.as_slice_mut().expect("standard layout"));
    wire::quantize(video.data.as_slice_mut().expect("standard layout"));

    Ok(FeatureBundle {
        video,
        pose,
        pose_joint_xy: xy,
        objects: Vec::new(),
        window_index: window.window_index,
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct BundleTrailer {
    window_index: u64,
    objects: Vec<ObjectDetection>,
}

/// Canonical bytes of a bundle in the feature wire format.
pub fn encode_feature_bundle(bundle: &FeatureBundle) -> Result<Vec<u8>> {
    bundle.validate()?;
    let grid_shape = [TIMESTEPS, FEATURE_CHANNELS, GRID, GRID];
    let video = bundle.video.data.as_standard_layout();
    let pose = bundle.pose.data.as_standard_layout();
    let xy = bundle.pose_joint_xy.as_standard_layout();
    let trailer = json!(BundleTrailer {
        window_index: bundle.window_index,
        objects: bundle.objects.clone(),
    });
    wire::encode(
        FEATURES_FORMAT,
        &[
            (
                TensorSpec::f32("video", &grid_shape),
                video.as_slice().unwrap(),
            ),
            (
                TensorSpec::f32("pose", &grid_shape),
                pose.as_slice().unwrap(),
            ),
            (
                TensorSpec::f32("pose_joint_xy", &[TIMESTEPS, JOINT_COUNT, 2]),
                xy.as_slice().unwrap(),
            ),
        ],
        None,
        Some(&trailer),
    )
}

pub fn decode_feature_bundle(bytes: &[u8]) -> Result<FeatureBundle> {
    let file = wire::decode(bytes, FEATURES_FORMAT)?;
    let grid_shape = [TIMESTEPS, FEATURE_CHANNELS, GRID, GRID];
    let grid = |name: &str, modality| -> Result<FeatureGrid> {
        let data = file.expect(name, &grid_shape)?;
        Ok(FeatureGrid {
            modality,
            data: Array4::from_shape_vec(grid_shape, data.to_vec()).expect("shape checked"),
        })
    };
    let video = grid("video", Modality::Video)?;
    let pose = grid("pose", Modality::Pose)?;
    let xy_shape = [TIMESTEPS, JOINT_COUNT, 2];
    let xy = file.expect("pose_joint_xy", &xy_shape)?.to_vec();
    let trailer: BundleTrailer = match &file.trailer {
        Some(t) => serde_json::from_value(t.clone())?,
        None => {
            return Err(Error::invalid(
                "feature file is missing its detection trailer",
            ))
        }
    };
    let bundle = FeatureBundle {
        video,
        pose,
        pose_joint_xy: Array3::from_shape_vec(xy_shape, xy).expect("shape checked"),
        objects: trailer.objects,
        window_index: trailer.window_index,
    };
    bundle.validate()?;
    Ok(bundle)
}

pub fn store_feature_bundle(bundle: &FeatureBundle, path: impl AsRef<Path>) -> Result<()> {
    wire::write(path, &encode_feature_bundle(bundle)?)
}

pub fn load_feature_bundle(path: impl AsRef<Path>) -> Result<FeatureBundle> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_feature_bundle(&bytes)
}

/// File name of the bundle for a given window inside a features directory.
pub fn feature_file_name(window_index: u64) -> String {
    format!("window_{window_index:06}.feat")
}

/// Source of backbone features for sampled windows.
pub trait FeatureProvider {
    fn features(&self, window: &SampleWindow) -> Result<FeatureBundle>;
}

#[derive(Debug, Clone, Default)]
pub struct SyntheticProvider {
    pub camera: CameraConfig,
}

impl FeatureProvider for SyntheticProvider {
    fn features(&self, window: &SampleWindow) -> Result<FeatureBundle> {
        synthetic_features(window, &self.camera)
    }
}

/// Reads pre-exported bundles named by [`feature_file_name`].
#[derive(Debug, Clone)]
pub struct FileProvider {
    pub dir: PathBuf,
}

impl FeatureProvider for FileProvider {
    fn features(&self, window: &SampleWindow) -> Result<FeatureBundle> {
        let bundle = load_feature_bundle(self.dir.join(feature_file_name(window.window_index)))?;
        if bundle.window_index != window.window_index {
            return Err(Error::invalid(format!(
                "feature file for window {} declares window_index {}",
                window.window_index, bundle.window_index
            )));
        }
        Ok(bundle)
    }
}

/// Names of the 38 object classes, indexed by class id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ObjectVocabulary {
    names: Vec<String>,
}

const DEFAULT_OBJECTS: [&str; OBJECT_CLASSES] = [
    "bottle",
    "wine glass",
    "cup",
    "fork",
    "knife",
    "spoon",
    "bowl",
    "banana",
    "apple",
    "sandwich",
    "orange",
    "broccoli",
    "carrot",
    "pizza",
    "donut",
    "cake",
    "chair",
    "couch",
    "potted plant",
    "bed",
    "dining table",
    "toilet",
    "tv",
    "laptop",
    "mouse",
    "remote",
    "keyboard",
    "cell phone",
    "microwave",
    "oven",
    "toaster",
    "sink",
    "refrigerator",
    "book",
    "clock",
    "vase",
    "scissors",
    "toothbrush",
];

impl Default for ObjectVocabulary {
    fn default() -> Self {
        ObjectVocabulary {
            names: DEFAULT_OBJECTS.iter().map(|s| s.to_string()).collect(),
        }
    }
}

impl ObjectVocabulary {
    /// Parses `<class_id> <name>` lines; `#` starts a comment.
    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let mut names: Vec<Option<String>> = vec![None; OBJECT_CLASSES];
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |reason: String| Error::Parse {
                path: origin.to_path_buf(),
                line: i + 1,
                reason,
            };
            let (id, name) = line
                .split_once(char::is_whitespace)
                .ok_or_else(|| err("expected `<class_id> <name>`".into()))?;
            let id: usize = id
                .parse()
                .map_err(|_| err(format!("bad class id {id:?}")))?;
            if id >= OBJECT_CLASSES {
                return Err(err(format!("class id {id} out of range")));
            }
            if names[id].is_some() {
                return Err(err(format!("class id {id} defined twice")));
            }
            names[id] = Some(name.trim().to_string());
        }
        let names = names
            .into_iter()
            .enumerate()
            .map(|(i, n)| n.ok_or_else(|| Error::invalid(format!("object class {i} not defined"))))
            .collect::<Result<_>>()?;
        Ok(ObjectVocabulary { names })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn name(&self, class_id: usize) -> Option<&str> {
        self.names.get(class_id).map(String::as_str)
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }
}

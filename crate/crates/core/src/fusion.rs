//! Spatial mid-fusion: spatial referencing of pose features, modality
//! concatenation, and the conv2d → conv1d → dense stack producing the
//! 128-dimensional ADL embedding and the task-class distribution.
//!
//! Layer hyperparameters are declared by [`PipelineConfig`], which travels in
//! the weights file header, so the numeric core does not hard-code an
//! architecture.

use std::path::Path;

use ndarray::{s, Array1, Array2, Array3, Array4, ArrayView3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{
    objects_to_grid_with, position_matrix, FeatureBundle, FeatureGrid, Modality, ObjectGrid,
    PositionEncoding, PositionMatrix, FEATURE_CHANNELS, GRID, OBJECT_CLASSES, TIMESTEPS,
};
use crate::stream::JOINT_COUNT;
use crate::wire::{self, TensorSpec};

pub const EMBED_DIM: usize = 128;
/// Time steps of the fused tensor: 16 feature steps plus the object step.
pub const FUSED_STEPS: usize = TIMESTEPS + 1;
pub const FUSED_CHANNELS: usize = 2 * FEATURE_CHANNELS;
pub const DEFAULT_CLASSES: usize = 11;
pub const WEIGHTS_FORMAT: &str = "adlsense-weights";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Linear,
    Relu,
}

impl Activation {
    fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Linear => v,
            Activation::Relu => v.max(0.0),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    /// `out × in × kh × kw`
    pub weight: Array4<f64>,
    pub bias: Array1<f64>,
    pub stride: usize,
    pub padding: usize,
    pub activation: Activation,
}

#[derive(Debug, Clone)]
pub struct Conv1d {
    /// `out × in × k`
    pub weight: Array3<f64>,
    pub bias: Array1<f64>,
    pub stride: usize,
    pub padding: usize,
    pub activation: Activation,
}

#[derive(Debug, Clone)]
pub struct Dense {
    /// `out × in`
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    pub activation: Activation,
}

fn out_len(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = input + 2 * padding;
    if stride == 0 || kernel == 0 || kernel > padded {
        None
    } else {
        Some((padded - kernel) / stride + 1)
    }
}

/// Cross-correlation with bias and activation, computed as im2col + GEMM.
pub fn conv2d_forward(input: ArrayView3<f64>, layer: &Conv2d) -> Result<Array3<f64>> {
    let (c_in, h, w) = input.dim();
    let (c_out, wc_in, kh, kw) = layer.weight.dim();
    if wc_in != c_in || layer.bias.len() != c_out {
        return Err(Error::Shape {
            field: "conv2d".into(),
            expected: vec![c_out, c_in, kh, kw],
            found: vec![layer.bias.len(), wc_in, kh, kw],
        });
    }
    let (Some(oh), Some(ow)) = (
        out_len(h, kh, layer.stride, layer.padding),
        out_len(w, kw, layer.stride, layer.padding),
    ) else {
        return Err(Error::invalid(format!(
            "conv2d kernel {kh}x{kw} (stride {}, padding {}) does not fit input {h}x{w}",
            layer.stride, layer.padding
        )));
    };

    let p = layer.padding as isize;
    let mut cols = Array2::<f64>::zeros((c_in * kh * kw, oh * ow));
    for c in 0..c_in {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (c * kh + ki) * kw + kj;
                for oi in 0..oh {
                    let ii = (oi * layer.stride + ki) as isize - p;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    for oj in 0..ow {
                        let jj = (oj * layer.stride + kj) as isize - p;
                        if jj >= 0 && jj < w as isize {
                            cols[[row, oi * ow + oj]] = input[[c, ii as usize, jj as usize]];
                        }
                    }
                }
            }
        }
    }
    let kernel = layer
        .weight
        .view()
        .into_shape_with_order((c_out, c_in * kh * kw))
        .map_err(|e| Error::invalid(e.to_string()))?;
    let mut out = kernel.dot(&cols);
    for (mut row, b) in out.axis_iter_mut(Axis(0)).zip(layer.bias.iter()) {
        row.mapv_inplace(|v| layer.activation.apply(v + b));
    }
    Ok(out
        .into_shape_with_order((c_out, oh, ow))
        .expect("row-major product"))
}

/// Temporal cross-correlation over a `C_in × T` input.
pub fn conv1d_forward(input: ndarray::ArrayView2<f64>, layer: &Conv1d) -> Result<Array2<f64>> {
    let (c_in, t) = input.dim();
    let (c_out, wc_in, k) = layer.weight.dim();
    if wc_in != c_in || layer.bias.len() != c_out {
        return Err(Error::Shape {
            field: "conv1d".into(),
            expected: vec![c_out, c_in, k],
            found: vec![layer.bias.len(), wc_in, k],
        });
    }
    let Some(ot) = out_len(t, k, layer.stride, layer.padding) else {
        return Err(Error::invalid(format!(
            "conv1d kernel {k} (stride {}, padding {}) does not fit input length {t}",
            layer.stride, layer.padding
        )));
    };
    let p = layer.padding as isize;
    let mut cols = Array2::<f64>::zeros((c_in * k, ot));
    for c in 0..c_in {
        for kk in 0..k {
            for o in 0..ot {
                let ti = (o * layer.stride + kk) as isize - p;
                if ti >= 0 && ti < t as isize {
                    cols[[c * k + kk, o]] = input[[c, ti as usize]];
                }
            }
        }
    }
    let kernel = layer
        .weight
        .view()
        .into_shape_with_order((c_out, c_in * k))
        .map_err(|e| Error::invalid(e.to_string()))?;
    let mut out = kernel.dot(&cols);
    for (mut row, b) in out.axis_iter_mut(Axis(0)).zip(layer.bias.iter()) {
        row.mapv_inplace(|v| layer.activation.apply(v + b));
    }
    Ok(out)
}

pub fn dense_forward(input: &Array1<f64>, layer: &Dense) -> Result<Array1<f64>> {
    let (o, i) = layer.weight.dim();
    if i != input.len() || layer.bias.len() != o {
        return Err(Error::Shape {
            field: "dense".into(),
            expected: vec![o, input.len()],
            found: vec![layer.bias.len(), i],
        });
    }
    let mut out = layer.weight.dot(input) + &layer.bias;
    out.mapv_inplace(|v| layer.activation.apply(v));
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Conv2dSpec {
    pub out_channels: usize,
    pub kernel: [usize; 2],
    pub stride: usize,
    pub padding: usize,
    pub activation: Activation,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Conv1dSpec {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub activation: Activation,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub conv2d: Conv2dSpec,
    pub conv1d: Conv1dSpec,
    pub embed_activation: Activation,
    pub num_classes: usize,
    #[serde(default)]
    pub position_encoding: PositionEncoding,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            conv2d: Conv2dSpec {
                out_channels: 64,
                kernel: [3, 3],
                stride: 1,
                padding: 1,
                activation: Activation::Relu,
            },
            conv1d: Conv1dSpec {
                out_channels: 64,
                kernel: 3,
                stride: 1,
                padding: 1,
                activation: Activation::Relu,
            },
            embed_activation: Activation::Linear,
            num_classes: DEFAULT_CLASSES,
            position_encoding: PositionEncoding::Bilinear,
        }
    }
}

impl PipelineConfig {
    /// Spatial size after the conv2d layer.
    pub fn conv2d_output(&self) -> Result<(usize, usize)> {
        let c = &self.conv2d;
        match (
            out_len(GRID, c.kernel[0], c.stride, c.padding),
            out_len(GRID, c.kernel[1], c.stride, c.padding),
        ) {
            (Some(h), Some(w)) => Ok((h, w)),
            _ => Err(Error::invalid("conv2d kernel does not fit the 6x6 grid").at_stage("conv2d")),
        }
    }

    /// Input channels of the temporal conv: flattened conv2d output.
    pub fn temporal_features(&self) -> Result<usize> {
        let (h, w) = self.conv2d_output()?;
        Ok(self.conv2d.out_channels * h * w)
    }

    pub fn validate(&self) -> Result<()> {
        if self.conv2d.out_channels == 0 || self.conv1d.out_channels == 0 || self.num_classes == 0 {
            return Err(Error::invalid(
                "layer widths and class count must be positive",
            ));
        }
        self.temporal_features()?;
        if out_len(
            FUSED_STEPS,
            self.conv1d.kernel,
            self.conv1d.stride,
            self.conv1d.padding,
        )
        .is_none()
        {
            return Err(
                Error::invalid("conv1d kernel does not fit 17 time steps").at_stage("conv1d")
            );
        }
        Ok(())
    }

    fn tensor_specs(&self) -> Result<Vec<TensorSpec>> {
        let f = self.temporal_features()?;
        let c2 = &self.conv2d;
        let c1 = &self.conv1d;
        Ok(vec![
            TensorSpec::f32(
                "conv2d.weight",
                &[c2.out_channels, FUSED_CHANNELS, c2.kernel[0], c2.kernel[1]],
            ),
            TensorSpec::f32("conv2d.bias", &[c2.out_channels]),
            TensorSpec::f32("conv1d.weight", &[c1.out_channels, f, c1.kernel]),
            TensorSpec::f32("conv1d.bias", &[c1.out_channels]),
            TensorSpec::f32("dense_embed.weight", &[EMBED_DIM, c1.out_channels]),
            TensorSpec::f32("dense_embed.bias", &[EMBED_DIM]),
            TensorSpec::f32("dense_head.weight", &[self.num_classes, EMBED_DIM]),
            TensorSpec::f32("dense_head.bias", &[self.num_classes]),
        ])
    }
}

#[derive(Debug, Clone)]
pub struct FusionWeights {
    pub config: PipelineConfig,
    pub conv2d: Conv2d,
    pub conv1d: Conv1d,
    pub dense_embed: Dense,
    pub dense_head: Dense,
}

impl FusionWeights {
    /// All-zero weights and biases for the given config.
    pub fn zeros(config: PipelineConfig) -> Result<Self> {
        Self::from_fn(config, |_, _| 0.0)
    }

    /// He-uniform weights and small uniform biases from a seeded generator,
    /// rounded to `f32` so they survive a store/load cycle unchanged.
    pub fn random(config: PipelineConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::from_fn(config, move |fan_in, is_bias| {
            let bound = if is_bias {
                0.05
            } else {
                (6.0 / fan_in as f64).sqrt()
            };
            rng.random_range(-bound..bound) as f32 as f64
        })
    }

    fn from_fn(config: PipelineConfig, mut gen: impl FnMut(usize, bool) -> f64) -> Result<Self> {
        config.validate()?;
        let specs = config.tensor_specs()?;
        let mut data: Vec<Vec<f64>> = Vec::with_capacity(specs.len());
        for (i, spec) in specs.iter().enumerate() {
            let is_bias = i % 2 == 1;
            let fan_in = if is_bias {
                1
            } else {
                spec.shape[1..].iter().product()
            };
            data.push((0..spec.numel()).map(|_| gen(fan_in, is_bias)).collect());
        }
        Self::assemble(config, &specs, data)
    }

    fn assemble(config: PipelineConfig, specs: &[TensorSpec], data: Vec<Vec<f64>>) -> Result<Self> {
        let mut it = specs.iter().zip(data);
        let mut next = || it.next().expect("eight tensors");
        let shape_err = |e: ndarray::ShapeError| Error::invalid(e.to_string());
        let (s, d) = next();
        let w2 = Array4::from_shape_vec((s.shape[0], s.shape[1], s.shape[2], s.shape[3]), d)
            .map_err(shape_err)?;
        let (_, b2) = next();
        let (s, d) = next();
        let w1 =
            Array3::from_shape_vec((s.shape[0], s.shape[1], s.shape[2]), d).map_err(shape_err)?;
        let (_, b1) = next();
        let (s, d) = next();
        let we = Array2::from_shape_vec((s.shape[0], s.shape[1]), d).map_err(shape_err)?;
        let (_, be) = next();
        let (s, d) = next();
        let wh = Array2::from_shape_vec((s.shape[0], s.shape[1]), d).map_err(shape_err)?;
        let (_, bh) = next();
        let weights = FusionWeights {
            config,
            conv2d: Conv2d {
                weight: w2,
                bias: Array1::from(b2),
                stride: config.conv2d.stride,
                padding: config.conv2d.padding,
                activation: config.conv2d.activation,
            },
            conv1d: Conv1d {
                weight: w1,
                bias: Array1::from(b1),
                stride: config.conv1d.stride,
                padding: config.conv1d.padding,
                activation: config.conv1d.activation,
            },
            dense_embed: Dense {
                weight: we,
                bias: Array1::from(be),
                activation: config.embed_activation,
            },
            dense_head: Dense {
                weight: wh,
                bias: Array1::from(bh),
                activation: Activation::Linear,
            },
        };
        weights.validate()?;
        Ok(weights)
    }

    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let specs = self.config.tensor_specs()?;
        let found = [
            self.conv2d.weight.shape(),
            self.conv2d.bias.shape(),
            self.conv1d.weight.shape(),
            self.conv1d.bias.shape(),
            self.dense_embed.weight.shape(),
            self.dense_embed.bias.shape(),
            self.dense_head.weight.shape(),
            self.dense_head.bias.shape(),
        ];
        for (spec, shape) in specs.iter().zip(found) {
            if spec.shape != shape {
                return Err(Error::Shape {
                    field: spec.name.clone(),
                    expected: spec.shape.clone(),
                    found: shape.to_vec(),
                });
            }
        }
        let finite = self.conv2d.weight.iter().all(|v| v.is_finite())
            && self.conv1d.weight.iter().all(|v| v.is_finite())
            && self.dense_embed.weight.iter().all(|v| v.is_finite())
            && self.dense_head.weight.iter().all(|v| v.is_finite());
        if !finite {
            return Err(Error::invalid("weights contain non-finite values"));
        }
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    pub fn parameter_count(&self) -> usize {
        self.conv2d.weight.len()
            + self.conv2d.bias.len()
            + self.conv1d.weight.len()
            + self.conv1d.bias.len()
            + self.dense_embed.weight.len()
            + self.dense_embed.bias.len()
            + self.dense_head.weight.len()
            + self.dense_head.bias.len()
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let specs = self.config.tensor_specs()?;
        let slices: [&[f64]; 8] = [
            self.conv2d.weight.as_slice().expect("standard layout"),
            self.conv2d.bias.as_slice().expect("standard layout"),
            self.conv1d.weight.as_slice().expect("standard layout"),
            self.conv1d.bias.as_slice().expect("standard layout"),
            self.dense_embed.weight.as_slice().expect("standard layout"),
            self.dense_embed.bias.as_slice().expect("standard layout"),
            self.dense_head.weight.as_slice().expect("standard layout"),
            self.dense_head.bias.as_slice().expect("standard layout"),
        ];
        let tensors: Vec<(TensorSpec, &[f64])> = specs.into_iter().zip(slices).collect();
        wire::encode(
            WEIGHTS_FORMAT,
            &tensors,
            Some(serde_json::to_value(self.config)?),
            None,
        )
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let file = wire::decode(bytes, WEIGHTS_FORMAT)?;
        let config: PipelineConfig = match &file.header.pipeline {
            Some(v) => serde_json::from_value(v.clone())?,
            None => return Err(Error::invalid("weights header has no pipeline block")),
        };
        config.validate()?;
        let specs = config.tensor_specs()?;
        if file.header.tensors.len() != specs.len() {
            return Err(Error::Shape {
                field: "tensors".into(),
                expected: vec![specs.len()],
                found: vec![file.header.tensors.len()],
            });
        }
        let data = specs
            .iter()
            .map(|s| file.expect(&s.name, &s.shape).map(<[f64]>::to_vec))
            .collect::<Result<Vec<_>>>()?;
        Self::assemble(config, &specs, data)
    }

    pub fn store(&self, path: impl AsRef<Path>) -> Result<()> {
        wire::write(path, &self.encode()?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }
}

pub fn load_weights(path: impl AsRef<Path>) -> Result<FusionWeights> {
    FusionWeights::load(path)
}

pub fn store_weights(weights: &FusionWeights, path: impl AsRef<Path>) -> Result<()> {
    weights.store(path)
}

/// The 128-dimensional ADL embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct AdlEmbedding(Vec<f64>);

impl AdlEmbedding {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.len() != EMBED_DIM {
            return Err(Error::Shape {
                field: "embedding".into(),
                expected: vec![EMBED_DIM],
                found: vec![values.len()],
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("embedding has non-finite values"));
        }
        Ok(AdlEmbedding(values))
    }

    /// Embedding whose leading coordinates are `head`, remaining ones zero.
    pub fn from_prefix(head: &[f64]) -> Result<Self> {
        let mut v = vec![0.0; EMBED_DIM];
        if head.len() > EMBED_DIM {
            return Err(Error::invalid("prefix longer than the embedding"));
        }
        v[..head.len()].copy_from_slice(head);
        Self::new(v)
    }

    pub fn zeros() -> Self {
        AdlEmbedding(vec![0.0; EMBED_DIM])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn distance(&self, other: &[f64]) -> f64 {
        self.0
            .iter()
            .zip(other)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }
}

impl TryFrom<Vec<f64>> for AdlEmbedding {
    type Error = Error;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        AdlEmbedding::new(v)
    }
}

impl From<AdlEmbedding> for Vec<f64> {
    fn from(e: AdlEmbedding) -> Self {
        e.0
    }
}

/// Softmax distribution over task classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskVector {
    pub probs: Vec<f64>,
}

impl TaskVector {
    /// Index of the largest probability; ties go to the lowest index.
    pub fn argmax(&self) -> usize {
        argmax(&self.probs)
    }
}

pub(crate) fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// `17 × 38 × 6 × 6` input of the fusion layers.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedTensor {
    pub data: Array4<f64>,
}

impl FusedTensor {
    pub fn zeros() -> Self {
        FusedTensor {
            data: Array4::zeros((FUSED_STEPS, FUSED_CHANNELS, GRID, GRID)),
        }
    }
}

/// Multiplies every pose slab on the right by a per-(step, joint) position matrix.
pub fn apply_position_matrices(
    pose: &FeatureGrid,
    mut matrix: impl FnMut(usize, usize) -> Result<PositionMatrix>,
) -> Result<FeatureGrid> {
    pose.validate()?;
    let mut out = FeatureGrid::zeros(Modality::Pose);
    for t in 0..TIMESTEPS {
        for j in 0..FEATURE_CHANNELS {
            let m = matrix(t, j)?;
            let src = pose.data.slice(s![t, j, .., ..]);
            let mut dst = out.data.slice_mut(s![t, j, .., ..]);
            for r in 0..GRID {
                for c in 0..GRID {
                    let mut acc = 0.0;
                    for k in 0..GRID {
                        acc += src[[r, k]] * m[k][c];
                    }
                    dst[[r, c]] = acc;
                }
            }
        }
    }
    Ok(out)
}

/// `output[t][j] = pose[t][j] · P(pose_joint_xy[t][j])`.
pub fn apply_spatial_reference(
    pose: &FeatureGrid,
    pose_joint_xy: &Array3<f64>,
) -> Result<FeatureGrid> {
    apply_spatial_reference_with(pose, pose_joint_xy, PositionEncoding::Bilinear)
}

pub fn apply_spatial_reference_with(
    pose: &FeatureGrid,
    pose_joint_xy: &Array3<f64>,
    encoding: PositionEncoding,
) -> Result<FeatureGrid> {
    let expected = [TIMESTEPS, JOINT_COUNT, 2];
    if pose_joint_xy.shape() != expected {
        return Err(Error::Shape {
            field: "pose_joint_xy".into(),
            expected: expected.to_vec(),
            found: pose_joint_xy.shape().to_vec(),
        });
    }
    apply_position_matrices(pose, |t, j| {
        position_matrix(pose_joint_xy[[t, j, 0]], pose_joint_xy[[t, j, 1]], encoding)
    })
}

/// Steps 0..16 carry video (channels 0..19) and referenced pose (19..38);
/// step 16 carries the object grid.
pub fn concat_modalities(
    video: &FeatureGrid,
    pose_ref: &FeatureGrid,
    objects: &ObjectGrid,
) -> Result<FusedTensor> {
    let grid = [TIMESTEPS, FEATURE_CHANNELS, GRID, GRID];
    for (name, shape) in [
        ("video", video.data.shape()),
        ("pose", pose_ref.data.shape()),
    ] {
        if shape != grid {
            return Err(Error::Shape {
                field: name.into(),
                expected: grid.to_vec(),
                found: shape.to_vec(),
            });
        }
    }
    let obj = [1, OBJECT_CLASSES, GRID, GRID];
    if objects.data.shape() != obj {
        return Err(Error::Shape {
            field: "objects".into(),
            expected: obj.to_vec(),
            found: objects.data.shape().to_vec(),
        });
    }
    let mut fused = FusedTensor::zeros();
    fused
        .data
        .slice_mut(s![..TIMESTEPS, ..FEATURE_CHANNELS, .., ..])
        .assign(&video.data);
    fused
        .data
        .slice_mut(s![..TIMESTEPS, FEATURE_CHANNELS.., .., ..])
        .assign(&pose_ref.data);
    fused
        .data
        .slice_mut(s![TIMESTEPS..FUSED_STEPS, .., .., ..])
        .assign(&objects.data);
    Ok(fused)
}

/// Runs the fusion stack on a fused tensor and returns the ADL embedding.
pub fn fuse(fused: &FusedTensor, w: &FusionWeights) -> Result<AdlEmbedding> {
    let shape = [FUSED_STEPS, FUSED_CHANNELS, GRID, GRID];
    if fused.data.shape() != shape {
        return Err(Error::Shape {
            field: "fused".into(),
            expected: shape.to_vec(),
            found: fused.data.shape().to_vec(),
        }
        .at_stage("fuse"));
    }
    let features = w.config.temporal_features()?;
    let mut temporal = Array2::<f64>::zeros((features, FUSED_STEPS));
    for t in 0..FUSED_STEPS {
        let slab = conv2d_forward(fused.data.index_axis(Axis(0), t), &w.conv2d)
            .map_err(|e| e.at_stage("conv2d"))?;
        let flat = slab
            .as_slice()
            .ok_or_else(|| Error::invalid("non-contiguous conv2d output").at_stage("conv2d"))?;
        if flat.len() != features {
            return Err(Error::Shape {
                field: "conv2d output".into(),
                expected: vec![features],
                found: vec![flat.len()],
            }
            .at_stage("conv2d"));
        }
        temporal
            .column_mut(t)
            .assign(&ndarray::ArrayView1::from(flat));
    }
    let time = conv1d_forward(temporal.view(), &w.conv1d).map_err(|e| e.at_stage("conv1d"))?;
    let pooled = time
        .mean_axis(Axis(1))
        .ok_or_else(|| Error::invalid("empty temporal output").at_stage("pool"))?;
    let embed = dense_forward(&pooled, &w.dense_embed).map_err(|e| e.at_stage("dense_embed"))?;
    AdlEmbedding::new(embed.to_vec()).map_err(|e| e.at_stage("dense_embed"))
}

pub fn classify_head(e: &AdlEmbedding, w: &FusionWeights) -> Result<TaskVector> {
    let logits = dense_forward(&Array1::from(e.as_slice().to_vec()), &w.dense_head)
        .map_err(|e| e.at_stage("dense_head"))?;
    Ok(TaskVector {
        probs: softmax(logits.as_slice().expect("contiguous")),
    })
}

/// Full fusion path for a feature bundle: spatial reference, object grid,
/// concatenation, fusion stack and classification head.
pub fn fuse_bundle(
    bundle: &FeatureBundle,
    w: &FusionWeights,
) -> Result<(AdlEmbedding, TaskVector)> {
    bundle.validate()?;
    let encoding = w.config.position_encoding;
    let pose_ref = apply_spatial_reference_with(&bundle.pose, &bundle.pose_joint_xy, encoding)
        .map_err(|e| e.at_stage("spatial_reference"))?;
    let objects =
        objects_to_grid_with(&bundle.objects, encoding).map_err(|e| e.at_stage("objects"))?;
    let fused =
        concat_modalities(&bundle.video, &pose_ref, &objects).map_err(|e| e.at_stage("concat"))?;
    let e = fuse(&fused, w)?;
    let task = classify_head(&e, w)?;
    Ok((e, task))
}

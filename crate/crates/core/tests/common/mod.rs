//! Brute-force reference implementations shared by the integration tests.
#![allow(dead_code)]

use adlsense::fusion::{
    Activation, Conv1d, Conv2d, FusedTensor, FusionWeights, EMBED_DIM, FUSED_STEPS,
};
use adlsense::stream::{SkeletonFrame, JOINT_COUNT};
use ndarray::{Array1, Array2, Array3, Array4};
use rand::Rng;

fn act(a: Activation, v: f64) -> f64 {
    match a {
        Activation::Linear => v,
        Activation::Relu => v.max(0.0),
    }
}

/// Direct nested-loop cross-correlation.
pub fn conv2d_oracle(input: &Array3<f64>, layer: &Conv2d) -> Array3<f64> {
    let (c_in, h, w) = input.dim();
    let (c_out, _, kh, kw) = layer.weight.dim();
    let (s, p) = (layer.stride, layer.padding);
    let oh = (h + 2 * p - kh) / s + 1;
    let ow = (w + 2 * p - kw) / s + 1;
    let mut out = Array3::zeros((c_out, oh, ow));
    for o in 0..c_out {
        for i in 0..oh {
            for j in 0..ow {
                let mut acc = layer.bias[o];
                for c in 0..c_in {
                    for a in 0..kh {
                        for b in 0..kw {
                            let y = (i * s + a) as isize - p as isize;
                            let x = (j * s + b) as isize - p as isize;
                            if y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w {
                                acc +=
                                    layer.weight[[o, c, a, b]] * input[[c, y as usize, x as usize]];
                            }
                        }
                    }
                }
                out[[o, i, j]] = act(layer.activation, acc);
            }
        }
    }
    out
}

pub fn conv1d_oracle(input: &Array2<f64>, layer: &Conv1d) -> Array2<f64> {
    let (c_in, t) = input.dim();
    let (c_out, _, k) = layer.weight.dim();
    let (s, p) = (layer.stride, layer.padding);
    let ot = (t + 2 * p - k) / s + 1;
    let mut out = Array2::zeros((c_out, ot));
    for o in 0..c_out {
        for i in 0..ot {
            let mut acc = layer.bias[o];
            for c in 0..c_in {
                for a in 0..k {
                    let x = (i * s + a) as isize - p as isize;
                    if x >= 0 && (x as usize) < t {
                        acc += layer.weight[[o, c, a]] * input[[c, x as usize]];
                    }
                }
            }
            out[[o, i]] = act(layer.activation, acc);
        }
    }
    out
}

/// Whole fusion stack with the oracles and explicit loops.
pub fn fuse_oracle(fused: &FusedTensor, w: &FusionWeights) -> Vec<f64> {
    let mut columns: Vec<Vec<f64>> = Vec::new();
    for t in 0..FUSED_STEPS {
        let slab = fused.data.index_axis(ndarray::Axis(0), t).to_owned();
        let out = conv2d_oracle(&slab, &w.conv2d);
        columns.push(out.iter().copied().collect());
    }
    let f = columns[0].len();
    let mut temporal = Array2::zeros((f, FUSED_STEPS));
    for (t, col) in columns.iter().enumerate() {
        for (i, v) in col.iter().enumerate() {
            temporal[[i, t]] = *v;
        }
    }
    let time = conv1d_oracle(&temporal, &w.conv1d);
    let (c, steps) = time.dim();
    let pooled: Vec<f64> = (0..c)
        .map(|i| (0..steps).map(|t| time[[i, t]]).sum::<f64>() / steps as f64)
        .collect();
    let d = &w.dense_embed;
    (0..EMBED_DIM)
        .map(|o| {
            let mut acc = d.bias[o];
            for (i, p) in pooled.iter().enumerate() {
                acc += d.weight[[o, i]] * p;
            }
            act(d.activation, acc)
        })
        .collect()
}

pub fn random_activation(rng: &mut impl Rng) -> Activation {
    if rng.random_bool(0.5) {
        Activation::Relu
    } else {
        Activation::Linear
    }
}

pub fn random_array3(rng: &mut impl Rng, shape: (usize, usize, usize)) -> Array3<f64> {
    Array3::from_shape_fn(shape, |_| rng.random_range(-1.0..1.0))
}

pub fn random_conv2d(
    rng: &mut impl Rng,
    c_out: usize,
    c_in: usize,
    k: usize,
    stride: usize,
    padding: usize,
) -> Conv2d {
    Conv2d {
        weight: Array4::from_shape_fn((c_out, c_in, k, k), |_| rng.random_range(-1.0..1.0)),
        bias: Array1::from_shape_fn(c_out, |_| rng.random_range(-1.0..1.0)),
        stride,
        padding,
        activation: random_activation(rng),
    }
}

pub fn random_conv1d(
    rng: &mut impl Rng,
    c_out: usize,
    c_in: usize,
    k: usize,
    stride: usize,
    padding: usize,
) -> Conv1d {
    Conv1d {
        weight: Array3::from_shape_fn((c_out, c_in, k), |_| rng.random_range(-1.0..1.0)),
        bias: Array1::from_shape_fn(c_out, |_| rng.random_range(-1.0..1.0)),
        stride,
        padding,
        activation: random_activation(rng),
    }
}

/// Largest elementwise error relative to the oracle's magnitude.
pub fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let scale = b.iter().fold(1e-12f64, |m, v| m.max(v.abs()));
    a.iter()
        .zip(b)
        .fold(0.0, |m, (x, y)| m.max((x - y).abs() / scale))
}

/// 16 frames of random joints with 0.2 s spacing.
pub fn random_frames(rng: &mut impl Rng, n: usize, spread: f64) -> Vec<SkeletonFrame> {
    (0..n)
        .map(|i| {
            let mut joints = [[0.0; 3]; JOINT_COUNT];
            for p in joints.iter_mut() {
                for v in p.iter_mut() {
                    *v = rng.random_range(-spread..spread);
                }
            }
            SkeletonFrame::new(i as f64 * 0.2, joints)
        })
        .collect()
}

/// Per-joint summed step lengths, the direct way.
pub fn motion_oracle(frames: &[SkeletonFrame]) -> Vec<f64> {
    (0..JOINT_COUNT)
        .map(|j| {
            let mut total = 0.0;
            for t in 1..frames.len() {
                let a = frames[t - 1].joints[j];
                let b = frames[t].joints[j];
                total +=
                    ((b[0] - a[0]).powi(2) + (b[1] - a[1]).powi(2) + (b[2] - a[2]).powi(2)).sqrt();
            }
            total
        })
        .collect()
}

/// Two-pass centroid, mean distance and mean squared distance.
pub fn batch_oracle(members: &[Vec<f64>]) -> (Vec<f64>, f64, f64) {
    let n = members.len() as f64;
    let dim = members[0].len();
    let centroid: Vec<f64> = (0..dim)
        .map(|d| members.iter().map(|m| m[d]).sum::<f64>() / n)
        .collect();
    let dists: Vec<f64> = members
        .iter()
        .map(|m| {
            m.iter()
                .zip(&centroid)
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
                .sqrt()
        })
        .collect();
    let mean = dists.iter().sum::<f64>() / n;
    let var = dists.iter().map(|d| d * d).sum::<f64>() / n;
    (centroid, mean, var)
}

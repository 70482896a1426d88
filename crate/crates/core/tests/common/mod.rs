//! Independent reference implementations shared by the integration tests
//! and the acceptance runner. Nothing here calls into the kernels under
//! test; values are computed from the textbook definitions in `f64`.
#![allow(dead_code)]

use std::path::Path;

use eresfd::detect::DetBox;
use eresfd::kernels::{self, BatchNormParams, ConvSpec, ConvWeights, ExecOptions};
use eresfd::{Shape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(shape: Shape, rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.numel().unwrap();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0f32..1.0)).collect()).unwrap()
}

pub fn random_weights(spec: &ConvSpec, rng: &mut ChaCha8Rng) -> ConvWeights {
    ConvWeights {
        kernel: random_tensor(spec.weight_shape(), rng),
        bias: spec
            .has_bias
            .then(|| (0..spec.out_channels).map(|_| rng.gen_range(-0.5f32..0.5)).collect()),
    }
}

/// Direct definition of grouped 2-D cross-correlation with zero padding.
pub fn oracle_conv(x: &Tensor, spec: &ConvSpec, w: &ConvWeights) -> (Shape, Vec<f64>) {
    let s = x.shape();
    let (kh, kw) = spec.kernel;
    let (sh, sw) = spec.stride;
    let (ph, pw) = spec.padding;
    let oh = (s.h + 2 * ph - kh) / sh + 1;
    let ow = (s.w + 2 * pw - kw) / sw + 1;
    let icg = spec.in_channels / spec.groups;
    let ocg = spec.out_channels / spec.groups;
    let k = w.kernel.data();
    let mut out = Vec::with_capacity(s.n * spec.out_channels * oh * ow);
    for n in 0..s.n {
        for oc in 0..spec.out_channels {
            let g = oc / ocg;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = w.bias.as_ref().map_or(0.0, |b| b[oc] as f64);
                    for i in 0..icg {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * sh + ky) as i64 - ph as i64;
                                let ix = (ox * sw + kx) as i64 - pw as i64;
                                if iy < 0 || ix < 0 || iy >= s.h as i64 || ix >= s.w as i64 {
                                    continue;
                                }
                                let wv = k[((oc * icg + i) * kh + ky) * kw + kx] as f64;
                                acc += wv * x.at(n, g * icg + i, iy as usize, ix as usize) as f64;
                            }
                        }
                    }
                    out.push(acc);
                }
            }
        }
    }
    (Shape::new(s.n, spec.out_channels, oh, ow), out)
}

/// Max pooling where padded taps never win.
pub fn oracle_maxpool(x: &Tensor, k: usize, stride: usize, pad: usize) -> (Shape, Vec<f64>) {
    let s = x.shape();
    let oh = (s.h + 2 * pad - k) / stride + 1;
    let ow = (s.w + 2 * pad - k) / stride + 1;
    let mut out = Vec::new();
    for n in 0..s.n {
        for c in 0..s.c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut m = f64::NEG_INFINITY;
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = (oy * stride + ky) as i64 - pad as i64;
                            let ix = (ox * stride + kx) as i64 - pad as i64;
                            if iy >= 0 && ix >= 0 && iy < s.h as i64 && ix < s.w as i64 {
                                m = m.max(x.at(n, c, iy as usize, ix as usize) as f64);
                            }
                        }
                    }
                    out.push(m);
                }
            }
        }
    }
    (Shape::new(s.n, s.c, oh, ow), out)
}

/// `(v − μ)·γ/√(σ² + ε) + β` applied per channel.
pub fn oracle_batchnorm(shape: Shape, v: &[f64], bn: &BatchNormParams) -> Vec<f64> {
    let p = shape.h * shape.w;
    v.iter()
        .enumerate()
        .map(|(i, &x)| {
            let c = (i / p) % shape.c;
            (x - bn.running_mean[c] as f64) * bn.gamma[c] as f64 / (bn.running_var[c] as f64 + bn.epsilon as f64).sqrt()
                + bn.beta[c] as f64
        })
        .collect()
}

/// `|a − b| ≤ rel · max(1, |b|)` elementwise.
pub fn close(got: &Tensor, want_shape: Shape, want: &[f64], rel: f64) -> Result<(), String> {
    if got.shape() != want_shape {
        return Err(format!("shape {} vs {}", got.shape(), want_shape));
    }
    for (i, (&a, &b)) in got.data().iter().zip(want).enumerate() {
        let err = (a as f64 - b).abs();
        if err > rel * b.abs().max(1.0) {
            return Err(format!("element {i}: {a} vs {b} (err {err:e})"));
        }
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub enum KernelCase {
    Conv { x: Tensor, spec: ConvSpec, w: ConvWeights },
    Pool { x: Tensor, k: usize, stride: usize, pad: usize },
    Fold { x: Tensor, spec: ConvSpec, w: ConvWeights, bn: BatchNormParams },
}

impl KernelCase {
    pub fn label(&self) -> String {
        match self {
            KernelCase::Conv { spec, x, .. } => format!(
                "{} k{:?} s{:?} p{:?} g{} on {}",
                if spec.is_depthwise() { "depthwise" } else { "conv" },
                spec.kernel,
                spec.stride,
                spec.padding,
                spec.groups,
                x.shape()
            ),
            KernelCase::Pool { x, k, stride, pad } => format!("maxpool k{k} s{stride} p{pad} on {}", x.shape()),
            KernelCase::Fold { spec, x, .. } => format!("fold k{:?} on {}", spec.kernel, x.shape()),
        }
    }

    /// Runs the kernel under `opts` and compares with the oracle.
    pub fn check(&self, opts: &ExecOptions, rel: f64) -> Result<(), String> {
        let err = |e: eresfd::Error| e.to_string();
        match self {
            KernelCase::Conv { x, spec, w } => {
                let got = if spec.is_depthwise() {
                    kernels::depthwise_conv2d_with(x, spec, w, opts).map_err(err)?
                } else {
                    kernels::conv2d_with(x, spec, w, opts).map_err(err)?
                };
                let (shape, want) = oracle_conv(x, spec, w);
                close(&got, shape, &want, rel)
            }
            KernelCase::Pool { x, k, stride, pad } => {
                let got = kernels::maxpool2d_with(x, *k, *stride, *pad, opts).map_err(err)?;
                let (shape, want) = oracle_maxpool(x, *k, *stride, *pad);
                close(&got, shape, &want, rel)
            }
            KernelCase::Fold { x, spec, w, bn } => {
                let folded = kernels::fold_batchnorm(spec, w, bn).map_err(err)?;
                let got = kernels::conv2d_with(x, spec, &folded, opts).map_err(err)?;
                let (shape, raw) = oracle_conv(x, spec, w);
                close(&got, shape, &oracle_batchnorm(shape, &raw, bn), rel)
            }
        }
    }
}

/// Deterministic mix of standard, grouped and depthwise convolutions, max
/// pools and folded conv+norm pairs.
pub fn kernel_cases(seed: u64, count: usize) -> Vec<KernelCase> {
    let mut r = rng(seed);
    (0..count)
        .map(|i| match i % 5 {
            0 | 1 => {
                let k = [1, 3, 5, 7][r.gen_range(0..4)];
                let groups = [1, 1, 2][r.gen_range(0..3)];
                let cin = groups * r.gen_range(1..5);
                let cout = groups * r.gen_range(1..5);
                let spec = ConvSpec {
                    kernel: (k, k),
                    stride: (r.gen_range(1..5), r.gen_range(1..5)),
                    padding: (r.gen_range(0..=k / 2 + 1), r.gen_range(0..=k / 2 + 1)),
                    in_channels: cin,
                    out_channels: cout,
                    groups,
                    has_bias: r.gen_bool(0.7),
                };
                let x = random_tensor(Shape::new(r.gen_range(1..3), cin, r.gen_range(k..k + 20), r.gen_range(k..k + 40)), &mut r);
                let w = random_weights(&spec, &mut r);
                KernelCase::Conv { x, spec, w }
            }
            2 => {
                let c = r.gen_range(1..9);
                let k = [3, 5][r.gen_range(0..2)];
                let spec = ConvSpec::depthwise(c, k, r.gen_range(1..3)).with_bias(r.gen_bool(0.5));
                let x = random_tensor(Shape::new(1, c, r.gen_range(k..k + 24), r.gen_range(k..k + 24)), &mut r);
                let w = random_weights(&spec, &mut r);
                KernelCase::Conv { x, spec, w }
            }
            3 => {
                let k = r.gen_range(1..5);
                let pad = r.gen_range(0..=k / 2);
                let x = random_tensor(Shape::new(1, r.gen_range(1..5), r.gen_range(k..k + 20), r.gen_range(k..k + 20)), &mut r);
                KernelCase::Pool { x, k, stride: r.gen_range(1..4), pad }
            }
            _ => {
                let (cin, cout) = (r.gen_range(1..6), r.gen_range(1..6));
                let k = [1, 3][r.gen_range(0..2)];
                let spec = ConvSpec::same(cin, cout, k, 1).with_bias(r.gen_bool(0.5));
                let bn = BatchNormParams {
                    gamma: (0..cout).map(|_| r.gen_range(0.5f32..2.0)).collect(),
                    beta: (0..cout).map(|_| r.gen_range(-1.0f32..1.0)).collect(),
                    running_mean: (0..cout).map(|_| r.gen_range(-1.0f32..1.0)).collect(),
                    running_var: (0..cout).map(|_| r.gen_range(1e-3f32..4.0)).collect(),
                    epsilon: 1e-5,
                };
                let x = random_tensor(Shape::new(1, cin, r.gen_range(3..20), r.gen_range(3..20)), &mut r);
                let w = random_weights(&spec, &mut r);
                KernelCase::Fold { x, spec, w, bn }
            }
        })
        .collect()
}

pub fn random_boxes(r: &mut ChaCha8Rng, n: usize) -> Vec<DetBox> {
    (0..n)
        .map(|_| {
            let x = r.gen_range(0.0f32..200.0);
            let y = r.gen_range(0.0f32..200.0);
            let w = r.gen_range(2.0f32..60.0);
            let h = r.gen_range(2.0f32..60.0);
            // coarse scores so ties are exercised
            DetBox::new(x, y, x + w, y + h, r.gen_range(0..50) as f32 / 50.0)
        })
        .collect()
}

pub fn reference_iou(a: &DetBox, b: &DetBox) -> f64 {
    let area = |b: &DetBox| ((b.x2 - b.x1).max(0.0) as f64) * ((b.y2 - b.y1).max(0.0) as f64);
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0) as f64;
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0) as f64;
    let union = area(a) + area(b) - iw * ih;
    if union <= 0.0 {
        0.0
    } else {
        iw * ih / union
    }
}

/// O(n²) greedy suppression straight from the definition: repeatedly take
/// the highest-scoring remaining box (lowest index on ties) and discard
/// every remaining box overlapping it by more than `thr`.
pub fn reference_nms(boxes: &[DetBox], thr: f32) -> Vec<DetBox> {
    let mut alive = vec![true; boxes.len()];
    let mut out = Vec::new();
    loop {
        let mut best: Option<usize> = None;
        for i in 0..boxes.len() {
            if alive[i] && best.is_none_or(|b| boxes[i].score > boxes[b].score) {
                best = Some(i);
            }
        }
        let Some(b) = best else { break };
        alive[b] = false;
        out.push(boxes[b]);
        for i in 0..boxes.len() {
            // identical f32 IoU as the implementation would make thresholds
            // ambiguous; the f64 value decides here
            if alive[i] && reference_iou(&boxes[b], &boxes[i]) > thr as f64 {
                alive[i] = false;
            }
        }
    }
    out
}

/// A deterministic 8-bit RGB gradient image.
pub fn write_ppm(path: &Path, width: usize, height: usize) {
    let rgb: Vec<u8> = (0..width * height)
        .flat_map(|i| {
            let (x, y) = (i % width, i / width);
            [(x * 255 / width.max(1)) as u8, (y * 255 / height.max(1)) as u8, ((x + y) % 256) as u8]
        })
        .collect();
    std::fs::write(path, eresfd::image::encode_ppm(width, height, &rgb)).unwrap();
}

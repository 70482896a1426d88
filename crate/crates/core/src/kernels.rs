//! CPU kernels: convolution (standard, grouped, depthwise), max pooling,
//! nearest upsampling, batch-norm folding and weighted feature fusion.
//!
//! Every kernel with a non-trivial fast path also keeps a naive reference
//! path, selected through [`KernelPath`]. The two are diffed by the tests.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

/// Which implementation a kernel runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelPath {
    /// Direct nested loops with per-element bounds checks.
    Naive,
    /// Row-blocked direct convolution with hoisted bounds.
    #[default]
    Optimized,
}

/// Execution knobs shared by kernels and the graph executor.
///
/// `threads == 1` is the deterministic single-threaded mode. With more
/// threads, kernels split work over output planes or channel blocks; each
/// output element is still computed by one thread in a fixed order, so
/// results stay bit-identical.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ExecOptions {
    pub threads: usize,
    pub path: KernelPath,
}

impl Default for ExecOptions {
    fn default() -> Self {
        ExecOptions {
            threads: 1,
            path: KernelPath::Optimized,
        }
    }
}

impl ExecOptions {
    pub fn naive() -> Self {
        ExecOptions {
            path: KernelPath::Naive,
            ..Self::default()
        }
    }

    fn parallel(&self) -> bool {
        self.threads > 1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ConvSpec {
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    pub in_channels: usize,
    pub out_channels: usize,
    pub groups: usize,
    pub has_bias: bool,
}

impl ConvSpec {
    /// Square standard convolution with bias.
    pub fn new(in_channels: usize, out_channels: usize, k: usize, stride: usize, pad: usize) -> Self {
        ConvSpec {
            kernel: (k, k),
            stride: (stride, stride),
            padding: (pad, pad),
            in_channels,
            out_channels,
            groups: 1,
            has_bias: true,
        }
    }

    /// Square convolution with "same"-style padding `(k - 1) / 2`.
    pub fn same(in_channels: usize, out_channels: usize, k: usize, stride: usize) -> Self {
        Self::new(in_channels, out_channels, k, stride, (k - 1) / 2)
    }

    pub fn depthwise(channels: usize, k: usize, stride: usize) -> Self {
        ConvSpec {
            groups: channels,
            ..Self::same(channels, channels, k, stride)
        }
    }

    pub fn with_bias(self, has_bias: bool) -> Self {
        ConvSpec { has_bias, ..self }
    }

    pub fn is_depthwise(&self) -> bool {
        self.groups > 1 && self.groups == self.in_channels && self.groups == self.out_channels
    }

    pub fn validate(&self) -> Result<()> {
        let (kh, kw) = self.kernel;
        let (sh, sw) = self.stride;
        if kh == 0 || kw == 0 || sh == 0 || sw == 0 {
            return Err(Error::invalid("conv", "kernel and stride must be positive"));
        }
        if self.in_channels == 0 || self.out_channels == 0 || self.groups == 0 {
            return Err(Error::invalid("conv", "channels and groups must be positive"));
        }
        if self.in_channels % self.groups != 0 || self.out_channels % self.groups != 0 {
            return Err(Error::invalid(
                "conv",
                format!(
                    "groups {} must divide in_channels {} and out_channels {}",
                    self.groups, self.in_channels, self.out_channels
                ),
            ));
        }
        Ok(())
    }

    /// `floor((h + 2p - k) / s) + 1` for each spatial axis.
    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let oh = out_dim(h, self.kernel.0, self.stride.0, self.padding.0);
        let ow = out_dim(w, self.kernel.1, self.stride.1, self.padding.1);
        match (oh, ow) {
            (Some(oh), Some(ow)) => Ok((oh, ow)),
            _ => Err(Error::invalid(
                "conv",
                format!("input {h}x{w} too small for kernel {:?} padding {:?}", self.kernel, self.padding),
            )),
        }
    }

    pub fn output_shape(&self, input: Shape) -> Result<Shape> {
        self.validate()?;
        if input.c != self.in_channels {
            return Err(Error::invalid(
                "conv",
                format!("input has {} channels, spec expects {}", input.c, self.in_channels),
            ));
        }
        let (oh, ow) = self.output_hw(input.h, input.w)?;
        Ok(Shape::new(input.n, self.out_channels, oh, ow))
    }

    /// Kernel dims `(out, in / groups, kh, kw)`.
    pub fn weight_shape(&self) -> Shape {
        Shape::new(
            self.out_channels,
            self.in_channels / self.groups,
            self.kernel.0,
            self.kernel.1,
        )
    }
}

pub(crate) fn out_dim(size: usize, k: usize, s: usize, p: usize) -> Option<usize> {
    let padded = size + 2 * p;
    if padded < k || s == 0 {
        None
    } else {
        Some((padded - k) / s + 1)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvWeights {
    pub kernel: Tensor,
    pub bias: Option<Vec<f32>>,
}

impl ConvWeights {
    pub fn check(&self, spec: &ConvSpec) -> Result<()> {
        if self.kernel.shape() != spec.weight_shape() {
            return Err(Error::ShapeMismatch {
                op: "conv weights",
                left: self.kernel.shape(),
                right: spec.weight_shape(),
            });
        }
        match &self.bias {
            Some(b) if b.len() != spec.out_channels => Err(Error::invalid(
                "conv weights",
                format!("bias has {} values for {} output channels", b.len(), spec.out_channels),
            )),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormParams {
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
    pub running_mean: Vec<f32>,
    pub running_var: Vec<f32>,
    pub epsilon: f32,
}

impl BatchNormParams {
    pub fn identity(channels: usize) -> Self {
        BatchNormParams {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            epsilon: 0.0,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    fn validate(&self) -> Result<()> {
        let c = self.gamma.len();
        if self.beta.len() != c || self.running_mean.len() != c || self.running_var.len() != c {
            return Err(Error::invalid("batchnorm", "parameter vectors differ in length"));
        }
        if self.epsilon < 0.0 || self.running_var.iter().any(|&v| v < 0.0 || v + self.epsilon <= 0.0) {
            return Err(Error::invalid("batchnorm", "variance + epsilon must be positive"));
        }
        Ok(())
    }

    fn scale(&self) -> impl Iterator<Item = f32> + '_ {
        self.gamma
            .iter()
            .zip(&self.running_var)
            .map(|(g, v)| g / (v + self.epsilon).sqrt())
    }
}

pub fn conv2d(x: &Tensor, spec: &ConvSpec, w: &ConvWeights) -> Result<Tensor> {
    conv2d_with(x, spec, w, &ExecOptions::default())
}

pub fn depthwise_conv2d(x: &Tensor, spec: &ConvSpec, w: &ConvWeights) -> Result<Tensor> {
    depthwise_conv2d_with(x, spec, w, &ExecOptions::default())
}

pub fn depthwise_conv2d_with(
    x: &Tensor,
    spec: &ConvSpec,
    w: &ConvWeights,
    opts: &ExecOptions,
) -> Result<Tensor> {
    if !(spec.groups == spec.in_channels && spec.groups == spec.out_channels) {
        return Err(Error::invalid(
            "depthwise_conv2d",
            format!(
                "groups {} must equal in {} and out {} channels",
                spec.groups, spec.in_channels, spec.out_channels
            ),
        ));
    }
    conv2d_with(x, spec, w, opts)
}

pub fn conv2d_with(x: &Tensor, spec: &ConvSpec, w: &ConvWeights, opts: &ExecOptions) -> Result<Tensor> {
    let out_shape = spec.output_shape(x.shape())?;
    w.check(spec)?;
    let mut out = Tensor::zeros(out_shape)?;
    if opts.path == KernelPath::Optimized && !spec.is_depthwise() {
        conv_gemm(x, spec, w, out_shape, out.data_mut(), opts);
        return Ok(out);
    }
    let plane = out_shape.plane();
    let job = |(idx, dst): (usize, &mut [f32])| match opts.path {
        KernelPath::Naive => conv_plane_naive(x, spec, w, idx, out_shape, dst),
        KernelPath::Optimized => conv_plane_rows(x, spec, w, idx, out_shape, dst),
    };
    if opts.parallel() {
        out.data_mut().par_chunks_mut(plane).enumerate().for_each(job);
    } else {
        out.data_mut().chunks_mut(plane).enumerate().for_each(job);
    }
    Ok(out)
}

fn conv_plane_naive(x: &Tensor, spec: &ConvSpec, w: &ConvWeights, idx: usize, out: Shape, dst: &mut [f32]) {
    let xs = x.shape();
    let (n, oc) = (idx / out.c, idx % out.c);
    let icg = spec.in_channels / spec.groups;
    let g = oc / (spec.out_channels / spec.groups);
    let (kh, kw) = spec.kernel;
    let k = w.kernel.data();
    for oy in 0..out.h {
        for ox in 0..out.w {
            let mut acc = 0f32;
            for icl in 0..icg {
                let ic = g * icg + icl;
                for ky in 0..kh {
                    for kx in 0..kw {
                        let iy = (oy * spec.stride.0 + ky) as isize - spec.padding.0 as isize;
                        let ix = (ox * spec.stride.1 + kx) as isize - spec.padding.1 as isize;
                        if iy < 0 || ix < 0 || iy >= xs.h as isize || ix >= xs.w as isize {
                            continue;
                        }
                        let wv = k[((oc * icg + icl) * kh + ky) * kw + kx];
                        acc += wv * x.at(n, ic, iy as usize, ix as usize);
                    }
                }
            }
            if let Some(b) = &w.bias {
                acc += b[oc];
            }
            dst[oy * out.w + ox] = acc;
        }
    }
}

/// Output pixels per im2col tile; bounds the column buffer to
/// `in_channels/groups · kh · kw · GEMM_TILE` floats.
const GEMM_TILE: usize = 1024;

/// Standard (and grouped) convolution as tiled im2col followed by a
/// register-blocked GEMM over output channels. Each output element sums its
/// `(ic, ky, kx)` terms in ascending order whatever the thread count.
fn conv_gemm(x: &Tensor, spec: &ConvSpec, w: &ConvWeights, out: Shape, dst: &mut [f32], opts: &ExecOptions) {
    let xs = x.shape();
    let icg = spec.in_channels / spec.groups;
    let ocg = spec.out_channels / spec.groups;
    let (kh, kw) = spec.kernel;
    let kdim = icg * kh * kw;
    let plane = out.plane();
    let pointwise = kh == 1 && kw == 1 && spec.stride == (1, 1) && spec.padding == (0, 0);
    let kernel = w.kernel.data();
    let mut col = Vec::new();

    for n in 0..xs.n {
        for g in 0..spec.groups {
            let planes = &mut dst[(n * out.c + g * ocg) * plane..(n * out.c + (g + 1) * ocg) * plane];
            let mut p0 = 0;
            while p0 < plane {
                let p1 = (p0 + GEMM_TILE).min(plane);
                let t = p1 - p0;
                // 1x1 stride-1 convs read the input planes directly
                let (cols, stride): (&[f32], usize) = if pointwise {
                    let base = (n * xs.c + g * icg) * plane;
                    (&x.data()[base + p0..base + icg * plane], plane)
                } else {
                    col.resize(kdim * t, 0.0);
                    im2col(x, spec, n, g * icg, out.w, p0, p1, &mut col);
                    (&col, t)
                };
                let mut rows: Vec<&mut [f32]> = planes.chunks_mut(plane).map(|pl| &mut pl[p0..p1]).collect();
                let job = |(b, block): (usize, &mut [&mut [f32]])| {
                    let oc0 = g * ocg + 4 * b;
                    for (r, row) in block.iter_mut().enumerate() {
                        row.fill(w.bias.as_ref().map_or(0.0, |bias| bias[oc0 + r]));
                    }
                    let wrows: Vec<&[f32]> = (0..block.len())
                        .map(|r| &kernel[(oc0 + r) * kdim..(oc0 + r + 1) * kdim])
                        .collect();
                    gemm_rows(block, &wrows, cols, stride, t);
                };
                if opts.parallel() && ocg > 4 {
                    rows.par_chunks_mut(4).enumerate().for_each(job);
                } else {
                    rows.chunks_mut(4).enumerate().for_each(job);
                }
                p0 = p1;
            }
        }
    }
}

/// Column matrix `[(ic, ky, kx), p]` for output pixels `p0..p1`, zero where
/// the kernel tap falls in the padding.
#[allow(clippy::too_many_arguments)]
fn im2col(x: &Tensor, spec: &ConvSpec, n: usize, ic0: usize, out_w: usize, p0: usize, p1: usize, col: &mut [f32]) {
    let xs = x.shape();
    let icg = spec.in_channels / spec.groups;
    let (kh, kw) = spec.kernel;
    let (sh, sw) = spec.stride;
    let (ph, pw) = spec.padding;
    let t = p1 - p0;
    let mut r = 0;
    for icl in 0..icg {
        let src = x.plane(n, ic0 + icl);
        for ky in 0..kh {
            for kx in 0..kw {
                let dst = &mut col[r * t..(r + 1) * t];
                let (ox0, ox1) = valid_range(out_w, xs.w, kx, sw, pw);
                let mut p = p0;
                while p < p1 {
                    // one output row segment [p, end)
                    let (oy, ox_start) = (p / out_w, p % out_w);
                    let end = (p - ox_start + out_w).min(p1);
                    let seg = &mut dst[p - p0..end - p0];
                    let iy = (oy * sh + ky).wrapping_sub(ph);
                    if iy >= xs.h {
                        seg.fill(0.0);
                    } else {
                        let in_row = &src[iy * xs.w..(iy + 1) * xs.w];
                        let ox_end = ox_start + seg.len();
                        let (a, b) = (ox0.clamp(ox_start, ox_end), ox1.clamp(ox_start, ox_end).max(ox0.clamp(ox_start, ox_end)));
                        seg[..a - ox_start].fill(0.0);
                        seg[b - ox_start..].fill(0.0);
                        let inner = &mut seg[a - ox_start..b - ox_start];
                        if a < b {
                            let ix0 = a * sw + kx - pw;
                            if sw == 1 {
                                inner.copy_from_slice(&in_row[ix0..ix0 + inner.len()]);
                            } else {
                                for (d, v) in inner.iter_mut().zip(in_row[ix0..].iter().step_by(sw)) {
                                    *d = *v;
                                }
                            }
                        }
                    }
                    p = end;
                }
                r += 1;
            }
        }
    }
}

/// `rows[r] += Σ_k wrows[r][k] · cols[k·stride ..][..t]`. Blocks of four
/// rows by eight pixels accumulate in registers across the whole `k` loop.
fn gemm_rows(rows: &mut [&mut [f32]], wrows: &[&[f32]], cols: &[f32], stride: usize, t: usize) {
    const J: usize = 8;
    let kdim = wrows[0].len();
    if let [r0, r1, r2, r3] = rows {
        let (w0, w1, w2, w3) = (wrows[0], wrows[1], wrows[2], wrows[3]);
        let mut j = 0;
        while j + J <= t {
            let mut acc = [[0f32; J]; 4];
            for k in 0..kdim {
                let c: &[f32; J] = cols[k * stride + j..k * stride + j + J].try_into().unwrap();
                let w = [w0[k], w1[k], w2[k], w3[k]];
                for r in 0..4 {
                    for l in 0..J {
                        acc[r][l] += w[r] * c[l];
                    }
                }
            }
            for (row, a) in [&mut **r0, &mut **r1, &mut **r2, &mut **r3].into_iter().zip(&acc) {
                for (o, v) in row[j..j + J].iter_mut().zip(a) {
                    *o += v;
                }
            }
            j += J;
        }
        if j < t {
            let mut tail: Vec<&mut [f32]> = vec![&mut r0[j..t], &mut r1[j..t], &mut r2[j..t], &mut r3[j..t]];
            gemm_rows_simple(&mut tail, wrows, &cols[j..], stride, t - j);
        }
        return;
    }
    gemm_rows_simple(rows, wrows, cols, stride, t);
}

fn gemm_rows_simple(rows: &mut [&mut [f32]], wrows: &[&[f32]], cols: &[f32], stride: usize, t: usize) {
    for (row, wr) in rows.iter_mut().zip(wrows) {
        let row = &mut row[..t];
        for (k, &wv) in wr.iter().enumerate() {
            let c = &cols[k * stride..k * stride + t];
            for (o, v) in row.iter_mut().zip(c) {
                *o += wv * v;
            }
        }
    }
}

/// Valid output range `[lo, hi)` along one axis for kernel offset `k`.
fn valid_range(out: usize, input: usize, k: usize, s: usize, p: usize) -> (usize, usize) {
    // ix = ox * s + k - p must lie in [0, input)
    let lo = if p > k { (p - k).div_ceil(s) } else { 0 };
    let hi = if input + p > k {
        ((input + p - k - 1) / s + 1).min(out)
    } else {
        0
    };
    (lo, hi.max(lo))
}

fn conv_plane_rows(x: &Tensor, spec: &ConvSpec, w: &ConvWeights, idx: usize, out: Shape, dst: &mut [f32]) {
    let xs = x.shape();
    let (n, oc) = (idx / out.c, idx % out.c);
    let icg = spec.in_channels / spec.groups;
    let g = oc / (spec.out_channels / spec.groups);
    let (kh, kw) = spec.kernel;
    let (sh, sw) = spec.stride;
    let (ph, pw) = spec.padding;
    let k = w.kernel.data();

    dst.fill(w.bias.as_ref().map_or(0.0, |b| b[oc]));
    let col_ranges: Vec<(usize, usize)> = (0..kw).map(|kx| valid_range(out.w, xs.w, kx, sw, pw)).collect();

    for icl in 0..icg {
        let src = x.plane(n, g * icg + icl);
        let kbase = (oc * icg + icl) * kh * kw;
        for ky in 0..kh {
            let (oy0, oy1) = valid_range(out.h, xs.h, ky, sh, ph);
            for oy in oy0..oy1 {
                let iy = oy * sh + ky - ph;
                let in_row = &src[iy * xs.w..(iy + 1) * xs.w];
                let out_row = &mut dst[oy * out.w..(oy + 1) * out.w];
                for (kx, &(ox0, ox1)) in col_ranges.iter().enumerate() {
                    let wv = k[kbase + ky * kw + kx];
                    if ox0 >= ox1 {
                        continue;
                    }
                    let ix0 = ox0 * sw + kx - pw;
                    if sw == 1 {
                        let len = ox1 - ox0;
                        for (o, i) in out_row[ox0..ox1].iter_mut().zip(&in_row[ix0..ix0 + len]) {
                            *o += wv * i;
                        }
                    } else {
                        for (o, i) in out_row[ox0..ox1].iter_mut().zip(in_row[ix0..].iter().step_by(sw)) {
                            *o += wv * i;
                        }
                    }
                }
            }
        }
    }
}

pub fn maxpool2d(x: &Tensor, kernel: usize, stride: usize, padding: usize) -> Result<Tensor> {
    maxpool2d_with(x, kernel, stride, padding, &ExecOptions::default())
}

pub fn maxpool2d_with(
    x: &Tensor,
    kernel: usize,
    stride: usize,
    padding: usize,
    opts: &ExecOptions,
) -> Result<Tensor> {
    let out_shape = maxpool_shape(x.shape(), kernel, stride, padding)?;
    let s = x.shape();
    let mut out = Tensor::zeros(out_shape)?;
    let job = |(idx, dst): (usize, &mut [f32])| {
        let src = x.plane(idx / s.c, idx % s.c);
        match opts.path {
            KernelPath::Naive => {
                for oy in 0..out_shape.h {
                    for ox in 0..out_shape.w {
                        let mut m = f32::NEG_INFINITY;
                        for ky in 0..kernel {
                            for kx in 0..kernel {
                                let iy = (oy * stride + ky) as isize - padding as isize;
                                let ix = (ox * stride + kx) as isize - padding as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < s.h && (ix as usize) < s.w {
                                    m = m.max(src[iy as usize * s.w + ix as usize]);
                                }
                            }
                        }
                        dst[oy * out_shape.w + ox] = m;
                    }
                }
            }
            KernelPath::Optimized => {
                dst.fill(f32::NEG_INFINITY);
                for ky in 0..kernel {
                    let (oy0, oy1) = valid_range(out_shape.h, s.h, ky, stride, padding);
                    for oy in oy0..oy1 {
                        let iy = oy * stride + ky - padding;
                        let in_row = &src[iy * s.w..(iy + 1) * s.w];
                        let out_row = &mut dst[oy * out_shape.w..(oy + 1) * out_shape.w];
                        for kx in 0..kernel {
                            let (ox0, ox1) = valid_range(out_shape.w, s.w, kx, stride, padding);
                            for ox in ox0..ox1 {
                                let v = in_row[ox * stride + kx - padding];
                                if v > out_row[ox] {
                                    out_row[ox] = v;
                                }
                            }
                        }
                    }
                }
            }
        }
    };
    let plane = out_shape.plane();
    if opts.parallel() {
        out.data_mut().par_chunks_mut(plane).enumerate().for_each(job);
    } else {
        out.data_mut().chunks_mut(plane).enumerate().for_each(job);
    }
    Ok(out)
}

pub fn maxpool_shape(input: Shape, kernel: usize, stride: usize, padding: usize) -> Result<Shape> {
    if kernel == 0 || stride == 0 {
        return Err(Error::invalid("maxpool2d", "kernel and stride must be positive"));
    }
    if 2 * padding > kernel {
        return Err(Error::invalid("maxpool2d", "padding exceeds half the kernel"));
    }
    match (
        out_dim(input.h, kernel, stride, padding),
        out_dim(input.w, kernel, stride, padding),
    ) {
        (Some(h), Some(w)) if h > 0 && w > 0 => Ok(Shape::new(input.n, input.c, h, w)),
        _ => Err(Error::invalid(
            "maxpool2d",
            format!("input {}x{} too small for kernel {kernel}", input.h, input.w),
        )),
    }
}

pub fn upsample_nearest2x(x: &Tensor) -> Tensor {
    let s = x.shape();
    upsample_nearest_to(x, 2 * s.h, 2 * s.w).expect("2x target is always in range")
}

/// Nearest 2x upsampling cropped to `h × w`: `out[i][j] = x[i / 2][j / 2]`.
///
/// Used to line up a pyramid level whose parent had odd spatial size.
pub fn upsample_nearest_to(x: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let s = x.shape();
    if h > 2 * s.h || w > 2 * s.w || h == 0 || w == 0 {
        return Err(Error::invalid(
            "upsample",
            format!("target {h}x{w} outside 2x of {}x{}", s.h, s.w),
        ));
    }
    let out_shape = Shape::new(s.n, s.c, h, w);
    let mut data = Vec::with_capacity(out_shape.numel()?);
    for n in 0..s.n {
        for c in 0..s.c {
            let src = x.plane(n, c);
            for i in 0..h {
                let row = &src[(i / 2) * s.w..(i / 2 + 1) * s.w];
                data.extend((0..w).map(|j| row[j / 2]));
            }
        }
    }
    Tensor::from_vec(out_shape, data)
}

/// Folds inference-mode batch norm into the preceding convolution:
/// `scale = gamma / sqrt(var + eps)`, kernel rows scaled by `scale`,
/// `bias' = beta + (bias - mean) * scale`.
pub fn fold_batchnorm(spec: &ConvSpec, w: &ConvWeights, bn: &BatchNormParams) -> Result<ConvWeights> {
    w.check(spec)?;
    bn.validate()?;
    if bn.channels() != spec.out_channels {
        return Err(Error::invalid(
            "fold_batchnorm",
            format!("{} norm channels for {} output channels", bn.channels(), spec.out_channels),
        ));
    }
    let per_out = spec.weight_shape().numel()? / spec.out_channels;
    let mut kernel = w.kernel.clone();
    let mut bias = Vec::with_capacity(spec.out_channels);
    for (oc, scale) in bn.scale().enumerate() {
        for v in &mut kernel.data_mut()[oc * per_out..(oc + 1) * per_out] {
            *v *= scale;
        }
        let b = w.bias.as_ref().map_or(0.0, |b| b[oc]);
        bias.push(bn.beta[oc] + (b - bn.running_mean[oc]) * scale);
    }
    Ok(ConvWeights {
        kernel,
        bias: Some(bias),
    })
}

/// Inference-mode batch norm, the unfused reference for [`fold_batchnorm`].
pub fn batchnorm(x: &Tensor, bn: &BatchNormParams) -> Result<Tensor> {
    bn.validate()?;
    let s = x.shape();
    if bn.channels() != s.c {
        return Err(Error::invalid("batchnorm", "channel count mismatch"));
    }
    let mut out = x.clone();
    let p = s.plane();
    for (i, plane) in out.data_mut().chunks_mut(p).enumerate() {
        let c = i % s.c;
        let scale = bn.gamma[c] / (bn.running_var[c] + bn.epsilon).sqrt();
        for v in plane {
            *v = (*v - bn.running_mean[c]) * scale + bn.beta[c];
        }
    }
    Ok(out)
}

/// `Σ wᵢ·xᵢ / (Σ wᵢ + ε)` with weights clamped at zero first.
pub fn weighted_fusion(xs: &[&Tensor], weights: &[f32], epsilon: f32) -> Result<Tensor> {
    let first = xs
        .first()
        .ok_or_else(|| Error::invalid("weighted_fusion", "no inputs"))?;
    if weights.len() != xs.len() {
        return Err(Error::invalid(
            "weighted_fusion",
            format!("{} weights for {} inputs", weights.len(), xs.len()),
        ));
    }
    for x in xs {
        if x.shape() != first.shape() {
            return Err(Error::ShapeMismatch {
                op: "weighted_fusion",
                left: first.shape(),
                right: x.shape(),
            });
        }
    }
    let clamped: Vec<f32> = weights.iter().map(|w| w.max(0.0)).collect();
    let norm = clamped.iter().sum::<f32>() + epsilon;
    if norm <= 0.0 {
        return Err(Error::invalid("weighted_fusion", "weights and epsilon sum to zero"));
    }
    let mut out = Tensor::zeros(first.shape())?;
    for (x, w) in xs.iter().zip(&clamped) {
        let coef = w / norm;
        for (o, v) in out.data_mut().iter_mut().zip(x.data()) {
            *o += coef * v;
        }
    }
    Ok(out)
}

/// Max-out background reduction: the first `background` channels collapse to
/// their maximum, the remaining face channel is passed through. Output has
/// two channels `(background, face)`.
pub fn maxout_background(x: &Tensor, background: usize) -> Result<Tensor> {
    let s = x.shape();
    if background == 0 || s.c != background + 1 {
        return Err(Error::invalid(
            "maxout",
            format!("expected {} channels, got {}", background + 1, s.c),
        ));
    }
    let p = s.plane();
    let mut data = Vec::with_capacity(s.n * 2 * p);
    for n in 0..s.n {
        let bg: Vec<f32> = (0..p)
            .map(|i| {
                (0..background)
                    .map(|c| x.plane(n, c)[i])
                    .fold(f32::NEG_INFINITY, f32::max)
            })
            .collect();
        data.extend(bg);
        data.extend_from_slice(x.plane(n, background));
    }
    Tensor::from_vec(s.with_channels(2), data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: Shape, rng: &mut ChaCha8Rng) -> Tensor {
        let data = (0..shape.numel().unwrap()).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
        Tensor::from_vec(shape, data).unwrap()
    }

    fn random_weights(spec: &ConvSpec, rng: &mut ChaCha8Rng) -> ConvWeights {
        ConvWeights {
            kernel: random(spec.weight_shape(), rng),
            bias: spec
                .has_bias
                .then(|| (0..spec.out_channels).map(|_| rng.gen_range(-1.0..1.0)).collect()),
        }
    }

    fn assert_close(a: &Tensor, b: &Tensor, rel: f32) {
        assert_eq!(a.shape(), b.shape());
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() <= rel * y.abs().max(1.0), "{x} vs {y}");
        }
    }

    #[test]
    fn identity_1x1() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random(Shape::new(1, 1, 5, 4), &mut rng);
        let spec = ConvSpec::new(1, 1, 1, 1, 0);
        let w = ConvWeights {
            kernel: Tensor::full(spec.weight_shape(), 1.0).unwrap(),
            bias: Some(vec![0.0]),
        };
        for opts in [ExecOptions::default(), ExecOptions::naive()] {
            assert_eq!(conv2d_with(&x, &spec, &w, &opts).unwrap(), x);
        }
    }

    #[test]
    fn bias_only() {
        let x = Tensor::full(Shape::new(1, 2, 6, 6), 3.0).unwrap();
        let spec = ConvSpec::same(2, 3, 3, 1);
        let w = ConvWeights {
            kernel: Tensor::zeros(spec.weight_shape()).unwrap(),
            bias: Some(vec![7.0; 3]),
        };
        let y = conv2d(&x, &spec, &w).unwrap();
        assert_eq!(y.shape(), Shape::new(1, 3, 6, 6));
        assert!(y.data().iter().all(|&v| v == 7.0));
    }

    #[test]
    fn errors() {
        let x = Tensor::zeros(Shape::new(1, 3, 4, 4)).unwrap();
        let spec = ConvSpec::same(2, 2, 3, 1);
        let w = ConvWeights {
            kernel: Tensor::zeros(spec.weight_shape()).unwrap(),
            bias: None,
        };
        assert!(conv2d(&x, &spec, &w).is_err());
        let big = ConvSpec::new(3, 1, 7, 1, 0);
        let w = ConvWeights {
            kernel: Tensor::zeros(big.weight_shape()).unwrap(),
            bias: None,
        };
        assert!(conv2d(&x, &big, &w).is_err());
        assert!(depthwise_conv2d(&x, &ConvSpec::same(3, 3, 3, 1), &w).is_err());
        assert!(maxpool2d(&x, 7, 1, 0).is_err());
    }

    #[test]
    fn depthwise_channel_separation() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let spec = ConvSpec::depthwise(4, 3, 1);
        let w = random_weights(&spec, &mut rng);
        let mut x = random(Shape::new(1, 4, 8, 8), &mut rng);
        x.data_mut()[..64].fill(0.0);
        let mut w0 = w.clone();
        w0.bias.as_mut().unwrap()[0] = 0.0;
        let y = depthwise_conv2d(&x, &spec, &w0).unwrap();
        assert!(y.plane(0, 0).iter().all(|&v| v == 0.0));

        let ones = ConvWeights {
            kernel: Tensor::full(ConvSpec::depthwise(4, 1, 1).weight_shape(), 1.0).unwrap(),
            bias: None,
        };
        assert_eq!(depthwise_conv2d(&x, &ConvSpec::depthwise(4, 1, 1).with_bias(false), &ones).unwrap(), x);
    }

    #[test]
    fn optimized_matches_naive_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for case in 0..60 {
            let k = [1, 3, 5, 7][case % 4];
            let s = [1, 2, 4][case % 3];
            let groups = [1, 2][case % 2];
            let cin = 2 * rng.gen_range(1..4);
            let cout = 2 * rng.gen_range(1..4);
            let h = rng.gen_range(k..k + 12);
            let w = rng.gen_range(k..k + 12);
            let p = rng.gen_range(0..=k / 2 + 1);
            let spec = ConvSpec {
                kernel: (k, k),
                stride: (s, s),
                padding: (p, p),
                in_channels: cin,
                out_channels: cout,
                groups,
                has_bias: case % 5 != 0,
            };
            let x = random(Shape::new(1 + case % 2, cin, h, w), &mut rng);
            let wt = random_weights(&spec, &mut rng);
            let a = conv2d_with(&x, &spec, &wt, &ExecOptions::default()).unwrap();
            let b = conv2d_with(&x, &spec, &wt, &ExecOptions::naive()).unwrap();
            assert_close(&a, &b, 1e-5);
            let par = ExecOptions { threads: 3, ..ExecOptions::default() };
            assert_eq!(conv2d_with(&x, &spec, &wt, &par).unwrap(), a);
        }
    }

    #[test]
    fn maxpool_cases() {
        let x = Tensor::full(Shape::new(1, 2, 7, 7), 2.5).unwrap();
        assert!(maxpool2d(&x, 3, 2, 1).unwrap().data().iter().all(|&v| v == 2.5));
        let x = Tensor::from_vec(Shape::new(1, 1, 2, 2), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(maxpool2d(&x, 2, 2, 0).unwrap().data(), &[4.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random(Shape::new(1, 3, 11, 9), &mut rng);
        let a = maxpool2d_with(&x, 3, 2, 1, &ExecOptions::default()).unwrap();
        let b = maxpool2d_with(&x, 3, 2, 1, &ExecOptions::naive()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn upsample_cases() {
        let x = Tensor::full(Shape::new(1, 1, 1, 1), 5.0).unwrap();
        assert_eq!(upsample_nearest2x(&x).data(), &[5.0; 4]);

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random(Shape::new(1, 16, 5, 7), &mut rng);
        let y = upsample_nearest2x(&x);
        assert_eq!(y.shape(), Shape::new(1, 16, 10, 14));
        for c in 0..16 {
            for i in 0..10 {
                for j in 0..14 {
                    assert_eq!(y.at(0, c, i, j), x.at(0, c, i / 2, j / 2));
                }
            }
            for i in 0..5 {
                for j in 0..7 {
                    assert_eq!(y.at(0, c, 2 * i, 2 * j), x.at(0, c, i, j));
                }
            }
        }
        let cropped = upsample_nearest_to(&x, 9, 14).unwrap();
        assert_eq!(cropped.shape(), Shape::new(1, 16, 9, 14));
        assert!(upsample_nearest_to(&x, 11, 14).is_err());
    }

    #[test]
    fn fold_identity_and_linearity() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let spec = ConvSpec::same(3, 4, 3, 1).with_bias(false);
        let w = random_weights(&spec, &mut rng);
        let folded = fold_batchnorm(&spec, &w, &BatchNormParams::identity(4)).unwrap();
        assert_eq!(folded.kernel, w.kernel);
        assert_eq!(folded.bias, Some(vec![0.0; 4]));

        let mut bn = BatchNormParams::identity(4);
        bn.gamma = vec![2.0; 4];
        let doubled = fold_batchnorm(&spec, &w, &bn).unwrap();
        for (a, b) in doubled.kernel.data().iter().zip(w.kernel.data()) {
            assert_eq!(*a, 2.0 * b);
        }

        bn.gamma.pop();
        assert!(fold_batchnorm(&spec, &w, &bn).is_err());
    }

    #[test]
    fn fold_two_path_equivalence() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for trial in 0..20 {
            let spec = ConvSpec::same(4, 6, [1, 3][trial % 2], 1 + trial % 2).with_bias(trial % 3 == 0);
            let w = random_weights(&spec, &mut rng);
            let bn = BatchNormParams {
                gamma: (0..6).map(|_| rng.gen_range(0.1..2.0)).collect(),
                beta: (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                running_mean: (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                running_var: (0..6).map(|_| rng.gen_range(1e-3..2.0)).collect(),
                epsilon: 1e-5,
            };
            let x = random(Shape::new(1, 4, 9, 9), &mut rng);
            let two_step = batchnorm(&conv2d(&x, &spec, &w).unwrap(), &bn).unwrap();
            let folded = fold_batchnorm(&spec, &w, &bn).unwrap();
            let fused = conv2d(&x, &spec.with_bias(true), &folded).unwrap();
            assert_close(&fused, &two_step, 1e-5);
        }
    }

    #[test]
    fn fusion_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let a = random(Shape::new(1, 2, 3, 3), &mut rng);
        let b = random(Shape::new(1, 2, 3, 3), &mut rng);

        let single = weighted_fusion(&[&a], &[1.0], 1e-4).unwrap();
        assert_close(&single, &a, 2e-4);
        let same = weighted_fusion(&[&a, &a], &[0.7, 0.7], 1e-4).unwrap();
        assert_close(&same, &a, 2e-4);

        let out = weighted_fusion(&[&a, &b], &[1.0, 3.0], 1e-4).unwrap();
        for i in 0..a.data().len() {
            let expect = (a.data()[i] + 3.0 * b.data()[i]) / (4.0 + 1e-4);
            assert!((out.data()[i] - expect).abs() <= 1e-6);
        }

        // negative weights are clamped to zero
        let clamped = weighted_fusion(&[&a, &b], &[1.0, -5.0], 0.0).unwrap();
        assert_close(&clamped, &a, 1e-6);

        assert!(weighted_fusion(&[], &[], 1e-4).is_err());
        let c = random(Shape::new(1, 1, 3, 3), &mut rng);
        assert!(weighted_fusion(&[&a, &c], &[1.0, 1.0], 1e-4).is_err());
        assert!(weighted_fusion(&[&a], &[1.0, 1.0], 1e-4).is_err());
    }

    #[test]
    fn maxout_reduces_background() {
        let x = Tensor::from_vec(Shape::new(1, 4, 1, 2), vec![1.0, -1.0, 3.0, 0.0, 2.0, 5.0, 9.0, 8.0]).unwrap();
        let y = maxout_background(&x, 3).unwrap();
        assert_eq!(y.shape(), Shape::new(1, 2, 1, 2));
        assert_eq!(y.data(), &[3.0, 5.0, 9.0, 8.0]);
        assert!(maxout_background(&x, 2).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn fusion_within_scaled_hull(seed in 0u64..500, w0 in 0.0f32..4.0, w1 in 0.0f32..4.0, w2 in 0.0f32..4.0) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let s = Shape::new(1, 2, 3, 3);
                let xs = [random(s, &mut rng), random(s, &mut rng), random(s, &mut rng)];
                let ws = [w0, w1, w2];
                let eps = 1e-4;
                let out = weighted_fusion(&[&xs[0], &xs[1], &xs[2]], &ws, eps).unwrap();
                let sum: f32 = ws.iter().sum();
                let scale = sum / (sum + eps);
                for i in 0..out.data().len() {
                    let vals = xs.iter().map(|x| x.data()[i]);
                    let lo = vals.clone().fold(f32::INFINITY, f32::min);
                    let hi = vals.fold(f32::NEG_INFINITY, f32::max);
                    let v = out.data()[i];
                    prop_assert!(v >= lo * scale - 1e-5 && v <= hi * scale + 1e-5);
                }
            }
        }
    }
}

//! Dense NCHW `f32` tensors and the elementwise primitives shared by every
//! other module.
//!
//! Layout is fixed to row-major `(n, c, h, w)`. Tensors are plain values:
//! every operation returns a fresh tensor and never mutates its inputs.

use std::fmt;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Shape { n, c, h, w }
    }

    /// Total element count, or `None` on overflow.
    pub fn checked_numel(&self) -> Option<usize> {
        self.n
            .checked_mul(self.c)?
            .checked_mul(self.h)?
            .checked_mul(self.w)
    }

    pub fn numel(&self) -> Result<usize> {
        self.checked_numel()
            .ok_or_else(|| Error::invalid("shape", format!("{self} overflows usize")))
    }

    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    pub fn with_channels(self, c: usize) -> Self {
        Shape { c, ..self }
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {}, {})", self.n, self.c, self.h, self.w)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f32>,
}

impl Tensor {
    pub fn from_vec(shape: Shape, data: Vec<f32>) -> Result<Self> {
        let numel = shape.numel()?;
        if data.len() != numel {
            return Err(Error::invalid(
                "tensor",
                format!("shape {shape} needs {numel} values, got {}", data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn full(shape: Shape, value: f32) -> Result<Self> {
        Ok(Tensor {
            shape,
            data: vec![value; shape.numel()?],
        })
    }

    pub fn zeros(shape: Shape) -> Result<Self> {
        Self::full(shape, 0.0)
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> f32 {
        let s = self.shape;
        self.data[((n * s.c + c) * s.h + h) * s.w + w]
    }

    /// The `h × w` plane for batch `n`, channel `c`.
    pub fn plane(&self, n: usize, c: usize) -> &[f32] {
        let p = self.shape.plane();
        let start = (n * self.shape.c + c) * p;
        &self.data[start..start + p]
    }

    /// Copies channels `start..start + len` into a new tensor.
    pub fn slice_channels(&self, start: usize, len: usize) -> Result<Tensor> {
        let s = self.shape;
        if start + len > s.c {
            return Err(Error::invalid(
                "slice_channels",
                format!("range {start}..{} exceeds {} channels", start + len, s.c),
            ));
        }
        let p = s.plane();
        let mut data = Vec::with_capacity(s.n * len * p);
        for n in 0..s.n {
            let base = (n * s.c + start) * p;
            data.extend_from_slice(&self.data[base..base + len * p]);
        }
        Tensor::from_vec(s.with_channels(len), data)
    }

    /// Serializes to the fixture blob layout: four little-endian `u32` dims
    /// `(n, c, h, w)` followed by the little-endian `f32` payload.
    pub fn to_blob(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + 4 * self.data.len());
        for d in self.shape.dims() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_blob(bytes: &[u8]) -> Result<Tensor> {
        if bytes.len() < 16 {
            return Err(Error::invalid("blob", "shorter than the 16-byte header"));
        }
        let mut dims = [0usize; 4];
        for (i, d) in dims.iter_mut().enumerate() {
            let b = &bytes[4 * i..4 * i + 4];
            *d = u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize;
        }
        let shape = Shape::new(dims[0], dims[1], dims[2], dims[3]);
        let numel = shape.numel()?;
        let payload = &bytes[16..];
        if Some(payload.len()) != numel.checked_mul(4) {
            return Err(Error::invalid(
                "blob",
                format!(
                    "shape {shape} needs {} payload bytes, found {}",
                    numel.saturating_mul(4),
                    payload.len()
                ),
            ));
        }
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Tensor::from_vec(shape, data)
    }

    pub fn write_blob(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut file = std::fs::File::create(path).map_err(|e| Error::file(path, e))?;
        file.write_all(&self.to_blob())
            .map_err(|e| Error::file(path, e))
    }

    pub fn read_blob(path: impl AsRef<Path>) -> Result<Tensor> {
        let path = path.as_ref();
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::file(path, e))?;
        Tensor::from_blob(&bytes)
    }
}

pub fn elementwise_add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape != b.shape {
        return Err(Error::ShapeMismatch {
            op: "elementwise_add",
            left: a.shape,
            right: b.shape,
        });
    }
    let data = a.data.iter().zip(&b.data).map(|(x, y)| x + y).collect();
    Ok(Tensor {
        shape: a.shape,
        data,
    })
}

pub fn relu(x: &Tensor) -> Tensor {
    Tensor {
        shape: x.shape,
        data: x.data.iter().map(|&v| v.max(0.0)).collect(),
    }
}

/// Softmax over consecutive blocks of `group` channels at every spatial
/// location. Uses max-subtraction so large logits do not overflow.
pub fn softmax_channels(x: &Tensor, group: usize) -> Result<Tensor> {
    let s = x.shape;
    if group == 0 || s.c % group != 0 {
        return Err(Error::invalid(
            "softmax_channels",
            format!("{} channels not divisible into groups of {group}", s.c),
        ));
    }
    let p = s.plane();
    let mut out = x.clone();
    let mut buf = vec![0f32; group];
    for n in 0..s.n {
        for g in 0..s.c / group {
            let base = (n * s.c + g * group) * p;
            for i in 0..p {
                let mut max = f32::NEG_INFINITY;
                for (k, b) in buf.iter_mut().enumerate() {
                    *b = x.data[base + k * p + i];
                    max = max.max(*b);
                }
                let mut sum = 0.0;
                for b in buf.iter_mut() {
                    *b = (*b - max).exp();
                    sum += *b;
                }
                for (k, b) in buf.iter().enumerate() {
                    out.data[base + k * p + i] = b / sum;
                }
            }
        }
    }
    Ok(out)
}

pub fn concat_channels(xs: &[&Tensor]) -> Result<Tensor> {
    let first = xs
        .first()
        .ok_or_else(|| Error::invalid("concat_channels", "no inputs"))?;
    let base = first.shape;
    for x in xs {
        let s = x.shape;
        if (s.n, s.h, s.w) != (base.n, base.h, base.w) {
            return Err(Error::ShapeMismatch {
                op: "concat_channels",
                left: base,
                right: s,
            });
        }
    }
    let c: usize = xs.iter().map(|x| x.shape.c).sum();
    let shape = base.with_channels(c);
    let p = base.plane();
    let mut data = Vec::with_capacity(shape.numel()?);
    for n in 0..base.n {
        for x in xs {
            let len = x.shape.c * p;
            data.extend_from_slice(&x.data[n * len..(n + 1) * len]);
        }
    }
    Tensor::from_vec(shape, data)
}

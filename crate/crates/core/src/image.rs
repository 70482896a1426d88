use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

/// Per-channel means subtracted from BGR pixels.
pub const BGR_MEANS: [f32; 3] = [104.0, 117.0, 123.0];

/// Loads an image as a `(1, 3, H, W)` network input.
///
/// Binary PPM (`P6`, 8-bit) is converted to BGR with the channel means
/// subtracted. A raw tensor blob (16-byte dims header plus `f32` payload
/// whose size matches) is returned as-is, already preprocessed.
pub fn load_image(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::file(path, e))?;
    decode_image(&bytes)
}

pub fn decode_image(bytes: &[u8]) -> Result<Tensor> {
    if bytes.starts_with(b"P6") {
        let (w, h, rgb) = parse_ppm(bytes)?;
        return Ok(preprocess_rgb(w, h, &rgb));
    }
    if is_blob(bytes) {
        let t = Tensor::from_blob(bytes)?;
        if t.shape().n != 1 || t.shape().c != 3 {
            return Err(Error::MalformedImage(format!("raw input {} is not 1x3xHxW", t.shape())));
        }
        return Ok(t);
    }
    let magic: String = bytes
        .iter()
        .take(2)
        .map(|&b| if b.is_ascii_graphic() { b as char } else { '?' })
        .collect();
    Err(Error::UnsupportedImage { magic })
}

fn is_blob(bytes: &[u8]) -> bool {
    if bytes.len() < 16 {
        return false;
    }
    let dim = |i: usize| u32::from_le_bytes(bytes[4 * i..4 * i + 4].try_into().unwrap()) as u64;
    let numel = (0..4).try_fold(1u64, |acc, i| acc.checked_mul(dim(i)));
    numel.and_then(|n| n.checked_mul(4)).and_then(|n| n.checked_add(16)) == Some(bytes.len() as u64)
}

/// Parses a binary PPM, returning `(width, height, rgb)`.
pub fn parse_ppm(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        // whitespace and comments
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::MalformedImage("bad PPM header".into()))?;
    }
    let [w, h, maxval] = fields;
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(Error::MalformedImage("bad PPM header".into()));
    }
    pos += 1;
    if maxval == 0 || maxval > 255 {
        return Err(Error::MalformedImage(format!("unsupported PPM maxval {maxval}")));
    }
    if w == 0 || h == 0 {
        return Err(Error::MalformedImage("empty PPM".into()));
    }
    let len = w
        .checked_mul(h)
        .and_then(|n| n.checked_mul(3))
        .ok_or_else(|| Error::MalformedImage("PPM too large".into()))?;
    let data = bytes
        .get(pos..pos + len)
        .ok_or_else(|| Error::MalformedImage(format!("PPM payload shorter than {len} bytes")))?;
    Ok((w, h, data.to_vec()))
}

pub fn encode_ppm(width: usize, height: usize, rgb: &[u8]) -> Vec<u8> {
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(rgb);
    out
}

/// Interleaved RGB bytes to a mean-subtracted planar BGR tensor.
pub fn preprocess_rgb(width: usize, height: usize, rgb: &[u8]) -> Tensor {
    let p = width * height;
    let mut data = vec![0f32; 3 * p];
    for i in 0..p {
        for (c, src) in [2usize, 1, 0].into_iter().enumerate() {
            data[c * p + i] = rgb[3 * i + src] as f32 - BGR_MEANS[c];
        }
    }
    Tensor::from_vec(Shape::new(1, 3, height, width), data).expect("shape matches payload")
}

/// Bilinear resize with half-pixel centers and edge clamping.
pub fn resize_bilinear(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let s = x.shape();
    if out_h == 0 || out_w == 0 {
        return Err(Error::invalid("resize", "target size must be positive"));
    }
    if (out_h, out_w) == (s.h, s.w) {
        return Ok(x.clone());
    }
    let taps = |out: usize, inp: usize| -> Vec<(usize, usize, f32)> {
        let scale = inp as f32 / out as f32;
        (0..out)
            .map(|o| {
                let src = ((o as f32 + 0.5) * scale - 0.5).max(0.0);
                let i0 = (src.floor() as usize).min(inp - 1);
                let i1 = (i0 + 1).min(inp - 1);
                (i0, i1, src - i0 as f32)
            })
            .collect()
    };
    let ys = taps(out_h, s.h);
    let xs = taps(out_w, s.w);
    let mut data = Vec::with_capacity(s.n * s.c * out_h * out_w);
    for n in 0..s.n {
        for c in 0..s.c {
            let plane = x.plane(n, c);
            for &(y0, y1, fy) in &ys {
                for &(x0, x1, fx) in &xs {
                    let top = plane[y0 * s.w + x0] * (1.0 - fx) + plane[y0 * s.w + x1] * fx;
                    let bot = plane[y1 * s.w + x0] * (1.0 - fx) + plane[y1 * s.w + x1] * fx;
                    data.push(top * (1.0 - fy) + bot * fy);
                }
            }
        }
    }
    Tensor::from_vec(Shape::new(s.n, s.c, out_h, out_w), data)
}

pub fn flip_horizontal(x: &Tensor) -> Tensor {
    let s = x.shape();
    let mut data = x.data().to_vec();
    for row in data.chunks_exact_mut(s.w) {
        row.reverse();
    }
    Tensor::from_vec(s, data).expect("same shape")
}

/// Zero-pads on the bottom and right up to at least `min_h × min_w`.
pub fn pad_to(x: &Tensor, min_h: usize, min_w: usize) -> Tensor {
    let s = x.shape();
    let (h, w) = (s.h.max(min_h), s.w.max(min_w));
    if (h, w) == (s.h, s.w) {
        return x.clone();
    }
    let mut data = vec![0f32; s.n * s.c * h * w];
    for n in 0..s.n {
        for c in 0..s.c {
            let src = x.plane(n, c);
            let base = (n * s.c + c) * h * w;
            for y in 0..s.h {
                data[base + y * w..base + y * w + s.w].copy_from_slice(&src[y * s.w..(y + 1) * s.w]);
            }
        }
    }
    Tensor::from_vec(Shape::new(s.n, s.c, h, w), data).expect("shape matches payload")
}

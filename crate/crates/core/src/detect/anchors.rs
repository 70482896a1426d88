use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::DetBox;

/// Feature stride of detection layers D1..D6.
pub const STRIDES: [usize; 6] = [4, 8, 16, 32, 64, 128];
/// Anchor width per detection layer; height is `HEIGHT_RATIO ×` width.
pub const SIZES: [f32; 6] = [16.0, 32.0, 64.0, 128.0, 256.0, 512.0];
pub const HEIGHT_RATIO: f32 = 1.25;
/// Center / size variances used by box decoding.
pub const VARIANCES: (f32, f32) = (0.1, 0.2);
/// Smallest image side with at least one whole D6 cell.
pub const MIN_SIDE: usize = 128;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Anchor {
    pub cx: f32,
    pub cy: f32,
    pub w: f32,
    pub h: f32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnchorLevel {
    pub stride: usize,
    pub size: f32,
    pub rows: usize,
    pub cols: usize,
    /// Row-major over `(row, col)`, matching the head tensor layout.
    pub anchors: Vec<Anchor>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnchorSet {
    pub levels: Vec<AnchorLevel>,
}

impl AnchorSet {
    pub fn total(&self) -> usize {
        self.levels.iter().map(|l| l.anchors.len()).sum()
    }
}

/// One anchor per cell on each of the six levels, centered at
/// `((col + 0.5)·stride, (row + 0.5)·stride)` with `ceil(side / stride)`
/// cells per axis.
pub fn generate_anchors(height: usize, width: usize) -> Result<AnchorSet> {
    if height < MIN_SIDE || width < MIN_SIDE {
        return Err(Error::invalid(
            "generate_anchors",
            format!("image {height}x{width} is smaller than {MIN_SIDE}x{MIN_SIDE}"),
        ));
    }
    let levels = STRIDES
        .iter()
        .zip(SIZES)
        .map(|(&stride, size)| {
            let rows = height.div_ceil(stride);
            let cols = width.div_ceil(stride);
            let mut anchors = Vec::with_capacity(rows * cols);
            for i in 0..rows {
                for j in 0..cols {
                    anchors.push(Anchor {
                        cx: (j as f32 + 0.5) * stride as f32,
                        cy: (i as f32 + 0.5) * stride as f32,
                        w: size,
                        h: size * HEIGHT_RATIO,
                    });
                }
            }
            AnchorLevel {
                stride,
                size,
                rows,
                cols,
                anchors,
            }
        })
        .collect();
    Ok(AnchorSet { levels })
}

fn check_deltas(deltas: &Tensor, count: usize) -> Result<()> {
    let s = deltas.shape();
    if s.n != 1 || s.c != 4 || s.h * s.w != count {
        return Err(Error::invalid(
            "decode_boxes",
            format!("deltas {s} do not match {count} anchors"),
        ));
    }
    Ok(())
}

/// Decodes one anchor: `cx' = cx + d0·v0·w`, `cy' = cy + d1·v0·h`,
/// `w' = w·exp(d2·v1)`, `h' = h·exp(d3·v1)`.
pub fn decode_one(a: &Anchor, d: [f32; 4], variances: (f32, f32)) -> DetBox {
    let (v0, v1) = variances;
    let cx = a.cx + d[0] * v0 * a.w;
    let cy = a.cy + d[1] * v0 * a.h;
    let w = a.w * (d[2] * v1).exp();
    let h = a.h * (d[3] * v1).exp();
    DetBox {
        x1: cx - 0.5 * w,
        y1: cy - 0.5 * h,
        x2: cx + 0.5 * w,
        y2: cy + 0.5 * h,
        score: 0.0,
    }
}

/// Decodes a `(1, 4, rows, cols)` regression map against one anchor level.
/// Scores are left at zero.
pub fn decode_boxes(deltas: &Tensor, anchors: &[Anchor], variances: (f32, f32)) -> Result<Vec<DetBox>> {
    check_deltas(deltas, anchors.len())?;
    let p = anchors.len();
    let d = deltas.data();
    Ok(anchors
        .iter()
        .enumerate()
        .map(|(i, a)| decode_one(a, [d[i], d[p + i], d[2 * p + i], d[3 * p + i]], variances))
        .collect())
}

/// Inverse of [`decode_one`].
pub fn encode_one(a: &Anchor, b: &DetBox, variances: (f32, f32)) -> [f32; 4] {
    let (v0, v1) = variances;
    let (cx, cy) = (0.5 * (b.x1 + b.x2), 0.5 * (b.y1 + b.y2));
    let (w, h) = (b.x2 - b.x1, b.y2 - b.y1);
    [
        (cx - a.cx) / (v0 * a.w),
        (cy - a.cy) / (v0 * a.h),
        (w / a.w).ln() / v1,
        (h / a.h).ln() / v1,
    ]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn counts_and_sizes() {
        let set = generate_anchors(640, 640).unwrap();
        let counts: Vec<usize> = set.levels.iter().map(|l| l.anchors.len()).collect();
        assert_eq!(counts, [25_600, 6_400, 1_600, 400, 100, 25]);
        assert_eq!(set.total(), 34_125);
        assert!(set.levels[2].anchors.iter().all(|a| a.w == 64.0 && a.h == 80.0));
        assert!(set.levels.iter().flat_map(|l| &l.anchors).all(|a| a.w * 1.25 == a.h));
        let first = set.levels[0].anchors[0];
        assert_eq!((first.cx, first.cy), (2.0, 2.0));

        let vga = generate_anchors(480, 640).unwrap();
        assert_eq!((vga.levels[4].rows, vga.levels[4].cols), (8, 10));
        assert!(generate_anchors(127, 640).is_err());
    }

    #[test]
    fn zero_deltas_reproduce_anchor() {
        let set = generate_anchors(128, 128).unwrap();
        let level = &set.levels[3];
        let d = Tensor::zeros(Shape::new(1, 4, level.rows, level.cols)).unwrap();
        let boxes = decode_boxes(&d, &level.anchors, VARIANCES).unwrap();
        for (b, a) in boxes.iter().zip(&level.anchors) {
            assert_eq!((b.x1, b.x2), (a.cx - a.w / 2.0, a.cx + a.w / 2.0));
            assert_eq!((b.y1, b.y2), (a.cy - a.h / 2.0, a.cy + a.h / 2.0));
        }
        assert!(decode_boxes(&d, &level.anchors[1..], VARIANCES).is_err());
    }

    #[test]
    fn width_doubles() {
        let a = Anchor { cx: 10.0, cy: 10.0, w: 16.0, h: 20.0 };
        let b = decode_one(&a, [0.0, 0.0, 2f32.ln() / 0.2, 0.0], VARIANCES);
        assert!((b.x2 - b.x1 - 32.0).abs() < 1e-4);
        assert!((b.y2 - b.y1 - 20.0).abs() < 1e-5);
    }

    #[test]
    fn decode_encode_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let set = generate_anchors(256, 256).unwrap();
        for level in &set.levels {
            for a in level.anchors.iter().take(50) {
                let d = [
                    rng.gen_range(-2.0f32..2.0),
                    rng.gen_range(-2.0f32..2.0),
                    rng.gen_range(-2.0f32..2.0),
                    rng.gen_range(-2.0f32..2.0),
                ];
                let back = encode_one(a, &decode_one(a, d, VARIANCES), VARIANCES);
                for k in 0..4 {
                    assert!((back[k] - d[k]).abs() < 1e-5 * 16.0, "{back:?} vs {d:?}");
                }
            }
        }
    }
}

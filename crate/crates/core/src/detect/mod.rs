//! Anchors, box decoding, NMS, box voting and the end-to-end detection
//! pipeline.

pub mod anchors;
pub mod boxes;

pub use anchors::{decode_boxes, generate_anchors, Anchor, AnchorLevel, AnchorSet, VARIANCES};
pub use boxes::{box_voting, clip, iou, merge_passes, nms, DetBox, MergeConfig};

use crate::error::{Error, Result};
use crate::graph::{Executor, ModelGraph, Prepared, LEVELS};
use crate::image::{flip_horizontal, pad_to, resize_bilinear};
use crate::kernels::ExecOptions;
use crate::tensor::Tensor;
use crate::weights::WeightStore;

#[derive(Debug, Clone, PartialEq)]
pub struct DetectConfig {
    /// Minimum face probability kept from each level.
    pub score_threshold: f32,
    /// Candidates kept per level before merging.
    pub top_k: usize,
    pub merge: MergeConfig,
    pub variances: (f32, f32),
    /// Adds a horizontally flipped pass for every scale.
    pub flip: bool,
    /// Test-time resize factors relative to the input image.
    pub scales: Vec<f32>,
    pub exec: ExecOptions,
}

impl Default for DetectConfig {
    fn default() -> Self {
        DetectConfig {
            score_threshold: 0.05,
            top_k: 5000,
            merge: MergeConfig::default(),
            variances: VARIANCES,
            flip: false,
            scales: vec![1.0],
            exec: ExecOptions::default(),
        }
    }
}

impl DetectConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.score_threshold) {
            return Err(Error::invalid("detect", "threshold must lie in [0, 1]"));
        }
        if self.scales.is_empty() || self.scales.iter().any(|s| !s.is_finite() || *s <= 0.0) {
            return Err(Error::invalid("detect", "scales must be positive"));
        }
        Ok(())
    }
}

/// Runs every test-time pass and merges the results. Boxes are in input
/// image pixels, sorted by descending score.
pub fn detect(image: &Tensor, graph: &ModelGraph, weights: &WeightStore, cfg: &DetectConfig) -> Result<Vec<DetBox>> {
    cfg.validate()?;
    check_image(image)?;
    let exec = Executor::new(cfg.exec)?;
    let prepared = exec.prepare(graph, weights)?;
    let mut passes = Vec::new();
    for &scale in &cfg.scales {
        passes.push(candidates(&prepared, image, scale, false, cfg)?);
        if cfg.flip {
            passes.push(candidates(&prepared, image, scale, true, cfg)?);
        }
    }
    let s = image.shape();
    Ok(merge_passes(&passes, (s.h, s.w), &cfg.merge))
}

fn check_image(image: &Tensor) -> Result<()> {
    let s = image.shape();
    if s.n != 1 || s.c != 3 || s.h == 0 || s.w == 0 {
        return Err(Error::invalid("detect", format!("expected a 1x3xHxW image, got {s}")));
    }
    Ok(())
}

/// Pre-merge candidates of one pass, mapped back to input image pixels.
///
/// The image is resized by `scale`, optionally mirrored, then zero-padded on
/// the bottom/right to at least 128×128 so every level has a cell.
pub fn candidates(prepared: &Prepared<'_>, image: &Tensor, scale: f32, flip: bool, cfg: &DetectConfig) -> Result<Vec<DetBox>> {
    check_image(image)?;
    let s = image.shape();
    let hs = ((s.h as f32 * scale).round() as usize).max(1);
    let ws = ((s.w as f32 * scale).round() as usize).max(1);
    let mut x = resize_bilinear(image, hs, ws)?;
    if flip {
        x = flip_horizontal(&x);
    }
    let x = pad_to(&x, anchors::MIN_SIDE, anchors::MIN_SIDE);
    let padded = x.shape();
    let anchor_set = generate_anchors(padded.h, padded.w)?;
    let outputs = prepared.forward(&x)?;

    let (sx, sy) = (s.w as f32 / ws as f32, s.h as f32 / hs as f32);
    let mut out = Vec::new();
    for (l, level) in (1..=LEVELS).zip(&anchor_set.levels) {
        let get = |key: String| {
            outputs
                .get(&key)
                .ok_or_else(|| Error::invalid("detect", format!("graph has no `{key}` output; is it a detector?")))
        };
        let cls = get(format!("D{l}.cls"))?;
        let reg = get(format!("D{l}.reg"))?;
        let (cs, rs) = (cls.shape(), reg.shape());
        if (cs.c, cs.h, cs.w) != (2, level.rows, level.cols) || (rs.h, rs.w) != (level.rows, level.cols) {
            return Err(Error::invalid(
                "detect",
                format!("D{l} maps {cs}/{rs} do not match the {}x{} anchor grid", level.rows, level.cols),
            ));
        }
        let face = cls.plane(0, 1);
        let mut picked: Vec<usize> = (0..face.len()).filter(|&i| face[i] >= cfg.score_threshold).collect();
        picked.sort_by(|&a, &b| face[b].total_cmp(&face[a]).then(a.cmp(&b)));
        picked.truncate(cfg.top_k);

        let decoded = decode_boxes(reg, &level.anchors, cfg.variances)?;
        for i in picked {
            let b = decoded[i];
            let (x1, x2) = if flip { (ws as f32 - b.x2, ws as f32 - b.x1) } else { (b.x1, b.x2) };
            out.push(DetBox {
                x1: x1 * sx,
                y1: b.y1 * sy,
                x2: x2 * sx,
                y2: b.y2 * sy,
                score: face[i],
            });
        }
    }
    Ok(out)
}

/// One `x1 y1 x2 y2 score` line per box.
pub fn format_lines(boxes: &[DetBox]) -> String {
    boxes.iter().map(|b| b.to_line() + "\n").collect()
}

pub fn format_json(boxes: &[DetBox]) -> String {
    serde_json::to_string_pretty(boxes).expect("boxes serialize")
}

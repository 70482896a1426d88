use serde::{Deserialize, Serialize};

/// Axis-aligned detection in pixels with a confidence in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetBox {
    pub x1: f32,
    pub y1: f32,
    pub x2: f32,
    pub y2: f32,
    pub score: f32,
}

impl DetBox {
    pub fn new(x1: f32, y1: f32, x2: f32, y2: f32, score: f32) -> Self {
        DetBox { x1, y1, x2, y2, score }
    }

    pub fn area(&self) -> f32 {
        (self.x2 - self.x1).max(0.0) * (self.y2 - self.y1).max(0.0)
    }

    pub fn is_valid(&self) -> bool {
        self.x1 < self.x2 && self.y1 < self.y2
    }

    pub fn translate(&self, dx: f32, dy: f32) -> DetBox {
        DetBox {
            x1: self.x1 + dx,
            y1: self.y1 + dy,
            x2: self.x2 + dx,
            y2: self.y2 + dy,
            score: self.score,
        }
    }

    /// `x1 y1 x2 y2 score` with six decimals.
    pub fn to_line(&self) -> String {
        format!("{:.6} {:.6} {:.6} {:.6} {:.6}", self.x1, self.y1, self.x2, self.y2, self.score)
    }
}

/// Intersection over union; 0 when the union is empty.
pub fn iou(a: &DetBox, b: &DetBox) -> f32 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

/// Indices of `boxes` by descending score, ties by ascending index.
fn score_order(boxes: &[DetBox]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| boxes[b].score.total_cmp(&boxes[a].score).then(a.cmp(&b)));
    order
}

/// Greedy non-maximum suppression. A box is dropped when its IoU with an
/// already kept box exceeds `iou_threshold`. Output is in score order.
pub fn nms(boxes: &[DetBox], iou_threshold: f32) -> Vec<DetBox> {
    let order = score_order(boxes);
    let mut suppressed = vec![false; boxes.len()];
    let mut kept = Vec::new();
    for (pos, &i) in order.iter().enumerate() {
        if suppressed[i] {
            continue;
        }
        let seed = boxes[i];
        kept.push(seed);
        for &j in &order[pos + 1..] {
            if !suppressed[j] && iou(&seed, &boxes[j]) > iou_threshold {
                suppressed[j] = true;
            }
        }
    }
    kept
}

/// Replaces each kept box's coordinates with the score-weighted mean of all
/// boxes in `all` overlapping it with IoU ≥ `iou_threshold`. Scores are left
/// unchanged.
pub fn box_voting(kept: &[DetBox], all: &[DetBox], iou_threshold: f32) -> Vec<DetBox> {
    kept.iter()
        .map(|k| {
            let mut acc = [0f64; 4];
            let mut total = 0f64;
            for b in all.iter().filter(|b| iou(k, b) >= iou_threshold) {
                let s = b.score.max(0.0) as f64;
                acc[0] += s * b.x1 as f64;
                acc[1] += s * b.y1 as f64;
                acc[2] += s * b.x2 as f64;
                acc[3] += s * b.y2 as f64;
                total += s;
            }
            if total > 0.0 {
                DetBox {
                    x1: (acc[0] / total) as f32,
                    y1: (acc[1] / total) as f32,
                    x2: (acc[2] / total) as f32,
                    y2: (acc[3] / total) as f32,
                    score: k.score,
                }
            } else {
                *k
            }
        })
        .collect()
}

/// Clips to `[0, width] × [0, height]`, dropping boxes that collapse.
pub fn clip(boxes: &[DetBox], height: f32, width: f32) -> Vec<DetBox> {
    boxes
        .iter()
        .map(|b| DetBox {
            x1: b.x1.clamp(0.0, width),
            y1: b.y1.clamp(0.0, height),
            x2: b.x2.clamp(0.0, width),
            y2: b.y2.clamp(0.0, height),
            score: b.score,
        })
        .filter(DetBox::is_valid)
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MergeConfig {
    pub nms_iou: f32,
    pub vote_iou: f32,
}

impl Default for MergeConfig {
    fn default() -> Self {
        MergeConfig {
            nms_iou: 0.3,
            vote_iou: 0.3,
        }
    }
}

/// Merges detections from several test-time passes (already mapped to
/// image coordinates): concatenate, NMS, box voting against every
/// candidate, then clip to the image.
pub fn merge_passes(passes: &[Vec<DetBox>], image_hw: (usize, usize), cfg: &MergeConfig) -> Vec<DetBox> {
    let all: Vec<DetBox> = passes.iter().flatten().copied().collect();
    let kept = nms(&all, cfg.nms_iou);
    let voted = box_voting(&kept, &all, cfg.vote_iou);
    clip(&voted, image_hw.0 as f32, image_hw.1 as f32)
}

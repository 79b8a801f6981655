//! Anchors, box encoding, non-maximum suppression and training-sample
//! assignment for the region-proposal detector. Boxes here are `[f32; 4]`
//! in network-input pixels.

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

pub type Rect = [f32; 4];

/// Largest log-scale change a decoded delta may apply.
const MAX_LOG_SCALE: f32 = 4.135_166_6; // ln(1000 / 16)

pub fn area(b: &Rect) -> f32 {
    (b[2] - b[0]).max(0.0) * (b[3] - b[1]).max(0.0)
}

pub fn iou(a: &Rect, b: &Rect) -> f32 {
    let w = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let h = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = w * h;
    let union = area(a) + area(b) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Anchors for every `(a, y, x)` of an `h × w` feature grid, anchor-major
/// to match a `[A, H, W]` output layout. Each size/ratio pair gives one
/// anchor of area `size²` and height/width ratio `ratio`.
pub fn grid_anchors(h: usize, w: usize, stride: f32, sizes: &[f32], ratios: &[f32]) -> Vec<Rect> {
    let mut shapes = Vec::new();
    for &s in sizes {
        for &r in ratios {
            shapes.push((s / r.sqrt(), s * r.sqrt()));
        }
    }
    let mut out = Vec::with_capacity(shapes.len() * h * w);
    for (aw, ah) in shapes {
        for y in 0..h {
            for x in 0..w {
                let (cx, cy) = ((x as f32 + 0.5) * stride, (y as f32 + 0.5) * stride);
                out.push([cx - aw / 2.0, cy - ah / 2.0, cx + aw / 2.0, cy + ah / 2.0]);
            }
        }
    }
    out
}

/// Centre/size delta encoding with per-component weights.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoxCoder {
    pub weights: [f32; 4],
}

impl BoxCoder {
    pub const fn new(weights: [f32; 4]) -> Self {
        Self { weights }
    }

    pub fn encode(&self, reference: &Rect, target: &Rect) -> [f32; 4] {
        let (rw, rh) = (reference[2] - reference[0], reference[3] - reference[1]);
        let (rx, ry) = (reference[0] + 0.5 * rw, reference[1] + 0.5 * rh);
        let (tw, th) = (target[2] - target[0], target[3] - target[1]);
        let (tx, ty) = (target[0] + 0.5 * tw, target[1] + 0.5 * th);
        let [wx, wy, ww, wh] = self.weights;
        [wx * (tx - rx) / rw, wy * (ty - ry) / rh, ww * (tw / rw).ln(), wh * (th / rh).ln()]
    }

    pub fn decode(&self, reference: &Rect, d: &[f32]) -> Rect {
        let (rw, rh) = (reference[2] - reference[0], reference[3] - reference[1]);
        let (rx, ry) = (reference[0] + 0.5 * rw, reference[1] + 0.5 * rh);
        let [wx, wy, ww, wh] = self.weights;
        let (dx, dy) = (d[0] / wx, d[1] / wy);
        let (dw, dh) = ((d[2] / ww).min(MAX_LOG_SCALE), (d[3] / wh).min(MAX_LOG_SCALE));
        let (cx, cy) = (rx + dx * rw, ry + dy * rh);
        let (w, h) = (rw * dw.exp(), rh * dh.exp());
        [cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h]
    }
}

pub fn clip(b: &Rect, width: f32, height: f32) -> Rect {
    [b[0].clamp(0.0, width), b[1].clamp(0.0, height), b[2].clamp(0.0, width), b[3].clamp(0.0, height)]
}

/// Greedy NMS over boxes already sorted by descending score; returns the
/// kept positions.
pub fn nms_sorted(boxes: &[Rect], thr: f32, limit: usize) -> Vec<usize> {
    let mut keep = Vec::new();
    let mut dead = vec![false; boxes.len()];
    for i in 0..boxes.len() {
        if keep.len() == limit {
            break;
        }
        if dead[i] {
            continue;
        }
        keep.push(i);
        for j in i + 1..boxes.len() {
            if !dead[j] && iou(&boxes[i], &boxes[j]) > thr {
                dead[j] = true;
            }
        }
    }
    keep
}

/// Order of `scores` descending, ties by index.
pub fn descending(scores: &[f32]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx
}

/// Best ground-truth index and IoU for every box (`None` without gts).
pub fn best_match(boxes: &[Rect], gts: &[Rect]) -> Vec<Option<(usize, f32)>> {
    boxes
        .iter()
        .map(|b| {
            let mut best: Option<(usize, f32)> = None;
            for (g, gt) in gts.iter().enumerate() {
                let v = iou(b, gt);
                if best.is_none_or(|(_, bv)| v > bv) {
                    best = Some((g, v));
                }
            }
            best
        })
        .collect()
}

/// Sampled training indices with their matched gt (`Some`) or background
/// (`None`).
pub type Sample = Vec<(usize, Option<usize>)>;

/// Region-proposal anchor assignment: positive at IoU ≥ `pos_thr` or when
/// the anchor ties for a gt's best overlap, negative below `neg_thr`, the
/// rest ignored. Draws up to `batch` anchors with at most `pos_fraction`
/// positives.
pub fn sample_anchors(
    anchors: &[Rect],
    gts: &[Rect],
    pos_thr: f32,
    neg_thr: f32,
    batch: usize,
    pos_fraction: f32,
    rng: &mut ChaCha8Rng,
) -> Sample {
    let best = best_match(anchors, gts);
    let mut per_gt_best = vec![0.0f32; gts.len()];
    for anchor in anchors {
        for (g, gt) in gts.iter().enumerate() {
            per_gt_best[g] = per_gt_best[g].max(iou(anchor, gt));
        }
    }
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    for (a, m) in best.iter().enumerate() {
        let forced = gts.iter().enumerate().find(|(g, gt)| per_gt_best[*g] > 0.0 && iou(&anchors[a], gt) == per_gt_best[*g]);
        match (m, forced) {
            (_, Some((g, _))) => pos.push((a, Some(g))),
            (Some((g, v)), None) if *v >= pos_thr => pos.push((a, Some(*g))),
            (Some((_, v)), None) if *v < neg_thr => neg.push((a, None)),
            (None, None) => neg.push((a, None)),
            _ => {}
        }
    }
    draw(pos, neg, batch, pos_fraction, rng)
}

/// Second-stage assignment: foreground at IoU ≥ `fg_thr`, else background.
pub fn sample_rois(rois: &[Rect], gts: &[Rect], fg_thr: f32, batch: usize, pos_fraction: f32, rng: &mut ChaCha8Rng) -> Sample {
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    for (i, m) in best_match(rois, gts).into_iter().enumerate() {
        match m {
            Some((g, v)) if v >= fg_thr => pos.push((i, Some(g))),
            _ => neg.push((i, None)),
        }
    }
    draw(pos, neg, batch, pos_fraction, rng)
}

fn draw(
    mut pos: Vec<(usize, Option<usize>)>,
    mut neg: Vec<(usize, Option<usize>)>,
    batch: usize,
    pos_fraction: f32,
    rng: &mut ChaCha8Rng,
) -> Sample {
    pos.shuffle(rng);
    neg.shuffle(rng);
    let n_pos = pos.len().min((batch as f32 * pos_fraction) as usize);
    let n_neg = neg.len().min(batch - n_pos);
    pos.truncate(n_pos);
    neg.truncate(n_neg);
    pos.extend(neg);
    pos
}

//! Independent reference implementations used to check the metric code.
//! Each one takes a deliberately different route from the library version.
#![allow(dead_code)]

use rand::Rng;
use waymark_core::evaluation::{FrameDetections, ScoredBox};
use waymark_core::BBox;

/// IoU by counting unit cells of the integer grid (integer boxes only).
pub fn iou_raster(a: &BBox, b: &BBox) -> f64 {
    let (x0, y0) = (a.x1.min(b.x1) as i64, a.y1.min(b.y1) as i64);
    let (x1, y1) = (a.x2.max(b.x2) as i64, a.y2.max(b.y2) as i64);
    let inside = |bx: &BBox, x: i64, y: i64| (x as f64) >= bx.x1 && (x as f64) < bx.x2 && (y as f64) >= bx.y1 && (y as f64) < bx.y2;
    let (mut inter, mut union) = (0u64, 0u64);
    for y in y0..y1 {
        for x in x0..x1 {
            let (ia, ib) = (inside(a, x, y), inside(b, x, y));
            inter += (ia && ib) as u64;
            union += (ia || ib) as u64;
        }
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// IoU from corner arithmetic written out longhand.
pub fn iou_longhand(a: &BBox, b: &BBox) -> f64 {
    let ix = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let iy = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let i = ix * iy;
    let u = (a.x2 - a.x1) * (a.y2 - a.y1) + (b.x2 - b.x1) * (b.y2 - b.y1) - i;
    if u <= 0.0 {
        0.0
    } else {
        i / u
    }
}

/// Greedy matching by repeated selection of the highest remaining score
/// (no sort), scanning every gt for each pick.
pub fn match_oracle(dets: &[ScoredBox], gts: &[BBox], thr: f64) -> Vec<(usize, usize)> {
    let mut used_det = vec![false; dets.len()];
    let mut used_gt = vec![false; gts.len()];
    let mut pairs = Vec::new();
    for _ in 0..dets.len() {
        let mut pick = usize::MAX;
        for d in 0..dets.len() {
            if !used_det[d] && (pick == usize::MAX || dets[d].score > dets[pick].score) {
                pick = d;
            }
        }
        used_det[pick] = true;
        let mut best = usize::MAX;
        let mut best_iou = -1.0;
        for g in 0..gts.len() {
            let v = iou_longhand(&dets[pick].bbox, &gts[g]);
            if !used_gt[g] && v >= thr && v > best_iou {
                best = g;
                best_iou = v;
            }
        }
        if best != usize::MAX {
            used_gt[best] = true;
            pairs.push((pick, best));
        }
    }
    pairs
}

/// AP as the integral of the step function
/// `p(r) = max{precision_i : recall_i ≥ r}` over the distinct recall levels.
pub fn ap_oracle(frames: &[FrameDetections], thr: f64) -> f64 {
    let total: usize = frames.iter().map(|f| f.gts.len()).sum();
    let mut all: Vec<(f64, bool)> = Vec::new();
    for f in frames {
        let pairs = match_oracle(&f.detections, &f.gts, thr);
        for (d, det) in f.detections.iter().enumerate() {
            all.push((det.score, pairs.iter().any(|p| p.0 == d)));
        }
    }
    all.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
    let mut points = Vec::new();
    let mut tp = 0;
    for (i, (_, hit)) in all.iter().enumerate() {
        if *hit {
            tp += 1;
        }
        points.push((tp as f64 / total as f64, tp as f64 / (i + 1) as f64));
    }
    let mut levels: Vec<f64> = points.iter().map(|p| p.0).collect();
    levels.dedup();
    let mut area = 0.0;
    let mut prev = 0.0;
    for r in levels {
        let p = points.iter().filter(|q| q.0 >= r).map(|q| q.1).fold(0.0, f64::max);
        area += (r - prev) * p;
        prev = r;
    }
    area
}

pub fn thresholded(f: &FrameDetections, thr: f64) -> Vec<ScoredBox> {
    f.detections.iter().copied().filter(|d| d.score >= thr).collect()
}

pub fn mean_iou_oracle(frames: &[FrameDetections]) -> Option<f64> {
    let mut ious = Vec::new();
    for f in frames {
        let dets = thresholded(f, 0.5);
        for (d, g) in match_oracle(&dets, &f.gts, 0.5) {
            ious.push(iou_longhand(&dets[d].bbox, &f.gts[g]));
        }
    }
    (!ious.is_empty()).then(|| ious.iter().sum::<f64>() / ious.len() as f64)
}

pub fn recall_oracle(frames: &[FrameDetections]) -> f64 {
    let total: usize = frames.iter().map(|f| f.gts.len()).sum();
    let hit: usize = frames.iter().map(|f| match_oracle(&thresholded(f, 0.5), &f.gts, 0.5).len()).sum();
    hit as f64 / total as f64
}

pub fn centermost_oracle(w: f64, h: f64, c: &[BBox]) -> usize {
    let mut d: Vec<(f64, usize)> =
        c.iter().enumerate().map(|(i, b)| ((((b.x1 + b.x2) / 2.0 - w / 2.0).hypot((b.y1 + b.y2) / 2.0 - h / 2.0)), i)).collect();
    d.sort_by(|a, b| a.partial_cmp(b).unwrap());
    d[0].1
}

/// Mean of `1/k` grouped by distinct `k`.
pub fn random_expected_oracle(ks: &[usize]) -> f64 {
    let mut counts = std::collections::BTreeMap::new();
    for k in ks {
        *counts.entry(*k).or_insert(0usize) += 1;
    }
    counts.iter().map(|(k, c)| *c as f64 / *k as f64).sum::<f64>() / ks.len() as f64
}

/// Two-sided exact McNemar p from Pascal's triangle.
pub fn mcnemar_oracle(b: u64, c: u64) -> f64 {
    let n = (b + c) as usize;
    if n == 0 {
        return 1.0;
    }
    let mut row = vec![1u128];
    for _ in 0..n {
        let mut next = vec![1u128; row.len() + 1];
        for i in 1..row.len() {
            next[i] = row[i - 1] + row[i];
        }
        row = next;
    }
    let k = b.min(c) as usize;
    let tail: u128 = row[..=k].iter().sum();
    (2.0 * tail as f64 / 2f64.powi(n as i32)).min(1.0)
}

pub fn int_box(rng: &mut impl Rng, max: i64) -> BBox {
    let x1 = rng.random_range(0..max - 1);
    let y1 = rng.random_range(0..max - 1);
    let x2 = rng.random_range(x1 + 1..=max);
    let y2 = rng.random_range(y1 + 1..=max);
    BBox::new(x1 as f64, y1 as f64, x2 as f64, y2 as f64)
}

/// A frame whose detections are jittered copies of the gts plus clutter,
/// with continuous scores so ranking ties do not occur.
pub fn random_frame(rng: &mut impl Rng, id: usize) -> FrameDetections {
    let n_gt = rng.random_range(0..4);
    let gts: Vec<BBox> = (0..n_gt).map(|_| int_box(rng, 40)).collect();
    let mut dets = Vec::new();
    for g in &gts {
        for _ in 0..rng.random_range(0..3) {
            let j = |rng: &mut dyn rand::RngCore| rng.random_range(-3.0..3.0);
            let b = BBox::new(g.x1 + j(rng), g.y1 + j(rng), g.x2 + j(rng), g.y2 + j(rng));
            if b.is_valid() {
                dets.push(ScoredBox::new(b, rng.random::<f64>()));
            }
        }
    }
    for _ in 0..rng.random_range(0..3) {
        dets.push(ScoredBox::new(int_box(rng, 40), rng.random::<f64>()));
    }
    FrameDetections { frame_id: format!("f{id:03}"), detections: dets, gts }
}

/// Max cosine by a plain double loop over every entry.
pub fn max_cosine_oracle(bank: &[Vec<f32>], q: &[f32]) -> f64 {
    let n2 = |v: &[f32]| {
        let mut s = 0.0f64;
        for x in v {
            s += (*x as f64) * (*x as f64);
        }
        s.sqrt()
    };
    let qn = n2(q);
    if qn == 0.0 {
        return 0.0;
    }
    let mut best = f64::NEG_INFINITY;
    for e in bank {
        let mut d = 0.0f64;
        for i in 0..q.len() {
            d += q[i] as f64 * e[i] as f64;
        }
        let en = n2(e);
        let c = if en == 0.0 { 0.0 } else { d / (qn * en) };
        if c > best {
            best = c;
        }
    }
    best
}

/// Quality `‖e‖ + 0.5·σ` with the population standard deviation.
pub fn quality_oracle(e: &[f32]) -> f64 {
    let v: Vec<f64> = e.iter().map(|x| *x as f64).collect();
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let l2 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let sd = (v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n).sqrt();
    l2 + 0.5 * sd
}

/// Keys `(frame_id, annotation_index)` of the top `k` by quality, found by
/// sorting the whole population.
pub fn top_k_oracle(pop: &[(String, usize, Vec<f32>)], k: usize) -> Vec<(String, usize)> {
    let mut all: Vec<(f64, &String, usize)> = pop.iter().map(|(f, i, e)| (quality_oracle(e), f, *i)).collect();
    all.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(b.1)).then(a.2.cmp(&b.2)));
    all.into_iter().take(k).map(|(_, f, i)| (f.clone(), i)).collect()
}

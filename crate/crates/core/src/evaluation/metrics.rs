//! Detection and selection metrics.

use serde::{Deserialize, Serialize};

use crate::bbox::BBox;
use crate::evaluation::EvalError;

pub const IOU_THRESHOLD: f64 = 0.5;
pub const SCORE_THRESHOLD: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredBox {
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub score: f64,
}

impl ScoredBox {
    pub fn new(bbox: BBox, score: f64) -> Self {
        Self { bbox, score }
    }
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    a.iou(b)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    /// `(detection index, gt index, iou)` in the order the matches were made.
    pub pairs: Vec<(usize, usize, f64)>,
    pub unmatched_detections: Vec<usize>,
    pub unmatched_gts: Vec<usize>,
}

/// Detection indices by descending score, ties by lower index.
fn score_order(dets: &[ScoredBox]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score).then(a.cmp(&b)));
    order
}

/// Greedy matching: detections in descending score order each take the
/// still-unmatched ground truth with the highest IoU ≥ `thr` (ties to the
/// lower gt index).
pub fn match_detections(dets: &[ScoredBox], gts: &[BBox], thr: f64) -> MatchResult {
    let mut taken = vec![false; gts.len()];
    let mut out = MatchResult::default();
    for d in score_order(dets) {
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in gts.iter().enumerate() {
            if taken[g] {
                continue;
            }
            let v = dets[d].bbox.iou(gt);
            if v >= thr && best.is_none_or(|(_, b)| v > b) {
                best = Some((g, v));
            }
        }
        match best {
            Some((g, v)) => {
                taken[g] = true;
                out.pairs.push((d, g, v));
            }
            None => out.unmatched_detections.push(d),
        }
    }
    out.unmatched_detections.sort_unstable();
    out.unmatched_gts = (0..gts.len()).filter(|&g| !taken[g]).collect();
    out
}

/// Detections and ground truth of one frame.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FrameDetections {
    pub frame_id: String,
    pub detections: Vec<ScoredBox>,
    pub gts: Vec<BBox>,
}

impl FrameDetections {
    pub fn above(&self, score_thr: f64) -> Vec<ScoredBox> {
        self.detections.iter().copied().filter(|d| d.score >= score_thr).collect()
    }
}

/// Single-class average precision with all-points interpolation.
///
/// Frames are matched greedily at `iou_thr` using the full unthresholded
/// ranking; every detection is then a true or false positive. Sweeping all
/// detections by descending score (ties by frame, then detection index)
/// traces the precision/recall curve, and AP is the exact area under its
/// monotone upper envelope.
pub fn average_precision(frames: &[FrameDetections], iou_thr: f64) -> Result<f64, EvalError> {
    let total_gts: usize = frames.iter().map(|f| f.gts.len()).sum();
    if total_gts == 0 {
        return Err(EvalError::NoGroundTruth);
    }
    let mut ranked: Vec<(f64, usize, usize, bool)> = Vec::new();
    for (fi, f) in frames.iter().enumerate() {
        let m = match_detections(&f.detections, &f.gts, iou_thr);
        let mut tp = vec![false; f.detections.len()];
        for (d, _, _) in &m.pairs {
            tp[*d] = true;
        }
        ranked.extend(f.detections.iter().enumerate().map(|(d, s)| (s.score, fi, d, tp[d])));
    }
    ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));

    let mut precision = Vec::with_capacity(ranked.len());
    let mut recall = Vec::with_capacity(ranked.len());
    let mut tp = 0usize;
    for (i, r) in ranked.iter().enumerate() {
        tp += r.3 as usize;
        precision.push(tp as f64 / (i + 1) as f64);
        recall.push(tp as f64 / total_gts as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (p, r) in precision.iter().zip(&recall) {
        ap += (r - prev_recall) * p;
        prev_recall = *r;
    }
    Ok(ap.clamp(0.0, 1.0))
}

/// Mean IoU of matched pairs after dropping detections below `score_thr`.
pub fn mean_iou(frames: &[FrameDetections], score_thr: f64, iou_thr: f64) -> Result<f64, EvalError> {
    let ious: Vec<f64> = frames
        .iter()
        .flat_map(|f| match_detections(&f.above(score_thr), &f.gts, iou_thr).pairs.into_iter().map(|p| p.2))
        .collect();
    if ious.is_empty() {
        return Err(EvalError::NoMatches);
    }
    Ok(ious.iter().sum::<f64>() / ious.len() as f64)
}

/// Fraction of ground truths matched by a detection scoring ≥ `score_thr`.
pub fn recall(frames: &[FrameDetections], score_thr: f64, iou_thr: f64) -> Result<f64, EvalError> {
    let total: usize = frames.iter().map(|f| f.gts.len()).sum();
    if total == 0 {
        return Err(EvalError::NoGroundTruth);
    }
    let matched: usize = frames.iter().map(|f| match_detections(&f.above(score_thr), &f.gts, iou_thr).pairs.len()).sum();
    Ok(matched as f64 / total as f64)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DetectionMetrics {
    pub map50: f64,
    pub mean_iou: f64,
    pub recall: f64,
    pub composite: f64,
}

/// mAP@0.5, mean IoU and recall at the 0.5 operating point, and their mean.
/// A model with no match above threshold gets mean IoU 0 rather than an
/// error, so untrained checkpoints still rank.
pub fn detection_metrics(frames: &[FrameDetections]) -> Result<DetectionMetrics, EvalError> {
    let map50 = average_precision(frames, IOU_THRESHOLD)?;
    let miou = match mean_iou(frames, SCORE_THRESHOLD, IOU_THRESHOLD) {
        Ok(v) => v,
        Err(EvalError::NoMatches) => 0.0,
        Err(e) => return Err(e),
    };
    let rec = recall(frames, SCORE_THRESHOLD, IOU_THRESHOLD)?;
    Ok(DetectionMetrics { map50, mean_iou: miou, recall: rec, composite: (map50 + miou + rec) / 3.0 })
}

/// Whether a chosen box identifies the ground-truth main transition point.
pub fn mstp_correct(chosen: &BBox, gt_mstp: &BBox, iou_thr: f64) -> bool {
    chosen == gt_mstp || chosen.iou(gt_mstp) >= iou_thr
}

/// Fraction of `(chosen, gt)` pairs judged correct; `0` for no frames.
pub fn mstp_accuracy(choices: &[(BBox, BBox)], iou_thr: f64) -> f64 {
    if choices.is_empty() {
        return 0.0;
    }
    choices.iter().filter(|(c, g)| mstp_correct(c, g, iou_thr)).count() as f64 / choices.len() as f64
}

/// Expected accuracy of picking uniformly among each frame's `k` candidates.
pub fn baseline_random_expected(ks: &[usize]) -> Result<f64, EvalError> {
    if ks.is_empty() {
        return Err(EvalError::Empty("candidate counts"));
    }
    if ks.contains(&0) {
        return Err(EvalError::ZeroCandidates);
    }
    Ok(ks.iter().map(|&k| 1.0 / k as f64).sum::<f64>() / ks.len() as f64)
}

/// Index of the candidate whose centre is nearest the image centre, ties to
/// the lowest index.
pub fn baseline_centermost(width: f64, height: f64, candidates: &[BBox]) -> Result<usize, EvalError> {
    let (cx, cy) = (width / 2.0, height / 2.0);
    let dist = |b: &BBox| {
        let (x, y) = b.center();
        (x - cx).powi(2) + (y - cy).powi(2)
    };
    let mut best: Option<(usize, f64)> = None;
    for (i, b) in candidates.iter().enumerate() {
        let d = dist(b);
        if best.is_none_or(|(_, bd)| d < bd) {
            best = Some((i, d));
        }
    }
    best.map(|b| b.0).ok_or(EvalError::ZeroCandidates)
}

/// Argmax with ties to the lowest index.
pub fn argmax(scores: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, s) in scores.iter().enumerate() {
        if best.is_none_or(|b| *s > scores[b]) {
            best = Some(i);
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    fn b(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
        BBox::new(x1, y1, x2, y2)
    }

    #[test]
    fn iou_examples() {
        assert_eq!(iou(&b(0., 0., 10., 10.), &b(0., 0., 10., 10.)), 1.0);
        assert_eq!(iou(&b(0., 0., 1., 1.), &b(2., 2., 3., 3.)), 0.0);
        assert!((iou(&b(0., 0., 10., 10.), &b(5., 0., 15., 10.)) - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn greedy_prefers_higher_score() {
        let gt = [b(0., 0., 10., 10.)];
        let dets = [ScoredBox::new(b(0., 0., 10., 9.), 0.6), ScoredBox::new(b(0., 0., 10., 10.), 0.9)];
        let m = match_detections(&dets, &gt, 0.5);
        assert_eq!(m.pairs, vec![(1, 0, 1.0)]);
        assert_eq!(m.unmatched_detections, vec![0]);
        assert!(m.unmatched_gts.is_empty());
    }

    #[test]
    fn ap_extremes() {
        let gts = vec![b(0., 0., 10., 10.), b(20., 20., 30., 30.)];
        let perfect = FrameDetections {
            frame_id: "f".into(),
            detections: gts.iter().map(|g| ScoredBox::new(*g, 0.9)).collect(),
            gts: gts.clone(),
        };
        assert_eq!(average_precision(std::slice::from_ref(&perfect), 0.5).unwrap(), 1.0);
        let miss = FrameDetections { detections: vec![ScoredBox::new(b(50., 50., 60., 60.), 0.9)], ..perfect.clone() };
        assert_eq!(average_precision(&[miss], 0.5).unwrap(), 0.0);
        assert!(matches!(average_precision(&[], 0.5), Err(EvalError::NoGroundTruth)));
    }

    #[test]
    fn recall_and_mean_iou_arithmetic() {
        let gts: Vec<BBox> = (0..8).map(|i| b(i as f64 * 20.0, 0., i as f64 * 20.0 + 10.0, 10.)).collect();
        let dets: Vec<ScoredBox> = gts[..3].iter().map(|g| ScoredBox::new(*g, 0.8)).collect();
        let f = FrameDetections { frame_id: "f".into(), detections: dets, gts };
        assert_eq!(recall(std::slice::from_ref(&f), 0.5, 0.5).unwrap(), 0.375);
        let none = FrameDetections { detections: vec![], ..f.clone() };
        assert_eq!(recall(std::slice::from_ref(&none), 0.5, 0.5).unwrap(), 0.0);
        assert!(matches!(mean_iou(&[none], 0.5, 0.5), Err(EvalError::NoMatches)));

        // IoU 0.6 and 0.8 against 10×10 boxes: widths 6 and 8 inside the gt
        let g = vec![b(0., 0., 10., 10.), b(20., 0., 30., 10.)];
        let d = vec![ScoredBox::new(b(0., 0., 6., 10.), 0.9), ScoredBox::new(b(20., 0., 28., 10.), 0.9)];
        let f = FrameDetections { frame_id: "g".into(), detections: d, gts: g };
        assert!((mean_iou(&[f], 0.5, 0.5).unwrap() - 0.7).abs() < 1e-12);
    }

    #[test]
    fn baselines() {
        assert_eq!(baseline_random_expected(&[1, 1, 1]).unwrap(), 1.0);
        assert!((baseline_random_expected(&[1, 2, 4]).unwrap() - 1.75 / 3.0).abs() < 1e-15);
        assert!(baseline_random_expected(&[2, 0]).is_err());
        let c = [b(0., 0., 10., 10.), b(45., 45., 55., 55.)];
        assert_eq!(baseline_centermost(100., 100., &c).unwrap(), 1);
        let eq = [b(0., 45., 10., 55.), b(90., 45., 100., 55.)];
        assert_eq!(baseline_centermost(100., 100., &eq).unwrap(), 0);
    }

    #[test]
    fn argmax_ties_to_lowest() {
        assert_eq!(argmax(&[0.1, 0.9, 0.3]), Some(1));
        assert_eq!(argmax(&[0.5, 0.5]), Some(0));
        assert_eq!(argmax(&[]), None);
    }

    #[test]
    fn mstp_accuracy_counts() {
        let g = b(0., 0., 10., 10.);
        let wrong = b(50., 50., 60., 60.);
        assert_eq!(mstp_accuracy(&[(g, g), (g, g)], 0.5), 1.0);
        assert_eq!(mstp_accuracy(&[(wrong, g)], 0.5), 0.0);
    }
}

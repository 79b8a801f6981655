//! Candidate sets for selection: the annotated boxes of a frame, or the
//! detector's proposals with the main doorway matched by overlap.

use serde::{Deserialize, Serialize};

use super::SelectorError;
use crate::dataset::LoadedFrame;
use crate::detector::DetectorModel;
use crate::evaluation::{iou, IOU_THRESHOLD, SCORE_THRESHOLD};
use crate::BBox;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CandidateSource {
    #[default]
    GroundTruth,
    DetectorProposals,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidateSet {
    pub frame_id: String,
    /// Position of the frame in the list the set was built from.
    pub frame_index: usize,
    pub boxes: Vec<BBox>,
    /// Index of the candidate treated as correct during training.
    pub target: usize,
    pub gt_mstp: BBox,
}

/// Builds one candidate set per usable frame and returns it with the
/// number of frames skipped because no proposal overlaps the annotated
/// main doorway at IoU ≥ 0.5.
pub fn candidate_sets(
    frames: &[LoadedFrame],
    source: CandidateSource,
    detector: Option<&DetectorModel>,
) -> Result<(Vec<CandidateSet>, usize), SelectorError> {
    let mut sets = Vec::with_capacity(frames.len());
    let mut skipped = 0;
    for (frame_index, f) in frames.iter().enumerate() {
        let r = &f.record;
        let mstp = r.mstp_index().ok_or_else(|| SelectorError::NoMstp(r.frame_id.clone()))?;
        let gt_mstp = r.annotations[mstp].bbox;
        let (boxes, target) = match source {
            CandidateSource::GroundTruth => (r.boxes(), mstp),
            CandidateSource::DetectorProposals => {
                let det = detector.ok_or_else(|| SelectorError::MissingDetector(r.frame_id.clone()))?;
                let boxes: Vec<BBox> = det.detect(&f.image, SCORE_THRESHOLD).into_iter().map(|d| d.bbox).collect();
                let best = boxes
                    .iter()
                    .enumerate()
                    .map(|(i, b)| (i, iou(b, &gt_mstp)))
                    .fold(None, |acc: Option<(usize, f64)>, (i, v)| if acc.is_none_or(|(_, a)| v > a) { Some((i, v)) } else { acc });
                match best {
                    Some((i, v)) if v >= IOU_THRESHOLD => (boxes, i),
                    _ => {
                        skipped += 1;
                        continue;
                    }
                }
            }
        };
        sets.push(CandidateSet { frame_id: r.frame_id.clone(), frame_index, boxes, target, gt_mstp });
    }
    if skipped > 0 {
        log::warn!("{skipped} frame(s) skipped: no detector proposal matches the main doorway at IoU >= {IOU_THRESHOLD}");
    }
    Ok((sets, skipped))
}

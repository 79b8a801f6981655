//! Per-variant evaluation reports and their text table.

use std::collections::BTreeMap;
use std::fmt::Write;

use serde::{Deserialize, Serialize};

use crate::dataset::FrameRecord;
use crate::evaluation::{
    baseline_centermost, baseline_random_expected, detection_metrics, discordant, mcnemar, mstp_correct, DetectionPrediction,
    EvalError, FrameDetections, SeedSummary, SelectionPrediction, IOU_THRESHOLD,
};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub variant: String,
    pub detection_frames: usize,
    pub map50: f64,
    pub mean_iou: f64,
    pub recall: f64,
    pub composite: f64,
    pub selection_frames: usize,
    pub mstp_accuracy: f64,
    #[serde(default)]
    pub raf_accuracy: Option<f64>,
    pub baseline_random: f64,
    pub baseline_centermost: f64,
    /// Selector against the centre-most baseline, paired per frame.
    pub mcnemar_p: f64,
    #[serde(default)]
    pub per_seed: Vec<f64>,
    #[serde(default)]
    pub summary: Option<SeedSummary>,
}

/// Per-frame correctness of one selection file.
#[derive(Clone, Debug, PartialEq)]
pub struct SelectionOutcome {
    pub frame_id: String,
    pub k: usize,
    pub correct: bool,
    pub centermost_correct: bool,
}

pub fn selection_outcomes(frames: &[FrameRecord], preds: &[SelectionPrediction]) -> Result<Vec<SelectionOutcome>, EvalError> {
    let index: BTreeMap<&str, &FrameRecord> = frames.iter().map(|f| (f.frame_id.as_str(), f)).collect();
    let mut sorted: Vec<&SelectionPrediction> = preds.iter().collect();
    sorted.sort_by(|a, b| a.frame_id.cmp(&b.frame_id));
    sorted
        .into_iter()
        .map(|p| {
            let f = index.get(p.frame_id.as_str()).ok_or_else(|| EvalError::UnknownFrame(p.frame_id.clone()))?;
            let gt = f.mstp_box().ok_or_else(|| EvalError::NoMstp(p.frame_id.clone()))?;
            let chosen = p.candidate_boxes.get(p.chosen_index).ok_or_else(|| EvalError::ChosenOutOfRange(p.frame_id.clone()))?;
            let centre = baseline_centermost(f.width as f64, f.height as f64, &p.candidate_boxes)?;
            Ok(SelectionOutcome {
                frame_id: p.frame_id.clone(),
                k: p.candidate_boxes.len(),
                correct: mstp_correct(chosen, &gt, IOU_THRESHOLD),
                centermost_correct: mstp_correct(&p.candidate_boxes[centre], &gt, IOU_THRESHOLD),
            })
        })
        .collect()
}

fn accuracy(outcomes: &[SelectionOutcome]) -> f64 {
    if outcomes.is_empty() {
        return 0.0;
    }
    outcomes.iter().filter(|o| o.correct).count() as f64 / outcomes.len() as f64
}

/// Scores stored prediction files against the manifest frames they cover.
///
/// Detection metrics run over every frame in `frames` (a frame without a
/// prediction line counts as no detections). Selection metrics run over
/// the frames present in `selections`. Aggregation is in frame-id order.
pub fn evaluate(
    variant: &str,
    frames: &[FrameRecord],
    detections: &[DetectionPrediction],
    selections: &[SelectionPrediction],
    raf: Option<&[SelectionPrediction]>,
) -> Result<EvalReport, EvalError> {
    let mut report = EvalReport { variant: variant.to_string(), mcnemar_p: 1.0, ..Default::default() };
    let det_by_id: BTreeMap<&str, &DetectionPrediction> = detections.iter().map(|d| (d.frame_id.as_str(), d)).collect();
    if let Some(stray) = detections.iter().find(|d| !frames.iter().any(|f| f.frame_id == d.frame_id)) {
        return Err(EvalError::UnknownFrame(stray.frame_id.clone()));
    }
    if !frames.is_empty() {
        let mut sorted: Vec<&FrameRecord> = frames.iter().collect();
        sorted.sort_by(|a, b| a.frame_id.cmp(&b.frame_id));
        let fd: Vec<FrameDetections> = sorted
            .iter()
            .map(|f| FrameDetections {
                frame_id: f.frame_id.clone(),
                detections: det_by_id.get(f.frame_id.as_str()).map(|d| d.detections()).unwrap_or_default(),
                gts: f.boxes(),
            })
            .collect();
        let m = detection_metrics(&fd)?;
        report.detection_frames = fd.len();
        (report.map50, report.mean_iou, report.recall, report.composite) = (m.map50, m.mean_iou, m.recall, m.composite);
    }
    let outcomes = selection_outcomes(frames, selections)?;
    if !outcomes.is_empty() {
        report.selection_frames = outcomes.len();
        report.mstp_accuracy = accuracy(&outcomes);
        let ks: Vec<usize> = outcomes.iter().map(|o| o.k).collect();
        report.baseline_random = baseline_random_expected(&ks)?;
        report.baseline_centermost = outcomes.iter().filter(|o| o.centermost_correct).count() as f64 / outcomes.len() as f64;
        let pairs: Vec<(bool, bool)> = outcomes.iter().map(|o| (o.correct, o.centermost_correct)).collect();
        let (b, c) = discordant(&pairs);
        report.mcnemar_p = mcnemar(b, c);
    }
    if let Some(raf) = raf {
        report.raf_accuracy = Some(accuracy(&selection_outcomes(frames, raf)?));
    }
    Ok(report)
}

fn pct(v: f64) -> String {
    format!("{:.2}", v * 100.0)
}

/// Fixed-width table, one row per report, values in percent.
pub fn render_table(reports: &[EvalReport]) -> String {
    let header = ["Variant", "mAP@0.5", "mIoU", "Recall", "Composite", "MSTP Acc", "+RAF", "Random-1/k", "Center-most", "McNemar p"];
    let rows: Vec<Vec<String>> = reports
        .iter()
        .map(|r| {
            vec![
                r.variant.clone(),
                pct(r.map50),
                pct(r.mean_iou),
                pct(r.recall),
                pct(r.composite),
                pct(r.mstp_accuracy),
                r.raf_accuracy.map(pct).unwrap_or_else(|| "-".into()),
                pct(r.baseline_random),
                pct(r.baseline_centermost),
                format!("{:.4}", r.mcnemar_p),
            ]
        })
        .collect();
    let widths: Vec<usize> =
        (0..header.len()).map(|c| rows.iter().map(|r| r[c].len()).chain([header[c].len()]).max().unwrap_or(0)).collect();
    let mut out = String::new();
    let line = |cells: Vec<&str>, out: &mut String| {
        let parts: Vec<String> = cells.iter().zip(&widths).enumerate().map(|(i, (c, w))| {
            if i == 0 { format!("{c:<w$}") } else { format!("{c:>w$}") }
        }).collect();
        let _ = writeln!(out, "{}", parts.join(" | ").trim_end());
    };
    line(header.to_vec(), &mut out);
    let rule: Vec<String> = widths.iter().map(|w| "-".repeat(*w)).collect();
    let _ = writeln!(out, "{}", rule.join("-+-"));
    for r in &rows {
        line(r.iter().map(String::as_str).collect(), &mut out);
    }
    for r in reports.iter().filter(|r| r.summary.is_some()) {
        let s = r.summary.as_ref().unwrap();
        let _ = writeln!(
            out,
            "{}: {} seeds, accuracy {}% ± {}% (95% CI [{}%, {}%])",
            r.variant,
            s.n,
            pct(s.mean),
            pct(s.std),
            pct(s.ci95[0]),
            pct(s.ci95[1])
        );
    }
    out
}

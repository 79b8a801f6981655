//! Detect → score → fuse, shared by `infer`, the service and evaluation.

use std::path::Path;

use serde::{Deserialize, Serialize};
use waymark_core::dataset::{LoadedFrame, RgbImage};
use waymark_core::detector::{load_detector, DetectorModel};
use waymark_core::evaluation::{SelectionPrediction, SCORE_THRESHOLD};
use waymark_core::retrieval::{build_bank, fuse, softmax, BankRecipe, FeatureBank, FusionConfig, Label, RegionEmbedding, ScoreNorm};
use waymark_core::selector::{load_selector, select, SelectorModel};
use waymark_core::BBox;

use crate::HarnessError;

/// Output of one inference call. `s_sel` holds the normalized selector
/// scores that enter the fusion, so `s_final = α·s_sel + (1 − α)·s_ret`
/// holds for the reported values; `s_sel_raw` keeps the logits.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Suggestion {
    pub boxes: Vec<BBox>,
    pub scores: Vec<f64>,
    pub s_sel: Vec<f64>,
    pub s_sel_raw: Vec<f64>,
    pub s_ret: Option<Vec<f64>>,
    pub s_final: Option<Vec<f64>>,
    /// `None` when the detector found nothing above the threshold.
    pub chosen_index: Option<usize>,
}

/// Selector output over a fixed candidate list.
#[derive(Clone, Debug, PartialEq)]
pub struct Selection {
    pub logits: Vec<f64>,
    pub s_sel: Vec<f64>,
    pub s_ret: Option<Vec<f64>>,
    pub s_final: Option<Vec<f64>>,
    /// Argmax of the logits alone.
    pub base_index: usize,
    /// Argmax after fusion, or `base_index` without a bank.
    pub chosen_index: usize,
}

impl Selection {
    /// Prediction lines without and with retrieval fusion.
    pub fn predictions(&self, frame_id: &str, boxes: &[BBox]) -> (SelectionPrediction, Option<SelectionPrediction>) {
        let base = SelectionPrediction {
            frame_id: frame_id.to_string(),
            candidate_boxes: boxes.to_vec(),
            s_sel: self.logits.clone(),
            s_ret: None,
            s_final: None,
            chosen_index: self.base_index,
        };
        let raf = self.s_ret.as_ref().map(|r| SelectionPrediction {
            s_ret: Some(r.clone()),
            s_final: self.s_final.clone(),
            chosen_index: self.chosen_index,
            ..base.clone()
        });
        (base, raf)
    }
}

pub struct Pipeline {
    pub detector: Option<DetectorModel>,
    pub selector: SelectorModel,
    pub bank: Option<FeatureBank>,
    pub fusion: FusionConfig,
    pub score_threshold: f64,
}

impl Pipeline {
    pub fn new(detector: Option<DetectorModel>, selector: SelectorModel, bank: Option<FeatureBank>, fusion: FusionConfig) -> Result<Self, HarnessError> {
        if let Some(b) = &bank {
            let own = selector.embedder_checksum();
            if b.embedder_checksum != own {
                return Err(HarnessError::BankMismatch { bank: b.embedder_checksum.clone(), selector: own });
            }
        }
        Ok(Self { detector, selector, bank, fusion, score_threshold: SCORE_THRESHOLD })
    }

    pub fn load(detector: Option<&Path>, selector: &Path, bank: Option<&Path>, fusion: FusionConfig) -> Result<Self, HarnessError> {
        let detector = detector.map(load_detector).transpose()?.map(|(m, _)| m);
        let (selector, _) = load_selector(selector)?;
        let bank = bank.map(FeatureBank::load).transpose()?;
        Self::new(detector, selector, bank, fusion)
    }

    pub fn with_threshold(mut self, score_threshold: f64) -> Self {
        self.score_threshold = score_threshold;
        self
    }

    /// Scores `boxes` and, with a bank, fuses in the retrieval score.
    pub fn select_among(&self, image: &RgbImage, boxes: &[BBox]) -> Result<Selection, HarnessError> {
        let (logits, embeddings) = self.selector.score_and_embed(image, boxes)?;
        let base_index = select(&logits)?;
        match &self.bank {
            Some(bank) => {
                let s_ret = embeddings.iter().map(|e| bank.query(e)).collect::<Result<Vec<_>, _>>()?;
                let fused = fuse(&logits, &s_ret, self.fusion)?;
                Ok(Selection { logits, s_sel: fused.s_sel, s_ret: Some(s_ret), s_final: Some(fused.s_final), base_index, chosen_index: fused.index })
            }
            None => {
                let s_sel = match self.fusion.norm {
                    ScoreNorm::Softmax => softmax(&logits),
                    ScoreNorm::Raw => logits.clone(),
                };
                Ok(Selection { logits, s_sel, s_ret: None, s_final: None, base_index, chosen_index: base_index })
            }
        }
    }

    /// Full inference on one frame: detections above the threshold, then
    /// selection among them.
    pub fn suggest(&self, image: &RgbImage) -> Result<Suggestion, HarnessError> {
        let det = self.detector.as_ref().ok_or_else(|| HarnessError::Config("no detector loaded".into()))?;
        let dets = det.detect(image, self.score_threshold);
        let boxes: Vec<BBox> = dets.iter().map(|d| d.bbox).collect();
        let scores: Vec<f64> = dets.iter().map(|d| d.score).collect();
        if boxes.is_empty() {
            return Ok(Suggestion { boxes, scores, s_sel: vec![], s_sel_raw: vec![], s_ret: None, s_final: None, chosen_index: None });
        }
        let s = self.select_among(image, &boxes)?;
        Ok(Suggestion { boxes, scores, s_sel: s.s_sel, s_sel_raw: s.logits, s_ret: s.s_ret, s_final: s.s_final, chosen_index: Some(s.chosen_index) })
    }
}

/// Embeds every annotated region of `frames` with the selector's local
/// branch.
pub fn region_embeddings(selector: &SelectorModel, frames: &[LoadedFrame]) -> Result<Vec<RegionEmbedding>, HarnessError> {
    let mut out = Vec::new();
    for f in frames {
        let r = &f.record;
        let emb = selector.embed(&f.image, &r.boxes())?;
        for (i, (a, e)) in r.annotations.iter().zip(emb).enumerate() {
            out.push(RegionEmbedding {
                frame_id: r.frame_id.clone(),
                annotation_index: i,
                game: r.game.clone(),
                label: if a.is_mstp { Label::Mstp } else { Label::Stp },
                embedding: e,
            });
        }
    }
    Ok(out)
}

/// Builds a bank from training-split frames with `selector`'s embedder.
pub fn bank_from_frames(selector: &SelectorModel, frames: &[LoadedFrame], recipe: &BankRecipe) -> Result<FeatureBank, HarnessError> {
    Ok(build_bank(&region_embeddings(selector, frames)?, recipe, &selector.embedder_checksum())?)
}

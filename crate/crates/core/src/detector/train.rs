//! Detector training: region-proposal and box-head losses, per-epoch
//! validation on the composite metric, early stopping and best-epoch
//! restore.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use waymark_nn::{Graph, Sgd, SgdConfig, Tensor, Var};

use super::boxes::{sample_anchors, sample_rois, Rect};
use super::{DetectorError, DetectorModel, Features, HEAD_CODER, RPN_CODER};
use crate::adapter::{backbone_checksum, TrainMode};
use crate::dataset::LoadedFrame;
use crate::evaluation::{detection_metrics, DetectionMetrics, FrameDetections};

/// Detections below this score are dropped before computing validation
/// metrics; the 0.5 operating threshold is applied inside the metrics.
pub const EVAL_SCORE_FLOOR: f64 = 0.05;

const SMOOTH_L1_BETA: f32 = 1.0 / 9.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectorTrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub hflip_probability: f64,
    pub max_epochs: usize,
    /// Non-improving epochs tolerated before stopping.
    pub patience: usize,
    pub mode: TrainMode,
    pub seed: u64,
}

impl Default for DetectorTrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 5e-3,
            momentum: 0.9,
            weight_decay: 5e-4,
            batch_size: 4,
            hflip_probability: 0.5,
            max_epochs: 50,
            patience: 10,
            mode: TrainMode::Full,
            seed: 42,
        }
    }
}

impl DetectorTrainConfig {
    pub fn validate(&self) -> Result<(), DetectorError> {
        let bad = |m: &str| Err(DetectorError::Config(m.into()));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 {
            return bad("momentum must be in [0, 1) and weight_decay non-negative");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(0.0..=1.0).contains(&self.hflip_probability) {
            return bad("hflip_probability must be in [0, 1]");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// `None` for epoch 0, the untrained evaluation.
    pub train_loss: Option<f64>,
    pub val: DetectionMetrics,
    pub backbone_checksum: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectorHistory {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub stopped_early: bool,
}

impl DetectorHistory {
    pub fn best(&self) -> &EpochRecord {
        &self.epochs[self.best_epoch]
    }

    pub fn write_curves(&self, path: impl AsRef<Path>) -> Result<(), DetectorError> {
        let path = path.as_ref();
        let io = |e: csv::Error| DetectorError::Io(path.to_path_buf(), e.into());
        let mut w = csv::Writer::from_path(path).map_err(io)?;
        w.write_record(["epoch", "train_loss", "val_map", "val_miou", "val_recall", "val_composite"]).map_err(io)?;
        for e in &self.epochs {
            let loss = e.train_loss.map(|l| l.to_string()).unwrap_or_default();
            let v = &e.val;
            w.write_record([e.epoch.to_string(), loss, v.map50.to_string(), v.mean_iou.to_string(), v.recall.to_string(), v.composite.to_string()])
                .map_err(io)?;
        }
        w.flush().map_err(|e| DetectorError::Io(path.to_path_buf(), e))
    }
}

/// Validation metrics of `model` on `frames`.
pub fn evaluate_detector(model: &DetectorModel, frames: &[LoadedFrame]) -> Result<DetectionMetrics, DetectorError> {
    let dets: Vec<FrameDetections> = frames
        .iter()
        .map(|f| FrameDetections {
            frame_id: f.record.frame_id.clone(),
            detections: model.detect(&f.image, EVAL_SCORE_FLOOR),
            gts: f.record.boxes(),
        })
        .collect();
    Ok(detection_metrics(&dets)?)
}

/// One training frame at network resolution, plain and mirrored.
struct Item {
    views: [Tensor; 2],
    gts: [Vec<Rect>; 2],
}

fn hflip_chw(t: &Tensor) -> Tensor {
    let s = t.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    let src = t.data();
    let mut out = vec![0.0f32; src.len()];
    for p in 0..c * h {
        for x in 0..w {
            out[p * w + x] = src[p * w + w - 1 - x];
        }
    }
    Tensor::new([c, h, w], out)
}

fn stack(parts: &[&Tensor]) -> Tensor {
    let mut shape = parts[0].shape().to_vec();
    let mut data = Vec::with_capacity(parts.len() * parts[0].numel());
    for p in parts {
        data.extend_from_slice(p.data());
    }
    if shape.len() == 4 {
        shape[0] = parts.len();
    } else {
        shape.insert(0, parts.len());
    }
    Tensor::new(shape, data)
}

fn prepare_items(model: &DetectorModel, frames: &[LoadedFrame]) -> Result<Vec<Item>, DetectorError> {
    let size = model.arch.input_size as f32;
    frames
        .iter()
        .map(|f| {
            if f.record.annotations.is_empty() {
                return Err(DetectorError::NoBoxes(f.record.frame_id.clone()));
            }
            let p = model.prepare(&f.image);
            let (sx, sy) = p.scale;
            let gts: Vec<Rect> = f
                .record
                .boxes()
                .iter()
                .map(|b| [b.x1 as f32 / sx, b.y1 as f32 / sy, b.x2 as f32 / sx, b.y2 as f32 / sy])
                .collect();
            let flipped_gts = gts.iter().map(|b| [size - b[2], b[1], size - b[0], b[3]]).collect();
            let flipped = hflip_chw(&p.tensor);
            Ok(Item { views: [p.tensor, flipped], gts: [gts, flipped_gts] })
        })
        .collect()
}

enum Batch {
    Images(Tensor),
    Cached { p3: Tensor, hidden: Tensor },
}

/// Total loss of one batch: objectness BCE, proposal smooth-L1, box-head
/// cross-entropy and box-head smooth-L1.
fn batch_loss(model: &DetectorModel, g: &mut Graph, batch: Batch, gts: &[&[Rect]], rng: &mut ChaCha8Rng) -> Var {
    let arch = &model.arch;
    let (p3, hidden) = match batch {
        Batch::Images(x) => {
            let x = g.input(x);
            model.trunk(g, x)
        }
        Batch::Cached { p3, hidden } => (g.input(p3), g.input(hidden)),
    };
    let (logits, deltas) = model.rpn_heads(g, hidden);
    let anchors = model.anchors();
    let na = anchors.len();
    let hw = arch.grid() * arch.grid();

    let (mut cls_idx, mut cls_t, mut reg_idx, mut reg_t) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for (b, gt) in gts.iter().enumerate() {
        let sample = sample_anchors(anchors, gt, arch.rpn_pos_iou, arch.rpn_neg_iou, arch.rpn_batch, 0.5, rng);
        for (a, m) in sample {
            cls_idx.push(b * na + a);
            cls_t.push(m.is_some() as u8 as f32);
            if let Some(gi) = m {
                let t = RPN_CODER.encode(&anchors[a], &gt[gi]);
                let (ch, yx) = (a / hw, a % hw);
                for (k, tv) in t.iter().enumerate() {
                    reg_idx.push(b * 4 * na + (ch * 4 + k) * hw + yx);
                    reg_t.push(*tv);
                }
            }
        }
    }
    let sel = g.gather_flat(logits, &cls_idx);
    let rpn_cls = g.bce_with_logits(sel, &cls_t);
    let sel = g.gather_flat(deltas, &reg_idx);
    let rpn_reg = g.smooth_l1(sel, &reg_t, SMOOTH_L1_BETA, cls_idx.len().max(1) as f32);

    let (lv, dv) = (g.value(logits).clone(), g.value(deltas).clone());
    let (mut rois, mut labels, mut hreg_idx, mut hreg_t) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for (b, gt) in gts.iter().enumerate() {
        let mut cands = model.proposals(&lv, &dv, b, arch.post_nms_train);
        cands.extend_from_slice(gt);
        for (i, m) in sample_rois(&cands, gt, arch.roi_fg_iou, arch.roi_batch, arch.roi_fg_fraction, rng) {
            let r = rois.len();
            rois.push((b, cands[i]));
            labels.push(m.is_some() as usize);
            if let Some(gi) = m {
                let t = HEAD_CODER.encode(&cands[i], &gt[gi]);
                for (k, tv) in t.iter().enumerate() {
                    hreg_idx.push(r * 4 + k);
                    hreg_t.push(*tv);
                }
            }
        }
    }
    let (cls, reg) = model.box_head(g, p3, &rois);
    let head_cls = g.cross_entropy(cls, &labels);
    let sel = g.gather_flat(reg, &hreg_idx);
    let head_reg = g.smooth_l1(sel, &hreg_t, SMOOTH_L1_BETA, rois.len() as f32);

    let a = g.add(rpn_cls, rpn_reg);
    let b = g.add(head_cls, head_reg);
    g.add(a, b)
}

/// Trains `model` in `cfg.mode`. Epoch 0 evaluates the untrained model and
/// takes part in best-epoch selection; on return the model holds the
/// parameters of the best epoch (highest validation composite, earliest on
/// ties).
pub fn train_detector(
    model: &mut DetectorModel,
    train: &[LoadedFrame],
    val: &[LoadedFrame],
    cfg: &DetectorTrainConfig,
) -> Result<DetectorHistory, DetectorError> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(DetectorError::EmptyTrain);
    }
    if val.is_empty() {
        return Err(DetectorError::EmptyValidation);
    }
    if let Some(f) = val.iter().find(|f| f.record.annotations.is_empty()) {
        return Err(DetectorError::NoBoxes(f.record.frame_id.clone()));
    }
    model.set_mode(cfg.mode);
    let items = prepare_items(model, train)?;
    let cache: Option<Vec<[Features; 2]>> = (cfg.mode == TrainMode::AdapterOnly)
        .then(|| items.iter().map(|it| [model.features(&it.views[0]), model.features(&it.views[1])]).collect());

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Sgd::new(SgdConfig {
        learning_rate: cfg.learning_rate as f32,
        momentum: cfg.momentum as f32,
        weight_decay: cfg.weight_decay as f32,
    });
    let val0 = evaluate_detector(model, val)?;
    log::info!("detector epoch 0: val composite {:.4}", val0.composite);
    let mut epochs = vec![EpochRecord { epoch: 0, train_loss: None, val: val0, backbone_checksum: backbone_checksum(model) }];
    let mut best = (0usize, epochs[0].val.composite, model.store.clone());
    let mut stale = 0usize;
    let mut stopped_early = false;

    for epoch in 1..=cfg.max_epochs {
        let mut order: Vec<usize> = (0..items.len()).collect();
        order.shuffle(&mut rng);
        let mut total = 0.0f64;
        let mut batches = 0usize;
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let flips: Vec<usize> = chunk.iter().map(|_| rng.random_bool(cfg.hflip_probability) as usize).collect();
            let gts: Vec<&[Rect]> = chunk.iter().zip(&flips).map(|(&i, &f)| items[i].gts[f].as_slice()).collect();
            let batch = match &cache {
                Some(c) => Batch::Cached {
                    p3: stack(&chunk.iter().zip(&flips).map(|(&i, &f)| &c[i][f].p3).collect::<Vec<_>>()),
                    hidden: stack(&chunk.iter().zip(&flips).map(|(&i, &f)| &c[i][f].hidden).collect::<Vec<_>>()),
                },
                None => Batch::Images(stack(&chunk.iter().zip(&flips).map(|(&i, &f)| &items[i].views[f]).collect::<Vec<_>>())),
            };
            let mut g = Graph::new();
            let loss = batch_loss(model, &mut g, batch, &gts, &mut rng);
            let lv = g.value(loss).item();
            if !lv.is_finite() {
                return Err(DetectorError::NonFiniteLoss { epoch, batch: bi });
            }
            let grads = g.backward(loss);
            if !grads.is_finite() {
                return Err(DetectorError::NonFiniteLoss { epoch, batch: bi });
            }
            opt.step(&mut model.store, &grads);
            total += lv as f64;
            batches += 1;
        }
        let metrics = evaluate_detector(model, val)?;
        let train_loss = total / batches as f64;
        log::info!("detector epoch {epoch}: loss {train_loss:.4}, val composite {:.4}", metrics.composite);
        let improved = metrics.composite > best.1;
        epochs.push(EpochRecord { epoch, train_loss: Some(train_loss), val: metrics, backbone_checksum: backbone_checksum(model) });
        if improved {
            best = (epoch, epochs[epoch].val.composite, model.store.clone());
            stale = 0;
        } else {
            stale += 1;
            if stale > cfg.patience {
                stopped_early = true;
                break;
            }
        }
    }
    model.store = best.2;
    Ok(DetectorHistory { epochs, best_epoch: best.0, stopped_early })
}

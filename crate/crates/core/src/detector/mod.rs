//! Stage 1: a two-stage region-proposal detector for screen transition
//! points. A small feature-pyramid backbone feeds a region-proposal network
//! and a box head whose shared representation passes through one bottleneck
//! adapter before the classification and regression predictors.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use waymark_nn::{sigmoid, Archive, Conv2d, Graph, Init, Linear, NnError, ParamStore, Tensor, Var};

use crate::adapter::{apply_train_mode, Adapter, AdapterError, AdapterInit, AdapterModel, TrainMode};
use crate::dataset::RgbImage;
use crate::evaluation::{ScoredBox, SCORE_THRESHOLD};
use crate::BBox;

pub mod boxes;
mod train;

use boxes::{clip, descending, grid_anchors, nms_sorted, BoxCoder, Rect};
pub use train::{evaluate_detector, train_detector, DetectorHistory, DetectorTrainConfig, EpochRecord, EVAL_SCORE_FLOOR};

pub const TINY_FPN: &str = "tiny-fpn";

const FEAT: usize = 64;
const STRIDE: usize = 8;
const POOL: usize = 7;
const RPN_CODER: BoxCoder = BoxCoder::new([1.0, 1.0, 1.0, 1.0]);
const HEAD_CODER: BoxCoder = BoxCoder::new([10.0, 10.0, 5.0, 5.0]);
/// Parameter-name prefixes optimized in adapter-only mode.
const HEAD_PREFIXES: [&str; 5] = ["rpn.logits.", "rpn.deltas.", "head.adapter.", "head.cls.", "head.reg."];

#[derive(Debug, thiserror::Error)]
pub enum DetectorError {
    #[error("unknown detector architecture {0:?} (available: {TINY_FPN})")]
    UnknownArchitecture(String),
    #[error(
        "pretrained backbone weights are unavailable for {arch}; pass an offline weights archive via \
         `pretrained_weights` in the architecture config, or build with pretrained=false"
    )]
    PretrainedUnavailable { arch: String },
    #[error("invalid detector configuration: {0}")]
    Config(String),
    #[error("training set is empty")]
    EmptyTrain,
    #[error("validation set is empty")]
    EmptyValidation,
    #[error("frame {0} has no transition-point box")]
    NoBoxes(String),
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error("checkpoint header is missing or malformed: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Adapter(#[from] AdapterError),
    #[error(transparent)]
    Eval(#[from] crate::evaluation::EvalError),
    #[error("{0}: {1}")]
    Io(PathBuf, #[source] std::io::Error),
}

/// Architecture and inference settings, stored in every checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectorArch {
    pub name: String,
    /// Frames are resized to `input_size × input_size` before the backbone.
    pub input_size: usize,
    pub anchor_sizes: Vec<f32>,
    /// Height/width ratios.
    pub anchor_ratios: Vec<f32>,
    pub rpn_batch: usize,
    pub rpn_pos_iou: f32,
    pub rpn_neg_iou: f32,
    pub rpn_nms_iou: f32,
    pub pre_nms_top: usize,
    pub post_nms_train: usize,
    pub post_nms_test: usize,
    pub roi_batch: usize,
    pub roi_fg_iou: f32,
    pub roi_fg_fraction: f32,
    pub head_dim: usize,
    pub adapter_dim: usize,
    pub nms_iou: f32,
    pub max_detections: usize,
    pub pretrained_weights: Option<PathBuf>,
}

impl Default for DetectorArch {
    fn default() -> Self {
        Self {
            name: TINY_FPN.into(),
            input_size: 128,
            anchor_sizes: vec![16.0, 32.0, 48.0],
            anchor_ratios: vec![1.0, 1.5, 2.0],
            rpn_batch: 64,
            rpn_pos_iou: 0.7,
            rpn_neg_iou: 0.3,
            rpn_nms_iou: 0.7,
            pre_nms_top: 300,
            post_nms_train: 64,
            post_nms_test: 100,
            roi_batch: 32,
            roi_fg_iou: 0.5,
            roi_fg_fraction: 0.25,
            head_dim: 128,
            adapter_dim: 32,
            nms_iou: 0.5,
            max_detections: 100,
            pretrained_weights: None,
        }
    }
}

impl DetectorArch {
    pub fn validate(&self) -> Result<(), DetectorError> {
        if self.name != TINY_FPN {
            return Err(DetectorError::UnknownArchitecture(self.name.clone()));
        }
        if self.input_size < 32 || self.input_size % 16 != 0 {
            return Err(DetectorError::Config(format!("input_size must be a multiple of 16 and >= 32, got {}", self.input_size)));
        }
        if self.anchor_sizes.is_empty() || self.anchor_ratios.is_empty() {
            return Err(DetectorError::Config("anchor sizes and ratios must be non-empty".into()));
        }
        if self.anchor_sizes.iter().chain(&self.anchor_ratios).any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(DetectorError::Config("anchor sizes and ratios must be positive".into()));
        }
        if self.rpn_batch == 0 || self.roi_batch == 0 || self.post_nms_train == 0 || self.post_nms_test == 0 {
            return Err(DetectorError::Config("sample and proposal counts must be positive".into()));
        }
        Ok(())
    }

    fn anchors_per_cell(&self) -> usize {
        self.anchor_sizes.len() * self.anchor_ratios.len()
    }

    fn grid(&self) -> usize {
        self.input_size / STRIDE
    }
}

#[derive(Clone, Debug)]
struct Layers {
    c1: Conv2d,
    c2: Conv2d,
    c3: Conv2d,
    c4: Conv2d,
    c5: Conv2d,
    lat3: Conv2d,
    lat4: Conv2d,
    smooth: Conv2d,
    rpn_conv: Conv2d,
    rpn_logits: Conv2d,
    rpn_deltas: Conv2d,
    fc1: Linear,
    fc2: Linear,
    adapter: Adapter,
    cls: Linear,
    reg: Linear,
}

/// Frozen-trunk features of one resized frame: the stride-8 pyramid level
/// and the region-proposal hidden map, each `[1, 64, g, g]`.
#[derive(Clone, Debug)]
pub(crate) struct Features {
    pub p3: Tensor,
    pub hidden: Tensor,
}

#[derive(Clone, Debug)]
pub struct DetectorModel {
    pub arch: DetectorArch,
    pub mode: TrainMode,
    pub seed: u64,
    store: ParamStore,
    layers: Layers,
    anchors: Vec<Rect>,
}

impl AdapterModel for DetectorModel {
    fn params(&self) -> &ParamStore {
        &self.store
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn is_adapter_or_head(&self, name: &str) -> bool {
        HEAD_PREFIXES.iter().any(|p| name.starts_with(p))
    }
}

/// Builds the detector. With `pretrained`, the backbone and pyramid weights
/// are read from `arch.pretrained_weights`; the heads and adapter always
/// start from the seeded initialization.
pub fn build_detector(arch: &DetectorArch, mode: TrainMode, pretrained: bool, seed: u64) -> Result<DetectorModel, DetectorError> {
    arch.validate()?;
    let mut store = ParamStore::new();
    let mut init = Init::new(seed);
    let s = &mut store;
    let i = &mut init;
    let a = arch.anchors_per_cell();
    let layers = Layers {
        c1: Conv2d::new(s, i, "backbone.c1", 3, 16, 3, 2, 1),
        c2: Conv2d::new(s, i, "backbone.c2", 16, 32, 3, 2, 1),
        c3: Conv2d::new(s, i, "backbone.c3", 32, 32, 3, 1, 1),
        c4: Conv2d::new(s, i, "backbone.c4", 32, FEAT, 3, 2, 1),
        c5: Conv2d::new(s, i, "backbone.c5", FEAT, FEAT, 3, 2, 1),
        lat3: Conv2d::new(s, i, "fpn.lat3", FEAT, FEAT, 1, 1, 0),
        lat4: Conv2d::new(s, i, "fpn.lat4", FEAT, FEAT, 1, 1, 0),
        smooth: Conv2d::new(s, i, "fpn.smooth", FEAT, FEAT, 3, 1, 1),
        rpn_conv: Conv2d::with_std(s, i, "rpn.conv", FEAT, FEAT, 3, 1, 1, 0.01),
        rpn_logits: Conv2d::with_std(s, i, "rpn.logits", FEAT, a, 1, 1, 0, 0.01),
        rpn_deltas: Conv2d::with_std(s, i, "rpn.deltas", FEAT, 4 * a, 1, 1, 0, 0.01),
        fc1: Linear::new(s, i, "head.fc1", FEAT * POOL * POOL, arch.head_dim),
        fc2: Linear::new(s, i, "head.fc2", arch.head_dim, arch.head_dim),
        adapter: Adapter::new(s, "head.adapter", arch.head_dim, arch.adapter_dim, AdapterInit::Trainable, seed)?,
        cls: Linear::with_std(s, i, "head.cls", arch.head_dim, 2, 0.01),
        reg: Linear::with_std(s, i, "head.reg", arch.head_dim, 4, 0.001),
    };
    if pretrained {
        let path = arch.pretrained_weights.as_ref().ok_or_else(|| DetectorError::PretrainedUnavailable { arch: arch.name.clone() })?;
        let archive = Archive::load(path)?;
        let trunk = archive.tensors.iter().filter(|(n, _)| n.starts_with("backbone.") || n.starts_with("fpn."));
        store.load_named(trunk.map(|(n, t)| (n.as_str(), t)))?;
    }
    let g = arch.grid();
    let anchors = grid_anchors(g, g, STRIDE as f32, &arch.anchor_sizes, &arch.anchor_ratios);
    let mut model = DetectorModel { arch: arch.clone(), mode, seed, store, layers, anchors };
    apply_train_mode(&mut model, mode);
    Ok(model)
}

/// A frame resized to the network input with `pixel − 0.5` centring, and
/// the factors mapping input pixels back to frame pixels.
pub(crate) struct Prepared {
    pub tensor: Tensor,
    pub scale: (f32, f32),
}

impl DetectorModel {
    pub fn set_mode(&mut self, mode: TrainMode) {
        self.mode = mode;
        apply_train_mode(self, mode);
    }

    pub(crate) fn prepare(&self, image: &RgbImage) -> Prepared {
        let s = self.arch.input_size;
        let full = BBox::new(0.0, 0.0, image.width() as f64, image.height() as f64);
        let mut t = image.resample(&full, s, s).to_tensor();
        t.data_mut().iter_mut().for_each(|v| *v -= 0.5);
        Prepared { tensor: t, scale: (image.width() as f32 / s as f32, image.height() as f32 / s as f32) }
    }

    /// Backbone, pyramid and region-proposal hidden map for `[N, 3, S, S]`.
    pub(crate) fn trunk(&self, g: &mut Graph, x: Var) -> (Var, Var) {
        let (l, s) = (&self.layers, &self.store);
        let mut h = x;
        for conv in [&l.c1, &l.c2, &l.c3, &l.c4] {
            let z = conv.forward(g, s, h);
            h = g.relu(z);
        }
        let c3 = h;
        let z = l.c5.forward(g, s, c3);
        let c4 = g.relu(z);
        let lat3 = l.lat3.forward(g, s, c3);
        let lat4 = l.lat4.forward(g, s, c4);
        let up = g.upsample2x(lat4);
        let merged = g.add(lat3, up);
        let p3 = l.smooth.forward(g, s, merged);
        let z = l.rpn_conv.forward(g, s, p3);
        let hidden = g.relu(z);
        (p3, hidden)
    }

    pub(crate) fn features(&self, prepared: &Tensor) -> Features {
        let mut g = Graph::new();
        let s = self.arch.input_size;
        let x = g.input(prepared.clone().reshape([1, 3, s, s]));
        let (p3, hidden) = self.trunk(&mut g, x);
        Features { p3: g.value(p3).clone(), hidden: g.value(hidden).clone() }
    }

    /// Region-proposal logits `[N, A, g, g]` and deltas `[N, 4A, g, g]`.
    pub(crate) fn rpn_heads(&self, g: &mut Graph, hidden: Var) -> (Var, Var) {
        let logits = self.layers.rpn_logits.forward(g, &self.store, hidden);
        let deltas = self.layers.rpn_deltas.forward(g, &self.store, hidden);
        (logits, deltas)
    }

    /// Class logits `[R, 2]` and box deltas `[R, 4]` for `(image, box)` rois.
    pub(crate) fn box_head(&self, g: &mut Graph, p3: Var, rois: &[(usize, Rect)]) -> (Var, Var) {
        let (l, s) = (&self.layers, &self.store);
        let pooled = g.roi_align(p3, rois, POOL, 1.0 / STRIDE as f32, 2);
        let flat = g.reshape(pooled, &[rois.len(), FEAT * POOL * POOL]);
        let z = l.fc1.forward(g, s, flat);
        let h = g.relu(z);
        let z = l.fc2.forward(g, s, h);
        let h = g.relu(z);
        let h = l.adapter.forward(g, s, h);
        (l.cls.forward(g, s, h), l.reg.forward(g, s, h))
    }

    pub(crate) fn anchors(&self) -> &[Rect] {
        &self.anchors
    }

    /// Proposals for image `n` of a batch from the region-proposal outputs:
    /// decode, clip, drop sub-pixel boxes, keep the top scores, then NMS.
    pub(crate) fn proposals(&self, logits: &Tensor, deltas: &Tensor, n: usize, limit: usize) -> Vec<Rect> {
        let na = self.anchors.len();
        let hw = self.arch.grid() * self.arch.grid();
        let size = self.arch.input_size as f32;
        let scores = &logits.data()[n * na..(n + 1) * na];
        let d = &deltas.data()[n * 4 * na..(n + 1) * 4 * na];
        let mut order = descending(scores);
        order.truncate(self.arch.pre_nms_top);
        let mut cands = Vec::with_capacity(order.len());
        for i in order {
            let (a, yx) = (i / hw, i % hw);
            let dv: [f32; 4] = std::array::from_fn(|k| d[(a * 4 + k) * hw + yx]);
            let b = clip(&RPN_CODER.decode(&self.anchors[i], &dv), size, size);
            if b[2] - b[0] >= 1.0 && b[3] - b[1] >= 1.0 {
                cands.push(b);
            }
        }
        let keep = nms_sorted(&cands, self.arch.rpn_nms_iou, limit);
        keep.into_iter().map(|k| cands[k]).collect()
    }

    /// Scored boxes in input pixels, descending, after NMS; no score floor.
    fn detect_input(&self, prepared: &Tensor) -> Vec<(Rect, f32)> {
        let mut g = Graph::new();
        let s = self.arch.input_size;
        let x = g.input(prepared.clone().reshape([1, 3, s, s]));
        let (p3, hidden) = self.trunk(&mut g, x);
        let (logits, deltas) = self.rpn_heads(&mut g, hidden);
        let props = self.proposals(g.value(logits), g.value(deltas), 0, self.arch.post_nms_test);
        if props.is_empty() {
            return Vec::new();
        }
        let rois: Vec<(usize, Rect)> = props.iter().map(|r| (0, *r)).collect();
        let (cls, reg) = self.box_head(&mut g, p3, &rois);
        let (cls, reg) = (g.value(cls), g.value(reg));
        let size = s as f32;
        let mut boxes = Vec::new();
        let mut scores = Vec::new();
        for (r, prop) in props.iter().enumerate() {
            let z = cls.row(r);
            let fg = sigmoid(z[1] - z[0]);
            let b = clip(&HEAD_CODER.decode(prop, reg.row(r)), size, size);
            if b[2] - b[0] >= 1.0 && b[3] - b[1] >= 1.0 {
                boxes.push(b);
                scores.push(fg);
            }
        }
        let order = descending(&scores);
        let sorted: Vec<Rect> = order.iter().map(|&i| boxes[i]).collect();
        nms_sorted(&sorted, self.arch.nms_iou, self.arch.max_detections)
            .into_iter()
            .map(|k| (sorted[k], scores[order[k]]))
            .collect()
    }

    /// Every detection with score ≥ `score_threshold`, descending by score,
    /// in frame pixels.
    pub fn detect(&self, image: &RgbImage, score_threshold: f64) -> Vec<ScoredBox> {
        let prepared = self.prepare(image);
        let (sx, sy) = prepared.scale;
        let (w, h) = (image.width() as f64, image.height() as f64);
        self.detect_input(&prepared.tensor)
            .into_iter()
            .filter(|(_, s)| *s as f64 >= score_threshold)
            .map(|(b, s)| {
                let bb = BBox::new((b[0] * sx) as f64, (b[1] * sy) as f64, (b[2] * sx) as f64, (b[3] * sy) as f64);
                ScoredBox::new(bb.clip(w, h), s as f64)
            })
            .collect()
    }

    /// [`DetectorModel::detect`] at the default 0.5 threshold.
    pub fn detect_default(&self, image: &RgbImage) -> Vec<ScoredBox> {
        self.detect(image, SCORE_THRESHOLD)
    }

    pub fn head_adapter(&self) -> &Adapter {
        &self.layers.adapter
    }

    pub fn checkpoint(&self, epoch: usize, val_composite: f64) -> Archive {
        let meta = serde_json::json!({
            "kind": "detector",
            "architecture": self.arch.name,
            "arch": self.arch,
            "mode": self.mode,
            "seed": self.seed,
            "epoch": epoch,
            "val_composite": val_composite,
        });
        Archive::from_store(meta, &self.store)
    }

    pub fn save(&self, path: impl AsRef<Path>, epoch: usize, val_composite: f64) -> Result<(), DetectorError> {
        Ok(self.checkpoint(epoch, val_composite).save(path)?)
    }
}

/// Header fields of a detector checkpoint.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DetectorCheckpointMeta {
    pub architecture: String,
    pub arch: DetectorArch,
    pub mode: TrainMode,
    pub seed: u64,
    pub epoch: usize,
    pub val_composite: f64,
}

pub fn detector_from_archive(archive: &Archive) -> Result<(DetectorModel, DetectorCheckpointMeta), DetectorError> {
    if archive.meta.get("kind").and_then(|k| k.as_str()) != Some("detector") {
        return Err(DetectorError::Checkpoint("not a detector checkpoint".into()));
    }
    let meta: DetectorCheckpointMeta =
        serde_json::from_value(archive.meta.clone()).map_err(|e| DetectorError::Checkpoint(e.to_string()))?;
    let mut model = build_detector(&meta.arch, meta.mode, false, meta.seed)?;
    archive.restore_into(&mut model.store)?;
    Ok((model, meta))
}

pub fn load_detector(path: impl AsRef<Path>) -> Result<(DetectorModel, DetectorCheckpointMeta), DetectorError> {
    detector_from_archive(&Archive::load(path)?)
}

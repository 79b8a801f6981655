//! Stage 2: main-transition-point selection. Each candidate box is scored
//! from a local residual branch over its crop and a global branch over the
//! whole-frame thumbnail, fused through a bottleneck adapter and a
//! two-layer MLP.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use waymark_nn::{Archive, Conv2d, Graph, Init, Linear, NnError, ParamStore, Tensor, Var};

use crate::adapter::{apply_train_mode, Adapter, AdapterError, AdapterInit, AdapterModel, TrainMode};
use crate::dataset::{crop_local, thumbnail, DatasetError, RgbImage};
use crate::evaluation::argmax;
use crate::BBox;

mod candidates;
mod train;

pub use candidates::{candidate_sets, CandidateSet, CandidateSource};
pub use train::{evaluate_selector, train_selector, SelectorEpoch, SelectorHistory, SelectorTrainConfig};

pub const RESNET18_TINY: &str = "resnet18-tiny";
/// Width of `f_loc` and of `f_glob`.
pub const FEATURE_DIM: usize = 512;
/// Width of the concatenated candidate descriptor.
pub const FUSED_DIM: usize = 2 * FEATURE_DIM;
/// The local branch's stem averages `4 × 4` blocks of the 224-pixel crop.
pub const LOCAL_STEM_POOL: usize = 4;
const HEAD_PREFIXES: [&str; 2] = ["fusion.adapter.", "mlp."];

#[derive(Debug, thiserror::Error)]
pub enum SelectorError {
    #[error("unknown selector architecture {0:?} (available: {RESNET18_TINY})")]
    UnknownArchitecture(String),
    #[error(
        "pretrained local-branch weights are unavailable for {arch}; pass an offline weights archive via \
         `pretrained_weights` in the architecture config, or build with pretrained=false"
    )]
    PretrainedUnavailable { arch: String },
    #[error("invalid selector configuration: {0}")]
    Config(String),
    #[error("candidate list is empty")]
    NoCandidates,
    #[error("training set is empty")]
    EmptyTrain,
    #[error("validation set is empty after candidate filtering")]
    EmptyValidation,
    #[error("frame {0} has no main transition point")]
    NoMstp(String),
    #[error("frame {0} needs a detector to build proposal candidates")]
    MissingDetector(String),
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error("checkpoint header is missing or malformed: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Adapter(#[from] AdapterError),
    #[error("{0}: {1}")]
    Io(PathBuf, #[source] std::io::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SelectorArch {
    pub name: String,
    /// Channel widths of the four residual stages, each stride 2.
    pub local_widths: [usize; 4],
    /// Channel widths of the four stride-2 global conv blocks.
    pub global_widths: [usize; 4],
    pub adapter_dim: usize,
    pub mlp_hidden: usize,
    /// When false the global branch is bypassed and `f_glob` is all zeros.
    pub use_global: bool,
    pub pretrained_weights: Option<PathBuf>,
}

impl Default for SelectorArch {
    fn default() -> Self {
        Self {
            name: RESNET18_TINY.into(),
            local_widths: [16, 32, 64, 128],
            global_widths: [16, 32, 64, 128],
            adapter_dim: 256,
            mlp_hidden: 256,
            use_global: true,
            pretrained_weights: None,
        }
    }
}

impl SelectorArch {
    pub fn validate(&self) -> Result<(), SelectorError> {
        if self.name != RESNET18_TINY {
            return Err(SelectorError::UnknownArchitecture(self.name.clone()));
        }
        if self.local_widths.iter().chain(&self.global_widths).any(|&w| w == 0) || self.mlp_hidden == 0 {
            return Err(SelectorError::Config("layer widths must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct BasicBlock {
    conv1: Conv2d,
    conv2: Conv2d,
    shortcut: Conv2d,
}

impl BasicBlock {
    fn new(store: &mut ParamStore, init: &mut Init, name: &str, cin: usize, cout: usize) -> Self {
        let conv1 = Conv2d::new(store, init, &format!("{name}.conv1"), cin, cout, 3, 2, 1);
        // second conv starts small so each block begins near its shortcut
        let std = 0.1 * (2.0 / (9 * cout) as f32).sqrt();
        let conv2 = Conv2d::with_std(store, init, &format!("{name}.conv2"), cout, cout, 3, 1, 1, std);
        let shortcut = Conv2d::new(store, init, &format!("{name}.shortcut"), cin, cout, 1, 2, 0);
        Self { conv1, conv2, shortcut }
    }

    fn forward(&self, g: &mut Graph, s: &ParamStore, x: Var) -> Var {
        let z = self.conv1.forward(g, s, x);
        let h = g.relu(z);
        let h = self.conv2.forward(g, s, h);
        let sc = self.shortcut.forward(g, s, x);
        let y = g.add(h, sc);
        g.relu(y)
    }
}

#[derive(Clone, Debug)]
struct Layers {
    stem: Conv2d,
    blocks: Vec<BasicBlock>,
    local_fc: Linear,
    global_convs: Vec<Conv2d>,
    global_fc: Linear,
    adapter: Adapter,
    mlp1: Linear,
    mlp2: Linear,
}

#[derive(Clone, Debug)]
pub struct SelectorModel {
    pub arch: SelectorArch,
    pub mode: TrainMode,
    pub seed: u64,
    store: ParamStore,
    layers: Layers,
}

impl AdapterModel for SelectorModel {
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

/// Builds the selector. With `pretrained`, the local branch is read from
/// `arch.pretrained_weights`.
pub fn build_selector(arch: &SelectorArch, mode: TrainMode, pretrained: bool, seed: u64) -> Result<SelectorModel, SelectorError> {
    arch.validate()?;
    let mut store = ParamStore::new();
    let mut init = Init::new(seed);
    let (s, i) = (&mut store, &mut init);
    let lw = arch.local_widths;
    let stem = Conv2d::new(s, i, "local.stem", 3, lw[0], 3, 1, 1);
    let mut blocks = Vec::new();
    let mut cin = lw[0];
    for (k, &w) in lw.iter().enumerate() {
        blocks.push(BasicBlock::new(s, i, &format!("local.layer{}", k + 1), cin, w));
        cin = w;
    }
    let local_fc = Linear::new(s, i, "local.fc", lw[3], FEATURE_DIM);
    let mut global_convs = Vec::new();
    let mut cin = 3;
    for (k, &w) in arch.global_widths.iter().enumerate() {
        global_convs.push(Conv2d::new(s, i, &format!("global.conv{}", k + 1), cin, w, 3, 2, 1));
        cin = w;
    }
    let global_fc = Linear::new(s, i, "global.fc", cin, FEATURE_DIM);
    let adapter = Adapter::new(s, "fusion.adapter", FUSED_DIM, arch.adapter_dim, AdapterInit::Trainable, seed)?;
    let mlp1 = Linear::new(s, i, "mlp.fc1", FUSED_DIM, arch.mlp_hidden);
    let mlp2 = Linear::with_std(s, i, "mlp.fc2", arch.mlp_hidden, 1, 0.01);
    if pretrained {
        let path = arch.pretrained_weights.as_ref().ok_or_else(|| SelectorError::PretrainedUnavailable { arch: arch.name.clone() })?;
        let archive = Archive::load(path)?;
        let local = archive.tensors.iter().filter(|(n, _)| n.starts_with("local."));
        store.load_named(local.map(|(n, t)| (n.as_str(), t)))?;
    }
    let layers = Layers { stem, blocks, local_fc, global_convs, global_fc, adapter, mlp1, mlp2 };
    let mut model = SelectorModel { arch: arch.clone(), mode, seed, store, layers };
    apply_train_mode(&mut model, mode);
    Ok(model)
}

fn centred(mut t: Tensor) -> Tensor {
    t.data_mut().iter_mut().for_each(|v| *v -= 0.5);
    t
}

/// Mean of non-overlapping `k × k` blocks of a `[3, H, W]` tensor.
fn block_mean(t: &Tensor, k: usize) -> Tensor {
    let s = t.shape();
    let (c, h, w) = (s[0], s[1] / k, s[2] / k);
    let src = t.data();
    let mut out = vec![0.0f32; c * h * w];
    let inv = 1.0 / (k * k) as f32;
    for ch in 0..c {
        for y in 0..h * k {
            for x in 0..w * k {
                out[(ch * h + y / k) * w + x / k] += src[(ch * s[1] + y) * s[2] + x] * inv;
            }
        }
    }
    Tensor::new([c, h, w], out)
}

/// Local-branch input for one box: the 224-pixel crop after the stem
/// pooling, `[3, 56, 56]`, centred.
pub fn local_input(image: &RgbImage, bbox: &BBox) -> Result<Tensor, SelectorError> {
    let crop = crop_local(image, bbox)?;
    Ok(centred(block_mean(&crop.to_tensor(), LOCAL_STEM_POOL)))
}

/// Global-branch input: the 64-pixel thumbnail, centred.
pub fn global_input(image: &RgbImage) -> Tensor {
    centred(thumbnail(image).to_tensor())
}

pub(crate) fn stack(parts: &[&Tensor]) -> Tensor {
    let mut shape = parts[0].shape().to_vec();
    let mut data = Vec::with_capacity(parts.len() * parts[0].numel());
    for p in parts {
        data.extend_from_slice(p.data());
    }
    shape.insert(0, parts.len());
    Tensor::new(shape, data)
}

/// Index of the highest score, ties to the lowest index.
pub fn select(scores: &[f64]) -> Result<usize, SelectorError> {
    argmax(scores).ok_or(SelectorError::NoCandidates)
}

impl SelectorModel {
    pub fn set_mode(&mut self, mode: TrainMode) {
        self.mode = mode;
        apply_train_mode(self, mode);
    }

    /// `f_loc` rows `[K, 512]` for local inputs `[K, 3, 56, 56]`.
    pub(crate) fn local_features(&self, g: &mut Graph, x: Var) -> Var {
        let (l, s) = (&self.layers, &self.store);
        let z = l.stem.forward(g, s, x);
        let mut h = g.relu(z);
        for b in &l.blocks {
            h = b.forward(g, s, h);
        }
        let pooled = g.global_avg_pool(h);
        let z = l.local_fc.forward(g, s, pooled);
        g.relu(z)
    }

    /// `f_glob` rows `[B, 512]` for thumbnails `[B, 3, 64, 64]`.
    pub(crate) fn global_features(&self, g: &mut Graph, x: Var) -> Var {
        let (l, s) = (&self.layers, &self.store);
        let mut h = x;
        for c in &l.global_convs {
            let z = c.forward(g, s, h);
            h = g.relu(z);
        }
        let pooled = g.global_avg_pool(h);
        let z = l.global_fc.forward(g, s, pooled);
        g.relu(z)
    }

    /// `s_sel` logits `[K, 1]` from per-candidate `f_loc` and `f_glob` rows.
    pub(crate) fn fuse(&self, g: &mut Graph, f_loc: Var, f_glob: Var, with_adapter: bool) -> Var {
        let (l, s) = (&self.layers, &self.store);
        let f = g.concat_cols(f_loc, f_glob);
        let f = if with_adapter { l.adapter.forward(g, s, f) } else { f };
        let z = l.mlp1.forward(g, s, f);
        let h = g.relu(z);
        l.mlp2.forward(g, s, h)
    }

    /// Per-candidate `f_glob` rows: the frame's global feature repeated, or
    /// zeros when the global branch is disabled.
    pub(crate) fn global_rows(&self, g: &mut Graph, thumbs: Option<Tensor>, frame_of: &[usize]) -> Var {
        match thumbs {
            Some(t) if self.arch.use_global => {
                let x = g.input(t);
                let fg = self.global_features(g, x);
                g.gather_rows(fg, frame_of)
            }
            _ => g.input(Tensor::zeros([frame_of.len(), FEATURE_DIM])),
        }
    }

    fn forward_frame(&self, image: &RgbImage, boxes: &[BBox], with_adapter: bool) -> Result<(Vec<f64>, Tensor), SelectorError> {
        if boxes.is_empty() {
            return Err(SelectorError::NoCandidates);
        }
        let locals = boxes.iter().map(|b| local_input(image, b)).collect::<Result<Vec<_>, _>>()?;
        let mut g = Graph::new();
        let x = g.input(stack(&locals.iter().collect::<Vec<_>>()));
        let f_loc = self.local_features(&mut g, x);
        let thumbs = self.arch.use_global.then(|| stack(&[&global_input(image)]));
        let f_glob = self.global_rows(&mut g, thumbs, &vec![0; boxes.len()]);
        let logits = self.fuse(&mut g, f_loc, f_glob, with_adapter);
        let scores = g.value(logits).data().iter().map(|&v| v as f64).collect();
        Ok((scores, g.value(f_loc).clone()))
    }

    /// One `s_sel` logit per box, in input order. The frame's global
    /// feature is computed once and shared by every candidate.
    pub fn score_candidates(&self, image: &RgbImage, boxes: &[BBox]) -> Result<Vec<f64>, SelectorError> {
        Ok(self.forward_frame(image, boxes, true)?.0)
    }

    /// Logits with the fusion adapter skipped, for checking identity at init.
    pub fn score_without_adapter(&self, image: &RgbImage, boxes: &[BBox]) -> Result<Vec<f64>, SelectorError> {
        Ok(self.forward_frame(image, boxes, false)?.0)
    }

    /// Logits together with each candidate's `f_loc` retrieval embedding.
    pub fn score_and_embed(&self, image: &RgbImage, boxes: &[BBox]) -> Result<(Vec<f64>, Vec<Vec<f32>>), SelectorError> {
        let (scores, f) = self.forward_frame(image, boxes, true)?;
        Ok((scores, (0..boxes.len()).map(|r| f.row(r).to_vec()).collect()))
    }

    /// `f_loc` of each box.
    pub fn embed(&self, image: &RgbImage, boxes: &[BBox]) -> Result<Vec<Vec<f32>>, SelectorError> {
        if boxes.is_empty() {
            return Err(SelectorError::NoCandidates);
        }
        let locals = boxes.iter().map(|b| local_input(image, b)).collect::<Result<Vec<_>, _>>()?;
        let mut g = Graph::new();
        let x = g.input(stack(&locals.iter().collect::<Vec<_>>()));
        let f = self.local_features(&mut g, x);
        let f = g.value(f);
        Ok((0..boxes.len()).map(|r| f.row(r).to_vec()).collect())
    }

    /// Checksum of the local branch, identifying the embedding function.
    pub fn embedder_checksum(&self) -> String {
        self.store.checksum_where(|n| n.starts_with("local."))
    }

    pub fn fusion_adapter(&self) -> &Adapter {
        &self.layers.adapter
    }

    pub fn checkpoint(&self, epoch: usize, val_accuracy: f64) -> Archive {
        let meta = serde_json::json!({
            "kind": "selector",
            "architecture": self.arch.name,
            "arch": self.arch,
            "mode": self.mode,
            "seed": self.seed,
            "epoch": epoch,
            "val_accuracy": val_accuracy,
        });
        Archive::from_store(meta, &self.store)
    }

    pub fn save(&self, path: impl AsRef<Path>, epoch: usize, val_accuracy: f64) -> Result<(), SelectorError> {
        Ok(self.checkpoint(epoch, val_accuracy).save(path)?)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SelectorCheckpointMeta {
    pub architecture: String,
    pub arch: SelectorArch,
    pub mode: TrainMode,
    pub seed: u64,
    pub epoch: usize,
    pub val_accuracy: f64,
}

pub fn selector_from_archive(archive: &Archive) -> Result<(SelectorModel, SelectorCheckpointMeta), SelectorError> {
    if archive.meta.get("kind").and_then(|k| k.as_str()) != Some("selector") {
        return Err(SelectorError::Checkpoint("not a selector checkpoint".into()));
    }
    let meta: SelectorCheckpointMeta =
        serde_json::from_value(archive.meta.clone()).map_err(|e| SelectorError::Checkpoint(e.to_string()))?;
    let mut model = build_selector(&meta.arch, meta.mode, false, meta.seed)?;
    archive.restore_into(&mut model.store)?;
    Ok((model, meta))
}

pub fn load_selector(path: impl AsRef<Path>) -> Result<(SelectorModel, SelectorCheckpointMeta), SelectorError> {
    selector_from_archive(&Archive::load(path)?)
}

//! Selector training with candidate-set cross-entropy and best-epoch
//! selection on validation accuracy.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use waymark_nn::{Graph, Group, Sgd, SgdConfig, Tensor, Var};

use super::candidates::{candidate_sets, CandidateSet, CandidateSource};
use super::{global_input, local_input, stack, SelectorError, SelectorModel, FEATURE_DIM};
use crate::adapter::{backbone_checksum, TrainMode};
use crate::dataset::LoadedFrame;
use crate::detector::DetectorModel;
use crate::evaluation::{argmax, mstp_correct, IOU_THRESHOLD};

/// Frames per forward pass when only scoring.
const EVAL_CHUNK: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SelectorTrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Stop after this many epochs without a validation-accuracy gain;
    /// `None` always runs every epoch.
    pub patience: Option<usize>,
    pub mode: TrainMode,
    pub candidate_source: CandidateSource,
    pub seed: u64,
}

impl Default for SelectorTrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            momentum: 0.9,
            weight_decay: 5e-4,
            batch_size: 4,
            epochs: 500,
            patience: None,
            mode: TrainMode::Full,
            candidate_source: CandidateSource::GroundTruth,
            seed: 42,
        }
    }
}

impl SelectorTrainConfig {
    pub fn validate(&self) -> Result<(), SelectorError> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(SelectorError::Config("learning_rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 || self.batch_size == 0 {
            return Err(SelectorError::Config("momentum in [0, 1), weight_decay >= 0, batch_size > 0 required".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectorEpoch {
    pub epoch: usize,
    pub train_acc: f64,
    pub val_acc: f64,
    pub train_loss: f64,
    pub backbone_checksum: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectorHistory {
    pub epochs: Vec<SelectorEpoch>,
    pub best_epoch: usize,
    pub skipped_train: usize,
    pub skipped_val: usize,
    pub stopped_early: bool,
}

impl SelectorHistory {
    pub fn best(&self) -> &SelectorEpoch {
        &self.epochs[self.best_epoch]
    }

    pub fn write_curves(&self, path: impl AsRef<Path>) -> Result<(), SelectorError> {
        let path = path.as_ref();
        let io = |e: csv::Error| SelectorError::Io(path.to_path_buf(), e.into());
        let mut w = csv::Writer::from_path(path).map_err(io)?;
        w.write_record(["epoch", "train_acc", "val_acc", "train_loss"]).map_err(io)?;
        for e in &self.epochs {
            w.write_record([e.epoch.to_string(), e.train_acc.to_string(), e.val_acc.to_string(), e.train_loss.to_string()]).map_err(io)?;
        }
        w.flush().map_err(|e| SelectorError::Io(path.to_path_buf(), e))
    }
}

/// A candidate set with its network inputs.
struct Prepared {
    set: CandidateSet,
    locals: Vec<Tensor>,
    global: Tensor,
}

/// Frozen-branch features of a prepared set: `f_loc` `[k, 512]` and the
/// frame's `f_glob` repeated `[k, 512]`.
struct Cached {
    f_loc: Tensor,
    f_glob: Tensor,
}

fn prepare(frames: &[LoadedFrame], sets: Vec<CandidateSet>) -> Result<Vec<Prepared>, SelectorError> {
    sets.into_iter()
        .map(|set| {
            let image = &frames[set.frame_index].image;
            let locals = set.boxes.iter().map(|b| local_input(image, b)).collect::<Result<Vec<_>, _>>()?;
            Ok(Prepared { locals, global: global_input(image), set })
        })
        .collect()
}

fn cache(model: &SelectorModel, items: &[Prepared]) -> Vec<Cached> {
    items
        .iter()
        .map(|p| {
            let mut g = Graph::new();
            let x = g.input(stack(&p.locals.iter().collect::<Vec<_>>()));
            let f_loc = model.local_features(&mut g, x);
            let thumbs = model.arch.use_global.then(|| stack(&[&p.global]));
            let f_glob = model.global_rows(&mut g, thumbs, &vec![0; p.locals.len()]);
            Cached { f_loc: g.value(f_loc).clone(), f_glob: g.value(f_glob).clone() }
        })
        .collect()
}

fn concat_rows(parts: &[&Tensor]) -> Tensor {
    let rows: usize = parts.iter().map(|t| t.dim(0)).sum();
    let mut data = Vec::with_capacity(rows * FEATURE_DIM);
    for p in parts {
        data.extend_from_slice(p.data());
    }
    Tensor::new([rows, FEATURE_DIM], data)
}

/// Logits `[K, 1]` for a batch of sets plus their softmax groups.
fn batch_logits(model: &SelectorModel, g: &mut Graph, items: &[&Prepared], cached: Option<&[&Cached]>) -> (Var, Vec<Group>) {
    let mut groups = Vec::with_capacity(items.len());
    let mut frame_of = Vec::new();
    for (b, p) in items.iter().enumerate() {
        groups.push(Group { start: frame_of.len(), len: p.locals.len(), target: p.set.target });
        frame_of.extend(std::iter::repeat_n(b, p.locals.len()));
    }
    let (f_loc, f_glob) = match cached {
        Some(c) => {
            let f_loc = g.input(concat_rows(&c.iter().map(|c| &c.f_loc).collect::<Vec<_>>()));
            let f_glob = g.input(concat_rows(&c.iter().map(|c| &c.f_glob).collect::<Vec<_>>()));
            (f_loc, f_glob)
        }
        None => {
            let x = g.input(stack(&items.iter().flat_map(|p| p.locals.iter()).collect::<Vec<_>>()));
            let f_loc = model.local_features(g, x);
            let thumbs = model.arch.use_global.then(|| stack(&items.iter().map(|p| &p.global).collect::<Vec<_>>()));
            (f_loc, model.global_rows(g, thumbs, &frame_of))
        }
    };
    (model.fuse(g, f_loc, f_glob, true), groups)
}

/// Number of sets whose argmax candidate overlaps the main doorway.
fn correct(logits: &Tensor, items: &[&Prepared], groups: &[Group]) -> usize {
    let z = logits.data();
    items
        .iter()
        .zip(groups)
        .filter(|(p, gr)| {
            let s: Vec<f64> = z[gr.start..gr.start + gr.len].iter().map(|&v| v as f64).collect();
            let i = argmax(&s).expect("non-empty group");
            mstp_correct(&p.set.boxes[i], &p.set.gt_mstp, IOU_THRESHOLD)
        })
        .count()
}

/// Accuracy and mean loss without updating the model.
fn score_sets(model: &SelectorModel, items: &[Prepared], cached: Option<&[Cached]>) -> (f64, f64) {
    let (mut hits, mut loss) = (0usize, 0.0f64);
    for (ci, chunk) in items.chunks(EVAL_CHUNK).enumerate() {
        let refs: Vec<&Prepared> = chunk.iter().collect();
        let c: Option<Vec<&Cached>> = cached.map(|c| c[ci * EVAL_CHUNK..ci * EVAL_CHUNK + chunk.len()].iter().collect());
        let mut g = Graph::new();
        let (logits, groups) = batch_logits(model, &mut g, &refs, c.as_deref());
        hits += correct(g.value(logits), &refs, &groups);
        let l = g.grouped_softmax_ce(logits, &groups);
        loss += g.value(l).item() as f64 * chunk.len() as f64;
    }
    (hits as f64 / items.len() as f64, loss / items.len() as f64)
}

/// Selection accuracy of `model` on `frames`; frames without a usable
/// candidate set are left out.
pub fn evaluate_selector(
    model: &SelectorModel,
    frames: &[LoadedFrame],
    source: CandidateSource,
    detector: Option<&DetectorModel>,
) -> Result<f64, SelectorError> {
    let (sets, _) = candidate_sets(frames, source, detector)?;
    if sets.is_empty() {
        return Err(SelectorError::EmptyValidation);
    }
    Ok(score_sets(model, &prepare(frames, sets)?, None).0)
}

/// Trains `model` in `cfg.mode`. Epoch 0 scores the untrained model and
/// takes part in best-epoch selection; on return the model holds the
/// parameters of the epoch with the highest validation accuracy, earliest
/// on ties.
pub fn train_selector(
    model: &mut SelectorModel,
    train: &[LoadedFrame],
    val: &[LoadedFrame],
    cfg: &SelectorTrainConfig,
    detector: Option<&DetectorModel>,
) -> Result<SelectorHistory, SelectorError> {
    cfg.validate()?;
    let (train_sets, skipped_train) = candidate_sets(train, cfg.candidate_source, detector)?;
    let (val_sets, skipped_val) = candidate_sets(val, cfg.candidate_source, detector)?;
    if train_sets.is_empty() {
        return Err(SelectorError::EmptyTrain);
    }
    if val_sets.is_empty() {
        return Err(SelectorError::EmptyValidation);
    }
    model.set_mode(cfg.mode);
    let items = prepare(train, train_sets)?;
    let val_items = prepare(val, val_sets)?;
    let frozen = cfg.mode == TrainMode::AdapterOnly;
    let train_cache = frozen.then(|| cache(model, &items));
    let val_cache = frozen.then(|| cache(model, &val_items));

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Sgd::new(SgdConfig {
        learning_rate: cfg.learning_rate as f32,
        momentum: cfg.momentum as f32,
        weight_decay: cfg.weight_decay as f32,
    });
    let (train_acc, train_loss) = score_sets(model, &items, train_cache.as_deref());
    let (val_acc, _) = score_sets(model, &val_items, val_cache.as_deref());
    log::info!("selector epoch 0: train acc {train_acc:.3}, val acc {val_acc:.3}");
    let mut epochs = vec![SelectorEpoch { epoch: 0, train_acc, val_acc, train_loss, backbone_checksum: backbone_checksum(model) }];
    let mut best = (0usize, val_acc, model.store.clone());
    let mut stale = 0usize;
    let mut stopped_early = false;

    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..items.len()).collect();
        order.shuffle(&mut rng);
        let (mut hits, mut total) = (0usize, 0.0f64);
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let refs: Vec<&Prepared> = chunk.iter().map(|&i| &items[i]).collect();
            let c: Option<Vec<&Cached>> = train_cache.as_ref().map(|c| chunk.iter().map(|&i| &c[i]).collect());
            let mut g = Graph::new();
            let (logits, groups) = batch_logits(model, &mut g, &refs, c.as_deref());
            hits += correct(g.value(logits), &refs, &groups);
            let loss = g.grouped_softmax_ce(logits, &groups);
            let lv = g.value(loss).item();
            if !lv.is_finite() {
                return Err(SelectorError::NonFiniteLoss { epoch, batch: bi });
            }
            let grads = g.backward(loss);
            if !grads.is_finite() {
                return Err(SelectorError::NonFiniteLoss { epoch, batch: bi });
            }
            opt.step(&mut model.store, &grads);
            total += lv as f64 * chunk.len() as f64;
        }
        let (val_acc, _) = score_sets(model, &val_items, val_cache.as_deref());
        let n = items.len() as f64;
        let rec = SelectorEpoch { epoch, train_acc: hits as f64 / n, val_acc, train_loss: total / n, backbone_checksum: backbone_checksum(model) };
        log::info!("selector epoch {epoch}: loss {:.4}, train acc {:.3}, val acc {val_acc:.3}", rec.train_loss, rec.train_acc);
        epochs.push(rec);
        if val_acc > best.1 {
            best = (epoch, val_acc, model.store.clone());
            stale = 0;
        } else {
            stale += 1;
            if cfg.patience.is_some_and(|p| stale > p) {
                stopped_early = true;
                break;
            }
        }
    }
    model.store = best.2;
    Ok(SelectorHistory { epochs, best_epoch: best.0, skipped_train, skipped_val, stopped_early })
}

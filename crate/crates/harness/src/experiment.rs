//! Variants A-F: training phases, evaluation on the target test split,
//! and the artifacts each run leaves behind.
//!
//! Layout under `output_dir/<variant>/`:
//! `report.json`, `table.txt`, and per seed `seed_<s>/` holding
//! `detector.wmarch`, `selector.wmarch`, `{detector,selector}_curves.csv`,
//! `detections.jsonl`, `selections.jsonl`, and with retrieval fusion
//! `bank.wmbank` and `selections_raf.jsonl`.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use waymark_core::adapter::TrainMode;
use waymark_core::dataset::{load_frames, load_manifest, split, DatasetManifest, FrameRecord, LoadedFrame, Split};
use waymark_core::detector::{build_detector, load_detector, train_detector, DetectorModel, EVAL_SCORE_FLOOR};
use waymark_core::evaluation::{evaluate, multi_seed_summary, render_table, write_jsonl, DetectionPrediction, EvalReport};
use waymark_core::retrieval::{BankRecipe, DEFAULT_TOP_K};
use waymark_core::selector::{build_selector, load_selector, train_selector, CandidateSource, SelectorModel};
use waymark_core::BBox;

use crate::config::{Phase, Role, RunConfig, VariantId, VariantSpec};
use crate::pipeline::{bank_from_frames, Pipeline};
use crate::HarnessError;

pub const DETECTOR_FILE: &str = "detector.wmarch";
pub const SELECTOR_FILE: &str = "selector.wmarch";

/// A dataset role loaded and split.
pub struct RoleData {
    pub manifest: DatasetManifest,
    pub split: Split,
    pub train: Vec<LoadedFrame>,
    pub val: Vec<LoadedFrame>,
    pub test: Vec<LoadedFrame>,
}

impl RoleData {
    pub fn load(manifest_path: &Path, cfg: &RunConfig) -> Result<Self, HarnessError> {
        let manifest = load_manifest(manifest_path)?;
        let dir = manifest_path.parent().unwrap_or(Path::new("."));
        let split = split(&manifest, &cfg.split)?;
        let load = |ids: &[String]| load_frames(dir, &manifest.select(ids));
        Ok(Self { train: load(&split.train)?, val: load(&split.val)?, test: load(&split.test)?, split, manifest })
    }

    /// Training-split frames, train then validation.
    pub fn train_and_val(&self) -> Vec<LoadedFrame> {
        self.train.iter().chain(&self.val).cloned().collect()
    }

    fn games(&self) -> BTreeSet<String> {
        self.train.iter().chain(&self.val).map(|f| f.record.game.clone()).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedRun {
    pub seed: u64,
    pub dir: PathBuf,
    pub detector_best_epoch: usize,
    pub selector_best_epoch: usize,
    /// Test frames without a usable candidate list.
    pub selection_skipped: usize,
    pub report: EvalReport,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct VariantOutcome {
    pub spec: VariantSpec,
    /// Report of the first seed, with `per_seed` and `summary` filled in
    /// when several seeds ran.
    pub report: EvalReport,
    pub runs: Vec<SeedRun>,
    pub dir: PathBuf,
}

fn io(path: &Path) -> impl Fn(std::io::Error) -> HarnessError + '_ {
    move |e| HarnessError::Io(path.to_path_buf(), e)
}

fn role_data<'a>(spec: &VariantSpec, role: Role, cfg: &RunConfig, cache: &'a mut [Option<RoleData>; 2]) -> Result<&'a RoleData, HarnessError> {
    let slot = role as usize;
    if cache[slot].is_none() {
        let path = cfg.manifest(role).ok_or(HarnessError::MissingRole { variant: spec.id, role: role.name() })?;
        cache[slot] = Some(RoleData::load(path, cfg)?);
    }
    Ok(cache[slot].as_ref().expect("just loaded"))
}

fn seed_dir(cfg: &RunConfig, id: VariantId, seed: u64) -> PathBuf {
    cfg.output_dir.join(id.to_string()).join(format!("seed_{seed}"))
}

/// Trains both models through one phase and writes checkpoints and curves
/// to `dir`.
fn train_phase(
    det: &mut DetectorModel,
    sel: &mut SelectorModel,
    data: &RoleData,
    phase: Phase,
    seed: u64,
    cfg: &RunConfig,
    dir: &Path,
) -> Result<(usize, usize), HarnessError> {
    fs::create_dir_all(dir).map_err(io(dir))?;
    let dcfg = waymark_core::detector::DetectorTrainConfig { mode: phase.mode, seed, ..cfg.detector.clone() };
    let dh = train_detector(det, &data.train, &data.val, &dcfg)?;
    dh.write_curves(dir.join("detector_curves.csv"))?;
    det.save(dir.join(DETECTOR_FILE), dh.best_epoch, dh.best().val.composite)?;

    let scfg = waymark_core::selector::SelectorTrainConfig { mode: phase.mode, seed, ..cfg.selector.clone() };
    let proposals = (scfg.candidate_source == CandidateSource::DetectorProposals).then_some(&*det);
    let sh = train_selector(sel, &data.train, &data.val, &scfg, proposals)?;
    sh.write_curves(dir.join("selector_curves.csv"))?;
    sel.save(dir.join(SELECTOR_FILE), sh.best_epoch, sh.best().val_acc)?;
    log::info!("{}: detector best epoch {}, selector best epoch {}", dir.display(), dh.best_epoch, sh.best_epoch);
    Ok((dh.best_epoch, sh.best_epoch))
}

fn fresh_models(cfg: &RunConfig, mode: TrainMode, seed: u64) -> Result<(DetectorModel, SelectorModel), HarnessError> {
    let det = build_detector(&cfg.detector_arch, mode, cfg.detector_arch.pretrained_weights.is_some(), seed)?;
    let sel = build_selector(&cfg.selector_arch, mode, cfg.selector_arch.pretrained_weights.is_some(), seed)?;
    Ok((det, sel))
}

fn load_models(dir: &Path) -> Result<(DetectorModel, SelectorModel), HarnessError> {
    Ok((load_detector(dir.join(DETECTOR_FILE))?.0, load_selector(dir.join(SELECTOR_FILE))?.0))
}

fn bank_recipe(spec: &VariantSpec, cfg: &RunConfig, cache: &[Option<RoleData>; 2]) -> BankRecipe {
    if let Some(r) = &cfg.raf.recipe {
        return r.clone();
    }
    let games = |p: Option<Phase>| -> Vec<String> {
        p.and_then(|p| cache[p.role as usize].as_ref()).map(|d| d.games().into_iter().collect()).unwrap_or_default()
    };
    let (core, support) = match spec.pretrain {
        Some(_) => (games(spec.pretrain), games(spec.finetune)),
        None => (games(spec.finetune), vec![]),
    };
    BankRecipe { core_titles: core, support_titles: support, top_k: DEFAULT_TOP_K }
}

/// Candidate boxes for scoring a test frame.
fn eval_candidates(frame: &LoadedFrame, source: CandidateSource, det: &DetectorModel, threshold: f64) -> Vec<BBox> {
    match source {
        CandidateSource::GroundTruth => frame.record.boxes(),
        CandidateSource::DetectorProposals => det.detect(&frame.image, threshold).into_iter().map(|d| d.bbox).collect(),
    }
}

fn run_seed(spec: &VariantSpec, cfg: &RunConfig, seed: u64, cache: &mut [Option<RoleData>; 2]) -> Result<SeedRun, HarnessError> {
    let dir = seed_dir(cfg, spec.id, seed);
    let mut epochs = (0, 0);
    let (mut det, mut sel) = match spec.pretrain {
        Some(phase) if spec.finetune.is_some() => {
            // C and D start from variant A's checkpoint
            let a_dir = seed_dir(cfg, VariantId::A, seed);
            if !a_dir.join(DETECTOR_FILE).is_file() || !a_dir.join(SELECTOR_FILE).is_file() {
                if !cfg.train_missing_prerequisites {
                    return Err(HarnessError::MissingPrerequisite { variant: spec.id, path: a_dir });
                }
                let data = role_data(spec, phase.role, cfg, cache)?;
                let (mut d, mut s) = fresh_models(cfg, phase.mode, seed)?;
                train_phase(&mut d, &mut s, data, phase, seed, cfg, &a_dir)?;
            }
            // reload so the fine-tune starts from exactly the stored bytes
            load_models(&a_dir)?
        }
        Some(phase) => {
            let data = role_data(spec, phase.role, cfg, cache)?;
            let (mut d, mut s) = fresh_models(cfg, phase.mode, seed)?;
            epochs = train_phase(&mut d, &mut s, data, phase, seed, cfg, &dir)?;
            (d, s)
        }
        None => {
            let mode = spec.finetune.expect("every variant trains").mode;
            fresh_models(cfg, mode, seed)?
        }
    };
    if let Some(phase) = spec.finetune {
        let data = role_data(spec, phase.role, cfg, cache)?;
        epochs = train_phase(&mut det, &mut sel, data, phase, seed, cfg, &dir)?;
    }
    // the bank draws on every phase's games, even when A was reused from disk
    for p in [spec.pretrain, spec.finetune].into_iter().flatten() {
        role_data(spec, p.role, cfg, cache)?;
    }
    let cache: &[Option<RoleData>; 2] = cache;
    let target = cache[spec.target() as usize].as_ref().expect("loaded above");
    let recipe = cfg.raf.enabled.then(|| bank_recipe(spec, cfg, cache));
    let bank = match &recipe {
        Some(r) => {
            let pool: Vec<LoadedFrame> = [spec.pretrain, spec.finetune]
                .into_iter()
                .flatten()
                .filter_map(|p| cache[p.role as usize].as_ref())
                .flat_map(|d| d.train_and_val())
                .filter(|f| r.core_titles.contains(&f.record.game) || r.support_titles.contains(&f.record.game))
                .collect();
            let bank = bank_from_frames(&sel, &pool, r)?;
            bank.save(dir.join("bank.wmbank"))?;
            Some(bank)
        }
        None => None,
    };
    let pipeline = Pipeline::new(Some(det), sel, bank, cfg.raf.fusion())?;
    let det = pipeline.detector.as_ref().expect("set above");

    let mut detections = Vec::with_capacity(target.test.len());
    let (mut base, mut raf) = (Vec::new(), Vec::new());
    let mut skipped = 0;
    for f in &target.test {
        detections.push(DetectionPrediction::new(&f.record.frame_id, &det.detect(&f.image, EVAL_SCORE_FLOOR)));
        let boxes = eval_candidates(f, cfg.selector.candidate_source, det, pipeline.score_threshold);
        if boxes.is_empty() {
            skipped += 1;
            continue;
        }
        let (b, r) = pipeline.select_among(&f.image, &boxes)?.predictions(&f.record.frame_id, &boxes);
        base.push(b);
        raf.extend(r);
    }
    if skipped > 0 {
        log::warn!("{}: {skipped} test frame(s) had no candidate boxes and were left out of selection accuracy", spec.label());
    }
    write_jsonl(dir.join("detections.jsonl"), &detections)?;
    write_jsonl(dir.join("selections.jsonl"), &base)?;
    if recipe.is_some() {
        write_jsonl(dir.join("selections_raf.jsonl"), &raf)?;
    }
    let records: Vec<FrameRecord> = target.test.iter().map(|f| f.record.clone()).collect();
    let report = evaluate(&spec.label(), &records, &detections, &base, recipe.as_ref().map(|_| raf.as_slice()))?;
    Ok(SeedRun { seed, dir, detector_best_epoch: epochs.0, selector_best_epoch: epochs.1, selection_skipped: skipped, report })
}

/// Runs `spec` once per configured seed and writes `report.json` and
/// `table.txt` under `output_dir/<variant>/`.
pub fn run_variant(spec: &VariantSpec, cfg: &RunConfig) -> Result<VariantOutcome, HarnessError> {
    cfg.validate()?;
    let mut cache: [Option<RoleData>; 2] = [None, None];
    let runs = cfg.seeds.iter().map(|&s| run_seed(spec, cfg, s, &mut cache)).collect::<Result<Vec<_>, _>>()?;
    let mut report = runs[0].report.clone();
    if runs.len() > 1 {
        report.per_seed = runs.iter().map(|r| r.report.mstp_accuracy).collect();
        report.summary = Some(multi_seed_summary(&report.per_seed)?);
    }
    let dir = cfg.output_dir.join(spec.id.to_string());
    let path = dir.join("report.json");
    let json = serde_json::to_string_pretty(&report).map_err(|e| HarnessError::Json(path.clone(), e))?;
    fs::write(&path, json + "\n").map_err(io(&path))?;
    let table = dir.join("table.txt");
    fs::write(&table, render_table(std::slice::from_ref(&report))).map_err(io(&table))?;
    Ok(VariantOutcome { spec: spec.clone(), report, runs, dir })
}

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use waymark::config::{RunConfig, VariantId, VariantSpec};
use waymark::latency::{benchmark_latency, DEFAULT_BUDGET_MS};
use waymark::pipeline::{bank_from_frames, Pipeline};
use waymark::service::{serve, AppState};
use waymark::run_variant;
use waymark_core::adapter::TrainMode;
use waymark_core::dataset::{generate_synthetic, load_frames, load_manifest, split, LoadedFrame, RgbImage, Split, SplitConfig, SynthConfig, SynthStyle};
use waymark_core::detector::{build_detector, load_detector, train_detector, DetectorArch, DetectorModel, DetectorTrainConfig};
use waymark_core::evaluation::{evaluate, read_jsonl, render_table, SCORE_THRESHOLD};
use waymark_core::retrieval::{inspect_bank, BankRecipe, FusionConfig, ScoreNorm, DEFAULT_ALPHA, DEFAULT_TOP_K};
use waymark_core::selector::{build_selector, load_selector, train_selector, CandidateSource, SelectorArch, SelectorTrainConfig};

#[derive(Parser)]
#[command(name = "waymark", version, about = "Transition-point detection and main-transition selection for game frames")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic doorway corpus with its manifest.
    GenerateSynthetic(GenerateArgs),
    /// Split a manifest into train/val/test frame ids.
    Split(SplitArgs),
    TrainDetector(TrainArgs),
    TrainSelector(TrainSelectorArgs),
    /// Embed training-split regions into a retrieval feature bank.
    BuildBank(BuildBankArgs),
    /// Print the header of a feature bank file.
    InspectBank { path: PathBuf },
    /// Detect, score and choose the main transition point of one frame.
    Infer(InferArgs),
    /// Score stored prediction files against a manifest.
    Evaluate(EvaluateArgs),
    /// Run one or more of the variants A-F from a JSON run config.
    RunVariant {
        #[arg(required = true)]
        variants: Vec<VariantId>,
        #[arg(long)]
        config: PathBuf,
    },
    /// Time selection (scoring, bank query, fusion) per frame.
    BenchmarkLatency(LatencyArgs),
    /// Serve the annotation API.
    Serve(ServeArgs),
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 100)]
    frames: usize,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long, default_value_t = 512)]
    image_size: usize,
    #[arg(long, default_value_t = 1)]
    min_doorways: usize,
    #[arg(long, default_value_t = 5)]
    max_doorways: usize,
    #[arg(long, default_value_t = 0.5)]
    global_cue_fraction: f64,
    #[arg(long, default_value_t = 0.3)]
    noise: f64,
    #[arg(long, value_enum, default_value_t = Style::Stone)]
    style: Style,
    #[arg(long, default_value = "synth")]
    game: String,
}

#[derive(Clone, Copy, ValueEnum)]
enum Style {
    Stone,
    Moss,
}

#[derive(Args)]
struct SplitArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Per-game train fraction as `game=fraction`; repeatable.
    #[arg(long = "train-fraction", value_parser = parse_fraction)]
    fractions: Vec<(String, f64)>,
    /// Fraction for games not listed with --train-fraction.
    #[arg(long)]
    default_fraction: Option<f64>,
    #[arg(long, default_value_t = 0.2)]
    val_fraction: f64,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

fn parse_fraction(s: &str) -> Result<(String, f64), String> {
    let (g, f) = s.split_once('=').ok_or("expected game=fraction")?;
    Ok((g.to_string(), f.parse().map_err(|e| format!("{e}"))?))
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Full,
    AdapterOnly,
}

impl From<Mode> for TrainMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Full => TrainMode::Full,
            Mode::AdapterOnly => TrainMode::AdapterOnly,
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Split file written by `split`.
    #[arg(long)]
    split: PathBuf,
    /// Output directory for the checkpoint and curves.
    #[arg(long)]
    out: PathBuf,
    /// JSON training config; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// JSON architecture config for a fresh model.
    #[arg(long)]
    arch: Option<PathBuf>,
    /// Checkpoint to continue from instead of a fresh model.
    #[arg(long)]
    init: Option<PathBuf>,
    #[arg(long, value_enum)]
    mode: Option<Mode>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Candidates {
    GroundTruth,
    DetectorProposals,
}

#[derive(Args)]
struct TrainSelectorArgs {
    #[command(flatten)]
    common: TrainArgs,
    #[arg(long, value_enum)]
    candidates: Option<Candidates>,
    /// Detector checkpoint, needed for proposal candidates.
    #[arg(long)]
    detector: Option<PathBuf>,
}

#[derive(Args)]
struct BuildBankArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    split: PathBuf,
    #[arg(long)]
    selector: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Titles contributing their top-K regions; defaults to every game.
    #[arg(long, value_delimiter = ',')]
    core_titles: Vec<String>,
    /// Titles contributing every region.
    #[arg(long, value_delimiter = ',')]
    support_titles: Vec<String>,
    #[arg(long, default_value_t = DEFAULT_TOP_K)]
    top_k: usize,
}

#[derive(Args)]
struct ModelArgs {
    #[arg(long)]
    detector: Option<PathBuf>,
    #[arg(long)]
    selector: Option<PathBuf>,
    #[arg(long)]
    bank: Option<PathBuf>,
    #[arg(long, default_value_t = SCORE_THRESHOLD)]
    score_threshold: f64,
    #[arg(long, default_value_t = DEFAULT_ALPHA)]
    alpha: f64,
    /// Skip retrieval fusion even when a bank is given.
    #[arg(long)]
    no_raf: bool,
    /// Fuse raw selector logits instead of their per-frame softmax.
    #[arg(long)]
    raw_scores: bool,
}

impl ModelArgs {
    fn pipeline(&self) -> Result<Pipeline> {
        let selector = self.selector.as_deref().context("--selector is required")?;
        let bank = if self.no_raf { None } else { self.bank.as_deref() };
        let norm = if self.raw_scores { ScoreNorm::Raw } else { ScoreNorm::Softmax };
        let p = Pipeline::load(self.detector.as_deref(), selector, bank, FusionConfig { alpha: self.alpha, norm })?;
        Ok(p.with_threshold(self.score_threshold))
    }
}

#[derive(Args)]
struct InferArgs {
    /// A PNG frame.
    #[arg(long, conflicts_with_all = ["manifest", "frame"])]
    image: Option<PathBuf>,
    #[arg(long, requires = "frame")]
    manifest: Option<PathBuf>,
    #[arg(long, requires = "manifest")]
    frame: Option<String>,
    #[command(flatten)]
    models: ModelArgs,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    detections: PathBuf,
    #[arg(long)]
    selections: Option<PathBuf>,
    #[arg(long)]
    raf: Option<PathBuf>,
    /// Restrict to one subset of a split file.
    #[arg(long, requires = "subset")]
    split: Option<PathBuf>,
    #[arg(long, value_enum, requires = "split")]
    subset: Option<Subset>,
    #[arg(long, default_value = "eval")]
    variant: String,
    /// Write the report JSON here as well.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Subset {
    Train,
    Val,
    Test,
}

#[derive(Args)]
struct LatencyArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    split: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Subset::Test, requires = "split")]
    subset: Subset,
    #[arg(long, default_value_t = 5)]
    repetitions: usize,
    #[arg(long, default_value_t = DEFAULT_BUDGET_MS)]
    budget_ms: f64,
    /// Use at most this many frames.
    #[arg(long)]
    limit: Option<usize>,
    #[command(flatten)]
    models: ModelArgs,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value_t = 8080)]
    port: u16,
    #[command(flatten)]
    models: ModelArgs,
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, serde_json::to_string_pretty(value)? + "\n").with_context(|| format!("writing {}", path.display()))
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    match writeln!(std::io::stdout(), "{text}") {
        Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => Ok(()),
        r => Ok(r?),
    }
}

fn manifest_dir(manifest: &Path) -> &Path {
    manifest.parent().unwrap_or(Path::new("."))
}

/// Frames of `ids` from the manifest at `path`.
fn frames_of(path: &Path, ids: Option<&[String]>) -> Result<Vec<LoadedFrame>> {
    let m = load_manifest(path)?;
    let records = match ids {
        Some(ids) => m.select(ids),
        None => m.frames.clone(),
    };
    Ok(load_frames(manifest_dir(path), &records)?)
}

fn subset(s: &Split, which: Subset) -> &[String] {
    match which {
        Subset::Train => &s.train,
        Subset::Val => &s.val,
        Subset::Test => &s.test,
    }
}

fn train_val(a: &TrainArgs) -> Result<(Vec<LoadedFrame>, Vec<LoadedFrame>)> {
    let s: Split = read_json(&a.split)?;
    Ok((frames_of(&a.manifest, Some(&s.train))?, frames_of(&a.manifest, Some(&s.val))?))
}

fn train_detector_cmd(a: &TrainArgs) -> Result<()> {
    let mut cfg: DetectorTrainConfig = a.config.as_deref().map(read_json).transpose()?.unwrap_or_default();
    if let Some(m) = a.mode {
        cfg.mode = m.into();
    }
    cfg.max_epochs = a.epochs.unwrap_or(cfg.max_epochs);
    cfg.learning_rate = a.learning_rate.unwrap_or(cfg.learning_rate);
    cfg.seed = a.seed.unwrap_or(cfg.seed);
    let mut model = match &a.init {
        Some(p) => load_detector(p)?.0,
        None => {
            let arch: DetectorArch = a.arch.as_deref().map(read_json).transpose()?.unwrap_or_default();
            build_detector(&arch, cfg.mode, arch.pretrained_weights.is_some(), cfg.seed)?
        }
    };
    let (train, val) = train_val(a)?;
    let h = train_detector(&mut model, &train, &val, &cfg)?;
    fs::create_dir_all(&a.out)?;
    h.write_curves(a.out.join("detector_curves.csv"))?;
    model.save(a.out.join("detector.wmarch"), h.best_epoch, h.best().val.composite)?;
    println!("best epoch {} composite {:.4} ({} epochs run)", h.best_epoch, h.best().val.composite, h.epochs.len() - 1);
    Ok(())
}

fn train_selector_cmd(a: &TrainSelectorArgs) -> Result<()> {
    let c = &a.common;
    let mut cfg: SelectorTrainConfig = c.config.as_deref().map(read_json).transpose()?.unwrap_or_default();
    if let Some(m) = c.mode {
        cfg.mode = m.into();
    }
    cfg.epochs = c.epochs.unwrap_or(cfg.epochs);
    cfg.learning_rate = c.learning_rate.unwrap_or(cfg.learning_rate);
    cfg.seed = c.seed.unwrap_or(cfg.seed);
    if let Some(src) = a.candidates {
        cfg.candidate_source = match src {
            Candidates::GroundTruth => CandidateSource::GroundTruth,
            Candidates::DetectorProposals => CandidateSource::DetectorProposals,
        };
    }
    let detector: Option<DetectorModel> = a.detector.as_deref().map(load_detector).transpose()?.map(|(m, _)| m);
    let mut model = match &c.init {
        Some(p) => load_selector(p)?.0,
        None => {
            let arch: SelectorArch = c.arch.as_deref().map(read_json).transpose()?.unwrap_or_default();
            build_selector(&arch, cfg.mode, arch.pretrained_weights.is_some(), cfg.seed)?
        }
    };
    let (train, val) = train_val(c)?;
    let h = train_selector(&mut model, &train, &val, &cfg, detector.as_ref())?;
    fs::create_dir_all(&c.out)?;
    h.write_curves(c.out.join("selector_curves.csv"))?;
    model.save(c.out.join("selector.wmarch"), h.best_epoch, h.best().val_acc)?;
    println!(
        "best epoch {} val accuracy {:.4} ({} epochs run, {} train / {} val frames skipped)",
        h.best_epoch,
        h.best().val_acc,
        h.epochs.len() - 1,
        h.skipped_train,
        h.skipped_val
    );
    Ok(())
}

fn build_bank_cmd(a: &BuildBankArgs) -> Result<()> {
    let s: Split = read_json(&a.split)?;
    let frames = frames_of(&a.manifest, Some(&s.train_and_val()))?;
    let (selector, _) = load_selector(&a.selector)?;
    let core = if a.core_titles.is_empty() {
        let mut g: Vec<String> = frames.iter().map(|f| f.record.game.clone()).collect();
        g.sort();
        g.dedup();
        g.retain(|t| !a.support_titles.contains(t));
        g
    } else {
        a.core_titles.clone()
    };
    let recipe = BankRecipe { core_titles: core, support_titles: a.support_titles.clone(), top_k: a.top_k };
    let bank = bank_from_frames(&selector, &frames, &recipe)?;
    bank.save(&a.out)?;
    print_json(&bank.header())
}

fn infer_cmd(a: &InferArgs) -> Result<()> {
    if a.models.detector.is_none() {
        bail!("--detector is required for inference");
    }
    let image = match (&a.image, &a.manifest, &a.frame) {
        (Some(p), _, _) => RgbImage::load_png(p)?,
        (None, Some(m), Some(id)) => {
            let frames = frames_of(m, Some(std::slice::from_ref(id)))?;
            frames.into_iter().next().with_context(|| format!("frame `{id}` is not in {}", m.display()))?.image
        }
        _ => bail!("give --image, or --manifest with --frame"),
    };
    print_json(&a.models.pipeline()?.suggest(&image)?)
}

fn evaluate_cmd(a: &EvaluateArgs) -> Result<()> {
    let m = load_manifest(&a.manifest)?;
    let frames = match (&a.split, a.subset) {
        (Some(p), Some(which)) => m.select(subset(&read_json(p)?, which)),
        _ => m.frames.clone(),
    };
    let dets = read_jsonl(&a.detections)?;
    let sels = a.selections.as_deref().map(read_jsonl).transpose()?.unwrap_or_default();
    let raf = a.raf.as_deref().map(read_jsonl).transpose()?;
    let report = evaluate(&a.variant, &frames, &dets, &sels, raf.as_deref())?;
    if let Some(out) = &a.out {
        write_json(out, &report)?;
    }
    print_json(&report)?;
    print!("{}", render_table(&[report]));
    Ok(())
}

fn latency_cmd(a: &LatencyArgs) -> Result<()> {
    let ids: Option<Vec<String>> = a.split.as_deref().map(|p| read_json::<Split>(p).map(|s| subset(&s, a.subset).to_vec())).transpose()?;
    let mut frames = frames_of(&a.manifest, ids.as_deref())?;
    if let Some(n) = a.limit {
        frames.truncate(n);
    }
    let report = benchmark_latency(&a.models.pipeline()?, &frames, a.repetitions, a.budget_ms)?;
    print_json(&report)?;
    println!(
        "median {:.2} ms, p95 {:.2} ms over {} samples: {} the {:.0} ms budget",
        report.median_ms,
        report.p95_ms,
        report.samples,
        if report.pass { "within" } else { "OVER" },
        report.budget_ms
    );
    Ok(())
}

fn serve_cmd(a: &ServeArgs) -> Result<()> {
    let pipeline = match (&a.models.selector, &a.models.detector) {
        (Some(_), Some(_)) => Some(a.models.pipeline()?),
        (None, None) => None,
        _ => bail!("suggestions need both --detector and --selector"),
    };
    let state = AppState::open(&a.manifest, pipeline)?;
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    rt.block_on(serve(state, a.port))?;
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::GenerateSynthetic(a) => {
            let cfg = SynthConfig {
                image_size: a.image_size,
                doorways_per_frame: [a.min_doorways, a.max_doorways],
                global_cue_fraction: a.global_cue_fraction,
                noise_level: a.noise,
                style: match a.style {
                    Style::Stone => SynthStyle::Stone,
                    Style::Moss => SynthStyle::Moss,
                },
                game: a.game,
                ..SynthConfig::new(a.frames)
            };
            let corpus = generate_synthetic(&cfg, a.seed)?;
            corpus.write(&a.out)?;
            print_json(&corpus.manifest.stats())?;
        }
        Command::Split(a) => {
            let m = load_manifest(&a.manifest)?;
            let mut cfg = SplitConfig { train_fraction: a.fractions.into_iter().collect(), val_fraction: a.val_fraction, seed: a.seed };
            if let Some(f) = a.default_fraction {
                for g in m.games() {
                    cfg.train_fraction.entry(g).or_insert(f);
                }
            }
            let s = split(&m, &cfg)?;
            write_json(&a.out, &s)?;
            println!("train {} / val {} / test {}", s.train.len(), s.val.len(), s.test.len());
        }
        Command::TrainDetector(a) => train_detector_cmd(&a)?,
        Command::TrainSelector(a) => train_selector_cmd(&a)?,
        Command::BuildBank(a) => build_bank_cmd(&a)?,
        Command::InspectBank { path } => print_json(&inspect_bank(path)?)?,
        Command::Infer(a) => infer_cmd(&a)?,
        Command::Evaluate(a) => evaluate_cmd(&a)?,
        Command::RunVariant { variants, config } => {
            let cfg = RunConfig::load(&config)?;
            let mut reports = Vec::new();
            for id in variants {
                let out = run_variant(&VariantSpec::new(id), &cfg)?;
                println!("{}: report written to {}", out.spec.label(), out.dir.join("report.json").display());
                reports.push(out.report);
            }
            print!("{}", render_table(&reports));
        }
        Command::BenchmarkLatency(a) => latency_cmd(&a)?,
        Command::Serve(a) => serve_cmd(&a)?,
    }
    Ok(())
}

//! Acceptance suite: one PASS/FAIL line per criterion, written past the
//! test harness's output capture. The test fails when a criterion cannot
//! be evaluated; with `WAYMARK_STRICT_ACCEPTANCE=1` a FAIL verdict fails
//! it too.

#[path = "../../core/tests/oracles/mod.rs"]
mod oracles;
mod common;

use std::collections::BTreeMap;
use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::Instant;

use oracles::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use waymark::config::VariantId;
use waymark::experiment::RoleData;
use waymark::{benchmark_latency, run_variant, Pipeline, RunConfig, VariantSpec};
use waymark_core::adapter::{Adapter, AdapterInit, AdapterParams, TrainMode};
use waymark_core::dataset::{generate_synthetic, SplitConfig, SynthConfig, SynthStyle};
use waymark_core::evaluation::*;
use waymark_core::retrieval::*;
use waymark_core::selector::{build_selector, evaluate_selector, train_selector, CandidateSource, SelectorArch, SelectorTrainConfig};
use waymark_core::BBox;
use waymark_nn::{Graph, ParamStore, Tensor};

struct Outcome {
    pass: bool,
    detail: String,
}

/// Verdict of one criterion; `None` when it could not be evaluated.
type Verdict = Option<bool>;

fn line(text: &str) {
    // print! is captured by the test harness; a direct write is not
    let mut out = std::io::stdout().lock();
    writeln!(out, "{text}").and_then(|_| out.flush()).expect("stdout");
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn check(n: usize, name: &str, f: impl FnOnce() -> Outcome) -> Verdict {
    let t = Instant::now();
    let (verdict, detail) = match catch_unwind(AssertUnwindSafe(f)) {
        Ok(o) => (Some(o.pass), o.detail),
        Err(e) => {
            let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()));
            (None, format!("could not be evaluated: {}", msg.unwrap_or_default()))
        }
    };
    let tag = match verdict {
        Some(true) => "PASS",
        Some(false) => "FAIL",
        None => "ERROR",
    };
    line(&format!("{tag} [{n}] {name}: {detail} ({:.1}s)", t.elapsed().as_secs_f64()));
    verdict
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0) * scale).collect()
}

fn adapter_identity_and_gradients() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (d, r) = (64, 16);
    let mut max_err = 0.0f64;
    for init in [AdapterInit::Identity, AdapterInit::Trainable] {
        let p = AdapterParams::init(d, r, init, 5).unwrap();
        let mut store = ParamStore::new();
        let a = Adapter::new(&mut store, "adapter", d, r, init, 5).unwrap();
        let xs: Vec<f32> = (0..1000 * d).map(|_| rng.random_range(-50.0f32..50.0)).collect();
        for row in xs.chunks(d) {
            let x: Vec<f64> = row.iter().map(|&v| v as f64).collect();
            let y = p.forward(&x).unwrap();
            max_err = y.iter().zip(&x).map(|(a, b)| (a - b).abs()).fold(max_err, f64::max);
        }
        let mut g = Graph::new();
        let x = g.input(Tensor::new(vec![1000, d], xs.clone()));
        let y = a.forward(&mut g, &store, x);
        max_err = g.value(y).data().iter().zip(&xs).map(|(a, b)| (a - b).abs() as f64).fold(max_err, f64::max);
    }

    // central differences of L = c · forward(x), away from the ReLU kink
    let h = 1e-6;
    let mut worst = 0.0f64;
    let mut checked = 0;
    while checked < 50 {
        let d = rng.random_range(2..=16);
        let r = rng.random_range(1..=4.min(d - 1));
        let mut p = AdapterParams::init(d, r, AdapterInit::Identity, 0).unwrap();
        let n = p.flatten().len();
        p.unflatten(&uniform(&mut rng, n, 1.0));
        let x = uniform(&mut rng, d, 2.0);
        let pre: Vec<f64> = (0..r).map(|i| (0..d).map(|j| p.w_down[i * d + j] * x[j]).sum::<f64>() + p.b_down[i]).collect();
        if pre.iter().any(|z| z.abs() < 1e-2) {
            continue;
        }
        let c = uniform(&mut rng, d, 1.0);
        let loss = |p: &AdapterParams, x: &[f64]| p.forward(x).unwrap().iter().zip(&c).map(|(a, b)| a * b).sum::<f64>();
        let g = p.backward(&x, &c).unwrap();
        let analytic = [&g.w_down[..], &g.b_down, &g.w_up, &g.b_up, &g.x].concat();
        let rel = |a: f64, n: f64| (a - n).abs() / a.abs().max(n.abs()).max(1e-3);
        let flat = p.flatten();
        for k in 0..flat.len() + d {
            let num = if k < flat.len() {
                let (mut up, mut dn) = (flat.clone(), flat.clone());
                up[k] += h;
                dn[k] -= h;
                let (mut pu, mut pd) = (p.clone(), p.clone());
                pu.unflatten(&up);
                pd.unflatten(&dn);
                (loss(&pu, &x) - loss(&pd, &x)) / (2.0 * h)
            } else {
                let j = k - flat.len();
                let (mut xu, mut xd) = (x.clone(), x.clone());
                xu[j] += h;
                xd[j] -= h;
                (loss(&p, &xu) - loss(&p, &xd)) / (2.0 * h)
            };
            worst = worst.max(rel(analytic[k], num));
        }
        checked += 1;
    }
    outcome(max_err == 0.0 && worst < 1e-4, format!("identity max error {max_err:e} on 1000 vectors; gradient max rel err {worst:.2e} over {checked} adapters"))
}

fn metric_oracles() -> Outcome {
    const N: usize = 500;
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut worst: BTreeMap<&str, f64> = BTreeMap::new();
    let mut note = |name: &'static str, err: f64| {
        let w = worst.entry(name).or_insert(0.0);
        *w = w.max(err);
    };
    for _ in 0..N {
        let (a, b) = (int_box(&mut rng, 20), int_box(&mut rng, 20));
        note("iou", (iou(&a, &b) - iou_raster(&a, &b)).abs());

        let gts: Vec<BBox> = (0..3).map(|_| int_box(&mut rng, 12)).collect();
        let dets: Vec<ScoredBox> = (0..5).map(|_| ScoredBox::new(int_box(&mut rng, 12), rng.random())).collect();
        let mut got: Vec<(usize, usize)> = match_detections(&dets, &gts, 0.5).pairs.iter().map(|p| (p.0, p.1)).collect();
        let mut want = match_oracle(&dets, &gts, 0.5);
        got.sort_unstable();
        want.sort_unstable();
        note("match", if got == want { 0.0 } else { f64::INFINITY });

        let frames: Vec<FrameDetections> = (0..10).map(|i| random_frame(&mut rng, i)).collect();
        if frames.iter().any(|f| !f.gts.is_empty()) {
            note("average_precision", (average_precision(&frames, 0.5).unwrap() - ap_oracle(&frames, 0.5)).abs());
            note("recall", (recall(&frames, 0.5, 0.5).unwrap() - recall_oracle(&frames)).abs());
        }
        let miou = match (mean_iou(&frames, 0.5, 0.5), mean_iou_oracle(&frames)) {
            (Ok(a), Some(b)) => (a - b).abs(),
            (Err(EvalError::NoMatches), None) => 0.0,
            _ => f64::INFINITY,
        };
        note("mean_iou", miou);

        let c: Vec<BBox> = (0..5).map(|_| int_box(&mut rng, 100)).collect();
        let same = baseline_centermost(100.0, 100.0, &c).unwrap() == centermost_oracle(100.0, 100.0, &c);
        note("baseline_centermost", if same { 0.0 } else { f64::INFINITY });
        let ks: Vec<usize> = (0..rng.random_range(1..20)).map(|_| rng.random_range(1..6)).collect();
        note("baseline_random_expected", (baseline_random_expected(&ks).unwrap() - random_expected_oracle(&ks)).abs());
        let (b, c) = (rng.random_range(0..40), rng.random_range(0..40));
        note("mcnemar", (mcnemar(b, c) - mcnemar_oracle(b, c)).abs());
    }
    let bad: Vec<String> = worst.iter().filter(|(_, e)| !(**e <= 1e-9)).map(|(k, e)| format!("{k}={e:e}")).collect();
    let max = worst.values().fold(0.0f64, |a, &b| a.max(b));
    if bad.is_empty() {
        outcome(true, format!("{} metrics agree on {N} instances each, max error {max:.1e}", worst.len()))
    } else {
        outcome(false, format!("disagreement: {}", bad.join(", ")))
    }
}

fn fusion_reductions() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let mut failures = 0;
    for _ in 0..1000 {
        let k = rng.random_range(1..8);
        let s_sel: Vec<f64> = (0..k).map(|_| rng.random_range(-5.0..5.0)).collect();
        let s_ret: Vec<f64> = (0..k).map(|_| rng.random_range(-1.0..1.0)).collect();
        for norm in [ScoreNorm::Raw, ScoreNorm::Softmax] {
            failures += (fuse(&s_sel, &s_ret, FusionConfig { alpha: 1.0, norm }).unwrap().index != argmax(&s_sel).unwrap()) as usize;
            failures += (fuse(&s_sel, &s_ret, FusionConfig { alpha: 0.0, norm }).unwrap().index != argmax(&s_ret).unwrap()) as usize;
        }
    }
    // equal logits normalize to [0.5, 0.5]
    let worked = fuse(&[0.0, 0.0], &[1.0, 0.0], FusionConfig { alpha: 0.8, norm: ScoreNorm::Softmax }).unwrap();
    let ok = (worked.s_final[0] - 0.6).abs() < 1e-12 && (worked.s_final[1] - 0.4).abs() < 1e-12 && worked.index == 0;
    outcome(
        failures == 0 && ok,
        format!("{failures} endpoint mismatches over 1000 sets; worked case s_final = [{:.4}, {:.4}]", worked.s_final[0], worked.s_final[1]),
    )
}

fn bank_correctness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let vecn = |rng: &mut ChaCha8Rng, n: usize| -> Vec<f32> { (0..n).map(|_| rng.random_range(-1.0f32..1.0)).collect() };
    let mut topk_bad = 0;
    for trial in 0..100 {
        let n = rng.random_range(1..250);
        // coarse values in half the trials force quality ties
        let pop: Vec<(String, usize, Vec<f32>)> = (0..n)
            .map(|i| {
                let e = if trial % 2 == 0 { (0..16).map(|_| rng.random_range(0..3) as f32).collect() } else { vecn(&mut rng, 16) };
                (format!("f{:03}", rng.random_range(0..n)), i % 3, e)
            })
            .collect();
        let regions: Vec<RegionEmbedding> = pop
            .iter()
            .map(|(f, i, e)| RegionEmbedding { frame_id: f.clone(), annotation_index: *i, game: "core".into(), label: Label::Stp, embedding: e.clone() })
            .collect();
        let recipe = BankRecipe { core_titles: vec!["core".into()], support_titles: vec![], top_k: 100 };
        let bank = build_bank(&regions, &recipe, "emb").unwrap();
        let got: Vec<(String, usize)> = bank.entries.iter().map(|e| (e.meta.frame_id.clone(), e.meta.annotation_index)).collect();
        topk_bad += (got != top_k_oracle(&pop, 100)) as usize;
    }

    let raw: Vec<Vec<f32>> = (0..10_000).map(|_| vecn(&mut rng, 512)).collect();
    let regions: Vec<RegionEmbedding> = raw
        .iter()
        .enumerate()
        .map(|(i, e)| RegionEmbedding { frame_id: format!("{i:05}"), annotation_index: 0, game: "s".into(), label: Label::Stp, embedding: e.clone() })
        .collect();
    let bank = build_bank(&regions, &BankRecipe { core_titles: vec![], support_titles: vec!["s".into()], top_k: 100 }, "e").unwrap();
    let mut query_bad = 0;
    for t in 0..50 {
        let q = if t == 0 { raw[1234].clone() } else { vecn(&mut rng, 512) };
        query_bad += (bank.query(&q).unwrap() != max_cosine_oracle(&raw, &q)) as usize;
    }
    outcome(
        topk_bad == 0 && query_bad == 0 && bank.entries.len() == 10_000,
        format!("top-100 mismatches {topk_bad}/100 populations; max-cosine mismatches {query_bad}/50 queries on a 10000-entry bank"),
    )
}

/// Desk-scale selector schedule: the paper's 500 epochs at 1e-3 do not fit
/// the CPU budget.
fn desk_selector() -> SelectorTrainConfig {
    SelectorTrainConfig { epochs: 80, learning_rate: 5e-3, patience: Some(15), seed: 42, ..Default::default() }
}

fn learnability_config(root: &Path) -> RunConfig {
    let original = common::corpus(root, "orig", "synth", SynthStyle::Stone, 250, 11);
    let novel = common::corpus(root, "novel", "moss", SynthStyle::Moss, 100, 12);
    let split = SplitConfig { train_fraction: BTreeMap::from([("synth".into(), 0.8), ("moss".into(), 0.2)]), val_fraction: 0.2, seed: 42 };
    let mut cfg = RunConfig::new(original, split, root.join("runs"));
    cfg.novel = Some(novel);
    cfg.detector.max_epochs = 30;
    cfg.selector = desk_selector();
    cfg
}

fn learnability(cfg: &RunConfig) -> Outcome {
    let run = |id| run_variant(&VariantSpec::new(id), cfg).unwrap().report;
    let (a, b, c, d) = (run(VariantId::A), run(VariantId::B), run(VariantId::C), run(VariantId::D));
    let checks = [
        a.map50 >= 0.5 && a.composite >= 0.5,
        b.composite < a.composite,
        d.composite >= c.composite,
        a.mstp_accuracy >= 0.9 && a.mstp_accuracy >= a.baseline_centermost + 0.15,
    ];
    let detail = format!(
        "(i) A mAP@0.5 {:.3} composite {:.3} [{}]; (ii) B composite {:.3} vs A {:.3} [{}]; (iii) D composite {:.3} vs C {:.3} [{}]; \
         (iv) selector {:.3} vs centre-most {:.3} on {} frames [{}]",
        a.map50,
        a.composite,
        checks[0],
        b.composite,
        a.composite,
        checks[1],
        d.composite,
        c.composite,
        checks[2],
        a.mstp_accuracy,
        a.baseline_centermost,
        a.selection_frames,
        checks[3],
    );
    outcome(checks.iter().all(|&x| x), detail)
}

fn global_context() -> Outcome {
    let synth = SynthConfig { image_size: 128, global_cue_fraction: 1.0, doorways_per_frame: [2, 5], ..SynthConfig::new(250) };
    let frames = generate_synthetic(&synth, 6).unwrap().loaded();
    let (train, rest) = frames.split_at(120);
    let (val, test) = rest.split_at(30);
    let cfg = desk_selector();
    let acc = |use_global| {
        let arch = SelectorArch { use_global, ..Default::default() };
        let mut m = build_selector(&arch, TrainMode::Full, false, 42).unwrap();
        train_selector(&mut m, train, val, &cfg, None).unwrap();
        evaluate_selector(&m, test, CandidateSource::GroundTruth, None).unwrap()
    };
    let (local, full) = (acc(false), acc(true));
    let ks: Vec<usize> = test.iter().map(|f| f.record.annotations.len()).collect();
    let random = baseline_random_expected(&ks).unwrap();
    outcome(
        (local - random).abs() <= 0.1 && full - random >= 0.3,
        format!("{} global-cue test frames: local-only {local:.3}, full {full:.3}, random 1/k {random:.3}", test.len()),
    )
}

fn reproducibility(root: &Path) -> Outcome {
    let spec = VariantSpec::new(VariantId::A);
    let first = common::tiny_run(root, "seed42_a");
    let second = common::tiny_run(root, "seed42_b");
    let (r1, r2) = (run_variant(&spec, &first).unwrap(), run_variant(&spec, &second).unwrap());
    let read = |o: &waymark::VariantOutcome| std::fs::read(o.dir.join("report.json")).unwrap();
    let same_json = read(&r1) == read(&r2) && r1.report == r2.report;

    let seeds = |out: &str| RunConfig { seeds: (0..5).collect(), ..common::tiny_run(root, out) };
    let (m1, m2) = (run_variant(&spec, &seeds("multi_a")).unwrap(), run_variant(&spec, &seeds("multi_b")).unwrap());
    let (s1, s2) = (m1.report.summary.clone().unwrap(), m2.report.summary.clone().unwrap());
    let same_std = s1.std.to_bits() == s2.std.to_bits() && s1 == s2;
    outcome(
        same_json && same_std,
        format!(
            "seed 42 report JSON identical: {same_json}; seeds 0-4 accuracy mean {:.3} std {:.4} CI95 [{:.3}, {:.3}], identical on re-run: {same_std}",
            s1.mean, s1.std, s1.ci95[0], s1.ci95[1]
        ),
    )
}

fn latency(cfg: &RunConfig) -> Outcome {
    let dir = cfg.output_dir.join("A/seed_42");
    let pipeline = Pipeline::load(None, &dir.join("selector.wmarch"), Some(&dir.join("bank.wmbank")), cfg.raf.fusion()).unwrap();
    let test = RoleData::load(&cfg.original, cfg).unwrap().test;
    let r = benchmark_latency(&pipeline, &test, 5, 200.0).unwrap();
    let strict = benchmark_latency(&pipeline, &test[..1], 1, 0.0).unwrap();
    outcome(
        r.pass && r.samples == 5 * test.len() && r.p95_ms >= r.median_ms && !strict.pass,
        format!("{} samples, median {:.2} ms, p95 {:.2} ms against a {} ms budget", r.samples, r.median_ms, r.p95_ms, r.budget_ms),
    )
}

#[test]
fn acceptance() {
    let tmp = tempfile::tempdir().unwrap();
    let learn = learnability_config(&tmp.path().join("learn"));
    let small = tmp.path().join("small");
    let results = [
        check(1, "adapter identity and gradients", adapter_identity_and_gradients),
        check(2, "metric oracle equivalence", metric_oracles),
        check(3, "fusion reductions", fusion_reductions),
        check(4, "bank correctness", bank_correctness),
        check(5, "synthetic learnability", || learnability(&learn)),
        check(6, "global-context necessity", global_context),
        check(7, "reproducibility", || reproducibility(&small)),
        check(8, "latency benchmark", || latency(&learn)),
    ];
    let passed = results.iter().filter(|v| **v == Some(true)).count();
    line(&format!("acceptance: {passed}/{} criteria passed", results.len()));
    assert!(results.iter().all(Option::is_some), "a criterion could not be evaluated");
    if std::env::var("WAYMARK_STRICT_ACCEPTANCE").is_ok_and(|v| v == "1") {
        assert_eq!(passed, results.len(), "strict mode: every criterion must pass");
    }
}

use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use waymark_core::adapter::{backbone_checksum, trainable_parameters, AdapterModel, TrainMode};
use waymark_core::dataset::{generate_synthetic, LoadedFrame, SynthConfig};
use waymark_core::detector::{build_detector, DetectorArch};
use waymark_core::evaluation::{iou, SCORE_THRESHOLD};
use waymark_core::selector::*;
use waymark_core::BBox;

fn corpus(n: usize, seed: u64) -> Vec<LoadedFrame> {
    generate_synthetic(&SynthConfig { image_size: 128, ..SynthConfig::new(n) }, seed).unwrap().loaded()
}

fn model(mode: TrainMode) -> SelectorModel {
    build_selector(&SelectorArch::default(), mode, false, 42).unwrap()
}

fn quick(epochs: usize) -> SelectorTrainConfig {
    SelectorTrainConfig { epochs, learning_rate: 3e-3, ..Default::default() }
}

#[test]
fn scores_follow_any_permutation_of_the_candidates() {
    let m = model(TrainMode::Full);
    let frames = corpus(10, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut trials = 0;
    for f in &frames {
        let boxes = f.record.boxes();
        let base = m.score_candidates(&f.image, &boxes).unwrap();
        for _ in 0..100 {
            let mut perm: Vec<usize> = (0..boxes.len()).collect();
            perm.shuffle(&mut rng);
            let shuffled: Vec<BBox> = perm.iter().map(|&i| boxes[i]).collect();
            let s = m.score_candidates(&f.image, &shuffled).unwrap();
            for (j, &i) in perm.iter().enumerate() {
                assert!((s[j] - base[i]).abs() <= 1e-5, "frame {} trial {trials}", f.record.frame_id);
            }
            trials += 1;
        }
    }
    assert_eq!(trials, 1000);
}

#[test]
fn fresh_adapter_is_exactly_the_identity() {
    let m = model(TrainMode::Full);
    for f in &corpus(4, 2) {
        let boxes = f.record.boxes();
        assert_eq!(m.score_candidates(&f.image, &boxes).unwrap(), m.score_without_adapter(&f.image, &boxes).unwrap());
    }
}

#[test]
fn duplicated_box_gets_identical_logits() {
    let m = model(TrainMode::Full);
    let f = &corpus(1, 3)[0];
    let b = f.record.annotations[0].bbox;
    let s = m.score_candidates(&f.image, &[b, b]).unwrap();
    assert_eq!(s[0], s[1]);
    assert_eq!(select(&s).unwrap(), 0);
}

#[test]
fn single_candidate_and_empty_list() {
    let m = model(TrainMode::Full);
    let f = &corpus(1, 4)[0];
    let s = m.score_candidates(&f.image, &[f.record.annotations[0].bbox]).unwrap();
    assert_eq!(s.len(), 1);
    assert_eq!(select(&s).unwrap(), 0);
    assert!(matches!(m.score_candidates(&f.image, &[]), Err(SelectorError::NoCandidates)));
    assert!(matches!(select(&[]), Err(SelectorError::NoCandidates)));
}

#[test]
fn global_branch_is_the_only_path_for_pixels_outside_the_boxes() {
    let f = &corpus(1, 5)[0];
    let boxes = f.record.boxes();
    let mut edited = f.image.clone();
    for y in 0..128 {
        for x in 0..128 {
            let inside = boxes.iter().any(|b| (x as f64) >= b.x1 - 1.0 && (x as f64) < b.x2 + 1.0 && (y as f64) >= b.y1 - 1.0 && (y as f64) < b.y2 + 1.0);
            if !inside {
                edited.put_rgb(y, x, [0.9, 0.1, 0.5]);
            }
        }
    }
    let local = build_selector(&SelectorArch { use_global: false, ..Default::default() }, TrainMode::Full, false, 42).unwrap();
    assert_eq!(local.score_candidates(&f.image, &boxes).unwrap(), local.score_candidates(&edited, &boxes).unwrap());
    let full = model(TrainMode::Full);
    assert_ne!(full.score_candidates(&f.image, &boxes).unwrap(), full.score_candidates(&edited, &boxes).unwrap());
}

#[test]
fn single_candidate_frames_have_zero_loss_and_full_accuracy() {
    let cfg = SynthConfig { image_size: 128, doorways_per_frame: [1, 1], ..SynthConfig::new(8) };
    let frames = generate_synthetic(&cfg, 6).unwrap().loaded();
    let (val, train) = frames.split_at(2);
    let mut m = model(TrainMode::Full);
    let h = train_selector(&mut m, train, val, &quick(2), None).unwrap();
    for e in &h.epochs {
        assert_eq!((e.train_loss, e.train_acc, e.val_acc), (0.0, 1.0, 1.0));
    }
}

#[test]
fn loss_decreases_over_ten_epochs() {
    let frames = corpus(25, 7);
    let (val, train) = frames.split_at(5);
    let mut m = model(TrainMode::Full);
    let h = train_selector(&mut m, train, val, &quick(10), None).unwrap();
    assert_eq!(h.epochs.len(), 11);
    assert!(h.epochs[10].train_loss < h.epochs[0].train_loss, "{:?}", h.epochs.iter().map(|e| e.train_loss).collect::<Vec<_>>());
    let max = h.epochs.iter().map(|e| e.val_acc).fold(f64::NEG_INFINITY, f64::max);
    assert_eq!(h.best_epoch, h.epochs.iter().position(|e| e.val_acc == max).unwrap());
    assert_eq!(evaluate_selector(&m, val, CandidateSource::GroundTruth, None).unwrap(), max);

    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("curves.csv");
    h.write_curves(&p).unwrap();
    let mut r = csv::Reader::from_path(&p).unwrap();
    assert_eq!(r.headers().unwrap().iter().collect::<Vec<_>>(), ["epoch", "train_acc", "val_acc", "train_loss"]);
    assert_eq!(r.records().count(), 11);
}

#[test]
fn adapter_only_training_freezes_both_branches() {
    let frames = corpus(16, 8);
    let (val, train) = frames.split_at(4);
    let mut m = model(TrainMode::Full);
    let (bb, emb) = (backbone_checksum(&m), m.embedder_checksum());
    let f = &val[0];
    let boxes = f.record.boxes();
    let cfg = SelectorTrainConfig { mode: TrainMode::AdapterOnly, epochs: 3, learning_rate: 1e-2, ..Default::default() };
    let h = train_selector(&mut m, train, val, &cfg, None).unwrap();
    assert!(h.epochs.iter().all(|e| e.backbone_checksum == bb));
    assert_eq!((backbone_checksum(&m), m.embedder_checksum()), (bb, emb));
    let trainable = trainable_parameters(&m, TrainMode::AdapterOnly);
    assert!(trainable.iter().all(|n| n.starts_with("fusion.adapter.") || n.starts_with("mlp.")), "{trainable:?}");
    assert_eq!(m.params().trainable_names(), trainable);
    if h.best_epoch > 0 {
        assert_ne!(m.score_candidates(&f.image, &boxes).unwrap(), m.score_without_adapter(&f.image, &boxes).unwrap());
    }
}

#[test]
fn checkpoint_round_trip_reproduces_scores() {
    let frames = corpus(10, 9);
    let (val, train) = frames.split_at(3);
    let mut m = model(TrainMode::Full);
    let h = train_selector(&mut m, train, val, &quick(2), None).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("sel.wmarch");
    m.save(&p, h.best_epoch, h.best().val_acc).unwrap();
    let (loaded, meta) = load_selector(&p).unwrap();
    assert_eq!((meta.architecture.as_str(), meta.epoch, meta.seed, meta.val_accuracy), (RESNET18_TINY, h.best_epoch, 42, h.best().val_acc));
    for f in &frames {
        let b = f.record.boxes();
        assert_eq!(loaded.score_candidates(&f.image, &b).unwrap(), m.score_candidates(&f.image, &b).unwrap());
        assert_eq!(loaded.embed(&f.image, &b).unwrap(), m.embed(&f.image, &b).unwrap());
    }
}

#[test]
fn proposal_candidates_skip_frames_without_a_matching_box() {
    let frames = corpus(6, 10);
    let det = build_detector(&DetectorArch::default(), TrainMode::Full, false, 42).unwrap();
    assert!(matches!(candidate_sets(&frames, CandidateSource::DetectorProposals, None), Err(SelectorError::MissingDetector(_))));
    let (sets, skipped) = candidate_sets(&frames, CandidateSource::DetectorProposals, Some(&det)).unwrap();
    let expected_skips = frames
        .iter()
        .filter(|f| {
            let gt = f.record.annotations[f.record.mstp_index().unwrap()].bbox;
            !det.detect(&f.image, SCORE_THRESHOLD).iter().any(|d| iou(&d.bbox, &gt) >= 0.5)
        })
        .count();
    assert_eq!(skipped, expected_skips);
    assert_eq!(sets.len() + skipped, frames.len());
    for s in &sets {
        assert!(iou(&s.boxes[s.target], &s.gt_mstp) >= 0.5);
    }
    let (gt_sets, none) = candidate_sets(&frames, CandidateSource::GroundTruth, None).unwrap();
    assert_eq!((gt_sets.len(), none), (6, 0));
    assert!(gt_sets.iter().all(|s| s.boxes[s.target] == s.gt_mstp));
}

#[test]
fn construction_and_training_errors() {
    let arch = SelectorArch { name: "resnet152".into(), ..Default::default() };
    assert!(matches!(build_selector(&arch, TrainMode::Full, false, 0), Err(SelectorError::UnknownArchitecture(_))));
    let err = build_selector(&SelectorArch::default(), TrainMode::Full, true, 0).unwrap_err();
    assert!(matches!(err, SelectorError::PretrainedUnavailable { .. }));
    assert!(err.to_string().contains("pretrained_weights"));

    let frames = corpus(4, 11);
    let mut m = model(TrainMode::Full);
    assert!(matches!(train_selector(&mut m, &[], &frames, &quick(1), None), Err(SelectorError::EmptyTrain)));
    assert!(matches!(train_selector(&mut m, &frames, &[], &quick(1), None), Err(SelectorError::EmptyValidation)));
    let bad = SelectorTrainConfig { batch_size: 0, ..quick(1) };
    assert!(matches!(train_selector(&mut m, &frames, &frames, &bad, None), Err(SelectorError::Config(_))));
    let mut no_main = frames.clone();
    no_main[1].record.annotations.iter_mut().for_each(|a| a.is_mstp = false);
    assert!(matches!(train_selector(&mut m, &no_main, &frames, &quick(1), None), Err(SelectorError::NoMstp(_))));
}

#[test]
fn non_finite_loss_aborts_with_location() {
    let frames = corpus(6, 12);
    let mut m = model(TrainMode::Full);
    let id = m.params().id("mlp.fc2.weight").unwrap();
    m.params_mut().value_mut(id).data_mut()[0] = f32::NAN;
    let err = train_selector(&mut m, &frames, &frames, &quick(2), None).unwrap_err();
    assert!(matches!(err, SelectorError::NonFiniteLoss { epoch: 1, batch: 0 }), "{err}");
}

fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

proptest! {
    #[test]
    fn selection_is_the_softmax_argmax_and_shift_invariant(
        z in prop::collection::vec(-20.0f64..20.0, 1..12),
        shift in -50.0f64..50.0,
    ) {
        let i = select(&z).unwrap();
        let p = softmax(&z);
        let best = p.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        prop_assert_eq!(i, p.iter().position(|&v| v == best).unwrap());
        let shifted: Vec<f64> = z.iter().map(|v| v + shift).collect();
        prop_assert_eq!(select(&shifted).unwrap(), i);
    }
}

#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use waymark::RunConfig;
use waymark_core::dataset::{generate_synthetic, SplitConfig, SynthConfig, SynthStyle};

/// Writes a synthetic corpus under `root/name` and returns its manifest path.
pub fn corpus(root: &Path, name: &str, game: &str, style: SynthStyle, frames: usize, seed: u64) -> PathBuf {
    let cfg = SynthConfig {
        image_size: 128,
        num_frames: frames,
        doorways_per_frame: [1, 5],
        global_cue_fraction: 0.5,
        noise_level: 0.3,
        style,
        game: game.into(),
    };
    let dir = root.join(name);
    generate_synthetic(&cfg, seed).unwrap().write(&dir).unwrap();
    dir.join("manifest.json")
}

/// Original (`synth`, 24 frames) and novel (`moss`, 16 frames) corpora with
/// a two-epoch training budget.
pub fn tiny_run(root: &Path, out: &str) -> RunConfig {
    let original = root.join("orig/manifest.json");
    if !original.is_file() {
        corpus(root, "orig", "synth", SynthStyle::Stone, 24, 1);
        corpus(root, "novel", "moss", SynthStyle::Moss, 16, 2);
    }
    let split = SplitConfig {
        train_fraction: BTreeMap::from([("synth".into(), 0.75), ("moss".into(), 0.5)]),
        val_fraction: 0.25,
        seed: 42,
    };
    let mut cfg = RunConfig::new(original, split, root.join(out));
    cfg.novel = Some(root.join("novel/manifest.json"));
    cfg.detector.max_epochs = 2;
    cfg.detector.patience = 2;
    cfg.selector.epochs = 2;
    cfg.selector.learning_rate = 3e-3;
    cfg
}

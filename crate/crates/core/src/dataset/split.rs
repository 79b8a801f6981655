//! Deterministic per-game train/validation/test splitting.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{DatasetError, DatasetManifest};

pub const DEFAULT_SEED: u64 = 42;
pub const DEFAULT_VAL_FRACTION: f64 = 0.2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitConfig {
    /// Fraction of each game's frames assigned to train ∪ validation.
    pub train_fraction: BTreeMap<String, f64>,
    #[serde(default = "default_val")]
    pub val_fraction: f64,
    #[serde(default = "default_seed")]
    pub seed: u64,
}

fn default_val() -> f64 {
    DEFAULT_VAL_FRACTION
}

fn default_seed() -> u64 {
    DEFAULT_SEED
}

impl SplitConfig {
    pub fn uniform<S: Into<String>>(games: impl IntoIterator<Item = S>, fraction: f64) -> Self {
        Self {
            train_fraction: games.into_iter().map(|g| (g.into(), fraction)).collect(),
            val_fraction: DEFAULT_VAL_FRACTION,
            seed: DEFAULT_SEED,
        }
    }

    pub fn with(mut self, game: impl Into<String>, fraction: f64) -> Self {
        self.train_fraction.insert(game.into(), fraction);
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    fn check(&self) -> Result<(), DatasetError> {
        let open = |f: f64| f > 0.0 && f < 1.0;
        for (g, f) in &self.train_fraction {
            if !open(*f) {
                return Err(DatasetError::Config(format!("train fraction for `{g}` must be in (0,1), got {f}")));
            }
        }
        if !open(self.val_fraction) {
            return Err(DatasetError::Config(format!("val fraction must be in (0,1), got {}", self.val_fraction)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

impl Split {
    pub fn train_and_val(&self) -> Vec<String> {
        self.train.iter().chain(&self.val).cloned().collect()
    }
}

pub fn round_half_up(x: f64) -> usize {
    (x + 0.5).floor().max(0.0) as usize
}

/// Partitions every game's frames into train/val/test.
///
/// Per game, `round_half_up(n · train_fraction)` shuffled frames go to
/// train ∪ val, of which `round_half_up(· val_fraction)` become
/// validation; the remainder is test. Games are visited in sorted order
/// with one seeded generator, and frame ids are sorted before shuffling, so
/// the output depends only on the frame set, the config and the seed.
pub fn split(manifest: &DatasetManifest, cfg: &SplitConfig) -> Result<Split, DatasetError> {
    cfg.check()?;
    let mut by_game: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for f in &manifest.frames {
        by_game.entry(f.game.as_str()).or_default().push(f.frame_id.as_str());
    }
    let missing: Vec<&str> = by_game.keys().filter(|g| !cfg.train_fraction.contains_key(**g)).copied().collect();
    if !missing.is_empty() {
        return Err(DatasetError::MissingGame(missing.join(", ")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut out = Split::default();
    for (game, mut ids) in by_game {
        ids.sort_unstable();
        ids.shuffle(&mut rng);
        let trainval = round_half_up(ids.len() as f64 * cfg.train_fraction[game]).min(ids.len());
        let val = round_half_up(trainval as f64 * cfg.val_fraction).min(trainval);
        out.val.extend(ids[..val].iter().map(|s| s.to_string()));
        out.train.extend(ids[val..trainval].iter().map(|s| s.to_string()));
        out.test.extend(ids[trainval..].iter().map(|s| s.to_string()));
    }
    Ok(out)
}

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use waymark_core::adapter::TrainMode;
use waymark_core::dataset::SplitConfig;
use waymark_core::detector::{DetectorArch, DetectorTrainConfig};
use waymark_core::retrieval::{BankRecipe, FusionConfig, ScoreNorm, DEFAULT_ALPHA};
use waymark_core::selector::{SelectorArch, SelectorTrainConfig};

use crate::HarnessError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum VariantId {
    A,
    B,
    C,
    D,
    E,
    F,
}

impl VariantId {
    pub const ALL: [VariantId; 6] = [VariantId::A, VariantId::B, VariantId::C, VariantId::D, VariantId::E, VariantId::F];
}

impl fmt::Display for VariantId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

impl FromStr for VariantId {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        VariantId::ALL
            .into_iter()
            .find(|v| v.to_string().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown variant `{s}` (expected one of A-F)"))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Original,
    Novel,
}

impl Role {
    pub fn name(self) -> &'static str {
        match self {
            Role::Original => "original",
            Role::Novel => "novel",
        }
    }
}

/// One training phase: the dataset it reads and the parameters it updates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Phase {
    pub role: Role,
    pub mode: TrainMode,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct VariantSpec {
    pub id: VariantId,
    pub name: &'static str,
    pub pretrain: Option<Phase>,
    pub finetune: Option<Phase>,
}

impl VariantSpec {
    pub fn new(id: VariantId) -> Self {
        let orig = |mode| Some(Phase { role: Role::Original, mode });
        let novel = |mode| Some(Phase { role: Role::Novel, mode });
        let (name, pretrain, finetune) = match id {
            VariantId::A => ("Full", orig(TrainMode::Full), None),
            VariantId::B => ("Adapter", orig(TrainMode::AdapterOnly), None),
            VariantId::C => ("Continue-on-Full", orig(TrainMode::Full), novel(TrainMode::Full)),
            VariantId::D => ("Adapter-on-Full", orig(TrainMode::Full), novel(TrainMode::AdapterOnly)),
            VariantId::E => ("New-Full", None, novel(TrainMode::Full)),
            VariantId::F => ("New-Adapter", None, novel(TrainMode::AdapterOnly)),
        };
        Self { id, name, pretrain, finetune }
    }

    /// The dataset whose test split the variant is scored on.
    pub fn target(&self) -> Role {
        self.finetune.or(self.pretrain).expect("every variant trains").role
    }

    pub fn label(&self) -> String {
        format!("{} ({})", self.id, self.name)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RafSettings {
    pub enabled: bool,
    pub alpha: f64,
    pub norm: ScoreNorm,
    /// Explicit bank recipe. When absent the core titles are the games of
    /// the first training phase and the support titles those of the
    /// fine-tuning phase.
    pub recipe: Option<BankRecipe>,
}

impl Default for RafSettings {
    fn default() -> Self {
        Self { enabled: true, alpha: DEFAULT_ALPHA, norm: ScoreNorm::Softmax, recipe: None }
    }
}

impl RafSettings {
    pub fn fusion(&self) -> FusionConfig {
        FusionConfig { alpha: self.alpha, norm: self.norm }
    }
}

fn default_seeds() -> Vec<u64> {
    vec![42]
}

fn yes() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    /// `manifest.json` of the original dataset.
    pub original: PathBuf,
    /// `manifest.json` of the novel dataset, needed by variants C-F.
    #[serde(default)]
    pub novel: Option<PathBuf>,
    /// Covers the games of both datasets.
    pub split: SplitConfig,
    #[serde(default)]
    pub detector_arch: DetectorArch,
    #[serde(default)]
    pub detector: DetectorTrainConfig,
    #[serde(default)]
    pub selector_arch: SelectorArch,
    #[serde(default)]
    pub selector: SelectorTrainConfig,
    #[serde(default)]
    pub raf: RafSettings,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    /// Train variant A on the fly when C or D find no checkpoint.
    #[serde(default = "yes")]
    pub train_missing_prerequisites: bool,
}

impl RunConfig {
    pub fn new(original: impl Into<PathBuf>, split: SplitConfig, output_dir: impl Into<PathBuf>) -> Self {
        Self {
            original: original.into(),
            novel: None,
            split,
            detector_arch: DetectorArch::default(),
            detector: DetectorTrainConfig::default(),
            selector_arch: SelectorArch::default(),
            selector: SelectorTrainConfig::default(),
            raf: RafSettings::default(),
            seeds: default_seeds(),
            output_dir: output_dir.into(),
            train_missing_prerequisites: true,
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, HarnessError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| HarnessError::Io(path.to_path_buf(), e))?;
        let mut cfg: RunConfig = serde_json::from_str(&text).map_err(|e| HarnessError::Json(path.to_path_buf(), e))?;
        // relative paths are taken from the config file's directory
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [Some(&mut cfg.original), cfg.novel.as_mut(), Some(&mut cfg.output_dir)].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.seeds.is_empty() {
            return Err(HarnessError::Config("seeds must not be empty".into()));
        }
        for p in std::iter::once(&self.original).chain(&self.novel) {
            if !p.is_file() {
                return Err(HarnessError::Config(format!("manifest {} does not exist", p.display())));
            }
        }
        if !(0.0..=1.0).contains(&self.raf.alpha) {
            return Err(HarnessError::Config(format!("raf.alpha must be in [0,1], got {}", self.raf.alpha)));
        }
        self.detector.validate()?;
        self.selector.validate()?;
        Ok(())
    }

    pub fn manifest(&self, role: Role) -> Option<&Path> {
        match role {
            Role::Original => Some(&self.original),
            Role::Novel => self.novel.as_deref(),
        }
    }
}

//! Offline feature bank, max-cosine retrieval and late score fusion.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const DEFAULT_ALPHA: f64 = 0.8;
pub const DEFAULT_TOP_K: usize = 100;
const MAGIC: &[u8; 8] = b"WMBANK01";

#[derive(Debug, thiserror::Error)]
pub enum RetrievalError {
    #[error("top-K must be positive")]
    InvalidK,
    #[error("core title `{0}` has no regions")]
    EmptyTitle(String),
    #[error("embedding dimension {found} does not match bank dimension {expected}")]
    Dimension { expected: usize, found: usize },
    #[error("non-finite embedding for frame `{0}`")]
    NonFinite(String),
    #[error("feature bank is empty")]
    EmptyBank,
    #[error("fusion inputs differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("fusion needs at least one candidate")]
    NoCandidates,
    #[error("alpha must be in [0,1], got {0}")]
    Alpha(f64),
    #[error("{0}: {1}")]
    Io(PathBuf, #[source] std::io::Error),
    #[error("bank file: {0}")]
    Format(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Stp,
    Mstp,
}

/// One embedded annotated region before bank selection.
#[derive(Clone, Debug, PartialEq)]
pub struct RegionEmbedding {
    pub frame_id: String,
    pub annotation_index: usize,
    pub game: String,
    pub label: Label,
    pub embedding: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EntryMeta {
    pub label: Label,
    pub source_game: String,
    pub frame_id: String,
    pub annotation_index: usize,
    pub quality: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BankEntry {
    pub embedding: Vec<f32>,
    pub meta: EntryMeta,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BankRecipe {
    pub core_titles: Vec<String>,
    #[serde(default)]
    pub support_titles: Vec<String>,
    #[serde(default = "default_k")]
    pub top_k: usize,
}

fn default_k() -> usize {
    DEFAULT_TOP_K
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BankHeader {
    pub dimension: usize,
    pub count: usize,
    pub counts_per_title: BTreeMap<String, usize>,
    pub embedder_checksum: String,
    pub recipe: BankRecipe,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureBank {
    pub dimension: usize,
    pub entries: Vec<BankEntry>,
    pub embedder_checksum: String,
    pub recipe: BankRecipe,
    norms: Vec<f64>,
}

/// `‖e‖₂ + 0.5·σ(e)` with σ the population standard deviation of the
/// components.
pub fn quality(e: &[f32]) -> f64 {
    let n = e.len() as f64;
    let l2 = e.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt();
    let mean = e.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = e.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
    l2 + 0.5 * var.sqrt()
}

fn norm(e: &[f32]) -> f64 {
    e.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt()
}

fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

/// Cosine similarity; `0` if either vector is zero.
pub fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let d = norm(a) * norm(b);
    if d == 0.0 {
        0.0
    } else {
        dot(a, b) / d
    }
}

/// Selects bank entries from embedded training regions.
///
/// Core titles keep their `top_k` highest-quality regions (ties by frame id
/// then annotation index); support titles keep everything. Regions of any
/// other title are ignored.
pub fn build_bank(regions: &[RegionEmbedding], recipe: &BankRecipe, embedder_checksum: &str) -> Result<FeatureBank, RetrievalError> {
    if recipe.top_k == 0 {
        return Err(RetrievalError::InvalidK);
    }
    let dimension = regions.first().map(|r| r.embedding.len()).unwrap_or(0);
    for r in regions {
        if r.embedding.len() != dimension {
            return Err(RetrievalError::Dimension { expected: dimension, found: r.embedding.len() });
        }
        if r.embedding.iter().any(|v| !v.is_finite()) {
            return Err(RetrievalError::NonFinite(r.frame_id.clone()));
        }
    }
    let entry = |r: &RegionEmbedding| BankEntry {
        embedding: r.embedding.clone(),
        meta: EntryMeta {
            label: r.label,
            source_game: r.game.clone(),
            frame_id: r.frame_id.clone(),
            annotation_index: r.annotation_index,
            quality: quality(&r.embedding),
        },
    };
    let by_key = |a: &BankEntry, b: &BankEntry| {
        a.meta.frame_id.cmp(&b.meta.frame_id).then(a.meta.annotation_index.cmp(&b.meta.annotation_index))
    };
    let mut entries = Vec::new();
    for title in &recipe.core_titles {
        let mut pool: Vec<BankEntry> = regions.iter().filter(|r| &r.game == title).map(entry).collect();
        if pool.is_empty() {
            return Err(RetrievalError::EmptyTitle(title.clone()));
        }
        pool.sort_by(|a, b| b.meta.quality.total_cmp(&a.meta.quality).then_with(|| by_key(a, b)));
        pool.truncate(recipe.top_k);
        entries.extend(pool);
    }
    for title in recipe.support_titles.iter().filter(|t| !recipe.core_titles.contains(t)) {
        let mut pool: Vec<BankEntry> = regions.iter().filter(|r| &r.game == title).map(entry).collect();
        pool.sort_by(by_key);
        entries.extend(pool);
    }
    Ok(FeatureBank::new(dimension, entries, embedder_checksum.to_string(), recipe.clone()))
}

impl FeatureBank {
    pub fn new(dimension: usize, entries: Vec<BankEntry>, embedder_checksum: String, recipe: BankRecipe) -> Self {
        let norms = entries.iter().map(|e| norm(&e.embedding)).collect();
        Self { dimension, entries, embedder_checksum, recipe, norms }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// `max_j cos(f, f_j)` by exhaustive scan; `0` for a zero query.
    pub fn query(&self, f: &[f32]) -> Result<f64, RetrievalError> {
        if self.entries.is_empty() {
            return Err(RetrievalError::EmptyBank);
        }
        if f.len() != self.dimension {
            return Err(RetrievalError::Dimension { expected: self.dimension, found: f.len() });
        }
        let qn = norm(f);
        if qn == 0.0 {
            return Ok(0.0);
        }
        let mut best = f64::NEG_INFINITY;
        for (e, n) in self.entries.iter().zip(&self.norms) {
            let c = if *n == 0.0 { 0.0 } else { dot(f, &e.embedding) / (qn * n) };
            best = best.max(c);
        }
        Ok(best)
    }

    pub fn header(&self) -> BankHeader {
        let mut counts_per_title = BTreeMap::new();
        for e in &self.entries {
            *counts_per_title.entry(e.meta.source_game.clone()).or_insert(0) += 1;
        }
        BankHeader {
            dimension: self.dimension,
            count: self.entries.len(),
            counts_per_title,
            embedder_checksum: self.embedder_checksum.clone(),
            recipe: self.recipe.clone(),
        }
    }

    /// SHA-256 over the embeddings and metadata.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for e in &self.entries {
            for v in &e.embedding {
                h.update(v.to_le_bytes());
            }
            h.update(serde_json::to_vec(&e.meta).expect("serializable"));
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Magic, then length-prefixed JSON header, packed little-endian `f32`
    /// matrix (`count × dimension`, row-major), length-prefixed JSON
    /// metadata table.
    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&self.header()).expect("serializable");
        let metas: Vec<&EntryMeta> = self.entries.iter().map(|e| &e.meta).collect();
        let table = serde_json::to_vec(&metas).expect("serializable");
        let mut out = Vec::with_capacity(24 + header.len() + table.len() + 4 * self.dimension * self.entries.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for e in &self.entries {
            for v in &e.embedding {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out.extend_from_slice(&(table.len() as u64).to_le_bytes());
        out.extend_from_slice(&table);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, RetrievalError> {
        let (header, mut rest) = read_header(bytes)?;
        let n = header.count * header.dimension * 4;
        if rest.len() < n + 8 {
            return Err(RetrievalError::Format("truncated embedding matrix".into()));
        }
        let matrix: Vec<f32> = rest[..n].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        rest = &rest[n..];
        let tl = u64::from_le_bytes(rest[..8].try_into().unwrap()) as usize;
        let table = rest.get(8..8 + tl).ok_or_else(|| RetrievalError::Format("truncated metadata table".into()))?;
        let metas: Vec<EntryMeta> = serde_json::from_slice(table).map_err(|e| RetrievalError::Format(e.to_string()))?;
        if metas.len() != header.count {
            return Err(RetrievalError::Format(format!("{} metadata rows for {} entries", metas.len(), header.count)));
        }
        let dim = header.dimension.max(1);
        let entries = metas
            .into_iter()
            .zip(matrix.chunks(dim))
            .map(|(meta, row)| BankEntry { embedding: row[..header.dimension].to_vec(), meta })
            .collect();
        Ok(Self::new(header.dimension, entries, header.embedder_checksum, header.recipe))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), RetrievalError> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| RetrievalError::Io(path.to_path_buf(), e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, RetrievalError> {
        let path = path.as_ref();
        Self::from_bytes(&fs::read(path).map_err(|e| RetrievalError::Io(path.to_path_buf(), e))?)
    }
}

fn read_header(bytes: &[u8]) -> Result<(BankHeader, &[u8]), RetrievalError> {
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(RetrievalError::Format("not a feature bank file".into()));
    }
    let hl = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let raw = bytes.get(16..16 + hl).ok_or_else(|| RetrievalError::Format("truncated header".into()))?;
    let header: BankHeader = serde_json::from_slice(raw).map_err(|e| RetrievalError::Format(e.to_string()))?;
    Ok((header, &bytes[16 + hl..]))
}

/// Reads only the header of a bank file.
pub fn inspect_bank(path: impl AsRef<Path>) -> Result<BankHeader, RetrievalError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| RetrievalError::Io(path.to_path_buf(), e))?;
    read_header(&bytes).map(|(h, _)| h)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreNorm {
    /// Fuse the selector logits as they are.
    Raw,
    /// Per-frame softmax of the selector logits before fusing.
    #[default]
    Softmax,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig {
    pub alpha: f64,
    #[serde(default)]
    pub norm: ScoreNorm,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self { alpha: DEFAULT_ALPHA, norm: ScoreNorm::Softmax }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Fused {
    /// Selector scores after normalization.
    pub s_sel: Vec<f64>,
    pub s_final: Vec<f64>,
    pub index: usize,
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// `s_final = α·s̃_sel + (1 − α)·s_ret`, argmax with ties to the lowest index.
pub fn fuse(s_sel: &[f64], s_ret: &[f64], cfg: FusionConfig) -> Result<Fused, RetrievalError> {
    if s_sel.len() != s_ret.len() {
        return Err(RetrievalError::LengthMismatch(s_sel.len(), s_ret.len()));
    }
    if s_sel.is_empty() {
        return Err(RetrievalError::NoCandidates);
    }
    if !(0.0..=1.0).contains(&cfg.alpha) {
        return Err(RetrievalError::Alpha(cfg.alpha));
    }
    let norm = match cfg.norm {
        ScoreNorm::Raw => s_sel.to_vec(),
        ScoreNorm::Softmax => softmax(s_sel),
    };
    let s_final: Vec<f64> = norm.iter().zip(s_ret).map(|(s, r)| cfg.alpha * s + (1.0 - cfg.alpha) * r).collect();
    let index = crate::evaluation::argmax(&s_final).expect("non-empty");
    Ok(Fused { s_sel: norm, s_final, index })
}

//! Manifest schema, JSON I/O and invariant checking.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::bbox::BBox;
use crate::dataset::DatasetError;

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Uncertainty {
    #[default]
    Certain,
    Uncertain,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StpAnnotation {
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub is_mstp: bool,
    #[serde(default)]
    pub uncertainty: Uncertainty,
    #[serde(default)]
    pub note: String,
    #[serde(default = "one")]
    pub merged_from: u32,
}

fn one() -> u32 {
    1
}

impl StpAnnotation {
    pub fn certain(bbox: BBox, is_mstp: bool) -> Self {
        Self { bbox, is_mstp, uncertainty: Uncertainty::Certain, note: String::new(), merged_from: 1 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub frame_id: String,
    pub image_path: String,
    pub width: u32,
    pub height: u32,
    pub game: String,
    pub annotations: Vec<StpAnnotation>,
}

impl FrameRecord {
    /// Index of the single annotation flagged as the main transition point.
    pub fn mstp_index(&self) -> Option<usize> {
        let mut it = self.annotations.iter().enumerate().filter(|(_, a)| a.is_mstp);
        match (it.next(), it.next()) {
            (Some((i, _)), None) => Some(i),
            _ => None,
        }
    }

    pub fn mstp_box(&self) -> Option<BBox> {
        self.mstp_index().map(|i| self.annotations[i].bbox)
    }

    pub fn boxes(&self) -> Vec<BBox> {
        self.annotations.iter().map(|a| a.bbox).collect()
    }

    /// Every violated frame invariant, as human-readable messages.
    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.annotations.is_empty() {
            out.push("frame has no STP annotations".to_string());
        }
        let mstps = self.annotations.iter().filter(|a| a.is_mstp).count();
        if !self.annotations.is_empty() && mstps != 1 {
            out.push(format!("exactly one annotation must be the MSTP, found {mstps}"));
        }
        if self.width == 0 || self.height == 0 {
            out.push("frame has zero width or height".to_string());
        }
        let (w, h) = (self.width as f64, self.height as f64);
        for (i, a) in self.annotations.iter().enumerate() {
            if !a.bbox.is_valid() {
                out.push(format!("annotation {i}: box {:?} is not x1<x2, y1<y2", <[f64; 4]>::from(a.bbox)));
            } else if !a.bbox.within(w, h) {
                out.push(format!("annotation {i}: box {:?} outside {}x{} frame", <[f64; 4]>::from(a.bbox), self.width, self.height));
            }
            if a.uncertainty == Uncertainty::Uncertain && a.note.trim().is_empty() {
                out.push(format!("annotation {i}: uncertain annotation requires a note"));
            }
            if a.merged_from == 0 {
                out.push(format!("annotation {i}: merged_from must be at least 1"));
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    #[serde(default)]
    pub provenance: String,
    pub frames: Vec<FrameRecord>,
}

impl DatasetManifest {
    pub fn new(provenance: impl Into<String>, frames: Vec<FrameRecord>) -> Self {
        Self { version: MANIFEST_VERSION, provenance: provenance.into(), frames }
    }

    /// Checks every invariant and reports all violations at once.
    pub fn validate(&self) -> Result<(), DatasetError> {
        let mut violations = Vec::new();
        if self.version != MANIFEST_VERSION {
            violations.push(format!("manifest version must be {MANIFEST_VERSION}, found {}", self.version));
        }
        let mut seen = BTreeSet::new();
        for f in &self.frames {
            if !seen.insert(f.frame_id.as_str()) {
                violations.push(format!("{}: duplicate frame_id", f.frame_id));
            }
            for v in f.violations() {
                violations.push(format!("{}: {v}", f.frame_id));
            }
        }
        if violations.is_empty() {
            Ok(())
        } else {
            Err(DatasetError::Validation(violations))
        }
    }

    pub fn frame(&self, id: &str) -> Option<&FrameRecord> {
        self.frames.iter().find(|f| f.frame_id == id)
    }

    pub fn index(&self) -> BTreeMap<&str, &FrameRecord> {
        self.frames.iter().map(|f| (f.frame_id.as_str(), f)).collect()
    }

    pub fn stats(&self) -> ManifestStats {
        let mut s = ManifestStats::default();
        for f in &self.frames {
            *s.frames_per_game.entry(f.game.clone()).or_default() += 1;
            s.frames += 1;
            s.annotations += f.annotations.len();
            if f.annotations.len() == 1 {
                s.single_candidate_frames += 1;
            }
            s.uncertain += f.annotations.iter().filter(|a| a.uncertainty == Uncertainty::Uncertain).count();
        }
        s
    }

    pub fn games(&self) -> BTreeSet<String> {
        self.frames.iter().map(|f| f.game.clone()).collect()
    }

    /// Frames with the given ids, in the order given.
    pub fn select(&self, ids: &[String]) -> Vec<FrameRecord> {
        let idx = self.index();
        ids.iter().filter_map(|id| idx.get(id.as_str()).map(|f| (*f).clone())).collect()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ManifestStats {
    pub frames: usize,
    pub annotations: usize,
    pub single_candidate_frames: usize,
    pub uncertain: usize,
    pub frames_per_game: BTreeMap<String, usize>,
}

/// Parses and fully validates a manifest file.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest, DatasetError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| DatasetError::Io(path.to_path_buf(), e))?;
    let m = parse_manifest(&text)?;
    Ok(m)
}

pub fn parse_manifest(text: &str) -> Result<DatasetManifest, DatasetError> {
    let m: DatasetManifest = serde_json::from_str(text).map_err(DatasetError::Parse)?;
    m.validate()?;
    Ok(m)
}

pub fn save_manifest(m: &DatasetManifest, path: impl AsRef<Path>) -> Result<(), DatasetError> {
    let path = path.as_ref();
    let text = serde_json::to_string_pretty(m).map_err(DatasetError::Parse)?;
    fs::write(path, text + "\n").map_err(|e| DatasetError::Io(path.to_path_buf(), e))
}

/// Resolves a frame's relative image path against the manifest directory.
pub fn image_path(manifest_dir: &Path, frame: &FrameRecord) -> PathBuf {
    manifest_dir.join(&frame.image_path)
}

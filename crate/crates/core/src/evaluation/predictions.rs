//! JSON-lines prediction files.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::bbox::BBox;
use crate::evaluation::{EvalError, ScoredBox};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionPrediction {
    pub frame_id: String,
    pub boxes: Vec<BBox>,
    pub scores: Vec<f64>,
}

impl DetectionPrediction {
    pub fn new(frame_id: impl Into<String>, dets: &[ScoredBox]) -> Self {
        Self { frame_id: frame_id.into(), boxes: dets.iter().map(|d| d.bbox).collect(), scores: dets.iter().map(|d| d.score).collect() }
    }

    pub fn detections(&self) -> Vec<ScoredBox> {
        self.boxes.iter().zip(&self.scores).map(|(b, s)| ScoredBox::new(*b, *s)).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionPrediction {
    pub frame_id: String,
    pub candidate_boxes: Vec<BBox>,
    pub s_sel: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub s_ret: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub s_final: Option<Vec<f64>>,
    pub chosen_index: usize,
}

pub fn write_jsonl<T: Serialize>(path: impl AsRef<Path>, items: &[T]) -> Result<(), EvalError> {
    let path = path.as_ref();
    let io = |e| EvalError::Io(path.to_path_buf(), e);
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    for it in items {
        let line = serde_json::to_string(it).map_err(|source| EvalError::Json { path: path.to_path_buf(), line: 0, source })?;
        writeln!(w, "{line}").map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn read_jsonl<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<Vec<T>, EvalError> {
    let path = path.as_ref();
    let f = File::open(path).map_err(|e| EvalError::Io(path.to_path_buf(), e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| EvalError::Io(path.to_path_buf(), e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|source| EvalError::Json { path: path.to_path_buf(), line: i + 1, source })?);
    }
    Ok(out)
}

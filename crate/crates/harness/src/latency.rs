//! Per-frame selection latency: selector scoring, bank query and fusion
//! over each frame's annotated candidates.

use std::time::Instant;

use serde::{Deserialize, Serialize};
use waymark_core::dataset::LoadedFrame;

use crate::pipeline::Pipeline;
use crate::HarnessError;

pub const DEFAULT_BUDGET_MS: f64 = 200.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    pub samples: usize,
    pub median_ms: f64,
    pub p95_ms: f64,
    pub budget_ms: f64,
    /// Median within budget.
    pub pass: bool,
}

/// Nearest-rank percentile of an ascending sample.
pub fn percentile(sorted: &[f64], p: f64) -> f64 {
    let rank = ((p / 100.0) * sorted.len() as f64).ceil().max(1.0) as usize;
    sorted[rank.min(sorted.len()) - 1]
}

/// Middle value, or the mean of the two middle values.
pub fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0
    }
}

/// Times `repetitions` passes over `frames`, one sample per frame per pass.
pub fn benchmark_latency(pipeline: &Pipeline, frames: &[LoadedFrame], repetitions: usize, budget_ms: f64) -> Result<LatencyReport, HarnessError> {
    if repetitions == 0 {
        return Err(HarnessError::NoRepetitions);
    }
    if frames.is_empty() {
        return Err(HarnessError::NoFrames);
    }
    let mut times = Vec::with_capacity(repetitions * frames.len());
    for _ in 0..repetitions {
        for f in frames {
            let boxes = f.record.boxes();
            let t = Instant::now();
            std::hint::black_box(pipeline.select_among(&f.image, &boxes)?);
            times.push(t.elapsed().as_secs_f64() * 1e3);
        }
    }
    times.sort_by(f64::total_cmp);
    let median_ms = median(&times);
    Ok(LatencyReport { samples: times.len(), median_ms, p95_ms: percentile(&times, 95.0), budget_ms, pass: median_ms <= budget_ms })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn order_statistics() {
        let v: Vec<f64> = (1..=20).map(f64::from).collect();
        assert_eq!(median(&v), 10.5);
        assert_eq!(percentile(&v, 95.0), 19.0);
        assert_eq!(percentile(&v, 100.0), 20.0);
        assert_eq!(percentile(&[3.0], 95.0), 3.0);
        assert_eq!(median(&[1.0, 2.0, 9.0]), 2.0);
    }
}

//! Paired significance testing and multi-seed summaries.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::evaluation::EvalError;

/// Exact two-sided McNemar test on discordant counts `b` (method right,
/// baseline wrong) and `c` (the reverse): `min(1, 2·P(X ≤ min(b, c)))` with
/// `X ~ Binomial(b + c, 1/2)`. No discordant pairs gives `1`.
pub fn mcnemar(b: u64, c: u64) -> f64 {
    let n = b + c;
    if n == 0 {
        return 1.0;
    }
    let k = b.min(c);
    // P(X ≤ k) summed in log space so large n does not underflow early
    let ln_half_n = n as f64 * 0.5f64.ln();
    let mut ln_choose = 0.0f64;
    let mut tail = 0.0f64;
    for i in 0..=k {
        if i > 0 {
            ln_choose += ((n - i + 1) as f64).ln() - (i as f64).ln();
        }
        tail += (ln_choose + ln_half_n).exp();
    }
    (2.0 * tail).min(1.0)
}

/// Discordant counts from paired per-frame outcomes `(method, baseline)`.
pub fn discordant(outcomes: &[(bool, bool)]) -> (u64, u64) {
    let b = outcomes.iter().filter(|(m, base)| *m && !*base).count() as u64;
    let c = outcomes.iter().filter(|(m, base)| !*m && *base).count() as u64;
    (b, c)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub n: usize,
    pub mean: f64,
    /// Sample standard deviation (divisor `n − 1`).
    pub std: f64,
    /// `mean ± t(0.975, n−1)·std/√n`.
    pub ci95: [f64; 2],
}

pub fn multi_seed_summary(values: &[f64]) -> Result<SeedSummary, EvalError> {
    let n = values.len();
    if n < 2 {
        return Err(EvalError::TooFewSeeds(n));
    }
    // shifted by the first value so identical inputs give exactly zero spread
    let shift = values[0];
    let dev: Vec<f64> = values.iter().map(|v| v - shift).collect();
    let dmean = dev.iter().sum::<f64>() / n as f64;
    let mean = shift + dmean;
    let var = dev.iter().map(|d| (d - dmean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let std = var.sqrt();
    let t = StudentsT::new(0.0, 1.0, (n - 1) as f64).expect("n >= 2").inverse_cdf(0.975);
    let half = t * std / (n as f64).sqrt();
    Ok(SeedSummary { n, mean, std, ci95: [mean - half, mean + half] })
}

use crate::error::{Error, Result};

const LOG_FLOOR: f64 = 1e-12;

/// Geometric-mean aggregation `p₁/(p₁+p₀)`, where `p_k` is the geometric
/// mean of the k-th entries. Computed in the log domain so long lists do
/// not underflow.
fn geometric_aggregate(probs: &[[f64; 2]], what: &str) -> Result<f64> {
    if probs.is_empty() {
        return Err(Error::Argument(format!("cannot aggregate an empty list of {what}")));
    }
    let n = probs.len() as f64;
    let (mut log0, mut log1) = (0.0, 0.0);
    for p in probs {
        log0 += p[0].max(LOG_FLOOR).ln();
        log1 += p[1].max(LOG_FLOOR).ln();
    }
    let (log0, log1) = (log0 / n, log1 / n);
    // p₁/(p₁+p₀) = 1/(1+exp(log p₀ − log p₁))
    Ok(1.0 / (1.0 + (log0 - log1).exp()))
}

/// Slide-level positive probability from per-bag `[P(neg), P(pos)]`.
pub fn slide_probability(bag_probs: &[[f64; 2]]) -> Result<f64> {
    geometric_aggregate(bag_probs, "bag probabilities")
}

/// Patch-baseline slide probability: the same aggregation over patches.
pub fn patch_baseline_probability(patch_probs: &[[f64; 2]]) -> Result<f64> {
    geometric_aggregate(patch_probs, "patch probabilities")
}

//! Dual inverse-propensity weighting of the CTR loss and the joint
//! objective.
//!
//! Portal-only user-days are weighted by `1 / (1 - y_hat_p)`, block-click
//! user-days by `1 / y_hat_b`; both are clipped. Intent estimates enter as
//! plain numbers, so no gradient reaches the intent model through the
//! weights.

use crate::error::{Error, Result};
use crate::graph::bce_term;
use crate::sampling::Cohort;
use crate::world::ExposureRecord;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClipRange {
    pub lo: f64,
    pub hi: f64,
}

impl ClipRange {
    pub const DEFAULT: ClipRange = ClipRange { lo: 1.0, hi: 15.0 };

    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        if !(lo >= 1.0 && lo <= hi) || lo.is_nan() || hi.is_nan() {
            return Err(Error::Config(format!(
                "clip range must satisfy 1 <= clip_lo <= clip_hi, got [{lo}, {hi}]"
            )));
        }
        Ok(Self { lo, hi })
    }

    pub fn apply(self, w: f64) -> f64 {
        w.clamp(self.lo, self.hi)
    }
}

impl Default for ClipRange {
    fn default() -> Self {
        Self::DEFAULT
    }
}

/// Unclipped inverse-propensity weight of a cohort.
pub fn raw_weight(cohort: Cohort, y_hat_p: f64, y_hat_b: f64) -> f64 {
    match cohort {
        Cohort::Portal => 1.0 / (1.0 - y_hat_p),
        Cohort::Block => 1.0 / y_hat_b,
    }
}

pub fn debias_weight(cohort: Cohort, y_hat_p: f64, y_hat_b: f64, clip: ClipRange) -> f64 {
    let w = raw_weight(cohort, y_hat_p, y_hat_b);
    // 1/0 is +inf and clamps to clip.hi; NaN only arises from NaN input.
    if w.is_nan() {
        clip.hi
    } else {
        clip.apply(w)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WeightedSample<'a> {
    pub record: &'a ExposureRecord,
    pub weight: f64,
    pub cohort: Cohort,
}

/// `(1/|batch|) * sum w * bce(y, y_hat)` in batch order.
pub fn ctr_debias_loss(batch: &[WeightedSample<'_>], predictions: &[f64]) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch("ctr batch"));
    }
    if batch.len() != predictions.len() {
        return Err(Error::Input(format!(
            "{} samples for {} predictions",
            batch.len(),
            predictions.len()
        )));
    }
    let total: f64 = batch
        .iter()
        .zip(predictions)
        .map(|(s, &p)| s.weight * bce_term(s.record.label as f64, p))
        .sum();
    Ok(total / batch.len() as f64)
}

/// `L'_CTR + alpha * L_portal + beta * L_block`.
pub fn final_loss(l_ctr: f64, l_portal: f64, l_block: f64, alpha: f64, beta: f64) -> f64 {
    l_ctr + alpha * l_portal + beta * l_block
}

/// Horvitz-Thompson estimate of a population total from a Bernoulli sample.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IpsEstimate {
    /// Estimated population mean.
    pub mean: f64,
    /// Estimated standard error of `mean`.
    pub std_error: f64,
}

/// Estimates the mean of `value` over a population of `population` units
/// from the sampled units only, each given as `(value, inclusion
/// propensity)`.
pub fn ips_mean(sampled: &[(f64, f64)], population: usize) -> Result<IpsEstimate> {
    if population == 0 {
        return Err(Error::Input("population must be non-empty".into()));
    }
    let mut total = 0.0;
    let mut var = 0.0;
    for &(v, pi) in sampled {
        if !(pi > 0.0 && pi <= 1.0) {
            return Err(Error::Input(format!("inclusion propensity {pi} not in (0, 1]")));
        }
        total += v / pi;
        var += (1.0 - pi) * (v / pi).powi(2);
    }
    let n = population as f64;
    Ok(IpsEstimate {
        mean: total / n,
        std_error: var.sqrt() / n,
    })
}

//! Uncertainty-driven sensing: predictive entropy, the clipped adaptive
//! budget, the sensing-cost penalty, and the feedback-loop stability gain.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sensing::{sample_complexity, INT_GUARD};

/// Budget-controller parameters. Entropy is always measured in nats.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControllerConfig {
    pub m_base: usize,
    pub gamma: f64,
    pub m_min: usize,
    pub m_max: usize,
    pub beta_m: f64,
    #[serde(rename = "rho")]
    pub rho_exponent: f64,
}

impl ControllerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.m_min == 0 || !(self.m_min <= self.m_base && self.m_base <= self.m_max) {
            return Err(Error::invalid("controller requires 1 <= m_min <= m_base <= m_max"));
        }
        if self.gamma < 0.0 || self.beta_m < 0.0 {
            return Err(Error::invalid("gamma and beta_m must be nonnegative"));
        }
        if self.rho_exponent < 1.0 {
            return Err(Error::invalid("cost exponent rho must be >= 1"));
        }
        Ok(())
    }
}

/// Loop-gain report for the sensing feedback loop. The loop contracts when
/// the gain is strictly below one; exactly one is classified unstable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityReport {
    pub gain: f64,
    pub stable: bool,
    pub components: GainComponents,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GainComponents {
    pub gamma: f64,
    pub l_h: f64,
    pub m_base: usize,
    pub dg_dm: f64,
}

/// Shannon entropy of a probability vector, in nats, with 0·ln 0 = 0.
///
/// Sums within 1e-9 of one are accepted as-is, deviations up to 1e-6 are
/// renormalized, anything worse is rejected.
pub fn predictive_entropy(p: &[f64]) -> Result<f64> {
    if p.is_empty() {
        return Err(Error::invalid("probability vector is empty"));
    }
    if p.iter().any(|&v| v < 0.0 || !v.is_finite()) {
        return Err(Error::invalid("probabilities must be finite and nonnegative"));
    }
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > 1e-6 {
        return Err(Error::invalid(format!("probabilities sum to {sum}, expected 1")));
    }
    let scale = if (sum - 1.0).abs() > 1e-9 { 1.0 / sum } else { 1.0 };
    let h = -p
        .iter()
        .map(|&v| {
            let q = v * scale;
            if q > 0.0 {
                q * q.ln()
            } else {
                0.0
            }
        })
        .sum::<f64>();
    Ok(h.max(0.0))
}

/// Adaptive measurement budget: `clip(⌊m_base (1 + γH)⌋, m_min, m_max)`.
pub fn adapt_budget(entropy: f64, config: &ControllerConfig) -> usize {
    let raw = config.m_base as f64 * (1.0 + config.gamma * entropy);
    let floored = (raw + INT_GUARD).floor().max(0.0) as usize;
    floored.clamp(config.m_min, config.m_max)
}

/// Sensing-resource penalty `Θ(m) = β_m mᵖ`.
pub fn sensing_cost(m: usize, config: &ControllerConfig) -> f64 {
    config.beta_m * (m as f64).powf(config.rho_exponent)
}

/// The loop gain `|γ L_H m_base ∂G/∂m|` and its verdict.
pub fn stability_gain(gamma: f64, l_h: f64, m_base: usize, dg_dm: f64) -> StabilityReport {
    if dg_dm > 0.0 {
        log::warn!("stability_gain called with positive error-curve slope {dg_dm}");
    }
    let gain = (gamma * l_h * m_base as f64 * dg_dm).abs();
    StabilityReport {
        gain,
        stable: gain < 1.0,
        components: GainComponents { gamma, l_h, m_base, dg_dm },
    }
}

/// Whether a realized budget stays above the sample-complexity threshold.
pub fn budget_admissible(
    m_t: usize,
    k_t: usize,
    g: usize,
    family_size: usize,
    rho: f64,
    c: f64,
    delta: f64,
) -> Result<bool> {
    Ok(m_t >= sample_complexity(k_t, g, family_size, rho, c, delta)?)
}

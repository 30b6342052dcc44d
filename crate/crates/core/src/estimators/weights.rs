use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats::normal_interval_prob;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightMode {
    /// `exp(ll)`, the density itself.
    Pdf,
    /// `exp(ll)` clamped into `[clip_lo, clip_hi]`.
    ExpClipped,
    /// `Π_j P(a_j − β < X_j ≤ a_j + β)` for `X ~ N(μ, σ²)`.
    CdfWindow,
}

/// Where the clip bounds of [`WeightMode::ExpClipped`] apply.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClipScale {
    /// Clamp the exponentiated likelihood (a probability-scale weight).
    #[default]
    Probability,
    /// Clamp the log-likelihood, then exponentiate.
    LogLikelihood,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightConfig {
    pub mode: WeightMode,
    #[serde(default = "default_clip_lo")]
    pub clip_lo: f64,
    #[serde(default = "default_clip_hi")]
    pub clip_hi: f64,
    /// Half-width of the CDF window.
    #[serde(default = "default_beta")]
    pub beta: f64,
    /// Upper cap on each per-step ratio; `None` disables truncation.
    #[serde(default)]
    pub per_step_cap: Option<f64>,
    #[serde(default)]
    pub clip_scale: ClipScale,
}

fn default_clip_lo() -> f64 {
    0.05
}
fn default_clip_hi() -> f64 {
    0.995
}
fn default_beta() -> f64 {
    0.1
}

impl Default for WeightConfig {
    fn default() -> Self {
        WeightConfig::pdf()
    }
}

impl WeightConfig {
    pub fn pdf() -> Self {
        WeightConfig {
            mode: WeightMode::Pdf,
            clip_lo: default_clip_lo(),
            clip_hi: default_clip_hi(),
            beta: default_beta(),
            per_step_cap: None,
            clip_scale: ClipScale::Probability,
        }
    }

    pub fn exp_clipped() -> Self {
        WeightConfig {
            mode: WeightMode::ExpClipped,
            ..Self::pdf()
        }
    }

    pub fn cdf_window(beta: f64) -> Self {
        WeightConfig {
            mode: WeightMode::CdfWindow,
            beta,
            ..Self::pdf()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.clip_lo && self.clip_lo < self.clip_hi && self.clip_hi <= 1.0) {
            return Err(Error::invalid(format!(
                "clip bounds need 0 < lo < hi <= 1, got [{}, {}]",
                self.clip_lo, self.clip_hi
            )));
        }
        if self.mode == WeightMode::CdfWindow && !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::invalid(format!("cdf window half-width {} must be positive", self.beta)));
        }
        if let Some(cap) = self.per_step_cap {
            if !(cap > 0.0) {
                return Err(Error::invalid(format!("per-step ratio cap {cap} must be positive")));
            }
        }
        Ok(())
    }
}

/// Likelihood weight of one step under `cfg`.
///
/// `mean`/`std` are the Gaussian moments at that step and are only read in
/// [`WeightMode::CdfWindow`]; pass empty slices for discrete policies.
pub fn weight_transform(log_likelihood: f64, mean: &[f64], std: &[f64], action: &[f64], cfg: &WeightConfig) -> f64 {
    match cfg.mode {
        WeightMode::Pdf => log_likelihood.exp(),
        WeightMode::ExpClipped => match cfg.clip_scale {
            ClipScale::Probability => log_likelihood.exp().clamp(cfg.clip_lo, cfg.clip_hi),
            ClipScale::LogLikelihood => log_likelihood.clamp(cfg.clip_lo, cfg.clip_hi).exp(),
        },
        WeightMode::CdfWindow => mean
            .iter()
            .zip(std)
            .zip(action)
            .map(|((m, s), a)| normal_interval_prob((a - cfg.beta - m) / s, (a + cfg.beta - m) / s))
            .product(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clipped_floor_and_window_mass() {
        let cfg = WeightConfig::exp_clipped();
        assert_eq!(weight_transform(-100.0, &[], &[], &[], &cfg), 0.05);
        assert_eq!(weight_transform(3.0, &[], &[], &[], &cfg), 0.995);
        let w = weight_transform(0.0, &[0.4], &[0.7], &[0.4], &WeightConfig::cdf_window(0.7));
        assert!((w - 0.682_689_492_137_086).abs() < 1e-12);
    }

    #[test]
    fn clip_inactive_matches_pdf() {
        for ll in [-2.99, -1.0, -0.1, -0.006] {
            let a = weight_transform(ll, &[], &[], &[], &WeightConfig::pdf());
            let b = weight_transform(ll, &[], &[], &[], &WeightConfig::exp_clipped());
            assert_eq!(a, b);
        }
    }

    #[test]
    fn validation_rejects_bad_bounds() {
        let mut c = WeightConfig::exp_clipped();
        c.clip_lo = 0.9;
        c.clip_hi = 0.5;
        assert!(c.validate().is_err());
        assert!(WeightConfig::cdf_window(0.0).validate().is_err());
        assert!(WeightConfig::cdf_window(0.2).validate().is_ok());
    }
}

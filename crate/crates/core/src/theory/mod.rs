//! Exact oracles and the score/Fisher machinery behind the variance-reduction
//! identity: tabular MDPs with DP and enumeration values, finite-difference
//! gradient checks, Fisher matrices, score-space projections and variance
//! studies on a Gaussian bandit.

mod fisher;
mod mdp;
mod variance;

pub use fisher::{fisher_eta, fisher_xi, outer_product_mean, projection_terms, trajectory_scores, Projections, ScoreSet};
pub use mdp::{enumeration_value, exact_policy_value, FiniteMDP, ENUMERATION_LIMIT};
pub use variance::{
    feature_correlation, variance_decomposition_check, variance_study, BanditFeatures, DecompositionReport,
    GaussianBanditFamily, ReplicateEstimates, ReplicateRow, VarianceStudyConfig, VarianceStudyReport,
};

/// Default central-difference step.
pub const FD_STEP: f64 = 1e-5;

/// Largest per-coordinate discrepancy between `analytic` and the central
/// difference of `f` at `point`, measured as `|a − n| / max(|a|, |n|, 1)`.
pub fn finite_difference_check<F>(mut f: F, point: &[f64], analytic: &[f64], step: f64) -> f64
where
    F: FnMut(&[f64]) -> f64,
{
    assert_eq!(point.len(), analytic.len(), "gradient length must match the point");
    let mut x = point.to_vec();
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + step;
        let up = f(&x);
        x[i] = orig - step;
        let dn = f(&x);
        x[i] = orig;
        let numeric = (up - dn) / (2.0 * step);
        let a = analytic[i];
        let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1.0);
        if err.is_nan() {
            return f64::INFINITY;
        }
        worst = worst.max(err);
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::GaussianPolicy;

    #[test]
    fn quadratic_is_exact_and_corruption_is_detected() {
        let x = [0.3, -1.2, 2.5];
        let norm = |p: &[f64]| 0.5 * p.iter().map(|v| v * v).sum::<f64>();
        assert!(finite_difference_check(norm, &x, &x, FD_STEP) <= 1e-8);
        let mut bad = x.to_vec();
        bad[1] += 0.1;
        assert!(finite_difference_check(norm, &x, &bad, FD_STEP) >= 0.01);
    }

    #[test]
    fn gaussian_mean_score_passes() {
        let mu = [0.4];
        let lp = |m: &[f64]| GaussianPolicy::fixed(m.to_vec(), vec![0.6]).unwrap().log_prob(&[], &[1.1]).unwrap();
        let g = GaussianPolicy::fixed(mu.to_vec(), vec![0.6]).unwrap().score(&[], &[1.1]).unwrap();
        assert!(finite_difference_check(lp, &mu, &g, FD_STEP) <= 1e-5);
    }
}

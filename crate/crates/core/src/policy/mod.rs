//! Stochastic policies with exact log-densities and parameter scores.

mod categorical;
mod checkpoint;
mod gaussian;
mod sequence;

pub use categorical::{decode_index, CategoricalPolicy};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use gaussian::{fit_behavior_mle, gaussian_entropy, FitReport, GaussianConfig, GaussianPolicy, PolicyInput, StdMode};
pub use sequence::{
    joint_objective, sequence_forward, target_policy_estimate, Conditioning, SequenceConfig,
    SequencePolicyModel, TargetPolicyEstimate, Token, TokenWindow, MSE_EMA_DECAY,
};

use crate::error::Result;
use crate::trajectory::Trajectory;

/// Standard-deviation floor shared by behavior and target estimators.
pub const SIGMA_MIN: f64 = 1e-3;
/// `SIGMA_MIN²`.
pub const VARIANCE_FLOOR: f64 = 1e-6;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Mean and per-dimension standard deviation of a diagonal Gaussian.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMoments {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Likelihood of the recorded action at one step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepDensity {
    pub log_prob: f64,
    /// Present for continuous Gaussian policies; discrete policies carry a mass only.
    pub gaussian: Option<GaussianMoments>,
}

/// A policy that can score the actions recorded in a trajectory.
pub trait TrajectoryPolicy: Sync {
    /// One density per step of `traj`, evaluated at the recorded action.
    fn step_densities(&self, traj: &Trajectory) -> Result<Vec<StepDensity>>;
}

/// A policy whose log-density is differentiable in a flat parameter vector.
pub trait ScorePolicy: TrajectoryPolicy {
    fn num_params(&self) -> usize;

    /// `Σ_t weights[t] · ∇ log π(a_t | context_t)` over the steps of `traj`.
    fn weighted_score(&self, traj: &Trajectory, weights: &[f64]) -> Result<Vec<f64>>;

    /// Per-step scores `g_t`; the default runs one weighted pass per step.
    fn step_scores(&self, traj: &Trajectory) -> Result<Vec<Vec<f64>>> {
        let mut w = vec![0.0; traj.len()];
        (0..traj.len())
            .map(|t| {
                w.iter_mut().for_each(|v| *v = 0.0);
                w[t] = 1.0;
                self.weighted_score(traj, &w)
            })
            .collect()
    }
}

/// Diagonal Gaussian log-density `Σ_j −½ log(2πσ_j²) − (a_j − μ_j)² / (2σ_j²)`.
pub fn gaussian_log_density(mean: &[f64], std: &[f64], action: &[f64]) -> f64 {
    mean.iter()
        .zip(std)
        .zip(action)
        .map(|((m, s), a)| {
            let z = (a - m) / s;
            -0.5 * LN_2PI - s.ln() - 0.5 * z * z
        })
        .sum()
}

/// Differential entropy `½ Σ_j log(2πe σ_j²)`.
pub fn gaussian_entropy_of_std(std: &[f64]) -> f64 {
    std.iter().map(|s| 0.5 * (LN_2PI + 1.0) + s.ln()).sum()
}

pub(crate) fn check_score(grad: &[f64], what: &str) -> Result<()> {
    if let Some(index) = grad.iter().position(|g| !g.is_finite()) {
        return Err(crate::error::Error::Numeric {
            index,
            context: what.to_string(),
        });
    }
    Ok(())
}

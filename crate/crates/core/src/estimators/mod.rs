//! Density ratios, ordinary importance sampling, and double policy estimation.

mod baseline;
mod weights;

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use baseline::{fit_baseline, BaselineModel, FeatureMap};
pub use weights::{weight_transform, ClipScale, WeightConfig, WeightMode};

use crate::error::{Error, Result};
use crate::optim::l2_norm;
use crate::policy::{ScorePolicy, StepDensity, TrajectoryPolicy};
use crate::stats::covariance_trace;
use crate::trajectory::{discounted_return, Trajectory, TrajectoryDataset};

/// `ln f64::MIN_POSITIVE`: log-likelihoods below this make a pdf weight vanish.
const LN_MIN_POSITIVE: f64 = -708.396_418_532_264_1;

/// Which sample form of the policy gradient to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum GradientForm {
    /// Whole-trajectory weight times the summed scores.
    Episode,
    /// Per-step cumulative weight times the per-step score.
    #[default]
    Stepwise,
}

/// Per-step ratios `v_k` and their running products `ν_{0:t}`.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityRatioSeries {
    pub per_step: Vec<f64>,
    pub cumulative: Vec<f64>,
}

impl DensityRatioSeries {
    pub fn total(&self) -> f64 {
        *self.cumulative.last().expect("series is non-empty")
    }
}

fn step_weight(d: &StepDensity, action: &[f64], cfg: &WeightConfig) -> f64 {
    let (mean, std) = d
        .gaussian
        .as_ref()
        .map_or((&[][..], &[][..]), |g| (g.mean.as_slice(), g.std.as_slice()));
    weight_transform(d.log_prob, mean, std, action, cfg)
}

/// Ratios from precomputed step densities.
pub fn ratio_series_from_densities(
    num: &[StepDensity],
    den: &[StepDensity],
    traj: &Trajectory,
    cfg: &WeightConfig,
) -> Result<DensityRatioSeries> {
    if num.len() != traj.len() || den.len() != traj.len() {
        return Err(Error::shape("one density per trajectory step required"));
    }
    if cfg.mode == WeightMode::CdfWindow && (num.iter().chain(den).any(|d| d.gaussian.is_none())) {
        return Err(Error::invalid("cdf window weights need Gaussian policies"));
    }
    let mut per_step = Vec::with_capacity(traj.len());
    let mut cumulative = Vec::with_capacity(traj.len());
    let mut acc = 1.0;
    for (t, (n, d)) in num.iter().zip(den).enumerate() {
        let v = match cfg.mode {
            WeightMode::Pdf => {
                if !(d.log_prob >= LN_MIN_POSITIVE) {
                    return Err(Error::DegenerateRatio { step: t, trajectory: None });
                }
                (n.log_prob - d.log_prob).exp()
            }
            _ => {
                let wd = step_weight(d, traj.action(t), cfg);
                if !(wd >= f64::MIN_POSITIVE) {
                    return Err(Error::DegenerateRatio { step: t, trajectory: None });
                }
                step_weight(n, traj.action(t), cfg) / wd
            }
        };
        let v = cfg.per_step_cap.map_or(v, |cap| v.min(cap));
        acc *= v;
        if !(v > 0.0 && v.is_finite() && acc > 0.0 && acc.is_finite()) {
            return Err(Error::DegenerateRatio { step: t, trajectory: None });
        }
        per_step.push(v);
        cumulative.push(acc);
    }
    Ok(DensityRatioSeries { per_step, cumulative })
}

/// `v_k = w_num(k) / w_den(k)` with both weights from the same transform.
pub fn density_ratio_series(
    num: &dyn TrajectoryPolicy,
    den: &dyn TrajectoryPolicy,
    traj: &Trajectory,
    cfg: &WeightConfig,
) -> Result<DensityRatioSeries> {
    cfg.validate()?;
    ratio_series_from_densities(&num.step_densities(traj)?, &den.step_densities(traj)?, traj, cfg)
}

fn tag_trajectory(e: Error, i: usize) -> Error {
    match e {
        Error::DegenerateRatio { step, .. } => Error::DegenerateRatio { step, trajectory: Some(i) },
        other => other,
    }
}

/// Mean gradient with its per-trajectory terms.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientEstimate {
    pub gradient: Vec<f64>,
    pub per_trajectory: Vec<Vec<f64>>,
    /// `tr Cov(μ_i) / m`.
    pub sample_variance: f64,
    /// Whole-trajectory ratio `ν_{0:H}` of each trajectory.
    pub ratios: Vec<f64>,
    /// `q_{0:H} − b_0` of each trajectory.
    pub q_minus_b: Vec<f64>,
}

impl GradientEstimate {
    fn from_terms(terms: Vec<(Vec<f64>, f64, f64)>, dim: usize) -> Self {
        let m = terms.len();
        let mut gradient = vec![0.0; dim];
        for (mu, _, _) in &terms {
            for (g, v) in gradient.iter_mut().zip(mu) {
                *g += v;
            }
        }
        gradient.iter_mut().for_each(|g| *g /= m as f64);
        let mut per_trajectory = Vec::with_capacity(m);
        let mut ratios = Vec::with_capacity(m);
        let mut q_minus_b = Vec::with_capacity(m);
        for (mu, r, q) in terms {
            per_trajectory.push(mu);
            ratios.push(r);
            q_minus_b.push(q);
        }
        let sample_variance = covariance_trace(&per_trajectory) / m as f64;
        GradientEstimate {
            gradient,
            per_trajectory,
            sample_variance,
            ratios,
            q_minus_b,
        }
    }

    /// One row per trajectory (`index, norm, ratio, q_minus_b[, mu_j…]`) followed
    /// by a `mean` summary row holding the gradient.
    pub fn to_csv(&self, include_coords: bool) -> String {
        let dim = self.gradient.len();
        let mut out = String::from("index,norm,ratio,q_minus_b");
        if include_coords {
            for j in 0..dim {
                let _ = write!(out, ",mu_{j}");
            }
        }
        out.push('\n');
        for (i, mu) in self.per_trajectory.iter().enumerate() {
            let _ = write!(out, "{i},{},{},{}", l2_norm(mu), self.ratios[i], self.q_minus_b[i]);
            if include_coords {
                for v in mu {
                    let _ = write!(out, ",{v}");
                }
            }
            out.push('\n');
        }
        let mean_ratio = self.ratios.iter().sum::<f64>() / self.ratios.len() as f64;
        let mean_q = self.q_minus_b.iter().sum::<f64>() / self.q_minus_b.len() as f64;
        let _ = write!(out, "mean,{},{mean_ratio},{mean_q}", l2_norm(&self.gradient));
        if include_coords {
            for v in &self.gradient {
                let _ = write!(out, ",{v}");
            }
        }
        out.push('\n');
        out
    }
}

fn check_nonempty(ds: &TrajectoryDataset) -> Result<()> {
    if ds.is_empty() {
        return Err(Error::invalid("estimator needs at least one trajectory"));
    }
    Ok(())
}

/// Cumulative true-density ratios `exp(Σ_{k≤t} (log π_e − log π_b))`.
fn log_space_cumulative(pi_e: &dyn TrajectoryPolicy, pi_b: &dyn TrajectoryPolicy, traj: &Trajectory) -> Result<Vec<f64>> {
    let e = pi_e.step_densities(traj)?;
    let b = pi_b.step_densities(traj)?;
    let mut acc = 0.0;
    let mut out = Vec::with_capacity(traj.len());
    for (t, (de, db)) in e.iter().zip(&b).enumerate() {
        if !(db.log_prob >= LN_MIN_POSITIVE) {
            return Err(Error::DegenerateRatio { step: t, trajectory: None });
        }
        acc += de.log_prob - db.log_prob;
        let nu = acc.exp();
        if !(nu > 0.0 && nu.is_finite()) {
            return Err(Error::DegenerateRatio { step: t, trajectory: None });
        }
        out.push(nu);
    }
    Ok(out)
}

/// Per-trajectory OIS terms `G(ω_i) Π_t π_e / π_b` with `G` the discounted return.
pub fn ois_terms(ds: &TrajectoryDataset, pi_e: &dyn TrajectoryPolicy, pi_b: &dyn TrajectoryPolicy) -> Result<Vec<f64>> {
    check_nonempty(ds)?;
    ds.trajectories()
        .par_iter()
        .enumerate()
        .map(|(i, traj)| {
            let nu = log_space_cumulative(pi_e, pi_b, traj).map_err(|e| tag_trajectory(e, i))?;
            Ok(discounted_return(traj, ds.discount())? * nu[nu.len() - 1])
        })
        .collect()
}

/// `(1/m) Σ_i G(ω_i) Π_t π_e / π_b`.
pub fn ois_value(ds: &TrajectoryDataset, pi_e: &dyn TrajectoryPolicy, pi_b: &dyn TrajectoryPolicy) -> Result<f64> {
    let terms = ois_terms(ds, pi_e, pi_b)?;
    Ok(terms.iter().sum::<f64>() / ds.len() as f64)
}

/// Policy gradient under ordinary importance sampling with the true behavior density.
pub fn ois_gradient(
    ds: &TrajectoryDataset,
    pi_e: &dyn ScorePolicy,
    pi_b: &dyn TrajectoryPolicy,
    form: GradientForm,
) -> Result<GradientEstimate> {
    check_nonempty(ds)?;
    let terms = ds
        .trajectories()
        .par_iter()
        .enumerate()
        .map(|(i, traj)| {
            let nu = log_space_cumulative(pi_e, pi_b, traj).map_err(|e| tag_trajectory(e, i))?;
            let q = traj.returns_to_go();
            let h = traj.len() - 1;
            let w: Vec<f64> = match form {
                GradientForm::Episode => vec![nu[h] * q[0]; traj.len()],
                GradientForm::Stepwise => nu.iter().zip(&q).map(|(n, q)| n * q).collect(),
            };
            Ok((pi_e.weighted_score(traj, &w)?, nu[h], q[0]))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(GradientEstimate::from_terms(terms, pi_e.num_params()))
}

/// Per-step coefficients `c_t` of one trajectory's DPE term
/// `μ = Σ_t c_t ∇ log π̂_t(a_t)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DpeStepWeights {
    pub coefficients: Vec<f64>,
    pub ratios: DensityRatioSeries,
    pub q_minus_b: Vec<f64>,
}

/// From precomputed target/behavior densities, the DPE coefficients for `traj`.
pub fn dpe_step_weights_from_densities(
    traj: &Trajectory,
    target: &[StepDensity],
    behavior: &[StepDensity],
    baseline: &BaselineModel,
    form: GradientForm,
    cfg: &WeightConfig,
) -> Result<DpeStepWeights> {
    let ratios = ratio_series_from_densities(target, behavior, traj, cfg)?;
    let q = traj.returns_to_go();
    let b = baseline.predict_trajectory(traj);
    let q_minus_b: Vec<f64> = q.iter().zip(&b).map(|(q, b)| q - b).collect();
    let h = traj.len() - 1;
    let coefficients = match form {
        GradientForm::Episode => vec![q_minus_b[0] * ratios.cumulative[h]; traj.len()],
        GradientForm::Stepwise => q_minus_b.iter().zip(&ratios.cumulative).map(|(a, n)| a * n).collect(),
    };
    Ok(DpeStepWeights {
        coefficients,
        ratios,
        q_minus_b,
    })
}

pub fn dpe_step_weights(
    traj: &Trajectory,
    target: &dyn TrajectoryPolicy,
    behavior: &dyn TrajectoryPolicy,
    baseline: &BaselineModel,
    form: GradientForm,
    cfg: &WeightConfig,
) -> Result<DpeStepWeights> {
    dpe_step_weights_from_densities(
        traj,
        &target.step_densities(traj)?,
        &behavior.step_densities(traj)?,
        baseline,
        form,
        cfg,
    )
}

/// DPE policy gradient with estimated target and behavior densities and a
/// fitted baseline.
pub fn dpe_gradient(
    ds: &TrajectoryDataset,
    target: &dyn ScorePolicy,
    behavior: &dyn TrajectoryPolicy,
    baseline: &BaselineModel,
    form: GradientForm,
    cfg: &WeightConfig,
) -> Result<GradientEstimate> {
    check_nonempty(ds)?;
    cfg.validate()?;
    let terms = ds
        .trajectories()
        .par_iter()
        .enumerate()
        .map(|(i, traj)| {
            let w = dpe_step_weights(traj, target, behavior, baseline, form, cfg).map_err(|e| tag_trajectory(e, i))?;
            let mu = target.weighted_score(traj, &w.coefficients)?;
            Ok((mu, w.ratios.total(), w.q_minus_b[0]))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(GradientEstimate::from_terms(terms, target.num_params()))
}

/// `(1/m) Σ_i q_{0:H}(ω_i) Π_t ŵ_t / ŵ_b`.
pub fn dpe_value_ratio(
    ds: &TrajectoryDataset,
    target: &dyn TrajectoryPolicy,
    behavior: &dyn TrajectoryPolicy,
    cfg: &WeightConfig,
) -> Result<f64> {
    check_nonempty(ds)?;
    cfg.validate()?;
    let terms: Vec<f64> = ds
        .trajectories()
        .par_iter()
        .enumerate()
        .map(|(i, traj)| {
            let r = density_ratio_series(target, behavior, traj, cfg).map_err(|e| tag_trajectory(e, i))?;
            Ok(traj.returns_to_go()[0] * r.total())
        })
        .collect::<Result<_>>()?;
    Ok(terms.iter().sum::<f64>() / ds.len() as f64)
}

use std::fmt::Write as _;

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::fisher::{projection_terms, trajectory_scores, ScoreSet};
use crate::error::{Error, Result};
use crate::estimators::{dpe_gradient, fit_baseline, ois_gradient, BaselineModel, FeatureMap, GradientForm, WeightConfig};
use crate::policy::{fit_behavior_mle, GaussianConfig, GaussianPolicy, StdMode};
use crate::rng::stream_rng;
use crate::stats::{bootstrap_ci, covariance_trace, sample_variance, ConfidenceInterval};
use crate::trajectory::{Trajectory, TrajectoryDataset};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BanditFeatures {
    /// `[1]`.
    Constant,
    /// `[1, s]`.
    State,
}

/// One-step Gaussian bandit: context `s ~ N(0, 1)`, behavior action
/// `a ~ N(η₀, σ_b²)` independent of `s`, reward
/// `r = c·s − (a − a*)² + ε` with `ε ~ N(0, σ_ε²)`.
///
/// The target policy is `N(θ, σ_e²)` with parameters `(θ, log σ_e)`; the
/// behavior estimator is the location family with `σ_b` known.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GaussianBanditFamily {
    #[serde(default)]
    pub behavior_mean: f64,
    #[serde(default = "one")]
    pub behavior_std: f64,
    #[serde(default = "half")]
    pub target_mean: f64,
    #[serde(default = "one")]
    pub target_std: f64,
    #[serde(default = "six")]
    pub state_coef: f64,
    #[serde(default = "one")]
    pub action_optimum: f64,
    #[serde(default = "half")]
    pub noise_std: f64,
    #[serde(default = "state_features")]
    pub features: BanditFeatures,
}

fn one() -> f64 {
    1.0
}
fn half() -> f64 {
    0.5
}
fn six() -> f64 {
    6.0
}
fn state_features() -> BanditFeatures {
    BanditFeatures::State
}

impl Default for GaussianBanditFamily {
    fn default() -> Self {
        GaussianBanditFamily {
            behavior_mean: 0.0,
            behavior_std: 1.0,
            target_mean: 0.5,
            target_std: 1.0,
            state_coef: 6.0,
            action_optimum: 1.0,
            noise_std: 0.5,
            features: BanditFeatures::State,
        }
    }
}

impl GaussianBanditFamily {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("behavior_std", self.behavior_std),
            ("target_std", self.target_std),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!("{name} must be positive")));
            }
        }
        if !(self.noise_std >= 0.0) {
            return Err(Error::invalid("noise_std must be non-negative"));
        }
        Ok(())
    }

    pub fn feature_map(&self) -> FeatureMap {
        match self.features {
            BanditFeatures::Constant => FeatureMap::Constant,
            BanditFeatures::State => FeatureMap::State,
        }
    }

    pub fn true_behavior(&self) -> Result<GaussianPolicy> {
        GaussianPolicy::fixed(vec![self.behavior_mean], vec![self.behavior_std])
    }

    pub fn target(&self) -> Result<GaussianPolicy> {
        GaussianPolicy::constant_learned(vec![self.target_mean], &[self.target_std])
    }

    pub fn behavior_config(&self) -> GaussianConfig {
        GaussianConfig::constant(
            1,
            StdMode::Fixed {
                std: vec![self.behavior_std],
            },
        )
    }

    pub fn generate<R: Rng>(&self, n: usize, rng: &mut R) -> Result<TrajectoryDataset> {
        self.validate()?;
        let act = Normal::new(self.behavior_mean, self.behavior_std).expect("validated std");
        let trajs = (0..n)
            .map(|_| {
                let s: f64 = StandardNormal.sample(rng);
                let a = act.sample(rng);
                let eps: f64 = StandardNormal.sample(rng);
                let d = a - self.action_optimum;
                let r = self.state_coef * s - d * d + self.noise_std * eps;
                Trajectory::new(vec![vec![s]], vec![vec![a]], vec![r])
            })
            .collect::<Result<Vec<_>>>()?;
        TrajectoryDataset::with_dims(trajs, 1, 1, 1.0, 0, Some("gaussian_bandit".into()))
    }

    /// Location MLE of the behavior policy (σ_b known).
    pub fn fit_behavior(&self, ds: &TrajectoryDataset, seed: u64) -> Result<GaussianPolicy> {
        Ok(fit_behavior_mle(ds, self.behavior_config(), 100, seed)?.0)
    }
}

/// Multiple correlation of the returns-to-go with the baseline features.
pub fn feature_correlation(ds: &TrajectoryDataset, baseline: &BaselineModel) -> f64 {
    let q: Vec<f64> = ds.trajectories().iter().flat_map(|t| t.returns_to_go()).collect();
    let mean = q.iter().sum::<f64>() / q.len() as f64;
    let sst: f64 = q.iter().map(|v| (v - mean) * (v - mean)).sum();
    let sse = baseline.mse(ds) * q.len() as f64;
    if sst == 0.0 {
        return 0.0;
    }
    (1.0 - sse / sst).max(0.0).sqrt()
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecompositionReport {
    pub n: usize,
    pub seed: u64,
    pub var_mu: f64,
    pub var_va: f64,
    pub var_vb: f64,
    pub var_residual: f64,
    /// `|var_mu − var_VA − var_VB − var_residual| / var_mu`.
    pub relative_gap: f64,
    pub feature_correlation: f64,
    /// `(1/m) Σ S_η S_ξᵀ`, row-major.
    pub cross_moment: Vec<f64>,
    /// Standard errors of the `cross_moment` entries.
    pub cross_moment_se: Vec<f64>,
    pub pinv_used: bool,
}

impl DecompositionReport {
    pub fn to_csv(&self) -> String {
        format!(
            "n,seed,var_mu,var_va,var_vb,var_residual,relative_gap,feature_correlation,pinv_used\n{},{},{},{},{},{},{},{},{}\n",
            self.n,
            self.seed,
            self.var_mu,
            self.var_va,
            self.var_vb,
            self.var_residual,
            self.relative_gap,
            self.feature_correlation,
            self.pinv_used
        )
    }
}

/// Empirical check of `var(μ) = var(V_A) + var(V_B) + var(μ − V_A − V_B)` on `n`
/// bandit samples, with `μ_i` the OIS gradient terms, `S_η` the scores of the
/// fitted behavior location and `S_ξ` the baseline features.
pub fn variance_decomposition_check(family: &GaussianBanditFamily, n: usize, seed: u64) -> Result<DecompositionReport> {
    let mut rng = stream_rng(seed, 0);
    let ds = family.generate(n, &mut rng)?;
    let target = family.target()?;
    let truth = family.true_behavior()?;
    let fitted = family.fit_behavior(&ds, seed)?;
    let mu = ois_gradient(&ds, &target, &truth, GradientForm::Episode)?.per_trajectory;
    let s_eta = trajectory_scores(&ds, &fitted)?;
    let fm = family.feature_map();
    let s_xi: Vec<Vec<f64>> = ds.trajectories().iter().map(|t| fm.features(t.state(0), 0)).collect();
    let baseline = fit_baseline(&ds, fm, None)?;

    let (de, dx) = (s_eta[0].len(), s_xi[0].len());
    let mut cross_moment = Vec::with_capacity(de * dx);
    let mut cross_moment_se = Vec::with_capacity(de * dx);
    for a in 0..de {
        for b in 0..dx {
            let prod: Vec<f64> = s_eta.iter().zip(&s_xi).map(|(e, x)| e[a] * x[b]).collect();
            cross_moment.push(prod.iter().sum::<f64>() / n as f64);
            cross_moment_se.push((sample_variance(&prod) / n as f64).sqrt());
        }
    }

    let scores = ScoreSet { s_eta, s_xi, mu };
    let proj = projection_terms(&scores, true)?;
    let resid = proj.residual(&scores.mu);
    let var_mu = covariance_trace(&scores.mu);
    let var_va = covariance_trace(&proj.v_a);
    let var_vb = covariance_trace(&proj.v_b);
    let var_residual = covariance_trace(&resid);
    Ok(DecompositionReport {
        n,
        seed,
        var_mu,
        var_va,
        var_vb,
        var_residual,
        relative_gap: (var_mu - var_va - var_vb - var_residual).abs() / var_mu,
        feature_correlation: feature_correlation(&ds, &baseline),
        cross_moment,
        cross_moment_se,
        pinv_used: proj.pinv_eta || proj.pinv_xi,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VarianceStudyConfig {
    #[serde(default)]
    pub family: GaussianBanditFamily,
    #[serde(default = "default_replicates")]
    pub replicates: usize,
    #[serde(default = "default_m")]
    pub m: usize,
    #[serde(default)]
    pub seed: u64,
    /// Fit the behavior location per replicate; otherwise use the true behavior.
    #[serde(default = "yes")]
    pub fit_behavior: bool,
    /// Fit the baseline per replicate; otherwise `b ≡ 0`.
    #[serde(default = "yes")]
    pub fit_baseline: bool,
    #[serde(default = "default_resamples")]
    pub bootstrap_resamples: usize,
    #[serde(default = "default_level")]
    pub level: f64,
    #[serde(default)]
    pub form: GradientForm,
}

fn default_replicates() -> usize {
    2000
}
fn default_m() -> usize {
    50
}
fn yes() -> bool {
    true
}
fn default_resamples() -> usize {
    10_000
}
fn default_level() -> f64 {
    0.99
}

impl Default for VarianceStudyConfig {
    fn default() -> Self {
        VarianceStudyConfig {
            family: GaussianBanditFamily::default(),
            replicates: default_replicates(),
            m: default_m(),
            seed: 0,
            fit_behavior: true,
            fit_baseline: true,
            bootstrap_resamples: default_resamples(),
            level: default_level(),
            form: GradientForm::default(),
        }
    }
}

impl VarianceStudyConfig {
    pub fn validate(&self) -> Result<()> {
        self.family.validate()?;
        if self.replicates < 2 || self.m < 2 {
            return Err(Error::invalid("variance study needs at least two replicates of at least two samples"));
        }
        if self.bootstrap_resamples == 0 {
            return Err(Error::invalid("bootstrap_resamples must be positive"));
        }
        if !(self.level > 0.0 && self.level < 1.0) {
            return Err(Error::invalid("confidence level must lie in (0, 1)"));
        }
        Ok(())
    }
}

/// Outcome of one replicate.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplicateRow {
    pub replicate: usize,
    pub result: std::result::Result<ReplicateEstimates, String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplicateEstimates {
    pub z_ois: Vec<f64>,
    pub z_dpe: Vec<f64>,
    /// Within-replicate `tr Cov(μ)/m` of each estimator.
    pub var_ois_trace: f64,
    pub var_dpe_trace: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VarianceStudyReport {
    pub rows: Vec<ReplicateRow>,
    /// Across-replicate trace variances of `Z_OIS` and `Z_DPE`.
    pub var_ois: f64,
    pub var_dpe: f64,
    pub per_coordinate: Vec<(f64, f64)>,
    /// `var_dpe / var_ois` with its percentile bootstrap interval.
    pub ratio: ConfidenceInterval,
    pub failures: usize,
}

fn replicate(cfg: &VarianceStudyConfig, index: usize) -> Result<ReplicateEstimates> {
    let mut rng = stream_rng(cfg.seed, index as u64);
    let fam = &cfg.family;
    let ds = fam.generate(cfg.m, &mut rng)?;
    let target = fam.target()?;
    let truth = fam.true_behavior()?;
    let ois = ois_gradient(&ds, &target, &truth, cfg.form)?;
    let behavior = if cfg.fit_behavior {
        fam.fit_behavior(&ds, cfg.seed.wrapping_add(index as u64))?
    } else {
        truth
    };
    let baseline = if cfg.fit_baseline {
        fit_baseline(&ds, fam.feature_map(), None)?
    } else {
        BaselineModel::zero(fam.feature_map(), 1)
    };
    let dpe = dpe_gradient(&ds, &target, &behavior, &baseline, cfg.form, &WeightConfig::pdf())?;
    Ok(ReplicateEstimates {
        z_ois: ois.gradient,
        z_dpe: dpe.gradient,
        var_ois_trace: ois.sample_variance,
        var_dpe_trace: dpe.sample_variance,
    })
}

/// `R` independent replicates of `Z_OIS` (true behavior, `b = 0`) and `Z_DPE`
/// (fitted behavior and baseline), compared by their across-replicate variance.
pub fn variance_study(cfg: &VarianceStudyConfig) -> Result<VarianceStudyReport> {
    cfg.validate()?;
    let rows: Vec<ReplicateRow> = (0..cfg.replicates)
        .into_par_iter()
        .map(|r| ReplicateRow {
            replicate: r,
            result: replicate(cfg, r).map_err(|e| e.to_string()),
        })
        .collect();
    let ok: Vec<&ReplicateEstimates> = rows.iter().filter_map(|r| r.result.as_ref().ok()).collect();
    let failures = rows.len() - ok.len();
    if ok.len() < 2 {
        return Err(Error::Simulation(format!("only {} of {} replicates succeeded", ok.len(), rows.len())));
    }
    let z_ois: Vec<Vec<f64>> = ok.iter().map(|r| r.z_ois.clone()).collect();
    let z_dpe: Vec<Vec<f64>> = ok.iter().map(|r| r.z_dpe.clone()).collect();
    let var_ois = covariance_trace(&z_ois);
    let var_dpe = covariance_trace(&z_dpe);
    let dim = z_ois[0].len();
    let per_coordinate = (0..dim)
        .map(|j| {
            let a: Vec<f64> = z_ois.iter().map(|v| v[j]).collect();
            let b: Vec<f64> = z_dpe.iter().map(|v| v[j]).collect();
            (sample_variance(&a), sample_variance(&b))
        })
        .collect();
    let mut rng = stream_rng(cfg.seed, u64::MAX);
    let ratio = bootstrap_ci(&mut rng, ok.len(), cfg.bootstrap_resamples, cfg.level, |idx| {
        trace_variance_of(&z_dpe, idx) / trace_variance_of(&z_ois, idx)
    });
    Ok(VarianceStudyReport {
        rows,
        var_ois,
        var_dpe,
        per_coordinate,
        ratio,
        failures,
    })
}

/// `tr Cov` of `vectors[idx]` without materialising the resample.
fn trace_variance_of(vectors: &[Vec<f64>], idx: &[usize]) -> f64 {
    let n = idx.len() as f64;
    let d = vectors[0].len();
    let mut total = 0.0;
    for j in 0..d {
        let mut s = 0.0;
        let mut s2 = 0.0;
        for &i in idx {
            let v = vectors[i][j];
            s += v;
            s2 += v * v;
        }
        let mean = s / n;
        total += (s2 - n * mean * mean) / (n - 1.0);
    }
    total
}

impl VarianceStudyReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("replicate,var_ois_trace,var_dpe_trace,ratio,status\n");
        for row in &self.rows {
            match &row.result {
                Ok(r) => {
                    let _ = writeln!(
                        out,
                        "{},{},{},{},ok",
                        row.replicate,
                        r.var_ois_trace,
                        r.var_dpe_trace,
                        r.var_dpe_trace / r.var_ois_trace
                    );
                }
                Err(e) => {
                    let _ = writeln!(out, "{},,,,\"error: {}\"", row.replicate, e.replace('"', "'"));
                }
            }
        }
        let _ = writeln!(out, "summary,{},{},{},ok", self.var_ois, self.var_dpe, self.ratio.estimate);
        let _ = writeln!(out, "ci_lower,,,{},level={}", self.ratio.lower, self.ratio.level);
        let _ = writeln!(out, "ci_upper,,,{},level={}", self.ratio.upper, self.ratio.level);
        for (j, (a, b)) in self.per_coordinate.iter().enumerate() {
            let _ = writeln!(out, "coord_{j},{a},{b},{},ok", b / a);
        }
        out
    }
}

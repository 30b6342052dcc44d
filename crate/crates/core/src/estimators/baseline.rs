use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::trajectory::{Trajectory, TrajectoryDataset};

type FeatureFn = dyn Fn(&[f64], usize) -> Vec<f64> + Send + Sync;

/// Features `φ(s_t, t)` of a linear baseline.
#[derive(Clone)]
pub enum FeatureMap {
    /// `[1]`.
    Constant,
    /// `[1, s]`.
    State,
    /// `[1, s, t / H]` (with `H ≥ 1`).
    StateTime { horizon: usize },
    /// User-supplied map with a fixed output dimension.
    Custom { dim: usize, map: Arc<FeatureFn> },
}

impl fmt::Debug for FeatureMap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FeatureMap::Constant => write!(f, "Constant"),
            FeatureMap::State => write!(f, "State"),
            FeatureMap::StateTime { horizon } => write!(f, "StateTime {{ horizon: {horizon} }}"),
            FeatureMap::Custom { dim, .. } => write!(f, "Custom {{ dim: {dim} }}"),
        }
    }
}

impl FeatureMap {
    pub fn custom(dim: usize, map: impl Fn(&[f64], usize) -> Vec<f64> + Send + Sync + 'static) -> Self {
        FeatureMap::Custom { dim, map: Arc::new(map) }
    }

    pub fn dim(&self, state_dim: usize) -> usize {
        match self {
            FeatureMap::Constant => 1,
            FeatureMap::State => 1 + state_dim,
            FeatureMap::StateTime { .. } => 2 + state_dim,
            FeatureMap::Custom { dim, .. } => *dim,
        }
    }

    pub fn features(&self, state: &[f64], t: usize) -> Vec<f64> {
        match self {
            FeatureMap::Constant => vec![1.0],
            FeatureMap::State => std::iter::once(1.0).chain(state.iter().copied()).collect(),
            FeatureMap::StateTime { horizon } => std::iter::once(1.0)
                .chain(state.iter().copied())
                .chain(std::iter::once(t as f64 / (*horizon).max(1) as f64))
                .collect(),
            FeatureMap::Custom { map, .. } => map(state, t),
        }
    }
}

/// Linear return-to-go predictor `b_t = φ(s_t, t) · ξ`.
#[derive(Debug, Clone)]
pub struct BaselineModel {
    pub params: Vec<f64>,
    pub feature_map: FeatureMap,
    /// The design matrix was rank deficient; `params` is the minimum-norm solution.
    pub rank_deficient: bool,
}

impl BaselineModel {
    /// `b ≡ 0` over the given features.
    pub fn zero(feature_map: FeatureMap, state_dim: usize) -> Self {
        let dim = feature_map.dim(state_dim);
        BaselineModel {
            params: vec![0.0; dim],
            feature_map,
            rank_deficient: false,
        }
    }

    pub fn predict(&self, state: &[f64], t: usize) -> f64 {
        self.feature_map
            .features(state, t)
            .iter()
            .zip(&self.params)
            .map(|(f, p)| f * p)
            .sum()
    }

    pub fn predict_trajectory(&self, traj: &Trajectory) -> Vec<f64> {
        (0..traj.len()).map(|t| self.predict(traj.state(t), t)).collect()
    }

    /// Mean squared error against `q_{t:H}` over every step of `ds`.
    pub fn mse(&self, ds: &TrajectoryDataset) -> f64 {
        let mut acc = 0.0;
        for traj in ds.trajectories() {
            for (q, b) in traj.returns_to_go().iter().zip(self.predict_trajectory(traj)) {
                acc += (q - b) * (q - b);
            }
        }
        acc / ds.num_steps() as f64
    }
}

/// Least-squares fit of `q_{t:H}` on `φ(s_t, t)` over every `(trajectory, step)`;
/// `weights` optionally gives one non-negative weight per trajectory.
pub fn fit_baseline(ds: &TrajectoryDataset, feature_map: FeatureMap, weights: Option<&[f64]>) -> Result<BaselineModel> {
    let p = feature_map.dim(ds.state_dim());
    let n = ds.num_steps();
    if p > n {
        return Err(Error::invalid(format!(
            "baseline has {p} features but only {n} samples"
        )));
    }
    if let Some(w) = weights {
        if w.len() != ds.len() {
            return Err(Error::shape("one baseline weight per trajectory required"));
        }
        if w.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(Error::invalid("baseline weights must be finite and non-negative"));
        }
    }
    let mut x = DMatrix::<f64>::zeros(n, p);
    let mut y = DVector::<f64>::zeros(n);
    let mut row = 0;
    for (i, traj) in ds.trajectories().iter().enumerate() {
        let sw = weights.map_or(1.0, |w| w[i].sqrt());
        for (t, q) in traj.returns_to_go().into_iter().enumerate() {
            let phi = feature_map.features(traj.state(t), t);
            if phi.len() != p {
                return Err(Error::shape(format!(
                    "feature map returned {} values, expected {p}",
                    phi.len()
                )));
            }
            for (j, f) in phi.iter().enumerate() {
                x[(row, j)] = sw * f;
            }
            y[row] = sw * q;
            row += 1;
        }
    }
    let svd = x.svd(true, true);
    let smax = svd.singular_values.iter().cloned().fold(0.0, f64::max);
    let tol = smax * (n.max(p) as f64) * f64::EPSILON;
    let rank = svd.singular_values.iter().filter(|s| **s > tol).count();
    let params = if smax == 0.0 {
        vec![0.0; p]
    } else {
        svd.solve(&y, tol)
            .map_err(|e| Error::LinearAlgebra(e.to_string()))?
            .iter()
            .copied()
            .collect()
    };
    Ok(BaselineModel {
        params,
        feature_map,
        rank_deficient: rank < p,
    })
}

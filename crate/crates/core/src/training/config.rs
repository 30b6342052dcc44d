use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimators::{FeatureMap, GradientForm, WeightConfig};
use crate::policy::{GaussianConfig, PolicyInput, SequenceConfig};

/// Linear baseline feature families selectable from a config file.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineFeatures {
    Constant,
    State,
    #[default]
    StateTime,
    /// `[1, z, z ⊗ z]` (upper triangle) for `z = [s, t / H]`.
    Quadratic,
}

impl BaselineFeatures {
    pub fn feature_map(self, state_dim: usize, horizon: usize) -> FeatureMap {
        match self {
            BaselineFeatures::Constant => FeatureMap::Constant,
            BaselineFeatures::State => FeatureMap::State,
            BaselineFeatures::StateTime => FeatureMap::StateTime { horizon },
            BaselineFeatures::Quadratic => {
                let n = state_dim + 1;
                let h = horizon.max(1) as f64;
                FeatureMap::custom(1 + n + n * (n + 1) / 2, move |s, t| {
                    let z: Vec<f64> = s.iter().copied().chain(std::iter::once(t as f64 / h)).collect();
                    let mut f = Vec::with_capacity(1 + n + n * (n + 1) / 2);
                    f.push(1.0);
                    f.extend_from_slice(&z);
                    for i in 0..n {
                        for j in i..n {
                            f.push(z[i] * z[j]);
                        }
                    }
                    f
                })
            }
        }
    }
}

/// Sequence-model architecture apart from the dimensions and context length.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    #[serde(default = "d_embed")]
    pub embed_dim: usize,
    #[serde(default = "d_layers")]
    pub n_layers: usize,
    #[serde(default = "d_one")]
    pub n_heads: usize,
    #[serde(default = "d_mlp")]
    pub mlp_ratio: usize,
    #[serde(default = "d_max_t")]
    pub max_timestep: usize,
    #[serde(default = "d_scale")]
    pub return_scale: f64,
    #[serde(default)]
    pub action_tanh: bool,
}

fn d_embed() -> usize {
    32
}
fn d_layers() -> usize {
    2
}
fn d_one() -> usize {
    1
}
fn d_mlp() -> usize {
    4
}
fn d_max_t() -> usize {
    256
}
fn d_scale() -> f64 {
    1.0
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec {
            embed_dim: d_embed(),
            n_layers: d_layers(),
            n_heads: d_one(),
            mlp_ratio: d_mlp(),
            max_timestep: d_max_t(),
            return_scale: d_scale(),
            action_tanh: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// L-BFGS iterations for the behavior model.
    #[serde(default = "d_pretrain")]
    pub pretrain_steps: usize,
    /// Supervised steps of the warm start.
    #[serde(default = "d_bc")]
    pub bc_steps: usize,
    /// DPE update steps after the warm start.
    #[serde(default = "d_train")]
    pub train_steps: usize,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    #[serde(default = "d_lr")]
    pub learning_rate: f64,
    /// Warm-start learning rate; `None` reuses `learning_rate`.
    #[serde(default)]
    pub bc_learning_rate: Option<f64>,
    #[serde(default = "d_clip")]
    pub grad_clip: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "d_context")]
    pub context_len: usize,
    /// Evaluation conditioning; `None` means 10% below the best dataset return.
    #[serde(default)]
    pub target_return: Option<f64>,
    #[serde(default = "WeightConfig::exp_clipped")]
    pub weights: WeightConfig,
    #[serde(default)]
    pub baseline_features: BaselineFeatures,
    #[serde(default)]
    pub dpe_form: GradientForm,
    /// Entropy coefficient of the joint objective.
    #[serde(default)]
    pub beta: f64,
    /// Weight of the supervised loss next to the DPE term.
    #[serde(default = "d_one_f")]
    pub lambda_sup: f64,
    /// Baseline refit period in update steps.
    #[serde(default = "d_refresh")]
    pub baseline_refresh: usize,
    /// Largest tolerated fraction of skipped trajectories in a DPE batch.
    #[serde(default = "d_skip")]
    pub max_skip_fraction: f64,
    /// Windows in the fixed batch the supervised loss is monitored on.
    #[serde(default = "d_heldout")]
    pub heldout_windows: usize,
    /// Supervised steps between two held-out evaluations.
    #[serde(default = "d_epoch")]
    pub epoch_steps: usize,
    /// Past states seen by the behavior model.
    #[serde(default = "d_one")]
    pub behavior_window: usize,
    #[serde(default)]
    pub model: ModelSpec,
}

fn d_pretrain() -> usize {
    100
}
fn d_bc() -> usize {
    1000
}
fn d_train() -> usize {
    500
}
fn d_batch() -> usize {
    64
}
fn d_lr() -> f64 {
    1e-4
}
fn d_clip() -> f64 {
    0.25
}
fn d_context() -> usize {
    20
}
fn d_one_f() -> f64 {
    1.0
}
fn d_refresh() -> usize {
    100
}
fn d_skip() -> f64 {
    0.1
}
fn d_heldout() -> usize {
    32
}
fn d_epoch() -> usize {
    50
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            pretrain_steps: d_pretrain(),
            bc_steps: d_bc(),
            train_steps: d_train(),
            batch_size: d_batch(),
            learning_rate: d_lr(),
            bc_learning_rate: None,
            grad_clip: d_clip(),
            seed: 0,
            context_len: d_context(),
            target_return: None,
            weights: WeightConfig::exp_clipped(),
            baseline_features: BaselineFeatures::default(),
            dpe_form: GradientForm::default(),
            beta: 0.0,
            lambda_sup: 1.0,
            baseline_refresh: d_refresh(),
            max_skip_fraction: d_skip(),
            heldout_windows: d_heldout(),
            epoch_steps: d_epoch(),
            behavior_window: 1,
            model: ModelSpec::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("batch_size", self.batch_size),
            ("context_len", self.context_len),
            ("baseline_refresh", self.baseline_refresh),
            ("heldout_windows", self.heldout_windows),
            ("epoch_steps", self.epoch_steps),
            ("behavior_window", self.behavior_window),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::invalid(format!("{name} must be positive")));
        }
        for lr in std::iter::once(self.learning_rate).chain(self.bc_learning_rate) {
            if !(lr >= 0.0) || !lr.is_finite() {
                return Err(Error::invalid("learning rates must be non-negative"));
            }
        }
        if !(self.grad_clip > 0.0) {
            return Err(Error::invalid("grad_clip must be positive"));
        }
        if !(self.lambda_sup >= 0.0) || !self.lambda_sup.is_finite() {
            return Err(Error::invalid("lambda_sup must be non-negative"));
        }
        if !(self.beta >= 0.0) || !self.beta.is_finite() {
            return Err(Error::invalid("beta must be non-negative"));
        }
        if !(0.0..=1.0).contains(&self.max_skip_fraction) {
            return Err(Error::invalid("max_skip_fraction must lie in [0, 1]"));
        }
        if let Some(g) = self.target_return {
            if !g.is_finite() {
                return Err(Error::invalid("target_return must be finite"));
            }
        }
        self.weights.validate()
    }

    pub fn bc_learning_rate(&self) -> f64 {
        self.bc_learning_rate.unwrap_or(self.learning_rate)
    }

    pub fn sequence_config(&self, state_dim: usize, action_dim: usize) -> SequenceConfig {
        let m = &self.model;
        SequenceConfig {
            state_dim,
            action_dim,
            context_len: self.context_len,
            embed_dim: m.embed_dim,
            n_layers: m.n_layers,
            n_heads: m.n_heads,
            mlp_ratio: m.mlp_ratio,
            max_timestep: m.max_timestep,
            return_scale: m.return_scale,
            action_tanh: m.action_tanh,
        }
    }

    pub fn behavior_config(&self, state_dim: usize, action_dim: usize) -> GaussianConfig {
        GaussianConfig {
            input: PolicyInput::StateWindow { n: self.behavior_window },
            ..GaussianConfig::markov(state_dim, action_dim)
        }
    }
}

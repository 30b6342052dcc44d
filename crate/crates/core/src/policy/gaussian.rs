use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{check_score, gaussian_log_density, GaussianMoments, ScorePolicy, StepDensity, TrajectoryPolicy, LN_2PI, SIGMA_MIN};
use crate::error::{Error, Result};
use crate::optim::{Lbfgs, LbfgsStep};
use crate::tape::{Graph, Matrix, NodeId, ParamLayout, ParamSlot};
use crate::trajectory::{Trajectory, TrajectoryDataset};

/// What the mean network sees at step `t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PolicyInput {
    /// No input: the mean is a free bias vector.
    Constant,
    /// The last `n` states `s_{t−n+1..=t}`, zero-padded before the episode start.
    StateWindow { n: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StdMode {
    /// Known standard deviation, not a parameter.
    Fixed { std: Vec<f64> },
    /// Free state-independent `log σ` vector.
    Learned,
    /// `log σ` emitted by the network head alongside the mean.
    StateDependent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GaussianConfig {
    pub state_dim: usize,
    pub action_dim: usize,
    pub input: PolicyInput,
    /// Widths of tanh hidden layers; empty means a linear (affine) mean map.
    #[serde(default)]
    pub hidden: Vec<usize>,
    pub std: StdMode,
    #[serde(default = "default_sigma_min")]
    pub sigma_min: f64,
}

fn default_sigma_min() -> f64 {
    SIGMA_MIN
}

impl GaussianConfig {
    /// Markov behavior model with an affine mean and learned homoscedastic σ.
    pub fn markov(state_dim: usize, action_dim: usize) -> Self {
        GaussianConfig {
            state_dim,
            action_dim,
            input: PolicyInput::StateWindow { n: 1 },
            hidden: Vec::new(),
            std: StdMode::Learned,
            sigma_min: SIGMA_MIN,
        }
    }

    /// Context-free Gaussian.
    pub fn constant(action_dim: usize, std: StdMode) -> Self {
        GaussianConfig {
            state_dim: 0,
            action_dim,
            input: PolicyInput::Constant,
            hidden: Vec::new(),
            std,
            sigma_min: SIGMA_MIN,
        }
    }

    pub fn context_dim(&self) -> usize {
        match self.input {
            PolicyInput::Constant => 0,
            PolicyInput::StateWindow { n } => n * self.state_dim,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.action_dim == 0 {
            return Err(Error::invalid("gaussian policy needs a positive action dimension"));
        }
        if let PolicyInput::StateWindow { n } = self.input {
            if n == 0 {
                return Err(Error::invalid("context window n must be at least 1"));
            }
        }
        if let StdMode::Fixed { std } = &self.std {
            if std.len() != self.action_dim || std.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
                return Err(Error::invalid("fixed std must be positive with one entry per action dim"));
            }
        }
        if !(self.sigma_min > 0.0) {
            return Err(Error::invalid("sigma_min must be positive"));
        }
        if self.hidden.contains(&0) {
            return Err(Error::invalid("hidden layer widths must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Layout {
    layers: Vec<(ParamSlot, ParamSlot)>,
    log_std: Option<ParamSlot>,
    total: usize,
}

impl Layout {
    fn new(cfg: &GaussianConfig) -> Self {
        let mut pl = ParamLayout::new();
        let out_dim = match cfg.std {
            StdMode::StateDependent => 2 * cfg.action_dim,
            _ => cfg.action_dim,
        };
        let mut fan_in = cfg.context_dim();
        let mut layers = Vec::new();
        for &h in cfg.hidden.iter().chain(std::iter::once(&out_dim)) {
            let w = pl.add(fan_in, h);
            let b = pl.add(1, h);
            layers.push((w, b));
            fan_in = h;
        }
        let log_std = matches!(cfg.std, StdMode::Learned).then(|| pl.add(1, cfg.action_dim));
        Layout {
            layers,
            log_std,
            total: pl.total(),
        }
    }
}

/// Diagonal Gaussian policy `N(μ_η(context), diag σ²)` with `σ ≥ σ_min`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPolicy {
    config: GaussianConfig,
    layout: Layout,
    params: Vec<f64>,
    seed: u64,
}

impl GaussianPolicy {
    /// Randomly initialised policy (tanh layers scaled by `1/√fan_in`, zero biases,
    /// `log σ = 0`).
    pub fn new(config: GaussianConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        let mut params = vec![0.0; layout.total];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let last = layout.layers.len() - 1;
        for (l, (w, _)) in layout.layers.iter().enumerate() {
            if w.rows == 0 {
                continue;
            }
            let scale = if l == last { 0.1 } else { 1.0 } / (w.rows as f64).sqrt();
            let dist = Normal::new(0.0, scale).expect("positive scale");
            for p in &mut params[w.range()] {
                *p = dist.sample(&mut rng);
            }
        }
        Ok(GaussianPolicy {
            config,
            layout,
            params,
            seed,
        })
    }

    pub fn from_params(config: GaussianConfig, params: Vec<f64>, seed: u64) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        if params.len() != layout.total {
            return Err(Error::shape(format!(
                "gaussian policy expects {} parameters, got {}",
                layout.total,
                params.len()
            )));
        }
        crate::error::ensure_finite(&params, "gaussian policy parameters")?;
        Ok(GaussianPolicy {
            config,
            layout,
            params,
            seed,
        })
    }

    /// Context-free `N(mean, diag std²)` with only the mean as parameters.
    pub fn fixed(mean: Vec<f64>, std: Vec<f64>) -> Result<Self> {
        let cfg = GaussianConfig::constant(mean.len(), StdMode::Fixed { std });
        Self::from_params(cfg, mean, 0)
    }

    /// Context-free `N(mean, diag std²)` with mean and `log σ` as parameters.
    pub fn constant_learned(mean: Vec<f64>, std: &[f64]) -> Result<Self> {
        let cfg = GaussianConfig::constant(mean.len(), StdMode::Learned);
        let mut params = mean;
        params.extend(std.iter().map(|s| s.ln()));
        Self::from_params(cfg, params, 0)
    }

    /// Linear mean `μ = Wᵀ s + b` on the current state with a fixed σ.
    pub fn linear_fixed_std(state_dim: usize, weights: &Matrix, bias: &[f64], std: Vec<f64>) -> Result<Self> {
        let cfg = GaussianConfig {
            state_dim,
            action_dim: bias.len(),
            input: PolicyInput::StateWindow { n: 1 },
            hidden: Vec::new(),
            std: StdMode::Fixed { std },
            sigma_min: SIGMA_MIN,
        };
        if weights.rows != state_dim || weights.cols != bias.len() {
            return Err(Error::shape("linear weights must be state_dim × action_dim"));
        }
        let mut params = weights.data.clone();
        params.extend_from_slice(bias);
        Self::from_params(cfg, params, 0)
    }

    pub fn config(&self) -> &GaussianConfig {
        &self.config
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn with_params(&self, params: Vec<f64>) -> Result<Self> {
        Self::from_params(self.config.clone(), params, self.seed)
    }

    pub fn action_dim(&self) -> usize {
        self.config.action_dim
    }

    pub fn context_dim(&self) -> usize {
        self.config.context_dim()
    }

    /// Range of the `log σ` parameters when σ is learned and state-independent.
    pub fn log_std_range(&self) -> Option<std::ops::Range<usize>> {
        self.layout.log_std.map(|s| s.range())
    }

    /// Context vector for step `t` of `traj`.
    pub fn context(&self, traj: &Trajectory, t: usize) -> Vec<f64> {
        match self.config.input {
            PolicyInput::Constant => Vec::new(),
            PolicyInput::StateWindow { n } => {
                let sd = self.config.state_dim;
                let mut ctx = vec![0.0; n * sd];
                for k in 0..n {
                    // slot k holds s_{t − (n − 1 − k)}
                    let back = n - 1 - k;
                    if t >= back {
                        ctx[k * sd..(k + 1) * sd].copy_from_slice(traj.state(t - back));
                    }
                }
                ctx
            }
        }
    }

    fn check_context(&self, context: &[f64]) -> Result<()> {
        if context.len() != self.context_dim() {
            return Err(Error::shape(format!(
                "context has length {}, policy expects {}",
                context.len(),
                self.context_dim()
            )));
        }
        Ok(())
    }

    fn check_action(&self, action: &[f64]) -> Result<()> {
        if action.len() != self.action_dim() {
            return Err(Error::shape(format!(
                "action has dim {}, policy expects {}",
                action.len(),
                self.action_dim()
            )));
        }
        Ok(())
    }

    fn log_sigma_floor(&self) -> f64 {
        self.config.sigma_min.ln()
    }

    /// Mean and standard deviation at `context`, without building a tape.
    pub fn moments(&self, context: &[f64]) -> Result<GaussianMoments> {
        self.check_context(context)?;
        let mut h = context.to_vec();
        let last = self.layout.layers.len() - 1;
        for (l, (w, b)) in self.layout.layers.iter().enumerate() {
            let wm = &self.params[w.range()];
            let mut out = self.params[b.range()].to_vec();
            for (i, &x) in h.iter().enumerate() {
                for (j, o) in out.iter_mut().enumerate() {
                    *o += x * wm[i * w.cols + j];
                }
            }
            if l != last {
                out.iter_mut().for_each(|v| *v = v.tanh());
            }
            h = out;
        }
        let d = self.action_dim();
        let floor = self.log_sigma_floor();
        let (mean, log_std): (Vec<f64>, Vec<f64>) = match &self.config.std {
            StdMode::Fixed { std } => (h, std.iter().map(|s| s.ln()).collect()),
            StdMode::Learned => {
                let ls = self.params[self.layout.log_std.expect("learned slot").range()].to_vec();
                (h, ls)
            }
            StdMode::StateDependent => (h[..d].to_vec(), h[d..].to_vec()),
        };
        let std = log_std.iter().map(|&l| if l <= floor { self.config.sigma_min } else { l.exp() }).collect();
        Ok(GaussianMoments { mean, std })
    }

    pub fn log_prob(&self, context: &[f64], action: &[f64]) -> Result<f64> {
        self.check_action(action)?;
        let m = self.moments(context)?;
        Ok(gaussian_log_density(&m.mean, &m.std, action))
    }

    pub fn sample<R: Rng>(&self, context: &[f64], rng: &mut R) -> Result<Vec<f64>> {
        let m = self.moments(context)?;
        Ok(m.mean
            .iter()
            .zip(&m.std)
            .map(|(mu, s)| {
                let z: f64 = StandardNormal.sample(rng);
                mu + s * z
            })
            .collect())
    }

    /// `Σ_i w_i log π(a_i | x_i)` on a tape for contexts/actions stacked by row.
    fn weighted_log_likelihood(&self, g: &mut Graph, contexts: &Matrix, actions: &Matrix, weights: &[f64]) -> NodeId {
        let n = contexts.rows;
        let d = self.action_dim();
        let mut h = g.input(contexts.clone());
        let last = self.layout.layers.len() - 1;
        for (l, (w, b)) in self.layout.layers.iter().enumerate() {
            let wn = w.bind(g, &self.params);
            let bn = b.bind(g, &self.params);
            let z = g.matmul(h, wn);
            h = g.add_row(z, bn);
            if l != last {
                h = g.tanh(h);
            }
        }
        let floor = self.log_sigma_floor();
        let act = g.input(actions.clone());
        let wsum: f64 = weights.iter().sum();
        let half_w = Matrix::from_vec(
            n,
            d,
            weights.iter().flat_map(|&w| std::iter::repeat_n(-0.5 * w, d)).collect(),
        );
        let (quad, log_det) = match &self.config.std {
            StdMode::StateDependent => {
                let mean = g.slice_cols(h, 0, d);
                let ls = g.slice_cols(h, d, d);
                let ls = g.clamp_min(ls, floor);
                let neg = g.scale(ls, -1.0);
                let inv = g.exp(neg);
                let diff = g.sub(act, mean);
                let z = g.mul(diff, inv);
                let zsq = g.mul(z, z);
                let quad = g.weighted_sum(zsq, half_w);
                let neg_w = Matrix::from_vec(
                    n,
                    d,
                    weights.iter().flat_map(|&w| std::iter::repeat_n(-w, d)).collect(),
                );
                let log_det = g.weighted_sum(ls, neg_w);
                (quad, log_det)
            }
            mode => {
                let ls = match mode {
                    StdMode::Fixed { std } => {
                        g.input(Matrix::from_vec(1, d, std.iter().map(|s| s.ln().max(floor)).collect()))
                    }
                    _ => {
                        let slot = self.layout.log_std.expect("learned slot");
                        let raw = slot.bind(g, &self.params);
                        g.clamp_min(raw, floor)
                    }
                };
                let neg = g.scale(ls, -1.0);
                let inv = g.exp(neg);
                let diff = g.sub(act, h);
                let z = g.mul_row(diff, inv);
                let zsq = g.mul(z, z);
                let quad = g.weighted_sum(zsq, half_w);
                let log_det = g.weighted_sum(ls, Matrix::from_vec(1, d, vec![-wsum; d]));
                (quad, log_det)
            }
        };
        let total = g.add(quad, log_det);
        g.add_scalar(total, -0.5 * LN_2PI * d as f64 * wsum)
    }

    /// Log-density and its gradient with respect to the flat parameters.
    pub fn log_prob_and_score(&self, context: &[f64], action: &[f64]) -> Result<(f64, Vec<f64>)> {
        self.check_context(context)?;
        self.check_action(action)?;
        let mut g = Graph::new();
        let x = Matrix::from_vec(1, context.len(), context.to_vec());
        let a = Matrix::from_vec(1, action.len(), action.to_vec());
        let out = self.weighted_log_likelihood(&mut g, &x, &a, &[1.0]);
        let grad = g.backward(out, self.params.len());
        check_score(&grad, "gaussian policy score")?;
        Ok((g.scalar_value(out), grad))
    }

    /// `∇_η log π(a | context)`.
    pub fn score(&self, context: &[f64], action: &[f64]) -> Result<Vec<f64>> {
        Ok(self.log_prob_and_score(context, action)?.1)
    }

    fn trajectory_matrices(&self, traj: &Trajectory) -> Result<(Matrix, Matrix)> {
        if traj.action_dim() != self.action_dim() {
            return Err(Error::shape("trajectory action dim does not match policy"));
        }
        if self.config.context_dim() > 0 && traj.state_dim() != self.config.state_dim {
            return Err(Error::shape("trajectory state dim does not match policy"));
        }
        let ctx: Vec<Vec<f64>> = (0..traj.len()).map(|t| self.context(traj, t)).collect();
        let x = Matrix::from_vec(traj.len(), self.context_dim(), ctx.concat());
        let a = Matrix::from_rows(traj.actions());
        Ok((x, a))
    }

    /// Mean log-likelihood over every `(trajectory, step)` in `ds` and its gradient.
    pub fn dataset_log_likelihood(&self, ds: &TrajectoryDataset) -> Result<(f64, Vec<f64>)> {
        let (x, a) = dataset_matrices(self, ds)?;
        self.mean_log_likelihood(&x, &a)
    }

    fn mean_log_likelihood(&self, x: &Matrix, a: &Matrix) -> Result<(f64, Vec<f64>)> {
        let n = x.rows;
        let mut g = Graph::new();
        let w = vec![1.0 / n as f64; n];
        let out = self.weighted_log_likelihood(&mut g, x, a, &w);
        let grad = g.backward(out, self.params.len());
        Ok((g.scalar_value(out), grad))
    }

    /// Mean of `½ Σ_j log(2πe σ_j²)` over `contexts`.
    pub fn entropy(&self, contexts: &[Vec<f64>]) -> Result<f64> {
        if contexts.is_empty() {
            return Err(Error::invalid("entropy needs at least one context"));
        }
        let mut acc = 0.0;
        for c in contexts {
            acc += super::gaussian_entropy_of_std(&self.moments(c)?.std);
        }
        Ok(acc / contexts.len() as f64)
    }
}

/// Mean differential entropy of `policy` over `contexts`.
pub fn gaussian_entropy(policy: &GaussianPolicy, contexts: &[Vec<f64>]) -> Result<f64> {
    policy.entropy(contexts)
}

fn dataset_matrices(policy: &GaussianPolicy, ds: &TrajectoryDataset) -> Result<(Matrix, Matrix)> {
    let mut ctx = Vec::with_capacity(ds.num_steps() * policy.context_dim());
    let mut act = Vec::with_capacity(ds.num_steps() * policy.action_dim());
    for traj in ds.trajectories() {
        let (x, a) = policy.trajectory_matrices(traj)?;
        ctx.extend(x.data);
        act.extend(a.data);
    }
    let n = ds.num_steps();
    Ok((
        Matrix::from_vec(n, policy.context_dim(), ctx),
        Matrix::from_vec(n, policy.action_dim(), act),
    ))
}

impl TrajectoryPolicy for GaussianPolicy {
    fn step_densities(&self, traj: &Trajectory) -> Result<Vec<StepDensity>> {
        (0..traj.len())
            .map(|t| {
                let m = self.moments(&self.context(traj, t))?;
                self.check_action(traj.action(t))?;
                Ok(StepDensity {
                    log_prob: gaussian_log_density(&m.mean, &m.std, traj.action(t)),
                    gaussian: Some(m),
                })
            })
            .collect()
    }
}

impl ScorePolicy for GaussianPolicy {
    fn num_params(&self) -> usize {
        self.params.len()
    }

    fn weighted_score(&self, traj: &Trajectory, weights: &[f64]) -> Result<Vec<f64>> {
        if weights.len() != traj.len() {
            return Err(Error::shape("one weight per trajectory step required"));
        }
        let (x, a) = self.trajectory_matrices(traj)?;
        let mut g = Graph::new();
        let out = self.weighted_log_likelihood(&mut g, &x, &a, weights);
        let grad = g.backward(out, self.params.len());
        check_score(&grad, "gaussian policy score")?;
        Ok(grad)
    }
}

/// Log-likelihood trace of a behavior fit.
#[derive(Debug, Clone, PartialEq)]
pub struct FitReport {
    /// Mean training log-likelihood before the first step and after each step
    /// (`steps + 1` entries).
    pub log_likelihood: Vec<f64>,
    pub converged: bool,
}

/// Maximum-likelihood fit of a Gaussian behavior model by full-batch L-BFGS on
/// the mean log-likelihood of every `(trajectory, step)` in `ds`.
pub fn fit_behavior_mle(
    ds: &TrajectoryDataset,
    config: GaussianConfig,
    steps: usize,
    seed: u64,
) -> Result<(GaussianPolicy, FitReport)> {
    let init = GaussianPolicy::new(config, seed)?;
    if init.config.context_dim() > 0 && init.config.state_dim != ds.state_dim() {
        return Err(Error::shape("behavior state_dim does not match dataset"));
    }
    if init.action_dim() != ds.action_dim() {
        return Err(Error::shape("behavior action_dim does not match dataset"));
    }
    let (x, a) = dataset_matrices(&init, ds)?;
    let mut params = init.params.clone();
    let template = init;
    let mut objective = |p: &[f64]| -> Option<(f64, Vec<f64>)> {
        let pol = GaussianPolicy {
            params: p.to_vec(),
            ..template.clone()
        };
        let (ll, grad) = pol.mean_log_likelihood(&x, &a).ok()?;
        if !ll.is_finite() || grad.iter().any(|v| !v.is_finite()) {
            return None;
        }
        Some((-ll, grad.into_iter().map(|v| -v).collect()))
    };
    let Some((f0, _)) = objective(&params) else {
        return Err(Error::Training {
            reason: "initial log-likelihood is not finite".into(),
            last_checkpoint: None,
        });
    };
    let mut curve = Vec::with_capacity(steps + 1);
    curve.push(-f0);
    let mut opt = Lbfgs::new(10);
    opt.grad_tol = 1e-12;
    let mut converged = false;
    for _ in 0..steps {
        if converged {
            curve.push(*curve.last().expect("non-empty"));
            continue;
        }
        match opt.step(&mut params, &mut objective) {
            LbfgsStep::Improved(f) => curve.push(-f),
            LbfgsStep::Converged(f) => {
                converged = true;
                curve.push(-f);
            }
            LbfgsStep::NonFinite => {
                return Err(Error::Training {
                    reason: "log-likelihood diverged".into(),
                    last_checkpoint: Some(params),
                })
            }
        }
    }
    let policy = GaussianPolicy {
        params,
        ..template.clone()
    };
    Ok((
        policy,
        FitReport {
            log_likelihood: curve,
            converged,
        },
    ))
}

use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::{decode_index, CategoricalPolicy};
use crate::rng::stream_rng;
use crate::theory::FiniteMDP;
use crate::trajectory::{Trajectory, TrajectoryDataset};

/// One-dimensional double integrator driven toward a goal position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PointMassConfig {
    /// Last step index; episodes have `horizon + 1` steps.
    #[serde(default = "default_pm_horizon")]
    pub horizon: usize,
    #[serde(default = "one")]
    pub discount: f64,
    #[serde(default = "one")]
    pub goal: f64,
    /// Velocity change per step at full thrust.
    #[serde(default = "default_accel")]
    pub accel: f64,
    #[serde(default = "default_dt")]
    pub dt: f64,
    /// Initial position is uniform in `[−spread, spread]`, velocity starts at 0.
    #[serde(default = "default_spread")]
    pub init_spread: f64,
    /// Proportional gain of the reference controller; large values approach bang-bang.
    #[serde(default = "default_gain")]
    pub expert_gain: f64,
}

fn default_pm_horizon() -> usize {
    19
}
fn one() -> f64 {
    1.0
}
fn default_accel() -> f64 {
    0.4
}
fn default_dt() -> f64 {
    0.1
}
fn default_spread() -> f64 {
    0.2
}
fn default_gain() -> f64 {
    8.0
}

impl Default for PointMassConfig {
    fn default() -> Self {
        PointMassConfig {
            horizon: default_pm_horizon(),
            discount: 1.0,
            goal: 1.0,
            accel: default_accel(),
            dt: default_dt(),
            init_spread: default_spread(),
            expert_gain: default_gain(),
        }
    }
}

impl PointMassConfig {
    fn validate(&self) -> Result<()> {
        let positive = [self.accel, self.dt, self.expert_gain];
        if positive.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
            return Err(Error::invalid("point mass accel, dt and expert_gain must be positive"));
        }
        if !(self.init_spread >= 0.0) || !self.goal.is_finite() {
            return Err(Error::invalid("point mass init_spread must be non-negative and goal finite"));
        }
        if !(self.discount > 0.0 && self.discount <= 1.0) {
            return Err(Error::invalid(format!("discount {} not in (0, 1]", self.discount)));
        }
        Ok(())
    }

    /// Saturated braking-distance controller: full thrust toward the goal until
    /// the stopping distance at full reverse thrust covers the remaining gap.
    pub fn reference_action(&self, state: &[f64]) -> Vec<f64> {
        let (x, v) = (state[0], state[1]);
        let stop = self.dt * v * v.abs() / (2.0 * self.accel);
        vec![(self.expert_gain * (self.goal - x - stop)).clamp(-1.0, 1.0)]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ToyEnvironment {
    ChainMdp { mdp: FiniteMDP },
    #[serde(rename = "point_mass_1d")]
    PointMass1d(PointMassConfig),
}

impl ToyEnvironment {
    pub fn point_mass() -> Self {
        ToyEnvironment::PointMass1d(PointMassConfig::default())
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            ToyEnvironment::ChainMdp { mdp } => mdp.validate(),
            ToyEnvironment::PointMass1d(c) => c.validate(),
        }
    }

    pub fn state_dim(&self) -> usize {
        match self {
            ToyEnvironment::ChainMdp { .. } => 1,
            ToyEnvironment::PointMass1d(_) => 2,
        }
    }

    pub fn action_dim(&self) -> usize {
        1
    }

    pub fn horizon(&self) -> usize {
        match self {
            ToyEnvironment::ChainMdp { mdp } => mdp.horizon,
            ToyEnvironment::PointMass1d(c) => c.horizon,
        }
    }

    pub fn discount(&self) -> f64 {
        match self {
            ToyEnvironment::ChainMdp { mdp } => mdp.discount,
            ToyEnvironment::PointMass1d(c) => c.discount,
        }
    }

    pub fn reset<R: Rng>(&self, rng: &mut R) -> Vec<f64> {
        match self {
            ToyEnvironment::ChainMdp { mdp } => vec![mdp.sample_initial(rng) as f64],
            ToyEnvironment::PointMass1d(c) => {
                let x = if c.init_spread > 0.0 {
                    rng.random_range(-c.init_spread..=c.init_spread)
                } else {
                    0.0
                };
                vec![x, 0.0]
            }
        }
    }

    /// Maps a raw model output onto the action the environment executes; chain
    /// actions are rounded to the nearest valid index.
    pub fn executable_action(&self, raw: &[f64]) -> Vec<f64> {
        match self {
            ToyEnvironment::ChainMdp { mdp } => {
                let hi = (mdp.num_actions - 1) as f64;
                let a = if raw[0].is_finite() { raw[0].round().clamp(0.0, hi) } else { raw[0] };
                vec![a]
            }
            ToyEnvironment::PointMass1d(_) => raw.to_vec(),
        }
    }

    /// Reward of `(state, action)` and the next state.
    pub fn step<R: Rng>(&self, state: &[f64], action: &[f64], rng: &mut R) -> Result<(f64, Vec<f64>)> {
        if action.len() != 1 {
            return Err(Error::shape(format!("action has dim {}, environment expects 1", action.len())));
        }
        match self {
            ToyEnvironment::ChainMdp { mdp } => {
                let s = decode_index(state, "state")?;
                let a = decode_index(action, "action")?;
                if s >= mdp.num_states || a >= mdp.num_actions {
                    return Err(Error::Simulation(format!("state {s} / action {a} outside the chain")));
                }
                let next = mdp.sample_next(s, a, rng);
                Ok((mdp.rewards[s][a], vec![next as f64]))
            }
            ToyEnvironment::PointMass1d(c) => {
                let u = action[0].clamp(-1.0, 1.0);
                let v = state[1] + c.accel * u;
                let x = state[0] + c.dt * v;
                let next = vec![x, v];
                if next.iter().any(|z| !z.is_finite()) {
                    return Err(Error::Simulation(format!("non-finite state {next:?} after action {}", action[0])));
                }
                Ok((-(x - c.goal).abs(), next))
            }
        }
    }
}

/// Data-collection policies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BehaviorSpec {
    /// Uniform over `[−1, 1]` (point mass) or over the actions (chain).
    Uniform,
    /// Reference controller plus Gaussian action noise (point mass only).
    BangBang { noise_std: f64 },
    /// State-independent Gaussian actions (point mass only).
    Gaussian { mean: f64, std: f64 },
    /// Tabular action probabilities per state (chain only).
    Categorical { probs: Vec<Vec<f64>> },
    /// Each episode uses one component drawn with the given weights.
    Mixture { components: Vec<BehaviorSpec>, weights: Vec<f64> },
}

impl BehaviorSpec {
    /// Equal-weight mixture of a lightly perturbed reference controller and
    /// uniform noise.
    pub fn mixed_quality() -> Self {
        BehaviorSpec::Mixture {
            components: vec![BehaviorSpec::BangBang { noise_std: 0.1 }, BehaviorSpec::Uniform],
            weights: vec![0.5, 0.5],
        }
    }

    pub fn validate(&self, env: &ToyEnvironment) -> Result<()> {
        let chain = matches!(env, ToyEnvironment::ChainMdp { .. });
        match self {
            BehaviorSpec::Uniform => Ok(()),
            BehaviorSpec::BangBang { noise_std } => {
                if chain {
                    return Err(Error::invalid("bang_bang behavior needs the point mass environment"));
                }
                if !(*noise_std >= 0.0) || !noise_std.is_finite() {
                    return Err(Error::invalid("noise_std must be non-negative"));
                }
                Ok(())
            }
            BehaviorSpec::Gaussian { mean, std } => {
                if chain {
                    return Err(Error::invalid("gaussian behavior needs a continuous action space"));
                }
                if !mean.is_finite() || !(*std > 0.0) || !std.is_finite() {
                    return Err(Error::invalid("gaussian behavior needs a finite mean and positive std"));
                }
                Ok(())
            }
            BehaviorSpec::Categorical { probs } => {
                let ToyEnvironment::ChainMdp { mdp } = env else {
                    return Err(Error::invalid("categorical behavior needs the chain environment"));
                };
                let pi = CategoricalPolicy::from_probs(probs)?;
                if pi.num_states() != mdp.num_states || pi.num_actions() != mdp.num_actions {
                    return Err(Error::shape("categorical behavior does not match the chain's state/action counts"));
                }
                Ok(())
            }
            BehaviorSpec::Mixture { components, weights } => {
                if components.is_empty() || components.len() != weights.len() {
                    return Err(Error::invalid("mixture needs one weight per component"));
                }
                if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) || weights.iter().sum::<f64>() <= 0.0 {
                    return Err(Error::invalid("mixture weights must be non-negative with a positive sum"));
                }
                components.iter().try_for_each(|c| c.validate(env))
            }
        }
    }

    /// Picks the component used for a whole episode.
    fn resolve<R: Rng>(&self, rng: &mut R) -> &BehaviorSpec {
        match self {
            BehaviorSpec::Mixture { components, weights } => {
                let total: f64 = weights.iter().sum();
                let u = rng.random::<f64>() * total;
                let mut acc = 0.0;
                for (c, w) in components.iter().zip(weights) {
                    acc += w;
                    if u < acc {
                        return c.resolve(rng);
                    }
                }
                components.last().expect("validated non-empty").resolve(rng)
            }
            other => other,
        }
    }

    fn act<R: Rng>(&self, env: &ToyEnvironment, state: &[f64], rng: &mut R) -> Result<Vec<f64>> {
        match (self, env) {
            (BehaviorSpec::Uniform, ToyEnvironment::ChainMdp { mdp }) => {
                Ok(vec![rng.random_range(0..mdp.num_actions) as f64])
            }
            (BehaviorSpec::Uniform, ToyEnvironment::PointMass1d(_)) => Ok(vec![rng.random_range(-1.0..=1.0)]),
            (BehaviorSpec::BangBang { noise_std }, ToyEnvironment::PointMass1d(c)) => {
                let mut a = c.reference_action(state);
                if *noise_std > 0.0 {
                    a[0] += Normal::new(0.0, *noise_std).expect("validated std").sample(rng);
                }
                Ok(a)
            }
            (BehaviorSpec::Gaussian { mean, std }, _) => {
                Ok(vec![Normal::new(*mean, *std).expect("validated std").sample(rng)])
            }
            (BehaviorSpec::Categorical { probs }, _) => {
                let pi = CategoricalPolicy::from_probs(probs)?;
                Ok(vec![pi.sample(decode_index(state, "state")?, rng)? as f64])
            }
            _ => Err(Error::invalid("behavior policy is incompatible with the environment")),
        }
    }
}

fn rollout<R: Rng>(env: &ToyEnvironment, spec: &BehaviorSpec, rng: &mut R) -> Result<Trajectory> {
    let policy = spec.resolve(rng);
    let h = env.horizon();
    let mut s = env.reset(rng);
    let (mut states, mut actions, mut rewards) = (Vec::new(), Vec::new(), Vec::new());
    for _ in 0..=h {
        let a = policy.act(env, &s, rng)?;
        let (r, next) = env.step(&s, &a, rng)?;
        states.push(s);
        actions.push(a);
        rewards.push(r);
        s = next;
    }
    Trajectory::new(states, actions, rewards)
}

/// `m` behavior rollouts; episode `i` draws from its own stream of `seed`.
pub fn generate_dataset(env: &ToyEnvironment, behavior: &BehaviorSpec, m: usize, seed: u64) -> Result<TrajectoryDataset> {
    env.validate()?;
    behavior.validate(env)?;
    if m == 0 {
        return Err(Error::invalid("a dataset needs at least one trajectory"));
    }
    let trajs = (0..m)
        .into_par_iter()
        .map(|i| rollout(env, behavior, &mut stream_rng(seed, i as u64)))
        .collect::<Result<Vec<_>>>()?;
    let desc = serde_json::to_string(behavior).expect("behavior spec serializes");
    TrajectoryDataset::with_dims(trajs, env.state_dim(), env.action_dim(), env.discount(), env.horizon(), Some(desc))
}

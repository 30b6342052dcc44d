use rayon::prelude::*;

use super::ToyEnvironment;
use crate::error::{Error, Result};
use crate::policy::{sequence_forward, SequencePolicyModel, TokenWindow};
use crate::rng::stream_rng;

/// A hand-coded policy whose actions the model is compared against.
pub type ReferencePolicy<'a> = &'a (dyn Fn(&[f64]) -> Vec<f64> + Sync);

/// Anything that picks an action from the recent conditioning window, whose
/// last action slot is a placeholder.
pub trait ActionSource: Sync {
    fn context_len(&self) -> usize;

    fn act(&self, window: &TokenWindow) -> Result<Vec<f64>>;

    fn check_dims(&self, _state_dim: usize, _action_dim: usize) -> Result<()> {
        Ok(())
    }
}

impl ActionSource for SequencePolicyModel {
    fn context_len(&self) -> usize {
        self.config().context_len
    }

    fn act(&self, window: &TokenWindow) -> Result<Vec<f64>> {
        sequence_forward(self, window)
    }

    fn check_dims(&self, state_dim: usize, action_dim: usize) -> Result<()> {
        if self.config().state_dim != state_dim || self.config().action_dim != action_dim {
            return Err(Error::shape("model dimensions do not match the environment"));
        }
        Ok(())
    }
}

/// A Markov policy acting on the current state only.
pub struct StatePolicy<F>(pub F);

impl<F: Fn(&[f64]) -> Vec<f64> + Sync> ActionSource for StatePolicy<F> {
    fn context_len(&self) -> usize {
        1
    }

    fn act(&self, window: &TokenWindow) -> Result<Vec<f64>> {
        Ok((self.0)(window.states.last().expect("windows are non-empty")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeFailure {
    pub episode: usize,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    /// Mean over episodes that completed.
    pub mean_return: f64,
    /// Discounted return per completed episode, in episode order.
    pub returns: Vec<f64>,
    /// Mean per-coordinate squared gap to the reference over visited states.
    pub action_mse: Option<f64>,
    pub failures: Vec<EpisodeFailure>,
}

struct Episode {
    ret: f64,
    sq_err: f64,
    steps: usize,
}

fn run_episode(
    env: &ToyEnvironment,
    policy: &dyn ActionSource,
    g0: f64,
    seed: u64,
    episode: usize,
    reference: Option<ReferencePolicy<'_>>,
) -> Result<Episode> {
    let mut rng = stream_rng(seed, episode as u64);
    let k = policy.context_len();
    let da = env.action_dim();
    let mut s = env.reset(&mut rng);
    let (mut states, mut actions, mut rtg) = (Vec::new(), Vec::new(), Vec::new());
    let mut g = g0;
    let (mut ret, mut disc) = (0.0, 1.0);
    let mut sq_err = 0.0;
    for t in 0..=env.horizon() {
        states.push(s.clone());
        rtg.push(g);
        // â_t cannot see a_t, so a zero placeholder completes the window.
        actions.push(vec![0.0; da]);
        let start = (t + 1).saturating_sub(k);
        let window = TokenWindow::new(
            rtg[start..].to_vec(),
            states[start..].to_vec(),
            actions[start..].to_vec(),
            (start..=t).collect(),
        )?;
        let raw = policy.act(&window)?;
        if let Some(r) = reference {
            let want = r(&s);
            sq_err += raw.iter().zip(&want).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        }
        let a = env.executable_action(&raw);
        let (reward, next) = env.step(&s, &a, &mut rng)?;
        *actions.last_mut().expect("pushed above") = a;
        ret += disc * reward;
        disc *= env.discount();
        g -= reward;
        s = next;
    }
    Ok(Episode {
        ret,
        sq_err,
        steps: env.horizon() + 1,
    })
}

/// Closed-loop rollouts of the policy's action (the mean, for a sequence
/// model), conditioned on `g0` and reduced by each observed reward. Episode `i`
/// uses stream `i` of `seed`.
pub fn evaluate_policy(
    env: &ToyEnvironment,
    policy: &dyn ActionSource,
    g0: f64,
    episodes: usize,
    seed: u64,
    reference: Option<ReferencePolicy<'_>>,
) -> Result<EvalReport> {
    env.validate()?;
    if !g0.is_finite() {
        return Err(Error::invalid(format!("target return {g0} is not finite")));
    }
    if episodes == 0 {
        return Err(Error::invalid("at least one evaluation episode is required"));
    }
    policy.check_dims(env.state_dim(), env.action_dim())?;
    let results: Vec<Result<Episode>> = (0..episodes)
        .into_par_iter()
        .map(|i| run_episode(env, policy, g0, seed, i, reference))
        .collect();
    let mut returns = Vec::new();
    let mut failures = Vec::new();
    let (mut sq, mut steps) = (0.0, 0usize);
    for (i, r) in results.into_iter().enumerate() {
        match r {
            Ok(ep) => {
                returns.push(ep.ret);
                sq += ep.sq_err;
                steps += ep.steps;
            }
            Err(e) => failures.push(EpisodeFailure {
                episode: i,
                message: e.to_string(),
            }),
        }
    }
    if returns.is_empty() {
        return Err(Error::Simulation(format!("all {episodes} evaluation episodes failed")));
    }
    Ok(EvalReport {
        mean_return: returns.iter().sum::<f64>() / returns.len() as f64,
        returns,
        action_mse: reference.map(|_| sq / (steps * env.action_dim()) as f64),
        failures,
    })
}

/// Ninety percent of the best episode return in the data, read as a 10% gap
/// below the best: `0.9 · best` when it is positive and `1.1 · best` when it
/// is negative.
pub fn default_target_return(returns: &[f64]) -> f64 {
    let best = returns.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    best - 0.1 * best.abs()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::SequenceConfig;
    use crate::theory::FiniteMDP;
    use crate::training::PointMassConfig;

    fn model(sd: usize) -> SequencePolicyModel {
        let cfg = SequenceConfig {
            context_len: 5,
            embed_dim: 8,
            n_layers: 1,
            ..SequenceConfig::new(sd, 1)
        };
        SequencePolicyModel::new(cfg, 2).unwrap()
    }

    #[test]
    fn zero_reward_chain_has_zero_return() {
        let mut mdp = FiniteMDP::chain_2x2();
        mdp.rewards = vec![vec![0.0; 2]; 2];
        let env = ToyEnvironment::ChainMdp { mdp };
        let r = evaluate_policy(&env, &model(1), 1.0, 4, 0, None).unwrap();
        assert_eq!(r.mean_return, 0.0);
        assert!(r.failures.is_empty());
    }

    #[test]
    fn single_episode_mean_is_its_return_and_runs_are_deterministic() {
        let env = ToyEnvironment::point_mass();
        let m = model(2);
        let r = evaluate_policy(&env, &m, -3.0, 1, 9, None).unwrap();
        assert_eq!(r.returns.len(), 1);
        assert_eq!(r.mean_return, r.returns[0]);
        let again = evaluate_policy(&env, &m, -3.0, 1, 9, None).unwrap();
        assert_eq!(r, again);
    }

    #[test]
    fn reference_against_itself_has_zero_mse() {
        let pm = PointMassConfig::default();
        let env = ToyEnvironment::PointMass1d(pm.clone());
        let reference = |s: &[f64]| pm.reference_action(s);
        let own = evaluate_policy(&env, &StatePolicy(reference), 0.0, 3, 0, Some(&reference)).unwrap();
        assert_eq!(own.action_mse, Some(0.0));
        let r = evaluate_policy(&env, &model(2), -3.0, 2, 0, Some(&reference)).unwrap();
        assert!(r.action_mse.unwrap() > 0.0);
        assert!(own.mean_return > r.mean_return);
    }

    #[test]
    fn default_target_sits_below_the_best_return() {
        assert_eq!(default_target_return(&[1.0, 10.0, 4.0]), 9.0);
        assert_eq!(default_target_return(&[-30.0, -10.0]), -11.0);
    }

    #[test]
    fn non_finite_target_is_rejected() {
        let env = ToyEnvironment::point_mass();
        assert!(evaluate_policy(&env, &model(2), f64::NAN, 1, 0, None).unwrap_err().is_validation());
    }
}

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::CategoricalPolicy;
use crate::trajectory::{Trajectory, TrajectoryDataset};

/// Trajectory count above which exhaustive enumeration is refused.
pub const ENUMERATION_LIMIT: u128 = 1_000_000;

/// Finite-horizon tabular MDP; an episode has steps `t = 0..=horizon`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FiniteMDP {
    pub num_states: usize,
    pub num_actions: usize,
    /// `transitions[s][a][s']`.
    pub transitions: Vec<Vec<Vec<f64>>>,
    /// `rewards[s][a]`.
    pub rewards: Vec<Vec<f64>>,
    pub initial: Vec<f64>,
    pub horizon: usize,
    pub discount: f64,
}

fn is_distribution(p: &[f64]) -> bool {
    p.iter().all(|v| *v >= 0.0 && v.is_finite()) && (p.iter().sum::<f64>() - 1.0).abs() <= 1e-12
}

impl FiniteMDP {
    pub fn validate(&self) -> Result<()> {
        let (s, a) = (self.num_states, self.num_actions);
        if s == 0 || a == 0 {
            return Err(Error::invalid("MDP needs at least one state and one action"));
        }
        if self.initial.len() != s || !is_distribution(&self.initial) {
            return Err(Error::invalid("initial distribution must have one entry per state and sum to 1"));
        }
        if self.transitions.len() != s || self.rewards.len() != s {
            return Err(Error::shape("transition and reward tables need one row per state"));
        }
        for (si, (rows, rew)) in self.transitions.iter().zip(&self.rewards).enumerate() {
            if rows.len() != a || rew.len() != a {
                return Err(Error::shape(format!("state {si}: expected {a} actions")));
            }
            crate::error::ensure_finite(rew, "reward table")?;
            for (ai, p) in rows.iter().enumerate() {
                if p.len() != s || !is_distribution(p) {
                    return Err(Error::invalid(format!("P(·|{si},{ai}) must be a distribution over {s} states")));
                }
            }
        }
        if !(self.discount > 0.0 && self.discount <= 1.0) {
            return Err(Error::invalid(format!("discount {} not in (0, 1]", self.discount)));
        }
        Ok(())
    }

    /// 3 states, 2 actions, three steps (`H = 2`), `γ = 0.9`. Action 1 drifts
    /// right, action 0 drifts left; rewards grow toward state 2.
    pub fn chain_3x2() -> Self {
        let moves = |s: usize, a: usize| -> Vec<f64> {
            let mut p = vec![0.0; 3];
            if a == 1 {
                p[(s + 1).min(2)] += 0.8;
                p[s] += 0.2;
            } else {
                p[s.saturating_sub(1)] += 0.7;
                p[s] += 0.3;
            }
            p
        };
        FiniteMDP {
            num_states: 3,
            num_actions: 2,
            transitions: (0..3).map(|s| (0..2).map(|a| moves(s, a)).collect()).collect(),
            rewards: vec![vec![0.0, 0.1], vec![0.2, 0.5], vec![1.0, 0.8]],
            initial: vec![0.5, 0.3, 0.2],
            horizon: 2,
            discount: 0.9,
        }
    }

    /// 2 states, 2 actions, `H = 2`, undiscounted. Action 0 mostly stays,
    /// action 1 mostly switches.
    pub fn chain_2x2() -> Self {
        FiniteMDP {
            num_states: 2,
            num_actions: 2,
            transitions: vec![
                vec![vec![0.9, 0.1], vec![0.2, 0.8]],
                vec![vec![0.1, 0.9], vec![0.8, 0.2]],
            ],
            rewards: vec![vec![1.0, 0.0], vec![0.0, 2.0]],
            initial: vec![0.7, 0.3],
            horizon: 2,
            discount: 1.0,
        }
    }

    fn check_policy(&self, pi: &CategoricalPolicy) -> Result<()> {
        if pi.num_states() != self.num_states || pi.num_actions() != self.num_actions {
            return Err(Error::shape(format!(
                "policy is {}×{}, MDP is {}×{}",
                pi.num_states(),
                pi.num_actions(),
                self.num_states,
                self.num_actions
            )));
        }
        Ok(())
    }

    /// Number of `(s_0, a_0, …, s_H, a_H)` sequences.
    pub fn trajectory_count(&self) -> u128 {
        ((self.num_states * self.num_actions) as u128).saturating_pow(self.horizon as u32 + 1)
    }

    pub fn sample_next<R: Rng>(&self, s: usize, a: usize, rng: &mut R) -> usize {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (next, p) in self.transitions[s][a].iter().enumerate() {
            acc += p;
            if u < acc {
                return next;
            }
        }
        self.num_states - 1
    }

    pub fn sample_initial<R: Rng>(&self, rng: &mut R) -> usize {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (s, p) in self.initial.iter().enumerate() {
            acc += p;
            if u < acc {
                return s;
            }
        }
        self.num_states - 1
    }

    pub fn rollout<R: Rng>(&self, pi: &CategoricalPolicy, rng: &mut R) -> Result<Trajectory> {
        let mut s = self.sample_initial(rng);
        let mut states = Vec::with_capacity(self.horizon + 1);
        let mut actions = Vec::with_capacity(self.horizon + 1);
        let mut rewards = Vec::with_capacity(self.horizon + 1);
        for t in 0..=self.horizon {
            let a = pi.sample(s, rng)?;
            states.push(vec![s as f64]);
            actions.push(vec![a as f64]);
            rewards.push(self.rewards[s][a]);
            if t < self.horizon {
                s = self.sample_next(s, a, rng);
            }
        }
        Trajectory::new(states, actions, rewards)
    }

    pub fn sample_dataset<R: Rng>(&self, pi: &CategoricalPolicy, m: usize, rng: &mut R) -> Result<TrajectoryDataset> {
        self.validate()?;
        self.check_policy(pi)?;
        let trajs = (0..m).map(|_| self.rollout(pi, rng)).collect::<Result<Vec<_>>>()?;
        TrajectoryDataset::with_dims(trajs, 1, 1, self.discount, self.horizon, Some("finite_mdp".into()))
    }

    /// Every positive-probability trajectory under `pi` with its probability.
    pub fn enumerate(&self, pi: &CategoricalPolicy) -> Result<Vec<(Trajectory, f64)>> {
        self.validate()?;
        self.check_policy(pi)?;
        let count = self.trajectory_count();
        if count > ENUMERATION_LIMIT {
            return Err(Error::OracleScale {
                count,
                limit: ENUMERATION_LIMIT,
            });
        }
        let mut out = Vec::new();
        let mut path = Vec::with_capacity(self.horizon + 1);
        for s0 in 0..self.num_states {
            if self.initial[s0] > 0.0 {
                self.extend(pi, s0, self.initial[s0], &mut path, &mut out)?;
            }
        }
        Ok(out)
    }

    fn extend(
        &self,
        pi: &CategoricalPolicy,
        s: usize,
        prob: f64,
        path: &mut Vec<(usize, usize)>,
        out: &mut Vec<(Trajectory, f64)>,
    ) -> Result<()> {
        let probs = pi.probs(s)?;
        for (a, pa) in probs.iter().enumerate() {
            let p = prob * pa;
            if p == 0.0 {
                continue;
            }
            path.push((s, a));
            if path.len() == self.horizon + 1 {
                let states = path.iter().map(|&(s, _)| vec![s as f64]).collect();
                let actions = path.iter().map(|&(_, a)| vec![a as f64]).collect();
                let rewards = path.iter().map(|&(s, a)| self.rewards[s][a]).collect();
                out.push((Trajectory::new(states, actions, rewards)?, p));
            } else {
                for (next, pn) in self.transitions[s][a].iter().enumerate() {
                    if *pn > 0.0 {
                        self.extend(pi, next, p * pn, path, out)?;
                    }
                }
            }
            path.pop();
        }
        Ok(())
    }
}

/// `v(π) = E[Σ_t γ^t r_t]` by backward dynamic programming.
pub fn exact_policy_value(mdp: &FiniteMDP, pi: &CategoricalPolicy) -> Result<f64> {
    mdp.validate()?;
    mdp.check_policy(pi)?;
    let mut v = vec![0.0; mdp.num_states];
    for t in (0..=mdp.horizon).rev() {
        let mut next = vec![0.0; mdp.num_states];
        for (s, slot) in next.iter_mut().enumerate() {
            let probs = pi.probs(s)?;
            for (a, pa) in probs.iter().enumerate() {
                let mut q = mdp.rewards[s][a];
                if t < mdp.horizon {
                    q += mdp.discount * mdp.transitions[s][a].iter().zip(&v).map(|(p, v)| p * v).sum::<f64>();
                }
                *slot += pa * q;
            }
        }
        v = next;
    }
    Ok(mdp.initial.iter().zip(&v).map(|(d, v)| d * v).sum())
}

/// `v(π)` as `Σ_ω P_π(ω) G(ω)` over the enumerated trajectories.
pub fn enumeration_value(mdp: &FiniteMDP, pi: &CategoricalPolicy) -> Result<f64> {
    let mut acc = 0.0;
    for (traj, p) in mdp.enumerate(pi)? {
        acc += p * crate::trajectory::discounted_return(&traj, mdp.discount)?;
    }
    Ok(acc)
}

use rand::Rng;

use super::{check_score, ScorePolicy, StepDensity, TrajectoryPolicy};
use crate::error::{Error, Result};
use crate::trajectory::Trajectory;

/// Tabular softmax policy over finite states and actions.
///
/// Parameters are the `S × A` logits, row-major. Trajectories encode the state
/// and the action each as a single real holding the integer index.
#[derive(Debug, Clone, PartialEq)]
pub struct CategoricalPolicy {
    num_states: usize,
    num_actions: usize,
    logits: Vec<f64>,
}

impl CategoricalPolicy {
    pub fn new(num_states: usize, num_actions: usize, logits: Vec<f64>) -> Result<Self> {
        if num_states == 0 || num_actions == 0 {
            return Err(Error::invalid("categorical policy needs at least one state and one action"));
        }
        if logits.len() != num_states * num_actions {
            return Err(Error::shape(format!(
                "expected {} logits, got {}",
                num_states * num_actions,
                logits.len()
            )));
        }
        crate::error::ensure_finite(&logits, "categorical logits")?;
        Ok(CategoricalPolicy {
            num_states,
            num_actions,
            logits,
        })
    }

    pub fn uniform(num_states: usize, num_actions: usize) -> Result<Self> {
        Self::new(num_states, num_actions, vec![0.0; num_states * num_actions])
    }

    /// Policy with the given per-state probabilities (each row positive, summing to one).
    pub fn from_probs(probs: &[Vec<f64>]) -> Result<Self> {
        let s = probs.len();
        let a = probs.first().map_or(0, Vec::len);
        let mut logits = Vec::with_capacity(s * a);
        for row in probs {
            if row.len() != a {
                return Err(Error::shape("ragged probability table"));
            }
            let total: f64 = row.iter().sum();
            if row.iter().any(|p| !(*p > 0.0)) || (total - 1.0).abs() > 1e-9 {
                return Err(Error::invalid("probabilities must be positive and sum to one"));
            }
            logits.extend(row.iter().map(|p| p.ln()));
        }
        Self::new(s, a, logits)
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    pub fn with_logits(&self, logits: Vec<f64>) -> Result<Self> {
        Self::new(self.num_states, self.num_actions, logits)
    }

    fn check_state(&self, s: usize) -> Result<()> {
        if s >= self.num_states {
            return Err(Error::Index {
                index: s,
                len: self.num_states,
            });
        }
        Ok(())
    }

    /// Softmax of the logits for state `s`.
    pub fn probs(&self, s: usize) -> Result<Vec<f64>> {
        self.check_state(s)?;
        let row = &self.logits[s * self.num_actions..(s + 1) * self.num_actions];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = row.iter().map(|l| (l - m).exp()).collect();
        let z: f64 = e.iter().sum();
        Ok(e.into_iter().map(|v| v / z).collect())
    }

    pub fn prob(&self, s: usize, a: usize) -> Result<f64> {
        if a >= self.num_actions {
            return Err(Error::Index {
                index: a,
                len: self.num_actions,
            });
        }
        Ok(self.probs(s)?[a])
    }

    pub fn log_prob(&self, s: usize, a: usize) -> Result<f64> {
        Ok(self.prob(s, a)?.ln())
    }

    pub fn sample<R: Rng>(&self, s: usize, rng: &mut R) -> Result<usize> {
        let p = self.probs(s)?;
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (a, pa) in p.iter().enumerate() {
            acc += pa;
            if u < acc {
                return Ok(a);
            }
        }
        Ok(self.num_actions - 1)
    }

    /// `∇ log π(a|s)`: `onehot(a) − π(·|s)` in the row of `s`, zero elsewhere.
    pub fn score(&self, s: usize, a: usize) -> Result<Vec<f64>> {
        let p = self.probs(s)?;
        if a >= self.num_actions {
            return Err(Error::Index {
                index: a,
                len: self.num_actions,
            });
        }
        let mut g = vec![0.0; self.logits.len()];
        for (j, pj) in p.iter().enumerate() {
            g[s * self.num_actions + j] = if j == a { 1.0 } else { 0.0 } - pj;
        }
        Ok(g)
    }

    fn decode(&self, traj: &Trajectory, t: usize) -> Result<(usize, usize)> {
        let s = decode_index(traj.state(t), "state")?;
        let a = decode_index(traj.action(t), "action")?;
        Ok((s, a))
    }
}

/// Reads a one-element vector holding a non-negative integer index.
pub fn decode_index(v: &[f64], what: &str) -> Result<usize> {
    match v {
        [x] if *x >= 0.0 && x.fract() == 0.0 => Ok(*x as usize),
        _ => Err(Error::invalid(format!("{what} must be a single non-negative integer index"))),
    }
}

impl TrajectoryPolicy for CategoricalPolicy {
    fn step_densities(&self, traj: &Trajectory) -> Result<Vec<StepDensity>> {
        (0..traj.len())
            .map(|t| {
                let (s, a) = self.decode(traj, t)?;
                Ok(StepDensity {
                    log_prob: self.log_prob(s, a)?,
                    gaussian: None,
                })
            })
            .collect()
    }
}

impl ScorePolicy for CategoricalPolicy {
    fn num_params(&self) -> usize {
        self.logits.len()
    }

    fn weighted_score(&self, traj: &Trajectory, weights: &[f64]) -> Result<Vec<f64>> {
        if weights.len() != traj.len() {
            return Err(Error::shape("one weight per trajectory step required"));
        }
        let mut g = vec![0.0; self.logits.len()];
        for (t, w) in weights.iter().enumerate() {
            let (s, a) = self.decode(traj, t)?;
            for (gi, si) in g.iter_mut().zip(self.score(s, a)?) {
                *gi += w * si;
            }
        }
        check_score(&g, "categorical policy score")?;
        Ok(g)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn probabilities_are_normalised() {
        let p = CategoricalPolicy::new(2, 3, vec![0.1, -2.0, 3.0, 50.0, 49.0, -50.0]).unwrap();
        for s in 0..2 {
            let pr = p.probs(s).unwrap();
            assert!(pr.iter().all(|v| *v > 0.0));
            assert!((pr.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        }
        assert!(matches!(p.probs(2), Err(Error::Index { .. })));
    }

    #[test]
    fn from_probs_round_trips() {
        let p = CategoricalPolicy::from_probs(&[vec![0.2, 0.8], vec![0.5, 0.5]]).unwrap();
        assert!((p.prob(0, 1).unwrap() - 0.8).abs() < 1e-15);
        assert!((p.prob(1, 0).unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn score_matches_finite_differences() {
        let p = CategoricalPolicy::new(2, 3, vec![0.3, -0.1, 0.7, 1.0, 0.0, -1.0]).unwrap();
        let g = p.score(1, 2).unwrap();
        let h = 1e-6;
        for i in 0..6 {
            let mut up = p.logits.clone();
            up[i] += h;
            let mut dn = p.logits.clone();
            dn[i] -= h;
            let fd = (p.with_logits(up).unwrap().log_prob(1, 2).unwrap()
                - p.with_logits(dn).unwrap().log_prob(1, 2).unwrap())
                / (2.0 * h);
            assert!((fd - g[i]).abs() < 1e-8);
        }
    }
}

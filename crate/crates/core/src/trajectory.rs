//! Trajectories, offline datasets, return computations and the JSON Lines
//! dataset format.
//!
//! A dataset file starts with one metadata record
//! (`state_dim`, `action_dim`, `horizon`, `discount`, optional
//! `behavior_descriptor`) followed by one trajectory record per line with keys
//! `states`, `actions` and `rewards`. Floats are written in shortest
//! round-trip form, so `load_dataset(save_dataset(ds)) == ds` bit for bit.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, Error, Result};

/// One episode `(s_t, a_t, r_t)` for `t = 0..=H`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    states: Vec<Vec<f64>>,
    actions: Vec<Vec<f64>>,
    rewards: Vec<f64>,
}

impl Trajectory {
    pub fn new(states: Vec<Vec<f64>>, actions: Vec<Vec<f64>>, rewards: Vec<f64>) -> Result<Self> {
        let len = rewards.len();
        if len == 0 {
            return Err(Error::invalid("trajectory must contain at least one step"));
        }
        if states.len() != len || actions.len() != len {
            return Err(Error::shape(format!(
                "trajectory sequences differ in length: {} states, {} actions, {} rewards",
                states.len(),
                actions.len(),
                len
            )));
        }
        let sd = states[0].len();
        let ad = actions[0].len();
        for (t, (s, a)) in states.iter().zip(&actions).enumerate() {
            if s.len() != sd || a.len() != ad {
                return Err(Error::shape(format!(
                    "step {t}: state dim {} / action dim {} differ from step 0 ({sd} / {ad})",
                    s.len(),
                    a.len()
                )));
            }
            ensure_finite(s, &format!("state at step {t}"))?;
            ensure_finite(a, &format!("action at step {t}"))?;
        }
        ensure_finite(&rewards, "rewards")?;
        Ok(Trajectory {
            states,
            actions,
            rewards,
        })
    }

    /// Number of steps, `H + 1`.
    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Final step index `H`.
    pub fn last_step(&self) -> usize {
        self.len() - 1
    }

    pub fn states(&self) -> &[Vec<f64>] {
        &self.states
    }

    pub fn actions(&self) -> &[Vec<f64>] {
        &self.actions
    }

    pub fn rewards(&self) -> &[f64] {
        &self.rewards
    }

    pub fn state(&self, t: usize) -> &[f64] {
        &self.states[t]
    }

    pub fn action(&self, t: usize) -> &[f64] {
        &self.actions[t]
    }

    pub fn state_dim(&self) -> usize {
        self.states[0].len()
    }

    pub fn action_dim(&self) -> usize {
        self.actions[0].len()
    }

    /// Undiscounted tail sums `q_{t:H}` for every `t`.
    pub fn returns_to_go(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.len()];
        let mut acc = 0.0;
        for t in (0..self.len()).rev() {
            acc += self.rewards[t];
            out[t] = acc;
        }
        out
    }
}

/// `Σ_t γ^t r_t`.
pub fn discounted_return(traj: &Trajectory, discount: f64) -> Result<f64> {
    if !(discount > 0.0 && discount <= 1.0) {
        return Err(Error::invalid(format!("discount {discount} not in (0, 1]")));
    }
    // Horner form from the tail keeps γ = 1 identical to the undiscounted tail sum.
    let mut acc = 0.0;
    for &r in traj.rewards.iter().rev() {
        acc = r + discount * acc;
    }
    if !acc.is_finite() {
        return Err(Error::invalid("discounted return is not finite"));
    }
    Ok(acc)
}

/// `q_{t:H} = Σ_{s=t}^{H} r_s`.
pub fn return_to_go(traj: &Trajectory, t: usize) -> Result<f64> {
    if t >= traj.len() {
        return Err(Error::Index {
            index: t,
            len: traj.len(),
        });
    }
    let mut acc = 0.0;
    for &r in traj.rewards[t..].iter().rev() {
        acc += r;
    }
    Ok(acc)
}

/// Conditioning values `(g_0, …, g_H)` with `g_{t+1} = g_t − r_t`, so each
/// `g_t` is the return still to be collected from step `t`.
pub fn rtg_conditioning_sequence(traj: &Trajectory, g0: f64) -> Result<Vec<f64>> {
    if !g0.is_finite() {
        return Err(Error::invalid(format!("initial return-to-go {g0} is not finite")));
    }
    let mut out = Vec::with_capacity(traj.len());
    let mut g = g0;
    out.push(g);
    for &r in &traj.rewards[..traj.len() - 1] {
        g -= r;
        out.push(g);
    }
    Ok(out)
}

/// The offline data `D`: `m ≥ 1` trajectories plus their shared metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryDataset {
    trajectories: Vec<Trajectory>,
    state_dim: usize,
    action_dim: usize,
    discount: f64,
    horizon: usize,
    behavior_descriptor: Option<String>,
}

impl TrajectoryDataset {
    pub fn new(
        trajectories: Vec<Trajectory>,
        discount: f64,
        horizon: usize,
        behavior_descriptor: Option<String>,
    ) -> Result<Self> {
        let first = trajectories
            .first()
            .ok_or_else(|| Error::Schema("dataset must contain at least one trajectory".into()))?;
        let (state_dim, action_dim) = (first.state_dim(), first.action_dim());
        Self::with_dims(
            trajectories,
            state_dim,
            action_dim,
            discount,
            horizon,
            behavior_descriptor,
        )
    }

    pub fn with_dims(
        trajectories: Vec<Trajectory>,
        state_dim: usize,
        action_dim: usize,
        discount: f64,
        horizon: usize,
        behavior_descriptor: Option<String>,
    ) -> Result<Self> {
        if trajectories.is_empty() {
            return Err(Error::Schema("dataset must contain at least one trajectory".into()));
        }
        if state_dim == 0 || action_dim == 0 {
            return Err(Error::Schema("state_dim and action_dim must be positive".into()));
        }
        if !(discount > 0.0 && discount <= 1.0) {
            return Err(Error::Schema(format!("discount {discount} not in (0, 1]")));
        }
        for (i, traj) in trajectories.iter().enumerate() {
            if traj.state_dim() != state_dim || traj.action_dim() != action_dim {
                return Err(Error::Schema(format!(
                    "trajectory {i}: dims ({}, {}) differ from dataset ({state_dim}, {action_dim})",
                    traj.state_dim(),
                    traj.action_dim()
                )));
            }
            if traj.len() > horizon + 1 {
                return Err(Error::Schema(format!(
                    "trajectory {i}: length {} exceeds horizon + 1 = {}",
                    traj.len(),
                    horizon + 1
                )));
            }
        }
        Ok(TrajectoryDataset {
            trajectories,
            state_dim,
            action_dim,
            discount,
            horizon,
            behavior_descriptor,
        })
    }

    pub fn trajectories(&self) -> &[Trajectory] {
        &self.trajectories
    }

    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    pub fn discount(&self) -> f64 {
        self.discount
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn behavior_descriptor(&self) -> Option<&str> {
        self.behavior_descriptor.as_deref()
    }

    /// Number of `(trajectory, step)` pairs.
    pub fn num_steps(&self) -> usize {
        self.trajectories.iter().map(Trajectory::len).sum()
    }

    /// A dataset over a subset of trajectories (indices may repeat).
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        let mut trajs = Vec::with_capacity(indices.len());
        for &i in indices {
            let t = self.trajectories.get(i).ok_or(Error::Index {
                index: i,
                len: self.len(),
            })?;
            trajs.push(t.clone());
        }
        Self::with_dims(
            trajs,
            self.state_dim,
            self.action_dim,
            self.discount,
            self.horizon,
            self.behavior_descriptor.clone(),
        )
    }

    /// Discounted return of every trajectory, in order.
    pub fn discounted_returns(&self) -> Vec<f64> {
        self.trajectories
            .iter()
            .map(|t| discounted_return(t, self.discount).expect("validated dataset"))
            .collect()
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MetadataRecord {
    state_dim: usize,
    action_dim: usize,
    horizon: usize,
    discount: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    behavior_descriptor: Option<String>,
}

// `null` is how serde_json renders a non-finite float; keep it distinguishable
// from a syntax error so it can be reported as rejected input.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct TrajectoryRecordIn {
    states: Vec<Vec<Option<f64>>>,
    actions: Vec<Vec<Option<f64>>>,
    rewards: Vec<Option<f64>>,
}

#[derive(Serialize)]
struct TrajectoryRecordOut<'a> {
    states: &'a [Vec<f64>],
    actions: &'a [Vec<f64>],
    rewards: &'a [f64],
}

pub fn save_dataset(ds: &TrajectoryDataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_dataset(ds, &mut w).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_dataset(ds: &TrajectoryDataset, w: &mut impl Write) -> std::io::Result<()> {
    let meta = MetadataRecord {
        state_dim: ds.state_dim,
        action_dim: ds.action_dim,
        horizon: ds.horizon,
        discount: ds.discount,
        behavior_descriptor: ds.behavior_descriptor.clone(),
    };
    serde_json::to_writer(&mut *w, &meta)?;
    w.write_all(b"\n")?;
    for traj in &ds.trajectories {
        let rec = TrajectoryRecordOut {
            states: &traj.states,
            actions: &traj.actions,
            rewards: &traj.rewards,
        };
        serde_json::to_writer(&mut *w, &rec)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<TrajectoryDataset> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_dataset(BufReader::new(file))
}

pub fn read_dataset(reader: impl BufRead) -> Result<TrajectoryDataset> {
    let mut meta: Option<MetadataRecord> = None;
    let mut trajectories = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let lineno = idx + 1;
        let line = line.map_err(|e| Error::Parse {
            line: lineno,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        match &meta {
            None => {
                let m: MetadataRecord =
                    serde_json::from_str(&line).map_err(|e| classify_parse(&line, lineno, e))?;
                meta = Some(m);
            }
            Some(m) => {
                let rec: TrajectoryRecordIn =
                    serde_json::from_str(&line).map_err(|e| classify_parse(&line, lineno, e))?;
                let traj = record_to_trajectory(rec, lineno)?;
                if traj.state_dim() != m.state_dim || traj.action_dim() != m.action_dim {
                    return Err(Error::Schema(format!(
                        "line {lineno}: dims ({}, {}) do not match metadata ({}, {})",
                        traj.state_dim(),
                        traj.action_dim(),
                        m.state_dim,
                        m.action_dim
                    )));
                }
                trajectories.push(traj);
            }
        }
    }
    let meta = meta.ok_or_else(|| Error::Schema("empty dataset file: missing metadata record".into()))?;
    TrajectoryDataset::with_dims(
        trajectories,
        meta.state_dim,
        meta.action_dim,
        meta.discount,
        meta.horizon,
        meta.behavior_descriptor,
    )
}

fn classify_parse(line: &str, lineno: usize, e: serde_json::Error) -> Error {
    let non_finite_literal = ["NaN", "Infinity", "inf"].iter().any(|tok| line.contains(tok));
    if non_finite_literal {
        Error::invalid(format!("line {lineno}: non-finite number literal"))
    } else {
        Error::Parse {
            line: lineno,
            message: e.to_string(),
        }
    }
}

fn unwrap_finite(values: Vec<Option<f64>>, what: &str, lineno: usize) -> Result<Vec<f64>> {
    values
        .into_iter()
        .enumerate()
        .map(|(j, v)| match v {
            Some(x) if x.is_finite() => Ok(x),
            _ => Err(Error::invalid(format!(
                "line {lineno}: non-finite {what} component at position {j}"
            ))),
        })
        .collect()
}

fn record_to_trajectory(rec: TrajectoryRecordIn, lineno: usize) -> Result<Trajectory> {
    let states = rec
        .states
        .into_iter()
        .map(|s| unwrap_finite(s, "state", lineno))
        .collect::<Result<Vec<_>>>()?;
    let actions = rec
        .actions
        .into_iter()
        .map(|a| unwrap_finite(a, "action", lineno))
        .collect::<Result<Vec<_>>>()?;
    let rewards = unwrap_finite(rec.rewards, "reward", lineno)?;
    Trajectory::new(states, actions, rewards).map_err(|e| match e {
        Error::Shape(msg) => Error::Schema(format!("line {lineno}: {msg}")),
        Error::InvalidInput(msg) if msg.contains("at least one step") => {
            Error::Schema(format!("line {lineno}: {msg}"))
        }
        other => other,
    })
}

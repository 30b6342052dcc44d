//! Causal transformer over interleaved `(g_t, s_t, a_t)` tokens.
//!
//! Token `3t` embeds the return-to-go, `3t + 1` the state and `3t + 2` the
//! action of step `t`, each plus a learned timestep embedding. The predicted
//! mean action `â_t` is read from the output at the state token, so it sees
//! `g_{≤t}`, `s_{≤t}` and `a_{<t}` only.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{check_score, gaussian_entropy_of_std, GaussianPolicy, ScorePolicy, StepDensity, TrajectoryPolicy, LN_2PI, VARIANCE_FLOOR};
use crate::error::{Error, Result};
use crate::tape::{Graph, Matrix, NodeId, ParamLayout, ParamSlot};
use crate::trajectory::{rtg_conditioning_sequence, Trajectory, TrajectoryDataset};

/// Decay of the exponential moving average behind `running_mse`.
pub const MSE_EMA_DECAY: f64 = 0.99;

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SequenceConfig {
    pub state_dim: usize,
    pub action_dim: usize,
    #[serde(default = "default_context")]
    pub context_len: usize,
    #[serde(default = "default_embed")]
    pub embed_dim: usize,
    #[serde(default = "default_layers")]
    pub n_layers: usize,
    #[serde(default = "default_heads")]
    pub n_heads: usize,
    #[serde(default = "default_mlp_ratio")]
    pub mlp_ratio: usize,
    /// Size of the timestep embedding table; every timestep must be below it.
    #[serde(default = "default_max_timestep")]
    pub max_timestep: usize,
    /// Returns-to-go are divided by this before embedding.
    #[serde(default = "default_return_scale")]
    pub return_scale: f64,
    /// Squash `â_t` through `tanh` into `(−1, 1)`.
    #[serde(default)]
    pub action_tanh: bool,
}

fn default_context() -> usize {
    20
}
fn default_embed() -> usize {
    32
}
fn default_layers() -> usize {
    2
}
fn default_heads() -> usize {
    1
}
fn default_mlp_ratio() -> usize {
    4
}
fn default_max_timestep() -> usize {
    256
}
fn default_return_scale() -> f64 {
    1.0
}

impl SequenceConfig {
    pub fn new(state_dim: usize, action_dim: usize) -> Self {
        SequenceConfig {
            state_dim,
            action_dim,
            context_len: default_context(),
            embed_dim: default_embed(),
            n_layers: default_layers(),
            n_heads: default_heads(),
            mlp_ratio: default_mlp_ratio(),
            max_timestep: default_max_timestep(),
            return_scale: default_return_scale(),
            action_tanh: false,
        }
    }

    fn validate(&self) -> Result<()> {
        let positive = [
            ("state_dim", self.state_dim),
            ("action_dim", self.action_dim),
            ("context_len", self.context_len),
            ("embed_dim", self.embed_dim),
            ("n_heads", self.n_heads),
            ("mlp_ratio", self.mlp_ratio),
            ("max_timestep", self.max_timestep),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::invalid(format!("sequence model {name} must be positive")));
            }
        }
        if !self.embed_dim.is_multiple_of(self.n_heads) {
            return Err(Error::invalid("embed_dim must be divisible by n_heads"));
        }
        if !(self.return_scale > 0.0 && self.return_scale.is_finite()) {
            return Err(Error::invalid("return_scale must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Block<T> {
    ln1_g: T,
    ln1_b: T,
    wq: T,
    bq: T,
    wk: T,
    bk: T,
    wv: T,
    bv: T,
    wo: T,
    bo: T,
    ln2_g: T,
    ln2_b: T,
    w1: T,
    b1: T,
    w2: T,
    b2: T,
}

impl<T: Copy> Block<T> {
    fn map<U>(&self, mut f: impl FnMut(T) -> U) -> Block<U> {
        Block {
            ln1_g: f(self.ln1_g),
            ln1_b: f(self.ln1_b),
            wq: f(self.wq),
            bq: f(self.bq),
            wk: f(self.wk),
            bk: f(self.bk),
            wv: f(self.wv),
            bv: f(self.bv),
            wo: f(self.wo),
            bo: f(self.bo),
            ln2_g: f(self.ln2_g),
            ln2_b: f(self.ln2_b),
            w1: f(self.w1),
            b1: f(self.b1),
            w2: f(self.w2),
            b2: f(self.b2),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Slots<T> {
    ret_w: T,
    ret_b: T,
    state_w: T,
    state_b: T,
    act_w: T,
    act_b: T,
    time: T,
    ln_e_g: T,
    ln_e_b: T,
    blocks: Vec<Block<T>>,
    ln_f_g: T,
    ln_f_b: T,
    head_w: T,
    head_b: T,
}

impl<T: Copy> Slots<T> {
    fn map<U>(&self, mut f: impl FnMut(T) -> U) -> Slots<U> {
        Slots {
            ret_w: f(self.ret_w),
            ret_b: f(self.ret_b),
            state_w: f(self.state_w),
            state_b: f(self.state_b),
            act_w: f(self.act_w),
            act_b: f(self.act_b),
            time: f(self.time),
            ln_e_g: f(self.ln_e_g),
            ln_e_b: f(self.ln_e_b),
            blocks: self.blocks.iter().map(|b| b.map(&mut f)).collect(),
            ln_f_g: f(self.ln_f_g),
            ln_f_b: f(self.ln_f_b),
            head_w: f(self.head_w),
            head_b: f(self.head_b),
        }
    }
}

fn build_layout(cfg: &SequenceConfig) -> (Slots<ParamSlot>, usize) {
    let d = cfg.embed_dim;
    let m = cfg.mlp_ratio * d;
    let mut pl = ParamLayout::new();
    let slots = Slots {
        ret_w: pl.add(1, d),
        ret_b: pl.add(1, d),
        state_w: pl.add(cfg.state_dim, d),
        state_b: pl.add(1, d),
        act_w: pl.add(cfg.action_dim, d),
        act_b: pl.add(1, d),
        time: pl.add(cfg.max_timestep, d),
        ln_e_g: pl.add(1, d),
        ln_e_b: pl.add(1, d),
        blocks: (0..cfg.n_layers)
            .map(|_| Block {
                ln1_g: pl.add(1, d),
                ln1_b: pl.add(1, d),
                wq: pl.add(d, d),
                bq: pl.add(1, d),
                wk: pl.add(d, d),
                bk: pl.add(1, d),
                wv: pl.add(d, d),
                bv: pl.add(1, d),
                wo: pl.add(d, d),
                bo: pl.add(1, d),
                ln2_g: pl.add(1, d),
                ln2_b: pl.add(1, d),
                w1: pl.add(d, m),
                b1: pl.add(1, m),
                w2: pl.add(m, d),
                b2: pl.add(1, d),
            })
            .collect(),
        ln_f_g: pl.add(1, d),
        ln_f_b: pl.add(1, d),
        head_w: pl.add(d, cfg.action_dim),
        head_b: pl.add(1, cfg.action_dim),
    };
    (slots, pl.total())
}

/// One token of an interleaved window.
#[derive(Debug, Clone, PartialEq)]
pub enum Token {
    ReturnToGo(f64),
    State(Vec<f64>),
    Action(Vec<f64>),
}

/// `L ≤ K` consecutive steps of conditioning, states, actions and absolute timesteps.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenWindow {
    pub returns_to_go: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    pub actions: Vec<Vec<f64>>,
    pub timesteps: Vec<usize>,
}

impl TokenWindow {
    pub fn new(
        returns_to_go: Vec<f64>,
        states: Vec<Vec<f64>>,
        actions: Vec<Vec<f64>>,
        timesteps: Vec<usize>,
    ) -> Result<Self> {
        let l = returns_to_go.len();
        if l == 0 {
            return Err(Error::SequenceFormat("window must contain at least one step".into()));
        }
        if states.len() != l || actions.len() != l || timesteps.len() != l {
            return Err(Error::SequenceFormat(format!(
                "window streams differ in length: {l} returns, {} states, {} actions, {} timesteps",
                states.len(),
                actions.len(),
                timesteps.len()
            )));
        }
        if timesteps.windows(2).any(|w| w[1] != w[0] + 1) {
            return Err(Error::SequenceFormat("timesteps must be consecutive".into()));
        }
        Ok(TokenWindow {
            returns_to_go,
            states,
            actions,
            timesteps,
        })
    }

    /// Parses `g, s, a, g, s, a, …`; the final action may be omitted, in which
    /// case it is zero-filled (it cannot influence any prediction).
    pub fn from_tokens(tokens: &[Token], start_timestep: usize, action_dim: usize) -> Result<Self> {
        let mut g = Vec::new();
        let mut s = Vec::new();
        let mut a = Vec::new();
        for (i, tok) in tokens.iter().enumerate() {
            match (i % 3, tok) {
                (0, Token::ReturnToGo(v)) => g.push(*v),
                (1, Token::State(v)) => s.push(v.clone()),
                (2, Token::Action(v)) => a.push(v.clone()),
                (slot, other) => {
                    let expected = ["return-to-go", "state", "action"][slot];
                    return Err(Error::SequenceFormat(format!(
                        "token {i} should be a {expected}, found {other:?}"
                    )));
                }
            }
        }
        match tokens.len() % 3 {
            0 => {}
            2 => a.push(vec![0.0; action_dim]),
            _ => {
                return Err(Error::SequenceFormat(
                    "window must end with a state or action token".into(),
                ))
            }
        }
        let l = g.len();
        Self::new(g, s, a, (start_timestep..start_timestep + l).collect())
    }

    /// Steps `start..start + len` of `traj` with conditioning `rtg`.
    pub fn from_trajectory(traj: &Trajectory, rtg: &[f64], start: usize, len: usize) -> Result<Self> {
        if rtg.len() != traj.len() {
            return Err(Error::shape("one conditioning value per trajectory step required"));
        }
        if len == 0 || start + len > traj.len() {
            return Err(Error::SequenceFormat(format!(
                "window {start}..{} outside trajectory of length {}",
                start + len,
                traj.len()
            )));
        }
        let r = start..start + len;
        Self::new(
            rtg[r.clone()].to_vec(),
            traj.states()[r.clone()].to_vec(),
            traj.actions()[r.clone()].to_vec(),
            r.collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.returns_to_go.len()
    }

    pub fn is_empty(&self) -> bool {
        self.returns_to_go.is_empty()
    }
}

/// Deterministic causal sequence model with a Gaussian action estimate.
#[derive(Debug, Clone, PartialEq)]
pub struct SequencePolicyModel {
    config: SequenceConfig,
    slots: Slots<ParamSlot>,
    params: Vec<f64>,
    seed: u64,
    running_mse: Option<f64>,
}

impl SequencePolicyModel {
    pub fn new(config: SequenceConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let (slots, total) = build_layout(&config);
        let mut params = vec![0.0; total];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut fill = |slot: ParamSlot, std: f64, params: &mut Vec<f64>| {
            let dist = Normal::new(0.0, std).expect("positive std");
            for p in &mut params[slot.range()] {
                *p = dist.sample(&mut rng);
            }
        };
        let fan = |s: ParamSlot| 1.0 / (s.rows.max(1) as f64).sqrt();
        for s in [slots.ret_w, slots.state_w, slots.act_w] {
            fill(s, fan(s), &mut params);
        }
        fill(slots.time, 0.1, &mut params);
        let ones = |s: ParamSlot, params: &mut Vec<f64>| params[s.range()].iter_mut().for_each(|p| *p = 1.0);
        ones(slots.ln_e_g, &mut params);
        for b in &slots.blocks {
            for s in [b.wq, b.wk, b.wv, b.w1] {
                fill(s, fan(s), &mut params);
            }
            // Residual projections start small so early blocks are near identity.
            for s in [b.wo, b.w2] {
                fill(s, 0.5 * fan(s), &mut params);
            }
            ones(b.ln1_g, &mut params);
            ones(b.ln2_g, &mut params);
        }
        ones(slots.ln_f_g, &mut params);
        fill(slots.head_w, 0.1 * fan(slots.head_w), &mut params);
        Ok(SequencePolicyModel {
            config,
            slots,
            params,
            seed,
            running_mse: None,
        })
    }

    pub fn from_parts(config: SequenceConfig, params: Vec<f64>, seed: u64, running_mse: Option<f64>) -> Result<Self> {
        config.validate()?;
        let (slots, total) = build_layout(&config);
        if params.len() != total {
            return Err(Error::shape(format!(
                "sequence model expects {total} parameters, got {}",
                params.len()
            )));
        }
        crate::error::ensure_finite(&params, "sequence model parameters")?;
        if let Some(m) = running_mse {
            if !(m >= VARIANCE_FLOOR) || !m.is_finite() {
                return Err(Error::invalid(format!("running_mse {m} below the variance floor")));
            }
        }
        Ok(SequencePolicyModel {
            config,
            slots,
            params,
            seed,
            running_mse,
        })
    }

    pub fn config(&self) -> &SequenceConfig {
        &self.config
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn set_params(&mut self, params: Vec<f64>) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::shape("parameter vector length changed"));
        }
        crate::error::ensure_finite(&params, "sequence model parameters")?;
        self.params = params;
        Ok(())
    }

    pub(crate) fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// Sets the action head to zero so every prediction is `0` (or `tanh 0`).
    pub fn zero_head(&mut self) {
        for s in [self.slots.head_w, self.slots.head_b] {
            self.params[s.range()].iter_mut().for_each(|p| *p = 0.0);
        }
    }

    pub fn running_mse(&self) -> Option<f64> {
        self.running_mse
    }

    /// Folds one batch MSE into the moving average (the first batch seeds it)
    /// and returns the new value, floored at the variance floor.
    pub fn record_batch_mse(&mut self, batch_mse: f64) -> f64 {
        let next = match self.running_mse {
            None => batch_mse,
            Some(r) => MSE_EMA_DECAY * r + (1.0 - MSE_EMA_DECAY) * batch_mse,
        };
        let next = next.max(VARIANCE_FLOOR);
        self.running_mse = Some(next);
        next
    }

    fn check_window(&self, w: &TokenWindow) -> Result<()> {
        let c = &self.config;
        if w.len() > c.context_len {
            return Err(Error::SequenceFormat(format!(
                "window of {} steps exceeds context length {}",
                w.len(),
                c.context_len
            )));
        }
        if w.states.iter().any(|s| s.len() != c.state_dim) || w.actions.iter().any(|a| a.len() != c.action_dim) {
            return Err(Error::shape("window token dimensions do not match the model"));
        }
        if let Some(&t) = w.timesteps.last() {
            if t >= c.max_timestep {
                return Err(Error::SequenceFormat(format!(
                    "timestep {t} exceeds the embedding table ({})",
                    c.max_timestep
                )));
            }
        }
        for xs in std::iter::once(&w.returns_to_go).chain(&w.states).chain(&w.actions) {
            crate::error::ensure_finite(xs, "window token")?;
        }
        Ok(())
    }

    /// `L × d_a` predictions for every position of `w`.
    fn build_window(&self, g: &mut Graph, b: &Slots<NodeId>, w: &TokenWindow) -> NodeId {
        let c = &self.config;
        let l = w.len();
        let d = c.embed_dim;
        let gin = g.input(Matrix::from_vec(
            l,
            1,
            w.returns_to_go.iter().map(|v| v / c.return_scale).collect(),
        ));
        let sin = g.input(Matrix::from_rows(&w.states));
        let ain = g.input(Matrix::from_rows(&w.actions));
        let time = g.gather_rows(b.time, &w.timesteps);
        let embed = |g: &mut Graph, x: NodeId, wt: NodeId, bias: NodeId| {
            let e = g.matmul(x, wt);
            let e = g.add_row(e, bias);
            g.add(e, time)
        };
        let eg = embed(g, gin, b.ret_w, b.ret_b);
        let es = embed(g, sin, b.state_w, b.state_b);
        let ea = embed(g, ain, b.act_w, b.act_b);
        let x = g.interleave_rows(&[eg, es, ea]);
        let mut x = g.layer_norm(x, b.ln_e_g, b.ln_e_b, LN_EPS);

        let heads = c.n_heads;
        let dh = d / heads;
        let inv_sqrt = 1.0 / (dh as f64).sqrt();
        for blk in &b.blocks {
            let h = g.layer_norm(x, blk.ln1_g, blk.ln1_b, LN_EPS);
            let lin = |g: &mut Graph, x: NodeId, w: NodeId, bias: NodeId| {
                let y = g.matmul(x, w);
                g.add_row(y, bias)
            };
            let q = lin(g, h, blk.wq, blk.bq);
            let k = lin(g, h, blk.wk, blk.bk);
            let v = lin(g, h, blk.wv, blk.bv);
            let mut outs = Vec::with_capacity(heads);
            for hd in 0..heads {
                let (qh, kh, vh) = if heads == 1 {
                    (q, k, v)
                } else {
                    (
                        g.slice_cols(q, hd * dh, dh),
                        g.slice_cols(k, hd * dh, dh),
                        g.slice_cols(v, hd * dh, dh),
                    )
                };
                let s = g.matmul_t(qh, kh);
                let s = g.scale(s, inv_sqrt);
                let p = g.causal_softmax(s);
                outs.push(g.matmul(p, vh));
            }
            let att = if heads == 1 { outs[0] } else { g.concat_cols(&outs) };
            let att = lin(g, att, blk.wo, blk.bo);
            x = g.add(x, att);
            let h = g.layer_norm(x, blk.ln2_g, blk.ln2_b, LN_EPS);
            let m = lin(g, h, blk.w1, blk.b1);
            let m = g.relu(m);
            let m = lin(g, m, blk.w2, blk.b2);
            x = g.add(x, m);
        }
        let x = g.layer_norm(x, b.ln_f_g, b.ln_f_b, LN_EPS);
        let idx: Vec<usize> = (0..l).map(|t| 3 * t + 1).collect();
        let xs = g.gather_rows(x, &idx);
        let y = g.matmul(xs, b.head_w);
        let y = g.add_row(y, b.head_b);
        if c.action_tanh {
            g.tanh(y)
        } else {
            y
        }
    }

    fn bind(&self, g: &mut Graph) -> Slots<NodeId> {
        self.slots.map(|s| s.bind(g, &self.params))
    }

    /// `T × d_a` predictions for every step of `traj`: positions `t < K` come from
    /// the leading window, later ones from the window ending at `t`.
    fn build_trajectory(&self, g: &mut Graph, b: &Slots<NodeId>, traj: &Trajectory, rtg: &[f64]) -> Result<NodeId> {
        let k = self.config.context_len;
        let n = traj.len();
        let head = TokenWindow::from_trajectory(traj, rtg, 0, n.min(k))?;
        self.check_window(&head)?;
        let first = self.build_window(g, b, &head);
        if n <= k {
            return Ok(first);
        }
        let mut parts = vec![first];
        for t in k..n {
            let w = TokenWindow::from_trajectory(traj, rtg, t + 1 - k, k)?;
            self.check_window(&w)?;
            let out = self.build_window(g, b, &w);
            parts.push(g.gather_rows(out, &[k - 1]));
        }
        Ok(g.concat_rows(&parts))
    }

    /// Predicted action means for every position of `w`.
    pub fn forward_window(&self, w: &TokenWindow) -> Result<Vec<Vec<f64>>> {
        self.check_window(w)?;
        let mut g = Graph::new();
        let b = self.bind(&mut g);
        let out = self.build_window(&mut g, &b, w);
        Ok(rows_of(g.value(out)))
    }

    /// `â_t` for every step of `traj` under conditioning `rtg`.
    pub fn predict_trajectory(&self, traj: &Trajectory, rtg: &[f64]) -> Result<Vec<Vec<f64>>> {
        let mut g = Graph::new();
        let b = self.bind(&mut g);
        let out = self.build_trajectory(&mut g, &b, traj, rtg)?;
        Ok(rows_of(g.value(out)))
    }

    /// `Σ_t weights[t] ‖a_t − â_t‖²` over `traj` and its parameter gradient.
    pub fn weighted_sq_error(&self, traj: &Trajectory, rtg: &[f64], weights: &[f64]) -> Result<(f64, Vec<f64>)> {
        if weights.len() != traj.len() {
            return Err(Error::shape("one weight per trajectory step required"));
        }
        let mut g = Graph::new();
        let b = self.bind(&mut g);
        let pred = self.build_trajectory(&mut g, &b, traj, rtg)?;
        self.sq_error_tail(g, pred, traj.actions(), weights)
    }

    /// `Σ_t weights[t] ‖a_t − â_t‖²` over one window and its parameter gradient.
    pub fn window_sq_error(&self, w: &TokenWindow, weights: &[f64]) -> Result<(f64, Vec<f64>)> {
        self.check_window(w)?;
        if weights.len() != w.len() {
            return Err(Error::shape("one weight per window step required"));
        }
        let mut g = Graph::new();
        let b = self.bind(&mut g);
        let pred = self.build_window(&mut g, &b, w);
        self.sq_error_tail(g, pred, &w.actions, weights)
    }

    fn sq_error_tail(&self, g: Graph, pred: NodeId, actions: &[Vec<f64>], weights: &[f64]) -> Result<(f64, Vec<f64>)> {
        let mut pass = TrajectoryPass { graph: g, pred, sq: None };
        let mut out = pass.weighted_sq_errors(self, actions, &[weights])?;
        Ok(out.remove(0))
    }

    /// One forward pass over `traj` whose predictions can be read before any
    /// gradient is requested.
    pub(crate) fn trajectory_pass(&self, traj: &Trajectory, rtg: &[f64]) -> Result<TrajectoryPass> {
        let mut graph = Graph::new();
        let b = self.bind(&mut graph);
        let pred = self.build_trajectory(&mut graph, &b, traj, rtg)?;
        Ok(TrajectoryPass { graph, pred, sq: None })
    }
}

/// A recorded forward pass; several weightings of the squared error can be
/// differentiated against the same tape.
pub(crate) struct TrajectoryPass {
    graph: Graph,
    pred: NodeId,
    sq: Option<NodeId>,
}

impl TrajectoryPass {
    pub(crate) fn predictions(&self) -> Vec<Vec<f64>> {
        rows_of(self.graph.value(self.pred))
    }

    /// `(Σ_t w[t] ‖a_t − â_t‖², gradient)` for each weight vector.
    pub(crate) fn weighted_sq_errors(
        &mut self,
        model: &SequencePolicyModel,
        actions: &[Vec<f64>],
        weight_sets: &[&[f64]],
    ) -> Result<Vec<(f64, Vec<f64>)>> {
        let da = model.config.action_dim;
        let g = &mut self.graph;
        let sq = match self.sq {
            Some(n) => n,
            None => {
                let target = g.input(Matrix::from_rows(actions));
                let diff = g.sub(target, self.pred);
                let n = g.mul(diff, diff);
                self.sq = Some(n);
                n
            }
        };
        let mut out = Vec::with_capacity(weight_sets.len());
        for weights in weight_sets {
            if weights.len() != actions.len() {
                return Err(Error::shape("one weight per step required"));
            }
            let wm = Matrix::from_vec(
                weights.len(),
                da,
                weights.iter().flat_map(|&w| std::iter::repeat_n(w, da)).collect(),
            );
            let node = g.weighted_sum(sq, wm);
            let grad = g.backward(node, model.params.len());
            check_score(&grad, "sequence model gradient")?;
            out.push((g.scalar_value(node), grad));
        }
        Ok(out)
    }
}

fn rows_of(m: &Matrix) -> Vec<Vec<f64>> {
    (0..m.rows).map(|r| m.row(r).to_vec()).collect()
}

/// `â_t` for the last position of the window.
pub fn sequence_forward(model: &SequencePolicyModel, window: &TokenWindow) -> Result<Vec<f64>> {
    let mut all = model.forward_window(window)?;
    Ok(all.pop().expect("window is non-empty"))
}

/// How the conditioning sequence of a recorded trajectory is formed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "g0", rename_all = "snake_case")]
pub enum Conditioning {
    /// `g_0` is the trajectory's own undiscounted return, so `g_t = q_{t:H}`.
    EpisodeReturn,
    /// A fixed target `g_0` for every trajectory.
    Fixed(f64),
}

impl Conditioning {
    pub fn sequence(&self, traj: &Trajectory) -> Result<Vec<f64>> {
        match *self {
            Conditioning::EpisodeReturn => Ok(traj.returns_to_go()),
            Conditioning::Fixed(g0) => rtg_conditioning_sequence(traj, g0),
        }
    }
}

/// `π̂_t(a | h_t) = N(â_t, running_mse · I)`, differentiable in the model parameters.
#[derive(Debug, Clone, Copy)]
pub struct TargetPolicyEstimate<'a> {
    model: &'a SequencePolicyModel,
    conditioning: Conditioning,
    variance: f64,
}

pub fn target_policy_estimate(model: &SequencePolicyModel, conditioning: Conditioning) -> Result<TargetPolicyEstimate<'_>> {
    let variance = model
        .running_mse
        .ok_or_else(|| Error::Uninitialized("sequence model has no recorded MSE; train it first".into()))?;
    Ok(TargetPolicyEstimate {
        model,
        conditioning,
        variance: variance.max(VARIANCE_FLOOR),
    })
}

impl<'a> TargetPolicyEstimate<'a> {
    pub fn model(&self) -> &'a SequencePolicyModel {
        self.model
    }

    pub fn variance(&self) -> f64 {
        self.variance
    }

    pub fn std(&self) -> f64 {
        self.variance.sqrt()
    }

    pub fn conditioning(&self) -> Conditioning {
        self.conditioning
    }

    /// The Gaussian at the last position of `window`.
    pub fn gaussian_at(&self, window: &TokenWindow) -> Result<GaussianPolicy> {
        let mean = sequence_forward(self.model, window)?;
        let d = mean.len();
        GaussianPolicy::fixed(mean, vec![self.std(); d])
    }

    /// `½ d_a log(2πe σ²)`.
    pub fn entropy(&self) -> f64 {
        gaussian_entropy_of_std(&vec![self.std(); self.model.config.action_dim])
    }

    /// Step densities of `traj` given already computed means `â_t`.
    pub(crate) fn densities_from_means(&self, traj: &Trajectory, means: Vec<Vec<f64>>) -> Vec<StepDensity> {
        let std = vec![self.std(); self.model.config.action_dim];
        means
            .into_iter()
            .enumerate()
            .map(|(t, mean)| StepDensity {
                log_prob: self.step_log_prob(traj.action(t), &mean),
                gaussian: Some(super::GaussianMoments { mean, std: std.clone() }),
            })
            .collect()
    }

    fn step_log_prob(&self, action: &[f64], mean: &[f64]) -> f64 {
        let sq: f64 = action.iter().zip(mean).map(|(a, m)| (a - m) * (a - m)).sum();
        let d = action.len() as f64;
        -0.5 * d * (LN_2PI + self.variance.ln()) - 0.5 * sq / self.variance
    }
}

impl TrajectoryPolicy for TargetPolicyEstimate<'_> {
    fn step_densities(&self, traj: &Trajectory) -> Result<Vec<StepDensity>> {
        let rtg = self.conditioning.sequence(traj)?;
        let means = self.model.predict_trajectory(traj, &rtg)?;
        Ok(self.densities_from_means(traj, means))
    }
}

impl ScorePolicy for TargetPolicyEstimate<'_> {
    fn num_params(&self) -> usize {
        self.model.num_params()
    }

    fn weighted_score(&self, traj: &Trajectory, weights: &[f64]) -> Result<Vec<f64>> {
        let rtg = self.conditioning.sequence(traj)?;
        let scaled: Vec<f64> = weights.iter().map(|w| -0.5 * w / self.variance).collect();
        Ok(self.model.weighted_sq_error(traj, &rtg, &scaled)?.1)
    }
}

/// `L − βH` with `L` the mean negative log-likelihood of the dataset actions
/// under `π̂_t` (episode-return conditioning) and `H` its entropy.
pub fn joint_objective(model: &SequencePolicyModel, ds: &TrajectoryDataset, beta: f64) -> Result<f64> {
    if !(beta >= 0.0) || !beta.is_finite() {
        return Err(Error::invalid(format!("entropy coefficient {beta} must be non-negative")));
    }
    let est = target_policy_estimate(model, Conditioning::EpisodeReturn)?;
    let mut total = 0.0;
    for traj in ds.trajectories() {
        total += est.step_densities(traj)?.iter().map(|d| d.log_prob).sum::<f64>();
    }
    let nll = -total / ds.num_steps() as f64;
    Ok(nll - beta * est.entropy())
}

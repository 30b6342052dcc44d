//! End-to-end training: toy environments and data collection, behavior
//! pretraining, supervised warm start, DPE updates and closed-loop evaluation.

mod bc;
mod config;
mod dpe;
mod env;
mod eval;

use std::fmt::Write as _;
use std::path::Path;

pub use bc::{train_bc, windows_mse, BcLogRow};
pub use config::{BaselineFeatures, ModelSpec, TrainConfig};
pub use dpe::{action_mse, dpe_batch, train_dpe, BehaviorDensities, DpeBatch, DpeLogRow};
pub use env::{generate_dataset, BehaviorSpec, PointMassConfig, ToyEnvironment};
pub use eval::{default_target_return, evaluate_policy, ActionSource, EpisodeFailure, EvalReport, ReferencePolicy, StatePolicy};

use crate::error::Result;
use crate::policy::{fit_behavior_mle, save_checkpoint, Checkpoint, FitReport, GaussianPolicy};
use crate::trajectory::TrajectoryDataset;

/// A trained model, its per-step log and its final supervised loss on the
/// monitoring data.
#[derive(Debug, Clone)]
pub struct TrainOutcome<L> {
    pub model: crate::policy::SequencePolicyModel,
    pub log: Vec<L>,
    pub final_heldout_loss: f64,
}

/// Behavior-model MLE with `cfg.pretrain_steps` iterations; the fitted policy is
/// checkpointed when `checkpoint` is given.
pub fn pretrain_behavior(ds: &TrajectoryDataset, cfg: &TrainConfig, checkpoint: Option<&Path>) -> Result<(GaussianPolicy, FitReport)> {
    cfg.validate()?;
    let (policy, report) = fit_behavior_mle(
        ds,
        cfg.behavior_config(ds.state_dim(), ds.action_dim()),
        cfg.pretrain_steps,
        cfg.seed,
    )?;
    if let Some(path) = checkpoint {
        save_checkpoint(&Checkpoint::Gaussian(policy.clone()), path)?;
    }
    Ok((policy, report))
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn bc_log_csv(rows: &[BcLogRow]) -> String {
    let mut out = String::from("step,sup_loss,heldout_loss,running_mse\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{},{}", r.step, r.sup_loss, opt(r.heldout_loss), r.running_mse);
    }
    out
}

pub fn dpe_log_csv(rows: &[DpeLogRow]) -> String {
    let mut out = String::from("step,sup_loss,dpe_grad_norm,mean_cum_ratio,skipped_count,baseline_mse,running_mse\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.step, r.sup_loss, r.dpe_grad_norm, r.mean_cum_ratio, r.skipped_count, r.baseline_mse, r.running_mse
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::load_checkpoint;

    #[test]
    fn pretrain_checkpoint_roundtrips_and_curve_length_follows_config() {
        let env = ToyEnvironment::point_mass();
        let ds = generate_dataset(&env, &BehaviorSpec::mixed_quality(), 20, 0).unwrap();
        let cfg = TrainConfig {
            pretrain_steps: 7,
            ..TrainConfig::default()
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("behavior.json");
        let (policy, report) = pretrain_behavior(&ds, &cfg, Some(&path)).unwrap();
        assert_eq!(report.log_likelihood.len(), 8);
        assert_eq!(load_checkpoint(&path).unwrap().into_gaussian().unwrap(), policy);
    }
}

use rand::Rng;
use rayon::prelude::*;

use super::bc::episode_conditioning;
use super::{TrainConfig, TrainOutcome};
use crate::error::{Error, Result};
use crate::estimators::{dpe_step_weights_from_densities, fit_baseline, BaselineModel};
use crate::optim::{clip_grad_norm, l2_norm, Adam};
use crate::policy::{target_policy_estimate, Conditioning, SequencePolicyModel, StepDensity, TrajectoryPolicy};
use crate::rng::stream_rng;
use crate::trajectory::TrajectoryDataset;

/// One DPE update as logged.
#[derive(Debug, Clone, PartialEq)]
pub struct DpeLogRow {
    pub step: usize,
    pub sup_loss: f64,
    pub dpe_grad_norm: f64,
    pub mean_cum_ratio: f64,
    pub skipped_count: usize,
    pub baseline_mse: f64,
    pub running_mse: f64,
}

/// Denominator densities of the ratios.
#[derive(Debug, Clone, Copy)]
pub enum BehaviorDensities<'a> {
    /// Precomputed `π̂_b` densities, one entry per dataset trajectory.
    Cached(&'a [Vec<StepDensity>]),
    /// Reuse the target densities, so every ratio is exactly one.
    MatchTarget,
}

/// Ingredients of one DPE update before it is combined and applied.
#[derive(Debug, Clone, PartialEq)]
pub struct DpeBatch {
    /// Mean squared action error per coordinate over the batch.
    pub sup_loss: f64,
    /// Gradient of `sup_loss`.
    pub sup_grad: Vec<f64>,
    /// Ascent direction `(1/n) Σ_i Σ_t c_t ∇ log π̂_t(a_t)` over the `n` kept trajectories.
    pub dpe_direction: Vec<f64>,
    /// Mean of `ν̂_{0:H}` over kept trajectories.
    pub mean_cum_ratio: f64,
    pub skipped: usize,
    /// `σ²` of the target estimate after this batch's loss was recorded.
    pub variance: f64,
}

/// Forward the batch, fold its MSE into the running estimate, form `π̂_t` and
/// compute both gradient parts. Trajectories whose ratios degenerate are
/// skipped; too many skips fail the batch.
pub fn dpe_batch(
    model: &mut SequencePolicyModel,
    ds: &TrajectoryDataset,
    batch: &[usize],
    behavior: BehaviorDensities<'_>,
    baseline: &BaselineModel,
    cfg: &TrainConfig,
) -> Result<DpeBatch> {
    if batch.is_empty() {
        return Err(Error::invalid("empty DPE batch"));
    }
    if model.running_mse().is_none() {
        return Err(Error::Uninitialized("train_dpe needs a warm-started model with a recorded MSE".into()));
    }
    let conditioning = Conditioning::EpisodeReturn;
    let mut passes = batch
        .par_iter()
        .map(|&i| {
            let traj = &ds.trajectories()[i];
            model.trajectory_pass(traj, &conditioning.sequence(traj)?)
        })
        .collect::<Result<Vec<_>>>()?;
    let preds: Vec<Vec<Vec<f64>>> = passes.iter().map(|p| p.predictions()).collect();
    let da = model.config().action_dim;
    let mut sq = 0.0;
    let mut steps = 0usize;
    for (&i, pred) in batch.iter().zip(&preds) {
        let traj = &ds.trajectories()[i];
        steps += traj.len();
        for (p, a) in pred.iter().zip(traj.actions()) {
            sq += p.iter().zip(a).map(|(p, a)| (p - a) * (p - a)).sum::<f64>();
        }
    }
    let sup_loss = sq / (steps * da) as f64;
    if !sup_loss.is_finite() {
        return Err(Error::Training {
            reason: format!("supervised loss is {sup_loss}"),
            last_checkpoint: Some(model.params().to_vec()),
        });
    }
    let variance = model.record_batch_mse(sup_loss);
    let model: &SequencePolicyModel = model;
    let est = target_policy_estimate(model, conditioning)?;
    let mut coefficients = Vec::with_capacity(batch.len());
    let mut skipped = 0usize;
    let mut ratio_sum = 0.0;
    for (&i, pred) in batch.iter().zip(preds) {
        let traj = &ds.trajectories()[i];
        let target = est.densities_from_means(traj, pred);
        let behavior = match behavior {
            BehaviorDensities::Cached(all) => &all[i],
            BehaviorDensities::MatchTarget => &target,
        };
        match dpe_step_weights_from_densities(traj, &target, behavior, baseline, cfg.dpe_form, &cfg.weights) {
            Ok(w) => {
                ratio_sum += w.ratios.total();
                coefficients.push(Some(w.coefficients));
            }
            Err(Error::DegenerateRatio { .. }) => {
                skipped += 1;
                coefficients.push(None);
            }
            Err(e) => return Err(e),
        }
    }
    if skipped as f64 > cfg.max_skip_fraction * batch.len() as f64 || skipped == batch.len() {
        return Err(Error::Training {
            reason: format!("{skipped} of {} trajectories had degenerate ratios", batch.len()),
            last_checkpoint: Some(model.params().to_vec()),
        });
    }
    let kept = (batch.len() - skipped) as f64;
    let w_sup = 1.0 / (steps * da) as f64;
    // ∇ log π̂_t = −∇‖a_t − â_t‖² / (2σ²)
    let scale = -0.5 / (variance * kept);
    let parts = passes
        .par_iter_mut()
        .zip(batch.par_iter())
        .zip(coefficients.par_iter())
        .map(|((pass, &i), coef)| {
            let traj = &ds.trajectories()[i];
            let sup = vec![w_sup; traj.len()];
            match coef {
                Some(c) => {
                    let dpe: Vec<f64> = c.iter().map(|c| c * scale).collect();
                    let mut out = pass.weighted_sq_errors(model, traj.actions(), &[&sup, &dpe])?;
                    let d = out.pop().expect("two outputs").1;
                    Ok((out.pop().expect("two outputs").1, Some(d)))
                }
                None => Ok((pass.weighted_sq_errors(model, traj.actions(), &[&sup])?.remove(0).1, None)),
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let n = model.num_params();
    let mut sup_grad = vec![0.0; n];
    let mut dpe_direction = vec![0.0; n];
    for (s, d) in parts {
        sup_grad.iter_mut().zip(&s).for_each(|(a, b)| *a += b);
        if let Some(d) = d {
            dpe_direction.iter_mut().zip(&d).for_each(|(a, b)| *a += b);
        }
    }
    Ok(DpeBatch {
        sup_loss,
        sup_grad,
        dpe_direction,
        mean_cum_ratio: ratio_sum / kept,
        skipped,
        variance,
    })
}

/// Descends `λ_sup · ℓ2 − Z_DPE` from a warm-started model with `π̂_b` frozen.
/// The baseline is refit every `baseline_refresh` steps.
pub fn train_dpe(
    ds: &TrajectoryDataset,
    mut model: SequencePolicyModel,
    behavior: &dyn TrajectoryPolicy,
    cfg: &TrainConfig,
) -> Result<TrainOutcome<DpeLogRow>> {
    cfg.validate()?;
    if model.config().state_dim != ds.state_dim() || model.config().action_dim != ds.action_dim() {
        return Err(Error::shape("sequence model dimensions do not match the dataset"));
    }
    let cached = ds
        .trajectories()
        .par_iter()
        .map(|t| behavior.step_densities(t))
        .collect::<Result<Vec<_>>>()?;
    let features = cfg.baseline_features.feature_map(ds.state_dim(), ds.horizon());
    let mut baseline = fit_baseline(ds, features.clone(), None)?;
    let mut baseline_mse = baseline.mse(ds);
    let mut rng = stream_rng(cfg.seed, 2);
    let mut opt = Adam::new(model.num_params(), cfg.learning_rate);
    let mut log = Vec::with_capacity(cfg.train_steps);
    for step in 0..cfg.train_steps {
        if step > 0 && step % cfg.baseline_refresh == 0 {
            baseline = fit_baseline(ds, features.clone(), None)?;
            baseline_mse = baseline.mse(ds);
        }
        let batch: Vec<usize> = (0..cfg.batch_size).map(|_| rng.random_range(0..ds.len())).collect();
        let b = dpe_batch(&mut model, ds, &batch, BehaviorDensities::Cached(&cached), &baseline, cfg)?;
        let dpe_grad_norm = l2_norm(&b.dpe_direction);
        let mut grad: Vec<f64> = b
            .sup_grad
            .iter()
            .zip(&b.dpe_direction)
            .map(|(s, d)| cfg.lambda_sup * s - d)
            .collect();
        clip_grad_norm(&mut grad, cfg.grad_clip);
        opt.step(model.params_mut(), &grad);
        log.push(DpeLogRow {
            step,
            sup_loss: b.sup_loss,
            dpe_grad_norm,
            mean_cum_ratio: b.mean_cum_ratio,
            skipped_count: b.skipped,
            baseline_mse,
            running_mse: b.variance,
        });
    }
    let final_heldout_loss = action_mse(&model, ds)?;
    Ok(TrainOutcome {
        model,
        log,
        final_heldout_loss,
    })
}

/// Per-coordinate action MSE over every step of `ds`, each trajectory
/// conditioned on its own return.
pub fn action_mse(model: &SequencePolicyModel, ds: &TrajectoryDataset) -> Result<f64> {
    let rtg = episode_conditioning(ds)?;
    let sums = ds
        .trajectories()
        .par_iter()
        .zip(rtg.par_iter())
        .map(|(t, g)| {
            let pred = model.predict_trajectory(t, g)?;
            Ok(pred
                .iter()
                .zip(t.actions())
                .map(|(p, a)| p.iter().zip(a).map(|(p, a)| (p - a) * (p - a)).sum::<f64>())
                .sum::<f64>())
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(sums.iter().sum::<f64>() / (ds.num_steps() * ds.action_dim()) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimators::{FeatureMap, WeightConfig};
    use crate::policy::{GaussianPolicy, ScorePolicy, SequenceConfig};
    use crate::training::{generate_dataset, BehaviorSpec, ToyEnvironment};

    fn setup() -> (TrajectoryDataset, SequencePolicyModel, TrainConfig) {
        let env = ToyEnvironment::point_mass();
        let ds = generate_dataset(&env, &BehaviorSpec::mixed_quality(), 6, 1).unwrap();
        let cfg = TrainConfig {
            batch_size: 4,
            train_steps: 3,
            weights: WeightConfig::pdf(),
            ..TrainConfig::default()
        };
        let sc = SequenceConfig {
            embed_dim: 8,
            n_layers: 1,
            ..cfg.sequence_config(2, 1)
        };
        let model = SequencePolicyModel::from_parts(sc.clone(), SequencePolicyModel::new(sc, 4).unwrap().params().to_vec(), 4, Some(0.3))
            .unwrap();
        (ds, model, cfg)
    }

    #[test]
    fn unit_ratios_and_zero_baseline_give_reinforce() {
        let (ds, mut model, cfg) = setup();
        let batch = [0, 3, 3, 5];
        let zero = BaselineModel::zero(FeatureMap::Constant, 2);
        let b = dpe_batch(&mut model, &ds, &batch, BehaviorDensities::MatchTarget, &zero, &cfg).unwrap();
        assert_eq!(b.mean_cum_ratio, 1.0);
        let est = target_policy_estimate(&model, Conditioning::EpisodeReturn).unwrap();
        assert_eq!(est.variance(), b.variance);
        let mut reinforce = vec![0.0; model.num_params()];
        for &i in &batch {
            let traj = &ds.trajectories()[i];
            let g = est.weighted_score(traj, &traj.returns_to_go()).unwrap();
            reinforce.iter_mut().zip(&g).for_each(|(a, b)| *a += b / batch.len() as f64);
        }
        for (x, y) in b.dpe_direction.iter().zip(&reinforce) {
            assert!((x - y).abs() <= 1e-10 * y.abs().max(1.0), "{x} vs {y}");
        }
    }

    #[test]
    fn zero_learning_rate_keeps_parameters_and_logs() {
        let (ds, model, cfg) = setup();
        let frozen = TrainConfig {
            learning_rate: 0.0,
            ..cfg
        };
        let behavior = GaussianPolicy::fixed(vec![0.0], vec![0.7]).unwrap();
        let start = model.params().to_vec();
        let out = train_dpe(&ds, model, &behavior, &frozen).unwrap();
        assert_eq!(out.model.params(), &start[..]);
        assert_eq!(out.log.len(), 3);
        assert!(out.log.iter().all(|r| r.dpe_grad_norm > 0.0 && r.baseline_mse.is_finite()));
    }

    #[test]
    fn untrained_model_is_rejected() {
        let (ds, model, cfg) = setup();
        let fresh = SequencePolicyModel::new(model.config().clone(), 0).unwrap();
        let behavior = GaussianPolicy::fixed(vec![0.0], vec![0.7]).unwrap();
        assert!(matches!(train_dpe(&ds, fresh, &behavior, &cfg), Err(Error::Uninitialized(_))));
    }

    #[test]
    fn degenerate_ratios_fail_the_batch() {
        let (ds, model, cfg) = setup();
        // Behavior so narrow that every dataset action has zero density.
        let behavior = GaussianPolicy::fixed(vec![50.0], vec![1e-3]).unwrap();
        let err = train_dpe(&ds, model, &behavior, &cfg).unwrap_err();
        assert!(matches!(err, Error::Training { .. }), "{err:?}");
    }
}

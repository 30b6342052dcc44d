use rand::Rng;
use rayon::prelude::*;

use super::{TrainConfig, TrainOutcome};
use crate::error::{Error, Result};
use crate::optim::{clip_grad_norm, Adam};
use crate::policy::{Conditioning, SequencePolicyModel, TokenWindow};
use crate::rng::stream_rng;
use crate::trajectory::TrajectoryDataset;

/// One supervised update; `heldout_loss` is present at epoch boundaries.
#[derive(Debug, Clone, PartialEq)]
pub struct BcLogRow {
    pub step: usize,
    pub sup_loss: f64,
    pub heldout_loss: Option<f64>,
    pub running_mse: f64,
}

/// Random window of at most `K` consecutive steps with episode-return conditioning.
fn sample_window<R: Rng>(ds: &TrajectoryDataset, rtg: &[Vec<f64>], k: usize, rng: &mut R) -> Result<TokenWindow> {
    let i = rng.random_range(0..ds.len());
    let traj = &ds.trajectories()[i];
    let len = traj.len().min(k);
    let start = rng.random_range(0..=traj.len() - len);
    TokenWindow::from_trajectory(traj, &rtg[i], start, len)
}

fn sample_windows<R: Rng>(ds: &TrajectoryDataset, rtg: &[Vec<f64>], k: usize, n: usize, rng: &mut R) -> Result<Vec<TokenWindow>> {
    (0..n).map(|_| sample_window(ds, rtg, k, rng)).collect()
}

/// Mean squared action error per coordinate over every position of `windows`.
pub fn windows_mse(model: &SequencePolicyModel, windows: &[TokenWindow]) -> Result<f64> {
    let per = windows
        .par_iter()
        .map(|w| {
            let pred = model.forward_window(w)?;
            Ok(pred
                .iter()
                .zip(&w.actions)
                .map(|(p, a)| p.iter().zip(a).map(|(p, a)| (p - a) * (p - a)).sum::<f64>())
                .sum::<f64>())
        })
        .collect::<Result<Vec<f64>>>()?;
    let count: usize = windows.iter().map(|w| w.len()).sum::<usize>() * model.config().action_dim;
    Ok(per.iter().sum::<f64>() / count as f64)
}

/// Mean loss and gradient of the ℓ2 objective over a batch of windows.
fn batch_loss(model: &SequencePolicyModel, windows: &[TokenWindow]) -> Result<(f64, Vec<f64>)> {
    let count: usize = windows.iter().map(|w| w.len()).sum::<usize>() * model.config().action_dim;
    let w = 1.0 / count as f64;
    let parts = windows
        .par_iter()
        .map(|win| model.window_sq_error(win, &vec![w; win.len()]))
        .collect::<Result<Vec<_>>>()?;
    let mut grad = vec![0.0; model.num_params()];
    let mut loss = 0.0;
    for (l, g) in parts {
        loss += l;
        grad.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
    }
    Ok((loss, grad))
}

pub(crate) fn episode_conditioning(ds: &TrajectoryDataset) -> Result<Vec<Vec<f64>>> {
    ds.trajectories().iter().map(|t| Conditioning::EpisodeReturn.sequence(t)).collect()
}

/// Mini-batch ℓ2 training on windows conditioned on each episode's own return.
/// The moving MSE absorbs every batch loss; a non-finite loss aborts with the
/// parameters from before the failing step.
pub fn train_bc(ds: &TrajectoryDataset, mut model: SequencePolicyModel, cfg: &TrainConfig) -> Result<TrainOutcome<BcLogRow>> {
    cfg.validate()?;
    let mc = model.config();
    if mc.state_dim != ds.state_dim() || mc.action_dim != ds.action_dim() {
        return Err(Error::shape("sequence model dimensions do not match the dataset"));
    }
    let k = mc.context_len;
    let rtg = episode_conditioning(ds)?;
    let heldout = sample_windows(ds, &rtg, k, cfg.heldout_windows, &mut stream_rng(cfg.seed, 0))?;
    let mut rng = stream_rng(cfg.seed, 1);
    let mut opt = Adam::new(model.num_params(), cfg.bc_learning_rate());
    let mut log = Vec::with_capacity(cfg.bc_steps);
    for step in 0..cfg.bc_steps {
        let batch = sample_windows(ds, &rtg, k, cfg.batch_size, &mut rng)?;
        let (loss, mut grad) = match batch_loss(&model, &batch) {
            Err(Error::Numeric { .. }) => (f64::NAN, Vec::new()),
            other => other?,
        };
        if !loss.is_finite() {
            return Err(Error::Training {
                reason: format!("supervised loss is {loss} at step {step}"),
                last_checkpoint: Some(model.params().to_vec()),
            });
        }
        let heldout_loss = (step % cfg.epoch_steps == 0)
            .then(|| windows_mse(&model, &heldout))
            .transpose()?;
        let running_mse = model.record_batch_mse(loss);
        clip_grad_norm(&mut grad, cfg.grad_clip);
        opt.step(model.params_mut(), &grad);
        log.push(BcLogRow {
            step,
            sup_loss: loss,
            heldout_loss,
            running_mse,
        });
    }
    let final_heldout = windows_mse(&model, &heldout)?;
    Ok(TrainOutcome {
        model,
        log,
        final_heldout_loss: final_heldout,
    })
}

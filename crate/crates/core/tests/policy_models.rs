mod common;

use dpe::policy::*;
use dpe::rng::stream_rng;
use dpe::tape::Matrix;
use dpe::theory::{finite_difference_check, FD_STEP};
use dpe::trajectory::{Trajectory, TrajectoryDataset};
use dpe::Error;
use proptest::prelude::*;
use rand_distr::{Distribution, Normal};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Independent closed form of the diagonal Gaussian log-density.
fn oracle_log_density(mean: &[f64], std: &[f64], a: &[f64]) -> f64 {
    mean.iter()
        .zip(std)
        .zip(a)
        .map(|((m, s), a)| -0.5 * (2.0 * std::f64::consts::PI * s * s).ln() - (a - m).powi(2) / (2.0 * s * s))
        .sum()
}

#[test]
fn standard_normal_at_its_mode() {
    let p = GaussianPolicy::fixed(vec![0.0], vec![1.0]).unwrap();
    let lp = p.log_prob(&[], &[0.0]).unwrap();
    assert!((lp - (-0.918_938_533_204_672_7)).abs() < 1e-12);
    assert!((lp + 0.5 * LN_2PI).abs() < 1e-15);
}

#[test]
fn product_density_adds_log_probs() {
    let joint = GaussianPolicy::fixed(vec![0.3, -1.0], vec![0.5, 2.0]).unwrap();
    let a = GaussianPolicy::fixed(vec![0.3], vec![0.5]).unwrap();
    let b = GaussianPolicy::fixed(vec![-1.0], vec![2.0]).unwrap();
    let x = [1.1, 0.4];
    let sum = a.log_prob(&[], &x[..1]).unwrap() + b.log_prob(&[], &x[1..]).unwrap();
    assert!((joint.log_prob(&[], &x).unwrap() - sum).abs() < 1e-14);
    assert!(matches!(joint.log_prob(&[], &[0.0]), Err(Error::Shape(_))));
}

#[test]
fn linear_mean_score_is_residual_times_state() {
    let w = Matrix::from_vec(2, 1, vec![0.7, -0.2]);
    let p = GaussianPolicy::linear_fixed_std(2, &w, &[0.1], vec![1.0]).unwrap();
    let s = [1.5, 3.0];
    let a = [0.4];
    let mu = 0.7 * 1.5 - 0.2 * 3.0 + 0.1;
    let score = p.score(&s, &a).unwrap();
    let r = a[0] - mu;
    for (got, want) in score.iter().zip([r * s[0], r * s[1], r]) {
        assert!((got - want).abs() < 1e-12);
    }
    let at_mode = p.score(&s, &[mu]).unwrap();
    assert!(at_mode.iter().all(|g| g.abs() < 1e-12));
}

#[test]
fn entropy_closed_forms() {
    let h1 = gaussian_entropy_of_std(&[1.0]);
    assert!((h1 - 1.418_938_533_204_672_7).abs() < 1e-12);
    assert!((gaussian_entropy_of_std(&[2.0]) - h1 - std::f64::consts::LN_2).abs() < 1e-12);
    assert!((gaussian_entropy_of_std(&[1.0; 3]) - 3.0 * h1).abs() < 1e-12);
    let p = GaussianPolicy::fixed(vec![0.0], vec![1.0]).unwrap();
    assert!((gaussian_entropy(&p, &[vec![], vec![]]).unwrap() - h1).abs() < 1e-12);
}

fn constant_dataset(actions: &[f64]) -> TrajectoryDataset {
    let trajs = actions
        .iter()
        .map(|a| Trajectory::new(vec![vec![0.0]], vec![vec![*a]], vec![0.0]).unwrap())
        .collect();
    TrajectoryDataset::new(trajs, 1.0, 0, None).unwrap()
}

#[test]
fn mle_of_sample_mean_and_biased_variance() {
    let mut rng = stream_rng(3, 0);
    let xs: Vec<f64> = (0..400).map(|_| Normal::new(0.7, 1.3).unwrap().sample(&mut rng)).collect();
    let ds = constant_dataset(&xs);
    let cfg = GaussianConfig::constant(1, StdMode::Learned);
    let (p, report) = fit_behavior_mle(&ds, cfg, 200, 0).unwrap();
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    let m = p.moments(&[]).unwrap();
    assert!((m.mean[0] - mean).abs() < 1e-3);
    assert!((m.std[0] * m.std[0] - var).abs() < 1e-3);
    assert!(report.log_likelihood.windows(2).all(|w| w[1] >= w[0] - 1e-6));
}

#[test]
fn target_estimate_log_prob_at_the_mode_with_floor_variance() {
    let cfg = SequenceConfig {
        context_len: 3,
        embed_dim: 8,
        n_layers: 1,
        ..SequenceConfig::new(2, 2)
    };
    let base = SequencePolicyModel::new(cfg.clone(), 4).unwrap();
    assert!(matches!(
        target_policy_estimate(&base, Conditioning::EpisodeReturn),
        Err(Error::Uninitialized(_))
    ));
    let model = SequencePolicyModel::from_parts(cfg, base.params().to_vec(), 4, Some(VARIANCE_FLOOR)).unwrap();
    let probe = Trajectory::new(vec![vec![0.2, -0.1]], vec![vec![0.0, 0.0]], vec![1.5]).unwrap();
    let mean = model.predict_trajectory(&probe, &[1.5]).unwrap().remove(0);
    let at_mode = Trajectory::new(vec![vec![0.2, -0.1]], vec![mean.clone()], vec![1.5]).unwrap();
    let est = target_policy_estimate(&model, Conditioning::EpisodeReturn).unwrap();
    let lp = est.step_densities(&at_mode).unwrap()[0].log_prob;
    let want = -0.5 * 2.0 * (2.0 * std::f64::consts::PI * VARIANCE_FLOOR).ln();
    assert!((lp - want).abs() < 1e-9 * want.abs());
}

#[test]
fn sequence_checkpoint_round_trip_is_exact() {
    let cfg = SequenceConfig {
        context_len: 4,
        embed_dim: 8,
        n_layers: 2,
        ..SequenceConfig::new(3, 1)
    };
    let model = SequencePolicyModel::from_parts(cfg.clone(), SequencePolicyModel::new(cfg, 9).unwrap().params().to_vec(), 9, Some(0.123_456_789_012_345_67)).unwrap();
    let back = Checkpoint::from_json(&Checkpoint::Sequence(model.clone()).to_json()).unwrap().into_sequence().unwrap();
    assert_eq!(back, model);
}

#[test]
fn malformed_interleaving_is_a_format_error() {
    let tokens = [Token::ReturnToGo(1.0), Token::Action(vec![0.0])];
    assert!(matches!(TokenWindow::from_tokens(&tokens, 0, 1), Err(Error::SequenceFormat(_))));
}

fn mlp_policy(params: &[f64]) -> GaussianPolicy {
    let cfg = GaussianConfig {
        hidden: vec![3],
        std: StdMode::StateDependent,
        ..GaussianConfig::markov(2, 2)
    };
    let template = GaussianPolicy::new(cfg, 0).unwrap();
    template.with_params(params[..template.params().len()].to_vec()).unwrap()
}

fn small_sequence() -> SequenceConfig {
    SequenceConfig {
        context_len: 4,
        embed_dim: 8,
        n_layers: 2,
        ..SequenceConfig::new(2, 1)
    }
}

fn window(len: usize, vals: &[f64]) -> TokenWindow {
    let mut it = vals.iter().copied().cycle();
    let mut next = || it.next().unwrap();
    let g = (0..len).map(|_| next()).collect();
    let s = (0..len).map(|_| vec![next(), next()]).collect();
    let a = (0..len).map(|_| vec![next()]).collect();
    TokenWindow::new(g, s, a, (3..3 + len).collect()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn density_integrates_to_one(mean in -3.0f64..3.0, std in 0.05f64..3.0) {
        let p = GaussianPolicy::fixed(vec![mean], vec![std]).unwrap();
        let (lo, hi, n) = (mean - 12.0 * std, mean + 12.0 * std, 4000);
        let h = (hi - lo) / n as f64;
        let mut total = 0.0;
        for k in 0..=n {
            let x = lo + h * k as f64;
            let w = if k == 0 || k == n { 0.5 } else { 1.0 };
            total += w * p.log_prob(&[], &[x]).unwrap().exp() * h;
        }
        prop_assert!((total - 1.0).abs() < 1e-3);
    }

    #[test]
    fn log_prob_matches_closed_form(
        mean in prop::collection::vec(-3.0f64..3.0, 3),
        std in prop::collection::vec(0.01f64..4.0, 3),
        a in prop::collection::vec(-5.0f64..5.0, 3),
    ) {
        let p = GaussianPolicy::fixed(mean.clone(), std.clone()).unwrap();
        let got = p.log_prob(&[], &a).unwrap();
        let want = oracle_log_density(&mean, &std, &a);
        prop_assert!((got - want).abs() <= 1e-10 * (1.0 + want.abs()));
    }

    #[test]
    fn mlp_score_matches_finite_differences(
        params in prop::collection::vec(-1.0f64..1.0, 64),
        s in prop::collection::vec(-1.0f64..1.0, 2),
        a in prop::collection::vec(-1.0f64..1.0, 2),
    ) {
        let p = mlp_policy(&params);
        let point = p.params().to_vec();
        let score = p.score(&s, &a).unwrap();
        let err = finite_difference_check(|q| p.with_params(q.to_vec()).unwrap().log_prob(&s, &a).unwrap(), &point, &score, FD_STEP);
        prop_assert!(err <= 1e-5, "relative error {err}");
    }

    #[test]
    fn suffix_perturbations_leave_predictions_unchanged(
        seed in 0u64..1000,
        len in 1usize..=4,
        t in 0usize..4,
        vals in prop::collection::vec(-2.0f64..2.0, 16),
        noise in prop::collection::vec(-5.0f64..5.0, 16),
    ) {
        let t = t.min(len - 1);
        let model = SequencePolicyModel::new(small_sequence(), seed).unwrap();
        let w = window(len, &vals);
        let base = model.forward_window(&w).unwrap();
        let mut p = w.clone();
        let mut it = noise.iter().copied().cycle();
        // a_t itself and every token after position t.
        p.actions[t][0] += it.next().unwrap();
        for k in t + 1..len {
            p.returns_to_go[k] += it.next().unwrap();
            p.states[k][0] += it.next().unwrap();
            p.states[k][1] += it.next().unwrap();
            p.actions[k][0] += it.next().unwrap();
        }
        let out = model.forward_window(&p).unwrap();
        for k in 0..=t {
            prop_assert_eq!(&out[k], &base[k]);
        }
    }

    #[test]
    fn forward_is_deterministic(seed in 0u64..1000, vals in prop::collection::vec(-2.0f64..2.0, 16)) {
        let model = SequencePolicyModel::new(small_sequence(), seed).unwrap();
        let w = window(3, &vals);
        prop_assert_eq!(sequence_forward(&model, &w).unwrap(), sequence_forward(&model, &w).unwrap());
    }

    #[test]
    fn unit_context_sees_only_the_current_step(seed in 0u64..1000, vals in prop::collection::vec(-2.0f64..2.0, 16), g in -3.0f64..3.0) {
        let cfg = SequenceConfig { context_len: 1, ..small_sequence() };
        let model = SequencePolicyModel::new(cfg, seed).unwrap();
        let w = window(1, &vals);
        let mut other = w.clone();
        other.actions[0][0] += g;
        prop_assert_eq!(sequence_forward(&model, &w).unwrap(), sequence_forward(&model, &other).unwrap());
        other.returns_to_go[0] += 1.0 + g.abs();
        prop_assert_ne!(sequence_forward(&model, &w).unwrap(), sequence_forward(&model, &other).unwrap());
    }

    #[test]
    fn running_mse_never_drops_below_the_floor(losses in prop::collection::vec(0.0f64..1e-3, 1..40)) {
        let mut model = SequencePolicyModel::new(small_sequence(), 0).unwrap();
        for l in losses {
            prop_assert!(model.record_batch_mse(l) >= VARIANCE_FLOOR);
        }
    }

    #[test]
    fn larger_variance_flattens_the_target_density(v in 1e-4f64..1.0, k in 1.5f64..10.0, off in 0.01f64..2.0) {
        let base = SequencePolicyModel::new(small_sequence(), 1).unwrap();
        let probe = Trajectory::new(vec![vec![0.1, 0.2]], vec![vec![0.0]], vec![1.0]).unwrap();
        let mean = base.predict_trajectory(&probe, &[1.0]).unwrap()[0][0];
        let slope = |var: f64| {
            let m = SequencePolicyModel::from_parts(small_sequence(), base.params().to_vec(), 1, Some(var)).unwrap();
            let est = target_policy_estimate(&m, Conditioning::EpisodeReturn).unwrap();
            let at = |x: f64| {
                let t = Trajectory::new(vec![vec![0.1, 0.2]], vec![vec![x]], vec![1.0]).unwrap();
                est.step_densities(&t).unwrap()[0].log_prob
            };
            (at(mean + off + 1e-4) - at(mean + off - 1e-4)).abs()
        };
        prop_assert!(slope(v * k) < slope(v));
    }
}

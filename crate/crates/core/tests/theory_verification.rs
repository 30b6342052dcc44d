use dpe::estimators::{fit_baseline, FeatureMap};
use dpe::policy::{CategoricalPolicy, GaussianPolicy};
use dpe::rng::stream_rng;
use dpe::theory::*;
use dpe::trajectory::{Trajectory, TrajectoryDataset};
use dpe::Error;
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand_distr::{Distribution, StandardNormal};

fn random_mdp(s: usize, a: usize, h: usize, vals: &[f64]) -> FiniteMDP {
    let mut it = vals.iter().map(|v| v.abs() + 0.05).cycle();
    let mut dist = |n: usize| {
        let raw: Vec<f64> = (0..n).map(|_| it.next().unwrap()).collect();
        let total: f64 = raw.iter().sum();
        let mut p: Vec<f64> = raw.iter().map(|v| v / total).collect();
        // Exact normalisation so validation's 1e-12 check never trips.
        let rest: f64 = p[1..].iter().sum();
        p[0] = 1.0 - rest;
        p
    };
    let transitions = (0..s).map(|_| (0..a).map(|_| dist(s)).collect()).collect();
    let initial = dist(s);
    let mut r = vals.iter().cycle().skip(3);
    let rewards = (0..s).map(|_| (0..a).map(|_| *r.next().unwrap()).collect()).collect();
    FiniteMDP {
        num_states: s,
        num_actions: a,
        transitions,
        rewards,
        initial,
        horizon: h,
        discount: 0.8,
    }
}

#[test]
fn zero_rewards_have_zero_value() {
    let mut mdp = FiniteMDP::chain_3x2();
    mdp.rewards = vec![vec![0.0; 2]; 3];
    let pi = CategoricalPolicy::uniform(3, 2).unwrap();
    assert_eq!(exact_policy_value(&mdp, &pi).unwrap(), 0.0);
}

#[test]
fn one_step_value_is_the_action_average() {
    let mdp = FiniteMDP {
        initial: vec![0.0, 1.0, 0.0],
        horizon: 0,
        ..FiniteMDP::chain_3x2()
    };
    let pi = CategoricalPolicy::uniform(3, 2).unwrap();
    let want = 0.5 * (mdp.rewards[1][0] + mdp.rewards[1][1]);
    assert!((exact_policy_value(&mdp, &pi).unwrap() - want).abs() < 1e-15);
}

#[test]
fn enumeration_guard_is_enforced() {
    let mdp = FiniteMDP {
        horizon: 12,
        ..FiniteMDP::chain_3x2()
    };
    let pi = CategoricalPolicy::uniform(3, 2).unwrap();
    assert!(matches!(enumeration_value(&mdp, &pi), Err(Error::OracleScale { .. })));
    assert!(exact_policy_value(&mdp, &pi).is_ok());
}

#[test]
fn finite_differences_validate_the_gaussian_mean_score() {
    let p = GaussianPolicy::fixed(vec![0.3], vec![0.7]).unwrap();
    let a = [1.1];
    let score = p.score(&[], &a).unwrap();
    let err = finite_difference_check(|m| p.with_params(m.to_vec()).unwrap().log_prob(&[], &a).unwrap(), p.params(), &score, FD_STEP);
    assert!(err <= 1e-5);
}

fn gaussian_actions(n: usize, seed: u64) -> TrajectoryDataset {
    let mut rng = stream_rng(seed, 0);
    let trajs = (0..n)
        .map(|_| {
            let a: f64 = StandardNormal.sample(&mut rng);
            Trajectory::new(vec![vec![0.0]], vec![vec![a]], vec![a]).unwrap()
        })
        .collect();
    TrajectoryDataset::new(trajs, 1.0, 0, None).unwrap()
}

#[test]
fn location_fisher_information_is_inverse_variance() {
    let ds = gaussian_actions(10_000, 5);
    let f = fisher_eta(&ds, &GaussianPolicy::fixed(vec![0.0], vec![1.0]).unwrap()).unwrap();
    assert!((f[(0, 0)] - 1.0).abs() < 0.05);
}

#[test]
fn fisher_is_invariant_to_duplication() {
    let ds = gaussian_actions(50, 6);
    let twice = TrajectoryDataset::new(ds.trajectories().iter().chain(ds.trajectories()).cloned().collect(), 1.0, 0, None).unwrap();
    let p = GaussianPolicy::constant_learned(vec![0.2], &[1.3]).unwrap();
    let (a, b) = (fisher_eta(&ds, &p).unwrap(), fisher_eta(&twice, &p).unwrap());
    assert!((a - b).abs().max() <= 1e-14);
}

#[test]
fn constant_feature_fisher_is_one() {
    let ds = gaussian_actions(7, 1);
    let b = fit_baseline(&ds, FeatureMap::Constant, None).unwrap();
    assert_eq!(fisher_xi(&ds, &b).unwrap()[(0, 0)], 1.0);
}

#[test]
fn orthonormal_design_gives_scaled_identity() {
    // Rows of the 4×4 Hadamard matrix divided by 2 are orthonormal.
    let h = [[1.0, 1.0, 1.0, 1.0], [1.0, -1.0, 1.0, -1.0], [1.0, 1.0, -1.0, -1.0], [1.0, -1.0, -1.0, 1.0]];
    let cols: Vec<Vec<f64>> = (0..4).map(|i| (0..4).map(|j| h[j][i] / 2.0).collect()).collect();
    let f = outer_product_mean(&cols).unwrap();
    assert!((f - DMatrix::identity(4, 4) / 4.0).abs().max() < 1e-15);
}

#[test]
fn projection_of_orthogonal_contributions_vanishes() {
    let s_eta = vec![vec![1.0], vec![-1.0], vec![1.0], vec![-1.0]];
    let s_xi = vec![vec![1.0]; 4];
    let mu = vec![vec![1.0], vec![1.0], vec![-1.0], vec![-1.0]];
    let p = projection_terms(&ScoreSet { s_eta, s_xi, mu }, false).unwrap();
    assert!(p.v_a.iter().chain(&p.v_b).flatten().all(|v| v.abs() < 1e-15));
}

#[test]
fn singular_fisher_needs_permission() {
    let s = vec![vec![1.0, 2.0], vec![2.0, 4.0], vec![-1.0, -2.0]];
    let scores = ScoreSet {
        s_eta: s.clone(),
        s_xi: vec![vec![1.0]; 3],
        mu: s,
    };
    assert!(matches!(projection_terms(&scores, false), Err(Error::LinearAlgebra(_))));
    let p = projection_terms(&scores, true).unwrap();
    assert!(p.pinv_eta && !p.pinv_xi);
}

#[test]
fn designed_instance_reduces_variance() {
    let fam = GaussianBanditFamily::default();
    let r = variance_decomposition_check(&fam, 20_000, 3).unwrap();
    assert!(r.feature_correlation >= 0.9);
    assert!(r.var_residual < r.var_mu);
    assert!(r.relative_gap <= 0.05);
}

#[test]
fn constant_baseline_cross_moment_is_statistically_zero() {
    let fam = GaussianBanditFamily {
        features: BanditFeatures::Constant,
        ..GaussianBanditFamily::default()
    };
    for seed in 0..3 {
        let r = variance_decomposition_check(&fam, 5_000, seed).unwrap();
        for (m, se) in r.cross_moment.iter().zip(&r.cross_moment_se) {
            assert!(m.abs() <= 3.0 * se, "cross moment {m} with standard error {se}");
        }
    }
}

#[test]
fn disabled_estimators_leave_the_ratio_at_one() {
    let cfg = VarianceStudyConfig {
        replicates: 200,
        m: 20,
        fit_behavior: false,
        fit_baseline: false,
        bootstrap_resamples: 500,
        ..VarianceStudyConfig::default()
    };
    let r = variance_study(&cfg).unwrap();
    assert!(r.ratio.lower <= 1.0 && 1.0 <= r.ratio.upper);
    assert!((r.ratio.estimate - 1.0).abs() < 1e-9);
}

#[test]
fn doubling_replicates_shrinks_the_interval() {
    let base = VarianceStudyConfig {
        replicates: 500,
        m: 20,
        bootstrap_resamples: 2000,
        level: 0.95,
        ..VarianceStudyConfig::default()
    };
    let w1 = variance_study(&base).unwrap().ratio.width();
    let w2 = variance_study(&VarianceStudyConfig { replicates: 1000, ..base }).unwrap().ratio.width();
    let shrink = w2 / w1;
    assert!((shrink - std::f64::consts::FRAC_1_SQRT_2).abs() <= 0.2 * std::f64::consts::FRAC_1_SQRT_2, "shrink {shrink}");
}

/// Least-squares coefficients of `y` on the columns of `x` via the normal equations.
fn regress(x: &[Vec<f64>], y: &[f64]) -> Vec<f64> {
    let xm = DMatrix::from_fn(x.len(), x[0].len(), |i, j| x[i][j]);
    let ym = DMatrix::from_column_slice(y.len(), 1, y);
    let xtx = xm.transpose() * &xm;
    let sol = xtx.lu().solve(&(xm.transpose() * ym)).unwrap();
    sol.iter().copied().collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn dp_equals_enumeration(s in 1usize..4, a in 1usize..4, h in 0usize..3, vals in prop::collection::vec(-2.0f64..2.0, 40), logits in prop::collection::vec(-2.0f64..2.0, 9)) {
        let mdp = random_mdp(s, a, h, &vals);
        let pi = CategoricalPolicy::new(s, a, logits[..s * a].to_vec()).unwrap();
        let dp = exact_policy_value(&mdp, &pi).unwrap();
        let en = enumeration_value(&mdp, &pi).unwrap();
        prop_assert!((dp - en).abs() <= 1e-12, "{dp} vs {en}");
    }

    #[test]
    fn outer_product_means_are_symmetric_psd(vs in prop::collection::vec(prop::collection::vec(-10.0f64..10.0, 4), 1..30)) {
        let f = outer_product_mean(&vs).unwrap();
        prop_assert_eq!(&f, &f.transpose());
        let eig = f.clone().symmetric_eigen();
        prop_assert!(eig.eigenvalues.iter().all(|e| *e >= -1e-10 * (1.0 + f.abs().max())));
    }

    #[test]
    fn feature_scaling_scales_fisher_quadratically(vs in prop::collection::vec(prop::collection::vec(-3.0f64..3.0, 3), 1..20), c in -4.0f64..4.0) {
        let scaled: Vec<Vec<f64>> = vs.iter().map(|v| v.iter().map(|x| c * x).collect()).collect();
        let (f, g) = (outer_product_mean(&vs).unwrap(), outer_product_mean(&scaled).unwrap());
        prop_assert!((g - f.clone() * (c * c)).abs().max() <= 1e-12 * (1.0 + c * c * f.abs().max()));
    }

    #[test]
    fn projections_match_least_squares(
        rows in prop::collection::vec((-2.0f64..2.0, -2.0f64..2.0, -2.0f64..2.0), 6..30),
        coef in (-3.0f64..3.0, -3.0f64..3.0),
    ) {
        let s_eta: Vec<Vec<f64>> = rows.iter().map(|r| vec![r.0, r.1]).collect();
        let mu: Vec<Vec<f64>> = rows.iter().map(|r| vec![coef.0 * r.0 + coef.1 * r.1 + r.2]).collect();
        let f = outer_product_mean(&s_eta).unwrap();
        prop_assume!(f.determinant().abs() > 1e-3);
        let p = projection_terms(&ScoreSet { s_eta: s_eta.clone(), s_xi: vec![vec![1.0]; rows.len()], mu: mu.clone() }, false).unwrap();
        let beta = regress(&s_eta, &mu.iter().map(|m| m[0]).collect::<Vec<_>>());
        for (va, s) in p.v_a.iter().zip(&s_eta) {
            let want = beta[0] * s[0] + beta[1] * s[1];
            prop_assert!((va[0] - want).abs() <= 1e-10 * (1.0 + want.abs()));
        }
    }

    #[test]
    fn own_scores_project_onto_themselves(rows in prop::collection::vec((-2.0f64..2.0, -2.0f64..2.0), 4..20)) {
        let s: Vec<Vec<f64>> = rows.iter().map(|r| vec![r.0, r.1]).collect();
        prop_assume!(outer_product_mean(&s).unwrap().determinant().abs() > 1e-3);
        let p = projection_terms(&ScoreSet { s_eta: s.clone(), s_xi: vec![vec![1.0]; s.len()], mu: s.clone() }, false).unwrap();
        for (va, m) in p.v_a.iter().zip(&s) {
            prop_assert!(va.iter().zip(m).all(|(x, y)| (x - y).abs() <= 1e-10));
        }
    }

    #[test]
    fn residual_is_orthogonal_to_mutually_orthogonal_score_sets(
        rows in prop::collection::vec((-2.0f64..2.0, -2.0f64..2.0, -2.0f64..2.0), 5..30),
    ) {
        let n = rows.len() as f64;
        let eta: Vec<f64> = rows.iter().map(|r| r.0).collect();
        // Gram-Schmidt across samples so that Ê(S_η S_ξ) = 0 exactly up to rounding.
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / n;
        let raw: Vec<f64> = rows.iter().map(|r| r.1).collect();
        let k = dot(&raw, &eta) / dot(&eta, &eta);
        let xi: Vec<f64> = raw.iter().zip(&eta).map(|(r, e)| r - k * e).collect();
        prop_assume!(dot(&eta, &eta) > 1e-3 && dot(&xi, &xi) > 1e-3);
        let mu: Vec<Vec<f64>> = rows.iter().map(|r| vec![r.0 * 1.5 - r.1 + r.2]).collect();
        let scores = ScoreSet {
            s_eta: eta.iter().map(|v| vec![*v]).collect(),
            s_xi: xi.iter().map(|v| vec![*v]).collect(),
            mu: mu.clone(),
        };
        let resid: Vec<f64> = projection_terms(&scores, false).unwrap().residual(&mu).iter().map(|v| v[0]).collect();
        prop_assert!(dot(&resid, &eta).abs() <= 1e-8);
        prop_assert!(dot(&resid, &xi).abs() <= 1e-8);
    }
}

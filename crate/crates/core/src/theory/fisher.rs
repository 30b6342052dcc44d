use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::estimators::BaselineModel;
use crate::policy::ScorePolicy;
use crate::trajectory::TrajectoryDataset;

/// Per-trajectory score vectors and gradient contributions of one fitted instance.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreSet {
    /// `∂_η log P(ω_i; η₀)`.
    pub s_eta: Vec<Vec<f64>>,
    /// `∂_ξ b(ξ₀)` at the trajectory's baseline input.
    pub s_xi: Vec<Vec<f64>>,
    /// Gradient contributions `μ_i`.
    pub mu: Vec<Vec<f64>>,
}

impl ScoreSet {
    pub fn validate(&self) -> Result<()> {
        let m = self.mu.len();
        if m == 0 {
            return Err(Error::invalid("score set is empty"));
        }
        if self.s_eta.len() != m || self.s_xi.len() != m {
            return Err(Error::shape("score sets must have one vector per trajectory"));
        }
        for set in [&self.s_eta, &self.s_xi, &self.mu] {
            let d = set[0].len();
            if set.iter().any(|v| v.len() != d) {
                return Err(Error::shape("ragged score vectors"));
            }
            for (i, v) in set.iter().enumerate() {
                if let Some(j) = v.iter().position(|x| !x.is_finite()) {
                    return Err(Error::Numeric {
                        index: j,
                        context: format!("score vector of trajectory {i}"),
                    });
                }
            }
        }
        Ok(())
    }

    pub fn fisher_eta(&self) -> Result<DMatrix<f64>> {
        outer_product_mean(&self.s_eta)
    }

    pub fn fisher_xi(&self) -> Result<DMatrix<f64>> {
        outer_product_mean(&self.s_xi)
    }
}

/// `(1/n) Σ_i v_i v_iᵀ`, symmetric by construction.
pub fn outer_product_mean(vectors: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let n = vectors.len();
    if n == 0 {
        return Err(Error::invalid("no vectors to average"));
    }
    let d = vectors[0].len();
    let mut f = DMatrix::<f64>::zeros(d, d);
    for v in vectors {
        if v.len() != d {
            return Err(Error::shape("ragged vectors"));
        }
        for i in 0..d {
            for j in i..d {
                f[(i, j)] += v[i] * v[j];
            }
        }
    }
    for i in 0..d {
        for j in i..d {
            let x = f[(i, j)] / n as f64;
            if !x.is_finite() {
                return Err(Error::Numeric {
                    index: i * d + j,
                    context: "fisher matrix entry".into(),
                });
            }
            f[(i, j)] = x;
            f[(j, i)] = x;
        }
    }
    Ok(f)
}

/// Per-trajectory log-likelihood scores `Σ_t ∇_η log π(a_t | ·)`.
pub fn trajectory_scores(ds: &TrajectoryDataset, policy: &dyn ScorePolicy) -> Result<Vec<Vec<f64>>> {
    ds.trajectories()
        .iter()
        .map(|traj| policy.weighted_score(traj, &vec![1.0; traj.len()]))
        .collect()
}

/// Outer-product Fisher information of the behavior model at its current parameters.
pub fn fisher_eta(ds: &TrajectoryDataset, policy: &dyn ScorePolicy) -> Result<DMatrix<f64>> {
    outer_product_mean(&trajectory_scores(ds, policy)?)
}

/// `(1/n) Σ φφᵀ` over every `(trajectory, step)` sample of a linear baseline.
pub fn fisher_xi(ds: &TrajectoryDataset, baseline: &BaselineModel) -> Result<DMatrix<f64>> {
    let feats: Vec<Vec<f64>> = ds
        .trajectories()
        .iter()
        .flat_map(|traj| (0..traj.len()).map(|t| baseline.feature_map.features(traj.state(t), t)))
        .collect();
    outer_product_mean(&feats)
}

/// Per-trajectory projections of `μ` onto both score spans.
#[derive(Debug, Clone, PartialEq)]
pub struct Projections {
    pub v_a: Vec<Vec<f64>>,
    pub v_b: Vec<Vec<f64>>,
    /// `F_η` was singular and its pseudo-inverse was used.
    pub pinv_eta: bool,
    pub pinv_xi: bool,
}

impl Projections {
    /// `μ_i − V_A,i − V_B,i`.
    pub fn residual(&self, mu: &[Vec<f64>]) -> Vec<Vec<f64>> {
        mu.iter()
            .zip(&self.v_a)
            .zip(&self.v_b)
            .map(|((m, a), b)| m.iter().zip(a).zip(b).map(|((m, a), b)| m - a - b).collect())
            .collect()
    }
}

fn inverse_or_pinv(f: &DMatrix<f64>, allow_pinv: bool, what: &str) -> Result<(DMatrix<f64>, bool)> {
    let svd = f.clone().svd(true, true);
    let smax = svd.singular_values.iter().cloned().fold(0.0, f64::max);
    let tol = smax * f.nrows() as f64 * f64::EPSILON;
    let singular = smax == 0.0 || svd.singular_values.iter().any(|s| *s <= tol);
    if singular && !allow_pinv {
        return Err(Error::LinearAlgebra(format!("{what} is singular")));
    }
    if smax == 0.0 {
        return Ok((DMatrix::zeros(f.nrows(), f.ncols()), true));
    }
    let inv = svd
        .pseudo_inverse(tol)
        .map_err(|e| Error::LinearAlgebra(format!("{what}: {e}")))?;
    Ok((inv, singular))
}

/// `coef · S_i` for `coef = Ê(μ Sᵀ) F⁻¹` with `F = Ê(S Sᵀ)`.
fn project(mu: &[Vec<f64>], s: &[Vec<f64>], allow_pinv: bool, what: &str) -> Result<(Vec<Vec<f64>>, bool)> {
    let m = mu.len() as f64;
    let (dm, ds) = (mu[0].len(), s[0].len());
    let f = outer_product_mean(s)?;
    let (finv, pinv) = inverse_or_pinv(&f, allow_pinv, what)?;
    let mut cross = DMatrix::<f64>::zeros(dm, ds);
    for (mi, si) in mu.iter().zip(s) {
        for a in 0..dm {
            for b in 0..ds {
                cross[(a, b)] += mi[a] * si[b] / m;
            }
        }
    }
    let coef = cross * finv;
    let out = s
        .iter()
        .map(|si| (&coef * DVector::from_column_slice(si)).iter().copied().collect())
        .collect();
    Ok((out, pinv))
}

/// `V_A,i = Ê(μ S_ηᵀ) F_η⁻¹ S_η,i` and `V_B,i = Ê(μ S_ξᵀ) F_ξ⁻¹ S_ξ,i`.
/// A singular Fisher matrix is an error unless `allow_pinv`, in which case the
/// minimum-norm pseudo-inverse is used and flagged.
pub fn projection_terms(scores: &ScoreSet, allow_pinv: bool) -> Result<Projections> {
    scores.validate()?;
    let (v_a, pinv_eta) = project(&scores.mu, &scores.s_eta, allow_pinv, "F_eta")?;
    let (v_b, pinv_xi) = project(&scores.mu, &scores.s_xi, allow_pinv, "F_xi")?;
    Ok(Projections {
        v_a,
        v_b,
        pinv_eta,
        pinv_xi,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn outer_product_is_symmetric_psd_and_scales() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let v: Vec<Vec<f64>> = (0..50).map(|_| (0..3).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let f = outer_product_mean(&v).unwrap();
        assert_eq!(f.clone(), f.transpose());
        let eig = f.clone().symmetric_eigen();
        assert!(eig.eigenvalues.iter().all(|e| *e >= -1e-10));
        let scaled: Vec<Vec<f64>> = v.iter().map(|x| x.iter().map(|y| 3.0 * y).collect()).collect();
        let f3 = outer_product_mean(&scaled).unwrap();
        assert!((f3 - f * 9.0).abs().max() < 1e-12);
    }

    #[test]
    fn projection_of_own_scores_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s: Vec<Vec<f64>> = (0..40).map(|_| vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]).collect();
        let scores = ScoreSet {
            s_eta: s.clone(),
            s_xi: vec![vec![0.0]; 40],
            mu: s.clone(),
        };
        let p = projection_terms(&scores, true).unwrap();
        assert!(p.pinv_xi && !p.pinv_eta);
        for (a, m) in p.v_a.iter().zip(&s) {
            for (x, y) in a.iter().zip(m) {
                assert!((x - y).abs() < 1e-12);
            }
        }
        assert!(p.v_b.iter().flatten().all(|v| *v == 0.0));
        assert!(matches!(projection_terms(&scores, false), Err(Error::LinearAlgebra(_))));
    }
}

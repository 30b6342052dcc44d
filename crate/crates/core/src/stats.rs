//! Sample statistics, the standard normal CDF, kernel density estimation and
//! percentile bootstrap intervals.

use rand::Rng;
use libm::erfc;

use crate::error::{Error, Result};

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Unbiased sample variance (`n − 1` denominator); zero for fewer than two samples.
pub fn sample_variance(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64
}

pub fn sample_std(xs: &[f64]) -> f64 {
    sample_variance(xs).sqrt()
}

/// Trace of the sample covariance of a set of equal-length vectors.
pub fn covariance_trace(vectors: &[Vec<f64>]) -> f64 {
    if vectors.len() < 2 {
        return 0.0;
    }
    let d = vectors[0].len();
    (0..d)
        .map(|j| {
            let col: Vec<f64> = vectors.iter().map(|v| v[j]).collect();
            sample_variance(&col)
        })
        .sum()
}

/// `Φ(x)` for the standard normal.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

/// `Φ(hi) − Φ(lo)`, evaluated on the tail where it does not cancel.
pub fn normal_interval_prob(lo: f64, hi: f64) -> f64 {
    if hi <= lo {
        return 0.0;
    }
    if lo > 0.0 {
        // Upper tail: Q(lo) − Q(hi).
        let q = |x: f64| 0.5 * erfc(x / std::f64::consts::SQRT_2);
        q(lo) - q(hi)
    } else {
        normal_cdf(hi) - normal_cdf(lo)
    }
}

/// Silverman's rule of thumb `1.06 σ̂ n^{-1/5}`.
pub fn silverman_bandwidth(samples: &[f64]) -> f64 {
    1.06 * sample_std(samples) * (samples.len() as f64).powf(-0.2)
}

/// Gaussian-kernel density on a uniform grid over `[min − 3h, max + 3h]`;
/// returns `(x, density)` pairs.
pub fn kde_estimate(samples: &[f64], bandwidth: Option<f64>, grid: usize) -> Result<Vec<(f64, f64)>> {
    if samples.len() < 2 {
        return Err(Error::invalid("kernel density estimate needs at least two samples"));
    }
    if grid < 2 {
        return Err(Error::invalid("kernel density grid needs at least two points"));
    }
    crate::error::ensure_finite(samples, "kde samples")?;
    let h = match bandwidth {
        Some(h) if h > 0.0 && h.is_finite() => h,
        Some(h) => return Err(Error::invalid(format!("bandwidth {h} must be positive"))),
        None => {
            let h = silverman_bandwidth(samples);
            if !(h > 0.0) {
                return Err(Error::DegenerateBandwidth(
                    "all samples identical; pass an explicit bandwidth".into(),
                ));
            }
            h
        }
    };
    let lo = samples.iter().cloned().fold(f64::INFINITY, f64::min) - 3.0 * h;
    let hi = samples.iter().cloned().fold(f64::NEG_INFINITY, f64::max) + 3.0 * h;
    let norm = 1.0 / (samples.len() as f64 * h * (2.0 * std::f64::consts::PI).sqrt());
    let out = (0..grid)
        .map(|k| {
            let x = lo + (hi - lo) * k as f64 / (grid - 1) as f64;
            let d: f64 = samples
                .iter()
                .map(|s| {
                    let z = (x - s) / h;
                    (-0.5 * z * z).exp()
                })
                .sum();
            (x, d * norm)
        })
        .collect();
    Ok(out)
}

pub fn trapezoid(points: &[(f64, f64)]) -> f64 {
    points
        .windows(2)
        .map(|w| 0.5 * (w[1].0 - w[0].0) * (w[0].1 + w[1].1))
        .sum()
}

/// Empirical quantile with linear interpolation; `sorted` must be ascending.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let pos = q.clamp(0.0, 1.0) * (n - 1) as f64;
    let i = pos.floor() as usize;
    let frac = pos - i as f64;
    if i + 1 >= n {
        sorted[n - 1]
    } else {
        sorted[i] + frac * (sorted[i + 1] - sorted[i])
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConfidenceInterval {
    pub estimate: f64,
    pub lower: f64,
    pub upper: f64,
    pub level: f64,
}

impl ConfidenceInterval {
    pub fn width(&self) -> f64 {
        self.upper - self.lower
    }
}

/// Percentile bootstrap over indices `0..n`: `statistic` receives one
/// resampled index set per draw.
pub fn bootstrap_ci<R, F>(rng: &mut R, n: usize, resamples: usize, level: f64, statistic: F) -> ConfidenceInterval
where
    R: Rng,
    F: Fn(&[usize]) -> f64,
{
    let all: Vec<usize> = (0..n).collect();
    let estimate = statistic(&all);
    let mut idx = vec![0usize; n];
    let mut draws = Vec::with_capacity(resamples);
    for _ in 0..resamples {
        for slot in idx.iter_mut() {
            *slot = rng.random_range(0..n);
        }
        draws.push(statistic(&idx));
    }
    draws.sort_by(|a, b| a.total_cmp(b));
    let alpha = 1.0 - level;
    ConfidenceInterval {
        estimate,
        lower: quantile_sorted(&draws, alpha / 2.0),
        upper: quantile_sorted(&draws, 1.0 - alpha / 2.0),
        level,
    }
}

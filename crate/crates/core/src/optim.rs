//! First-order and quasi-Newton optimizers over flat parameter vectors.

use std::collections::VecDeque;

/// Rescales `grad` in place so its Euclidean norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_grad_norm(grad: &mut [f64], max_norm: f64) -> f64 {
    let norm = l2_norm(grad);
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        grad.iter_mut().for_each(|g| *g *= s);
    }
    norm
}

pub fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Adam on a minimisation objective.
#[derive(Debug, Clone)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(num_params: usize, learning_rate: f64) -> Self {
        Adam {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
            t: 0,
        }
    }

    /// One descent step along `grad` (gradient of the loss).
    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        if self.learning_rate == 0.0 {
            return;
        }
        let b1t = 1.0 - self.beta1.powi(self.t as i32);
        let b2t = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let mh = self.m[i] / b1t;
            let vh = self.v[i] / b2t;
            params[i] -= self.learning_rate * mh / (vh.sqrt() + self.eps);
        }
    }
}

/// Outcome of one L-BFGS iteration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LbfgsStep {
    /// The objective strictly decreased.
    Improved(f64),
    /// The gradient is below tolerance or no decreasing step exists; the
    /// parameters are unchanged.
    Converged(f64),
    /// The objective or its gradient became non-finite at the trial point.
    NonFinite,
}

/// Limited-memory BFGS with Armijo backtracking, minimising `f`.
///
/// Each accepted step satisfies the sufficient-decrease condition, so the
/// objective sequence is monotone non-increasing.
pub struct Lbfgs {
    memory: usize,
    pub grad_tol: f64,
    history: VecDeque<(Vec<f64>, Vec<f64>, f64)>,
    cached: Option<(f64, Vec<f64>)>,
}

impl Lbfgs {
    pub fn new(memory: usize) -> Self {
        Lbfgs {
            memory,
            grad_tol: 1e-10,
            history: VecDeque::new(),
            cached: None,
        }
    }

    pub fn step<F>(&mut self, x: &mut Vec<f64>, f: &mut F) -> LbfgsStep
    where
        F: FnMut(&[f64]) -> Option<(f64, Vec<f64>)>,
    {
        let (fx, gx) = match self.cached.take() {
            Some(c) => c,
            None => match f(x) {
                Some(v) => v,
                None => return LbfgsStep::NonFinite,
            },
        };
        let gnorm = gx.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if gnorm <= self.grad_tol {
            self.cached = Some((fx, gx));
            return LbfgsStep::Converged(fx);
        }

        // Two-loop recursion for the search direction.
        let mut q = gx.clone();
        let mut alphas = Vec::with_capacity(self.history.len());
        for (s, y, rho) in self.history.iter().rev() {
            let a = rho * dot(s, &q);
            q.iter_mut().zip(y).for_each(|(qi, yi)| *qi -= a * yi);
            alphas.push(a);
        }
        let gamma = match self.history.back() {
            Some((s, y, _)) => dot(s, y) / dot(y, y),
            None => 1.0 / l2_norm(&gx).max(1.0),
        };
        q.iter_mut().for_each(|v| *v *= gamma);
        for ((s, y, rho), a) in self.history.iter().zip(alphas.iter().rev()) {
            let b = rho * dot(y, &q);
            q.iter_mut().zip(s).for_each(|(qi, si)| *qi += (a - b) * si);
        }
        let mut dir: Vec<f64> = q.iter().map(|v| -v).collect();
        let mut slope = dot(&gx, &dir);
        if !(slope < 0.0) {
            // Not a descent direction: restart from steepest descent.
            self.history.clear();
            let scale = 1.0 / l2_norm(&gx).max(1.0);
            dir = gx.iter().map(|v| -v * scale).collect();
            slope = dot(&gx, &dir);
        }

        let mut step = 1.0;
        for _ in 0..60 {
            let trial: Vec<f64> = x.iter().zip(&dir).map(|(xi, di)| xi + step * di).collect();
            if let Some((ft, gt)) = f(&trial) {
                if ft.is_finite() && gt.iter().all(|v| v.is_finite()) && ft <= fx + 1e-4 * step * slope {
                    if ft < fx {
                        let s: Vec<f64> = trial.iter().zip(x.iter()).map(|(a, b)| a - b).collect();
                        let y: Vec<f64> = gt.iter().zip(&gx).map(|(a, b)| a - b).collect();
                        let sy = dot(&s, &y);
                        if sy > 1e-12 * l2_norm(&s) * l2_norm(&y) {
                            if self.history.len() == self.memory {
                                self.history.pop_front();
                            }
                            self.history.push_back((s, y, 1.0 / sy));
                        }
                        *x = trial;
                        self.cached = Some((ft, gt));
                        return LbfgsStep::Improved(ft);
                    }
                    break;
                }
            }
            step *= 0.5;
        }
        self.history.clear();
        self.cached = Some((fx, gx));
        LbfgsStep::Converged(fx)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clip_rescales_only_when_needed() {
        let mut g = vec![3.0, 4.0];
        assert_eq!(clip_grad_norm(&mut g, 10.0), 5.0);
        assert_eq!(g, vec![3.0, 4.0]);
        clip_grad_norm(&mut g, 1.0);
        assert!((l2_norm(&g) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn lbfgs_minimises_rosenbrock_monotonically() {
        let mut f = |x: &[f64]| {
            let (a, b) = (x[0], x[1]);
            let v = (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2);
            let g = vec![-2.0 * (1.0 - a) - 400.0 * a * (b - a * a), 200.0 * (b - a * a)];
            Some((v, g))
        };
        let mut x = vec![-1.2, 1.0];
        let mut opt = Lbfgs::new(8);
        let mut last = f64::INFINITY;
        for _ in 0..500 {
            match opt.step(&mut x, &mut f) {
                LbfgsStep::Improved(v) => {
                    assert!(v <= last);
                    last = v;
                }
                LbfgsStep::Converged(_) => break,
                LbfgsStep::NonFinite => panic!("non-finite"),
            }
        }
        assert!((x[0] - 1.0).abs() < 1e-6 && (x[1] - 1.0).abs() < 1e-6, "{x:?}");
    }

    #[test]
    fn adam_with_zero_rate_is_noop() {
        let mut p = vec![1.0, 2.0];
        let mut opt = Adam::new(2, 0.0);
        opt.step(&mut p, &[5.0, -5.0]);
        assert_eq!(p, vec![1.0, 2.0]);
    }
}

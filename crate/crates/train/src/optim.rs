use std::collections::VecDeque;

use crate::error::{Result, TrainError};

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepInfo {
    pub loss_before: f64,
    pub loss_after: f64,
    pub step: f64,
    pub evaluations: usize,
    /// the line search found no decrease and the point was left unchanged
    pub stalled: bool,
}

/// Limited-memory BFGS with a backtracking Armijo line search. Each call to
/// `step` evaluates the objective at the current point, so a fresh batch per
/// call gives stochastic quasi-Newton steps with curvature pairs measured on
/// the batch of that step.
#[derive(Clone, Debug)]
pub struct Lbfgs {
    history: usize,
    s: VecDeque<Vec<f64>>,
    y: VecDeque<Vec<f64>>,
    pub armijo: f64,
    pub max_backtracks: usize,
}

impl Lbfgs {
    pub fn new(history: usize) -> Self {
        Lbfgs {
            history: history.max(1),
            s: VecDeque::new(),
            y: VecDeque::new(),
            armijo: 1e-4,
            max_backtracks: 30,
        }
    }

    pub fn reset(&mut self) {
        self.s.clear();
        self.y.clear();
    }

    pub fn pairs(&self) -> usize {
        self.s.len()
    }

    /// `-H g` by the two-loop recursion.
    fn direction(&self, g: &[f64]) -> Vec<f64> {
        let mut d: Vec<f64> = g.iter().map(|x| -x).collect();
        let k = self.s.len();
        let mut alpha = vec![0.0; k];
        for i in (0..k).rev() {
            let rho = 1.0 / dot(&self.y[i], &self.s[i]);
            alpha[i] = rho * dot(&self.s[i], &d);
            d.iter_mut().zip(&self.y[i]).for_each(|(di, yi)| *di -= alpha[i] * yi);
        }
        if let (Some(s), Some(y)) = (self.s.back(), self.y.back()) {
            let gamma = dot(s, y) / dot(y, y);
            d.iter_mut().for_each(|di| *di *= gamma);
        }
        for i in 0..k {
            let rho = 1.0 / dot(&self.y[i], &self.s[i]);
            let beta = rho * dot(&self.y[i], &d);
            d.iter_mut().zip(&self.s[i]).for_each(|(di, si)| *di += (alpha[i] - beta) * si);
        }
        d
    }

    pub fn step<F>(&mut self, x: &mut [f64], f: F) -> Result<StepInfo>
    where
        F: FnMut(&[f64]) -> (f64, Vec<f64>),
    {
        self.run(x, f, 1)
    }

    /// Up to `inner` quasi-Newton steps on one objective, each started from
    /// the loss and gradient of the previous accepted point. Stops early when
    /// the line search stalls.
    pub fn run<F>(&mut self, x: &mut [f64], mut f: F, inner: usize) -> Result<StepInfo>
    where
        F: FnMut(&[f64]) -> (f64, Vec<f64>),
    {
        let (mut fc, mut gc) = f(x);
        let mut info = StepInfo {
            loss_before: fc,
            loss_after: fc,
            step: 0.0,
            evaluations: 1,
            stalled: false,
        };
        for _ in 0..inner.max(1) {
            if !fc.is_finite() || gc.iter().any(|v| !v.is_finite()) {
                return Err(TrainError::NonFinite("loss or gradient"));
            }
            let (accepted, evals) = self.search(x, fc, &gc, &mut f);
            info.evaluations += evals;
            match accepted {
                Some((t, f1, g1)) => {
                    info.step = t;
                    info.loss_after = f1;
                    fc = f1;
                    gc = g1;
                }
                None => {
                    info.stalled = true;
                    break;
                }
            }
        }
        Ok(info)
    }

    /// Line search along the quasi-Newton direction from `x`; on success moves
    /// `x` and returns the step with the new loss and gradient.
    fn search<F>(&mut self, x: &mut [f64], f0: f64, g0: &[f64], f: &mut F) -> (Option<(f64, f64, Vec<f64>)>, usize)
    where
        F: FnMut(&[f64]) -> (f64, Vec<f64>),
    {
        let mut d = self.direction(g0);
        let mut slope = dot(g0, &d);
        if !(slope < 0.0) {
            self.reset();
            d = g0.iter().map(|v| -v).collect();
            slope = -dot(g0, g0);
        }
        if slope == 0.0 {
            return (None, 0);
        }
        let mut t = if self.s.is_empty() { (1.0 / norm(g0)).min(1.0) } else { 1.0 };
        let mut trial = vec![0.0; x.len()];
        for k in 0..=self.max_backtracks {
            trial.iter_mut().zip(x.iter().zip(&d)).for_each(|(ti, (xi, di))| *ti = xi + t * di);
            let (f1, g1) = f(&trial);
            if f1.is_finite() && f1 <= f0 + self.armijo * t * slope {
                let s: Vec<f64> = d.iter().map(|di| t * di).collect();
                let y: Vec<f64> = g1.iter().zip(g0).map(|(a, b)| a - b).collect();
                // keep the implicit inverse Hessian positive definite
                if dot(&s, &y) > 1e-10 * norm(&s) * norm(&y) {
                    if self.s.len() == self.history {
                        self.s.pop_front();
                        self.y.pop_front();
                    }
                    self.s.push_back(s);
                    self.y.push_back(y);
                }
                x.copy_from_slice(&trial);
                return (Some((t, f1, g1)), k + 1);
            }
            t *= 0.5;
        }
        self.reset();
        (None, self.max_backtracks + 1)
    }
}

#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(dim: usize, lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; dim],
            v: vec![0.0; dim],
            t: 0,
        }
    }

    /// One update; coordinates with identically zero gradient never move.
    pub fn step(&mut self, x: &mut [f64], g: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..x.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g[i] * g[i];
            let mhat = self.m[i] / c1;
            let vhat = self.v[i] / c2;
            x[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
        }
    }
}

//! Case A with every scored column of `q` constrained to the probability
//! simplex, as a softmax would enforce.

use serde::Serialize;

use super::case_a::{expected_loss_closed, grad_q_closed, grad_v_closed, CaseAParams};
use crate::error::{LabError, Result};
use crate::linalg::Mat;
use crate::report::ResidualReport;
use crate::rng::Rng;

/// Euclidean projection onto `{x >= 0, Σ x = 1}` (sort-and-threshold).
pub fn project_simplex(x: &mut [f64]) {
    let mut sorted = x.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let mut cumulative = 0.0;
    let mut theta = 0.0;
    for (k, u) in sorted.iter().enumerate() {
        cumulative += u;
        let t = (cumulative - 1.0) / (k + 1) as f64;
        if u - t > 0.0 {
            theta = t;
        }
    }
    for v in x.iter_mut() {
        *v = (*v - theta).max(0.0);
    }
}

fn on_simplex(col: &[f64], tol: f64) -> bool {
    col.iter().all(|x| *x >= -tol) && (col.iter().sum::<f64>() - 1.0).abs() <= tol
}

/// Stationarity under the constraint: within each scored column the
/// `q`-gradient must be constant on the support (parallel to the gradient of
/// the column sum), and the unconstrained `v`-gradient must vanish.
/// Column 1 is not scored and is ignored.
pub fn softmax_constrained_residual(p: &CaseAParams, tol: f64) -> Result<ResidualReport> {
    let m = p.m();
    for i in 1..m {
        if !on_simplex(&p.q.column(i), 1e-9) {
            return Err(LabError::InvalidArgument(format!(
                "column {} of q is not on the simplex",
                i + 1
            )));
        }
    }
    let gq = grad_q_closed(p);
    let mut worst: f64 = 0.0;
    for i in 1..m {
        let col = gq.column(i);
        let (lo, hi) = col
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), x| (lo.min(*x), hi.max(*x)));
        worst = worst.max(hi - lo);
    }
    let gv = grad_v_closed(p).max_abs();
    let mut rep = ResidualReport::new("softmax-constrained stationarity");
    rep.push("residual", worst + gv, tol);
    rep.info("q_column_spread", worst);
    rep.info("grad_v", gv);
    Ok(rep)
}

/// Canonical constrained point: `v = I`, scored columns `e_{i-1}`, column 1 `e_1`.
pub fn canonical_simplex_point(n: usize, m: usize) -> Result<CaseAParams> {
    let mut q = Mat::shift_right(m);
    q[(0, 0)] = 1.0;
    CaseAParams::new(q, Mat::identity(n))
}

/// Max-norm distance to the canonical point over `v` and the scored columns.
pub fn distance_to_canonical(p: &CaseAParams) -> f64 {
    let (n, m) = (p.n(), p.m());
    let dv = p.v.max_abs_diff(&Mat::identity(n));
    let mut dq: f64 = 0.0;
    for i in 1..m {
        for j in 0..m {
            let target = if j + 1 == i { 1.0 } else { 0.0 };
            dq = dq.max((p.q[(j, i)] - target).abs());
        }
    }
    dv.max(dq)
}

/// A random feasible start: Dirichlet(1) columns and Gaussian `v`.
pub fn random_simplex_init(n: usize, m: usize, rng: &mut Rng) -> Result<CaseAParams> {
    let mut q = Mat::zeros(m, m);
    for i in 0..m {
        let e: Vec<f64> = (0..m).map(|_| -(1.0 - rng.uniform()).ln()).collect();
        let total: f64 = e.iter().sum();
        for j in 0..m {
            q[(j, i)] = e[j] / total;
        }
    }
    let v = Mat::from_fn(n, n, |_, _| rng.normal())?;
    CaseAParams::new(q, v)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct PgdConfig {
    pub max_iters: usize,
    pub initial_step: f64,
    /// stop when the projected step moves no coordinate by more than this
    pub step_tol: f64,
}

impl Default for PgdConfig {
    fn default() -> Self {
        PgdConfig {
            max_iters: 200_000,
            initial_step: 1.0,
            step_tol: 1e-13,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PgdResult {
    pub params: CaseAParams,
    pub iterations: usize,
    pub loss: f64,
    pub distance: f64,
}

fn project_scored(q: &mut Mat) {
    for i in 1..q.cols() {
        let mut col = q.column(i);
        project_simplex(&mut col);
        q.set_column(i, &col);
    }
}

/// Projected gradient descent on the closed-form expected loss with an
/// Armijo backtracking step along the projection arc.
pub fn projected_descent(init: &CaseAParams, cfg: PgdConfig) -> Result<PgdResult> {
    let mut p = init.clone();
    project_scored(&mut p.q);
    let mut loss = expected_loss_closed(&p);
    let mut step = cfg.initial_step;
    let mut iterations = 0;
    while iterations < cfg.max_iters {
        iterations += 1;
        // descent direction is +reported gradient (true gradient is -2x it)
        let gq = grad_q_closed(&p);
        let gv = grad_v_closed(&p);
        let mut accepted = None;
        let mut t = step;
        for _ in 0..60 {
            let mut q = p.q.add_scaled(&gq, t)?;
            project_scored(&mut q);
            let cand = CaseAParams::new(q, p.v.add_scaled(&gv, t)?)?;
            let dq = cand.q.sub(&p.q)?;
            let dv = cand.v.sub(&p.v)?;
            // sufficient decrease relative to the projected move
            let decrease: f64 = dq.hadamard(&gq)?.sum() + dv.hadamard(&gv)?.sum();
            let cand_loss = expected_loss_closed(&cand);
            if cand_loss <= loss - 1e-4 * 2.0 * decrease {
                accepted = Some((cand, cand_loss, dq.max_abs().max(dv.max_abs())));
                break;
            }
            t *= 0.5;
        }
        let Some((cand, cand_loss, moved)) = accepted else {
            break;
        };
        p = cand;
        loss = cand_loss;
        step = (t * 2.0).min(cfg.initial_step * 16.0);
        if moved < cfg.step_tol {
            break;
        }
    }
    Ok(PgdResult {
        distance: distance_to_canonical(&p),
        params: p,
        iterations,
        loss,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn projection_lands_on_simplex() {
        let mut x = vec![0.3, -1.0, 2.5, 0.1];
        project_simplex(&mut x);
        assert!(on_simplex(&x, 1e-12));
        let mut y = vec![0.2, 0.3, 0.5];
        project_simplex(&mut y);
        assert!((y[0] - 0.2).abs() < 1e-15 && (y[2] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn canonical_is_constrained_stationary() {
        let p = canonical_simplex_point(4, 6).unwrap();
        let rep = softmax_constrained_residual(&p, 1e-12).unwrap();
        assert!(rep.passed());
    }

    #[test]
    fn uniform_columns_are_not_stationary() {
        let m = 6;
        let p = CaseAParams::new(Mat::filled(m, m, 1.0 / m as f64), Mat::identity(4)).unwrap();
        let rep = softmax_constrained_residual(&p, 1e-10).unwrap();
        assert!((rep.get("q_column_spread").unwrap() - 0.75).abs() < 1e-12);
        assert!(!rep.passed());
    }

    #[test]
    fn off_simplex_rejected() {
        let p = CaseAParams::new(Mat::filled(4, 4, 0.5), Mat::identity(3)).unwrap();
        assert!(softmax_constrained_residual(&p, 1e-10).is_err());
    }
}

//! Attention restricted to categories: a learned `N x N` table `q` gives the
//! weights and an `M x M` matrix `v` mixes positions. The prediction at
//! position `i` is the diagonal entry `Σ_{j<=i} v[i][j] q(X_j, X_i)`.
//!
//! All expectations below are exact finite sums over category pairs and
//! triples weighted by the category distribution.

use serde::Serialize;

use crate::context::{CategoryDist, QTrueTable, TokenSequence};
use crate::error::{LabError, Result};
use crate::linalg::Mat;
use crate::report::ResidualReport;

#[derive(Clone, Debug, PartialEq)]
pub struct CaseBParams {
    pub v: Mat,
    pub q: Mat,
}

impl CaseBParams {
    pub fn new(v: Mat, q: Mat) -> Result<Self> {
        if v.rows() != v.cols() || q.rows() != q.cols() {
            return Err(LabError::Shape {
                op: "CaseBParams::new",
                lhs: v.shape(),
                rhs: q.shape(),
            });
        }
        Ok(CaseBParams { v, q })
    }

    pub fn n(&self) -> usize {
        self.q.rows()
    }

    pub fn m(&self) -> usize {
        self.v.rows()
    }
}

fn predict_tokens(p: &CaseBParams, t: &[usize]) -> Vec<f64> {
    (0..t.len())
        .map(|i| (0..=i).map(|j| p.v[(i, j)] * p.q[(t[j], t[i])]).sum())
        .collect()
}

pub fn predict_case_b(p: &CaseBParams, t: &TokenSequence) -> Result<Vec<f64>> {
    if t.n() != p.n() || t.m() != p.m() {
        return Err(LabError::Shape {
            op: "predict_case_b",
            lhs: (t.n(), t.m()),
            rhs: (p.n(), p.m()),
        });
    }
    Ok(predict_tokens(p, t.tokens()))
}

/// Squared error over positions `2..M` of one context.
pub fn sse_context(p: &CaseBParams, qtrue: &QTrueTable, t: &[usize]) -> f64 {
    let pred = predict_tokens(p, t);
    (1..t.len())
        .map(|i| {
            let r = qtrue.get(t[i - 1], t[i]) - pred[i];
            r * r
        })
        .sum()
}

/// `(loss, dL/dq, dL/dv)` for one context.
pub fn grad_context(p: &CaseBParams, qtrue: &QTrueTable, t: &[usize]) -> (f64, Mat, Mat) {
    let (n, m) = (p.n(), p.m());
    let pred = predict_tokens(p, t);
    let mut gq = Mat::zeros(n, n);
    let mut gv = Mat::zeros(m, m);
    let mut loss = 0.0;
    for i in 1..m {
        let r = qtrue.get(t[i - 1], t[i]) - pred[i];
        loss += r * r;
        for j in 0..=i {
            gv[(i, j)] += -2.0 * r * p.q[(t[j], t[i])];
            gq[(t[j], t[i])] += -2.0 * r * p.v[(i, j)];
        }
    }
    (loss, gq, gv)
}

/// Exact moments of the learned and true tables under `dist`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Moments {
    /// `E[q(X1,X2)^2]`
    pub eq2: f64,
    /// `E[q(X1,X3) q(X2,X3)]`
    pub cq: f64,
    /// `E[q(X2,X2) q(X1,X2)]`
    pub d: f64,
    /// `E[q(X1,X1)^2]`
    pub eqdiag2: f64,
    /// `E[qt(X1,X3) q(X2,X3)]`
    pub lhs_far: f64,
    /// `E[qt(X1,X2) q(X1,X2)]`
    pub lhs_adjacent: f64,
    /// `E[qt(X1,X2) q(X2,X2)]`
    pub lhs_self: f64,
    /// `E[q(X, t)]` per `t`
    pub mean_q: Vec<f64>,
    /// `E[qt(X, t)]` per `t`
    pub mean_qt: Vec<f64>,
}

pub fn moments(q: &Mat, qtrue: &QTrueTable, dist: &CategoryDist) -> Moments {
    let n = q.rows();
    let p = dist.probs();
    let mean_q: Vec<f64> = (0..n).map(|t| (0..n).map(|a| p[a] * q[(a, t)]).sum()).collect();
    let mean_qt: Vec<f64> = (0..n).map(|t| (0..n).map(|a| p[a] * qtrue.get(a, t)).sum()).collect();
    let mut m = Moments {
        eq2: 0.0,
        cq: 0.0,
        d: 0.0,
        eqdiag2: 0.0,
        lhs_far: 0.0,
        lhs_adjacent: 0.0,
        lhs_self: 0.0,
        mean_q: mean_q.clone(),
        mean_qt: mean_qt.clone(),
    };
    for t in 0..n {
        m.cq += p[t] * mean_q[t] * mean_q[t];
        m.d += p[t] * q[(t, t)] * mean_q[t];
        m.eqdiag2 += p[t] * q[(t, t)] * q[(t, t)];
        m.lhs_far += p[t] * mean_qt[t] * mean_q[t];
        for a in 0..n {
            let w = p[a] * p[t];
            m.eq2 += w * q[(a, t)] * q[(a, t)];
            m.lhs_adjacent += w * qtrue.get(a, t) * q[(a, t)];
            m.lhs_self += w * qtrue.get(a, t) * q[(t, t)];
        }
    }
    m
}

/// `Σ_t P(t) Var_r[qt(r, t)]` with `r ~ dist`. Zero exactly when every
/// column of the table is constant on the support.
pub fn invalid_branch_witness(qtrue: &QTrueTable, dist: &CategoryDist) -> f64 {
    let n = qtrue.n();
    let p = dist.probs();
    // pairwise form: a weighted mean need not reproduce a constant column
    // exactly when the probabilities do not sum to exactly 1
    (0..n)
        .map(|t| {
            let mut var = 0.0;
            for r in 0..n {
                for s in 0..r {
                    var += p[r] * p[s] * (qtrue.get(r, t) - qtrue.get(s, t)).powi(2);
                }
            }
            p[t] * var
        })
        .sum()
}

fn spread(values: impl Iterator<Item = f64>) -> f64 {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), x| (lo.min(x), hi.max(x)));
    if hi >= lo {
        hi - lo
    } else {
        0.0
    }
}

/// Per-row residuals of the stationarity system. Rows are 1-based in ids.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RowResiduals {
    pub row: usize,
    /// worst `s <= i-2` equation
    pub soap: f64,
    pub soap2: f64,
    pub soap3: f64,
    /// worst `t`
    pub eq100: f64,
}

/// Residuals (LHS minus RHS) of the `v`-stationarity equations for row `i`
/// (0-based, `i >= 1`).
pub fn row_residuals(p: &CaseBParams, mo: &Moments, i: usize) -> RowResiduals {
    let v = &p.v;
    let before: f64 = (0..i).map(|j| v[(i, j)]).sum();
    let gap = mo.eq2 - mo.cq;
    let soap = (0..i.saturating_sub(1))
        .map(|s| mo.lhs_far - (mo.cq * before + v[(i, s)] * gap + v[(i, i)] * mo.d))
        .fold(0.0, |acc: f64, r| if r.abs() > acc.abs() { r } else { acc });
    let soap2 = mo.lhs_adjacent - (mo.cq * before + v[(i, i - 1)] * gap + v[(i, i)] * mo.d);
    let soap3 = mo.lhs_self - (mo.d * before + v[(i, i)] * mo.eqdiag2);
    let eq100 = (0..p.n())
        .map(|t| mo.mean_qt[t] - (mo.mean_q[t] * before + v[(i, i)] * p.q[(t, t)]))
        .fold(0.0, |acc: f64, r| if r.abs() > acc.abs() { r } else { acc });
    RowResiduals {
        row: i + 1,
        soap,
        soap2,
        soap3,
        eq100,
    }
}

/// `q(r, t) - beta qt(r, t)` should not depend on `r != t`; returns the
/// worst spread and the worst `Δq(t) = q(t,t) - a(t) - beta qt(t,t)` for
/// row `i` (0-based), where `beta = v[i][i-1] / Σ_{j<i} v[i][j]^2`.
pub fn qa_residuals(p: &CaseBParams, qtrue: &QTrueTable, i: usize) -> Option<(f64, f64)> {
    let n = p.n();
    let norm: f64 = (0..i).map(|j| p.v[(i, j)].powi(2)).sum();
    if norm == 0.0 || n < 3 {
        return None;
    }
    let beta = p.v[(i, i - 1)] / norm;
    let mut worst_spread: f64 = 0.0;
    let mut worst_dq: f64 = 0.0;
    for t in 0..n {
        let off: Vec<f64> = (0..n)
            .filter(|r| *r != t)
            .map(|r| p.q[(r, t)] - beta * qtrue.get(r, t))
            .collect();
        worst_spread = worst_spread.max(spread(off.iter().copied()));
        let a = off.iter().sum::<f64>() / off.len() as f64;
        worst_dq = worst_dq.max((p.q[(t, t)] - a - beta * qtrue.get(t, t)).abs());
    }
    Some((worst_spread, worst_dq))
}

pub fn stationarity_case_b(p: &CaseBParams, qtrue: &QTrueTable, dist: &CategoryDist, tol: f64) -> ResidualReport {
    let m = p.m();
    let mo = moments(&p.q, qtrue, dist);
    let mut rep = ResidualReport::new("case-b stationarity");
    let mut worst = RowResiduals {
        row: 0,
        soap: 0.0,
        soap2: 0.0,
        soap3: 0.0,
        eq100: 0.0,
    };
    for i in 1..m {
        let r = row_residuals(p, &mo, i);
        worst.soap = worst.soap.max(r.soap.abs());
        worst.soap2 = worst.soap2.max(r.soap2.abs());
        worst.soap3 = worst.soap3.max(r.soap3.abs());
        worst.eq100 = worst.eq100.max(r.eq100.abs());
    }
    rep.push("soap", worst.soap, tol);
    rep.push("soap2", worst.soap2, tol);
    rep.push("soap3", worst.soap3, tol);
    rep.push("eq100", worst.eq100, tol);

    // structure: equal entries left of i-1, row constants shared across rows
    let far_spread = (2..m)
        .map(|i| spread((0..i - 1).map(|j| p.v[(i, j)])))
        .fold(0.0, f64::max);
    rep.push("structure.v_far_equal", far_spread, tol);
    rep.push("structure.v_diag_constant", spread((1..m).map(|i| p.v[(i, i)])), tol);
    rep.push("structure.v_shift_constant", spread((1..m).map(|i| p.v[(i, i - 1)])), tol);

    let (mut qa, mut dq) = (0.0f64, 0.0f64);
    let mut boxed: f64 = 0.0;
    let mut vi1: f64 = 0.0;
    for i in 1..m {
        if let Some((s, d)) = qa_residuals(p, qtrue, i) {
            qa = qa.max(s);
            dq = dq.max(d);
        }
        if i >= 2 {
            let shift = p.v[(i, i - 1)];
            let far = p.v[(i, 0)];
            let dv = shift - far;
            let norm: f64 = (0..i).map(|j| p.v[(i, j)].powi(2)).sum();
            boxed = boxed.max((dv * shift - norm).abs());
            vi1 = vi1.max((far * (far * i as f64 + dv)).abs());
        }
    }
    rep.push("qa", qa, tol);
    rep.push("deltaq", dq, tol);
    rep.push("boxed_deltav", boxed, tol);
    rep.push("vi1", vi1, tol);
    rep.info("delta_Q", mo.eq2 - mo.cq);
    rep
}

/// `v[i][i-1] = 1`, everything else zero; `q = qt`.
pub fn canonical_point(qtrue: &QTrueTable, m: usize) -> Result<CaseBParams> {
    CaseBParams::new(Mat::shift_down(m), qtrue.table().clone())
}

/// `v[i][i-1] = 1`, `v[i][i] = c`, `q(r, t) = qt(r, t) + a(t)` with
/// `a(t) = -c / (1 + c) qt(t, t)`; predictions equal the canonical ones.
pub fn gauge_point(qtrue: &QTrueTable, m: usize, c: f64) -> Result<CaseBParams> {
    if (1.0 + c).abs() < 1e-12 {
        return Err(LabError::InvalidArgument("gauge point needs c != -1".into()));
    }
    let n = qtrue.n();
    let mut v = Mat::shift_down(m);
    for i in 1..m {
        v[(i, i)] = c;
    }
    let q = Mat::from_fn(n, n, |r, t| qtrue.get(r, t) - c / (1.0 + c) * qtrue.get(t, t))?;
    CaseBParams::new(v, q)
}

/// A point on the zero-row-sum branch built for row `row` (1-based, `>= 3`):
/// `v[i][i-1] = 1`, `v[i][j] = -1/(i-2)` for `j < i-1`, `v[i][i] = vii`, and
/// `q(r, t) = a(t) + beta qt(r, t)` with `beta = k/(k+1)`, `k = row - 2`,
/// where `a(t)` is chosen so `E[qt(X, t)] = vii q(t, t)`. Returns the point
/// and `beta`.
pub fn zero_row_sum_point(
    qtrue: &QTrueTable,
    dist: &CategoryDist,
    m: usize,
    row: usize,
    vii: f64,
) -> Result<(CaseBParams, f64)> {
    if row < 3 || row > m {
        return Err(LabError::InvalidArgument(format!("row must be in 3..={m}, got {row}")));
    }
    if vii == 0.0 {
        return Err(LabError::InvalidArgument("zero-row-sum point needs vii != 0".into()));
    }
    let n = qtrue.n();
    let mut v = Mat::zeros(m, m);
    for i in 1..m {
        v[(i, i - 1)] = 1.0;
        v[(i, i)] = vii;
        if i >= 2 {
            let k = (i - 1) as f64;
            for j in 0..i - 1 {
                v[(i, j)] = -1.0 / k;
            }
        }
    }
    let k = (row - 2) as f64;
    let beta = k / (k + 1.0);
    let p = dist.probs();
    let mean_qt: Vec<f64> = (0..n).map(|t| (0..n).map(|a| p[a] * qtrue.get(a, t)).sum()).collect();
    let a: Vec<f64> = (0..n).map(|t| mean_qt[t] / vii - beta * qtrue.get(t, t)).collect();
    let q = Mat::from_fn(n, n, |r, t| a[t] + beta * qtrue.get(r, t))?;
    Ok((CaseBParams::new(v, q)?, beta))
}

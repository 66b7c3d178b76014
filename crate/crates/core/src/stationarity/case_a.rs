//! Attention restricted to positions: `q` is an `M x M` score matrix over
//! positions and `v` an `N x N` map on categories. Position `i` predicts the
//! one-hot category of token `i - 1` as `v · Σ_j q[j][i] e(X_j)`, summed over
//! all `j` (non-causal) and scored for `i = 2..M` under uniform categories.
//!
//! Closed-form gradients are returned in the convention that drops the factor
//! `-2`: the true derivative of the expected loss is `-2` times them.

use serde::Serialize;

use crate::error::{LabError, Result};
use crate::linalg::Mat;
use crate::report::ResidualReport;

#[derive(Clone, Debug, PartialEq)]
pub struct CaseAParams {
    pub q: Mat,
    pub v: Mat,
}

impl CaseAParams {
    pub fn new(q: Mat, v: Mat) -> Result<Self> {
        if q.rows() != q.cols() || v.rows() != v.cols() {
            return Err(LabError::Shape {
                op: "CaseAParams::new",
                lhs: q.shape(),
                rhs: v.shape(),
            });
        }
        if q.rows() < 2 || v.rows() < 2 {
            return Err(LabError::InvalidArgument("need N >= 2 and M >= 2".into()));
        }
        Ok(CaseAParams { q, v })
    }

    pub fn n(&self) -> usize {
        self.v.rows()
    }

    pub fn m(&self) -> usize {
        self.q.rows()
    }

    /// Flattened `(q, v)`, row-major, `q` first.
    pub fn to_vec(&self) -> Vec<f64> {
        let mut out = self.q.data().to_vec();
        out.extend_from_slice(self.v.data());
        out
    }

    pub fn from_vec(n: usize, m: usize, x: &[f64]) -> Result<Self> {
        let q = Mat::from_vec(m, m, x[..m * m].to_vec())?;
        let v = Mat::from_vec(n, n, x[m * m..].to_vec())?;
        CaseAParams::new(q, v)
    }
}

/// The four moment-like summaries of `v` that the closed forms use.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct VMoments {
    /// `Tr(v) / N`
    pub trace: f64,
    /// `1^t v 1 / N^2`
    pub total: f64,
    /// `Tr(v^t v) / N`
    pub trace_sq: f64,
    /// `1^t v^t v 1 / N^2`
    pub total_sq: f64,
}

pub fn v_moments(v: &Mat) -> VMoments {
    let n = v.rows() as f64;
    let frob: f64 = v.data().iter().map(|x| x * x).sum();
    // v 1 is the vector of row sums
    let row_sums: Vec<f64> = (0..v.rows()).map(|k| v.row(k).iter().sum()).collect();
    VMoments {
        trace: v.trace() / n,
        total: v.sum() / (n * n),
        trace_sq: frob / n,
        total_sq: row_sums.iter().map(|s| s * s).sum::<f64>() / (n * n),
    }
}

fn col_sum(q: &Mat, i: usize) -> f64 {
    (0..q.rows()).map(|j| q[(j, i)]).sum()
}

fn col_sq(q: &Mat, i: usize) -> f64 {
    (0..q.rows()).map(|j| q[(j, i)] * q[(j, i)]).sum()
}

/// Squared error of one context (0-based categories), positions `2..M`.
pub fn sse_context(p: &CaseAParams, tokens: &[usize]) -> f64 {
    let (n, m) = (p.n(), p.m());
    let mut total = 0.0;
    let mut z = vec![0.0; n];
    for i in 1..m {
        z.iter_mut().for_each(|x| *x = 0.0);
        for j in 0..m {
            z[tokens[j]] += p.q[(j, i)];
        }
        for k in 0..n {
            let pred: f64 = (0..n).map(|l| p.v[(k, l)] * z[l]).sum();
            let target = if tokens[i - 1] == k { 1.0 } else { 0.0 };
            total += (target - pred) * (target - pred);
        }
    }
    total
}

/// True gradient `(dL/dq, dL/dv)` of one context's squared error.
pub fn grad_context(p: &CaseAParams, tokens: &[usize]) -> (Mat, Mat) {
    let (n, m) = (p.n(), p.m());
    let mut gq = Mat::zeros(m, m);
    let mut gv = Mat::zeros(n, n);
    let mut z = vec![0.0; n];
    let mut r = vec![0.0; n];
    for i in 1..m {
        z.iter_mut().for_each(|x| *x = 0.0);
        for j in 0..m {
            z[tokens[j]] += p.q[(j, i)];
        }
        for k in 0..n {
            let pred: f64 = (0..n).map(|l| p.v[(k, l)] * z[l]).sum();
            let target = if tokens[i - 1] == k { 1.0 } else { 0.0 };
            r[k] = target - pred;
        }
        // v^t r, indexed by category
        let vtr: Vec<f64> = (0..n).map(|l| (0..n).map(|k| p.v[(k, l)] * r[k]).sum()).collect();
        for j in 0..m {
            gq[(j, i)] += -2.0 * vtr[tokens[j]];
        }
        for k in 0..n {
            for l in 0..n {
                gv[(k, l)] += -2.0 * r[k] * z[l];
            }
        }
    }
    (gq, gv)
}

pub fn essa_empirical(p: &CaseAParams, contexts: &[Vec<usize>]) -> f64 {
    if contexts.is_empty() {
        return 0.0;
    }
    contexts.iter().map(|t| sse_context(p, t)).sum::<f64>() / contexts.len() as f64
}

/// Expected loss under uniform categories, in closed form.
pub fn expected_loss_closed(p: &CaseAParams) -> f64 {
    let mo = v_moments(&p.v);
    let mut total = 0.0;
    for i in 1..p.m() {
        let s = col_sum(&p.q, i);
        let s2 = col_sq(&p.q, i);
        let shift = p.q[(i - 1, i)];
        let cross = shift * mo.trace + (s - shift) * mo.total;
        let quad = s2 * mo.trace_sq + (s * s - s2) * mo.total_sq;
        total += 1.0 - 2.0 * cross + quad;
    }
    total
}

pub fn grad_q_closed(p: &CaseAParams) -> Mat {
    let m = p.m();
    let mo = v_moments(&p.v);
    let mut g = Mat::zeros(m, m);
    for i in 1..m {
        let s = col_sum(&p.q, i);
        for j in 0..m {
            let e = if j + 1 == i { mo.trace } else { mo.total };
            g[(j, i)] = e - mo.total_sq * s - p.q[(j, i)] * (mo.trace_sq - mo.total_sq);
        }
    }
    g
}

pub fn grad_v_closed(p: &CaseAParams) -> Mat {
    let (n, m) = (p.n(), p.m());
    let nf = n as f64;
    let row_sums: Vec<f64> = (0..n).map(|k| p.v.row(k).iter().sum()).collect();
    let mut g = Mat::zeros(n, n);
    for i in 1..m {
        let s = col_sum(&p.q, i);
        let s2 = col_sq(&p.q, i);
        let shift = p.q[(i - 1, i)];
        for k in 0..n {
            for l in 0..n {
                let delta = if k == l { 1.0 } else { 0.0 };
                g[(k, l)] += s / (nf * nf) + shift * (delta / nf - 1.0 / (nf * nf))
                    - s * s * row_sums[k] / (nf * nf)
                    - s2 * (p.v[(k, l)] / nf - row_sums[k] / (nf * nf));
            }
        }
    }
    g
}

/// Difference `grad(i-1, i) - grad(j, i)` predicted from the moments alone.
pub fn shift_gap_closed(p: &CaseAParams, j: usize, i: usize) -> f64 {
    let mo = v_moments(&p.v);
    (mo.trace - mo.total) - (p.q[(i - 1, i)] - p.q[(j, i)]) * (mo.trace_sq - mo.total_sq)
}

/// Row mean of `v` that zeroes the row-averaged `v` gradient for this `q`.
pub fn barv_barq(q: &Mat, n: usize) -> f64 {
    let nf = n as f64;
    let (mut s1, mut s2) = (0.0, 0.0);
    for i in 1..q.cols() {
        let s = col_sum(q, i);
        s1 += s;
        s2 += s * s;
    }
    (s1 / (nf * nf)) / (s2 / nf)
}

/// Summary coordinates of a parameter pair.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Coordinates {
    /// mean entry of `v`
    pub vbar: f64,
    /// mean diagonal minus mean off-diagonal of `v`
    pub dv: f64,
    /// mean over scored columns of the column mean of `q`
    pub qbar: f64,
    /// mean over scored columns of `q[i-1][i]` minus the other entries' mean
    pub dq: f64,
}

pub fn coordinates(p: &CaseAParams) -> Coordinates {
    let (n, m) = (p.n(), p.m());
    let nf = n as f64;
    let diag_mean = p.v.trace() / nf;
    let off_mean = (p.v.sum() - p.v.trace()) / (nf * nf - nf);
    let mut qbar = 0.0;
    let mut dq = 0.0;
    for i in 1..m {
        let s = col_sum(&p.q, i);
        qbar += s / m as f64;
        dq += p.q[(i - 1, i)] - (s - p.q[(i - 1, i)]) / (m - 1) as f64;
    }
    let scored = (m - 1) as f64;
    Coordinates {
        vbar: p.v.sum() / (nf * nf),
        dv: diag_mean - off_mean,
        qbar: qbar / scored,
        dq: dq / scored,
    }
}

fn spread(values: impl Iterator<Item = f64>) -> f64 {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), x| (lo.min(x), hi.max(x)));
    if hi >= lo {
        hi - lo
    } else {
        0.0
    }
}

/// Residuals of the stationarity relations, in cleared (division-free) form
/// so that both solution branches can be evaluated:
///
/// * `grad_q`, `grad_v`: largest closed-form gradient entry (scored columns)
/// * `barv_barq`: row means of `v` against the value fixed by `q`
/// * `deltav`: `dv · Σ q² - Σ q[i-1][i]`
/// * `deltaq_deltav`: `dv (dq dv - 1)(1 - 1/N)`
/// * `qbar2`: `qbar (vbar² N M + dv² (1 - 1/N)) - (vbar + dv (1 - 1/N) / M)`
/// * `barvN`: `vbar N M qbar - 1`
/// * `dv_branch`: `dv (dv - N vbar)`, zero on both branches
/// * `final_barq`: `qbar (M qbar - dq)`, judged only on the `dv != 0` branch
pub fn stationary_residuals_case_a(p: &CaseAParams, tol: f64) -> ResidualReport {
    let (n, m) = (p.n(), p.m());
    let (nf, mf) = (n as f64, m as f64);
    let mut rep = ResidualReport::new("case-a stationarity");
    let gq = grad_q_closed(p);
    let gv = grad_v_closed(p);
    rep.push("grad_q", gq.max_abs(), tol);
    rep.push("grad_v", gv.max_abs(), tol);

    let off_diag = (0..n).flat_map(|k| (0..n).filter(move |l| *l != k).map(move |l| (k, l)));
    rep.push("structure.v_diag_spread", spread((0..n).map(|k| p.v[(k, k)])), tol);
    rep.push("structure.v_offdiag_spread", spread(off_diag.map(|(k, l)| p.v[(k, l)])), tol);
    let q_off = (1..m)
        .map(|i| spread((0..m).filter(|j| *j + 1 != i).map(|j| p.q[(j, i)])))
        .fold(0.0, f64::max);
    rep.push("structure.q_offshift_spread", q_off, tol);
    rep.push("structure.q_shift_spread", spread((1..m).map(|i| p.q[(i - 1, i)])), tol);
    rep.push("structure.q_colmean_spread", spread((1..m).map(|i| col_sum(&p.q, i) / mf)), tol);

    let c = coordinates(p);
    let target_mean = barv_barq(&p.q, n);
    let row_dev = (0..n)
        .map(|k| (p.v.row(k).iter().sum::<f64>() / nf - target_mean).abs())
        .fold(0.0, f64::max);
    rep.push("barv_barq", if target_mean.is_finite() { row_dev } else { f64::NAN }, tol);

    let shift_sum: f64 = (1..m).map(|i| p.q[(i - 1, i)]).sum();
    let sq_sum: f64 = (1..m).map(|i| col_sq(&p.q, i)).sum();
    rep.push("deltav", c.dv * sq_sum - shift_sum, tol);
    let w = 1.0 - 1.0 / nf;
    rep.push("deltaq_deltav", c.dv * (c.dq * c.dv - 1.0) * w, tol);
    rep.push(
        "qbar2",
        c.qbar * (c.vbar * c.vbar * nf * mf + c.dv * c.dv * w) - (c.vbar + c.dv * w / mf),
        tol,
    );
    rep.push("barvN", c.vbar * nf * mf * c.qbar - 1.0, tol);
    rep.push("dv_branch", c.dv * (c.dv - nf * c.vbar), tol);
    let final_barq = c.qbar * (mf * c.qbar - c.dq);
    if c.dv.abs() > tol {
        rep.push("final_barq", final_barq, tol);
        rep.note("branch: scaled identity (dv != 0)");
    } else {
        rep.info("final_barq", final_barq);
        rep.note("branch: flat (dv = 0); final_barq does not apply");
    }
    rep.info("vbar", c.vbar);
    rep.info("dv", c.dv);
    rep.info("qbar", c.qbar);
    rep.info("dq", c.dq);
    rep
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum FamilyId {
    TrivialFlat,
    Canonical,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StationaryFamily {
    pub id: FamilyId,
    pub params: CaseAParams,
    pub free: Vec<(&'static str, f64)>,
}

/// `v = a I`, `q = shift / a`. The canonical solution is `a = 1`.
pub fn canonical_family(n: usize, m: usize, a: f64) -> Result<StationaryFamily> {
    if a == 0.0 {
        return Err(LabError::InvalidArgument("canonical family needs a != 0".into()));
    }
    let params = CaseAParams::new(Mat::shift_right(m).scale(1.0 / a)?, Mat::identity(n).scale(a)?)?;
    Ok(StationaryFamily {
        id: FamilyId::Canonical,
        params,
        free: vec![("a", a)],
    })
}

fn flat_q(m: usize, qbar: f64) -> Result<Mat> {
    // scored columns: zero at the shift entry, equal elsewhere, mean qbar
    let c = qbar * m as f64 / (m - 1) as f64;
    Mat::from_fn(m, m, |j, i| if i == 0 || j + 1 == i { 0.0 } else { c })
}

/// `v = vbar · J` with `q` flat off the shift entry. For a given `vbar` the
/// column mean `qbar` is found by bisection on the row-mean condition; the
/// second condition then holds automatically on this branch.
pub fn flat_family(n: usize, m: usize, vbar: f64) -> Result<StationaryFamily> {
    if !(vbar > 0.0) {
        return Err(LabError::InvalidArgument(format!("flat family needs vbar > 0, got {vbar}")));
    }
    // the row mean implied by q decreases in qbar
    let residual = |qbar: f64| -> Result<f64> { Ok(barv_barq(&flat_q(m, qbar)?, n) - vbar) };
    let (mut lo, mut hi) = (1e-12, 1.0);
    while residual(hi)? > 0.0 {
        hi *= 2.0;
        if hi > 1e12 {
            return Err(LabError::InvalidArgument("flat family bracket failed".into()));
        }
    }
    while residual(lo)? < 0.0 {
        lo /= 2.0;
        if lo < 1e-300 {
            return Err(LabError::InvalidArgument("flat family bracket failed".into()));
        }
    }
    for _ in 0..400 {
        let mid = 0.5 * (lo + hi);
        if residual(mid)? > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-14 * hi {
            break;
        }
    }
    let qbar = 0.5 * (lo + hi);
    let params = CaseAParams::new(flat_q(m, qbar)?, Mat::filled(n, n, vbar))?;
    Ok(StationaryFamily {
        id: FamilyId::TrivialFlat,
        params,
        free: vec![("vbar", vbar), ("qbar", qbar)],
    })
}

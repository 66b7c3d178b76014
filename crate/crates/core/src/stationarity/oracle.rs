//! Independent gradient oracles: exact enumeration over every context,
//! Monte-Carlo averages of per-context gradients, and central differences.

use rayon::prelude::*;
use serde::Serialize;

use super::case_a::{self, CaseAParams};
use super::case_b::{self, CaseBParams};
use crate::context::{CategoryDist, QTrueTable};
use crate::error::{LabError, Result};
use crate::linalg::Mat;
use crate::rng::Rng;

pub const ENUMERATION_CAP: usize = 1_000_000;

#[derive(Clone, Debug, PartialEq)]
pub struct OracleGradient {
    pub loss: f64,
    pub gq: Mat,
    pub gv: Mat,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MonteCarloGradient {
    pub mean: OracleGradient,
    /// standard errors of the means, same shapes as `mean.gq`, `mean.gv`
    pub se_q: Mat,
    pub se_v: Mat,
    pub samples: usize,
}

/// Number of contexts `N^M`, or the cap error when it is too large.
pub fn enumeration_size(n: usize, m: usize) -> Result<usize> {
    let count = (n as f64).powi(m as i32);
    if count > ENUMERATION_CAP as f64 {
        return Err(LabError::EnumerationCap {
            contexts: count,
            cap: ENUMERATION_CAP,
        });
    }
    Ok(n.pow(m as u32))
}

/// Context number `index` in base `N`, position 0 least significant.
pub fn context_from_index(n: usize, m: usize, mut index: usize) -> Vec<usize> {
    let mut t = vec![0; m];
    for slot in t.iter_mut() {
        *slot = index % n;
        index /= n;
    }
    t
}

fn accumulate(acc: &mut OracleGradient, w: f64, loss: f64, gq: &Mat, gv: &Mat) {
    acc.loss += w * loss;
    for (a, g) in acc.gq.data_mut().iter_mut().zip(gq.data()) {
        *a += w * g;
    }
    for (a, g) in acc.gv.data_mut().iter_mut().zip(gv.data()) {
        *a += w * g;
    }
}

fn zero_gradient(q_shape: (usize, usize), v_shape: (usize, usize)) -> OracleGradient {
    OracleGradient {
        loss: 0.0,
        gq: Mat::zeros(q_shape.0, q_shape.1),
        gv: Mat::zeros(v_shape.0, v_shape.1),
    }
}

/// Exact expected loss and true gradient for case A (uniform categories).
pub fn case_a_enumerate(p: &CaseAParams) -> Result<OracleGradient> {
    let (n, m) = (p.n(), p.m());
    let count = enumeration_size(n, m)?;
    let w = 1.0 / count as f64;
    let mut acc = zero_gradient(p.q.shape(), p.v.shape());
    for idx in 0..count {
        let t = context_from_index(n, m, idx);
        let (gq, gv) = case_a::grad_context(p, &t);
        accumulate(&mut acc, w, case_a::sse_context(p, &t), &gq, &gv);
    }
    Ok(acc)
}

pub fn case_a_enumerated_loss(p: &CaseAParams) -> Result<f64> {
    let (n, m) = (p.n(), p.m());
    let count = enumeration_size(n, m)?;
    let total: f64 = (0..count)
        .map(|idx| case_a::sse_context(p, &context_from_index(n, m, idx)))
        .sum();
    Ok(total / count as f64)
}

/// Exact expected loss and gradient for case B under `dist`. `gq` is the
/// gradient for the learned category table, `gv` for the position mixing.
pub fn case_b_enumerate(p: &CaseBParams, qtrue: &QTrueTable, dist: &CategoryDist) -> Result<OracleGradient> {
    let (n, m) = (p.n(), p.m());
    let count = enumeration_size(n, m)?;
    let mut acc = zero_gradient(p.q.shape(), p.v.shape());
    for idx in 0..count {
        let t = context_from_index(n, m, idx);
        let w: f64 = t.iter().map(|c| dist.p(*c)).product();
        if w == 0.0 {
            continue;
        }
        let (loss, gq, gv) = case_b::grad_context(p, qtrue, &t);
        accumulate(&mut acc, w, loss, &gq, &gv);
    }
    Ok(acc)
}

pub fn case_b_enumerated_loss(p: &CaseBParams, qtrue: &QTrueTable, dist: &CategoryDist) -> Result<f64> {
    let (n, m) = (p.n(), p.m());
    let count = enumeration_size(n, m)?;
    let mut total = 0.0;
    for idx in 0..count {
        let t = context_from_index(n, m, idx);
        let w: f64 = t.iter().map(|c| dist.p(*c)).product();
        if w > 0.0 {
            total += w * case_b::sse_context(p, qtrue, &t);
        }
    }
    Ok(total)
}

const MC_CHUNKS: usize = 64;

/// Mean of per-context gradients over `samples` uniform contexts. Work is
/// split into a fixed number of chunks, each with its own substream, and
/// reduced in chunk order, so the result does not depend on thread count.
pub fn case_a_monte_carlo(p: &CaseAParams, samples: usize, rng: &Rng) -> Result<MonteCarloGradient> {
    if samples < 2 {
        return Err(LabError::InvalidArgument("monte-carlo needs at least 2 samples".into()));
    }
    let (n, m) = (p.n(), p.m());
    let dq = m * m;
    let dim = dq + n * n;
    let per_chunk = samples.div_ceil(MC_CHUNKS);
    let partials: Vec<(f64, Vec<f64>, Vec<f64>, usize)> = (0..MC_CHUNKS)
        .into_par_iter()
        .map(|c| {
            let start = c * per_chunk;
            let count = per_chunk.min(samples.saturating_sub(start));
            let mut r = rng.substream(c as u64);
            let mut sum = vec![0.0; dim];
            let mut sq = vec![0.0; dim];
            let mut loss = 0.0;
            let mut t = vec![0; m];
            for _ in 0..count {
                t.iter_mut().for_each(|x| *x = r.below(n));
                let (gq, gv) = case_a::grad_context(p, &t);
                loss += case_a::sse_context(p, &t);
                for (k, g) in gq.data().iter().chain(gv.data()).enumerate() {
                    sum[k] += g;
                    sq[k] += g * g;
                }
            }
            (loss, sum, sq, count)
        })
        .collect();
    let mut loss = 0.0;
    let mut sum = vec![0.0; dim];
    let mut sq = vec![0.0; dim];
    let mut total = 0usize;
    for (l, s, q2, c) in partials {
        loss += l;
        total += c;
        for k in 0..dim {
            sum[k] += s[k];
            sq[k] += q2[k];
        }
    }
    let nf = total as f64;
    let mean: Vec<f64> = sum.iter().map(|s| s / nf).collect();
    let se: Vec<f64> = sq
        .iter()
        .zip(&mean)
        .map(|(s2, mu)| ((s2 / nf - mu * mu).max(0.0) * nf / (nf - 1.0) / nf).sqrt())
        .collect();
    Ok(MonteCarloGradient {
        mean: OracleGradient {
            loss: loss / nf,
            gq: Mat::from_vec(m, m, mean[..dq].to_vec())?,
            gv: Mat::from_vec(n, n, mean[dq..].to_vec())?,
        },
        se_q: Mat::from_vec(m, m, se[..dq].to_vec())?,
        se_v: Mat::from_vec(n, n, se[dq..].to_vec())?,
        samples: total,
    })
}

/// Central differences of `f` at `x`, one coordinate at a time.
pub fn central_differences(f: impl Fn(&[f64]) -> Result<f64>, x: &[f64], h: f64) -> Result<Vec<f64>> {
    let mut work = x.to_vec();
    let mut out = Vec::with_capacity(x.len());
    for k in 0..x.len() {
        let orig = work[k];
        work[k] = orig + h;
        let up = f(&work)?;
        work[k] = orig - h;
        let down = f(&work)?;
        work[k] = orig;
        out.push((up - down) / (2.0 * h));
    }
    Ok(out)
}

/// Finite-difference gradient of the enumerated case-A loss.
pub fn case_a_finite_diff(p: &CaseAParams, h: f64) -> Result<OracleGradient> {
    let (n, m) = (p.n(), p.m());
    let x = p.to_vec();
    let g = central_differences(|y| case_a_enumerated_loss(&CaseAParams::from_vec(n, m, y)?), &x, h)?;
    Ok(OracleGradient {
        loss: case_a_enumerated_loss(p)?,
        gq: Mat::from_vec(m, m, g[..m * m].to_vec())?,
        gv: Mat::from_vec(n, n, g[m * m..].to_vec())?,
    })
}

/// Largest `|a - b| / se` over all coordinates with positive standard error,
/// and the largest absolute gap where the standard error is zero.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Agreement {
    pub max_z: f64,
    pub max_abs_at_zero_se: f64,
}

pub fn agreement(exact: &OracleGradient, mc: &MonteCarloGradient) -> Agreement {
    let mut out = Agreement {
        max_z: 0.0,
        max_abs_at_zero_se: 0.0,
    };
    let pairs = exact
        .gq
        .data()
        .iter()
        .zip(mc.mean.gq.data())
        .zip(mc.se_q.data())
        .chain(exact.gv.data().iter().zip(mc.mean.gv.data()).zip(mc.se_v.data()));
    for ((a, b), se) in pairs {
        let gap = (a - b).abs();
        if *se > 0.0 {
            out.max_z = out.max_z.max(gap / se);
        } else {
            out.max_abs_at_zero_se = out.max_abs_at_zero_se.max(gap);
        }
    }
    out
}

//! Single-head attention in the column convention.
//!
//! Contexts are matrices whose columns are tokens, so the transposed output is
//! `ATTENTION_*^t = v X W` with `W[j][i] = X_j^t k^t q X_i`. The softmax form
//! replaces `W` by its column-wise causal softmax.

use std::io::{self, Write};

use serde::{Deserialize, Serialize};

use crate::context::EncodedContext;
use crate::error::{LabError, Result};
use crate::linalg::{softmax_causal_columns, Mat};

/// Which part of a token column a parameter matrix may touch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BlockAccess {
    Categories,
    Positions,
    Full,
}

impl BlockAccess {
    fn allows(self, n: usize, feature: usize) -> bool {
        match self {
            BlockAccess::Categories => feature < n,
            BlockAccess::Positions => feature >= n,
            BlockAccess::Full => true,
        }
    }
}

/// Attention parameters. `q` and `k` are `d x (N+M)` and only read the
/// features their access allows; `v` is `(N+M) x (N+M)` and both reads and
/// writes inside its allowed block.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams {
    pub n: usize,
    pub m: usize,
    pub q: Mat,
    pub k: Mat,
    pub v: Mat,
    pub q_access: BlockAccess,
    pub k_access: BlockAccess,
    pub v_access: BlockAccess,
    pub softmax: bool,
    pub scale: f64,
}

impl BlockParams {
    pub fn new(n: usize, m: usize, q: Mat, k: Mat, v: Mat) -> Result<Self> {
        let width = n + m;
        if q.cols() != width || k.cols() != width || q.rows() != k.rows() {
            return Err(LabError::Shape {
                op: "BlockParams::new (q, k)",
                lhs: q.shape(),
                rhs: k.shape(),
            });
        }
        if v.shape() != (width, width) {
            return Err(LabError::Shape {
                op: "BlockParams::new (v)",
                lhs: v.shape(),
                rhs: (width, width),
            });
        }
        Ok(BlockParams {
            n,
            m,
            q,
            k,
            v,
            q_access: BlockAccess::Full,
            k_access: BlockAccess::Full,
            v_access: BlockAccess::Full,
            softmax: false,
            scale: 1.0,
        })
    }

    pub fn with_access(mut self, q: BlockAccess, k: BlockAccess, v: BlockAccess) -> Self {
        self.q_access = q;
        self.k_access = k;
        self.v_access = v;
        self
    }

    pub fn with_softmax(mut self, scale: f64) -> Result<Self> {
        if !(scale > 0.0) || !scale.is_finite() {
            return Err(LabError::InvalidArgument(format!("softmax scale must be positive, got {scale}")));
        }
        self.softmax = true;
        self.scale = scale;
        Ok(self)
    }

    pub fn width(&self) -> usize {
        self.n + self.m
    }

    fn mask_reader(&self, mat: &Mat, access: BlockAccess) -> Mat {
        let mut out = mat.clone();
        for r in 0..out.rows() {
            for c in 0..out.cols() {
                if !access.allows(self.n, c) {
                    out[(r, c)] = 0.0;
                }
            }
        }
        out
    }

    pub fn effective_q(&self) -> Mat {
        self.mask_reader(&self.q, self.q_access)
    }

    pub fn effective_k(&self) -> Mat {
        self.mask_reader(&self.k, self.k_access)
    }

    /// `k^t q` after masking, `(N+M) x (N+M)`.
    pub fn effective_ktq(&self) -> Result<Mat> {
        self.effective_k().transpose().matmul(&self.effective_q())
    }

    pub fn effective_v(&self) -> Mat {
        let mut out = self.v.clone();
        for r in 0..out.rows() {
            for c in 0..out.cols() {
                if !(self.v_access.allows(self.n, r) && self.v_access.allows(self.n, c)) {
                    out[(r, c)] = 0.0;
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionOutput {
    /// `(N+M) x M`, column `i` is the output for token `i`.
    pub attn_t: Mat,
    /// `M x M`, `weights[j][i]` is the weight of source `j` in column `i`.
    pub weights: Mat,
}

fn check_context(x: &EncodedContext, p: &BlockParams) -> Result<()> {
    if x.n() != p.n || x.m() != p.m {
        return Err(LabError::Shape {
            op: "attention",
            lhs: x.x().shape(),
            rhs: (p.width(), p.m),
        });
    }
    Ok(())
}

/// Raw bilinear scores `X^t (k^t q) X`, `scores[j][i] = X_j^t k^t q X_i`.
pub fn raw_scores(x: &EncodedContext, p: &BlockParams) -> Result<Mat> {
    check_context(x, p)?;
    let ktq = p.effective_ktq()?;
    x.x().transpose().matmul(&ktq)?.matmul(x.x())
}

fn zero_below_causal(w: &mut Mat) {
    for i in 0..w.cols() {
        for j in (i + 1)..w.rows() {
            w[(j, i)] = 0.0;
        }
    }
}

fn finish(x: &EncodedContext, p: &BlockParams, weights: Mat) -> Result<AttentionOutput> {
    let attn_t = p.effective_v().matmul(x.x())?.matmul(&weights)?;
    Ok(AttentionOutput { attn_t, weights })
}

/// Attention without softmax.
pub fn attention_star(x: &EncodedContext, p: &BlockParams, causal: bool) -> Result<AttentionOutput> {
    if p.softmax {
        return Err(LabError::InvalidArgument(
            "attention_star called with softmax parameters".into(),
        ));
    }
    let mut weights = raw_scores(x, p)?;
    if causal {
        zero_below_causal(&mut weights);
    }
    finish(x, p, weights)
}

pub fn attention_softmax(x: &EncodedContext, p: &BlockParams, causal: bool) -> Result<AttentionOutput> {
    if !p.softmax {
        return Err(LabError::InvalidArgument(
            "attention_softmax called with non-softmax parameters".into(),
        ));
    }
    let scores = raw_scores(x, p)?.scale(1.0 / p.scale)?;
    let weights = if causal {
        softmax_causal_columns(&scores)?
    } else {
        softmax_full_columns(&scores)?
    };
    finish(x, p, weights)
}

/// Dispatch on the `softmax` flag.
pub fn attention(x: &EncodedContext, p: &BlockParams, causal: bool) -> Result<AttentionOutput> {
    if p.softmax {
        attention_softmax(x, p, causal)
    } else {
        attention_star(x, p, causal)
    }
}

fn softmax_full_columns(scores: &Mat) -> Result<Mat> {
    let mut out = scores.clone();
    for i in 0..scores.cols() {
        let col = scores.column(i);
        let max = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = col.iter().map(|s| (s - max).exp()).collect();
        let total: f64 = e.iter().sum();
        let normed: Vec<f64> = e.iter().map(|x| x / total).collect();
        out.set_column(i, &normed);
    }
    out.validate()?;
    Ok(out)
}

/// `attn_t + gain * X`.
pub fn apply_skip(attn: &AttentionOutput, x: &EncodedContext, gain: f64) -> Result<Mat> {
    attn.attn_t.add_scaled(x.x(), gain)
}

/// CSV with header `row,col,value`, 1-based indices.
pub fn write_weights_csv<W: Write>(mut w: W, weights: &Mat) -> io::Result<()> {
    writeln!(w, "row,col,value")?;
    for r in 0..weights.rows() {
        for c in 0..weights.cols() {
            writeln!(w, "{},{},{}", r + 1, c + 1, weights[(r, c)])?;
        }
    }
    Ok(())
}

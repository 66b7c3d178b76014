//! The hand-programmed one-level transformers and their full pipeline
//! `C · ReLU(B (ATTENTION_*^t + g X) + bias)`.

use serde::{Deserialize, Serialize};

use crate::attention::{apply_skip, attention_star, AttentionOutput, BlockAccess, BlockParams};
use crate::context::{Affine, EncodedContext, QTrueTable};
use crate::error::{LabError, Result};
use crate::linalg::{relu_bias, Mat};

pub const EXTRACTION_SCALE: f64 = 100.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SolutionLabel {
    Sol1Paper,
    Sol1Corrected,
    Sol1Linear,
    Sol2,
    Sol3,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Sol1Variant {
    PaperFaithful,
    Corrected,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PipelineParams {
    pub label: SolutionLabel,
    pub attn: BlockParams,
    pub skip_gain: f64,
    pub b: Option<Mat>,
    pub bias: Vec<f64>,
    pub c: Mat,
    pub relu: bool,
    /// Applied to every output; maps a shifted table back to raw values.
    pub output_map: Affine,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PipelineTrace {
    pub attention: AttentionOutput,
    /// `ATTENTION_*^t + g X`.
    pub with_skip: Mat,
    /// After `B`, before bias and ReLU (equal to `with_skip` when `B` is absent).
    pub pre_activation: Mat,
    /// After bias and ReLU (bias only when the pipeline has no ReLU).
    pub hidden: Mat,
    pub output: Vec<f64>,
}

impl PipelineParams {
    pub fn hidden_rows(&self) -> usize {
        self.b.as_ref().map_or(self.attn.width(), Mat::rows)
    }

    pub fn with_output_map(mut self, map: Affine) -> Self {
        self.output_map = map;
        self
    }

    /// Scale the folded output map of solution 3 by `c` and the read-out row
    /// by `1/c`. Predictions are unchanged while `c * max q < 100`.
    pub fn gauge_scaled(&self, c: f64) -> Result<PipelineParams> {
        if self.label != SolutionLabel::Sol3 {
            return Err(LabError::InvalidArgument("gauge rescaling is defined for solution 3".into()));
        }
        if !(c > 0.0) {
            return Err(LabError::InvalidArgument(format!("gauge factor must be positive, got {c}")));
        }
        let mut out = self.clone();
        out.attn.v = self.attn.v.scale(c)?;
        out.c = self.c.scale(1.0 / c)?;
        Ok(out)
    }
}

fn category_one_hot_rows(n: usize, m: usize, rows: &[(Vec<f64>, f64, f64)]) -> Result<(Mat, Vec<f64>, Mat)> {
    let mut b = Mat::zeros(rows.len(), n + m);
    let mut bias = Vec::with_capacity(rows.len());
    let mut c = Mat::zeros(1, rows.len());
    for (r, (w, beta, coef)) in rows.iter().enumerate() {
        for (a, val) in w.iter().enumerate() {
            b[(r, a)] = *val;
        }
        bias.push(*beta);
        c[(0, r)] = *coef;
    }
    Ok((b, bias, c))
}

/// Detector rows for solution 1 as `(category weights, bias, read-out weight)`.
///
/// The first `N^2` rows follow the displayed layout: `N` repeated-pair rows
/// `3 e_a` (bias -8), then the ordered pairs `a != b` in lexicographic order
/// as `2 e_a + e_b` (bias -4). The corrected variant appends one more row per
/// ordered pair with bias -5 and read-out `-2 q(a, b)`, which cancels the
/// value-2 response of `2 e_a + e_b` to a repeated column `3 e_a`.
pub fn solution1_rows(q: &QTrueTable, variant: Sol1Variant) -> Vec<(Vec<f64>, f64, f64)> {
    let n = q.n();
    let mut rows = Vec::with_capacity(2 * n * n - n);
    for a in 0..n {
        let mut w = vec![0.0; n];
        w[a] = 3.0;
        rows.push((w, -8.0, q.get(a, a)));
    }
    let pairs: Vec<(usize, usize)> = (0..n)
        .flat_map(|a| (0..n).filter(move |b| *b != a).map(move |b| (a, b)))
        .collect();
    for &(a, b) in &pairs {
        let mut w = vec![0.0; n];
        w[a] = 2.0;
        w[b] = 1.0;
        rows.push((w, -4.0, q.get(a, b)));
    }
    if variant == Sol1Variant::Corrected {
        for &(a, b) in &pairs {
            let mut w = vec![0.0; n];
            w[a] = 2.0;
            w[b] = 1.0;
            rows.push((w, -5.0, -2.0 * q.get(a, b)));
        }
    }
    rows
}

fn check_table(q: &QTrueTable, n: usize) -> Result<()> {
    if q.n() != n {
        return Err(LabError::Length {
            op: "q-true table",
            expected: n,
            got: q.n(),
        });
    }
    Ok(())
}

fn shift_attention(n: usize, m: usize, gain: f64, v: Mat) -> Result<BlockParams> {
    let mut q = Mat::zeros(m, n + m);
    q.set_block(0, n, &Mat::shift_right(m).scale(gain)?);
    let mut k = Mat::zeros(m, n + m);
    k.set_block(0, n, &Mat::identity(m));
    Ok(BlockParams::new(n, m, q, k, v)?.with_access(
        BlockAccess::Positions,
        BlockAccess::Positions,
        BlockAccess::Categories,
    ))
}

fn category_projection(n: usize, m: usize) -> Mat {
    let mut v = Mat::zeros(n + m, n + m);
    v.set_block(0, 0, &Mat::identity(n));
    v
}

pub fn build_solution1(q: &QTrueTable, n: usize, m: usize, variant: Sol1Variant) -> Result<PipelineParams> {
    check_table(q, n)?;
    if m < 2 {
        return Err(LabError::InvalidArgument(format!("need M >= 2, got {m}")));
    }
    let attn = shift_attention(n, m, 2.0, category_projection(n, m))?;
    let (b, bias, c) = category_one_hot_rows(n, m, &solution1_rows(q, variant))?;
    Ok(PipelineParams {
        label: match variant {
            Sol1Variant::PaperFaithful => SolutionLabel::Sol1Paper,
            Sol1Variant::Corrected => SolutionLabel::Sol1Corrected,
        },
        attn,
        skip_gain: 1.0,
        b: Some(b),
        bias,
        c,
        relu: true,
        output_map: Affine::IDENTITY,
    })
}

/// The ReLU-free special case for `q(a, b) = 10 a + b` over ten digit
/// categories: category `k` (1-based) carries digit `k - 1`.
pub fn build_solution1_linear(n: usize, m: usize) -> Result<PipelineParams> {
    if n != 10 {
        return Err(LabError::InvalidArgument(format!(
            "the linear read-out encodes decimal digits and needs N = 10, got {n}"
        )));
    }
    let attn = shift_attention(n, m, 10.0, category_projection(n, m))?;
    let c = Mat::from_fn(1, n + m, |_, j| if j < n { j as f64 } else { 0.0 })?;
    Ok(PipelineParams {
        label: SolutionLabel::Sol1Linear,
        attn,
        skip_gain: 1.0,
        b: None,
        bias: vec![0.0; n + m],
        c,
        relu: false,
        output_map: Affine::IDENTITY,
    })
}

fn check_scale_bound(q: &QTrueTable, scale: f64) -> Result<()> {
    let data = q.table().data();
    let min = data.iter().copied().fold(f64::INFINITY, f64::min);
    let max = data.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if min < 0.0 {
        return Err(LabError::ScaleBound(format!(
            "minimum entry {min} is negative; ReLU extraction would clip it (shift the table first)"
        )));
    }
    if max >= scale {
        return Err(LabError::ScaleBound(format!(
            "maximum entry {max} is not below the extraction constant {scale}"
        )));
    }
    Ok(())
}

fn extraction_readout(n: usize, m: usize, scale: f64) -> Result<Mat> {
    Ok(Mat::filled(1, n + m, scale))
}

/// Attention on categories computes `q(X_j, X_i)` as weights; `v` moves
/// position `j` to `j + 1`, so the diagonal of the positional block holds the
/// adjacent-pair value, which `ReLU(X + attn - 1)` isolates.
pub fn build_solution2(q: &QTrueTable, n: usize, m: usize, scale: f64) -> Result<PipelineParams> {
    check_table(q, n)?;
    check_scale_bound(q, scale)?;
    let mut qm = Mat::zeros(n, n + m);
    qm.set_block(0, 0, q.table());
    let mut km = Mat::zeros(n, n + m);
    km.set_block(0, 0, &Mat::identity(n));
    let mut v = Mat::zeros(n + m, n + m);
    v.set_block(n, n, &Mat::shift_down(m).scale(1.0 / scale)?);
    let attn = BlockParams::new(n, m, qm, km, v)?.with_access(
        BlockAccess::Categories,
        BlockAccess::Categories,
        BlockAccess::Positions,
    );
    Ok(PipelineParams {
        label: SolutionLabel::Sol2,
        attn,
        skip_gain: 1.0,
        b: None,
        bias: vec![-1.0; n + m],
        c: extraction_readout(n, m, scale)?,
        relu: true,
        output_map: Affine::IDENTITY,
    })
}

/// Attention on positions copies the previous column; `v` carries the table
/// transposed so category row `t` receives `q(X_{i-1}, t)`.
pub fn build_solution3(q: &QTrueTable, n: usize, m: usize, scale: f64) -> Result<PipelineParams> {
    check_table(q, n)?;
    check_scale_bound(q, scale)?;
    let mut v = Mat::zeros(n + m, n + m);
    v.set_block(0, 0, &q.table().transpose().scale(1.0 / scale)?);
    let attn = shift_attention(n, m, 1.0, v)?;
    Ok(PipelineParams {
        label: SolutionLabel::Sol3,
        attn,
        skip_gain: 1.0,
        b: None,
        bias: vec![-1.0; n + m],
        c: extraction_readout(n, m, scale)?,
        relu: true,
        output_map: Affine::IDENTITY,
    })
}

/// Shift an arbitrary table into `[0, scale / 2)` and return it with the
/// output map that undoes the shift on predictions.
pub fn shift_for_extraction(q: &QTrueTable, scale: f64) -> Result<(QTrueTable, Affine)> {
    let shifted = q.to_nonnegative(scale / 2.0)?;
    // shifted = s * raw + o on the table; relative to q itself
    let s = shifted.affine().scale / q.affine().scale;
    let o = shifted.affine().offset - s * q.affine().offset;
    Ok((shifted, Affine { scale: 1.0 / s, offset: -o / s }))
}

pub fn trace_pipeline(p: &PipelineParams, x: &EncodedContext) -> Result<PipelineTrace> {
    let attention = attention_star(x, &p.attn, true)?;
    let with_skip = apply_skip(&attention, x, p.skip_gain)?;
    let pre_activation = match &p.b {
        Some(b) => b.matmul(&with_skip)?,
        None => with_skip.clone(),
    };
    let hidden = if p.relu {
        relu_bias(&pre_activation, &p.bias)?
    } else {
        let bias = Mat::from_fn(pre_activation.rows(), pre_activation.cols(), |r, _| p.bias[r])?;
        pre_activation.add(&bias)?
    };
    let raw = p.c.matmul(&hidden)?;
    let output = raw.data().iter().map(|y| p.output_map.apply(*y)).collect();
    Ok(PipelineTrace {
        attention,
        with_skip,
        pre_activation,
        hidden,
        output,
    })
}

pub fn run_pipeline(p: &PipelineParams, x: &EncodedContext) -> Result<Vec<f64>> {
    Ok(trace_pipeline(p, x)?.output)
}

/// Response of the fully connected stage `C ReLU(B z + bias)` to a single
/// category column `z` (positional part zero).
pub fn fc_response(p: &PipelineParams, category_column: &[f64]) -> Result<f64> {
    let width = p.attn.width();
    let mut z = vec![0.0; width];
    z[..category_column.len()].copy_from_slice(category_column);
    let z = Mat::column_vector(&z)?;
    let pre = match &p.b {
        Some(b) => b.matmul(&z)?,
        None => z,
    };
    let h = if p.relu {
        relu_bias(&pre, &p.bias)?
    } else {
        pre.add(&Mat::column_vector(&p.bias)?)?
    };
    Ok(p.output_map.apply(p.c.matmul(&h)?[(0, 0)]))
}

/// The pair column `2 e_prev + e_cur` the solution-1 attention produces
/// (equal to `3 e_a` for a repeated category).
pub fn pair_column(n: usize, prev: usize, cur: usize) -> Vec<f64> {
    let mut z = vec![0.0; n];
    z[prev] += 2.0;
    z[cur] += 1.0;
    z
}

/// Closed-form extra output of the displayed `B` on a repeated pair `(a, a)`.
pub fn paper_leak(q: &QTrueTable, a: usize) -> f64 {
    2.0 * (0..q.n()).filter(|b| *b != a).map(|b| q.get(a, b)).sum::<f64>()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EquivalenceReport {
    pub lhs: Vec<f64>,
    pub rhs: Vec<f64>,
    pub max_abs_diff: f64,
    /// `max |diag(S X^t A X) - diag(X^t A^t X D)|` on the same `X_C`.
    pub transpose_identity_diff: f64,
}

/// `diag(S X^t A X)` against `diag(X^t A^t X D_{-1})`.
pub fn transpose_identity_diff(x: &Mat, a: &Mat) -> Result<f64> {
    let m = x.cols();
    let left = Mat::shift_down(m).matmul(&x.transpose())?.matmul(a)?.matmul(x)?;
    let right = x.transpose().matmul(&a.transpose())?.matmul(x)?.matmul(&Mat::shift_right(m))?;
    Ok(left
        .diagonal()
        .iter()
        .zip(right.diagonal())
        .fold(0.0f64, |acc, (l, r)| acc.max((l - r).abs())))
}

/// Solution 2's read-out `diag(S X_C^t A X_C)` against solution 3's
/// `1^t ReLU(100 X_C + A^t X_C D_{-1} - 100)`.
pub fn check_equivalence_2_3(q: &QTrueTable, xc: &Mat) -> Result<EquivalenceReport> {
    check_scale_bound(q, EXTRACTION_SCALE)?;
    if xc.rows() != q.n() {
        return Err(LabError::Shape {
            op: "check_equivalence_2_3",
            lhs: xc.shape(),
            rhs: q.table().shape(),
        });
    }
    let a = q.table();
    let m = xc.cols();
    let lhs = Mat::shift_down(m)
        .matmul(&xc.transpose())?
        .matmul(a)?
        .matmul(xc)?
        .diagonal();
    let inner = xc
        .scale(EXTRACTION_SCALE)?
        .add(&a.transpose().matmul(xc)?.matmul(&Mat::shift_right(m))?)?;
    let activated = relu_bias(&inner, &vec![-EXTRACTION_SCALE; q.n()])?;
    let rhs = Mat::filled(1, q.n(), 1.0).matmul(&activated)?.into_data();
    let max_abs_diff = lhs.iter().zip(&rhs).fold(0.0f64, |acc, (l, r)| acc.max((l - r).abs()));
    Ok(EquivalenceReport {
        transpose_identity_diff: transpose_identity_diff(xc, a)?,
        lhs,
        rhs,
        max_abs_diff,
    })
}

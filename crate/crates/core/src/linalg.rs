//! Dense real-matrix kernels.
//!
//! Every constructor and kernel rejects NaN/Inf, so a `Mat` that exists is
//! always finite. Products accumulate `out[i][j] += a[i][k] * b[k][j]` with
//! `k` ascending; the summation order is therefore fixed and reproducible.

use std::fmt;
use std::ops::{Index, IndexMut};

use crate::error::{LabError, Result};

#[derive(Clone, PartialEq)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

fn check_finite(data: &[f64], op: &'static str) -> Result<()> {
    if data.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(LabError::NonFinite(op))
    }
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        assert!(value.is_finite(), "Mat::filled with non-finite value");
        Mat {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Mat::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    /// `D_{-1}`: ones on the superdiagonal, `D[i][j] = 1` iff `i = j - 1`.
    ///
    /// Right-multiplying by it moves every column one step to the right and
    /// leaves the first column empty.
    pub fn shift_right(n: usize) -> Self {
        let mut m = Mat::zeros(n, n);
        for j in 1..n {
            m[(j - 1, j)] = 1.0;
        }
        m
    }

    /// `S`: ones on the subdiagonal, maps one-hot position `j` to `j + 1` and
    /// the last position to zero. `S = D_{-1}^t`.
    pub fn shift_down(n: usize) -> Self {
        let mut m = Mat::zeros(n, n);
        for j in 0..n.saturating_sub(1) {
            m[(j + 1, j)] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(LabError::Length {
                op: "Mat::from_vec",
                expected: rows * cols,
                got: data.len(),
            });
        }
        check_finite(&data, "Mat::from_vec")?;
        Ok(Mat { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            if row.len() != c {
                return Err(LabError::Length {
                    op: "Mat::from_rows",
                    expected: c,
                    got: row.len(),
                });
            }
            data.extend_from_slice(row);
        }
        Mat::from_vec(r, c, data)
    }

    pub fn column_vector(values: &[f64]) -> Result<Self> {
        Mat::from_vec(values.len(), 1, values.to_vec())
    }

    pub fn row_vector(values: &[f64]) -> Result<Self> {
        Mat::from_vec(1, values.len(), values.to_vec())
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Result<Self> {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Mat::from_vec(rows, cols, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Mutable access to the raw buffer. Callers must keep entries finite;
    /// [`Mat::validate`] re-checks.
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn validate(&self) -> Result<()> {
        check_finite(&self.data, "Mat::validate")
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }

    pub fn set_column(&mut self, j: usize, values: &[f64]) {
        assert_eq!(values.len(), self.rows);
        for (i, v) in values.iter().enumerate() {
            self[(i, j)] = *v;
        }
    }

    pub fn transpose(&self) -> Mat {
        let mut t = Mat::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t[(j, i)] = self[(i, j)];
            }
        }
        t
    }

    pub fn matmul(&self, b: &Mat) -> Result<Mat> {
        if self.cols != b.rows {
            return Err(LabError::Shape {
                op: "matmul",
                lhs: self.shape(),
                rhs: b.shape(),
            });
        }
        let mut out = Mat::zeros(self.rows, b.cols);
        for i in 0..self.rows {
            let out_row = &mut out.data[i * b.cols..(i + 1) * b.cols];
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                let b_row = &b.data[k * b.cols..(k + 1) * b.cols];
                for (o, bv) in out_row.iter_mut().zip(b_row) {
                    *o += a * bv;
                }
            }
        }
        check_finite(&out.data, "matmul")?;
        Ok(out)
    }

    fn zip_with(&self, other: &Mat, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Mat> {
        if self.shape() != other.shape() {
            return Err(LabError::Shape {
                op,
                lhs: self.shape(),
                rhs: other.shape(),
            });
        }
        let data: Vec<f64> = self.data.iter().zip(&other.data).map(|(a, b)| f(*a, *b)).collect();
        check_finite(&data, op)?;
        Ok(Mat {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    pub fn add(&self, other: &Mat) -> Result<Mat> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Mat) -> Result<Mat> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    /// Entrywise product.
    pub fn hadamard(&self, other: &Mat) -> Result<Mat> {
        self.zip_with(other, "hadamard", |a, b| a * b)
    }

    pub fn scale(&self, c: f64) -> Result<Mat> {
        let data: Vec<f64> = self.data.iter().map(|x| x * c).collect();
        check_finite(&data, "scale")?;
        Ok(Mat {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    /// `self + gain * other`.
    pub fn add_scaled(&self, other: &Mat, gain: f64) -> Result<Mat> {
        self.zip_with(other, "add_scaled", |a, b| a + gain * b)
    }

    pub fn block(&self, r0: usize, c0: usize, rows: usize, cols: usize) -> Mat {
        assert!(r0 + rows <= self.rows && c0 + cols <= self.cols, "block out of range");
        let mut out = Mat::zeros(rows, cols);
        for i in 0..rows {
            for j in 0..cols {
                out[(i, j)] = self[(r0 + i, c0 + j)];
            }
        }
        out
    }

    pub fn set_block(&mut self, r0: usize, c0: usize, block: &Mat) {
        assert!(
            r0 + block.rows <= self.rows && c0 + block.cols <= self.cols,
            "set_block out of range"
        );
        for i in 0..block.rows {
            for j in 0..block.cols {
                self[(r0 + i, c0 + j)] = block[(i, j)];
            }
        }
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).collect()
    }

    pub fn trace(&self) -> f64 {
        self.diagonal().iter().sum()
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    pub fn max_abs_diff(&self, other: &Mat) -> f64 {
        assert_eq!(self.shape(), other.shape(), "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<Mat> {
        let data: Vec<f64> = self.data.iter().map(|x| f(*x)).collect();
        check_finite(&data, "map")?;
        Ok(Mat {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }
}

impl Index<(usize, usize)> for Mat {
    type Output = f64;

    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for Mat {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &mut self.data[i * self.cols + j]
    }
}

impl fmt::Debug for Mat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Mat {}x{} [", self.rows, self.cols)?;
        for i in 0..self.rows {
            write!(f, "  ")?;
            for j in 0..self.cols {
                write!(f, "{:>10.4} ", self[(i, j)])?;
            }
            writeln!(f)?;
        }
        write!(f, "]")
    }
}

/// `out[i][j] = max(0, m[i][j] + bias[i])`, the bias broadcast over columns.
pub fn relu_bias(m: &Mat, bias: &[f64]) -> Result<Mat> {
    if bias.len() != m.rows() {
        return Err(LabError::Length {
            op: "relu_bias",
            expected: m.rows(),
            got: bias.len(),
        });
    }
    check_finite(bias, "relu_bias")?;
    let mut out = m.clone();
    for i in 0..m.rows() {
        for j in 0..m.cols() {
            out[(i, j)] = (m[(i, j)] + bias[i]).max(0.0);
        }
    }
    Ok(out)
}

/// Column-wise causal softmax of a square score matrix.
///
/// Column `i` holds `exp(s[j][i]) / sum_{j' <= i} exp(s[j'][i])` for `j <= i`
/// and exactly zero below the diagonal boundary (`j > i`).
pub fn softmax_causal_columns(scores: &Mat) -> Result<Mat> {
    if scores.rows() != scores.cols() {
        return Err(LabError::Shape {
            op: "softmax_causal_columns",
            lhs: scores.shape(),
            rhs: (scores.cols(), scores.cols()),
        });
    }
    let n = scores.rows();
    let mut out = Mat::zeros(n, n);
    for i in 0..n {
        let max = (0..=i).map(|j| scores[(j, i)]).fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for j in 0..=i {
            let e = (scores[(j, i)] - max).exp();
            out[(j, i)] = e;
            total += e;
        }
        for j in 0..=i {
            out[(j, i)] /= total;
        }
    }
    check_finite(out.data(), "softmax_causal_columns")?;
    Ok(out)
}

/// Standardise a vector to mean 0 and variance 1 using the population
/// variance regularised by `eps`, then apply the optional `(gain, shift)`.
pub fn layer_norm(v: &[f64], eps: f64, affine: Option<(&[f64], &[f64])>) -> Result<Vec<f64>> {
    if v.len() < 2 {
        return Err(LabError::Length {
            op: "layer_norm",
            expected: 2,
            got: v.len(),
        });
    }
    if let Some((g, s)) = affine {
        if g.len() != v.len() || s.len() != v.len() {
            return Err(LabError::Length {
                op: "layer_norm",
                expected: v.len(),
                got: g.len().min(s.len()),
            });
        }
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    let inv = 1.0 / (var + eps).sqrt();
    let out: Vec<f64> = v
        .iter()
        .enumerate()
        .map(|(i, x)| {
            let z = (x - mean) * inv;
            match affine {
                Some((g, s)) => g[i] * z + s[i],
                None => z,
            }
        })
        .collect();
    check_finite(&out, "layer_norm")?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_times_a_is_a() {
        let a = Mat::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]).unwrap();
        assert_eq!(Mat::identity(3).matmul(&a).unwrap(), a);
    }

    #[test]
    fn row_times_column() {
        let r = Mat::row_vector(&[1.0, 1.0, 1.0]).unwrap();
        let c = Mat::column_vector(&[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(r.matmul(&c).unwrap().data(), &[6.0]);
    }

    #[test]
    fn shift_right_picks_left_neighbour() {
        let d = Mat::shift_right(4);
        let e2 = Mat::column_vector(&[0.0, 1.0, 0.0, 0.0]).unwrap();
        assert_eq!(d.matmul(&e2).unwrap().data(), &[1.0, 0.0, 0.0, 0.0]);
        // e_i^t D e_j = 1 iff i = j - 1
        for i in 0..4 {
            for j in 0..4 {
                assert_eq!(d[(i, j)], if i + 1 == j { 1.0 } else { 0.0 });
            }
        }
        assert_eq!(Mat::shift_down(4), d.transpose());
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let err = Mat::zeros(2, 3).matmul(&Mat::zeros(2, 3)).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("(2, 3)"), "{msg}");
    }

    #[test]
    fn non_finite_rejected() {
        assert!(Mat::from_vec(1, 1, vec![f64::NAN]).is_err());
        let big = Mat::from_vec(1, 1, vec![1e300]).unwrap();
        assert!(big.matmul(&big).is_err());
    }

    #[test]
    fn relu_bias_keeps_single_entry() {
        let m = Mat::column_vector(&[12.0, 32.0, 125.0, 11.0]).unwrap();
        let out = relu_bias(&m, &[-100.0; 4]).unwrap();
        assert_eq!(out.data(), &[0.0, 0.0, 25.0, 0.0]);
    }

    #[test]
    fn relu_bias_edge_cases() {
        let m = Mat::from_rows(&[vec![0.5, 2.0], vec![3.0, 0.0]]).unwrap();
        assert_eq!(relu_bias(&m, &[0.0, 0.0]).unwrap(), m);
        let neg = Mat::filled(2, 3, -1.0);
        assert_eq!(relu_bias(&neg, &[0.0, 0.0]).unwrap(), Mat::zeros(2, 3));
        assert!(relu_bias(&m, &[0.0]).is_err());
    }

    #[test]
    fn causal_softmax_uniform_and_first_column() {
        let w = softmax_causal_columns(&Mat::zeros(3, 3)).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let expected = if j <= i { 1.0 / (i as f64 + 1.0) } else { 0.0 };
                assert!((w[(j, i)] - expected).abs() < 1e-15);
            }
        }
        assert_eq!(w.column(0), vec![1.0, 0.0, 0.0]);
    }

    #[test]
    fn causal_softmax_log_ratio() {
        let mut s = Mat::zeros(3, 3);
        s[(0, 1)] = 3f64.ln();
        s[(1, 1)] = 1f64.ln();
        s[(2, 1)] = 50.0; // masked, must not matter
        let w = softmax_causal_columns(&s).unwrap();
        assert!((w[(0, 1)] - 0.75).abs() < 1e-15);
        assert!((w[(1, 1)] - 0.25).abs() < 1e-15);
        assert_eq!(w[(2, 1)], 0.0);
    }

    #[test]
    fn layer_norm_cases() {
        assert_eq!(layer_norm(&[1.0; 4], 1e-5, None).unwrap(), vec![0.0; 4]);
        let two = layer_norm(&[0.0, 2.0], 0.0, None).unwrap();
        assert_eq!(two, vec![-1.0, 1.0]);
        let out = layer_norm(&[1.0, 2.0, 3.0], 1e-5, None).unwrap();
        let mean = out.iter().sum::<f64>() / 3.0;
        let var = out.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 3.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 2e-5);
        let aff = layer_norm(&[0.0, 2.0], 0.0, Some((&[2.0, 2.0], &[1.0, 1.0]))).unwrap();
        assert_eq!(aff, vec![-1.0, 3.0]);
        assert!(layer_norm(&[1.0], 1e-5, None).is_err());
    }
}

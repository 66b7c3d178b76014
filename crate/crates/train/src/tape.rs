//! Reverse-mode tape over dense matrices.
//!
//! A batch of contexts is laid out side by side: every per-position quantity
//! is a matrix with `B * M` columns, block `b` holding context `b`. Ops that
//! act per context (the bilinear score gather, the causal mask or softmax, the
//! weighted column average) walk those blocks.

use std::sync::Arc;

use attnlab::Mat;

use crate::encoded::EncodedBatch;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Gemm { a: Var, ta: bool, b: Var, tb: bool },
    Add(Var, Var),
    Scale(Var, f64),
    AddColBias { a: Var, bias: Var },
    /// `w x + bias 1^t`, optionally through a ReLU
    Dense { w: Var, x: Var, bias: Var, relu: bool },
    Relu(Var),
    /// `a X` for the encoded batch
    EncodedMul { a: Var, enc: Arc<EncodedBatch> },
    /// per context `X^t a X`, `M x M`
    EncodedBilinear { a: Var, enc: Arc<EncodedBatch> },
    /// adds a constant; the gradient passes straight through
    AddConstant(Var),
    CausalMask { a: Var, m: usize },
    CausalSoftmax { a: Var, m: usize, scale: f64 },
    /// per context `a_b w_b`
    BlockMatMul { a: Var, w: Var, m: usize },
    /// per column; caches the normalised values and `1/sqrt(var + eps)`
    LayerNormCols { a: Var, gain: Var, shift: Var, normed: Mat, inv_std: Vec<f64> },
    /// rows `start..start+len` of `a`
    SliceRows { a: Var, start: usize },
    /// mean over the masked columns of a single row
    MaskedMse { pred: Var, targets: Arc<Vec<f64>>, mask: Arc<Vec<bool>>, count: usize },
    /// `Σ w a²`
    WeightedSquareSum { a: Var, weights: Arc<Mat> },
    Sum(Vec<Var>),
}

#[derive(Clone, Debug)]
struct Node {
    value: Mat,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// `C = alpha op(A) op(B) + beta C` through strided `dgemm`.
pub(crate) fn gemm_into(alpha: f64, a: &Mat, ta: bool, b: &Mat, tb: bool, beta: f64, c: &mut Mat) {
    let (ar, ac) = if ta { (a.cols(), a.rows()) } else { a.shape() };
    let (br, bc) = if tb { (b.cols(), b.rows()) } else { b.shape() };
    assert_eq!(ac, br, "gemm inner dimensions {:?}{} x {:?}{}", a.shape(), ta, b.shape(), tb);
    assert_eq!(c.shape(), (ar, bc), "gemm output shape");
    let (rsa, csa) = if ta { (1, a.cols() as isize) } else { (a.cols() as isize, 1) };
    let (rsb, csb) = if tb { (1, b.cols() as isize) } else { (b.cols() as isize, 1) };
    let csc = c.cols() as isize;
    if ar == 0 || bc == 0 {
        return;
    }
    if ac == 0 {
        c.data_mut().iter_mut().for_each(|x| *x *= beta);
        return;
    }
    // SAFETY: the shapes and strides above describe the three row-major
    // buffers exactly, and `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            ar,
            ac,
            bc,
            alpha,
            a.data().as_ptr(),
            rsa,
            csa,
            b.data().as_ptr(),
            rsb,
            csb,
            beta,
            c.data_mut().as_mut_ptr(),
            csc,
            1,
        );
    }
}

/// A strided read-only view into a row-major buffer.
#[derive(Clone, Copy)]
struct View<'a> {
    data: &'a [f64],
    off: usize,
    rows: usize,
    cols: usize,
    rs: usize,
    cs: usize,
}

impl<'a> View<'a> {
    /// Columns `c0..c0+cols` of `m`, optionally transposed.
    fn cols_of(m: &'a Mat, c0: usize, cols: usize, t: bool) -> Self {
        let v = View {
            data: m.data(),
            off: c0,
            rows: m.rows(),
            cols,
            rs: m.cols(),
            cs: 1,
        };
        if t {
            View {
                rows: v.cols,
                cols: v.rows,
                rs: v.cs,
                cs: v.rs,
                ..v
            }
        } else {
            v
        }
    }

    fn last(&self) -> usize {
        self.off + (self.rows - 1) * self.rs + (self.cols - 1) * self.cs
    }
}

/// `C[.., c0..c0+n] = alpha A B + beta C[.., c0..c0+n]` on column blocks.
fn gemm_block(alpha: f64, a: View, b: View, beta: f64, c: &mut Mat, c0: usize) {
    assert_eq!(a.cols, b.rows, "block gemm inner dimensions");
    assert_eq!(a.rows, c.rows(), "block gemm rows");
    assert!(c0 + b.cols <= c.cols(), "block gemm columns");
    if a.rows == 0 || b.cols == 0 || a.cols == 0 {
        return;
    }
    assert!(a.last() < a.data.len() && b.last() < b.data.len(), "block gemm view out of bounds");
    let csc = c.cols() as isize;
    // SAFETY: the views were bounds-checked above and the output block lies
    // inside `c`, which is borrowed mutably and so aliases neither input.
    unsafe {
        matrixmultiply::dgemm(
            a.rows,
            a.cols,
            b.cols,
            alpha,
            a.data.as_ptr().add(a.off),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr().add(b.off),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.data_mut().as_mut_ptr().add(c0),
            csc,
            1,
        );
    }
}

pub(crate) fn gemm(a: &Mat, ta: bool, b: &Mat, tb: bool) -> Mat {
    let rows = if ta { a.cols() } else { a.rows() };
    let cols = if tb { b.rows() } else { b.cols() };
    let mut c = Mat::zeros(rows, cols);
    gemm_into(1.0, a, ta, b, tb, 0.0, &mut c);
    c
}

/// Builds a matrix without the finiteness check: non-finite values must flow
/// through the tape so that divergence shows up as a non-finite loss.
fn raw(rows: usize, cols: usize, data: Vec<f64>) -> Mat {
    assert_eq!(data.len(), rows * cols, "raw matrix size");
    let mut m = Mat::zeros(rows, cols);
    m.data_mut().copy_from_slice(&data);
    m
}

fn accumulate(slot: &mut Option<Mat>, g: Mat) {
    match slot {
        Some(acc) => acc.data_mut().iter_mut().zip(g.data()).for_each(|(a, b)| *a += b),
        None => *slot = Some(g),
    }
}

fn add_into(slot: &mut Option<Mat>, shape: (usize, usize), f: impl FnOnce(&mut Mat)) {
    let acc = slot.get_or_insert_with(|| Mat::zeros(shape.0, shape.1));
    f(acc);
}

/// Leaf gradients indexed by `Var`; `None` where nothing flowed.
#[derive(Debug)]
pub struct Grads {
    grads: Vec<Option<Mat>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Mat> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Mat> {
        self.grads[v.0].take()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Mat, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn leaf(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn gemm(&mut self, a: Var, ta: bool, b: Var, tb: bool) -> Var {
        let value = gemm(self.value(a), ta, self.value(b), tb);
        self.push(value, Op::Gemm { a, ta, b, tb })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut value = self.value(a).clone();
        assert_eq!(value.shape(), self.value(b).shape(), "add shapes");
        value.data_mut().iter_mut().zip(self.nodes[b.0].value.data()).for_each(|(x, y)| *x += y);
        self.push(value, Op::Add(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let mut value = self.value(a).clone();
        value.data_mut().iter_mut().for_each(|x| *x *= s);
        self.push(value, Op::Scale(a, s))
    }

    /// `a + bias 1^t` with `bias` a column.
    pub fn add_col_bias(&mut self, a: Var, bias: Var) -> Var {
        let b = self.value(bias);
        assert_eq!((b.rows(), b.cols()), (self.value(a).rows(), 1), "bias shape");
        let bias_vals = b.data().to_vec();
        let mut value = self.value(a).clone();
        let cols = value.cols();
        for (r, row) in value.data_mut().chunks_mut(cols).enumerate() {
            row.iter_mut().for_each(|x| *x += bias_vals[r]);
        }
        self.push(value, Op::AddColBias { a, bias })
    }

    /// `w x + bias 1^t` with `bias` a column, optionally followed by a ReLU;
    /// fused so the pre-activation is never stored.
    pub fn dense(&mut self, w: Var, x: Var, bias: Var, relu: bool) -> Var {
        let (wm, xm, bm) = (self.value(w), self.value(x), self.value(bias));
        assert_eq!(bm.shape(), (wm.rows(), 1), "dense bias shape");
        let cols = xm.cols();
        let mut value = Mat::zeros(wm.rows(), cols);
        for (row, b) in value.data_mut().chunks_mut(cols.max(1)).zip(bm.data()) {
            row.fill(*b);
        }
        gemm_into(1.0, wm, false, xm, false, 1.0, &mut value);
        if relu {
            value.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
        }
        self.push(value, Op::Dense { w, x, bias, relu })
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let mut value = self.value(a).clone();
        value.data_mut().iter_mut().for_each(|x| *x = x.max(0.0));
        self.push(value, Op::Relu(a))
    }

    pub fn encoded_mul(&mut self, a: Var, enc: &Arc<EncodedBatch>) -> Var {
        let am = self.value(a);
        assert_eq!(am.cols(), enc.width(), "encoded_mul width");
        let cols = enc.columns();
        let mut value = Mat::zeros(am.rows(), cols);
        let (ad, ac) = (am.data(), am.cols());
        let out = value.data_mut();
        for r in 0..am.rows() {
            let arow = &ad[r * ac..(r + 1) * ac];
            let orow = &mut out[r * cols..(r + 1) * cols];
            for (col, o) in orow.iter_mut().enumerate() {
                let (c, p) = enc.features(col);
                *o = arow[c] + arow[p];
            }
        }
        self.push(value, Op::EncodedMul { a, enc: enc.clone() })
    }

    pub fn encoded_bilinear(&mut self, a: Var, enc: &Arc<EncodedBatch>) -> Var {
        let am = self.value(a);
        let w = enc.width();
        assert_eq!(am.shape(), (w, w), "encoded_bilinear shape");
        let m = enc.m();
        let cols = enc.columns();
        let mut value = Mat::zeros(m, cols);
        let out = value.data_mut();
        for b in 0..enc.batch() {
            for i in 0..m {
                let (ci, pi) = enc.features(b * m + i);
                for j in 0..m {
                    let (cj, pj) = enc.features(b * m + j);
                    out[j * cols + b * m + i] = am[(cj, ci)] + am[(cj, pi)] + am[(pj, ci)] + am[(pj, pi)];
                }
            }
        }
        self.push(value, Op::EncodedBilinear { a, enc: enc.clone() })
    }

    pub fn add_encoded(&mut self, a: Var, enc: &Arc<EncodedBatch>, gain: f64) -> Var {
        let mut value = self.value(a).clone();
        assert_eq!(value.shape(), (enc.width(), enc.columns()), "add_encoded shape");
        for col in 0..enc.columns() {
            let (c, p) = enc.features(col);
            value[(c, col)] += gain;
            value[(p, col)] += gain;
        }
        self.push(value, Op::AddConstant(a))
    }

    /// Zero entries `j > i` inside every `M x M` block.
    pub fn causal_mask(&mut self, a: Var, m: usize) -> Var {
        let mut value = self.value(a).clone();
        let cols = value.cols();
        for b in 0..cols / m {
            for i in 0..m {
                for j in i + 1..m {
                    value[(j, b * m + i)] = 0.0;
                }
            }
        }
        self.push(value, Op::CausalMask { a, m })
    }

    pub fn causal_softmax(&mut self, a: Var, m: usize, scale: f64) -> Var {
        let src = self.value(a);
        let cols = src.cols();
        let mut value = Mat::zeros(m, cols);
        for col in 0..cols {
            let i = col % m;
            let mx = (0..=i).map(|j| src[(j, col)] / scale).fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for j in 0..=i {
                let e = (src[(j, col)] / scale - mx).exp();
                value[(j, col)] = e;
                z += e;
            }
            for j in 0..=i {
                value[(j, col)] /= z;
            }
        }
        self.push(value, Op::CausalSoftmax { a, m, scale })
    }

    pub fn block_matmul(&mut self, a: Var, w: Var, m: usize) -> Var {
        let (am, wm) = (self.value(a), self.value(w));
        assert_eq!(am.cols(), wm.cols(), "block_matmul columns");
        assert_eq!(wm.rows(), m, "block_matmul block size");
        let mut value = Mat::zeros(am.rows(), am.cols());
        for c0 in (0..am.cols()).step_by(m) {
            let ab = View::cols_of(am, c0, m, false);
            let wb = View::cols_of(wm, c0, m, false);
            gemm_block(1.0, ab, wb, 0.0, &mut value, c0);
        }
        self.push(value, Op::BlockMatMul { a, w, m })
    }

    pub fn layer_norm_cols(&mut self, a: Var, gain: Var, shift: Var, eps: f64) -> Var {
        let src = self.value(a);
        let (rows, cols) = src.shape();
        assert_eq!(self.value(gain).shape(), (rows, 1), "layer norm gain");
        assert_eq!(self.value(shift).shape(), (rows, 1), "layer norm shift");
        let rf = rows as f64;
        let mut mean = vec![0.0; cols];
        for row in src.data().chunks(cols) {
            mean.iter_mut().zip(row).for_each(|(mu, x)| *mu += x);
        }
        mean.iter_mut().for_each(|x| *x /= rf);
        let mut var = vec![0.0; cols];
        for row in src.data().chunks(cols) {
            var.iter_mut().zip(row.iter().zip(&mean)).for_each(|(v, (x, mu))| *v += (x - mu) * (x - mu));
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v / rf + eps).sqrt()).collect();
        let mut normed = src.clone();
        for row in normed.data_mut().chunks_mut(cols) {
            for ((x, mu), is) in row.iter_mut().zip(&mean).zip(&inv_std) {
                *x = (*x - mu) * is;
            }
        }
        let (g, s) = (self.value(gain).data(), self.value(shift).data());
        let mut value = normed.clone();
        for ((row, gr), sr) in value.data_mut().chunks_mut(cols).zip(g).zip(s) {
            row.iter_mut().for_each(|x| *x = gr * *x + sr);
        }
        self.push(value, Op::LayerNormCols { a, gain, shift, normed, inv_std })
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let src = self.value(a);
        let value = src.block(start, 0, len, src.cols());
        self.push(value, Op::SliceRows { a, start })
    }

    /// Mean squared error over the columns where `mask` is set; `pred` is one row.
    pub fn masked_mse(&mut self, pred: Var, targets: Arc<Vec<f64>>, mask: Arc<Vec<bool>>) -> Var {
        let p = self.value(pred);
        assert_eq!(p.rows(), 1, "masked_mse expects a single row");
        assert_eq!(p.cols(), targets.len(), "masked_mse targets");
        assert_eq!(p.cols(), mask.len(), "masked_mse mask");
        let count = mask.iter().filter(|m| **m).count().max(1);
        let sse: f64 = p
            .data()
            .iter()
            .zip(targets.iter())
            .zip(mask.iter())
            .filter(|(_, m)| **m)
            .map(|((y, t), _)| (y - t) * (y - t))
            .sum();
        self.push(raw(1, 1, vec![sse / count as f64]), Op::MaskedMse { pred, targets, mask, count })
    }

    pub fn weighted_square_sum(&mut self, a: Var, weights: Arc<Mat>) -> Var {
        let am = self.value(a);
        assert_eq!(am.shape(), weights.shape(), "penalty weights");
        let total: f64 = am.data().iter().zip(weights.data()).map(|(x, w)| w * x * x).sum();
        self.push(raw(1, 1, vec![total]), Op::WeightedSquareSum { a, weights })
    }

    pub fn sum(&mut self, parts: Vec<Var>) -> Var {
        let shape = self.value(parts[0]).shape();
        let mut value = Mat::zeros(shape.0, shape.1);
        for p in &parts {
            let pv = self.value(*p);
            assert_eq!(pv.shape(), shape, "sum shapes");
            let data: Vec<f64> = pv.data().to_vec();
            value.data_mut().iter_mut().zip(data).for_each(|(x, y)| *x += y);
        }
        self.push(value, Op::Sum(parts))
    }

    /// Gradients of the scalar `out` with respect to the leaves, visiting each
    /// node once in reverse creation order. Interior gradients are released
    /// as soon as they have been propagated.
    pub fn backward(&self, out: Var) -> Grads {
        assert_eq!(self.value(out).shape(), (1, 1), "backward needs a scalar output");
        let mut grads: Vec<Option<Mat>> = vec![None; self.nodes.len()];
        grads[out.0] = Some(Mat::filled(1, 1, 1.0));
        for idx in (0..=out.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => grads[idx] = Some(g),
                Op::Gemm { a, ta, b, tb } => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    // C = op(A) op(B)
                    let ga = if *ta { gemm(bv, *tb, &g, true) } else { gemm(&g, false, bv, !*tb) };
                    let gb = if *tb { gemm(&g, true, av, *ta) } else { gemm(av, !*ta, &g, false) };
                    accumulate(&mut grads[a.0], ga);
                    accumulate(&mut grads[b.0], gb);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads[b.0], g.clone());
                    accumulate(&mut grads[a.0], g);
                }
                Op::Scale(a, s) => {
                    let mut ga = g;
                    ga.data_mut().iter_mut().for_each(|x| *x *= s);
                    accumulate(&mut grads[a.0], ga);
                }
                Op::AddColBias { a, bias } => {
                    let cols = g.cols();
                    let gb: Vec<f64> = g.data().chunks(cols).map(|row| row.iter().sum()).collect();
                    accumulate(&mut grads[bias.0], raw(gb.len(), 1, gb));
                    accumulate(&mut grads[a.0], g);
                }
                Op::Dense { w, x, bias, relu } => {
                    let mut g = g;
                    if *relu {
                        g.data_mut().iter_mut().zip(node.value.data()).for_each(|(gi, y)| {
                            if *y <= 0.0 {
                                *gi = 0.0
                            }
                        });
                    }
                    let cols = g.cols().max(1);
                    let gb: Vec<f64> = g.data().chunks(cols).map(|row| row.iter().sum()).collect();
                    let (wm, xm) = (self.value(*w), self.value(*x));
                    accumulate(&mut grads[w.0], gemm(&g, false, xm, true));
                    accumulate(&mut grads[x.0], gemm(wm, true, &g, false));
                    accumulate(&mut grads[bias.0], raw(gb.len(), 1, gb));
                }
                Op::Relu(a) => {
                    let mut ga = g;
                    ga.data_mut()
                        .iter_mut()
                        .zip(node.value.data())
                        .for_each(|(x, y)| {
                            if *y <= 0.0 {
                                *x = 0.0
                            }
                        });
                    accumulate(&mut grads[a.0], ga);
                }
                Op::EncodedMul { a, enc } => {
                    let shape = self.value(*a).shape();
                    add_into(&mut grads[a.0], shape, |ga| {
                        let cols = g.cols();
                        let gd = g.data();
                        let w = shape.1;
                        let gad = ga.data_mut();
                        for r in 0..shape.0 {
                            for col in 0..cols {
                                let (c, p) = enc.features(col);
                                let x = gd[r * cols + col];
                                gad[r * w + c] += x;
                                gad[r * w + p] += x;
                            }
                        }
                    });
                }
                Op::EncodedBilinear { a, enc } => {
                    let shape = self.value(*a).shape();
                    let m = enc.m();
                    add_into(&mut grads[a.0], shape, |ga| {
                        for b in 0..enc.batch() {
                            for i in 0..m {
                                let (ci, pi) = enc.features(b * m + i);
                                for j in 0..m {
                                    let (cj, pj) = enc.features(b * m + j);
                                    let x = g[(j, b * m + i)];
                                    if x == 0.0 {
                                        continue;
                                    }
                                    ga[(cj, ci)] += x;
                                    ga[(cj, pi)] += x;
                                    ga[(pj, ci)] += x;
                                    ga[(pj, pi)] += x;
                                }
                            }
                        }
                    });
                }
                Op::AddConstant(a) => accumulate(&mut grads[a.0], g),
                Op::CausalMask { a, m } => {
                    let mut ga = g;
                    let cols = ga.cols();
                    for col in 0..cols {
                        for j in col % m + 1..*m {
                            ga[(j, col)] = 0.0;
                        }
                    }
                    accumulate(&mut grads[a.0], ga);
                }
                Op::CausalSoftmax { a, m, scale } => {
                    let w = &node.value;
                    let mut ga = Mat::zeros(*m, g.cols());
                    for col in 0..g.cols() {
                        let i = col % m;
                        let dot: f64 = (0..=i).map(|j| g[(j, col)] * w[(j, col)]).sum();
                        for j in 0..=i {
                            ga[(j, col)] = w[(j, col)] * (g[(j, col)] - dot) / scale;
                        }
                    }
                    accumulate(&mut grads[a.0], ga);
                }
                Op::BlockMatMul { a, w, m } => {
                    let (am, wm) = (self.value(*a), self.value(*w));
                    let mut ga = Mat::zeros(am.rows(), am.cols());
                    let mut gw = Mat::zeros(*m, wm.cols());
                    for c0 in (0..am.cols()).step_by(*m) {
                        let gb = View::cols_of(&g, c0, *m, false);
                        let wbt = View::cols_of(wm, c0, *m, true);
                        let abt = View::cols_of(am, c0, *m, true);
                        gemm_block(1.0, gb, wbt, 0.0, &mut ga, c0);
                        gemm_block(1.0, abt, gb, 0.0, &mut gw, c0);
                    }
                    accumulate(&mut grads[a.0], ga);
                    accumulate(&mut grads[w.0], gw);
                }
                Op::LayerNormCols { a, gain, shift, normed, inv_std } => {
                    let (rows, cols) = normed.shape();
                    let gv = self.value(*gain).data();
                    let mut ggain = vec![0.0; rows];
                    let mut gshift = vec![0.0; rows];
                    // gn = dL/dnormed = g * gain, accumulated with the column means
                    let mut ga = g;
                    let mut mean_g = vec![0.0; cols];
                    let mut mean_gx = vec![0.0; cols];
                    for (r, (grow, nrow)) in ga.data_mut().chunks_mut(cols).zip(normed.data().chunks(cols)).enumerate() {
                        for (c, (x, nv)) in grow.iter_mut().zip(nrow).enumerate() {
                            ggain[r] += *x * nv;
                            gshift[r] += *x;
                            *x *= gv[r];
                            mean_g[c] += *x;
                            mean_gx[c] += *x * nv;
                        }
                    }
                    let rf = rows as f64;
                    mean_g.iter_mut().for_each(|v| *v /= rf);
                    mean_gx.iter_mut().for_each(|v| *v /= rf);
                    for (grow, nrow) in ga.data_mut().chunks_mut(cols).zip(normed.data().chunks(cols)) {
                        for (c, (x, nv)) in grow.iter_mut().zip(nrow).enumerate() {
                            *x = inv_std[c] * (*x - mean_g[c] - nv * mean_gx[c]);
                        }
                    }
                    accumulate(&mut grads[a.0], ga);
                    accumulate(&mut grads[gain.0], raw(rows, 1, ggain));
                    accumulate(&mut grads[shift.0], raw(rows, 1, gshift));
                }
                Op::SliceRows { a, start } => {
                    let shape = self.value(*a).shape();
                    add_into(&mut grads[a.0], shape, |ga| {
                        for r in 0..g.rows() {
                            for c in 0..g.cols() {
                                ga[(start + r, c)] += g[(r, c)];
                            }
                        }
                    });
                }
                Op::MaskedMse { pred, targets, mask, count } => {
                    let p = self.value(*pred);
                    let scale = 2.0 * g[(0, 0)] / *count as f64;
                    let gp: Vec<f64> = p
                        .data()
                        .iter()
                        .zip(targets.iter())
                        .zip(mask.iter())
                        .map(|((y, t), m)| if *m { scale * (y - t) } else { 0.0 })
                        .collect();
                    accumulate(&mut grads[pred.0], raw(1, gp.len(), gp));
                }
                Op::WeightedSquareSum { a, weights } => {
                    let am = self.value(*a);
                    let s = g[(0, 0)];
                    let data: Vec<f64> = am.data().iter().zip(weights.data()).map(|(x, w)| 2.0 * s * w * x).collect();
                    accumulate(&mut grads[a.0], raw(am.rows(), am.cols(), data));
                }
                Op::Sum(parts) => {
                    for p in parts {
                        accumulate(&mut grads[p.0], g.clone());
                    }
                }
            }
        }
        Grads { grads }
    }
}

//! The trainable one-level model:
//! `W2 ReLU(W1 LN(ATTENTION^t + X) + b1) + b2`, one scalar per position.

use std::sync::Arc;

use attnlab::attention::BlockAccess;
use attnlab::context::QTrueTable;
use attnlab::handcrafted::{build_solution1, build_solution2, build_solution3, Sol1Variant, EXTRACTION_SCALE};
use attnlab::{Mat, Rng};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoded::EncodedBatch;
use crate::error::{Result, TrainError};
use crate::tape::{Tape, Var};

pub const LN_EPS: f64 = 1e-5;

/// Contexts per independently differentiated chunk of a batch.
pub const CHUNK_CONTEXTS: usize = 50;

/// Which handcrafted mechanism the attention parameters are confined to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Flavor {
    /// q, k on positions; v only scales each category onto itself
    Sol1,
    /// q, k on categories; v on positions
    Sol2,
    /// q, k on positions; v on categories
    Sol3,
    Free,
}

impl Flavor {
    pub const ALL: [Flavor; 4] = [Flavor::Sol1, Flavor::Sol2, Flavor::Sol3, Flavor::Free];

    pub fn name(self) -> &'static str {
        match self {
            Flavor::Sol1 => "sol1",
            Flavor::Sol2 => "sol2",
            Flavor::Sol3 => "sol3",
            Flavor::Free => "free",
        }
    }

    fn qk_access(self) -> BlockAccess {
        match self {
            Flavor::Sol1 | Flavor::Sol3 => BlockAccess::Positions,
            Flavor::Sol2 => BlockAccess::Categories,
            Flavor::Free => BlockAccess::Full,
        }
    }

    /// Smallest head width that can hold this flavor's handcrafted solution.
    pub fn min_hidden(self, n: usize, m: usize) -> usize {
        match self {
            Flavor::Sol1 => 2 * n * n - n,
            Flavor::Sol2 | Flavor::Sol3 => n + m,
            Flavor::Free => 1,
        }
    }

    /// 0/1 masks for `q` and `k` (`d x W`, same mask) and `v` (`W x W`).
    pub fn masks(self, n: usize, m: usize, d: usize) -> (Mat, Mat) {
        let w = n + m;
        let qk = self.qk_access();
        let reads = |c: usize| match qk {
            BlockAccess::Categories => c < n,
            BlockAccess::Positions => c >= n,
            BlockAccess::Full => true,
        };
        let qk_mask = Mat::from_fn(d, w, |_, c| if reads(c) { 1.0 } else { 0.0 }).expect("finite mask");
        let v_mask = Mat::from_fn(w, w, |r, c| {
            let keep = match self {
                Flavor::Sol1 => r == c && r < n,
                Flavor::Sol2 => r >= n && c >= n,
                Flavor::Sol3 => r < n && c < n,
                Flavor::Free => true,
            };
            if keep {
                1.0
            } else {
                0.0
            }
        })
        .expect("finite mask");
        (qk_mask, v_mask)
    }
}

impl std::fmt::Display for Flavor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Flavor {
    type Err = TrainError;

    fn from_str(s: &str) -> Result<Self> {
        Flavor::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| TrainError::Config(format!("unknown flavor {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub n: usize,
    pub m: usize,
    pub flavor: Flavor,
    /// `d x W`
    pub q: Mat,
    pub k: Mat,
    /// `W x W`
    pub v: Mat,
    pub ln_gain: Mat,
    pub ln_shift: Mat,
    /// `hidden x W`
    pub w1: Mat,
    pub b1: Mat,
    /// `1 x hidden`
    pub w2: Mat,
    pub b2: Mat,
    /// false bypasses the normalisation (used to plant handcrafted weights)
    pub layer_norm: bool,
    /// softmax divisor when the attention uses a softmax
    pub softmax: Option<f64>,
    /// zero keeps masked entries at exactly 0; positive replaces the masks by
    /// this weight times the squared masked entries
    pub penalty: f64,
}

/// Tape handles for every parameter block.
#[derive(Clone, Copy, Debug)]
pub struct ParamVars {
    pub q: Var,
    pub k: Var,
    pub v: Var,
    pub ln_gain: Var,
    pub ln_shift: Var,
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

impl ParamVars {
    fn all(&self) -> [Var; 9] {
        [
            self.q,
            self.k,
            self.v,
            self.ln_gain,
            self.ln_shift,
            self.w1,
            self.b1,
            self.w2,
            self.b2,
        ]
    }
}

pub struct Forward {
    pub tape: Tape,
    pub vars: ParamVars,
    pub scores: Var,
    pub weights: Var,
    pub attention: Var,
    /// head activations after the ReLU
    pub hidden: Var,
    /// `1 x (B*M)`
    pub prediction: Var,
}

impl ModelParams {
    pub fn width(&self) -> usize {
        self.n + self.m
    }

    pub fn hidden(&self) -> usize {
        self.w1.rows()
    }

    pub fn attn_dim(&self) -> usize {
        self.q.rows()
    }

    fn blocks(&self) -> [&Mat; 9] {
        [
            &self.q,
            &self.k,
            &self.v,
            &self.ln_gain,
            &self.ln_shift,
            &self.w1,
            &self.b1,
            &self.w2,
            &self.b2,
        ]
    }

    fn blocks_mut(&mut self) -> [&mut Mat; 9] {
        [
            &mut self.q,
            &mut self.k,
            &mut self.v,
            &mut self.ln_gain,
            &mut self.ln_shift,
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
        ]
    }

    pub fn len(&self) -> usize {
        self.blocks().iter().map(|b| b.data().len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.blocks().iter().flat_map(|b| b.data().iter().copied()).collect()
    }

    pub fn set_from_slice(&mut self, x: &[f64]) -> Result<()> {
        if x.len() != self.len() {
            return Err(TrainError::Config(format!("parameter vector length {} != {}", x.len(), self.len())));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(TrainError::NonFinite("parameters"));
        }
        let mut off = 0;
        for b in self.blocks_mut() {
            let len = b.data().len();
            b.data_mut().copy_from_slice(&x[off..off + len]);
            off += len;
        }
        Ok(())
    }

    /// 1 for trainable coordinates, 0 for masked ones, in `to_vec` order.
    pub fn trainable_mask(&self) -> Vec<f64> {
        let (qk, v) = self.flavor.masks(self.n, self.m, self.attn_dim());
        let hard = self.penalty == 0.0;
        let ln = if self.layer_norm { 1.0 } else { 0.0 };
        let mut out = Vec::with_capacity(self.len());
        for (i, b) in self.blocks().iter().enumerate() {
            match i {
                0 | 1 if hard => out.extend_from_slice(qk.data()),
                2 if hard => out.extend_from_slice(v.data()),
                3 | 4 => out.extend(std::iter::repeat_n(ln, b.data().len())),
                _ => out.extend(std::iter::repeat_n(1.0, b.data().len())),
            }
        }
        out
    }

    /// Zero every masked attention entry (hard-mask mode only).
    pub fn apply_masks(&mut self) {
        if self.penalty > 0.0 {
            return;
        }
        let (qk, v) = self.flavor.masks(self.n, self.m, self.attn_dim());
        for (target, mask) in [(&mut self.q, &qk), (&mut self.k, &qk), (&mut self.v, &v)] {
            target.data_mut().iter_mut().zip(mask.data()).for_each(|(x, m)| *x *= m);
        }
    }

    /// Largest absolute value on a masked attention entry.
    pub fn mask_violation(&self) -> f64 {
        let (qk, v) = self.flavor.masks(self.n, self.m, self.attn_dim());
        let worst = |a: &Mat, mask: &Mat| {
            a.data()
                .iter()
                .zip(mask.data())
                .filter(|(_, m)| **m == 0.0)
                .fold(0.0f64, |acc, (x, _)| acc.max(x.abs()))
        };
        worst(&self.q, &qk).max(worst(&self.k, &qk)).max(worst(&self.v, &v))
    }

    /// `k^t q`, `W x W`.
    pub fn ktq(&self) -> Mat {
        crate::tape::gemm(&self.k, true, &self.q, false)
    }

    /// Gaussian attention weights with standard deviation `scale / sqrt(W)`,
    /// He-scaled head, unit gain and zero shifts; masks applied.
    pub fn random(
        n: usize,
        m: usize,
        flavor: Flavor,
        hidden: usize,
        attn_dim: usize,
        init_scale: f64,
        rng: &mut Rng,
    ) -> Result<Self> {
        let w = n + m;
        if hidden == 0 || attn_dim == 0 {
            return Err(TrainError::Config("hidden width and attention dimension must be positive".into()));
        }
        let sd = init_scale / (w as f64).sqrt();
        let mut gauss = |rows: usize, cols: usize, s: f64| Mat::from_fn(rows, cols, |_, _| s * rng.normal());
        let q = gauss(attn_dim, w, sd)?;
        let k = gauss(attn_dim, w, sd)?;
        let v = gauss(w, w, sd)?;
        let w1 = gauss(hidden, w, (2.0 / w as f64).sqrt())?;
        let w2 = gauss(1, hidden, (1.0 / hidden as f64).sqrt())?;
        let mut p = ModelParams {
            n,
            m,
            flavor,
            q,
            k,
            v,
            ln_gain: Mat::filled(w, 1, 1.0),
            ln_shift: Mat::zeros(w, 1),
            w1,
            b1: Mat::zeros(hidden, 1),
            w2,
            b2: Mat::zeros(1, 1),
            layer_norm: true,
            softmax: None,
            penalty: 0.0,
        };
        p.apply_masks();
        Ok(p)
    }

    pub fn forward(&self, enc: &Arc<EncodedBatch>) -> Forward {
        assert_eq!((enc.n(), enc.m()), (self.n, self.m), "batch shape");
        let mut t = Tape::new();
        let vars = ParamVars {
            q: t.leaf(self.q.clone()),
            k: t.leaf(self.k.clone()),
            v: t.leaf(self.v.clone()),
            ln_gain: t.leaf(self.ln_gain.clone()),
            ln_shift: t.leaf(self.ln_shift.clone()),
            w1: t.leaf(self.w1.clone()),
            b1: t.leaf(self.b1.clone()),
            w2: t.leaf(self.w2.clone()),
            b2: t.leaf(self.b2.clone()),
        };
        let ktq = t.gemm(vars.k, true, vars.q, false);
        let scores = t.encoded_bilinear(ktq, enc);
        let weights = match self.softmax {
            Some(scale) => t.causal_softmax(scores, self.m, scale),
            None => t.causal_mask(scores, self.m),
        };
        let vx = t.encoded_mul(vars.v, enc);
        let attention = t.block_matmul(vx, weights, self.m);
        let skip = t.add_encoded(attention, enc, 1.0);
        let normed = if self.layer_norm {
            t.layer_norm_cols(skip, vars.ln_gain, vars.ln_shift, LN_EPS)
        } else {
            skip
        };
        let h = t.dense(vars.w1, normed, vars.b1, true);
        let prediction = t.dense(vars.w2, h, vars.b2, false);
        Forward {
            tape: t,
            vars,
            scores,
            weights,
            attention,
            hidden: h,
            prediction,
        }
    }

    pub fn predict(&self, enc: &Arc<EncodedBatch>) -> Vec<f64> {
        let f = self.forward(enc);
        f.tape.value(f.prediction).data().to_vec()
    }

    /// Masked MSE over positions `2..M` without the gradient, for
    /// finite-difference checks.
    pub fn loss(&self, enc: &Arc<EncodedBatch>, targets: &Arc<Vec<f64>>) -> f64 {
        self.loss_and_gates(enc, targets).0
    }

    /// The loss and which head units are active, one flag per unit and column.
    pub fn loss_and_gates(&self, enc: &Arc<EncodedBatch>, targets: &Arc<Vec<f64>>) -> (f64, Vec<bool>) {
        let mut f = self.forward(enc);
        let gates = f.tape.value(f.hidden).data().iter().map(|x| *x > 0.0).collect();
        let mask = Arc::new(position_mask(enc.batch(), self.m));
        let out = f.tape.masked_mse(f.prediction, targets.clone(), mask);
        let mut loss = f.tape.value(out)[(0, 0)];
        if self.penalty > 0.0 {
            let (qk, v) = self.flavor.masks(self.n, self.m, self.attn_dim());
            for (block, mask) in [(&self.q, &qk), (&self.k, &qk), (&self.v, &v)] {
                for (x, keep) in block.data().iter().zip(mask.data()) {
                    if *keep == 0.0 {
                        loss += self.penalty * x * x;
                    }
                }
            }
        }
        (loss, gates)
    }

    /// Masked MSE (positions `2..M`) plus any mask penalty, and its gradient
    /// in `to_vec` order with masked coordinates zeroed. The batch is
    /// processed in chunks of `CHUNK_CONTEXTS` contexts, in parallel, and the
    /// chunk gradients are summed in chunk order so the result does not
    /// depend on the thread count.
    pub fn loss_and_grad(&self, enc: &Arc<EncodedBatch>, targets: &Arc<Vec<f64>>) -> (f64, Vec<f64>) {
        let m = self.m;
        let total = (enc.batch() * (m - 1)) as f64;
        let parts: Vec<(f64, Vec<f64>)> = enc
            .chunks(CHUNK_CONTEXTS)
            .into_par_iter()
            .enumerate()
            .map(|(k, chunk)| {
                let start = k * CHUNK_CONTEXTS * m;
                let t = Arc::new(targets[start..start + chunk.columns()].to_vec());
                let weight = (chunk.batch() * (m - 1)) as f64 / total;
                let (loss, mut g) = self.chunk_loss_and_grad(&Arc::new(chunk), &t);
                g.iter_mut().for_each(|x| *x *= weight);
                (weight * loss, g)
            })
            .collect();
        let mut loss = 0.0;
        let mut g = vec![0.0; self.len()];
        for (l, gi) in parts {
            loss += l;
            g.iter_mut().zip(gi).for_each(|(a, b)| *a += b);
        }
        if self.penalty > 0.0 {
            // penalty * sum of squared masked attention entries
            let (qk, v) = self.flavor.masks(self.n, self.m, self.attn_dim());
            let mut off = 0;
            for (block, mask) in [(&self.q, &qk), (&self.k, &qk), (&self.v, &v)] {
                for (i, (x, keep)) in block.data().iter().zip(mask.data()).enumerate() {
                    if *keep == 0.0 {
                        loss += self.penalty * x * x;
                        g[off + i] += 2.0 * self.penalty * x;
                    }
                }
                off += block.data().len();
            }
        }
        for (gi, m) in g.iter_mut().zip(self.trainable_mask()) {
            *gi *= m;
        }
        (loss, g)
    }

    fn chunk_loss_and_grad(&self, enc: &Arc<EncodedBatch>, targets: &Arc<Vec<f64>>) -> (f64, Vec<f64>) {
        let mut f = self.forward(enc);
        let mask = Arc::new(position_mask(enc.batch(), self.m));
        let out = f.tape.masked_mse(f.prediction, targets.clone(), mask);
        let loss = f.tape.value(out)[(0, 0)];
        let mut grads = f.tape.backward(out);
        let mut g = Vec::with_capacity(self.len());
        for (var, block) in f.vars.all().iter().zip(self.blocks()) {
            match grads.take(*var) {
                Some(m) => g.extend_from_slice(m.data()),
                None => g.extend(std::iter::repeat_n(0.0, block.data().len())),
            }
        }
        (loss, g)
    }
}

/// True at positions `2..M` of every context.
pub fn position_mask(batch: usize, m: usize) -> Vec<bool> {
    (0..batch * m).map(|c| c % m != 0).collect()
}

/// Model weights reproducing a handcrafted pipeline exactly, with the
/// normalisation bypassed. Supported: corrected solution 1, solutions 2 and 3
/// (built on the table shifted into the extraction range, with the inverse
/// shift folded into the read-out).
pub fn plant(flavor: Flavor, qtrue: &QTrueTable, m: usize, hidden: usize) -> Result<ModelParams> {
    let n = qtrue.n();
    let w = n + m;
    if hidden < flavor.min_hidden(n, m) {
        return Err(TrainError::Config(format!(
            "{flavor} needs a head of width at least {}, got {hidden}",
            flavor.min_hidden(n, m)
        )));
    }
    let pipeline = match flavor {
        Flavor::Sol1 => build_solution1(qtrue, n, m, Sol1Variant::Corrected)?,
        Flavor::Sol2 | Flavor::Sol3 => {
            let (shifted, map) = attnlab::handcrafted::shift_for_extraction(qtrue, EXTRACTION_SCALE)?;
            let p = if flavor == Flavor::Sol2 {
                build_solution2(&shifted, n, m, EXTRACTION_SCALE)?
            } else {
                build_solution3(&shifted, n, m, EXTRACTION_SCALE)?
            };
            p.with_output_map(map)
        }
        Flavor::Free => return Err(TrainError::Config("the free flavor has no handcrafted solution".into())),
    };
    let (qk_mask, _) = flavor.masks(n, m, w);
    let ktq = pipeline.attn.effective_ktq()?;
    // k projects onto the readable features, q carries the whole product
    let k = Mat::from_fn(w, w, |r, c| if r == c { qk_mask[(0, c)] } else { 0.0 })?;
    let mut w1 = Mat::zeros(hidden, w);
    let mut b1 = Mat::zeros(hidden, 1);
    let mut w2 = Mat::zeros(1, hidden);
    match &pipeline.b {
        Some(b) => w1.set_block(0, 0, b),
        None => w1.set_block(0, 0, &Mat::identity(w)),
    }
    for (r, beta) in pipeline.bias.iter().enumerate() {
        b1[(r, 0)] = *beta;
    }
    let map = pipeline.output_map;
    for r in 0..pipeline.c.cols() {
        w2[(0, r)] = map.scale * pipeline.c[(0, r)];
    }
    Ok(ModelParams {
        n,
        m,
        flavor,
        q: ktq,
        k,
        v: pipeline.attn.effective_v(),
        ln_gain: Mat::filled(w, 1, 1.0),
        ln_shift: Mat::zeros(w, 1),
        w1,
        b1,
        w2,
        b2: Mat::filled(1, 1, map.offset),
        layer_norm: false,
        softmax: None,
        penalty: 0.0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use attnlab::context::{sample_context, sample_qtrue, targets, CategoryDist, QTrueMode};

    #[test]
    fn masks_match_the_mechanisms() {
        let (qk, v) = Flavor::Sol2.masks(3, 4, 5);
        assert_eq!(qk.row(0), &[1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
        assert_eq!(v.block(0, 0, 3, 7).max_abs(), 0.0);
        assert_eq!(v.block(3, 3, 4, 4), Mat::filled(4, 4, 1.0));
        let (_, v1) = Flavor::Sol1.masks(3, 4, 5);
        assert_eq!(v1.sum(), 3.0);
        assert_eq!(v1[(1, 1)], 1.0);
    }

    #[test]
    fn planted_solutions_reproduce_targets() {
        let (n, m) = (5, 9);
        let mut rng = Rng::new(4);
        let q = sample_qtrue(n, QTrueMode::StandardNormal, &mut rng).unwrap();
        let dist = CategoryDist::uniform(n).unwrap();
        let ctx: Vec<_> = (0..20).map(|_| sample_context(n, m, &dist, &mut rng).unwrap()).collect();
        let enc = Arc::new(EncodedBatch::new(n, m, &ctx));
        for flavor in [Flavor::Sol1, Flavor::Sol2, Flavor::Sol3] {
            let p = plant(flavor, &q, m, 2 * n * n).unwrap();
            assert_eq!(p.mask_violation(), 0.0, "{flavor}");
            let pred = p.predict(&enc);
            for (b, t) in ctx.iter().enumerate() {
                let y = targets(t, &q).unwrap();
                for i in 1..m {
                    assert!((pred[b * m + i] - y[i]).abs() < 1e-9, "{flavor} {b} {i}");
                }
            }
        }
    }

    #[test]
    fn head_too_narrow_is_rejected() {
        let q = QTrueTable::pair_code(4);
        assert!(plant(Flavor::Sol1, &q, 6, 27).is_err());
        assert!(plant(Flavor::Sol1, &q, 6, 28).is_ok());
    }

    #[test]
    fn flat_vector_round_trip() {
        let mut rng = Rng::new(2);
        let p = ModelParams::random(3, 4, Flavor::Free, 5, 7, 1.0, &mut rng).unwrap();
        let mut other = ModelParams::random(3, 4, Flavor::Free, 5, 7, 1.0, &mut rng).unwrap();
        other.set_from_slice(&p.to_vec()).unwrap();
        assert_eq!(other, p);
        assert_eq!(p.trainable_mask().len(), p.len());
    }
}

//! Token sequences, their one-hot encoding and the pair-functional targets.
//!
//! Categories and positions are 1-based wherever they cross the API boundary
//! (`TokenSequence::from_one_based`, `category`, CSV output) and 0-based in
//! storage and in every matrix index.

use std::io::{self, Write};

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::linalg::Mat;
use crate::rng::Rng;

#[derive(Clone, Debug, PartialEq)]
pub struct CategoryDist {
    probs: Vec<f64>,
}

impl CategoryDist {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.len() < 2 {
            return Err(LabError::InvalidDistribution(format!(
                "need at least 2 categories, got {}",
                probs.len()
            )));
        }
        if let Some(p) = probs.iter().find(|p| !p.is_finite() || **p < 0.0) {
            return Err(LabError::InvalidDistribution(format!("entry {p} is not a probability")));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(LabError::InvalidDistribution(format!("entries sum to {total}, not 1")));
        }
        Ok(CategoryDist { probs })
    }

    pub fn uniform(n: usize) -> Result<Self> {
        CategoryDist::new(vec![1.0 / n as f64; n])
    }

    /// Normalises nonnegative weights, e.g. `[1, 2, ..., N]`.
    pub fn from_weights(weights: &[f64]) -> Result<Self> {
        let total: f64 = weights.iter().sum();
        if !(total > 0.0) || !total.is_finite() {
            return Err(LabError::InvalidDistribution(format!("weights sum to {total}")));
        }
        CategoryDist::new(weights.iter().map(|w| w / total).collect())
    }

    pub fn n(&self) -> usize {
        self.probs.len()
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn p(&self, a: usize) -> f64 {
        self.probs[a]
    }

    pub fn is_uniform(&self) -> bool {
        let u = 1.0 / self.n() as f64;
        self.probs.iter().all(|p| (p - u).abs() < 1e-15)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct TokenSequence {
    n: usize,
    tokens: Vec<usize>,
}

impl TokenSequence {
    /// Build from 0-based category indices.
    pub fn new(n: usize, tokens: Vec<usize>) -> Result<Self> {
        if n < 2 {
            return Err(LabError::InvalidArgument(format!("need N >= 2 categories, got {n}")));
        }
        if tokens.is_empty() {
            return Err(LabError::InvalidArgument("empty token sequence".into()));
        }
        if let Some(t) = tokens.iter().find(|t| **t >= n) {
            return Err(LabError::InvalidArgument(format!(
                "category index {t} out of range for N = {n}"
            )));
        }
        Ok(TokenSequence { n, tokens })
    }

    /// Build from 1-based category ids, e.g. `[1, 3, 2, 2]`.
    pub fn from_one_based(n: usize, ids: &[usize]) -> Result<Self> {
        if ids.contains(&0) {
            return Err(LabError::InvalidArgument("category ids are 1-based".into()));
        }
        TokenSequence::new(n, ids.iter().map(|c| c - 1).collect())
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn m(&self) -> usize {
        self.tokens.len()
    }

    /// 0-based category indices.
    pub fn tokens(&self) -> &[usize] {
        &self.tokens
    }

    /// 1-based category id at 1-based position `i`.
    pub fn category(&self, i: usize) -> usize {
        self.tokens[i - 1] + 1
    }

    pub fn to_one_based(&self) -> Vec<usize> {
        self.tokens.iter().map(|t| t + 1).collect()
    }
}

/// The `(N+M) x M` input matrix: one-hot category rows on top, one-hot
/// position rows below.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedContext {
    n: usize,
    m: usize,
    x: Mat,
}

impl EncodedContext {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn x(&self) -> &Mat {
        &self.x
    }

    pub fn xc(&self) -> Mat {
        self.x.block(0, 0, self.n, self.m)
    }

    pub fn xp(&self) -> Mat {
        self.x.block(self.n, 0, self.m, self.m)
    }

    /// Reads the argmax of every category column.
    pub fn decode(&self) -> TokenSequence {
        let tokens = (0..self.m)
            .map(|i| {
                (0..self.n)
                    .max_by(|a, b| self.x[(*a, i)].total_cmp(&self.x[(*b, i)]))
                    .unwrap_or(0)
            })
            .collect();
        TokenSequence { n: self.n, tokens }
    }
}

pub fn sample_context(n: usize, m: usize, dist: &CategoryDist, rng: &mut Rng) -> Result<TokenSequence> {
    if n < 2 || m < 2 {
        return Err(LabError::InvalidArgument(format!("need N >= 2 and M >= 2, got N = {n}, M = {m}")));
    }
    if dist.n() != n {
        return Err(LabError::InvalidDistribution(format!(
            "distribution has {} categories, N = {n}",
            dist.n()
        )));
    }
    let tokens = (0..m).map(|_| rng.categorical(dist.probs())).collect();
    Ok(TokenSequence { n, tokens })
}

/// Context `id` of a batch, drawn from its own substream so batches can be
/// generated in any order or in parallel.
pub fn sample_context_indexed(
    n: usize,
    m: usize,
    dist: &CategoryDist,
    rng: &Rng,
    id: u64,
) -> Result<TokenSequence> {
    sample_context(n, m, dist, &mut rng.substream(id))
}

pub fn encode_context(t: &TokenSequence) -> EncodedContext {
    let (n, m) = (t.n, t.m());
    let mut x = Mat::zeros(n + m, m);
    for (i, c) in t.tokens.iter().enumerate() {
        x[(*c, i)] = 1.0;
        x[(n + i, i)] = 1.0;
    }
    EncodedContext { n, m, x }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "mode")]
pub enum QTrueMode {
    StandardNormal,
    NonnegativeShifted { cap: f64 },
    PairCode,
}

impl QTrueMode {
    pub const DEFAULT_CAP: f64 = 50.0;

    pub fn nonnegative() -> Self {
        QTrueMode::NonnegativeShifted {
            cap: QTrueMode::DEFAULT_CAP,
        }
    }
}

/// `stored = scale * raw + offset`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Affine {
    pub scale: f64,
    pub offset: f64,
}

impl Affine {
    pub const IDENTITY: Affine = Affine { scale: 1.0, offset: 0.0 };

    pub fn apply(&self, raw: f64) -> f64 {
        self.scale * raw + self.offset
    }

    pub fn invert(&self, stored: f64) -> f64 {
        (stored - self.offset) / self.scale
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct QTrueTable {
    table: Mat,
    mode: QTrueMode,
    affine: Affine,
}

impl QTrueTable {
    pub fn from_mat(table: Mat, mode: QTrueMode) -> Result<Self> {
        if table.rows() != table.cols() || table.rows() < 2 {
            return Err(LabError::Shape {
                op: "QTrueTable::from_mat",
                lhs: table.shape(),
                rhs: (table.rows(), table.rows()),
            });
        }
        Ok(QTrueTable {
            table,
            mode,
            affine: Affine::IDENTITY,
        })
    }

    pub fn pair_code(n: usize) -> Self {
        let table = Mat::from_fn(n, n, |a, b| (10 * (a + 1) + b + 1) as f64).expect("finite");
        QTrueTable {
            table,
            mode: QTrueMode::PairCode,
            affine: Affine::IDENTITY,
        }
    }

    pub fn n(&self) -> usize {
        self.table.rows()
    }

    pub fn mode(&self) -> QTrueMode {
        self.mode
    }

    pub fn table(&self) -> &Mat {
        &self.table
    }

    /// Map from the raw draws to the stored table (identity unless shifted).
    pub fn affine(&self) -> Affine {
        self.affine
    }

    /// Value for 0-based categories `(prev, cur)`.
    pub fn get(&self, prev: usize, cur: usize) -> f64 {
        self.table[(prev, cur)]
    }

    /// Shift and rescale an arbitrary table into `[0, 0.99 * cap)`, returning
    /// the new table and its affine map from the old values.
    pub fn to_nonnegative(&self, cap: f64) -> Result<QTrueTable> {
        if !(cap > 0.0) {
            return Err(LabError::InvalidArgument(format!("scale cap must be positive, got {cap}")));
        }
        let data = self.table.data();
        let min = data.iter().copied().fold(f64::INFINITY, f64::min);
        let max = data.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let scale = if max > min { 0.99 * cap / (max - min) } else { 1.0 };
        let affine = Affine {
            scale,
            offset: -scale * min,
        };
        let table = self.table.map(|x| affine.apply(x).max(0.0))?;
        Ok(QTrueTable {
            table,
            mode: QTrueMode::NonnegativeShifted { cap },
            affine: Affine {
                scale: affine.scale * self.affine.scale,
                offset: affine.scale * self.affine.offset + affine.offset,
            },
        })
    }
}

pub fn sample_qtrue(n: usize, mode: QTrueMode, rng: &mut Rng) -> Result<QTrueTable> {
    if n < 2 {
        return Err(LabError::InvalidArgument(format!("need N >= 2, got {n}")));
    }
    match mode {
        QTrueMode::PairCode => Ok(QTrueTable::pair_code(n)),
        QTrueMode::StandardNormal => {
            let table = Mat::from_fn(n, n, |_, _| rng.normal())?;
            QTrueTable::from_mat(table, mode)
        }
        QTrueMode::NonnegativeShifted { cap } => {
            let table = Mat::from_fn(n, n, |_, _| rng.normal())?;
            QTrueTable::from_mat(table, QTrueMode::StandardNormal)?.to_nonnegative(cap)
        }
    }
}

/// `y[0] = 0`, `y[i] = q(x[i-1], x[i])`.
pub fn targets(t: &TokenSequence, q: &QTrueTable) -> Result<Vec<f64>> {
    if t.n() != q.n() {
        return Err(LabError::Length {
            op: "targets",
            expected: q.n(),
            got: t.n(),
        });
    }
    let tok = t.tokens();
    let mut y = vec![0.0; tok.len()];
    for i in 1..tok.len() {
        y[i] = q.get(tok[i - 1], tok[i]);
    }
    Ok(y)
}

/// CSV with header `context_id,position,category`; positions and categories
/// 1-based.
pub fn write_contexts_csv<W: Write>(mut w: W, contexts: &[TokenSequence]) -> io::Result<()> {
    writeln!(w, "context_id,position,category")?;
    for (id, t) in contexts.iter().enumerate() {
        for (i, c) in t.tokens().iter().enumerate() {
            writeln!(w, "{},{},{}", id, i + 1, c + 1)?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn worked_example_encoding() {
        let t = TokenSequence::from_one_based(4, &[1, 3, 2, 2]).unwrap();
        let x = encode_context(&t);
        let expected = Mat::from_rows(&[
            vec![1.0, 0.0, 0.0, 0.0],
            vec![0.0, 0.0, 1.0, 1.0],
            vec![0.0, 1.0, 0.0, 0.0],
            vec![0.0, 0.0, 0.0, 0.0],
            vec![1.0, 0.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.0, 0.0],
            vec![0.0, 0.0, 1.0, 0.0],
            vec![0.0, 0.0, 0.0, 1.0],
        ])
        .unwrap();
        assert_eq!(x.x(), &expected);
        assert_eq!(x.xp(), Mat::identity(4));
        assert_eq!(x.decode(), t);
        for i in 0..4 {
            assert_eq!(x.x().column(i).iter().sum::<f64>(), 2.0);
        }
    }

    #[test]
    fn pair_code_table_and_targets() {
        let q = QTrueTable::pair_code(4);
        assert_eq!(q.table().row(0), &[11.0, 12.0, 13.0, 14.0]);
        assert_eq!(q.table().row(3), &[41.0, 42.0, 43.0, 44.0]);
        let t = TokenSequence::from_one_based(4, &[1, 3, 2, 2]).unwrap();
        assert_eq!(targets(&t, &q).unwrap(), vec![0.0, 13.0, 32.0, 22.0]);
    }

    #[test]
    fn constant_table_targets() {
        let q = QTrueTable::from_mat(Mat::filled(3, 3, 2.5), QTrueMode::StandardNormal).unwrap();
        let t = TokenSequence::new(3, vec![0, 2, 1, 1, 0]).unwrap();
        assert_eq!(targets(&t, &q).unwrap(), vec![0.0, 2.5, 2.5, 2.5, 2.5]);
    }

    #[test]
    fn point_mass_distribution() {
        let dist = CategoryDist::new(vec![0.0, 0.0, 1.0, 0.0]).unwrap();
        let t = sample_context(4, 20, &dist, &mut Rng::new(3)).unwrap();
        assert!(t.to_one_based().iter().all(|c| *c == 3));
    }

    #[test]
    fn invalid_simplex_rejected() {
        assert!(CategoryDist::new(vec![0.5, 0.6]).is_err());
        assert!(CategoryDist::new(vec![-0.5, 1.5]).is_err());
        let d = CategoryDist::uniform(3).unwrap();
        assert!(sample_context(4, 5, &d, &mut Rng::new(0)).is_err());
    }

    #[test]
    fn nonnegative_shift_bounds_and_inverse() {
        let mut rng = Rng::new(11);
        for _ in 0..20 {
            let raw = sample_qtrue(10, QTrueMode::StandardNormal, &mut rng).unwrap();
            let shifted = raw.to_nonnegative(50.0).unwrap();
            let d = shifted.table().data();
            assert!(d.iter().all(|x| *x >= 0.0 && *x < 50.0));
            let a = shifted.affine();
            for (s, r) in d.iter().zip(raw.table().data()) {
                assert!((a.invert(*s) - r).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn csv_export_is_one_based() {
        let t = TokenSequence::from_one_based(4, &[1, 3]).unwrap();
        let mut buf = Vec::new();
        write_contexts_csv(&mut buf, &[t]).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "context_id,position,category\n0,1,1\n0,2,3\n");
    }
}

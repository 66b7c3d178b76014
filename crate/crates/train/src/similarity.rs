use attnlab::context::QTrueTable;
use attnlab::Mat;
use serde::Serialize;

use crate::model::ModelParams;

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Similarity {
    /// Pearson r with the sign removed: flipping both `k^t q` and `v`
    /// leaves every prediction unchanged, so only `|r|` is identifiable
    pub r: f64,
    pub signed_r: f64,
    /// the learned block has (numerically) zero variance; `r` is then 0
    pub degenerate: bool,
}

pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    assert_eq!(a.len(), b.len(), "pearson lengths");
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    let scale = a.iter().chain(b).fold(0.0f64, |m, x| m.max(x.abs())).max(f64::MIN_POSITIVE);
    // variance below rounding noise of the entries counts as zero
    let floor = n * (1e-12 * scale).powi(2);
    if saa <= floor || sbb <= floor {
        return None;
    }
    Some((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

/// Correlation of a learned `N x N` block with the q-true table, entry by entry.
pub fn block_similarity(block: &Mat, qtrue: &QTrueTable) -> Similarity {
    match pearson(block.data(), qtrue.table().data()) {
        Some(r) => Similarity {
            r: r.abs(),
            signed_r: r,
            degenerate: false,
        },
        None => Similarity {
            r: 0.0,
            signed_r: 0.0,
            degenerate: true,
        },
    }
}

/// Similarity of the category block of the learned `k^t q` to q-true.
pub fn attention_block_similarity(p: &ModelParams, qtrue: &QTrueTable) -> Similarity {
    block_similarity(&p.ktq().block(0, 0, p.n, p.n), qtrue)
}

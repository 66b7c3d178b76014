//! Magnitudes of the `v`-moments at a Gaussian initialisation.

use serde::Serialize;

use super::case_a::v_moments;
use crate::error::{LabError, Result};
use crate::linalg::Mat;
use crate::rng::Rng;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ProbeStat {
    pub name: &'static str,
    pub mean: f64,
    pub std: f64,
    /// predicted order of magnitude: `σ²N`, `σ²`, `σ/√N`, `σ/N`
    pub predicted: f64,
    /// `mean / predicted` for the trace terms, `std / predicted` for the signed ones
    pub ratio: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ProbeReport {
    pub sigma: f64,
    pub n: usize,
    pub trials: usize,
    pub stats: Vec<ProbeStat>,
}

/// Sample `v` with i.i.d. `N(0, σ²)` entries `trials` times and summarise
/// `Tr(v^t v)/N`, `1^t v^t v 1/N²`, `Tr(v)/N`, `1^t v 1/N²`.
pub fn init_scaling_probe(sigma: f64, n: usize, trials: usize, rng: &mut Rng) -> Result<ProbeReport> {
    if trials < 1000 {
        return Err(LabError::InvalidArgument(format!("probe needs at least 1000 trials, got {trials}")));
    }
    if !(sigma >= 0.0) || n < 2 {
        return Err(LabError::InvalidArgument(format!("invalid probe setup: sigma {sigma}, N {n}")));
    }
    let mut samples: Vec<Vec<f64>> = (0..4).map(|_| Vec::with_capacity(trials)).collect();
    for _ in 0..trials {
        let v = Mat::from_fn(n, n, |_, _| sigma * rng.normal())?;
        let mo = v_moments(&v);
        samples[0].push(mo.trace_sq);
        samples[1].push(mo.total_sq);
        samples[2].push(mo.trace);
        samples[3].push(mo.total);
    }
    let nf = n as f64;
    let names = ["trace_vtv", "total_vtv", "trace_v", "total_v"];
    let predicted = [sigma * sigma * nf, sigma * sigma, sigma / nf.sqrt(), sigma / nf];
    let stats = samples
        .iter()
        .enumerate()
        .map(|(k, xs)| {
            let mean = xs.iter().sum::<f64>() / trials as f64;
            let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (trials - 1) as f64;
            let std = var.sqrt();
            let scale = if k < 2 { mean } else { std };
            ProbeStat {
                name: names[k],
                mean,
                std,
                predicted: predicted[k],
                ratio: if predicted[k] > 0.0 { scale / predicted[k] } else { 0.0 },
            }
        })
        .collect();
    Ok(ProbeReport {
        sigma,
        n,
        trials,
        stats,
    })
}

//! Finite-difference check of the tape gradient of the full model.

use std::sync::Arc;

use attnlab::Rng;
use serde::Serialize;

use crate::error::Result;
use crate::model::ModelParams;
use crate::train::{sample_batch, TrainConfig};

#[derive(Clone, Debug, Serialize)]
pub struct CoordCheck {
    pub init: usize,
    pub index: usize,
    pub tape: f64,
    pub finite_diff: f64,
    pub rel_err: f64,
    /// step actually used; smaller than the nominal one after a ReLU kink
    pub h: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradcheckReport {
    pub inits: usize,
    pub coords_per_init: usize,
    pub h: f64,
    pub floor: f64,
    pub max_rel_err: f64,
    pub worst: Option<CoordCheck>,
    /// coordinates whose nominal step flipped a ReLU and were redone with a smaller one
    pub kink_retries: usize,
    /// coordinates still flipping a ReLU at the smallest step
    pub kinked: usize,
}

impl GradcheckReport {
    pub fn passed(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

/// `|a - b| / max(|a|, |b|, floor)`.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Central differences with step `h` on `coords` random trainable
/// coordinates at each of `inits` random initialisations, on a batch of
/// `batch` contexts drawn from the configuration's task.
///
/// A difference quotient straddling a ReLU kink measures a mix of two
/// one-sided slopes, so when any head unit changes state between `x + h`
/// and `x - h` the step is cut by 10 (at most three times) until none does.
pub fn gradcheck_model(
    cfg: &TrainConfig,
    inits: usize,
    coords: usize,
    batch: usize,
    h: f64,
    floor: f64,
) -> Result<GradcheckReport> {
    cfg.validate()?;
    let qtrue = cfg.sample_qtrue()?;
    let root = Rng::new(cfg.seed).substream(7);
    let mut report = GradcheckReport {
        inits,
        coords_per_init: coords,
        h,
        floor,
        max_rel_err: 0.0,
        worst: None,
        kink_retries: 0,
        kinked: 0,
    };
    for init in 0..inits {
        let mut rng = root.substream(init as u64);
        let init_cfg = TrainConfig {
            seed: cfg.seed.wrapping_add(1000 + init as u64),
            ..cfg.clone()
        };
        let mut p = init_cfg.init_params()?;
        // move biases and normalisation parameters off their special values
        perturb_head(&mut p, &mut rng);
        let data = sample_batch(cfg.n, cfg.m, batch, &qtrue, &rng.substream(1))?;
        let (_, grad) = p.loss_and_grad(&data.enc, &data.targets);
        let trainable: Vec<usize> = p
            .trainable_mask()
            .iter()
            .enumerate()
            .filter(|(_, m)| **m != 0.0)
            .map(|(i, _)| i)
            .collect();
        let base = p.to_vec();
        let mut probe = p.clone();
        for _ in 0..coords {
            let index = trainable[rng.below(trainable.len())];
            let mut step = h;
            let mut fd = central(&mut probe, &base, index, step, &data.enc, &data.targets)?;
            if fd.1 {
                report.kink_retries += 1;
                while fd.1 && step > h * 1e-3 {
                    step /= 10.0;
                    fd = central(&mut probe, &base, index, step, &data.enc, &data.targets)?;
                }
                if fd.1 {
                    report.kinked += 1;
                }
            }
            let fd = fd.0;
            let err = relative_error(grad[index], fd, floor);
            if err >= report.max_rel_err {
                report.max_rel_err = err;
                report.worst = Some(CoordCheck {
                    init,
                    index,
                    tape: grad[index],
                    finite_diff: fd,
                    rel_err: err,
                    h: step,
                });
            }
        }
    }
    Ok(report)
}

fn perturb_head(p: &mut ModelParams, rng: &mut Rng) {
    for x in p.b1.data_mut().iter_mut().chain(p.b2.data_mut()).chain(p.ln_shift.data_mut()) {
        *x += 0.1 * rng.normal();
    }
    for x in p.ln_gain.data_mut() {
        *x += 0.1 * rng.normal();
    }
}

fn central(
    probe: &mut ModelParams,
    base: &[f64],
    index: usize,
    h: f64,
    enc: &Arc<crate::EncodedBatch>,
    targets: &Arc<Vec<f64>>,
) -> Result<(f64, bool)> {
    let mut x = base.to_vec();
    x[index] = base[index] + h;
    probe.set_from_slice(&x)?;
    let (up, gates_up) = probe.loss_and_gates(enc, targets);
    x[index] = base[index] - h;
    probe.set_from_slice(&x)?;
    let (down, gates_down) = probe.loss_and_gates(enc, targets);
    Ok(((up - down) / (2.0 * h), gates_up != gates_down))
}

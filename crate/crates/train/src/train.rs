use std::sync::Arc;
use std::time::Instant;

use attnlab::context::{sample_context_indexed, sample_qtrue, targets, CategoryDist, QTrueMode, QTrueTable};
use attnlab::{Mat, Rng};
use serde::{Deserialize, Serialize};

use crate::encoded::EncodedBatch;
use crate::error::{Result, TrainError};
use crate::model::{Flavor, ModelParams};
use crate::optim::{Adam, Lbfgs};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Optimizer {
    #[serde(alias = "lbfgs")]
    QuasiNewton,
    #[serde(alias = "adam")]
    AdaptiveGd,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub n: usize,
    pub m: usize,
    pub batch: usize,
    pub iterations: usize,
    pub flavor: Flavor,
    pub optimizer: Optimizer,
    pub seed: u64,
    pub softmax: bool,
    pub softmax_scale: f64,
    /// 0 keeps hard masks
    pub penalty: f64,
    /// head width; `None` means `2N^2 - N`
    pub hidden: Option<usize>,
    /// rows of q and k; `None` means `N + M`
    pub attn_dim: Option<usize>,
    pub layer_norm: bool,
    pub qtrue: QTrueMode,
    pub init_scale: f64,
    pub learning_rate: f64,
    pub history: usize,
    /// quasi-Newton steps taken on each iteration's batch
    pub inner_steps: usize,
    /// reuse the first batch every iteration
    pub fixed_batch: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            n: 10,
            m: 50,
            batch: 1000,
            iterations: 50,
            flavor: Flavor::Free,
            optimizer: Optimizer::QuasiNewton,
            seed: 0,
            softmax: false,
            softmax_scale: 1.0,
            penalty: 0.0,
            hidden: None,
            attn_dim: None,
            layer_norm: true,
            qtrue: QTrueMode::StandardNormal,
            init_scale: 1.0,
            learning_rate: 1e-2,
            history: 10,
            inner_steps: 20,
            fixed_batch: false,
        }
    }
}

impl TrainConfig {
    pub fn hidden_width(&self) -> usize {
        self.hidden.unwrap_or(2 * self.n * self.n - self.n)
    }

    pub fn attn_width(&self) -> usize {
        self.attn_dim.unwrap_or(self.n + self.m)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(TrainError::Config(msg));
        if self.n < 2 || self.m < 2 {
            return bad(format!("need N >= 2 and M >= 2, got N = {}, M = {}", self.n, self.m));
        }
        if self.batch == 0 || self.iterations == 0 || self.history == 0 || self.inner_steps == 0 {
            return bad("batch, iterations, history and inner_steps must be positive".into());
        }
        if self.attn_width() == 0 {
            return bad("attention dimension must be positive".into());
        }
        let need = self.flavor.min_hidden(self.n, self.m);
        if self.hidden_width() < need {
            return bad(format!(
                "flavor {} needs a head of width at least {need}, got {}",
                self.flavor,
                self.hidden_width()
            ));
        }
        for (name, v) in [
            ("softmax_scale", self.softmax_scale),
            ("init_scale", self.init_scale),
            ("learning_rate", self.learning_rate),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return bad(format!("{name} must be positive and finite, got {v}"));
            }
        }
        if !(self.penalty.is_finite() && self.penalty >= 0.0) {
            return bad(format!("penalty must be non-negative, got {}", self.penalty));
        }
        Ok(())
    }

    pub fn init_params(&self) -> Result<ModelParams> {
        let mut rng = Rng::new(self.seed).substream(1);
        let mut p = ModelParams::random(
            self.n,
            self.m,
            self.flavor,
            self.hidden_width(),
            self.attn_width(),
            self.init_scale,
            &mut rng,
        )?;
        p.layer_norm = self.layer_norm;
        p.softmax = self.softmax.then_some(self.softmax_scale);
        p.penalty = self.penalty;
        p.apply_masks();
        Ok(p)
    }

    pub fn sample_qtrue(&self) -> Result<QTrueTable> {
        Ok(sample_qtrue(self.n, self.qtrue, &mut Rng::new(self.seed).substream(0))?)
    }
}

/// A batch with its encoded form and flattened targets (`b * M + i`).
#[derive(Clone, Debug)]
pub struct Batch {
    pub enc: Arc<EncodedBatch>,
    pub targets: Arc<Vec<f64>>,
}

pub fn sample_batch(n: usize, m: usize, size: usize, qtrue: &QTrueTable, rng: &Rng) -> Result<Batch> {
    let dist = CategoryDist::uniform(n)?;
    let mut contexts = Vec::with_capacity(size);
    let mut y = Vec::with_capacity(size * m);
    for id in 0..size {
        let t = sample_context_indexed(n, m, &dist, rng, id as u64)?;
        y.extend(targets(&t, qtrue)?);
        contexts.push(t);
    }
    Ok(Batch {
        enc: Arc::new(EncodedBatch::new(n, m, &contexts)),
        targets: Arc::new(y),
    })
}

/// Variance of a target `q(a, b)` with `a`, `b` independent uniform categories.
pub fn target_variance(qtrue: &QTrueTable) -> f64 {
    let d = qtrue.table().data();
    let count = d.len() as f64;
    let mean = d.iter().sum::<f64>() / count;
    d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / count
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionDump {
    pub block: &'static str,
    pub values: Mat,
}

/// The category and position blocks of `k^t q` and `v`.
pub fn attention_dumps(p: &ModelParams) -> Vec<AttentionDump> {
    let (n, m) = (p.n, p.m);
    let ktq = p.ktq();
    vec![
        AttentionDump {
            block: "ktq-cat",
            values: ktq.block(0, 0, n, n),
        },
        AttentionDump {
            block: "ktq-pos",
            values: ktq.block(n, n, m, m),
        },
        AttentionDump {
            block: "v-cat",
            values: p.v.block(0, 0, n, n),
        },
        AttentionDump {
            block: "v-pos",
            values: p.v.block(n, n, m, m),
        },
    ]
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub config: TrainConfig,
    pub qtrue: QTrueTable,
    /// batch MSE after each iteration's update, measured on that iteration's batch
    pub mse: Vec<f64>,
    pub var_y: f64,
    pub wall_time_s: f64,
    pub evaluations: usize,
    pub params: ModelParams,
    pub dumps: Vec<AttentionDump>,
    /// set when training stopped on a non-finite loss
    pub diverged_at: Option<usize>,
}

impl TrainReport {
    pub fn final_mse(&self) -> f64 {
        self.mse.last().copied().unwrap_or(f64::NAN)
    }

    pub fn into_result(self) -> std::result::Result<TrainReport, (TrainReport, TrainError)> {
        match self.diverged_at {
            None => Ok(self),
            Some(iteration) => {
                let loss = self.mse.last().copied().unwrap_or(f64::NAN);
                Err((self, TrainError::Divergence { iteration, loss }))
            }
        }
    }
}

pub fn train(cfg: &TrainConfig) -> Result<TrainReport> {
    let qtrue = cfg.sample_qtrue()?;
    train_on(cfg, &qtrue)
}

/// Runs `cfg.iterations` optimizer steps, each on a freshly sampled batch
/// unless `fixed_batch` is set. A non-finite loss stops training and is
/// reported through `diverged_at` together with everything recorded so far.
pub fn train_on(cfg: &TrainConfig, qtrue: &QTrueTable) -> Result<TrainReport> {
    cfg.validate()?;
    if qtrue.n() != cfg.n {
        return Err(TrainError::Config(format!("q-true table has N = {}, config N = {}", qtrue.n(), cfg.n)));
    }
    let start = Instant::now();
    let mut params = cfg.init_params()?;
    let mut x = params.to_vec();
    let data = Rng::new(cfg.seed).substream(2);
    let mut lbfgs = Lbfgs::new(cfg.history);
    let mut adam = Adam::new(x.len(), cfg.learning_rate);
    let mut mse = Vec::with_capacity(cfg.iterations);
    let mut evaluations = 0;
    let mut diverged_at = None;
    let mut fixed = None;
    for it in 0..cfg.iterations {
        let batch = match (&fixed, cfg.fixed_batch) {
            (Some(b), true) => Batch::clone(b),
            _ => {
                let b = sample_batch(cfg.n, cfg.m, cfg.batch, qtrue, &data.substream(it as u64))?;
                if cfg.fixed_batch {
                    fixed = Some(b.clone());
                }
                b
            }
        };
        let mut scratch = params.clone();
        let mut objective = |v: &[f64]| -> (f64, Vec<f64>) {
            if scratch.set_from_slice(v).is_err() {
                return (f64::NAN, vec![f64::NAN; v.len()]);
            }
            scratch.loss_and_grad(&batch.enc, &batch.targets)
        };
        let loss = match cfg.optimizer {
            Optimizer::QuasiNewton => match lbfgs.run(&mut x, &mut objective, cfg.inner_steps) {
                Ok(info) => {
                    evaluations += info.evaluations;
                    info.loss_after
                }
                Err(_) => f64::NAN,
            },
            Optimizer::AdaptiveGd => {
                let (_, g) = objective(&x);
                if g.iter().all(|v| v.is_finite()) {
                    adam.step(&mut x, &g);
                }
                let (after, _) = objective(&x);
                evaluations += 2;
                after
            }
        };
        mse.push(loss);
        if !loss.is_finite() || x.iter().any(|v| !v.is_finite()) {
            diverged_at = Some(it);
            break;
        }
        params.set_from_slice(&x)?;
    }
    Ok(TrainReport {
        config: cfg.clone(),
        qtrue: qtrue.clone(),
        mse,
        var_y: target_variance(qtrue),
        wall_time_s: start.elapsed().as_secs_f64(),
        evaluations,
        dumps: attention_dumps(&params),
        params,
        diverged_at,
    })
}

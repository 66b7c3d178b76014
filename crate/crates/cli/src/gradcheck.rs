use std::path::{Path, PathBuf};

use attnlab::context::{sample_qtrue, CategoryDist, QTrueMode, QTrueTable};
use attnlab::report::ResidualReport;
use attnlab::stationarity::case_a::{expected_loss_closed, grad_q_closed, grad_v_closed, CaseAParams};
use attnlab::stationarity::case_b::{self, CaseBParams};
use attnlab::stationarity::oracle::{
    agreement, case_a_enumerate, case_a_monte_carlo, case_b_enumerate, case_b_enumerated_loss, central_differences,
    OracleGradient,
};
use attnlab::{Mat, Rng};
use attnlab_train::check::gradcheck_model;
use attnlab_train::{Flavor, TrainConfig};
use clap::ValueEnum;
use serde::{Deserialize, Serialize};

use crate::failure::Failure;
use crate::manifest::{write_json, ManifestWriter};
use crate::settings;

const ENUM_TOL: f64 = 1e-9;
const FD_TOL: f64 = 1e-7;
const FD_STEP: f64 = 1e-5;
const Z_TOL: f64 = 4.0;
const MODEL_TOL: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
pub enum Case {
    #[value(name = "A", alias = "a")]
    #[serde(rename = "A", alias = "a")]
    A,
    #[value(name = "B", alias = "b")]
    #[serde(rename = "B", alias = "b")]
    B,
    #[value(name = "model")]
    #[serde(rename = "model")]
    Model,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Oracle {
    Enum,
    Mc,
    Fd,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Dist {
    Uniform,
    /// probabilities proportional to 1..N
    Linear,
}

impl Dist {
    pub fn build(self, n: usize) -> Result<CategoryDist, Failure> {
        Ok(match self {
            Dist::Uniform => CategoryDist::uniform(n)?,
            Dist::Linear => CategoryDist::from_weights(&(1..=n).map(|k| k as f64).collect::<Vec<_>>())?,
        })
    }
}

#[derive(clap::Args, Debug, Serialize)]
pub struct Args {
    #[arg(long = "case", value_enum)]
    case: Option<Case>,
    #[arg(long, value_enum)]
    oracle: Option<Oracle>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    m: Option<usize>,
    /// random parameter points (initialisations for the model)
    #[arg(long)]
    points: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Monte Carlo contexts per point
    #[arg(long)]
    samples: Option<usize>,
    /// coordinates checked per initialisation of the model
    #[arg(long)]
    coords: Option<usize>,
    /// contexts in the model's check batch
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long, value_enum)]
    dist: Option<Dist>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Settings {
    case: Case,
    oracle: Oracle,
    n: Option<usize>,
    m: Option<usize>,
    points: Option<usize>,
    seed: u64,
    samples: usize,
    coords: usize,
    batch: usize,
    dist: Dist,
    out_dir: PathBuf,
}

impl Default for Settings {
    fn default() -> Self {
        Settings {
            case: Case::A,
            oracle: Oracle::Enum,
            n: None,
            m: None,
            points: None,
            seed: 0,
            samples: 1_000_000,
            coords: 200,
            batch: 8,
            dist: Dist::Uniform,
            out_dir: PathBuf::from("attnlab-out"),
        }
    }
}

impl Settings {
    fn resolve(mut self) -> Result<Settings, Failure> {
        let (n, m, points) = match (self.case, self.oracle) {
            (Case::Model, Oracle::Fd) => (10, 50, 10),
            (Case::Model, _) => {
                return Err(Failure::Config("the model gradient is checked against finite differences only".into()))
            }
            (Case::A, Oracle::Mc) => (4, 6, 1),
            (Case::A, _) => (3, 4, 20),
            (Case::B, Oracle::Mc) => (3, 5, 1),
            (Case::B, _) => (3, 5, 20),
        };
        let n = *self.n.get_or_insert(n);
        let m = *self.m.get_or_insert(m);
        let points = *self.points.get_or_insert(points);
        if n < 2 || m < 2 {
            return Err(Failure::Config(format!("need N >= 2 and M >= 2, got N = {n}, M = {m}")));
        }
        if points == 0 || self.samples < 2 || self.coords == 0 || self.batch == 0 {
            return Err(Failure::Config("points, coords and batch must be positive, samples at least 2".into()));
        }
        if self.case == Case::A && self.dist != Dist::Uniform {
            return Err(Failure::Config("case A is defined for uniform categories".into()));
        }
        Ok(self)
    }
}

fn normal_mat(rows: usize, cols: usize, sd: f64, rng: &mut Rng) -> Result<Mat, Failure> {
    Ok(Mat::from_fn(rows, cols, |_, _| sd * rng.normal())?)
}

fn gap(a: &OracleGradient, b: &OracleGradient) -> (f64, f64) {
    (a.gq.max_abs_diff(&b.gq), a.gv.max_abs_diff(&b.gv))
}

/// Closed forms in the true-derivative convention.
fn closed_a(p: &CaseAParams) -> Result<OracleGradient, Failure> {
    Ok(OracleGradient {
        loss: expected_loss_closed(p),
        gq: grad_q_closed(p).scale(-2.0)?,
        gv: grad_v_closed(p).scale(-2.0)?,
    })
}

/// A flat gradient, `q` part first, back into matrices.
fn split(g: &[f64], qshape: (usize, usize), vshape: (usize, usize)) -> Result<(Mat, Mat), Failure> {
    let (gq, gv) = g.split_at(qshape.0 * qshape.1);
    Ok((Mat::from_vec(qshape.0, qshape.1, gq.to_vec())?, Mat::from_vec(vshape.0, vshape.1, gv.to_vec())?))
}

fn case_a(s: &Settings, rep: &mut ResidualReport) -> Result<(), Failure> {
    let (n, m) = (s.n.unwrap(), s.m.unwrap());
    let root = Rng::new(s.seed);
    for k in 0..s.points.unwrap() {
        let mut rng = root.substream(k as u64);
        let p = CaseAParams::new(normal_mat(m, m, 0.5, &mut rng)?, normal_mat(n, n, 0.5, &mut rng)?)?;
        let closed = closed_a(&p)?;
        match s.oracle {
            Oracle::Enum => {
                let exact = case_a_enumerate(&p)?;
                let (dq, dv) = gap(&closed, &exact);
                rep.push(format!("point{k}.grad_q"), dq, ENUM_TOL);
                rep.push(format!("point{k}.grad_v"), dv, ENUM_TOL);
                rep.push(format!("point{k}.loss"), closed.loss - exact.loss, ENUM_TOL);
            }
            Oracle::Mc => {
                let mc = case_a_monte_carlo(&p, s.samples, &root.substream(1 << 32).substream(k as u64))?;
                let a = agreement(&closed, &mc);
                rep.push(format!("point{k}.max_z"), a.max_z, Z_TOL);
                rep.push(format!("point{k}.gap_at_zero_se"), a.max_abs_at_zero_se, 1e-12);
            }
            Oracle::Fd => {
                let g = central_differences(
                    |x| Ok(expected_loss_closed(&CaseAParams::from_vec(n, m, x)?)),
                    &p.to_vec(),
                    FD_STEP,
                )?;
                let (gq, gv) = split(&g, (m, m), (n, n))?;
                rep.push(format!("point{k}.grad_q"), gq.max_abs_diff(&closed.gq), FD_TOL);
                rep.push(format!("point{k}.grad_v"), gv.max_abs_diff(&closed.gv), FD_TOL);
            }
        }
    }
    Ok(())
}

/// Sample mean and standard error of per-context gradients under `dist`.
fn case_b_monte_carlo(
    p: &CaseBParams,
    qtrue: &QTrueTable,
    dist: &CategoryDist,
    samples: usize,
    rng: &mut Rng,
) -> Result<(Vec<f64>, Vec<f64>), Failure> {
    let dim = p.q.data().len() + p.v.data().len();
    let mut sum = vec![0.0; dim];
    let mut sq = vec![0.0; dim];
    let mut t = vec![0; p.m()];
    for _ in 0..samples {
        t.iter_mut().for_each(|c| *c = rng.categorical(dist.probs()));
        let (_, gq, gv) = case_b::grad_context(p, qtrue, &t);
        for (k, g) in gq.data().iter().chain(gv.data()).enumerate() {
            sum[k] += g;
            sq[k] += g * g;
        }
    }
    let nf = samples as f64;
    let mean: Vec<f64> = sum.iter().map(|x| x / nf).collect();
    let se = sq
        .iter()
        .zip(&mean)
        .map(|(s2, mu)| ((s2 / nf - mu * mu).max(0.0) / (nf - 1.0)).sqrt())
        .collect();
    Ok((mean, se))
}

fn case_b(s: &Settings, rep: &mut ResidualReport) -> Result<(), Failure> {
    let (n, m) = (s.n.unwrap(), s.m.unwrap());
    let root = Rng::new(s.seed);
    let dist = s.dist.build(n)?;
    let qtrue = sample_qtrue(n, QTrueMode::StandardNormal, &mut root.substream(1 << 33))?;
    for k in 0..s.points.unwrap() {
        let mut rng = root.substream(k as u64);
        let p = CaseBParams::new(normal_mat(m, m, 0.5, &mut rng)?, normal_mat(n, n, 0.5, &mut rng)?)?;
        let exact = case_b_enumerate(&p, &qtrue, &dist)?;
        match s.oracle {
            // the only independent reference for the enumerated gradient is
            // differencing the enumerated loss, so both names run this check
            Oracle::Enum | Oracle::Fd => {
                let mut x = p.q.data().to_vec();
                x.extend_from_slice(p.v.data());
                let g = central_differences(
                    |y| {
                        let q = Mat::from_vec(n, n, y[..n * n].to_vec())?;
                        let v = Mat::from_vec(m, m, y[n * n..].to_vec())?;
                        case_b_enumerated_loss(&CaseBParams::new(v, q)?, &qtrue, &dist)
                    },
                    &x,
                    FD_STEP,
                )?;
                let (gq, gv) = split(&g, (n, n), (m, m))?;
                rep.push(format!("point{k}.grad_q"), gq.max_abs_diff(&exact.gq), FD_TOL);
                rep.push(format!("point{k}.grad_v"), gv.max_abs_diff(&exact.gv), FD_TOL);
            }
            Oracle::Mc => {
                let mut mc_rng = root.substream(1 << 32).substream(k as u64);
                let (mean, se) = case_b_monte_carlo(&p, &qtrue, &dist, s.samples, &mut mc_rng)?;
                let reference: Vec<f64> = exact.gq.data().iter().chain(exact.gv.data()).copied().collect();
                let (mut max_z, mut at_zero) = (0.0f64, 0.0f64);
                for ((a, b), e) in reference.iter().zip(&mean).zip(&se) {
                    if *e > 0.0 {
                        max_z = max_z.max((a - b).abs() / e);
                    } else {
                        at_zero = at_zero.max((a - b).abs());
                    }
                }
                rep.push(format!("point{k}.max_z"), max_z, Z_TOL);
                rep.push(format!("point{k}.gap_at_zero_se"), at_zero, 1e-12);
            }
        }
    }
    Ok(())
}

fn model(s: &Settings, rep: &mut ResidualReport) -> Result<(), Failure> {
    let cfg = TrainConfig {
        n: s.n.unwrap(),
        m: s.m.unwrap(),
        seed: s.seed,
        flavor: Flavor::Free,
        ..TrainConfig::default()
    };
    let g = gradcheck_model(&cfg, s.points.unwrap(), s.coords, s.batch, FD_STEP, FD_STEP)?;
    rep.push("max_rel_err", g.max_rel_err, MODEL_TOL);
    rep.info("kink_retries", g.kink_retries as f64);
    rep.info("kinked", g.kinked as f64);
    if let Some(w) = &g.worst {
        rep.info("worst.init", w.init as f64);
        rep.info("worst.index", w.index as f64);
        rep.info("worst.tape", w.tape);
        rep.info("worst.finite_diff", w.finite_diff);
        rep.info("worst.h", w.h);
    }
    rep.note(format!(
        "{} initialisations x {} coordinates, batch {}, step {:e}, relative error floor {:e}",
        g.inits, g.coords_per_init, s.batch, g.h, g.floor
    ));
    Ok(())
}

fn execute(s: &Settings, man: &ManifestWriter) -> Result<(), Failure> {
    let subject = match s.case {
        Case::A => "case-a gradient",
        Case::B => "case-b gradient",
        Case::Model => "model gradient",
    };
    let mut rep = ResidualReport::new(format!("{subject} vs {:?} oracle", s.oracle).to_lowercase());
    match s.case {
        Case::A => case_a(s, &mut rep)?,
        Case::B => case_b(s, &mut rep)?,
        Case::Model => model(s, &mut rep)?,
    }
    println!("{}", serde_json::to_string_pretty(&rep)?);
    write_json(&man.path("gradcheck.json"), &rep)?;
    if rep.passed() {
        Ok(())
    } else {
        let worst: Vec<String> = rep.failures().map(|r| format!("{} = {:.3e}", r.id, r.value)).collect();
        Err(Failure::Tolerance(worst.join(", ")))
    }
}

pub fn run(args: Args, config: Option<&Path>) -> Result<(), Failure> {
    let s: Settings = settings::resolve::<_, Settings>(config, &args)?.resolve()?;
    if s.oracle == Oracle::Enum || (s.case == Case::B) {
        // refuse before anything is written
        attnlab::stationarity::oracle::enumeration_size(s.n.unwrap(), s.m.unwrap())?;
    }
    let man = ManifestWriter::start(&s.out_dir, "gradcheck", &s, s.seed, &["gradcheck.json"])?;
    let outcome = execute(&s, &man);
    man.finish(outcome)
}

use std::path::{Path, PathBuf};

use attnlab::context::{sample_qtrue, QTrueMode, QTrueTable};
use attnlab::report::ResidualReport;
use attnlab::stationarity::case_a::{canonical_family, flat_family, stationary_residuals_case_a};
use attnlab::stationarity::case_b::{
    canonical_point, gauge_point, invalid_branch_witness, moments, row_residuals, stationarity_case_b,
    zero_row_sum_point,
};
use attnlab::stationarity::simplex::{
    canonical_simplex_point, projected_descent, random_simplex_init, softmax_constrained_residual, PgdConfig,
};
use attnlab::{Mat, Rng};
use clap::ValueEnum;
use serde::{Deserialize, Serialize};

use crate::failure::Failure;
use crate::gradcheck::Dist;
use crate::manifest::{write_json, ManifestWriter};
use crate::settings;

const BASIN: f64 = 1e-3;
const WITNESS_FLOOR: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
pub enum Regime {
    #[value(name = "A", alias = "a")]
    #[serde(rename = "A", alias = "a")]
    A,
    #[value(name = "A-softmax", alias = "a-softmax")]
    #[serde(rename = "A-softmax", alias = "a-softmax")]
    ASoftmax,
    #[value(name = "B", alias = "b")]
    #[serde(rename = "B", alias = "b")]
    B,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    Canonical,
    Flat,
    Gauge,
    Invalid,
}

#[derive(clap::Args, Debug, Serialize)]
pub struct Args {
    #[arg(long, value_enum)]
    regime: Option<Regime>,
    #[arg(long, value_enum)]
    family: Option<Family>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    m: Option<usize>,
    /// random starts (A-softmax) or random tables (B invalid)
    #[arg(long)]
    seeds: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    dist: Option<Dist>,
    /// gauge parameters c for the B gauge family
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    gauge: Option<Vec<f64>>,
    #[arg(long)]
    tol: Option<f64>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Settings {
    regime: Regime,
    family: Family,
    n: Option<usize>,
    m: Option<usize>,
    seeds: Option<usize>,
    seed: u64,
    dist: Dist,
    gauge: Vec<f64>,
    tol: f64,
    out_dir: PathBuf,
}

impl Default for Settings {
    fn default() -> Self {
        Settings {
            regime: Regime::A,
            family: Family::Canonical,
            n: None,
            m: None,
            seeds: None,
            seed: 0,
            dist: Dist::Uniform,
            gauge: vec![0.5, 2.0, -0.3],
            tol: 1e-10,
            out_dir: PathBuf::from("attnlab-out"),
        }
    }
}

impl Settings {
    fn resolve(mut self) -> Result<Settings, Failure> {
        let known = match self.regime {
            Regime::A => matches!(self.family, Family::Canonical | Family::Flat),
            Regime::ASoftmax => self.family == Family::Canonical,
            Regime::B => self.family != Family::Flat,
        };
        if !known {
            return Err(Failure::Config(format!(
                "family {:?} is not defined for regime {:?}",
                self.family, self.regime
            )));
        }
        if self.regime != Regime::B && self.dist != Dist::Uniform {
            return Err(Failure::Config("case A is defined for uniform categories".into()));
        }
        let (n, m, seeds) = match self.regime {
            Regime::A | Regime::ASoftmax => (4, 6, 50),
            Regime::B => (4, 7, 100),
        };
        let n = *self.n.get_or_insert(n);
        let m = *self.m.get_or_insert(m);
        self.seeds.get_or_insert(seeds);
        if n < 2 || m < 2 {
            return Err(Failure::Config(format!("need N >= 2 and M >= 2, got N = {n}, M = {m}")));
        }
        if self.regime == Regime::B && self.family == Family::Invalid && m < 3 {
            return Err(Failure::Config("the zero-row-sum branch needs M >= 3".into()));
        }
        if !(self.tol > 0.0) {
            return Err(Failure::Config(format!("tol must be positive, got {}", self.tol)));
        }
        Ok(self)
    }
}

#[derive(Debug, Serialize)]
struct DescentRun {
    start: usize,
    distance: f64,
    loss: f64,
    iterations: usize,
    /// ended on the face `v = J/N`, `q[i-1][i] = 0`
    flat_face: bool,
}

#[derive(Debug, Serialize)]
struct StationaryOutput {
    report: ResidualReport,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    runs: Vec<DescentRun>,
}

fn regime_a(s: &Settings, n: usize, m: usize) -> Result<ResidualReport, Failure> {
    let fam = match s.family {
        Family::Canonical => canonical_family(n, m, 1.0)?,
        _ => flat_family(n, m, 1.0)?,
    };
    let mut rep = stationary_residuals_case_a(&fam.params, s.tol);
    for (name, value) in &fam.free {
        rep.info(format!("family.{name}"), *value);
    }
    Ok(rep)
}

fn regime_a_softmax(s: &Settings, n: usize, m: usize) -> Result<StationaryOutput, Failure> {
    let mut report = softmax_constrained_residual(&canonical_simplex_point(n, m)?, s.tol)?;
    let root = Rng::new(s.seed);
    let flat_v = Mat::filled(n, n, 1.0 / n as f64);
    let mut runs = Vec::new();
    for k in 0..s.seeds.unwrap() {
        let init = random_simplex_init(n, m, &mut root.substream(k as u64))?;
        let r = projected_descent(&init, PgdConfig::default())?;
        runs.push(DescentRun {
            start: k,
            distance: r.distance,
            loss: r.loss,
            iterations: r.iterations,
            flat_face: r.params.v.max_abs_diff(&flat_v) < 1e-6 && (1..m).all(|i| r.params.q[(i - 1, i)] < 1e-9),
        });
    }
    let off = runs.iter().filter(|r| r.distance >= BASIN).count();
    let flat = runs.iter().filter(|r| r.distance >= BASIN && r.flat_face).count();
    report.push("runs_not_at_canonical", off as f64, 0.0);
    report.info("runs_on_flat_face", flat as f64);
    report.info("max_canonical_distance", runs.iter().map(|r| r.distance).fold(0.0, f64::max));
    if flat > 0 {
        report.note(format!(
            "{flat} of {} runs stopped on the face v = J/N with a zero shift entry, which is itself constrained-stationary",
            runs.len()
        ));
    }
    Ok(StationaryOutput { report, runs })
}

fn regime_b(s: &Settings, n: usize, m: usize) -> Result<ResidualReport, Failure> {
    let dist = s.dist.build(n)?;
    let root = Rng::new(s.seed);
    let qtrue = sample_qtrue(n, QTrueMode::StandardNormal, &mut root.substream(1 << 33))?;
    let mut rep = ResidualReport::new(format!("case-b {:?} family", s.family).to_lowercase());
    match s.family {
        Family::Canonical => rep.extend("", stationarity_case_b(&canonical_point(&qtrue, m)?, &qtrue, &dist, s.tol)),
        Family::Gauge => {
            for c in &s.gauge {
                let p = gauge_point(&qtrue, m, *c)?;
                rep.extend(&format!("c={c}."), stationarity_case_b(&p, &qtrue, &dist, s.tol));
            }
        }
        _ => {
            let mut missing = 0;
            let mut smallest = f64::INFINITY;
            for k in 0..s.seeds.unwrap() {
                let q = sample_qtrue(n, QTrueMode::StandardNormal, &mut root.substream(k as u64))?;
                let w = invalid_branch_witness(&q, &dist);
                smallest = smallest.min(w);
                if w <= WITNESS_FLOOR {
                    missing += 1;
                }
            }
            rep.push("tables_without_witness", missing as f64, 0.0);
            rep.info("smallest_witness", smallest);
            // rows equal, so every column is constant
            let rows_equal = Mat::from_fn(n, n, |_, t| 1.7 * t as f64 - 2.0)?;
            let flat = QTrueTable::from_mat(rows_equal, QTrueMode::StandardNormal)?;
            rep.push("column_constant_witness", invalid_branch_witness(&flat, &dist), 0.0);
            let (p, beta) = zero_row_sum_point(&qtrue, &dist, m, 3, 0.8)?;
            let r = row_residuals(&p, &moments(&p.q, &qtrue, &dist), 2);
            rep.info("branch_point.soap2", r.soap2);
            rep.info("branch_point.beta", beta);
            rep.note("on the zero-row-sum branch soap2 equals beta (1 - beta) times the witness, so a positive witness rules the branch out");
        }
    }
    Ok(rep)
}

fn execute(s: &Settings, man: &ManifestWriter) -> Result<(), Failure> {
    let (n, m) = (s.n.unwrap(), s.m.unwrap());
    let out = match s.regime {
        Regime::A => StationaryOutput {
            report: regime_a(s, n, m)?,
            runs: Vec::new(),
        },
        Regime::ASoftmax => regime_a_softmax(s, n, m)?,
        Regime::B => StationaryOutput {
            report: regime_b(s, n, m)?,
            runs: Vec::new(),
        },
    };
    println!("{}", serde_json::to_string_pretty(&out.report)?);
    if !out.runs.is_empty() {
        let within = out.runs.iter().filter(|r| r.distance < BASIN).count();
        println!("{within}/{} descent runs ended within {BASIN:e} of (I, shift)", out.runs.len());
    }
    write_json(&man.path("stationary.json"), &out)?;
    if out.report.passed() {
        Ok(())
    } else {
        let worst: Vec<String> = out.report.failures().map(|r| format!("{} = {:.3e}", r.id, r.value)).collect();
        Err(Failure::Tolerance(worst.join(", ")))
    }
}

pub fn run(args: Args, config: Option<&Path>) -> Result<(), Failure> {
    let s: Settings = settings::resolve::<_, Settings>(config, &args)?.resolve()?;
    let man = ManifestWriter::start(&s.out_dir, "stationary", &s, s.seed, &["stationary.json"])?;
    let outcome = execute(&s, &man);
    man.finish(outcome)
}

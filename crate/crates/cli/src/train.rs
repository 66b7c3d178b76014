use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use attnlab::Mat;
use attnlab_train::dump::{write_attn_dump, write_loss_curve};
use attnlab_train::similarity::{attention_block_similarity, block_similarity, Similarity};
use attnlab_train::{train, Flavor, TrainConfig, TrainReport};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::failure::Failure;
use crate::manifest::{self, write_json, ManifestWriter};
use crate::settings;

#[derive(clap::Args, Debug, Serialize)]
pub struct Args {
    /// sol1, sol2, sol3, free, a comma-separated list, or all
    #[arg(long)]
    flavor: Option<String>,
    #[arg(long = "iters")]
    #[serde(rename = "iterations")]
    iters: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    m: Option<usize>,
    /// first seed
    #[arg(long)]
    seed: Option<u64>,
    /// number of consecutive seeds starting at --seed
    #[arg(long)]
    seeds: Option<u64>,
    /// quasi-newton (lbfgs) or adaptive-gd (adam)
    #[arg(long)]
    optimizer: Option<String>,
    /// quasi-Newton steps per iteration's batch
    #[arg(long)]
    inner_steps: Option<usize>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TrainSettings {
    /// shared by every run; `flavor` and `seed` are those of the first run
    base: TrainConfig,
    flavors: Vec<Flavor>,
    seeds: Vec<u64>,
    out_dir: PathBuf,
}

fn take<T: for<'de> Deserialize<'de>>(
    map: &mut serde_json::Map<String, Value>,
    key: &str,
) -> Result<Option<T>, Failure> {
    match map.remove(key) {
        None => Ok(None),
        Some(v) => serde_json::from_value(v)
            .map(Some)
            .map_err(|e| Failure::Config(format!("{key}: {e}"))),
    }
}

fn parse_flavors(spec: &str) -> Result<Vec<Flavor>, Failure> {
    if spec == "all" {
        return Ok(Flavor::ALL.to_vec());
    }
    let mut out = Vec::new();
    for name in spec.split(',').map(str::trim) {
        let f: Flavor = name.parse()?;
        if !out.contains(&f) {
            out.push(f);
        }
    }
    Ok(out)
}

fn resolve(args: &Args, config: Option<&Path>) -> Result<TrainSettings, Failure> {
    let mut map = settings::merged(config, args)?;
    let seeds: u64 = take(&mut map, "seeds")?.unwrap_or(1);
    let out_dir: PathBuf = take(&mut map, "out_dir")?.unwrap_or_else(|| PathBuf::from("attnlab-out"));
    let flavor: String = take(&mut map, "flavor")?.unwrap_or_else(|| "free".into());
    let flavors = parse_flavors(&flavor)?;
    let mut base: TrainConfig = settings::decode(map)?;
    if seeds == 0 {
        return Err(Failure::Config("seeds must be positive".into()));
    }
    base.flavor = flavors[0];
    let first = base.seed;
    let seeds: Vec<u64> = (0..seeds).map(|k| first + k).collect();
    for f in &flavors {
        TrainConfig {
            flavor: *f,
            ..base.clone()
        }
        .validate()?;
    }
    Ok(TrainSettings {
        base,
        flavors,
        seeds,
        out_dir,
    })
}

#[derive(Debug, Serialize)]
struct RunSummary {
    flavor: Flavor,
    seed: u64,
    iterations: usize,
    final_mse: f64,
    var_y: f64,
    mse_over_var: f64,
    /// category block of k^t q against q-true
    similarity: Similarity,
    evaluations: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    diverged_at: Option<usize>,
}

fn summarise(r: &TrainReport) -> RunSummary {
    RunSummary {
        flavor: r.config.flavor,
        seed: r.config.seed,
        iterations: r.mse.len(),
        final_mse: r.final_mse(),
        var_y: r.var_y,
        mse_over_var: r.final_mse() / r.var_y,
        similarity: attention_block_similarity(&r.params, &r.qtrue),
        evaluations: r.evaluations,
        diverged_at: r.diverged_at,
    }
}

const OUTPUTS: [&str; 3] = ["loss_curve.csv", "attn_dump.csv", "train_summary.json"];

fn write_outputs(man: &ManifestWriter, reports: &[TrainReport]) -> Result<(), Failure> {
    write_loss_curve(BufWriter::new(File::create(man.path(OUTPUTS[0]))?), reports)?;
    write_attn_dump(BufWriter::new(File::create(man.path(OUTPUTS[1]))?), reports)?;
    let summary: Vec<RunSummary> = reports.iter().map(summarise).collect();
    write_json(&man.path(OUTPUTS[2]), &summary)
}

fn execute(s: &TrainSettings, man: &ManifestWriter) -> Result<(), Failure> {
    let mut reports = Vec::new();
    println!(
        "{:<6}{:>6}{:>14}{:>12}{:>12}{:>8}{:>10}",
        "flavor", "seed", "final mse", "var(y)", "mse/var", "|r|", "time s"
    );
    for flavor in &s.flavors {
        for seed in &s.seeds {
            let cfg = TrainConfig {
                flavor: *flavor,
                seed: *seed,
                ..s.base.clone()
            };
            let r = train(&cfg)?;
            let sum = summarise(&r);
            println!(
                "{:<6}{:>6}{:>14.6e}{:>12.4}{:>12.4e}{:>8.3}{:>10.1}",
                sum.flavor, sum.seed, sum.final_mse, sum.var_y, sum.mse_over_var, sum.similarity.r, r.wall_time_s
            );
            let diverged = r.diverged_at;
            reports.push(r);
            if let Some(it) = diverged {
                write_outputs(man, &reports)?;
                return Err(Failure::Divergence(format!(
                    "flavor {flavor} seed {seed} hit a non-finite loss at iteration {}; partial outputs written",
                    it + 1
                )));
            }
        }
    }
    write_outputs(man, &reports)
}

pub fn run(args: Args, config: Option<&Path>) -> Result<(), Failure> {
    let s = resolve(&args, config)?;
    let man = ManifestWriter::start(&s.out_dir, "train", &s, s.base.seed, &OUTPUTS)?;
    let outcome = execute(&s, &man);
    man.finish(outcome)
}

#[derive(clap::Args, Debug)]
pub struct SimilarityArgs {
    /// output directory of a train run
    #[arg(long)]
    run_dir: PathBuf,
}

/// Reads a train run's manifest and attention dump, regenerates each run's
/// q-true table from its seed and prints the k^t q similarity.
pub fn similarity(args: SimilarityArgs) -> Result<(), Failure> {
    let read = |name: &str| {
        fs::read_to_string(args.run_dir.join(name))
            .map_err(|e| Failure::Config(format!("{}: {e}", args.run_dir.join(name).display())))
    };
    let man: Value = serde_json::from_str(&read(manifest::FILE)?)
        .map_err(|e| Failure::Config(format!("manifest: {e}")))?;
    if man["subcommand"] != "train" {
        return Err(Failure::Config("the manifest is not from a train run".into()));
    }
    let base: TrainConfig = serde_json::from_value(man["config"]["base"].clone())
        .map_err(|e| Failure::Config(format!("manifest config: {e}")))?;
    let n = base.n;
    let mut blocks: BTreeMap<(String, u64), Mat> = BTreeMap::new();
    let malformed = |line: &str| Failure::Config(format!("malformed attention dump line {line:?}"));
    for line in read(OUTPUTS[1])?.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 6 {
            return Err(malformed(line));
        }
        if f[2] != "ktq-cat" {
            continue;
        }
        let seed: u64 = f[1].parse().map_err(|_| malformed(line))?;
        let row: usize = f[3].parse().map_err(|_| malformed(line))?;
        let col: usize = f[4].parse().map_err(|_| malformed(line))?;
        let value: f64 = f[5].parse().map_err(|_| malformed(line))?;
        if row == 0 || col == 0 || row > n || col > n {
            return Err(malformed(line));
        }
        let block = blocks.entry((f[0].to_string(), seed)).or_insert_with(|| Mat::zeros(n, n));
        block[(row - 1, col - 1)] = value;
    }
    println!("{:<6}{:>6}{:>10}{:>10}", "flavor", "seed", "|r|", "r");
    for ((flavor, seed), block) in &blocks {
        let cfg = TrainConfig {
            seed: *seed,
            ..base.clone()
        };
        let s = block_similarity(block, &cfg.sample_qtrue()?);
        println!("{flavor:<6}{seed:>6}{:>10.4}{:>10.4}", s.r, s.signed_r);
    }
    Ok(())
}

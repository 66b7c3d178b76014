use std::fs;
use std::path::{Path, PathBuf};

use chrono::{SecondsFormat, Utc};
use serde::Serialize;
use serde_json::Value;

use crate::failure::Failure;

pub const FILE: &str = "manifest.json";

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub subcommand: &'static str,
    pub config: Value,
    pub seed: u64,
    pub version: String,
    pub outputs: Vec<String>,
    pub started: String,
    pub finished: Option<String>,
    /// ok, tolerance-failure, diverged; absent while running
    pub status: Option<&'static str>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub wall_time_s: Option<f64>,
}

fn now() -> String {
    Utc::now().to_rfc3339_opts(SecondsFormat::Millis, true)
}

/// A manifest on disk naming the outputs a run is about to write. It is
/// written once up front and again, with the end time, when the run stops.
pub struct ManifestWriter {
    dir: PathBuf,
    manifest: RunManifest,
    clock: std::time::Instant,
}

impl ManifestWriter {
    pub fn start<C: Serialize>(
        dir: &Path,
        subcommand: &'static str,
        config: &C,
        seed: u64,
        outputs: &[&str],
    ) -> Result<Self, Failure> {
        fs::create_dir_all(dir)?;
        let w = ManifestWriter {
            dir: dir.to_path_buf(),
            manifest: RunManifest {
                subcommand,
                config: serde_json::to_value(config)?,
                seed,
                version: format!("attnlab {}", env!("CARGO_PKG_VERSION")),
                outputs: outputs.iter().map(|s| s.to_string()).collect(),
                started: now(),
                finished: None,
                status: None,
                wall_time_s: None,
            },
            clock: std::time::Instant::now(),
        };
        w.write()?;
        Ok(w)
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn write(&self) -> Result<(), Failure> {
        let text = serde_json::to_string_pretty(&self.manifest)?;
        fs::write(self.dir.join(FILE), text + "\n")?;
        Ok(())
    }

    /// Stamps the end of the run; the outcome is passed through unchanged.
    pub fn finish(mut self, outcome: Result<(), Failure>) -> Result<(), Failure> {
        self.manifest.finished = Some(now());
        self.manifest.wall_time_s = Some(self.clock.elapsed().as_secs_f64());
        self.manifest.status = Some(match &outcome {
            Ok(()) => "ok",
            Err(Failure::Tolerance(_)) => "tolerance-failure",
            Err(Failure::Divergence(_)) => "diverged",
            Err(Failure::Config(_)) => "config-error",
            Err(Failure::Other(_)) => "error",
        });
        self.write()?;
        outcome
    }
}

/// JSON with a trailing newline; the same value always gives the same bytes.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), Failure> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use pulse_cascade::experiments::{ConvergenceReport, ExperimentConfig, ResolvedSetup, RunOutcome};
use serde::Serialize;

pub const MANIFEST_NAME: &str = "manifest.json";

/// Record of one run: the config as used, the grid and truncation that were
/// actually resolved, convergence evidence and the files written.
#[derive(Serialize)]
pub struct RunManifest<'a> {
    pub scenario: &'static str,
    pub code_version: &'static str,
    pub config: &'a ExperimentConfig,
    pub setup: &'a ResolvedSetup,
    pub convergence: Option<ConvergenceReport>,
    pub wall_clock_seconds: f64,
    /// Paths relative to the output directory.
    pub files: Vec<String>,
}

impl<'a> RunManifest<'a> {
    pub fn new(
        config: &'a ExperimentConfig,
        outcome: &'a RunOutcome,
        convergence: Option<ConvergenceReport>,
        wall_clock_seconds: f64,
        dir: &Path,
    ) -> Self {
        let files = outcome
            .files
            .iter()
            .map(|f| f.strip_prefix(dir).unwrap_or(f).display().to_string())
            .collect();
        Self {
            scenario: outcome.scenario.name(),
            code_version: env!("CARGO_PKG_VERSION"),
            config,
            setup: &outcome.setup,
            convergence,
            wall_clock_seconds,
            files,
        }
    }

    /// Writes `manifest.json` through a temporary file and a rename, so a
    /// reader never sees a partial manifest.
    pub fn write_atomically(&self, dir: &Path) -> pulse_cascade::Result<PathBuf> {
        let target = dir.join(MANIFEST_NAME);
        let tmp = dir.join(format!(".{MANIFEST_NAME}.tmp"));
        {
            let mut f = fs::File::create(&tmp)?;
            serde_json::to_writer_pretty(&mut f, self)?;
            writeln!(f)?;
            f.sync_all()?;
        }
        fs::rename(&tmp, &target)?;
        Ok(target)
    }
}

//! Experiment configuration file and command-line overrides.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use driftica::decompose::DecomposeConfig;
use driftica::preprocess::PreprocessConfig;
use driftica::simgen::{DriftTrajectory, SimConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Simulate,
    Decompose,
    Evaluate,
    Ablate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub mode: Option<Mode>,
    pub input: Option<PathBuf>,
    pub output: Option<PathBuf>,
    /// Directory with `seed_<n>/truth.csv` for evaluation.
    pub truth: Option<PathBuf>,
    pub simulation: SimConfig,
    pub preprocess: PreprocessConfig,
    pub decompose: DecomposeConfig,
    /// Empty means: every `seed_<n>` directory found in the input, or a
    /// single run with the configured seed.
    pub seeds: Vec<u64>,
    pub tolerance_ms: f64,
    /// Row label used in evaluation reports.
    pub label: String,
    /// Seeds processed concurrently.
    pub jobs: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            mode: None,
            input: None,
            output: None,
            truth: None,
            simulation: SimConfig::default(),
            preprocess: PreprocessConfig::default(),
            decompose: DecomposeConfig::default(),
            seeds: Vec::new(),
            tolerance_ms: 5.0,
            label: "run".to_string(),
            jobs: 1,
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        Ok(driftica::io::read_json(path)?)
    }

    pub fn render(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }

    #[cfg(test)]
    pub fn parse(text: &str) -> Result<Self> {
        serde_json::from_str(text).context("parsing experiment config")
    }
}

/// Parses a drift description.
///
/// `none`, `sin:PERIOD:AMP` or a `+`-joined list such as
/// `sin:1:2+sin:0.25:2` for a superposition. Periods are fractions of the
/// record length, amplitudes are in channel pitches.
pub fn parse_drift(spec: &str) -> Result<DriftTrajectory> {
    let spec = spec.trim();
    if spec.eq_ignore_ascii_case("none") {
        return Ok(DriftTrajectory::none());
    }
    let mut periods = Vec::new();
    let mut amps = Vec::new();
    for part in spec.split('+') {
        let fields: Vec<&str> = part.trim().split(':').collect();
        match fields.as_slice() {
            ["sin", p, a] => {
                periods.push(p.parse::<f64>().with_context(|| format!("bad period in {part:?}"))?);
                amps.push(a.parse::<f64>().with_context(|| format!("bad amplitude in {part:?}"))?);
            }
            _ => bail!("drift component {part:?} is not of the form sin:PERIOD:AMP"),
        }
    }
    let traj = if periods.len() == 1 {
        DriftTrajectory::sinusoid(periods[0], amps[0], 0.0)
    } else {
        DriftTrajectory::sum_of_sinusoids(periods, amps, 0.0)
    };
    traj.validate()?;
    Ok(traj)
}

/// Parses `3`, `1,2,5` or the inclusive range `1..5`.
pub fn parse_seeds(spec: &str) -> Result<Vec<u64>> {
    let mut out = Vec::new();
    for part in spec.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        if let Some((a, b)) = part.split_once("..") {
            let a: u64 = a.trim().parse().with_context(|| format!("bad seed range {part:?}"))?;
            let b: u64 = b.trim().parse().with_context(|| format!("bad seed range {part:?}"))?;
            if b < a {
                bail!("empty seed range {part:?}");
            }
            out.extend(a..=b);
        } else {
            out.push(part.parse().with_context(|| format!("bad seed {part:?}"))?);
        }
    }
    if out.is_empty() {
        bail!("no seeds given");
    }
    Ok(out)
}

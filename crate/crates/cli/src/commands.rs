use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};

use driftica::decompose::{decompose, DecomposeConfig};
use driftica::evaluate::{pair_sources, EvaluationGroup, EvaluationReport, MatchOptions};
use driftica::io::{self, SignalSidecar};
use driftica::simgen::{simulate, SimConfig};

use crate::config::ExperimentConfig;

pub const SIGNAL_FILE: &str = "signal.bin";
pub const TRUTH_FILE: &str = "truth.csv";
pub const CONFIG_FILE: &str = "config.json";
pub const REPORT_TEXT: &str = "report.txt";
pub const REPORT_JSON: &str = "report.json";

pub fn seed_dir(base: &Path, seed: u64) -> PathBuf {
    base.join(format!("seed_{seed}"))
}

/// Seeds of the `seed_<n>` subdirectories of `dir`, ascending.
pub fn discover_seeds(dir: &Path) -> Vec<u64> {
    let Ok(entries) = fs::read_dir(dir) else {
        return Vec::new();
    };
    let mut seeds: Vec<u64> = entries
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .filter_map(|e| e.file_name().to_str()?.strip_prefix("seed_")?.parse().ok())
        .collect();
    seeds.sort_unstable();
    seeds
}

fn required<'a>(path: &'a Option<PathBuf>, what: &str) -> Result<&'a PathBuf> {
    path.as_ref()
        .ok_or_else(|| anyhow!("no {what} given (flag or config file)"))
}

fn write_config(dir: &Path, cfg: &ExperimentConfig) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let path = dir.join(CONFIG_FILE);
    fs::write(&path, cfg.render()).with_context(|| format!("writing {}", path.display()))
}

/// Runs `f` for each seed, `jobs` at a time, returning results in seed order.
fn for_each_seed<T: Send>(seeds: &[u64], jobs: usize, f: impl Fn(u64) -> Result<T> + Sync) -> Vec<Result<T>> {
    let mut out = Vec::with_capacity(seeds.len());
    for chunk in seeds.chunks(jobs.max(1)) {
        if chunk.len() == 1 {
            out.push(f(chunk[0]));
            continue;
        }
        let f = &f;
        std::thread::scope(|scope| {
            let handles: Vec<_> = chunk.iter().map(|&s| scope.spawn(move || f(s))).collect();
            for h in handles {
                out.push(h.join().unwrap_or_else(|_| Err(anyhow!("worker panicked"))));
            }
        });
    }
    out
}

fn collect<T>(results: Vec<Result<T>>) -> Result<Vec<T>> {
    results.into_iter().collect()
}

pub fn cmd_simulate(cfg: &ExperimentConfig) -> Result<()> {
    let out = required(&cfg.output, "output directory")?;
    let seeds = if cfg.seeds.is_empty() {
        vec![cfg.simulation.seed]
    } else {
        cfg.seeds.clone()
    };
    write_config(out, cfg)?;
    let lines = collect(for_each_seed(&seeds, cfg.jobs, |seed| {
        let sim_cfg = SimConfig {
            seed,
            ..cfg.simulation.clone()
        };
        let sim = simulate(&sim_cfg)?;
        let dir = seed_dir(out, seed);
        let sidecar = SignalSidecar {
            sources: Some(sim_cfg.sources),
            seed: Some(seed),
            drift: sim_cfg.drift.clone(),
            ..SignalSidecar::for_signal(&sim.mixture.signal)
        };
        io::write_signal(&dir.join(SIGNAL_FILE), &sim.mixture.signal, &sidecar)?;
        io::write_timestamps(&dir.join(TRUTH_FILE), sim.mixture.truth.iter().enumerate())?;
        let spikes: usize = sim.mixture.truth.iter().map(|t| t.count()).sum();
        Ok(format!(
            "seed {seed}: {} channels x {} samples, {} sources, {spikes} spikes -> {}",
            sidecar.channels,
            sidecar.samples,
            sim_cfg.sources,
            dir.display()
        ))
    }))?;
    lines.iter().for_each(|l| println!("{l}"));
    Ok(())
}

/// Signal file for `seed`: the input itself when it is a file, otherwise
/// `seed_<n>/signal.bin` or `signal.bin` inside the input directory.
fn signal_for_seed(input: &Path, seed: u64) -> PathBuf {
    if input.is_file() {
        return input.to_path_buf();
    }
    let per_seed = seed_dir(input, seed).join(SIGNAL_FILE);
    if per_seed.exists() {
        per_seed
    } else {
        input.join(SIGNAL_FILE)
    }
}

pub fn cmd_decompose(cfg: &ExperimentConfig, ablate: bool) -> Result<()> {
    let input = required(&cfg.input, "input signal")?;
    let out = required(&cfg.output, "output directory")?;
    let seeds = if !cfg.seeds.is_empty() {
        cfg.seeds.clone()
    } else {
        match discover_seeds(input) {
            s if s.is_empty() => vec![cfg.decompose.seed],
            s => s,
        }
    };
    let mut effective = cfg.clone();
    effective.decompose.ablate_compensation |= ablate;
    write_config(out, &effective)?;
    let lines = collect(for_each_seed(&seeds, cfg.jobs, |seed| {
        let path = signal_for_seed(input, seed);
        let (signal, _) = io::read_signal(&path)?;
        let dcfg = DecomposeConfig {
            seed,
            ..effective.decompose.clone()
        };
        let result = decompose(&signal, &effective.preprocess, &dcfg)?;
        let dir = seed_dir(out, seed);
        let diag = io::write_bundle(&dir, &result, &dcfg)?;
        Ok(format!(
            "seed {seed}: {} accepted, {} duplicates, {} attempts ({}) -> {}",
            diag.accepted,
            diag.duplicates,
            diag.attempts.len(),
            diag.stop_reason,
            dir.display()
        ))
    }))?;
    lines.iter().for_each(|l| println!("{l}"));
    Ok(())
}

fn truth_for_seed(truth: &Path, seed: u64) -> (PathBuf, PathBuf) {
    let per_seed = seed_dir(truth, seed);
    let dir = if per_seed.join(TRUTH_FILE).exists() {
        per_seed
    } else {
        truth.to_path_buf()
    };
    (dir.join(TRUTH_FILE), io::sidecar_path(&dir.join(SIGNAL_FILE)))
}

pub fn evaluate_dirs(cfg: &ExperimentConfig, results: &Path, truth: &Path) -> Result<EvaluationReport> {
    let single = results.join(io::DIAGNOSTICS_FILE).exists();
    let seeds: Vec<Option<u64>> = if single {
        vec![None]
    } else {
        let found = discover_seeds(results);
        let chosen: Vec<u64> = if cfg.seeds.is_empty() { found } else { cfg.seeds.clone() };
        if chosen.is_empty() {
            bail!("no result bundles under {}", results.display());
        }
        chosen.into_iter().map(Some).collect()
    };
    let mut evaluations = Vec::new();
    let mut options = None;
    for seed in seeds {
        let bundle_dir = seed.map_or_else(|| results.to_path_buf(), |s| seed_dir(results, s));
        let bundle = io::read_bundle(&bundle_dir)?;
        let seed = seed.unwrap_or(bundle.diagnostics.config.seed);
        let (truth_csv, sidecar_path) = truth_for_seed(truth, seed);
        let sidecar: SignalSidecar = io::read_json(&sidecar_path)?;
        let truth_trains = io::read_truth(&truth_csv, &sidecar)?;
        let opts = MatchOptions {
            tolerance_ms: cfg.tolerance_ms,
            max_lag_ms: bundle.diagnostics.config.max_lag_ms,
            fs_hz: sidecar.fs_hz,
        };
        options.get_or_insert(opts);
        if truth_trains.is_empty() {
            log::warn!("seed {seed}: ground truth has no sources; skipped");
            continue;
        }
        let found: Vec<(usize, &[usize])> = bundle
            .trains
            .iter()
            .map(|(id, t)| (*id, t.timestamps.as_slice()))
            .collect();
        let truth_refs: Vec<&[usize]> = truth_trains.iter().map(|t| t.timestamps.as_slice()).collect();
        evaluations.push(pair_sources(seed, &found, &truth_refs, opts));
    }
    let options = options.unwrap_or(MatchOptions {
        tolerance_ms: cfg.tolerance_ms,
        max_lag_ms: cfg.decompose.max_lag_ms,
        fs_hz: cfg.simulation.fs_hz,
    });
    let groups: Vec<EvaluationGroup> = if evaluations.is_empty() {
        Vec::new()
    } else {
        vec![EvaluationGroup {
            label: cfg.label.clone(),
            seeds: evaluations,
        }]
    };
    Ok(EvaluationReport::new(options, groups))
}

pub fn cmd_evaluate(cfg: &ExperimentConfig) -> Result<()> {
    let results = required(&cfg.input, "results directory")?;
    let truth = required(&cfg.truth, "ground-truth directory")?;
    let report = evaluate_dirs(cfg, results, truth)?;
    if report.rows.is_empty() {
        log::warn!("report has no rows");
    }
    let text = report.render_table();
    print!("{text}");
    let out = cfg.output.as_ref().unwrap_or(results);
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    fs::write(out.join(REPORT_TEXT), &text).with_context(|| format!("writing report to {}", out.display()))?;
    let mut json = serde_json::to_string_pretty(&report)?;
    json.push('\n');
    fs::write(out.join(REPORT_JSON), json).with_context(|| format!("writing report to {}", out.display()))?;
    Ok(())
}

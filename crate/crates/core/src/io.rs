//! On-disk formats: raw signals, spike timestamp tables and result bundles.
//!
//! Signals are little-endian `f32`, channel-major (all samples of channel 0,
//! then channel 1, ...), next to a JSON sidecar with the shape and sampling
//! rate. Timestamps are CSV with the header `source_id,sample_index`.
//! Everything is written in a fixed order so identical inputs give identical
//! bytes.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::decompose::{AttemptRecord, DecomposeConfig, Decomposition, TrainingDiagnostics};
use crate::error::{Error, Result};
use crate::simgen::{DriftTrajectory, MultichannelSignal, SpikeTrain};

pub const SIGNAL_FORMAT: &str = "f32le-channel-major";
pub const TIMESTAMP_HEADER: [&str; 2] = ["source_id", "sample_index"];

pub const SOURCES_FILE: &str = "sources.csv";
pub const DUPLICATES_FILE: &str = "duplicates.csv";
pub const DIAGNOSTICS_FILE: &str = "diagnostics.json";
pub const EPOCHS_FILE: &str = "epochs.csv";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignalSidecar {
    pub format: String,
    pub fs_hz: f64,
    pub channels: usize,
    pub samples: usize,
    /// Number of generating sources, when known.
    pub sources: Option<usize>,
    pub seed: Option<u64>,
    pub drift: DriftTrajectory,
}

impl SignalSidecar {
    pub fn for_signal(signal: &MultichannelSignal) -> Self {
        Self {
            format: SIGNAL_FORMAT.to_string(),
            fs_hz: signal.fs_hz,
            channels: signal.channels(),
            samples: signal.len(),
            sources: None,
            seed: None,
            drift: DriftTrajectory::none(),
        }
    }
}

/// Sidecar path for a signal file: same stem, `.json` extension.
pub fn sidecar_path(bin: &Path) -> PathBuf {
    bin.with_extension("json")
}

fn create_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => fs::create_dir_all(dir).map_err(|e| Error::io(dir, e)),
        _ => Ok(()),
    }
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    create_parent(path)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn parse_error(path: &Path, offset: u64, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        offset,
        message: message.into(),
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(|e| Error::Internal(e.to_string()))?;
    bytes.push(b'\n');
    write_bytes(path, &bytes)
}

/// Reads JSON, reporting syntax errors at their byte offset.
pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let bytes = read_bytes(path)?;
    serde_json::from_slice(&bytes).map_err(|e| {
        let offset = byte_offset(&bytes, e.line(), e.column());
        parse_error(path, offset, e.to_string())
    })
}

// serde_json reports 1-based line and column; convert to a byte offset.
fn byte_offset(bytes: &[u8], line: usize, column: usize) -> u64 {
    let mut start = 0;
    for _ in 1..line {
        match bytes[start..].iter().position(|&b| b == b'\n') {
            Some(p) => start += p + 1,
            None => break,
        }
    }
    (start + column.saturating_sub(1)).min(bytes.len()) as u64
}

/// Writes `signal` to `path` and its sidecar next to it.
pub fn write_signal(path: &Path, signal: &MultichannelSignal, sidecar: &SignalSidecar) -> Result<()> {
    if sidecar.channels != signal.channels() || sidecar.samples != signal.len() {
        return Err(Error::param("sidecar shape does not match the signal"));
    }
    let mut bytes = Vec::with_capacity(signal.samples.len() * 4);
    for row in signal.samples.rows() {
        for &v in row {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    write_bytes(path, &bytes)?;
    write_json(&sidecar_path(path), sidecar)
}

pub fn read_signal(path: &Path) -> Result<(MultichannelSignal, SignalSidecar)> {
    let side_path = sidecar_path(path);
    let sidecar: SignalSidecar = read_json(&side_path)?;
    if sidecar.format != SIGNAL_FORMAT {
        return Err(parse_error(
            &side_path,
            0,
            format!("unsupported signal format {:?}", sidecar.format),
        ));
    }
    let bytes = read_bytes(path)?;
    let expected = sidecar.channels * sidecar.samples * 4;
    if bytes.len() != expected {
        let offset = bytes.len().min(expected) as u64;
        return Err(parse_error(
            path,
            offset,
            format!(
                "expected {expected} bytes for {} x {} f32 samples, found {}",
                sidecar.channels,
                sidecar.samples,
                bytes.len()
            ),
        ));
    }
    let mut samples = Array2::zeros((sidecar.channels, sidecar.samples));
    for (i, (slot, chunk)) in samples.iter_mut().zip(bytes.chunks_exact(4)).enumerate() {
        let v = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
        if !v.is_finite() {
            return Err(parse_error(path, (i * 4) as u64, "non-finite sample"));
        }
        *slot = v as f64;
    }
    let signal = MultichannelSignal::new(samples, sidecar.fs_hz)?;
    Ok((signal, sidecar))
}

/// Writes `(source_id, train)` pairs as a timestamp table.
pub fn write_timestamps<'a, I>(path: &Path, trains: I) -> Result<()>
where
    I: IntoIterator<Item = (usize, &'a SpikeTrain)>,
{
    create_parent(path)?;
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(BufWriter::new(file));
    let csv_err = |e: csv::Error| Error::Internal(format!("{}: {e}", path.display()));
    w.write_record(TIMESTAMP_HEADER).map_err(csv_err)?;
    for (id, train) in trains {
        for &t in &train.timestamps {
            w.write_record([id.to_string(), t.to_string()]).map_err(csv_err)?;
        }
    }
    let inner = w.into_inner().map_err(|e| Error::Internal(e.to_string()))?;
    inner
        .into_inner()
        .map_err(|e| Error::io(path, e.into_error()))?
        .flush()
        .map_err(|e| Error::io(path, e))
}

/// Reads a timestamp table into per-source sorted sample indices.
pub fn read_timestamps(path: &Path) -> Result<BTreeMap<usize, Vec<usize>>> {
    let bytes = read_bytes(path)?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .from_reader(bytes.as_slice());
    let mut records = reader.records();
    match records.next() {
        Some(Ok(header)) if header.iter().map(str::trim).eq(TIMESTAMP_HEADER) => {}
        Some(Ok(header)) => {
            let offset = header.position().map_or(0, |p| p.byte());
            return Err(parse_error(
                path,
                offset,
                format!("expected header `{}`", TIMESTAMP_HEADER.join(",")),
            ));
        }
        Some(Err(e)) => return Err(csv_parse_error(path, &e)),
        None => return Err(parse_error(path, 0, "empty timestamp file")),
    }
    let mut out: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for record in records {
        let record = record.map_err(|e| csv_parse_error(path, &e))?;
        let offset = record.position().map_or(0, |p| p.byte());
        if record.len() != 2 {
            return Err(parse_error(
                path,
                offset,
                format!("expected 2 fields, found {}", record.len()),
            ));
        }
        let field = |k: usize| -> Result<usize> {
            record[k].trim().parse().map_err(|_| {
                parse_error(
                    path,
                    offset,
                    format!(
                        "{} is not a non-negative integer: {:?}",
                        TIMESTAMP_HEADER[k], &record[k]
                    ),
                )
            })
        };
        out.entry(field(0)?).or_default().push(field(1)?);
    }
    for v in out.values_mut() {
        v.sort_unstable();
        v.dedup();
    }
    Ok(out)
}

fn csv_parse_error(path: &Path, e: &csv::Error) -> Error {
    let offset = e.position().map_or(0, |p| p.byte());
    parse_error(path, offset, e.to_string())
}

/// Little-endian `f64` vector with a `u64` length prefix.
pub fn vector_to_bytes(v: &[f64]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + v.len() * 8);
    out.extend_from_slice(&(v.len() as u64).to_le_bytes());
    for x in v {
        out.extend_from_slice(&x.to_le_bytes());
    }
    out
}

pub fn read_vector(path: &Path) -> Result<Vec<f64>> {
    let bytes = read_bytes(path)?;
    if bytes.len() < 8 {
        return Err(parse_error(path, bytes.len() as u64, "missing length prefix"));
    }
    let n = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes")) as usize;
    if bytes.len() != 8 + n * 8 {
        return Err(parse_error(
            path,
            bytes.len().min(8 + n * 8) as u64,
            format!("expected {n} values"),
        ));
    }
    Ok(bytes[8..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceEntry {
    pub id: usize,
    pub attempt: usize,
    pub accepted: bool,
    pub duplicate_of: Option<usize>,
    pub silhouette: f64,
    pub spikes: usize,
    pub separation_file: String,
    pub network_file: Option<String>,
    pub training: TrainingDiagnostics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleDiagnostics {
    pub fs_hz: f64,
    pub len: usize,
    pub stop_reason: String,
    pub accepted: usize,
    pub duplicates: usize,
    pub config: DecomposeConfig,
    pub sources: Vec<SourceEntry>,
    pub attempts: Vec<AttemptRecord>,
}

/// Writes a results bundle into `dir`.
///
/// Layout: `sources.csv` (accepted), `duplicates.csv`, `diagnostics.json`,
/// `epochs.csv` and per source `source_<id>.vec` plus `source_<id>.net`
/// when a network was trained.
pub fn write_bundle(dir: &Path, result: &Decomposition, config: &DecomposeConfig) -> Result<BundleDiagnostics> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_timestamps(
        &dir.join(SOURCES_FILE),
        result
            .sources
            .iter()
            .filter(|s| s.accepted)
            .map(|s| (s.id, &s.spike_train)),
    )?;
    write_timestamps(
        &dir.join(DUPLICATES_FILE),
        result
            .sources
            .iter()
            .filter(|s| !s.accepted)
            .map(|s| (s.id, &s.spike_train)),
    )?;
    let mut entries = Vec::with_capacity(result.sources.len());
    for s in &result.sources {
        let separation_file = format!("source_{}.vec", s.id);
        write_bytes(
            &dir.join(&separation_file),
            &vector_to_bytes(s.separation.as_slice().expect("contiguous")),
        )?;
        let network_file = match &s.network {
            Some(net) => {
                let name = format!("source_{}.net", s.id);
                write_bytes(&dir.join(&name), &net.to_blob())?;
                Some(name)
            }
            None => None,
        };
        entries.push(SourceEntry {
            id: s.id,
            attempt: s.attempt,
            accepted: s.accepted,
            duplicate_of: s.duplicate_of,
            silhouette: s.silhouette,
            spikes: s.spike_train.count(),
            separation_file,
            network_file,
            training: s.diagnostics.clone(),
        });
    }
    let diagnostics = BundleDiagnostics {
        fs_hz: result.fs_hz,
        len: result.len,
        stop_reason: result.stop_reason.clone(),
        accepted: result.sources.iter().filter(|s| s.accepted).count(),
        duplicates: result.sources.iter().filter(|s| !s.accepted).count(),
        config: config.clone(),
        sources: entries,
        attempts: result.attempts.clone(),
    };
    write_json(&dir.join(DIAGNOSTICS_FILE), &diagnostics)?;
    write_epochs(&dir.join(EPOCHS_FILE), &diagnostics.sources)?;
    Ok(diagnostics)
}

// Plot-ready training curves, one row per source and epoch.
fn write_epochs(path: &Path, sources: &[SourceEntry]) -> Result<()> {
    let mut text = String::from("source_id,epoch,contrast_loss,nonstationarity_loss,isi_mad,gmm_failed\n");
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for s in sources {
        for (k, e) in s.training.epochs.iter().enumerate() {
            text.push_str(&format!(
                "{},{},{},{},{},{}\n",
                s.id,
                k,
                e.contrast_loss,
                opt(e.nonstationarity_loss),
                opt(e.isi_mad),
                e.gmm_failed
            ));
        }
    }
    write_bytes(path, text.as_bytes())
}

/// Accepted spike trains of a bundle, ordered by source id.
#[derive(Debug, Clone)]
pub struct LoadedBundle {
    pub diagnostics: BundleDiagnostics,
    pub trains: Vec<(usize, SpikeTrain)>,
}

pub fn read_bundle(dir: &Path) -> Result<LoadedBundle> {
    let diagnostics: BundleDiagnostics = read_json(&dir.join(DIAGNOSTICS_FILE))?;
    let table = read_timestamps(&dir.join(SOURCES_FILE))?;
    let mut trains = Vec::new();
    for s in diagnostics.sources.iter().filter(|s| s.accepted) {
        let ts = table.get(&s.id).cloned().unwrap_or_default();
        trains.push((s.id, SpikeTrain::new(ts, diagnostics.len, diagnostics.fs_hz)?));
    }
    Ok(LoadedBundle { diagnostics, trains })
}

/// Ground-truth trains stored next to a signal: ids `0..sources` from the
/// sidecar, missing ids meaning a silent source.
pub fn read_truth(path: &Path, sidecar: &SignalSidecar) -> Result<Vec<SpikeTrain>> {
    let table = read_timestamps(path)?;
    let count = sidecar
        .sources
        .unwrap_or(0)
        .max(table.keys().next_back().map_or(0, |k| k + 1));
    (0..count)
        .map(|j| {
            SpikeTrain::new(
                table.get(&j).cloned().unwrap_or_default(),
                sidecar.samples,
                sidecar.fs_hz,
            )
        })
        .collect()
}

//! Scoring decompositions against ground truth.
//!
//! Found sources are paired one-to-one with true sources, best agreement
//! first. Agreement is measured after searching a small constant lag, since
//! a separated source peaks at a fixed delay after the true firing time.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::decompose::aligned_agreement;

/// Agreement above which a unit counts as well identified.
pub const GOOD_UNIT_PERCENT: f64 = 80.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchOptions {
    pub tolerance_ms: f64,
    pub max_lag_ms: f64,
    pub fs_hz: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedSource {
    pub found_id: usize,
    pub truth_id: usize,
    pub agreement: f64,
    pub lag: i64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedEvaluation {
    pub seed: u64,
    pub paired: Vec<PairedSource>,
    pub unpaired_found: Vec<usize>,
    pub unpaired_truth: Vec<usize>,
}

impl SeedEvaluation {
    pub fn units_above(&self) -> usize {
        self.paired.iter().filter(|p| p.agreement > GOOD_UNIT_PERCENT).count()
    }

    pub fn units_below(&self) -> usize {
        self.paired.len() - self.units_above()
    }

    pub fn mean_agreement(&self) -> Option<f64> {
        mean(&self.paired.iter().map(|p| p.agreement).collect::<Vec<_>>())
    }
}

/// Greedy one-to-one pairing, highest agreement first.
///
/// Only pairs with positive agreement are formed; ties break on the lower
/// found id, then the lower truth id.
pub fn pair_sources(seed: u64, found: &[(usize, &[usize])], truth: &[&[usize]], opts: MatchOptions) -> SeedEvaluation {
    let mut candidates = Vec::new();
    for (fi, (_, f)) in found.iter().enumerate() {
        for (tj, t) in truth.iter().enumerate() {
            let (a, lag) = aligned_agreement(f, t, opts.tolerance_ms, opts.max_lag_ms, opts.fs_hz);
            if a > 0.0 {
                candidates.push((a, fi, tj, lag));
            }
        }
    }
    candidates.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)).then(x.2.cmp(&y.2)));
    let mut found_used = vec![false; found.len()];
    let mut truth_used = vec![false; truth.len()];
    let mut paired = Vec::new();
    for (a, fi, tj, lag) in candidates {
        if found_used[fi] || truth_used[tj] {
            continue;
        }
        found_used[fi] = true;
        truth_used[tj] = true;
        paired.push(PairedSource {
            found_id: found[fi].0,
            truth_id: tj,
            agreement: a,
            lag,
        });
    }
    paired.sort_by_key(|p| p.truth_id);
    SeedEvaluation {
        seed,
        paired,
        unpaired_found: found
            .iter()
            .zip(&found_used)
            .filter(|(_, &u)| !u)
            .map(|((id, _), _)| *id)
            .collect(),
        unpaired_truth: (0..truth.len()).filter(|&j| !truth_used[j]).collect(),
    }
}

/// Mean and sample standard deviation; zero spread for a single value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

impl Stat {
    pub fn of(values: &[f64]) -> Option<Self> {
        let m = mean(values)?;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (values.len() - 1) as f64).sqrt()
        } else {
            0.0
        };
        Some(Self { mean: m, std })
    }
}

fn mean(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        None
    } else {
        Some(values.iter().sum::<f64>() / values.len() as f64)
    }
}

/// One table row: accuracy pooled over every paired source, unit counts
/// averaged over seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub label: String,
    pub seeds: usize,
    pub paired: usize,
    pub accuracy: Option<Stat>,
    pub units_above: Stat,
    pub units_below: Stat,
}

pub fn summarize(label: &str, seeds: &[SeedEvaluation]) -> Option<SummaryRow> {
    if seeds.is_empty() {
        return None;
    }
    let accuracies: Vec<f64> = seeds
        .iter()
        .flat_map(|s| s.paired.iter().map(|p| p.agreement))
        .collect();
    let above: Vec<f64> = seeds.iter().map(|s| s.units_above() as f64).collect();
    let below: Vec<f64> = seeds.iter().map(|s| s.units_below() as f64).collect();
    Some(SummaryRow {
        label: label.to_string(),
        seeds: seeds.len(),
        paired: accuracies.len(),
        accuracy: Stat::of(&accuracies),
        units_above: Stat::of(&above)?,
        units_below: Stat::of(&below)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationGroup {
    pub label: String,
    pub seeds: Vec<SeedEvaluation>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub options: MatchOptions,
    pub groups: Vec<EvaluationGroup>,
    pub rows: Vec<SummaryRow>,
}

impl EvaluationReport {
    pub fn new(options: MatchOptions, groups: Vec<EvaluationGroup>) -> Self {
        let rows = groups.iter().filter_map(|g| summarize(&g.label, &g.seeds)).collect();
        Self { options, groups, rows }
    }

    /// Aligned text table followed by per-seed pairings.
    pub fn render_table(&self) -> String {
        let header = [
            "setting",
            "accuracy % (mean ± std)",
            "units > 80% (mean ± std)",
            "units < 80% (mean ± std)",
        ];
        let pm = |s: &Stat| format!("{:.2} ± {:.2}", s.mean, s.std);
        let body: Vec<[String; 4]> = self
            .rows
            .iter()
            .map(|r| {
                [
                    r.label.clone(),
                    r.accuracy.as_ref().map_or_else(|| "n/a".to_string(), pm),
                    pm(&r.units_above),
                    pm(&r.units_below),
                ]
            })
            .collect();
        let mut widths = header.map(|h| h.chars().count());
        for row in &body {
            for (w, cell) in widths.iter_mut().zip(row) {
                *w = (*w).max(cell.chars().count());
            }
        }
        let line = |cells: [&str; 4]| {
            let mut s = String::new();
            for (k, (cell, w)) in cells.iter().zip(widths).enumerate() {
                if k > 0 {
                    s.push_str(" | ");
                }
                let pad = w - cell.chars().count();
                if k == 0 {
                    s.push_str(cell);
                    s.push_str(&" ".repeat(pad));
                } else {
                    s.push_str(&" ".repeat(pad));
                    s.push_str(cell);
                }
            }
            s.trim_end().to_string()
        };
        let mut out = String::new();
        out.push_str(&line(header));
        out.push('\n');
        let total: usize = widths.iter().sum::<usize>() + 3 * (widths.len() - 1);
        out.push_str(&"-".repeat(total));
        out.push('\n');
        for row in &body {
            out.push_str(&line([&row[0], &row[1], &row[2], &row[3]]));
            out.push('\n');
        }
        for g in &self.groups {
            for s in &g.seeds {
                let _ = write!(out, "\n[{}] seed {}:", g.label, s.seed);
                if s.paired.is_empty() {
                    out.push_str(" no pairs");
                }
                for p in &s.paired {
                    let _ = write!(
                        out,
                        " {}->{} {:.2}% (lag {})",
                        p.found_id, p.truth_id, p.agreement, p.lag
                    );
                }
                if !s.unpaired_found.is_empty() {
                    let _ = write!(out, "; unpaired found {:?}", s.unpaired_found);
                }
            }
        }
        if !self.groups.is_empty() {
            out.push('\n');
        }
        out
    }
}

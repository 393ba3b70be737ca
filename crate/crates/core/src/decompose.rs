//! Source-by-source decomposition with alternating updates.
//!
//! Each attempt seeds a separation vector from a high-energy column, runs
//! contrast-only pretraining, then alternates one contrast step on the vector
//! (network frozen) with one compensation step on the network (vector
//! frozen). Sources that pass the silhouette gate are peeled off the raw
//! signal before the next attempt.

use std::collections::BTreeSet;

use ndarray::{s, Array1, Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::compnet::{self, CompNetConfig, CompensationNetwork, Mode, PositionalEncoding};
use crate::contrast::{self, RmsProp, SeparationVector};
use crate::error::{Error, Result};
use crate::exec::{self, Execution, BLOCK_COLUMNS};
use crate::gmm::{self, GmmFit, SeedingOptions, SilhouetteReduction};
use crate::modulation::{self, ModulationGrid};
use crate::preprocess::{self, ExtendedWhitenedSignal, PreprocessConfig};
use crate::simgen::{derive_seed, MultichannelSignal, SpikeTrain};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecomposeConfig {
    pub max_attempts: usize,
    /// Stop after this many rejected or duplicate attempts in a row (0 disables).
    pub max_consecutive_failures: usize,
    pub pretrain_steps: usize,
    pub min_alternating_epochs: usize,
    pub max_alternating_epochs: usize,
    /// Epochs without a new minimum of the ISI statistic before stopping.
    pub patience: usize,
    pub lr_independence: f64,
    pub lr_compensation: f64,
    /// Drop the radial part of the contrast gradient before the optimizer step.
    pub tangent_projection: bool,
    pub lambda: f64,
    /// Divide the mixture loss by the spread of the fitted values.
    pub scale_invariant_loss: bool,
    pub final_exponent: u32,
    pub clamp_top_k: Option<usize>,
    pub silhouette_threshold: f64,
    pub silhouette_reduction: SilhouetteReduction,
    /// Agreement (%) with an accepted source at which a new source is a duplicate.
    pub duplicate_accuracy_threshold: f64,
    pub duplicate_tolerance_ms: f64,
    /// Largest constant lag searched when comparing spike trains.
    pub max_lag_ms: f64,
    pub peak_window_ms: f64,
    pub seeding: SeedingOptions,
    pub em_steps: usize,
    pub network: CompNetConfig,
    pub period_fracs: Vec<f64>,
    /// Samples between evaluation-mode network outputs; 1 evaluates every sample.
    pub network_stride: usize,
    /// Fraction of highest-norm columns eligible as initial vectors.
    pub init_top_fraction: f64,
    pub locality_k: usize,
    /// Samples before / after a spike covered by the peel-off template;
    /// default `2*k_ext` / `k_ext`.
    pub peel_before: Option<usize>,
    pub peel_after: Option<usize>,
    pub peel_off: bool,
    /// Freeze the network at identity and skip compensation updates.
    pub ablate_compensation: bool,
    pub seed: u64,
    pub execution: Execution,
}

impl Default for DecomposeConfig {
    fn default() -> Self {
        Self {
            max_attempts: 100,
            max_consecutive_failures: 10,
            pretrain_steps: 100,
            min_alternating_epochs: 10,
            max_alternating_epochs: 100,
            patience: 5,
            lr_independence: 2e-3,
            lr_compensation: 1e-4,
            tangent_projection: true,
            lambda: 1.0,
            scale_invariant_loss: true,
            final_exponent: contrast::MAX_EXPONENT,
            clamp_top_k: Some(30),
            silhouette_threshold: 0.9,
            silhouette_reduction: SilhouetteReduction::default(),
            duplicate_accuracy_threshold: 30.0,
            duplicate_tolerance_ms: 5.0,
            max_lag_ms: 25.0,
            peak_window_ms: 10.0,
            seeding: SeedingOptions::default(),
            em_steps: 5,
            network: CompNetConfig::default(),
            period_fracs: compnet::DEFAULT_PERIOD_FRACS.to_vec(),
            network_stride: 16,
            init_top_fraction: 0.01,
            locality_k: 20,
            peel_before: None,
            peel_after: None,
            peel_off: true,
            ablate_compensation: false,
            seed: 0,
            execution: Execution::Parallel,
        }
    }
}

impl DecomposeConfig {
    pub fn validate(&self) -> Result<()> {
        let pct = |v: f64| v > 0.0 && v <= 100.0;
        if !(self.silhouette_threshold > -1.0 && self.silhouette_threshold <= 1.0) {
            return Err(Error::param("silhouette threshold must lie in (-1, 1]"));
        }
        if !pct(self.duplicate_accuracy_threshold) {
            return Err(Error::param("duplicate threshold must lie in (0, 100]"));
        }
        if !(self.duplicate_tolerance_ms > 0.0) || !(self.peak_window_ms > 0.0) || !(self.max_lag_ms >= 0.0) {
            return Err(Error::param("tolerances and windows must be positive"));
        }
        if !(self.init_top_fraction > 0.0 && self.init_top_fraction <= 1.0) {
            return Err(Error::param("initialisation fraction must lie in (0, 1]"));
        }
        if self.final_exponent < 2 {
            return Err(Error::param("contrast exponent must be at least 2"));
        }
        if self.network_stride == 0 {
            return Err(Error::param("network stride must be positive"));
        }
        if self.locality_k == 0 {
            return Err(Error::param("local STA needs at least one spike"));
        }
        if !(self.lambda >= 0.0) || !(self.lr_independence > 0.0) || !(self.lr_compensation >= 0.0) {
            return Err(Error::param("learning rates and lambda must be non-negative"));
        }
        Ok(())
    }

    /// Whether compensation updates run at all.
    pub fn compensates(&self) -> bool {
        !self.ablate_compensation && self.lambda > 0.0
    }

    /// Peak half-width in samples.
    pub fn peak_window(&self, fs_hz: f64) -> usize {
        ((self.peak_window_ms * fs_hz / 1000.0).round() as usize).max(1)
    }
}

/// Separation vector, compensation network and their optimizer states.
#[derive(Debug, Clone)]
pub struct SeparationState {
    pub w: SeparationVector,
    pub w_opt: RmsProp,
    /// `None` when compensation is ablated; the modulation is then identity.
    pub net: Option<CompensationNetwork>,
    pub net_opt: RmsProp,
}

impl SeparationState {
    pub fn new(w: SeparationVector, enc_dim: usize, cfg: &DecomposeConfig, seed: u64) -> Result<Self> {
        let dim = w.dim();
        let net = if cfg.ablate_compensation {
            None
        } else {
            Some(CompensationNetwork::new(enc_dim, dim, cfg.network.clone(), seed)?)
        };
        let net_len = net.as_ref().map_or(0, |n| n.param_count());
        Ok(Self {
            w_opt: RmsProp::new(dim, cfg.lr_independence),
            net_opt: RmsProp::new(net_len, cfg.lr_compensation),
            w,
            net,
        })
    }
}

/// Evaluation-mode modulation for the whole record; `None` when ablated.
pub fn modulation_grid(state: &SeparationState, len: usize, cfg: &DecomposeConfig) -> Result<Option<ModulationGrid>> {
    state
        .net
        .as_ref()
        .map(|net| ModulationGrid::evaluate(net, &cfg.period_fracs, len, cfg.network_stride, cfg.execution))
        .transpose()
}

/// Current source estimate over the whole record.
pub fn source_trace(state: &SeparationState, x: ArrayView2<f64>, cfg: &DecomposeConfig) -> Result<Array1<f64>> {
    let grid = modulation_grid(state, x.ncols(), cfg)?;
    modulation::modulated_trace(state.w.view(), x, grid.as_ref(), cfg.execution)
}

fn step_vector(state: &mut SeparationState, grad: &Array1<f64>, tangent: bool) -> Result<()> {
    let grad = if tangent {
        contrast::tangent_projection(state.w.view(), grad.view())
    } else {
        grad.clone()
    };
    let opt = &mut state.w_opt;
    let g = grad.as_slice().expect("contiguous");
    state
        .w
        .update_with(|p| opt.step(p, g).expect("optimizer sized to vector"))
}

/// Chooses an initial vector among the highest-norm columns, skipping
/// columns near earlier picks. The pick is recorded in `used`.
pub fn init_vector<R: Rng + ?Sized>(
    x: ArrayView2<f64>,
    top_fraction: f64,
    skip_leading: usize,
    exclusion: usize,
    used: &mut BTreeSet<usize>,
    rng: &mut R,
    exec: Execution,
) -> Result<(SeparationVector, usize)> {
    let len = x.ncols();
    let norms: Vec<f64> = exec::map_blocks(len, BLOCK_COLUMNS, exec, |r| {
        let mut acc = Array1::<f64>::zeros(r.len());
        for row in x.outer_iter() {
            let rs = row.slice(s![r.clone()]);
            ndarray::Zip::from(&mut acc).and(&rs).for_each(|a, &v| *a += v * v);
        }
        acc.to_vec()
    })
    .into_iter()
    .flatten()
    .collect();
    let mut order: Vec<usize> = (skip_leading.min(len)..len).collect();
    order.sort_by(|&a, &b| norms[b].total_cmp(&norms[a]).then(a.cmp(&b)));
    let keep = ((order.len() as f64 * top_fraction).ceil() as usize).clamp(1, order.len().max(1));
    let near_used = |t: usize| used.range(t.saturating_sub(exclusion)..=t + exclusion).next().is_some();
    let candidates: Vec<usize> = order
        .into_iter()
        .take(keep)
        .filter(|&t| norms[t] > 0.0 && !near_used(t))
        .collect();
    if candidates.is_empty() {
        return Err(Error::Budget("no unused high-energy columns remain".into()));
    }
    let pick = candidates[rng.random_range(0..candidates.len())];
    used.insert(pick);
    let w = SeparationVector::new(x.column(pick).to_owned())?;
    Ok((w, pick))
}

/// Contrast-only updates with the exponent ramp; returns the loss per step.
pub fn pretrain(state: &mut SeparationState, x: ArrayView2<f64>, cfg: &DecomposeConfig) -> Result<Vec<f64>> {
    let steps = cfg.pretrain_steps;
    let mut losses = Vec::with_capacity(steps);
    for step in 0..steps {
        let e = contrast::exponent_schedule(step, steps).min(cfg.final_exponent);
        let pass = modulation::contrast_pass(state.w.view(), x, None, e, cfg.clamp_top_k, cfg.execution)?;
        let (grad, loss) = (pass.grad, pass.loss);
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite contrast at pretraining step {step}"
            )));
        }
        step_vector(state, &grad, cfg.tangent_projection)?;
        losses.push(loss);
    }
    Ok(losses)
}

/// What one alternating epoch measured.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub contrast_loss: f64,
    /// Mixture-based loss from the fit used in the compensation step.
    pub nonstationarity_loss: Option<f64>,
    /// Median absolute deviation of inter-spike intervals (samples).
    pub isi_mad: Option<f64>,
    pub gmm_failed: bool,
}

/// One independence update followed by one compensation update.
pub fn alternate_epoch(
    state: &mut SeparationState,
    x: ArrayView2<f64>,
    enc: &PositionalEncoding,
    cfg: &DecomposeConfig,
    peak_window: usize,
    rng: &mut ChaCha8Rng,
) -> Result<EpochRecord> {
    let exec = cfg.execution;
    let grid = modulation_grid(state, x.ncols(), cfg)?;
    let pass = modulation::contrast_pass(
        state.w.view(),
        x,
        grid.as_ref(),
        cfg.final_exponent,
        cfg.clamp_top_k,
        exec,
    )?;
    let (grad, contrast_loss) = (pass.grad, pass.loss);
    if !contrast_loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::Numeric("non-finite contrast during alternation".into()));
    }
    step_vector(state, &grad, cfg.tangent_projection)?;

    let trace = modulation::modulated_trace(state.w.view(), x, grid.as_ref(), exec)?;
    let trace = trace.as_slice().expect("contiguous");
    let fit = match gmm::fit_trace(trace, peak_window, &cfg.seeding, cfg.em_steps, rng) {
        Ok(fit) => fit,
        Err(Error::Quality(_)) => {
            return Ok(EpochRecord {
                contrast_loss,
                nonstationarity_loss: None,
                isi_mad: None,
                gmm_failed: true,
            })
        }
        Err(e) => return Err(e),
    };
    let isi_mad = gmm::to_spikes(trace, &fit, peak_window, 1.0)
        .ok()
        .and_then(|st| isi_mad(&st));
    let nonstationarity_loss = Some(if cfg.scale_invariant_loss {
        gmm::scaled_nonstationarity_loss(&fit.fitted_values(trace), &fit, cfg.lambda)
    } else {
        gmm::nonstationarity_loss(&fit, cfg.lambda)
    });
    if cfg.compensates() {
        compensation_step(state, x, enc, &fit, cfg, rng)?;
    }
    Ok(EpochRecord {
        contrast_loss,
        nonstationarity_loss,
        isi_mad,
        gmm_failed: false,
    })
}

/// Columns of `x` at sorted `indices`, read row by row.
fn gather_columns(x: ArrayView2<f64>, indices: &[usize]) -> Array2<f64> {
    let mut out = Array2::<f64>::zeros((x.nrows(), indices.len()));
    for (src, mut dst) in x.outer_iter().zip(out.outer_iter_mut()) {
        for (o, &i) in dst.iter_mut().zip(indices) {
            *o = src[i];
        }
    }
    out
}

/// Network update on the fitted samples; the separation vector is untouched.
pub fn compensation_step(
    state: &mut SeparationState,
    x: ArrayView2<f64>,
    enc: &PositionalEncoding,
    fit: &GmmFit,
    cfg: &DecomposeConfig,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let Some(net) = state.net.as_mut() else {
        return Ok(0.0);
    };
    let xs = gather_columns(x, &fit.indices);
    let es = enc.gather(&fit.indices);
    let (out, cache) = net.forward(es.view(), Mode::Train, Some(rng))?;
    let (values, gain, _) = compnet::modulated_block(state.w.view(), out.view(), xs.view());
    let values = values.to_vec();
    let (loss, ds) = if cfg.scale_invariant_loss {
        (
            gmm::scaled_nonstationarity_loss(&values, fit, cfg.lambda),
            gmm::scaled_nonstationarity_gradient(&values, fit, cfg.lambda)?,
        )
    } else {
        (
            gmm::nonstationarity_loss_frozen(&values, fit, cfg.lambda),
            gmm::nonstationarity_gradient(&values, fit, cfg.lambda)?,
        )
    };
    let g_out = compnet::output_gradient(state.w.view(), gain.view(), xs.view(), Array1::from(ds).view());
    let grads = net.backward(&cache, g_out.view())?;
    if grads.iter().any(|g| !g.is_finite()) {
        return Err(Error::Numeric("non-finite compensation gradient".into()));
    }
    state.net_opt.step(&mut net.params, &grads)?;
    net.update_running_stats(&cache);
    Ok(loss)
}

/// Median absolute deviation of the inter-spike intervals.
pub fn isi_mad(train: &SpikeTrain) -> Option<f64> {
    let isi: Vec<f64> = train.intervals().into_iter().map(|v| v as f64).collect();
    if isi.len() < 2 {
        return None;
    }
    let med = median(isi.clone());
    Some(median(isi.into_iter().map(|v| (v - med).abs()).collect()))
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_unstable_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Stopping rule: no new minimum of the statistic within `patience` epochs,
/// or `max_epochs` reached. Undefined values never count as a decrease.
pub fn converged(history: &[Option<f64>], patience: usize, max_epochs: usize) -> bool {
    if history.len() >= max_epochs {
        return true;
    }
    if history.len() < 2 {
        return false;
    }
    let mut best = f64::INFINITY;
    let mut since = 0usize;
    for v in history {
        match v {
            Some(v) if *v < best => {
                best = *v;
                since = 0;
            }
            _ => since += 1,
        }
    }
    since >= patience
}

/// Agreement `100 * tau / (tau + unmatched_a + unmatched_b)` in percent.
///
/// Pairs within `tolerance_ms` are matched one-to-one, closest pairs first
/// (ties broken by time), which makes the measure symmetric.
pub fn agreement(a: &[usize], b: &[usize], tolerance_ms: f64, fs_hz: f64) -> f64 {
    agreement_at_lag(a, b, 0, tolerance(tolerance_ms, fs_hz))
}

fn tolerance(ms: f64, fs_hz: f64) -> i64 {
    (ms * fs_hz / 1000.0).floor() as i64
}

/// Matched count after shifting `b` by `lag` samples.
fn match_count(a: &[usize], b: &[usize], lag: i64, tol: i64) -> usize {
    let mut pairs: Vec<(i64, i64, usize, usize)> = Vec::new();
    let mut lo = 0usize;
    for (i, &ta) in a.iter().enumerate() {
        let ta = ta as i64;
        while lo < b.len() && (b[lo] as i64 + lag) < ta - tol {
            lo += 1;
        }
        let mut j = lo;
        while j < b.len() && (b[j] as i64 + lag) <= ta + tol {
            let tb = b[j] as i64 + lag;
            pairs.push(((ta - tb).abs(), ta.min(tb), i, j));
            j += 1;
        }
    }
    pairs.sort_unstable();
    let mut used_a = vec![false; a.len()];
    let mut used_b = vec![false; b.len()];
    let mut matched = 0;
    for (_, _, i, j) in pairs {
        if !used_a[i] && !used_b[j] {
            used_a[i] = true;
            used_b[j] = true;
            matched += 1;
        }
    }
    matched
}

fn agreement_at_lag(a: &[usize], b: &[usize], lag: i64, tol: i64) -> f64 {
    let total = a.len() + b.len();
    if total == 0 {
        log::debug!("agreement of two empty trains is defined as 0");
        return 0.0;
    }
    let tau = match_count(a, b, lag, tol);
    let denom = total - tau;
    100.0 * tau as f64 / denom as f64
}

/// Agreement maximised over a constant lag of `b` within `max_lag_ms`.
/// Returns the agreement and the lag in samples (added to `b`).
pub fn aligned_agreement(a: &[usize], b: &[usize], tolerance_ms: f64, max_lag_ms: f64, fs_hz: f64) -> (f64, i64) {
    let tol = tolerance(tolerance_ms, fs_hz);
    let max_lag = (max_lag_ms * fs_hz / 1000.0).round() as i64;
    let mut best = (agreement_at_lag(a, b, 0, tol), 0i64);
    for mag in 1..=max_lag {
        for lag in [-mag, mag] {
            let v = agreement_at_lag(a, b, lag, tol);
            if v > best.0 {
                best = (v, lag);
            }
        }
    }
    best
}

/// Template span around each spike.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PeelWindow {
    pub before: usize,
    pub after: usize,
}

impl PeelWindow {
    fn len(&self) -> usize {
        self.before + self.after + 1
    }
}

/// Subtracts a local spike-triggered average at every spike.
///
/// The template for a spike is the mean raw window over its `locality_k`
/// nearest spikes in time (itself included); all templates come from the
/// unmodified input.
pub fn peel_off(raw: ArrayView2<f64>, spikes: &[usize], window: PeelWindow, locality_k: usize) -> Result<Array2<f64>> {
    if spikes.is_empty() {
        return Err(Error::param("peel-off needs at least one spike"));
    }
    let (n, len) = raw.dim();
    let wl = window.len();
    let k = locality_k.clamp(1, spikes.len());
    // prefix sums of the windows over spike index
    let mut prefix = vec![0.0; (spikes.len() + 1) * n * wl];
    let stride = n * wl;
    for (i, &t) in spikes.iter().enumerate() {
        let (head, tail) = prefix.split_at_mut((i + 1) * stride);
        let prev = &head[i * stride..];
        let cur = &mut tail[..stride];
        cur.copy_from_slice(prev);
        for c in 0..n {
            for o in 0..wl {
                let tt = t as i64 - window.before as i64 + o as i64;
                if tt >= 0 && (tt as usize) < len {
                    cur[c * wl + o] += raw[[c, tt as usize]];
                }
            }
        }
    }
    let mut out = raw.to_owned();
    let mut lo = 0usize;
    for (i, &t) in spikes.iter().enumerate() {
        // slide the k-nearest window [lo, lo + k) toward spike i
        while lo + k < spikes.len() && lo < i && spikes[lo + k] - t < t - spikes[lo] {
            lo += 1;
        }
        while lo > 0 && lo + k > i + 1 && t - spikes[lo - 1] <= spikes[lo + k - 1] - t {
            lo -= 1;
        }
        let a = &prefix[lo * stride..(lo + 1) * stride];
        let b = &prefix[(lo + k) * stride..(lo + k + 1) * stride];
        for c in 0..n {
            for o in 0..wl {
                let tt = t as i64 - window.before as i64 + o as i64;
                if tt >= 0 && (tt as usize) < len {
                    out[[c, tt as usize]] -= (b[c * wl + o] - a[c * wl + o]) / k as f64;
                }
            }
        }
    }
    Ok(out)
}

/// Everything produced by one attempt that survived training.
#[derive(Debug, Clone)]
struct Candidate {
    state: SeparationState,
    train: SpikeTrain,
    silhouette: f64,
    diagnostics: TrainingDiagnostics,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingDiagnostics {
    pub init_column: usize,
    pub pretrain_losses: Vec<f64>,
    pub epochs: Vec<EpochRecord>,
}

/// An attempt that produced a source passing the silhouette gate.
#[derive(Debug, Clone)]
pub struct SourceResult {
    pub id: usize,
    pub attempt: usize,
    pub spike_train: SpikeTrain,
    pub separation: Array1<f64>,
    pub network: Option<CompensationNetwork>,
    pub silhouette: f64,
    pub accepted: bool,
    pub duplicate_of: Option<usize>,
    pub diagnostics: TrainingDiagnostics,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttemptOutcome {
    Accepted,
    Duplicate,
    Rejected,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttemptRecord {
    pub attempt: usize,
    pub outcome: AttemptOutcome,
    pub source_id: Option<usize>,
    pub silhouette: Option<f64>,
    pub spikes: Option<usize>,
    pub epochs: usize,
    pub message: Option<String>,
}

#[derive(Debug, Clone)]
pub struct Decomposition {
    /// Accepted sources and duplicates, in discovery order.
    pub sources: Vec<SourceResult>,
    pub attempts: Vec<AttemptRecord>,
    pub fs_hz: f64,
    pub len: usize,
    pub stop_reason: String,
}

impl Decomposition {
    pub fn accepted(&self) -> impl Iterator<Item = &SourceResult> {
        self.sources.iter().filter(|s| s.accepted)
    }

    pub fn accepted_trains(&self) -> Vec<SpikeTrain> {
        self.accepted().map(|s| s.spike_train.clone()).collect()
    }
}

const ATTEMPT_STREAM: u64 = 0x5851_f42d_4c95_7f2d;

struct Context<'a> {
    cfg: &'a DecomposeConfig,
    enc: PositionalEncoding,
    fs_hz: f64,
    skip_leading: usize,
    peak_window: usize,
}

fn run_attempt(
    ctx: &Context<'_>,
    xw: &ExtendedWhitenedSignal,
    used: &mut BTreeSet<usize>,
    attempt: usize,
) -> Result<Candidate> {
    let cfg = ctx.cfg;
    let seed = derive_seed(cfg.seed, ATTEMPT_STREAM, attempt as u64);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = xw.data.view();
    let (w, column) = init_vector(
        x,
        cfg.init_top_fraction,
        ctx.skip_leading,
        ctx.peak_window,
        used,
        &mut rng,
        cfg.execution,
    )?;
    let mut state = SeparationState::new(w, ctx.enc.dim(), cfg, rng.random())?;
    let mut diagnostics = TrainingDiagnostics {
        init_column: column,
        pretrain_losses: pretrain(&mut state, x, cfg)?,
        epochs: Vec::new(),
    };
    let mut history = Vec::new();
    loop {
        let record = alternate_epoch(&mut state, x, &ctx.enc, cfg, ctx.peak_window, &mut rng)?;
        history.push(record.isi_mad);
        diagnostics.epochs.push(record);
        if history.len() >= cfg.min_alternating_epochs.max(1)
            && converged(&history, cfg.patience, cfg.max_alternating_epochs)
        {
            break;
        }
        if history.len() >= cfg.max_alternating_epochs {
            break;
        }
    }
    let trace = source_trace(&state, x, cfg)?;
    let trace = trace.as_slice().expect("contiguous");
    let fit = gmm::fit_trace(trace, ctx.peak_window, &cfg.seeding, cfg.em_steps, &mut rng)?;
    let silhouette = gmm::silhouette(&fit.fitted_values(trace), &fit, cfg.silhouette_reduction)?;
    let train = gmm::to_spikes(trace, &fit, ctx.peak_window, ctx.fs_hz)?;
    Ok(Candidate {
        state,
        train,
        silhouette,
        diagnostics,
    })
}

/// Runs the full pipeline on a raw recording.
pub fn decompose(signal: &MultichannelSignal, pre: &PreprocessConfig, cfg: &DecomposeConfig) -> Result<Decomposition> {
    cfg.validate()?;
    let filtered = preprocess::filter_signal(signal, pre.low_hz, pre.high_hz)?;
    let fs = signal.fs_hz;
    let len = signal.len();
    let mut raw = filtered.samples;
    let mut xw = preprocess::extend_and_whiten(&MultichannelSignal::new(raw.clone(), fs)?, pre.k_ext, pre.execution)?;
    let mut seeding = cfg.seeding.clone();
    seeding.skip_leading = seeding.skip_leading.max(pre.k_ext);
    let local_cfg = DecomposeConfig { seeding, ..cfg.clone() };
    let peak_window = cfg.peak_window(fs);
    let ctx = Context {
        cfg: &local_cfg,
        enc: compnet::encode_time(len, &cfg.period_fracs)?,
        fs_hz: fs,
        skip_leading: pre.k_ext,
        peak_window,
    };
    let window = PeelWindow {
        before: cfg.peel_before.unwrap_or(2 * pre.k_ext),
        after: cfg.peel_after.unwrap_or(pre.k_ext),
    };

    let mut used = BTreeSet::new();
    let mut sources: Vec<SourceResult> = Vec::new();
    let mut attempts = Vec::new();
    let mut failures = 0usize;
    let mut stop_reason = format!("reached {} attempts", cfg.max_attempts);
    for attempt in 0..cfg.max_attempts {
        if cfg.max_consecutive_failures > 0 && failures >= cfg.max_consecutive_failures {
            stop_reason = format!("{failures} consecutive unsuccessful attempts");
            break;
        }
        let candidate = match run_attempt(&ctx, &xw, &mut used, attempt) {
            Ok(c) => c,
            Err(Error::Budget(msg)) => {
                stop_reason = msg;
                break;
            }
            Err(e @ (Error::Quality(_) | Error::Numeric(_))) => {
                log::info!("attempt {attempt} failed: {e}");
                attempts.push(AttemptRecord {
                    attempt,
                    outcome: AttemptOutcome::Failed,
                    source_id: None,
                    silhouette: None,
                    spikes: None,
                    epochs: 0,
                    message: Some(e.to_string()),
                });
                failures += 1;
                continue;
            }
            Err(e) => return Err(e),
        };
        let epochs = candidate.diagnostics.epochs.len();
        if candidate.silhouette < cfg.silhouette_threshold {
            log::info!("attempt {attempt} rejected: silhouette {:.4}", candidate.silhouette);
            attempts.push(AttemptRecord {
                attempt,
                outcome: AttemptOutcome::Rejected,
                source_id: None,
                silhouette: Some(candidate.silhouette),
                spikes: Some(candidate.train.count()),
                epochs,
                message: None,
            });
            failures += 1;
            continue;
        }
        let duplicate_of = sources
            .iter()
            .filter(|s| s.accepted)
            .find(|s| {
                aligned_agreement(
                    &candidate.train.timestamps,
                    &s.spike_train.timestamps,
                    cfg.duplicate_tolerance_ms,
                    cfg.max_lag_ms,
                    fs,
                )
                .0 >= cfg.duplicate_accuracy_threshold
            })
            .map(|s| s.id);
        if cfg.peel_off {
            raw = peel_off(raw.view(), &candidate.train.timestamps, window, cfg.locality_k)?;
            xw = preprocess::extend_and_whiten(&MultichannelSignal::new(raw.clone(), fs)?, pre.k_ext, pre.execution)?;
        }
        let id = sources.len();
        let accepted = duplicate_of.is_none();
        log::info!(
            "attempt {attempt}: source {id} silhouette {:.4} spikes {} {}",
            candidate.silhouette,
            candidate.train.count(),
            if accepted { "accepted" } else { "duplicate" }
        );
        attempts.push(AttemptRecord {
            attempt,
            outcome: if accepted {
                AttemptOutcome::Accepted
            } else {
                AttemptOutcome::Duplicate
            },
            source_id: Some(id),
            silhouette: Some(candidate.silhouette),
            spikes: Some(candidate.train.count()),
            epochs,
            message: None,
        });
        failures = if accepted { 0 } else { failures + 1 };
        sources.push(SourceResult {
            id,
            attempt,
            spike_train: candidate.train,
            separation: candidate.state.w.into_inner(),
            network: candidate.state.net,
            silhouette: candidate.silhouette,
            accepted,
            duplicate_of,
            diagnostics: candidate.diagnostics,
        });
    }
    Ok(Decomposition {
        sources,
        attempts,
        fs_hz: fs,
        len,
        stop_reason,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simgen::{gen_spike_train, gen_transfer_bank, render, DriftTrajectory};

    #[test]
    fn agreement_examples() {
        let a: Vec<usize> = (0..10).map(|k| 100 * k).collect();
        assert_eq!(agreement(&a, &a, 5.0, 1000.0), 100.0);
        // eight shared, one extra on each side
        let x: Vec<usize> = (0..9).map(|k| 100 * k).collect();
        let mut y: Vec<usize> = (0..8).map(|k| 100 * k).collect();
        y.push(5000);
        assert!((agreement(&x, &y, 5.0, 1000.0) - 80.0).abs() < 1e-12);
        let b: Vec<usize> = a.iter().map(|t| t + 50).collect();
        assert_eq!(agreement(&a, &b, 5.0, 1000.0), 0.0);
        assert_eq!(agreement(&[], &[], 5.0, 1000.0), 0.0);
    }

    #[test]
    fn near_miss_plus_extra_spike() {
        // 2048 Hz: 5 ms tolerance is 10 samples
        let a = [100, 200];
        let b = [104, 200, 700];
        let v = agreement(&a, &b, 5.0, 2048.0);
        assert!((v - 200.0 / 3.0).abs() < 1e-12);
        assert_eq!(v, agreement(&b, &a, 5.0, 2048.0));
    }

    #[test]
    fn matching_prefers_closest_pairs() {
        let a = [10];
        let b = [6, 12];
        assert!((agreement(&a, &b, 5.0, 1000.0) - 50.0).abs() < 1e-12);
        // greedy, not a maximum matching: the exact pair (12, 12) is taken
        // first and strands 5 and 19
        let a = [5, 12];
        let b = [12, 19];
        assert!((agreement(&a, &b, 7.0, 1000.0) - 100.0 / 3.0).abs() < 1e-12);
        assert_eq!(agreement(&a, &b, 7.0, 1000.0), agreement(&b, &a, 7.0, 1000.0));
    }

    #[test]
    fn aligned_agreement_finds_constant_lag() {
        let a: Vec<usize> = (1..40).map(|k| 97 * k).collect();
        let b: Vec<usize> = a.iter().map(|t| t - 30).collect();
        assert!(agreement(&a, &b, 5.0, 1000.0) < 100.0);
        let (v, lag) = aligned_agreement(&a, &b, 5.0, 40.0, 1000.0);
        assert_eq!(v, 100.0);
        // exact shift is best but any lag within tolerance also matches all
        assert!((lag - 30).abs() <= 5);
        assert_eq!(aligned_agreement(&a, &b, 5.0, 0.0, 1000.0).1, 0);
    }

    #[test]
    fn convergence_counter() {
        let h = |v: &[f64]| v.iter().map(|&x| Some(x)).collect::<Vec<_>>();
        assert!(!converged(&h(&[5.0]), 3, 100));
        assert!(converged(&h(&[5.0, 5.0, 5.0, 5.0]), 3, 100));
        // a decrease resets the counter
        assert!(!converged(&h(&[5.0, 5.0, 5.0, 4.0, 4.5]), 3, 100));
        assert!(converged(&h(&[5.0, 4.0]), 10, 2));
        assert!(converged(&[Some(3.0), None, None, None], 3, 100));
    }

    #[test]
    fn isi_mad_of_known_intervals() {
        let st = SpikeTrain::new(vec![0, 10, 30, 40, 80], 100, 1000.0).unwrap();
        // intervals 10, 20, 10, 40 -> median 15, deviations 5, 5, 5, 25
        assert_eq!(isi_mad(&st), Some(5.0));
        assert_eq!(isi_mad(&SpikeTrain::new(vec![3, 9], 100, 1000.0).unwrap()), None);
    }

    #[test]
    fn init_excludes_neighbourhood() {
        let mut x = Array2::<f64>::zeros((2, 100));
        for t in 0..100 {
            x[[0, t]] = 1.0 + t as f64;
            x[[1, t]] = 0.5;
        }
        let mut used = BTreeSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut picks = Vec::new();
        loop {
            match init_vector(x.view(), 0.1, 5, 3, &mut used, &mut rng, Execution::Sequential) {
                Ok((w, t)) => {
                    assert!((w.view().dot(&w.view()) - 1.0).abs() < 1e-12);
                    picks.push(t);
                }
                Err(Error::Budget(_)) => break,
                Err(e) => panic!("{e}"),
            }
        }
        // top 10% of columns 5..100 are 90..99
        assert!(!picks.is_empty() && picks.iter().all(|&t| t >= 90));
        for (i, a) in picks.iter().enumerate() {
            for b in &picks[i + 1..] {
                assert!(a.abs_diff(*b) > 3);
            }
        }
    }

    fn single_source(len: usize) -> (Array2<f64>, Vec<usize>) {
        let bank = gen_transfer_bank(1, 4, 20, 3).unwrap();
        let train = gen_spike_train(15.0, 20.0, len, 2048.0, 5).unwrap();
        let signal = render(std::slice::from_ref(&train), &bank, &DriftTrajectory::none()).unwrap();
        (signal, train.timestamps)
    }

    #[test]
    fn peel_off_clears_noise_free_source() {
        let (signal, spikes) = single_source(20_000);
        let window = PeelWindow { before: 2, after: 22 };
        let energy = |m: &Array2<f64>| m.iter().map(|v| v * v).sum::<f64>();
        let residual = peel_off(signal.view(), &spikes, window, 20).unwrap();
        assert!(energy(&residual) < 0.01 * energy(&signal));
    }

    #[test]
    fn all_neighbours_is_global_average() {
        let (signal, spikes) = single_source(6_000);
        let window = PeelWindow { before: 2, after: 22 };
        let local = peel_off(signal.view(), &spikes, window, spikes.len()).unwrap();
        let more = peel_off(signal.view(), &spikes, window, spikes.len() + 50).unwrap();
        assert_eq!(local, more);
        // global template by hand
        let (n, len) = signal.dim();
        let mut template = Array2::<f64>::zeros((n, window.len()));
        for &t in &spikes {
            for o in 0..window.len() {
                let tt = t as i64 - 2 + o as i64;
                if tt >= 0 && (tt as usize) < len {
                    for c in 0..n {
                        template[[c, o]] += signal[[c, tt as usize]] / spikes.len() as f64;
                    }
                }
            }
        }
        let mut expected = signal.clone();
        for &t in &spikes {
            for o in 0..window.len() {
                let tt = t as i64 - 2 + o as i64;
                if tt >= 0 && (tt as usize) < len {
                    for c in 0..n {
                        expected[[c, tt as usize]] -= template[[c, o]];
                    }
                }
            }
        }
        assert!(local.iter().zip(&expected).all(|(a, b)| (a - b).abs() < 1e-9));
        assert!(peel_off(signal.view(), &[], window, 5).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(DecomposeConfig::default().validate().is_ok());
        let bad = DecomposeConfig {
            duplicate_accuracy_threshold: 0.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let ablated = DecomposeConfig {
            ablate_compensation: true,
            ..Default::default()
        };
        assert!(!ablated.compensates());
        assert_eq!(DecomposeConfig::default().peak_window(2048.0), 20);
    }
}

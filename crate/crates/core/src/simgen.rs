//! Synthetic drifting convolutive mixtures with known ground truth.
//!
//! Sources are sparse spike trains. Each source owns a multichannel
//! biphasic waveform (the transfer bank); the whole bank can be displaced
//! along the channel axis by a drift trajectory, which makes the mixing
//! time dependent.

use std::f64::consts::PI;

use ndarray::{Array2, Array3, ArrayView3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Binary firing sequence stored as sorted sample indices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpikeTrain {
    pub timestamps: Vec<usize>,
    /// Record length in samples.
    pub len: usize,
    pub fs_hz: f64,
}

impl SpikeTrain {
    /// Builds a train, sorting and deduplicating the timestamps.
    pub fn new(mut timestamps: Vec<usize>, len: usize, fs_hz: f64) -> Result<Self> {
        timestamps.sort_unstable();
        timestamps.dedup();
        if let Some(&last) = timestamps.last() {
            if last >= len {
                return Err(Error::param(format!(
                    "timestamp {last} outside record of {len} samples"
                )));
            }
        }
        Ok(Self { timestamps, len, fs_hz })
    }

    pub fn count(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }

    /// Empirical firing rate over the record.
    pub fn rate_hz(&self) -> f64 {
        if self.len == 0 {
            return 0.0;
        }
        self.count() as f64 * self.fs_hz / self.len as f64
    }

    /// Inter-spike intervals in samples.
    pub fn intervals(&self) -> Vec<usize> {
        self.timestamps.windows(2).map(|w| w[1] - w[0]).collect()
    }
}

/// Draws a Bernoulli-per-sample spike train thinned by a refractory period.
///
/// The per-sample probability is chosen so that the mean inter-spike interval
/// (refractory gap plus geometric waiting time) equals `1 / rate_hz`.
pub fn gen_spike_train(rate_hz: f64, refractory_ms: f64, len: usize, fs_hz: f64, seed: u64) -> Result<SpikeTrain> {
    if !(rate_hz > 0.0 && rate_hz.is_finite()) {
        return Err(Error::param("firing rate must be positive"));
    }
    if !(refractory_ms >= 0.0) || !(fs_hz > 0.0) {
        return Err(Error::param("refractory period and sampling rate must be non-negative"));
    }
    let mean_isi_s = 1.0 / rate_hz;
    let refractory_s = refractory_ms / 1000.0;
    if mean_isi_s <= refractory_s {
        return Err(Error::param(format!(
            "rate {rate_hz} Hz is infeasible with a {refractory_ms} ms refractory period"
        )));
    }
    let gap = (refractory_ms * fs_hz / 1000.0).ceil() as usize;
    let waiting_samples = (mean_isi_s - gap as f64 / fs_hz) * fs_hz;
    if waiting_samples < 1.0 {
        return Err(Error::param(
            "rate too high for the sampling rate once the refractory gap is applied",
        ));
    }
    let p = 1.0 / waiting_samples;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut timestamps = Vec::new();
    // next sample at which a spike is allowed
    let mut ready = 0usize;
    for t in 0..len {
        if t < ready {
            continue;
        }
        if rng.random::<f64>() < p {
            timestamps.push(t);
            ready = t + gap.max(1);
        }
    }
    Ok(SpikeTrain { timestamps, len, fs_hz })
}

/// Source x channel x lag waveform tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct TransferBank {
    pub waveforms: Array3<f64>,
}

impl TransferBank {
    pub fn new(waveforms: Array3<f64>) -> Result<Self> {
        let (m, n, l) = waveforms.dim();
        if m == 0 || n == 0 || l == 0 {
            return Err(Error::param("transfer bank dimensions must be positive"));
        }
        for (j, src) in waveforms.outer_iter().enumerate() {
            if src.iter().all(|&v| v == 0.0) {
                return Err(Error::param(format!("source {j} has no energy on any channel")));
            }
        }
        Ok(Self { waveforms })
    }

    pub fn sources(&self) -> usize {
        self.waveforms.dim().0
    }

    pub fn channels(&self) -> usize {
        self.waveforms.dim().1
    }

    pub fn lags(&self) -> usize {
        self.waveforms.dim().2
    }
}

/// Default spatial spread (channels) of a source around its center channel.
pub const DEFAULT_SPATIAL_WIDTH: f64 = 1.5;

/// Random biphasic waveforms with a Gaussian spatial footprint.
pub fn gen_transfer_bank(m: usize, n: usize, l: usize, seed: u64) -> Result<TransferBank> {
    gen_transfer_bank_with(m, n, l, DEFAULT_SPATIAL_WIDTH, seed)
}

/// Like [`gen_transfer_bank`] with an explicit spatial spread.
///
/// Every waveform is a difference of two Gaussians in lag. Channel amplitude
/// decays as a Gaussian of the distance to a random center channel, and the
/// lobe timing and width vary slightly with that distance so that channels
/// carry distinct shapes.
pub fn gen_transfer_bank_with(m: usize, n: usize, l: usize, spatial_width: f64, seed: u64) -> Result<TransferBank> {
    if m == 0 || n == 0 || l == 0 {
        return Err(Error::param("transfer bank dimensions must be positive"));
    }
    if !(spatial_width > 0.0) {
        return Err(Error::param("spatial width must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut waveforms = Array3::<f64>::zeros((m, n, l));
    let lf = l as f64;
    for j in 0..m {
        let center = if n > 1 {
            rng.random_range(0.0..(n - 1) as f64)
        } else {
            0.0
        };
        let amplitude = rng.random_range(0.6..1.4);
        let onset = rng.random_range(0.2..0.4) * lf;
        let width = (rng.random_range(0.05..0.1) * lf).max(0.6);
        let ratio = rng.random_range(0.4..0.8);
        let spread = rng.random_range(0.8..1.2) * spatial_width;
        let skew = rng.random_range(-0.6..0.6);
        for i in 0..n {
            let d = i as f64 - center;
            let gain = amplitude * (-0.5 * (d / spread).powi(2)).exp();
            let shift = onset + 0.4 * d.abs() + skew * d;
            let w1 = width * (1.0 + 0.08 * d.abs());
            let w2 = 1.8 * w1;
            let second = shift + 2.2 * w1;
            for k in 0..l {
                let tau = k as f64;
                let first_lobe = (-0.5 * ((tau - shift) / w1).powi(2)).exp();
                let second_lobe = ratio * (-0.5 * ((tau - second) / w2).powi(2)).exp();
                waveforms[[j, i, k]] = gain * (first_lobe - second_lobe);
            }
        }
        let peak = waveforms
            .index_axis(ndarray::Axis(0), j)
            .iter()
            .fold(0.0f64, |a, &v| a.max(v.abs()));
        if peak > 0.0 {
            waveforms
                .index_axis_mut(ndarray::Axis(0), j)
                .mapv_inplace(|v| v * amplitude / peak);
        } else {
            // lobes cancelled exactly; fall back to a unit impulse on the center channel
            waveforms[[j, center.round() as usize, 0]] = amplitude;
        }
    }
    TransferBank::new(waveforms)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DriftKind {
    None,
    Sinusoid,
    SumOfSinusoids,
}

/// Channel displacement over time, in channel-pitch units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftTrajectory {
    pub kind: DriftKind,
    /// Periods as fractions of the record length.
    #[serde(default)]
    pub period_fracs: Vec<f64>,
    #[serde(default)]
    pub amplitudes: Vec<f64>,
    #[serde(default)]
    pub phase: f64,
}

impl Default for DriftTrajectory {
    fn default() -> Self {
        Self::none()
    }
}

impl DriftTrajectory {
    pub fn none() -> Self {
        Self {
            kind: DriftKind::None,
            period_fracs: Vec::new(),
            amplitudes: Vec::new(),
            phase: 0.0,
        }
    }

    pub fn sinusoid(period_frac: f64, amplitude: f64, phase: f64) -> Self {
        Self {
            kind: DriftKind::Sinusoid,
            period_fracs: vec![period_frac],
            amplitudes: vec![amplitude],
            phase,
        }
    }

    pub fn sum_of_sinusoids(period_fracs: Vec<f64>, amplitudes: Vec<f64>, phase: f64) -> Self {
        Self {
            kind: DriftKind::SumOfSinusoids,
            period_fracs,
            amplitudes,
            phase,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.period_fracs.len() != self.amplitudes.len() {
            return Err(Error::param("drift periods and amplitudes differ in length"));
        }
        match self.kind {
            DriftKind::None => {}
            DriftKind::Sinusoid if self.period_fracs.len() != 1 => {
                return Err(Error::param("sinusoidal drift takes exactly one component"));
            }
            DriftKind::SumOfSinusoids if self.period_fracs.is_empty() => {
                return Err(Error::param("sum-of-sinusoids drift needs components"));
            }
            _ => {}
        }
        if self.period_fracs.iter().any(|&p| !(p > 0.0 && p.is_finite()))
            || self.amplitudes.iter().any(|a| !a.is_finite())
            || !self.phase.is_finite()
        {
            return Err(Error::param("drift periods must be positive and all values finite"));
        }
        Ok(())
    }
}

/// Displacement at sample `t` of a record of `len` samples.
pub fn drift_displacement(traj: &DriftTrajectory, t: usize, len: usize) -> f64 {
    if traj.kind == DriftKind::None || len == 0 {
        return 0.0;
    }
    traj.period_fracs
        .iter()
        .zip(&traj.amplitudes)
        .map(|(&frac, &amp)| amp * (2.0 * PI * t as f64 / (frac * len as f64) + traj.phase).sin())
        .sum()
}

/// Moves every waveform `shift` channels toward higher channel indices with
/// linear interpolation between neighbouring channels. Energy shifted past
/// the array edge is lost.
pub fn shift_bank(bank: ArrayView3<f64>, shift: f64) -> Array3<f64> {
    if shift == 0.0 {
        return bank.to_owned();
    }
    let (m, n, l) = bank.dim();
    let whole = shift.floor();
    let frac = shift - whole;
    let whole = whole as i64;
    let mut out = Array3::<f64>::zeros((m, n, l));
    for j in 0..m {
        for i in 0..n {
            let src_a = i as i64 - whole;
            let src_b = src_a - 1;
            for (src, weight) in [(src_a, 1.0 - frac), (src_b, frac)] {
                if weight == 0.0 || src < 0 || src >= n as i64 {
                    continue;
                }
                for k in 0..l {
                    out[[j, i, k]] += weight * bank[[j, src as usize, k]];
                }
            }
        }
    }
    out
}

/// Mixing slice `N x (M*L)` in effect at sample `t`; column `j*L + k` holds
/// lag `k` of source `j`.
pub fn instantaneous_transfer(bank: &TransferBank, traj: &DriftTrajectory, t: usize, len: usize) -> Array2<f64> {
    let shifted = shift_bank(bank.waveforms.view(), drift_displacement(traj, t, len));
    let (m, n, l) = shifted.dim();
    let mut out = Array2::<f64>::zeros((n, m * l));
    for j in 0..m {
        for i in 0..n {
            for k in 0..l {
                out[[i, j * l + k]] = shifted[[j, i, k]];
            }
        }
    }
    out
}

/// Channel x sample matrix with its sampling rate.
#[derive(Debug, Clone, PartialEq)]
pub struct MultichannelSignal {
    pub samples: Array2<f64>,
    pub fs_hz: f64,
}

impl MultichannelSignal {
    pub fn new(samples: Array2<f64>, fs_hz: f64) -> Result<Self> {
        if samples.nrows() == 0 || samples.ncols() == 0 {
            return Err(Error::param("signal needs at least one channel and one sample"));
        }
        if !(fs_hz > 0.0 && fs_hz.is_finite()) {
            return Err(Error::param("sampling rate must be positive"));
        }
        if samples.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("signal contains non-finite samples".into()));
        }
        Ok(Self { samples, fs_hz })
    }

    pub fn channels(&self) -> usize {
        self.samples.nrows()
    }

    pub fn len(&self) -> usize {
        self.samples.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// A rendered mixture and the trains that produced it.
#[derive(Debug, Clone)]
pub struct Mixture {
    pub signal: MultichannelSignal,
    pub truth: Vec<SpikeTrain>,
    /// Standard deviation of the added white noise.
    pub noise_std: f64,
}

/// Noise-free convolutive rendering of `trains` through the drifting bank.
pub fn render(trains: &[SpikeTrain], bank: &TransferBank, traj: &DriftTrajectory) -> Result<Array2<f64>> {
    traj.validate()?;
    if trains.len() != bank.sources() {
        return Err(Error::param(format!(
            "{} spike trains for a bank of {} sources",
            trains.len(),
            bank.sources()
        )));
    }
    let len = trains.first().map(|s| s.len).unwrap_or(0);
    let fs = trains.first().map(|s| s.fs_hz).unwrap_or(0.0);
    if trains.iter().any(|s| s.len != len || s.fs_hz != fs) {
        return Err(Error::param("spike trains differ in length or sampling rate"));
    }
    let n = bank.channels();
    let mut out = Array2::<f64>::zeros((n, len));
    for (j, train) in trains.iter().enumerate() {
        let source = bank.waveforms.index_axis(ndarray::Axis(0), j);
        for &t in &train.timestamps {
            let shift = drift_displacement(traj, t, len);
            if shift == 0.0 {
                add_window(&mut out, source, t);
            } else {
                let moved = shift_bank(source.insert_axis(ndarray::Axis(0)), shift);
                add_window(&mut out, moved.index_axis(ndarray::Axis(0), 0), t);
            }
        }
    }
    Ok(out)
}

fn add_window(out: &mut Array2<f64>, wave: ndarray::ArrayView2<f64>, t: usize) {
    let len = out.ncols();
    let (n, l) = wave.dim();
    let end = (t + l).min(len);
    for i in 0..n {
        for (k, tt) in (t..end).enumerate() {
            out[[i, tt]] += wave[[i, k]];
        }
    }
}

/// Renders the mixture and adds white Gaussian noise at `snr_db`
/// (`10 log10(signal power / noise power)` over the whole record).
/// An infinite SNR adds no noise.
pub fn mix(
    trains: &[SpikeTrain],
    bank: &TransferBank,
    traj: &DriftTrajectory,
    snr_db: f64,
    seed: u64,
) -> Result<Mixture> {
    if snr_db.is_nan() {
        return Err(Error::param("snr must not be NaN"));
    }
    let mut samples = render(trains, bank, traj)?;
    let fs = trains.first().map(|s| s.fs_hz).unwrap_or(1.0);
    let power = samples.iter().map(|v| v * v).sum::<f64>() / samples.len().max(1) as f64;
    let noise_std = if snr_db.is_infinite() && snr_db > 0.0 || power == 0.0 {
        0.0
    } else {
        (power / 10f64.powf(snr_db / 10.0)).sqrt()
    };
    if noise_std > 0.0 {
        add_noise(&mut samples, noise_std, seed);
    }
    if samples.ncols() == 0 {
        return Err(Error::param("spike trains have zero length"));
    }
    Ok(Mixture {
        signal: MultichannelSignal::new(samples, fs)?,
        truth: trains.to_vec(),
        noise_std,
    })
}

/// Adds seeded white Gaussian noise with standard deviation `std`.
pub fn add_noise(samples: &mut Array2<f64>, std: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, std).expect("finite noise std");
    samples.iter_mut().for_each(|v| *v += normal.sample(&mut rng));
}

/// Complete description of a synthetic recording.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub sources: usize,
    pub channels: usize,
    pub waveform_len: usize,
    pub duration_s: f64,
    pub fs_hz: f64,
    pub rate_hz: f64,
    /// Per-source rates are drawn uniformly within `rate_hz * (1 ± rate_jitter)`.
    pub rate_jitter: f64,
    pub refractory_ms: f64,
    pub snr_db: f64,
    pub spatial_width: f64,
    pub drift: DriftTrajectory,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            sources: 5,
            channels: 16,
            waveform_len: 20,
            duration_s: 30.0,
            fs_hz: 2048.0,
            rate_hz: 12.0,
            rate_jitter: 0.25,
            refractory_ms: 20.0,
            snr_db: 20.0,
            spatial_width: DEFAULT_SPATIAL_WIDTH,
            drift: DriftTrajectory::none(),
            seed: 0,
        }
    }
}

impl SimConfig {
    pub fn samples(&self) -> usize {
        (self.duration_s * self.fs_hz).round() as usize
    }
}

/// A simulated recording with the bank used to render it.
#[derive(Debug, Clone)]
pub struct Simulation {
    pub mixture: Mixture,
    pub bank: TransferBank,
}

// Stream offsets that decorrelate the per-purpose seeds.
const BANK_STREAM: u64 = 0x9e37_79b9_7f4a_7c15;
const NOISE_STREAM: u64 = 0xd1b5_4a32_d192_ed03;

/// Derives a sub-seed for `stream` and `index` from a base seed.
pub fn derive_seed(seed: u64, stream: u64, index: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = seed
        .wrapping_add(stream)
        .wrapping_add(index.wrapping_mul(0xbf58_476d_1ce4_e5b9));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn simulate(cfg: &SimConfig) -> Result<Simulation> {
    cfg.drift.validate()?;
    let len = cfg.samples();
    if len == 0 {
        return Err(Error::param("simulation has zero samples"));
    }
    let bank = gen_transfer_bank_with(
        cfg.sources,
        cfg.channels,
        cfg.waveform_len,
        cfg.spatial_width,
        derive_seed(cfg.seed, BANK_STREAM, 0),
    )?;
    let mut rate_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, BANK_STREAM, 1));
    let trains = (0..cfg.sources)
        .map(|j| {
            let jitter = cfg.rate_jitter.clamp(0.0, 0.95);
            let rate = if jitter > 0.0 {
                cfg.rate_hz * rate_rng.random_range(1.0 - jitter..=1.0 + jitter)
            } else {
                cfg.rate_hz
            };
            gen_spike_train(
                rate,
                cfg.refractory_ms,
                len,
                cfg.fs_hz,
                derive_seed(cfg.seed, 0, j as u64 + 1),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let mixture = mix(
        &trains,
        &bank,
        &cfg.drift,
        cfg.snr_db,
        derive_seed(cfg.seed, NOISE_STREAM, 0),
    )?;
    Ok(Simulation { mixture, bank })
}

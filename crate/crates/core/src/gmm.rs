//! Two-component Gaussian mixture over a source estimate.
//!
//! The mixture is fitted to a subset of samples: local maxima that clear a
//! height threshold seed the spike component, and a uniform draw of other
//! samples seeds the null component. A few EM steps refine both.

use std::collections::VecDeque;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::simgen::SpikeTrain;

/// Lower bound on either component variance.
pub const VARIANCE_FLOOR: f64 = 1e-12;

/// Indices `t` where `trace[t]` is strictly greater than every other value
/// in `trace[t-w ..= t+w]` (window clipped at the record edges).
pub fn find_peaks(trace: &[f64], window: usize) -> Vec<usize> {
    let n = trace.len();
    if n == 0 {
        return Vec::new();
    }
    let w = window.max(1);
    let left = sliding_max_before(trace, w);
    let mut reversed: Vec<f64> = trace.to_vec();
    reversed.reverse();
    let mut right = sliding_max_before(&reversed, w);
    right.reverse();
    (0..n).filter(|&t| trace[t] > left[t] && trace[t] > right[t]).collect()
}

/// `out[t] = max(x[t-w..t])`, `-inf` for an empty range.
fn sliding_max_before(x: &[f64], w: usize) -> Vec<f64> {
    let mut out = vec![f64::NEG_INFINITY; x.len()];
    let mut dq: VecDeque<usize> = VecDeque::new();
    for t in 0..x.len() {
        if let Some(&front) = dq.front() {
            if front + w < t {
                dq.pop_front();
            }
        }
        if let Some(&front) = dq.front() {
            out[t] = x[front];
        }
        while let Some(&back) = dq.back() {
            if x[back] <= x[t] {
                dq.pop_back();
            } else {
                break;
            }
        }
        dq.push_back(t);
    }
    out
}

/// Fitted two-Gaussian mixture plus the sample subset it was fitted on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmmFit {
    /// Spike mixing weight.
    pub pi: f64,
    pub mu_null: f64,
    pub mu_spike: f64,
    pub sigma_null: f64,
    pub sigma_spike: f64,
    /// Trace indices of the fitted samples.
    pub indices: Vec<usize>,
    /// Spike responsibility of each fitted sample, aligned with `indices`.
    pub responsibilities: Vec<f64>,
    /// Set when a variance hit the floor.
    pub collapsed: bool,
}

impl GmmFit {
    /// Values of `trace` at the fitted indices.
    pub fn fitted_values(&self, trace: &[f64]) -> Vec<f64> {
        self.indices.iter().map(|&t| trace[t]).collect()
    }

    fn log_weights(&self, x: f64) -> (f64, f64) {
        let ln = (1.0 - self.pi).ln() - self.sigma_null.ln() - 0.5 * ((x - self.mu_null) / self.sigma_null).powi(2);
        let ls = self.pi.ln() - self.sigma_spike.ln() - 0.5 * ((x - self.mu_spike) / self.sigma_spike).powi(2);
        (ln, ls)
    }

    /// Posterior probability that `x` belongs to the spike component.
    pub fn responsibility(&self, x: f64) -> f64 {
        let (ln, ls) = self.log_weights(x);
        1.0 / (1.0 + (ln - ls).exp())
    }

    /// Hard assignment. Values beyond either mean always go to that side so
    /// that a wide component cannot claim the far tail of the other.
    pub fn is_spike(&self, x: f64) -> bool {
        if x >= self.mu_spike {
            true
        } else if x <= self.mu_null {
            false
        } else {
            self.responsibility(x) > 0.5
        }
    }

    pub fn check(&self) -> Result<()> {
        let ok = self.pi > 0.0
            && self.pi < 1.0
            && self.sigma_null > 0.0
            && self.sigma_spike > 0.0
            && self.mu_spike > self.mu_null
            && self.indices.len() == self.responsibilities.len();
        if ok {
            Ok(())
        } else {
            Err(Error::Quality(format!("degenerate mixture {self:?}")))
        }
    }
}

/// Sample selection for mixture seeding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SeedingOptions {
    /// Peaks above `spike_sigmas * std(trace)` seed the spike component.
    pub spike_sigmas: f64,
    /// Number of other samples seeding the null component.
    pub null_samples: usize,
    /// Samples before this index are ignored (zero-padded extension edge).
    pub skip_leading: usize,
}

impl Default for SeedingOptions {
    fn default() -> Self {
        Self {
            spike_sigmas: 3.0,
            null_samples: 1000,
            skip_leading: 0,
        }
    }
}

fn mean_std(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count().max(1) as f64;
    let mean = values.clone().sum::<f64>() / n;
    let var = values.map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Seeds the mixture from labelled peaks and a uniform null draw.
pub fn init_gmm<R: Rng + ?Sized>(trace: &[f64], peaks: &[usize], opts: &SeedingOptions, rng: &mut R) -> Result<GmmFit> {
    let (_, std) = mean_std(trace.iter().copied());
    if !(std > 0.0 && std.is_finite()) {
        return Err(Error::Quality("source trace is constant or non-finite".into()));
    }
    let height = opts.spike_sigmas * std;
    let spikes: Vec<usize> = peaks
        .iter()
        .copied()
        .filter(|&t| t >= opts.skip_leading && t < trace.len() && trace[t] > height)
        .collect();
    if spikes.len() < 2 {
        return Err(Error::Quality(format!(
            "{} peaks above {} standard deviations",
            spikes.len(),
            opts.spike_sigmas
        )));
    }
    let mut is_spike = vec![false; trace.len()];
    spikes.iter().for_each(|&t| is_spike[t] = true);
    let eligible: Vec<usize> = (opts.skip_leading.min(trace.len())..trace.len())
        .filter(|&t| !is_spike[t])
        .collect();
    if eligible.len() < 2 {
        return Err(Error::Quality("too few samples for the null component".into()));
    }
    let take = opts.null_samples.min(eligible.len()).max(2);
    let mut picks = rand::seq::index::sample(rng, eligible.len(), take).into_vec();
    picks.sort_unstable();
    let nulls: Vec<usize> = picks.into_iter().map(|i| eligible[i]).collect();

    let (mu_spike, sd_spike) = mean_std(spikes.iter().map(|&t| trace[t]));
    let (mu_null, sd_null) = mean_std(nulls.iter().map(|&t| trace[t]));
    let mut collapsed = false;
    let mut floor = |sd: f64| {
        if sd * sd < VARIANCE_FLOOR {
            collapsed = true;
            VARIANCE_FLOOR.sqrt()
        } else {
            sd
        }
    };
    let sigma_spike = floor(sd_spike);
    let sigma_null = floor(sd_null);
    let mut indices = spikes.clone();
    indices.extend(&nulls);
    let mut responsibilities = vec![1.0; spikes.len()];
    responsibilities.extend(std::iter::repeat_n(0.0, nulls.len()));
    let fit = GmmFit {
        pi: spikes.len() as f64 / (spikes.len() + nulls.len()) as f64,
        mu_null,
        mu_spike,
        sigma_null,
        sigma_spike,
        indices,
        responsibilities,
        collapsed,
    };
    fit.check()?;
    Ok(fit)
}

/// Mixture log-likelihood of `samples`.
pub fn log_likelihood(samples: &[f64], fit: &GmmFit) -> f64 {
    let c = -0.5 * (2.0 * std::f64::consts::PI).ln();
    samples
        .iter()
        .map(|&x| {
            let (ln, ls) = fit.log_weights(x);
            let m = ln.max(ls);
            c + m + ((ln - m).exp() + (ls - m).exp()).ln()
        })
        .sum()
}

/// Exactly `steps` EM iterations on `samples` (aligned with `fit0.indices`).
///
/// The returned responsibilities are the ones used by the final M-step, so
/// the stored variances are reproducible from them and the stored means.
pub fn em_fit(samples: &[f64], fit0: &GmmFit, steps: usize) -> Result<GmmFit> {
    if samples.len() < 4 {
        return Err(Error::param("EM needs at least two samples per component"));
    }
    let mut fit = fit0.clone();
    if steps == 0 {
        return Ok(fit);
    }
    let mut resp = vec![0.0; samples.len()];
    for _ in 0..steps {
        for (r, &x) in resp.iter_mut().zip(samples) {
            *r = fit.responsibility(x);
        }
        let ws: f64 = resp.iter().sum();
        let wn = samples.len() as f64 - ws;
        let n = samples.len() as f64;
        if ws > 0.0 {
            fit.mu_spike = resp.iter().zip(samples).map(|(r, x)| r * x).sum::<f64>() / ws;
            let var = resp
                .iter()
                .zip(samples)
                .map(|(r, x)| r * (x - fit.mu_spike).powi(2))
                .sum::<f64>()
                / ws;
            fit.sigma_spike = floored(var, &mut fit.collapsed).sqrt();
        } else {
            fit.collapsed = true;
        }
        if wn > 0.0 {
            fit.mu_null = resp.iter().zip(samples).map(|(r, x)| (1.0 - r) * x).sum::<f64>() / wn;
            let var = resp
                .iter()
                .zip(samples)
                .map(|(r, x)| (1.0 - r) * (x - fit.mu_null).powi(2))
                .sum::<f64>()
                / wn;
            fit.sigma_null = floored(var, &mut fit.collapsed).sqrt();
        } else {
            fit.collapsed = true;
        }
        fit.pi = (ws / n).clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON);
    }
    fit.responsibilities = resp;
    if fit.mu_spike < fit.mu_null {
        std::mem::swap(&mut fit.mu_spike, &mut fit.mu_null);
        std::mem::swap(&mut fit.sigma_spike, &mut fit.sigma_null);
        fit.pi = 1.0 - fit.pi;
        fit.responsibilities.iter_mut().for_each(|r| *r = 1.0 - *r);
    }
    Ok(fit)
}

fn floored(var: f64, collapsed: &mut bool) -> f64 {
    if var < VARIANCE_FLOOR || !var.is_finite() {
        *collapsed = true;
        VARIANCE_FLOOR
    } else {
        var
    }
}

/// `lambda * sqrt(sigma_null^2 + sigma_spike^2)`.
pub fn nonstationarity_loss(fit: &GmmFit, lambda: f64) -> f64 {
    lambda * (fit.sigma_null.powi(2) + fit.sigma_spike.powi(2)).sqrt()
}

/// Component variances recomputed from `values` with responsibilities and
/// means held fixed.
pub fn frozen_variances(values: &[f64], fit: &GmmFit) -> (f64, f64) {
    let (mut wn, mut ws, mut vn, mut vs) = (0.0, 0.0, 0.0, 0.0);
    for (&x, &r) in values.iter().zip(&fit.responsibilities) {
        ws += r;
        wn += 1.0 - r;
        vs += r * (x - fit.mu_spike).powi(2);
        vn += (1.0 - r) * (x - fit.mu_null).powi(2);
    }
    (
        if wn > 0.0 { vn / wn } else { 0.0 },
        if ws > 0.0 { vs / ws } else { 0.0 },
    )
}

/// Loss at `values` with frozen responsibilities and means.
pub fn nonstationarity_loss_frozen(values: &[f64], fit: &GmmFit, lambda: f64) -> f64 {
    let (vn, vs) = frozen_variances(values, fit);
    lambda * (vn + vs).sqrt()
}

/// Derivative of the frozen-parameter loss with respect to each fitted sample.
pub fn nonstationarity_gradient(values: &[f64], fit: &GmmFit, lambda: f64) -> Result<Vec<f64>> {
    if values.len() != fit.responsibilities.len() {
        return Err(Error::param(format!(
            "{} values for {} fitted samples",
            values.len(),
            fit.responsibilities.len()
        )));
    }
    let (vn, vs) = frozen_variances(values, fit);
    let root = (vn + vs).sqrt();
    if lambda == 0.0 || root == 0.0 {
        return Ok(vec![0.0; values.len()]);
    }
    let ws: f64 = fit.responsibilities.iter().sum();
    let wn = values.len() as f64 - ws;
    let scale = lambda / (2.0 * root);
    Ok(values
        .iter()
        .zip(&fit.responsibilities)
        .map(|(&x, &r)| {
            let mut g = 0.0;
            if ws > 0.0 {
                g += 2.0 * r * (x - fit.mu_spike) / ws;
            }
            if wn > 0.0 {
                g += 2.0 * (1.0 - r) * (x - fit.mu_null) / wn;
            }
            scale * g
        })
        .collect())
}

fn population_std(values: &[f64]) -> (f64, f64) {
    let n = values.len().max(1) as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Frozen-parameter loss divided by the standard deviation of `values`.
///
/// Rescaling the source leaves this unchanged, so it cannot be lowered by
/// shrinking the source toward zero.
pub fn scaled_nonstationarity_loss(values: &[f64], fit: &GmmFit, lambda: f64) -> f64 {
    let (_, sd) = population_std(values);
    if sd == 0.0 {
        return 0.0;
    }
    nonstationarity_loss_frozen(values, fit, lambda) / sd
}

/// Derivative of [`scaled_nonstationarity_loss`] with respect to each
/// fitted sample; the standard deviation is differentiated, responsibilities
/// and means are not.
pub fn scaled_nonstationarity_gradient(values: &[f64], fit: &GmmFit, lambda: f64) -> Result<Vec<f64>> {
    let raw = nonstationarity_gradient(values, fit, lambda)?;
    let (mean, sd) = population_std(values);
    if sd == 0.0 || lambda == 0.0 {
        return Ok(vec![0.0; values.len()]);
    }
    let loss = nonstationarity_loss_frozen(values, fit, lambda);
    let n = values.len() as f64;
    Ok(raw
        .iter()
        .zip(values)
        .map(|(g, v)| g / sd - loss / (sd * sd) * (v - mean) / (n * sd))
        .collect())
}

/// How per-sample silhouette scores are reduced to one number.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SilhouetteReduction {
    /// Mean over spike-assigned samples.
    #[default]
    SpikeMean,
    /// Mean over every fitted sample.
    AllMean,
    /// Smaller of the two per-class means.
    MinClass,
}

/// Pseudo-silhouette of the fitted samples (`values` aligned with `fit.indices`).
pub fn silhouette(values: &[f64], fit: &GmmFit, reduction: SilhouetteReduction) -> Result<f64> {
    let (mut spike_sum, mut spike_n, mut null_sum, mut null_n) = (0.0, 0usize, 0.0, 0usize);
    for &x in values {
        let spike = fit.is_spike(x);
        let (own, other) = if spike {
            (fit.mu_spike, fit.mu_null)
        } else {
            (fit.mu_null, fit.mu_spike)
        };
        let a = (x - own).abs();
        let b = (x - other).abs();
        let m = a.max(b);
        let score = if m > 0.0 { (b - a) / m } else { 0.0 };
        if spike {
            spike_sum += score;
            spike_n += 1;
        } else {
            null_sum += score;
            null_n += 1;
        }
    }
    if spike_n < 2 {
        return Err(Error::Quality(format!("{spike_n} spike-assigned samples")));
    }
    let spike_mean = spike_sum / spike_n as f64;
    Ok(match reduction {
        SilhouetteReduction::SpikeMean => spike_mean,
        SilhouetteReduction::AllMean => (spike_sum + null_sum) / (spike_n + null_n) as f64,
        SilhouetteReduction::MinClass if null_n > 0 => spike_mean.min(null_sum / null_n as f64),
        SilhouetteReduction::MinClass => spike_mean,
    })
}

/// Peaks of `trace` hard-assigned to the spike component.
pub fn to_spikes(trace: &[f64], fit: &GmmFit, peak_window: usize, fs_hz: f64) -> Result<SpikeTrain> {
    let stamps: Vec<usize> = find_peaks(trace, peak_window)
        .into_iter()
        .filter(|&t| fit.is_spike(trace[t]))
        .collect();
    if stamps.is_empty() {
        return Err(Error::Quality("no peaks assigned to the spike component".into()));
    }
    Ok(SpikeTrain {
        timestamps: stamps,
        len: trace.len(),
        fs_hz,
    })
}

/// Peak finding, seeding and EM in one call.
pub fn fit_trace<R: Rng + ?Sized>(
    trace: &[f64],
    peak_window: usize,
    opts: &SeedingOptions,
    em_steps: usize,
    rng: &mut R,
) -> Result<GmmFit> {
    let peaks = find_peaks(trace, peak_window);
    let fit0 = init_gmm(trace, &peaks, opts, rng)?;
    let values = fit0.fitted_values(trace);
    let fit = em_fit(&values, &fit0, em_steps)?;
    fit.check()?;
    Ok(fit)
}

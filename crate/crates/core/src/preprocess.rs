//! Filtering, delay extension and ZCA whitening.
//!
//! The pipeline order is fixed: filter, then extend, then whiten.

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::{self, Execution, BLOCK_COLUMNS};
use crate::simgen::MultichannelSignal;

/// One direct-form-II-transposed biquad.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Biquad {
    pub b: [f64; 3],
    /// `a[0]` is normalised to one and omitted.
    pub a: [f64; 2],
}

impl Biquad {
    fn dc_gain(&self) -> f64 {
        (self.b[0] + self.b[1] + self.b[2]) / (1.0 + self.a[0] + self.a[1])
    }

    /// State that holds the output steady for a constant input `x0`.
    fn steady_state(&self, x0: f64) -> [f64; 2] {
        let y = self.dc_gain() * x0;
        let z2 = self.b[2] * x0 - self.a[1] * y;
        let z1 = self.b[1] * x0 - self.a[0] * y + z2;
        [z1, z2]
    }

    fn run(&self, data: &mut [f64], mut z: [f64; 2]) {
        for v in data.iter_mut() {
            let x = *v;
            let y = self.b[0] * x + z[0];
            z[0] = self.b[1] * x - self.a[0] * y + z[1];
            z[1] = self.b[2] * x - self.a[1] * y;
            *v = y;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Band {
    Lowpass,
    Highpass,
}

/// Fourth-order Butterworth as two biquads (bilinear transform, prewarped).
pub fn butterworth4(cutoff_hz: f64, fs_hz: f64, band: Band) -> Result<[Biquad; 2]> {
    let nyquist = fs_hz / 2.0;
    if !(cutoff_hz > 0.0 && cutoff_hz < nyquist) {
        return Err(Error::param(format!(
            "cutoff {cutoff_hz} Hz must lie strictly between 0 and Nyquist ({nyquist} Hz)"
        )));
    }
    let k = (std::f64::consts::PI * cutoff_hz / fs_hz).tan();
    let k2 = k * k;
    let mut sections = [Biquad {
        b: [0.0; 3],
        a: [0.0; 2],
    }; 2];
    // analog prototype pole pairs at angles 5pi/8 and 7pi/8
    for (idx, section) in sections.iter_mut().enumerate() {
        let theta = std::f64::consts::PI * (2 * idx + 5) as f64 / 8.0;
        let q = -2.0 * theta.cos();
        let norm = 1.0 / (1.0 + q * k + k2);
        let a = [2.0 * (k2 - 1.0) * norm, (1.0 - q * k + k2) * norm];
        let b = match band {
            Band::Lowpass => [k2 * norm, 2.0 * k2 * norm, k2 * norm],
            Band::Highpass => [norm, -2.0 * norm, norm],
        };
        *section = Biquad { b, a };
    }
    Ok(sections)
}

/// Zero-phase application of a biquad cascade with odd-reflection padding
/// and steady-state initial conditions.
pub fn filtfilt(sections: &[Biquad], x: &[f64]) -> Vec<f64> {
    let n = x.len();
    if n == 0 {
        return Vec::new();
    }
    let pad = (6 * sections.len()).min(n - 1);
    let mut ext = Vec::with_capacity(n + 2 * pad);
    for i in (1..=pad).rev() {
        ext.push(2.0 * x[0] - x[i]);
    }
    ext.extend_from_slice(x);
    for i in 1..=pad {
        ext.push(2.0 * x[n - 1] - x[n - 1 - i]);
    }
    cascade(sections, &mut ext);
    ext.reverse();
    cascade(sections, &mut ext);
    ext.reverse();
    ext[pad..pad + n].to_vec()
}

fn cascade(sections: &[Biquad], data: &mut [f64]) {
    for sec in sections {
        let z = sec.steady_state(data[0]);
        sec.run(data, z);
    }
}

/// Zero-phase fourth-order Butterworth high-pass and/or low-pass filtering.
/// With neither cutoff the signal is returned unchanged.
pub fn filter_signal(
    signal: &MultichannelSignal,
    low_hz: Option<f64>,
    high_hz: Option<f64>,
) -> Result<MultichannelSignal> {
    if let (Some(lo), Some(hi)) = (low_hz, high_hz) {
        if lo >= hi {
            return Err(Error::param(format!("band edges {lo} Hz >= {hi} Hz")));
        }
    }
    let mut sections = Vec::new();
    if let Some(lo) = low_hz {
        sections.extend(butterworth4(lo, signal.fs_hz, Band::Highpass)?);
    }
    if let Some(hi) = high_hz {
        sections.extend(butterworth4(hi, signal.fs_hz, Band::Lowpass)?);
    }
    if sections.is_empty() {
        return Ok(signal.clone());
    }
    let mut out = Array2::<f64>::zeros(signal.samples.raw_dim());
    for (src, mut dst) in signal.samples.outer_iter().zip(out.outer_iter_mut()) {
        let row = src.to_vec();
        dst.assign(&Array1::from(filtfilt(&sections, &row)));
    }
    MultichannelSignal::new(out, signal.fs_hz)
}

/// Stacks `k_ext` delayed copies of every channel: row `i*k_ext + k` at
/// column `t` holds `x[i, t-k]`, zero before the record start.
pub fn extend(samples: ArrayView2<f64>, k_ext: usize) -> Result<Array2<f64>> {
    if k_ext == 0 {
        return Err(Error::param("extension factor must be at least 1"));
    }
    let (n, len) = samples.dim();
    let mut out = Array2::<f64>::zeros((n * k_ext, len));
    for i in 0..n {
        let src = samples.row(i);
        for k in 0..k_ext.min(len) {
            out.slice_mut(s![i * k_ext + k, k..]).assign(&src.slice(s![..len - k]));
        }
    }
    Ok(out)
}

/// Delay-extended observations whitened with a ZCA transform.
#[derive(Debug, Clone)]
pub struct ExtendedWhitenedSignal {
    /// `(N*k_ext) x T` whitened observations.
    pub data: Array2<f64>,
    /// Symmetric `C^{-1/2}`.
    pub whitening: Array2<f64>,
    /// Row means removed before whitening.
    pub mean: Array1<f64>,
    pub fs_hz: f64,
    pub k_ext: usize,
}

impl ExtendedWhitenedSignal {
    pub fn dim(&self) -> usize {
        self.data.nrows()
    }

    pub fn len(&self) -> usize {
        self.data.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Maps whitened data back to the extended domain.
    pub fn unwhiten(&self) -> Result<Array2<f64>> {
        let inv = invert(&self.whitening)?;
        let mut out = inv.dot(&self.data);
        out += &self.mean.view().insert_axis(Axis(1));
        Ok(out)
    }
}

fn invert(m: &Array2<f64>) -> Result<Array2<f64>> {
    let d = m.nrows();
    let mat = DMatrix::from_row_iterator(d, d, m.iter().copied());
    let inv = mat
        .try_inverse()
        .ok_or_else(|| Error::Numeric("whitening matrix is singular".into()))?;
    Ok(Array2::from_shape_fn((d, d), |(i, j)| inv[(i, j)]))
}

/// Relative eigenvalue regularisation added before inversion.
pub const ZCA_REGULARIZATION: f64 = 1e-9;

/// Row means and covariance, accumulated over fixed column blocks and
/// reduced in block order.
pub fn mean_and_covariance(x: ArrayView2<f64>, exec: Execution) -> (Array1<f64>, Array2<f64>) {
    let (d, len) = x.dim();
    let sums = exec::map_blocks(len, BLOCK_COLUMNS, exec, |r| x.slice(s![.., r]).sum_axis(Axis(1)));
    let mut mean = Array1::<f64>::zeros(d);
    for part in &sums {
        mean += part;
    }
    mean /= len.max(1) as f64;
    let partials = exec::map_blocks(len, BLOCK_COLUMNS, exec, |r| {
        let centred = &x.slice(s![.., r]) - &mean.view().insert_axis(Axis(1));
        centred.dot(&centred.t())
    });
    let mut cov = Array2::<f64>::zeros((d, d));
    for part in &partials {
        cov += part;
    }
    cov /= len.max(1) as f64;
    (mean, cov)
}

/// ZCA whitening of an extended matrix.
pub fn zca_whiten(
    extended: ArrayView2<f64>,
    fs_hz: f64,
    k_ext: usize,
    exec: Execution,
) -> Result<ExtendedWhitenedSignal> {
    let (d, len) = extended.dim();
    if d == 0 || len == 0 {
        return Err(Error::param("cannot whiten an empty matrix"));
    }
    if extended.iter().any(|v| !v.is_finite()) {
        return Err(Error::Data("extended signal contains non-finite values".into()));
    }
    if len <= d {
        log::warn!("whitening {d} rows from only {len} samples; covariance is rank deficient");
    }
    let (mean, cov) = mean_and_covariance(extended, exec);
    let whitening = inverse_sqrt(&cov)?;
    let parts = exec::map_blocks(len, BLOCK_COLUMNS, exec, |r| {
        let centred = &extended.slice(s![.., r]) - &mean.view().insert_axis(Axis(1));
        whitening.dot(&centred)
    });
    let mut data = Array2::<f64>::zeros((d, len));
    for (r, part) in exec::blocks(len, BLOCK_COLUMNS).into_iter().zip(parts) {
        data.slice_mut(s![.., r]).assign(&part);
    }
    Ok(ExtendedWhitenedSignal {
        data,
        whitening,
        mean,
        fs_hz,
        k_ext,
    })
}

/// Symmetric inverse square root with trace-relative eigenvalue regularisation.
pub fn inverse_sqrt(cov: &Array2<f64>) -> Result<Array2<f64>> {
    let d = cov.nrows();
    let mat = DMatrix::from_fn(d, d, |i, j| 0.5 * (cov[[i, j]] + cov[[j, i]]));
    let trace: f64 = (0..d).map(|i| mat[(i, i)]).sum();
    if !(trace > 0.0) {
        return Err(Error::Numeric("covariance has zero trace".into()));
    }
    let reg = ZCA_REGULARIZATION * trace / d as f64;
    let eig = SymmetricEigen::new(mat);
    let scale: Vec<f64> = eig
        .eigenvalues
        .iter()
        .map(|&l| 1.0 / (l.max(0.0) + reg).sqrt())
        .collect();
    let v = &eig.eigenvectors;
    let mut w = Array2::<f64>::zeros((d, d));
    for i in 0..d {
        for j in i..d {
            let mut acc = 0.0;
            for k in 0..d {
                acc += v[(i, k)] * scale[k] * v[(j, k)];
            }
            w[[i, j]] = acc;
            w[[j, i]] = acc;
        }
    }
    Ok(w)
}

/// Settings for the filter, extend and whiten pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PreprocessConfig {
    /// High-pass cutoff.
    pub low_hz: Option<f64>,
    /// Low-pass cutoff.
    pub high_hz: Option<f64>,
    pub k_ext: usize,
    pub execution: Execution,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            low_hz: None,
            high_hz: None,
            k_ext: 20,
            execution: Execution::Parallel,
        }
    }
}

/// Extends and whitens an already filtered signal.
pub fn extend_and_whiten(signal: &MultichannelSignal, k_ext: usize, exec: Execution) -> Result<ExtendedWhitenedSignal> {
    let extended = extend(signal.samples.view(), k_ext)?;
    zca_whiten(extended.view(), signal.fs_hz, k_ext, exec)
}

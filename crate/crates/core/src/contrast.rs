//! Signed-power independence contrast for a single separation vector.
//!
//! The loss is `-mean(sign(s) |s|^e)` over the (clamped) source estimate
//! `s = w . x`. It is minimised under a unit-norm constraint on `w`.

use ndarray::{s, Array1, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::{self, Execution, BLOCK_COLUMNS};

/// Unit-norm separation vector.
#[derive(Debug, Clone, PartialEq)]
pub struct SeparationVector(Array1<f64>);

impl SeparationVector {
    /// Normalises `w`; fails on a zero or non-finite vector.
    pub fn new(w: Array1<f64>) -> Result<Self> {
        renormalize(w.view()).map(Self)
    }

    pub fn view(&self) -> ArrayView1<'_, f64> {
        self.0.view()
    }

    pub fn as_slice(&self) -> &[f64] {
        self.0.as_slice().expect("contiguous")
    }

    pub fn into_inner(self) -> Array1<f64> {
        self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    /// Applies a raw update then projects back onto the unit sphere.
    pub fn update_with(&mut self, f: impl FnOnce(&mut [f64])) -> Result<()> {
        let mut raw = self.0.clone();
        f(raw.as_slice_mut().expect("contiguous"));
        self.0 = renormalize(raw.view())?;
        Ok(())
    }
}

pub fn renormalize(w: ArrayView1<f64>) -> Result<Array1<f64>> {
    let norm = w.dot(&w).sqrt();
    if !(norm > 0.0 && norm.is_finite()) {
        return Err(Error::Numeric(format!("cannot normalise vector of norm {norm}")));
    }
    Ok(w.mapv(|v| v / norm))
}

/// Removes the component of `grad` along the unit vector `w`.
///
/// The contrast is homogeneous in `w`, so most of the raw gradient points
/// along `w` and is discarded by the renormalisation anyway. Left in, it
/// dominates the per-coordinate RMSprop scaling and stalls the rotation.
pub fn tangent_projection(w: ArrayView1<f64>, grad: ArrayView1<f64>) -> Array1<f64> {
    let radial = w.dot(&grad);
    &grad - &w.mapv(|v| v * radial)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ContrastConfig {
    pub exponent: u32,
    /// Clamp the source at the median of its `k` largest values; `None` disables it.
    pub clamp_top_k: Option<usize>,
    pub learning_rate: f64,
    pub rmsprop_smoothing: f64,
    pub rmsprop_epsilon: f64,
}

impl Default for ContrastConfig {
    fn default() -> Self {
        Self {
            exponent: 2,
            clamp_top_k: Some(30),
            learning_rate: 2e-3,
            rmsprop_smoothing: RMSPROP_RHO,
            rmsprop_epsilon: RMSPROP_EPS,
        }
    }
}

pub const RMSPROP_RHO: f64 = 0.99;
pub const RMSPROP_EPS: f64 = 1e-8;

/// RMSprop state for a flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct RmsProp {
    pub avg: Vec<f64>,
    pub steps: u64,
    pub learning_rate: f64,
    pub rho: f64,
    pub eps: f64,
}

impl RmsProp {
    pub fn new(len: usize, learning_rate: f64) -> Self {
        Self::with_constants(len, learning_rate, RMSPROP_RHO, RMSPROP_EPS)
    }

    pub fn with_constants(len: usize, learning_rate: f64, rho: f64, eps: f64) -> Self {
        Self {
            avg: vec![0.0; len],
            steps: 0,
            learning_rate,
            rho,
            eps,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) -> Result<()> {
        if params.len() != self.avg.len() || grad.len() != self.avg.len() {
            return Err(Error::param(format!(
                "optimizer holds {} parameters, got {} params and {} gradients",
                self.avg.len(),
                params.len(),
                grad.len()
            )));
        }
        for ((p, g), a) in params.iter_mut().zip(grad).zip(self.avg.iter_mut()) {
            *a = self.rho * *a + (1.0 - self.rho) * g * g;
            *p -= self.learning_rate * g / (a.sqrt() + self.eps);
        }
        self.steps += 1;
        Ok(())
    }
}

/// Source estimate `s[t] = w . x[:, t]`.
pub fn predict_source(w: ArrayView1<f64>, x: ArrayView2<f64>, exec: Execution) -> Result<Array1<f64>> {
    if w.len() != x.nrows() {
        return Err(Error::param(format!(
            "separation vector has {} entries for {} rows",
            w.len(),
            x.nrows()
        )));
    }
    let parts = exec::map_blocks(x.ncols(), BLOCK_COLUMNS, exec, |r| {
        let mut acc = Array1::<f64>::zeros(r.len());
        for (wd, row) in w.iter().zip(x.outer_iter()) {
            if *wd != 0.0 {
                acc.scaled_add(*wd, &row.slice(s![r.clone()]));
            }
        }
        acc
    });
    let mut out = Array1::<f64>::zeros(x.ncols());
    for (r, part) in exec::blocks(x.ncols(), BLOCK_COLUMNS).into_iter().zip(parts) {
        out.slice_mut(s![r]).assign(&part);
    }
    Ok(out)
}

/// Median of the `k` largest values; `None` when the trace is shorter than `k`.
pub fn clamp_threshold(trace: &[f64], k: usize) -> Option<f64> {
    if k == 0 || trace.len() < k {
        return None;
    }
    let mut v = trace.to_vec();
    let split = v.len() - k;
    v.select_nth_unstable_by(split, |a, b| a.total_cmp(b));
    let mut top = v[split..].to_vec();
    top.sort_unstable_by(|a, b| a.total_cmp(b));
    Some(if k % 2 == 1 {
        top[k / 2]
    } else {
        0.5 * (top[k / 2 - 1] + top[k / 2])
    })
}

/// `min(s[t], c)` with `c` the median of the `top_k` largest values.
pub fn clamp_trace(trace: &[f64], top_k: usize) -> Vec<f64> {
    match clamp_threshold(trace, top_k) {
        Some(c) => trace.iter().map(|&v| v.min(c)).collect(),
        None => trace.to_vec(),
    }
}

fn signed_power(v: f64, e: u32) -> f64 {
    v.signum() * v.abs().powi(e as i32)
}

/// Loss at a fixed clamp threshold (`None` = unclamped).
pub fn contrast_value_at(trace: &[f64], e: u32, threshold: Option<f64>) -> f64 {
    if trace.is_empty() {
        return 0.0;
    }
    let sum: f64 = trace
        .iter()
        .map(|&v| {
            let v = threshold.map_or(v, |c| v.min(c));
            if v == 0.0 {
                0.0
            } else {
                signed_power(v, e)
            }
        })
        .sum();
    -sum / trace.len() as f64
}

/// Loss with the clamp threshold computed from the trace itself.
pub fn contrast_value(trace: &[f64], e: u32, clamp_top_k: Option<usize>) -> f64 {
    let c = clamp_top_k.and_then(|k| clamp_threshold(trace, k));
    contrast_value_at(trace, e, c)
}

/// Per-sample derivative of the loss with respect to the source estimate.
///
/// The clamp threshold is a constant; samples above it contribute nothing.
pub fn source_gradient(trace: &[f64], e: u32, threshold: Option<f64>) -> Vec<f64> {
    let scale = -(e as f64) / trace.len().max(1) as f64;
    trace
        .iter()
        .map(|&v| match threshold {
            Some(c) if v > c => 0.0,
            _ => scale * v.abs().powi(e as i32 - 1),
        })
        .collect()
}

/// `sum_t g[t] x[:, t]` reduced over column blocks in order.
pub fn project_gradient(g: &[f64], x: ArrayView2<f64>, exec: Execution) -> Array1<f64> {
    let parts = exec::map_blocks(x.ncols(), BLOCK_COLUMNS, exec, |r| {
        let gb = ArrayView1::from(&g[r.clone()]);
        x.slice(s![.., r]).dot(&gb)
    });
    let mut out = Array1::<f64>::zeros(x.nrows());
    for part in &parts {
        out += part;
    }
    out
}

/// Gradient of the contrast with respect to `w`, returned with the loss
/// evaluated at the same clamp threshold.
pub fn contrast_gradient(
    w: ArrayView1<f64>,
    x: ArrayView2<f64>,
    e: u32,
    clamp_top_k: Option<usize>,
    exec: Execution,
) -> Result<(Array1<f64>, f64)> {
    if e < 2 {
        return Err(Error::param("contrast exponent must be at least 2"));
    }
    let trace = predict_source(w, x, exec)?;
    let trace = trace.as_slice().expect("contiguous");
    let c = clamp_top_k.and_then(|k| clamp_threshold(trace, k));
    let g = source_gradient(trace, e, c);
    Ok((project_gradient(&g, x, exec), contrast_value_at(trace, e, c)))
}

/// Exponent used at pretraining step `step` of `total`: 2 for the first
/// half, then one higher every `total/8` steps, capped at 6.
pub fn exponent_schedule(step: usize, total: usize) -> u32 {
    if total == 0 {
        return MAX_EXPONENT;
    }
    let half = total / 2;
    if step < half {
        return 2;
    }
    let stage = (total / 8).max(1);
    (3 + (step - half) / stage).min(MAX_EXPONENT as usize) as u32
}

pub const MAX_EXPONENT: u32 = 6;

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::{array, Array2};

    #[test]
    fn basis_vector_selects_row() {
        let x = array![[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]];
        let s = predict_source(array![1.0, 0.0].view(), x.view(), Execution::Sequential).unwrap();
        assert_eq!(s, array![1.0, 2.0, 3.0]);
        let z = predict_source(
            array![0.3, 0.7].view(),
            Array2::zeros((2, 4)).view(),
            Execution::Sequential,
        )
        .unwrap();
        assert!(z.iter().all(|&v| v == 0.0));
        assert!(predict_source(array![1.0].view(), x.view(), Execution::Sequential).is_err());
    }

    #[test]
    fn contrast_examples() {
        assert_eq!(contrast_value(&[0.0; 4], 2, None), 0.0);
        assert_eq!(contrast_value(&[2.0, 0.0, 0.0, 0.0], 2, None), -1.0);
        assert_eq!(contrast_value(&[-1.0, 1.0], 3, None), 0.0);
        // even exponent keeps the sign
        assert_eq!(contrast_value(&[-2.0, 0.0], 2, None), 2.0);
    }

    #[test]
    fn clamp_examples() {
        assert_eq!(clamp_trace(&[2.0; 40], 30), vec![2.0; 40]);
        let mut spiky = vec![1.0; 100];
        spiky.push(1000.0);
        let clamped = clamp_trace(&spiky, 30);
        assert!(clamped.iter().all(|&v| v == 1.0));
        let ramp: Vec<f64> = (1..=100).map(f64::from).collect();
        assert_eq!(clamp_threshold(&ramp, 30), Some(85.5));
        assert_eq!(clamp_threshold(&ramp[..10], 30), None);
    }

    #[test]
    fn single_column_gradient() {
        // w.v = 2, e = 2: d/dw -(w.v)^2 = -2 (w.v) v = -4 v
        let v = array![[1.0], [1.0]];
        let w = array![1.0, 1.0];
        let (g, loss) = contrast_gradient(w.view(), v.view(), 2, None, Execution::Sequential).unwrap();
        assert_abs_diff_eq!(loss, -4.0);
        assert_abs_diff_eq!(g[0], -4.0);
        assert_abs_diff_eq!(g[1], -4.0);
        let (g0, _) =
            contrast_gradient(w.view(), Array2::zeros((2, 5)).view(), 3, None, Execution::Sequential).unwrap();
        assert!(g0.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn clamped_samples_pass_no_gradient() {
        let g = source_gradient(&[1.0, 5.0, -2.0], 3, Some(2.0));
        assert_eq!(g[1], 0.0);
        assert_abs_diff_eq!(g[0], -1.0);
        assert_abs_diff_eq!(g[2], -4.0);
    }

    #[test]
    fn rmsprop_examples() {
        let mut p = vec![1.0, -2.0];
        let mut opt = RmsProp::new(2, 0.1);
        opt.step(&mut p, &[0.0, 0.0]).unwrap();
        assert_eq!(p, vec![1.0, -2.0]);

        let mut p = vec![0.0];
        let mut opt = RmsProp::new(1, 0.01);
        opt.step(&mut p, &[0.5]).unwrap();
        let expected = -0.01 * 0.5 / ((0.01f64 * 0.25).sqrt() + 1e-8);
        assert_abs_diff_eq!(p[0], expected, epsilon = 1e-15);
        let before = p[0];
        opt.step(&mut p, &[0.5]).unwrap();
        assert!((p[0] - before).abs() < expected.abs());
        assert!(opt.avg.iter().all(|&a| a >= 0.0));
        assert!(opt.step(&mut p, &[0.1, 0.2]).is_err());
    }

    #[test]
    fn renormalize_examples() {
        assert_eq!(renormalize(array![3.0, 4.0].view()).unwrap(), array![0.6, 0.8]);
        let unit = array![0.6, 0.8];
        assert_eq!(renormalize(unit.view()).unwrap(), unit);
        assert!(renormalize(array![0.0, 0.0].view()).is_err());
    }

    #[test]
    fn schedule_ramps_two_to_six() {
        let total = 80;
        let seq: Vec<u32> = (0..total).map(|s| exponent_schedule(s, total)).collect();
        assert_eq!(seq[0], 2);
        assert_eq!(seq[39], 2);
        assert_eq!(seq[40], 3);
        assert_eq!(seq[50], 4);
        assert_eq!(seq[60], 5);
        assert_eq!(seq[70], 6);
        assert_eq!(seq[79], 6);
        assert!(seq.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn tangent_projection_removes_radial_part() {
        let w = renormalize(Array1::from(vec![3.0, 4.0, 0.0]).view()).unwrap();
        let g = Array1::from(vec![1.0, 2.0, -1.0]);
        let t = tangent_projection(w.view(), g.view());
        assert!(w.dot(&t).abs() < 1e-15);
        // the tangential part is kept
        assert_abs_diff_eq!(t[2], -1.0, epsilon = 1e-15);
        let radial = tangent_projection(w.view(), w.mapv(|v| 2.0 * v).view());
        assert!(radial.iter().all(|v| v.abs() < 1e-15));
    }
}

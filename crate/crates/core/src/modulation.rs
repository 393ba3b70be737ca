//! Source estimates and contrast gradients under a time-varying modulation
//! of the separation vector.
//!
//! The network is evaluated on a coarse grid of sample indices and its gain
//! and bias are interpolated linearly in between. Its input is a sum of slow
//! sines, so a stride of a few samples changes the outputs by a negligible
//! amount; stride 1 reproduces the per-sample outputs exactly.
//!
//! The contrast kernel computes the trace and the gradient in a single sweep
//! over cache-sized column blocks. The clamp threshold is only known after
//! the sweep, so the few samples above it are removed from the gradient
//! afterwards.

use std::ops::Range;

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2};

use crate::compnet::{CompensationNetwork, Mode};
use crate::contrast;
use crate::error::{Error, Result};
use crate::exec::{self, Execution};

/// Columns per block in the fused kernels; small enough that a block of the
/// extended signal stays in cache between the two sweeps.
const KERNEL_BLOCK: usize = 256;

/// Network gain and bias sampled every `stride` samples.
#[derive(Debug, Clone, PartialEq)]
pub struct ModulationGrid {
    pub stride: usize,
    pub len: usize,
    /// `exp(log_a)`, `dim x grid`.
    pub gain: Array2<f64>,
    /// `dim x grid`.
    pub bias: Array2<f64>,
}

impl ModulationGrid {
    /// Evaluates `net` in evaluation mode at `0, stride, 2*stride, ...`,
    /// covering `len` samples.
    pub fn evaluate(
        net: &CompensationNetwork,
        period_fracs: &[f64],
        len: usize,
        stride: usize,
        exec: Execution,
    ) -> Result<Self> {
        if stride == 0 || len < 2 {
            return Err(Error::param("grid needs a positive stride and two samples"));
        }
        if period_fracs.len() != net.in_dim {
            return Err(Error::param("encoding width does not match the network"));
        }
        let points = (len - 1) / stride + 2;
        let enc = Array2::from_shape_fn((period_fracs.len(), points), |(k, g)| {
            let t = (g * stride) as f64;
            (2.0 * std::f64::consts::PI * t / (period_fracs[k] * len as f64)).sin()
        });
        let parts = exec::map_blocks(points, exec::BLOCK_COLUMNS, exec, |r| {
            net.forward(enc.slice(s![.., r]), Mode::Eval, None).map(|(out, _)| out)
        });
        let d = net.out_dim;
        let mut gain = Array2::<f64>::zeros((d, points));
        let mut bias = Array2::<f64>::zeros((d, points));
        for (r, part) in exec::blocks(points, exec::BLOCK_COLUMNS).into_iter().zip(parts) {
            let out = part?;
            gain.slice_mut(s![.., r.clone()])
                .assign(&out.slice(s![..d, ..]).mapv(f64::exp));
            bias.slice_mut(s![.., r]).assign(&out.slice(s![d.., ..]));
        }
        Ok(Self {
            stride,
            len,
            gain,
            bias,
        })
    }

    pub fn dim(&self) -> usize {
        self.gain.nrows()
    }

    /// Interpolated `(gain, bias)` for element `d` at sample `t`.
    pub fn at(&self, d: usize, t: usize) -> (f64, f64) {
        let (k, f) = (t / self.stride, (t % self.stride) as f64 / self.stride as f64);
        let g = self.gain.row(d);
        let b = self.bias.row(d);
        (g[k] + f * (g[k + 1] - g[k]), b[k] + f * (b[k + 1] - b[k]))
    }
}

fn check(w: ArrayView1<f64>, x: ArrayView2<f64>, m: Option<&ModulationGrid>) -> Result<()> {
    if w.len() != x.nrows() {
        return Err(Error::param(format!(
            "separation vector has {} entries for {} rows",
            w.len(),
            x.nrows()
        )));
    }
    if let Some(m) = m {
        if m.dim() != x.nrows() || m.len != x.ncols() {
            return Err(Error::param("modulation grid does not match the signal"));
        }
    }
    Ok(())
}

/// Grid intervals intersecting `r`: `(grid index, local start, local end)`.
fn segments(stride: usize, r: &Range<usize>) -> Vec<(usize, usize, usize)> {
    let mut out = Vec::with_capacity(r.len() / stride + 2);
    let mut t = r.start;
    while t < r.end {
        let k = t / stride;
        let end = ((k + 1) * stride).min(r.end);
        out.push((k, t - r.start, end - r.start));
        t = end;
    }
    out
}

/// Interpolation fractions for the columns of `r`.
fn fractions(stride: usize, r: &Range<usize>) -> Vec<f64> {
    r.clone().map(|t| (t % stride) as f64 / stride as f64).collect()
}

fn row<'a>(x: &'a ArrayView2<'_, f64>, d: usize, r: &Range<usize>) -> &'a [f64] {
    &x.row(d).to_slice().expect("standard layout")[r.clone()]
}

/// Trace of one block of columns.
fn block_trace(w: ArrayView1<f64>, x: &ArrayView2<f64>, m: Option<&ModulationGrid>, r: &Range<usize>) -> Vec<f64> {
    let mut acc = vec![0.0; r.len()];
    let Some(m) = m else {
        for (d, &wd) in w.iter().enumerate() {
            for (a, v) in acc.iter_mut().zip(row(x, d, r)) {
                *a += wd * v;
            }
        }
        return acc;
    };
    let ff = fractions(m.stride, r);
    let segs = segments(m.stride, r);
    for (d, &wd) in w.iter().enumerate() {
        let xr = row(x, d, r);
        let g = m.gain.row(d);
        let b = m.bias.row(d);
        for &(k, lo, hi) in &segs {
            let (g0, dg) = (g[k], g[k + 1] - g[k]);
            let (b0, db) = (b[k], b[k + 1] - b[k]);
            for ((a, v), f) in acc[lo..hi].iter_mut().zip(&xr[lo..hi]).zip(&ff[lo..hi]) {
                *a += ((g0 + f * dg) * wd + (b0 + f * db)) * v;
            }
        }
    }
    acc
}

/// `sum_t g[t] gain[d,t] x[d,t]` for every row of one block.
fn block_projection(g: &[f64], x: &ArrayView2<f64>, m: Option<&ModulationGrid>, r: &Range<usize>) -> Vec<f64> {
    let Some(m) = m else {
        return (0..x.nrows())
            .map(|d| row(x, d, r).iter().zip(g).map(|(a, b)| a * b).sum())
            .collect();
    };
    let ff = fractions(m.stride, r);
    let segs = segments(m.stride, r);
    (0..x.nrows())
        .map(|d| {
            let xr = row(x, d, r);
            let gain = m.gain.row(d);
            let mut acc = 0.0;
            for &(k, lo, hi) in &segs {
                let (g0, dg) = (gain[k], gain[k + 1] - gain[k]);
                for ((v, gv), f) in xr[lo..hi].iter().zip(&g[lo..hi]).zip(&ff[lo..hi]) {
                    acc += gv * (g0 + f * dg) * v;
                }
            }
            acc
        })
        .collect()
}

/// `s[t] = sum_d (gain[d,t] w[d] + bias[d,t]) x[d,t]`, or `w . x[:, t]`
/// without modulation.
pub fn modulated_trace(
    w: ArrayView1<f64>,
    x: ArrayView2<f64>,
    m: Option<&ModulationGrid>,
    exec: Execution,
) -> Result<Array1<f64>> {
    check(w, x, m)?;
    let x = x.as_standard_layout();
    let x = x.view();
    let parts = exec::map_blocks(x.ncols(), KERNEL_BLOCK, exec, |r| block_trace(w, &x, m, &r));
    Ok(Array1::from_iter(parts.into_iter().flatten()))
}

/// Trace, contrast loss and its gradient with respect to the unmodulated
/// vector.
#[derive(Debug, Clone)]
pub struct ContrastPass {
    pub trace: Array1<f64>,
    pub grad: Array1<f64>,
    pub loss: f64,
    pub threshold: Option<f64>,
}

struct BlockPart {
    trace: Vec<f64>,
    grad: Vec<f64>,
    top: Vec<f64>,
}

fn top_values(v: &[f64], k: usize) -> Vec<f64> {
    let mut v = v.to_vec();
    if v.len() > k {
        let split = v.len() - k;
        v.select_nth_unstable_by(split, |a, b| a.total_cmp(b));
        v.drain(..split);
    }
    v
}

/// One sweep computing the trace and `dL/dw` for the signed-power contrast.
pub fn contrast_pass(
    w: ArrayView1<f64>,
    x: ArrayView2<f64>,
    m: Option<&ModulationGrid>,
    e: u32,
    clamp_top_k: Option<usize>,
    exec: Execution,
) -> Result<ContrastPass> {
    if e < 2 {
        return Err(Error::param("contrast exponent must be at least 2"));
    }
    check(w, x, m)?;
    let len = x.ncols();
    let scale = -(e as f64) / len.max(1) as f64;
    let k = clamp_top_k.unwrap_or(0);
    let x = x.as_standard_layout();
    let x = x.view();
    let parts = exec::map_blocks(len, KERNEL_BLOCK, exec, |r| {
        let trace = block_trace(w, &x, m, &r);
        let g: Vec<f64> = trace.iter().map(|v| scale * v.abs().powi(e as i32 - 1)).collect();
        let grad = block_projection(&g, &x, m, &r);
        BlockPart {
            top: if k > 0 { top_values(&trace, k) } else { Vec::new() },
            trace,
            grad,
        }
    });
    let mut grad = Array1::<f64>::zeros(x.nrows());
    let mut trace = Vec::with_capacity(len);
    let mut tops = Vec::new();
    for part in parts {
        for (a, b) in grad.iter_mut().zip(&part.grad) {
            *a += b;
        }
        trace.extend(part.trace);
        tops.extend(part.top);
    }
    let threshold = clamp_top_k.and_then(|k| contrast::clamp_threshold(&tops, k));
    if let Some(c) = threshold {
        for (t, &v) in trace.iter().enumerate().filter(|(_, v)| **v > c) {
            let g = scale * v.abs().powi(e as i32 - 1);
            for (d, gd) in grad.iter_mut().enumerate() {
                let gain = m.map_or(1.0, |m| m.at(d, t).0);
                *gd -= g * gain * x[[d, t]];
            }
        }
    }
    let loss = contrast::contrast_value_at(&trace, e, threshold);
    Ok(ContrastPass {
        trace: Array1::from(trace),
        grad,
        loss,
        threshold,
    })
}

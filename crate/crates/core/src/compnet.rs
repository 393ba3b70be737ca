//! Time-conditioned compensation network.
//!
//! A small MLP maps a sinusoidal encoding of the sample index to a per-element
//! log-gain and bias for the separation vector:
//! `w(t) = exp(log_a(t)) * w + b(t)`.
//!
//! Parameters live in one flat vector so a single RMSprop state can drive
//! them. Activations are stored feature-major (`features x batch`).

use std::io::{Read, Write};

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, ArrayViewMut2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default encoding periods as fractions of the record length.
pub const DEFAULT_PERIOD_FRACS: [f64; 5] = [1.0 / 5.0, 1.0 / 7.0, 1.0 / 9.0, 1.0 / 11.0, 1.0 / 13.0];

/// Zero-phase sines of the sample index.
#[derive(Debug, Clone, PartialEq)]
pub struct PositionalEncoding {
    pub period_fracs: Vec<f64>,
    /// `periods x T`.
    pub matrix: Array2<f64>,
}

impl PositionalEncoding {
    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn len(&self) -> usize {
        self.matrix.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.matrix.is_empty()
    }

    /// Encoding columns at the given sample indices.
    pub fn gather(&self, indices: &[usize]) -> Array2<f64> {
        self.matrix.select(Axis(1), indices)
    }
}

/// `matrix[k, t] = sin(2 pi t / (period_fracs[k] * len))`.
pub fn encode_time(len: usize, period_fracs: &[f64]) -> Result<PositionalEncoding> {
    if len < 2 {
        return Err(Error::param("time encoding needs at least two samples"));
    }
    if period_fracs.is_empty() || period_fracs.iter().any(|&p| !(p > 0.0 && p.is_finite())) {
        return Err(Error::param("encoding periods must be positive"));
    }
    let matrix = Array2::from_shape_fn((period_fracs.len(), len), |(k, t)| {
        (2.0 * std::f64::consts::PI * t as f64 / (period_fracs[k] * len as f64)).sin()
    });
    Ok(PositionalEncoding {
        period_fracs: period_fracs.to_vec(),
        matrix,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CompNetConfig {
    pub hidden: usize,
    pub hidden_layers: usize,
    pub dropout: f64,
    pub init_std: f64,
    /// Weight of the previous running statistic in each update.
    pub bn_momentum: f64,
    pub bn_eps: f64,
}

impl Default for CompNetConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            hidden_layers: 3,
            dropout: 0.1,
            init_std: 0.01,
            bn_momentum: 0.9,
            bn_eps: 1e-5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics and dropout.
    Train,
    /// Running statistics, no dropout.
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct HiddenSlots {
    weight: usize,
    bias: usize,
    gamma: usize,
    beta: usize,
    fan_in: usize,
}

#[derive(Debug, Clone, PartialEq)]
struct Layout {
    hidden: Vec<HiddenSlots>,
    out_weight: usize,
    out_bias: usize,
    total: usize,
}

impl Layout {
    fn new(in_dim: usize, out_dim: usize, cfg: &CompNetConfig) -> Self {
        let h = cfg.hidden;
        let mut off = 0;
        let mut hidden = Vec::with_capacity(cfg.hidden_layers);
        let mut fan_in = in_dim;
        for _ in 0..cfg.hidden_layers {
            let slots = HiddenSlots {
                weight: off,
                bias: off + h * fan_in,
                gamma: off + h * fan_in + h,
                beta: off + h * fan_in + 2 * h,
                fan_in,
            };
            off += h * fan_in + 3 * h;
            hidden.push(slots);
            fan_in = h;
        }
        let out_weight = off;
        let out_bias = off + 2 * out_dim * fan_in;
        Layout {
            hidden,
            out_weight,
            out_bias,
            total: out_bias + 2 * out_dim,
        }
    }
}

/// Per-source compensation network.
#[derive(Debug, Clone, PartialEq)]
pub struct CompensationNetwork {
    pub in_dim: usize,
    /// Length of the separation vector; the network emits `2 * out_dim` values.
    pub out_dim: usize,
    pub config: CompNetConfig,
    pub seed: u64,
    pub params: Vec<f64>,
    pub running_mean: Vec<Array1<f64>>,
    pub running_var: Vec<Array1<f64>>,
    layout: Layout,
}

/// Activations retained for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    mode: Mode,
    batch: usize,
    shape: (usize, usize),
    /// Input of every hidden layer plus the input of the output layer.
    inputs: Vec<Array2<f64>>,
    xhat: Vec<Array2<f64>>,
    inv_std: Vec<Array1<f64>>,
    /// Post-normalisation values before the rectifier.
    normed: Vec<Array2<f64>>,
    /// Inverted-dropout scale per unit, absent when dropout is off.
    drop: Vec<Option<Array2<f64>>>,
    batch_mean: Vec<Array1<f64>>,
    batch_var: Vec<Array1<f64>>,
}

impl CompensationNetwork {
    /// Weights drawn from `N(0, init_std^2)`, biases zero, unit gains.
    pub fn new(in_dim: usize, out_dim: usize, config: CompNetConfig, seed: u64) -> Result<Self> {
        if in_dim == 0 || out_dim == 0 {
            return Err(Error::param("network dimensions must be positive"));
        }
        if config.hidden_layers > 0 && config.hidden == 0 {
            return Err(Error::param("hidden width must be positive"));
        }
        if !(0.0..1.0).contains(&config.dropout) {
            return Err(Error::param("dropout must lie in [0, 1)"));
        }
        if !(config.init_std >= 0.0) {
            return Err(Error::param("initialisation std must be non-negative"));
        }
        let layout = Layout::new(in_dim, out_dim, &config);
        let mut params = vec![0.0; layout.total];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, config.init_std).map_err(|e| Error::param(e.to_string()))?;
        let h = config.hidden;
        for slots in &layout.hidden {
            for p in &mut params[slots.weight..slots.weight + h * slots.fan_in] {
                *p = normal.sample(&mut rng);
            }
            params[slots.gamma..slots.gamma + h].fill(1.0);
        }
        for p in &mut params[layout.out_weight..layout.out_bias] {
            *p = normal.sample(&mut rng);
        }
        Ok(Self {
            in_dim,
            out_dim,
            running_mean: vec![Array1::zeros(h); config.hidden_layers],
            running_var: vec![Array1::ones(h); config.hidden_layers],
            config,
            seed,
            params,
            layout,
        })
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    fn last_width(&self) -> usize {
        if self.config.hidden_layers == 0 {
            self.in_dim
        } else {
            self.config.hidden
        }
    }

    fn weight(&self, layer: usize) -> ArrayView2<'_, f64> {
        let sl = self.layout.hidden[layer];
        let h = self.config.hidden;
        ArrayView2::from_shape((h, sl.fan_in), &self.params[sl.weight..sl.weight + h * sl.fan_in]).expect("layout")
    }

    fn vector(&self, start: usize, len: usize) -> ArrayView1<'_, f64> {
        ArrayView1::from(&self.params[start..start + len])
    }

    fn out_weight(&self) -> ArrayView2<'_, f64> {
        let w = self.last_width();
        ArrayView2::from_shape(
            (2 * self.out_dim, w),
            &self.params[self.layout.out_weight..self.layout.out_bias],
        )
        .expect("layout")
    }

    /// Sets the output layer to zero so the network emits `(0, 0)`.
    pub fn zero_output_layer(&mut self) {
        let end = self.layout.total;
        self.params[self.layout.out_weight..end].fill(0.0);
    }

    /// Runs the network on encoding columns `input` (`in_dim x batch`) and
    /// returns the raw `2*out_dim x batch` output. Dropout needs `rng` in
    /// training mode.
    pub fn forward(
        &self,
        input: ArrayView2<f64>,
        mode: Mode,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(Array2<f64>, ForwardCache)> {
        if input.nrows() != self.in_dim {
            return Err(Error::param(format!(
                "network expects {} inputs, got {}",
                self.in_dim,
                input.nrows()
            )));
        }
        let batch = input.ncols();
        let h = self.config.hidden;
        let eps = self.config.bn_eps;
        let n_layers = self.config.hidden_layers;
        let mut cache = ForwardCache {
            mode,
            batch,
            shape: (self.in_dim, self.out_dim),
            inputs: Vec::with_capacity(n_layers + 1),
            xhat: Vec::with_capacity(n_layers),
            inv_std: Vec::with_capacity(n_layers),
            normed: Vec::with_capacity(n_layers),
            drop: Vec::with_capacity(n_layers),
            batch_mean: Vec::with_capacity(n_layers),
            batch_var: Vec::with_capacity(n_layers),
        };
        let mut act = input.to_owned();
        for l in 0..n_layers {
            let sl = self.layout.hidden[l];
            let mut z = self.weight(l).dot(&act);
            z += &self.vector(sl.bias, h).insert_axis(Axis(1));
            let (mean, var) = match mode {
                Mode::Train => {
                    let mean = z.mean_axis(Axis(1)).unwrap_or_else(|| Array1::zeros(h));
                    let var = z
                        .outer_iter()
                        .zip(mean.iter())
                        .map(|(row, m)| row.iter().map(|v| (v - m).powi(2)).sum::<f64>() / batch.max(1) as f64)
                        .collect::<Array1<f64>>();
                    (mean, var)
                }
                Mode::Eval => (self.running_mean[l].clone(), self.running_var[l].clone()),
            };
            let inv_std = var.mapv(|v| 1.0 / (v + eps).sqrt());
            let mut xhat = z;
            xhat -= &mean.view().insert_axis(Axis(1));
            xhat *= &inv_std.view().insert_axis(Axis(1));
            let mut normed = xhat.clone();
            normed *= &self.vector(sl.gamma, h).insert_axis(Axis(1));
            normed += &self.vector(sl.beta, h).insert_axis(Axis(1));
            let mut next = normed.mapv(|v| v.max(0.0));
            let drop = match (mode, self.config.dropout > 0.0) {
                (Mode::Train, true) => {
                    let rng = rng
                        .as_deref_mut()
                        .ok_or_else(|| Error::param("training-mode dropout needs an rng"))?;
                    let keep = 1.0 - self.config.dropout;
                    let mask = Array2::from_shape_simple_fn((h, batch), || {
                        if rng.random::<f64>() < keep {
                            1.0 / keep
                        } else {
                            0.0
                        }
                    });
                    next *= &mask;
                    Some(mask)
                }
                _ => None,
            };
            cache.inputs.push(act);
            cache.xhat.push(xhat);
            cache.inv_std.push(inv_std);
            cache.normed.push(normed);
            cache.drop.push(drop);
            cache.batch_mean.push(mean);
            cache.batch_var.push(var);
            act = next;
        }
        let mut out = self.out_weight().dot(&act);
        out += &self.vector(self.layout.out_bias, 2 * self.out_dim).insert_axis(Axis(1));
        cache.inputs.push(act);
        Ok((out, cache))
    }

    /// Gradient of `sum(grad_out * output)` with respect to every parameter,
    /// in the flat parameter layout.
    pub fn backward(&self, cache: &ForwardCache, grad_out: ArrayView2<f64>) -> Result<Vec<f64>> {
        let n_layers = self.config.hidden_layers;
        if cache.inputs.len() != n_layers + 1
            || cache.shape != (self.in_dim, self.out_dim)
            || grad_out.dim() != (2 * self.out_dim, cache.batch)
        {
            return Err(Error::Internal("forward cache does not match this network".into()));
        }
        let mut grad = vec![0.0; self.params.len()];
        let h = self.config.hidden;
        let last_in = &cache.inputs[n_layers];
        {
            let gw = grad_out.dot(&last_in.t());
            write_matrix(&mut grad, self.layout.out_weight, gw.view());
            let gb = grad_out.sum_axis(Axis(1));
            grad[self.layout.out_bias..self.layout.total].copy_from_slice(gb.as_slice().expect("contiguous"));
        }
        let mut d_act = self.out_weight().t().dot(&grad_out);
        for l in (0..n_layers).rev() {
            let sl = self.layout.hidden[l];
            if let Some(mask) = &cache.drop[l] {
                d_act *= mask;
            }
            // rectifier
            ndarray::Zip::from(&mut d_act).and(&cache.normed[l]).for_each(|d, &y| {
                if y <= 0.0 {
                    *d = 0.0
                }
            });
            let xhat = &cache.xhat[l];
            let g_gamma = (&d_act * xhat).sum_axis(Axis(1));
            let g_beta = d_act.sum_axis(Axis(1));
            let mut d_xhat = d_act;
            d_xhat *= &self.vector(sl.gamma, h).insert_axis(Axis(1));
            let inv_std = &cache.inv_std[l];
            let d_z = match cache.mode {
                Mode::Eval => d_xhat * &inv_std.view().insert_axis(Axis(1)),
                Mode::Train => {
                    let b = cache.batch as f64;
                    let sum_d = d_xhat.sum_axis(Axis(1));
                    let sum_dx = (&d_xhat * xhat).sum_axis(Axis(1));
                    let mut dz = d_xhat * b;
                    dz -= &sum_d.insert_axis(Axis(1));
                    dz -= &(xhat * &sum_dx.insert_axis(Axis(1)));
                    dz *= &(inv_std / b).insert_axis(Axis(1));
                    dz
                }
            };
            let gw = d_z.dot(&cache.inputs[l].t());
            write_matrix(&mut grad, sl.weight, gw.view());
            let gb = d_z.sum_axis(Axis(1));
            grad[sl.bias..sl.bias + h].copy_from_slice(gb.as_slice().expect("contiguous"));
            grad[sl.gamma..sl.gamma + h].copy_from_slice(g_gamma.as_slice().expect("contiguous"));
            grad[sl.beta..sl.beta + h].copy_from_slice(g_beta.as_slice().expect("contiguous"));
            d_act = self.weight(l).t().dot(&d_z);
        }
        Ok(grad)
    }

    /// Folds the batch statistics of a training pass into the running averages.
    pub fn update_running_stats(&mut self, cache: &ForwardCache) {
        if cache.mode != Mode::Train || cache.batch < 2 || cache.shape != (self.in_dim, self.out_dim) {
            return;
        }
        let m = self.config.bn_momentum;
        let unbias = cache.batch as f64 / (cache.batch - 1) as f64;
        for l in 0..self.config.hidden_layers {
            let mean = &cache.batch_mean[l];
            let var = &cache.batch_var[l];
            self.running_mean[l] = &self.running_mean[l] * m + mean * (1.0 - m);
            self.running_var[l] = &self.running_var[l] * m + var * ((1.0 - m) * unbias);
        }
    }

    /// Writes the network as a length-prefixed JSON header followed by
    /// little-endian f64 parameters and running statistics.
    pub fn write_blob<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        let header = BlobHeader {
            in_dim: self.in_dim,
            out_dim: self.out_dim,
            seed: self.seed,
            param_count: self.params.len(),
            config: self.config.clone(),
        };
        let json = serde_json::to_vec(&header).map_err(std::io::Error::other)?;
        out.write_all(BLOB_MAGIC)?;
        out.write_all(&(json.len() as u32).to_le_bytes())?;
        out.write_all(&json)?;
        let stats = self
            .running_mean
            .iter()
            .chain(&self.running_var)
            .flat_map(|a| a.iter().copied());
        for v in self.params.iter().copied().chain(stats) {
            out.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn to_blob(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_blob(&mut buf).expect("writing to memory");
        buf
    }

    pub fn read_blob<R: Read>(mut input: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        read_exact(&mut input, &mut magic, 0)?;
        if &magic != BLOB_MAGIC {
            return Err(blob_error(0, "bad magic"));
        }
        let mut len = [0u8; 4];
        read_exact(&mut input, &mut len, 4)?;
        let len = u32::from_le_bytes(len) as usize;
        let mut json = vec![0u8; len];
        read_exact(&mut input, &mut json, 8)?;
        let header: BlobHeader =
            serde_json::from_slice(&json).map_err(|e| blob_error(8 + e.column() as u64, &e.to_string()))?;
        let mut net = Self::new(header.in_dim, header.out_dim, header.config, header.seed)?;
        if net.params.len() != header.param_count {
            return Err(blob_error(8, "parameter count does not match layer sizes"));
        }
        let mut offset = 8 + len as u64;
        let mut next = |input: &mut R| -> Result<f64> {
            let mut b = [0u8; 8];
            read_exact(input, &mut b, offset)?;
            offset += 8;
            Ok(f64::from_le_bytes(b))
        };
        for i in 0..net.params.len() {
            net.params[i] = next(&mut input)?;
        }
        let h = net.config.hidden;
        for l in 0..net.config.hidden_layers {
            for k in 0..h {
                net.running_mean[l][k] = next(&mut input)?;
            }
        }
        for l in 0..net.config.hidden_layers {
            for k in 0..h {
                net.running_var[l][k] = next(&mut input)?;
            }
        }
        Ok(net)
    }
}

const BLOB_MAGIC: &[u8; 4] = b"CNET";

#[derive(Debug, Serialize, Deserialize)]
struct BlobHeader {
    in_dim: usize,
    out_dim: usize,
    seed: u64,
    param_count: usize,
    config: CompNetConfig,
}

fn blob_error(offset: u64, msg: &str) -> Error {
    Error::Parse {
        path: "<network blob>".into(),
        offset,
        message: msg.to_string(),
    }
}

fn read_exact<R: Read>(input: &mut R, buf: &mut [u8], offset: u64) -> Result<()> {
    input.read_exact(buf).map_err(|e| blob_error(offset, &e.to_string()))
}

fn write_matrix(dst: &mut [f64], start: usize, m: ArrayView2<f64>) {
    for (slot, v) in dst[start..start + m.len()].iter_mut().zip(m.iter()) {
        *slot = *v;
    }
}

/// Splits a network output column block into `(log_a, b)` halves.
pub fn split_output(out: ArrayView2<'_, f64>) -> (ArrayView2<'_, f64>, ArrayView2<'_, f64>) {
    let d = out.nrows() / 2;
    (out.slice_move(s![..d, ..]), out.slice_move(s![d.., ..]))
}

/// `exp(log_a) * w + b`, elementwise.
pub fn modulate(w: ArrayView1<f64>, log_a: ArrayView1<f64>, b: ArrayView1<f64>) -> Result<Array1<f64>> {
    if log_a.len() != w.len() || b.len() != w.len() {
        return Err(Error::param("modulation and separation vector lengths differ"));
    }
    let mut out = Array1::<f64>::zeros(w.len());
    for i in 0..w.len() {
        out[i] = log_a[i].exp() * w[i] + b[i];
    }
    Ok(out)
}

/// Source estimate for a column block under modulation:
/// `s[t] = sum_d (exp(log_a[d,t]) w[d] + b[d,t]) x[d,t]`.
///
/// Also returns `exp(log_a)` for reuse in gradients.
pub fn modulated_block(
    w: ArrayView1<f64>,
    out: ArrayView2<f64>,
    x: ArrayView2<f64>,
) -> (Array1<f64>, Array2<f64>, Array1<f64>) {
    let (log_a, b) = split_output(out);
    let gain = log_a.mapv(f64::exp);
    let cols = x.ncols();
    let mut trace = Array1::<f64>::zeros(cols);
    let mut bias_term = Array1::<f64>::zeros(cols);
    for d in 0..x.nrows() {
        let xr = x.row(d);
        let gr = gain.row(d);
        let br = b.row(d);
        let wd = w[d];
        for t in 0..cols {
            trace[t] += gr[t] * wd * xr[t];
            bias_term[t] += br[t] * xr[t];
        }
    }
    trace += &bias_term;
    (trace, gain, bias_term)
}

/// Gradient of a loss on `s` with respect to the raw network output, given
/// `ds = dL/ds` per column and the frozen separation vector.
pub fn output_gradient(
    w: ArrayView1<f64>,
    gain: ArrayView2<f64>,
    x: ArrayView2<f64>,
    ds: ArrayView1<f64>,
) -> Array2<f64> {
    let (d, cols) = x.dim();
    let mut g = Array2::<f64>::zeros((2 * d, cols));
    {
        let (mut g_log_a, mut g_b): (ArrayViewMut2<f64>, ArrayViewMut2<f64>) = g.view_mut().split_at(Axis(0), d);
        for i in 0..d {
            for t in 0..cols {
                let xs = x[[i, t]] * ds[t];
                g_b[[i, t]] = xs;
                g_log_a[[i, t]] = xs * gain[[i, t]] * w[i];
            }
        }
    }
    g
}

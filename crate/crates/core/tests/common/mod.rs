//! Oracles and helpers shared by the integration tests.
#![allow(dead_code)]

use driftica::compnet::{self, CompNetConfig, CompensationNetwork, Mode, DEFAULT_PERIOD_FRACS};
use driftica::contrast::{self, clamp_threshold, contrast_value_at};
use driftica::gmm::{self, GmmFit};
use driftica::modulation::{contrast_pass, modulated_trace, ModulationGrid};
use driftica::Execution;
use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

pub fn normal(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || StandardNormal.sample(rng))
}

pub fn unit(d: usize, rng: &mut ChaCha8Rng) -> Array1<f64> {
    let v: Array1<f64> = Array1::from_shape_simple_fn(d, || StandardNormal.sample(rng));
    let n = v.dot(&v).sqrt();
    v / n
}

/// Largest absolute deviation relative to the largest finite-difference entry.
pub fn rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let scale = numeric.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
    analytic
        .iter()
        .zip(numeric)
        .fold(0.0f64, |m, (a, n)| m.max((a - n).abs()))
        / scale
}

pub fn central<F: FnMut(&[f64]) -> f64>(x: &[f64], h: f64, mut f: F) -> Vec<f64> {
    let mut p = x.to_vec();
    (0..x.len())
        .map(|i| {
            p[i] = x[i] + h;
            let up = f(&p);
            p[i] = x[i] - h;
            let down = f(&p);
            p[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Two-component fit on `values` with responsibilities from its own densities.
pub fn fit_for(values: &[f64]) -> GmmFit {
    let mut fit = GmmFit {
        pi: 0.05,
        mu_null: 0.0,
        mu_spike: 4.0,
        sigma_null: 1.0,
        sigma_spike: 0.7,
        indices: (0..values.len()).collect(),
        responsibilities: Vec::new(),
        collapsed: false,
    };
    fit.responsibilities = values.iter().map(|&v| fit.responsibility(v)).collect();
    fit
}

/// Mostly null-like samples with a few spikes near 4.
pub fn mixture_values(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            if rng.random_bool(0.05) {
                4.0 + 0.7 * z
            } else {
                z
            }
        })
        .collect()
}

pub fn perturbed_net(in_dim: usize, out_dim: usize, dropout: f64, seed: u64) -> CompensationNetwork {
    let cfg = CompNetConfig {
        hidden: 16,
        hidden_layers: 2,
        dropout,
        ..CompNetConfig::default()
    };
    let mut net = CompensationNetwork::new(in_dim, out_dim, cfg, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x55);
    for p in net.params.iter_mut() {
        let z: f64 = StandardNormal.sample(&mut rng);
        *p += 0.2 * z;
    }
    net
}

pub fn encoding(cols: usize) -> Array2<f64> {
    compnet::encode_time(cols, &DEFAULT_PERIOD_FRACS).unwrap().matrix
}

// density-form two-component EM

#[derive(Debug, Clone, Copy)]
pub struct Params {
    pub pi: f64,
    pub mu: [f64; 2],
    pub sigma: [f64; 2],
}

pub fn pdf(x: f64, mu: f64, sigma: f64) -> f64 {
    (-0.5 * ((x - mu) / sigma).powi(2)).exp() / (sigma * (2.0 * std::f64::consts::PI).sqrt())
}

/// Component 1 is the spike component.
pub fn oracle_step(xs: &[f64], p: Params) -> (Params, Vec<f64>) {
    let r: Vec<f64> = xs
        .iter()
        .map(|&x| {
            let a = p.pi * pdf(x, p.mu[1], p.sigma[1]);
            let b = (1.0 - p.pi) * pdf(x, p.mu[0], p.sigma[0]);
            a / (a + b)
        })
        .collect();
    let n1: f64 = r.iter().sum();
    let n0 = xs.len() as f64 - n1;
    let mu1 = xs.iter().zip(&r).map(|(x, r)| r * x).sum::<f64>() / n1;
    let mu0 = xs.iter().zip(&r).map(|(x, r)| (1.0 - r) * x).sum::<f64>() / n0;
    let v1 = xs.iter().zip(&r).map(|(x, r)| r * (x - mu1).powi(2)).sum::<f64>() / n1;
    let v0 = xs
        .iter()
        .zip(&r)
        .map(|(x, r)| (1.0 - r) * (x - mu0).powi(2))
        .sum::<f64>()
        / n0;
    (
        Params {
            pi: n1 / xs.len() as f64,
            mu: [mu0, mu1],
            sigma: [v0.sqrt(), v1.sqrt()],
        },
        r,
    )
}

pub fn oracle_ll(xs: &[f64], p: Params) -> f64 {
    xs.iter()
        .map(|&x| (p.pi * pdf(x, p.mu[1], p.sigma[1]) + (1.0 - p.pi) * pdf(x, p.mu[0], p.sigma[0])).ln())
        .sum()
}

pub fn to_fit(p: Params, n: usize) -> GmmFit {
    GmmFit {
        pi: p.pi,
        mu_null: p.mu[0],
        mu_spike: p.mu[1],
        sigma_null: p.sigma[0],
        sigma_spike: p.sigma[1],
        indices: (0..n).collect(),
        responsibilities: vec![0.0; n],
        collapsed: false,
    }
}

pub struct Instance {
    pub xs: Vec<f64>,
    pub start: Params,
    pub steps: usize,
}

pub fn instance(seed: u64) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(200..1500);
    let pi = rng.random_range(0.05..0.4);
    let gap = rng.random_range(2.0..8.0);
    let s0 = rng.random_range(0.3..2.0);
    let s1 = rng.random_range(0.3..2.0);
    let null = Normal::new(0.0, s0).unwrap();
    let spike = Normal::new(gap, s1).unwrap();
    let xs: Vec<f64> = (0..n)
        .map(|_| {
            if rng.random_bool(pi) {
                spike.sample(&mut rng)
            } else {
                null.sample(&mut rng)
            }
        })
        .collect();
    // start away from the truth so EM has work to do
    let start = Params {
        pi: rng.random_range(0.05..0.5),
        mu: [rng.random_range(-1.0..1.0), gap * rng.random_range(0.6..1.4)],
        sigma: [rng.random_range(0.5..2.5), rng.random_range(0.5..2.5)],
    };
    Instance {
        xs,
        start,
        steps: rng.random_range(1..40),
    }
}

pub fn naive_peaks(x: &[f64], w: usize) -> Vec<usize> {
    (0..x.len())
        .filter(|&t| {
            let lo = t.saturating_sub(w);
            let hi = (t + w).min(x.len() - 1);
            (lo..=hi).all(|u| u == t || x[u] < x[t])
        })
        .collect()
}

// gradient cases: each returns the relative error of one seeded instance

pub fn contrast_case(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = rng.random_range(4..12);
    let x = normal(d, 500, &mut rng);
    let w = unit(d, &mut rng);
    let e = rng.random_range(2..=contrast::MAX_EXPONENT);
    let k = if seed % 2 == 0 { Some(10) } else { None };
    let (grad, _) = contrast::contrast_gradient(w.view(), x.view(), e, k, Execution::Sequential).unwrap();
    let trace = contrast::predict_source(w.view(), x.view(), Execution::Sequential).unwrap();
    let c = k.and_then(|k| clamp_threshold(trace.as_slice().unwrap(), k));
    let fd = central(w.as_slice().unwrap(), 1e-6, |v| {
        let tr = contrast::predict_source(Array1::from(v.to_vec()).view(), x.view(), Execution::Sequential).unwrap();
        contrast_value_at(tr.as_slice().unwrap(), e, c)
    });
    rel_err(grad.as_slice().unwrap(), &fd)
}

pub fn modulated_contrast_case(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
    let (d, t) = (6, 400);
    let x = normal(d, t, &mut rng);
    let w = unit(d, &mut rng);
    let net = perturbed_net(DEFAULT_PERIOD_FRACS.len(), d, 0.0, seed);
    let grid = ModulationGrid::evaluate(&net, &DEFAULT_PERIOD_FRACS, t, 8, Execution::Sequential).unwrap();
    let e = rng.random_range(2..=contrast::MAX_EXPONENT);
    let pass = contrast_pass(w.view(), x.view(), Some(&grid), e, Some(20), Execution::Sequential).unwrap();
    let fd = central(w.as_slice().unwrap(), 1e-6, |v| {
        let tr = modulated_trace(
            Array1::from(v.to_vec()).view(),
            x.view(),
            Some(&grid),
            Execution::Sequential,
        )
        .unwrap();
        contrast_value_at(tr.as_slice().unwrap(), e, pass.threshold)
    });
    rel_err(pass.grad.as_slice().unwrap(), &fd)
}

/// Frozen-parameter mixture loss, plain and scale-invariant.
pub fn mixture_case(seed: u64) -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(200 + seed);
    let values = mixture_values(200, &mut rng);
    let fit = fit_for(&values);
    let lambda = rng.random_range(0.1..3.0);
    let grad = gmm::nonstationarity_gradient(&values, &fit, lambda).unwrap();
    let fd = central(&values, 1e-6, |v| gmm::nonstationarity_loss_frozen(v, &fit, lambda));
    let plain = rel_err(&grad, &fd);
    let grad = gmm::scaled_nonstationarity_gradient(&values, &fit, lambda).unwrap();
    let fd = central(&values, 1e-6, |v| gmm::scaled_nonstationarity_loss(v, &fit, lambda));
    (plain, rel_err(&grad, &fd))
}

/// `sum(G * out)` for a fixed random `G`, so `dL/dout = G`.
pub fn network_case(mode: Mode, dropout: f64, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(300 + seed);
    let (out_dim, batch) = (4, 64);
    let net = perturbed_net(DEFAULT_PERIOD_FRACS.len(), out_dim, dropout, seed);
    let enc = encoding(batch);
    let g = normal(2 * out_dim, batch, &mut rng);
    let drop_seed = 1000 + seed;
    let run = |n: &CompensationNetwork| {
        let mut r = ChaCha8Rng::seed_from_u64(drop_seed);
        n.forward(enc.view(), mode, Some(&mut r)).unwrap()
    };
    let (_, cache) = run(&net);
    let grads = net.backward(&cache, g.view()).unwrap();
    let mut probe = net.clone();
    // small step so no rectifier input crosses zero
    let fd = central(&net.params, 1e-7, |p| {
        probe.params.copy_from_slice(p);
        (&run(&probe).0 * &g).sum()
    });
    rel_err(&grads, &fd)
}

/// Network parameters through the modulated source to the scaled mixture
/// loss, as in one compensation update (dim 8, 200 samples).
pub fn chain_case(seed: u64) -> f64 {
    let (dim, t) = (8, 200);
    let mut rng = ChaCha8Rng::seed_from_u64(400 + seed);
    let x = normal(dim, t, &mut rng);
    let w = unit(dim, &mut rng);
    let enc = encoding(t);
    let mut net = perturbed_net(DEFAULT_PERIOD_FRACS.len(), dim, 0.0, seed);
    for p in net.params.iter_mut() {
        *p *= 0.5;
    }
    let lambda = 1.0;
    let values_of = |n: &CompensationNetwork| {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let (out, cache) = n.forward(enc.view(), Mode::Train, Some(&mut r)).unwrap();
        let (values, gain, _) = compnet::modulated_block(w.view(), out.view(), x.view());
        (values.to_vec(), gain, cache)
    };
    let (values, gain, cache) = values_of(&net);
    // fit frozen at the starting point
    let fit = fit_for(&values);
    let ds = gmm::scaled_nonstationarity_gradient(&values, &fit, lambda).unwrap();
    let g_out = compnet::output_gradient(w.view(), gain.view(), x.view(), Array1::from(ds).view());
    let grads = net.backward(&cache, g_out.view()).unwrap();
    let mut probe = net.clone();
    let fd = central(&net.params, 1e-6, |p| {
        probe.params.copy_from_slice(p);
        gmm::scaled_nonstationarity_loss(&values_of(&probe).0, &fit, lambda)
    });
    rel_err(&grads, &fd)
}

//! `em_fit` against a direct density-form EM written from scratch.

mod common;

use common::{instance, oracle_ll, oracle_step, to_fit};
use driftica::gmm::{em_fit, log_likelihood};

#[test]
fn em_matches_oracle_on_every_parameter() {
    for seed in 0..100 {
        let inst = instance(seed);
        let mut p = inst.start;
        let mut r = Vec::new();
        for _ in 0..inst.steps {
            (p, r) = oracle_step(&inst.xs, p);
        }
        let fit = em_fit(&inst.xs, &to_fit(inst.start, inst.xs.len()), inst.steps).unwrap();
        assert!(!fit.collapsed, "seed {seed}");
        assert!(fit.mu_spike > fit.mu_null, "seed {seed}: labels swapped");
        let pairs = [
            (fit.pi, p.pi),
            (fit.mu_null, p.mu[0]),
            (fit.mu_spike, p.mu[1]),
            (fit.sigma_null, p.sigma[0]),
            (fit.sigma_spike, p.sigma[1]),
        ];
        for (k, (got, want)) in pairs.iter().enumerate() {
            assert!((got - want).abs() < 1e-9, "seed {seed} param {k}: {got} vs {want}");
        }
        for (got, want) in fit.responsibilities.iter().zip(&r) {
            assert!((got - want).abs() < 1e-9, "seed {seed}: responsibility {got} vs {want}");
        }
    }
}

#[test]
fn log_likelihood_never_decreases() {
    for seed in 0..100 {
        let inst = instance(seed);
        let mut p = inst.start;
        let mut fit = to_fit(inst.start, inst.xs.len());
        let mut prev = oracle_ll(&inst.xs, p);
        assert!((log_likelihood(&inst.xs, &fit) - prev).abs() < 1e-8 * prev.abs().max(1.0));
        for step in 0..inst.steps.max(10) {
            p = oracle_step(&inst.xs, p).0;
            fit = em_fit(&inst.xs, &fit, 1).unwrap();
            let ll = log_likelihood(&inst.xs, &fit);
            assert!(
                (ll - oracle_ll(&inst.xs, p)).abs() < 1e-8 * ll.abs().max(1.0),
                "seed {seed} step {step}"
            );
            assert!(
                ll >= prev - 1e-9 * prev.abs().max(1.0),
                "seed {seed} step {step}: {ll} < {prev}"
            );
            prev = ll;
        }
    }
}

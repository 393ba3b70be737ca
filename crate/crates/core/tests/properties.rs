mod common;

use common::naive_peaks;
use driftica::contrast::{self, clamp_threshold, clamp_trace, renormalize, tangent_projection};
use driftica::decompose::{agreement, aligned_agreement, isi_mad};
use driftica::evaluate::{pair_sources, MatchOptions};
use driftica::gmm::find_peaks;
use driftica::preprocess::extend;
use driftica::simgen::{drift_displacement, gen_transfer_bank, render, DriftTrajectory, SpikeTrain};
use driftica::Execution;
use ndarray::{Array1, Array2};
use proptest::prelude::*;

const FS: f64 = 2048.0;

fn train() -> impl Strategy<Value = Vec<usize>> {
    prop::collection::btree_set(0usize..20_000, 0..60).prop_map(|s| s.into_iter().collect())
}

/// Spikes at least `gap` samples apart.
fn sparse_train(gap: usize) -> impl Strategy<Value = Vec<usize>> {
    prop::collection::vec(gap..gap * 4, 1..40).prop_map(|steps| {
        steps
            .iter()
            .scan(0usize, |t, s| {
                *t += s;
                Some(*t)
            })
            .collect()
    })
}

fn vector(d: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-10.0f64..10.0, d)
}

proptest! {
    #[test]
    fn agreement_is_symmetric_and_bounded(a in train(), b in train(), tol in 0.5f64..20.0) {
        let ab = agreement(&a, &b, tol, FS);
        let ba = agreement(&b, &a, tol, FS);
        prop_assert_eq!(ab, ba);
        prop_assert!((0.0..=100.0).contains(&ab));
        let (lab, _) = aligned_agreement(&a, &b, tol, 10.0, FS);
        let (lba, _) = aligned_agreement(&b, &a, tol, 10.0, FS);
        prop_assert_eq!(lab, lba);
        prop_assert!(lab >= ab);
    }

    #[test]
    fn agreement_with_itself_is_full(a in train()) {
        prop_assume!(!a.is_empty());
        prop_assert_eq!(agreement(&a, &a, 5.0, FS), 100.0);
    }

    #[test]
    fn shift_beyond_tolerance_gives_zero(a in sparse_train(200), extra in 1usize..30) {
        // tolerance 5 ms is 10 samples at 2048 Hz
        let shifted: Vec<usize> = a.iter().map(|t| t + 10 + extra).collect();
        prop_assert_eq!(agreement(&a, &shifted, 5.0, FS), 0.0);
    }

    #[test]
    fn constant_lag_is_recovered(a in sparse_train(200), lag in 0usize..51) {
        let moved: Vec<usize> = a.iter().map(|t| t + lag).collect();
        let (acc, found) = aligned_agreement(&a, &moved, 0.1, 25.0, FS);
        prop_assert_eq!(acc, 100.0);
        prop_assert_eq!(found, -(lag as i64));
    }

    #[test]
    fn agreement_ignores_common_shift(a in train(), b in train(), shift in 0usize..5000) {
        let sa: Vec<usize> = a.iter().map(|t| t + shift).collect();
        let sb: Vec<usize> = b.iter().map(|t| t + shift).collect();
        prop_assert_eq!(agreement(&a, &b, 5.0, FS), agreement(&sa, &sb, 5.0, FS));
    }

    #[test]
    fn isi_spread_ignores_common_shift(a in sparse_train(30), shift in 0usize..1000) {
        let len = a.last().unwrap() + shift + 1;
        let t0 = SpikeTrain::new(a.clone(), len, FS).unwrap();
        let t1 = SpikeTrain::new(a.iter().map(|t| t + shift).collect(), len, FS).unwrap();
        prop_assert_eq!(isi_mad(&t0), isi_mad(&t1));
    }

    #[test]
    fn pairing_counts_are_consistent(found in prop::collection::vec(train(), 0..5), truth in prop::collection::vec(train(), 0..5)) {
        let f: Vec<(usize, &[usize])> = found.iter().enumerate().map(|(i, t)| (i, t.as_slice())).collect();
        let t: Vec<&[usize]> = truth.iter().map(|t| t.as_slice()).collect();
        let e = pair_sources(0, &f, &t, MatchOptions { tolerance_ms: 5.0, max_lag_ms: 0.0, fs_hz: FS });
        prop_assert_eq!(e.units_above() + e.units_below(), e.paired.len());
        prop_assert_eq!(e.paired.len() + e.unpaired_found.len(), found.len());
        prop_assert_eq!(e.paired.len() + e.unpaired_truth.len(), truth.len());
    }

    #[test]
    fn unit_vectors_and_tangents(v in vector(7), g in vector(7)) {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        prop_assume!(n > 1e-3);
        let w = renormalize(Array1::from(v).view()).unwrap();
        prop_assert!((w.dot(&w) - 1.0).abs() < 1e-12);
        let t = tangent_projection(w.view(), Array1::from(g).view());
        let scale = t.dot(&t).sqrt().max(1.0);
        prop_assert!(w.dot(&t).abs() < 1e-12 * scale);
    }

    #[test]
    fn clamping_caps_at_threshold(x in prop::collection::vec(-50.0f64..50.0, 1..300), k in 1usize..40) {
        let c = clamp_trace(&x, k);
        match clamp_threshold(&x, k) {
            Some(th) => {
                prop_assert!(c.iter().all(|&v| v <= th));
                prop_assert_eq!(c.iter().filter(|&&v| v == th).count() >= k / 2, true);
                for (a, b) in x.iter().zip(&c) {
                    if *a <= th { prop_assert_eq!(a, b); }
                }
            }
            None => prop_assert_eq!(&c, &x),
        }
    }

    #[test]
    fn extension_rows_are_delays(rows in 1usize..4, len in 1usize..40, k in 1usize..6, seed in any::<u64>()) {
        let x = Array2::from_shape_fn((rows, len), |(i, t)| ((seed % 97) as f64 + 31.0 * i as f64 + t as f64).sin());
        let e = extend(x.view(), k).unwrap();
        prop_assert_eq!(e.dim(), (rows * k, len));
        for i in 0..rows {
            for d in 0..k {
                for t in 0..len {
                    let want = if t >= d { x[[i, t - d]] } else { 0.0 };
                    prop_assert_eq!(e[[i * k + d, t]], want);
                }
            }
        }
    }

    #[test]
    fn drift_is_bounded_by_amplitudes(p1 in 0.05f64..2.0, p2 in 0.05f64..2.0, a1 in 0.0f64..4.0, a2 in 0.0f64..4.0, t in 0usize..10_000) {
        let traj = DriftTrajectory::sum_of_sinusoids(vec![p1, p2], vec![a1, a2], 0.0);
        prop_assert!(drift_displacement(&traj, t, 10_000).abs() <= a1 + a2 + 1e-12);
        prop_assert_eq!(drift_displacement(&traj, 0, 10_000), 0.0);
    }

    #[test]
    fn rendering_is_linear_in_spikes(spikes in prop::collection::btree_set(0usize..3000, 1..40), split in any::<u64>(), drift in prop::bool::ANY) {
        let len = 3000;
        let bank = gen_transfer_bank(1, 6, 12, split).unwrap();
        let traj = if drift { DriftTrajectory::sinusoid(1.0, 2.0, 0.0) } else { DriftTrajectory::none() };
        let all: Vec<usize> = spikes.iter().copied().collect();
        let (even, odd): (Vec<(usize, usize)>, Vec<(usize, usize)>) =
            all.iter().copied().enumerate().partition(|(i, _)| (split >> (i % 64)) & 1 == 0);
        let pick = |v: Vec<(usize, usize)>| SpikeTrain::new(v.into_iter().map(|(_, t)| t).collect(), len, FS).unwrap();
        let whole = render(&[SpikeTrain::new(all.clone(), len, FS).unwrap()], &bank, &traj).unwrap();
        let parts = render(&[pick(even)], &bank, &traj).unwrap() + render(&[pick(odd)], &bank, &traj).unwrap();
        let err = (&whole - &parts).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        prop_assert!(err < 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn peaks_match_naive_scan(x in prop::collection::vec(0u8..8, 1..300), w in 1usize..15) {
        let x: Vec<f64> = x.into_iter().map(f64::from).collect();
        prop_assert_eq!(find_peaks(&x, w), naive_peaks(&x, w));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn contrast_gradient_is_schedule_independent(seed in any::<u64>(), e in 2u32..=6) {
        let d = 10;
        let x = Array2::from_shape_fn((d, 9000), |(i, t)| ((seed % 1000) as f64 + 1.3 * i as f64 * t as f64).sin());
        let w = renormalize(Array1::from_shape_fn(d, |i| 1.0 + i as f64).view()).unwrap();
        let a = contrast::contrast_gradient(w.view(), x.view(), e, Some(30), Execution::Sequential).unwrap();
        let b = contrast::contrast_gradient(w.view(), x.view(), e, Some(30), Execution::Parallel).unwrap();
        prop_assert_eq!(a.0, b.0);
        prop_assert_eq!(a.1, b.1);
    }
}

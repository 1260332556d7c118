use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use pcqa_core::eval::{
    average_ranks, evaluate, logistic4, logistic4_fit, plcc, rmse, srocc,
};

fn brute_pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut num = 0.0;
    let mut da = 0.0;
    let mut db = 0.0;
    for i in 0..a.len() {
        num += (a[i] - ma) * (b[i] - mb);
        da += (a[i] - ma).powi(2);
        db += (b[i] - mb).powi(2);
    }
    num / (da * db).sqrt()
}

/// Rank by counting: 1 + #smaller + (#equal − 1)/2.
fn brute_ranks(x: &[f64]) -> Vec<f64> {
    x.iter()
        .map(|&v| {
            let less = x.iter().filter(|&&u| u < v).count() as f64;
            let equal = x.iter().filter(|&&u| u == v).count() as f64;
            1.0 + less + (equal - 1.0) / 2.0
        })
        .collect()
}

fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-3.0..3.0)).collect()
}

#[test]
fn metrics_match_brute_force_on_random_vectors() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for trial in 0..100 {
        let a = random_vec(&mut rng, 20);
        let mut b = random_vec(&mut rng, 20);
        // some trials carry ties
        if trial % 4 == 0 {
            for i in 0..5 {
                b[i] = (b[i] * 2.0).round() / 2.0;
                b[i + 5] = b[i];
            }
        }
        let s = srocc(&a, &b).unwrap();
        let want = brute_pearson(&brute_ranks(&a), &brute_ranks(&b));
        assert!((s - want).abs() < 1e-10, "trial {trial}: srocc {s} vs {want}");

        let p = plcc(&a, &b).unwrap();
        assert!((p - brute_pearson(&a, &b)).abs() < 1e-10, "trial {trial}: plcc");

        let mut sq = 0.0;
        for i in 0..20 {
            sq += (a[i] - b[i]) * (a[i] - b[i]);
        }
        let r = rmse(&a, &b).unwrap();
        assert!((r - (sq / 20.0).sqrt()).abs() < 1e-10, "trial {trial}: rmse");

        assert_eq!(average_ranks(&b), brute_ranks(&b));
    }
}

#[test]
fn logistic_refit_recovers_synthesized_curve() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..10 {
        let truth = [
            rng.random_range(4.0..5.0),
            rng.random_range(0.5..1.5),
            rng.random_range(-0.5..0.5),
            rng.random_range(0.3..1.2),
        ];
        let pred: Vec<f64> = (0..40).map(|_| rng.random_range(-2.5..2.5)).collect();
        let mos: Vec<f64> = pred.iter().map(|&x| logistic4(&truth, x)).collect();
        let fit = logistic4_fit(&pred, &mos).unwrap();
        let r = rmse(&fit.aligned, &mos).unwrap();
        assert!(r < 1e-4, "residual rmse {r} for {truth:?}");
        assert!(fit.sse <= fit.initial_sse);
    }
}

#[test]
fn alignment_preserves_srocc_exactly() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..20 {
        let pred = random_vec(&mut rng, 20);
        let mos: Vec<f64> = pred.iter().map(|p| p + rng.random_range(-1.0..1.0)).collect();
        let fit = logistic4_fit(&pred, &mos).unwrap();
        assert_eq!(srocc(&fit.aligned, &mos).unwrap(), srocc(&pred, &mos).unwrap());
    }
}

#[test]
fn aligned_rmse_is_no_worse_than_constant() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..20 {
        let pred = random_vec(&mut rng, 20);
        let mos = random_vec(&mut rng, 20);
        let report = evaluate(&pred, &mos).unwrap();
        let m = mos.iter().sum::<f64>() / 20.0;
        let constant = rmse(&vec![m; 20], &mos).unwrap();
        assert!(report.rmse <= constant + 1e-12, "{} > {constant}", report.rmse);
    }
}

#[test]
fn shifted_predictions_and_identity() {
    let mos = [1.0, 2.5, 3.0, 4.2, 4.9, 2.2];
    let shifted: Vec<f64> = mos.iter().map(|m| m + 0.1).collect();
    assert!((rmse(&shifted, &mos).unwrap() - 0.1).abs() < 1e-12);
    assert!((plcc(&shifted, &mos).unwrap() - 1.0).abs() < 1e-12);
    let r = evaluate(&mos, &mos).unwrap();
    assert!((r.plcc - 1.0).abs() < 1e-9);
    assert!(r.rmse < 1e-4);
    assert_eq!(r.srocc, 1.0);
}

#[test]
fn evaluate_is_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let pred = random_vec(&mut rng, 30);
    let mos = random_vec(&mut rng, 30);
    assert_eq!(evaluate(&pred, &mos).unwrap(), evaluate(&pred, &mos).unwrap());
}

proptest! {
    #[test]
    fn srocc_invariant_under_increasing_maps(
        pairs in prop::collection::vec((-100.0f64..100.0, -100.0f64..100.0), 3..30),
        a in 0.01f64..10.0,
        b in -5.0f64..5.0,
    ) {
        let pred: Vec<f64> = pairs.iter().map(|p| p.0).collect();
        let mos: Vec<f64> = pairs.iter().map(|p| p.1).collect();
        let base = srocc(&pred, &mos);
        prop_assume!(base.is_ok());
        // affine then cube: strictly increasing, never merges distinct values here
        let mapped: Vec<f64> = pred.iter().map(|x| (a * x + b).powi(3)).collect();
        prop_assert_eq!(srocc(&mapped, &mos).unwrap(), base.unwrap());
    }

    #[test]
    fn report_ranges(
        pairs in prop::collection::vec((-10.0f64..10.0, -10.0f64..10.0), 5..25),
    ) {
        let pred: Vec<f64> = pairs.iter().map(|p| p.0).collect();
        let mos: Vec<f64> = pairs.iter().map(|p| p.1).collect();
        if let Ok(r) = evaluate(&pred, &mos) {
            prop_assert!((-1.0..=1.0).contains(&r.srocc));
            prop_assert!((-1.0..=1.0).contains(&r.plcc));
            prop_assert!(r.rmse >= 0.0);
            prop_assert_eq!(r.n, pred.len());
        }
    }
}

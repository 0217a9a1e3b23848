mod support;

use cohesion_core::annotation::{
    agreement_report, pca_eigenspectrum, rater_covariance, rater_variance_stats, weighted_kappa, AnnotationMatrix,
    Weighting, LEVELS,
};
use cohesion_core::rng::seeded;
use cohesion_core::Error;
use proptest::prelude::*;
use rand::Rng;
use support::{brute_kappa, brute_variance, nalgebra_spectrum, random_annotations};

const MATRICES: u64 = 100;

fn matrices() -> impl Iterator<Item = Vec<Vec<u8>>> {
    (0..MATRICES).map(|seed| random_annotations(&mut seeded(7000 + seed), 50, 5))
}

#[test]
fn variance_matches_pairwise_identity() {
    for rows in matrices() {
        let m = AnnotationMatrix::from_rows(rows.clone()).unwrap();
        let (v, s) = rater_variance_stats(&m);
        let (bv, bs) = brute_variance(&rows);
        assert!((v - bv).abs() < 1e-9 && (s - bs).abs() < 1e-9);
    }
}

#[test]
fn spectrum_matches_nalgebra() {
    for rows in matrices() {
        let m = AnnotationMatrix::from_rows(rows.clone()).unwrap();
        let spec = pca_eigenspectrum(&m);
        let (eig, trace) = nalgebra_spectrum(&rows);
        assert!(!spec.degenerate);
        for (a, b) in spec.eigenvalues.iter().zip(&eig) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
        let total: f64 = eig.iter().sum();
        for (share, e) in spec.shares.iter().zip(&eig) {
            assert!((share - e.max(0.0) / total).abs() < 1e-9);
            assert!(*share >= 0.0);
        }
        assert!((spec.shares.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!((spec.eigenvalues.iter().sum::<f64>() - trace).abs() < 1e-9);
        let cov = rater_covariance(&m);
        let own_trace: f64 = (0..5).map(|i| cov[i * 5 + i]).sum();
        assert!((own_trace - trace).abs() < 1e-9);
    }
}

#[test]
fn kappa_matches_cross_pairing_definition() {
    for rows in matrices() {
        let m = AnnotationMatrix::from_rows(rows).unwrap();
        for a in 0..5 {
            for b in 0..5 {
                let (x, y) = (m.column(a), m.column(b));
                for (w, quad) in [(Weighting::Linear, false), (Weighting::Quadratic, true)] {
                    let k = weighted_kappa(&x, &y, LEVELS, w).unwrap();
                    assert!((k - brute_kappa(&x, &y, LEVELS, quad)).abs() < 1e-9);
                    assert!((-1.0..=1.0).contains(&k));
                    assert_eq!(k, weighted_kappa(&y, &x, LEVELS, w).unwrap());
                    if a == b {
                        assert_eq!(k, 1.0);
                    }
                }
            }
        }
    }
}

#[test]
fn report_mean_is_the_pairwise_mean() {
    for rows in matrices().take(10) {
        let m = AnnotationMatrix::from_rows(rows).unwrap();
        let r = agreement_report(&m, Weighting::Linear);
        assert_eq!(r.pairwise.len(), 10);
        let kappas: Vec<f64> = r.pairwise.iter().map(|p| p.kappa.unwrap()).collect();
        let mean = kappas.iter().sum::<f64>() / kappas.len() as f64;
        assert!((r.mean_kappa.unwrap() - mean).abs() < 1e-12);
    }
}

#[test]
fn reversed_ranks_against_brute_force() {
    let a = [0, 1, 2, 3];
    let b = [3, 2, 1, 0];
    let k = weighted_kappa(&a, &b, LEVELS, Weighting::Linear).unwrap();
    assert!((k - brute_kappa(&a, &b, LEVELS, false)).abs() < 1e-12);
    assert!((k + 0.6).abs() < 1e-12);
}

#[test]
fn identical_raters() {
    let column = [0u8, 1, 1, 2, 3, 3, 0, 2];
    let rows: Vec<Vec<u8>> = column.iter().map(|&l| vec![l; 4]).collect();
    let m = AnnotationMatrix::from_rows(rows).unwrap();
    assert_eq!(rater_variance_stats(&m), (0.0, 0.0));
    let spec = pca_eigenspectrum(&m);
    assert!((spec.shares[0] - 1.0).abs() < 1e-12);
    assert_eq!(agreement_report(&m, Weighting::Linear).mean_kappa, Some(1.0));
}

#[test]
fn two_item_hand_values_and_degenerate_cases() {
    let m = AnnotationMatrix::from_rows(vec![vec![0, 3], vec![1, 1]]).unwrap();
    let (v, s) = rater_variance_stats(&m);
    assert!((v - 2.25 / 2.0).abs() < 1e-15 && (s - 0.75).abs() < 1e-15);

    let flat = AnnotationMatrix::from_rows(vec![vec![2, 2], vec![2, 2]]).unwrap();
    let spec = pca_eigenspectrum(&flat);
    assert!(spec.degenerate);
    assert_eq!(spec.shares, vec![1.0, 0.0]);
    assert!(matches!(
        weighted_kappa(&[2, 2], &[2, 2], LEVELS, Weighting::Linear),
        Err(Error::UndefinedKappa)
    ));
    assert!(AnnotationMatrix::from_rows(vec![vec![1], vec![2]]).is_err());
    assert!(AnnotationMatrix::from_rows(vec![vec![1, 4], vec![2, 2]]).is_err());
}

#[test]
fn independent_raters_split_variance_evenly() {
    let mut rng = seeded(99);
    let rows: Vec<Vec<u8>> = (0..20_000).map(|_| vec![rng.gen_range(0..4), rng.gen_range(0..4)]).collect();
    let spec = pca_eigenspectrum(&AnnotationMatrix::from_rows(rows).unwrap());
    // Shares of two uncorrelated equal-variance raters are 1/2 +- |r|/2,
    // and |r| ~ 1/sqrt(n) for n items.
    assert!((spec.shares[0] - 0.5).abs() < 0.03, "{:?}", spec.shares);
}

proptest! {
    #[test]
    fn shares_ignore_rater_order(seed: u64, perm in Just(vec![0usize, 1, 2, 3, 4]).prop_shuffle()) {
        let rows = random_annotations(&mut seeded(seed), 30, 5);
        let permuted: Vec<Vec<u8>> = rows.iter().map(|r| perm.iter().map(|&j| r[j]).collect()).collect();
        let a = pca_eigenspectrum(&AnnotationMatrix::from_rows(rows).unwrap());
        let b = pca_eigenspectrum(&AnnotationMatrix::from_rows(permuted).unwrap());
        for (x, y) in a.shares.iter().zip(&b.shares) {
            prop_assert!((x - y).abs() < 1e-9);
        }
    }
}

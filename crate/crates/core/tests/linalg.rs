mod common;

use std::time::Instant;

use pmtf_core::covariance::{
    arrow_covariance, arrow_determinant, correlation_from_covariance, gaussian_total_correlation, log_det,
    total_correlation_sides, CovMatrix,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::{jacobi_eigenvalues, random_pd};

#[test]
fn total_correlation_identity_holds_for_random_covariances() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for case in 0..100 {
        let k = 2 + case % 7;
        let s = random_pd(&mut rng, k);
        let sigma = CovMatrix::new(s.clone()).unwrap();
        let (lhs, rhs) = total_correlation_sides(&sigma).unwrap();
        assert!((lhs - rhs).abs() <= 1e-10, "K={k}: {lhs} vs {rhs}");

        // independent route: eigenvalues of Σ and of ρ
        let ln_det_sigma: f64 = jacobi_eigenvalues(&s).iter().map(|v| v.ln()).sum();
        let rho = correlation_from_covariance(&sigma).unwrap();
        let ln_det_rho: f64 = jacobi_eigenvalues(rho.matrix()).iter().map(|v| v.ln()).sum();
        let ln_vars: f64 = s.diag().iter().map(|v| v.ln()).sum();
        assert!((ln_det_sigma - (ln_det_rho + ln_vars)).abs() <= 1e-10);
        assert!((lhs - (-0.5 * ln_det_rho)).abs() <= 1e-10);
        assert!(lhs >= 0.0);
    }
    assert!(start.elapsed().as_secs_f64() < 5.0);
}

#[test]
fn arrow_matrices_match_their_closed_form_determinant() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for k in 2..=8 {
        for _ in 0..10 {
            let vars: Vec<f64> = (0..k - 1).map(|_| rng.random_range(0.3..3.0)).collect();
            let raw: Vec<f64> = (0..k - 1).map(|_| rng.random_range(-1.0..1.0)).collect();
            let norm = raw.iter().map(|c| c * c).sum::<f64>().sqrt();
            let scale = rng.random_range(0.1..0.95) / norm;
            let corr: Vec<f64> = raw.iter().map(|c| c * scale).collect();
            let var_y = rng.random_range(0.3..3.0);
            let sigma = arrow_covariance(var_y, &vars, &corr).unwrap();
            let want = arrow_determinant(var_y, &vars, &corr);
            let eig: f64 = jacobi_eigenvalues(sigma.matrix()).iter().product();
            assert!((eig - want).abs() <= 1e-10 * want.abs().max(1.0), "K={k}: {eig} vs {want}");
            assert!((log_det(&sigma).unwrap() - want.ln()).abs() <= 1e-10);
            // only the first variable correlates, so the total correlation
            // reduces to −½·ln(1 − Σc²)
            let rho = correlation_from_covariance(&sigma).unwrap();
            let tc = gaussian_total_correlation(&rho).unwrap();
            let c2: f64 = corr.iter().map(|c| c * c).sum();
            assert!((tc + 0.5 * (1.0 - c2).ln()).abs() <= 1e-10);
        }
    }
}

#[test]
fn diagonal_covariances_carry_no_total_correlation() {
    let sigma = CovMatrix::new(pmtf_core::matrix::Matrix::from_diag(&[0.5, 2.0, 7.0, 1e-3])).unwrap();
    let (lhs, rhs) = total_correlation_sides(&sigma).unwrap();
    assert_eq!(lhs, 0.0);
    assert!(rhs.abs() < 1e-12);
}

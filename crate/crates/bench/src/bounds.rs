//! Monte-Carlo and pointwise checks of the low-rank error bounds.

use hodlr_core::lowrank::{gaussian_pinv_factor, gn_coefficients, gn_error_bound, orth, pinv, rsvd_perturb_bound_rhs, tail_norm, truncate};
use hodlr_core::rng::{gaussian_matrix, StreamKey};
use hodlr_core::{Error, Result};
use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::metrics::mean_stderr;

/// Result of one bound suite.
#[derive(Clone, Debug, PartialEq)]
pub struct SuiteOutcome {
    pub name: &'static str,
    pub cases: usize,
    pub failures: usize,
    /// Largest `lhs / rhs` for the pointwise suite, sample mean otherwise.
    pub measured: f64,
    /// `1` for the pointwise suite, the target value otherwise.
    pub bound: f64,
    pub passed: bool,
    pub detail: String,
}

/// Matrix with prescribed singular values and random singular vectors.
fn with_spectrum<R: Rng + ?Sized>(m1: usize, m2: usize, sigma: &[f64], rng: &mut R) -> DMatrix<f64> {
    let r = sigma.len();
    let u = orth(&gaussian_matrix(m1, r, rng));
    let v = orth(&gaussian_matrix(m2, r, rng));
    u * DMatrix::from_diagonal(&DVector::from_column_slice(sigma)) * v.transpose()
}

/// The deterministic perturbed-RSVD bound on random instances:
/// `||B - Q [[Q^T B + E2]]_k|| <= rhs + tol` with `Q = orth(B Omega + E1)`.
pub fn rsvd_pointwise_suite(instances: usize, seed: u64) -> Result<SuiteOutcome> {
    let tol = 1e-10;
    let mut worst: f64 = 0.0;
    let mut failures = 0;
    let mut cases = 0;
    let mut attempt = 0u64;
    while cases < instances {
        let mut rng = StreamKey::new(seed).at(&[1, attempt]).rng();
        attempt += 1;
        let k = rng.random_range(1..=5);
        let m1 = rng.random_range(k..=30);
        let m2 = rng.random_range(k..=30);
        let s = rng.random_range(k..=m1.min(m2));
        let r = m1.min(m2);
        let decay: f64 = rng.random_range(0.3..1.0);
        let sigma: Vec<f64> = (0..r).map(|i| decay.powi(i as i32)).collect();
        let b = with_spectrum(m1, m2, &sigma, &mut rng);
        let omega = gaussian_matrix(m2, s, &mut rng);
        let e1 = gaussian_matrix(m1, s, &mut rng) * 10f64.powf(rng.random_range(-4.0..0.0));
        let q = orth(&(&b * &omega + &e1));
        let e2 = gaussian_matrix(q.ncols(), m2, &mut rng) * 10f64.powf(rng.random_range(-4.0..0.0));
        let rhs = match rsvd_perturb_bound_rhs(&b, &omega, &e1, &e2, k) {
            Ok(v) => v,
            Err(Error::BoundInapplicable(_)) => continue,
            Err(e) => return Err(e),
        };
        let lhs = (&b - truncate(&q, &(q.tr_mul(&b) + &e2), k)?.to_dense()).norm();
        cases += 1;
        worst = worst.max(lhs / rhs);
        if lhs > rhs + tol {
            failures += 1;
        }
    }
    Ok(SuiteOutcome {
        name: "rsvd_perturbation_pointwise",
        cases,
        failures,
        measured: worst,
        bound: 1.0,
        passed: failures == 0,
        detail: format!("{failures}/{cases} violations, largest lhs/rhs {worst:.4}"),
    })
}

/// `E ||X G H^+||^2 = p/(q-p-1) ||X||^2` for a fixed `3 x 6` matrix `X`.
pub fn gaussian_pinv_suite(trials: usize, seed: u64) -> Result<SuiteOutcome> {
    let (p, q) = (2, 8);
    let x = gaussian_matrix(3, 6, &mut StreamKey::new(seed).at(&[2, 0]).rng());
    let target = gaussian_pinv_factor(p, q)? * x.norm_squared();
    let mut rng = StreamKey::new(seed).at(&[2, 1]).rng();
    let mut samples = Vec::with_capacity(trials);
    for _ in 0..trials {
        let g = gaussian_matrix(6, q, &mut rng);
        let h = gaussian_matrix(p, q, &mut rng);
        samples.push((&x * g * pinv(&h)?).norm_squared());
    }
    let (mean, se) = mean_stderr(&samples);
    let rel = (mean - target).abs() / target;
    Ok(SuiteOutcome {
        name: "gaussian_pseudoinverse_expectation",
        cases: trials,
        failures: usize::from(rel > 0.05),
        measured: mean,
        bound: target,
        passed: rel <= 0.05,
        detail: format!("mean {mean:.5} (se {se:.2e}) vs {target:.5}, off by {:.2}%", 100.0 * rel),
    })
}

/// Noisy Generalized Nystrom against its expected-error envelope, with
/// `k = 2`, `s_R = 8`, `s_L = 24` and fixed `B` (`20 x 20`), `M`, `N`.
pub fn gn_expectation_suite(trials: usize, seed: u64) -> Result<SuiteOutcome> {
    let (k, s_r, s_l, p, q) = (2, 8, 24, 6, 6);
    let mut fixed = StreamKey::new(seed).at(&[3, 0]).rng();
    let sigma: Vec<f64> = (0..20).map(|i| 0.6f64.powi(i)).collect();
    let b = with_spectrum(20, 20, &sigma, &mut fixed);
    let m = gaussian_matrix(20, p, &mut fixed) * 0.05;
    let n = gaussian_matrix(q, 20, &mut fixed) * 0.05;
    let opt2 = tail_norm(&b, k).powi(2);
    let bound = gn_error_bound(k, s_r, s_l, m.norm_squared(), n.norm_squared(), opt2)?;

    let mut rng = StreamKey::new(seed).at(&[3, 1]).rng();
    let mut samples = Vec::with_capacity(trials);
    for _ in 0..trials {
        let omega = gaussian_matrix(20, s_r, &mut rng);
        let omega_t = gaussian_matrix(p, s_r, &mut rng);
        let psi = gaussian_matrix(20, s_l, &mut rng);
        let psi_t = gaussian_matrix(q, s_l, &mut rng);
        let qb = orth(&(&b * omega + &m * omega_t));
        let z = psi.tr_mul(&b) + psi_t.tr_mul(&n);
        let x = gn_coefficients(&qb, &psi, &z)?;
        samples.push((&b - truncate(&qb, &x, k)?.to_dense()).norm_squared());
    }
    let (mean, se) = mean_stderr(&samples);
    let passed = mean <= bound + 3.0 * se;
    Ok(SuiteOutcome {
        name: "gn_expected_error",
        cases: trials,
        failures: usize::from(!passed),
        measured: mean,
        bound,
        passed,
        detail: format!("mean {mean:.4e} (se {se:.2e}) vs bound {bound:.4e}, opt {opt2:.4e}"),
    })
}

/// The three suites at their standard sizes.
pub fn all_suites(seed: u64) -> Result<Vec<SuiteOutcome>> {
    Ok(vec![rsvd_pointwise_suite(200, seed)?, gaussian_pinv_suite(20_000, seed)?, gn_expectation_suite(1_000, seed)?])
}

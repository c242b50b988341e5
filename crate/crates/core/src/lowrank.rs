//! Low-rank approximation primitives and perturbation-bound oracles.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::error::{dim_err, Error, Result};
use crate::linops::{LinearOperator, Side};
use crate::rng::gaussian_matrix;
use crate::svd::PivotedQr;

/// `Q X` with `Q` column-orthonormal.
#[derive(Clone, Debug, PartialEq)]
pub struct LowRankFactors {
    pub q: DMatrix<f64>,
    pub x: DMatrix<f64>,
}

impl LowRankFactors {
    pub fn new(q: DMatrix<f64>, x: DMatrix<f64>) -> Result<Self> {
        if q.ncols() != x.nrows() {
            return dim_err(format!("factor shapes {:?} and {:?} do not chain", q.shape(), x.shape()));
        }
        Ok(LowRankFactors { q, x })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        LowRankFactors { q: DMatrix::zeros(rows, 0), x: DMatrix::zeros(0, cols) }
    }

    pub fn rank(&self) -> usize {
        self.q.ncols()
    }

    pub fn nrows(&self) -> usize {
        self.q.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.x.ncols()
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        &self.q * &self.x
    }
}

fn cutoff(shape: (usize, usize), sigma_max: f64) -> f64 {
    f64::EPSILON * shape.0.max(shape.1) as f64 * sigma_max
}

pub use crate::svd::thin_svd;

/// Singular values in nonincreasing order.
pub fn singular_values(b: &DMatrix<f64>) -> DVector<f64> {
    thin_svd(b).1
}

/// Frobenius distance from `b` to its best rank-`k` approximation.
pub fn tail_norm(b: &DMatrix<f64>, k: usize) -> f64 {
    singular_values(b).iter().skip(k).map(|s| s * s).sum::<f64>().sqrt()
}

/// Orthonormal basis for `range(y)` by Householder QR with column pivoting.
///
/// Columns whose `|R_jj|` falls to `eps * max(m, s) * ||y||_2` or below are
/// dropped, so `y = 0` gives an `m x 0` basis.
pub fn orth(y: &DMatrix<f64>) -> DMatrix<f64> {
    let (m, s) = y.shape();
    let qr = PivotedQr::new(y);
    if qr.steps() == 0 {
        return DMatrix::zeros(m, 0);
    }
    let norm2 = singular_values(&qr.r)[0];
    let tol = cutoff((m, s), norm2);
    let rank = (0..qr.steps()).take_while(|&j| qr.r[(j, j)].abs() > tol).count();
    qr.q_mul(&DMatrix::identity(rank, rank))
}

/// Best Frobenius rank-`k` approximation `U_k (Sigma_k V_k^T)`. Singular values
/// at or below `eps * max(m, n) * sigma_max` are treated as zero.
pub fn truncated_svd(b: &DMatrix<f64>, k: usize) -> Result<LowRankFactors> {
    if k == 0 {
        return Err(Error::InvalidParameter("rank must be >= 1".into()));
    }
    let (u, s, vt) = thin_svd(b);
    let smax = s.iter().cloned().fold(0.0, f64::max);
    let tol = cutoff(b.shape(), smax);
    let keep = s.iter().take(k).take_while(|&&v| v > tol).count();
    let q = u.columns(0, keep).into_owned();
    let mut x = vt.rows(0, keep).into_owned();
    for i in 0..keep {
        x.row_mut(i).scale_mut(s[i]);
    }
    Ok(LowRankFactors { q, x })
}

/// `Q [[X]]_k`, keeping `Q` orthonormal: `(Q U_k, Sigma_k V_k^T)`.
pub fn truncate(q: &DMatrix<f64>, x: &DMatrix<f64>, k: usize) -> Result<LowRankFactors> {
    let t = truncated_svd(x, k)?;
    Ok(LowRankFactors { q: q * t.q, x: t.x })
}

/// Minimum-norm least-squares solution of `a z = b` through an SVD with
/// cutoff `eps * max(rows, cols) * sigma_max`.
pub fn pinv_solve(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if a.nrows() != b.nrows() {
        return dim_err(format!("pinv_solve: {} vs {} rows", a.nrows(), b.nrows()));
    }
    let (u, s, vt) = thin_svd(a);
    let smax = s.iter().cloned().fold(0.0, f64::max);
    let tol = cutoff(a.shape(), smax);
    let keep = s.iter().take_while(|&&v| v > tol).count();
    let mut utb = u.columns(0, keep).tr_mul(b);
    for i in 0..keep {
        utb.row_mut(i).scale_mut(1.0 / s[i]);
    }
    Ok(vt.rows(0, keep).tr_mul(&utb))
}

/// Moore-Penrose pseudoinverse with the same cutoff as [`pinv_solve`].
pub fn pinv(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    pinv_solve(a, &DMatrix::identity(a.nrows(), a.nrows()))
}

/// Either a dense matrix or a square operator reached through queries.
#[derive(Clone, Copy)]
pub enum Target<'a> {
    Dense(&'a DMatrix<f64>),
    Operator(&'a dyn LinearOperator),
}

impl Target<'_> {
    pub fn shape(&self) -> (usize, usize) {
        match self {
            Target::Dense(b) => b.shape(),
            Target::Operator(op) => (op.dim(), op.dim()),
        }
    }

    /// `B W`
    fn right(&self, w: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        match self {
            Target::Dense(b) => Ok(*b * w),
            Target::Operator(op) => op.apply(w, Side::Forward),
        }
    }

    /// `W^T B`
    fn left(&self, w: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if w.ncols() == 0 {
            return Ok(DMatrix::zeros(0, self.shape().1));
        }
        match self {
            Target::Dense(b) => Ok(w.tr_mul(b)),
            Target::Operator(op) => Ok(op.apply(w, Side::Transpose)?.transpose()),
        }
    }
}

/// Randomized SVD: `Q = orth(B Omega)`, returns `Q [[Q^T B]]_k`.
///
/// On an operator this costs `s_r` forward and `rank(Q)` transpose queries.
pub fn rsvd<R: Rng + ?Sized>(b: Target<'_>, k: usize, s_r: usize, rng: &mut R) -> Result<LowRankFactors> {
    if k == 0 || s_r < k {
        return Err(Error::InvalidParameter(format!("rsvd needs 1 <= k <= s_R, got k={k}, s_R={s_r}")));
    }
    let (m1, m2) = b.shape();
    let omega = gaussian_matrix(m2, s_r, rng);
    let q = orth(&b.right(&omega)?);
    if q.ncols() == 0 {
        return Ok(LowRankFactors::zeros(m1, m2));
    }
    let x = b.left(&q)?;
    truncate(&q, &x, k)
}

/// Generalized Nystrom: `Q = orth(B Omega)`, `X = (Psi^T Q)^+ Psi^T B`,
/// returns `Q [[X]]_k`. Costs `s_r` forward and `s_l` transpose queries.
pub fn gnm<R: Rng + ?Sized>(
    b: Target<'_>,
    k: usize,
    s_r: usize,
    s_l: usize,
    rng: &mut R,
) -> Result<LowRankFactors> {
    if k == 0 || s_r < k || s_l < s_r {
        return Err(Error::InvalidParameter(format!(
            "gnm needs 1 <= k <= s_R <= s_L, got k={k}, s_R={s_r}, s_L={s_l}"
        )));
    }
    let (m1, m2) = b.shape();
    let omega = gaussian_matrix(m2, s_r, rng);
    let psi = gaussian_matrix(m1, s_l, rng);
    let y = b.right(&omega)?;
    let z = b.left(&psi)?;
    gn_from_sketches(&y, &psi, &z, k)
}

/// Post-processing half of Generalized Nystrom: given a right sketch `y`,
/// the left sketching matrix `psi` (rows matching `y`) and the left sketch
/// `z = psi^T B` (possibly noisy), returns `Q [[(psi^T Q)^+ z]]_k` with
/// `Q = orth(y)`.
pub fn gn_from_sketches(
    y: &DMatrix<f64>,
    psi: &DMatrix<f64>,
    z: &DMatrix<f64>,
    k: usize,
) -> Result<LowRankFactors> {
    let q = orth(y);
    let x = gn_coefficients(&q, psi, z)?;
    if q.ncols() == 0 {
        return Ok(LowRankFactors::zeros(y.nrows(), z.ncols()));
    }
    truncate(&q, &x, k)
}

/// `(psi^T q)^+ z`, rejecting underdetermined regressions.
pub fn gn_coefficients(q: &DMatrix<f64>, psi: &DMatrix<f64>, z: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if psi.nrows() != q.nrows() {
        return dim_err(format!("left sketch has {} rows, basis has {}", psi.nrows(), q.nrows()));
    }
    let pq = psi.tr_mul(q);
    if pq.nrows() < pq.ncols() {
        return Err(Error::InvalidParameter(format!(
            "underdetermined regression: sketched basis is {}x{}",
            pq.nrows(),
            pq.ncols()
        )));
    }
    pinv_solve(&pq, z)
}

/// Top-`k` / trailing split of a thin SVD.
#[derive(Clone, Debug)]
pub struct SvdSplit {
    pub u_top: DMatrix<f64>,
    pub sigma_top: DVector<f64>,
    pub v_top: DMatrix<f64>,
    pub u_bot: DMatrix<f64>,
    pub sigma_bot: DVector<f64>,
    pub v_bot: DMatrix<f64>,
}

impl SvdSplit {
    pub fn new(b: &DMatrix<f64>, k: usize) -> Self {
        let (u, s, vt) = thin_svd(b);
        let r = s.len();
        let kk = k.min(r);
        SvdSplit {
            u_top: u.columns(0, kk).into_owned(),
            sigma_top: s.rows(0, kk).into_owned(),
            v_top: vt.rows(0, kk).transpose(),
            u_bot: u.columns(kk, r - kk).into_owned(),
            sigma_bot: s.rows(kk, r - kk).into_owned(),
            v_bot: vt.rows(kk, r - kk).transpose(),
        }
    }

    pub fn omega_top(&self, omega: &DMatrix<f64>) -> DMatrix<f64> {
        self.v_top.tr_mul(omega)
    }

    pub fn omega_bot(&self, omega: &DMatrix<f64>) -> DMatrix<f64> {
        self.v_bot.tr_mul(omega)
    }
}

/// Right-hand side of the deterministic RSVD perturbation bound:
///
/// `||E1 Omega_top^+|| + 2 ||E2|| + sqrt(||Sigma_bot||^2 + ||Sigma_bot Omega_bot Omega_top^+||^2)`
///
/// which dominates `||B - Q [[Q^T B + E2]]_k||_F` for `Q = orth(B Omega + E1)`
/// whenever `Omega_top = V_top^T Omega` has full row rank `k`.
pub fn rsvd_perturb_bound_rhs(
    b: &DMatrix<f64>,
    omega: &DMatrix<f64>,
    e1: &DMatrix<f64>,
    e2: &DMatrix<f64>,
    k: usize,
) -> Result<f64> {
    if omega.nrows() != b.ncols() || e1.shape() != (b.nrows(), omega.ncols()) {
        return dim_err("sketch or noise shape does not match B");
    }
    let split = SvdSplit::new(b, k);
    if split.sigma_top.len() < k || omega.ncols() < k {
        return Err(Error::BoundInapplicable(format!("Omega_top cannot have rank {k}")));
    }
    let top = split.omega_top(omega);
    let sv = singular_values(&top);
    // Measured against ||Omega||, since Omega_top itself may be all roundoff.
    let tol = cutoff(top.shape(), omega.norm());
    if sv[k - 1] <= tol {
        return Err(Error::BoundInapplicable("Omega_top is rank deficient".into()));
    }
    let top_pinv = pinv(&top)?;
    let mut weighted_bot = split.omega_bot(omega);
    for i in 0..split.sigma_bot.len() {
        weighted_bot.row_mut(i).scale_mut(split.sigma_bot[i]);
    }
    let tail2 = split.sigma_bot.norm_squared() + (weighted_bot * &top_pinv).norm_squared();
    Ok((e1 * &top_pinv).norm() + 2.0 * e2.norm() + tail2.sqrt())
}

/// Expected squared-error bound for noisy Generalized Nystrom:
/// `E1 + E2 + 2 sqrt(E1 E2)` with
/// `E1 = (1 + k/(s_R-k-1)) opt2` and
/// `E2 = 18k/(s_R-k-1) ||M||^2 + 8 s_R/(s_L-s_R-1) ||N||^2 + 32 s_R/(s_L-s_R-1) opt2`.
pub fn gn_error_bound(k: usize, s_r: usize, s_l: usize, norm_m2: f64, norm_n2: f64, opt2: f64) -> Result<f64> {
    if s_r <= 2 * k + 1 || s_l <= 2 * s_r + 1 {
        return Err(Error::BoundInapplicable(format!(
            "need s_R > 2k+1 and s_L > 2s_R+1, got k={k}, s_R={s_r}, s_L={s_l}"
        )));
    }
    let (k, s_r, s_l) = (k as f64, s_r as f64, s_l as f64);
    let a = k / (s_r - k - 1.0);
    let c = s_r / (s_l - s_r - 1.0);
    let e1 = (1.0 + a) * opt2;
    let e2 = 18.0 * a * norm_m2 + 8.0 * c * norm_n2 + 32.0 * c * opt2;
    Ok(e1 + e2 + 2.0 * (e1 * e2).sqrt())
}

/// `E ||X G H^+||_F^2 / ||X||_F^2 = p / (q - p - 1)` for Gaussian `G` (`.. x q`)
/// and `H` (`p x q`), valid when `q > p + 1`.
pub fn gaussian_pinv_factor(p: usize, q: usize) -> Result<f64> {
    if q <= p + 1 {
        return Err(Error::BoundInapplicable(format!("need q > p + 1, got p={p}, q={q}")));
    }
    Ok(p as f64 / (q - p - 1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linops::{make_dense_operator, Counted};
    use crate::rng::StreamKey;
    use proptest::prelude::*;

    fn orthonormality_defect(q: &DMatrix<f64>) -> f64 {
        (q.tr_mul(q) - DMatrix::identity(q.ncols(), q.ncols())).norm()
    }

    #[test]
    fn truncated_svd_examples() {
        let i3 = DMatrix::identity(3, 3);
        assert!((truncated_svd(&i3, 3).unwrap().to_dense() - &i3).norm() < 1e-14);

        let d = DMatrix::from_diagonal(&DVector::from_vec(vec![3.0, 2.0, 1.0]));
        let t = truncated_svd(&d, 2).unwrap();
        assert!(((&d - t.to_dense()).norm() - 1.0).abs() < 1e-14);

        let mut rng = StreamKey::new(1).rng();
        let b = gaussian_matrix(6, 5, &mut rng);
        let full = singular_values(&b);
        let want = full.iter().skip(2).map(|s| s * s).sum::<f64>().sqrt();
        let got = (&b - truncated_svd(&b, 2).unwrap().to_dense()).norm();
        assert!((got - want).abs() < 1e-12 * want);
        assert!(truncated_svd(&b, 0).is_err());
    }

    #[test]
    fn orth_examples() {
        let mut e1 = DMatrix::zeros(4, 1);
        e1[0] = 1.0;
        let q = orth(&e1);
        assert_eq!(q.ncols(), 1);
        assert!((q[(0, 0)].abs() - 1.0).abs() < 1e-15);

        let mut rng = StreamKey::new(2).rng();
        let v = gaussian_matrix(5, 1, &mut rng);
        let y = DMatrix::from_columns(&[v.column(0).into_owned(), v.column(0) * 2.0]);
        assert_eq!(orth(&y).ncols(), 1);

        let y = gaussian_matrix(8, 3, &mut rng);
        let q = orth(&y);
        assert_eq!(q.ncols(), 3);
        assert!((&q * q.tr_mul(&y) - &y).norm() <= 1e-12 * y.norm());

        assert_eq!(orth(&DMatrix::zeros(6, 3)).shape(), (6, 0));
        assert_eq!(orth(&DMatrix::zeros(0, 3)).shape(), (0, 0));
    }

    #[test]
    fn pinv_solve_examples() {
        let b = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        assert!((pinv_solve(&DMatrix::identity(2, 2), &b).unwrap() - &b).norm() < 1e-15);

        let a = DMatrix::from_column_slice(2, 1, &[1.0, 1.0]);
        let x = pinv_solve(&a, &DMatrix::from_column_slice(2, 1, &[1.0, 3.0])).unwrap();
        assert!((x[(0, 0)] - 2.0).abs() < 1e-15);

        let mut rng = StreamKey::new(3).rng();
        let a = gaussian_matrix(10, 4, &mut rng);
        let rhs = gaussian_matrix(10, 2, &mut rng);
        let x = pinv_solve(&a, &rhs).unwrap();
        assert!((a.tr_mul(&(&a * x - &rhs))).norm() < 1e-10);
    }

    #[test]
    fn rsvd_exact_and_zero() {
        let mut rng = StreamKey::new(4).rng();
        let b = gaussian_matrix(20, 3, &mut rng) * gaussian_matrix(3, 15, &mut rng);
        let f = rsvd(Target::Dense(&b), 3, 3, &mut rng).unwrap();
        assert!((f.to_dense() - &b).norm() <= 1e-10 * b.norm());
        assert!(orthonormality_defect(&f.q) < 1e-12 * (f.rank() as f64).sqrt().max(1.0));

        let z = DMatrix::zeros(7, 7);
        let f = rsvd(Target::Dense(&z), 2, 4, &mut rng).unwrap();
        assert_eq!(f.rank(), 0);
        assert_eq!(f.to_dense(), z);
        assert!(rsvd(Target::Dense(&z), 3, 2, &mut rng).is_err());
    }

    #[test]
    fn operator_query_counts() {
        let mut rng = StreamKey::new(5).rng();
        let b = gaussian_matrix(12, 2, &mut rng) * gaussian_matrix(2, 12, &mut rng);
        let op = Counted::new(make_dense_operator(b.clone()).unwrap());
        let f = rsvd(Target::Operator(&op), 2, 5, &mut rng).unwrap();
        assert!((f.to_dense() - &b).norm() <= 1e-10 * b.norm());
        assert_eq!(op.counter().forward(), 5);
        assert_eq!(op.counter().transpose(), 2);

        let op = Counted::new(make_dense_operator(b.clone()).unwrap());
        let f = gnm(Target::Operator(&op), 2, 3, 7, &mut rng).unwrap();
        assert!((f.to_dense() - &b).norm() <= 1e-10 * b.norm());
        assert_eq!((op.counter().forward(), op.counter().transpose()), (3, 7));
    }

    #[test]
    fn gnm_exact_recovery_many_trials() {
        let mut rng = StreamKey::new(6).rng();
        for _ in 0..100 {
            let b = gaussian_matrix(15, 3, &mut rng) * gaussian_matrix(3, 11, &mut rng);
            let f = gnm(Target::Dense(&b), 3, 3, 3, &mut rng).unwrap();
            assert!((f.to_dense() - &b).norm() <= 1e-9 * b.norm());
        }
        let mut u = gaussian_matrix(6, 1, &mut rng);
        u /= u.norm();
        let v = gaussian_matrix(1, 6, &mut rng);
        let b = &u * &v;
        let f = gnm(Target::Dense(&b), 1, 2, 5, &mut rng).unwrap();
        assert!((f.to_dense() - &b).norm() <= 1e-12 * b.norm());
        assert!(gnm(Target::Dense(&b), 2, 3, 2, &mut rng).is_err());
    }

    #[test]
    fn gn_from_sketches_cases() {
        let mut rng = StreamKey::new(7).rng();
        let b = gaussian_matrix(9, 2, &mut rng) * gaussian_matrix(2, 8, &mut rng);
        let omega = gaussian_matrix(8, 2, &mut rng);
        let psi = gaussian_matrix(9, 4, &mut rng);
        let f = gn_from_sketches(&(&b * omega), &psi, &psi.tr_mul(&b), 2).unwrap();
        assert!((f.to_dense() - &b).norm() <= 1e-10 * b.norm());

        let y = gaussian_matrix(9, 2, &mut rng);
        let f = gn_from_sketches(&y, &psi, &DMatrix::zeros(4, 8), 2).unwrap();
        assert_eq!(f.to_dense().norm(), 0.0);

        let narrow = gaussian_matrix(9, 1, &mut rng);
        assert!(gn_from_sketches(&y, &narrow, &DMatrix::zeros(1, 8), 2).is_err());
    }

    #[test]
    fn gn_noisy_realization_obeys_deterministic_bound() {
        // Perturbation bound on one GN realization: E2 = X - Q^T B.
        let mut rng = StreamKey::new(8).rng();
        for _ in 0..50 {
            let (m1, m2, p, q, k, s_r, s_l) = (14, 12, 5, 6, 2, 6, 14);
            let b = gaussian_matrix(m1, m2, &mut rng);
            let m = gaussian_matrix(m1, p, &mut rng) * 0.3;
            let n = gaussian_matrix(q, m2, &mut rng) * 0.3;
            let omega = gaussian_matrix(m2, s_r, &mut rng);
            let omega_t = gaussian_matrix(p, s_r, &mut rng);
            let psi = gaussian_matrix(m1, s_l, &mut rng);
            let psi_t = gaussian_matrix(q, s_l, &mut rng);
            let e1 = &m * &omega_t;
            let y = &b * &omega + &e1;
            let z = psi.tr_mul(&b) + psi_t.tr_mul(&n);
            let qb = orth(&y);
            let x = gn_coefficients(&qb, &psi, &z).unwrap();
            let f = truncate(&qb, &x, k).unwrap();
            let e2 = &x - qb.tr_mul(&b);
            let lhs = (&b - f.to_dense()).norm();
            let rhs = rsvd_perturb_bound_rhs(&b, &omega, &e1, &e2, k).unwrap();
            assert!(lhs <= rhs + 1e-10, "{lhs} > {rhs}");
        }
    }

    #[test]
    fn rsvd_rhs_examples() {
        let mut rng = StreamKey::new(9).rng();
        let b = gaussian_matrix(8, 7, &mut rng);
        let split = SvdSplit::new(&b, 2);
        let omega = split.v_top.clone();
        let zeros1 = DMatrix::zeros(8, 2);
        let zeros2 = DMatrix::zeros(2, 7);
        let rhs = rsvd_perturb_bound_rhs(&b, &omega, &zeros1, &zeros2, 2).unwrap();
        assert!((rhs - tail_norm(&b, 2)).abs() < 1e-12 * rhs);

        let omega = gaussian_matrix(7, 4, &mut rng);
        let base = rsvd_perturb_bound_rhs(&b, &omega, &DMatrix::zeros(8, 4), &DMatrix::zeros(4, 7), 2).unwrap();
        let with_b = rsvd_perturb_bound_rhs(&b, &omega, &DMatrix::zeros(8, 4), &b, 2).unwrap();
        assert!((with_b - base - 2.0 * b.norm()).abs() < 1e-12 * with_b);

        // Omega orthogonal to the top singular directions.
        let omega = split.v_bot.columns(0, 3).into_owned();
        assert!(matches!(
            rsvd_perturb_bound_rhs(&b, &omega, &DMatrix::zeros(8, 3), &zeros2, 2),
            Err(Error::BoundInapplicable(_))
        ));
    }

    #[test]
    fn gn_bound_arithmetic() {
        assert_eq!(gn_error_bound(1, 4, 10, 0.0, 0.0, 0.0).unwrap(), 0.0);
        let got = gn_error_bound(1, 4, 10, 0.0, 0.0, 1.0).unwrap();
        // E1 = 1 + 1/2, E2 = 32 * 4 / 5.
        let (e1, e2) = (1.5_f64, 25.6_f64);
        assert!((got - (e1 + e2 + 2.0 * (e1 * e2).sqrt())).abs() < 1e-12);
        assert!((got - (27.1 + 2.0 * 38.4_f64.sqrt())).abs() < 1e-12);
        assert!(gn_error_bound(2, 5, 20, 0.0, 0.0, 1.0).is_err());
        assert!(gn_error_bound(1, 4, 9, 0.0, 0.0, 1.0).is_err());
    }

    #[test]
    fn rsvd_mean_error_near_expectation() {
        let mut rng = StreamKey::new(10).rng();
        let u = orth(&gaussian_matrix(40, 40, &mut rng));
        let v = orth(&gaussian_matrix(40, 40, &mut rng));
        let s = DVector::from_fn(40, |i, _| 0.7_f64.powi(i as i32));
        let b = &u * DMatrix::from_diagonal(&s) * v.transpose();
        let opt = tail_norm(&b, 5);
        let trials = 200;
        let mean: f64 = (0..trials)
            .map(|_| (&b - rsvd(Target::Dense(&b), 5, 15, &mut rng).unwrap().to_dense()).norm())
            .sum::<f64>()
            / trials as f64;
        assert!(mean <= 1.6 * opt, "mean {mean} vs opt {opt}");
    }

    #[test]
    fn gnm_mean_error_within_expectation_bound() {
        let mut rng = StreamKey::new(11).rng();
        let u = orth(&gaussian_matrix(40, 40, &mut rng));
        let v = orth(&gaussian_matrix(40, 40, &mut rng));
        let s = DVector::from_fn(40, |i, _| 0.7_f64.powi(i as i32));
        let b = &u * DMatrix::from_diagonal(&s) * v.transpose();
        let opt2 = tail_norm(&b, 5).powi(2);
        let bound = gn_error_bound(5, 15, 45, 0.0, 0.0, opt2).unwrap();
        let trials = 200;
        let mean: f64 = (0..trials)
            .map(|_| (&b - gnm(Target::Dense(&b), 5, 15, 45, &mut rng).unwrap().to_dense()).norm_squared())
            .sum::<f64>()
            / trials as f64;
        assert!(mean <= bound, "mean {mean} vs bound {bound}");
    }

    #[test]
    fn gnm_error_nonincreasing_in_left_width() {
        let mut rng = StreamKey::new(12).rng();
        let b = gaussian_matrix(30, 30, &mut rng);
        let trials = 300;
        let stats = |s_l: usize, rng: &mut rand_chacha::ChaCha8Rng| {
            let errs: Vec<f64> = (0..trials)
                .map(|_| (&b - gnm(Target::Dense(&b), 3, 8, s_l, rng).unwrap().to_dense()).norm_squared())
                .collect();
            let mean = errs.iter().sum::<f64>() / trials as f64;
            let var = errs.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (trials - 1) as f64;
            (mean, (var / trials as f64).sqrt())
        };
        let mut prev = stats(8, &mut rng);
        for s_l in [12, 18, 27] {
            let cur = stats(s_l, &mut rng);
            assert!(cur.0 <= prev.0 + 2.0 * (cur.1.hypot(prev.1)), "s_L={s_l}: {cur:?} vs {prev:?}");
            prev = cur;
        }
    }

    #[test]
    fn gaussian_pinv_factor_cases() {
        assert_eq!(gaussian_pinv_factor(2, 8).unwrap(), 0.4);
        assert!(gaussian_pinv_factor(2, 3).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn truncation_beats_random_rank_k(m in 2usize..12, n in 2usize..12, k in 1usize..5, seed in any::<u64>()) {
            let mut rng = StreamKey::new(seed).rng();
            let b = gaussian_matrix(m, n, &mut rng);
            let best = (&b - truncated_svd(&b, k).unwrap().to_dense()).norm();
            for _ in 0..100 {
                let r = gaussian_matrix(m, k, &mut rng) * gaussian_matrix(k, n, &mut rng);
                prop_assert!(best <= (&b - r).norm() + 1e-12);
            }
        }

        #[test]
        fn orth_is_orthonormal_projector(m in 1usize..20, s in 1usize..10, rank in 0usize..6, seed in any::<u64>()) {
            let mut rng = StreamKey::new(seed).rng();
            let y = gaussian_matrix(m, rank, &mut rng) * gaussian_matrix(rank, s, &mut rng);
            let q = orth(&y);
            prop_assert_eq!(q.ncols(), rank.min(m).min(s));
            prop_assert!(orthonormality_defect(&q) <= 1e-12 * (q.ncols() as f64).sqrt().max(1.0));
            prop_assert!((&q * q.tr_mul(&y) - &y).norm() <= 1e-12 * y.norm().max(1.0));
            prop_assert_eq!(&q, &orth(&y));
        }
    }
}

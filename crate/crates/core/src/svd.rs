//! Dense factorizations: Householder QR with column pivoting, and a thin SVD
//! by one-sided Jacobi rotations on the pivoted `R` factor.
//!
//! nalgebra's bidiagonal SVD loses orthogonality on rank-deficient inputs
//! (reconstruction errors far above roundoff), and nearly every block this
//! crate factors is rank deficient, so both routines are implemented here.

use nalgebra::{DMatrix, DVector};

/// `A P = Q R` with Householder reflectors and column pivoting by largest
/// remaining column norm.
pub(crate) struct PivotedQr {
    m: usize,
    /// Reflector `(v, beta)` for each eliminated column, `H = I - beta v v^T`
    /// acting on rows `j..m`.
    reflectors: Vec<(DVector<f64>, f64)>,
    /// Upper-triangular `steps x s` factor, columns in pivoted order.
    pub r: DMatrix<f64>,
    /// `perm[c]` is the original index of pivoted column `c`.
    pub perm: Vec<usize>,
}

impl PivotedQr {
    pub fn new(a: &DMatrix<f64>) -> Self {
        let (m, s) = a.shape();
        let mut a = a.clone();
        let mut perm: Vec<usize> = (0..s).collect();
        let mut reflectors = Vec::with_capacity(m.min(s));
        for j in 0..m.min(s) {
            let (mut best, mut best_norm) = (j, 0.0);
            for c in j..s {
                let nrm = a.view((j, c), (m - j, 1)).norm_squared();
                if nrm > best_norm {
                    best = c;
                    best_norm = nrm;
                }
            }
            if best_norm == 0.0 {
                break;
            }
            a.swap_columns(j, best);
            perm.swap(j, best);

            let mut v = a.view((j, j), (m - j, 1)).column(0).into_owned();
            let norm_x = v.norm();
            let alpha = if v[0] >= 0.0 { -norm_x } else { norm_x };
            v[0] -= alpha;
            let vtv = v.norm_squared();
            let beta = if vtv > 0.0 { 2.0 / vtv } else { 0.0 };
            if beta != 0.0 {
                let mut tail = a.view_mut((j, j), (m - j, s - j));
                let w = tail.tr_mul(&v) * beta;
                tail.ger(-1.0, &v, &w, 1.0);
            }
            reflectors.push((v, beta));
        }
        let steps = reflectors.len();
        let r = a.view((0, 0), (steps, s)).upper_triangle();
        PivotedQr { m, reflectors, r, perm }
    }

    pub fn steps(&self) -> usize {
        self.reflectors.len()
    }

    /// `Q[:, ..cols] * c` for a `cols x b` matrix `c` (`cols <= steps`).
    pub fn q_mul(&self, c: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.m, c.ncols());
        out.rows_mut(0, c.nrows()).copy_from(c);
        for (j, (v, beta)) in self.reflectors.iter().enumerate().rev() {
            if *beta == 0.0 {
                continue;
            }
            let mut tail = out.rows_mut(j, self.m - j);
            let w = tail.tr_mul(v) * *beta;
            tail.ger(-1.0, v, &w, 1.0);
        }
        out
    }
}

/// One-sided Jacobi on the columns of `w`: returns `(W', V)` with
/// `w V = W'` and the columns of `W'` mutually orthogonal.
fn jacobi_columns(mut w: DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
    let (m, n) = w.shape();
    let mut v = DMatrix::<f64>::identity(n, n);
    let tol = f64::EPSILON * (m.max(1) as f64).sqrt();
    for _sweep in 0..80 {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let (alpha, beta, gamma) = {
                    let wp = w.column(p);
                    let wq = w.column(q);
                    (wp.norm_squared(), wq.norm_squared(), wp.dot(&wq))
                };
                if alpha == 0.0 || beta == 0.0 || gamma.abs() <= tol * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut w, p, q, c, s);
                rotate(&mut v, p, q, c, s);
            }
        }
        if !rotated {
            break;
        }
    }
    (w, v)
}

fn rotate(a: &mut DMatrix<f64>, p: usize, q: usize, c: f64, s: f64) {
    let rows = a.nrows();
    let data = a.as_mut_slice();
    let (lo, hi) = data.split_at_mut(q * rows);
    let cp = &mut lo[p * rows..(p + 1) * rows];
    let cq = &mut hi[..rows];
    for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
        let (a, b) = (*x, *y);
        *x = c * a - s * b;
        *y = s * a + c * b;
    }
}

/// `[basis | complement]`: extends the orthonormal columns of `basis`
/// (`m x r`) to `p` orthonormal columns.
fn extend_basis(basis: &DMatrix<f64>, p: usize) -> DMatrix<f64> {
    let (m, r) = basis.shape();
    let mut out = DMatrix::zeros(m, p);
    out.columns_mut(0, r).copy_from(basis);
    if p > r {
        let qr = PivotedQr::new(basis);
        let mut sel = DMatrix::zeros(m, p - r);
        for c in 0..p - r {
            sel[(qr.steps() + c, c)] = 1.0;
        }
        out.columns_mut(r, p - r).copy_from(&qr.q_mul(&sel));
    }
    out
}

/// Thin SVD `(U, sigma, V^T)` with `sigma` nonincreasing, `U` and `V`
/// column-orthonormal (`p = min(m, n)` columns each).
pub fn thin_svd(b: &DMatrix<f64>) -> (DMatrix<f64>, DVector<f64>, DMatrix<f64>) {
    let (m, n) = b.shape();
    if m == 0 || n == 0 {
        return (DMatrix::zeros(m, 0), DVector::zeros(0), DMatrix::zeros(0, n));
    }
    if m < n {
        let (u, s, vt) = thin_svd(&b.transpose());
        return (vt.transpose(), s, u.transpose());
    }
    // Work at unit scale so tiny singular values cannot underflow.
    let scale = b.amax();
    if scale == 0.0 {
        return (extend_basis(&DMatrix::zeros(m, 0), n), DVector::zeros(n), DMatrix::identity(n, n));
    }
    let (u, s, vt) = unit_scale_svd(&(b / scale));
    (u, s * scale, vt)
}

/// `B P = Q R`; rows of `R` past the numerical rank `r` (pivots at or below
/// `eps |R_00|`) are dropped, then one-sided Jacobi on the `n x r` matrix
/// `R_r^T` gives `R_r^T V = W` with orthogonal columns, so
/// `B = (Q_r V) Sigma (P W Sigma^-1)^T`.
fn unit_scale_svd(b: &DMatrix<f64>) -> (DMatrix<f64>, DVector<f64>, DMatrix<f64>) {
    let n = b.ncols();
    let qr = PivotedQr::new(b);
    let r00 = qr.r[(0, 0)].abs();
    let r = (0..qr.steps()).take_while(|&j| qr.r[(j, j)].abs() > f64::EPSILON * r00).count();
    let (w, v) = jacobi_columns(qr.r.rows(0, r).transpose());

    let sigma_all: Vec<f64> = (0..r).map(|c| w.column(c).norm()).collect();
    let mut order: Vec<usize> = (0..r).collect();
    order.sort_by(|&a, &b| sigma_all[b].partial_cmp(&sigma_all[a]).unwrap().then(a.cmp(&b)));
    let smax = sigma_all[order[0]];
    // Below this a column is roundoff with no meaningful direction.
    let floor = smax * f64::EPSILON * f64::EPSILON;
    let order: Vec<usize> = order.into_iter().take_while(|&c| sigma_all[c] > floor).collect();
    let rv = order.len();

    let mut sigma = DVector::zeros(n);
    let mut left = DMatrix::zeros(r, rv);
    let mut right = DMatrix::zeros(n, rv);
    for (dst, &src) in order.iter().enumerate() {
        let s = sigma_all[src];
        sigma[dst] = s;
        left.set_column(dst, &v.column(src));
        let wc = w.column(src) / s;
        for (c, &orig) in qr.perm.iter().enumerate() {
            right[(orig, dst)] = wc[c];
        }
    }
    let u = extend_basis(&qr.q_mul(&left), n);
    let vt = extend_basis(&right, n).transpose();
    (u, sigma, vt)
}

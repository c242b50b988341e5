//! Matrix-free operators.
//!
//! The target matrix is only ever touched through [`LinearOperator::apply`],
//! which pushes an `n x b` block through `A` or `A^T`. [`Counted`] wraps any
//! operator and tallies the number of columns sent each way.

use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::error::{dim_err, Error, Result};

/// Which product a query computes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Side {
    /// `A X`
    Forward,
    /// `A^T X`
    Transpose,
}

/// A square operator reachable only through blocked products.
///
/// Implementations must be deterministic: the same input always produces the
/// same output.
pub trait LinearOperator: Send + Sync {
    fn dim(&self) -> usize;

    /// Computes `A X` or `A^T X` without shape checks.
    fn apply_unchecked(&self, x: &DMatrix<f64>, side: Side) -> DMatrix<f64>;

    /// Computes `A X` or `A^T X`. `x` must be `n x b` with `b >= 1`.
    fn apply(&self, x: &DMatrix<f64>, side: Side) -> Result<DMatrix<f64>> {
        let n = self.dim();
        if x.nrows() != n {
            return dim_err(format!("operator is {n}x{n} but block has {} rows", x.nrows()));
        }
        if x.ncols() == 0 {
            return dim_err("empty query block");
        }
        Ok(self.apply_unchecked(x, side))
    }
}

impl<T: LinearOperator + ?Sized> LinearOperator for &T {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn apply_unchecked(&self, x: &DMatrix<f64>, side: Side) -> DMatrix<f64> {
        (**self).apply_unchecked(x, side)
    }
}

impl<T: LinearOperator + ?Sized> LinearOperator for Box<T> {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn apply_unchecked(&self, x: &DMatrix<f64>, side: Side) -> DMatrix<f64> {
        (**self).apply_unchecked(x, side)
    }
}

impl<T: LinearOperator + ?Sized> LinearOperator for Arc<T> {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn apply_unchecked(&self, x: &DMatrix<f64>, side: Side) -> DMatrix<f64> {
        (**self).apply_unchecked(x, side)
    }
}

/// Number of columns pushed through `A` and `A^T`.
#[derive(Debug, Default)]
pub struct QueryCounter {
    forward: AtomicUsize,
    transpose: AtomicUsize,
}

impl QueryCounter {
    pub fn forward(&self) -> usize {
        self.forward.load(Ordering::SeqCst)
    }

    pub fn transpose(&self) -> usize {
        self.transpose.load(Ordering::SeqCst)
    }

    fn record(&self, side: Side, cols: usize) {
        match side {
            Side::Forward => self.forward.fetch_add(cols, Ordering::SeqCst),
            Side::Transpose => self.transpose.fetch_add(cols, Ordering::SeqCst),
        };
    }
}

/// An operator wrapper that counts queries.
pub struct Counted<O> {
    inner: O,
    counter: QueryCounter,
}

impl<O: LinearOperator> Counted<O> {
    pub fn new(inner: O) -> Self {
        Counted { inner, counter: QueryCounter::default() }
    }

    pub fn counter(&self) -> &QueryCounter {
        &self.counter
    }

    pub fn inner(&self) -> &O {
        &self.inner
    }
}

impl<O: LinearOperator> LinearOperator for Counted<O> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn apply_unchecked(&self, x: &DMatrix<f64>, side: Side) -> DMatrix<f64> {
        self.counter.record(side, x.ncols());
        self.inner.apply_unchecked(x, side)
    }
}

/// Exact dense products with a stored square matrix.
#[derive(Clone, Debug)]
pub struct DenseOperator {
    matrix: DMatrix<f64>,
}

impl DenseOperator {
    pub fn new(matrix: DMatrix<f64>) -> Result<Self> {
        if !matrix.is_square() {
            return dim_err(format!("dense operator must be square, got {:?}", matrix.shape()));
        }
        Ok(DenseOperator { matrix })
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }
}

impl LinearOperator for DenseOperator {
    fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    fn apply_unchecked(&self, x: &DMatrix<f64>, side: Side) -> DMatrix<f64> {
        match side {
            Side::Forward => &self.matrix * x,
            Side::Transpose => self.matrix.tr_mul(x),
        }
    }
}

pub fn make_dense_operator(m: DMatrix<f64>) -> Result<DenseOperator> {
    DenseOperator::new(m)
}

/// Expands an operator into a dense matrix by applying it to the identity.
/// Bypasses any query counter wrapped around `op`'s inner operator only if
/// called on the inner operator directly.
pub fn materialize(op: &dyn LinearOperator) -> DMatrix<f64> {
    let n = op.dim();
    let chunk = 256.min(n.max(1));
    let mut out = DMatrix::zeros(n, n);
    let mut start = 0;
    while start < n {
        let b = chunk.min(n - start);
        let mut e = DMatrix::zeros(n, b);
        for c in 0..b {
            e[(start + c, c)] = 1.0;
        }
        let cols = op.apply_unchecked(&e, Side::Forward);
        out.columns_mut(start, b).copy_from(&cols);
        start += b;
    }
    out
}

/// Inverse periodic Laplacian on a `t x t` grid, applied spectrally:
/// `f -> IDFT2(D .* DFT2(f))` with `D[i,j] = -1 / (kappa_i^2 + kappa_j^2)`.
///
/// Grid values are flattened row-major (`f[i * t + j]`). The zero mode is
/// mapped to zero, so the operator is the pseudo-inverse on mean-zero data.
pub struct PoissonOperator {
    t: usize,
    multiplier: Vec<f64>,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

/// Harmonic index for DFT bin `i` on a grid of side `t`.
pub fn harmonic(i: usize, t: usize) -> f64 {
    if i < t / 2 {
        i as f64
    } else {
        i as f64 - t as f64
    }
}

impl PoissonOperator {
    pub fn new(t: usize) -> Result<Self> {
        if t < 2 || !t.is_multiple_of(2) {
            return Err(Error::InvalidParameter(format!("grid side must be even and >= 2, got {t}")));
        }
        let mut multiplier = vec![0.0; t * t];
        for i in 0..t {
            for j in 0..t {
                if i == 0 && j == 0 {
                    continue;
                }
                let (ki, kj) = (harmonic(i, t), harmonic(j, t));
                multiplier[i * t + j] = -1.0 / (ki * ki + kj * kj);
            }
        }
        let mut planner = FftPlanner::new();
        Ok(PoissonOperator {
            t,
            multiplier,
            forward: planner.plan_fft_forward(t),
            inverse: planner.plan_fft_inverse(t),
        })
    }

    pub fn side(&self) -> usize {
        self.t
    }

    fn transpose_in_place(&self, buf: &mut [Complex64], scratch: &mut [Complex64]) {
        let t = self.t;
        for i in 0..t {
            for j in 0..t {
                scratch[j * t + i] = buf[i * t + j];
            }
        }
        buf.copy_from_slice(scratch);
    }

    fn apply_column(&self, col: &[f64], out: &mut [f64]) {
        let n = self.t * self.t;
        let mut buf: Vec<Complex64> = col.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        let mut scratch = vec![Complex64::new(0.0, 0.0); n];
        self.forward.process(&mut buf);
        self.transpose_in_place(&mut buf, &mut scratch);
        self.forward.process(&mut buf);
        // The multiplier is symmetric in (i, j), so the transposed layout is harmless.
        for (b, d) in buf.iter_mut().zip(&self.multiplier) {
            *b *= *d;
        }
        self.inverse.process(&mut buf);
        self.transpose_in_place(&mut buf, &mut scratch);
        self.inverse.process(&mut buf);
        let scale = 1.0 / n as f64;
        for (o, b) in out.iter_mut().zip(&buf) {
            *o = b.re * scale;
        }
    }
}

impl LinearOperator for PoissonOperator {
    fn dim(&self) -> usize {
        self.t * self.t
    }

    // D is real and even under (i, j) -> (-i, -j), so A is symmetric and
    // both sides share one code path.
    fn apply_unchecked(&self, x: &DMatrix<f64>, _side: Side) -> DMatrix<f64> {
        let n = self.dim();
        let cols = crate::par::map_range(x.ncols(), |c| {
            let mut out = vec![0.0; n];
            self.apply_column(x.column(c).as_slice(), &mut out);
            out
        });
        let mut y = DMatrix::zeros(n, x.ncols());
        for (c, col) in cols.iter().enumerate() {
            y.column_mut(c).copy_from_slice(col);
        }
        y
    }
}

pub fn make_poisson_operator(t: usize) -> Result<PoissonOperator> {
    PoissonOperator::new(t)
}

/// A set of pairwise-distinct points in three dimensions.
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    points: Vec<[f64; 3]>,
}

impl PointCloud {
    pub fn new(points: Vec<[f64; 3]>) -> Result<Self> {
        let mut sorted: Vec<&[f64; 3]> = points.iter().collect();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
        if let Some(w) = sorted.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::InvalidParameter(format!("coincident points at {:?}", w[0])));
        }
        if points.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("non-finite coordinate".into()));
        }
        Ok(PointCloud { points })
    }

    /// Noisy helix: `x` uniformly spaced in `[-4, 4]`,
    /// `y = sin(2 pi x) + 0.05 g`, `z = cos(2 pi x) + 0.05 h`.
    pub fn perturbed_helix<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Result<Self> {
        let tau = std::f64::consts::TAU;
        let points = (0..n)
            .map(|i| {
                let x = if n == 1 { 0.0 } else { -4.0 + 8.0 * i as f64 / (n - 1) as f64 };
                let g: f64 = StandardNormal.sample(rng);
                let h: f64 = StandardNormal.sample(rng);
                [x, (tau * x).sin() + 0.05 * g, (tau * x).cos() + 0.05 * h]
            })
            .collect();
        PointCloud::new(points)
    }

    /// Reads `x,y,z` rows. A non-numeric first row is treated as a header.
    pub fn from_csv(path: impl AsRef<Path>) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(false)
            .trim(csv::Trim::All)
            .from_path(path)?;
        let mut points = Vec::new();
        for (row, record) in reader.records().enumerate() {
            let record = record?;
            if record.len() != 3 {
                return Err(Error::Format(format!("row {row}: expected 3 fields, got {}", record.len())));
            }
            let parsed: std::result::Result<Vec<f64>, _> = record.iter().map(str::parse::<f64>).collect();
            match parsed {
                Ok(v) => points.push([v[0], v[1], v[2]]),
                Err(_) if row == 0 => continue,
                Err(e) => return Err(Error::Format(format!("row {row}: {e}"))),
            }
        }
        PointCloud::new(points)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[[f64; 3]] {
        &self.points
    }
}

/// Inverse-distance kernel matrix with zero diagonal, applied by direct
/// dense products.
#[derive(Clone, Debug)]
pub struct KernelOperator {
    dense: DenseOperator,
}

/// Entry `(i, j)` of the inverse-distance kernel.
pub fn kernel_entry(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let d2: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    if d2 == 0.0 {
        0.0
    } else {
        1.0 / d2.sqrt()
    }
}

impl KernelOperator {
    pub fn new(cloud: &PointCloud) -> Self {
        let p = cloud.points();
        let n = p.len();
        let m = DMatrix::from_fn(n, n, |i, j| if i == j { 0.0 } else { kernel_entry(&p[i], &p[j]) });
        KernelOperator { dense: DenseOperator { matrix: m } }
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        self.dense.matrix()
    }
}

impl LinearOperator for KernelOperator {
    fn dim(&self) -> usize {
        self.dense.dim()
    }

    // Symmetric kernel: transpose equals forward.
    fn apply_unchecked(&self, x: &DMatrix<f64>, _side: Side) -> DMatrix<f64> {
        self.dense.apply_unchecked(x, Side::Forward)
    }
}

pub fn make_kernel_operator(cloud: &PointCloud) -> KernelOperator {
    KernelOperator::new(cloud)
}

/// The 4x4 block instance on which truncated RSVD peeling doubles its error.
///
/// Blocks are `2k x 2k` with `X = diag(I_k, 0)` and `Y = eta * diag(0, I_k)`:
///
/// ```text
/// 0 X Y X
/// X 0 X 0
/// Y X 0 X
/// X 0 X 0
/// ```
pub fn hard_block_matrix(k: usize, eta: f64) -> Result<DMatrix<f64>> {
    if k == 0 {
        return Err(Error::InvalidParameter("k must be >= 1".into()));
    }
    if !(eta > 1.0) {
        return Err(Error::InvalidParameter(format!("eta must exceed 1, got {eta}")));
    }
    let b = 2 * k;
    let mut m = DMatrix::zeros(4 * b, 4 * b);
    // 0 = zero, 1 = X, 2 = Y
    const PATTERN: [[u8; 4]; 4] = [[0, 1, 2, 1], [1, 0, 1, 0], [2, 1, 0, 1], [1, 0, 1, 0]];
    for (bi, row) in PATTERN.iter().enumerate() {
        for (bj, &kind) in row.iter().enumerate() {
            for d in 0..k {
                match kind {
                    1 => m[(bi * b + d, bj * b + d)] = 1.0,
                    2 => m[(bi * b + k + d, bj * b + k + d)] = eta,
                    _ => {}
                }
            }
        }
    }
    Ok(m)
}

pub fn make_hard_block_instance(k: usize, eta: f64) -> Result<DenseOperator> {
    DenseOperator::new(hard_block_matrix(k, eta)?)
}

/// `2^L x 2^L` instance on which truncated RSVD peeling error grows like `n`.
///
/// With 1-based indices: column 1 holds a 1 in every odd row, column 2 holds
/// `eta` in rows `2, 4, 8, ..., 2^L`.
pub fn exp_hard_matrix(levels: u32, eta: f64) -> Result<DMatrix<f64>> {
    if !(2..=20).contains(&levels) {
        return Err(Error::InvalidParameter(format!("levels must be in 2..=20, got {levels}")));
    }
    let n = 1usize << levels;
    let mut m = DMatrix::zeros(n, n);
    for i in (0..n).step_by(2) {
        m[(i, 0)] = 1.0;
    }
    for p in 1..=levels {
        m[((1usize << p) - 1, 1)] = eta;
    }
    Ok(m)
}

pub fn make_exp_hard_instance(levels: u32, eta: f64) -> Result<DenseOperator> {
    DenseOperator::new(exp_hard_matrix(levels, eta)?)
}

/// Writes a dense matrix as CSV, one row per line, 17 significant digits.
pub fn write_dense_csv(m: &DMatrix<f64>, path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
    for i in 0..m.nrows() {
        w.write_record(m.row(i).iter().map(|v| format!("{v:.16e}")))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_dense_csv(path: impl AsRef<Path>) -> Result<DMatrix<f64>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path)?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (r, record) in reader.records().enumerate() {
        let record = record?;
        let row: std::result::Result<Vec<f64>, _> = record.iter().map(str::parse::<f64>).collect();
        rows.push(row.map_err(|e| Error::Format(format!("row {r}: {e}")))?);
    }
    let ncols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::Format("ragged rows".into()));
    }
    Ok(DMatrix::from_fn(rows.len(), ncols, |i, j| rows[i][j]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{gaussian_matrix, StreamKey};

    #[test]
    fn dense_identity_and_transpose() {
        let id = make_dense_operator(DMatrix::identity(2, 2)).unwrap();
        let x = DMatrix::from_column_slice(2, 1, &[1.0, 0.0]);
        assert_eq!(id.apply(&x, Side::Forward).unwrap(), x);

        let m = make_dense_operator(DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 2.0, 0.0])).unwrap();
        let y = m.apply(&x, Side::Transpose).unwrap();
        assert_eq!(y, DMatrix::from_column_slice(2, 1, &[0.0, 1.0]));
    }

    #[test]
    fn zero_block_still_counts() {
        let op = Counted::new(make_dense_operator(DMatrix::identity(3, 3)).unwrap());
        let y = op.apply(&DMatrix::zeros(3, 4), Side::Forward).unwrap();
        assert!(y.iter().all(|&v| v == 0.0));
        op.apply(&DMatrix::zeros(3, 2), Side::Transpose).unwrap();
        assert_eq!(op.counter().forward(), 4);
        assert_eq!(op.counter().transpose(), 2);
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let op = make_dense_operator(DMatrix::identity(3, 3)).unwrap();
        assert!(matches!(op.apply(&DMatrix::zeros(4, 1), Side::Forward), Err(Error::Dimension(_))));
        assert!(matches!(op.apply(&DMatrix::zeros(3, 0), Side::Forward), Err(Error::Dimension(_))));
        assert!(make_dense_operator(DMatrix::zeros(2, 3)).is_err());
    }

    #[test]
    fn dense_columns_and_rows() {
        let mut rng = StreamKey::new(3).rng();
        let m = gaussian_matrix(8, 8, &mut rng);
        let op = make_dense_operator(m.clone()).unwrap();
        for j in 0..8 {
            let mut e = DMatrix::zeros(8, 1);
            e[j] = 1.0;
            assert_eq!(op.apply(&e, Side::Forward).unwrap().column(0), m.column(j));
            assert_eq!(op.apply(&e, Side::Transpose).unwrap().column(0), m.row(j).transpose());
        }
        assert_eq!(materialize(&op), m);
    }

    #[test]
    fn poisson_rejects_odd_side() {
        assert!(make_poisson_operator(5).is_err());
        assert!(make_poisson_operator(0).is_err());
    }

    #[test]
    fn poisson_single_mode_and_constant() {
        let t = 8;
        let op = make_poisson_operator(t).unwrap();
        // Real mode (1,0) + (-1,0): cos(2 pi i / t) along the first grid axis.
        let f = DMatrix::from_fn(t * t, 1, |idx, _| {
            let i = idx / t;
            (std::f64::consts::TAU * i as f64 / t as f64).cos()
        });
        let u = op.apply(&f, Side::Forward).unwrap();
        assert!((u + &f).norm() < 1e-12 * f.norm());

        let c = DMatrix::from_element(t * t, 1, 3.0);
        assert!(op.apply(&c, Side::Forward).unwrap().norm() < 1e-12);
    }

    #[test]
    fn kernel_two_points() {
        let cloud = PointCloud::new(vec![[0.0, 0.0, 0.0], [0.0, 2.0, 0.0]]).unwrap();
        let op = make_kernel_operator(&cloud);
        assert_eq!(op.matrix(), &DMatrix::from_row_slice(2, 2, &[0.0, 0.5, 0.5, 0.0]));
        assert!(PointCloud::new(vec![[1.0, 2.0, 3.0], [0.0, 0.0, 0.0], [1.0, 2.0, 3.0]]).is_err());
    }

    #[test]
    fn hard_block_layout() {
        let m = hard_block_matrix(1, 10.0).unwrap();
        assert_eq!(m.shape(), (8, 8));
        // Block (1,2) is X: its (1,1) entry sits at global (1,3) in 1-based terms.
        assert_eq!(m[(0, 2)], 1.0);
        assert_eq!(m[(1, 3)], 0.0);
        // Block (1,3) is Y: eta at its local (2,2), global (2,6).
        assert_eq!(m[(1, 5)], 10.0);
        assert_eq!(m[(0, 4)], 0.0);
        assert_eq!(m, m.transpose());
        assert!(hard_block_matrix(1, 1.0).is_err());
        assert!(hard_block_matrix(0, 2.0).is_err());
    }

    #[test]
    fn exp_hard_layout() {
        let m = exp_hard_matrix(3, 5.0).unwrap();
        let col0: Vec<usize> = (0..8).filter(|&i| m[(i, 0)] != 0.0).map(|i| i + 1).collect();
        let col1: Vec<usize> = (0..8).filter(|&i| m[(i, 1)] != 0.0).map(|i| i + 1).collect();
        assert_eq!(col0, vec![1, 3, 5, 7]);
        assert_eq!(col1, vec![2, 4, 8]);
        assert_eq!(m.iter().filter(|&&v| v != 0.0).count(), 7);

        let z = exp_hard_matrix(3, 0.0).unwrap();
        assert_eq!(z.iter().filter(|&&v| v != 0.0).count(), 4);
        assert!(exp_hard_matrix(1, 1.0).is_err());
    }

    #[test]
    fn csv_round_trips() {
        let dir = std::env::temp_dir().join(format!("hodlr-linops-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let pts = dir.join("pts.csv");
        std::fs::write(&pts, "x,y,z\n0,0,0\n1.5,2,-3\n").unwrap();
        let cloud = PointCloud::from_csv(&pts).unwrap();
        assert_eq!(cloud.points(), &[[0.0, 0.0, 0.0], [1.5, 2.0, -3.0]]);

        let m = DMatrix::from_row_slice(2, 2, &[0.1, -2.0, 1.0 / 3.0, 7e-300]);
        let path = dir.join("m.csv");
        write_dense_csv(&m, &path).unwrap();
        assert_eq!(read_dense_csv(&path).unwrap(), m);
    }
}

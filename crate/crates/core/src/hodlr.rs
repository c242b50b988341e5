//! HODLR(k) matrices.
//!
//! An `n x n` matrix with `n = n_base * 2^L` is split at level `l` into
//! `2^l x 2^l` blocks of size `n / 2^l`. Level `l` stores one low-rank factor
//! per block column `j` (0-based), placed in row block `j ^ 1`: the two
//! off-diagonal blocks inside each diagonal block of level `l - 1`. After `L`
//! levels only the `2^L` dense leaf blocks on the diagonal remain.

use std::path::Path;

use nalgebra::DMatrix;
use rand::Rng;
use sha2::{Digest, Sha256};

use crate::error::{dim_err, Error, Result};
use crate::linops::{write_dense_csv, LinearOperator, Side};
use crate::lowrank::{orth, truncated_svd, LowRankFactors};
use crate::par;
use crate::rng::gaussian_matrix;

/// Largest dimension [`HodlrMatrix::to_dense`] will expand.
pub const DENSE_LIMIT: usize = 8192;

const MAGIC: &[u8; 8] = b"HODLRK\0\0";
const FORMAT_VERSION: u32 = 1;

/// Level count and leaf size for an `(n, k)` pair.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Layout {
    pub n: usize,
    pub k: usize,
    pub levels: usize,
    pub n_base: usize,
}

impl Layout {
    /// `L = ceil(log2(n / k))` (0 when `n <= k`); requires `2^L | n`.
    pub fn new(n: usize, k: usize) -> Result<Self> {
        if n == 0 || k == 0 {
            return Err(Error::InvalidParameter(format!("need n, k >= 1, got n={n}, k={k}")));
        }
        let mut levels = 0;
        while n > k << levels {
            levels += 1;
        }
        if !n.is_multiple_of(1 << levels) {
            return Err(Error::InvalidParameter(format!(
                "n={n} is not n_base * 2^{levels} with n_base <= k={k}"
            )));
        }
        Ok(Layout { n, k, levels, n_base: n >> levels })
    }

    /// Side length of a block at `level` (0 is the whole matrix).
    pub fn block_size(&self, level: usize) -> usize {
        self.n >> level
    }

    /// `(row offset, column offset, size)` of factor `j` at `level >= 1`.
    pub fn placement(&self, level: usize, j: usize) -> (usize, usize, usize) {
        let nb = self.block_size(level);
        ((j ^ 1) * nb, j * nb, nb)
    }
}

/// One level's recovered factors, indexed by block column.
#[derive(Clone, Debug, PartialEq)]
pub struct LevelContribution {
    pub level: usize,
    pub factors: Vec<LowRankFactors>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HodlrMatrix {
    layout: Layout,
    levels: Vec<Vec<LowRankFactors>>,
    leaves: Vec<DMatrix<f64>>,
}

/// Adds level `level`'s product with `x` into `out`. Returns the flop count.
pub(crate) fn apply_level(
    layout: &Layout,
    level: usize,
    factors: &[LowRankFactors],
    x: &DMatrix<f64>,
    side: Side,
    out: &mut DMatrix<f64>,
) -> u64 {
    let b = x.ncols();
    let parts = par::map_range(factors.len(), |j| {
        let (r0, c0, nb) = layout.placement(level, j);
        let f = &factors[j];
        match side {
            Side::Forward => (r0, &f.q * (&f.x * x.rows(c0, nb))),
            Side::Transpose => (c0, f.x.tr_mul(&f.q.tr_mul(&x.rows(r0, nb)))),
        }
    });
    let mut flops = 0u64;
    for (j, (row, part)) in parts.into_iter().enumerate() {
        let nb = layout.block_size(level);
        flops += 4 * (nb * factors[j].rank() * b) as u64;
        let mut dst = out.rows_mut(row, nb);
        dst += part;
    }
    flops
}

impl HodlrMatrix {
    /// Builds a HODLR(k) matrix. Every factor must have rank at most `k`.
    pub fn assemble(
        n: usize,
        k: usize,
        contribs: Vec<LevelContribution>,
        leaves: Vec<DMatrix<f64>>,
    ) -> Result<Self> {
        Self::assemble_inner(n, k, contribs, leaves, true)
    }

    /// Like [`assemble`](Self::assemble) but accepts factors of any rank.
    /// The result is only HODLR(k) in layout.
    pub fn assemble_untruncated(
        n: usize,
        k: usize,
        contribs: Vec<LevelContribution>,
        leaves: Vec<DMatrix<f64>>,
    ) -> Result<Self> {
        Self::assemble_inner(n, k, contribs, leaves, false)
    }

    fn assemble_inner(
        n: usize,
        k: usize,
        contribs: Vec<LevelContribution>,
        leaves: Vec<DMatrix<f64>>,
        enforce_rank: bool,
    ) -> Result<Self> {
        let layout = Layout::new(n, k)?;
        let mut levels: Vec<Option<Vec<LowRankFactors>>> = vec![None; layout.levels];
        for c in contribs {
            if c.level == 0 || c.level > layout.levels {
                return Err(Error::Structure(format!("level {} outside 1..={}", c.level, layout.levels)));
            }
            let slot = &mut levels[c.level - 1];
            if slot.is_some() {
                return Err(Error::Structure(format!("level {} given twice (overlapping blocks)", c.level)));
            }
            let nb = layout.block_size(c.level);
            if c.factors.len() != 1 << c.level {
                return Err(Error::Structure(format!(
                    "level {} needs {} blocks, got {}",
                    c.level,
                    1 << c.level,
                    c.factors.len()
                )));
            }
            for (j, f) in c.factors.iter().enumerate() {
                if f.nrows() != nb || f.ncols() != nb {
                    return Err(Error::Structure(format!("level {} block {j} is not {nb}x{nb}", c.level)));
                }
                if enforce_rank && f.rank() > k {
                    return Err(Error::Structure(format!(
                        "level {} block {j} has rank {} > {k}",
                        c.level,
                        f.rank()
                    )));
                }
            }
            *slot = Some(c.factors);
        }
        let levels = levels
            .into_iter()
            .enumerate()
            .map(|(i, l)| l.ok_or_else(|| Error::Structure(format!("level {} missing", i + 1))))
            .collect::<Result<Vec<_>>>()?;
        if leaves.len() != 1 << layout.levels {
            return Err(Error::Structure(format!(
                "need {} leaf blocks, got {}",
                1 << layout.levels,
                leaves.len()
            )));
        }
        if leaves.iter().any(|b| b.shape() != (layout.n_base, layout.n_base)) {
            return Err(Error::Structure(format!("leaf blocks must be {0}x{0}", layout.n_base)));
        }
        let h = HodlrMatrix { layout, levels, leaves };
        h.check_disjoint()?;
        Ok(h)
    }

    /// Every stored block must lie off the diagonal of its level and inside a
    /// diagonal block of the previous level; leaves tile the diagonal. These
    /// regions are pairwise disjoint.
    fn check_disjoint(&self) -> Result<()> {
        for level in 1..=self.layout.levels {
            let parent = self.layout.block_size(level - 1);
            for j in 0..1 << level {
                let (r, c, _) = self.layout.placement(level, j);
                if r == c || r / parent != c / parent {
                    return Err(Error::Structure(format!("level {level} block {j} misplaced")));
                }
            }
        }
        Ok(())
    }

    /// The identity with no off-diagonal content.
    pub fn identity(n: usize, k: usize) -> Result<Self> {
        let layout = Layout::new(n, k)?;
        let contribs = (1..=layout.levels)
            .map(|l| {
                let nb = layout.block_size(l);
                LevelContribution { level: l, factors: vec![LowRankFactors::zeros(nb, nb); 1 << l] }
            })
            .collect();
        let leaves = vec![DMatrix::identity(layout.n_base, layout.n_base); 1 << layout.levels];
        Self::assemble(n, k, contribs, leaves)
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn n(&self) -> usize {
        self.layout.n
    }

    pub fn k(&self) -> usize {
        self.layout.k
    }

    pub fn num_levels(&self) -> usize {
        self.layout.levels
    }

    /// Factors of `level` (1-based), indexed by block column.
    pub fn level(&self, level: usize) -> &[LowRankFactors] {
        &self.levels[level - 1]
    }

    pub fn leaves(&self) -> &[DMatrix<f64>] {
        &self.leaves
    }

    pub fn max_rank(&self) -> usize {
        self.levels.iter().flatten().map(LowRankFactors::rank).max().unwrap_or(0)
    }

    /// `H X` or `H^T X` together with the number of floating-point
    /// operations spent.
    pub fn apply_counted(&self, x: &DMatrix<f64>, side: Side) -> Result<(DMatrix<f64>, u64)> {
        if x.nrows() != self.n() {
            return dim_err(format!("HODLR matrix is {0}x{0} but block has {1} rows", self.n(), x.nrows()));
        }
        let mut out = DMatrix::zeros(self.n(), x.ncols());
        let mut flops = 0;
        for (i, factors) in self.levels.iter().enumerate() {
            flops += apply_level(&self.layout, i + 1, factors, x, side, &mut out);
        }
        let nb = self.layout.n_base;
        let parts = par::map_range(self.leaves.len(), |i| {
            let xi = x.rows(i * nb, nb);
            match side {
                Side::Forward => &self.leaves[i] * xi,
                Side::Transpose => self.leaves[i].tr_mul(&xi),
            }
        });
        for (i, p) in parts.into_iter().enumerate() {
            let mut dst = out.rows_mut(i * nb, nb);
            dst += p;
            flops += 2 * (nb * nb * x.ncols()) as u64;
        }
        Ok((out, flops))
    }

    pub fn apply(&self, x: &DMatrix<f64>, side: Side) -> Result<DMatrix<f64>> {
        Ok(self.apply_counted(x, side)?.0)
    }

    /// Dense `n x n` expansion, refused above [`DENSE_LIMIT`].
    pub fn to_dense(&self) -> Result<DMatrix<f64>> {
        let n = self.n();
        if n > DENSE_LIMIT {
            return Err(Error::SizeGuard(format!("dense expansion of n={n} exceeds {DENSE_LIMIT}")));
        }
        let mut m = DMatrix::zeros(n, n);
        for (i, factors) in self.levels.iter().enumerate() {
            for (j, f) in factors.iter().enumerate() {
                let (r, c, nb) = self.layout.placement(i + 1, j);
                m.view_mut((r, c), (nb, nb)).copy_from(&f.to_dense());
            }
        }
        let nb = self.layout.n_base;
        for (i, leaf) in self.leaves.iter().enumerate() {
            m.view_mut((i * nb, i * nb), (nb, nb)).copy_from(leaf);
        }
        Ok(m)
    }

    pub fn write_dense_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        write_dense_csv(&self.to_dense()?, path)
    }

    /// Binary encoding: magic, version `u32`, then `n`, `k`, `L` as `u64`;
    /// per level, per block: block index and rank as `u64`, then `Q` and `X`
    /// row-major as little-endian `f64`; then the leaves row-major; finally
    /// the first 8 bytes of the SHA-256 of everything before, as a `u64`.
    pub fn serialize(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        for v in [self.layout.n, self.layout.k, self.layout.levels] {
            out.extend_from_slice(&(v as u64).to_le_bytes());
        }
        let put = |out: &mut Vec<u8>, m: &DMatrix<f64>| {
            for i in 0..m.nrows() {
                for j in 0..m.ncols() {
                    out.extend_from_slice(&m[(i, j)].to_le_bytes());
                }
            }
        };
        for factors in &self.levels {
            for (j, f) in factors.iter().enumerate() {
                out.extend_from_slice(&(j as u64).to_le_bytes());
                out.extend_from_slice(&(f.rank() as u64).to_le_bytes());
                put(&mut out, &f.q);
                put(&mut out, &f.x);
            }
        }
        for leaf in &self.leaves {
            put(&mut out, leaf);
        }
        let sum = checksum(&out);
        out.extend_from_slice(&sum.to_le_bytes());
        out
    }

    pub fn deserialize(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 4 + 24 + 8 {
            return Err(Error::Format("truncated HODLR file".into()));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 8);
        if checksum(body) != u64::from_le_bytes(tail.try_into().unwrap()) {
            return Err(Error::Format("checksum mismatch".into()));
        }
        let mut r = Reader { buf: body, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Format("bad magic".into()));
        }
        let version = u32::from_le_bytes(r.take(4)?.try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let n = r.usize()?;
        let k = r.usize()?;
        let levels = r.usize()?;
        let layout = Layout::new(n, k).map_err(|e| Error::Format(e.to_string()))?;
        if layout.levels != levels {
            return Err(Error::Format(format!("level count {levels} inconsistent with n={n}, k={k}")));
        }
        let mut contribs = Vec::with_capacity(levels);
        for level in 1..=levels {
            let nb = layout.block_size(level);
            let mut factors = Vec::with_capacity(1 << level);
            for j in 0..1 << level {
                if r.usize()? != j {
                    return Err(Error::Format(format!("level {level}: block index out of order")));
                }
                let rank = r.usize()?;
                if rank > nb {
                    return Err(Error::Format(format!("level {level} block {j}: rank {rank} > {nb}")));
                }
                let q = r.matrix(nb, rank)?;
                let x = r.matrix(rank, nb)?;
                factors.push(LowRankFactors { q, x });
            }
            contribs.push(LevelContribution { level, factors });
        }
        let leaves = (0..1 << levels)
            .map(|_| r.matrix(layout.n_base, layout.n_base))
            .collect::<Result<Vec<_>>>()?;
        if r.pos != body.len() {
            return Err(Error::Format("trailing bytes".into()));
        }
        Self::assemble_untruncated(n, k, contribs, leaves)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.serialize())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::deserialize(&std::fs::read(path)?)
    }
}

impl LinearOperator for HodlrMatrix {
    fn dim(&self) -> usize {
        self.n()
    }

    fn apply_unchecked(&self, x: &DMatrix<f64>, side: Side) -> DMatrix<f64> {
        self.apply(x, side).expect("shape checked by caller")
    }
}

fn checksum(bytes: &[u8]) -> u64 {
    let digest = Sha256::digest(bytes);
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, len: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(len).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Format("truncated HODLR file".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn usize(&mut self) -> Result<usize> {
        let v = u64::from_le_bytes(self.take(8)?.try_into().unwrap());
        usize::try_from(v).map_err(|_| Error::Format(format!("value {v} too large")))
    }

    fn matrix(&mut self, rows: usize, cols: usize) -> Result<DMatrix<f64>> {
        let len = rows.checked_mul(cols).and_then(|v| v.checked_mul(8));
        let bytes = self.take(len.ok_or_else(|| Error::Format("matrix too large".into()))?)?;
        let mut m = DMatrix::zeros(rows, cols);
        for (idx, chunk) in bytes.chunks_exact(8).enumerate() {
            m[(idx / cols, idx % cols)] = f64::from_le_bytes(chunk.try_into().unwrap());
        }
        Ok(m)
    }
}

/// Frobenius-optimal HODLR(k) approximation of a dense matrix: the rank-`k`
/// truncated SVD of every off-diagonal block at every level, and the exact
/// leaf blocks.
pub fn best_hodlr(a: &DMatrix<f64>, k: usize) -> Result<HodlrMatrix> {
    if !a.is_square() {
        return dim_err(format!("matrix must be square, got {:?}", a.shape()));
    }
    let layout = Layout::new(a.nrows(), k)?;
    let contribs = (1..=layout.levels)
        .map(|level| {
            let factors = par::try_map_range(1 << level, |j| {
                let (r, c, nb) = layout.placement(level, j);
                truncated_svd(&a.view((r, c), (nb, nb)).into_owned(), k)
            })?;
            Ok(LevelContribution { level, factors })
        })
        .collect::<Result<Vec<_>>>()?;
    let nb = layout.n_base;
    let leaves = (0..1 << layout.levels)
        .map(|i| a.view((i * nb, i * nb), (nb, nb)).into_owned())
        .collect();
    HodlrMatrix::assemble(a.nrows(), k, contribs, leaves)
}

/// A random matrix that is exactly HODLR(k): every off-diagonal block is
/// `Q X` with `Q` an orthonormal basis of a Gaussian `nb x k` matrix and `X`
/// Gaussian, and the leaves are Gaussian.
pub fn random_hodlr<R: Rng + ?Sized>(n: usize, k: usize, rng: &mut R) -> Result<HodlrMatrix> {
    let layout = Layout::new(n, k)?;
    let contribs = (1..=layout.levels)
        .map(|level| {
            let nb = layout.block_size(level);
            let factors = (0..1 << level)
                .map(|_| {
                    let q = orth(&gaussian_matrix(nb, k, rng));
                    let x = gaussian_matrix(q.ncols(), nb, rng);
                    LowRankFactors { q, x }
                })
                .collect();
            LevelContribution { level, factors }
        })
        .collect();
    let leaves = (0..1 << layout.levels)
        .map(|_| gaussian_matrix(layout.n_base, layout.n_base, rng))
        .collect();
    HodlrMatrix::assemble(n, k, contribs, leaves)
}

//! Perforated block sketches.
//!
//! A block sketch of an `n x n` operator partitioned into `d` block rows of
//! height `n / d` is built from a binary selector (which block column, or
//! "bucket", each block row lands in) and one dense block per row. The block
//! row-wise product [`bullet`] assembles them into a single `n x (s t)`
//! matrix.

use std::ops::Range;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal};

use crate::error::{dim_err, Error, Result};
use crate::rng::{gaussian_matrix, StreamKey};

/// Block row-wise Kronecker product.
///
/// `x` is `p x v` and `y` is `(p u) x t`, viewed as `p` stacked `u x t`
/// blocks `Y_i`. The result is `(p u) x (v t)` with block `(i, j)` equal to
/// `x[i, j] * Y_i`.
pub fn bullet(x: &DMatrix<f64>, y: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let p = x.nrows();
    if p == 0 || !y.nrows().is_multiple_of(p) {
        return dim_err(format!("{} rows cannot be split into {p} blocks", y.nrows()));
    }
    let u = y.nrows() / p;
    let t = y.ncols();
    let mut out = DMatrix::zeros(y.nrows(), x.ncols() * t);
    for i in 0..p {
        let yi = y.rows(i * u, u);
        for j in 0..x.ncols() {
            let c = x[(i, j)];
            if c != 0.0 {
                out.view_mut((i * u, j * t), (u, t)).copy_from(&(yi * c));
            }
        }
    }
    Ok(out)
}

/// Parity of a perforated selector. `Plus` keeps block rows `0, 2, 4, ...`
/// (0-based), `Minus` keeps `1, 3, 5, ...`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Sign {
    Plus,
    Minus,
}

impl Sign {
    /// The selector whose active rows contain block `j`.
    pub fn of_block(j: usize) -> Sign {
        if j.is_multiple_of(2) {
            Sign::Plus
        } else {
            Sign::Minus
        }
    }

    pub fn opposite(self) -> Sign {
        match self {
            Sign::Plus => Sign::Minus,
            Sign::Minus => Sign::Plus,
        }
    }

    pub fn keeps(self, row: usize) -> bool {
        Sign::of_block(row) == self
    }
}

/// A `d x t` binary matrix with at most one nonzero per row, stored as the
/// column index of each row's nonzero.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BlockSelector {
    t: usize,
    cols: Vec<Option<usize>>,
}

impl BlockSelector {
    pub fn from_columns(t: usize, cols: Vec<Option<usize>>) -> Result<Self> {
        if t == 0 || cols.is_empty() {
            return Err(Error::InvalidParameter("selector needs d, t >= 1".into()));
        }
        if cols.iter().flatten().any(|&c| c >= t) {
            return Err(Error::InvalidParameter(format!("selector column out of range 0..{t}")));
        }
        Ok(BlockSelector { t, cols })
    }

    pub fn d(&self) -> usize {
        self.cols.len()
    }

    pub fn t(&self) -> usize {
        self.t
    }

    /// Column of row `i`'s nonzero, if the row is not masked out.
    pub fn column(&self, i: usize) -> Option<usize> {
        self.cols[i]
    }

    pub fn columns(&self) -> &[Option<usize>] {
        &self.cols
    }

    /// Rows whose nonzero sits in column `c`, ascending.
    pub fn rows_in(&self, c: usize) -> Vec<usize> {
        (0..self.d()).filter(|&i| self.cols[i] == Some(c)).collect()
    }

    /// True when every row has exactly one nonzero.
    pub fn is_countsketch(&self) -> bool {
        self.cols.iter().all(Option::is_some)
    }

    /// Zeroes the rows not kept by `sign`.
    pub fn masked(&self, sign: Sign) -> BlockSelector {
        let cols = self
            .cols
            .iter()
            .enumerate()
            .map(|(i, &c)| if sign.keeps(i) { c } else { None })
            .collect();
        BlockSelector { t: self.t, cols }
    }

    pub fn to_matrix(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.d(), self.t);
        for (i, c) in self.cols.iter().enumerate() {
            if let Some(c) = c {
                m[(i, *c)] = 1.0;
            }
        }
        m
    }
}

/// Each of the `d` rows gets a single 1 in a uniformly random column.
pub fn sample_countsketch<R: Rng + ?Sized>(d: usize, t: usize, rng: &mut R) -> Result<BlockSelector> {
    if d == 0 || t == 0 {
        return Err(Error::InvalidParameter(format!("countsketch needs d, t >= 1, got d={d}, t={t}")));
    }
    let cols = (0..d).map(|_| Some(rng.random_range(0..t))).collect();
    BlockSelector::from_columns(t, cols)
}

/// A CountSketch split by row parity into `(plus, minus)`.
pub fn sample_perf_countsketch<R: Rng + ?Sized>(
    d: usize,
    t: usize,
    rng: &mut R,
) -> Result<(BlockSelector, BlockSelector)> {
    if !d.is_multiple_of(2) {
        return Err(Error::InvalidParameter(format!("perforated selector needs even d, got {d}")));
    }
    let xi = sample_countsketch(d, t, rng)?;
    Ok((xi.masked(Sign::Plus), xi.masked(Sign::Minus)))
}

/// A sketch made of per-row dense blocks placed in selector buckets.
///
/// Row block `i` (height `nb`) is nonzero only in the column range of its
/// bucket, where it holds `block(i)`. Buckets may have different widths.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockSketch {
    nb: usize,
    offsets: Vec<usize>,
    buckets: Vec<Option<usize>>,
    blocks: Vec<Option<DMatrix<f64>>>,
}

impl BlockSketch {
    pub fn new(
        nb: usize,
        widths: &[usize],
        buckets: Vec<Option<usize>>,
        blocks: Vec<Option<DMatrix<f64>>>,
    ) -> Result<Self> {
        if buckets.len() != blocks.len() {
            return dim_err("bucket and block lists differ in length");
        }
        let mut offsets = Vec::with_capacity(widths.len() + 1);
        offsets.push(0);
        for w in widths {
            offsets.push(offsets.last().unwrap() + w);
        }
        for (i, (b, blk)) in buckets.iter().zip(&blocks).enumerate() {
            match (b, blk) {
                (None, None) => {}
                (Some(b), Some(m)) => {
                    if *b >= widths.len() || m.shape() != (nb, widths[*b]) {
                        return dim_err(format!("block row {i} does not fit its bucket"));
                    }
                }
                _ => return dim_err(format!("block row {i}: bucket and block disagree")),
            }
        }
        Ok(BlockSketch { nb, offsets, buckets, blocks })
    }

    pub fn n(&self) -> usize {
        self.nb * self.buckets.len()
    }

    pub fn block_rows(&self) -> usize {
        self.buckets.len()
    }

    pub fn block_height(&self) -> usize {
        self.nb
    }

    pub fn ncols(&self) -> usize {
        *self.offsets.last().unwrap()
    }

    pub fn num_buckets(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn bucket(&self, i: usize) -> Option<usize> {
        self.buckets[i]
    }

    pub fn block(&self, i: usize) -> Option<&DMatrix<f64>> {
        self.blocks[i].as_ref()
    }

    pub fn bucket_cols(&self, b: usize) -> Range<usize> {
        self.offsets[b]..self.offsets[b + 1]
    }

    /// Dense `n x ncols` matrix.
    pub fn assemble(&self) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.n(), self.ncols());
        for (i, blk) in self.blocks.iter().enumerate() {
            if let (Some(b), Some(m)) = (self.buckets[i], blk) {
                out.view_mut((i * self.nb, self.offsets[b]), m.shape()).copy_from(m);
            }
        }
        out
    }
}

/// One level's perforated Gaussian sketch pair.
#[derive(Clone, Debug, PartialEq)]
pub struct SketchFamily {
    pub s: usize,
    pub selector_plus: BlockSelector,
    pub selector_minus: BlockSelector,
    /// `d` blocks, each `(n / d) x s`.
    pub gaussian_blocks: Vec<DMatrix<f64>>,
}

impl SketchFamily {
    pub fn selector(&self, sign: Sign) -> &BlockSelector {
        match sign {
            Sign::Plus => &self.selector_plus,
            Sign::Minus => &self.selector_minus,
        }
    }

    pub fn stacked(&self) -> DMatrix<f64> {
        let nb = self.gaussian_blocks[0].nrows();
        let mut y = DMatrix::zeros(nb * self.gaussian_blocks.len(), self.s);
        for (i, g) in self.gaussian_blocks.iter().enumerate() {
            y.rows_mut(i * nb, nb).copy_from(g);
        }
        y
    }

    /// `selector(sign) • [G_1; ...; G_d]`, shape `n x (s t)`.
    pub fn assembled(&self, sign: Sign) -> DMatrix<f64> {
        bullet(&self.selector(sign).to_matrix(), &self.stacked()).expect("blocks match selector")
    }

    pub fn sketch(&self, sign: Sign) -> BlockSketch {
        let sel = self.selector(sign);
        let widths = vec![self.s; sel.t()];
        let blocks = (0..sel.d())
            .map(|i| sel.column(i).map(|_| self.gaussian_blocks[i].clone()))
            .collect();
        BlockSketch::new(self.gaussian_blocks[0].nrows(), &widths, sel.columns().to_vec(), blocks)
            .expect("blocks match selector")
    }
}

fn check_family_dims(n: usize, d: usize, s: usize, t: usize) -> Result<()> {
    if d == 0 || !n.is_multiple_of(d) {
        return Err(Error::InvalidParameter(format!("{d} block rows do not divide n={n}")));
    }
    if !d.is_multiple_of(2) {
        return Err(Error::InvalidParameter(format!("perforated sketch needs even d, got {d}")));
    }
    if s == 0 || t == 0 {
        return Err(Error::InvalidParameter("sketch width and perforation count must be >= 1".into()));
    }
    Ok(())
}

/// Samples selectors first, then the `d` Gaussian blocks in row order.
pub fn sample_rand_perf_gaussian<R: Rng + ?Sized>(
    n: usize,
    d: usize,
    s: usize,
    t: usize,
    rng: &mut R,
) -> Result<SketchFamily> {
    check_family_dims(n, d, s, t)?;
    let (selector_plus, selector_minus) = sample_perf_countsketch(d, t, rng)?;
    let nb = n / d;
    let gaussian_blocks = (0..d).map(|_| gaussian_matrix(nb, s, rng)).collect();
    Ok(SketchFamily { s, selector_plus, selector_minus, gaussian_blocks })
}

/// Lower-triangular Bartlett factor `T` of a `Wishart_m(s, I)` draw: the
/// `L` in the LQ factorization `G = L V^T` of an `m x s` Gaussian `G`
/// (`m <= s`). `T[i, i] = sqrt(chi2(s - i))` (0-based `i`), strictly lower
/// entries standard normal.
pub fn bartlett_factor<R: Rng + ?Sized>(m: usize, s: usize, rng: &mut R) -> Result<DMatrix<f64>> {
    if m > s {
        return Err(Error::InvalidParameter(format!("Bartlett factor needs m <= s, got m={m}, s={s}")));
    }
    let mut t = DMatrix::zeros(m, m);
    for i in 0..m {
        let chi = ChiSquared::new((s - i) as f64).map_err(|e| Error::InvalidParameter(e.to_string()))?;
        t[(i, i)] = chi.sample(rng).sqrt();
        for j in 0..i {
            t[(i, j)] = StandardNormal.sample(rng);
        }
    }
    Ok(t)
}

/// Stream tags under a sketch's key.
const SELECTOR_STREAM: u64 = 0;
const BLOCK_STREAM: u64 = 1;
const BUCKET_STREAM: u64 = 2;

/// [`sample_rand_perf_gaussian`] with every random object on its own stream:
/// the selectors under `key.child(0)` and Gaussian block `i` under
/// `key.at(&[1, i])`.
pub fn sample_rand_perf_gaussian_keyed(n: usize, d: usize, s: usize, t: usize, key: StreamKey) -> Result<SketchFamily> {
    check_family_dims(n, d, s, t)?;
    let (selector_plus, selector_minus) = sample_perf_countsketch(d, t, &mut key.child(SELECTOR_STREAM).rng())?;
    let nb = n / d;
    let gaussian_blocks = (0..d)
        .map(|i| gaussian_matrix(nb, s, &mut key.at(&[BLOCK_STREAM, i as u64]).rng()))
        .collect();
    Ok(SketchFamily { s, selector_plus, selector_minus, gaussian_blocks })
}

/// Stacked `m x s` Gaussian for the rows of one bucket, or its `m x m`
/// Bartlett factor when `m < s`.
fn bucket_block(m: usize, s: usize, key: StreamKey) -> Result<DMatrix<f64>> {
    let mut rng = key.rng();
    if m == 0 {
        Ok(DMatrix::zeros(0, 0))
    } else if m >= s {
        Ok(gaussian_matrix(m, s, &mut rng))
    } else {
        bartlett_factor(m, s, &mut rng)
    }
}

fn compressed_sketch(sel: &BlockSelector, nb: usize, s: usize, key: StreamKey) -> Result<BlockSketch> {
    let d = sel.d();
    let mut widths = Vec::with_capacity(sel.t());
    let mut blocks: Vec<Option<DMatrix<f64>>> = vec![None; d];
    for b in 0..sel.t() {
        let rows = sel.rows_in(b);
        let stacked = bucket_block(rows.len() * nb, s, key.child(b as u64))?;
        widths.push(stacked.ncols());
        for (r, &i) in rows.iter().enumerate() {
            blocks[i] = Some(stacked.rows(r * nb, nb).into_owned());
        }
    }
    BlockSketch::new(nb, &widths, sel.columns().to_vec(), blocks)
}

/// A perforated Gaussian sketch in which every bucket whose stacked height
/// `m` is below the nominal width `s` is replaced by its `m x m` Bartlett
/// factor.
///
/// For an `m x s` Gaussian `G = L V^T`, `range(B G) = range(B L)` and
/// `(V W)^+ V c = W^+ c`, so both the range step and the sketched least
/// squares step see exactly the same distribution as with the full sketch
/// while costing `m` instead of `s` queries per bucket. Empty buckets cost
/// nothing. Selectors match [`sample_rand_perf_gaussian_keyed`] for the same key.
pub fn sample_compressed_perf_gaussian(
    n: usize,
    d: usize,
    s: usize,
    t: usize,
    key: StreamKey,
) -> Result<(BlockSketch, BlockSketch)> {
    check_family_dims(n, d, s, t)?;
    let (plus, minus) = sample_perf_countsketch(d, t, &mut key.child(SELECTOR_STREAM).rng())?;
    let nb = n / d;
    Ok((
        compressed_sketch(&plus, nb, s, key.at(&[BUCKET_STREAM, 0]))?,
        compressed_sketch(&minus, nb, s, key.at(&[BUCKET_STREAM, 1]))?,
    ))
}

/// Unperforated block sketch: a full CountSketch selector over `d` block
/// rows with Gaussian blocks of width `s`, optionally compressed as in
/// [`sample_compressed_perf_gaussian`].
pub fn sample_countsketch_gaussian(
    n: usize,
    d: usize,
    s: usize,
    t: usize,
    compress: bool,
    key: StreamKey,
) -> Result<BlockSketch> {
    if d == 0 || !n.is_multiple_of(d) || s == 0 || t == 0 {
        return Err(Error::InvalidParameter(format!("invalid sketch shape n={n}, d={d}, s={s}, t={t}")));
    }
    let sel = sample_countsketch(d, t, &mut key.child(SELECTOR_STREAM).rng())?;
    let nb = n / d;
    if compress {
        return compressed_sketch(&sel, nb, s, key.at(&[BUCKET_STREAM, 0]));
    }
    let blocks = (0..d)
        .map(|i| Some(gaussian_matrix(nb, s, &mut key.at(&[BLOCK_STREAM, i as u64]).rng())))
        .collect();
    BlockSketch::new(nb, &vec![s; t], sel.columns().to_vec(), blocks)
}

/// `selector • W`: block row `i` of the result holds `blocks[i]` (zero-padded
/// to `width` columns) in the column range of its bucket.
pub fn selector_sketch(sel: &BlockSelector, blocks: &[DMatrix<f64>], width: usize) -> Result<BlockSketch> {
    if blocks.len() != sel.d() {
        return dim_err(format!("{} blocks for {} selector rows", blocks.len(), sel.d()));
    }
    let nb = blocks.first().map_or(0, |b| b.nrows());
    let padded = blocks
        .iter()
        .enumerate()
        .map(|(i, b)| {
            if b.nrows() != nb || b.ncols() > width {
                return dim_err(format!("block {i} is {:?}, expected {nb} rows and <= {width} columns", b.shape()));
            }
            Ok(sel.column(i).map(|_| {
                let mut m = DMatrix::zeros(nb, width);
                m.columns_mut(0, b.ncols()).copy_from(b);
                m
            }))
        })
        .collect::<Result<Vec<_>>>()?;
    BlockSketch::new(nb, &vec![width; sel.t()], sel.columns().to_vec(), padded)
}

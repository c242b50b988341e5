//! Peeling: recovering a HODLR(k) approximation top-down from sketches.
//!
//! At level `l` the operator minus every level already recovered is sketched
//! from the right with a perforated Gaussian pair (`Omega+`, `Omega-`) and
//! from the left with a second pair. Perforation keeps each sketch of an
//! off-diagonal block free of the unrecovered diagonal blocks, so the
//! per-block problems are independent low-rank approximations with some
//! noise from earlier levels. After the last level the dense diagonal leaves
//! come from one more left sketch.

use std::fmt;
use std::ops::Range;
use std::str::FromStr;
use std::time::Instant;

use nalgebra::DMatrix;

use crate::error::{dim_err, Error, Result};
use crate::hodlr::{apply_level, HodlrMatrix, LevelContribution, Layout};
use crate::linops::{Counted, LinearOperator, Side};
use crate::lowrank::{gn_coefficients, orth, pinv_solve, truncate, LowRankFactors};
use crate::par;
use crate::rng::{role, StreamKey};
use crate::sketch::{
    sample_compressed_perf_gaussian, sample_countsketch, sample_countsketch_gaussian,
    sample_perf_countsketch, sample_rand_perf_gaussian_keyed, selector_sketch, BlockSketch, Sign,
};

/// Relative residual above which [`exact_recover`] rejects the HODLR promise.
pub const STRUCTURE_TOLERANCE: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    GeneralizedNystrom,
    Rsvd,
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::GeneralizedNystrom => "gn",
            Variant::Rsvd => "rsvd",
        })
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "gn" | "generalized_nystrom" | "generalized-nystrom" => Ok(Variant::GeneralizedNystrom),
            "rsvd" => Ok(Variant::Rsvd),
            other => Err(Error::InvalidParameter(format!("unknown variant {other:?}"))),
        }
    }
}

/// What to do when `beta` is set and the parameters miss its conditions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Validation {
    /// Reject the configuration.
    Strict,
    /// Run anyway and list the violations as report warnings.
    Advisory,
}

/// Which family of parameter choices [`params_for_beta_profile`] returns.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamProfile {
    /// Moderate `s_R` with perforation `t_R > 1`.
    Perforated,
    /// `t_R = 1` with a wider right sketch.
    Unperforated,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PeelConfig {
    pub variant: Variant,
    pub k: usize,
    pub s_r: usize,
    pub t_r: usize,
    /// Left sketch width. The RSVD variant builds its left sketch from the
    /// recovered ranges and always uses width `s_r`; this field is ignored.
    pub s_l: usize,
    pub t_l: usize,
    pub seed: u64,
    pub beta: Option<f64>,
    /// Truncate every recovered block to rank `k`. When off, blocks keep the
    /// full rank of their range basis.
    pub truncate: bool,
    /// Replace every Gaussian bucket narrower than its nominal width by its
    /// Bartlett factor (see [`sample_compressed_perf_gaussian`]). Same output
    /// distribution, fewer queries; counts fall below the nominal formulas.
    pub compress_wide_sketches: bool,
    pub validation: Validation,
}

impl PeelConfig {
    pub fn new(variant: Variant, k: usize, s_r: usize, t_r: usize, s_l: usize, t_l: usize) -> Self {
        PeelConfig {
            variant,
            k,
            s_r,
            t_r,
            s_l,
            t_l,
            seed: 0,
            beta: None,
            truncate: true,
            compress_wide_sketches: false,
            validation: Validation::Strict,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_beta(mut self, beta: f64) -> Self {
        self.beta = Some(beta);
        self
    }

    pub fn with_validation(mut self, validation: Validation) -> Self {
        self.validation = validation;
        self
    }

    pub fn with_truncation(mut self, truncate: bool) -> Self {
        self.truncate = truncate;
        self
    }

    pub fn with_compression(mut self, compress: bool) -> Self {
        self.compress_wide_sketches = compress;
        self
    }

    /// Width of the left sketch actually used.
    pub fn left_width(&self) -> usize {
        match self.variant {
            Variant::GeneralizedNystrom => self.s_l,
            Variant::Rsvd => self.s_r,
        }
    }

    /// Conditions every run needs regardless of `beta`.
    pub fn check_basic(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.k == 0 {
            return bad("k must be >= 1".into());
        }
        if self.s_r < self.k {
            return bad(format!("s_R={} is below k={}", self.s_r, self.k));
        }
        if self.t_r == 0 || self.t_l == 0 {
            return bad("perforation counts t_R, t_L must be >= 1".into());
        }
        if self.variant == Variant::GeneralizedNystrom && self.s_l < self.s_r {
            return bad(format!("s_L={} is below s_R={}", self.s_l, self.s_r));
        }
        if let Some(b) = self.beta {
            if !(b > 0.0 && b < 1.0 + f64::EPSILON) {
                return bad(format!("beta={b} outside (0, 1]"));
            }
        }
        Ok(())
    }

    /// The accuracy conditions for `beta` that this configuration misses.
    /// Empty when `beta` is unset.
    pub fn accuracy_violations(&self) -> Vec<String> {
        let Some(beta) = self.beta else { return Vec::new() };
        let mut out = Vec::new();
        let (c1, c2) = match self.variant {
            Variant::GeneralizedNystrom => (30.0, 900.0),
            Variant::Rsvd => (10.0, 100.0),
        };
        match right_ratio(self.k, self.s_r) {
            None => out.push(format!("s_R={} must exceed k+1={}", self.s_r, self.k + 1)),
            Some(r) => {
                if r > beta / c1 {
                    out.push(format!("k/(s_R-k-1)={r:.4e} exceeds beta/{c1}={:.4e}", beta / c1));
                }
                let rt = r / self.t_r as f64;
                if rt > beta * beta / c2 {
                    out.push(format!("k/((s_R-k-1) t_R)={rt:.4e} exceeds beta^2/{c2}={:.4e}", beta * beta / c2));
                }
            }
        }
        match self.variant {
            Variant::GeneralizedNystrom => match left_ratio(self.s_r, self.s_l) {
                None => out.push(format!("s_L={} must exceed s_R+1={}", self.s_l, self.s_r + 1)),
                Some(r) if r > beta * beta / 900.0 => {
                    out.push(format!("s_R/(s_L-s_R-1)={r:.4e} exceeds beta^2/900={:.4e}", beta * beta / 900.0))
                }
                Some(_) => {}
            },
            Variant::Rsvd => {
                let r = 1.0 / self.t_l as f64;
                if r > beta * beta / 100.0 {
                    out.push(format!("1/t_L={r:.4e} exceeds beta^2/100={:.4e}", beta * beta / 100.0));
                }
            }
        }
        out
    }

    /// Basic checks always fail hard; accuracy violations fail under
    /// [`Validation::Strict`] and come back as warnings otherwise.
    pub fn validate(&self) -> Result<Vec<String>> {
        self.check_basic()?;
        let v = self.accuracy_violations();
        if !v.is_empty() && self.validation == Validation::Strict {
            return Err(Error::InvalidConfig(v.join("; ")));
        }
        Ok(v)
    }

    /// Nominal `(forward, transpose)` query totals on `layout`.
    pub fn expected_queries(&self, layout: &Layout) -> (usize, usize) {
        let l = layout.levels;
        let fwd = 2 * l * self.s_r * self.t_r;
        let tr = match self.variant {
            Variant::GeneralizedNystrom => (2 * l + 1) * self.s_l * self.t_l,
            Variant::Rsvd => 2 * l * self.s_r * self.t_l + layout.n_base * self.t_l,
        };
        (fwd, tr)
    }
}

fn right_ratio(k: usize, s_r: usize) -> Option<f64> {
    (s_r > k + 1).then(|| k as f64 / (s_r - k - 1) as f64)
}

fn left_ratio(s_r: usize, s_l: usize) -> Option<f64> {
    (s_l > s_r + 1).then(|| s_r as f64 / (s_l - s_r - 1) as f64)
}

/// Smallest `x >= lo` with `pred(x)`, for a predicate that stays true once true.
fn smallest(lo: usize, pred: impl Fn(usize) -> bool) -> usize {
    let mut hi = lo.max(1);
    while !pred(hi) {
        hi *= 2;
    }
    let mut lo = lo;
    while lo < hi {
        let mid = lo + (hi - lo) / 2;
        if pred(mid) {
            hi = mid;
        } else {
            lo = mid + 1;
        }
    }
    lo
}

/// [`params_for_beta_profile`] with the perforated profile.
pub fn params_for_beta(k: usize, beta: f64, variant: Variant) -> Result<PeelConfig> {
    params_for_beta_profile(k, beta, variant, ParamProfile::Perforated)
}

/// Smallest integer parameters meeting the accuracy conditions for `beta`.
pub fn params_for_beta_profile(k: usize, beta: f64, variant: Variant, profile: ParamProfile) -> Result<PeelConfig> {
    if k == 0 {
        return Err(Error::InvalidParameter("k must be >= 1".into()));
    }
    if !(beta > 0.0 && beta < 1.0) {
        return Err(Error::InvalidParameter(format!("beta={beta} outside (0, 1)")));
    }
    let (c1, c2) = match variant {
        Variant::GeneralizedNystrom => (30.0, 900.0),
        Variant::Rsvd => (10.0, 100.0),
    };
    let b2 = beta * beta;
    let ratio_ok = |s: usize, limit: f64| right_ratio(k, s).is_some_and(|r| r <= limit);
    let (s_r, t_r) = match profile {
        ParamProfile::Perforated => {
            let s_r = smallest(k + 2, |s| ratio_ok(s, beta / c1));
            let r = right_ratio(k, s_r).unwrap();
            (s_r, smallest(1, |t| r / t as f64 <= b2 / c2))
        }
        ParamProfile::Unperforated => (smallest(k + 2, |s| ratio_ok(s, beta / c1) && ratio_ok(s, b2 / c2)), 1),
    };
    let cfg = match variant {
        Variant::GeneralizedNystrom => {
            let s_l = smallest(s_r + 2, |s| left_ratio(s_r, s).is_some_and(|r| r <= b2 / 900.0));
            PeelConfig::new(variant, k, s_r, t_r, s_l, 1)
        }
        Variant::Rsvd => {
            let t_l = smallest(1, |t| 1.0 / t as f64 <= b2 / 100.0);
            PeelConfig::new(variant, k, s_r, t_r, s_r, t_l)
        }
    };
    Ok(cfg.with_beta(beta))
}

/// Queries and timing for one stage of a run.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct StageReport {
    /// `1..=L` for off-diagonal levels, `L + 1` for the diagonal leaves.
    pub level: usize,
    pub forward_queries: usize,
    pub transpose_queries: usize,
    pub seconds: f64,
    /// Largest relative sketch residual `||Y_j - H_j Omega_j|| / ||Y_j||`
    /// (left-sketch residual for the diagonal stage). Zero when the stage has
    /// no redundant data to check.
    pub structure_residual: f64,
    /// Frobenius error of this stage's blocks, once a reference is attached.
    pub error: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PeelReport {
    pub variant: Variant,
    pub layout: Layout,
    pub levels: Vec<StageReport>,
    pub diagonal: StageReport,
    pub forward_queries: usize,
    pub transpose_queries: usize,
    pub nominal_forward_queries: usize,
    pub nominal_transpose_queries: usize,
    pub seconds: f64,
    /// `||A - H||_F`, once a reference is attached.
    pub final_error: Option<f64>,
    pub opt_error: Option<f64>,
    /// `final_error / opt_error`.
    pub approximation_factor: Option<f64>,
    /// Largest relative deviation between each measured right sketch and its
    /// value predicted from the dense reference (perforation bookkeeping
    /// check). Only set by [`peel_with_reference`].
    pub noise_structure_deviation: Option<f64>,
    pub warnings: Vec<String>,
}

impl PeelReport {
    /// Fills in the per-stage and final errors against a dense reference,
    /// and the approximation factor when `opt` is given.
    pub fn attach_reference(&mut self, h: &HodlrMatrix, a: &DMatrix<f64>, opt: Option<f64>) -> Result<()> {
        if a.shape() != (h.n(), h.n()) {
            return dim_err(format!("reference is {:?}, approximation is {}x{}", a.shape(), h.n(), h.n()));
        }
        let layout = *h.layout();
        for stage in &mut self.levels {
            let err2: f64 = h
                .level(stage.level)
                .iter()
                .enumerate()
                .map(|(j, f)| {
                    let (r, c, nb) = layout.placement(stage.level, j);
                    (a.view((r, c), (nb, nb)) - f.to_dense()).norm_squared()
                })
                .sum();
            stage.error = Some(err2.sqrt());
        }
        let nb = layout.n_base;
        let diag2: f64 = h
            .leaves()
            .iter()
            .enumerate()
            .map(|(i, leaf)| (a.view((i * nb, i * nb), (nb, nb)) - leaf).norm_squared())
            .sum();
        self.diagonal.error = Some(diag2.sqrt());
        let err = (a - h.to_dense()?).norm();
        self.final_error = Some(err);
        self.opt_error = opt;
        self.approximation_factor = opt.map(|o| {
            if o > 0.0 {
                err / o
            } else if err == 0.0 {
                1.0
            } else {
                f64::INFINITY
            }
        });
        Ok(())
    }
}

/// `A^(l) Omega` (or its transpose counterpart): one query of `op` on
/// `omega`, minus the recovered levels applied directly.
///
/// An `omega` with no columns returns an empty block without querying.
pub fn residual_sketch<O: LinearOperator + ?Sized>(
    op: &O,
    layout: &Layout,
    recovered: &[LevelContribution],
    omega: &DMatrix<f64>,
    side: Side,
) -> Result<DMatrix<f64>> {
    if op.dim() != layout.n || omega.nrows() != layout.n {
        return dim_err(format!(
            "operator n={}, layout n={}, sketch has {} rows",
            op.dim(),
            layout.n,
            omega.nrows()
        ));
    }
    if omega.ncols() == 0 {
        return Ok(DMatrix::zeros(layout.n, 0));
    }
    let mut y = op.apply(omega, side)?;
    let mut done = DMatrix::zeros(layout.n, omega.ncols());
    for c in recovered {
        if c.level == 0 || c.level > layout.levels || c.factors.len() != 1 << c.level {
            return Err(Error::Structure(format!("recovered level {} does not fit the layout", c.level)));
        }
        apply_level(layout, c.level, &c.factors, omega, side, &mut done);
    }
    y -= done;
    Ok(y)
}

/// A `(plus, minus)` sketch pair, queried side by side in one call.
struct SketchPair {
    plus: BlockSketch,
    minus: BlockSketch,
}

impl SketchPair {
    fn get(&self, sign: Sign) -> &BlockSketch {
        match sign {
            Sign::Plus => &self.plus,
            Sign::Minus => &self.minus,
        }
    }

    fn assemble(&self) -> DMatrix<f64> {
        let n = self.plus.n();
        let (wp, wm) = (self.plus.ncols(), self.minus.ncols());
        let mut out = DMatrix::zeros(n, wp + wm);
        out.columns_mut(0, wp).copy_from(&self.plus.assemble());
        out.columns_mut(wp, wm).copy_from(&self.minus.assemble());
        out
    }

    /// Columns of bucket `b` of `sign` within [`assemble`](Self::assemble).
    fn cols(&self, sign: Sign, b: usize) -> Range<usize> {
        let off = if sign == Sign::Minus { self.plus.ncols() } else { 0 };
        let r = self.get(sign).bucket_cols(b);
        r.start + off..r.end + off
    }

    /// Sketch columns hitting block row `i`, with the block itself.
    fn block_of(&self, sign: Sign, i: usize) -> (Range<usize>, &DMatrix<f64>) {
        let sk = self.get(sign);
        let b = sk.bucket(i).expect("perforated selector keeps this row");
        (self.cols(sign, b), sk.block(i).expect("kept row has a block"))
    }
}

fn gaussian_pair(n: usize, d: usize, s: usize, t: usize, compress: bool, key: StreamKey) -> Result<SketchPair> {
    let (plus, minus) = if compress {
        sample_compressed_perf_gaussian(n, d, s, t, key)?
    } else {
        let f = sample_rand_perf_gaussian_keyed(n, d, s, t, key)?;
        (f.sketch(Sign::Plus), f.sketch(Sign::Minus))
    };
    Ok(SketchPair { plus, minus })
}

fn relative(residual: f64, scale: f64) -> f64 {
    if residual == 0.0 {
        0.0
    } else if scale == 0.0 {
        f64::INFINITY
    } else {
        residual / scale
    }
}

struct Run<'a, O: LinearOperator + ?Sized> {
    op: Counted<&'a O>,
    cfg: &'a PeelConfig,
    layout: Layout,
    recovered: Vec<LevelContribution>,
    /// Dense `A^(l)` tracked alongside the run when a reference is given.
    reference: Option<DMatrix<f64>>,
    noise_deviation: f64,
}

impl<'a, O: LinearOperator + ?Sized> Run<'a, O> {
    fn key(&self, level: usize) -> StreamKey {
        StreamKey::new(self.cfg.seed).child(level as u64)
    }

    fn query(&self, w: &DMatrix<f64>, side: Side) -> Result<DMatrix<f64>> {
        residual_sketch(&self.op, &self.layout, &self.recovered, w, side)
    }

    fn gaussian_pair(&self, level: usize, s: usize, t: usize, tag: u64) -> Result<SketchPair> {
        let compress = self.cfg.compress_wide_sketches;
        gaussian_pair(self.layout.n, 1 << level, s, t, compress, self.key(level).child(tag))
    }

    /// Cuts the blocks `Y_j` out of `A^(l) [Omega+ Omega-]`.
    fn cut_right(&mut self, level: usize, right: &SketchPair, y: &DMatrix<f64>) -> Vec<DMatrix<f64>> {
        let nb = self.layout.block_size(level);
        let ys: Vec<DMatrix<f64>> = (0..1 << level)
            .map(|j| {
                let (cols, _) = right.block_of(Sign::of_block(j), j);
                y.view(((j ^ 1) * nb, cols.start), (nb, cols.len())).into_owned()
            })
            .collect();
        if let Some(a) = &self.reference {
            self.noise_deviation = self.noise_deviation.max(predicted_deviation(a, right, &ys, nb));
        }
        ys
    }

    fn finish(&self, q: DMatrix<f64>, x: DMatrix<f64>, nb: usize) -> Result<LowRankFactors> {
        if q.ncols() == 0 {
            Ok(LowRankFactors::zeros(nb, nb))
        } else if self.cfg.truncate {
            truncate(&q, &x, self.cfg.k)
        } else {
            LowRankFactors::new(q, x)
        }
    }

    fn gn_level(&mut self, level: usize) -> Result<(Vec<LowRankFactors>, f64)> {
        let d = 1 << level;
        let nb = self.layout.block_size(level);
        let right = self.gaussian_pair(level, self.cfg.s_r, self.cfg.t_r, role::RIGHT)?;
        let left = self.gaussian_pair(level, self.cfg.s_l, self.cfg.t_l, role::LEFT)?;
        let (y, z) = par::join(
            || self.query(&right.assemble(), Side::Forward),
            || self.query(&left.assemble(), Side::Transpose),
        );
        let (y, z) = (y?, z?);
        let ys = self.cut_right(level, &right, &y);
        let this = &*self;
        let out = par::try_map_range(d, |j| {
            let sign = Sign::of_block(j);
            // Y_j lives in row block j^1, whose left sketch has the other parity.
            let (cols, g) = left.block_of(sign.opposite(), j ^ 1);
            let zj = z.view((j * nb, cols.start), (nb, cols.len())).transpose();
            let q = orth(&ys[j]);
            let x = gn_coefficients(&q, g, &zj)?;
            let h = this.finish(q, x, nb)?;
            let (_, omega) = right.block_of(sign, j);
            let res = sketch_residual(&ys[j], &h, omega);
            Ok::<_, Error>((h, res))
        })?;
        Ok(split(out))
    }

    fn rsvd_level(&mut self, level: usize) -> Result<(Vec<LowRankFactors>, f64)> {
        let right = self.gaussian_pair(level, self.cfg.s_r, self.cfg.t_r, role::RIGHT)?;
        let y = self.query(&right.assemble(), Side::Forward)?;
        let ys = self.cut_right(level, &right, &y);
        let d = 1 << level;
        let nb = self.layout.block_size(level);
        let cfg = self.cfg;
        let qs = par::map_range(d, |j| orth(&ys[j]));
        let mut rng = self.key(level).child(role::RSVD_LEFT_SELECTOR).rng();
        let (zp, zm) = sample_perf_countsketch(d, cfg.t_l, &mut rng)?;
        // Block row i carries the basis of the block whose rows are i.
        let w: Vec<DMatrix<f64>> = (0..d).map(|i| qs[i ^ 1].clone()).collect();
        let left = SketchPair { plus: selector_sketch(&zp, &w, cfg.s_r)?, minus: selector_sketch(&zm, &w, cfg.s_r)? };
        let z = self.query(&left.assemble(), Side::Transpose)?;
        let this = &*self;
        let out = par::try_map_range(d, |j| {
            let sign = Sign::of_block(j);
            let (cols, _) = left.block_of(sign.opposite(), j ^ 1);
            let r = qs[j].ncols();
            let x = z.view((j * nb, cols.start), (nb, r)).transpose();
            let h = this.finish(qs[j].clone(), x, nb)?;
            let (_, omega) = right.block_of(sign, j);
            let res = sketch_residual(&ys[j], &h, omega);
            Ok::<_, Error>((h, res))
        })?;
        Ok(split(out))
    }

    fn gn_diagonal(&self) -> Result<(Vec<DMatrix<f64>>, f64)> {
        let (n, d, nb) = (self.layout.n, 1 << self.layout.levels, self.layout.n_base);
        let cfg = self.cfg;
        let key = self.key(self.layout.levels + 1).child(role::DIAGONAL);
        let sk = sample_countsketch_gaussian(n, d, cfg.s_l, cfg.t_l, cfg.compress_wide_sketches, key)?;
        let z = self.query(&sk.assemble(), Side::Transpose)?;
        let out = par::try_map_range(d, |j| {
            let cols = sk.bucket_cols(sk.bucket(j).expect("countsketch row"));
            let zj = z.view((j * nb, cols.start), (nb, cols.len())).transpose();
            let gt = sk.block(j).expect("countsketch row").transpose();
            let leaf = pinv_solve(&gt, &zj)?;
            let res = relative((&zj - &gt * &leaf).norm(), zj.norm());
            Ok::<_, Error>((leaf, res))
        })?;
        Ok(split(out))
    }

    fn rsvd_diagonal(&self) -> Result<(Vec<DMatrix<f64>>, f64)> {
        let (d, nb) = (1 << self.layout.levels, self.layout.n_base);
        let mut rng = self.key(self.layout.levels + 1).child(role::RSVD_DIAGONAL_SELECTOR).rng();
        let sel = sample_countsketch(d, self.cfg.t_l, &mut rng)?;
        let eye = vec![DMatrix::identity(nb, nb); d];
        let sk = selector_sketch(&sel, &eye, nb)?;
        let z = self.query(&sk.assemble(), Side::Transpose)?;
        let leaves = (0..d)
            .map(|j| {
                let cols = sk.bucket_cols(sk.bucket(j).expect("countsketch row"));
                z.view((j * nb, cols.start), (nb, nb)).transpose()
            })
            .collect();
        Ok((leaves, 0.0))
    }

    fn push_level(&mut self, level: usize, factors: Vec<LowRankFactors>) {
        if let Some(a) = &mut self.reference {
            for (j, f) in factors.iter().enumerate() {
                let (r, c, nb) = self.layout.placement(level, j);
                let mut blk = a.view_mut((r, c), (nb, nb));
                blk -= f.to_dense();
            }
        }
        self.recovered.push(LevelContribution { level, factors });
    }

    fn counts(&self) -> (usize, usize) {
        (self.op.counter().forward(), self.op.counter().transpose())
    }
}

/// `||Y - H Omega|| / ||Y||`.
fn sketch_residual(y: &DMatrix<f64>, h: &LowRankFactors, omega: &DMatrix<f64>) -> f64 {
    let fit = &h.q * (&h.x * omega);
    relative((y - fit).norm(), y.norm())
}

fn split<T>(v: Vec<(T, f64)>) -> (Vec<T>, f64) {
    let mut worst = 0.0f64;
    let items = v
        .into_iter()
        .map(|(t, r)| {
            worst = worst.max(r);
            t
        })
        .collect();
    (items, worst)
}

/// Largest relative gap between each measured `Y_j` and
/// `sum_i A^(l)[j^1, i] Omega_i` over the block rows `i` sharing `j`'s bucket.
fn predicted_deviation(a: &DMatrix<f64>, right: &SketchPair, ys: &[DMatrix<f64>], nb: usize) -> f64 {
    let d = ys.len();
    (0..d)
        .map(|j| {
            let sk = right.get(Sign::of_block(j));
            let rho = sk.bucket(j);
            let mut pred = DMatrix::zeros(nb, ys[j].ncols());
            for i in (0..d).filter(|&i| sk.bucket(i) == rho) {
                pred += a.view(((j ^ 1) * nb, i * nb), (nb, nb)) * sk.block(i).unwrap();
            }
            relative((&ys[j] - &pred).norm(), pred.norm().max(ys[j].norm()))
        })
        .fold(0.0, f64::max)
}

fn run<O: LinearOperator + ?Sized>(
    op: &O,
    cfg: &PeelConfig,
    reference: Option<&DMatrix<f64>>,
) -> Result<(HodlrMatrix, PeelReport)> {
    let warnings = cfg.validate()?;
    let layout = Layout::new(op.dim(), cfg.k)?;
    if let Some(a) = reference {
        if a.shape() != (layout.n, layout.n) {
            return dim_err(format!("reference is {:?}, operator is {}x{}", a.shape(), layout.n, layout.n));
        }
    }
    let start = Instant::now();
    let mut run = Run {
        op: Counted::new(op),
        cfg,
        layout,
        recovered: Vec::with_capacity(layout.levels),
        reference: reference.cloned(),
        noise_deviation: 0.0,
    };
    let mut stages = Vec::with_capacity(layout.levels);
    for level in 1..=layout.levels {
        let t0 = Instant::now();
        let (f0, r0) = run.counts();
        let (factors, residual) = match cfg.variant {
            Variant::GeneralizedNystrom => run.gn_level(level)?,
            Variant::Rsvd => run.rsvd_level(level)?,
        };
        let (f1, r1) = run.counts();
        run.push_level(level, factors);
        stages.push(StageReport {
            level,
            forward_queries: f1 - f0,
            transpose_queries: r1 - r0,
            seconds: t0.elapsed().as_secs_f64(),
            structure_residual: residual,
            error: None,
        });
    }
    let t0 = Instant::now();
    let (f0, r0) = run.counts();
    let (leaves, residual) = match cfg.variant {
        Variant::GeneralizedNystrom => run.gn_diagonal()?,
        Variant::Rsvd => run.rsvd_diagonal()?,
    };
    let (f1, r1) = run.counts();
    let diagonal = StageReport {
        level: layout.levels + 1,
        forward_queries: f1 - f0,
        transpose_queries: r1 - r0,
        seconds: t0.elapsed().as_secs_f64(),
        structure_residual: residual,
        error: None,
    };
    let h = if cfg.truncate {
        HodlrMatrix::assemble(layout.n, cfg.k, run.recovered, leaves)?
    } else {
        HodlrMatrix::assemble_untruncated(layout.n, cfg.k, run.recovered, leaves)?
    };
    let (nominal_forward_queries, nominal_transpose_queries) = cfg.expected_queries(&layout);
    let report = PeelReport {
        variant: cfg.variant,
        layout,
        levels: stages,
        diagonal,
        forward_queries: f1,
        transpose_queries: r1,
        nominal_forward_queries,
        nominal_transpose_queries,
        seconds: start.elapsed().as_secs_f64(),
        final_error: None,
        opt_error: None,
        approximation_factor: None,
        noise_structure_deviation: reference.map(|_| run.noise_deviation),
        warnings,
    };
    Ok((h, report))
}

fn require(cfg: &PeelConfig, variant: Variant) -> Result<()> {
    if cfg.variant != variant {
        return Err(Error::InvalidConfig(format!("configuration is for {}, not {variant}", cfg.variant)));
    }
    Ok(())
}

/// Generalized Nystrom peeling with randomly perforated Gaussian sketches.
pub fn gn_peel<O: LinearOperator + ?Sized>(op: &O, cfg: &PeelConfig) -> Result<(HodlrMatrix, PeelReport)> {
    require(cfg, Variant::GeneralizedNystrom)?;
    run(op, cfg, None)
}

/// RSVD peeling: the left sketch at each level is built from the recovered
/// ranges, so each block's coefficients are read off directly.
pub fn rsvd_peel<O: LinearOperator + ?Sized>(op: &O, cfg: &PeelConfig) -> Result<(HodlrMatrix, PeelReport)> {
    require(cfg, Variant::Rsvd)?;
    run(op, cfg, None)
}

/// Runs the variant named in `cfg`.
pub fn peel<O: LinearOperator + ?Sized>(op: &O, cfg: &PeelConfig) -> Result<(HodlrMatrix, PeelReport)> {
    run(op, cfg, None)
}

/// [`peel`] with a dense copy of the operator: fills in the report's errors
/// and checks every right sketch against its dense prediction.
pub fn peel_with_reference<O: LinearOperator + ?Sized>(
    op: &O,
    cfg: &PeelConfig,
    reference: &DMatrix<f64>,
    opt: Option<f64>,
) -> Result<(HodlrMatrix, PeelReport)> {
    let (h, mut report) = run(op, cfg, Some(reference))?;
    report.attach_reference(&h, reference, opt)?;
    Ok((h, report))
}

/// Exact recovery of an operator promised to be HODLR(k), with the minimal
/// sketches `s_R = s_L = k`, `t = 1`.
pub fn exact_recover<O: LinearOperator + ?Sized>(op: &O, k: usize) -> Result<HodlrMatrix> {
    exact_recover_seeded(op, k, 0)
}

/// [`exact_recover`] with an explicit seed. Fails with
/// [`Error::StructureViolation`] when some sketch is not reproduced by the
/// recovered blocks to [`STRUCTURE_TOLERANCE`].
pub fn exact_recover_seeded<O: LinearOperator + ?Sized>(op: &O, k: usize, seed: u64) -> Result<HodlrMatrix> {
    let cfg = PeelConfig::new(Variant::GeneralizedNystrom, k, k, 1, k, 1).with_seed(seed);
    let (h, report) = run(op, &cfg, None)?;
    for stage in report.levels.iter().chain([&report.diagonal]) {
        if stage.structure_residual > STRUCTURE_TOLERANCE {
            return Err(Error::StructureViolation { k, level: stage.level, residual: stage.structure_residual });
        }
    }
    Ok(h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hodlr::random_hodlr;
    use crate::linops::{materialize, DenseOperator};
    use crate::rng::gaussian_matrix;

    fn rel_err(h: &HodlrMatrix, a: &DMatrix<f64>) -> f64 {
        (h.to_dense().unwrap() - a).norm() / a.norm()
    }

    fn minimal(variant: Variant, k: usize) -> PeelConfig {
        PeelConfig::new(variant, k, k, 1, k, 1)
    }

    #[test]
    fn zero_operator_gives_zero() {
        let op = DenseOperator::new(DMatrix::zeros(32, 32)).unwrap();
        for v in [Variant::GeneralizedNystrom, Variant::Rsvd] {
            let (h, _) = peel(&op, &minimal(v, 2)).unwrap();
            assert_eq!(h.to_dense().unwrap(), DMatrix::zeros(32, 32));
        }
        assert_eq!(exact_recover(&op, 2).unwrap().to_dense().unwrap(), DMatrix::zeros(32, 32));
    }

    #[test]
    fn exact_recovery_with_exact_counts() {
        let a = random_hodlr(256, 2, &mut StreamKey::new(1).rng()).unwrap().to_dense().unwrap();
        let op = DenseOperator::new(a.clone()).unwrap();
        let l = 7;
        let (_, rep) = gn_peel(&op, &minimal(Variant::GeneralizedNystrom, 2).with_seed(3)).unwrap();
        assert_eq!(rep.layout.levels, l);
        assert_eq!((rep.forward_queries, rep.transpose_queries), (2 * l * 2, (2 * l + 1) * 2));
        assert_eq!(rep.levels.iter().map(|s| s.forward_queries).sum::<usize>(), rep.forward_queries);
        assert_eq!(rep.diagonal.transpose_queries, 2);

        let (h, rep) = rsvd_peel(&op, &minimal(Variant::Rsvd, 2).with_seed(3)).unwrap();
        assert!(rel_err(&h, &a) < 1e-8);
        assert_eq!((rep.forward_queries, rep.transpose_queries), (2 * l * 2, (2 * l + 1) * 2));

        // Square k x k regressions amplify roundoff level by level; a little
        // oversampling keeps generalized Nystrom at roundoff on deep trees.
        let cfg = PeelConfig::new(Variant::GeneralizedNystrom, 2, 4, 1, 8, 1).with_seed(3);
        let (h, _) = gn_peel(&op, &cfg).unwrap();
        assert!(rel_err(&h, &a) < 1e-8);
    }

    #[test]
    fn minimal_sketches_are_exact_on_shallow_trees() {
        for seed in 0..5 {
            let a = random_hodlr(32, 2, &mut StreamKey::new(20 + seed).rng()).unwrap().to_dense().unwrap();
            let op = DenseOperator::new(a.clone()).unwrap();
            let (h, _) = gn_peel(&op, &minimal(Variant::GeneralizedNystrom, 2).with_seed(seed)).unwrap();
            assert!(rel_err(&h, &a) < 1e-8);
        }
    }

    #[test]
    fn perforated_counts_match_formulas() {
        let a = gaussian_matrix(64, 64, &mut StreamKey::new(2).rng());
        let op = DenseOperator::new(a).unwrap();
        for cfg in [
            PeelConfig::new(Variant::GeneralizedNystrom, 2, 5, 3, 9, 2),
            PeelConfig::new(Variant::Rsvd, 2, 5, 3, 5, 4),
            PeelConfig::new(Variant::Rsvd, 3, 3, 2, 3, 1).with_truncation(false),
        ] {
            let (_, rep) = peel(&op, &cfg).unwrap();
            assert_eq!(
                (rep.forward_queries, rep.transpose_queries),
                (rep.nominal_forward_queries, rep.nominal_transpose_queries),
                "{cfg:?}"
            );
            assert_eq!(cfg.expected_queries(&rep.layout), (rep.forward_queries, rep.transpose_queries));
        }
    }

    #[test]
    fn exact_recovery_survives_perforation_and_compression() {
        let a = random_hodlr(64, 3, &mut StreamKey::new(4).rng()).unwrap().to_dense().unwrap();
        let op = DenseOperator::new(a.clone()).unwrap();
        for cfg in [
            PeelConfig::new(Variant::GeneralizedNystrom, 3, 3, 4, 3, 3),
            PeelConfig::new(Variant::Rsvd, 3, 3, 4, 3, 3),
            PeelConfig::new(Variant::GeneralizedNystrom, 3, 40, 2, 90, 1).with_compression(true),
        ] {
            let (h, rep) = peel(&op, &cfg).unwrap();
            assert!(rel_err(&h, &a) < 1e-8, "{cfg:?}");
            assert!(rep.forward_queries <= rep.nominal_forward_queries);
            assert!(rep.transpose_queries <= rep.nominal_transpose_queries);
        }
    }

    #[test]
    fn exact_recover_flags_dense_input() {
        let a = gaussian_matrix(64, 64, &mut StreamKey::new(5).rng());
        let op = DenseOperator::new(a).unwrap();
        assert!(matches!(exact_recover(&op, 2), Err(Error::StructureViolation { .. })));

        let a = random_hodlr(32, 2, &mut StreamKey::new(6).rng()).unwrap().to_dense().unwrap();
        let h = exact_recover(&DenseOperator::new(a.clone()).unwrap(), 2).unwrap();
        assert!(rel_err(&h, &a) < 1e-8);
    }

    #[test]
    fn params_examples() {
        let c = params_for_beta(1, 0.9, Variant::GeneralizedNystrom).unwrap();
        assert_eq!(c.s_r, 36);
        assert!(c.validate().unwrap().is_empty());

        let c = params_for_beta(1, 0.5, Variant::Rsvd).unwrap();
        assert_eq!((c.s_r, c.t_r, c.t_l), (22, 20, 400));

        let c = params_for_beta(4, 0.5, Variant::GeneralizedNystrom).unwrap();
        assert_eq!((c.s_r, c.t_r, c.t_l), (245, 60, 1));
        assert!(c.accuracy_violations().is_empty());
        let mut tighter = c.clone();
        tighter.s_l -= 1;
        assert_eq!(tighter.accuracy_violations().len(), 1);

        let u = params_for_beta_profile(4, 0.5, Variant::GeneralizedNystrom, ParamProfile::Unperforated).unwrap();
        assert_eq!(u.t_r, 1);
        assert!(u.validate().unwrap().is_empty());
        assert!(params_for_beta(1, 1.5, Variant::Rsvd).is_err());
    }

    #[test]
    fn params_monotone_in_beta() {
        for variant in [Variant::GeneralizedNystrom, Variant::Rsvd] {
            for profile in [ParamProfile::Perforated, ParamProfile::Unperforated] {
                for k in [1, 3, 8] {
                    let mut beta = 0.95;
                    let mut prev = params_for_beta_profile(k, beta, variant, profile).unwrap();
                    for _ in 0..5 {
                        beta /= 2.0;
                        let next = params_for_beta_profile(k, beta, variant, profile).unwrap();
                        assert!(next.validate().unwrap().is_empty());
                        assert!(next.s_r >= prev.s_r && next.t_r >= prev.t_r);
                        assert!(next.s_l >= prev.s_l && next.t_l >= prev.t_l);
                        prev = next;
                    }
                }
            }
        }
    }

    #[test]
    fn validation_modes() {
        let cfg = PeelConfig::new(Variant::Rsvd, 1, 2, 1, 2, 1).with_beta(0.5);
        assert!(matches!(cfg.validate(), Err(Error::InvalidConfig(_))));
        let warn = cfg.clone().with_validation(Validation::Advisory).validate().unwrap();
        assert_eq!(warn.len(), 2);
        assert!(PeelConfig::new(Variant::Rsvd, 1, 2, 1, 2, 1).validate().unwrap().is_empty());
        assert!(PeelConfig::new(Variant::GeneralizedNystrom, 2, 1, 1, 2, 1).validate().is_err());
        assert!(PeelConfig::new(Variant::GeneralizedNystrom, 2, 3, 1, 2, 1).validate().is_err());
        let op = DenseOperator::new(DMatrix::zeros(8, 8)).unwrap();
        assert!(gn_peel(&op, &minimal(Variant::Rsvd, 2)).is_err());
        assert!(peel(&DenseOperator::new(DMatrix::zeros(14, 14)).unwrap(), &minimal(Variant::Rsvd, 4)).is_err());
    }

    #[test]
    fn residual_sketch_cases() {
        let mut rng = StreamKey::new(7).rng();
        let h = random_hodlr(64, 2, &mut rng).unwrap();
        let a = h.to_dense().unwrap();
        let op = DenseOperator::new(a.clone()).unwrap();
        let layout = *h.layout();
        let omega = gaussian_matrix(64, 3, &mut rng);
        let all: Vec<LevelContribution> = (1..=layout.levels)
            .map(|level| LevelContribution { level, factors: h.level(level).to_vec() })
            .collect();
        for side in [Side::Forward, Side::Transpose] {
            let none = residual_sketch(&op, &layout, &[], &omega, side).unwrap();
            assert_eq!(none, op.apply(&omega, side).unwrap());

            // Subtracting every level leaves only the leaves.
            let mut leaves = DMatrix::zeros(64, 64);
            let nb = layout.n_base;
            for (i, leaf) in h.leaves().iter().enumerate() {
                leaves.view_mut((i * nb, i * nb), (nb, nb)).copy_from(leaf);
            }
            let want = match side {
                Side::Forward => &leaves * &omega,
                Side::Transpose => leaves.tr_mul(&omega),
            };
            let got = residual_sketch(&op, &layout, &all, &omega, side).unwrap();
            assert!((got - &want).norm() <= 1e-10 * want.norm());

            // Partial recovery against dense subtraction of the first two levels.
            let mut partial = a.clone();
            for c in &all[..2] {
                for (j, f) in c.factors.iter().enumerate() {
                    let (r, col, nb) = layout.placement(c.level, j);
                    let mut blk = partial.view_mut((r, col), (nb, nb));
                    blk -= f.to_dense();
                }
            }
            let want = match side {
                Side::Forward => &partial * &omega,
                Side::Transpose => partial.tr_mul(&omega),
            };
            let got = residual_sketch(&op, &layout, &all[..2], &omega, side).unwrap();
            assert!((got - &want).norm() <= 1e-10 * want.norm());
        }
        let zero = DenseOperator::new(DMatrix::zeros(64, 64)).unwrap();
        assert_eq!(residual_sketch(&zero, &layout, &all, &DMatrix::zeros(64, 0), Side::Forward).unwrap().ncols(), 0);
    }

    #[test]
    fn counts_only_operator_queries() {
        let a = random_hodlr(32, 2, &mut StreamKey::new(8).rng()).unwrap();
        let op = Counted::new(DenseOperator::new(a.to_dense().unwrap()).unwrap());
        let layout = *a.layout();
        let all: Vec<LevelContribution> = (1..=layout.levels)
            .map(|level| LevelContribution { level, factors: a.level(level).to_vec() })
            .collect();
        residual_sketch(&op, &layout, &all, &DMatrix::zeros(32, 5), Side::Transpose).unwrap();
        assert_eq!((op.counter().forward(), op.counter().transpose()), (0, 5));
    }

    #[test]
    fn noise_structure_matches_dense_prediction() {
        let a = gaussian_matrix(64, 64, &mut StreamKey::new(9).rng());
        let op = DenseOperator::new(a.clone()).unwrap();
        for cfg in [
            PeelConfig::new(Variant::GeneralizedNystrom, 2, 4, 3, 8, 2),
            PeelConfig::new(Variant::Rsvd, 2, 4, 2, 4, 2),
            PeelConfig::new(Variant::GeneralizedNystrom, 2, 40, 3, 100, 1).with_compression(true),
        ] {
            let (h, rep) = peel_with_reference(&op, &cfg, &a, Some(1.0)).unwrap();
            assert!(rep.noise_structure_deviation.unwrap() < 1e-10, "{cfg:?}");
            let err = rep.final_error.unwrap();
            assert!((err - (h.to_dense().unwrap() - &a).norm()).abs() < 1e-12 * err);
            let parts: f64 = rep.levels.iter().chain([&rep.diagonal]).map(|s| s.error.unwrap().powi(2)).sum();
            assert!((parts.sqrt() - err).abs() < 1e-10 * err);
            assert_eq!(rep.approximation_factor, Some(err));
        }
    }

    #[test]
    fn deterministic_for_fixed_seed() {
        let a = gaussian_matrix(64, 64, &mut StreamKey::new(10).rng());
        let op = DenseOperator::new(a).unwrap();
        let cfg = PeelConfig::new(Variant::GeneralizedNystrom, 2, 5, 2, 9, 2).with_seed(11);
        let (h1, _) = peel(&op, &cfg).unwrap();
        let (h2, _) = peel(&op, &cfg).unwrap();
        assert_eq!(h1.serialize(), h2.serialize());
        let (h3, _) = peel(&op, &cfg.clone().with_seed(12)).unwrap();
        assert_ne!(h1.serialize(), h3.serialize());
    }

    #[test]
    fn small_operator_needs_only_diagonal() {
        let a = gaussian_matrix(3, 3, &mut StreamKey::new(13).rng());
        let op = DenseOperator::new(a.clone()).unwrap();
        let (h, rep) = gn_peel(&op, &PeelConfig::new(Variant::GeneralizedNystrom, 4, 4, 1, 4, 1)).unwrap();
        assert_eq!(rep.layout.levels, 0);
        assert!(rel_err(&h, &a) < 1e-12);
        let (h, _) = rsvd_peel(&op, &minimal(Variant::Rsvd, 4)).unwrap();
        assert!(rel_err(&h, &materialize(&op)) < 1e-14);
    }
}

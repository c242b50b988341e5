//! Operators the CLI can build by name.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use hodlr_core::hodlr::random_hodlr;
use hodlr_core::linops::{
    exp_hard_matrix, hard_block_matrix, make_kernel_operator, make_poisson_operator, read_dense_csv, DenseOperator,
    LinearOperator, PointCloud,
};
use hodlr_core::rng::{gaussian_matrix, StreamKey};
use hodlr_core::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OperatorKind {
    Gaussian,
    Poisson,
    Kernel,
    HardBlock,
    ExpHard,
    RandomHodlr,
    /// Dense matrix read from a CSV file.
    Csv,
}

const NAMES: [(&str, OperatorKind); 7] = [
    ("gaussian", OperatorKind::Gaussian),
    ("poisson", OperatorKind::Poisson),
    ("kernel", OperatorKind::Kernel),
    ("hard-block", OperatorKind::HardBlock),
    ("exp-hard", OperatorKind::ExpHard),
    ("random-hodlr", OperatorKind::RandomHodlr),
    ("csv", OperatorKind::Csv),
];

impl FromStr for OperatorKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let s = s.replace('_', "-");
        NAMES
            .iter()
            .find(|(name, _)| *name == s)
            .map(|(_, k)| *k)
            .ok_or_else(|| Error::InvalidParameter(format!("unknown operator {s:?}")))
    }
}

impl fmt::Display for OperatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(NAMES.iter().find(|(_, k)| k == self).map(|(n, _)| *n).unwrap_or("?"))
    }
}

/// Everything needed to build an operator.
#[derive(Clone, Debug)]
pub struct OperatorSpec<'a> {
    pub kind: OperatorKind,
    pub n: usize,
    pub k: usize,
    pub eta: f64,
    pub seed: u64,
    pub input: Option<&'a Path>,
}

/// Builds the operator. `n` is ignored by `hard-block` (always `8k`) and
/// `csv`; `poisson` needs a square `n`, `exp-hard` a power of two.
pub fn build(spec: &OperatorSpec<'_>) -> Result<Box<dyn LinearOperator>> {
    let key = StreamKey::new(spec.seed).child(hodlr_core::rng::role::MISC);
    let n = spec.n;
    Ok(match spec.kind {
        OperatorKind::Gaussian => Box::new(DenseOperator::new(gaussian_matrix(n, n, &mut key.rng()))?),
        OperatorKind::Poisson => {
            let t = (n as f64).sqrt().round() as usize;
            if t * t != n {
                return Err(Error::InvalidParameter(format!("poisson needs a square n, got {n}")));
            }
            Box::new(make_poisson_operator(t)?)
        }
        OperatorKind::Kernel => Box::new(make_kernel_operator(&PointCloud::perturbed_helix(n, &mut key.rng())?)),
        OperatorKind::HardBlock => Box::new(DenseOperator::new(hard_block_matrix(spec.k, spec.eta)?)?),
        OperatorKind::ExpHard => {
            if !n.is_power_of_two() {
                return Err(Error::InvalidParameter(format!("exp-hard needs a power-of-two n, got {n}")));
            }
            Box::new(DenseOperator::new(exp_hard_matrix(n.trailing_zeros(), spec.eta)?)?)
        }
        OperatorKind::RandomHodlr => Box::new(DenseOperator::new(random_hodlr(n, spec.k, &mut key.rng())?.to_dense()?)?),
        OperatorKind::Csv => {
            let path = spec.input.ok_or_else(|| Error::InvalidParameter("csv operator needs --input".into()))?;
            Box::new(DenseOperator::new(read_dense_csv(path)?)?)
        }
    })
}

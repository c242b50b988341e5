//! Experiment grids and the runner that turns them into result rows.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use hodlr_core::hodlr::{best_hodlr, random_hodlr};
use hodlr_core::linops::{
    make_exp_hard_instance, make_hard_block_instance, make_kernel_operator, make_poisson_operator, materialize,
    DenseOperator, LinearOperator, PointCloud,
};
use hodlr_core::par;
use hodlr_core::peel::{peel, PeelConfig, Validation};
use hodlr_core::rng::StreamKey;
use hodlr_core::{Error, Result};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::bounds;
use crate::metrics::{mean_stderr, recovery_error, relative_error};
use crate::presets::Preset;

/// Largest `n` for which the dense optimum is computed.
pub const DENSE_OPT_LIMIT: usize = 4096;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Experiment {
    Poisson,
    Kernel,
    HardBlock,
    ExpHard,
    Recovery,
    BoundChecks,
}

pub const EXPERIMENTS: [Experiment; 6] = [
    Experiment::Poisson,
    Experiment::Kernel,
    Experiment::HardBlock,
    Experiment::ExpHard,
    Experiment::Recovery,
    Experiment::BoundChecks,
];

impl Experiment {
    pub fn name(self) -> &'static str {
        match self {
            Experiment::Poisson => "poisson",
            Experiment::Kernel => "kernel",
            Experiment::HardBlock => "hard_block",
            Experiment::ExpHard => "exp_hard",
            Experiment::Recovery => "recovery",
            Experiment::BoundChecks => "bound_checks",
        }
    }
}

impl fmt::Display for Experiment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Experiment {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let norm = s.replace('-', "_");
        EXPERIMENTS
            .into_iter()
            .find(|e| e.name() == norm)
            .ok_or_else(|| Error::InvalidParameter(format!("unknown experiment {s:?}")))
    }
}

/// A fully resolved parameter grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub presets: Vec<Preset>,
    pub ks: Vec<usize>,
    pub betas: Vec<f64>,
    /// Matrix sizes. Ignored by `hard_block`, whose size is `8k`.
    pub ns: Vec<usize>,
    pub trials: usize,
    pub seed: u64,
    /// Large entry of the hard instances.
    pub eta: f64,
    pub truncate: bool,
    /// Fail on configurations outside the accuracy conditions.
    pub strict: bool,
}

impl Grid {
    pub fn defaults(exp: Experiment) -> Grid {
        let base = Grid {
            presets: vec![Preset::GN1, Preset::RSVD1],
            ks: vec![8],
            betas: vec![0.5],
            ns: vec![256],
            trials: 20,
            seed: 0,
            eta: 1e8,
            truncate: true,
            strict: false,
        };
        match exp {
            Experiment::Poisson => Grid {
                presets: crate::presets::ALL.to_vec(),
                betas: vec![1.0, 0.5, 0.25, 0.125],
                ns: vec![1024],
                ..base
            },
            Experiment::Kernel => Grid { ks: vec![2, 4, 6, 8], betas: vec![0.25], ..base },
            Experiment::HardBlock => Grid {
                presets: crate::presets::ALL.to_vec(),
                ks: vec![1],
                betas: vec![0.25],
                ns: vec![8],
                ..base
            },
            Experiment::ExpHard => Grid {
                presets: vec![Preset::RSVD1, Preset::GN2, Preset::RSVD2],
                ks: vec![1],
                ns: (4..=10).map(|p| 1 << p).collect(),
                ..base
            },
            Experiment::Recovery => Grid { ks: vec![2], ..base },
            Experiment::BoundChecks => Grid { presets: vec![], ks: vec![], betas: vec![], ns: vec![], trials: 1, ..base },
        }
    }
}

/// Partial grid from a config file section or the command line.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridOverrides {
    pub presets: Option<Vec<Preset>>,
    pub ks: Option<Vec<usize>>,
    pub betas: Option<Vec<f64>>,
    pub ns: Option<Vec<usize>>,
    pub trials: Option<usize>,
    pub seed: Option<u64>,
    pub eta: Option<f64>,
    pub truncate: Option<bool>,
    pub strict: Option<bool>,
}

impl GridOverrides {
    pub fn apply(&self, grid: &mut Grid) {
        macro_rules! set {
            ($($f:ident),*) => { $(if let Some(v) = &self.$f { grid.$f = v.clone(); })* };
        }
        set!(presets, ks, betas, ns, trials, seed, eta, truncate, strict);
    }
}

/// One `(config, trial)` measurement.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Row {
    pub experiment: String,
    pub preset: String,
    pub n: usize,
    pub k: usize,
    pub beta: f64,
    pub trial: usize,
    pub relative_error: f64,
    pub absolute_error: f64,
    pub forward_queries: usize,
    pub transpose_queries: usize,
    pub seed: u64,
}

pub const COLUMNS: [&str; 11] = [
    "experiment",
    "preset",
    "n",
    "k",
    "beta",
    "trial",
    "relative_error",
    "absolute_error",
    "forward_queries",
    "transpose_queries",
    "seed",
];

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentResult {
    pub experiment: Experiment,
    pub grid: Grid,
    pub rows: Vec<Row>,
    /// Accuracy-condition warnings, one per offending cell.
    pub warnings: Vec<String>,
    /// Set by `bound_checks`.
    pub suites: Vec<bounds::SuiteOutcome>,
}

impl ExperimentResult {
    pub fn passed(&self) -> bool {
        self.suites.iter().all(|s| s.passed)
    }
}

/// A test matrix reached through an operator, plus its dense form and the
/// reference error the relative error is measured against.
struct Instance {
    n: usize,
    k: usize,
    op: Box<dyn LinearOperator>,
    dense: DMatrix<f64>,
    reference: f64,
}

fn log2_exact(n: usize) -> Result<u32> {
    if n.is_power_of_two() && n >= 4 {
        Ok(n.trailing_zeros())
    } else {
        Err(Error::InvalidParameter(format!("n={n} must be a power of two >= 4")))
    }
}

fn build_instance(exp: Experiment, n: usize, k: usize, grid: &Grid) -> Result<Instance> {
    if n > DENSE_OPT_LIMIT {
        return Err(Error::SizeGuard(format!("n={n} exceeds the dense optimum limit {DENSE_OPT_LIMIT}")));
    }
    let key = StreamKey::new(grid.seed).at(&[exp as u64, n as u64, k as u64]);
    let op: Box<dyn LinearOperator> = match exp {
        Experiment::Poisson => {
            let t = (n as f64).sqrt().round() as usize;
            if t * t != n {
                return Err(Error::InvalidParameter(format!("poisson needs a square n, got {n}")));
            }
            Box::new(make_poisson_operator(t)?)
        }
        Experiment::Kernel => Box::new(make_kernel_operator(&PointCloud::perturbed_helix(n, &mut key.rng())?)),
        Experiment::HardBlock => Box::new(make_hard_block_instance(k, grid.eta)?),
        Experiment::ExpHard => Box::new(make_exp_hard_instance(log2_exact(n)?, grid.eta)?),
        Experiment::Recovery => {
            let h = random_hodlr(n, k, &mut key.rng())?;
            Box::new(DenseOperator::new(h.to_dense()?)?)
        }
        Experiment::BoundChecks => unreachable!("bound checks have no operator"),
    };
    let dense = materialize(op.as_ref());
    let reference = if exp == Experiment::Recovery {
        dense.norm()
    } else {
        (best_hodlr(&dense, k)?.to_dense()? - &dense).norm()
    };
    Ok(Instance { n: dense.nrows(), k, op, dense, reference })
}

struct Job {
    instance: usize,
    preset: Preset,
    beta: f64,
    trial: usize,
}

fn trial_seed(grid: &Grid, inst: &Instance, preset: Preset, beta: f64, trial: usize) -> u64 {
    StreamKey::new(grid.seed)
        .at(&[inst.n as u64, inst.k as u64, preset as u64, beta.to_bits(), trial as u64])
        .derived_seed()
}

fn cell_config(grid: &Grid, preset: Preset, k: usize, beta: f64) -> Result<PeelConfig> {
    let validation = if grid.strict { Validation::Strict } else { Validation::Advisory };
    Ok(preset.config(k, beta)?.with_truncation(grid.truncate).with_validation(validation))
}

fn run_job(exp: Experiment, grid: &Grid, inst: &Instance, job: &Job) -> Result<Row> {
    let seed = trial_seed(grid, inst, job.preset, job.beta, job.trial);
    let cfg = cell_config(grid, job.preset, inst.k, job.beta)?.with_seed(seed);
    let (h, report) = peel(inst.op.as_ref(), &cfg)?;
    let err = (h.to_dense()? - &inst.dense).norm();
    let relative = match exp {
        Experiment::Recovery => recovery_error(err, inst.reference),
        _ => relative_error(err, inst.reference),
    };
    Ok(Row {
        experiment: exp.to_string(),
        preset: job.preset.to_string(),
        n: inst.n,
        k: inst.k,
        beta: job.beta,
        trial: job.trial,
        relative_error: relative,
        absolute_error: err,
        forward_queries: report.forward_queries,
        transpose_queries: report.transpose_queries,
        seed,
    })
}

fn run_bound_checks(grid: &Grid) -> Result<ExperimentResult> {
    let suites = bounds::all_suites(grid.seed)?;
    let rows = suites
        .iter()
        .map(|s| Row {
            experiment: Experiment::BoundChecks.to_string(),
            preset: s.name.to_string(),
            n: 0,
            k: 0,
            beta: 0.0,
            trial: 0,
            relative_error: s.failures as f64 / s.cases as f64,
            absolute_error: s.measured,
            forward_queries: 0,
            transpose_queries: 0,
            seed: grid.seed,
        })
        .collect();
    Ok(ExperimentResult { experiment: Experiment::BoundChecks, grid: grid.clone(), rows, warnings: vec![], suites })
}

/// Runs every `(n, k, preset, beta, trial)` cell of the grid.
///
/// The test matrix and its optimum are built once per `(n, k)`; trials run
/// in parallel, each with its own seed derived from the grid seed.
pub fn run_experiment(exp: Experiment, grid: &Grid) -> Result<ExperimentResult> {
    if exp == Experiment::BoundChecks {
        return run_bound_checks(grid);
    }
    if grid.trials == 0 {
        return Err(Error::InvalidParameter("trials must be >= 1".into()));
    }
    let ns: Vec<usize> = match exp {
        Experiment::HardBlock => grid.ks.iter().map(|k| 8 * k).collect(),
        _ => grid.ns.clone(),
    };
    let mut shapes = Vec::new();
    for &n in &ns {
        for &k in &grid.ks {
            if exp != Experiment::HardBlock || n == 8 * k {
                shapes.push((n, k));
            }
        }
    }
    let instances = par::try_map_range(shapes.len(), |i| build_instance(exp, shapes[i].0, shapes[i].1, grid))?;

    let mut warnings = Vec::new();
    let mut jobs = Vec::new();
    for (i, inst) in instances.iter().enumerate() {
        for &preset in &grid.presets {
            for &beta in &grid.betas {
                let cfg = cell_config(grid, preset, inst.k, beta)?;
                for w in cfg.validate()? {
                    warnings.push(format!("{preset} n={} k={} beta={beta}: {w}", inst.n, inst.k));
                }
                jobs.extend((0..grid.trials).map(|trial| Job { instance: i, preset, beta, trial }));
            }
        }
    }
    let rows = par::try_map_range(jobs.len(), |j| run_job(exp, grid, &instances[jobs[j].instance], &jobs[j]))?;
    Ok(ExperimentResult { experiment: exp, grid: grid.clone(), rows, warnings, suites: vec![] })
}

/// Trial statistics for one `(preset, n, k, beta)` cell.
#[derive(Clone, Debug, PartialEq)]
pub struct CellSummary {
    pub preset: String,
    pub n: usize,
    pub k: usize,
    pub beta: f64,
    pub trials: usize,
    pub mean_relative: f64,
    pub stderr_relative: f64,
    pub mean_absolute: f64,
    pub stderr_absolute: f64,
    pub forward_queries: usize,
    pub transpose_queries: usize,
}

/// Groups rows by cell, in order of first appearance.
pub fn summarize(rows: &[Row]) -> Vec<CellSummary> {
    let mut order: Vec<(String, usize, usize, u64)> = Vec::new();
    let mut groups: BTreeMap<(String, usize, usize, u64), Vec<&Row>> = BTreeMap::new();
    for r in rows {
        let key = (r.preset.clone(), r.n, r.k, r.beta.to_bits());
        if !groups.contains_key(&key) {
            order.push(key.clone());
        }
        groups.entry(key).or_default().push(r);
    }
    order
        .into_iter()
        .map(|key| {
            let g = &groups[&key];
            let rel: Vec<f64> = g.iter().map(|r| r.relative_error).collect();
            let abs: Vec<f64> = g.iter().map(|r| r.absolute_error).collect();
            let (mean_relative, stderr_relative) = mean_stderr(&rel);
            let (mean_absolute, stderr_absolute) = mean_stderr(&abs);
            CellSummary {
                preset: key.0.clone(),
                n: key.1,
                k: key.2,
                beta: f64::from_bits(key.3),
                trials: g.len(),
                mean_relative,
                stderr_relative,
                mean_absolute,
                stderr_absolute,
                forward_queries: g[0].forward_queries,
                transpose_queries: g[0].transpose_queries,
            }
        })
        .collect()
}

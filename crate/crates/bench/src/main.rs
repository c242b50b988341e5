use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use hodlr_bench::config::{resolve, ConfigFile};
use hodlr_bench::experiments::{run_experiment, summarize, Experiment, GridOverrides, DENSE_OPT_LIMIT};
use hodlr_bench::metrics::relative_error;
use hodlr_bench::operators::{build, OperatorKind, OperatorSpec};
use hodlr_bench::output::{emit, write_csv, Format};
use hodlr_bench::presets::Preset;
use hodlr_bench::output;
use hodlr_core::hodlr::{best_hodlr, HodlrMatrix};
use hodlr_core::linops::{materialize, LinearOperator};
use hodlr_core::peel::{exact_recover_seeded, params_for_beta, peel, PeelConfig, Validation, Variant};
use hodlr_core::{Error, Result};

#[derive(Parser)]
#[command(name = "hodlr", version, about = "Matrix-free HODLR approximation by randomized peeling")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Approximate one operator and write the HODLR file.
    Approx(ApproxArgs),
    /// Exact recovery of an operator promised to be HODLR(k).
    Recover(RecoverArgs),
    /// Run an experiment grid and write CSV or plot data.
    Bench(BenchArgs),
    /// Run the low-rank error bound suites; exits 1 if any fails.
    CheckBounds(CheckArgs),
}

#[derive(Args)]
struct OperatorArgs {
    /// gaussian, poisson, kernel, hard-block, exp-hard, random-hodlr or csv.
    #[arg(long, default_value = "gaussian")]
    operator: OperatorKind,
    /// Dense matrix CSV for `--operator csv`.
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long, default_value_t = 256)]
    n: usize,
    #[arg(long, default_value_t = 4)]
    k: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Large entry of the hard instances.
    #[arg(long, default_value_t = 1e8)]
    eta: f64,
}

impl OperatorArgs {
    fn build(&self) -> Result<Box<dyn LinearOperator>> {
        build(&OperatorSpec {
            kind: self.operator,
            n: self.n,
            k: self.k,
            eta: self.eta,
            seed: self.seed,
            input: self.input.as_deref(),
        })
    }
}

#[derive(Args)]
struct ApproxArgs {
    #[command(flatten)]
    op: OperatorArgs,
    /// Accuracy target. Without a preset or explicit sizes, parameters are
    /// the smallest meeting the accuracy conditions for it.
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    preset: Option<Preset>,
    /// gn or rsvd.
    #[arg(long)]
    variant: Option<Variant>,
    #[arg(long)]
    s_r: Option<usize>,
    #[arg(long)]
    t_r: Option<usize>,
    #[arg(long)]
    s_l: Option<usize>,
    #[arg(long)]
    t_l: Option<usize>,
    /// Output HODLR file.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Keep full sketch-rank factors instead of truncating to rank k.
    #[arg(long)]
    no_truncate: bool,
    /// Run even if the parameters miss the accuracy conditions for beta.
    #[arg(long)]
    allow_invalid_config: bool,
}

#[derive(Args)]
struct RecoverArgs {
    #[command(flatten)]
    op: OperatorArgs,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    /// poisson, kernel, hard_block, exp_hard, recovery or bound_checks.
    experiment: Experiment,
    /// TOML file with one table per experiment.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    preset: Option<Vec<Preset>>,
    #[arg(long, value_delimiter = ',')]
    k: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    beta: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    n: Option<Vec<usize>>,
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    eta: Option<f64>,
    /// CSV file, or directory for plot data.
    #[arg(long)]
    out: Option<PathBuf>,
    /// csv or plotdata.
    #[arg(long, default_value = "csv")]
    format: Format,
    #[arg(long)]
    no_truncate: bool,
    /// Refuse configurations that miss the accuracy conditions.
    #[arg(long, conflicts_with = "allow_invalid_config")]
    strict: bool,
    /// Accepted for symmetry with `approx`; grids are advisory by default.
    #[arg(long)]
    allow_invalid_config: bool,
}

#[derive(Args)]
struct CheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Optional CSV of the suite results.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn approx_config(a: &ApproxArgs) -> Result<PeelConfig> {
    let k = a.op.k;
    let variant = match (a.preset, a.variant) {
        (Some(p), Some(v)) if p.variant() != v => {
            return Err(Error::InvalidParameter(format!("preset {p} is not variant {v}")));
        }
        (Some(p), _) => p.variant(),
        (None, v) => v.unwrap_or(Variant::GeneralizedNystrom),
    };
    let cfg = if let Some(p) = a.preset {
        p.config(k, a.beta.unwrap_or(0.5))?
    } else if let Some(s_r) = a.s_r {
        let cfg = PeelConfig::new(variant, k, s_r, a.t_r.unwrap_or(1), a.s_l.unwrap_or(s_r), a.t_l.unwrap_or(1));
        match a.beta {
            Some(b) => cfg.with_beta(b),
            None => cfg,
        }
    } else {
        params_for_beta(k, a.beta.unwrap_or(0.5), variant)?.with_compression(true)
    };
    let validation = if a.allow_invalid_config { Validation::Advisory } else { Validation::Strict };
    Ok(cfg.with_seed(a.op.seed).with_truncation(!a.no_truncate).with_validation(validation))
}

/// Prints `||A - H||`, the optimum and the relative error when `A` is small
/// enough to expand.
fn print_errors(op: &dyn LinearOperator, h: &HodlrMatrix) -> Result<()> {
    if op.dim() > DENSE_OPT_LIMIT {
        return Ok(());
    }
    let a = materialize(op);
    let err = (h.to_dense()? - &a).norm();
    let opt = (best_hodlr(&a, h.k())?.to_dense()? - &a).norm();
    println!("error      {err:.6e}");
    println!("optimal    {opt:.6e}");
    println!("relative   {:.6e}", relative_error(err, opt));
    println!("vs ||A||   {:.6e}", err / a.norm().max(f64::MIN_POSITIVE));
    Ok(())
}

fn save(h: &HodlrMatrix, out: Option<&Path>) -> Result<()> {
    if let Some(p) = out {
        h.save(p)?;
        println!("wrote      {}", p.display());
    }
    Ok(())
}

fn approx(a: ApproxArgs) -> Result<ExitCode> {
    let cfg = approx_config(&a)?;
    let op = a.op.build()?;
    let (h, report) = peel(op.as_ref(), &cfg)?;
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    println!("variant    {}", cfg.variant);
    println!(
        "params     k={} s_R={} t_R={} s_L={} t_L={}",
        cfg.k,
        cfg.s_r,
        cfg.t_r,
        cfg.left_width(),
        cfg.t_l
    );
    println!("layout     n={} levels={} leaf={}", report.layout.n, report.layout.levels, report.layout.n_base);
    println!(
        "queries    forward={} transpose={} (nominal {} / {})",
        report.forward_queries,
        report.transpose_queries,
        report.nominal_forward_queries,
        report.nominal_transpose_queries
    );
    println!("seconds    {:.3}", report.seconds);
    print_errors(op.as_ref(), &h)?;
    save(&h, a.out.as_deref())?;
    Ok(ExitCode::SUCCESS)
}

fn recover(a: RecoverArgs) -> Result<ExitCode> {
    let op = a.op.build()?;
    match exact_recover_seeded(op.as_ref(), a.op.k, a.op.seed) {
        Ok(h) => {
            println!("recovered  n={} k={} levels={}", h.n(), h.k(), h.num_levels());
            if op.dim() <= DENSE_OPT_LIMIT {
                let a_dense = materialize(op.as_ref());
                let err = (h.to_dense()? - &a_dense).norm();
                println!("vs ||A||   {:.6e}", err / a_dense.norm().max(f64::MIN_POSITIVE));
            }
            save(&h, a.out.as_deref())?;
            Ok(ExitCode::SUCCESS)
        }
        Err(e @ Error::StructureViolation { .. }) => {
            eprintln!("error: {e}");
            Ok(ExitCode::from(3))
        }
        Err(e) => Err(e),
    }
}

fn bench(a: BenchArgs) -> Result<ExitCode> {
    let file = a.config.as_deref().map(ConfigFile::load).transpose()?;
    let cli = GridOverrides {
        presets: a.preset,
        ks: a.k,
        betas: a.beta,
        ns: a.n,
        trials: a.trials,
        seed: a.seed,
        eta: a.eta,
        truncate: a.no_truncate.then_some(false),
        strict: a.strict.then_some(true),
    };
    let grid = resolve(a.experiment, file.as_ref(), &cli);
    let result = run_experiment(a.experiment, &grid)?;
    if !result.warnings.is_empty() {
        eprintln!("{} cells run outside the accuracy conditions (advisory)", result.warnings.len());
    }
    for c in summarize(&result.rows) {
        println!(
            "{:<6} n={:<5} k={:<3} beta={:<6} trials={:<3} relative={:.4e} (se {:.1e}) absolute={:.4e}",
            c.preset, c.n, c.k, c.beta, c.trials, c.mean_relative, c.stderr_relative, c.mean_absolute
        );
    }
    let out = a.out.unwrap_or_else(|| match a.format {
        Format::Csv => PathBuf::from(format!("{}.csv", a.experiment)),
        Format::Plotdata => PathBuf::from(format!("{}_plotdata", a.experiment)),
    });
    for p in emit(&result, &out, a.format)? {
        println!("wrote {}", p.display());
    }
    Ok(if result.passed() { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

fn check_bounds(a: CheckArgs) -> Result<ExitCode> {
    let mut grid = hodlr_bench::experiments::Grid::defaults(Experiment::BoundChecks);
    grid.seed = a.seed;
    let result = run_experiment(Experiment::BoundChecks, &grid)?;
    for s in &result.suites {
        println!("{} {}: {}", if s.passed { "PASS" } else { "FAIL" }, s.name, s.detail);
    }
    if let Some(out) = a.out {
        write_csv(&result.rows, &out)?;
        std::fs::write(output::sidecar_path(&out, Format::Csv), output::RunRecord::new(result.experiment, &grid).to_toml()?)?;
    }
    Ok(if result.passed() { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = match cli.command {
        Command::Approx(a) => approx(a),
        Command::Recover(a) => recover(a),
        Command::Bench(a) => bench(a),
        Command::CheckBounds(a) => check_bounds(a),
    };
    res.unwrap_or_else(|e| {
        eprintln!("error: {e}");
        ExitCode::from(2)
    })
}

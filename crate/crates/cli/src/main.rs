use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use ipd_core::certificates::FitMode;
use ipd_core::experiment::{
    certify, rates, run_experiment, Algorithm, ExperimentConfig, ImageSource, NoiseSpec, ProblemKind, SummaryMetric,
};
use ipd_core::solvers::Mode;

#[derive(Parser)]
#[command(name = "ipd", version, about = "Inexact primal-dual deblurring experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve one deblurring problem and write a CSV record plus JSON summary.
    Run(Box<RunArgs>),
    /// Re-check the bound inequalities of a stored record.
    Certify {
        #[arg(long)]
        record: PathBuf,
    },
    /// Fit a convergence slope on a stored record.
    Rates {
        #[arg(long)]
        record: PathBuf,
        #[arg(long)]
        from: usize,
        #[arg(long)]
        to: usize,
        /// Fit log(metric) against n instead of log(n).
        #[arg(long)]
        semilog: bool,
        /// relerr, erg_relerr or lag_gap.
        #[arg(long, default_value = "erg_relerr")]
        metric: String,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    WorstCase,
    Practical,
}

#[derive(clap::Args)]
struct RunArgs {
    /// tvl1, tvl2 or tvl2-smooth.
    #[arg(long)]
    problem: String,
    /// pdhg, pdhg-accel, ipd-basic, ipd-reduced, ipd-primal-accel, ipd-dual-accel or ipd-smooth.
    #[arg(long)]
    algorithm: String,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    q: Option<f64>,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    n_outer: Option<usize>,
    #[arg(long)]
    max_inner: Option<usize>,
    /// A PGM file or synth:shapes, synth:ramp, synth:constant.
    #[arg(long)]
    image: Option<String>,
    /// RxC, used for synthetic images.
    #[arg(long)]
    size: Option<String>,
    #[arg(long)]
    blur_fwhm: Option<f64>,
    /// saltpepper:P, gaussian:S or none.
    #[arg(long)]
    noise: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    gt_iters: Option<usize>,
    /// CSV path; the summary goes next to it with a .json extension.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    paper_literal: bool,
    #[arg(long)]
    beta: Option<f64>,
}

fn parse_size(s: &str) -> Result<(usize, usize)> {
    let (r, c) = s.split_once(['x', 'X']).with_context(|| format!("size must be RxC, got {s:?}"))?;
    let rows: usize = r.trim().parse().with_context(|| format!("bad row count in {s:?}"))?;
    let cols: usize = c.trim().parse().with_context(|| format!("bad column count in {s:?}"))?;
    if rows == 0 || cols == 0 {
        bail!("size must be positive, got {s:?}");
    }
    Ok((rows, cols))
}

fn build_config(args: &RunArgs) -> Result<ExperimentConfig> {
    let problem: ProblemKind = args.problem.parse()?;
    let algorithm: Algorithm = args.algorithm.parse()?;
    let mut c = ExperimentConfig::new(problem, algorithm);
    if let Some(v) = args.alpha {
        c.alpha = v;
    }
    if let Some(v) = args.q {
        c.q = v;
    }
    if let Some(m) = args.mode {
        c.mode = match m {
            ModeArg::WorstCase => Mode::WorstCase,
            ModeArg::Practical => Mode::Practical,
        };
    }
    if let Some(v) = args.lambda {
        c.lambda = v;
    }
    if let Some(v) = args.gamma {
        c.gamma_smooth = v;
    }
    if let Some(v) = args.n_outer {
        c.n_outer = v;
        c.fit_to = c.fit_to.min(v);
    }
    if let Some(v) = args.max_inner {
        c.max_inner = v;
    }
    if let Some(s) = &args.image {
        c.image = s.parse::<ImageSource>()?;
    }
    if let Some(s) = &args.size {
        (c.rows, c.cols) = parse_size(s)?;
    }
    c.blur_fwhm = args.blur_fwhm.or(c.blur_fwhm);
    if let Some(s) = &args.noise {
        c.noise = s.parse::<NoiseSpec>()?;
    }
    if let Some(v) = args.seed {
        c.seed = v;
    }
    if let Some(v) = args.gt_iters {
        c.ground_truth_iters = v;
    }
    c.output = args.out.clone();
    c.paper_literal = args.paper_literal;
    if let Some(v) = args.beta {
        c.beta = v;
    }
    c.validate()?;
    Ok(c)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |v| format!("{v:.4}"))
}

fn run(args: &RunArgs) -> Result<ExitCode> {
    let config = build_config(args)?;
    let outcome = run_experiment(&config)?;
    let s = &outcome.summary;
    if config.output.is_none() {
        print!("{}", outcome.csv);
    }
    eprintln!(
        "F* = {:.6e}  slope = {}  r2 = {}  bound_ok = {}  descent_ok = {}  inner iterations = {}",
        s.f_star,
        fmt_opt(s.slope),
        fmt_opt(s.r2),
        s.bound_ok,
        s.descent_ok,
        s.total_inner_iterations
    );
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run(args) => run(args),
        Command::Certify { record } => certify(record).map_err(Into::into).map(|report| {
            println!(
                "rows {}  checked {}  bound violations {}  descent_ok {}  monotone {}  row count ok {}",
                report.rows,
                report.checked,
                report.bound_violations.len(),
                report.descent_ok,
                report.monotone_cumulative,
                report.row_count_ok
            );
            if let Some(n) = report.bound_violations.first() {
                println!("first violation at n = {n}");
            }
            if report.ok() {
                ExitCode::SUCCESS
            } else {
                ExitCode::FAILURE
            }
        }),
        Command::Rates {
            record,
            from,
            to,
            semilog,
            metric,
        } => metric.parse::<SummaryMetric>().map_err(Into::into).and_then(|m| {
            let mode = if *semilog { FitMode::SemiLog } else { FitMode::LogLog };
            let fit = rates(record, m, *from, *to, mode)?;
            println!("slope {:.6}  r2 {:.6}  points {}", fit.slope, fit.r2, fit.points);
            Ok(ExitCode::SUCCESS)
        }),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use driftlab_cli::checks;
use driftlab_cli::error::CliError;
use driftlab_cli::runner::{self, Context, Report, RunOptions};
use driftlab_cli::scenario::Scenario;
use driftlab_core::bound_envelope::envelope_exponents;
use driftlab_core::regularity_calc::{bootstrap_exponents, moser_sequence, moser_threshold};
use serde_json::{json, Value};

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Format {
    Json,
    Csv,
}

#[derive(Debug, Parser)]
#[command(name = "driftlab", version, about = "Numerical checks for Kolmogorov operators with unbounded coefficients")]
struct Cli {
    /// Scenario file (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Artifact directory; overrides `output_dir` in the scenario.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Overrides the scenario seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for simulations (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[arg(long, global = true, value_enum, default_value = "json")]
    format: Format,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Check the growth hypotheses on the scenario grid.
    CheckHypotheses,
    /// Build V and W and certify the Lyapunov inequalities.
    DeriveLyapunov,
    /// Truncated coefficients: structural checks and density convergence.
    Approx,
    /// Simulate terminal samples for every start time.
    Simulate,
    /// Transition densities by the configured route(s).
    Density,
    /// Monte Carlo moment bounds for W and V.
    VerifyMoment,
    /// Tail decay fit and envelope domination of the FD kernel.
    VerifyKernel,
    /// Exponent bootstrap for the density regularity chain.
    Bootstrap {
        #[arg(long)]
        d: usize,
        #[arg(long)]
        k: f64,
        #[arg(long)]
        r1: f64,
        /// Stop once r reaches this value (default: iterate to the limit).
        #[arg(long)]
        target: Option<f64>,
    },
    /// Moser level-set recursion.
    Moser {
        #[arg(long)]
        nu: f64,
        #[arg(long)]
        alpha: f64,
        #[arg(long)]
        y0: Option<f64>,
        #[arg(long, default_value_t = 10)]
        n: usize,
    },
    /// Envelope exponents e1, e2.
    Exponents {
        #[arg(long)]
        p: f64,
        #[arg(long)]
        m: f64,
        #[arg(long)]
        alpha: f64,
        #[arg(long)]
        k: f64,
        #[arg(long, default_value_t = 1)]
        d: usize,
    },
    /// Run every check listed in the scenario.
    Run,
    /// Registered verification ids.
    ListChecks,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: --threads: {e}");
            return ExitCode::from(2);
        }
    }
    match dispatch(&cli) {
        Ok(pass) => ExitCode::from(if pass { 0 } else { 1 }),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn scenario(cli: &Cli) -> Result<Scenario, CliError> {
    let path = cli.config.as_ref().ok_or_else(|| CliError::Config("--config <path> is required".into()))?;
    Scenario::from_path(path)
}

fn options(cli: &Cli) -> RunOptions {
    RunOptions { out: cli.out.clone(), seed: cli.seed }
}

fn dispatch(cli: &Cli) -> Result<bool, CliError> {
    let subset: &[&str] = match &cli.command {
        Command::CheckHypotheses => &["hypotheses"],
        Command::DeriveLyapunov => &["lyapunov_certificate"],
        Command::Approx => &["approx_lyapunov", "approx_convergence"],
        Command::VerifyMoment => &["moment_bound_prop27"],
        Command::VerifyKernel => &["tail_decay_thm53", "envelope_domination"],
        Command::Run => {
            let sc = scenario(cli)?;
            let report = runner::run_scenario(&sc, &options(cli))?;
            return emit_report(cli.format, &report);
        }
        Command::Simulate => {
            let sc = scenario(cli)?;
            let rows = Context::new(&sc, &options(cli))?.simulate()?;
            emit_json(&rows)?;
            return Ok(true);
        }
        Command::Density => {
            let sc = scenario(cli)?;
            let summary = Context::new(&sc, &options(cli))?.densities()?;
            emit_json(&summary)?;
            return Ok(true);
        }
        Command::ListChecks => {
            let mut out = std::io::stdout().lock();
            for c in checks::list_checks() {
                match cli.format {
                    Format::Json => writeln!(out, "{}", json!({ "id": c.id, "description": c.description }))?,
                    Format::Csv => writeln!(out, "{},{}", c.id, c.description)?,
                }
            }
            return Ok(true);
        }
        Command::Bootstrap { d, k, r1, target } => {
            let trace = bootstrap_exponents(*d, *k, *r1, target.unwrap_or(f64::INFINITY))?;
            match cli.format {
                Format::Json => emit_json(&serde_json::to_value(&trace).expect("serializable"))?,
                Format::Csv => {
                    let mut out = std::io::stdout().lock();
                    writeln!(out, "step,r,p,inv_r")?;
                    for (i, r) in trace.r.iter().enumerate() {
                        let p = trace.p.get(i).map(|p| p.to_string()).unwrap_or_default();
                        writeln!(out, "{},{},{},{}", i + 1, r, p, trace.inv_r[i])?;
                    }
                }
            }
            return Ok(true);
        }
        Command::Moser { nu, alpha, y0, n } => {
            let th = moser_threshold(*nu, *alpha)?;
            let trace = moser_sequence(*nu, *alpha, y0.unwrap_or(th.y0_star), *n)?;
            match cli.format {
                Format::Json => emit_json(&json!({ "threshold": th, "trace": trace }))?,
                Format::Csv => {
                    let mut out = std::io::stdout().lock();
                    writeln!(out, "n,level,y")?;
                    for (i, y) in trace.y.iter().enumerate() {
                        writeln!(out, "{i},{},{y}", trace.levels[i])?;
                    }
                }
            }
            return Ok(trace.converged);
        }
        Command::Exponents { p, m, alpha, k, d } => {
            let (e1, e2) = envelope_exponents(*p, *m, *alpha, *k, *d)?;
            match cli.format {
                Format::Json => emit_json(&json!({ "e1": e1, "e2": e2 }))?,
                Format::Csv => println!("e1,e2\n{e1},{e2}"),
            }
            return Ok(true);
        }
    };
    let sc = scenario(cli)?;
    let report = runner::run_checks(&sc, &options(cli), subset)?;
    emit_report(cli.format, &report)
}

fn emit_json(v: &Value) -> Result<(), CliError> {
    let mut out = std::io::stdout().lock();
    writeln!(out, "{}", serde_json::to_string_pretty(v).expect("serializable"))?;
    Ok(())
}

fn emit_report(format: Format, report: &Report) -> Result<bool, CliError> {
    let mut out = std::io::stdout().lock();
    match format {
        Format::Json => write!(out, "{}", report.to_json())?,
        Format::Csv => {
            writeln!(out, "check,verdict")?;
            for (id, v) in &report.verdicts {
                writeln!(out, "{id},{v}")?;
            }
        }
    }
    Ok(report.pass)
}

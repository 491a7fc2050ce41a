//! `dualhjb` — value surfaces and feedback controls for cone-constrained
//! utility maximization, computed through the dual heat flow.
//!
//! Exit codes: 0 = run completed and every check passed; 1 = usage,
//! configuration, or engineering failure; 2 = run completed but at least
//! one check failed (see `run_report.json`).

mod commands;
mod config;
mod report;

use clap::{Parser, Subcommand};
use commands::CliError;
use config::parse_config;
use report::{fnv1a64, RunReport};
use std::path::PathBuf;

#[derive(Parser)]
#[command(
    name = "dualhjb",
    version,
    about = "Smooth value surfaces and optimal feedback controls for \
             cone-constrained utility maximization via convex duality",
    after_help = "Exit codes: 0 = all checks passed, 1 = usage or engineering \
                  error, 2 = a check failed (details in run_report.json)."
)]
struct Cli {
    /// Scenario configuration (JSON). Required by every subcommand except
    /// selftest.
    #[arg(long, global = true, env = "DUALHJB_CONFIG", value_name = "FILE")]
    config: Option<PathBuf>,

    /// Override the configuration's random seed.
    #[arg(long, global = true, env = "DUALHJB_SEED")]
    seed: Option<u64>,

    /// Output directory (defaults to the configuration's output.dir).
    #[arg(long, global = true, env = "DUALHJB_OUT", value_name = "DIR")]
    out: Option<PathBuf>,

    /// Worker threads for parallel sections. Results are bit-identical for
    /// every worker count; this only trades wall time.
    #[arg(long, global = true, env = "DUALHJB_WORKERS")]
    workers: Option<usize>,

    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Clone, Copy)]
enum Cmd {
    /// Tabulate the dual value surface V̂(t,y) and its derivatives.
    SolveDual,
    /// Tabulate the primal value surface u(t,x) and its derivatives.
    SolvePrimal,
    /// Tabulate the optimal feedback control π*(t,x).
    Control,
    /// Monte Carlo verification of the value under the tabulated control.
    Simulate,
    /// Run the full verification battery (conjugacy, curvature, residuals,
    /// growth, Monte Carlo, duality pairing, scheme convergence).
    Verify,
    /// Sweep the CVaR trade-off weight and emit the risk-return frontier.
    CvarFrontier,
    /// Arrow–Pratt risk-aversion profile and monotonicity checks.
    RiskProfile,
    /// Configuration-free deterministic smoke test with closed-form anchors.
    Selftest,
}

impl Cmd {
    fn name(self) -> &'static str {
        match self {
            Cmd::SolveDual => "solve-dual",
            Cmd::SolvePrimal => "solve-primal",
            Cmd::Control => "control",
            Cmd::Simulate => "simulate",
            Cmd::Verify => "verify",
            Cmd::CvarFrontier => "cvar-frontier",
            Cmd::RiskProfile => "risk-profile",
            Cmd::Selftest => "selftest",
        }
    }
}

fn main() {
    std::process::exit(run());
}

fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version print to stdout and succeed; genuine usage
            // errors (unknown subcommand, bad flag) print to stderr and
            // exit 1, keeping 2 reserved for check failures.
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };

    if let Some(w) = cli.workers {
        if w == 0 {
            eprintln!("error: --workers must be at least 1");
            return 1;
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(w).build_global() {
            eprintln!("error: could not size the worker pool: {e}");
            return 1;
        }
    }

    match execute(&cli) {
        Ok((mut report, out_dir)) => {
            let path = match report.write(&out_dir) {
                Ok(p) => p,
                Err(e) => {
                    eprintln!("error: cannot write the run report: {e}");
                    return 1;
                }
            };
            for c in &report.checks {
                println!("[{}] {}: {}", if c.passed { "ok" } else { "FAIL" }, c.name, c.detail);
            }
            println!(
                "{}: {} ({})",
                report.subcommand,
                if report.passed { "PASS" } else { "FAIL" },
                path.display()
            );
            if report.passed {
                0
            } else {
                2
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn execute(cli: &Cli) -> Result<(RunReport, PathBuf), CliError> {
    let name = cli.cmd.name();

    if matches!(cli.cmd, Cmd::Selftest) {
        let seed = cli.seed.unwrap_or(7);
        let out_dir = cli.out.clone().unwrap_or_else(|| PathBuf::from("out"));
        std::fs::create_dir_all(&out_dir)
            .map_err(|e| CliError::Engineering(format!("{}: {e}", out_dir.display())))?;
        let mut report = RunReport::new(name, "none".to_string(), seed);
        commands::selftest(seed, &out_dir, &mut report)?;
        return Ok((report, out_dir));
    }

    let cfg_path = cli.config.as_ref().ok_or_else(|| {
        CliError::Config(format!("--config is required for {name} (or set DUALHJB_CONFIG)"))
    })?;
    let text = std::fs::read_to_string(cfg_path)
        .map_err(|e| CliError::Config(format!("{}: {e}", cfg_path.display())))?;
    let mut cfg = parse_config(&text)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }

    // Fingerprint and echo the *effective* configuration (defaults filled,
    // seed resolved) so the run is reproducible from the echo alone.
    let canonical = serde_json::to_string(&cfg)
        .map_err(|e| CliError::Engineering(format!("cannot serialize the configuration: {e}")))?;
    let hash = format!("fnv1a64:{:016x}", fnv1a64(canonical.as_bytes()));
    println!(
        "{}",
        serde_json::to_string_pretty(&cfg).expect("pretty form of a serializable value")
    );

    let out_dir = cli.out.clone().unwrap_or_else(|| PathBuf::from(&cfg.output.dir));
    std::fs::create_dir_all(&out_dir)
        .map_err(|e| CliError::Engineering(format!("{}: {e}", out_dir.display())))?;

    let mut report = RunReport::new(name, hash, cfg.seed);
    match cli.cmd {
        Cmd::SolveDual => commands::solve_dual(&cfg, &out_dir, &mut report)?,
        Cmd::SolvePrimal => commands::solve_primal(&cfg, &out_dir, &mut report)?,
        Cmd::Control => commands::control(&cfg, &out_dir, &mut report)?,
        Cmd::Simulate => commands::simulate(&cfg, &out_dir, &mut report)?,
        Cmd::Verify => commands::verify(&cfg, &out_dir, &mut report)?,
        Cmd::CvarFrontier => commands::cvar_frontier(&cfg, &out_dir, &mut report)?,
        Cmd::RiskProfile => commands::risk_profile(&cfg, &out_dir, &mut report)?,
        Cmd::Selftest => unreachable!("handled above"),
    }
    Ok((report, out_dir))
}

use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;

use nhdiff::checks::{self, CheckResult, CHECKS};
use nhdiff::cli::{self, RunConfig, DEFAULT_OUT, EXIT_CHECK_FAILURE};
use nhdiff::io::{to_json, write_artifact};
use nhdiff::Error;

/// Nonholonomic geometry, metric ansatz solutions and relativistic diffusion.
///
/// Runs the command named in a JSON configuration, or one or all acceptance checks.
#[derive(Parser, Debug)]
#[command(name = "nhdiff", version)]
struct Args {
    /// Run configuration (JSON).
    #[arg(long, value_name = "PATH", required_unless_present_any = ["check", "list_checks"])]
    config: Option<PathBuf>,

    /// Master seed; overrides the configuration (checks default to 2024).
    #[arg(long, value_name = "N")]
    seed: Option<u64>,

    /// Worker threads.
    #[arg(long, value_name = "N", env = "NHDIFF_THREADS")]
    threads: Option<usize>,

    /// Output directory; overrides the configuration.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,

    /// Run one acceptance check by name or number, or `all`.
    #[arg(long, value_name = "NAME", conflicts_with = "config")]
    check: Option<String>,

    /// List the acceptance checks and exit.
    #[arg(long)]
    list_checks: bool,

    /// Print the report as JSON instead of one line per check.
    #[arg(long)]
    json: bool,
}

fn fail(e: &Error) -> ExitCode {
    eprintln!("error: {e}");
    ExitCode::from(e.exit_code() as u8)
}

fn run_checks(args: &Args, name: &str) -> Result<i32, Error> {
    let seed = args.seed.unwrap_or(checks::DEFAULT_SEED);
    let results: Vec<CheckResult> = cli::with_threads(args.threads, || {
        if name == "all" {
            Ok(checks::run_all(seed))
        } else {
            checks::run_check(name, seed).map(|r| vec![r])
        }
    })??;
    let report = to_json(&results)?;
    if args.json {
        println!("{report}");
    } else {
        for r in &results {
            println!("{}", r.line());
        }
    }
    if let Some(dir) = &args.out {
        write_artifact(&dir.join("checks.json"), format!("{report}\n").as_bytes())?;
    }
    Ok(if results.iter().all(|r| r.pass) { 0 } else { EXIT_CHECK_FAILURE })
}

fn run_config(args: &Args, path: &PathBuf) -> Result<i32, Error> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    let mut cfg: RunConfig = match cli::parse_config(&text) {
        Ok(c) => c,
        Err(errors) => {
            for e in &errors {
                eprintln!("config error: {e}");
            }
            return Ok(1);
        }
    };
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    let dir = args.out.clone().or_else(|| cfg.out.clone()).unwrap_or_else(|| PathBuf::from(DEFAULT_OUT));
    let out = cli::with_threads(args.threads, || cli::run(&cfg))??;
    out.write(&dir)?;
    let r = &out.report;
    if args.json {
        println!("{}", to_json(r)?);
    } else {
        for c in &r.checks {
            println!("{}", c.line());
        }
        println!("{} file(s) and report.json written to {} ({:.2} s)", r.artifacts.len(), dir.display(), r.wall_seconds);
    }
    Ok(r.exit_code())
}

fn main() -> ExitCode {
    let args = Args::parse();
    if args.list_checks {
        for c in &CHECKS {
            println!("{:2} {:24} {}", c.id, c.name, c.title);
        }
        return ExitCode::SUCCESS;
    }
    let result = match (&args.check, &args.config) {
        (Some(name), _) => run_checks(&args, name),
        (None, Some(path)) => run_config(&args, path),
        (None, None) => unreachable!("clap requires --config or --check"),
    };
    match result {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => fail(&e),
    }
}

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::process::ExitCode;

use clap::Parser;
use dpguard::{evaluate_defense, BudgetLedger, CohortSpec};
use dpguard_interface::calibrate::calibrate;
use dpguard_interface::config::{CalibrateArgs, EvaluateArgs};
use dpguard_interface::{run_defend, AppConfig, AppState, Cli, Command};
use tracing_subscriber::EnvFilter;

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            EnvFilter::try_from_env("DPGUARD_LOG").unwrap_or_else(|_| EnvFilter::new("warn")),
        )
        .with_writer(io::stderr)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::FAILURE
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = match &cli.command {
        Command::Defend => defend(&cli),
        Command::Calibrate(args) => run_calibrate(&cli, args),
        Command::Evaluate(args) => evaluate(&cli, args),
        Command::Serve => serve(&cli),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

type AnyResult = Result<(), Box<dyn std::error::Error>>;

fn defend(cli: &Cli) -> AnyResult {
    let cfg = AppConfig::resolve(&cli.common)?;
    let ledger = match (&cfg.budget, &cfg.ledger) {
        (Some(p), Some(path)) => Some(BudgetLedger::open(path, *p)?),
        (Some(p), None) => Some(BudgetLedger::new(*p)?),
        (None, _) => None,
    };
    let input: Box<dyn Read> = match &cfg.input {
        Some(path) => Box::new(File::open(path)?),
        None => Box::new(io::stdin().lock()),
    };
    let output: Box<dyn Write> = match &cfg.output {
        Some(path) => Box::new(File::create(path)?),
        None => Box::new(io::stdout().lock()),
    };
    let summary = run_defend(
        BufReader::new(input),
        BufWriter::new(output),
        io::stderr().lock(),
        &cfg,
        ledger.as_ref(),
    )?;
    tracing::info!(
        records = summary.records,
        failed = summary.failed,
        "batch finished"
    );
    Ok(())
}

fn run_calibrate(cli: &Cli, args: &CalibrateArgs) -> AnyResult {
    let mechanism = if args.draws {
        Some(AppConfig::resolve(&cli.common)?.mechanism)
    } else {
        None
    };
    let report = calibrate(&args.y, args.y_prime.as_deref(), mechanism.as_ref())?;
    if args.json {
        println!("{}", serde_json::to_string(&report)?);
    } else {
        print!("{}", report.to_kv());
    }
    Ok(())
}

fn evaluate(cli: &Cli, args: &EvaluateArgs) -> AnyResult {
    let cfg = AppConfig::resolve(&cli.common)?;
    let spec = CohortSpec::new(args.k, args.n_members, args.n_nonmembers)
        .with_concentrations(args.member_concentration, args.nonmember_concentration)
        .with_seed(args.cohort_seed);
    let report = evaluate_defense(&spec, &cfg.mechanism, cfg.policy.as_ref())?;
    if args.json {
        println!("{}", serde_json::to_string(&report)?);
    } else {
        print!("{}", report.to_kv());
    }
    Ok(())
}

fn serve(cli: &Cli) -> AnyResult {
    let cfg = AppConfig::resolve(&cli.common)?;
    let state = AppState::from_config(cfg)?;
    tokio::runtime::Runtime::new()?.block_on(dpguard_interface::server::serve(state))?;
    Ok(())
}
